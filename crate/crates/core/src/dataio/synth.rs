//! Synthetic audio-visual GZSL benchmark.
//!
//! Per class, a unit-norm prototype in embedding space doubles as the class
//! label embedding; audio and visual features are fixed random projections
//! of the prototype plus isotropic Gaussian noise. Prototypes are drawn
//! from a shared low-rank latent subspace, so the seen classes span the
//! geometry that unseen classes live in: zero-shot transfer is solvable by
//! structure rather than memorisation, with a nearest-prototype oracle as
//! the accuracy ceiling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::split::{build_splits, ClassCounts, SplitRatios, SplitSpec};
use super::{
    write_embeddings, write_features, ClassEmbeddingTable, ClassEntry, DataError, DatasetBundle,
    FeatureRecord, Manifest, Partitions, SubsetFiles,
};
use crate::numerics::rng::stream;

const LANE_LATENT: u64 = 0x4c41_544e; // "LATN"
const LANE_PROTO: u64 = 0x5052_4f54; // "PROT"
const LANE_MIX_A: u64 = 0x4d49_5841; // "MIXA"
const LANE_MIX_V: u64 = 0x4d49_5856; // "MIXV"
const LANE_NOISE: u64 = 0x4e4f_4953; // "NOIS"

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dataset: String,
    pub seen_classes: usize,
    pub val_unseen_classes: usize,
    pub test_unseen_classes: usize,
    pub samples_per_class: usize,
    /// Isotropic feature-noise scale, calibrated so the nearest-prototype
    /// oracle clears 90% unseen accuracy on the default configuration.
    pub sigma: f32,
    pub embed_dim: usize,
    /// Rank of the latent subspace the prototypes are drawn from. Must not
    /// exceed the seen-class count or unseen classes leave the span the
    /// model can learn.
    pub latent_rank: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// Seeds the modality mixing matrices and the latent basis.
    pub mixing_seed: u64,
    pub seed: u64,
    pub forced_seen: Vec<u32>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic-avgzsl".into(),
            seen_classes: 20,
            val_unseen_classes: 10,
            test_unseen_classes: 10,
            samples_per_class: 50,
            sigma: 3.0,
            embed_dim: 300,
            latent_rank: 16,
            audio_dim: 512,
            visual_dim: 512,
            mixing_seed: 7,
            seed: 42,
            forced_seen: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn total_classes(&self) -> usize {
        self.seen_classes + self.val_unseen_classes + self.test_unseen_classes
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: String| Err(DataError::Split { reason });
        if self.seen_classes == 0 || self.val_unseen_classes == 0 || self.test_unseen_classes == 0
        {
            return bad("every class partition needs at least one class".into());
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return bad(format!("sigma {} must be finite and non-negative", self.sigma));
        }
        if self.latent_rank == 0 || self.latent_rank > self.embed_dim {
            return bad(format!(
                "latent_rank {} must lie in [1, embed_dim {}]",
                self.latent_rank, self.embed_dim
            ));
        }
        Ok(())
    }
}

/// A generated dataset plus the generator's private projections, which the
/// oracle needs.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub bundle: DatasetBundle,
    pub split: SplitSpec,
    pub config: SynthConfig,
    p_audio: Vec<f32>,
    p_visual: Vec<f32>,
}

/// Nearest-prototype accuracies via the generator's known projections: the
/// ceiling any learned model is measured against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Per-subset accuracy with all classes as candidates.
    pub per_subset: BTreeMap<String, f64>,
    /// ts(U) accuracy with candidates restricted to the test-unseen classes.
    pub zsl_test_unseen: f64,
    pub sigma: f32,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

/// Deterministically generates features, embeddings, and splits from the
/// configuration alone.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthDataset, DataError> {
    config.validate()?;
    let classes = config.total_classes();
    let (kd, rank) = (config.embed_dim, config.latent_rank);

    let latent = normals(&mut stream(config.mixing_seed, LANE_LATENT, 0, 0), kd * rank);
    let p_audio = normals(
        &mut stream(config.mixing_seed, LANE_MIX_A, 0, 0),
        config.audio_dim * kd,
    );
    let p_visual = normals(
        &mut stream(config.mixing_seed, LANE_MIX_V, 0, 0),
        config.visual_dim * kd,
    );

    let mut embeddings = ClassEmbeddingTable::new(kd);
    let mut prototypes: Vec<Vec<f32>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let z = normals(&mut stream(config.seed, LANE_PROTO, c as u64, 0), rank);
        let mut e = vec![0.0f32; kd];
        for (i, e_i) in e.iter_mut().enumerate() {
            let row = &latent[i * rank..(i + 1) * rank];
            *e_i = row.iter().zip(&z).map(|(l, z)| l * z).sum();
        }
        let norm = e.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        for v in e.iter_mut() {
            *v /= norm;
        }
        embeddings.insert(c as u32, e.clone())?;
        embeddings.set_name(c as u32, format!("class_{c:03}"));
        prototypes.push(e);
    }

    let project = |p: &[f32], rows: usize, e: &[f32]| -> Vec<f32> {
        (0..rows)
            .map(|i| p[i * kd..(i + 1) * kd].iter().zip(e).map(|(a, b)| a * b).sum())
            .collect()
    };

    let mut records = Vec::with_capacity(classes * config.samples_per_class);
    for (c, proto) in prototypes.iter().enumerate() {
        let audio_base = project(&p_audio, config.audio_dim, proto);
        let visual_base = project(&p_visual, config.visual_dim, proto);
        for k in 0..config.samples_per_class {
            let mut rng = stream(config.seed, LANE_NOISE, c as u64, k as u64);
            let noise_a = normals(&mut rng, config.audio_dim);
            let noise_v = normals(&mut rng, config.visual_dim);
            let audio: Vec<f32> = audio_base
                .iter()
                .zip(noise_a)
                .map(|(b, n)| b + config.sigma * n)
                .collect();
            let visual: Vec<f32> = visual_base
                .iter()
                .zip(noise_v)
                .map(|(b, n)| b + config.sigma * n)
                .collect();
            records.push(FeatureRecord {
                sample_id: (c * config.samples_per_class + k) as u64 + 1,
                class_id: c as u32,
                audio,
                visual,
            });
        }
    }

    let pairs: Vec<(u64, u32)> = records.iter().map(|r| (r.sample_id, r.class_id)).collect();
    let split = build_splits(
        &pairs,
        ClassCounts {
            seen: config.seen_classes,
            val_unseen: config.val_unseen_classes,
            test_unseen: config.test_unseen_classes,
        },
        &config.forced_seen,
        SplitRatios::default(),
        config.seed,
    )?;

    let by_id: BTreeMap<u64, FeatureRecord> =
        records.into_iter().map(|r| (r.sample_id, r)).collect();
    let collect = |ids: &[u64]| -> Vec<FeatureRecord> {
        ids.iter().map(|id| by_id[id].clone()).collect()
    };

    let manifest = Manifest {
        dataset: config.dataset.clone(),
        classes: (0..classes as u32)
            .map(|id| ClassEntry {
                id,
                name: embeddings.name(id).unwrap().to_string(),
            })
            .collect(),
        partitions: Partitions {
            seen: split.seen_classes.clone(),
            val_unseen: split.val_unseen_classes.clone(),
            test_unseen: split.test_unseen_classes.clone(),
        },
        forced_seen: split.forced_seen.clone(),
        files: SubsetFiles {
            tr: "tr.avzf".into(),
            val_seen: "val_seen.avzf".into(),
            val_unseen: "val_unseen.avzf".into(),
            test_seen: "test_seen.avzf".into(),
            test_unseen: "test_unseen.avzf".into(),
            embeddings: "embeddings.avzw".into(),
        },
    };

    let bundle = DatasetBundle {
        manifest,
        tr: collect(&split.tr),
        val_seen: collect(&split.val_seen),
        val_unseen: collect(&split.val_unseen),
        test_seen: collect(&split.test_seen),
        test_unseen: collect(&split.test_unseen),
        embeddings,
        audio_dim: config.audio_dim,
        visual_dim: config.visual_dim,
    };
    bundle.validate()?;
    Ok(SynthDataset {
        bundle,
        split,
        config: config.clone(),
        p_audio,
        p_visual,
    })
}

impl SynthDataset {
    /// Row-major audio mixing matrix `[audio_dim x embed_dim]`.
    pub fn mixing_audio(&self) -> &[f32] {
        &self.p_audio
    }

    /// Row-major visual mixing matrix `[visual_dim x embed_dim]`.
    pub fn mixing_visual(&self) -> &[f32] {
        &self.p_visual
    }

    /// Writes the five feature files, the embedding file, `manifest.json`,
    /// and `oracle.json`; returns the manifest path.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf, DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let b = &self.bundle;
        let files = &b.manifest.files;
        for (rel, records) in [
            (&files.tr, &b.tr),
            (&files.val_seen, &b.val_seen),
            (&files.val_unseen, &b.val_unseen),
            (&files.test_seen, &b.test_seen),
            (&files.test_unseen, &b.test_unseen),
        ] {
            write_features(records, b.audio_dim, b.visual_dim, &dir.join(rel))?;
        }
        write_embeddings(&b.embeddings, &dir.join(&files.embeddings))?;
        let manifest_path = dir.join("manifest.json");
        b.manifest.save(&manifest_path)?;
        let oracle = self.oracle_accuracy();
        let oracle_path = dir.join("oracle.json");
        std::fs::write(
            &oracle_path,
            serde_json::to_string_pretty(&oracle).expect("oracle serialises"),
        )
        .map_err(|e| DataError::io(&oracle_path, e))?;
        Ok(manifest_path)
    }

    /// Nearest-prototype classification through the pseudo-inverse of the
    /// visual mixing matrix: recover an embedding estimate from each visual
    /// feature and pick the class with the highest cosine to it.
    pub fn oracle_accuracy(&self) -> OracleReport {
        let kd = self.config.embed_dim;
        let rows = self.config.visual_dim;
        let p = DMatrix::<f64>::from_row_iterator(
            rows,
            kd,
            self.p_visual.iter().map(|v| f64::from(*v)),
        );
        let pinv = p
            .clone()
            .pseudo_inverse(1e-10)
            .expect("visual mixing matrix admits a pseudo-inverse");

        let protos: Vec<(u32, Vec<f64>)> = self
            .bundle
            .embeddings
            .iter()
            .map(|(id, e)| (id, e.iter().map(|v| f64::from(*v)).collect()))
            .collect();
        let classify = |visual: &[f32], candidates: &[(u32, Vec<f64>)]| -> u32 {
            let v = DVector::<f64>::from_iterator(rows, visual.iter().map(|x| f64::from(*x)));
            let est = &pinv * v;
            let est_norm = est.norm().max(f64::MIN_POSITIVE);
            let mut best = (candidates[0].0, f64::NEG_INFINITY);
            for (id, proto) in candidates {
                let dot: f64 = proto.iter().zip(est.iter()).map(|(a, b)| a * b).sum();
                let pn: f64 = proto.iter().map(|a| a * a).sum::<f64>().sqrt();
                let cos = dot / (est_norm * pn.max(f64::MIN_POSITIVE));
                if cos > best.1 {
                    best = (*id, cos);
                }
            }
            best.0
        };

        let accuracy = |records: &[FeatureRecord], candidates: &[(u32, Vec<f64>)]| -> f64 {
            if records.is_empty() {
                return 0.0;
            }
            let hits = records
                .iter()
                .filter(|r| classify(&r.visual, candidates) == r.class_id)
                .count();
            hits as f64 / records.len() as f64
        };

        let mut per_subset = BTreeMap::new();
        for (name, records) in [
            ("tr", &self.bundle.tr),
            ("val_seen", &self.bundle.val_seen),
            ("val_unseen", &self.bundle.val_unseen),
            ("test_seen", &self.bundle.test_seen),
            ("test_unseen", &self.bundle.test_unseen),
        ] {
            per_subset.insert(name.to_string(), accuracy(records, &protos));
        }
        let unseen_protos: Vec<(u32, Vec<f64>)> = protos
            .iter()
            .filter(|(id, _)| self.split.test_unseen_classes.contains(id))
            .cloned()
            .collect();
        let zsl = accuracy(&self.bundle.test_unseen, &unseen_protos);
        OracleReport {
            per_subset,
            zsl_test_unseen: zsl,
            sigma: self.config.sigma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            seen_classes: 4,
            val_unseen_classes: 2,
            test_unseen_classes: 2,
            samples_per_class: 12,
            sigma: 0.0,
            embed_dim: 12,
            latent_rank: 4,
            audio_dim: 16,
            visual_dim: 16,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_generation_is_class_constant_and_oracle_perfect() {
        let ds = generate_synthetic(&tiny_config()).unwrap();
        let first = &ds.bundle.tr[0];
        for r in &ds.bundle.tr {
            if r.class_id == first.class_id {
                assert_eq!(r.audio, first.audio);
                assert_eq!(r.visual, first.visual);
            }
        }
        let oracle = ds.oracle_accuracy();
        for (name, acc) in &oracle.per_subset {
            assert_eq!(*acc, 1.0, "subset {name}");
        }
        assert_eq!(oracle.zsl_test_unseen, 1.0);
    }

    #[test]
    fn generation_is_a_pure_function_of_config() {
        let cfg = SynthConfig {
            sigma: 0.8,
            ..tiny_config()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.bundle, b.bundle);
    }

    #[test]
    fn disjoint_seeds_draw_distinct_prototypes() {
        // Default-scale embedding geometry, few samples to keep it fast.
        let cfg = SynthConfig {
            samples_per_class: 2,
            seen_classes: 4,
            val_unseen_classes: 2,
            test_unseen_classes: 2,
            sigma: 0.0,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&SynthConfig { seed: 4242, ..cfg }).unwrap();
        for (id, ea) in a.bundle.embeddings.iter() {
            let eb = b.bundle.embeddings.get(id).unwrap();
            let cos: f32 = ea.iter().zip(eb).map(|(x, y)| x * y).sum();
            assert!(cos.abs() < 0.5, "class {id}: cosine {cos}");
        }
    }

    #[test]
    fn heavy_noise_drops_oracle_to_chance_level() {
        let ds = generate_synthetic(&SynthConfig {
            sigma: 500.0,
            samples_per_class: 40,
            ..tiny_config()
        })
        .unwrap();
        let oracle = ds.oracle_accuracy();
        let acc = oracle.per_subset["tr"];
        // Chance is 1/8 for eight classes.
        assert!(acc < 0.45, "oracle acc {acc} should collapse toward chance");
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            sigma: 0.5,
            ..tiny_config()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let manifest_path = ds.write_to_dir(dir.path()).unwrap();
        let loaded = DatasetBundle::load(&manifest_path).unwrap();
        assert_eq!(loaded, ds.bundle);
        assert!(dir.path().join("oracle.json").exists());
    }

    #[test]
    fn record_counts_follow_the_split_arithmetic() {
        let ds = generate_synthetic(&SynthConfig {
            sigma: 0.3,
            ..SynthConfig::default()
        })
        .unwrap();
        let b = &ds.bundle;
        let total: usize = b.subsets().iter().map(|s| s.len()).sum();
        assert_eq!(total, 2000);
        // 20 seen x 50: 5 to ts(S), 4 of 45 to v(S), 41 to tr.
        assert_eq!(b.tr.len(), 20 * 41);
        assert_eq!(b.val_seen.len(), 20 * 4);
        // 10 val-unseen x 50: 5 to ts(S), 45 to v(U).
        assert_eq!(b.val_unseen.len(), 10 * 45);
        assert_eq!(b.test_seen.len(), 20 * 5 + 10 * 5);
        assert_eq!(b.test_unseen.len(), 10 * 50);
    }
}
