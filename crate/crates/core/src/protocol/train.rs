use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::{
    apply_calibrated_stacking, harmonic_mean, CalibrationResult, EpochPoint, EvalReport,
    GammaChoice, ProtocolError, TrainConfig,
};
use crate::dataio::{ClassEmbeddingTable, DatasetBundle, FeatureRecord};
use crate::model::{
    avca_forward, bind, combined_distances, init_params, predict, project_labels, AvcaConfig,
    AvcaParams, ClassTable, ForwardCtx,
};
use crate::numerics::rng::stream;
use crate::numerics::{AdamState, PlateauScheduler, Tape, TensorData};
use crate::objectives::{loss_total, sample_negatives};

const LANE_SHUFFLE: u64 = 0x53485546; // "SHUF"
const LANE_NEGATIVES: u64 = 0x4e454753; // "NEGS"

/// Validation material for stage-1 epochs.
#[derive(Clone, Copy, Debug)]
pub struct ValidationSplit<'a> {
    pub val_seen: &'a [FeatureRecord],
    pub val_unseen: &'a [FeatureRecord],
    pub seen_classes: &'a [u32],
    pub unseen_classes: &'a [u32],
}

/// Sample sets and class sides of one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EvalSides<'a> {
    pub seen_samples: &'a [FeatureRecord],
    pub unseen_samples: &'a [FeatureRecord],
    pub seen_classes: &'a [u32],
    pub unseen_classes: &'a [u32],
}

/// Trained parameters plus the per-epoch trace of one stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub params: AvcaParams<f32>,
    pub trace: Vec<EpochPoint>,
}

/// Everything `run_two_stage` produces.
#[derive(Clone, Debug)]
pub struct TwoStageResult {
    pub report: EvalReport,
    pub calibration: CalibrationResult,
    pub stage1: StageOutcome,
    pub stage2: StageOutcome,
}

fn batch_tensors(
    records: &[&FeatureRecord],
    embeddings: &ClassEmbeddingTable,
) -> Result<(TensorData<f32>, TensorData<f32>, TensorData<f32>, Vec<u32>), ProtocolError> {
    let rows = records.len();
    let (ad, vd) = (records[0].audio.len(), records[0].visual.len());
    let kd = embeddings.dim();
    let mut audio = Vec::with_capacity(rows * ad);
    let mut visual = Vec::with_capacity(rows * vd);
    let mut w = Vec::with_capacity(rows * kd);
    let mut labels = Vec::with_capacity(rows);
    for r in records {
        audio.extend_from_slice(&r.audio);
        visual.extend_from_slice(&r.visual);
        let e = embeddings
            .get(r.class_id)
            .ok_or(crate::dataio::DataError::MissingEmbedding {
                class_id: r.class_id,
            })?;
        w.extend_from_slice(e);
        labels.push(r.class_id);
    }
    Ok((
        TensorData::matrix(rows, ad, audio).expect("consistent audio dims"),
        TensorData::matrix(rows, vd, visual).expect("consistent visual dims"),
        TensorData::matrix(rows, kd, w).expect("consistent embedding dims"),
        labels,
    ))
}

/// Eval-mode branch embeddings of a subset, chunked at `batch` rows.
/// Returns `(theta_a, theta_v)`; a disabled branch yields `None`.
pub fn embed_features(
    params: &mut AvcaParams<f32>,
    config: &AvcaConfig,
    records: &[FeatureRecord],
    embeddings: &ClassEmbeddingTable,
    batch: usize,
) -> Result<(Option<TensorData<f32>>, Option<TensorData<f32>>), ProtocolError> {
    let mut theta_a: Vec<f32> = Vec::new();
    let mut theta_v: Vec<f32> = Vec::new();
    let refs: Vec<&FeatureRecord> = records.iter().collect();
    for chunk in refs.chunks(batch.max(1)) {
        let (a, v, _, _) = batch_tensors(chunk, embeddings)?;
        // theta_a/theta_v do not depend on w; a zero block keeps the
        // forward signature uniform.
        let w = TensorData::zeros(vec![chunk.len(), embeddings.dim()]);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params);
        let av = tape.constant(a);
        let vv = tape.constant(v);
        let wv = tape.constant(w);
        let ctx = ForwardCtx::eval();
        let out = avca_forward(&mut tape, params, &bound, config, av, vv, wv, &ctx)?;
        if let Some(t) = out.theta_a {
            theta_a.extend_from_slice(tape.value(t).data());
        }
        if let Some(t) = out.theta_v {
            theta_v.extend_from_slice(tape.value(t).data());
        }
    }
    let wrap = |data: Vec<f32>| {
        if data.is_empty() {
            None
        } else {
            Some(TensorData::matrix(records.len(), config.k_proj, data).expect("theta dims"))
        }
    };
    Ok((wrap(theta_a), wrap(theta_v)))
}

/// Projects the label embeddings of `class_ids` into the shared space,
/// eval mode.
pub fn class_table(
    params: &mut AvcaParams<f32>,
    config: &AvcaConfig,
    embeddings: &ClassEmbeddingTable,
    class_ids: &[u32],
) -> Result<ClassTable, ProtocolError> {
    let mut ids: Vec<u32> = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let kd = embeddings.dim();
    let mut w = Vec::with_capacity(ids.len() * kd);
    for id in &ids {
        let e = embeddings
            .get(*id)
            .ok_or(crate::dataio::DataError::MissingEmbedding { class_id: *id })?;
        w.extend_from_slice(e);
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let wv = tape.constant(TensorData::matrix(ids.len(), kd, w).expect("embedding dims"));
    let ctx = ForwardCtx::eval();
    let theta = project_labels(&mut tape, params, &bound, config, wv, &ctx)?;
    Ok(ClassTable::new(ids, tape.value(theta).clone())?)
}

struct GzslScores {
    s: f32,
    u: f32,
    hm: f32,
    per_class: BTreeMap<u32, f32>,
}

/// Distance matrix of one subset against the class table; empty subsets
/// yield an empty matrix.
fn side_distances(
    params: &mut AvcaParams<f32>,
    config: &TrainConfig,
    records: &[FeatureRecord],
    embeddings: &ClassEmbeddingTable,
    table: &ClassTable,
) -> Result<Vec<Vec<f32>>, ProtocolError> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let (a, v) = embed_features(params, &config.model, records, embeddings, config.batch_size)?;
    Ok(combined_distances(
        a.as_ref(),
        v.as_ref(),
        table,
        config.model.eval_output,
    )?)
}

/// Mean class accuracy over `classes`, ignoring classes with no samples
/// (each ignored class logs a warning).
fn mean_class_accuracy(
    hits: &BTreeMap<u32, (usize, usize)>,
    classes: &BTreeSet<u32>,
    side: &str,
) -> f32 {
    let mut acc = 0.0f64;
    let mut counted = 0usize;
    for c in classes {
        match hits.get(c) {
            Some((correct, total)) if *total > 0 => {
                acc += *correct as f64 / *total as f64;
                counted += 1;
            }
            _ => log::warn!("class {c} has no {side} test samples; excluded from the mean"),
        }
    }
    if counted == 0 {
        0.0
    } else {
        (100.0 * acc / counted as f64) as f32
    }
}

fn gzsl_scores(
    dist_seen_side: &[Vec<f32>],
    labels_seen_side: &[u32],
    dist_unseen_side: &[Vec<f32>],
    labels_unseen_side: &[u32],
    table: &ClassTable,
    seen_classes: &BTreeSet<u32>,
    unseen_classes: &BTreeSet<u32>,
    gamma: f32,
) -> GzslScores {
    let seen_mask: Vec<bool> = table
        .class_ids()
        .iter()
        .map(|id| seen_classes.contains(id))
        .collect();
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (dists, labels) in [
        (dist_seen_side, labels_seen_side),
        (dist_unseen_side, labels_unseen_side),
    ] {
        let mut adjusted = dists.to_vec();
        apply_calibrated_stacking(&mut adjusted, &seen_mask, gamma);
        let preds = predict(&adjusted, table);
        for (pred, label) in preds.iter().zip(labels) {
            let entry = hits.entry(*label).or_insert((0, 0));
            entry.1 += 1;
            if pred == label {
                entry.0 += 1;
            }
        }
    }
    let s = mean_class_accuracy(&hits, seen_classes, "seen");
    let u = mean_class_accuracy(&hits, unseen_classes, "unseen");
    let per_class = hits
        .iter()
        .map(|(c, (correct, total))| (*c, 100.0 * *correct as f32 / (*total).max(1) as f32))
        .collect();
    GzslScores {
        s,
        u,
        hm: harmonic_mean(s, u),
        per_class,
    }
}

/// Exhaustive sweep of `grid` over fixed distance matrices: for each
/// constant, seen-side distances grow by it, predictions re-derive, and
/// the S/U/HM triple is scored. The HM-maximising point wins; ties resolve
/// to the smallest constant.
#[allow(clippy::too_many_arguments)]
pub fn search_grid(
    dist_seen_side: &[Vec<f32>],
    labels_seen_side: &[u32],
    dist_unseen_side: &[Vec<f32>],
    labels_unseen_side: &[u32],
    table: &ClassTable,
    seen_classes: &BTreeSet<u32>,
    unseen_classes: &BTreeSet<u32>,
    grid: &[f32],
) -> GammaChoice {
    assert!(!grid.is_empty(), "calibration grid is empty");
    let mut best: Option<GammaChoice> = None;
    for &gamma in grid {
        let scores = gzsl_scores(
            dist_seen_side,
            labels_seen_side,
            dist_unseen_side,
            labels_unseen_side,
            table,
            seen_classes,
            unseen_classes,
            gamma,
        );
        let candidate = GammaChoice {
            gamma,
            s: scores.s,
            u: scores.u,
            hm: scores.hm,
        };
        if best.map_or(true, |b| candidate.hm > b.hm) {
            best = Some(candidate);
        }
    }
    best.expect("grid is non-empty")
}

/// Sweeps the calibration grid on the validation split and returns the
/// HM-maximising point (ties resolve to the smallest constant).
pub fn search_calibration(
    params: &mut AvcaParams<f32>,
    config: &TrainConfig,
    embeddings: &ClassEmbeddingTable,
    split: &ValidationSplit<'_>,
) -> Result<GammaChoice, ProtocolError> {
    let mut candidates: Vec<u32> = split.seen_classes.to_vec();
    candidates.extend_from_slice(split.unseen_classes);
    let table = class_table(params, &config.model, embeddings, &candidates)?;
    let dist_s = side_distances(params, config, split.val_seen, embeddings, &table)?;
    let dist_u = side_distances(params, config, split.val_unseen, embeddings, &table)?;
    let labels_s: Vec<u32> = split.val_seen.iter().map(|r| r.class_id).collect();
    let labels_u: Vec<u32> = split.val_unseen.iter().map(|r| r.class_id).collect();
    let seen_set: BTreeSet<u32> = split.seen_classes.iter().copied().collect();
    let unseen_set: BTreeSet<u32> = split.unseen_classes.iter().copied().collect();
    Ok(search_grid(
        &dist_s,
        &labels_s,
        &dist_u,
        &labels_u,
        &table,
        &seen_set,
        &unseen_set,
        &config.calibration.values(),
    ))
}

/// Full GZSL + ZSL evaluation at a fixed calibration constant.
pub fn evaluate(
    params: &mut AvcaParams<f32>,
    config: &TrainConfig,
    embeddings: &ClassEmbeddingTable,
    sides: EvalSides<'_>,
    gamma: f32,
) -> Result<EvalReport, ProtocolError> {
    let output = config.model.eval_output;
    let mut candidates: Vec<u32> = sides.seen_classes.to_vec();
    candidates.extend_from_slice(sides.unseen_classes);
    let table = class_table(params, &config.model, embeddings, &candidates)?;
    let dist_s = side_distances(params, config, sides.seen_samples, embeddings, &table)?;
    let dist_u = side_distances(params, config, sides.unseen_samples, embeddings, &table)?;
    let labels_s: Vec<u32> = sides.seen_samples.iter().map(|r| r.class_id).collect();
    let labels_u: Vec<u32> = sides.unseen_samples.iter().map(|r| r.class_id).collect();
    let seen_set: BTreeSet<u32> = sides.seen_classes.iter().copied().collect();
    let unseen_set: BTreeSet<u32> = sides.unseen_classes.iter().copied().collect();
    let scores = gzsl_scores(
        &dist_s, &labels_s, &dist_u, &labels_u, &table, &seen_set, &unseen_set, gamma,
    );

    // ZSL: search space restricted to the unseen classes, no calibration.
    let zsl_table = class_table(params, &config.model, embeddings, sides.unseen_classes)?;
    let zsl_dists = side_distances(params, config, sides.unseen_samples, embeddings, &zsl_table)?;
    let zsl_preds = predict(&zsl_dists, &zsl_table);
    let mut zsl_hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (pred, label) in zsl_preds.iter().zip(&labels_u) {
        let entry = zsl_hits.entry(*label).or_insert((0, 0));
        entry.1 += 1;
        if pred == label {
            entry.0 += 1;
        }
    }
    let zsl = mean_class_accuracy(&zsl_hits, &unseen_set, "zsl");

    Ok(EvalReport {
        s: scores.s,
        u: scores.u,
        hm: scores.hm,
        zsl,
        gamma,
        per_class: scores.per_class,
        eval_output: output,
    })
}

/// Trains `params` in place for `epochs` epochs over `training`. Stage-1
/// callers pass a validation split: each epoch then runs the calibration
/// search and feeds validation HM to the plateau scheduler. Without
/// validation (stage 2) the scheduler monitors the negated training loss.
pub fn train_stage(
    params: &mut AvcaParams<f32>,
    config: &TrainConfig,
    training: &[FeatureRecord],
    embeddings: &ClassEmbeddingTable,
    epochs: usize,
    validation: Option<ValidationSplit<'_>>,
) -> Result<Vec<EpochPoint>, ProtocolError> {
    config.validate()?;
    if training.is_empty() {
        return Err(ProtocolError::Config {
            reason: "training subset is empty".into(),
        });
    }
    for r in training {
        if embeddings.get(r.class_id).is_none() {
            return Err(ProtocolError::Config {
                reason: format!("training class {} has no embedding", r.class_id),
            });
        }
    }
    let mask = config.model.loss_mask;
    let margin = f64::from(config.model.margin);
    let mut adam = AdamState::new(
        config.learning_rate,
        params.learnables().iter().map(|(_, t)| t.numel()),
    );
    let mut scheduler = PlateauScheduler::new(
        config.learning_rate,
        config.scheduler.patience,
        config.scheduler.factor,
    );
    let mut trace = Vec::with_capacity(epochs);

    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..training.len()).collect();
        order.shuffle(&mut stream(config.seed, LANE_SHUFFLE, epoch as u64, 0));
        let mut loss_sum = 0.0f64;
        let mut row_count = 0usize;

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let records: Vec<&FeatureRecord> = chunk.iter().map(|&i| &training[i]).collect();
            let (a, v, w, labels) = batch_tensors(&records, embeddings)?;
            let mut tape = Tape::new();
            let bound = bind(&mut tape, params);
            let av = tape.constant(a);
            let vv = tape.constant(v);
            let wv = tape.constant(w);
            let ctx = ForwardCtx::train(config.seed, epoch as u64, batch_idx as u64);
            let out = avca_forward(&mut tape, params, &bound, &config.model, av, vv, wv, &ctx)?;
            let negatives = sample_negatives(
                &labels,
                &mut stream(config.seed, LANE_NEGATIVES, epoch as u64, batch_idx as u64),
            );
            let (vars, breakdown) =
                loss_total(&mut tape, &out, wv, &negatives.pairs(), &mask, margin)?;
            if !breakdown.total.is_finite() {
                return Err(ProtocolError::NumericFailure { epoch, batch: batch_idx });
            }
            tape.backward(vars.total)?;

            adam.lr = scheduler.lr();
            let zero_len: Vec<usize> = bound
                .ordered
                .iter()
                .map(|v| tape.value(*v).numel())
                .collect();
            let zeros: Vec<Option<Vec<f32>>> = bound
                .ordered
                .iter()
                .zip(&zero_len)
                .map(|(v, len)| match tape.grad(*v) {
                    Some(_) => None,
                    // A parameter cut from the graph (ablations) sees a zero
                    // gradient rather than an optimizer contract error.
                    None => Some(vec![0.0f32; *len]),
                })
                .collect();
            let mut pairs: Vec<(&mut [f32], Option<&[f32]>)> = Vec::with_capacity(64);
            for ((name_tensor, var), zero) in params
                .learnables_mut()
                .into_iter()
                .zip(&bound.ordered)
                .zip(&zeros)
            {
                let (_, tensor) = name_tensor;
                let grad: Option<&[f32]> = match zero {
                    Some(z) => Some(z.as_slice()),
                    None => tape.grad(*var),
                };
                pairs.push((tensor.data_mut(), grad));
            }
            adam.step(&mut pairs)?;

            loss_sum += f64::from(breakdown.total) * records.len() as f64;
            row_count += records.len();
        }

        let loss = (loss_sum / row_count as f64) as f32;
        let val = match &validation {
            Some(split) => {
                let choice = search_calibration(params, config, embeddings, split)?;
                scheduler.observe(choice.hm);
                Some(choice)
            }
            None => {
                scheduler.observe(-loss);
                None
            }
        };
        trace.push(EpochPoint { epoch, loss, val });
    }
    Ok(trace)
}

/// The full two-stage protocol: stage 1 on `tr` with per-epoch calibration
/// search, joint `(epoch, gamma)` selection by validation HM, stage 2
/// re-initialised from the same seed on `tr + v(S) + v(U)` for the selected
/// number of epochs, and the final report on the test subsets.
pub fn run_two_stage(
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<TwoStageResult, ProtocolError> {
    config.validate()?;
    let parts = &bundle.manifest.partitions;
    let validation = ValidationSplit {
        val_seen: &bundle.val_seen,
        val_unseen: &bundle.val_unseen,
        seen_classes: &parts.seen,
        unseen_classes: &parts.val_unseen,
    };

    let mut stage1_params = init_params(&config.model, config.seed)?;
    let stage1_trace = train_stage(
        &mut stage1_params,
        config,
        &bundle.tr,
        &bundle.embeddings,
        config.stage1_epochs,
        Some(validation),
    )?;

    // Joint argmax over (epoch, gamma); earlier epochs win ties.
    let best = stage1_trace
        .iter()
        .max_by(|a, b| {
            let (ha, hb) = (a.val.unwrap().hm, b.val.unwrap().hm);
            ha.partial_cmp(&hb)
                .unwrap()
                .then(b.epoch.cmp(&a.epoch))
        })
        .expect("stage 1 ran at least one epoch");
    let calibration = CalibrationResult {
        best_gamma: best.val.unwrap().gamma,
        best_hm: best.val.unwrap().hm,
        selected_epochs: best.epoch,
        trace: stage1_trace.clone(),
    };

    let mut stage2_training = bundle.tr.clone();
    stage2_training.extend_from_slice(&bundle.val_seen);
    stage2_training.extend_from_slice(&bundle.val_unseen);
    let mut stage2_params = init_params(&config.model, config.seed)?;
    let stage2_trace = train_stage(
        &mut stage2_params,
        config,
        &stage2_training,
        &bundle.embeddings,
        calibration.selected_epochs,
        None,
    )?;

    // After stage 2 the validation-unseen classes count as seen.
    let mut stage2_seen: Vec<u32> = parts.seen.clone();
    stage2_seen.extend_from_slice(&parts.val_unseen);
    let report = evaluate(
        &mut stage2_params,
        config,
        &bundle.embeddings,
        EvalSides {
            seen_samples: &bundle.test_seen,
            unseen_samples: &bundle.test_unseen,
            seen_classes: &stage2_seen,
            unseen_classes: &parts.test_unseen,
        },
        calibration.best_gamma,
    )?;

    Ok(TwoStageResult {
        report,
        calibration,
        stage1: StageOutcome {
            params: stage1_params,
            trace: stage1_trace,
        },
        stage2: StageOutcome {
            params: stage2_params,
            trace: stage2_trace,
        },
    })
}
