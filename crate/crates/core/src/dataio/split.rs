//! GZSL split construction: class partitioning with forced-seen classes and
//! per-class 0.9/0.1 video splits, seed-deterministic throughout.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::DataError;
use crate::numerics::rng::stream;

const LANE_CLASS_PART: u64 = 0x50415254; // "PART"
const LANE_SAMPLES: u64 = 0x53414d50; // "SAMP"

/// Held-out fractions: `test` carves ts(S) out of each seen-side class,
/// `val` then carves v(S) out of the remaining seen-class pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub val_holdout: f64,
    pub test_holdout: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            val_holdout: 0.1,
            test_holdout: 0.1,
        }
    }
}

/// Requested class-partition sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassCounts {
    pub seen: usize,
    pub val_unseen: usize,
    pub test_unseen: usize,
}

/// Class partition plus the per-subset sample-id lists.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitSpec {
    pub seen_classes: Vec<u32>,
    pub val_unseen_classes: Vec<u32>,
    pub test_unseen_classes: Vec<u32>,
    pub forced_seen: Vec<u32>,
    pub tr: Vec<u64>,
    pub val_seen: Vec<u64>,
    pub val_unseen: Vec<u64>,
    pub test_seen: Vec<u64>,
    pub test_unseen: Vec<u64>,
}

impl SplitSpec {
    pub fn subsets(&self) -> [(&'static str, &Vec<u64>); 5] {
        [
            ("tr", &self.tr),
            ("val_seen", &self.val_seen),
            ("val_unseen", &self.val_unseen),
            ("test_seen", &self.test_seen),
            ("test_unseen", &self.test_unseen),
        ]
    }
}

/// Splits `samples` (`(sample_id, class_id)` pairs) into the five GZSL
/// subsets. Classes partition into seen / validation-unseen / test-unseen
/// by seeded shuffle with `forced_seen` pinned to the seen side; videos of
/// seen-side classes then split 0.9/0.1 twice (test first, validation
/// second), flooring the held-out side.
pub fn build_splits(
    samples: &[(u64, u32)],
    counts: ClassCounts,
    forced_seen: &[u32],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitSpec, DataError> {
    let mut ids = BTreeSet::new();
    let mut by_class: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for (sample_id, class_id) in samples {
        if !ids.insert(*sample_id) {
            return Err(DataError::Split {
                reason: format!("duplicate sample id {sample_id}"),
            });
        }
        by_class.entry(*class_id).or_default().push(*sample_id);
    }
    let classes: Vec<u32> = by_class.keys().copied().collect();
    let requested = counts.seen + counts.val_unseen + counts.test_unseen;
    if requested != classes.len() {
        return Err(DataError::Split {
            reason: format!(
                "requested partition {}+{}+{} does not cover the {} classes present",
                counts.seen,
                counts.val_unseen,
                counts.test_unseen,
                classes.len()
            ),
        });
    }
    if forced_seen.len() > counts.seen {
        return Err(DataError::Split {
            reason: format!(
                "{} forced-seen classes exceed the seen budget {}",
                forced_seen.len(),
                counts.seen
            ),
        });
    }
    let forced: BTreeSet<u32> = forced_seen.iter().copied().collect();
    for c in &forced {
        if !by_class.contains_key(c) {
            return Err(DataError::Split {
                reason: format!("forced-seen class {c} has no samples"),
            });
        }
    }

    let mut free: Vec<u32> = classes.iter().copied().filter(|c| !forced.contains(c)).collect();
    free.shuffle(&mut stream(seed, LANE_CLASS_PART, 0, 0));
    let mut seen: Vec<u32> = forced.iter().copied().collect();
    let free_seen = counts.seen - seen.len();
    seen.extend(&free[..free_seen]);
    let mut val_unseen_classes: Vec<u32> = free[free_seen..free_seen + counts.val_unseen].to_vec();
    let mut test_unseen_classes: Vec<u32> = free[free_seen + counts.val_unseen..].to_vec();
    seen.sort_unstable();
    val_unseen_classes.sort_unstable();
    test_unseen_classes.sort_unstable();

    let mut spec = SplitSpec {
        seen_classes: seen.clone(),
        val_unseen_classes: val_unseen_classes.clone(),
        test_unseen_classes: test_unseen_classes.clone(),
        forced_seen: forced.iter().copied().collect(),
        ..SplitSpec::default()
    };

    let holdout = |n: usize, fraction: f64| (n as f64 * fraction).floor() as usize;
    for (&class_id, sample_ids) in &by_class {
        let mut pool = sample_ids.clone();
        pool.sort_unstable();
        pool.shuffle(&mut stream(seed, LANE_SAMPLES, u64::from(class_id), 0));
        if spec.test_unseen_classes.binary_search(&class_id).is_ok() {
            spec.test_unseen.extend(pool);
        } else {
            let test_n = holdout(pool.len(), ratios.test_holdout);
            spec.test_seen.extend(&pool[..test_n]);
            let rest = &pool[test_n..];
            if spec.seen_classes.binary_search(&class_id).is_ok() {
                let val_n = holdout(rest.len(), ratios.val_holdout);
                spec.val_seen.extend(&rest[..val_n]);
                spec.tr.extend(&rest[val_n..]);
            } else {
                // Validation-unseen class: the remainder is v(U).
                spec.val_unseen.extend(rest);
            }
        }
    }
    for (_, list) in [
        ("tr", &mut spec.tr),
        ("val_seen", &mut spec.val_seen),
        ("val_unseen", &mut spec.val_unseen),
        ("test_seen", &mut spec.test_seen),
        ("test_unseen", &mut spec.test_unseen),
    ] {
        list.sort_unstable();
    }
    Ok(spec)
}
