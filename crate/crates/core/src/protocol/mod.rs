//! The two-stage GZSL training and evaluation protocol: stage-1 training
//! with per-epoch calibration search on the validation split, stage-2
//! retraining on train plus validation, calibrated stacking, and
//! mean-class-accuracy S/U/HM/ZSL reporting.

mod checkpoint;
mod export;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, StoredCalibration};
pub use export::export_embeddings;
pub use train::{
    class_table, embed_features, evaluate, run_two_stage, search_calibration, search_grid,
    train_stage, EvalSides, StageOutcome, TwoStageResult, ValidationSplit,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DataError;
use crate::model::{AvcaConfig, EvalOutput, ModelError};
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("configuration error: {reason}")]
    Config { reason: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: training aborted")]
    NumericFailure { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Reduce-on-plateau settings fed to the scheduler each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            patience: 3,
            factor: 0.1,
        }
    }
}

/// Inclusive calibration grid, 0.0 to 3.0 in steps of 0.2 by default
/// (16 values).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationGrid {
    pub start: f32,
    pub end: f32,
    pub step: f32,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            end: 3.0,
            step: 0.2,
        }
    }
}

impl CalibrationGrid {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.step > 0.0 && self.end >= self.start && self.start >= 0.0) {
            return Err(ProtocolError::Config {
                reason: format!(
                    "calibration grid [{}, {}] step {} is not a non-empty ascending grid",
                    self.start, self.end, self.step
                ),
            });
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f32> {
        let count = ((self.end - self.start) / self.step + 0.5).floor() as usize + 1;
        (0..count).map(|i| self.start + i as f32 * self.step).collect()
    }
}

/// Everything one training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: AvcaConfig,
    pub stage1_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    pub calibration: CalibrationGrid,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: AvcaConfig::default(),
            stage1_epochs: 50,
            batch_size: 64,
            learning_rate: 0.001,
            scheduler: SchedulerConfig::default(),
            seed: 42,
            calibration: CalibrationGrid::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.stage1_epochs == 0 {
            return Err(ProtocolError::Config {
                reason: "stage1_epochs must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(ProtocolError::Config {
                reason: "batch_size must be positive".into(),
            });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ProtocolError::Config {
                reason: format!("learning rate {} must be positive", self.learning_rate),
            });
        }
        self.calibration.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// Harmonic mean of the seen and unseen scores; zero whenever either side
/// is zero.
pub fn harmonic_mean(s: f32, u: f32) -> f32 {
    if s <= 0.0 || u <= 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Adds `gamma` to the distances of every seen-side class, leaving unseen
/// columns untouched. `seen_mask` aligns with the distance columns.
pub fn apply_calibrated_stacking(distances: &mut [Vec<f32>], seen_mask: &[bool], gamma: f32) {
    assert!(gamma >= 0.0, "calibration constant must be non-negative");
    for row in distances.iter_mut() {
        debug_assert_eq!(row.len(), seen_mask.len());
        for (d, &seen) in row.iter_mut().zip(seen_mask) {
            if seen {
                *d += gamma;
            }
        }
    }
}

/// The winning grid point of a calibration search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaChoice {
    pub gamma: f32,
    pub s: f32,
    pub u: f32,
    pub hm: f32,
}

/// One training epoch in a stage trace; validation metrics are present in
/// stage 1 only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub loss: f32,
    pub val: Option<GammaChoice>,
}

/// Stage-1 selection: the calibration constant, its validation HM, the
/// epoch budget for stage 2, and the full per-epoch trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub best_gamma: f32,
    pub best_hm: f32,
    pub selected_epochs: usize,
    pub trace: Vec<EpochPoint>,
}

/// Final GZSL/ZSL report. Accuracies are percentages; `per_class` holds the
/// GZSL per-class accuracies at the reported calibration constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "S")]
    pub s: f32,
    #[serde(rename = "U")]
    pub u: f32,
    #[serde(rename = "HM")]
    pub hm: f32,
    #[serde(rename = "ZSL")]
    pub zsl: f32,
    pub gamma: f32,
    pub per_class: BTreeMap<u32, f32>,
    #[serde(skip)]
    pub eval_output: EvalOutput,
}

impl EvalReport {
    /// One-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "S {:.2}  U {:.2}  HM {:.2}  ZSL {:.2}  (gamma {:.2}, output {:?})",
            self.s, self.u, self.hm, self.zsl, self.gamma, self.eval_output
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_sixteen_inclusive_points() {
        let grid = CalibrationGrid::default();
        let values = grid.values();
        assert_eq!(values.len(), 16);
        assert_eq!(values[0], 0.0);
        assert!((values[15] - 3.0).abs() < 1e-6);
        assert!((values[1] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn harmonic_mean_reproduces_published_rows() {
        assert!((harmonic_mean(51.53, 18.43) - 27.15).abs() <= 0.01);
        assert!((harmonic_mean(24.86, 8.02) - 12.13).abs() <= 0.01);
    }

    #[test]
    fn harmonic_mean_identities() {
        assert_eq!(harmonic_mean(37.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 12.0), 0.0);
        for x in [1.0f32, 13.7, 55.0, 100.0] {
            assert!((harmonic_mean(x, x) - x).abs() < 1e-4);
            assert!(harmonic_mean(x, 2.0 * x) <= 2.0 * x.min(2.0 * x));
        }
        // Symmetry and the 2*min bound.
        assert_eq!(harmonic_mean(30.0, 60.0), harmonic_mean(60.0, 30.0));
        assert!(harmonic_mean(30.0, 60.0) <= 2.0 * 30.0);
    }

    #[test]
    fn calibration_shifts_only_seen_columns() {
        let mut d = vec![vec![1.0f32, 2.0, 3.0], vec![0.5, 0.5, 0.5]];
        apply_calibrated_stacking(&mut d, &[true, false, true], 0.4);
        assert_eq!(d[0], vec![1.4, 2.0, 3.4]);
        assert_eq!(d[1], vec![0.9, 0.5, 0.9]);
    }

    #[test]
    fn gamma_zero_is_identity() {
        let original = vec![vec![1.0f32, 2.0], vec![3.0, 4.0]];
        let mut d = original.clone();
        apply_calibrated_stacking(&mut d, &[true, false], 0.0);
        assert_eq!(d, original);
    }

    #[test]
    fn default_train_config_is_valid() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
