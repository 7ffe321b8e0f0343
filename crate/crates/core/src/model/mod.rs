//! The AVCA forward graph: audio/visual encoders joined by a shared
//! multi-head cross-attention block, projection heads into a common
//! embedding space, a shared decoder with reconstruction heads, and the
//! nearest-class-embedding classifier.

mod forward;
mod params;
mod predict;

pub use forward::{
    avca_forward, bind, cross_attention_forward, encoder_forward, project_labels, BoundParams,
    ForwardCtx, ForwardOutputs, Modality,
};
pub use params::{
    init_params, param_count, AttentionParams, AvcaParams, BatchNormParams, HeadParams,
    LayerNormParams, LinearParams, MlpBlockParams,
};
pub use predict::{combined_distances, predict, ClassTable};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;
use crate::objectives::LossMask;

/// Which modality branches are trained. Unimodal settings drop the other
/// branch and the cross-attention block entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveBranches {
    Both,
    AudioOnly,
    VisualOnly,
}

/// Which branch output drives classification at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOutput {
    #[default]
    ThetaV,
    ThetaA,
    /// Sum of the audio and visual distances per class.
    Sum,
    /// Per-class minimum of the audio and visual distances.
    Min,
}

/// Model hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AvcaConfig {
    pub k_input: usize,
    pub k_w2v: usize,
    pub k_f: usize,
    pub k_fhidd: usize,
    pub k_attnhidd: usize,
    pub k_proj: usize,
    pub heads: usize,
    pub margin: f32,
    pub r_enc: f32,
    pub r_proj: f32,
    pub r_dec: f32,
    pub use_cross_attention: bool,
    pub active_branches: ActiveBranches,
    pub eval_output: EvalOutput,
    pub loss_mask: LossMask,
}

impl Default for AvcaConfig {
    fn default() -> Self {
        Self {
            k_input: 512,
            k_w2v: 300,
            k_f: 300,
            k_fhidd: 512,
            k_attnhidd: 64,
            k_proj: 64,
            heads: 3,
            margin: 1.0,
            r_enc: 0.2,
            r_proj: 0.3,
            r_dec: 0.5,
            use_cross_attention: true,
            active_branches: ActiveBranches::Both,
            eval_output: EvalOutput::ThetaV,
            loss_mask: LossMask::default(),
        }
    }
}

impl AvcaConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.k_input,
            self.k_w2v,
            self.k_f,
            self.k_fhidd,
            self.k_attnhidd,
            self.k_proj,
            self.heads,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::InvalidConfig {
                reason: "all dimensions and the head count must be positive".into(),
            });
        }
        if self.k_f % self.heads != 0 {
            return Err(ModelError::InvalidConfig {
                reason: format!("k_f={} is not divisible by heads={}", self.k_f, self.heads),
            });
        }
        for (name, rate) in [
            ("r_enc", self.r_enc),
            ("r_proj", self.r_proj),
            ("r_dec", self.r_dec),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(ModelError::InvalidConfig {
                    reason: format!("{name}={rate} must lie in [0, 1)"),
                });
            }
        }
        let wants_audio = matches!(self.eval_output, EvalOutput::ThetaA | EvalOutput::Sum | EvalOutput::Min);
        let wants_visual = matches!(self.eval_output, EvalOutput::ThetaV | EvalOutput::Sum | EvalOutput::Min);
        if (wants_audio && self.active_branches == ActiveBranches::VisualOnly)
            || (wants_visual && self.active_branches == ActiveBranches::AudioOnly)
        {
            return Err(ModelError::InvalidConfig {
                reason: format!(
                    "eval output {:?} needs a branch disabled by {:?}",
                    self.eval_output, self.active_branches
                ),
            });
        }
        self.loss_mask.validate().map_err(|reason| ModelError::InvalidConfig { reason })?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.k_f / self.heads
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("class table is empty")]
    EmptyClassTable,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
