use rand_chacha::ChaCha8Rng;

use super::params::{
    AttentionParams, AvcaParams, BatchNormParams, HeadParams, LayerNormParams, LinearParams,
    MlpBlockParams,
};
use super::{ActiveBranches, AvcaConfig, ModelError};
use crate::numerics::rng::stream;
use crate::numerics::{Mode, NumericsError, Real, Tape, TensorData, Var};

const DROP_TAG: u64 = 0x44524f50; // "DROP"

// Stable dropout site ids: masks are keyed by (seed, site, epoch, batch) and
// never depend on graph construction order.
const SITE_ENC_A: [u64; 2] = [0, 1];
const SITE_ENC_V: [u64; 2] = [2, 3];
const SITE_FF_A: [u64; 2] = [4, 5];
const SITE_FF_V: [u64; 2] = [6, 7];
const SITE_PROJ_A: [u64; 2] = [8, 9];
const SITE_PROJ_V: [u64; 2] = [10, 11];
const SITE_W_PROJ: u64 = 12;
const SITE_DEC_A: u64 = 13;
const SITE_DEC_V: u64 = 14;
const SITE_DEC_W: u64 = 15;
const SITE_REC_A: u64 = 16;
const SITE_REC_V: u64 = 17;

/// Per-step forward context: the mode plus the stream key components that
/// make dropout masks reproducible.
#[derive(Clone, Copy, Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

impl ForwardCtx {
    pub fn train(seed: u64, epoch: u64, batch: u64) -> Self {
        Self {
            mode: Mode::Train,
            seed,
            epoch,
            batch,
        }
    }

    /// Deterministic inference context; no randomness is consumed.
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            seed: 0,
            epoch: 0,
            batch: 0,
        }
    }

    fn dropout_rng(&self, site: u64) -> ChaCha8Rng {
        stream(self.seed, DROP_TAG ^ site, self.epoch, self.batch)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundNorm {
    pub scale: Var,
    pub shift: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMlp {
    pub lin1: BoundLinear,
    pub bn1: BoundNorm,
    pub lin2: BoundLinear,
    pub bn2: BoundNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub query: BoundLinear,
    pub key: BoundLinear,
    pub value: BoundLinear,
    pub output: BoundLinear,
    pub ff1: BoundLinear,
    pub ff2: BoundLinear,
    pub norm1: BoundNorm,
    pub norm2: BoundNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub lin: BoundLinear,
    pub bn: BoundNorm,
}

/// Every learnable registered on a tape, mirroring [`AvcaParams`]. `ordered`
/// follows the canonical order of `AvcaParams::learnables`, which is what
/// pairs gradients with parameters in the optimizer.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub enc_a: BoundMlp,
    pub enc_v: BoundMlp,
    pub attention: BoundAttention,
    pub proj_a: BoundMlp,
    pub proj_v: BoundMlp,
    pub w_proj: BoundHead,
    pub decoder: BoundHead,
    pub rec_a: BoundHead,
    pub rec_v: BoundHead,
    pub ordered: Vec<Var>,
}

struct Binder<'a, S: Real> {
    tape: &'a mut Tape<S>,
    ordered: Vec<Var>,
}

impl<'a, S: Real> Binder<'a, S> {
    fn leaf(&mut self, t: &TensorData<S>) -> Var {
        let v = self.tape.leaf(t.clone(), true);
        self.ordered.push(v);
        v
    }

    fn linear(&mut self, p: &LinearParams<S>) -> BoundLinear {
        BoundLinear {
            w: self.leaf(&p.w),
            b: self.leaf(&p.b),
        }
    }

    fn batch_norm(&mut self, p: &BatchNormParams<S>) -> BoundNorm {
        BoundNorm {
            scale: self.leaf(&p.scale),
            shift: self.leaf(&p.shift),
        }
    }

    fn layer_norm(&mut self, p: &LayerNormParams<S>) -> BoundNorm {
        BoundNorm {
            scale: self.leaf(&p.scale),
            shift: self.leaf(&p.shift),
        }
    }

    fn mlp(&mut self, p: &MlpBlockParams<S>) -> BoundMlp {
        BoundMlp {
            lin1: self.linear(&p.lin1),
            bn1: self.batch_norm(&p.bn1),
            lin2: self.linear(&p.lin2),
            bn2: self.batch_norm(&p.bn2),
        }
    }

    fn attention(&mut self, p: &AttentionParams<S>) -> BoundAttention {
        BoundAttention {
            query: self.linear(&p.query),
            key: self.linear(&p.key),
            value: self.linear(&p.value),
            output: self.linear(&p.output),
            ff1: self.linear(&p.ff1),
            ff2: self.linear(&p.ff2),
            norm1: self.layer_norm(&p.norm1),
            norm2: self.layer_norm(&p.norm2),
        }
    }

    fn head(&mut self, p: &HeadParams<S>) -> BoundHead {
        BoundHead {
            lin: self.linear(&p.lin),
            bn: self.batch_norm(&p.bn),
        }
    }
}

/// Registers all learnables as gradient-tracked leaves, in canonical order.
pub fn bind<S: Real>(tape: &mut Tape<S>, params: &AvcaParams<S>) -> BoundParams {
    let mut b = Binder {
        tape,
        ordered: Vec::with_capacity(64),
    };
    let enc_a = b.mlp(&params.enc_a);
    let enc_v = b.mlp(&params.enc_v);
    let attention = b.attention(&params.attention);
    let proj_a = b.mlp(&params.proj_a);
    let proj_v = b.mlp(&params.proj_v);
    let w_proj = b.head(&params.w_proj);
    let decoder = b.head(&params.decoder);
    let rec_a = b.head(&params.rec_a);
    let rec_v = b.head(&params.rec_v);
    BoundParams {
        enc_a,
        enc_v,
        attention,
        proj_a,
        proj_v,
        w_proj,
        decoder,
        rec_a,
        rec_v,
        ordered: b.ordered,
    }
}

/// Every intermediate the losses touch. Branch fields are `None` when the
/// corresponding modality is disabled.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub phi_a: Option<Var>,
    pub phi_v: Option<Var>,
    pub phi_att_a: Option<Var>,
    pub phi_att_v: Option<Var>,
    pub theta_a: Option<Var>,
    pub theta_v: Option<Var>,
    pub theta_w: Var,
    pub rho_a: Option<Var>,
    pub rho_v: Option<Var>,
    pub rho_w: Var,
    pub phi_rec_a: Option<Var>,
    pub phi_rec_v: Option<Var>,
}

/// Modality selector for the per-branch operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

fn mlp_block<S: Real>(
    tape: &mut Tape<S>,
    block: &mut MlpBlockParams<S>,
    bound: &BoundMlp,
    x: Var,
    rate: f32,
    sites: [u64; 2],
    ctx: &ForwardCtx,
) -> Result<Var, NumericsError> {
    let h = tape.linear(x, bound.lin1.w, bound.lin1.b)?;
    let h = tape.batch_norm(h, bound.bn1.scale, bound.bn1.shift, &mut block.bn1.running, ctx.mode)?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, rate as f64, ctx.mode, &mut ctx.dropout_rng(sites[0]))?;
    let h = tape.linear(h, bound.lin2.w, bound.lin2.b)?;
    let h = tape.batch_norm(h, bound.bn2.scale, bound.bn2.shift, &mut block.bn2.running, ctx.mode)?;
    let h = tape.relu(h)?;
    tape.dropout(h, rate as f64, ctx.mode, &mut ctx.dropout_rng(sites[1]))
}

fn head_block<S: Real>(
    tape: &mut Tape<S>,
    head: &mut HeadParams<S>,
    bound: &BoundHead,
    x: Var,
    rate: f32,
    site: u64,
    ctx: &ForwardCtx,
) -> Result<Var, NumericsError> {
    let h = tape.linear(x, bound.lin.w, bound.lin.b)?;
    let h = tape.batch_norm(h, bound.bn.scale, bound.bn.shift, &mut head.bn.running, ctx.mode)?;
    let h = tape.relu(h)?;
    tape.dropout(h, rate as f64, ctx.mode, &mut ctx.dropout_rng(site))
}

/// Encoder block of one modality: `x [B x k_input] -> phi [B x k_f]`.
pub fn encoder_forward<S: Real>(
    tape: &mut Tape<S>,
    params: &mut AvcaParams<S>,
    bound: &BoundParams,
    config: &AvcaConfig,
    modality: Modality,
    x: Var,
    ctx: &ForwardCtx,
) -> Result<Var, ModelError> {
    let width = tape.value(x).cols();
    if width != config.k_input {
        return Err(NumericsError::ShapeMismatch {
            op: "encoder_forward",
            left: tape.value(x).shape().to_vec(),
            right: vec![tape.value(x).rows(), config.k_input],
        }
        .into());
    }
    let out = match modality {
        Modality::Audio => mlp_block(tape, &mut params.enc_a, &bound.enc_a, x, config.r_enc, SITE_ENC_A, ctx)?,
        Modality::Visual => mlp_block(tape, &mut params.enc_v, &bound.enc_v, x, config.r_enc, SITE_ENC_V, ctx)?,
    };
    Ok(out)
}

/// Shared-weight multi-head attention over the two modality tokens followed
/// by the feed-forward sub-layer, residuals and layer norms applied after
/// each sub-layer. Returns the two token outputs plus the attention rows
/// (one `[B x 2]` softmax per token per head, in head-major order).
pub fn cross_attention_forward<S: Real>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    config: &AvcaConfig,
    phi_a: Var,
    phi_v: Var,
    ctx: &ForwardCtx,
) -> Result<(Var, Var, Vec<Var>), ModelError> {
    let attn = &bound.attention;
    let q_a = tape.linear(phi_a, attn.query.w, attn.query.b)?;
    let k_a = tape.linear(phi_a, attn.key.w, attn.key.b)?;
    let v_a = tape.linear(phi_a, attn.value.w, attn.value.b)?;
    let q_v = tape.linear(phi_v, attn.query.w, attn.query.b)?;
    let k_v = tape.linear(phi_v, attn.key.w, attn.key.b)?;
    let v_v = tape.linear(phi_v, attn.value.w, attn.value.b)?;

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx_a = Vec::with_capacity(config.heads);
    let mut ctx_v = Vec::with_capacity(config.heads);
    let mut probs = Vec::with_capacity(2 * config.heads);
    for h in 0..config.heads {
        let start = h * dh;
        let qa = tape.cols(q_a, start, dh)?;
        let ka = tape.cols(k_a, start, dh)?;
        let va = tape.cols(v_a, start, dh)?;
        let qv = tape.cols(q_v, start, dh)?;
        let kv = tape.cols(k_v, start, dh)?;
        let vv = tape.cols(v_v, start, dh)?;
        for (q, own_v, other_v, own_k, other_k, sink) in [
            (qa, va, vv, ka, kv, &mut ctx_a),
            (qv, vv, va, kv, ka, &mut ctx_v),
        ] {
            let own = tape.mul(q, own_k)?;
            let s_own = tape.row_sum(own)?;
            let s_own = tape.affine(s_own, scale, 0.0)?;
            let other = tape.mul(q, other_k)?;
            let s_other = tape.row_sum(other)?;
            let s_other = tape.affine(s_other, scale, 0.0)?;
            let scores = tape.concat_cols(&[s_own, s_other])?;
            let att = tape.softmax_rows(scores)?;
            probs.push(att);
            let w_own = tape.cols(att, 0, 1)?;
            let w_other = tape.cols(att, 1, 1)?;
            let mix_own = tape.mul_col(own_v, w_own)?;
            let mix_other = tape.mul_col(other_v, w_other)?;
            sink.push(tape.add(mix_own, mix_other)?);
        }
    }
    let heads_a = tape.concat_cols(&ctx_a)?;
    let heads_v = tape.concat_cols(&ctx_v)?;

    let mut outputs = Vec::with_capacity(2);
    for (token, heads, ff_sites) in [(phi_a, heads_a, SITE_FF_A), (phi_v, heads_v, SITE_FF_V)] {
        let projected = tape.linear(heads, attn.output.w, attn.output.b)?;
        let res = tape.add(token, projected)?;
        let u = tape.layer_norm(res, attn.norm1.scale, attn.norm1.shift)?;
        let f = tape.linear(u, attn.ff1.w, attn.ff1.b)?;
        let f = tape.gelu(f)?;
        let f = tape.dropout(f, config.r_enc as f64, ctx.mode, &mut ctx.dropout_rng(ff_sites[0]))?;
        let f = tape.linear(f, attn.ff2.w, attn.ff2.b)?;
        let f = tape.dropout(f, config.r_enc as f64, ctx.mode, &mut ctx.dropout_rng(ff_sites[1]))?;
        let res2 = tape.add(u, f)?;
        outputs.push(tape.layer_norm(res2, attn.norm2.scale, attn.norm2.shift)?);
    }
    Ok((outputs[0], outputs[1], probs))
}

/// Label-projection head alone: `w [C x k_w2v] -> theta_w [C x k_proj]`.
/// This is the class-table path of the classifier.
pub fn project_labels<S: Real>(
    tape: &mut Tape<S>,
    params: &mut AvcaParams<S>,
    bound: &BoundParams,
    config: &AvcaConfig,
    w: Var,
    ctx: &ForwardCtx,
) -> Result<Var, ModelError> {
    if tape.value(w).cols() != config.k_w2v {
        return Err(NumericsError::ShapeMismatch {
            op: "project_labels",
            left: tape.value(w).shape().to_vec(),
            right: vec![tape.value(w).rows(), config.k_w2v],
        }
        .into());
    }
    Ok(head_block(tape, &mut params.w_proj, &bound.w_proj, w, config.r_dec, SITE_W_PROJ, ctx)?)
}

/// Full forward pass over a batch: audio/visual features, the per-sample
/// class embeddings `w`, and the current parameters.
pub fn avca_forward<S: Real>(
    tape: &mut Tape<S>,
    params: &mut AvcaParams<S>,
    bound: &BoundParams,
    config: &AvcaConfig,
    a: Var,
    v: Var,
    w: Var,
    ctx: &ForwardCtx,
) -> Result<ForwardOutputs, ModelError> {
    if tape.value(w).cols() != config.k_w2v {
        return Err(NumericsError::ShapeMismatch {
            op: "avca_forward",
            left: tape.value(w).shape().to_vec(),
            right: vec![tape.value(w).rows(), config.k_w2v],
        }
        .into());
    }
    let audio_on = config.active_branches != ActiveBranches::VisualOnly;
    let visual_on = config.active_branches != ActiveBranches::AudioOnly;

    let phi_a = audio_on
        .then(|| encoder_forward(tape, params, bound, config, Modality::Audio, a, ctx))
        .transpose()?;
    let phi_v = visual_on
        .then(|| encoder_forward(tape, params, bound, config, Modality::Visual, v, ctx))
        .transpose()?;

    // The attention block runs only with both branches active; the ablation
    // flag zeroes its contribution, which cuts the graph edge entirely.
    let (phi_att_a, phi_att_v) = match (phi_a, phi_v) {
        (Some(pa), Some(pv)) if config.use_cross_attention => {
            let (att_a, att_v, _) = cross_attention_forward(tape, bound, config, pa, pv, ctx)?;
            (Some(att_a), Some(att_v))
        }
        _ => (None, None),
    };

    let proj_in_a = match (phi_a, phi_att_a) {
        (Some(p), Some(att)) => Some(tape.add(att, p)?),
        (Some(p), None) => Some(p),
        _ => None,
    };
    let proj_in_v = match (phi_v, phi_att_v) {
        (Some(p), Some(att)) => Some(tape.add(att, p)?),
        (Some(p), None) => Some(p),
        _ => None,
    };

    let theta_a = match proj_in_a {
        Some(x) => Some(mlp_block(tape, &mut params.proj_a, &bound.proj_a, x, config.r_proj, SITE_PROJ_A, ctx)?),
        None => None,
    };
    let theta_v = match proj_in_v {
        Some(x) => Some(mlp_block(tape, &mut params.proj_v, &bound.proj_v, x, config.r_proj, SITE_PROJ_V, ctx)?),
        None => None,
    };
    let theta_w = project_labels(tape, params, bound, config, w, ctx)?;

    let rho_a = match theta_a {
        Some(t) => Some(head_block(tape, &mut params.decoder, &bound.decoder, t, config.r_dec, SITE_DEC_A, ctx)?),
        None => None,
    };
    let rho_v = match theta_v {
        Some(t) => Some(head_block(tape, &mut params.decoder, &bound.decoder, t, config.r_dec, SITE_DEC_V, ctx)?),
        None => None,
    };
    let rho_w = head_block(tape, &mut params.decoder, &bound.decoder, theta_w, config.r_dec, SITE_DEC_W, ctx)?;

    let phi_rec_a = match theta_a {
        Some(t) => Some(head_block(tape, &mut params.rec_a, &bound.rec_a, t, config.r_dec, SITE_REC_A, ctx)?),
        None => None,
    };
    let phi_rec_v = match theta_v {
        Some(t) => Some(head_block(tape, &mut params.rec_v, &bound.rec_v, t, config.r_dec, SITE_REC_V, ctx)?),
        None => None,
    };

    Ok(ForwardOutputs {
        phi_a,
        phi_v,
        phi_att_a,
        phi_att_v,
        theta_a,
        theta_v,
        theta_w,
        rho_a,
        rho_v,
        rho_w,
        phi_rec_a,
        phi_rec_v,
    })
}
