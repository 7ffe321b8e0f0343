use rand::Rng;

use super::{ActiveBranches, AvcaConfig, ModelError};
use crate::numerics::rng::{name_lane, stream};
use crate::numerics::{BatchNormRunning, Real, TensorData};

const INIT_TAG: u64 = 0x494e_4954; // "INIT"

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<S> {
    pub w: TensorData<S>,
    pub b: TensorData<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<S> {
    pub scale: TensorData<S>,
    pub shift: TensorData<S>,
    pub running: BatchNormRunning<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<S> {
    pub scale: TensorData<S>,
    pub shift: TensorData<S>,
}

/// Two linear layers, each followed by batch norm (encoders and
/// projection blocks share this shape).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlockParams<S> {
    pub lin1: LinearParams<S>,
    pub bn1: BatchNormParams<S>,
    pub lin2: LinearParams<S>,
    pub bn2: BatchNormParams<S>,
}

/// The shared cross-attention block: one set of query/key/value/output
/// projections, feed-forward weights, and layer norms applied to both
/// modality tokens. Sharing them is what keeps the parameter count at the
/// published total.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S> {
    pub query: LinearParams<S>,
    pub key: LinearParams<S>,
    pub value: LinearParams<S>,
    pub output: LinearParams<S>,
    pub ff1: LinearParams<S>,
    pub ff2: LinearParams<S>,
    pub norm1: LayerNormParams<S>,
    pub norm2: LayerNormParams<S>,
}

/// One linear layer followed by batch norm (word projection, decoder, and
/// the two reconstruction heads).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<S> {
    pub lin: LinearParams<S>,
    pub bn: BatchNormParams<S>,
}

/// Every learnable tensor of the model plus batch-norm running buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AvcaParams<S> {
    pub enc_a: MlpBlockParams<S>,
    pub enc_v: MlpBlockParams<S>,
    pub attention: AttentionParams<S>,
    pub proj_a: MlpBlockParams<S>,
    pub proj_v: MlpBlockParams<S>,
    pub w_proj: HeadParams<S>,
    pub decoder: HeadParams<S>,
    pub rec_a: HeadParams<S>,
    pub rec_v: HeadParams<S>,
}

impl<S: Real> LinearParams<S> {
    fn shaped(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: TensorData::zeros(vec![fan_in, fan_out]),
            b: TensorData::zeros(vec![1, fan_out]),
        }
    }

    fn learnables(&self, prefix: &str) -> Vec<(String, &TensorData<S>)> {
        vec![(format!("{prefix}.w"), &self.w), (format!("{prefix}.b"), &self.b)]
    }

    fn learnables_mut(&mut self, prefix: &str) -> Vec<(String, &mut TensorData<S>)> {
        vec![
            (format!("{prefix}.w"), &mut self.w),
            (format!("{prefix}.b"), &mut self.b),
        ]
    }
}

impl<S: Real> BatchNormParams<S> {
    fn shaped(dim: usize) -> Self {
        Self {
            scale: TensorData::zeros(vec![1, dim]),
            shift: TensorData::zeros(vec![1, dim]),
            running: BatchNormRunning::new(dim),
        }
    }

    fn learnables(&self, prefix: &str) -> Vec<(String, &TensorData<S>)> {
        vec![
            (format!("{prefix}.scale"), &self.scale),
            (format!("{prefix}.shift"), &self.shift),
        ]
    }

    fn learnables_mut(&mut self, prefix: &str) -> Vec<(String, &mut TensorData<S>)> {
        vec![
            (format!("{prefix}.scale"), &mut self.scale),
            (format!("{prefix}.shift"), &mut self.shift),
        ]
    }
}

impl<S: Real> LayerNormParams<S> {
    fn shaped(dim: usize) -> Self {
        Self {
            scale: TensorData::zeros(vec![1, dim]),
            shift: TensorData::zeros(vec![1, dim]),
        }
    }

    fn learnables(&self, prefix: &str) -> Vec<(String, &TensorData<S>)> {
        vec![
            (format!("{prefix}.scale"), &self.scale),
            (format!("{prefix}.shift"), &self.shift),
        ]
    }

    fn learnables_mut(&mut self, prefix: &str) -> Vec<(String, &mut TensorData<S>)> {
        vec![
            (format!("{prefix}.scale"), &mut self.scale),
            (format!("{prefix}.shift"), &mut self.shift),
        ]
    }
}

impl<S: Real> MlpBlockParams<S> {
    fn shaped(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            lin1: LinearParams::shaped(input, hidden),
            bn1: BatchNormParams::shaped(hidden),
            lin2: LinearParams::shaped(hidden, output),
            bn2: BatchNormParams::shaped(output),
        }
    }

    fn learnables(&self, prefix: &str) -> Vec<(String, &TensorData<S>)> {
        let mut v = self.lin1.learnables(&format!("{prefix}.lin1"));
        v.extend(self.bn1.learnables(&format!("{prefix}.bn1")));
        v.extend(self.lin2.learnables(&format!("{prefix}.lin2")));
        v.extend(self.bn2.learnables(&format!("{prefix}.bn2")));
        v
    }

    fn learnables_mut(&mut self, prefix: &str) -> Vec<(String, &mut TensorData<S>)> {
        let mut v = self.lin1.learnables_mut(&format!("{prefix}.lin1"));
        v.extend(self.bn1.learnables_mut(&format!("{prefix}.bn1")));
        v.extend(self.lin2.learnables_mut(&format!("{prefix}.lin2")));
        v.extend(self.bn2.learnables_mut(&format!("{prefix}.bn2")));
        v
    }
}

impl<S: Real> AttentionParams<S> {
    fn shaped(k_f: usize, k_attnhidd: usize) -> Self {
        Self {
            query: LinearParams::shaped(k_f, k_f),
            key: LinearParams::shaped(k_f, k_f),
            value: LinearParams::shaped(k_f, k_f),
            output: LinearParams::shaped(k_f, k_f),
            ff1: LinearParams::shaped(k_f, k_attnhidd),
            ff2: LinearParams::shaped(k_attnhidd, k_f),
            norm1: LayerNormParams::shaped(k_f),
            norm2: LayerNormParams::shaped(k_f),
        }
    }

    fn learnables(&self, prefix: &str) -> Vec<(String, &TensorData<S>)> {
        let mut v = self.query.learnables(&format!("{prefix}.query"));
        v.extend(self.key.learnables(&format!("{prefix}.key")));
        v.extend(self.value.learnables(&format!("{prefix}.value")));
        v.extend(self.output.learnables(&format!("{prefix}.output")));
        v.extend(self.ff1.learnables(&format!("{prefix}.ff1")));
        v.extend(self.ff2.learnables(&format!("{prefix}.ff2")));
        v.extend(self.norm1.learnables(&format!("{prefix}.norm1")));
        v.extend(self.norm2.learnables(&format!("{prefix}.norm2")));
        v
    }

    fn learnables_mut(&mut self, prefix: &str) -> Vec<(String, &mut TensorData<S>)> {
        let mut v = self.query.learnables_mut(&format!("{prefix}.query"));
        v.extend(self.key.learnables_mut(&format!("{prefix}.key")));
        v.extend(self.value.learnables_mut(&format!("{prefix}.value")));
        v.extend(self.output.learnables_mut(&format!("{prefix}.output")));
        v.extend(self.ff1.learnables_mut(&format!("{prefix}.ff1")));
        v.extend(self.ff2.learnables_mut(&format!("{prefix}.ff2")));
        v.extend(self.norm1.learnables_mut(&format!("{prefix}.norm1")));
        v.extend(self.norm2.learnables_mut(&format!("{prefix}.norm2")));
        v
    }
}

impl<S: Real> HeadParams<S> {
    fn shaped(input: usize, output: usize) -> Self {
        Self {
            lin: LinearParams::shaped(input, output),
            bn: BatchNormParams::shaped(output),
        }
    }

    fn learnables(&self, prefix: &str) -> Vec<(String, &TensorData<S>)> {
        let mut v = self.lin.learnables(&format!("{prefix}.lin"));
        v.extend(self.bn.learnables(&format!("{prefix}.bn")));
        v
    }

    fn learnables_mut(&mut self, prefix: &str) -> Vec<(String, &mut TensorData<S>)> {
        let mut v = self.lin.learnables_mut(&format!("{prefix}.lin"));
        v.extend(self.bn.learnables_mut(&format!("{prefix}.bn")));
        v
    }
}

impl<S: Real> AvcaParams<S> {
    /// Zero-valued parameters with the shapes implied by `config`.
    pub fn shaped(config: &AvcaConfig) -> Self {
        Self {
            enc_a: MlpBlockParams::shaped(config.k_input, config.k_fhidd, config.k_f),
            enc_v: MlpBlockParams::shaped(config.k_input, config.k_fhidd, config.k_f),
            attention: AttentionParams::shaped(config.k_f, config.k_attnhidd),
            proj_a: MlpBlockParams::shaped(config.k_f, config.k_fhidd, config.k_proj),
            proj_v: MlpBlockParams::shaped(config.k_f, config.k_fhidd, config.k_proj),
            w_proj: HeadParams::shaped(config.k_w2v, config.k_proj),
            decoder: HeadParams::shaped(config.k_proj, config.k_w2v),
            rec_a: HeadParams::shaped(config.k_proj, config.k_f),
            rec_v: HeadParams::shaped(config.k_proj, config.k_f),
        }
    }

    /// All learnable tensors in canonical (checkpoint and optimizer) order.
    pub fn learnables(&self) -> Vec<(String, &TensorData<S>)> {
        let mut v = self.enc_a.learnables("enc_a");
        v.extend(self.enc_v.learnables("enc_v"));
        v.extend(self.attention.learnables("attention"));
        v.extend(self.proj_a.learnables("proj_a"));
        v.extend(self.proj_v.learnables("proj_v"));
        v.extend(self.w_proj.learnables("w_proj"));
        v.extend(self.decoder.learnables("decoder"));
        v.extend(self.rec_a.learnables("rec_a"));
        v.extend(self.rec_v.learnables("rec_v"));
        v
    }

    pub fn learnables_mut(&mut self) -> Vec<(String, &mut TensorData<S>)> {
        let mut v = self.enc_a.learnables_mut("enc_a");
        v.extend(self.enc_v.learnables_mut("enc_v"));
        v.extend(self.attention.learnables_mut("attention"));
        v.extend(self.proj_a.learnables_mut("proj_a"));
        v.extend(self.proj_v.learnables_mut("proj_v"));
        v.extend(self.w_proj.learnables_mut("w_proj"));
        v.extend(self.decoder.learnables_mut("decoder"));
        v.extend(self.rec_a.learnables_mut("rec_a"));
        v.extend(self.rec_v.learnables_mut("rec_v"));
        v
    }

    /// Batch-norm running buffers in canonical order.
    pub fn runnings_mut(&mut self) -> Vec<(String, &mut BatchNormRunning<S>)> {
        vec![
            ("enc_a.bn1".into(), &mut self.enc_a.bn1.running),
            ("enc_a.bn2".into(), &mut self.enc_a.bn2.running),
            ("enc_v.bn1".into(), &mut self.enc_v.bn1.running),
            ("enc_v.bn2".into(), &mut self.enc_v.bn2.running),
            ("proj_a.bn1".into(), &mut self.proj_a.bn1.running),
            ("proj_a.bn2".into(), &mut self.proj_a.bn2.running),
            ("proj_v.bn1".into(), &mut self.proj_v.bn1.running),
            ("proj_v.bn2".into(), &mut self.proj_v.bn2.running),
            ("w_proj.bn".into(), &mut self.w_proj.bn.running),
            ("decoder.bn".into(), &mut self.decoder.bn.running),
            ("rec_a.bn".into(), &mut self.rec_a.bn.running),
            ("rec_v.bn".into(), &mut self.rec_v.bn.running),
        ]
    }

    pub fn runnings(&self) -> Vec<(String, &BatchNormRunning<S>)> {
        vec![
            ("enc_a.bn1".into(), &self.enc_a.bn1.running),
            ("enc_a.bn2".into(), &self.enc_a.bn2.running),
            ("enc_v.bn1".into(), &self.enc_v.bn1.running),
            ("enc_v.bn2".into(), &self.enc_v.bn2.running),
            ("proj_a.bn1".into(), &self.proj_a.bn1.running),
            ("proj_a.bn2".into(), &self.proj_a.bn2.running),
            ("proj_v.bn1".into(), &self.proj_v.bn1.running),
            ("proj_v.bn2".into(), &self.proj_v.bn2.running),
            ("w_proj.bn".into(), &self.w_proj.bn.running),
            ("decoder.bn".into(), &self.decoder.bn.running),
            ("rec_a.bn".into(), &self.rec_a.bn.running),
            ("rec_v.bn".into(), &self.rec_v.bn.running),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.learnables().iter().all(|(_, t)| t.is_finite())
    }

    /// Element-wise cast of every tensor and running buffer.
    pub fn cast<T: Real>(&self) -> AvcaParams<T> {
        AvcaParams::<T> {
            enc_a: cast_mlp(&self.enc_a),
            enc_v: cast_mlp(&self.enc_v),
            attention: AttentionParams {
                query: cast_lin(&self.attention.query),
                key: cast_lin(&self.attention.key),
                value: cast_lin(&self.attention.value),
                output: cast_lin(&self.attention.output),
                ff1: cast_lin(&self.attention.ff1),
                ff2: cast_lin(&self.attention.ff2),
                norm1: LayerNormParams {
                    scale: self.attention.norm1.scale.cast(),
                    shift: self.attention.norm1.shift.cast(),
                },
                norm2: LayerNormParams {
                    scale: self.attention.norm2.scale.cast(),
                    shift: self.attention.norm2.shift.cast(),
                },
            },
            proj_a: cast_mlp(&self.proj_a),
            proj_v: cast_mlp(&self.proj_v),
            w_proj: cast_head(&self.w_proj),
            decoder: cast_head(&self.decoder),
            rec_a: cast_head(&self.rec_a),
            rec_v: cast_head(&self.rec_v),
        }
    }
}

fn cast_lin<S: Real, T: Real>(p: &LinearParams<S>) -> LinearParams<T> {
    LinearParams {
        w: p.w.cast(),
        b: p.b.cast(),
    }
}

fn cast_bn<S: Real, T: Real>(p: &BatchNormParams<S>) -> BatchNormParams<T> {
    BatchNormParams {
        scale: p.scale.cast(),
        shift: p.shift.cast(),
        running: BatchNormRunning {
            mean: p.running.mean.iter().map(|v| cast_s(*v)).collect(),
            var: p.running.var.iter().map(|v| cast_s(*v)).collect(),
        },
    }
}

fn cast_s<S: Real, T: Real>(v: S) -> T {
    T::from_f64(num_traits::ToPrimitive::to_f64(&v).unwrap()).unwrap()
}

fn cast_mlp<S: Real, T: Real>(p: &MlpBlockParams<S>) -> MlpBlockParams<T> {
    MlpBlockParams {
        lin1: cast_lin(&p.lin1),
        bn1: cast_bn(&p.bn1),
        lin2: cast_lin(&p.lin2),
        bn2: cast_bn(&p.bn2),
    }
}

fn cast_head<S: Real, T: Real>(p: &HeadParams<S>) -> HeadParams<T> {
    HeadParams {
        lin: cast_lin(&p.lin),
        bn: cast_bn(&p.bn),
    }
}

/// Fresh parameters: linear weights uniform in `(-1/sqrt(fan_in),
/// +1/sqrt(fan_in))`, biases and norm shifts zero, norm scales one. Fully
/// determined by `(config, seed)`; each tensor draws from its own named
/// stream, so the layout of one tensor never perturbs another.
pub fn init_params(config: &AvcaConfig, seed: u64) -> Result<AvcaParams<f32>, ModelError> {
    config.validate()?;
    let mut params = AvcaParams::<f32>::shaped(config);
    for (name, tensor) in params.learnables_mut() {
        if name.ends_with(".w") {
            let fan_in = tensor.shape()[0] as f64;
            let bound = (1.0 / fan_in.sqrt()) as f32;
            let mut rng = stream(seed, INIT_TAG ^ name_lane(&name), 0, 0);
            for v in tensor.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        } else if name.ends_with(".scale") {
            tensor.data_mut().fill(1.0);
        }
        // Biases and shifts stay zero.
    }
    Ok(params)
}

/// Exact number of scalar learnables (norm affine included, running
/// statistics excluded) for a configuration.
pub fn param_count(config: &AvcaConfig) -> u64 {
    let mut full = config.clone();
    full.active_branches = ActiveBranches::Both;
    AvcaParams::<f32>::shaped(&full)
        .learnables()
        .iter()
        .map(|(_, t)| t.numel() as u64)
        .sum()
}
