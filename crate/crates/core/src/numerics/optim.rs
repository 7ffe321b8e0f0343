use super::NumericsError;

/// Adam with bias correction. Moment buffers are laid out in the caller's
/// parameter order; one `step` call advances the shared step counter once.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    /// `sizes` are the element counts of the parameter tensors, in update
    /// order. Beta and epsilon take the conventional 0.9 / 0.999 / 1e-8.
    pub fn new(lr: f32, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update in place. `pairs` must follow the
    /// order and sizes given at construction; a missing gradient is a
    /// contract error.
    pub fn step(
        &mut self,
        pairs: &mut [(&mut [f32], Option<&[f32]>)],
    ) -> Result<(), NumericsError> {
        assert_eq!(pairs.len(), self.m.len(), "parameter count changed");
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (param, grad)) in pairs.iter_mut().enumerate() {
            let grad = grad.ok_or_else(|| NumericsError::MissingGradient {
                name: format!("parameter #{i}"),
            })?;
            assert_eq!(param.len(), self.m[i].len(), "parameter size changed");
            assert_eq!(param.len(), grad.len(), "gradient size mismatch");
            for e in 0..param.len() {
                let g = grad[e];
                self.m[i][e] = self.beta1 * self.m[i][e] + (1.0 - self.beta1) * g;
                self.v[i][e] = self.beta2 * self.v[i][e] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i][e] / bc1;
                let v_hat = self.v[i][e] / bc2;
                param[e] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule over a higher-is-better metric:
/// the rate drops by `factor` after `patience` consecutive epochs without a
/// strict improvement over the best value seen.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    patience: usize,
    factor: f32,
    best: Option<f32>,
    stale: usize,
    lr: f32,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f32, patience: usize, factor: f32) -> Self {
        Self {
            patience,
            factor,
            best: None,
            stale: 0,
            lr,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Feeds one epoch's metric; returns the learning rate to use next.
    pub fn observe(&mut self, metric: f32) -> f32 {
        match self.best {
            Some(best) if metric <= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.reductions += 1;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.lr
    }
}
