use super::{Array, NumericsError, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L1 coefficient; `l1 * sign(p)` is added to each gradient.
    pub l1: f64,
    /// Decay of the shadow weight average; `None` disables it.
    pub weight_ema: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l1: 1e-5,
            weight_ema: None,
        }
    }
}

/// Adam with bias correction and L1 subgradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Array>,
    second: Vec<Array>,
    step: u64,
    shadow: Option<Vec<Array>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.values().iter().map(|p| Array::zeros(p.shape())).collect::<Vec<_>>();
        Adam {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
            shadow: config.weight_ema.map(|_| params.values().to_vec()),
        }
    }

    /// Rebuilds optimizer state from stored moments.
    pub fn from_state(config: AdamConfig, first: Vec<Array>, second: Vec<Array>, step: u64) -> Self {
        Adam { config, first, second, step, shadow: None }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Array], &[Array]) {
        (&self.first, &self.second)
    }

    pub fn shadow_weights(&self) -> Option<&[Array]> {
        self.shadow.as_deref()
    }

    /// One update. Parameters whose gradient is `None` are left untouched,
    /// which is how frozen modules stay bitwise constant.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Array>]) -> Result<(), NumericsError> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(NumericsError::Shape {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(NumericsError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let grad = gv + c.l1 * sign(*pv);
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * grad;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * grad * grad;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        if let (Some(decay), Some(shadow)) = (c.weight_ema, self.shadow.as_mut()) {
            for (s, p) in shadow.iter_mut().zip(params.values()) {
                for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                    *sv = decay * *sv + (1.0 - decay) * pv;
                }
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
