//! Adam with optional global-norm clipping and a linear decay schedule.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamSet};
use crate::scalar::{lit, Scalar};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Decays linearly to zero over the planned number of steps.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

pub struct Adam<T> {
    cfg: OptimConfig,
    lr: f64,
    total_steps: usize,
    step: usize,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, cfg: OptimConfig, total_steps: usize) -> Self {
        let zeros: Vec<Mat<T>> = params
            .iter()
            .map(|(_, v)| Mat::zeros(v.rows(), v.cols()))
            .collect();
        Self {
            cfg,
            lr,
            total_steps: total_steps.max(1),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn current_lr(&self) -> f64 {
        match self.cfg.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => {
                let frac = self.step as f64 / self.total_steps as f64;
                self.lr * (1.0 - frac).max(0.0)
            }
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[(ParamId, Mat<T>)]) {
        let lr = self.current_lr();
        self.step += 1;
        let clip_scale = match self.cfg.grad_clip {
            Some(max_norm) => {
                let sq: f64 = grads
                    .iter()
                    .flat_map(|(_, g)| g.as_slice())
                    .map(|x| {
                        let v = x.to_f64_lossy();
                        v * v
                    })
                    .sum();
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let b1: T = lit(self.cfg.beta1);
        let b2: T = lit(self.cfg.beta2);
        let one = T::one();
        let bc1: T = lit(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2: T = lit(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr_t: T = lit(lr);
        let eps: T = lit(self.cfg.eps);
        let wd: T = lit(self.cfg.weight_decay);
        let cs: T = lit(clip_scale);
        for (id, g) in grads {
            let i = id.index();
            let p = params.get_mut(*id).as_mut_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for k in 0..p.len() {
                let gk = g.as_slice()[k] * cs + wd * p[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
    }
}
