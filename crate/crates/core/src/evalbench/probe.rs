//! Softmax-regression probe for measuring how linearly separable a feature
//! set is.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::distill::cross_entropy_node;
use crate::encoders::{head_logits, ModalityHead};
use crate::error::{Error, Result};
use crate::optim::{Adam, OptimConfig};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-2,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearProbe<T> {
    pub params: ParamSet<T>,
    pub head: ModalityHead,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn fit(x: &Mat<T>, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.rows() != y.len() || y.is_empty() {
            return Err(Error::Input(format!(
                "{} rows for {} labels",
                x.rows(),
                y.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let head = ModalityHead::new(&mut params, "probe", x.cols(), classes, &mut rng);
        let batch = cfg.batch.max(1);
        let steps = cfg.epochs * y.len().div_ceil(batch);
        let mut opt = Adam::new(&params, cfg.learning_rate, OptimConfig::default(), steps);
        let mut order: Vec<usize> = (0..y.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let xb = x.select_rows(chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                let grads = {
                    let mut g = Graph::with_params(&params);
                    let xi = g.constant(xb);
                    let logits = head.forward(&mut g, xi)?;
                    let loss = cross_entropy_node(&mut g, logits, &yb)?;
                    g.backward(loss)?
                };
                opt.step(&mut params, grads.params());
            }
        }
        Ok(Self { params, head })
    }

    pub fn logits(&self, x: &Mat<T>) -> Result<Mat<T>> {
        let w = self.params.get(self.head.linear.weight);
        let b = self.params.get(self.head.linear.bias.expect("probe bias"));
        head_logits(w, b, x)
    }

    pub fn predict(&self, x: &Mat<T>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn accuracy(&self, x: &Mat<T>, y: &[usize]) -> Result<f64> {
        let p = self.predict(x)?;
        Ok(p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learns_separable_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let noise = Mat::<f64>::gaussian(n, 3, 0.3, &mut rng);
        let x = Mat::from_vec(
            n,
            3,
            (0..n)
                .flat_map(|i| {
                    let s = if y[i] == 0 { -1.0 } else { 1.0 };
                    (0..3).map(move |k| if k == 0 { s } else { 0.0 })
                })
                .zip(noise.as_slice())
                .map(|(a, b)| a + b)
                .collect(),
        )
        .unwrap();
        let probe = LinearProbe::fit(&x, &y, 2, &ProbeConfig::default()).unwrap();
        assert!(probe.accuracy(&x, &y).unwrap() > 0.95);
    }
}
