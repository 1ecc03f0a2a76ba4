//! Adam with decoupled weight decay.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::HostTensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

struct Slot<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: u32,
}

/// Optimizer state keyed by parameter name; moments persist across steps, so
/// interleaved updates of different parameter subsets each advance their own
/// step counters.
pub struct AdamW<F: Scalar> {
    cfg: AdamConfig,
    slots: HashMap<String, Slot<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW {
            cfg,
            slots: HashMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// In-place update of the given parameters. Every listed parameter must
    /// have a gradient in `grads`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut HostTensor<F>)>,
        grads: &BTreeMap<String, Vec<F>>,
    ) -> Result<()> {
        let lr = lit::<F>(self.cfg.lr);
        let b1 = lit::<F>(self.cfg.beta1);
        let b2 = lit::<F>(self.cfg.beta2);
        let eps = lit::<F>(self.cfg.eps);
        let wd = lit::<F>(self.cfg.weight_decay);
        let one = F::one();
        for (name, p) in params {
            let g = grads.get(name).ok_or_else(|| {
                Error::Contract(format!("missing gradient for parameter '{name}'"))
            })?;
            if g.len() != p.numel() {
                return Err(Error::Contract(format!(
                    "gradient length {} does not match parameter '{name}' ({} values)",
                    g.len(),
                    p.numel()
                )));
            }
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                m: vec![F::zero(); g.len()],
                v: vec![F::zero(); g.len()],
                t: 0,
            });
            slot.t += 1;
            let bc1 = one - b1.powi(slot.t as i32);
            let bc2 = one - b2.powi(slot.t as i32);
            for i in 0..g.len() {
                let gi = g[i];
                slot.m[i] = b1 * slot.m[i] + (one - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                let pv = p.data[i];
                p.data[i] = pv - lr * (mhat / (vhat.sqrt() + eps) + wd * pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(name: &str, g: Vec<f64>) -> BTreeMap<String, Vec<f64>> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), g);
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = HostTensor::new(vec![3], vec![0.5f64, -1.0, 2.0]);
        let mut opt = AdamW::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let before = p.data.clone();
        opt.step([("w", &mut p)], &grads_of("w", vec![0.0; 3])).unwrap();
        assert_eq!(p.data, before);
    }

    #[test]
    fn single_scalar_step_matches_hand_formula() {
        // One step from a fresh state, recomputed term by term.
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
        let p0 = 1.0f64;
        let g = 0.5f64;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let expect = p0 - lr * (mhat / (vhat.sqrt() + eps) + wd * p0);

        let mut p = HostTensor::new(vec![1], vec![p0]);
        let mut opt = AdamW::new(AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        });
        opt.step([("w", &mut p)], &grads_of("w", vec![g])).unwrap();
        assert!((p.data[0] - expect).abs() < 1e-12, "{} vs {expect}", p.data[0]);
    }

    #[test]
    fn state_continuity_two_steps_equal_one_stream() {
        let run = |steps: &[f64]| -> Vec<f64> {
            let mut p = HostTensor::new(vec![1], vec![1.0f64]);
            let mut opt = AdamW::new(AdamConfig::with_lr(0.05));
            for &g in steps {
                opt.step([("w", &mut p)], &grads_of("w", vec![g])).unwrap();
            }
            p.data
        };
        let a = run(&[0.3, -0.2]);
        // same stream, split across two calls on one optimizer
        let mut p = HostTensor::new(vec![1], vec![1.0f64]);
        let mut opt = AdamW::new(AdamConfig::with_lr(0.05));
        opt.step([("w", &mut p)], &grads_of("w", vec![0.3])).unwrap();
        opt.step([("w", &mut p)], &grads_of("w", vec![-0.2])).unwrap();
        assert_eq!(a, p.data);
    }

    #[test]
    fn missing_gradient_is_a_contract_error_naming_the_parameter() {
        let mut p = HostTensor::new(vec![1], vec![1.0f64]);
        let mut opt = AdamW::new(AdamConfig::default());
        let err = opt
            .step([("encoder.w", &mut p)], &BTreeMap::new())
            .unwrap_err()
            .to_string();
        assert!(err.contains("encoder.w"), "{err}");
    }
}
