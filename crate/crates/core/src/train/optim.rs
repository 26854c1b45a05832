use std::collections::BTreeMap;

use crate::model::ParamSet;
use crate::tensor::Tensor;

/// Linear warmup to `peak`, then inverse square-root decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.peak * (s / w).min((w / s).sqrt())
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [(String, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data().iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Adam with per-parameter moments keyed by parameter name. Parameters
/// without a gradient on a step keep their value and moments.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>, u32)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, moments: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[(String, Tensor<f32>)], lr: f64) {
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (key, grad) in grads {
            let Some(p) = params.get_mut(key) else { continue };
            let n = grad.numel();
            let (m, v, t) = self.moments.entry(key.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n], 0));
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            let step = (lr * c2.sqrt() / c1) as f32;
            let eps = (self.eps * c2.sqrt()) as f32;
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = LrSchedule { peak: 1e-3, warmup: 100 };
        assert!((s.at(50) - 5e-4).abs() < 1e-12);
        assert!((s.at(100) - 1e-3).abs() < 1e-12);
        assert!((s.at(400) - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![("a".to_string(), Tensor::new([2], vec![3.0f32, 4.0]).unwrap())];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([2], vec![1.0f32, -1.0]).unwrap());
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let g = vec![("w".to_string(), Tensor::new([2], vec![0.5f32, -2.0]).unwrap())];
        adam.step(&mut p, &g, 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-5 && (w[1] + 0.9).abs() < 1e-5);
    }
}
