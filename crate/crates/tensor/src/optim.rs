use crate::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay. Moments are kept
/// in `f64` regardless of the parameter precision.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    /// `shapes` fixes the parameter layout; `decay[i]` selects whether
    /// weight decay applies to parameter `i`.
    pub fn new(config: AdamWConfig, shapes: &[Vec<usize>], decay: Vec<bool>) -> Self {
        assert_eq!(shapes.len(), decay.len());
        let zeros = || {
            shapes
                .iter()
                .map(|s| vec![0.0; s.iter().product()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), TensorError> {
        let bad = |lhs: &[usize], rhs: &[usize]| TensorError::ShapeMismatch {
            op: crate::OpKind::Leaf,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(bad(&[params.len()], &[self.m.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.m[i].len() {
                return Err(bad(p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if self.decay[i] {
                1.0 - c.lr * c.weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gv.as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let updated = pv.as_f64() * shrink - c.lr * mhat / (vhat.sqrt() + c.eps);
                *pv = T::from_f64(updated);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(value: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::full(&[1], value)]
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[vec![1]], vec![true]);
        let mut p = one_d(1.25);
        for _ in 0..10 {
            opt.step(&mut p, &one_d(0.0)).unwrap();
        }
        assert_eq!(p[0].data()[0], 1.25);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[vec![1]], vec![true]);
        let mut p = one_d(0.0);
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = p[0].data()[0];
            opt.step(&mut p, &one_d(0.37)).unwrap();
            last = before - p[0].data()[0];
        }
        assert!((last - 1e-3).abs() / 1e-3 < 0.01, "step {last}");
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[vec![1]], vec![true]);
        let mut p = one_d(2.0);
        for k in 1..=5 {
            opt.step(&mut p, &one_d(0.0)).unwrap();
            let want = 2.0 * (1.0f64 - 0.01 * 0.5).powi(k);
            assert!((p[0].data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[vec![2]], vec![true]);
        let mut p = vec![Tensor::<f64>::zeros(&[2])];
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::<f64>::full(&[1], 3.0), Tensor::full(&[1], 4.0)];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
