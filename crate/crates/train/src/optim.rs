use laneseq_model::ParameterStore;
use ndarray::{Array2, Zip};

/// Adam with decoupled weight decay, reading gradients from the store's
/// gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParameterStore, lr: f64, weight_decay: f64) -> Self {
        Self::with_betas(store, lr, weight_decay, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(store: &ParameterStore, lr: f64, weight_decay: f64, betas: (f64, f64), eps: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect();
        Self { lr, weight_decay, beta1: betas.0, beta2: betas.1, eps, step_count: 0, m: zeros.clone(), v: zeros }
    }

    pub fn moments(&self) -> (&[Array2<f64>], &[Array2<f64>]) {
        (&self.m, &self.v)
    }

    /// One update from the current gradient buffers.
    pub fn step(&mut self, store: &mut ParameterStore) {
        assert_eq!(self.m.len(), store.len(), "optimizer built for a different store");
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            });
        }
    }
}

/// Global L2 norm of the gradient buffers.
pub fn grad_norm(store: &ParameterStore) -> f64 {
    store.iter().map(|(_, p)| p.grad.iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", array![[1.0, -2.0], [0.5, 3.0]]).unwrap();
        s.insert("b", array![[0.25, 0.0]]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, 1e-2, 0.0);
        for _ in 0..5 {
            opt.step(&mut s);
        }
        assert_eq!(s, before);
    }

    #[test]
    fn zero_gradient_with_decay_only_shrinks() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, 0.1, 0.01);
        opt.step(&mut s);
        for ((_, a), (_, b)) in s.iter().zip(before.iter()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert!((x - y * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store();
        let before = s.clone();
        for p in s.iter_mut() {
            p.grad.fill(-3.0);
        }
        let mut opt = AdamW::new(&s, 1e-3, 0.0);
        opt.step(&mut s);
        for ((_, a), (_, b)) in s.iter().zip(before.iter()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert!((x - y - 1e-3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn moments_match_parameter_shapes() {
        let s = store();
        let opt = AdamW::new(&s, 1e-3, 0.0);
        let (m, v) = opt.moments();
        for ((_, p), (a, b)) in s.iter().zip(m.iter().zip(v)) {
            assert_eq!(p.value.dim(), a.dim());
            assert_eq!(p.value.dim(), b.dim());
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = store();
        for p in s.iter_mut() {
            p.grad.fill(10.0);
        }
        let before = clip_grad_norm(&mut s, 1.0);
        assert!(before > 1.0);
        assert!((grad_norm(&s) - 1.0).abs() < 1e-12);
    }
}
