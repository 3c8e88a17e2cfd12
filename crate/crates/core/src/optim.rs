//! Stochastic gradient descent with classical momentum and coupled weight decay.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor4;

/// Optimiser state: one velocity buffer per parameter it has touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocities: BTreeMap<String, Tensor4>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocities: BTreeMap::new(),
        }
    }

    /// `v ← m·v + g + wd·p`, `p ← p − lr·v` for every parameter in `grads`.
    /// Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor4>) {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let v = self
                .velocities
                .entry(name.clone())
                .or_insert_with(|| Tensor4::zeros(p.shape()));
            for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut().iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= self.learning_rate * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn one(v: f64) -> Tensor4 {
        Tensor4::scalar(v)
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let mut p = ParamStore::new();
        p.insert("w", one(1.5));
        let mut opt = Sgd::new(0.1, 0.99, 0.0);
        let grads = BTreeMap::from([("w".to_string(), one(0.0))]);
        opt.step(&mut p, &grads);
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn single_step() {
        let mut p = ParamStore::new();
        p.insert("w", one(1.0));
        let mut opt = Sgd::new(0.1, 0.99, 0.0);
        opt.step(&mut p, &BTreeMap::from([("w".to_string(), one(1.0))]));
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-15);
        assert_eq!(opt.velocities["w"].item(), 1.0);
    }

    #[test]
    fn two_steps_accumulate_momentum() {
        let mut p = ParamStore::new();
        p.insert("w", one(1.0));
        let mut opt = Sgd::new(0.1, 0.99, 0.0);
        let g = BTreeMap::from([("w".to_string(), one(1.0))]);
        opt.step(&mut p, &g);
        opt.step(&mut p, &g);
        assert!((opt.velocities["w"].item() - 1.99).abs() < 1e-15);
        assert!((p.get("w").unwrap().item() - 0.701).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor4::full(Shape4::new(1, 1, 1, 2), 2.0));
        let mut opt = Sgd::new(0.5, 0.0, 0.1);
        let g = BTreeMap::from([("w".to_string(), Tensor4::zeros(Shape4::new(1, 1, 1, 2)))]);
        opt.step(&mut p, &g);
        assert!((p.get("w").unwrap().data()[0] - 1.9).abs() < 1e-15);
    }
}
