//! Decoupled-weight-decay adaptive moment estimation over parameter trees.

use crate::error::{AldmError, Result};
use crate::nets::ParameterTree;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: ParameterTree,
    v: ParameterTree,
}

impl AdamW {
    pub fn new(params: &ParameterTree, lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParameterTree, grads: &ParameterTree) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((name, p), ((_, m), (_, v))) in params
            .iter_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(AldmError::invalid(format!(
                    "gradient shape mismatch for `{name}`"
                )));
            }
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn tree_of(v: f64) -> ParameterTree {
        let mut t = ParameterTree::new();
        t.insert("w", ArrayD::from_elem(IxDyn(&[3]), v));
        t
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = tree_of(5.0);
        let mut opt = AdamW::new(&params, 0.1);
        for _ in 0..500 {
            let mut grads = ParameterTree::new();
            grads.insert("w", params.get("w").unwrap() * 2.0);
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(params.get("w").unwrap().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient() {
        let mut params = tree_of(1.0);
        let mut opt = AdamW::new(&params, 0.01);
        opt.weight_decay = 0.1;
        let grads = tree_of(0.0);
        opt.step(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap();
        assert!(w.iter().all(|&v| v < 1.0 && v > 0.99));
    }

    #[test]
    fn rejects_mismatched_gradient_tree() {
        let mut params = tree_of(1.0);
        let mut opt = AdamW::new(&params, 0.01);
        let mut grads = ParameterTree::new();
        grads.insert("w", ArrayD::zeros(IxDyn(&[5])));
        assert!(opt.step(&mut params, &grads).is_err());
        let grads = ParameterTree::new();
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
