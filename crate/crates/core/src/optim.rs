//! Adam with bias correction.

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update. `grads[i]` belongs to `ParamId` index `i`; a `None`
    /// entry is treated as a zero gradient. Any non-finite gradient aborts the
    /// step before a single parameter changes.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.first_moment.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() {
                    return Err(shape_err!(
                        "adam: gradient {:?} for {} of shape {:?}",
                        g.shape(),
                        params.name(id),
                        params.get(id).shape()
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient for {}",
                        params.name(id)
                    )));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(self.eps);
        let ids: Vec<ParamId> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = params.get_mut(id).data_mut();
            match &grads[i] {
                Some(g) => {
                    for (((pv, mv), vv), &gv) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        *pv = *pv - step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
                    }
                }
                None => {
                    for ((pv, mv), vv) in p.iter_mut().zip(m).zip(v) {
                        *mv = b1 * *mv;
                        *vv = b2 * *vv;
                        *pv = *pv - step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_f64(&[1], &[x]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &[Some(Tensor::zeros(&[1]))], 0.1).unwrap();
        assert_eq!(p.by_name("x").unwrap().item(), 0.7);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        // m̂ = g, v̂ = g², update = lr·g/(|g|+ε)
        for g in [3.0, -0.25, 1e-3] {
            let mut p = single(1.0);
            let mut adam = AdamState::new(&p);
            let lr = 0.01;
            adam.step(&mut p, &[Some(Tensor::from_f64(&[1], &[g]).unwrap())], lr).unwrap();
            let expected = 1.0 - lr * g / (g.abs() + 1e-8);
            let got = p.by_name("x").unwrap().item();
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
            assert!(((1.0 - got).abs() - lr).abs() < lr * 1e-4);
        }
    }

    #[test]
    fn descends_quadratic() {
        let mut p = single(1.0);
        let mut adam = AdamState::new(&p);
        for _ in 0..50 {
            let x = p.by_name("x").unwrap().item();
            let g = Tensor::from_f64(&[1], &[2.0 * x]).unwrap();
            adam.step(&mut p, &[Some(g)], 0.1).unwrap();
        }
        assert!(p.by_name("x").unwrap().item().abs() < 0.5);
        assert_eq!(adam.step_count, 50);
        assert!(adam.second_moment[0].data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = single(1.0);
        let mut adam = AdamState::new(&p);
        let err = adam
            .step(&mut p, &[Some(Tensor::from_f64(&[1], &[f64::NAN]).unwrap())], 0.1)
            .unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(p.by_name("x").unwrap().item(), 1.0);
        assert_eq!(adam.step_count, 0);
    }
}
