//! Adam optimizer over named parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// First and second moment estimates of `name`.
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Updates every parameter in `names` from its stored gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, names: &[String], rate: f64) -> Result<()> {
        for name in names {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
            if p.grad().is_none() {
                return Err(Error::contract(format!("parameter `{name}` has no gradient")));
            }
        }
        self.steps += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.steps));
        let c2 = T::of(1.0 - self.beta2.powi(self.steps));
        let (lr, eps) = (T::of(rate), T::of(self.eps));
        for name in names {
            let p = params.get_mut(name).expect("checked above");
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let grad = p.grad().expect("checked above").to_vec();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64) -> (ParamSet<f64>, Vec<String>) {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_f64([1], &[w]).unwrap());
        (ps, vec!["w".to_string()])
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let (mut ps, names) = single(1.5);
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        ps.get_mut("w").unwrap().set_grad(vec![0.0]).unwrap();
        opt.step(&mut ps, &names, 0.1).unwrap();
        assert_eq!(ps.get("w").unwrap().data()[0], 1.5);

        ps.get_mut("w").unwrap().set_grad(vec![2.0]).unwrap();
        opt.step(&mut ps, &names, 0.1).unwrap();
        let (m, v) = opt.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        ps.get_mut("w").unwrap().set_grad(vec![0.0]).unwrap();
        opt.step(&mut ps, &names, 0.1).unwrap();
        let (m2, v2) = opt.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        assert_eq!(m2, 0.9 * m);
        assert_eq!(v2, 0.999 * v);
    }

    #[test]
    fn descends_on_a_square() {
        let (mut ps, names) = single(1.0);
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        let w = ps.get("w").unwrap().data()[0];
        ps.get_mut("w").unwrap().set_grad(vec![2.0 * w]).unwrap();
        opt.step(&mut ps, &names, 0.01).unwrap();
        let w1 = ps.get("w").unwrap().data()[0];
        assert!(w1 < 1.0 && w1 > 0.0);
    }

    #[test]
    fn converges_on_a_convex_quadratic() {
        // f(w) = Σ c_i (w_i - t_i)²
        let c = [1.0, 3.0, 0.5];
        let target = [0.3, -1.2, 2.0];
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::<f64>::zeros([3]));
        let names = vec!["w".to_string()];
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        let loss = |w: &[f64]| -> f64 { (0..3).map(|i| c[i] * (w[i] - target[i]).powi(2)).sum() };
        for _ in 0..200 {
            let w = ps.get("w").unwrap().data().to_vec();
            let g = (0..3).map(|i| 2.0 * c[i] * (w[i] - target[i])).collect();
            ps.get_mut("w").unwrap().set_grad(g).unwrap();
            opt.step(&mut ps, &names, 0.05).unwrap();
        }
        let l = loss(ps.get("w").unwrap().data());
        assert!(l < 1e-4, "loss {l}");
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let (mut ps, names) = single(1.0);
        let mut opt = Adam::<f64>::new(0.9, 0.999, 1e-8);
        assert!(matches!(opt.step(&mut ps, &names, 0.1), Err(Error::Contract(_))));
    }
}
