use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;

/// Bias-corrected Adam with one moment pair per trainable parameter.
#[derive(Clone, Debug)]
pub struct AdamState<F: Real> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    /// Indexed by [`ParamId::index`]; `None` for frozen parameters.
    moments: Vec<Option<(Tensor<F>, Tensor<F>)>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>, learning_rate: f64) -> Self {
        let moments = store
            .ids()
            .map(|id| {
                store.is_trainable(id).then(|| {
                    let shape = store.get(id).shape();
                    (Tensor::zeros(shape), Tensor::zeros(shape))
                })
            })
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments,
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.moments.get(id.index())?.as_ref().map(|(m, _)| m)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.moments.get(id.index())?.as_ref().map(|(_, v)| v)
    }

    /// One update of every trainable parameter. `grad` yields the gradient
    /// of a parameter, or `None` when the loss did not reach it (treated as
    /// zero).
    pub fn step<'g>(&mut self, store: &mut ParamStore<F>, grad: impl Fn(ParamId) -> Option<&'g [F]>) -> Result<()>
    where
        F: 'g,
    {
        if self.moments.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.moments.len(),
                store.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1f, b2f) = (F::lit(b1), F::lit(b2));
        let (g1, g2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let (lr, eps) = (F::lit(self.learning_rate), F::lit(self.eps));
        let (c1, c2) = (F::lit(c1), F::lit(c2));
        for id in store.ids().collect::<Vec<_>>() {
            let Some((m, v)) = self.moments[id.index()].as_mut() else {
                continue;
            };
            let p = store.get_mut(id);
            if m.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: m.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            let g = grad(id);
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: vec![g.len()],
                    });
                }
            }
            let (m, v, p) = (m.data_mut(), v.data_mut(), p.data_mut());
            for i in 0..p.len() {
                let gi = g.map_or(F::zero(), |g| g[i]);
                m[i] = b1f * m[i] + g1 * gi;
                v[i] = b2f * v[i] + g2 * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_f64(&[values.len()], values).unwrap(), true).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = one_param(&[1.0, -2.0]);
        let mut adam = AdamState::new(&store, 0.1);
        let zero = [0.0, 0.0];
        adam.step(&mut store, |_| Some(&zero[..])).unwrap();
        adam.step(&mut store, |_| None).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -2.0]);
        assert_eq!(adam.t, 2);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let (mut store, id) = one_param(&[0.0, 0.0, 0.0]);
        let lr = 2e-4;
        let mut adam = AdamState::new(&store, lr);
        let g = [3.0, -0.5, 1e-3];
        adam.step(&mut store, |_| Some(&g[..])).unwrap();
        for (p, g) in store.get(id).data().iter().zip(g) {
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
            let expect = -lr * g / (g.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-15, "{p} vs {expect}");
            assert!((p + lr * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_matches_scalar_simulation() {
        let (mut store, id) = one_param(&[1.0]);
        let lr = 0.1;
        let mut adam = AdamState::new(&store, lr);
        let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut path = vec![1.0f64];
        for t in 1..=100 {
            let g = [2.0 * store.get(id).data()[0]];
            adam.step(&mut store, |_| Some(&g[..])).unwrap();
            let gx = 2.0 * x;
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            x -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((store.get(id).data()[0] - x).abs() < 1e-12, "step {t}");
            path.push(x);
        }
        // Strict descent until the first sign change; momentum then carries
        // the iterate past zero and the swings shrink.
        let cross = path.iter().position(|&x| x < 0.0).unwrap();
        assert!(path[..cross].windows(2).all(|w| w[1].abs() < w[0].abs()));
        let peak = |r: std::ops::Range<usize>| path[r].iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(peak(cross..50) < 0.5);
        assert!(peak(50..101) < peak(cross..50));
        assert!(path[100].abs() < 0.01);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::<f64>::full(&[2], 1.0), false).unwrap();
        let b = store.add("b", Tensor::<f64>::full(&[2], 1.0), true).unwrap();
        let mut adam = AdamState::new(&store, 0.1);
        let g = [1.0, 1.0];
        adam.step(&mut store, |_| Some(&g[..])).unwrap();
        assert_eq!(store.get(a).data(), &[1.0, 1.0]);
        assert!(store.get(b).data()[0] < 1.0);
        assert!(adam.first_moment(a).is_none());
        assert_eq!(adam.second_moment(b).unwrap().shape(), &[2]);
    }

    #[test]
    fn gradient_shape_mismatch_is_an_error() {
        let (mut store, _) = one_param(&[1.0, 2.0]);
        let mut adam = AdamState::new(&store, 0.1);
        let g = [1.0];
        assert!(matches!(adam.step(&mut store, |_| Some(&g[..])), Err(Error::Shape { .. })));
    }
}
