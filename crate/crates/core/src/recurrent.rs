//! GRU cell and attention pooling over its hidden states.
//!
//! ```text
//! z_t = σ(W_zx x_t + W_zh h_{t-1} + b_z)
//! r_t = σ(W_rx x_t + W_rh h_{t-1} + b_r)
//! h_t = z_t ⊙ h_{t-1} + (1 − z_t) ⊙ tanh(W_hx x_t + W_hr (r_t ⊙ h_{t-1}) + b_h)
//! ```
//!
//! Attention over the stacked states `H [T × d]`:
//!
//! ```text
//! v = tanh(H·W_a + b_a);  ω = softmax(v·u_a);  feat = Σ_t ω_t h_t
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::{glorot_uniform, orthogonal};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecurrentInit {
    #[default]
    Glorot,
    Orthogonal,
}

#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_zx: ParamId,
    pub w_zh: ParamId,
    pub b_z: ParamId,
    pub w_rx: ParamId,
    pub w_rh: ParamId,
    pub b_r: ParamId,
    pub w_hx: ParamId,
    pub w_hr: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        init: RecurrentInit,
        seed: u64,
    ) -> Result<Self> {
        let input_matrix = |store: &mut ParamStore<F>, suffix: &str| {
            let n = format!("{name}.{suffix}");
            let mut rng = SeededRng::derive(seed, &n);
            store.add(n, glorot_uniform(&[hidden, input], input, hidden, &mut rng), true)
        };
        let w_zx = input_matrix(store, "w_zx")?;
        let w_rx = input_matrix(store, "w_rx")?;
        let w_hx = input_matrix(store, "w_hx")?;
        let recurrent_matrix = |store: &mut ParamStore<F>, suffix: &str| {
            let n = format!("{name}.{suffix}");
            let mut rng = SeededRng::derive(seed, &n);
            let w = match init {
                RecurrentInit::Glorot => glorot_uniform(&[hidden, hidden], hidden, hidden, &mut rng),
                RecurrentInit::Orthogonal => orthogonal(hidden, hidden, &mut rng),
            };
            store.add(n, w, true)
        };
        let w_zh = recurrent_matrix(store, "w_zh")?;
        let w_rh = recurrent_matrix(store, "w_rh")?;
        let w_hr = recurrent_matrix(store, "w_hr")?;
        let bias = |store: &mut ParamStore<F>, suffix: &str| {
            store.add(format!("{name}.{suffix}"), Tensor::zeros(&[hidden]), true)
        };
        Ok(Self {
            w_zx,
            w_zh,
            b_z: bias(store, "b_z")?,
            w_rx,
            w_rh,
            b_r: bias(store, "b_r")?,
            w_hx,
            w_hr,
            b_h: bias(store, "b_h")?,
            input,
            hidden,
        })
    }

    pub fn param_count(&self) -> usize {
        3 * self.hidden * self.input + 3 * self.hidden * self.hidden + 3 * self.hidden
    }

    /// One recurrence step: `x_t [n × in]`, `h_prev [n × d]` → `h_t [n × d]`.
    pub fn step<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x_t: Var, h_prev: Var) -> Result<Var> {
        let xs = tape.shape(x_t);
        let hs = tape.shape(h_prev);
        if xs.len() != 2 || hs.len() != 2 || xs[1] != self.input || hs[1] != self.hidden || xs[0] != hs[0] {
            return Err(Error::Shape {
                op: "gru_step",
                lhs: xs.to_vec(),
                rhs: hs.to_vec(),
            });
        }
        let mut p = |id| tape.param(store, id);
        let (w_zx, w_zh, b_z) = (p(self.w_zx), p(self.w_zh), p(self.b_z));
        let (w_rx, w_rh, b_r) = (p(self.w_rx), p(self.w_rh), p(self.b_r));
        let (w_hx, w_hr, b_h) = (p(self.w_hx), p(self.w_hr), p(self.b_h));

        let z = gate(tape, x_t, w_zx, h_prev, w_zh, b_z)?;
        let z = tape.sigmoid(z)?;
        let r = gate(tape, x_t, w_rx, h_prev, w_rh, b_r)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h_prev)?;
        let cand = gate(tape, x_t, w_hx, rh, w_hr, b_h)?;
        let cand = tape.tanh(cand)?;

        let keep = tape.mul(z, h_prev)?;
        let one_minus_z = tape.one_minus(z)?;
        let fresh = tape.mul(one_minus_z, cand)?;
        tape.add(keep, fresh)
    }

    /// Runs the cell left to right from a zero state and stacks every
    /// hidden state into `H [n × T × d]`.
    pub fn unroll<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, sequence: &[Var]) -> Result<Var> {
        let Some(&first) = sequence.first() else {
            return Err(Error::Contract("GRU needs a nonempty sequence".into()));
        };
        let n = tape.shape(first)[0];
        let mut h = tape.constant(Tensor::zeros(&[n, self.hidden]));
        let mut states = Vec::with_capacity(sequence.len());
        for &x in sequence {
            h = self.step(tape, store, x, h)?;
            states.push(tape.reshape(h, &[n, 1, self.hidden])?);
        }
        tape.concat(&states, 1)
    }
}

/// `x·W_xᵀ + h·W_hᵀ + b`
fn gate<F: Real>(tape: &mut Tape<F>, x: Var, w_x: Var, h: Var, w_h: Var, b: Var) -> Result<Var> {
    let a = tape.matmul_t(x, w_x)?;
    let c = tape.matmul_t(h, w_h)?;
    let s = tape.add(a, c)?;
    tape.add(s, b)
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub u_a: ParamId,
    pub hidden: usize,
}

impl AttentionParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, hidden: usize, seed: u64) -> Result<Self> {
        let wn = format!("{name}.w_a");
        let mut rng = SeededRng::derive(seed, &wn);
        let w_a = store.add(wn, glorot_uniform(&[hidden, hidden], hidden, hidden, &mut rng), true)?;
        let un = format!("{name}.u_a");
        let mut rng = SeededRng::derive(seed, &un);
        let u_a = store.add(un, glorot_uniform(&[hidden], hidden, 1, &mut rng), true)?;
        Ok(Self {
            w_a,
            b_a: store.add(format!("{name}.b_a"), Tensor::zeros(&[hidden]), true)?,
            u_a,
            hidden,
        })
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.hidden + 2 * self.hidden
    }

    /// `H [n × T × d]` → (`feat [n × d]`, `weights [n × T]`).
    pub fn pool<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, states: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(states).to_vec();
        if shape.len() != 3 || shape[2] != self.hidden {
            return Err(Error::Shape {
                op: "attention_pool",
                lhs: shape,
                rhs: vec![self.hidden],
            });
        }
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let w_a = tape.param(store, self.w_a);
        let b_a = tape.param(store, self.b_a);
        let u_a = tape.param(store, self.u_a);

        let rows = tape.reshape(states, &[n * t, d])?;
        let proj = tape.matmul(rows, w_a)?;
        let proj = tape.add(proj, b_a)?;
        let v = tape.tanh(proj)?;
        let u = tape.reshape(u_a, &[d, 1])?;
        let scores = tape.matmul(v, u)?;
        let scores = tape.reshape(scores, &[n, t])?;
        let weights = tape.softmax(scores)?;
        let feat = tape.weighted_sum(weights, states)?;
        Ok((feat, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn random(shape: &[usize], rng: &mut SeededRng, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-scale, scale)).collect()).unwrap()
    }

    fn randomize(store: &mut ParamStore<f64>, rng: &mut SeededRng) {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, random(&shape, rng, 1.0)).unwrap();
        }
    }

    /// Straight-line scalar evaluation of the three gate equations.
    fn scalar_gru(store: &ParamStore<f64>, cell: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (d, m) = (cell.hidden, cell.input);
        let w = |id: ParamId, i: usize, j: usize, cols: usize| store.get(id).data()[i * cols + j];
        let b = |id: ParamId, i: usize| store.get(id).data()[i];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut z = vec![0.0; d];
        let mut r = vec![0.0; d];
        for i in 0..d {
            let mut sz = b(cell.b_z, i);
            let mut sr = b(cell.b_r, i);
            for j in 0..m {
                sz += w(cell.w_zx, i, j, m) * x[j];
                sr += w(cell.w_rx, i, j, m) * x[j];
            }
            for j in 0..d {
                sz += w(cell.w_zh, i, j, d) * h[j];
                sr += w(cell.w_rh, i, j, d) * h[j];
            }
            z[i] = sig(sz);
            r[i] = sig(sr);
        }
        (0..d)
            .map(|i| {
                let mut s = b(cell.b_h, i);
                for j in 0..m {
                    s += w(cell.w_hx, i, j, m) * x[j];
                }
                for j in 0..d {
                    s += w(cell.w_hr, i, j, d) * (r[j] * h[j]);
                }
                z[i] * h[i] + (1.0 - z[i]) * s.tanh()
            })
            .collect()
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut rng = SeededRng::new(31);
        for _ in 0..20 {
            let mut store = ParamStore::<f64>::new();
            let cell = GruCell::new(&mut store, "gru", 3, 4, RecurrentInit::Glorot, 0).unwrap();
            randomize(&mut store, &mut rng);
            let x = random(&[2, 3], &mut rng, 1.0);
            let h = random(&[2, 4], &mut rng, 1.0);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let hv = tape.constant(h.clone());
            let out = cell.step(&mut tape, &store, xv, hv).unwrap();
            for row in 0..2 {
                let want = scalar_gru(&store, &cell, &x.data()[row * 3..row * 3 + 3], &h.data()[row * 4..row * 4 + 4]);
                for (a, b) in tape.value(out).data()[row * 4..row * 4 + 4].iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, RecurrentInit::Glorot, 1).unwrap();
        store.set(cell.w_zx, Tensor::zeros(&[4, 3])).unwrap();
        store.set(cell.w_zh, Tensor::zeros(&[4, 4])).unwrap();
        store.set(cell.b_z, Tensor::full(&[4], 1e3)).unwrap();
        let mut rng = SeededRng::new(0);
        let h = random(&[1, 4], &mut rng, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(random(&[1, 3], &mut rng, 1.0));
        let hv = tape.constant(h.clone());
        let out = cell.step(&mut tape, &store, xv, hv).unwrap();
        assert_eq!(tape.value(out), &h);
    }

    #[test]
    fn closed_gates_from_zero_state_give_candidate() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, RecurrentInit::Glorot, 2).unwrap();
        for id in [cell.w_zx, cell.w_rx] {
            store.set(id, Tensor::zeros(&[4, 3])).unwrap();
        }
        for id in [cell.w_zh, cell.w_rh] {
            store.set(id, Tensor::zeros(&[4, 4])).unwrap();
        }
        store.set(cell.b_z, Tensor::full(&[4], -1e3)).unwrap();
        store.set(cell.b_r, Tensor::full(&[4], -1e3)).unwrap();
        store.set(cell.b_h, Tensor::from_f64(&[4], &[0.1, 0.2, -0.3, 0.0]).unwrap()).unwrap();
        let mut rng = SeededRng::new(3);
        let x = random(&[1, 3], &mut rng, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv = tape.constant(Tensor::zeros(&[1, 4]));
        let out = cell.step(&mut tape, &store, xv, hv).unwrap();
        let w = store.get(cell.w_hx).data();
        let b = store.get(cell.b_h).data();
        for i in 0..4 {
            let s: f64 = (0..3).map(|j| w[i * 3 + j] * x.data()[j]).sum::<f64>() + b[i];
            assert!((tape.value(out).data()[i] - s.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn unroll_rejects_empty_and_stacks_states() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 2, 3, RecurrentInit::Glorot, 4).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(cell.unroll(&mut tape, &store, &[]), Err(Error::Contract(_))));

        let mut rng = SeededRng::new(5);
        let x = random(&[2, 2], &mut rng, 1.0);
        let xv = tape.constant(x);
        let h = cell.unroll(&mut tape, &store, &[xv]).unwrap();
        assert_eq!(tape.shape(h), &[2, 1, 3]);
        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        let single = cell.step(&mut tape, &store, xv, zero).unwrap();
        assert_eq!(tape.value(h).data(), tape.value(single).data());
    }

    #[test]
    fn saturated_update_gate_never_leaves_zero_state() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 2, 3, RecurrentInit::Glorot, 4).unwrap();
        store.set(cell.w_zx, Tensor::zeros(&[3, 2])).unwrap();
        store.set(cell.w_zh, Tensor::zeros(&[3, 3])).unwrap();
        store.set(cell.b_z, Tensor::full(&[3], 1e3)).unwrap();
        let mut rng = SeededRng::new(6);
        let mut tape = Tape::new();
        let seq: Vec<Var> = (0..5).map(|_| tape.constant(random(&[2, 2], &mut rng, 1.0))).collect();
        let h = cell.unroll(&mut tape, &store, &seq).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unroll_is_order_sensitive() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 2, 3, RecurrentInit::Glorot, 7).unwrap();
        let mut rng = SeededRng::new(8);
        let xs: Vec<Tensor<f64>> = (0..4).map(|_| random(&[1, 2], &mut rng, 1.0)).collect();
        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let seq: Vec<Var> = order.iter().map(|&i| tape.constant(xs[i].clone())).collect();
            let h = cell.unroll(&mut tape, &store, &seq).unwrap();
            tape.value(h).clone()
        };
        assert_ne!(run(&[0, 1, 2, 3]), run(&[3, 1, 0, 2]));
    }

    #[test]
    fn hidden_states_stay_inside_unit_interval() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 3, 5, RecurrentInit::Orthogonal, 9).unwrap();
        let mut rng = SeededRng::new(10);
        randomize(&mut store, &mut rng);
        let mut tape = Tape::new();
        let seq: Vec<Var> = (0..30).map(|_| tape.constant(random(&[3, 3], &mut rng, 5.0))).collect();
        let h = cell.unroll(&mut tape, &store, &seq).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn step_gradients_for_all_nine_tensors() {
        let mut rng = SeededRng::new(15);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, RecurrentInit::Glorot, 0).unwrap();
        randomize(&mut store, &mut rng);
        let x = random(&[2, 3], &mut rng, 1.0);
        let h = random(&[2, 4], &mut rng, 1.0);
        let w = random(&[2, 4], &mut rng, 1.0);
        for id in store.ids().collect::<Vec<_>>() {
            let err = param_grad_error(&store, id, |tape, s| {
                let xv = tape.constant(x.clone());
                let hv = tape.constant(h.clone());
                let y = cell.step(tape, s, xv, hv)?;
                let wv = tape.constant(w.clone());
                let yw = tape.mul(y, wv)?;
                tape.sum(yw)
            });
            assert!(err < 1e-4, "{}: {err}", store.name(id));
        }
    }

    /// Max relative error of the tape gradient of one stored parameter.
    fn param_grad_error(
        store: &ParamStore<f64>,
        id: ParamId,
        f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    ) -> f64 {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.param_grad(id).unwrap().to_vec();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                let mut t = Tape::new();
                let l = f(&mut t, &s).unwrap();
                t.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(crate::tensor::relative_error(analytic[i], numeric));
        }
        worst
    }

    #[test]
    fn attention_single_step_returns_state() {
        let mut store = ParamStore::<f64>::new();
        let att = AttentionParams::new(&mut store, "att", 4, 0).unwrap();
        let mut rng = SeededRng::new(16);
        let hv = random(&[3, 1, 4], &mut rng, 1.0);
        let mut tape = Tape::new();
        let h = tape.constant(hv.clone());
        let (feat, w) = att.pool(&mut tape, &store, h).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 1.0));
        assert_eq!(tape.value(feat).data(), hv.data());
    }

    #[test]
    fn attention_identical_steps_share_weight() {
        let mut store = ParamStore::<f64>::new();
        let att = AttentionParams::new(&mut store, "att", 4, 0).unwrap();
        let row = [0.3, -0.2, 0.9, 0.1];
        let data: Vec<f64> = row.iter().chain(row.iter()).copied().collect();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_f64(&[1, 2, 4], &data).unwrap());
        let (_, w) = att.pool(&mut tape, &store, h).unwrap();
        assert_eq!(tape.value(w).data(), &[0.5, 0.5]);
    }

    #[test]
    fn attention_matches_explicit_weighted_sum() {
        let mut rng = SeededRng::new(17);
        let mut store = ParamStore::<f64>::new();
        let att = AttentionParams::new(&mut store, "att", 8, 0).unwrap();
        randomize(&mut store, &mut rng);
        let (n, t, d) = (2, 5, 8);
        let hv = random(&[n, t, d], &mut rng, 1.0);
        let mut tape = Tape::new();
        let h = tape.constant(hv.clone());
        let (feat, w) = att.pool(&mut tape, &store, h).unwrap();

        let wa = store.get(att.w_a).data();
        let ba = store.get(att.b_a).data();
        let ua = store.get(att.u_a).data();
        for i in 0..n {
            let scores: Vec<f64> = (0..t)
                .map(|s| {
                    let hrow = &hv.data()[(i * t + s) * d..(i * t + s + 1) * d];
                    (0..d)
                        .map(|j| {
                            let pre: f64 = (0..d).map(|k| hrow[k] * wa[k * d + j]).sum::<f64>() + ba[j];
                            pre.tanh() * ua[j]
                        })
                        .sum()
                })
                .collect();
            let max = scores.iter().copied().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
            let got_w = &tape.value(w).data()[i * t..(i + 1) * t];
            assert!((got_w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, b) in got_w.iter().zip(&weights) {
                assert!((a - b).abs() < 1e-12);
            }
            for j in 0..d {
                let want: f64 = (0..t).map(|s| weights[s] * hv.data()[(i * t + s) * d + j]).sum();
                let got = tape.value(feat).data()[i * d + j];
                assert!((got - want).abs() < 1e-12);
                let col: Vec<f64> = (0..t).map(|s| hv.data()[(i * t + s) * d + j]).collect();
                let lo = col.iter().copied().fold(f64::MAX, f64::min);
                let hi = col.iter().copied().fold(f64::MIN, f64::max);
                assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = SeededRng::new(18);
        let mut store = ParamStore::<f64>::new();
        let att = AttentionParams::new(&mut store, "att", 5, 0).unwrap();
        randomize(&mut store, &mut rng);
        let hv = random(&[2, 3, 5], &mut rng, 1.0);
        let w = random(&[2, 5], &mut rng, 1.0);
        for id in store.ids().collect::<Vec<_>>() {
            let err = param_grad_error(&store, id, |tape, s| {
                let h = tape.constant(hv.clone());
                let (feat, _) = att.pool(tape, s, h)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(feat, wv)?;
                tape.sum(p)
            });
            assert!(err < 1e-5, "{}: {err}", store.name(id));
        }
        let err = finite_diff_check(
            |tape, h| {
                let (feat, _) = att.pool(tape, &store, h)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(feat, wv)?;
                tape.sum(p)
            },
            &hv,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "dH {err}");
    }

    #[test]
    fn parameter_counts_at_full_size() {
        let mut store = ParamStore::<f32>::new();
        let att = AttentionParams::new(&mut store, "att", 1024, 0).unwrap();
        assert_eq!(att.param_count(), 1_050_624);
        assert_eq!(store.count_trainable("att."), 1_050_624);
        let gru = GruCell::new(&mut store, "gru", 64, 1024, RecurrentInit::Glorot, 0).unwrap();
        assert_eq!(gru.param_count(), 3_345_408);
        assert_eq!(store.count_trainable("gru."), 3_345_408);
    }
}
