//! Differentiable operations recorded on the tape, and their backward rules.

use crate::error::{Error, Result};

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::tape::{BackwardCtx, Node, Op};
use super::{Real, Tape, Tensor, Var};

impl<F: Real> Tape<F> {
    fn rg(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims("matmul", self.shape(a), self.shape(b), false)?;
        let mut out = vec![F::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the product of a dense layer whose weight is
    /// stored `[out × in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims("matmul_t", self.shape(a), self.shape(b), true)?;
        let mut out = vec![F::zero(); m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_t", Tensor::new(vec![m, n], out)?, rg, Op::MatMulT(a, b))
    }

    /// Elementwise sum. The second operand may also be a vector matching the
    /// trailing axis of the first (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
            let rg = self.rg(a) || self.rg(b);
            return self.push("add", out, rg, Op::Add(a, b));
        }
        if self.shape(a).len() == 1 && self.shape(b).len() > 1 {
            return self.add_bias(b, a);
        }
        self.add_bias(a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, rg, Op::Mul(a, b))
    }

    fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sb[0];
        let bv = self.value(bias).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (x, &b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push("add_bias", out, rg, Op::AddBias(a, bias))
    }

    /// Multiply by a constant of the same shape (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, factor: Vec<F>) -> Result<Var> {
        if factor.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![factor.len()],
            });
        }
        let mut out = self.value(a).clone();
        for (x, &f) in out.data_mut().iter_mut().zip(&factor) {
            *x *= f;
        }
        let rg = self.rg(a);
        self.push("mul_const", out, rg, Op::MulConst(a, factor))
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Result<Var> {
        let out = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push("affine", out, rg, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        self.affine(a, s, F::zero())
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -F::one(), F::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", out, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push("tanh", out, rg, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        let rg = self.rg(a);
        self.push("relu", out, rg, Op::Relu(a))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut axis_len = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", out, rg, Op::Reshape(a))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} out of range for {shape:?}",
                start + len
            )));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(a);
        self.push("slice_rows", Tensor::new(out_shape, data)?, rg, Op::SliceRows { src: a, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: F = v.data().iter().copied().sum();
        let m = s / F::lit(v.len() as f64);
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(m), rg, Op::Mean(a))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().ok_or_else(|| Error::Dimension("softmax of a scalar".into()))?;
        let mut out = v.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push("softmax", out, rg, Op::Softmax(a))
    }

    /// `out[i,:] = Σ_t weights[i,t] · values[i,t,:]` for weights `[n×T]` and
    /// values `[n×T×d]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let sw = self.shape(weights);
        let sv = self.shape(values);
        if sw.len() != 2 || sv.len() != 3 || sw[0] != sv[0] || sw[1] != sv[1] {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: sw.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let (n, t, d) = (sv[0], sv[1], sv[2]);
        let w = self.value(weights).data();
        let h = self.value(values).data();
        let mut out = vec![F::zero(); n * d];
        for i in 0..n {
            let orow = &mut out[i * d..(i + 1) * d];
            for s in 0..t {
                let wv = w[i * t + s];
                let hrow = &h[(i * t + s) * d..(i * t + s + 1) * d];
                for (o, &x) in orow.iter_mut().zip(hrow) {
                    *o += wv * x;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(values);
        self.push(
            "weighted_sum",
            Tensor::new(vec![n, d], out)?,
            rg,
            Op::WeightedSum { weights, values },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

fn matmul_dims(op: &'static str, a: &[usize], b: &[usize], transposed: bool) -> Result<(usize, usize, usize)> {
    let err = || Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != 2 || b.len() != 2 {
        return Err(err());
    }
    let (bk, n) = if transposed { (b[1], b[0]) } else { (b[0], b[1]) };
    if a[1] != bk {
        return Err(err());
    }
    Ok((a[0], a[1], n))
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}

/// Gradient contributions of one node to its inputs.
pub(crate) fn backward_op<F: Real>(ctx: &BackwardCtx<'_, F>, node: &Node<F>, g: &[F]) -> Vec<(Var, Vec<F>)> {
    let out = &node.value;
    let mut acc = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(ctx.value(*a));
            let n = ctx.value(*b).shape()[1];
            if ctx.requires_grad(*a) {
                let mut da = vec![F::zero(); m * k];
                matmul_nt(g, ctx.value(*b).data(), &mut da, m, n, k);
                acc.push((*a, da));
            }
            if ctx.requires_grad(*b) {
                let mut db = vec![F::zero(); k * n];
                matmul_tn(ctx.value(*a).data(), g, &mut db, k, m, n);
                acc.push((*b, db));
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = dims2(ctx.value(*a));
            let n = ctx.value(*b).shape()[0];
            if ctx.requires_grad(*a) {
                let mut da = vec![F::zero(); m * k];
                matmul_nn(g, ctx.value(*b).data(), &mut da, m, n, k);
                acc.push((*a, da));
            }
            if ctx.requires_grad(*b) {
                let mut db = vec![F::zero(); n * k];
                matmul_tn(g, ctx.value(*a).data(), &mut db, n, m, k);
                acc.push((*b, db));
            }
        }
        Op::Add(a, b) => {
            acc.push((*a, g.to_vec()));
            acc.push((*b, g.to_vec()));
        }
        Op::Sub(a, b) => {
            acc.push((*a, g.to_vec()));
            acc.push((*b, g.iter().map(|&x| -x).collect()));
        }
        Op::Mul(a, b) => {
            let av = ctx.value(*a).data();
            let bv = ctx.value(*b).data();
            if ctx.requires_grad(*a) {
                acc.push((*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
            }
            if ctx.requires_grad(*b) {
                acc.push((*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect()));
            }
        }
        Op::AddBias(a, bias) => {
            acc.push((*a, g.to_vec()));
            if ctx.requires_grad(*bias) {
                let n = ctx.value(*bias).len();
                let mut db = vec![F::zero(); n];
                for row in g.chunks_exact(n) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc.push((*bias, db));
            }
        }
        Op::MulConst(a, factor) => {
            acc.push((*a, g.iter().zip(factor).map(|(&x, &f)| x * f).collect()));
        }
        Op::Affine(a, scale) => {
            acc.push((*a, g.iter().map(|&x| x * *scale).collect()));
        }
        Op::Sigmoid(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(&x, &y)| x * y * (F::one() - y))
                .collect();
            acc.push((*a, d));
        }
        Op::Tanh(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(&x, &y)| x * (F::one() - y * y))
                .collect();
            acc.push((*a, d));
        }
        Op::Relu(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(&x, &y)| if y > F::zero() { x } else { F::zero() })
                .collect();
            acc.push((*a, d));
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let chunk = ctx.value(v).shape()[*axis] * inner;
                if ctx.requires_grad(v) {
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    acc.push((v, d));
                }
                offset += chunk;
            }
        }
        Op::Reshape(a) => acc.push((*a, g.to_vec())),
        Op::SliceRows { src, start } => {
            let src_val = ctx.value(*src);
            let row: usize = src_val.shape()[1..].iter().product();
            let mut d = vec![F::zero(); src_val.len()];
            d[start * row..start * row + g.len()].copy_from_slice(g);
            acc.push((*src, d));
        }
        Op::Sum(a) => acc.push((*a, vec![g[0]; ctx.value(*a).len()])),
        Op::Mean(a) => {
            let n = ctx.value(*a).len();
            acc.push((*a, vec![g[0] / F::lit(n as f64); n]));
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            let mut d = vec![F::zero(); out.len()];
            for ((drow, grow), yrow) in d
                .chunks_exact_mut(n)
                .zip(g.chunks_exact(n))
                .zip(out.data().chunks_exact(n))
            {
                let dot: F = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *dv = yv * (gv - dot);
                }
            }
            acc.push((*a, d));
        }
        Op::WeightedSum { weights, values } => {
            let sv = ctx.value(*values).shape();
            let (n, t, d) = (sv[0], sv[1], sv[2]);
            let w = ctx.value(*weights).data();
            let h = ctx.value(*values).data();
            if ctx.requires_grad(*weights) {
                let mut dw = vec![F::zero(); n * t];
                for i in 0..n {
                    let grow = &g[i * d..(i + 1) * d];
                    for s in 0..t {
                        let hrow = &h[(i * t + s) * d..(i * t + s + 1) * d];
                        dw[i * t + s] = grow.iter().zip(hrow).map(|(&x, &y)| x * y).sum();
                    }
                }
                acc.push((*weights, dw));
            }
            if ctx.requires_grad(*values) {
                let mut dh = vec![F::zero(); n * t * d];
                for i in 0..n {
                    let grow = &g[i * d..(i + 1) * d];
                    for s in 0..t {
                        let wv = w[i * t + s];
                        let drow = &mut dh[(i * t + s) * d..(i * t + s + 1) * d];
                        for (dv, &x) in drow.iter_mut().zip(grow) {
                            *dv = wv * x;
                        }
                    }
                }
                acc.push((*values, dh));
            }
        }
        Op::Custom(rule) => {
            let grads = rule.backward(ctx, out, g);
            for (v, gv) in rule.inputs().into_iter().zip(grads) {
                if let Some(gv) = gv {
                    acc.push((v, gv));
                }
            }
        }
    }
    acc
}

fn dims2<F: Real>(t: &Tensor<F>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}
