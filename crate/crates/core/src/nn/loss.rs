use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, BackwardRule, Real, Tape, Tensor, Var};

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy<F: Real>(tape: &mut Tape<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
    }
    let z = tape.value(logits).data();
    let mut probs = vec![F::zero(); n * c];
    let mut total = F::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &z[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += log_norm - row[label];
        for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
            *p = (v - log_norm).exp();
        }
    }
    let loss = total / F::lit(n as f64);
    tape.custom(
        Tensor::scalar(loss),
        Box::new(CrossEntropyRule {
            logits,
            labels: labels.to_vec(),
            probs,
        }),
    )
}

struct CrossEntropyRule<F> {
    logits: Var,
    labels: Vec<usize>,
    probs: Vec<F>,
}

impl<F: Real> BackwardRule<F> for CrossEntropyRule<F> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, F>, _out: &Tensor<F>, grad: &[F]) -> Vec<Option<Vec<F>>> {
        let n = self.labels.len();
        let c = self.probs.len() / n;
        let scale = grad[0] / F::lit(n as f64);
        let mut d: Vec<F> = self.probs.iter().map(|&p| p * scale).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            d[i * c + l] -= scale;
        }
        vec![Some(d)]
    }
}
