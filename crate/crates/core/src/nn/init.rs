//! Weight initializers.

use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<F: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.uniform_range(-limit, limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches data")
}

/// Matrix with orthonormal rows (or columns, whichever are fewer), from
/// modified Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<F: Real>(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor<F> {
    let (n, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A draw nearly inside the current span is discarded and redrawn.
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut data = vec![F::zero(); rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            data[r * cols + c] = F::lit(x);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape product matches data")
}
