//! Matrix product kernels.
//!
//! Every output element accumulates its products in ascending inner index,
//! whatever the blocking or thread count, so results are bit-reproducible.
//! Threads only split output rows.

use std::sync::OnceLock;

use super::Real;

const ROW_BLOCK: usize = 4;
const INNER_BLOCK: usize = 256;
// Below this many multiply-adds a split across threads is not worth it.
const PAR_THRESHOLD: usize = 1 << 20;

/// Worker threads for kernels, read once from `DUPLO_THREADS`.
/// Unset or `0` means single-threaded.
pub fn thread_count() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("DUPLO_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0)
            .max(1)
    })
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let threads = thread_count();
    if threads <= 1 || m < 2 * ROW_BLOCK || m * k * n < PAR_THRESHOLD {
        nn_serial(a, b, c, m, k, n);
        return;
    }
    let rows_per = m.div_ceil(threads).next_multiple_of(ROW_BLOCK);
    std::thread::scope(|s| {
        for (chunk, c_rows) in c.chunks_mut(rows_per * n).enumerate() {
            let rows = c_rows.len() / n;
            let a_rows = &a[chunk * rows_per * k..(chunk * rows_per + rows) * k];
            s.spawn(move || nn_serial(a_rows, b, c_rows, rows, k, n));
        }
    });
}

fn nn_serial<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for k0 in (0..k).step_by(INNER_BLOCK) {
        let k1 = (k0 + INNER_BLOCK).min(k);
        let mut i = 0;
        while i + ROW_BLOCK <= m {
            let block = &mut c[i * n..(i + ROW_BLOCK) * n];
            let (c0, rest) = block.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for p in k0..k1 {
                let brow = &b[p * n..(p + 1) * n];
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                for ((((x0, x1), x2), x3), &bv) in c0
                    .iter_mut()
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                    .zip(brow)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            i += ROW_BLOCK;
        }
        for i in i..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in k0..k1 {
                let av = a[i * k + p];
                for (x, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *x += av * bv;
                }
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let threads = thread_count();
    if threads <= 1 || m < 2 * ROW_BLOCK || m * k * n < PAR_THRESHOLD {
        tn_serial(a, b, c, 0, m, m, k, n);
        return;
    }
    let rows_per = m.div_ceil(threads).next_multiple_of(ROW_BLOCK);
    std::thread::scope(|s| {
        for (chunk, c_rows) in c.chunks_mut(rows_per * n).enumerate() {
            let rows = c_rows.len() / n;
            s.spawn(move || tn_serial(a, b, c_rows, chunk * rows_per, rows, m, k, n));
        }
    });
}

/// Computes output rows `row0..row0 + rows` of `aᵀ·b` into `c`.
#[allow(clippy::too_many_arguments)]
fn tn_serial<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    row0: usize,
    rows: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    let mut i = 0;
    while i + ROW_BLOCK <= rows {
        let block = &mut c[i * n..(i + ROW_BLOCK) * n];
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let col = row0 + i;
        for p in 0..k {
            let arow = &a[p * m + col..p * m + col + ROW_BLOCK];
            let brow = &b[p * n..(p + 1) * n];
            let (a0, a1, a2, a3) = (arow[0], arow[1], arow[2], arow[3]);
            for ((((x0, x1), x2), x3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(brow)
            {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
        i += ROW_BLOCK;
    }
    for i in i..rows {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[p * m + row0 + i];
            for (x, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *x += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_nn(a, &bt, c, m, k, n);
}

/// Row-major `[rows×cols]` to `[cols×rows]`.
pub fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for (r, row) in a.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}
