//! Valid, stride-1 2-D convolution (cross-correlation) via im2col.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::kernels::{matmul_nn, matmul_nt, matmul_tn};
use crate::tensor::{BackwardCtx, BackwardRule, Real, Tape, Tensor, Var};

use super::init::glorot_uniform;
use super::{BatchNorm, Ctx, Dropout};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// `x [N×Cin×H×W]`, `kernel [Cout×Cin×kh×kw]`, `bias [Cout]` →
/// `[N×Cout×(H−kh+1)×(W−kw+1)]`.
pub fn conv2d<F: Real>(tape: &mut Tape<F>, x: Var, kernel: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(kernel).to_vec();
    let bs = tape.shape(bias).to_vec();
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || bs != [ks[0]] {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: xs,
            rhs: ks,
        });
    }
    if xs[2] < ks[2] || xs[3] < ks[3] {
        return Err(Error::Dimension(format!(
            "conv2d input {}x{} is smaller than the {}x{} kernel",
            xs[2], xs[3], ks[2], ks[3]
        )));
    }
    let g = Geometry {
        n: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ks[0],
        kh: ks[2],
        kw: ks[3],
        ho: xs[2] - ks[2] + 1,
        wo: xs[3] - ks[3] + 1,
    };
    let cols = im2col(tape.value(x).data(), &g);
    let mut rows = vec![F::zero(); g.positions() * g.cout];
    matmul_nt(&cols, tape.value(kernel).data(), &mut rows, g.positions(), g.patch_len(), g.cout);

    let b = tape.value(bias).data();
    let plane = g.ho * g.wo;
    let mut out = vec![F::zero(); g.n * g.cout * plane];
    for n in 0..g.n {
        for p in 0..plane {
            let row = &rows[(n * plane + p) * g.cout..(n * plane + p + 1) * g.cout];
            for (co, (&v, &bv)) in row.iter().zip(b).enumerate() {
                out[(n * g.cout + co) * plane + p] = v + bv;
            }
        }
    }
    let value = Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)?;
    tape.custom(
        value,
        Box::new(ConvRule {
            x,
            kernel,
            bias,
            geom: g,
            cols,
        }),
    )
}

/// Rows are output positions `(n, oy, ox)`, columns follow the kernel
/// layout `(c, ky, kx)`.
fn im2col<F: Real>(x: &[F], g: &Geometry) -> Vec<F> {
    let mut cols = Vec::with_capacity(g.positions() * g.patch_len());
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for c in 0..g.cin {
                    let base = (n * g.cin + c) * g.h * g.w;
                    for ky in 0..g.kh {
                        let start = base + (oy + ky) * g.w + ox;
                        cols.extend_from_slice(&x[start..start + g.kw]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(cols: &[F], g: &Geometry) -> Vec<F> {
    let mut x = vec![F::zero(); g.n * g.cin * g.h * g.w];
    let mut chunks = cols.chunks_exact(g.kw);
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for c in 0..g.cin {
                    let base = (n * g.cin + c) * g.h * g.w;
                    for ky in 0..g.kh {
                        let start = base + (oy + ky) * g.w + ox;
                        let chunk = chunks.next().expect("cols sized by geometry");
                        for (dst, &v) in x[start..start + g.kw].iter_mut().zip(chunk) {
                            *dst += v;
                        }
                    }
                }
            }
        }
    }
    x
}

struct ConvRule<F> {
    x: Var,
    kernel: Var,
    bias: Var,
    geom: Geometry,
    cols: Vec<F>,
}

impl<F: Real> BackwardRule<F> for ConvRule<F> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.kernel, self.bias]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, _out: &Tensor<F>, grad: &[F]) -> Vec<Option<Vec<F>>> {
        let g = &self.geom;
        let plane = g.ho * g.wo;
        let positions = g.positions();
        let mut grows = vec![F::zero(); positions * g.cout];
        for n in 0..g.n {
            for co in 0..g.cout {
                let src = &grad[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
                for (p, &v) in src.iter().enumerate() {
                    grows[(n * plane + p) * g.cout + co] = v;
                }
            }
        }

        let dx = ctx.requires_grad(self.x).then(|| {
            let mut dcols = vec![F::zero(); positions * g.patch_len()];
            matmul_nn(&grows, ctx.value(self.kernel).data(), &mut dcols, positions, g.cout, g.patch_len());
            col2im(&dcols, g)
        });
        let dk = ctx.requires_grad(self.kernel).then(|| {
            let mut dk = vec![F::zero(); g.cout * g.patch_len()];
            matmul_tn(&grows, &self.cols, &mut dk, g.cout, positions, g.patch_len());
            dk
        });
        let db = ctx.requires_grad(self.bias).then(|| {
            let mut db = vec![F::zero(); g.cout];
            for row in grows.chunks_exact(g.cout) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            db
        });
        vec![dx, dk, db]
    }
}

/// Convolution layer with a square kernel of side 1 or 3.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
}

impl Conv2d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        if size != 1 && size != 3 {
            return Err(Error::Contract(format!("kernel size must be 1 or 3, got {size}")));
        }
        let fan_in = in_channels * size * size;
        let fan_out = out_channels * size * size;
        let kname = format!("{name}.kernel");
        let mut rng = SeededRng::derive(seed, &kname);
        let kernel = glorot_uniform(&[out_channels, in_channels, size, size], fan_in, fan_out, &mut rng);
        Ok(Self {
            kernel: store.add(kname, kernel, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?,
            in_channels,
            out_channels,
            size,
        })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let k = ctx.param(self.kernel);
        let b = ctx.param(self.bias);
        conv2d(ctx.tape, x, k, b)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.size * self.size + self.out_channels
    }
}

/// Placement of the activation relative to batch normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayerOrder {
    /// conv → ReLU → BN
    #[default]
    ReluThenNorm,
    /// conv → BN → ReLU
    NormThenRelu,
}

/// conv → ReLU → batch norm → dropout (dropout optional).
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: BatchNorm,
    pub dropout: Option<Dropout>,
    pub order: LayerOrder,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        dropout: Option<f64>,
        order: LayerOrder,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, size, seed)?,
            norm: BatchNorm::new(store, &format!("{name}.bn"), out_channels)?,
            dropout: dropout.map(Dropout::new).transpose()?,
            order,
        })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = match self.order {
            LayerOrder::ReluThenNorm => {
                let a = ctx.tape.relu(y)?;
                self.norm.forward(ctx, a)?
            }
            LayerOrder::NormThenRelu => {
                let n = self.norm.forward(ctx, y)?;
                ctx.tape.relu(n)?
            }
        };
        match &self.dropout {
            Some(d) => d.forward(ctx, y),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 2 * self.norm.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::finite_diff_check;

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn all_ones_kernel_sums_nine_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = conv2d(&mut tape, x, k, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn two_valid_convs_reach_one_by_one() {
        let mut rng = SeededRng::new(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[2, 4, 5, 5], &mut rng));
        let k1 = tape.constant(random(&[3, 4, 3, 3], &mut rng));
        let b1 = tape.constant(Tensor::zeros(&[3]));
        let y = conv2d(&mut tape, x, k1, b1).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 3, 3]);
        let k2 = tape.constant(random(&[6, 3, 3, 3], &mut rng));
        let b2 = tape.constant(Tensor::zeros(&[6]));
        let z = conv2d(&mut tape, y, k2, b2).unwrap();
        assert_eq!(tape.shape(z), &[2, 6, 1, 1]);
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 5]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(conv2d(&mut tape, x, k, b), Err(Error::Dimension(_))));
        let x = tape.constant(Tensor::ones(&[1, 2, 5, 5]));
        assert!(matches!(conv2d(&mut tape, x, k, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn one_by_one_kernel_is_a_per_pixel_dense_map() {
        let mut rng = SeededRng::new(3);
        let (cin, cout, h, w) = (4, 3, 2, 3);
        let xv = random(&[1, cin, h, w], &mut rng);
        let kv = random(&[cout, cin, 1, 1], &mut rng);
        let bv = random(&[cout], &mut rng);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv.clone());
        let k = tape.constant(kv.clone());
        let b = tape.constant(bv.clone());
        let y = conv2d(&mut tape, x, k, b).unwrap();

        // Oracle: pixels as rows [HW×Cin] times Kᵀ through the tape matmul.
        let mut pix = vec![0.0; h * w * cin];
        for c in 0..cin {
            for p in 0..h * w {
                pix[p * cin + c] = xv.data()[c * h * w + p];
            }
        }
        let pv = tape.constant(Tensor::new(vec![h * w, cin], pix).unwrap());
        let kt = tape.constant(kv.clone().reshape(&[cout, cin]).unwrap());
        let prod = tape.matmul_t(pv, kt).unwrap();
        let dense = tape.add(prod, b).unwrap();
        for c in 0..cout {
            for p in 0..h * w {
                let got = tape.value(y).data()[c * h * w + p];
                let want = tape.value(dense).data()[p * cout + c];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_one_by_one_kernel_is_identity() {
        let mut rng = SeededRng::new(4);
        let c = 3;
        let xv = random(&[2, c, 4, 4], &mut rng);
        let mut eye = Tensor::<f64>::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv.clone());
        let k = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[c]));
        let y = conv2d(&mut tape, x, k, b).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(5);
        let xv = random(&[2, 3, 5, 4], &mut rng);
        let kv = random(&[2, 3, 3, 3], &mut rng);
        let bv = random(&[2], &mut rng);
        let wv = random(&[2, 2, 3, 2], &mut rng);
        let loss = |tape: &mut Tape<f64>, x: Var, k: Var, b: Var| -> Result<Var> {
            let y = conv2d(tape, x, k, b)?;
            let w = tape.constant(wv.clone());
            let p = tape.mul(y, w)?;
            let t = tape.tanh(p)?;
            tape.sum(t)
        };
        let e = finite_diff_check(
            |t, x| {
                let k = t.constant(kv.clone());
                let b = t.constant(bv.clone());
                loss(t, x, k, b)
            },
            &xv,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "dx {e}");
        let e = finite_diff_check(
            |t, k| {
                let x = t.constant(xv.clone());
                let b = t.constant(bv.clone());
                loss(t, x, k, b)
            },
            &kv,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "dk {e}");
        let e = finite_diff_check(
            |t, b| {
                let x = t.constant(xv.clone());
                let k = t.constant(kv.clone());
                loss(t, x, k, b)
            },
            &bv,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "db {e}");
    }

    #[test]
    fn kernel_size_is_restricted() {
        let mut store = ParamStore::<f32>::new();
        assert!(Conv2d::new(&mut store, "c", 2, 2, 5, 0).is_err());
        let c = Conv2d::new(&mut store, "c3", 30, 256, 3, 0).unwrap();
        assert_eq!(c.param_count(), 69_376);
        assert_eq!(store.count_trainable("c3."), 69_376);
    }

    #[test]
    fn block_in_infer_mode_ignores_rng() {
        let mut store = ParamStore::<f32>::new();
        let block = ConvBlock::new(&mut store, "b", 2, 4, 3, Some(0.4), LayerOrder::default(), 1).unwrap();
        let mut rng = SeededRng::new(9);
        let xv: Tensor<f32> = random(&[3, 2, 5, 5], &mut rng).cast();
        let run = |seed: u64, store: &mut ParamStore<f32>| {
            let mut tape = Tape::inference();
            let mut rng = SeededRng::new(seed);
            let mut ctx = Ctx {
                tape: &mut tape,
                store,
                mode: Mode::Infer,
                rng: &mut rng,
            };
            let x = ctx.tape.constant(xv.clone());
            let y = block.forward(&mut ctx, x).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(1, &mut store), run(2, &mut store));
    }

    #[test]
    fn block_with_identical_samples_stays_finite() {
        let mut store = ParamStore::<f32>::new();
        let block = ConvBlock::new(&mut store, "b", 1, 4, 3, Some(0.4), LayerOrder::default(), 1).unwrap();
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(0);
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &mut store,
            mode: Mode::Train,
            rng: &mut rng,
        };
        let x = ctx.tape.constant(Tensor::full(&[8, 1, 3, 3], 0.7));
        let y = block.forward(&mut ctx, x).unwrap();
        assert!(tape.value(y).is_finite());
    }
}
