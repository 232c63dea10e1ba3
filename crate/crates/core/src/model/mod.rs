//! The dual-branch network.
//!
//! Input is one tensor `[n × T × B × 5 × 5]`. The convolutional branch sees
//! it as a stacked image `[n × (T·B) × 5 × 5]` (all bands of the first date,
//! then the second date, and so on). The recurrent branch runs a small CNN on
//! each date with shared weights, feeds the resulting vectors through a GRU,
//! and pools the hidden states with attention.

mod checkpoint;
mod gradcheck;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{model_gradcheck, GradcheckEntry};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, ConvBlock, Ctx, Dense, Dropout, LayerOrder, Mode};
use crate::params::ParamStore;
use crate::recurrent::{AttentionParams, GruCell, RecurrentInit};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Side of the square patch the network consumes.
pub const PATCH: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    Full,
    NoAux,
    CnnOnly,
    RnnOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoAux, Variant::CnnOnly, Variant::RnnOnly];

    pub fn tag(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::NoAux => 1,
            Variant::CnnOnly => 2,
            Variant::RnnOnly => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown variant tag {tag}")))
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "DuPLO",
            Variant::NoAux => "DuPLO_noAux",
            Variant::CnnOnly => "Cbranch",
            Variant::RnnOnly => "Rbranch",
        }
    }

    pub fn has_cnn(self) -> bool {
        self != Variant::RnnOnly
    }

    pub fn has_rnn(self) -> bool {
        self != Variant::CnnOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoAux => "noaux",
            Variant::CnnOnly => "cnn",
            Variant::RnnOnly => "rnn",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "duplo" => Ok(Variant::Full),
            "noaux" | "duplo_noaux" => Ok(Variant::NoAux),
            "cnn" | "cbranch" => Ok(Variant::CnnOnly),
            "rnn" | "rbranch" => Ok(Variant::RnnOnly),
            other => Err(Error::Contract(format!(
                "unknown variant `{other}` (expected full, noaux, cnn or rnn)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub timestamps: usize,
    pub bands: usize,
    /// GRU hidden size `d`.
    pub hidden: usize,
    /// Feature maps of the three convolutional blocks (3×3, 3×3, 1×1).
    pub cnn_widths: [usize; 3],
    /// Filters of the two per-date 3×3 convolutions.
    pub scnn_filters: [usize; 2],
    pub head_width: usize,
    pub dropout: f64,
    pub layer_order: LayerOrder,
    pub recurrent_init: RecurrentInit,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size network.
    pub fn new(num_classes: usize, timestamps: usize, bands: usize) -> Self {
        Self {
            num_classes,
            timestamps,
            bands,
            hidden: 1024,
            cnn_widths: [256, 512, 1024],
            scnn_filters: [32, 64],
            head_width: 1024,
            dropout: 0.4,
            layer_order: LayerOrder::default(),
            recurrent_init: RecurrentInit::default(),
            seed: 0,
        }
    }

    /// Desk-scale profile: `d = 64`, everything else full size.
    pub fn small(num_classes: usize, timestamps: usize, bands: usize) -> Self {
        Self {
            hidden: 64,
            ..Self::new(num_classes, timestamps, bands)
        }
    }

    /// Gradient-check profile: `d = 8` and every other width shrunk so that
    /// all parameters can be probed by finite differences.
    pub fn tiny(num_classes: usize, timestamps: usize, bands: usize) -> Self {
        Self {
            hidden: 8,
            cnn_widths: [5, 6, 7],
            scnn_filters: [3, 4],
            head_width: 9,
            ..Self::new(num_classes, timestamps, bands)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Contract(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        let dims = [self.timestamps, self.bands, self.hidden, self.head_width];
        if dims.iter().chain(&self.cnn_widths).chain(&self.scnn_filters).any(|&v| v == 0) {
            return Err(Error::Contract("all model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn cnn_feature_width(&self) -> usize {
        self.cnn_widths[2]
    }

    pub fn fused_width(&self) -> usize {
        self.cnn_widths[2] + self.hidden
    }
}

#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub blocks: [ConvBlock; 3],
}

impl CnnBranch {
    fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let [w1, w2, w3] = cfg.cnn_widths;
        let drop = Some(cfg.dropout);
        let channels = cfg.timestamps * cfg.bands;
        let block = |store: &mut ParamStore<F>, name: &str, i, o, k| {
            ConvBlock::new(store, name, i, o, k, drop, cfg.layer_order, cfg.seed)
        };
        Ok(Self {
            blocks: [
                block(store, "cnn.block1", channels, w1, 3)?,
                block(store, "cnn.block2", w1, w2, 3)?,
                block(store, "cnn.block3", w2, w3, 1)?,
            ],
        })
    }

    /// `[n × (T·B) × 5 × 5]` → `[n × w3]`.
    fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let expected = self.blocks[0].conv.in_channels;
        if shape.len() != 4 || shape[1] != expected {
            return Err(Error::Shape {
                op: "cnn_branch",
                lhs: shape,
                rhs: vec![expected],
            });
        }
        let mut y = x;
        for block in &self.blocks {
            y = block.forward(ctx, y)?;
        }
        flatten_unit_map(ctx.tape, y)
    }
}

/// Per-date convolutional encoder.
#[derive(Clone, Debug)]
pub struct Scnn {
    pub blocks: [ConvBlock; 2],
}

impl Scnn {
    fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let [f1, f2] = cfg.scnn_filters;
        Ok(Self {
            blocks: [
                ConvBlock::new(store, "scnn.block1", cfg.bands, f1, 3, None, cfg.layer_order, cfg.seed)?,
                ConvBlock::new(store, "scnn.block2", f1, f2, 3, None, cfg.layer_order, cfg.seed)?,
            ],
        })
    }

    /// `[m × B × 5 × 5]` → `[m × f2]`.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let y = self.blocks[0].forward(ctx, x)?;
        let y = self.blocks[1].forward(ctx, y)?;
        flatten_unit_map(ctx.tape, y)
    }
}

fn flatten_unit_map<F: Real>(tape: &mut Tape<F>, y: Var) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    if s[2] != 1 || s[3] != 1 {
        return Err(Error::Dimension(format!(
            "feature map is {}×{} instead of 1×1; patches must be {PATCH}×{PATCH}",
            s[2], s[3]
        )));
    }
    tape.reshape(y, &[s[0], s[1]])
}

#[derive(Clone, Debug)]
pub struct RnnBranch {
    pub scnn: Scnn,
    pub gru: GruCell,
    pub attention: AttentionParams,
    pub dropout: Dropout,
}

/// Dense + ReLU, Dense + ReLU, output layer.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: Dense,
    pub fc2: Dense,
    pub out: Dense,
}

impl ClassifierHead {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, inputs: usize, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.head_width;
        Ok(Self {
            fc1: Dense::new(store, &format!("{name}.fc1"), inputs, w, cfg.seed)?,
            fc2: Dense::new(store, &format!("{name}.fc2"), w, w, cfg.seed)?,
            out: Dense::new(store, &format!("{name}.out"), w, cfg.num_classes, cfg.seed)?,
        })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let y = self.fc1.forward(ctx, x)?;
        let y = ctx.tape.relu(y)?;
        let y = self.fc2.forward(ctx, y)?;
        let y = ctx.tape.relu(y)?;
        self.out.forward(ctx, y)
    }
}

/// Logits of whichever heads the variant owns.
#[derive(Clone, Copy, Debug)]
pub struct Logits {
    pub fused: Option<Var>,
    pub cnn: Option<Var>,
    pub rnn: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub cnn_feat: Option<Var>,
    pub rnn_feat: Option<Var>,
    /// Attention weights `[n × T]`.
    pub attention: Option<Var>,
    pub logits: Logits,
}

/// The network and all of its parameters.
#[derive(Clone, Debug)]
pub struct DuploModel<F: Real = f32> {
    pub config: ModelConfig,
    pub variant: Variant,
    pub store: ParamStore<F>,
    pub cnn: Option<CnnBranch>,
    pub rnn: Option<RnnBranch>,
    pub head_cnn: Option<ClassifierHead>,
    pub head_rnn: Option<ClassifierHead>,
    pub head_fused: Option<ClassifierHead>,
}

impl<F: Real> DuploModel<F> {
    /// Components are initialized from per-name seeds, so every variant built
    /// from one config shares identical starting weights for what it owns.
    pub fn new(config: ModelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let cfg = &config;
        let cnn = variant.has_cnn().then(|| CnnBranch::new(&mut store, cfg)).transpose()?;
        let rnn = if variant.has_rnn() {
            Some(RnnBranch {
                scnn: Scnn::new(&mut store, cfg)?,
                gru: GruCell::new(&mut store, "gru", cfg.scnn_filters[1], cfg.hidden, cfg.recurrent_init, cfg.seed)?,
                attention: AttentionParams::new(&mut store, "attention", cfg.hidden, cfg.seed)?,
                dropout: Dropout::new(cfg.dropout)?,
            })
        } else {
            None
        };
        let aux = variant == Variant::Full;
        let head_cnn = (aux || variant == Variant::CnnOnly)
            .then(|| ClassifierHead::new(&mut store, "head_cnn", cfg.cnn_feature_width(), cfg))
            .transpose()?;
        let head_rnn = (aux || variant == Variant::RnnOnly)
            .then(|| ClassifierHead::new(&mut store, "head_rnn", cfg.hidden, cfg))
            .transpose()?;
        let head_fused = matches!(variant, Variant::Full | Variant::NoAux)
            .then(|| ClassifierHead::new(&mut store, "head_fused", cfg.fused_width(), cfg))
            .transpose()?;
        Ok(Self {
            config,
            variant,
            store,
            cnn,
            rnn,
            head_cnn,
            head_rnn,
            head_fused,
        })
    }

    /// Trainable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable("")
    }

    pub fn cast<G: Real>(&self) -> DuploModel<G> {
        DuploModel {
            config: self.config.clone(),
            variant: self.variant,
            store: self.store.cast(),
            cnn: self.cnn.clone(),
            rnn: self.rnn.clone(),
            head_cnn: self.head_cnn.clone(),
            head_rnn: self.head_rnn.clone(),
            head_fused: self.head_fused.clone(),
        }
    }

    fn check_input(&self, input: &Tensor<F>) -> Result<()> {
        let c = &self.config;
        let want = [c.timestamps, c.bands, PATCH, PATCH];
        let s = input.shape();
        if s.len() != 5 || s[1..] != want {
            return Err(Error::Shape {
                op: "model_input",
                lhs: s.to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs both branches and every head the variant owns.
    pub fn forward(&mut self, tape: &mut Tape<F>, input: &Tensor<F>, mode: Mode, rng: &mut SeededRng) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let n = input.shape()[0];
        let (t, b) = (self.config.timestamps, self.config.bands);
        let mut ctx = Ctx {
            tape,
            store: &mut self.store,
            mode,
            rng,
        };

        let cnn_feat = match &self.cnn {
            Some(branch) => {
                let stacked = input.clone().reshape(&[n, t * b, PATCH, PATCH])?;
                let x = ctx.tape.constant(stacked);
                Some(branch.forward(&mut ctx, x)?)
            }
            None => None,
        };

        let (rnn_feat, attention) = match &self.rnn {
            Some(branch) => {
                let x = ctx.tape.constant(time_major(input));
                let per_date = branch.scnn.forward(&mut ctx, x)?;
                let mut seq = Vec::with_capacity(t);
                for step in 0..t {
                    seq.push(ctx.tape.slice_rows(per_date, step * n, n)?);
                }
                let states = branch.gru.unroll(ctx.tape, ctx.store, &seq)?;
                let (feat, weights) = branch.attention.pool(ctx.tape, ctx.store, states)?;
                (Some(branch.dropout.forward(&mut ctx, feat)?), Some(weights))
            }
            None => (None, None),
        };

        let head = |h: &Option<ClassifierHead>, x: Option<Var>, ctx: &mut Ctx<'_, F>| -> Result<Option<Var>> {
            match (h, x) {
                (Some(h), Some(x)) => h.forward(ctx, x).map(Some),
                _ => Ok(None),
            }
        };
        let cnn = head(&self.head_cnn, cnn_feat, &mut ctx)?;
        let rnn = head(&self.head_rnn, rnn_feat, &mut ctx)?;
        let fused_in = match (cnn_feat, rnn_feat, &self.head_fused) {
            (Some(c), Some(r), Some(_)) => Some(ctx.tape.concat(&[c, r], 1)?),
            _ => None,
        };
        let fused = head(&self.head_fused, fused_in, &mut ctx)?;
        Ok(ForwardOutput {
            cnn_feat,
            rnn_feat,
            attention,
            logits: Logits { fused, cnn, rnn },
        })
    }

    /// Logits of the head that makes predictions for this variant, in
    /// inference mode.
    pub fn decision_logits(&mut self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::inference();
        let mut rng = SeededRng::new(0);
        let out = self.forward(&mut tape, input, Mode::Infer, &mut rng)?;
        let v = decision_head(self.variant, &out.logits)?;
        Ok(tape.value(v).clone())
    }

    /// Class indices, ties broken toward the lowest index.
    pub fn predict(&mut self, input: &Tensor<F>) -> Result<Vec<usize>> {
        let logits = self.decision_logits(input)?;
        let c = logits.shape()[1];
        Ok(logits.data().chunks(c).map(argmax).collect())
    }

    /// `[n × (w3 + d)]`, convolutional features first.
    pub fn extract_features(&mut self, input: &Tensor<F>) -> Result<Tensor<F>> {
        if !matches!(self.variant, Variant::Full | Variant::NoAux) {
            return Err(Error::Contract(format!(
                "feature extraction needs both branches; model variant is {}",
                self.variant
            )));
        }
        let mut tape = Tape::inference();
        let mut rng = SeededRng::new(0);
        let out = self.forward(&mut tape, input, Mode::Infer, &mut rng)?;
        let (Some(c), Some(r)) = (out.cnn_feat, out.rnn_feat) else {
            unreachable!("both branches exist for this variant");
        };
        let both = tape.concat(&[c, r], 1)?;
        Ok(tape.value(both).clone())
    }
}

/// The head whose argmax is the prediction.
pub fn decision_head(variant: Variant, logits: &Logits) -> Result<Var> {
    let v = match variant {
        Variant::Full | Variant::NoAux => logits.fused,
        Variant::CnnOnly => logits.cnn,
        Variant::RnnOnly => logits.rnn,
    };
    v.ok_or_else(|| Error::Contract(format!("variant {variant} produced no decision logits")))
}

/// `α1·CE(rnn) + α2·CE(cnn) + CE(fused)` for the full model; the single
/// owned head's cross-entropy otherwise.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    variant: Variant,
    logits: &Logits,
    labels: &[usize],
    alpha1: f64,
    alpha2: f64,
) -> Result<Var> {
    if !(alpha1 >= 0.0 && alpha2 >= 0.0) {
        return Err(Error::Contract(format!(
            "auxiliary loss weights must be nonnegative, got {alpha1} and {alpha2}"
        )));
    }
    let missing = |what| Error::Contract(format!("variant {variant} has no {what} logits"));
    match variant {
        Variant::Full => {
            let fused = cross_entropy(tape, logits.fused.ok_or_else(|| missing("fused"))?, labels)?;
            let rnn = cross_entropy(tape, logits.rnn.ok_or_else(|| missing("rnn"))?, labels)?;
            let cnn = cross_entropy(tape, logits.cnn.ok_or_else(|| missing("cnn"))?, labels)?;
            let rnn = tape.scale(rnn, F::lit(alpha1))?;
            let cnn = tape.scale(cnn, F::lit(alpha2))?;
            let aux = tape.add(rnn, cnn)?;
            tape.add(aux, fused)
        }
        _ => {
            let head = decision_head(variant, logits)?;
            cross_entropy(tape, head, labels)
        }
    }
}

/// Index of the largest value; the first one wins a tie.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `[n × T × B × P × P]` → `[(T·n) × B × P × P]`, date-major.
fn time_major<F: Real>(input: &Tensor<F>) -> Tensor<F> {
    let s = input.shape();
    let (n, t) = (s[0], s[1]);
    let block: usize = s[2..].iter().product();
    let src = input.data();
    let mut out = Vec::with_capacity(src.len());
    for step in 0..t {
        for i in 0..n {
            let at = (i * t + step) * block;
            out.extend_from_slice(&src[at..at + block]);
        }
    }
    let mut shape = vec![t * n];
    shape.extend_from_slice(&s[2..]);
    Tensor::new(shape, out).expect("permutation preserves length")
}
