//! Feed-forward building blocks.

mod conv;
mod dense;
pub mod init;
mod loss;
mod norm;

pub use conv::{conv2d, Conv2d, ConvBlock, LayerOrder};
pub use dense::Dense;
pub use loss::cross_entropy;
pub use norm::{BatchNorm, Dropout, BN_EPSILON, BN_MOMENTUM};

use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, F: Real> {
    pub tape: &'a mut Tape<F>,
    pub store: &'a mut ParamStore<F>,
    pub mode: Mode,
    /// Source of dropout masks.
    pub rng: &'a mut SeededRng,
}

impl<F: Real> Ctx<'_, F> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}
