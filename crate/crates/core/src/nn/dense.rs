use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor, Var};

use super::init::glorot_uniform;
use super::Ctx;

/// Fully connected layer, weight stored `[out × in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, inputs: usize, outputs: usize, seed: u64) -> Result<Self> {
        let wname = format!("{name}.weight");
        let mut rng = SeededRng::derive(seed, &wname);
        let w = glorot_uniform(&[outputs, inputs], inputs, outputs, &mut rng);
        Ok(Self {
            weight: store.add(wname, w, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true)?,
            inputs,
            outputs,
        })
    }

    /// `x [n × in]` → `[n × out]`
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.matmul_t(x, w)?;
        ctx.tape.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}
