//! Small fully connected vector field for low-dimensional toy data.

use rand::Rng;

use super::VectorFieldEstimator;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, TimeEmbedding};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 64,
            depth: 3,
        }
    }
}

/// `v(x, t)` as a residual-free MLP over `x` with the time embedding added
/// to every hidden layer. Inputs are rows `[B × dim]` sharing one `t`.
pub struct MlpField<S> {
    pub cfg: MlpConfig,
    pub store: ParameterStore<S>,
    time: TimeEmbedding,
    input: Linear,
    hidden: Vec<Linear>,
    output: Linear,
}

impl<S: Scalar> MlpField<S> {
    pub fn new<R: Rng + ?Sized>(cfg: MlpConfig, rng: &mut R) -> Result<Self> {
        if cfg.dim == 0 || cfg.hidden == 0 || cfg.depth == 0 {
            return Err(Error::Config("mlp sizes must be positive".into()));
        }
        let mut store = ParameterStore::new();
        let h = cfg.hidden;
        let time = TimeEmbedding::new(&mut store, "time", h, h, rng)?;
        let input = Linear::new(&mut store, "input", cfg.dim, h, true, Init::Uniform, rng)?;
        let hidden = (1..cfg.depth)
            .map(|i| Linear::new(&mut store, &format!("hidden.{i}"), h, h, true, Init::Uniform, rng))
            .collect::<Result<_>>()?;
        let output = Linear::new(&mut store, "output", h, cfg.dim, true, Init::Uniform, rng)?;
        Ok(Self {
            cfg,
            store,
            time,
            input,
            hidden,
            output,
        })
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }
}

impl<S: Scalar> VectorFieldEstimator<S> for MlpField<S> {
    type Condition = ();

    fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    fn field(&self, tape: &mut Tape<S>, xt: Var, t: f64, _cond: Option<&()>) -> Result<Var> {
        let shape = tape.shape(xt).to_vec();
        if shape.last() != Some(&self.cfg.dim) {
            return Err(Error::dim("mlp_field", &shape, &[self.cfg.dim]));
        }
        let rows = tape.value(xt).numel() / self.cfg.dim;
        let x = tape.reshape(xt, &[rows, self.cfg.dim])?;
        let temb = self.time.forward(tape, &self.store, t)?;
        let temb = tape.reshape(temb, &[self.cfg.hidden])?;
        let mut h = self.input.forward(tape, &self.store, x)?;
        h = tape.add_row(h, temb)?;
        h = tape.silu(h);
        for layer in &self.hidden {
            h = layer.forward(tape, &self.store, h)?;
            h = tape.add_row(h, temb)?;
            h = tape.silu(h);
        }
        let v = self.output.forward(tape, &self.store, h)?;
        tape.reshape(v, &shape)
    }
}
