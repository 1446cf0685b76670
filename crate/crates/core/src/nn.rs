//! Small reusable layers. Layers only hold parameter names; values live in a
//! [`ParameterStore`] owned by the enclosing model.

use rand::Rng;

use crate::error::Result;
use crate::params::{init_linear, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Width of the sinusoidal time features fed to [`TimeEmbedding`].
pub const TIME_FEATURES: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zeros,
}

/// Affine map `x·W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let w = match init {
            Init::Uniform => init_linear(&[fan_in, fan_out], fan_in, rng),
            Init::Zeros => Tensor::zeros(&[fan_in, fan_out]),
        };
        store.insert(weight.clone(), w)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(b.clone(), Tensor::zeros(&[fan_out]))?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParameterStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Position-wise feed-forward network: `W₂ · silu(W₁ x + b₁) + b₂`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, true, Init::Uniform, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, width, true, Init::Uniform, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParameterStore<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.silu(h);
        self.down.forward(tape, store, h)
    }
}

/// Sinusoidal features of a scalar time in `[0, 1]`, scaled by 1000 so the
/// frequency ladder spans the unit interval.
pub fn sinusoidal_time<S: Scalar>(t: f64, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); dim];
    let x = t * 1000.0;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = S::lit((x * freq).sin());
        out[half + i] = S::lit((x * freq).cos());
    }
    Tensor::new(&[1, dim], out).expect("dim > 0")
}

/// Classic sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions<S: Scalar>(len: usize, dim: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); len * dim];
    for p in 0..len {
        for i in 0..dim {
            let k = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * k / dim as f64);
            out[p * dim + i] = S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, dim], out).expect("non-empty table")
}

/// Sinusoidal time features followed by a two-layer projection.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub first: Linear,
    pub second: Linear,
}

impl TimeEmbedding {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), TIME_FEATURES, hidden, true, Init::Uniform, rng)?,
            second: Linear::new(store, &format!("{name}.1"), hidden, out, true, Init::Uniform, rng)?,
        })
    }

    /// Returns a `[1 × out]` embedding of `t`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParameterStore<S>, t: f64) -> Result<Var> {
        let f = tape.constant(sinusoidal_time(t, TIME_FEATURES));
        let h = self.first.forward(tape, store, f)?;
        let h = tape.silu(h);
        self.second.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_linear_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::<f64>::new();
        let lin = Linear::new(&mut store, "p", 3, 2, true, Init::Zeros, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 3], &mut rng));
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoidal_time_is_bounded_and_distinct() {
        let a = sinusoidal_time::<f64>(0.1, 16);
        let b = sinusoidal_time::<f64>(0.2, 16);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
