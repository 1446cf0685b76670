//! Non-causal dilated-convolution vector field with gated activations.

use rand::Rng;

use super::VectorFieldEstimator;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, TimeEmbedding};
use crate::params::{init_linear, init_normal, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveNetConfig {
    /// Feature width of the generated signal (`xt` is `[T × x_channels]`).
    pub x_channels: usize,
    pub cond_channels: usize,
    pub residual_channels: usize,
    pub kernel: usize,
    /// One dilation per layer.
    pub dilations: Vec<usize>,
}

impl Default for WaveNetConfig {
    fn default() -> Self {
        Self {
            x_channels: 16,
            cond_channels: 32,
            residual_channels: 32,
            kernel: 3,
            dilations: vec![1, 2, 4, 1, 2, 4],
        }
    }
}

struct Layer {
    conv: String,
    conv_bias: String,
    cond: Linear,
    out: Linear,
    dilation: usize,
}

/// WaveNet-style estimator. Signals are time-major `[T × channels]`; the
/// dilated convolutions run on the transposed layout.
///
/// Time enters through a sinusoidal embedding added to every frame of the
/// condition; `cond = None` uses a learned null row broadcast over time.
pub struct WaveNet<S> {
    pub cfg: WaveNetConfig,
    pub store: ParameterStore<S>,
    prefix: String,
    time: TimeEmbedding,
    null_cond: String,
    input: Linear,
    layers: Vec<Layer>,
    skip: Linear,
    output: Linear,
}

impl<S: Scalar> WaveNet<S> {
    /// Builds the estimator with its own parameter store.
    pub fn new<R: Rng + ?Sized>(cfg: WaveNetConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParameterStore::new();
        let mut net = Self::in_store(&mut store, "wavenet", cfg, rng)?;
        net.store = store;
        Ok(net)
    }

    /// Registers parameters under `prefix` in an external store; the returned
    /// value's own `store` is left empty and [`WaveNet::forward_with`] must be
    /// given the external store.
    pub fn in_store<R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        cfg: WaveNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("wavenet kernel {} must be odd", cfg.kernel)));
        }
        if cfg.x_channels == 0 || cfg.cond_channels == 0 || cfg.residual_channels == 0 || cfg.dilations.is_empty() {
            return Err(Error::Config("wavenet sizes must be positive".into()));
        }
        let (r, c) = (cfg.residual_channels, cfg.cond_channels);
        let time = TimeEmbedding::new(store, &format!("{prefix}.time"), c, c, rng)?;
        let null_cond = format!("{prefix}.null_cond");
        store.insert(null_cond.clone(), init_normal(&[1, c], 0.1, rng))?;
        let input = Linear::new(store, &format!("{prefix}.input"), cfg.x_channels, r, true, Init::Uniform, rng)?;
        let mut layers = Vec::with_capacity(cfg.dilations.len());
        for (i, &dilation) in cfg.dilations.iter().enumerate() {
            let name = format!("{prefix}.layers.{i}");
            let conv = format!("{name}.conv");
            store.insert(conv.clone(), init_linear(&[2 * r, r, cfg.kernel], r * cfg.kernel, rng))?;
            let conv_bias = format!("{name}.conv_bias");
            store.insert(conv_bias.clone(), Tensor::zeros(&[2 * r]))?;
            layers.push(Layer {
                conv,
                conv_bias,
                cond: Linear::new(store, &format!("{name}.cond"), c, 2 * r, false, Init::Uniform, rng)?,
                out: Linear::new(store, &format!("{name}.out"), r, 2 * r, true, Init::Uniform, rng)?,
                dilation,
            });
        }
        let skip = Linear::new(store, &format!("{prefix}.skip"), r, r, true, Init::Uniform, rng)?;
        let output = Linear::new(store, &format!("{prefix}.output"), r, cfg.x_channels, true, Init::Zeros, rng)?;
        Ok(Self {
            cfg,
            store: ParameterStore::new(),
            prefix: prefix.to_string(),
            time,
            null_cond,
            input,
            layers,
            skip,
            output,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Evaluates the field with parameters from `store` and a condition
    /// already on the tape (`None` for the null condition).
    pub fn forward_with(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        xt: Var,
        t: f64,
        cond: Option<Var>,
    ) -> Result<Var> {
        let xs = tape.shape(xt).to_vec();
        if xs.len() != 2 || xs[1] != self.cfg.x_channels {
            return Err(Error::dim("wavenet", &xs, &[xs[0], self.cfg.x_channels]));
        }
        let frames = xs[0];
        let r = self.cfg.residual_channels;
        let c = match cond {
            Some(c) => {
                if tape.shape(c) != [frames, self.cfg.cond_channels] {
                    return Err(Error::dim("wavenet", tape.shape(c), &[frames, self.cfg.cond_channels]));
                }
                c
            }
            None => {
                let null = tape.param(store, &self.null_cond)?;
                tape.gather_rows(null, &vec![0; frames])?
            }
        };
        let temb = self.time.forward(tape, store, t)?;
        let temb = tape.reshape(temb, &[self.cfg.cond_channels])?;
        let c = tape.add_row(c, temb)?;

        let inv_sqrt2 = S::lit(std::f64::consts::FRAC_1_SQRT_2);
        let mut h = self.input.forward(tape, store, xt)?;
        let mut skips = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.param(store, &layer.conv)?;
            let b = tape.param(store, &layer.conv_bias)?;
            let ht = tape.transpose(h)?;
            let z = tape.conv1d(ht, w, layer.dilation)?;
            let z = tape.transpose(z)?;
            let z = tape.add_row(z, b)?;
            let zc = layer.cond.forward(tape, store, c)?;
            let z = tape.add(z, zc)?;
            let filt = tape.slice(z, 1, 0, r)?;
            let gate = tape.slice(z, 1, r, r)?;
            let filt = tape.tanh(filt);
            let gate = tape.sigmoid(gate);
            let a = tape.mul(filt, gate)?;
            let o = layer.out.forward(tape, store, a)?;
            let res = tape.slice(o, 1, 0, r)?;
            skips.push(tape.slice(o, 1, r, r)?);
            let sum = tape.add(h, res)?;
            h = tape.scale(sum, inv_sqrt2);
        }
        let s = if skips.len() == 1 {
            skips[0]
        } else {
            let mut acc = skips[0];
            for &k in &skips[1..] {
                acc = tape.add(acc, k)?;
            }
            acc
        };
        let s = tape.scale(s, S::one() / S::count(self.layers.len()).sqrt());
        let s = tape.relu(s);
        let s = self.skip.forward(tape, store, s)?;
        let s = tape.relu(s);
        self.output.forward(tape, store, s)
    }
}

impl<S: Scalar> VectorFieldEstimator<S> for WaveNet<S> {
    type Condition = Tensor<S>;

    fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    fn field(&self, tape: &mut Tape<S>, xt: Var, t: f64, cond: Option<&Tensor<S>>) -> Result<Var> {
        let c = cond.map(|c| tape.constant(c.clone()));
        self.forward_with(tape, &self.store, xt, t, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{cfm_loss, FlowSample};
    use crate::optim::{Adam, Optimizer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> WaveNetConfig {
        WaveNetConfig {
            x_channels: 4,
            cond_channels: 6,
            residual_channels: 16,
            kernel: 3,
            dilations: vec![1, 2, 4],
        }
    }

    #[test]
    fn zero_field_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = WaveNet::<f64>::new(small(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[10, 4], &mut rng));
        let c = Tensor::randn(&[10, 6], &mut rng);
        let v = net.field(&mut tape, x, 0.4, Some(&c)).unwrap();
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_shape_and_cond_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = WaveNet::<f64>::new(small(), &mut rng).unwrap();
        for (_, p) in net.store.iter_mut() {
            let noise = Tensor::randn(p.shape(), &mut rng);
            *p = p.zip_map(&noise, |a, b| a + 0.1 * b).unwrap();
        }
        for frames in [1, 5, 17] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[frames, 4], &mut rng));
            let c = Tensor::randn(&[frames, 6], &mut rng);
            let v = net.field(&mut tape, x, 0.7, Some(&c)).unwrap();
            assert_eq!(tape.shape(v), &[frames, 4]);
            assert!(tape.value(v).data().iter().any(|&x| x != 0.0));
            let u = net.field(&mut tape, x, 0.7, None).unwrap();
            assert_eq!(tape.shape(u), &[frames, 4]);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[8, 4], &mut rng));
        let c = Tensor::randn(&[7, 6], &mut rng);
        assert!(matches!(net.field(&mut tape, x, 0.1, Some(&c)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = WaveNetConfig { kernel: 2, ..small() };
        assert!(matches!(WaveNet::<f64>::new(cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn overfits_one_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = WaveNet::<f64>::new(small(), &mut rng).unwrap();
        let x1 = Tensor::randn(&[16, 4], &mut rng);
        let x0 = Tensor::randn(&[16, 4], &mut rng);
        let sample = FlowSample::new(x0, x1, 0.3).unwrap();
        let cond = Tensor::randn(&[16, 6], &mut rng);
        let mut opt = Adam::with_lr(3e-3);
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            net.store.zero_grad();
            let mut tape = Tape::new();
            let l = cfm_loss(&net, &mut tape, std::slice::from_ref(&sample), std::slice::from_ref(&cond), 0.0, &mut rng).unwrap();
            last = tape.value(l).item();
            if last < 1e-3 {
                break;
            }
            tape.backward(l).unwrap();
            tape.write_param_grads(&mut net.store).unwrap();
            opt.step(&mut net.store);
        }
        assert!(last < 1e-3, "loss {last}");
    }
}
