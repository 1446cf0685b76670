//! Flow matching on the two-mode 2-D mixture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check_loss;
use super::synth::gen_flow2d;
use crate::error::Result;
use crate::flow::{MlpConfig, MlpField};
use crate::flow::{cfm_loss, euler_sample, make_flow_sample, FlowConfig};
use crate::optim::{Adam, Optimizer};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Flow2dSettings {
    pub seed: u64,
    pub steps: usize,
    /// Flow samples per step; each shares one time draw over `rows` points.
    pub batch: usize,
    pub rows: usize,
    pub lr: f64,
    pub train_size: usize,
    pub model: MlpConfig,
    pub flow: FlowConfig,
}

impl Default for Flow2dSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 3000,
            batch: 8,
            rows: 16,
            lr: 2e-3,
            train_size: 10_000,
            model: MlpConfig::default(),
            flow: FlowConfig::default(),
        }
    }
}

pub struct Flow2dRun<S> {
    pub model: MlpField<S>,
    pub losses: Vec<f64>,
}

pub fn train_flow2d<S: Scalar>(s: &Flow2dSettings) -> Result<Flow2dRun<S>> {
    s.flow.validate()?;
    let data = gen_flow2d(s.seed, s.train_size)?;
    let mut init = ChaCha8Rng::seed_from_u64(s.seed);
    let mut model = MlpField::<S>::new(s.model.clone(), &mut init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(1));
    let mut opt = Adam::with_lr(s.lr);
    let mut losses = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let mut samples = Vec::with_capacity(s.batch);
        for _ in 0..s.batch {
            let mut x1 = Vec::with_capacity(2 * s.rows);
            for _ in 0..s.rows {
                let r = rng.gen_range(0..data.rows());
                x1.extend(data.row(r).iter().map(|&v| S::lit(v)));
            }
            let x1 = Tensor::new(&[s.rows, 2], x1)?;
            samples.push(make_flow_sample(&x1, &mut rng, &s.flow)?);
        }
        let conds = vec![(); samples.len()];
        model.store.zero_grad();
        let mut tape = Tape::new();
        let l = cfm_loss(&model, &mut tape, &samples, &conds, 0.0, &mut rng)?;
        losses.push(check_loss(step, tape.value(l).item().as_f64())?);
        tape.backward(l)?;
        tape.write_param_grads(&mut model.store)?;
        opt.step(&mut model.store);
    }
    Ok(Flow2dRun { model, losses })
}

/// `n` generated points `[n × 2]` from Gaussian noise.
pub fn sample_flow2d<S: Scalar>(model: &MlpField<S>, n: usize, seed: u64, flow: &FlowConfig) -> Result<Tensor<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::randn(&[n, 2], &mut rng);
    euler_sample(model, &x0, None, flow)
}

/// Per-mode means (split on the sign of x) and the weight of the right mode.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureStats {
    pub right_mean: [f64; 2],
    pub left_mean: [f64; 2],
    pub right_weight: f64,
}

impl MixtureStats {
    pub fn of<S: Scalar>(points: &Tensor<S>) -> Self {
        let (mut r, mut l) = ([0.0; 2], [0.0; 2]);
        let (mut nr, mut nl) = (0usize, 0usize);
        for i in 0..points.rows() {
            let (x, y) = (points.at(i, 0).as_f64(), points.at(i, 1).as_f64());
            if x >= 0.0 {
                r[0] += x;
                r[1] += y;
                nr += 1;
            } else {
                l[0] += x;
                l[1] += y;
                nl += 1;
            }
        }
        let div = |v: [f64; 2], n: usize| [v[0] / n.max(1) as f64, v[1] / n.max(1) as f64];
        Self {
            right_mean: div(r, nr),
            left_mean: div(l, nl),
            right_weight: nr as f64 / points.rows().max(1) as f64,
        }
    }

    /// Larger Euclidean distance of the two mode means from `(±2, 0)`.
    pub fn mean_error(&self) -> f64 {
        let c = super::synth::MODE_CENTER;
        let r = (self.right_mean[0] - c).hypot(self.right_mean[1]);
        let l = (self.left_mean[0] + c).hypot(self.left_mean[1]);
        r.max(l)
    }
}
