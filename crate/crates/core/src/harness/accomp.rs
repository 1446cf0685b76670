//! Accompaniment flow model: band transformer blocks whose feed-forward
//! layer is a Band-MOE (or a dense / single-expert stand-in), conditioned on
//! a vocal track and a style tag.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check_loss;
use super::synth::{gen_toy_pairs, pearson, tag_transform, ToyConfig, ToyPair};
use crate::error::{Error, Result};
use crate::flow::{euler_sample_from, make_flow_sample, FlowConfig, TraceRow, VectorFieldEstimator};
use crate::moe::{
    balance_loss, route_records, BalanceForm, BandMoe, ExpertGroup, MoeConfig, MoeGates, RouteAxis, RouteRecord,
    RouterState, TauSchedule, BALANCE_WEIGHT, TAU_END,
};
use crate::nn::{FeedForward, Init, Linear, TimeEmbedding, TIME_FEATURES};
use crate::optim::{Adam, Optimizer};
use crate::params::{init_normal, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{global_style, BandBlock};

/// What sits in the feed-forward slot of each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnKind {
    Moe,
    Dense,
    /// One aligned expert group with a single expert.
    SingleExpert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccompConfig {
    pub frames: usize,
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub experts: usize,
    pub hidden: usize,
    pub tags: usize,
    pub ffn: FfnKind,
}

impl Default for AccompConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            channels: 8,
            width: 64,
            heads: 4,
            blocks: 2,
            experts: 4,
            hidden: 128,
            tags: 4,
            ffn: FfnKind::Moe,
        }
    }
}

impl AccompConfig {
    /// Smaller sizes used by the test suite.
    pub fn small() -> Self {
        Self {
            frames: 32,
            width: 32,
            hidden: 64,
            ..Self::default()
        }
    }

    /// Full-size layout; only its shapes are meant to be inspected.
    pub fn full() -> Self {
        Self {
            frames: 64,
            channels: 20,
            width: 768,
            heads: 8,
            blocks: 4,
            experts: 4,
            hidden: 3072,
            tags: 4,
            ffn: FfnKind::Moe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 || self.blocks == 0 || self.hidden == 0 {
            return Err(Error::Config("accompaniment sizes must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) || !(self.width / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "width {} must split into {} heads of even size",
                self.width, self.heads
            )));
        }
        if self.experts == 0 || self.tags < 2 {
            return Err(Error::Config("need at least one expert and two tags".into()));
        }
        Ok(())
    }

    pub fn toy(&self) -> ToyConfig {
        ToyConfig {
            frames: self.frames,
            channels: self.channels,
            tags: self.tags,
        }
    }

    /// Number of scalar parameters the model will register.
    pub fn param_count(&self) -> usize {
        let (c, d, h, n) = (self.channels, self.width, self.hidden, self.experts);
        let ffn = d * h + h + h * d + d;
        let io = 2 * (c * d + d) + (self.tags + 1) * d + (TIME_FEATURES * d + d + d * d + d) + d + (d * c + c);
        let block_core = 2 * d + 6 * d * d + 1 + (d * 4 * d + 4 * d);
        let slot = match self.ffn {
            FfnKind::Dense => ffn,
            FfnKind::SingleExpert => ffn + d + 1,
            FfnKind::Moe => {
                let token_group = n * ffn + d * n + n;
                2 * token_group + (n * ffn + 2 * n + n) + d * d + (2 * d + 2)
            }
        };
        io + self.blocks * (block_core + slot)
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum BlockFfn {
    Moe(BandMoe),
    Dense(FeedForward),
    Single(ExpertGroup),
}

/// Result of one field evaluation.
pub struct AccompOutput {
    /// `[T × C]`
    pub field: Var,
    /// Band-MOE gates per block (empty for the other slot kinds).
    pub moe: Vec<MoeGates>,
    /// Every routed gate batch, for the balance penalty.
    pub routed: Vec<Var>,
}

pub struct AccompModel<S> {
    pub cfg: AccompConfig,
    pub store: ParameterStore<S>,
    input: Linear,
    vocal: Linear,
    tag_emb: String,
    time: TimeEmbedding,
    blocks: Vec<(BandBlock, BlockFfn)>,
    out_norm: String,
    output: Linear,
}

impl<S: Scalar> AccompModel<S> {
    pub fn new<R: Rng + ?Sized>(cfg: AccompConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let (c, d) = (cfg.channels, cfg.width);
        let input = Linear::new(&mut store, "input", c, d, true, Init::Uniform, rng)?;
        let vocal = Linear::new(&mut store, "vocal", c, d, true, Init::Uniform, rng)?;
        let tag_emb = "tag_emb".to_string();
        // last row is the null tag used for unconditional evaluation
        store.insert(tag_emb.clone(), init_normal(&[cfg.tags + 1, d], 1.0, rng))?;
        let time = TimeEmbedding::new(&mut store, "time", d, d, rng)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let name = format!("blocks.{b}");
            let block = BandBlock::new(&mut store, &name, d, cfg.heads, rng)?;
            let ffn = match cfg.ffn {
                FfnKind::Moe => {
                    let mc = MoeConfig {
                        width: d,
                        hidden: cfg.hidden,
                        experts: cfg.experts,
                    };
                    BlockFfn::Moe(BandMoe::new(&mut store, &format!("{name}.moe"), &mc, rng)?)
                }
                FfnKind::Dense => BlockFfn::Dense(FeedForward::new(&mut store, &format!("{name}.ffn"), d, cfg.hidden, rng)?),
                FfnKind::SingleExpert => BlockFfn::Single(ExpertGroup::new(
                    &mut store,
                    &format!("{name}.group"),
                    d,
                    cfg.hidden,
                    1,
                    d,
                    RouteAxis::Token,
                    rng,
                )?),
            };
            blocks.push((block, ffn));
        }
        let out_norm = "out_norm".to_string();
        store.insert(out_norm.clone(), Tensor::ones(&[d]))?;
        let output = Linear::new(&mut store, "output", d, c, true, Init::Zeros, rng)?;
        Ok(Self {
            cfg,
            store,
            input,
            vocal,
            tag_emb,
            time,
            blocks,
            out_norm,
            output,
        })
    }

    /// Rebuilds a model from checkpointed parameters.
    pub fn from_store(cfg: AccompConfig, store: &ParameterStore<S>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(cfg, &mut rng)?;
        if store.len() != m.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                m.store.len()
            )));
        }
        m.store.load_values(store)?;
        Ok(m)
    }

    pub fn blocks(&self) -> &[(BandBlock, BlockFfn)] {
        &self.blocks
    }

    /// Field at `xt[T×C]` given the vocal track and tag (`None` = null tag).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        xt: Var,
        vocal: &Tensor<S>,
        t: f64,
        tag: Option<usize>,
        state: &RouterState,
        rng: &mut R,
    ) -> Result<AccompOutput> {
        let (tl, c) = (self.cfg.frames, self.cfg.channels);
        if tape.shape(xt) != [tl, c] {
            return Err(Error::dim("accomp", tape.shape(xt), &[tl, c]));
        }
        if vocal.shape() != [tl, c] {
            return Err(Error::dim("accomp", vocal.shape(), &[tl, c]));
        }
        let row = match tag {
            Some(k) if k >= self.cfg.tags => {
                return Err(Error::Bounds {
                    op: "accomp_tag",
                    index: k,
                    bound: self.cfg.tags,
                })
            }
            Some(k) => k,
            None => self.cfg.tags,
        };
        let st = &self.store;
        let v = tape.constant(vocal.clone());
        let z_v = self.vocal.forward(tape, st, v)?;
        let x = self.input.forward(tape, st, xt)?;
        // the vocal embedding enters the stream once, before the first block
        let mut h = tape.add(x, z_v)?;
        let table = tape.param(st, &self.tag_emb)?;
        let z_p = tape.embedding(table, &[row])?;
        let te = self.time.forward(tape, st, t)?;
        let z_g = global_style(tape, z_p, z_v, te)?;

        let mut moe_gates = Vec::new();
        let mut routed = Vec::new();
        for (block, ffn) in &self.blocks {
            let mut slot = |tape: &mut Tape<S>, f: Var| -> Result<Var> {
                match ffn {
                    BlockFfn::Dense(m) => m.forward(tape, st, f),
                    BlockFfn::Single(g) => {
                        let (o, gates) = g.route(tape, st, f, z_v, state, rng)?;
                        routed.push(gates);
                        Ok(o)
                    }
                    BlockFfn::Moe(m) => {
                        let (o, gates) = m.forward(tape, st, f, z_v, z_p, te, state, rng)?;
                        routed.extend([gates.aligned, gates.controlled, gates.acoustic]);
                        moe_gates.push(gates);
                        Ok(o)
                    }
                }
            };
            h = block.forward(tape, st, h, None, z_p, z_g, &mut slot)?.out;
        }
        let g = tape.param(st, &self.out_norm)?;
        let h = tape.rmsnorm(h, g)?;
        let field = self.output.forward(tape, st, h)?;
        Ok(AccompOutput {
            field,
            moe: moe_gates,
            routed,
        })
    }
}

/// Copies every parameter of a dense-slot model into a single-expert model,
/// mapping `blocks.{b}.ffn.*` onto the lone expert of `blocks.{b}.group`.
pub fn tie_single_expert<S: Scalar>(single: &mut AccompModel<S>, dense: &AccompModel<S>) -> Result<()> {
    if single.cfg.ffn != FfnKind::SingleExpert || dense.cfg.ffn != FfnKind::Dense {
        return Err(Error::Config("tie needs a single-expert and a dense model".into()));
    }
    for (name, t) in dense.store.iter() {
        let target = match name.split_once(".ffn.") {
            Some((block, rest)) => format!("{block}.group.experts.0.{rest}"),
            None => name.clone(),
        };
        let dst = single
            .store
            .get_mut(&target)
            .ok_or_else(|| Error::Config(format!("no parameter {target} to tie")))?;
        if dst.shape() != t.shape() {
            return Err(Error::dim("tie_single_expert", dst.shape(), t.shape()));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// The model bound to one vocal track, usable with the generic samplers.
/// Routing runs in inference mode.
pub struct AccompField<'a, S> {
    pub model: &'a AccompModel<S>,
    pub vocal: Tensor<S>,
}

impl<S: Scalar> VectorFieldEstimator<S> for AccompField<'_, S> {
    type Condition = usize;

    fn store(&self) -> &ParameterStore<S> {
        &self.model.store
    }

    fn field(&self, tape: &mut Tape<S>, xt: Var, t: f64, cond: Option<&usize>) -> Result<Var> {
        // inference routing draws no noise, so this generator is never used
        let mut idle = ChaCha8Rng::seed_from_u64(0);
        let state = RouterState::inference();
        Ok(self
            .model
            .forward(tape, xt, &self.vocal, t, cond.copied(), &state, &mut idle)?
            .field)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccompSettings {
    pub seed: u64,
    pub model: AccompConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub flow: FlowConfig,
    pub balance: BalanceForm,
    pub tau: TauSchedule,
}

impl Default for AccompSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            model: AccompConfig::default(),
            steps: 1500,
            batch: 16,
            lr: 2e-3,
            train_size: 512,
            test_size: 32,
            flow: FlowConfig::default(),
            balance: BalanceForm::Corrected,
            tau: TauSchedule::default(),
        }
    }
}

impl AccompSettings {
    /// Train and held-out pairs; the held-out set uses its own seed.
    pub fn datasets(&self) -> Result<(Vec<ToyPair>, Vec<ToyPair>)> {
        let toy = self.model.toy();
        Ok((
            gen_toy_pairs(self.seed, self.train_size, &toy)?,
            gen_toy_pairs(self.seed ^ 0x00ff_00ff_00ff, self.test_size, &toy)?,
        ))
    }
}

pub struct AccompRun<S> {
    pub model: AccompModel<S>,
    pub losses: Vec<f64>,
}

/// One optimisation step of the flow + balance objective; returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn accomp_step<S: Scalar, R: Rng + ?Sized>(
    model: &mut AccompModel<S>,
    opt: &mut Adam<S>,
    pairs: &[ToyPair],
    s: &AccompSettings,
    step: usize,
    rng: &mut R,
) -> Result<f64> {
    let state = RouterState::training(s.tau.at(step, s.steps));
    model.store.zero_grad();
    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(s.batch);
    let mut routed = Vec::new();
    let mut count = 0usize;
    for _ in 0..s.batch {
        let pair = &pairs[rng.gen_range(0..pairs.len())];
        let sample = make_flow_sample(&pair.accomp.cast::<S>(), rng, &s.flow)?;
        let keep = rng.gen::<f64>() >= s.flow.cond_drop_prob;
        let xt = tape.constant(sample.xt.clone());
        let out = model.forward(
            &mut tape,
            xt,
            &pair.vocal.cast(),
            sample.t,
            keep.then_some(pair.tag),
            &state,
            rng,
        )?;
        let u = tape.constant(sample.u.clone());
        let d = tape.sub(out.field, u)?;
        let sq = tape.square(d);
        terms.push(tape.sum(sq));
        count += sample.u.numel();
        routed.extend(out.routed);
    }
    let all = tape.concat(&terms, 0)?;
    let total = tape.sum(all);
    let mut loss = tape.scale(total, S::one() / S::count(count));
    if !routed.is_empty() {
        let b = balance_loss(&mut tape, &routed, BALANCE_WEIGHT, s.balance)?;
        let b = tape.scale(b, S::one() / S::count(s.batch));
        loss = tape.add(loss, b)?;
    }
    let value = check_loss(step, tape.value(loss).item().as_f64())?;
    tape.backward(loss)?;
    tape.write_param_grads(&mut model.store)?;
    opt.step(&mut model.store);
    Ok(value)
}

pub fn init_accomp<S: Scalar>(s: &AccompSettings) -> Result<AccompModel<S>> {
    s.flow.validate()?;
    let mut init = ChaCha8Rng::seed_from_u64(s.seed);
    AccompModel::new(s.model.clone(), &mut init)
}

pub fn train_accomp<S: Scalar>(s: &AccompSettings) -> Result<AccompRun<S>> {
    let (train, _) = s.datasets()?;
    let mut model = init_accomp::<S>(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(1));
    let mut opt = Adam::with_lr(s.lr);
    let mut losses = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        losses.push(accomp_step(&mut model, &mut opt, &train, s, step, &mut rng)?);
        if step % 100 == 0 {
            log::debug!("accomp step {step} loss {:.4}", losses[step]);
        }
    }
    Ok(AccompRun { model, losses })
}

/// Generated accompaniment for one pair.
pub fn generate<S: Scalar>(
    model: &AccompModel<S>,
    pair: &ToyPair,
    flow: &FlowConfig,
    seed: u64,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<Tensor<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::randn(&[model.cfg.frames, model.cfg.channels], &mut rng);
    let field = AccompField {
        model,
        vocal: pair.vocal.cast(),
    };
    euler_sample_from(&field, &x0, Some(&pair.tag), flow, 0.0, trace)
}

/// Held-out quality at one guidance scale.
#[derive(Clone, Debug, PartialEq)]
pub struct AccompEval {
    pub gamma: f64,
    /// Mean Pearson correlation of generated vs true accompaniment.
    pub pearson: f64,
    /// Fraction of outputs whose nearest tag transform is the true tag.
    pub tag_consistency: f64,
}

pub fn evaluate_accomp<S: Scalar>(
    model: &AccompModel<S>,
    pairs: &[ToyPair],
    flow: &FlowConfig,
    gamma: f64,
    seed: u64,
) -> Result<AccompEval> {
    let flow = FlowConfig {
        cfg_scale: gamma,
        ..flow.clone()
    };
    let mut corr = 0.0;
    let mut hits = 0usize;
    for (i, p) in pairs.iter().enumerate() {
        let g = generate(model, p, &flow, seed.wrapping_add(i as u64), None)?.cast::<f64>();
        corr += pearson(g.data(), p.accomp.data())?;
        let dist = |k: usize| {
            let a = tag_transform(&p.vocal, k, model.cfg.tags);
            a.data().iter().zip(g.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        };
        let best = (0..model.cfg.tags)
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
            .expect("at least two tags");
        hits += usize::from(best == p.tag);
    }
    let n = pairs.len().max(1) as f64;
    Ok(AccompEval {
        gamma,
        pearson: corr / n,
        tag_consistency: hits as f64 / n,
    })
}

/// Inference-mode routing records for every block and group at the given
/// flow times, evaluated on the training path of `pair`.
pub fn route_trace<S: Scalar>(model: &AccompModel<S>, pair: &ToyPair, times: &[f64], seed: u64) -> Result<Vec<RouteRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = RouterState::inference();
    let x1 = pair.accomp.cast::<S>();
    let x0 = Tensor::<S>::randn(x1.shape(), &mut rng);
    let mut rows = Vec::new();
    for &t in times {
        let xt = crate::flow::FlowSample::new(x0.clone(), x1.clone(), t)?.xt;
        let mut tape = Tape::new();
        let xv = tape.constant(xt);
        let out = model.forward(&mut tape, xv, &pair.vocal.cast(), t, Some(pair.tag), &state, &mut rng)?;
        for (b, g) in out.moe.iter().enumerate() {
            for (name, v) in [("aligned", g.aligned), ("controlled", g.controlled), ("acoustic", g.acoustic), ("global", g.global)] {
                rows.extend(route_records(&format!("block{b}.{name}"), tape.value(v), TAU_END, t));
            }
        }
    }
    Ok(rows)
}

/// Mean global-router weight on the aligned branch for early (`t < 0.25`)
/// and late (`t > 0.75`) flow times.
pub fn global_alpha_profile<S: Scalar>(model: &AccompModel<S>, pairs: &[ToyPair], seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = RouterState::inference();
    let (mut early, mut late) = (Vec::new(), Vec::new());
    for p in pairs {
        let x1 = p.accomp.cast::<S>();
        let x0 = Tensor::<S>::randn(x1.shape(), &mut rng);
        for k in 0..10 {
            let t = k as f64 / 10.0 + 0.05;
            let xt = crate::flow::FlowSample::new(x0.clone(), x1.clone(), t)?.xt;
            let mut tape = Tape::new();
            let xv = tape.constant(xt);
            let out = model.forward(&mut tape, xv, &p.vocal.cast(), t, Some(p.tag), &state, &mut rng)?;
            for g in &out.moe {
                let a = tape.value(g.global).data()[0].as_f64();
                if t < 0.25 {
                    early.push(a);
                } else if t > 0.75 {
                    late.push(a);
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok((mean(&early), mean(&late)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for ffn in [FfnKind::Moe, FfnKind::Dense, FfnKind::SingleExpert] {
            let cfg = AccompConfig {
                frames: 8,
                channels: 3,
                width: 8,
                heads: 2,
                hidden: 12,
                experts: 3,
                ffn,
                ..AccompConfig::default()
            };
            let m = AccompModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
            assert_eq!(m.store.num_values(), cfg.param_count(), "{ffn:?}");
        }
    }

    #[test]
    fn full_layout_is_valid() {
        let p = AccompConfig::full();
        p.validate().unwrap();
        assert_eq!(p.width / p.heads, 96);
        assert!(p.param_count() > 100_000_000);
    }

    #[test]
    fn fresh_model_has_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AccompConfig {
            frames: 8,
            width: 16,
            hidden: 16,
            ..AccompConfig::default()
        };
        let m = AccompModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let pair = &gen_toy_pairs(0, 1, &cfg.toy()).unwrap()[0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[8, 8], &mut rng));
        let out = m
            .forward(&mut tape, x, &pair.vocal, 0.5, Some(1), &RouterState::training(2.0), &mut rng)
            .unwrap();
        assert!(tape.value(out.field).data().iter().all(|&v| v == 0.0));
        assert_eq!(out.moe.len(), 2);
        assert_eq!(out.routed.len(), 6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[8, 8]));
        assert!(m.forward(&mut tape, x, &pair.vocal, 0.5, Some(4), &RouterState::inference(), &mut rng).is_err());
    }
}
