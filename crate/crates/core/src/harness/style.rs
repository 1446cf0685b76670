//! Phoneme-level style predictor: a WaveNet field conditioned on content
//! queries that attend over a quantized reference prompt.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check_loss;
use super::synth::{gen_style_samples, StyleSample, StyleToyConfig};
use crate::error::{Error, Result};
use crate::flow::{make_flow_sample, FlowConfig, FlowSample, VectorFieldEstimator, WaveNet, WaveNetConfig};
use crate::nn::{Init, Linear};
use crate::optim::{Adam, Optimizer};
use crate::params::{init_normal, ParameterStore};
use crate::rq::{commit_loss, quantize_st, RQCodebook, StyleCode};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::StyleAlignment;

/// Name prefix of the estimator's parameters.
pub const ESTIMATOR_PREFIX: &str = "wavenet";
const CODEBOOK_PREFIX: &str = "rq";
const COMMIT_WEIGHT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleModelConfig {
    pub toy: StyleToyConfig,
    pub width: usize,
    pub align_layers: usize,
    pub rq_depth: usize,
    pub rq_size: usize,
    pub residual_channels: usize,
    pub dilations: Vec<usize>,
}

impl Default for StyleModelConfig {
    fn default() -> Self {
        Self {
            toy: StyleToyConfig::default(),
            width: 16,
            align_layers: 2,
            rq_depth: 2,
            rq_size: 16,
            residual_channels: 32,
            dilations: vec![1, 2, 4],
        }
    }
}

/// Reference prompt and tag for one item; `None` entries use the learned
/// null conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePrompt<S> {
    pub prompt: Option<Tensor<S>>,
    pub tag: Option<usize>,
}

pub struct StylePredictor<S> {
    pub cfg: StyleModelConfig,
    pub store: ParameterStore<S>,
    pub codebook: RQCodebook<S>,
    content_emb: String,
    tag_emb: String,
    prompt_enc: Linear,
    align: StyleAlignment,
    estimator: WaveNet<S>,
}

/// Field plus the prompt encoding, when a prompt was given.
pub struct StyleOutput<S> {
    pub field: Var,
    pub prompt_code: Option<(Var, StyleCode<S>)>,
}

impl<S: Scalar> StylePredictor<S> {
    pub fn new<R: Rng + ?Sized>(cfg: StyleModelConfig, rng: &mut R) -> Result<Self> {
        let toy = &cfg.toy;
        let w = cfg.width;
        let mut store = ParameterStore::new();
        let content_emb = "content_emb".to_string();
        store.insert(content_emb.clone(), init_normal(&[toy.phonemes, w], 1.0, rng))?;
        let tag_emb = "tag_emb".to_string();
        store.insert(tag_emb.clone(), init_normal(&[toy.tags + 1, w], 1.0, rng))?;
        let prompt_enc = Linear::new(&mut store, "prompt_enc", toy.prompt_dim, w, true, Init::Uniform, rng)?;
        let align = StyleAlignment::new(&mut store, "align", w, cfg.align_layers, rng)?;
        let wcfg = WaveNetConfig {
            x_channels: toy.channels,
            cond_channels: 2 * w,
            residual_channels: cfg.residual_channels,
            kernel: 3,
            dilations: cfg.dilations.clone(),
        };
        let estimator = WaveNet::in_store(&mut store, ESTIMATOR_PREFIX, wcfg, rng)?;
        let codebook = RQCodebook::new(cfg.rq_depth, cfg.rq_size, w, 0.5, rng)?;
        Ok(Self {
            cfg,
            store,
            codebook,
            content_emb,
            tag_emb,
            prompt_enc,
            align,
            estimator,
        })
    }

    /// Parameters plus codebook, as written to a checkpoint.
    pub fn checkpoint_store(&self) -> Result<ParameterStore<S>> {
        let mut s = self.store.clone();
        self.codebook.write_to(&mut s, CODEBOOK_PREFIX)?;
        Ok(s)
    }

    pub fn from_checkpoint(cfg: StyleModelConfig, store: &ParameterStore<S>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(cfg, &mut rng)?;
        let mut params = ParameterStore::new();
        for (name, t) in store.iter() {
            if !name.starts_with(&format!("{CODEBOOK_PREFIX}.")) {
                params.insert(name.clone(), t.clone())?;
            }
        }
        if params.len() != m.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                m.store.len()
            )));
        }
        m.store.load_values(&params)?;
        m.codebook = RQCodebook::read_from(store, CODEBOOK_PREFIX)?;
        Ok(m)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        xt: Var,
        t: f64,
        content: &[usize],
        cond: &StylePrompt<S>,
    ) -> Result<StyleOutput<S>> {
        let tags = self.cfg.toy.tags;
        let row = match cond.tag {
            Some(k) if k >= tags => {
                return Err(Error::Bounds {
                    op: "style_tag",
                    index: k,
                    bound: tags,
                })
            }
            Some(k) => k,
            None => tags,
        };
        let st = &self.store;
        let table = tape.param(st, &self.content_emb)?;
        let q = tape.embedding(table, content)?;
        let tag_table = tape.param(st, &self.tag_emb)?;
        let tag = tape.embedding(tag_table, &[row])?;
        let tag = tape.reshape(tag, &[self.cfg.width])?;
        let q = tape.add_row(q, tag)?;
        let (prompt, prompt_code) = match &cond.prompt {
            Some(p) => {
                let pv = tape.constant(p.clone());
                let z_e = self.prompt_enc.forward(tape, st, pv)?;
                let (zq, code) = quantize_st(tape, z_e, &self.codebook)?;
                (Some(zq), Some((z_e, code)))
            }
            None => (None, None),
        };
        let c = self.align.forward(tape, st, q, prompt)?;
        let field = self.estimator.forward_with(tape, st, xt, t, Some(c))?;
        Ok(StyleOutput { field, prompt_code })
    }
}

/// The predictor bound to one content sequence.
pub struct StyleField<'a, S> {
    pub model: &'a StylePredictor<S>,
    pub content: Vec<usize>,
}

impl<S: Scalar> VectorFieldEstimator<S> for StyleField<'_, S> {
    type Condition = StylePrompt<S>;

    fn store(&self) -> &ParameterStore<S> {
        &self.model.store
    }

    fn field(&self, tape: &mut Tape<S>, xt: Var, t: f64, cond: Option<&StylePrompt<S>>) -> Result<Var> {
        let null = StylePrompt { prompt: None, tag: None };
        Ok(self.model.forward(tape, xt, t, &self.content, cond.unwrap_or(&null))?.field)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleSettings {
    pub seed: u64,
    pub model: StyleModelConfig,
    pub steps: usize,
    /// Steps at the start during which estimator parameters stay frozen.
    pub warmup: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_size: usize,
    pub prompt_drop: f64,
    pub text_drop: f64,
    pub flow: FlowConfig,
}

impl Default for StyleSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            model: StyleModelConfig::default(),
            steps: 400,
            warmup: 0,
            batch: 8,
            lr: 2e-3,
            train_size: 256,
            prompt_drop: 0.2,
            text_drop: 0.1,
            flow: FlowConfig::default(),
        }
    }
}

pub struct StyleRun<S> {
    pub model: StylePredictor<S>,
    pub losses: Vec<f64>,
}

fn prompt_of<S: Scalar>(s: &StyleSample, keep_prompt: bool, keep_tag: bool) -> StylePrompt<S> {
    StylePrompt {
        prompt: keep_prompt.then(|| s.prompt.cast()),
        tag: keep_tag.then_some(s.tag),
    }
}

/// Prompt encoding and its code, kept for the commitment loss and codebook update.
type PromptCode<S> = (Var, StyleCode<S>);

/// Mean squared field error on `samples`, each paired with its flow draw.
fn flow_loss<S: Scalar>(
    model: &StylePredictor<S>,
    tape: &mut Tape<S>,
    items: &[(&StyleSample, FlowSample<S>, StylePrompt<S>)],
) -> Result<(Var, Vec<PromptCode<S>>)> {
    let mut terms = Vec::with_capacity(items.len());
    let mut codes = Vec::new();
    let mut count = 0usize;
    for (s, fs, cond) in items {
        let xt = tape.constant(fs.xt.clone());
        let out = model.forward(tape, xt, fs.t, &s.content, cond)?;
        let u = tape.constant(fs.u.clone());
        let d = tape.sub(out.field, u)?;
        let sq = tape.square(d);
        terms.push(tape.sum(sq));
        count += fs.u.numel();
        codes.extend(out.prompt_code);
    }
    let all = tape.concat(&terms, 0)?;
    let total = tape.sum(all);
    Ok((tape.scale(total, S::one() / S::count(count)), codes))
}

pub fn init_style<S: Scalar>(s: &StyleSettings) -> Result<StylePredictor<S>> {
    s.flow.validate()?;
    let mut init = ChaCha8Rng::seed_from_u64(s.seed);
    StylePredictor::new(s.model.clone(), &mut init)
}

pub fn style_data(s: &StyleSettings) -> Result<Vec<StyleSample>> {
    gen_style_samples(s.seed, s.train_size, &s.model.toy)
}

pub fn train_style<S: Scalar>(s: &StyleSettings) -> Result<StyleRun<S>> {
    let data = style_data(s)?;
    let mut model = init_style::<S>(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(1));
    let mut opt = Adam::with_lr(s.lr);
    let mut losses = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let mut items = Vec::with_capacity(s.batch);
        for _ in 0..s.batch {
            let smp = &data[rng.gen_range(0..data.len())];
            let fs = make_flow_sample(&smp.target.cast::<S>(), &mut rng, &s.flow)?;
            let keep_prompt = rng.gen::<f64>() >= s.prompt_drop;
            let keep_tag = rng.gen::<f64>() >= s.text_drop;
            items.push((smp, fs, prompt_of(smp, keep_prompt, keep_tag)));
        }
        model.store.zero_grad();
        let mut tape = Tape::new();
        let (flow, codes) = flow_loss(&model, &mut tape, &items)?;
        let mut loss = flow;
        for (z_e, code) in &codes {
            let c = commit_loss(&mut tape, *z_e, code)?;
            let n = tape.value(*z_e).numel() * codes.len();
            let c = tape.scale(c, S::lit(COMMIT_WEIGHT) / S::count(n));
            loss = tape.add(loss, c)?;
        }
        check_loss(step, tape.value(loss).item().as_f64())?;
        losses.push(tape.value(flow).item().as_f64());
        tape.backward(loss)?;
        tape.write_param_grads(&mut model.store)?;
        if step < s.warmup {
            model.store.freeze_prefix(ESTIMATOR_PREFIX);
        }
        opt.step(&mut model.store);
        for (z_e, code) in &codes {
            model.codebook.update(tape.value(*z_e), code)?;
        }
    }
    Ok(StyleRun { model, losses })
}

/// Flow loss on the first `n` samples with full conditioning and flow draws
/// from `seed`.
pub fn style_eval_loss<S: Scalar>(
    model: &StylePredictor<S>,
    data: &[StyleSample],
    n: usize,
    flow: &FlowConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = data
        .iter()
        .take(n)
        .map(|smp| Ok((smp, make_flow_sample(&smp.target.cast::<S>(), &mut rng, flow)?, prompt_of(smp, true, true))))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let (l, _) = flow_loss(model, &mut tape, &items)?;
    Ok(tape.value(l).item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> StyleSettings {
        StyleSettings {
            steps: 6,
            batch: 2,
            train_size: 16,
            ..StyleSettings::default()
        }
    }

    #[test]
    fn warmup_freezes_estimator() {
        let s = StyleSettings { warmup: 6, ..tiny() };
        let before = init_style::<f64>(&s).unwrap();
        let after = train_style::<f64>(&s).unwrap().model;
        let mut moved = false;
        for (name, t) in before.store.iter() {
            let same = t.data() == after.store.get(name).unwrap().data();
            if name.starts_with(ESTIMATOR_PREFIX) {
                assert!(same, "{name} changed during warm-up");
            } else {
                moved |= !same;
            }
        }
        assert!(moved);
    }

    #[test]
    fn checkpoint_store_round_trip() {
        let s = tiny();
        let m = train_style::<f32>(&s).unwrap().model;
        let ck = m.checkpoint_store().unwrap();
        let back = StylePredictor::<f32>::from_checkpoint(s.model.clone(), &ck).unwrap();
        let data = style_data(&s).unwrap();
        let a = style_eval_loss(&m, &data, 4, &s.flow, 9).unwrap();
        let b = style_eval_loss(&back, &data, 4, &s.flow, 9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
