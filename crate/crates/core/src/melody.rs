//! Non-autoregressive note model: phonemes and style tags in, one pitch
//! distribution and one duration per phoneme out. Also the duration
//! utilities shared with frame-level models.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Init, Linear};
use crate::notes::{NoteSequence, NUM_CLASSES};
use crate::params::{init_normal, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::{Reduction, Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::AttentionParams;

#[derive(Clone, Debug, PartialEq)]
pub struct MelodyConfig {
    pub phonemes: usize,
    pub tags: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Width of the optional timbre vector; 0 disables it.
    pub timbre_dim: usize,
}

impl Default for MelodyConfig {
    fn default() -> Self {
        Self {
            phonemes: 32,
            tags: 24,
            width: 64,
            heads: 4,
            layers: 2,
            hidden: 128,
            timbre_dim: 0,
        }
    }
}

/// One song's conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct MelodyInput<S> {
    pub phonemes: Vec<usize>,
    pub tags: Vec<usize>,
    /// `[1 × timbre_dim]`
    pub timbre: Option<Tensor<S>>,
}

struct Layer {
    attn_norm: String,
    attn: AttentionParams,
    ffn_norm: String,
    ffn: FeedForward,
}

pub struct MelodyModel<S> {
    pub cfg: MelodyConfig,
    pub store: ParameterStore<S>,
    phone_emb: String,
    tag_emb: String,
    timbre: Option<Linear>,
    layers: Vec<Layer>,
    out_norm: String,
    pitch_head: Linear,
    dur_head: Linear,
}

impl<S: Scalar> MelodyModel<S> {
    pub fn new<R: Rng + ?Sized>(cfg: MelodyConfig, rng: &mut R) -> Result<Self> {
        if cfg.phonemes == 0 || cfg.tags == 0 || cfg.width == 0 {
            return Err(Error::Config("melody vocabularies and width must be positive".into()));
        }
        let mut store = ParameterStore::new();
        let d = cfg.width;
        let phone_emb = "phoneme_emb".to_string();
        store.insert(phone_emb.clone(), init_normal(&[cfg.phonemes, d], 1.0, rng))?;
        let tag_emb = "tag_emb".to_string();
        store.insert(tag_emb.clone(), init_normal(&[cfg.tags, d], 1.0, rng))?;
        let timbre = if cfg.timbre_dim > 0 {
            Some(Linear::new(&mut store, "timbre", cfg.timbre_dim, d, false, Init::Uniform, rng)?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let attn_norm = format!("layers.{i}.attn_norm");
            let ffn_norm = format!("layers.{i}.ffn_norm");
            store.insert(attn_norm.clone(), Tensor::ones(&[d]))?;
            store.insert(ffn_norm.clone(), Tensor::ones(&[d]))?;
            layers.push(Layer {
                attn: AttentionParams::new(&mut store, &format!("layers.{i}.attn"), d, cfg.heads, rng)?,
                ffn: FeedForward::new(&mut store, &format!("layers.{i}.ffn"), d, cfg.hidden, rng)?,
                attn_norm,
                ffn_norm,
            });
        }
        let out_norm = "out_norm".to_string();
        store.insert(out_norm.clone(), Tensor::ones(&[d]))?;
        let pitch_head = Linear::new(&mut store, "pitch_head", d, NUM_CLASSES, true, Init::Uniform, rng)?;
        let dur_head = Linear::new(&mut store, "duration_head", d, 1, true, Init::Uniform, rng)?;
        Ok(Self {
            cfg,
            store,
            phone_emb,
            tag_emb,
            timbre,
            layers,
            out_norm,
            pitch_head,
            dur_head,
        })
    }

    /// Returns pitch logits `[N × 129]` and positive durations `[N]` in beats.
    pub fn forward(&self, tape: &mut Tape<S>, input: &MelodyInput<S>) -> Result<(Var, Var)> {
        let n = input.phonemes.len();
        if n == 0 || input.tags.is_empty() {
            return Err(Error::Data("melody input needs phonemes and tags".into()));
        }
        let st = &self.store;
        let pe = tape.param(st, &self.phone_emb)?;
        let mut h = tape.embedding(pe, &input.phonemes)?;
        let te = tape.param(st, &self.tag_emb)?;
        let tags = tape.embedding(te, &input.tags)?;
        // the mean tag conditions every position directly
        let g = tape.mean_axis(tags, 0)?;
        h = tape.add_row(h, g)?;
        match (&self.timbre, &input.timbre) {
            (Some(lin), Some(z)) => {
                let z = tape.constant(z.clone());
                let z = lin.forward(tape, st, z)?;
                let z = tape.reshape(z, &[self.cfg.width])?;
                h = tape.add_row(h, z)?;
            }
            (None, Some(_)) => return Err(Error::Config("model built without a timbre input".into())),
            _ => {}
        }
        for layer in &self.layers {
            let g1 = tape.param(st, &layer.attn_norm)?;
            let a = tape.rmsnorm(h, g1)?;
            let (a, _) = layer.attn.forward(tape, st, a, tags)?;
            h = tape.add(h, a)?;
            let g2 = tape.param(st, &layer.ffn_norm)?;
            let f = tape.rmsnorm(h, g2)?;
            let f = layer.ffn.forward(tape, st, f)?;
            h = tape.add(h, f)?;
        }
        let go = tape.param(st, &self.out_norm)?;
        let h = tape.rmsnorm(h, go)?;
        let logits = self.pitch_head.forward(tape, st, h)?;
        let d = self.dur_head.forward(tape, st, h)?;
        let d = tape.softplus(d);
        let d = tape.reshape(d, &[n])?;
        Ok((logits, d))
    }

    /// Most likely class and predicted duration per phoneme.
    pub fn predict(&self, input: &MelodyInput<S>, tempo: Option<f64>) -> Result<NoteSequence> {
        let mut tape = Tape::<S>::new();
        let (logits, durs) = self.forward(&mut tape, input)?;
        let l = tape.value(logits);
        let classes: Vec<usize> = (0..l.rows())
            .map(|r| {
                let row = l.row(r);
                (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
            })
            .collect();
        let d = tape.value(durs).data().iter().map(|x| x.as_f64().max(1e-3)).collect();
        NoteSequence::from_classes(&classes, d, tempo)
    }
}

/// Summed pitch cross-entropy plus summed squared duration error.
pub fn melody_loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, durations: Var, target: &NoteSequence) -> Result<Var> {
    let n = target.len();
    if tape.shape(durations) != [n] {
        return Err(Error::dim("melody_loss", tape.shape(durations), &[n]));
    }
    let ce = tape.cross_entropy(logits, &target.classes(), Reduction::Sum)?;
    let t = tape.constant(Tensor::from_f64(&[n], &target.durations)?);
    let diff = tape.sub(durations, t)?;
    let sq = tape.square(diff);
    let l2 = tape.sum(sq);
    tape.add(ce, l2)
}

/// Repeats row `i` of `x[P×d]` `durations[i]` times.
pub fn length_regulate<S: Scalar>(tape: &mut Tape<S>, x: Var, durations: &[usize]) -> Result<Var> {
    let p = tape.shape(x)[0];
    if durations.len() != p {
        return Err(Error::dim("length_regulate", tape.shape(x), &[durations.len()]));
    }
    let idx: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect();
    if idx.is_empty() {
        return Err(Error::Data("durations sum to zero frames".into()));
    }
    tape.gather_rows(x, &idx)
}

/// Mean squared error between predicted log-durations and `ln(target + 1)`.
pub fn log_duration_loss<S: Scalar>(tape: &mut Tape<S>, predicted: Var, target: &[f64]) -> Result<Var> {
    if tape.shape(predicted) != [target.len()] {
        return Err(Error::dim("log_duration_loss", tape.shape(predicted), &[target.len()]));
    }
    if let Some(t) = target.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::Data(format!("duration target {t} must be non-negative")));
    }
    let logt: Vec<f64> = target.iter().map(|t| (t + 1.0).ln()).collect();
    let t = tape.constant(Tensor::from_f64(&[target.len()], &logt)?);
    tape.mse(predicted, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(timbre: usize) -> MelodyConfig {
        MelodyConfig {
            phonemes: 10,
            tags: 4,
            width: 16,
            heads: 2,
            layers: 1,
            hidden: 32,
            timbre_dim: timbre,
        }
    }

    fn input(n: usize, rng: &mut ChaCha8Rng) -> MelodyInput<f64> {
        MelodyInput {
            phonemes: (0..n).map(|_| rng.gen_range(0..10)).collect(),
            tags: vec![rng.gen_range(0..4), rng.gen_range(0..4)],
            timbre: None,
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MelodyModel::<f64>::new(small(0), &mut rng).unwrap();
        for n in [1, 3, 11] {
            let inp = input(n, &mut rng);
            let mut t1 = Tape::new();
            let (l1, d1) = m.forward(&mut t1, &inp).unwrap();
            let mut t2 = Tape::new();
            let (l2, d2) = m.forward(&mut t2, &inp).unwrap();
            assert_eq!(t1.shape(l1), &[n, NUM_CLASSES]);
            assert_eq!(t1.shape(d1), &[n]);
            assert_eq!(t1.value(l1), t2.value(l2));
            assert_eq!(t1.value(d1), t2.value(d2));
            assert!(t1.value(d1).data().iter().all(|&d| d > 0.0));
            let p = t1.softmax(l1, 1).unwrap();
            for r in 0..n {
                assert!((t1.value(p).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MelodyModel::<f64>::new(small(0), &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        let bad = MelodyInput {
            phonemes: vec![10],
            tags: vec![0],
            timbre: None,
        };
        assert!(matches!(m.forward(&mut tape, &bad), Err(Error::Bounds { .. })));
        let bad = MelodyInput {
            phonemes: vec![0],
            tags: vec![4],
            timbre: None,
        };
        assert!(matches!(m.forward(&mut tape, &bad), Err(Error::Bounds { .. })));
    }

    #[test]
    fn timbre_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MelodyModel::<f64>::new(small(3), &mut rng).unwrap();
        let mut inp = input(4, &mut rng);
        let mut tape = Tape::<f64>::new();
        let (a, _) = m.forward(&mut tape, &inp).unwrap();
        inp.timbre = Some(Tensor::randn(&[1, 3], &mut rng));
        let (b, _) = m.forward(&mut tape, &inp).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn loss_zero_at_exact_prediction() {
        let target = NoteSequence::from_pitches(&[60, 64], &[1.0, 0.5], None).unwrap();
        let mut logits = vec![-1e4; 2 * NUM_CLASSES];
        logits[60] = 1e4;
        logits[NUM_CLASSES + 64] = 1e4;
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::from_f64(&[2, NUM_CLASSES], &logits).unwrap());
        let d = tape.constant(Tensor::from_f64(&[2], &[1.0, 0.5]).unwrap());
        let loss = melody_loss(&mut tape, l, d, &target).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn uniform_logits_give_n_ln_k() {
        let target = NoteSequence::from_pitches(&[0, 5, 11], &[1.0, 1.0, 2.0], None).unwrap();
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[3, 12]));
        let d = tape.constant(Tensor::from_f64(&[3], &[1.0, 1.0, 2.0]).unwrap());
        let loss = melody_loss(&mut tape, l, d, &target).unwrap();
        assert!((tape.value(loss).item() - 3.0 * 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn length_regulate_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = length_regulate(&mut tape, x, &[1, 1]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = length_regulate(&mut tape, x, &[2, 3]).unwrap();
        let rows: Vec<_> = (0..5).map(|r| tape.value(y).row(r)[0]).collect();
        assert_eq!(rows, vec![1.0, 1.0, 3.0, 3.0, 3.0]);
        assert!(matches!(length_regulate(&mut tape, x, &[0, 0]), Err(Error::Data(_))));
        assert!(length_regulate(&mut tape, x, &[1]).is_err());
    }

    #[test]
    fn log_duration_examples() {
        let mut tape = Tape::<f64>::new();
        let target = [3.0, 0.0, 7.5];
        let p: Vec<f64> = target.iter().map(|t: &f64| (t + 1.0).ln()).collect();
        let pv = tape.constant(Tensor::from_f64(&[3], &p).unwrap());
        let l = log_duration_loss(&mut tape, pv, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(matches!(log_duration_loss(&mut tape, pv, &[1.0, -1.0, 2.0]), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn melody_loss_matches_scalar_resum(seed in 0u64..1000, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::<f64>::randn(&[n, NUM_CLASSES], &mut rng);
            let pitches: Vec<u8> = (0..n).map(|_| rng.gen_range(0..128)).collect();
            let durs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.25..4.0)).collect();
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..4.0)).collect();
            let target = NoteSequence::from_pitches(&pitches, &durs, None).unwrap();
            let mut tape = Tape::<f64>::new();
            let l = tape.constant(logits.clone());
            let d = tape.constant(Tensor::from_f64(&[n], &pred).unwrap());
            let loss = melody_loss(&mut tape, l, d, &target).unwrap();
            let mut oracle = 0.0;
            for i in 0..n {
                let row = logits.row(i);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                oracle += lse - row[pitches[i] as usize];
                oracle += (pred[i] - durs[i]).powi(2);
            }
            prop_assert!((tape.value(loss).item() - oracle).abs() < 1e-10);
            prop_assert!(tape.value(loss).item() >= 0.0);
        }

        #[test]
        fn log_duration_matches_resum(seed in 0u64..1000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..3.0)).collect();
            let target: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(Tensor::from_f64(&[n], &pred).unwrap());
            let l = log_duration_loss(&mut tape, p, &target).unwrap();
            let oracle = pred.iter().zip(&target).map(|(p, t)| (p - (t + 1.0).ln()).powi(2)).sum::<f64>() / n as f64;
            prop_assert!((tape.value(l).item() - oracle).abs() < 1e-12);
        }

        #[test]
        fn regulated_length_is_duration_sum(durs in proptest::collection::vec(0usize..5, 1..8)) {
            prop_assume!(durs.iter().sum::<usize>() > 0);
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::zeros(&[durs.len(), 2]));
            let y = length_regulate(&mut tape, x, &durs).unwrap();
            prop_assert_eq!(tape.shape(y)[0], durs.iter().sum::<usize>());
        }
    }
}
