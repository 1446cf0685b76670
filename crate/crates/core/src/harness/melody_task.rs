//! Melody model training on the diatonic grammar and its evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check_loss;
use super::synth::{gen_melody_songs, MelodySong, GRAMMAR_BASE, GRAMMAR_PHONEMES};
use crate::error::Result;
use crate::melody::{melody_loss, MelodyConfig, MelodyInput, MelodyModel};
use crate::metrics::{evaluate_song, key_accuracy, summarize, KeyProfiles, MelodyReport, SongMetrics};
use crate::notes::NoteSequence;
use crate::optim::{Adam, Optimizer};
use crate::scalar::Scalar;
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct MelodySettings {
    pub seed: u64,
    pub model: MelodyConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for MelodySettings {
    fn default() -> Self {
        Self {
            seed: 0,
            model: MelodyConfig::default(),
            steps: 600,
            batch: 16,
            lr: 3e-3,
            train_size: 512,
            test_size: 64,
        }
    }
}

impl MelodySettings {
    pub fn datasets(&self) -> (Vec<MelodySong>, Vec<MelodySong>) {
        (
            gen_melody_songs(self.seed, self.train_size),
            gen_melody_songs(self.seed ^ 0x00ff_00ff_00ff, self.test_size),
        )
    }
}

pub fn song_input<S: Scalar>(song: &MelodySong) -> MelodyInput<S> {
    MelodyInput {
        phonemes: song.phonemes.clone(),
        tags: song.tags(),
        timbre: None,
    }
}

pub struct MelodyRun<S> {
    pub model: MelodyModel<S>,
    pub losses: Vec<f64>,
}

pub fn init_melody<S: Scalar>(s: &MelodySettings) -> Result<MelodyModel<S>> {
    let mut init = ChaCha8Rng::seed_from_u64(s.seed);
    let cfg = MelodyConfig {
        phonemes: s.model.phonemes.max(GRAMMAR_PHONEMES),
        ..s.model.clone()
    };
    MelodyModel::new(cfg, &mut init)
}

pub fn train_melody<S: Scalar>(s: &MelodySettings) -> Result<MelodyRun<S>> {
    let (train, _) = s.datasets();
    let mut model = init_melody::<S>(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(1));
    let mut opt = Adam::with_lr(s.lr);
    let mut losses = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        model.store.zero_grad();
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(s.batch);
        for _ in 0..s.batch {
            let song = &train[rng.gen_range(0..train.len())];
            let (logits, durs) = model.forward(&mut tape, &song_input(song))?;
            terms.push(melody_loss(&mut tape, logits, durs, &song.notes)?);
        }
        let all = tape.concat(&terms, 0)?;
        let total = tape.sum(all);
        let loss = tape.scale(total, S::one() / S::count(s.batch));
        losses.push(check_loss(step, tape.value(loss).item().as_f64())?);
        tape.backward(loss)?;
        tape.write_param_grads(&mut model.store)?;
        opt.step(&mut model.store);
    }
    Ok(MelodyRun { model, losses })
}

/// Fraction of notes (rests included) whose predicted class is correct.
pub fn pitch_accuracy(pred: &[NoteSequence], gt: &[NoteSequence]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.pitches.iter().zip(&g.pitches) {
            hit += usize::from(a == b);
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Ground-truth durations with pitches drawn uniformly from the grammar's
/// range.
pub fn random_baseline(gt: &NoteSequence, rng: &mut impl Rng) -> NoteSequence {
    let pitches = gt
        .pitches
        .iter()
        .map(|_| Some(rng.gen_range(GRAMMAR_BASE..GRAMMAR_BASE + 36)))
        .collect();
    NoteSequence::new(pitches, gt.durations.clone(), gt.tempo).expect("grammar range is valid MIDI")
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelodyEval {
    pub accuracy: f64,
    pub report: MelodyReport,
    pub baseline_ka: f64,
    pub songs: Vec<SongMetrics>,
}

pub fn evaluate_melody<S: Scalar>(model: &MelodyModel<S>, songs: &[MelodySong], seed: u64) -> Result<MelodyEval> {
    let profiles = KeyProfiles::standard();
    let preds = songs
        .iter()
        .map(|s| model.predict(&song_input(s), s.notes.tempo))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<NoteSequence> = songs.iter().map(|s| s.notes.clone()).collect();
    let metrics = preds
        .iter()
        .zip(songs)
        .map(|(p, s)| evaluate_song(p, &s.notes, Some(s.key), &profiles))
        .collect::<Result<Vec<_>>>()?;
    let report = summarize(&metrics)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kas = Vec::new();
    for s in songs {
        let b = random_baseline(&s.notes, &mut rng);
        if let Ok(ka) = key_accuracy(&b, &s.notes, s.key, &profiles) {
            kas.push(ka);
        }
    }
    Ok(MelodyEval {
        accuracy: pitch_accuracy(&preds, &gts),
        report,
        baseline_ka: kas.iter().sum::<f64>() / kas.len().max(1) as f64,
        songs: metrics,
    })
}
