//! Seeded toy datasets: a 2-D Gaussian mixture, vocal/accompaniment pairs,
//! a diatonic melody grammar and phoneme-level style targets.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::{Key, Mode};
use crate::notes::NoteSequence;
use crate::tensor::Tensor;

pub const MODE_CENTER: f64 = 2.0;
pub const MODE_STD: f64 = 0.3;

/// `n` points from the two-mode mixture at `(±2, 0)`, shape `[n × 2]`.
pub fn gen_flow2d(seed: u64, n: usize) -> Result<Tensor<f64>> {
    if n < 100 {
        return Err(Error::Config(format!("flow2d needs at least 100 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let cx = if rng.gen::<bool>() { MODE_CENTER } else { -MODE_CENTER };
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        data.push(cx + MODE_STD * dx);
        data.push(MODE_STD * dy);
    }
    Tensor::new(&[n, 2], data)
}

pub fn write_points_csv<W: Write>(points: &Tensor<f64>, mut w: W) -> Result<()> {
    writeln!(w, "x,y")?;
    for r in 0..points.rows() {
        let p = points.row(r);
        writeln!(w, "{},{}", p[0], p[1])?;
    }
    Ok(())
}

/// Sizes of the vocal/accompaniment toy task.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub frames: usize,
    pub channels: usize,
    pub tags: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            channels: 8,
            tags: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyPair {
    /// `[T × C]`
    pub vocal: Tensor<f64>,
    /// `[T × C]`, the tag transform of `vocal`.
    pub accomp: Tensor<f64>,
    pub tag: usize,
}

/// Three-tap causal filter for a tag.
pub fn tag_filter(tag: usize, tags: usize) -> [f64; 3] {
    let w = tag as f64 / tags.max(1) as f64;
    [1.0 - 0.5 * w, 0.5 * w, 0.25 * (w - 0.5)]
}

/// Per-channel offset added by a tag.
pub fn tag_offset(tag: usize, channels: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| 0.6 * (2.0 * PI * (tag as f64 + 1.0) * c as f64 / channels as f64 + tag as f64).cos())
        .collect()
}

/// The ground-truth accompaniment for `vocal[T × C]` under `tag`.
pub fn tag_transform(vocal: &Tensor<f64>, tag: usize, tags: usize) -> Tensor<f64> {
    let (t_len, c) = (vocal.rows(), vocal.cols());
    let h = tag_filter(tag, tags);
    let off = tag_offset(tag, c);
    let mut out = vec![0.0; t_len * c];
    for t in 0..t_len {
        for ch in 0..c {
            let mut acc = off[ch];
            for (k, hk) in h.iter().enumerate() {
                if t >= k {
                    acc += hk * vocal.at(t - k, ch);
                }
            }
            out[t * c + ch] = acc;
        }
    }
    Tensor::new(&[t_len, c], out).expect("same shape as vocal")
}

fn smoothed_walk<R: Rng + ?Sized>(frames: usize, channels: usize, rng: &mut R) -> Tensor<f64> {
    let mut data = vec![0.0; frames * channels];
    for ch in 0..channels {
        let mut walk = Vec::with_capacity(frames);
        let mut x = 0.0;
        for _ in 0..frames {
            x += rng.sample::<f64, _>(StandardNormal);
            walk.push(x);
        }
        let smooth: Vec<f64> = (0..frames)
            .map(|t| {
                let lo = t.saturating_sub(1);
                let hi = (t + 1).min(frames - 1);
                walk[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect();
        let mean = smooth.iter().sum::<f64>() / frames as f64;
        let var = smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / frames as f64;
        let sd = var.sqrt().max(1e-6);
        for t in 0..frames {
            data[t * channels + ch] = (smooth[t] - mean) / sd;
        }
    }
    Tensor::new(&[frames, channels], data).expect("positive sizes")
}

pub fn gen_toy_pairs(seed: u64, n: usize, cfg: &ToyConfig) -> Result<Vec<ToyPair>> {
    if cfg.tags < 2 {
        return Err(Error::Config(format!("toy pairs need at least 2 tags, got {}", cfg.tags)));
    }
    if cfg.frames < 2 || cfg.channels == 0 {
        return Err(Error::Config("toy pair sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let tag = rng.gen_range(0..cfg.tags);
            let vocal = smoothed_walk(cfg.frames, cfg.channels, &mut rng);
            let accomp = tag_transform(&vocal, tag, cfg.tags);
            ToyPair { vocal, accomp, tag }
        })
        .collect())
}

/// Long-format CSV: one row per pair, frame and channel.
pub fn write_pairs_csv<W: Write>(pairs: &[ToyPair], mut w: W) -> Result<()> {
    writeln!(w, "pair,tag,frame,channel,vocal,accomp")?;
    for (i, p) in pairs.iter().enumerate() {
        for t in 0..p.vocal.rows() {
            for c in 0..p.vocal.cols() {
                writeln!(w, "{i},{},{t},{c},{},{}", p.tag, p.vocal.at(t, c), p.accomp.at(t, c))?;
            }
        }
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::dim("pearson", &[a.len()], &[b.len()]));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidMetric("pearson of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

// ---- melody grammar ----

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];
/// Lowest pitch of the grammar (degree 0, octave 0, tonic C).
pub const GRAMMAR_BASE: u8 = 48;
/// Phoneme id reserved for a rest.
pub const REST_PHONEME: usize = 28;
pub const GRAMMAR_PHONEMES: usize = 29;
pub const TEMPI: [f64; 3] = [90.0, 120.0, 150.0];
pub const SHORT_BEATS: f64 = 0.5;
pub const LONG_BEATS: f64 = 1.0;

/// Phoneme id for a scale degree, octave and length class.
pub fn grammar_phoneme(degree: usize, octave: usize, long: bool) -> usize {
    debug_assert!(degree < 7 && octave < 2);
    degree * 4 + octave * 2 + usize::from(long)
}

/// Pitch and duration a phoneme stands for in `key`.
pub fn grammar_note(phoneme: usize, key: Key) -> (Option<u8>, f64) {
    if phoneme >= REST_PHONEME {
        return (None, SHORT_BEATS);
    }
    let (degree, octave, long) = (phoneme / 4, (phoneme / 2) % 2, phoneme % 2 == 1);
    let scale = match key.mode {
        Mode::Major => MAJOR,
        Mode::Minor => MINOR,
    };
    let pitch = GRAMMAR_BASE + key.tonic + scale[degree] + 12 * octave as u8;
    (Some(pitch), if long { LONG_BEATS } else { SHORT_BEATS })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelodySong {
    pub phonemes: Vec<usize>,
    pub key: Key,
    pub notes: NoteSequence,
}

impl MelodySong {
    /// The style tags fed to the melody model.
    pub fn tags(&self) -> Vec<usize> {
        vec![self.key.index()]
    }
}

/// Songs of 8 to 16 notes: a bounded random walk over the scale that starts
/// and ends on the tonic, with occasional rests.
pub fn gen_melody_songs(seed: u64, n: usize) -> Vec<MelodySong> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<Key> = Key::all().collect();
    (0..n)
        .map(|_| {
            let key = *keys.choose(&mut rng).expect("24 keys");
            let tempo = *TEMPI.choose(&mut rng).expect("three tempi");
            let len = rng.gen_range(8..=16);
            let mut step: i32 = 0;
            let mut phonemes = Vec::with_capacity(len);
            for i in 0..len {
                if i > 0 && i + 1 < len && rng.gen::<f64>() < 0.05 {
                    phonemes.push(REST_PHONEME);
                    continue;
                }
                if i + 1 == len {
                    step = if step >= 4 { 7 } else { 0 };
                } else if i > 0 {
                    step = (step + rng.gen_range(-2..=2)).clamp(0, 13);
                }
                let (degree, octave) = (step as usize % 7, step as usize / 7);
                phonemes.push(grammar_phoneme(degree, octave, rng.gen::<f64>() < 0.4));
            }
            let (pitches, durations) = phonemes.iter().map(|&p| grammar_note(p, key)).unzip();
            let notes = NoteSequence::new(pitches, durations, Some(tempo)).expect("grammar notes are valid");
            MelodySong { phonemes, key, notes }
        })
        .collect()
}

// ---- style toy ----

#[derive(Clone, Debug, PartialEq)]
pub struct StyleToyConfig {
    pub phonemes: usize,
    pub tags: usize,
    pub length: usize,
    pub prompt_frames: usize,
    pub prompt_dim: usize,
    pub channels: usize,
}

impl Default for StyleToyConfig {
    fn default() -> Self {
        Self {
            phonemes: 16,
            tags: 4,
            length: 12,
            prompt_frames: 8,
            prompt_dim: 8,
            channels: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleSample {
    pub content: Vec<usize>,
    pub tag: usize,
    /// Reference style frames `[L × prompt_dim]`.
    pub prompt: Tensor<f64>,
    /// Phoneme-level style target `[P × channels]`.
    pub target: Tensor<f64>,
}

/// Content rows per phoneme and style rows per tag shared by every sample
/// of a dataset.
#[derive(Clone, Debug)]
pub struct StyleWorld {
    pub content: Tensor<f64>,
    pub style: Tensor<f64>,
    pub prompt_basis: Tensor<f64>,
}

impl StyleWorld {
    pub fn new(cfg: &StyleToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5717_e000);
        Self {
            content: Tensor::randn(&[cfg.phonemes, cfg.channels], &mut rng),
            style: Tensor::randn(&[cfg.tags, cfg.channels], &mut rng),
            prompt_basis: Tensor::randn(&[cfg.tags, cfg.prompt_dim], &mut rng),
        }
    }
}

pub fn gen_style_samples(seed: u64, n: usize, cfg: &StyleToyConfig) -> Result<Vec<StyleSample>> {
    if cfg.tags < 2 || cfg.phonemes == 0 || cfg.length == 0 || cfg.prompt_frames == 0 {
        return Err(Error::Config("style toy sizes must be positive with at least 2 tags".into()));
    }
    let world = StyleWorld::new(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let tag = rng.gen_range(0..cfg.tags);
        let content: Vec<usize> = (0..cfg.length).map(|_| rng.gen_range(0..cfg.phonemes)).collect();
        let mut prompt = Vec::with_capacity(cfg.prompt_frames * cfg.prompt_dim);
        for _ in 0..cfg.prompt_frames {
            for j in 0..cfg.prompt_dim {
                let e: f64 = rng.sample(StandardNormal);
                prompt.push(world.prompt_basis.at(tag, j) + 0.1 * e);
            }
        }
        let mut target = Vec::with_capacity(cfg.length * cfg.channels);
        for &p in &content {
            for c in 0..cfg.channels {
                target.push(world.content.at(p, c) + world.style.at(tag, c));
            }
        }
        out.push(StyleSample {
            content,
            tag,
            prompt: Tensor::new(&[cfg.prompt_frames, cfg.prompt_dim], prompt)?,
            target: Tensor::new(&[cfg.length, cfg.channels], target)?,
        });
    }
    Ok(out)
}

pub fn write_style_csv<W: Write>(samples: &[StyleSample], mut w: W) -> Result<()> {
    writeln!(w, "sample,tag,position,phoneme,target")?;
    for (i, s) in samples.iter().enumerate() {
        for (pos, &p) in s.content.iter().enumerate() {
            let row: Vec<String> = s.target.row(pos).iter().map(f64::to_string).collect();
            writeln!(w, "{i},{},{pos},{p},{}", s.tag, row.join(" "))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow2d_statistics() {
        let x = gen_flow2d(1, 10_000).unwrap();
        let mean_x = (0..x.rows()).map(|r| x.at(r, 0)).sum::<f64>() / 10_000.0;
        let mean_y = (0..x.rows()).map(|r| x.at(r, 1)).sum::<f64>() / 10_000.0;
        assert!(mean_x.abs() < 0.1 && mean_y.abs() < 0.1);
        for sign in [1.0, -1.0] {
            let xs: Vec<f64> = (0..x.rows()).map(|r| x.at(r, 0)).filter(|v| v * sign > 0.0).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!((sd - MODE_STD).abs() < 0.03, "sd {sd}");
        }
        assert_eq!(gen_flow2d(1, 500).unwrap(), gen_flow2d(1, 500).unwrap());
        assert!(gen_flow2d(1, 99).is_err());
    }

    #[test]
    fn toy_pairs_are_correlated_and_tagged() {
        let cfg = ToyConfig::default();
        let pairs = gen_toy_pairs(3, 200, &cfg).unwrap();
        for p in &pairs {
            assert!(pearson(p.vocal.data(), p.accomp.data()).unwrap() > 0.5);
        }
        let v = &pairs[0].vocal;
        let a0 = tag_transform(v, 0, cfg.tags);
        let a1 = tag_transform(v, 1, cfg.tags);
        let msd = a0.data().iter().zip(a1.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        assert!(msd > 0.0);
        assert_eq!(gen_toy_pairs(3, 5, &cfg).unwrap(), gen_toy_pairs(3, 5, &cfg).unwrap());
        assert!(gen_toy_pairs(3, 5, &ToyConfig { tags: 1, ..cfg }).is_err());
    }

    #[test]
    fn grammar_notes_are_in_key() {
        for song in gen_melody_songs(5, 50) {
            assert_eq!(song.phonemes.len(), song.notes.len());
            let scale = match song.key.mode {
                Mode::Major => MAJOR,
                Mode::Minor => MINOR,
            };
            for p in song.notes.pitches.iter().flatten() {
                let pc = (p + 12 - song.key.tonic % 12) % 12;
                assert!(scale.contains(&pc));
            }
            assert_eq!(song.notes.pitches.last().unwrap().unwrap() % 12, (GRAMMAR_BASE + song.key.tonic) % 12);
        }
        assert_eq!(gen_melody_songs(5, 3), gen_melody_songs(5, 3));
    }

    #[test]
    fn style_targets_follow_tag() {
        let cfg = StyleToyConfig::default();
        let s = gen_style_samples(2, 10, &cfg).unwrap();
        let w = StyleWorld::new(&cfg, 2);
        for x in &s {
            let p = x.content[0];
            assert_eq!(x.target.at(0, 0), w.content.at(p, 0) + w.style.at(x.tag, 0));
        }
    }
}
