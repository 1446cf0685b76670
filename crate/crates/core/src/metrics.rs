//! Objective melody and pitch-track metrics: key accuracy against
//! Krumhansl–Kessler profiles, pitch and duration statistics, histogram
//! overlap, DTW melody distance, and F0 frame error.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::notes::NoteSequence;

const PROFILE_DATA: &str = include_str!("../data/key_profiles.txt");

pub const PITCH_BINS: usize = 128;
pub const DURATION_BINS: usize = 32;
pub const DURATION_RANGE: f64 = 4.0;
/// Relative pitch deviation beyond which a voiced frame counts as an error.
pub const FFE_THRESHOLD: f64 = 0.2;

const NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Major,
    Minor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Key {
    /// Pitch class of the tonic, 0 = C.
    pub tonic: u8,
    pub mode: Mode,
}

impl Key {
    pub fn new(tonic: u8, mode: Mode) -> Self {
        Self { tonic: tonic % 12, mode }
    }

    /// All 24 keys: the 12 majors then the 12 minors.
    pub fn all() -> impl Iterator<Item = Key> {
        [Mode::Major, Mode::Minor]
            .into_iter()
            .flat_map(|m| (0..12).map(move |t| Key::new(t, m)))
    }

    /// Index in [`Key::all`] order.
    pub fn index(self) -> usize {
        self.tonic as usize + if self.mode == Mode::Minor { 12 } else { 0 }
    }

    pub fn from_index(i: usize) -> Self {
        Key::new((i % 12) as u8, if i >= 12 { Mode::Minor } else { Mode::Major })
    }

    pub fn transposed(self, semitones: i32) -> Self {
        Key::new((i32::from(self.tonic) + semitones).rem_euclid(12) as u8, self.mode)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let suffix = if self.mode == Mode::Minor { "m" } else { "" };
        write!(f, "{}{}", NAMES[self.tonic as usize], suffix)
    }
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, mode) = match s.strip_suffix('m') {
            Some(n) => (n, Mode::Minor),
            None => (s, Mode::Major),
        };
        NAMES
            .iter()
            .position(|&n| n == name)
            .map(|t| Key::new(t as u8, mode))
            .ok_or_else(|| Error::Format(format!("unknown key {s:?}")))
    }
}

/// Tonic-first major and minor profiles; other keys are rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyProfiles {
    pub major: [f64; 12],
    pub minor: [f64; 12],
}

impl KeyProfiles {
    pub fn parse(text: &str) -> Result<Self> {
        let mut major = None;
        let mut minor = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let mut parts = line.split_whitespace();
            let label = parts.next().unwrap_or_default();
            let vals = parts
                .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad profile value {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let arr: [f64; 12] = vals
                .try_into()
                .map_err(|_| Error::Format(format!("profile {label:?} needs 12 values")))?;
            match label {
                "major" => major = Some(arr),
                "minor" => minor = Some(arr),
                other => return Err(Error::Format(format!("unknown profile {other:?}"))),
            }
        }
        match (major, minor) {
            (Some(major), Some(minor)) => Ok(Self { major, minor }),
            _ => Err(Error::Format("profile table needs major and minor rows".into())),
        }
    }

    /// The bundled Krumhansl–Kessler table.
    pub fn standard() -> Self {
        Self::parse(PROFILE_DATA).expect("bundled profile table is well formed")
    }

    /// Profile of `key` indexed by absolute pitch class.
    pub fn profile(&self, key: Key) -> [f64; 12] {
        let base = match key.mode {
            Mode::Major => &self.major,
            Mode::Minor => &self.minor,
        };
        let mut out = [0.0; 12];
        for (pc, o) in out.iter_mut().enumerate() {
            *o = base[(pc + 12 - key.tonic as usize) % 12];
        }
        out
    }
}

/// Duration-weighted pitch-class histogram; rests are ignored.
pub fn pitch_class_histogram(notes: &NoteSequence) -> [f64; 12] {
    let mut h = [0.0; 12];
    for (p, d) in notes.pitches.iter().zip(&notes.durations) {
        if let Some(p) = p {
            h[(*p % 12) as usize] += d;
        }
    }
    h
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidMetric("correlation of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Pearson correlation between the note histogram and the key's profile.
pub fn key_correlation(notes: &NoteSequence, key: Key, profiles: &KeyProfiles) -> Result<f64> {
    let h = pitch_class_histogram(notes);
    if h.iter().all(|&x| x == h[0]) {
        return Err(Error::InvalidMetric("pitch-class histogram is constant".into()));
    }
    pearson(&h, &profiles.profile(key))
}

/// Key with the highest profile correlation (Krumhansl–Schmuckler).
pub fn estimate_key(notes: &NoteSequence, profiles: &KeyProfiles) -> Result<Key> {
    let mut best = None;
    for k in Key::all() {
        let r = key_correlation(notes, k, profiles)?;
        if best.is_none_or(|(_, br)| r > br) {
            best = Some((k, r));
        }
    }
    Ok(best.expect("24 keys").0)
}

/// `r(gen, key) / r(gt, key)`.
pub fn key_accuracy(gen: &NoteSequence, gt: &NoteSequence, gt_key: Key, profiles: &KeyProfiles) -> Result<f64> {
    let r = key_correlation(gt, gt_key, profiles)?;
    if r == 0.0 {
        return Err(Error::InvalidMetric("ground truth has zero key correlation".into()));
    }
    Ok(key_correlation(gen, gt_key, profiles)? / r)
}

fn mean_pitch(notes: &NoteSequence) -> Result<f64> {
    let voiced: Vec<f64> = notes.pitches.iter().flatten().map(|&p| f64::from(p)).collect();
    if voiced.is_empty() {
        return Err(Error::Data("sequence has no pitched notes".into()));
    }
    Ok(voiced.iter().sum::<f64>() / voiced.len() as f64)
}

fn seconds(notes: &NoteSequence) -> Result<f64> {
    let tempo = notes
        .tempo
        .ok_or_else(|| Error::Config("tempo is required to convert beats to seconds".into()))?;
    Ok(notes.beats() * 60.0 / tempo)
}

/// Absolute differences of mean pitch and of total duration in seconds.
pub fn apd_td(gen: &NoteSequence, gt: &NoteSequence) -> Result<(f64, f64)> {
    let td = (seconds(gen)? - seconds(gt)?).abs();
    let apd = (mean_pitch(gen)? - mean_pitch(gt)?).abs();
    Ok((apd, td))
}

/// `Σ_b min(p_b, q_b)`.
pub fn overlap_area(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("overlap_area", &[p.len()], &[q.len()]));
    }
    Ok(p.iter().zip(q).map(|(a, b)| a.min(*b)).sum())
}

/// Overlap divided by the larger histogram mass, which absorbs the rounding
/// left over from normalising, so identical histograms give exactly 1.
fn mass_overlap(p: &[f64], q: &[f64]) -> Result<f64> {
    let mass = p.iter().sum::<f64>().max(q.iter().sum());
    Ok(overlap_area(p, q)? / mass)
}

fn normalized(counts: Vec<f64>) -> Option<Vec<f64>> {
    let total: f64 = counts.iter().sum();
    (total > 0.0).then(|| counts.into_iter().map(|c| c / total).collect())
}

/// Frequency histogram of pitched notes over the 128 MIDI bins.
pub fn pitch_histogram(notes: &NoteSequence) -> Option<Vec<f64>> {
    let mut h = vec![0.0; PITCH_BINS];
    for p in notes.pitches.iter().flatten() {
        h[*p as usize] += 1.0;
    }
    normalized(h)
}

/// Frequency histogram of pitched-note durations, 32 bins over [0, 4) beats
/// with longer notes in the last bin.
pub fn duration_histogram(notes: &NoteSequence) -> Option<Vec<f64>> {
    let mut h = vec![0.0; DURATION_BINS];
    let width = DURATION_RANGE / DURATION_BINS as f64;
    for (p, d) in notes.pitches.iter().zip(&notes.durations) {
        if p.is_some() {
            h[((d / width) as usize).min(DURATION_BINS - 1)] += 1.0;
        }
    }
    normalized(h)
}

/// Mean pitch and duration histogram overlap over song pairs. Pairs where
/// either side has no pitched notes are skipped with a warning.
pub fn dist_similarity(gen: &[NoteSequence], gt: &[NoteSequence]) -> Result<(f64, f64)> {
    if gen.len() != gt.len() {
        return Err(Error::dim("dist_similarity", &[gen.len()], &[gt.len()]));
    }
    let (mut pd, mut dd, mut n) = (0.0, 0.0, 0usize);
    for (i, (g, t)) in gen.iter().zip(gt).enumerate() {
        match (pitch_histogram(g), pitch_histogram(t), duration_histogram(g), duration_histogram(t)) {
            (Some(pg), Some(pt), Some(dg), Some(dt)) => {
                pd += mass_overlap(&pg, &pt)?;
                dd += mass_overlap(&dg, &dt)?;
                n += 1;
            }
            _ => log::warn!("song {i}: no pitched notes, excluded from PD/DD"),
        }
    }
    if n == 0 {
        return Err(Error::InvalidMetric("no song has pitched notes".into()));
    }
    Ok((pd / n as f64, dd / n as f64))
}

/// Pitch per 1/16 note, each note lasting `max(1, round(4·beats))` steps.
/// Rests are skipped.
pub fn sixteenth_series(notes: &NoteSequence) -> Vec<i64> {
    let mut out = Vec::new();
    for (p, d) in notes.pitches.iter().zip(&notes.durations) {
        if let Some(p) = p {
            let steps = ((d * 4.0).round() as usize).max(1);
            out.extend(std::iter::repeat_n(i64::from(*p), steps));
        }
    }
    out
}

/// Series minus its mean. Computed as `(n·x − Σx) / n` so a transposed
/// copy centres to identical values.
pub fn mean_centered(series: &[i64]) -> Vec<f64> {
    let n = series.len() as i64;
    let s: i64 = series.iter().sum();
    series.iter().map(|&x| (n * x - s) as f64 / n as f64).collect()
}

/// DTW with absolute-difference cost and steps (1,0), (0,1), (1,1).
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("dtw of an empty series".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, &x) in a.iter().enumerate() {
        for j in 0..m {
            let cost = (x - b[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = prev[j];
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            cur[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// DTW distance between mean-centred 1/16-note pitch series.
pub fn melody_distance(gen: &NoteSequence, gt: &NoteSequence) -> Result<f64> {
    let a = sixteenth_series(gen);
    let b = sixteenth_series(gt);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("melody has no pitched notes".into()));
    }
    dtw(&mean_centered(&a), &mean_centered(&b))
}

/// Fraction of frames with a voicing mismatch or, when both are voiced, a
/// deviation above 20% of the reference pitch. Unvoiced frames are `0`.
pub fn f0_frame_error(gen: &[f64], gt: &[f64]) -> Result<f64> {
    if gen.len() != gt.len() {
        return Err(Error::dim("f0_frame_error", &[gen.len()], &[gt.len()]));
    }
    if gt.is_empty() {
        return Err(Error::Data("empty F0 track".into()));
    }
    let errors = gen
        .iter()
        .zip(gt)
        .filter(|(&g, &t)| match (g > 0.0, t > 0.0) {
            (true, true) => (g - t).abs() > FFE_THRESHOLD * t,
            (a, b) => a != b,
        })
        .count();
    Ok(errors as f64 / gt.len() as f64)
}

/// Reads an F0 track from `frame_index,hz` lines; a non-numeric first line is
/// treated as a header. Frames must be listed in order from 0.
pub fn parse_f0_csv(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("line {}: expected frame_index,hz: {line:?}", lineno + 1));
        let (i, hz) = line.split_once(',').ok_or_else(bad)?;
        let Ok(i) = i.trim().parse::<usize>() else {
            if lineno == 0 {
                continue;
            }
            return Err(bad());
        };
        if i != out.len() {
            return Err(Error::Format(format!("line {}: frame {i} out of order", lineno + 1)));
        }
        let hz: f64 = hz.trim().parse().map_err(|_| bad())?;
        if !(hz.is_finite() && hz >= 0.0) {
            return Err(bad());
        }
        out.push(hz);
    }
    Ok(out)
}

pub fn read_f0_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    parse_f0_csv(&std::fs::read_to_string(path)?)
}

/// Per-song values; KA is `None` when undefined for that song.
#[derive(Clone, Debug, PartialEq)]
pub struct SongMetrics {
    pub ka: Option<f64>,
    pub apd: f64,
    pub td: f64,
    pub pd: f64,
    pub dd: f64,
    pub md: f64,
}

/// Table columns in reporting order.
pub const REPORT_COLUMNS: [&str; 6] = ["KA", "APD", "TD", "PD", "DD", "MD"];

#[derive(Clone, Debug, PartialEq)]
pub struct MelodyReport {
    pub ka: f64,
    pub apd: f64,
    pub td: f64,
    pub pd: f64,
    pub dd: f64,
    pub md: f64,
}

impl MelodyReport {
    pub fn values(&self) -> [f64; 6] {
        [self.ka, self.apd, self.td, self.pd, self.dd, self.md]
    }

    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Metrics of one generated song against its reference. With `gt_key`
/// unset the reference key is estimated from the reference notes.
pub fn evaluate_song(
    gen: &NoteSequence,
    gt: &NoteSequence,
    gt_key: Option<Key>,
    profiles: &KeyProfiles,
) -> Result<SongMetrics> {
    let key = match gt_key {
        Some(k) => Some(k),
        None => estimate_key(gt, profiles).ok(),
    };
    let ka = key.and_then(|k| match key_accuracy(gen, gt, k, profiles) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("key accuracy undefined: {e}");
            None
        }
    });
    let (apd, td) = apd_td(gen, gt)?;
    let (pd, dd) = dist_similarity(std::slice::from_ref(gen), std::slice::from_ref(gt))?;
    let md = melody_distance(gen, gt)?;
    Ok(SongMetrics { ka, apd, td, pd, dd, md })
}

/// Averages per-song metrics; KA averages over songs where it is defined.
pub fn summarize(songs: &[SongMetrics]) -> Result<MelodyReport> {
    if songs.is_empty() {
        return Err(Error::InvalidMetric("no songs to summarize".into()));
    }
    let n = songs.len() as f64;
    let kas: Vec<f64> = songs.iter().filter_map(|s| s.ka).collect();
    let ka = if kas.is_empty() {
        f64::NAN
    } else {
        kas.iter().sum::<f64>() / kas.len() as f64
    };
    let avg = |f: fn(&SongMetrics) -> f64| songs.iter().map(f).sum::<f64>() / n;
    Ok(MelodyReport {
        ka,
        apd: avg(|s| s.apd),
        td: avg(|s| s.td),
        pd: avg(|s| s.pd),
        dd: avg(|s| s.dd),
        md: avg(|s| s.md),
    })
}
