//! Note sequences and their line-oriented text format.
//!
//! ```text
//! tempo=120
//! 60,1
//! R,0.5
//! 62,1.5
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of pitch classes predicted by the melody model: 128 MIDI pitches
/// plus the rest symbol.
pub const NUM_CLASSES: usize = 129;
/// Class index of a rest.
pub const REST_CLASS: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct NoteSequence {
    /// MIDI pitch per note, `None` for a rest.
    pub pitches: Vec<Option<u8>>,
    /// Durations in beats.
    pub durations: Vec<f64>,
    /// Beats per minute.
    pub tempo: Option<f64>,
}

impl NoteSequence {
    pub fn new(pitches: Vec<Option<u8>>, durations: Vec<f64>, tempo: Option<f64>) -> Result<Self> {
        if pitches.len() != durations.len() {
            return Err(Error::dim("note_sequence", &[pitches.len()], &[durations.len()]));
        }
        if let Some(p) = pitches.iter().flatten().find(|&&p| p > 127) {
            return Err(Error::Data(format!("pitch {p} outside MIDI range")));
        }
        if let Some(d) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::Data(format!("duration {d} must be positive")));
        }
        if let Some(t) = tempo {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Data(format!("tempo {t} must be positive")));
            }
        }
        Ok(Self {
            pitches,
            durations,
            tempo,
        })
    }

    /// Convenience constructor for sequences without rests.
    pub fn from_pitches(pitches: &[u8], durations: &[f64], tempo: Option<f64>) -> Result<Self> {
        Self::new(pitches.iter().map(|&p| Some(p)).collect(), durations.to_vec(), tempo)
    }

    pub fn len(&self) -> usize {
        self.pitches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitches.is_empty()
    }

    /// Total length in beats.
    pub fn beats(&self) -> f64 {
        self.durations.iter().sum()
    }

    /// Model class index per note.
    pub fn classes(&self) -> Vec<usize> {
        self.pitches.iter().map(|p| p.map_or(REST_CLASS, usize::from)).collect()
    }

    /// Inverse of [`NoteSequence::classes`].
    pub fn from_classes(classes: &[usize], durations: Vec<f64>, tempo: Option<f64>) -> Result<Self> {
        let pitches = classes
            .iter()
            .map(|&c| match c {
                REST_CLASS => Ok(None),
                c if c < REST_CLASS => Ok(Some(c as u8)),
                c => Err(Error::Bounds {
                    op: "from_classes",
                    index: c,
                    bound: NUM_CLASSES,
                }),
            })
            .collect::<Result<_>>()?;
        Self::new(pitches, durations, tempo)
    }

    /// Same notes shifted by `semitones`; fails if a pitch leaves the MIDI range.
    pub fn transposed(&self, semitones: i32) -> Result<Self> {
        let pitches = self
            .pitches
            .iter()
            .map(|p| match p {
                None => Ok(None),
                Some(p) => {
                    let q = i32::from(*p) + semitones;
                    u8::try_from(q)
                        .ok()
                        .filter(|&q| q <= 127)
                        .map(Some)
                        .ok_or_else(|| Error::Data(format!("transposed pitch {q} outside MIDI range")))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(pitches, self.durations.clone(), self.tempo)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tempo = None;
        let mut pitches = Vec::new();
        let mut durations = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("line {}: {what}: {line:?}", lineno + 1));
            if let Some(v) = line.strip_prefix("tempo=") {
                if tempo.is_some() || !pitches.is_empty() {
                    return Err(bad("tempo must be a single header line"));
                }
                tempo = Some(v.trim().parse::<f64>().map_err(|_| bad("bad tempo"))?);
                continue;
            }
            let (p, d) = line.split_once(',').ok_or_else(|| bad("expected pitch,duration"))?;
            let p = p.trim();
            let pitch = if p == "R" {
                None
            } else {
                Some(p.parse::<u8>().map_err(|_| bad("bad pitch"))?)
            };
            pitches.push(pitch);
            durations.push(d.trim().parse::<f64>().map_err(|_| bad("bad duration"))?);
        }
        Self::new(pitches, durations, tempo)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(t) = self.tempo {
            let _ = writeln!(s, "tempo={t}");
        }
        for (p, d) in self.pitches.iter().zip(&self.durations) {
            match p {
                Some(p) => {
                    let _ = writeln!(s, "{p},{d}");
                }
                None => {
                    let _ = writeln!(s, "R,{d}");
                }
            }
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_example() {
        let n = NoteSequence::parse("tempo=120\n60,1\nR,0.5\n\n62,1.5\n").unwrap();
        assert_eq!(n.tempo, Some(120.0));
        assert_eq!(n.pitches, vec![Some(60), None, Some(62)]);
        assert_eq!(n.durations, vec![1.0, 0.5, 1.5]);
        assert_eq!(n.classes(), vec![60, REST_CLASS, 62]);
    }

    #[test]
    fn parse_rejects_malformed() {
        for bad in ["60;1", "130,1", "60,0", "60,-1", "x,1", "60,1\ntempo=90", "tempo=fast"] {
            assert!(NoteSequence::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn invariants_enforced() {
        assert!(NoteSequence::new(vec![Some(60)], vec![], None).is_err());
        assert!(NoteSequence::new(vec![Some(60)], vec![1.0], Some(0.0)).is_err());
        assert!(NoteSequence::from_classes(&[129], vec![1.0], None).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(
            notes in proptest::collection::vec((proptest::option::of(0u8..128), 1u32..64), 0..20),
            tempo in proptest::option::of(40u32..240),
        ) {
            let seq = NoteSequence::new(
                notes.iter().map(|n| n.0).collect(),
                notes.iter().map(|n| n.1 as f64 / 8.0).collect(),
                tempo.map(f64::from),
            ).unwrap();
            prop_assert_eq!(NoteSequence::parse(&seq.to_text()).unwrap(), seq);
        }
    }
}
