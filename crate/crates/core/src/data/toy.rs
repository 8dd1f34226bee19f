//! Synthetic "speech": each symbol of a small alphabet is a 250 ms tone with
//! its own pitch and envelope, so gap content can only come from the
//! transcript.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, GapSpec, Utterance};
use crate::dsp::{hz_to_mel, mel_to_hz, AudioBuffer, DspConfig, MelAnalyzer, MelSpectrogram};
use crate::error::{Error, Result};
use crate::kv;

pub const MANIFEST: &str = "toy_corpus.cfg";

/// Distractor characters; never part of the symbol alphabet.
const DISTRACTORS: &[u8] = b"stuvwxyz0123456789";

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusConfig {
    pub n_symbols: usize,
    pub symbol_ms: f64,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub crossfade_ms: f64,
    /// Upper bound on the random distractor prefix and suffix lengths.
    pub distractor_max: usize,
    pub gain_min: f64,
    pub gain_max: f64,
    pub dsp: DspConfig,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            n_symbols: 8,
            symbol_ms: 250.0,
            min_symbols: 12,
            max_symbols: 12,
            crossfade_ms: 20.0,
            distractor_max: 0,
            gain_min: 0.3,
            gain_max: 1.0,
            dsp: DspConfig::toy(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub text: String,
    pub symbols: Vec<usize>,
    pub gain_seed: u64,
    pub audio: AudioBuffer,
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_symbols < 4 || self.n_symbols > 18 {
            return bad(format!("alphabet size must be in 4..=18, got {}", self.n_symbols));
        }
        if self.n_symbols > self.dsp.n_mels {
            return bad(format!("{} symbols need at least as many mel bands", self.n_symbols));
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return bad(format!("bad length range {}..={}", self.min_symbols, self.max_symbols));
        }
        if !(self.symbol_ms > 0.0) || !(self.crossfade_ms >= 0.0) || self.crossfade_ms > self.symbol_ms {
            return bad("symbol and crossfade durations must satisfy 0 <= crossfade <= symbol".into());
        }
        if !(self.gain_min > 0.0 && self.gain_min <= self.gain_max) {
            return bad(format!("bad gain range {}..{}", self.gain_min, self.gain_max));
        }
        self.dsp.validate()
    }

    pub fn symbol_char(&self, s: usize) -> char {
        (b'a' + s as u8) as char
    }

    pub fn symbol_index(&self, c: char) -> Option<usize> {
        let i = (c as u32).checked_sub('a' as u32)? as usize;
        (i < self.n_symbols).then_some(i)
    }

    pub fn symbol_samples(&self) -> usize {
        self.dsp.samples_for_seconds(self.symbol_ms / 1000.0)
    }

    /// Mel band whose centre the symbol's fundamental sits on.
    pub fn design_band(&self, s: usize) -> usize {
        ((s as f64 + 0.5) * self.dsp.n_mels as f64 / self.n_symbols as f64) as usize
    }

    pub fn fundamental(&self, s: usize) -> f64 {
        let (lo, hi) = (hz_to_mel(self.dsp.f_min), hz_to_mel(self.dsp.f_max));
        let b = self.design_band(s);
        mel_to_hz(lo + (hi - lo) * (b + 1) as f64 / (self.dsp.n_mels + 1) as f64)
    }

    fn envelope(&self, s: usize, u: f64) -> f64 {
        let level = 0.45 + 0.1 * ((s * 3) % self.n_symbols) as f64 / self.n_symbols as f64;
        let shape = (PI * u).sin().powi(1 + (s % 3) as i32);
        level * (0.6 + 0.4 * shape)
    }

    /// Symbols present in `text`, in order; other characters are distractors.
    pub fn symbols_of(&self, text: &str) -> Vec<usize> {
        text.chars().filter_map(|c| self.symbol_index(c)).collect()
    }

    /// Deterministic waveform for `symbols` at the gain drawn from `gain_seed`.
    pub fn render(&self, symbols: &[usize], gain_seed: u64) -> Result<AudioBuffer> {
        if let Some(s) = symbols.iter().find(|s| **s >= self.n_symbols) {
            return Err(Error::InvalidArgument(format!("symbol {s} outside alphabet")));
        }
        let sr = self.dsp.sample_rate as f64;
        let seg = self.symbol_samples();
        let xf = self.dsp.samples_for_seconds(self.crossfade_ms / 1000.0);
        let half = xf / 2;
        let len = seg * symbols.len();
        let mut out = vec![0.0; len];
        let gain = {
            let mut rng = ChaCha8Rng::seed_from_u64(gain_seed);
            (rng.random_range(self.gain_min.ln()..=self.gain_max.ln())).exp()
        };
        for (j, &s) in symbols.iter().enumerate() {
            let f0 = self.fundamental(s);
            let span = seg + xf;
            let origin = (j * seg) as isize - half as isize;
            for i in 0..span {
                let n = origin + i as isize;
                if n < 0 || n as usize >= len {
                    continue;
                }
                let fade = if xf == 0 {
                    1.0
                } else if i < xf {
                    0.5 - 0.5 * (PI * i as f64 / xf as f64).cos()
                } else if i >= span - xf {
                    0.5 - 0.5 * (PI * (span - i) as f64 / xf as f64).cos()
                } else {
                    1.0
                };
                let t = i as f64 / sr;
                let u = (i as f64 / span as f64).clamp(0.0, 1.0);
                let mut tone = (2.0 * PI * f0 * t).sin();
                if 2.0 * f0 < 0.45 * sr {
                    tone += 0.2 * (4.0 * PI * f0 * t).sin();
                }
                out[n as usize] += gain * fade * self.envelope(s, u) * tone / 1.2;
            }
        }
        AudioBuffer::new(out, self.dsp.sample_rate)
    }

    pub fn generate(&self, size: usize, rng: &mut impl Rng) -> Result<Vec<ToyUtterance>> {
        self.validate()?;
        (0..size)
            .map(|i| {
                let n = rng.random_range(self.min_symbols..=self.max_symbols);
                let symbols: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.n_symbols)).collect();
                let mut text = String::new();
                self.push_distractors(rng, &mut text);
                text.extend(symbols.iter().map(|s| self.symbol_char(*s)));
                self.push_distractors(rng, &mut text);
                let gain_seed = rng.random();
                Ok(ToyUtterance {
                    id: format!("toy{i:05}"),
                    audio: self.render(&symbols, gain_seed)?,
                    text,
                    symbols,
                    gain_seed,
                })
            })
            .collect()
    }

    fn push_distractors(&self, rng: &mut impl Rng, text: &mut String) {
        for _ in 0..rng.random_range(0..=self.distractor_max) {
            text.push(DISTRACTORS[rng.random_range(0..DISTRACTORS.len())] as char);
        }
    }

    /// Dominant band of each symbol, measured by analysing it in isolation.
    pub fn reference_bands(&self, analyzer: &MelAnalyzer) -> Result<Vec<usize>> {
        (0..self.n_symbols)
            .map(|s| {
                let audio = self.render(&[s; 4], 0)?;
                let mel = analyzer.analyze(&audio)?;
                let frames: Vec<usize> = (0..mel.n_frames).collect();
                Ok(dominant_band(&mel, &frames))
            })
            .collect()
    }

    pub fn write_manifest(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST);
        let mut s = String::new();
        let _ = writeln!(s, "n_symbols = {}", self.n_symbols);
        let _ = writeln!(s, "symbol_ms = {}", self.symbol_ms);
        let _ = writeln!(s, "min_symbols = {}", self.min_symbols);
        let _ = writeln!(s, "max_symbols = {}", self.max_symbols);
        let _ = writeln!(s, "crossfade_ms = {}", self.crossfade_ms);
        let _ = writeln!(s, "distractor_max = {}", self.distractor_max);
        let _ = writeln!(s, "gain_min = {}", self.gain_min);
        let _ = writeln!(s, "gain_max = {}", self.gain_max);
        fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }

    /// Reads the manifest in `dir`, if present. DSP settings come from `dsp`.
    pub fn read_manifest(dir: impl AsRef<Path>, dsp: &DspConfig) -> Result<Option<Self>> {
        let path = dir.as_ref().join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut cfg = ToyCorpusConfig {
            dsp: dsp.clone(),
            ..Default::default()
        };
        for e in kv::parse(&text)? {
            match e.key.as_str() {
                "n_symbols" => cfg.n_symbols = e.parse()?,
                "symbol_ms" => cfg.symbol_ms = e.parse()?,
                "min_symbols" => cfg.min_symbols = e.parse()?,
                "max_symbols" => cfg.max_symbols = e.parse()?,
                "crossfade_ms" => cfg.crossfade_ms = e.parse()?,
                "distractor_max" => cfg.distractor_max = e.parse()?,
                "gain_min" => cfg.gain_min = e.parse()?,
                "gain_max" => cfg.gain_max = e.parse()?,
                _ => return Err(e.unknown()),
            }
        }
        cfg.validate()?;
        Ok(Some(cfg))
    }
}

pub fn to_dataset(utts: &[ToyUtterance]) -> Dataset {
    Dataset {
        utterances: utts
            .iter()
            .map(|u| Utterance {
                id: u.id.clone(),
                audio: u.audio.clone(),
                text: u.text.clone(),
            })
            .collect(),
    }
}

/// Argmax band of the mean over `frames`.
pub fn dominant_band(mel: &MelSpectrogram, frames: &[usize]) -> usize {
    let mut acc = vec![0.0; mel.n_mels];
    for &t in frames {
        for (a, v) in acc.iter_mut().zip(mel.frame(t)) {
            *a += v;
        }
    }
    (0..mel.n_mels)
        .max_by(|i, j| acc[*i].total_cmp(&acc[*j]).then(j.cmp(i)))
        .unwrap_or(0)
}

/// Index into `reference` of the band with the largest summed value.
pub fn classify(mel: &MelSpectrogram, frames: &[usize], reference: &[usize]) -> usize {
    let energy = |b: usize| frames.iter().map(|&t| mel.at(t, b)).sum::<f64>();
    let mut best = 0;
    for (s, &b) in reference.iter().enumerate().skip(1) {
        if energy(b) > energy(reference[best]) {
            best = s;
        }
    }
    best
}

/// Symbol accuracy inside the gap.
///
/// Each scored segment is classified as the symbol whose reference band
/// carries the most energy, ties going to the lower symbol.
///
/// Segment `j` covers samples `[j·S, (j+1)·S)` of the uncropped utterance.
/// Only frames centred at least 50 ms inside a segment and inside the gap
/// vote; segments with no such frame are not scored. Returns
/// `(correct, scored)`.
pub fn gap_symbol_hits(
    cfg: &ToyCorpusConfig,
    reference: &[usize],
    predicted: &MelSpectrogram,
    gap: &GapSpec,
    crop_offset: usize,
    text: &str,
) -> (usize, usize) {
    let symbols = cfg.symbols_of(text);
    let seg = cfg.symbol_samples();
    let margin = cfg.dsp.samples_for_seconds(0.05);
    let (mut hits, mut scored) = (0, 0);
    for (j, &s) in symbols.iter().enumerate() {
        let (lo, hi) = (j * seg + margin, (j + 1) * seg - margin.min(seg));
        let frames: Vec<usize> = (gap.start_frame..gap.end_frame().min(predicted.n_frames))
            .filter(|&t| {
                let centre = cfg.dsp.frame_start(t) + (cfg.dsp.frame_len / 2) as isize + crop_offset as isize;
                centre >= lo as isize && centre < hi as isize
            })
            .collect();
        if frames.is_empty() {
            continue;
        }
        scored += 1;
        if classify(predicted, &frames, reference) == s {
            hits += 1;
        }
    }
    (hits, scored)
}
