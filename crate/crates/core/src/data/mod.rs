//! Training-example construction: crops, gaps, time-domain masking and
//! transcript encoding.

mod dataset;
pub mod toy;

pub use dataset::{trim_silence, Dataset, Utterance};

use rand::Rng;

use crate::dsp::{AudioBuffer, DspConfig, MelAnalyzer, MelSpectrogram};
use crate::error::{Error, Result};

/// Byte id of the ASCII space used for padding.
pub const PAD_BYTE: u8 = b' ';

/// A contiguous gap, in frames and in the matching sample span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GapSpec {
    pub start_frame: usize,
    pub len_frames: usize,
    pub start_sample: usize,
    pub len_samples: usize,
}

impl GapSpec {
    pub fn from_frames(start_frame: usize, len_frames: usize, hop: usize) -> Self {
        GapSpec {
            start_frame,
            len_frames,
            start_sample: start_frame * hop,
            len_samples: len_frames * hop,
        }
    }

    /// Gap over an arbitrary sample span; the frame span covers every frame
    /// whose hop slot overlaps it.
    pub fn from_samples(start_sample: usize, len_samples: usize, hop: usize) -> Self {
        let start_frame = start_sample / hop;
        let end_frame = if len_samples == 0 {
            start_frame
        } else {
            (start_sample + len_samples).div_ceil(hop)
        };
        GapSpec {
            start_frame,
            len_frames: end_frame - start_frame,
            start_sample,
            len_samples,
        }
    }

    pub fn end_frame(&self) -> usize {
        self.start_frame + self.len_frames
    }

    pub fn end_sample(&self) -> usize {
        self.start_sample + self.len_samples
    }

    pub fn contains_frame(&self, t: usize) -> bool {
        t >= self.start_frame && t < self.end_frame()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GapMode {
    /// Length uniform over `1..=max_frames`, start uniform.
    Train,
    /// Length uniform over `[eval_min, eval_max]` with `context` frames kept
    /// on both sides.
    Eval,
}

/// Gap limits expressed in frames for one hop size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GapPolicy {
    pub max_frames: usize,
    pub eval_min_frames: usize,
    pub eval_max_frames: usize,
    pub context_frames: usize,
    pub hop: usize,
}

impl GapPolicy {
    /// At most 1 s in training; 750–1000 ms with ≥ 300 ms context at evaluation.
    pub fn for_dsp(cfg: &DspConfig) -> Self {
        let hop_ms = cfg.hop_seconds() * 1000.0;
        GapPolicy {
            max_frames: cfg.frames_for_ms(1000.0),
            eval_min_frames: (750.0 / hop_ms - 1e-9).ceil() as usize,
            eval_max_frames: cfg.frames_for_ms(1000.0),
            context_frames: (300.0 / hop_ms - 1e-9).ceil() as usize,
            hop: cfg.hop_len,
        }
    }

    pub fn sample(&self, n_frames: usize, mode: GapMode, rng: &mut impl Rng) -> Result<GapSpec> {
        match mode {
            GapMode::Train => {
                if n_frames == 0 || self.max_frames == 0 {
                    return Err(Error::ImpossibleGap(format!("{n_frames} frames")));
                }
                let len = rng.random_range(1..=self.max_frames.min(n_frames));
                let start = rng.random_range(0..=n_frames - len);
                Ok(GapSpec::from_frames(start, len, self.hop))
            }
            GapMode::Eval => {
                let room = n_frames.saturating_sub(2 * self.context_frames);
                if room < self.eval_min_frames {
                    return Err(Error::ImpossibleGap(format!(
                        "{n_frames} frames cannot hold a {}-frame gap with {} context frames per side",
                        self.eval_min_frames, self.context_frames
                    )));
                }
                let len = rng.random_range(self.eval_min_frames..=self.eval_max_frames.min(room));
                let start = rng.random_range(self.context_frames..=n_frames - self.context_frames - len);
                Ok(GapSpec::from_frames(start, len, self.hop))
            }
        }
    }
}

/// Contiguous crop of exactly `seconds`, start drawn uniformly.
pub fn crop_random(audio: &AudioBuffer, seconds: f64, rng: &mut impl Rng) -> Result<(AudioBuffer, usize)> {
    let need = (seconds * audio.sample_rate as f64).round() as usize;
    if audio.len() < need {
        return Err(Error::AudioTooShort {
            have: audio.len(),
            need,
        });
    }
    let start = rng.random_range(0..=audio.len() - need);
    Ok((
        AudioBuffer {
            samples: audio.samples[start..start + need].to_vec(),
            sample_rate: audio.sample_rate,
        },
        start,
    ))
}

/// Zeroes `[start_sample, start_sample + len_samples)`.
pub fn apply_mask(audio: &AudioBuffer, gap: &GapSpec) -> Result<AudioBuffer> {
    if gap.end_sample() > audio.len() {
        return Err(Error::InvalidArgument(format!(
            "gap {}..{} outside audio of {} samples",
            gap.start_sample,
            gap.end_sample(),
            audio.len()
        )));
    }
    let mut out = audio.clone();
    out.samples[gap.start_sample..gap.end_sample()].fill(0.0);
    Ok(out)
}

/// Transcript bytes padded with spaces to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEncoding {
    pub byte_ids: Vec<u8>,
    pub original_length: usize,
}

impl TranscriptEncoding {
    pub fn encode(text: &str, max_len: usize) -> Result<Self> {
        let bytes = text.as_bytes();
        if bytes.len() > max_len {
            return Err(Error::TranscriptTooLong {
                len: bytes.len(),
                max: max_len,
            });
        }
        let mut byte_ids = bytes.to_vec();
        byte_ids.resize(max_len, PAD_BYTE);
        Ok(TranscriptEncoding {
            byte_ids,
            original_length: bytes.len(),
        })
    }

    pub fn decode(&self) -> String {
        String::from_utf8_lossy(&self.byte_ids[..self.original_length]).into_owned()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.byte_ids.iter().map(|b| *b as usize).collect()
    }
}

/// `(X', T) → X` with the gap that produced `X'`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub target_mel: MelSpectrogram,
    pub masked_mel: MelSpectrogram,
    pub transcript: TranscriptEncoding,
    pub gap: GapSpec,
}

impl TrainingExample {
    /// Masks `audio` in the time domain and analyses both versions.
    pub fn build(
        analyzer: &MelAnalyzer,
        audio: &AudioBuffer,
        text: &str,
        gap: GapSpec,
        max_text: usize,
    ) -> Result<Self> {
        let masked = apply_mask(audio, &gap)?;
        Ok(TrainingExample {
            target_mel: analyzer.analyze(audio)?,
            masked_mel: analyzer.analyze(&masked)?,
            transcript: TranscriptEncoding::encode(text, max_text)?,
            gap,
        })
    }
}

/// Frames whose analysis window reads no sample of the gap.
pub fn frames_outside_gap_influence(cfg: &DspConfig, gap: &GapSpec, len: usize) -> Vec<usize> {
    (0..cfg.num_frames(len))
        .filter(|&t| {
            if gap.len_samples == 0 {
                return true;
            }
            let start = cfg.frame_start(t);
            (0..cfg.frame_len as isize).all(|i| {
                let s = crate::dsp::reflect(start + i, len);
                s < gap.start_sample || s >= gap.end_sample()
            })
        })
        .collect()
}
