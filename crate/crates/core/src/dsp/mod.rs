//! Log-mel analysis, Griffin-Lim resynthesis and WAV I/O.

mod griffin_lim;
mod mel;
mod stft;
pub mod wav;

pub use griffin_lim::GriffinLimTrace;
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz};
pub use stft::{hann_window, Spectrogram};

use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        AudioBuffer {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Multiplies by `gain` and clips to `[-1, 1]`.
pub fn amplitude_scale(audio: &AudioBuffer, gain: f64) -> Result<AudioBuffer> {
    if !(gain > 0.0) || !gain.is_finite() {
        return Err(Error::InvalidArgument(format!("gain must be positive, got {gain}")));
    }
    Ok(AudioBuffer {
        samples: audio
            .samples
            .iter()
            .map(|s| (s * gain).clamp(-1.0, 1.0))
            .collect(),
        sample_rate: audio.sample_rate,
    })
}

/// How frames are laid over the signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Framing {
    /// Reflect-padded by half a frame; frame `t` is centred at
    /// `t·hop + hop/2`, giving `len / hop` frames.
    Centered,
    /// No padding; `(len − frame_len)/hop + 1` frames.
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub hop_len: usize,
    pub frame_len: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub floor_epsilon: f64,
    pub framing: Framing,
}

impl DspConfig {
    /// 24 kHz, 12.5 ms hop, 40 ms frame, 64 mel bands.
    pub fn paper() -> Self {
        DspConfig {
            sample_rate: 24_000,
            hop_len: 300,
            frame_len: 960,
            fft_size: 1024,
            n_mels: 64,
            f_min: 20.0,
            f_max: 12_000.0,
            floor_epsilon: 1e-5,
            framing: Framing::Centered,
        }
    }

    /// 8 kHz with a 62.5 ms hop: three seconds is 48 frames of 16 bands.
    pub fn toy() -> Self {
        DspConfig {
            sample_rate: 8_000,
            hop_len: 500,
            frame_len: 1600,
            fft_size: 2048,
            n_mels: 16,
            f_min: 20.0,
            f_max: 4_000.0,
            floor_epsilon: 1e-5,
            framing: Framing::Centered,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.sample_rate == 0 || self.hop_len == 0 || self.frame_len == 0 || self.n_mels == 0 {
            return bad("sample_rate, hop, frame and band counts must be positive".into());
        }
        if self.frame_len > self.fft_size {
            return bad(format!("frame_len {} exceeds fft_size {}", self.frame_len, self.fft_size));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad(format!("mel range {}..{} Hz invalid for Nyquist {nyquist}", self.f_min, self.f_max));
        }
        if !(self.floor_epsilon > 0.0) {
            return bad("floor_epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_len as f64 / self.sample_rate as f64
    }

    pub fn frame_seconds(&self) -> f64 {
        self.frame_len as f64 / self.sample_rate as f64
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn log_floor(&self) -> f64 {
        self.floor_epsilon.ln()
    }

    /// Frame count for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        match self.framing {
            Framing::Centered => len / self.hop_len,
            Framing::Valid => {
                if len < self.frame_len {
                    0
                } else {
                    (len - self.frame_len) / self.hop_len + 1
                }
            }
        }
    }

    /// Signed index of the first sample of frame `t` (may be negative when
    /// centred).
    pub fn frame_start(&self, t: usize) -> isize {
        match self.framing {
            Framing::Centered => {
                (t * self.hop_len + self.hop_len / 2) as isize - (self.frame_len / 2) as isize
            }
            Framing::Valid => (t * self.hop_len) as isize,
        }
    }

    /// Smallest and largest signal index read by frame `t`, after
    /// reflection, for a signal of `len` samples.
    pub fn frame_support(&self, t: usize, len: usize) -> (usize, usize) {
        let start = self.frame_start(t);
        let mut lo = usize::MAX;
        let mut hi = 0;
        for i in 0..self.frame_len as isize {
            let s = reflect(start + i, len);
            lo = lo.min(s);
            hi = hi.max(s);
        }
        (lo, hi)
    }

    pub fn samples_for_seconds(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate as f64).round() as usize
    }

    /// Whole frames spanning `ms` milliseconds (rounded down).
    pub fn frames_for_ms(&self, ms: f64) -> usize {
        (ms / 1000.0 / self.hop_seconds() + 1e-9).floor() as usize
    }
}

/// Reflect `i` into `[0, len)` without repeating the edge sample.
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// `n_frames × n_mels` log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub values: Vec<f64>,
    pub hop_seconds: f64,
    pub frame_seconds: f64,
}

impl MelSpectrogram {
    pub fn at(&self, frame: usize, band: usize) -> f64 {
        self.values[frame * self.n_mels + band]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n_frames, self.n_mels], self.values.clone()).expect("mel shape")
    }

    pub fn from_tensor(t: &Tensor, hop_seconds: f64, frame_seconds: f64) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::invalid_shape("mel", format!("expected rank 2, got {:?}", t.shape())));
        }
        Ok(MelSpectrogram {
            n_frames: t.shape()[0],
            n_mels: t.shape()[1],
            values: t.data().to_vec(),
            hop_seconds,
            frame_seconds,
        })
    }

    /// Mean absolute difference over the whole grid.
    pub fn l1_distance(&self, other: &MelSpectrogram) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.values.len() as f64
    }
}

/// STFT, mel projection and inversion for one [`DspConfig`].
#[derive(Clone)]
pub struct MelAnalyzer {
    config: DspConfig,
    window: Vec<f64>,
    filterbank: Vec<f64>,
    /// Nonzero bin range of each filter.
    spans: Vec<(usize, usize)>,
    pinv: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelAnalyzer").field("config", &self.config).finish()
    }
}

impl MelAnalyzer {
    pub fn new(config: DspConfig) -> Result<Self> {
        config.validate()?;
        let filterbank = mel_filterbank(&config);
        let n_bins = config.n_bins();
        let fb = DMatrix::from_row_slice(config.n_mels, n_bins, &filterbank);
        let pinv = fb
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InvalidArgument(format!("mel pseudo-inverse: {e}")))?;
        // nalgebra is column-major; store row-major [n_bins × n_mels].
        let mut pinv_rows = vec![0.0; n_bins * config.n_mels];
        for r in 0..n_bins {
            for c in 0..config.n_mels {
                pinv_rows[r * config.n_mels + c] = pinv[(r, c)];
            }
        }
        let spans = filterbank
            .chunks(n_bins)
            .map(|row| {
                let lo = row.iter().position(|&w| w != 0.0).unwrap_or(0);
                let hi = row.iter().rposition(|&w| w != 0.0).map_or(lo, |i| i + 1);
                (lo, hi)
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(config.fft_size);
        let ifft = planner.plan_fft_inverse(config.fft_size);
        Ok(MelAnalyzer {
            window: hann_window(config.frame_len),
            config,
            filterbank,
            spans,
            pinv: pinv_rows,
            fft,
            ifft,
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.config
    }

    /// Row-major `[n_mels × n_bins]` triangular filters.
    pub fn filterbank(&self) -> &[f64] {
        &self.filterbank
    }

    /// Log-mel spectrogram of `audio`.
    pub fn analyze(&self, audio: &AudioBuffer) -> Result<MelSpectrogram> {
        let spec = self.stft(audio)?;
        self.log_mel(&spec)
    }
}
