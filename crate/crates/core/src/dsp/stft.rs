use rustfft::num_complex::Complex64;

use super::{reflect, AudioBuffer, MelAnalyzer};
use crate::error::{Error, Result};

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// One-sided complex spectrogram, `frames × (fft_size/2 + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

impl MelAnalyzer {
    /// Hann-windowed frame `t` of `samples`, zero-padded to the FFT size.
    pub(crate) fn windowed_frame(&self, samples: &[f64], t: usize, buf: &mut [Complex64]) {
        let cfg = &self.config;
        let start = cfg.frame_start(t);
        buf.fill(Complex64::new(0.0, 0.0));
        for (i, w) in self.window.iter().enumerate() {
            let s = reflect(start + i as isize, samples.len());
            buf[i] = Complex64::new(samples[s] * w, 0.0);
        }
    }

    /// Full-length complex spectra of every frame (both halves).
    pub(crate) fn full_stft(&self, samples: &[f64], n_frames: usize) -> Vec<Complex64> {
        let n = self.config.fft_size;
        let mut out = vec![Complex64::new(0.0, 0.0); n_frames * n];
        for t in 0..n_frames {
            let buf = &mut out[t * n..(t + 1) * n];
            self.windowed_frame(samples, t, buf);
            self.fft.process(buf);
        }
        out
    }

    pub fn stft(&self, audio: &AudioBuffer) -> Result<Spectrogram> {
        let cfg = &self.config;
        if audio.sample_rate != cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "audio is {} Hz, analyzer expects {} Hz",
                audio.sample_rate, cfg.sample_rate
            )));
        }
        if audio.len() < cfg.frame_len {
            return Err(Error::AudioTooShort {
                have: audio.len(),
                need: cfg.frame_len,
            });
        }
        let n_frames = cfg.num_frames(audio.len());
        let n_bins = cfg.n_bins();
        let full = self.full_stft(&audio.samples, n_frames);
        let mut data = Vec::with_capacity(n_frames * n_bins);
        for t in 0..n_frames {
            data.extend_from_slice(&full[t * cfg.fft_size..t * cfg.fft_size + n_bins]);
        }
        Ok(Spectrogram {
            n_frames,
            n_bins,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{DspConfig, Framing};
    use super::*;

    fn analyzer() -> MelAnalyzer {
        MelAnalyzer::new(DspConfig::paper()).unwrap()
    }

    #[test]
    fn zero_audio_zero_spectrum() {
        let a = analyzer();
        let spec = a.stft(&AudioBuffer::silence(24_000, 24_000)).unwrap();
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn three_seconds_is_240_frames() {
        let a = analyzer();
        let spec = a.stft(&AudioBuffer::silence(72_000, 24_000)).unwrap();
        assert_eq!(spec.n_frames, 240);
    }

    #[test]
    fn frame_count_formula() {
        for hop_ms in [10.0, 12.5] {
            for secs in [1usize, 2, 3] {
                let mut cfg = DspConfig::paper();
                cfg.hop_len = (hop_ms * 24.0) as usize;
                let len = secs * 24_000;
                let a = MelAnalyzer::new(cfg.clone()).unwrap();
                let n = a.stft(&AudioBuffer::silence(len, 24_000)).unwrap().n_frames;
                assert_eq!(n, len / cfg.hop_len);
                cfg.framing = Framing::Valid;
                let a = MelAnalyzer::new(cfg.clone()).unwrap();
                let n = a.stft(&AudioBuffer::silence(len, 24_000)).unwrap().n_frames;
                assert_eq!(n, (len - cfg.frame_len) / cfg.hop_len + 1);
            }
        }
    }

    #[test]
    fn too_short_rejected() {
        let a = analyzer();
        assert!(matches!(
            a.stft(&AudioBuffer::silence(500, 24_000)),
            Err(Error::AudioTooShort { .. })
        ));
    }

    #[test]
    fn bin_centred_sine_concentrates_energy() {
        let a = analyzer();
        let k = 37usize;
        let f = k as f64 * 24_000.0 / 1024.0;
        let samples = (0..24_000)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 24_000.0).sin())
            .collect();
        let spec = a.stft(&AudioBuffer::new(samples, 24_000).unwrap()).unwrap();
        for t in 2..spec.n_frames - 2 {
            let p: Vec<f64> = spec.frame(t).iter().map(|c| c.norm_sqr()).collect();
            let total: f64 = p.iter().sum();
            let near: f64 = p[k - 1..=k + 1].iter().sum();
            assert!(near / total >= 0.9, "frame {t}: {}", near / total);
        }
    }

    #[test]
    fn stft_is_linear() {
        let a = analyzer();
        let x: Vec<f64> = (0..6000).map(|i| (i as f64 * 0.013).sin() * 0.3).collect();
        let y: Vec<f64> = (0..6000).map(|i| ((i * i) as f64 * 1e-5).cos() * 0.2).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let sx = a.stft(&AudioBuffer::new(x, 24_000).unwrap()).unwrap();
        let sy = a.stft(&AudioBuffer::new(y, 24_000).unwrap()).unwrap();
        let sxy = a.stft(&AudioBuffer::new(xy, 24_000).unwrap()).unwrap();
        for i in 0..sx.data.len() {
            assert!((sx.data[i] + sy.data[i] - sxy.data[i]).norm() < 1e-10);
        }
    }
}
