use rustfft::num_complex::Complex64;

use super::{reflect, AudioBuffer, MelAnalyzer, MelSpectrogram};
use crate::error::{Error, Result};

/// Per-iteration inconsistency `‖ |STFT(x_k)| − target ‖ / ‖target‖`,
/// measured over the full (two-sided) spectrum.
#[derive(Clone, Debug, Default)]
pub struct GriffinLimTrace {
    pub spectral_convergence: Vec<f64>,
}

impl MelAnalyzer {
    /// Two-sided magnitude targets from a log-mel spectrogram.
    fn target_magnitudes(&self, mel: &MelSpectrogram) -> Vec<f64> {
        let n = self.config.fft_size;
        let n_bins = self.config.n_bins();
        let mut power = vec![0.0; n_bins];
        let mut mags = vec![0.0; mel.n_frames * n];
        for t in 0..mel.n_frames {
            self.mel_frame_to_power(mel.frame(t), &mut power);
            let row = &mut mags[t * n..(t + 1) * n];
            for k in 0..n_bins {
                let m = power[k].sqrt();
                row[k] = m;
                if k > 0 && k < n - k {
                    row[n - k] = m;
                }
            }
        }
        mags
    }

    /// Least-squares signal whose windowed frames best match the time-domain
    /// frames of `spectra` (the projection onto consistent spectrograms).
    fn istft(&self, spectra: &mut [Complex64], n_frames: usize, len: usize) -> Vec<f64> {
        let cfg = &self.config;
        let n = cfg.fft_size;
        let mut num = vec![0.0; len];
        let mut den = vec![0.0; len];
        let scale = 1.0 / n as f64;
        for t in 0..n_frames {
            let buf = &mut spectra[t * n..(t + 1) * n];
            self.ifft.process(buf);
            let start = cfg.frame_start(t);
            for (i, w) in self.window.iter().enumerate() {
                let s = reflect(start + i as isize, len);
                num[s] += w * buf[i].re * scale;
                den[s] += w * w;
            }
        }
        num.iter()
            .zip(&den)
            .map(|(a, b)| if *b > 1e-12 { a / b } else { 0.0 })
            .collect()
    }

    /// Griffin-Lim resynthesis of `mel`, starting from zero phase.
    pub fn invert_mel(&self, mel: &MelSpectrogram, iterations: usize) -> Result<AudioBuffer> {
        self.invert_mel_traced(mel, iterations).map(|(a, _)| a)
    }

    pub fn invert_mel_traced(
        &self,
        mel: &MelSpectrogram,
        iterations: usize,
    ) -> Result<(AudioBuffer, GriffinLimTrace)> {
        let cfg = &self.config;
        if iterations == 0 {
            return Err(Error::InvalidArgument("griffin-lim needs at least one iteration".into()));
        }
        if mel.n_mels != cfg.n_mels {
            return Err(Error::invalid_shape(
                "invert_mel",
                format!("mel has {} bands, analyzer expects {}", mel.n_mels, cfg.n_mels),
            ));
        }
        let n = cfg.fft_size;
        let n_frames = mel.n_frames;
        let len = match cfg.framing {
            super::Framing::Centered => n_frames * cfg.hop_len,
            super::Framing::Valid => (n_frames - 1) * cfg.hop_len + cfg.frame_len,
        };
        if len < cfg.frame_len {
            return Err(Error::AudioTooShort {
                have: len,
                need: cfg.frame_len,
            });
        }
        let target = self.target_magnitudes(mel);
        let target_norm = target.iter().map(|m| m * m).sum::<f64>().sqrt().max(1e-300);
        let mut spectra: Vec<Complex64> = target.iter().map(|m| Complex64::new(*m, 0.0)).collect();
        let mut trace = GriffinLimTrace::default();
        let mut signal = Vec::new();
        for _ in 0..iterations {
            signal = self.istft(&mut spectra, n_frames, len);
            spectra = self.full_stft(&signal, n_frames);
            let mut dist = 0.0;
            for (c, m) in spectra.iter_mut().zip(&target) {
                let mag = c.norm();
                dist += (mag - m) * (mag - m);
                *c = if mag > 0.0 {
                    *c * (m / mag)
                } else {
                    Complex64::new(*m, 0.0)
                };
            }
            trace.spectral_convergence.push(dist.sqrt() / target_norm);
        }
        debug_assert_eq!(spectra.len(), n_frames * n);
        Ok((AudioBuffer::new(signal, cfg.sample_rate)?, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{DspConfig, MelAnalyzer};
    use super::*;

    fn speechlike(sr: u32, secs: f64) -> AudioBuffer {
        let len = (sr as f64 * secs) as usize;
        let samples = (0..len)
            .map(|i| {
                let t = i as f64 / sr as f64;
                let f0 = 140.0 + 30.0 * (2.0 * std::f64::consts::PI * 1.5 * t).sin();
                let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 3.0 * t).sin().abs();
                let mut s = 0.0;
                for h in 1..6 {
                    s += (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64;
                }
                0.25 * env * s
            })
            .collect();
        AudioBuffer::new(samples, sr).unwrap()
    }

    #[test]
    fn convergence_is_monotone_and_improves() {
        let a = MelAnalyzer::new(DspConfig::paper()).unwrap();
        let mel = a.analyze(&speechlike(24_000, 0.5)).unwrap();
        let (_, trace) = a.invert_mel_traced(&mel, 60).unwrap();
        for w in trace.spectral_convergence.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
        }
        let five = a.invert_mel(&mel, 5).unwrap();
        let sixty = a.invert_mel(&mel, 60).unwrap();
        let d5 = a.analyze(&five).unwrap().l1_distance(&mel);
        let d60 = a.analyze(&sixty).unwrap().l1_distance(&mel);
        assert!(d60 < d5, "{d60} >= {d5}");
    }

    #[test]
    fn floor_mel_is_near_silent() {
        let cfg = DspConfig::paper();
        let a = MelAnalyzer::new(cfg.clone()).unwrap();
        let mel = MelSpectrogram {
            n_frames: 40,
            n_mels: cfg.n_mels,
            values: vec![cfg.log_floor(); 40 * cfg.n_mels],
            hop_seconds: cfg.hop_seconds(),
            frame_seconds: cfg.frame_seconds(),
        };
        let audio = a.invert_mel(&mel, 10).unwrap();
        assert!(audio.peak() < 1e-2, "{}", audio.peak());
    }

    #[test]
    fn tone_roundtrip_keeps_dominant_band() {
        let a = MelAnalyzer::new(DspConfig::paper()).unwrap();
        let x = (0..12_000)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 24_000.0).sin())
            .collect();
        let mel = a.analyze(&AudioBuffer::new(x, 24_000).unwrap()).unwrap();
        let back = a.analyze(&a.invert_mel(&mel, 30).unwrap()).unwrap();
        let argmax = |m: &MelSpectrogram| {
            let mut acc = vec![0.0; m.n_mels];
            for t in 0..m.n_frames {
                for (b, v) in m.frame(t).iter().enumerate() {
                    acc[b] += v;
                }
            }
            (0..m.n_mels).max_by(|i, j| acc[*i].total_cmp(&acc[*j])).unwrap()
        };
        assert_eq!(argmax(&mel), argmax(&back));
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = DspConfig::toy();
        let a = MelAnalyzer::new(cfg.clone()).unwrap();
        let mel = a.analyze(&AudioBuffer::silence(8000, 8000)).unwrap();
        assert!(a.invert_mel(&mel, 0).is_err());
    }
}
