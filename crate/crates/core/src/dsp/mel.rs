use super::{DspConfig, MelAnalyzer, MelSpectrogram, Spectrogram};
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Row-major `[n_mels × n_bins]` triangular filters with unit peaks, edges
/// equally spaced on the mel scale between `f_min` and `f_max`.
pub fn mel_filterbank(cfg: &DspConfig) -> Vec<f64> {
    let n_bins = cfg.n_bins();
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= centre {
                (f - left) / (centre - left)
            } else if f > centre && f < right {
                (right - f) / (right - centre)
            } else {
                0.0
            };
            fb[m * n_bins + k] = w;
        }
    }
    fb
}

impl MelAnalyzer {
    /// `ln(max(filterbank · |spec|², floor_epsilon))` per frame.
    pub fn log_mel(&self, spec: &Spectrogram) -> Result<MelSpectrogram> {
        let cfg = &self.config;
        if spec.n_bins != cfg.n_bins() {
            return Err(Error::invalid_shape(
                "log_mel",
                format!("spectrogram has {} bins, filterbank expects {}", spec.n_bins, cfg.n_bins()),
            ));
        }
        let mut values = Vec::with_capacity(spec.n_frames * cfg.n_mels);
        let mut power = vec![0.0; spec.n_bins];
        for t in 0..spec.n_frames {
            for (p, c) in power.iter_mut().zip(spec.frame(t)) {
                *p = c.norm_sqr();
            }
            for m in 0..cfg.n_mels {
                let (lo, hi) = self.spans[m];
                let row = &self.filterbank[m * spec.n_bins + lo..m * spec.n_bins + hi];
                let e: f64 = row.iter().zip(&power[lo..hi]).map(|(w, p)| w * p).sum();
                values.push(e.max(cfg.floor_epsilon).ln());
            }
        }
        Ok(MelSpectrogram {
            n_frames: spec.n_frames,
            n_mels: cfg.n_mels,
            values,
            hop_seconds: cfg.hop_seconds(),
            frame_seconds: cfg.frame_seconds(),
        })
    }

    /// Non-negative linear power per bin recovered from one mel frame via the
    /// filterbank pseudo-inverse, clamped at zero.
    pub(crate) fn mel_frame_to_power(&self, mel_frame: &[f64], out: &mut [f64]) {
        let n_mels = self.config.n_mels;
        let energies: Vec<f64> = mel_frame.iter().map(|v| v.exp()).collect();
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.pinv[k * n_mels..(k + 1) * n_mels];
            *o = row.iter().zip(&energies).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::super::AudioBuffer;
    use super::*;

    /// Independent construction: weight is the triangle evaluated in the mel
    /// domain's linear-frequency image, computed per filter from its own
    /// three edge frequencies.
    fn brute_force_filterbank(cfg: &DspConfig) -> Vec<Vec<f64>> {
        let m_lo = 2595.0 * (1.0 + cfg.f_min / 700.0).log10();
        let m_hi = 2595.0 * (1.0 + cfg.f_max / 700.0).log10();
        let step = (m_hi - m_lo) / (cfg.n_mels + 1) as f64;
        let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        (0..cfg.n_mels)
            .map(|m| {
                let l = hz(m_lo + step * m as f64);
                let c = hz(m_lo + step * (m + 1) as f64);
                let r = hz(m_lo + step * (m + 2) as f64);
                (0..cfg.fft_size / 2 + 1)
                    .map(|k| {
                        let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn filterbank_matches_brute_force() {
        for cfg in [DspConfig::paper(), DspConfig::toy()] {
            let fb = mel_filterbank(&cfg);
            let oracle = brute_force_filterbank(&cfg);
            let n_bins = cfg.n_bins();
            for (m, row) in oracle.iter().enumerate() {
                let sum: f64 = fb[m * n_bins..(m + 1) * n_bins].iter().sum();
                assert!(sum > 0.0, "filter {m} is empty");
                for (k, w) in row.iter().enumerate() {
                    assert!((fb[m * n_bins + k] - w).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn filterbank_covers_every_interior_bin() {
        let cfg = DspConfig::paper();
        let fb = mel_filterbank(&cfg);
        let n_bins = cfg.n_bins();
        assert!(fb.iter().all(|w| *w >= 0.0));
        for k in 0..n_bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            if f > cfg.f_min && f < cfg.f_max {
                let total: f64 = (0..cfg.n_mels).map(|m| fb[m * n_bins + k]).sum();
                assert!(total > 0.0, "bin {k} ({f} Hz) uncovered");
            }
        }
    }

    #[test]
    fn zero_spectrogram_is_floor() {
        let a = MelAnalyzer::new(DspConfig::paper()).unwrap();
        let mel = a.analyze(&AudioBuffer::silence(24_000, 24_000)).unwrap();
        assert!(mel.values.iter().all(|v| *v == 1e-5f64.ln()));
    }

    #[test]
    fn band_count_mismatch_rejected() {
        let a = MelAnalyzer::new(DspConfig::paper()).unwrap();
        let spec = Spectrogram {
            n_frames: 1,
            n_bins: 10,
            data: vec![Default::default(); 10],
        };
        assert!(a.log_mel(&spec).is_err());
    }

    #[test]
    fn white_noise_sanity() {
        let cfg = DspConfig::paper();
        let a = MelAnalyzer::new(cfg.clone()).unwrap();
        let centres: Vec<f64> = (0..cfg.n_mels)
            .map(|m| {
                let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
                mel_to_hz(lo + (hi - lo) * (m + 1) as f64 / (cfg.n_mels + 1) as f64)
            })
            .collect();
        assert!(centres.windows(2).all(|w| w[0] < w[1]));
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = (0..12_000).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mel = a.analyze(&AudioBuffer::new(x, 24_000).unwrap()).unwrap();
            assert!(mel.values.iter().all(|v| *v >= cfg.log_floor()));
        }
    }
}
