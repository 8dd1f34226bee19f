use crate::data::{apply_mask, GapSpec, TranscriptEncoding};
use crate::dsp::{AudioBuffer, MelAnalyzer, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::Generator;

use super::TrainConfig;

/// Longest run of exactly-zero samples, if it spans at least `min_len`.
pub fn detect_gap(audio: &AudioBuffer, min_len: usize) -> Option<(usize, usize)> {
    let (mut best, mut run_start, mut run) = ((0, 0), 0, 0);
    for (i, s) in audio.samples.iter().enumerate() {
        if *s == 0.0 {
            if run == 0 {
                run_start = i;
            }
            run += 1;
            if run > best.1 {
                best = (run_start, run);
            }
        } else {
            run = 0;
        }
    }
    (best.1 >= min_len.max(1)).then_some(best)
}

/// Original audio outside `[start, start + len)`, `fill` inside, with linear
/// crossfades of `fade` samples just outside each edge.
pub fn stitch(original: &AudioBuffer, fill: &AudioBuffer, start: usize, len: usize, fade: usize) -> Result<AudioBuffer> {
    if original.len() != fill.len() || original.sample_rate != fill.sample_rate {
        return Err(Error::InvalidArgument("stitch needs equal-length buffers at one rate".into()));
    }
    let n = original.len();
    let end = (start + len).min(n);
    let mut out = original.clone();
    out.samples[start..end].copy_from_slice(&fill.samples[start..end]);
    for j in 0..fade {
        // weight of the generated signal, rising towards the gap
        let w = (j + 1) as f64 / (fade + 1) as f64;
        if let Some(i) = start.checked_sub(fade - j) {
            out.samples[i] = (1.0 - w) * original.samples[i] + w * fill.samples[i];
        }
        let i = end + fade - 1 - j;
        if i < n {
            out.samples[i] = (1.0 - w) * original.samples[i] + w * fill.samples[i];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    pub audio: AudioBuffer,
    /// Generator output over the analysis window.
    pub mel: MelSpectrogram,
    /// Gap relative to the window.
    pub gap: GapSpec,
    pub window_start: usize,
}

/// Fills a gap in `audio`. With `gap = None` the longest zero run is used;
/// an explicit `(start, len)` sample span is zeroed first. Only a window of
/// the model's input length around the gap is resynthesized.
pub fn inpaint(
    config: &TrainConfig,
    gen: &Generator,
    audio: &AudioBuffer,
    text: &str,
    gap: Option<(usize, usize)>,
    stitch_edges: bool,
) -> Result<InpaintResult> {
    let dsp = &config.dsp;
    if audio.sample_rate != dsp.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "audio is {} Hz, model expects {} Hz",
            audio.sample_rate, dsp.sample_rate
        )));
    }
    let need = config.crop_samples();
    if audio.len() < need {
        return Err(Error::AudioTooShort { have: audio.len(), need });
    }
    let transcript = TranscriptEncoding::encode(text, config.model.m)?;
    let (start, len) = match gap {
        Some(g) => g,
        None => detect_gap(audio, dsp.hop_len)
            .ok_or_else(|| Error::ImpossibleGap("no run of zero samples as long as one hop".into()))?,
    };
    if start + len > audio.len() {
        return Err(Error::ImpossibleGap(format!("gap ends at {} past {} samples", start + len, audio.len())));
    }
    if len > need {
        return Err(Error::ImpossibleGap(format!("gap of {len} samples exceeds the {need}-sample window")));
    }
    let full_gap = GapSpec::from_samples(start, len, dsp.hop_len);
    let masked_full = apply_mask(audio, &full_gap)?;

    let center = start + len / 2;
    let w0 = center.saturating_sub(need / 2).min(audio.len() - need);
    let window = AudioBuffer {
        samples: masked_full.samples[w0..w0 + need].to_vec(),
        sample_rate: audio.sample_rate,
    };
    let local = GapSpec::from_samples(start - w0, len, dsp.hop_len);

    let analyzer = MelAnalyzer::new(dsp.clone())?;
    let masked_mel = analyzer.analyze(&window)?;
    let mel = gen.forward(&masked_mel, &transcript)?;
    let mut synth = analyzer.invert_mel(&mel, config.griffin_lim_iters)?;
    synth.samples.resize(need, 0.0);

    let mut generated = masked_full.clone();
    generated.samples[w0..w0 + need].copy_from_slice(&synth.samples);
    let out = if stitch_edges {
        let fade = dsp.samples_for_seconds(0.010);
        stitch(audio, &generated, start, len, fade)?
    } else {
        generated
    };
    Ok(InpaintResult {
        audio: out,
        mel,
        gap: local,
        window_start: w0,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn buf(s: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(s, 8000).unwrap()
    }

    #[test]
    fn longest_zero_run() {
        let a = buf(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        assert_eq!(detect_gap(&a, 1), Some((4, 3)));
        assert_eq!(detect_gap(&a, 4), None);
        assert_eq!(detect_gap(&buf(vec![1.0; 5]), 1), None);
    }

    #[test]
    fn stitch_fades_outside_gap() {
        let o = buf(vec![1.0; 12]);
        let f = buf(vec![0.0; 12]);
        let s = stitch(&o, &f, 5, 2, 2).unwrap();
        let want = [1.0, 1.0, 1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0];
        for (a, b) in s.samples.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_gap_with_stitch_keeps_audio_outside_fades() {
        let mut c = TrainConfig::toy();
        c.model.k = 1;
        c.griffin_lim_iters = 2;
        let gen = Generator::new(c.model.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let n = c.crop_samples() + 700;
        let audio = buf((0..n).map(|i| (i as f64 * 0.05).sin() * 0.3).collect());
        let at = 9000;
        let r = inpaint(&c, &gen, &audio, "abc", Some((at, 0)), true).unwrap();
        let fade = 80;
        for (i, (a, b)) in r.audio.samples.iter().zip(&audio.samples).enumerate() {
            if i + fade < at || i >= at + fade {
                assert_eq!(a.to_bits(), b.to_bits(), "sample {i}");
            }
        }
        let again = inpaint(&c, &gen, &audio, "abc", Some((at, 0)), true).unwrap();
        assert_eq!(again.audio, r.audio);
    }

    #[test]
    fn errors() {
        let c = TrainConfig::toy();
        let gen = Generator::new(c.model.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let short = buf(vec![0.1; 100]);
        assert!(matches!(inpaint(&c, &gen, &short, "a", None, false), Err(Error::AudioTooShort { .. })));
        let full = buf(vec![0.1; c.crop_samples()]);
        assert!(matches!(inpaint(&c, &gen, &full, "a", None, false), Err(Error::ImpossibleGap(_))));
        let long_text = "a".repeat(c.model.m + 1);
        assert!(matches!(
            inpaint(&c, &gen, &full, &long_text, Some((0, 10)), false),
            Err(Error::TranscriptTooLong { .. })
        ));
    }
}
