use std::fs;
use std::path::{Path, PathBuf};

use crate::dsp::wav::{read_wav, write_wav};
use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: AudioBuffer,
    pub text: String,
}

/// A directory of `<id>.wav` / `<id>.txt` pairs, sorted by id.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    /// Loads every pair in `dir`. Unpaired files are skipped with a warning,
    /// as are recordings at a different sample rate.
    pub fn load(dir: impl AsRef<Path>, sample_rate: u32, trim: bool) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut wavs: Vec<PathBuf> = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "wav") {
                wavs.push(path);
            }
        }
        wavs.sort();
        let mut utterances = Vec::with_capacity(wavs.len());
        for wav in wavs {
            let txt = wav.with_extension("txt");
            if !txt.exists() {
                log::warn!("{}: no transcript, skipped", wav.display());
                continue;
            }
            let mut audio = read_wav(&wav)?;
            if audio.sample_rate != sample_rate {
                log::warn!(
                    "{}: {} Hz, expected {} Hz, skipped",
                    wav.display(),
                    audio.sample_rate,
                    sample_rate
                );
                continue;
            }
            if trim {
                audio = trim_silence(&audio, -40.0, 25.0);
            }
            let text = fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
            let id = wav.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            utterances.push(Utterance {
                id,
                audio,
                text: text.trim_end_matches(['\n', '\r']).to_string(),
            });
        }
        Ok(Dataset { utterances })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for u in &self.utterances {
            write_wav(dir.join(format!("{}.wav", u.id)), &u.audio)?;
            let txt = dir.join(format!("{}.txt", u.id));
            fs::write(&txt, &u.text).map_err(|e| Error::io(&txt, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Drops utterances shorter than `min_samples`, returning how many went.
    pub fn retain_min_len(&mut self, min_samples: usize) -> usize {
        let before = self.utterances.len();
        self.utterances.retain(|u| {
            let keep = u.audio.len() >= min_samples;
            if !keep {
                log::debug!("{}: {} samples, dropped", u.id, u.audio.len());
            }
            keep
        });
        before - self.utterances.len()
    }
}

/// Strips leading and trailing windows whose RMS is below `threshold_db` dBFS.
pub fn trim_silence(audio: &AudioBuffer, threshold_db: f64, window_ms: f64) -> AudioBuffer {
    let win = ((window_ms / 1000.0) * audio.sample_rate as f64).round().max(1.0) as usize;
    let n_win = audio.len().div_ceil(win);
    let loud = |w: usize| {
        let chunk = &audio.samples[w * win..((w + 1) * win).min(audio.len())];
        let rms = (chunk.iter().map(|s| s * s).sum::<f64>() / chunk.len() as f64).sqrt();
        20.0 * rms.max(1e-300).log10() >= threshold_db
    };
    let Some(first) = (0..n_win).find(|w| loud(*w)) else {
        return AudioBuffer::silence(0, audio.sample_rate);
    };
    let last = (0..n_win).rev().find(|w| loud(*w)).unwrap_or(first);
    AudioBuffer {
        samples: audio.samples[first * win..((last + 1) * win).min(audio.len())].to_vec(),
        sample_rate: audio.sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trims_quiet_edges_only() {
        let sr = 8000;
        let mut x = vec![0.0; 2000];
        x.extend((0..4000).map(|i| 0.3 * (i as f64 * 0.2).sin()));
        x.extend(vec![1e-4; 1000]);
        let t = trim_silence(&AudioBuffer::new(x, sr).unwrap(), -40.0, 25.0);
        assert_eq!(t.len(), 4000);
        assert!(trim_silence(&AudioBuffer::silence(800, sr), -40.0, 25.0).is_empty());
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            utterances: vec![
                Utterance {
                    id: "b".into(),
                    audio: AudioBuffer::new(vec![0.25; 100], 8000).unwrap(),
                    text: "hello".into(),
                },
                Utterance {
                    id: "a".into(),
                    audio: AudioBuffer::new(vec![-0.5; 50], 8000).unwrap(),
                    text: "".into(),
                },
            ],
        };
        ds.write(dir.path()).unwrap();
        fs::write(dir.path().join("orphan.wav"), b"x").unwrap();
        let back = Dataset::load(dir.path(), 8000, false).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.utterances[0].id, "a");
        assert_eq!(back.utterances[1], ds.utterances[0]);
    }
}
