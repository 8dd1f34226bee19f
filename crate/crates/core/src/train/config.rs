use std::fmt::Write as _;
use std::path::Path;

use crate::adversarial::{DiscInput, DiscriminatorConfig};
use crate::dsp::{DspConfig, Framing};
use crate::error::{Error, Result};
use crate::kv;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub phase1_steps: u64,
    pub phase1_lr: f64,
    /// Learning rate is divided by `phase1_decay_divisor` every this many steps.
    pub phase1_decay_every: u64,
    pub phase1_decay_divisor: f64,
    pub phase2_steps: u64,
    pub phase2_lr: f64,
    pub phase2_clip_norm: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl TrainSchedule {
    pub fn paper() -> Self {
        TrainSchedule {
            batch_size: 256,
            phase1_steps: 3_000_000,
            phase1_lr: 1e-4,
            phase1_decay_every: 800_000,
            phase1_decay_divisor: 5.0,
            phase2_steps: 100_000,
            phase2_lr: 5e-5,
            phase2_clip_norm: 1.0,
            checkpoint_every: 10_000,
            log_every: 100,
        }
    }

    /// `lr₀ / divisor^floor(step / period)`.
    pub fn phase1_lr_at(&self, step: u64) -> f64 {
        let k = (step / self.phase1_decay_every) as i32;
        self.phase1_lr / self.phase1_decay_divisor.powi(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.phase1_decay_every == 0 {
            return Err(Error::InvalidArgument("batch_size and phase1_decay_every must be positive".into()));
        }
        if !(self.phase1_lr >= 0.0 && self.phase2_lr >= 0.0 && self.phase1_decay_divisor > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be non-negative".into()));
        }
        if !(self.phase2_clip_norm > 0.0) {
            return Err(Error::InvalidArgument("phase2_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dsp: DspConfig,
    pub disc: DiscriminatorConfig,
    pub schedule: TrainSchedule,
    pub lambda_feat: f64,
    /// Random per-example gain range (log-uniform).
    pub gain_min: f64,
    pub gain_max: f64,
    pub trim_silence: bool,
    pub griffin_lim_iters: usize,
    pub eval_seed: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            model: ModelConfig::paper(),
            dsp: DspConfig::paper(),
            disc: DiscriminatorConfig::default(),
            schedule: TrainSchedule::paper(),
            lambda_feat: 10.0,
            gain_min: 0.5,
            gain_max: 1.0,
            trim_silence: true,
            griffin_lim_iters: 60,
            eval_seed: 1234,
        }
    }

    pub fn toy() -> Self {
        TrainConfig {
            model: ModelConfig::toy(),
            dsp: DspConfig::toy(),
            disc: DiscriminatorConfig::toy(),
            schedule: TrainSchedule {
                batch_size: 8,
                phase1_steps: 6000,
                phase1_lr: 1e-3,
                phase1_decay_every: 4000,
                phase1_decay_divisor: 5.0,
                phase2_steps: 500,
                phase2_lr: 5e-5,
                phase2_clip_norm: 1.0,
                checkpoint_every: 500,
                log_every: 100,
            },
            lambda_feat: 10.0,
            gain_min: 1.0,
            gain_max: 1.0,
            trim_silence: false,
            griffin_lim_iters: 60,
            eval_seed: 1234,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dsp.validate()?;
        self.disc.validate()?;
        self.schedule.validate()?;
        if self.dsp.n_mels != self.model.d_mel {
            return Err(Error::InvalidArgument(format!(
                "n_mels {} != d_mel {}",
                self.dsp.n_mels, self.model.d_mel
            )));
        }
        if self.model.n < self.disc.chunk_frames {
            return Err(Error::InvalidArgument(format!(
                "{} frames is below the discriminator chunk of {}",
                self.model.n, self.disc.chunk_frames
            )));
        }
        if !(self.gain_min > 0.0 && self.gain_min <= self.gain_max) {
            return Err(Error::InvalidArgument("bad gain range".into()));
        }
        if !(self.lambda_feat > 0.0) || self.griffin_lim_iters == 0 {
            return Err(Error::InvalidArgument("lambda_feat and griffin_lim_iters must be positive".into()));
        }
        Ok(())
    }

    /// Samples per training crop: the shortest signal giving `n` frames.
    pub fn crop_samples(&self) -> usize {
        let (n, d) = (self.model.n, &self.dsp);
        match d.framing {
            Framing::Centered => n * d.hop_len,
            Framing::Valid => (n - 1) * d.hop_len + d.frame_len,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::toy();
        let mut preset_seen = false;
        for e in kv::parse(text)? {
            let (m, d, s) = (&mut c.model, &mut c.dsp, &mut c.schedule);
            match e.key.as_str() {
                "preset" => {
                    if preset_seen || e.line != first_line(text) {
                        return Err(Error::Config {
                            line: e.line,
                            msg: "`preset` must be the first entry".into(),
                        });
                    }
                    preset_seen = true;
                    c = match e.value.as_str() {
                        "toy" => TrainConfig::toy(),
                        "paper" => TrainConfig::paper(),
                        v => {
                            return Err(Error::Config {
                                line: e.line,
                                msg: format!("unknown preset `{v}`"),
                            })
                        }
                    };
                }
                "n" => m.n = e.parse()?,
                "d_mel" => m.d_mel = e.parse()?,
                "p_t" => m.p_t = e.parse()?,
                "p_f" => m.p_f = e.parse()?,
                "d_patch" => m.d_patch = e.parse()?,
                "d_ff" => m.d_ff = e.parse()?,
                "d_e" => m.d_e = e.parse()?,
                "m" => m.m = e.parse()?,
                "d_mod" => m.d_mod = e.parse()?,
                "z" => m.z = e.parse()?,
                "d" => m.d = e.parse()?,
                "k" => m.k = e.parse()?,
                "h" => m.h = e.parse()?,
                "head_dim" => m.head_dim = e.parse()?,
                "d_q" => m.d_q = e.parse()?,
                "ffn_hidden" => m.ffn_hidden = e.parse()?,
                "mel_scale" => m.mel_scale = e.parse()?,
                "mel_offset" => m.mel_offset = e.parse()?,
                "init_std" => m.init_std = e.parse()?,
                "sample_rate" => d.sample_rate = e.parse()?,
                "hop_len" => d.hop_len = e.parse()?,
                "frame_len" => d.frame_len = e.parse()?,
                "fft_size" => d.fft_size = e.parse()?,
                "n_mels" => d.n_mels = e.parse()?,
                "f_min" => d.f_min = e.parse()?,
                "f_max" => d.f_max = e.parse()?,
                "floor_epsilon" => d.floor_epsilon = e.parse()?,
                "framing" => {
                    d.framing = match e.value.as_str() {
                        "centered" => Framing::Centered,
                        "valid" => Framing::Valid,
                        _ => return Err(bad_value(&e)),
                    }
                }
                "disc_chunk_frames" => c.disc.chunk_frames = e.parse()?,
                "disc_kernel" => c.disc.kernel = e.parse()?,
                "disc_filters" => c.disc.filters = e.parse_list()?,
                "disc_time_strides" => c.disc.time_strides = e.parse_list()?,
                "disc_freq_strides" => c.disc.freq_strides = e.parse_list()?,
                "disc_input" => c.disc.input = e.value.parse::<DiscInput>().map_err(|_| bad_value(&e))?,
                "disc_init_std" => c.disc.init_std = e.parse()?,
                "batch_size" => s.batch_size = e.parse()?,
                "phase1_steps" => s.phase1_steps = e.parse()?,
                "phase1_lr" => s.phase1_lr = e.parse()?,
                "phase1_decay_every" => s.phase1_decay_every = e.parse()?,
                "phase1_decay_divisor" => s.phase1_decay_divisor = e.parse()?,
                "phase2_steps" => s.phase2_steps = e.parse()?,
                "phase2_lr" => s.phase2_lr = e.parse()?,
                "phase2_clip_norm" => s.phase2_clip_norm = e.parse()?,
                "checkpoint_every" => s.checkpoint_every = e.parse()?,
                "log_every" => s.log_every = e.parse()?,
                "lambda_feat" => c.lambda_feat = e.parse()?,
                "gain_min" => c.gain_min = e.parse()?,
                "gain_max" => c.gain_max = e.parse()?,
                "trim_silence" => c.trim_silence = e.parse()?,
                "griffin_lim_iters" => c.griffin_lim_iters = e.parse()?,
                "eval_seed" => c.eval_seed = e.parse()?,
                _ => return Err(e.unknown()),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Complete `key = value` listing that parses back to `self`.
    pub fn to_text(&self) -> String {
        let (m, d, s, dc) = (&self.model, &self.dsp, &self.schedule, &self.disc);
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut t = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(t, "{k} = {v}");
        };
        put("n", m.n.to_string());
        put("d_mel", m.d_mel.to_string());
        put("p_t", m.p_t.to_string());
        put("p_f", m.p_f.to_string());
        put("d_patch", m.d_patch.to_string());
        put("d_ff", m.d_ff.to_string());
        put("d_e", m.d_e.to_string());
        put("m", m.m.to_string());
        put("d_mod", m.d_mod.to_string());
        put("z", m.z.to_string());
        put("d", m.d.to_string());
        put("k", m.k.to_string());
        put("h", m.h.to_string());
        put("head_dim", m.head_dim.to_string());
        put("d_q", m.d_q.to_string());
        put("ffn_hidden", m.ffn_hidden.to_string());
        put("mel_scale", format!("{:?}", m.mel_scale));
        put("mel_offset", format!("{:?}", m.mel_offset));
        put("init_std", format!("{:?}", m.init_std));
        put("sample_rate", d.sample_rate.to_string());
        put("hop_len", d.hop_len.to_string());
        put("frame_len", d.frame_len.to_string());
        put("fft_size", d.fft_size.to_string());
        put("n_mels", d.n_mels.to_string());
        put("f_min", format!("{:?}", d.f_min));
        put("f_max", format!("{:?}", d.f_max));
        put("floor_epsilon", format!("{:?}", d.floor_epsilon));
        put(
            "framing",
            match d.framing {
                Framing::Centered => "centered",
                Framing::Valid => "valid",
            }
            .into(),
        );
        put("disc_chunk_frames", dc.chunk_frames.to_string());
        put("disc_kernel", dc.kernel.to_string());
        put("disc_filters", list(&dc.filters));
        put("disc_time_strides", list(&dc.time_strides));
        put("disc_freq_strides", list(&dc.freq_strides));
        put(
            "disc_input",
            match dc.input {
                DiscInput::Full => "full",
                DiscInput::Chunks => "chunks",
                DiscInput::GapCentered => "gap",
            }
            .into(),
        );
        put("disc_init_std", format!("{:?}", dc.init_std));
        put("batch_size", s.batch_size.to_string());
        put("phase1_steps", s.phase1_steps.to_string());
        put("phase1_lr", format!("{:?}", s.phase1_lr));
        put("phase1_decay_every", s.phase1_decay_every.to_string());
        put("phase1_decay_divisor", format!("{:?}", s.phase1_decay_divisor));
        put("phase2_steps", s.phase2_steps.to_string());
        put("phase2_lr", format!("{:?}", s.phase2_lr));
        put("phase2_clip_norm", format!("{:?}", s.phase2_clip_norm));
        put("checkpoint_every", s.checkpoint_every.to_string());
        put("log_every", s.log_every.to_string());
        put("lambda_feat", format!("{:?}", self.lambda_feat));
        put("gain_min", format!("{:?}", self.gain_min));
        put("gain_max", format!("{:?}", self.gain_max));
        put("trim_silence", self.trim_silence.to_string());
        put("griffin_lim_iters", self.griffin_lim_iters.to_string());
        put("eval_seed", self.eval_seed.to_string());
        t
    }
}

fn first_line(text: &str) -> usize {
    text.lines()
        .position(|l| !l.split('#').next().unwrap_or("").trim().is_empty())
        .map_or(0, |i| i + 1)
}

fn bad_value(e: &kv::Entry) -> Error {
    Error::Config {
        line: e.line,
        msg: format!("bad value `{}` for `{}`", e.value, e.key),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        for c in [TrainConfig::toy(), TrainConfig::paper()] {
            assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn presets_and_overrides() {
        let c = TrainConfig::parse("# x\npreset = paper\nk = 2\n").unwrap();
        assert_eq!(c.model.d, 1024);
        assert_eq!(c.model.k, 2);
        assert!(TrainConfig::parse("k = 2\npreset = paper\n").is_err());
        assert!(TrainConfig::parse("preset = huge\n").is_err());
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        match TrainConfig::parse("z = 32\n\nlearning_rate = 3\n") {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("learning_rate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_config_rejected() {
        assert!(TrainConfig::parse("d_mel = 32\n").is_err());
        assert!(TrainConfig::parse("d_e = 60\n").is_err());
        assert!(TrainConfig::parse("framing = sideways\n").is_err());
    }

    #[test]
    fn crop_matches_frames() {
        let c = TrainConfig::toy();
        assert_eq!(c.crop_samples(), 24_000);
        assert_eq!(c.dsp.num_frames(c.crop_samples()), c.model.n);
        let p = TrainConfig::paper();
        assert_eq!(p.crop_samples(), 72_000);
    }

    #[test]
    fn decay_closed_form() {
        let s = TrainSchedule {
            phase1_decay_every: 100,
            ..TrainSchedule::paper()
        };
        for step in 0..1000u64 {
            let j = (step / 100) as i32;
            assert_eq!(s.phase1_lr_at(step), 1e-4 / 5f64.powi(j));
        }
        assert_eq!(s.phase1_lr_at(100), 1e-4 / 5.0);
        assert_eq!(s.phase1_lr_at(250), 1e-4 / 25.0);
    }
}
