//! Two-phase training, evaluation, checkpoints and inference.
//!
//! Phase 1 minimizes the L1 reconstruction loss with Adam under a step-decay
//! schedule. Phase 2 alternates one discriminator step on the hinge loss with
//! one generator step on reconstruction plus feature matching.

pub mod bench;
pub mod checkpoint;
mod config;
mod inpaint;

pub use config::{TrainConfig, TrainSchedule};
pub use inpaint::{detect_gap, inpaint, stitch};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    feature_matching_loss, generator_loss, hinge_d_loss, l1_rec_loss, Discriminator, LossWeights,
};
use crate::data::toy::{gap_symbol_hits, ToyCorpusConfig};
use crate::data::{GapMode, GapPolicy, TrainingExample, Utterance};
use crate::dsp::{amplitude_scale, AudioBuffer, MelAnalyzer, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::tensor::{clip_global_norm, AdamConfig, AdamState, Graph, ParamSet, Tensor, Var};
use checkpoint::{bytes_to_tensor, tensor_to_bytes, tensor_to_u64s, u64s_to_tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Reconstruction = 1,
    Adversarial = 2,
}

impl Phase {
    pub fn from_number(n: u64) -> Result<Self> {
        match n {
            1 => Ok(Phase::Reconstruction),
            2 => Ok(Phase::Adversarial),
            _ => Err(Error::InvalidArgument(format!("phase must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Phase2Losses {
    pub d_loss: f64,
    pub g_loss: f64,
    pub rec: f64,
    pub feat: f64,
}

/// Full training state; everything here goes into a checkpoint.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub analyzer: MelAnalyzer,
    pub gen: Generator,
    pub disc: Discriminator,
    pub g_opt: AdamState,
    pub d_opt: AdamState,
    pub rng: ChaCha8Rng,
    pub phase: Phase,
    /// Completed steps in the current phase.
    pub step: u64,
}

/// Utterances long enough for a training crop.
pub fn usable(config: &TrainConfig, utts: Vec<Utterance>) -> Vec<Utterance> {
    let need = config.crop_samples();
    let before = utts.len();
    let kept: Vec<Utterance> = utts.into_iter().filter(|u| u.audio.len() >= need).collect();
    if kept.len() < before {
        log::warn!("{} utterance(s) shorter than {need} samples dropped", before - kept.len());
    }
    kept
}

fn collect_grads(g: &Graph, loss: Var, vars: &[Var], params: &ParamSet) -> Result<Vec<Vec<f64>>> {
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = Generator::new(config.model.clone(), &mut rng)?;
        let disc = Discriminator::new(config.disc.clone(), &mut rng)?;
        let g_opt = AdamState::new(
            AdamConfig {
                learning_rate: config.schedule.phase1_lr,
                ..Default::default()
            },
            gen.params.tensors(),
        );
        let d_opt = AdamState::new(
            AdamConfig {
                learning_rate: config.schedule.phase2_lr,
                ..Default::default()
            },
            disc.params.tensors(),
        );
        Ok(Trainer {
            analyzer: MelAnalyzer::new(config.dsp.clone())?,
            config,
            gen,
            disc,
            g_opt,
            d_opt,
            rng,
            phase: Phase::Reconstruction,
            step: 0,
        })
    }

    /// Switches a phase-1 state to phase 2: a fresh discriminator drawn
    /// from `seed` and fresh optimizer moments for both networks.
    pub fn begin_phase2(&mut self, seed: u64) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.disc = Discriminator::new(self.config.disc.clone(), &mut self.rng)?;
        let lr = self.config.schedule.phase2_lr;
        let cfg = AdamConfig {
            learning_rate: lr,
            ..Default::default()
        };
        self.g_opt = AdamState::new(cfg, self.gen.params.tensors());
        self.d_opt = AdamState::new(cfg, self.disc.params.tensors());
        self.phase = Phase::Adversarial;
        self.step = 0;
        Ok(())
    }

    /// One random crop, gain, gap and mask.
    pub fn sample_example(&mut self, data: &[Utterance]) -> Result<TrainingExample> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no usable training utterances".into()));
        }
        let need = self.config.crop_samples();
        let u = &data[self.rng.random_range(0..data.len())];
        if u.audio.len() < need {
            return Err(Error::AudioTooShort {
                have: u.audio.len(),
                need,
            });
        }
        let start = self.rng.random_range(0..=u.audio.len() - need);
        let mut audio = AudioBuffer {
            samples: u.audio.samples[start..start + need].to_vec(),
            sample_rate: u.audio.sample_rate,
        };
        let (lo, hi) = (self.config.gain_min, self.config.gain_max);
        if lo < hi {
            let gain = self.rng.random_range(lo.ln()..=hi.ln()).exp();
            audio = amplitude_scale(&audio, gain)?;
        }
        let policy = GapPolicy::for_dsp(&self.config.dsp);
        let gap = policy.sample(self.config.model.n, GapMode::Train, &mut self.rng)?;
        TrainingExample::build(&self.analyzer, &audio, &u.text, gap, self.config.model.m)
    }

    pub fn sample_batch(&mut self, data: &[Utterance]) -> Result<Vec<TrainingExample>> {
        (0..self.config.schedule.batch_size)
            .map(|_| self.sample_example(data))
            .collect()
    }

    fn predict(&self, g: &mut Graph, v: &[Var], batch: &[TrainingExample]) -> Result<Vec<Var>> {
        batch
            .iter()
            .map(|ex| self.gen.forward_graph(g, v, &ex.masked_mel.to_tensor(), &ex.transcript.ids()))
            .collect()
    }

    fn diverged(&self, loss: f64) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged { step: self.step, loss })
        }
    }

    /// L1 of the current generator on `batch`, without updating anything.
    pub fn reconstruction_loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        let mut g = Graph::new();
        let v = self.gen.params.bind(&mut g, false);
        let preds = self.predict(&mut g, &v, batch)?;
        let targets: Vec<Var> = batch.iter().map(|e| g.constant(e.target_mel.to_tensor())).collect();
        let loss = l1_rec_loss(&mut g, &targets, &preds)?;
        Ok(g.value(loss).item())
    }

    /// One Adam step on the reconstruction loss; returns the loss before the
    /// update.
    pub fn phase1_step(&mut self, batch: &[TrainingExample]) -> Result<f64> {
        self.g_opt.set_learning_rate(self.config.schedule.phase1_lr_at(self.step));
        let mut g = Graph::new();
        let v = self.gen.params.bind(&mut g, true);
        let preds = self.predict(&mut g, &v, batch)?;
        let targets: Vec<Var> = batch.iter().map(|e| g.constant(e.target_mel.to_tensor())).collect();
        let loss = l1_rec_loss(&mut g, &targets, &preds)?;
        let value = g.value(loss).item();
        self.diverged(value)?;
        let grads = collect_grads(&g, loss, &v, &self.gen.params)?;
        drop(g);
        self.g_opt.step(self.gen.params.tensors_mut(), &grads)?;
        self.step += 1;
        Ok(value)
    }

    /// Hinge loss of the current discriminator on `batch`.
    pub fn d_loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        let mut g = Graph::new();
        let gv = self.gen.params.bind(&mut g, false);
        let dv = self.disc.params.bind(&mut g, false);
        let loss = self.d_loss_graph(&mut g, &gv, &dv, batch)?;
        Ok(g.value(loss).item())
    }

    fn d_loss_graph(&self, g: &mut Graph, gv: &[Var], dv: &[Var], batch: &[TrainingExample]) -> Result<Var> {
        let fakes = self.predict(g, gv, batch)?;
        let mut real_logits = Vec::with_capacity(batch.len());
        let mut fake_logits = Vec::with_capacity(batch.len());
        for (ex, fake) in batch.iter().zip(fakes) {
            let real = g.constant(ex.target_mel.to_tensor());
            real_logits.push(self.disc.forward(g, dv, real, Some(&ex.gap))?.logits);
            fake_logits.push(self.disc.forward(g, dv, fake, Some(&ex.gap))?.logits);
        }
        hinge_d_loss(g, &real_logits, &fake_logits)
    }

    /// One discriminator step followed by one generator step.
    pub fn phase2_step(&mut self, batch: &[TrainingExample]) -> Result<Phase2Losses> {
        let lr = self.config.schedule.phase2_lr;
        let clip = self.config.schedule.phase2_clip_norm;
        self.g_opt.set_learning_rate(lr);
        self.d_opt.set_learning_rate(lr);

        let mut g = Graph::new();
        let gv = self.gen.params.bind(&mut g, false);
        let dv = self.disc.params.bind(&mut g, true);
        let ld = self.d_loss_graph(&mut g, &gv, &dv, batch)?;
        let d_loss = g.value(ld).item();
        self.diverged(d_loss)?;
        let mut grads = collect_grads(&g, ld, &dv, &self.disc.params)?;
        drop(g);
        clip_global_norm(&mut grads, clip);
        self.d_opt.step(self.disc.params.tensors_mut(), &grads)?;

        let mut g = Graph::new();
        let gv = self.gen.params.bind(&mut g, true);
        let dv = self.disc.params.bind(&mut g, false);
        let preds = self.predict(&mut g, &gv, batch)?;
        let mut targets = Vec::with_capacity(batch.len());
        let mut real_feats = Vec::with_capacity(batch.len());
        let mut fake_feats = Vec::with_capacity(batch.len());
        for (ex, fake) in batch.iter().zip(&preds) {
            let real = g.constant(ex.target_mel.to_tensor());
            targets.push(real);
            real_feats.push(self.disc.forward(&mut g, &dv, real, Some(&ex.gap))?.features);
            fake_feats.push(self.disc.forward(&mut g, &dv, *fake, Some(&ex.gap))?.features);
        }
        let rec = l1_rec_loss(&mut g, &targets, &preds)?;
        let feat = feature_matching_loss(&mut g, &real_feats, &fake_feats)?;
        let lg = generator_loss(
            &mut g,
            rec,
            feat,
            LossWeights {
                lambda_feat: self.config.lambda_feat,
            },
        )?;
        let losses = Phase2Losses {
            d_loss,
            g_loss: g.value(lg).item(),
            rec: g.value(rec).item(),
            feat: g.value(feat).item(),
        };
        self.diverged(losses.g_loss)?;
        let mut grads = collect_grads(&g, lg, &gv, &self.gen.params)?;
        drop(g);
        clip_global_norm(&mut grads, clip);
        self.g_opt.step(self.gen.params.tensors_mut(), &grads)?;
        self.step += 1;
        Ok(losses)
    }

    /// Samples a batch and runs one step of the current phase. Returns the
    /// generator-side loss.
    pub fn train_step(&mut self, data: &[Utterance]) -> Result<f64> {
        let batch = self.sample_batch(data)?;
        match self.phase {
            Phase::Reconstruction => self.phase1_step(&batch),
            Phase::Adversarial => self.phase2_step(&batch).map(|l| l.g_loss),
        }
    }

    pub fn phase_steps(&self) -> u64 {
        match self.phase {
            Phase::Reconstruction => self.config.schedule.phase1_steps,
            Phase::Adversarial => self.config.schedule.phase2_steps,
        }
    }

    /// Runs the current phase to its configured length, checkpointing into
    /// `ckpt_dir` every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, data: &[Utterance], ckpt_dir: Option<&Path>) -> Result<()> {
        let total = self.phase_steps();
        let every = self.config.schedule.checkpoint_every;
        let log_every = self.config.schedule.log_every.max(1);
        while self.step < total {
            let loss = self.train_step(data)?;
            if self.step % log_every == 0 || self.step == total {
                log::info!("phase {} step {} loss {loss:.5}", self.phase as u8, self.step);
            }
            if let Some(dir) = ckpt_dir {
                if (every > 0 && self.step % every == 0) || self.step == total {
                    self.save_in(dir)?;
                }
            }
        }
        Ok(())
    }

    /// Writes `phase<p>_step<s>.spkt` and `latest.spkt` under `dir`.
    pub fn save_in(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let recs = self.to_records();
        let path = dir.join(format!("phase{}_step{:08}.spkt", self.phase as u8, self.step));
        checkpoint::write_records(&path, &recs)?;
        checkpoint::write_records(dir.join("latest.spkt"), &recs)?;
        Ok(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write_records(path, &self.to_records())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(&checkpoint::read_records(path)?)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut r = vec![
            ("meta.step".to_string(), u64s_to_tensor(&[self.step])),
            ("meta.phase".to_string(), u64s_to_tensor(&[self.phase as u64])),
            ("meta.config".to_string(), bytes_to_tensor(self.config.to_text().as_bytes())),
        ];
        let seed = self.rng.get_seed();
        let seed_words: Vec<u64> = seed
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let wp = self.rng.get_word_pos();
        r.push(("rng.seed".into(), u64s_to_tensor(&seed_words)));
        r.push(("rng.stream".into(), u64s_to_tensor(&[self.rng.get_stream()])));
        r.push(("rng.word_pos".into(), u64s_to_tensor(&[(wp >> 64) as u64, wp as u64])));
        push_params(&mut r, "g/", &self.gen.params);
        push_params(&mut r, "d/", &self.disc.params);
        push_adam(&mut r, "g_adam", &self.g_opt, &self.gen.params);
        push_adam(&mut r, "d_adam", &self.d_opt, &self.disc.params);
        r
    }

    pub fn from_records(recs: &[(String, Tensor)]) -> Result<Self> {
        let config = config_from_records(recs)?;
        let mut t = Trainer::new(config, 0)?;
        let get = |name: &str| find(recs, name);
        t.step = one_u64(get("meta.step")?)?;
        t.phase = Phase::from_number(one_u64(get("meta.phase")?)?)?;
        let words = tensor_to_u64s(get("rng.seed")?)?;
        if words.len() != 4 {
            return Err(Error::Checkpoint("rng.seed must hold 4 words".into()));
        }
        let mut seed = [0u8; 32];
        for (i, w) in words.iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(one_u64(get("rng.stream")?)?);
        let wp = tensor_to_u64s(get("rng.word_pos")?)?;
        if wp.len() != 2 {
            return Err(Error::Checkpoint("rng.word_pos must hold 2 words".into()));
        }
        rng.set_word_pos(((wp[0] as u128) << 64) | wp[1] as u128);
        t.rng = rng;
        load_params(recs, "g/", &mut t.gen.params)?;
        load_params(recs, "d/", &mut t.disc.params)?;
        load_adam(recs, "g_adam", &mut t.g_opt, &t.gen.params)?;
        load_adam(recs, "d_adam", &mut t.d_opt, &t.disc.params)?;
        Ok(t)
    }
}

fn find<'a>(recs: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    recs.iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
}

fn one_u64(t: &Tensor) -> Result<u64> {
    match tensor_to_u64s(t)?.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::Checkpoint("expected a single integer".into())),
    }
}

pub fn config_from_records(recs: &[(String, Tensor)]) -> Result<TrainConfig> {
    let bytes = tensor_to_bytes(find(recs, "meta.config")?)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    TrainConfig::parse(&text)
}

fn push_params(r: &mut Vec<(String, Tensor)>, prefix: &str, p: &ParamSet) {
    for (n, t) in p.names().iter().zip(p.tensors()) {
        r.push((format!("{prefix}{n}"), t.clone()));
    }
}

fn load_params(recs: &[(String, Tensor)], prefix: &str, p: &mut ParamSet) -> Result<()> {
    let entries: Vec<(String, Tensor)> = recs
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect();
    p.load_from(&entries)
}

fn push_adam(r: &mut Vec<(String, Tensor)>, prefix: &str, a: &AdamState, p: &ParamSet) {
    r.push((format!("{prefix}.counters"), u64s_to_tensor(&[a.step, a.skipped])));
    let c = a.config;
    r.push((
        format!("{prefix}.config"),
        Tensor::new(&[4], vec![c.learning_rate, c.beta1, c.beta2, c.epsilon]).expect("rank-1"),
    ));
    for (i, (n, t)) in p.names().iter().zip(p.tensors()).enumerate() {
        r.push((format!("{prefix}.m/{n}"), Tensor::new(t.shape(), a.m[i].clone()).expect("same shape")));
        r.push((format!("{prefix}.v/{n}"), Tensor::new(t.shape(), a.v[i].clone()).expect("same shape")));
    }
}

fn load_adam(recs: &[(String, Tensor)], prefix: &str, a: &mut AdamState, p: &ParamSet) -> Result<()> {
    let counters = tensor_to_u64s(find(recs, &format!("{prefix}.counters"))?)?;
    if counters.len() != 2 {
        return Err(Error::Checkpoint(format!("{prefix}.counters must hold 2 words")));
    }
    a.step = counters[0];
    a.skipped = counters[1];
    let c = find(recs, &format!("{prefix}.config"))?.data();
    if c.len() != 4 {
        return Err(Error::Checkpoint(format!("{prefix}.config must hold 4 values")));
    }
    a.config = AdamConfig {
        learning_rate: c[0],
        beta1: c[1],
        beta2: c[2],
        epsilon: c[3],
    };
    for (i, (n, t)) in p.names().iter().zip(p.tensors()).enumerate() {
        for (which, dst) in [("m", &mut a.m[i]), ("v", &mut a.v[i])] {
            let src = find(recs, &format!("{prefix}.{which}/{n}"))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{prefix}.{which}/{n}: shape {:?}", src.shape())));
            }
            dst.copy_from_slice(src.data());
        }
    }
    Ok(())
}

/// Generator and configuration from a checkpoint, for inference.
pub fn load_generator(path: impl AsRef<Path>) -> Result<(TrainConfig, Generator)> {
    let recs = checkpoint::read_records(path)?;
    let config = config_from_records(&recs)?;
    let mut gen = Generator::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    load_params(&recs, "g/", &mut gen.params)?;
    Ok((config, gen))
}

/// A held-out example with the information needed to score it.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub example: TrainingExample,
    pub crop_offset: usize,
    pub text: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub examples: usize,
    /// Mean absolute error over gap frames only.
    pub gap_l1: f64,
    pub nongap_l1: f64,
    pub full_l1: f64,
    pub symbol_accuracy: Option<f64>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "examples {}  gap_l1 {:.4}  nongap_l1 {:.4}  full_l1 {:.4}",
            self.examples, self.gap_l1, self.nongap_l1, self.full_l1
        )?;
        if let Some(a) = self.symbol_accuracy {
            write!(f, "  symbol_accuracy {a:.4}")?;
        }
        Ok(())
    }
}

/// One evaluation-protocol crop and gap per utterance, drawn from `seed`.
pub fn eval_items(config: &TrainConfig, analyzer: &MelAnalyzer, data: &[Utterance], seed: u64) -> Result<Vec<EvalItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need = config.crop_samples();
    let policy = GapPolicy::for_dsp(&config.dsp);
    data.iter()
        .filter(|u| u.audio.len() >= need)
        .map(|u| {
            let start = rng.random_range(0..=u.audio.len() - need);
            let audio = AudioBuffer {
                samples: u.audio.samples[start..start + need].to_vec(),
                sample_rate: u.audio.sample_rate,
            };
            let gap = policy.sample(config.model.n, GapMode::Eval, &mut rng)?;
            Ok(EvalItem {
                example: TrainingExample::build(analyzer, &audio, &u.text, gap, config.model.m)?,
                crop_offset: start,
                text: u.text.clone(),
            })
        })
        .collect()
}

/// Scores `predict` on `items`. L1 values pool every scored cell.
pub fn evaluate_with(
    items: &[EvalItem],
    toy: Option<(&ToyCorpusConfig, &[usize])>,
    mut predict: impl FnMut(&TrainingExample) -> Result<MelSpectrogram>,
) -> Result<EvalReport> {
    let (mut gap_sum, mut gap_n, mut non_sum, mut non_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut hits, mut scored) = (0usize, 0usize);
    for item in items {
        let ex = &item.example;
        let pred = predict(ex)?;
        let target = &ex.target_mel;
        if pred.n_frames != target.n_frames || pred.n_mels != target.n_mels {
            return Err(Error::shape(
                "evaluate",
                &[pred.n_frames, pred.n_mels],
                &[target.n_frames, target.n_mels],
            ));
        }
        for t in 0..target.n_frames {
            let d: f64 = pred.frame(t).iter().zip(target.frame(t)).map(|(a, b)| (a - b).abs()).sum();
            if ex.gap.contains_frame(t) {
                gap_sum += d;
                gap_n += target.n_mels;
            } else {
                non_sum += d;
                non_n += target.n_mels;
            }
        }
        if let Some((cfg, reference)) = toy {
            let (h, s) = gap_symbol_hits(cfg, reference, &pred, &ex.gap, item.crop_offset, &item.text);
            hits += h;
            scored += s;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(EvalReport {
        examples: items.len(),
        gap_l1: mean(gap_sum, gap_n),
        nongap_l1: mean(non_sum, non_n),
        full_l1: mean(gap_sum + non_sum, gap_n + non_n),
        symbol_accuracy: toy.map(|_| mean(hits as f64, scored)),
    })
}

pub fn evaluate(gen: &Generator, items: &[EvalItem], toy: Option<(&ToyCorpusConfig, &[usize])>) -> Result<EvalReport> {
    evaluate_with(items, toy, |ex| gen.forward(&ex.masked_mel, &ex.transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy::{to_dataset, ToyCorpusConfig};

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::toy();
        c.model.k = 1;
        c.model.z = 8;
        c.model.m = 16;
        c.schedule.batch_size = 2;
        c
    }

    fn corpus(n: usize, seed: u64) -> Vec<Utterance> {
        let cfg = ToyCorpusConfig::default();
        to_dataset(&cfg.generate(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()).utterances
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut c = tiny_config();
        c.schedule.phase1_lr = 0.0;
        let mut t = Trainer::new(c, 1).unwrap();
        let data = corpus(4, 2);
        let batch = t.sample_batch(&data).unwrap();
        let first = t.phase1_step(&batch).unwrap();
        for _ in 0..3 {
            assert_eq!(t.phase1_step(&batch).unwrap(), first);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut t = Trainer::new(tiny_config(), 3).unwrap();
        let data = corpus(4, 4);
        for _ in 0..2 {
            t.train_step(&data).unwrap();
        }
        let back = Trainer::from_records(&t.to_records()).unwrap();
        assert_eq!(back.to_records(), t.to_records());
        let mut a = t.clone();
        let mut b = back;
        a.train_step(&data).unwrap();
        b.train_step(&data).unwrap();
        assert_eq!(a.to_records(), b.to_records());
    }

    #[test]
    fn missing_record_is_reported() {
        let t = Trainer::new(tiny_config(), 5).unwrap();
        let recs: Vec<_> = t.to_records().into_iter().filter(|(n, _)| n != "rng.stream").collect();
        assert!(matches!(Trainer::from_records(&recs), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn untrained_discriminator_hinge_is_two_per_logit() {
        let mut c = tiny_config();
        c.disc.init_std = 1e-300;
        let mut t = Trainer::new(c, 6).unwrap();
        t.begin_phase2(7).unwrap();
        for p in t.disc.params.tensors_mut() {
            if p.rank() == 4 {
                p.data_mut().fill(0.0);
            }
        }
        let data = corpus(2, 8);
        let batch = t.sample_batch(&data).unwrap();
        let logits = t.config.disc.logit_count(t.config.model.n) as f64;
        assert_eq!(t.d_loss(&batch).unwrap(), 2.0 * logits);
    }

    #[test]
    fn phase2_step_is_finite() {
        let mut t = Trainer::new(tiny_config(), 9).unwrap();
        t.begin_phase2(10).unwrap();
        let data = corpus(2, 11);
        let batch = t.sample_batch(&data).unwrap();
        let l = t.phase2_step(&batch).unwrap();
        assert!(l.d_loss.is_finite() && l.g_loss.is_finite());
        assert!((l.g_loss - (l.rec + 10.0 * l.feat)).abs() < 1e-9);
    }

    #[test]
    fn oracle_and_zero_predictors() {
        let c = TrainConfig::toy();
        let an = MelAnalyzer::new(c.dsp.clone()).unwrap();
        let toy = ToyCorpusConfig::default();
        let reference = toy.reference_bands(&an).unwrap();
        let data = corpus(40, 12);
        let items = eval_items(&c, &an, &data, 13).unwrap();
        let perfect = evaluate_with(&items, Some((&toy, &reference)), |ex| Ok(ex.target_mel.clone())).unwrap();
        assert_eq!((perfect.gap_l1, perfect.nongap_l1, perfect.full_l1), (0.0, 0.0, 0.0));
        assert_eq!(perfect.symbol_accuracy, Some(1.0));
        let zero = evaluate_with(&items, Some((&toy, &reference)), |ex| {
            let mut m = ex.target_mel.clone();
            m.values.fill(0.0);
            Ok(m)
        })
        .unwrap();
        let acc = zero.symbol_accuracy.unwrap();
        assert!((acc - 1.0 / 8.0).abs() < 0.1, "{acc}");
    }
}
