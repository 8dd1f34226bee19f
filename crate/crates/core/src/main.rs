use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use speech_inpaint::data::toy::{to_dataset, ToyCorpusConfig};
use speech_inpaint::data::Dataset;
use speech_inpaint::dsp::wav::{read_wav, write_wav};
use speech_inpaint::dsp::MelAnalyzer;
use speech_inpaint::train::bench::{bench_scaling, grad_check_suite};
use speech_inpaint::train::{
    checkpoint, config_from_records, eval_items, evaluate, inpaint, load_generator, usable, Phase, TrainConfig, Trainer,
};
use speech_inpaint::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Text-conditioned speech inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train phase 1 (reconstruction) or phase 2 (adversarial).
    Train(TrainArgs),
    /// Score a checkpoint with the evaluation masking protocol.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fill a gap in a recording.
    Inpaint(InpaintArgs),
    /// Write a synthetic tone corpus.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every op and of the toy generator loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Encoder time and activation memory against input length.
    BenchScaling {
        #[arg(long, value_delimiter = ',', default_value = "240,480,960")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=2))]
    phase: u64,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt_out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, requires = "gap_len_ms", conflicts_with = "auto")]
    gap_start_ms: Option<f64>,
    #[arg(long, requires = "gap_start_ms", conflicts_with = "auto")]
    gap_len_ms: Option<f64>,
    /// Use the longest run of zero samples (the default without gap flags).
    #[arg(long)]
    auto: bool,
    /// Keep the original audio outside the gap.
    #[arg(long)]
    stitch: bool,
    #[arg(long)]
    out: PathBuf,
}

fn load_data(config: &TrainConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::load(dir, config.dsp.sample_rate, config.trim_silence)?;
    let utterances = usable(config, ds.utterances);
    if utterances.is_empty() {
        return Err(Error::InvalidArgument(format!("no usable utterances in {}", dir.display())));
    }
    Ok(Dataset { utterances })
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let phase = Phase::from_number(a.phase)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let recs = checkpoint::read_records(path)?;
            if config_from_records(&recs)? != config {
                log::warn!("{} was written with a different configuration; using the checkpoint's", path.display());
            }
            Trainer::from_records(&recs)?
        }
        None if phase == Phase::Adversarial => {
            return Err(Error::InvalidArgument("phase 2 needs --resume with a phase-1 checkpoint".into()))
        }
        None => Trainer::new(config, a.seed)?,
    };
    match (phase, trainer.phase) {
        (Phase::Adversarial, Phase::Reconstruction) => trainer.begin_phase2(a.seed)?,
        (Phase::Reconstruction, Phase::Adversarial) => {
            return Err(Error::InvalidArgument("cannot resume phase 1 from a phase-2 checkpoint".into()))
        }
        _ => {}
    }
    let data = load_data(&trainer.config, &a.data)?;
    log::info!(
        "phase {} from step {} of {} on {} utterances",
        a.phase,
        trainer.step,
        trainer.phase_steps(),
        data.len()
    );
    trainer.run(&data.utterances, Some(&a.ckpt_out))?;
    println!("{}", a.ckpt_out.join("latest.spkt").display());
    Ok(())
}

fn eval(ckpt: &Path, dir: &Path) -> Result<()> {
    let (config, gen) = load_generator(ckpt)?;
    let data = load_data(&config, dir)?;
    let analyzer = MelAnalyzer::new(config.dsp.clone())?;
    let items = eval_items(&config, &analyzer, &data.utterances, config.eval_seed)?;
    let report = match ToyCorpusConfig::read_manifest(dir, &config.dsp)? {
        Some(toy) => {
            let reference = toy.reference_bands(&analyzer)?;
            evaluate(&gen, &items, Some((&toy, &reference)))?
        }
        None => evaluate(&gen, &items, None)?,
    };
    println!("{report}");
    Ok(())
}

fn run_inpaint(a: InpaintArgs) -> Result<()> {
    let (config, gen) = load_generator(&a.ckpt)?;
    let audio = read_wav(&a.audio)?;
    let text = fs::read_to_string(&a.text).map_err(|e| Error::Io {
        path: a.text.clone(),
        source: e,
    })?;
    let text = text.trim_end_matches(['\n', '\r']);
    let gap = match (a.gap_start_ms, a.gap_len_ms) {
        (Some(s), Some(l)) => {
            if !(s >= 0.0 && l >= 0.0) {
                return Err(Error::InvalidArgument("gap times must be non-negative".into()));
            }
            let sr = audio.sample_rate as f64;
            Some(((s * sr / 1000.0).round() as usize, (l * sr / 1000.0).round() as usize))
        }
        _ => None,
    };
    let r = inpaint(&config, &gen, &audio, text, gap, a.stitch)?;
    log::info!(
        "gap frames {}..{} in window starting at sample {}",
        r.gap.start_frame,
        r.gap.end_frame(),
        r.window_start
    );
    write_wav(&a.out, &r.audio)
}

fn gen_toy(out: &Path, size: usize, seed: u64) -> Result<()> {
    let cfg = ToyCorpusConfig::default();
    let utts = cfg.generate(size, &mut ChaCha8Rng::seed_from_u64(seed))?;
    to_dataset(&utts).write(out)?;
    cfg.write_manifest(out)?;
    println!("wrote {size} utterances to {}", out.display());
    Ok(())
}

fn grad_check(seeds: u64) -> Result<bool> {
    let mut ok = true;
    for row in grad_check_suite(seeds)? {
        let pass = row.worst <= 1e-4;
        ok &= pass;
        println!(
            "{:<20} worst {:.3e}  checked {:>5}  straddled {:>4}  {}",
            row.name,
            row.worst,
            row.checked,
            row.straddled,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn bench(lengths: &[usize], runs: usize) -> Result<()> {
    let rows = bench_scaling(lengths, runs, 5)?;
    println!("{:>7} {:>8} {:>12} {:>12}", "frames", "patches", "median_ms", "act_floats");
    for r in &rows {
        println!(
            "{:>7} {:>8} {:>12.3} {:>12}",
            r.frames,
            r.patches,
            r.median_secs * 1e3,
            r.activation_floats
        );
    }
    for w in rows.windows(2) {
        println!(
            "{} -> {} patches: time x{:.3}, memory x{:.3}",
            w[0].patches,
            w[1].patches,
            w[1].median_secs / w[0].median_secs,
            w[1].activation_floats as f64 / w[0].activation_floats as f64
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval { ckpt, data } => eval(&ckpt, &data),
        Command::Inpaint(a) => run_inpaint(a),
        Command::GenToy { out, size, seed } => gen_toy(&out, size, seed),
        Command::GradCheck { seeds } => match grad_check(seeds) {
            Ok(false) => return ExitCode::from(2),
            other => other.map(|_| ()),
        },
        Command::BenchScaling { lengths, runs } => bench(&lengths, runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
