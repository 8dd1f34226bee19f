//! Encoder scaling measurements and the gradient-check suite.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    feature_matching_loss, generator_loss, l1_rec_loss, Discriminator, DiscriminatorConfig, LossWeights,
};
use crate::data::GapSpec;
use crate::error::Result;
use crate::model::{Generator, ModelConfig};
use crate::tensor::gradcheck::{check_op, grad_check_report, Coverage, GradCheckReport, OpKind};
use crate::tensor::{Graph, Tensor};

/// Toy widths with the full-size patch shape, mel height and a one-byte
/// transcript, so the key/value rows are dominated by patches.
pub fn scaling_config(frames: usize) -> ModelConfig {
    ModelConfig {
        n: frames,
        d_mel: 64,
        p_t: 8,
        p_f: 4,
        m: 1,
        ..ModelConfig::toy()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRow {
    pub frames: usize,
    pub patches: usize,
    /// Median over runs of one encoder pass.
    pub median_secs: f64,
    pub activation_floats: usize,
}

/// Times the encoder (key/value construction and the latent cross-attention)
/// at each length. Every length shares the same latent and widths.
pub fn bench_scaling(lengths: &[usize], runs: usize, reps: usize) -> Result<Vec<ScalingRow>> {
    lengths
        .iter()
        .map(|&frames| {
            let cfg = scaling_config(frames);
            let gen = Generator::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
            let x = Tensor::uniform(&[cfg.n, cfg.d_mel], -8.0, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
            let ids = vec![b'a' as usize; cfg.m];
            let pass = || -> Result<usize> {
                let mut g = Graph::new();
                let v = gen.params.bind(&mut g, true);
                gen.encode(&mut g, &v, &x, &ids)?;
                Ok(g.activation_floats())
            };
            let activation_floats = pass()?;
            let mut times = Vec::with_capacity(runs);
            for _ in 0..runs.max(1) {
                let t0 = Instant::now();
                for _ in 0..reps.max(1) {
                    pass()?;
                }
                times.push(t0.elapsed().as_secs_f64() / reps.max(1) as f64);
            }
            times.sort_by(f64::total_cmp);
            Ok(ScalingRow {
                frames,
                patches: cfg.patch_count(),
                median_secs: times[times.len() / 2],
                activation_floats,
            })
        })
        .collect()
}

/// Worst relative error of the toy generator loss `rec + λ·feat` against a
/// fixed discriminator, over sampled generator and discriminator parameters.
pub fn check_generator_loss(seed: u64, per_input: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mc = ModelConfig::toy();
    mc.k = 1;
    let gen = Generator::new(mc.clone(), &mut rng)?;
    let disc = Discriminator::new(DiscriminatorConfig::toy(), &mut rng)?;
    let target = Tensor::uniform(&[mc.n, mc.d_mel], -9.0, 0.0, &mut rng);
    let gap = GapSpec::from_frames(16, 12, 500);
    let mut masked = target.clone();
    for t in gap.start_frame..gap.end_frame() {
        for b in 0..mc.d_mel {
            masked.data_mut()[t * mc.d_mel + b] = -11.5;
        }
    }
    let ids: Vec<usize> = (0..mc.m).map(|i| b'a' as usize + i % 8).collect();
    let n_gen = gen.params.len();
    let inputs: Vec<Tensor> = gen.params.tensors().iter().chain(disc.params.tensors()).cloned().collect();
    grad_check_report(&inputs, Coverage::Sample { per_input, seed }, |g, v| {
        let (gv, dv) = v.split_at(n_gen);
        let pred = gen.forward_graph(g, gv, &masked, &ids)?;
        let real = g.constant(target.clone());
        let rec = l1_rec_loss(g, &[real], &[pred])?;
        let fr = disc.forward(g, dv, real, Some(&gap))?.features;
        let ff = disc.forward(g, dv, pred, Some(&gap))?.features;
        let feat = feature_matching_loss(g, &[fr], &[ff])?;
        generator_loss(g, rec, feat, LossWeights::default())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub worst: f64,
    pub checked: usize,
    pub straddled: usize,
}

/// Every primitive op and the composed generator loss, each over `seeds`.
pub fn grad_check_suite(seeds: u64) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for kind in OpKind::ALL {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            worst = worst.max(check_op(kind, s)?);
        }
        rows.push(GradCheckRow {
            name: kind.to_string(),
            worst,
            checked: seeds as usize,
            straddled: 0,
        });
    }
    let mut row = GradCheckRow {
        name: "toy generator loss".into(),
        worst: 0.0,
        checked: 0,
        straddled: 0,
    };
    for s in 0..seeds {
        let r = check_generator_loss(s, 1)?;
        row.worst = row.worst.max(r.worst);
        row.checked += r.checked;
        row.straddled += r.straddled;
    }
    rows.push(row);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_config_patch_counts() {
        assert_eq!(scaling_config(240).patch_count(), 480);
        assert_eq!(scaling_config(480).patch_count(), 960);
    }

    #[test]
    fn composed_loss_gradient() {
        let r = check_generator_loss(3, 1).unwrap();
        assert!(r.worst <= 1e-4, "{r:?}");
        assert!(r.checked > r.straddled, "{r:?}");
    }
}
