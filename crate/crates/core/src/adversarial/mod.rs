//! Convolutional discriminator over log-mel spectrograms and the adversarial
//! training losses.

mod losses;

pub use losses::{
    feature_matching_loss, feature_matching_value, generator_loss, hinge_d_loss, hinge_d_value, l1_rec_loss,
    l1_rec_value, LossWeights,
};

use rand::Rng;

use crate::data::GapSpec;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

/// Which part of the spectrogram the discriminator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscInput {
    /// Fully convolutional over every frame.
    Full,
    /// Non-overlapping `chunk_frames` windows; a ragged tail is dropped.
    Chunks,
    /// One `chunk_frames` window centred on the gap, clamped to the input.
    GapCentered,
}

impl std::str::FromStr for DiscInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DiscInput::Full),
            "chunks" => Ok(DiscInput::Chunks),
            "gap" => Ok(DiscInput::GapCentered),
            _ => Err(Error::InvalidArgument(format!("unknown discriminator input `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub chunk_frames: usize,
    pub kernel: usize,
    /// Output channels of the stem and of each block.
    pub filters: Vec<usize>,
    pub time_strides: Vec<usize>,
    pub freq_strides: Vec<usize>,
    pub input: DiscInput,
    pub init_std: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            chunk_frames: 32,
            kernel: 3,
            filters: vec![64, 128, 256, 512],
            time_strides: vec![2, 2, 2, 1],
            freq_strides: vec![2, 2, 2, 1],
            input: DiscInput::Full,
            init_std: 0.02,
        }
    }
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        DiscriminatorConfig {
            filters: vec![8, 16, 16, 16],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.filters.len();
        if n == 0 || self.time_strides.len() != n || self.freq_strides.len() != n {
            return Err(Error::InvalidArgument(
                "filters and strides must be non-empty and of equal length".into(),
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.filters.contains(&0) || self.time_strides.contains(&0) || self.freq_strides.contains(&0) {
            return Err(Error::InvalidArgument("filters and strides must be positive".into()));
        }
        if self.chunk_frames == 0 {
            return Err(Error::InvalidArgument("chunk_frames must be positive".into()));
        }
        let rf = self.receptive_field();
        if rf < self.chunk_frames {
            return Err(Error::InvalidArgument(format!(
                "temporal receptive field {rf} is below {} frames",
                self.chunk_frames
            )));
        }
        Ok(())
    }

    /// Conv layers, including the stem and the final 1×1.
    pub fn layer_count(&self) -> usize {
        2 * self.filters.len() + 2
    }

    /// Temporal receptive field of one logit, in frames.
    pub fn receptive_field(&self) -> usize {
        let k = self.kernel - 1;
        let mut rf = 1 + k;
        let mut jump = 1;
        for &s in &self.time_strides {
            rf += k * jump;
            rf += k * jump;
            jump *= s;
        }
        rf
    }

    /// Logits produced for `frames` input frames.
    pub fn logit_count(&self, frames: usize) -> usize {
        let pad = self.kernel / 2;
        self.time_strides
            .iter()
            .fold(frames, |t, s| (t + 2 * pad - self.kernel) / s + 1)
    }

    /// `(start, len)` frame windows fed to the network.
    pub fn regions(&self, frames: usize, gap: Option<&GapSpec>) -> Result<Vec<(usize, usize)>> {
        if frames < self.chunk_frames {
            return Err(Error::invalid_shape(
                "discriminator",
                format!("{frames} frames, need at least {}", self.chunk_frames),
            ));
        }
        Ok(match self.input {
            DiscInput::Full => vec![(0, frames)],
            DiscInput::Chunks => (0..frames / self.chunk_frames)
                .map(|i| (i * self.chunk_frames, self.chunk_frames))
                .collect(),
            DiscInput::GapCentered => {
                let centre = gap.map_or(frames / 2, |g| g.start_frame + g.len_frames / 2);
                let start = centre.saturating_sub(self.chunk_frames / 2).min(frames - self.chunk_frames);
                vec![(start, self.chunk_frames)]
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvLayer {
    w: usize,
    b: usize,
    ln: Option<(usize, usize)>,
    elu_before: bool,
    stride: (usize, usize),
    pad: usize,
}

/// Discriminator output for one spectrogram.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// `[t]` logits along time.
    pub logits: Var,
    /// One `[c, t, f]` map per conv layer.
    pub features: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
    layers: Vec<ConvLayer>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let k = config.kernel;
        let std = config.init_std;
        let mut add = |p: &mut ParamSet, name: String, c_in: usize, c_out: usize, k: usize, ln: bool, elu: bool, stride| {
            let w = p.push(format!("{name}.w"), Tensor::trunc_normal(&[c_out, c_in, k, k], std, rng));
            let b = p.push(format!("{name}.b"), Tensor::zeros(&[c_out]));
            let ln = ln.then(|| {
                (
                    p.push(format!("{name}.ln.g"), Tensor::full(&[c_out], 1.0)),
                    p.push(format!("{name}.ln.b"), Tensor::zeros(&[c_out])),
                )
            });
            layers.push(ConvLayer {
                w,
                b,
                ln,
                elu_before: elu,
                stride,
                pad: k / 2,
            });
        };
        add(&mut params, "stem".into(), 1, config.filters[0], k, true, false, (1, 1));
        let mut c = config.filters[0];
        for (i, &f) in config.filters.iter().enumerate() {
            let stride = (config.time_strides[i], config.freq_strides[i]);
            add(&mut params, format!("b{i}.c1"), c, f, k, true, true, (1, 1));
            add(&mut params, format!("b{i}.c2"), f, f, k, true, true, stride);
            c = f;
        }
        add(&mut params, "out".into(), c, 1, 1, false, false, (1, 1));
        Ok(Discriminator { config, params, layers })
    }

    /// Runs the network on `mel[frames, bands]` for every configured region.
    /// Logits are concatenated; features are concatenated along time per
    /// layer.
    pub fn forward(&self, g: &mut Graph, v: &[Var], mel: Var, gap: Option<&GapSpec>) -> Result<DiscOutput> {
        let shape = g.shape(mel).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid_shape("discriminator", format!("expected [frames, bands], got {shape:?}")));
        }
        let regions = self.config.regions(shape[0], gap)?;
        let mut logits = Vec::new();
        let mut feats: Vec<Vec<Var>> = vec![Vec::new(); self.layers.len()];
        for (start, len) in regions {
            let x = if len == shape[0] { mel } else { g.slice(mel, 0, start, len)? };
            let out = self.forward_region(g, v, x)?;
            logits.push(out.logits);
            for (i, f) in out.features.into_iter().enumerate() {
                feats[i].push(f);
            }
        }
        let logits = if logits.len() == 1 { logits[0] } else { g.concat(&logits, 0)? };
        let features = feats
            .into_iter()
            .map(|fs| if fs.len() == 1 { Ok(fs[0]) } else { g.concat(&fs, 1) })
            .collect::<Result<_>>()?;
        Ok(DiscOutput { logits, features })
    }

    fn forward_region(&self, g: &mut Graph, v: &[Var], mel: Var) -> Result<DiscOutput> {
        let s = g.shape(mel).to_vec();
        let mut x = g.reshape(mel, &[1, s[0], s[1]])?;
        let mut features = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if l.elu_before {
                x = g.elu(x);
            }
            x = g.conv2d(x, v[l.w], v[l.b], l.stride, (l.pad, l.pad))?;
            if let Some((gamma, beta)) = l.ln {
                let t = g.permute(x, &[1, 2, 0])?;
                let t = g.layer_norm(t, v[gamma], v[beta])?;
                x = g.permute(t, &[2, 0, 1])?;
            }
            features.push(x);
        }
        // [1, t, f] → mean over frequency → [t]
        let s = g.shape(x).to_vec();
        let m = g.reshape(x, &[s[1], s[2]])?;
        let avg = g.constant(Tensor::full(&[s[2], 1], 1.0 / s[2] as f64));
        let l = g.matmul(m, avg)?;
        let logits = g.reshape(l, &[s[1]])?;
        Ok(DiscOutput { logits, features })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn disc(cfg: DiscriminatorConfig) -> Discriminator {
        Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn logits(d: &Discriminator, x: Tensor) -> (Tensor, usize) {
        let mut g = Graph::new();
        let v = d.params.bind(&mut g, false);
        let x = g.constant(x);
        let o = d.forward(&mut g, &v, x, None).unwrap();
        (g.value(o.logits).clone(), o.features.len())
    }

    #[test]
    fn default_geometry() {
        let c = DiscriminatorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.receptive_field(), 63);
        assert_eq!(c.layer_count(), 10);
        assert_eq!(c.logit_count(32), 4);
        assert_eq!(c.logit_count(240), 30);
    }

    #[test]
    fn thirty_two_frames_give_logits() {
        let d = disc(DiscriminatorConfig::toy());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, nf) = logits(&d, Tensor::randn(&[32, 16], 1.0, &mut rng));
        assert!(l.numel() >= 1);
        assert_eq!(l.numel(), 4);
        assert_eq!(nf, d.config.layer_count());
    }

    #[test]
    fn zero_input_zero_logits() {
        let d = disc(DiscriminatorConfig::toy());
        let (l, _) = logits(&d, Tensor::zeros(&[48, 16]));
        assert!(l.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn short_input_rejected() {
        let d = disc(DiscriminatorConfig::toy());
        let mut g = Graph::new();
        let v = d.params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[31, 16]));
        assert!(d.forward(&mut g, &v, x, None).is_err());
    }

    #[test]
    fn receptive_field_too_small_rejected() {
        let c = DiscriminatorConfig {
            filters: vec![4],
            time_strides: vec![1],
            freq_strides: vec![1],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn region_modes() {
        let mut c = DiscriminatorConfig::toy();
        assert_eq!(c.regions(48, None).unwrap(), vec![(0, 48)]);
        c.input = DiscInput::Chunks;
        assert_eq!(c.regions(100, None).unwrap(), vec![(0, 32), (32, 32), (64, 32)]);
        c.input = DiscInput::GapCentered;
        let gap = GapSpec::from_frames(40, 6, 1);
        assert_eq!(c.regions(48, Some(&gap)).unwrap(), vec![(16, 32)]);
        let gap = GapSpec::from_frames(2, 4, 1);
        assert_eq!(c.regions(48, Some(&gap)).unwrap(), vec![(0, 32)]);
        let d = disc(c.clone());
        let (l, _) = logits(&d, Tensor::zeros(&[48, 16]));
        assert_eq!(l.numel(), c.logit_count(32));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn logit_count_matches_conv_arithmetic(frames in 32usize..=512) {
            let d = disc(DiscriminatorConfig {
                filters: vec![2, 2, 2, 2],
                ..Default::default()
            });
            let (l, _) = logits(&d, Tensor::zeros(&[frames, 8]));
            prop_assert_eq!(l.numel(), d.config.logit_count(frames));
            prop_assert_eq!(l.numel(), frames.div_ceil(8));
        }
    }
}
