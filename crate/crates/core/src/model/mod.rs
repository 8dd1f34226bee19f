//! The generator: a Perceiver-style encoder/decoder mapping a masked log-mel
//! spectrogram and a transcript to an inpainted log-mel spectrogram.
//!
//! Patches of the masked spectrogram and embedded transcript bytes form the
//! key/value rows of a cross-attention from a learned latent array. The
//! latent goes through `k` self-attention blocks and is then read out by a
//! learned output query, one row per frame.

mod attention;
pub mod pe;

pub use attention::{block_params, AttnBlock};

use rand::Rng;

use crate::data::TranscriptEncoding;
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Tensor, Var};
use attention::{linear, linear_params};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frames.
    pub n: usize,
    pub d_mel: usize,
    pub p_t: usize,
    pub p_f: usize,
    pub d_patch: usize,
    /// Width of the 2-D Fourier features appended to each patch.
    pub d_ff: usize,
    pub d_e: usize,
    /// Transcript bytes.
    pub m: usize,
    pub d_mod: usize,
    pub z: usize,
    pub d: usize,
    pub k: usize,
    pub h: usize,
    pub head_dim: usize,
    pub d_q: usize,
    pub ffn_hidden: usize,
    /// Inputs are mapped to `(x - mel_offset) / mel_scale`; outputs are
    /// mapped back by the inverse.
    pub mel_scale: f64,
    pub mel_offset: f64,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            n: 240,
            d_mel: 64,
            p_t: 8,
            p_f: 4,
            d_patch: 768,
            d_ff: 256,
            d_e: 1024,
            m: 500,
            d_mod: 16,
            z: 512,
            d: 1024,
            k: 16,
            h: 16,
            head_dim: 64,
            d_q: 512,
            ffn_hidden: 1024,
            mel_scale: 1.0,
            mel_offset: 0.0,
            init_std: 0.02,
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            n: 48,
            d_mel: 16,
            p_t: 4,
            p_f: 4,
            d_patch: 48,
            d_ff: 16,
            d_e: 64,
            m: 64,
            d_mod: 4,
            z: 32,
            d: 64,
            k: 2,
            h: 4,
            head_dim: 16,
            d_q: 32,
            ffn_hidden: 64,
            mel_scale: 8.0,
            mel_offset: -6.0,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let counts = [
            ("n", self.n),
            ("d_mel", self.d_mel),
            ("p_t", self.p_t),
            ("p_f", self.p_f),
            ("d_patch", self.d_patch),
            ("d_ff", self.d_ff),
            ("d_e", self.d_e),
            ("m", self.m),
            ("d_mod", self.d_mod),
            ("z", self.z),
            ("d", self.d),
            ("h", self.h),
            ("head_dim", self.head_dim),
            ("d_q", self.d_q),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.d_e != self.d_patch + self.d_ff {
            return bad(format!("d_e {} != d_patch {} + d_ff {}", self.d_e, self.d_patch, self.d_ff));
        }
        if self.head_dim * self.h != self.d {
            return bad(format!("head_dim {} × h {} != d {}", self.head_dim, self.h, self.d));
        }
        if self.n % self.p_t != 0 || self.d_mel % self.p_f != 0 {
            return bad(format!(
                "{}×{} spectrogram is not divisible into {}×{} patches",
                self.n, self.d_mel, self.p_t, self.p_f
            ));
        }
        if self.d_ff % 4 != 0 || self.d_e % 2 != 0 {
            return bad("d_ff must be a multiple of 4 and d_e even for Fourier features".into());
        }
        if !(self.mel_scale > 0.0) || !(self.init_std > 0.0) || !self.mel_offset.is_finite() {
            return bad("mel_scale and init_std must be positive, mel_offset finite".into());
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.n / self.p_t, self.d_mel / self.p_f)
    }

    pub fn patch_count(&self) -> usize {
        let (a, b) = self.patch_grid();
        a * b
    }

    pub fn kv_width(&self) -> usize {
        self.d_e + self.d_mod
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            kv: (self.patch_count() + self.m, self.kv_width()),
            latent: (self.z, self.d),
            output: (self.n, self.d_mel),
        }
    }
}

/// Shapes of the main intermediate arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub kv: (usize, usize),
    pub latent: (usize, usize),
    pub output: (usize, usize),
}

/// Parameter count per component, in construction order.
pub fn param_breakdown(c: &ModelConfig) -> Vec<(&'static str, usize)> {
    let inner = c.h * c.head_dim;
    vec![
        ("patch projection", (c.p_t * c.p_f + 1) * c.d_patch),
        ("byte embedding", 256 * c.d_e),
        ("modality embeddings", 2 * c.d_mod),
        ("latent", c.z * c.d),
        ("output query", c.n * c.d_q),
        ("encoder cross-attention", block_params(c.d, c.kv_width(), inner, c.ffn_hidden)),
        ("self-attention blocks", c.k * block_params(c.d, c.d, inner, c.ffn_hidden)),
        ("decoder cross-attention", block_params(c.d_q, c.d, inner, c.ffn_hidden)),
        ("output projection", (c.d_q + 1) * c.d_mel),
    ]
}

pub fn count_params(c: &ModelConfig) -> usize {
    param_breakdown(c).iter().map(|(_, n)| n).sum()
}

/// `[n, d_mel]` → `[count, p_t·p_f]`, time-major, each patch row-major.
pub fn patchify(x: &Tensor, p_t: usize, p_f: usize) -> Result<Tensor> {
    let (n, f) = match x.shape() {
        [n, f] => (*n, *f),
        s => return Err(Error::invalid_shape("patchify", format!("expected rank 2, got {s:?}"))),
    };
    if p_t == 0 || p_f == 0 || n % p_t != 0 || f % p_f != 0 {
        return Err(Error::invalid_shape("patchify", format!("{n}×{f} not divisible by {p_t}×{p_f}")));
    }
    let (gt, gf) = (n / p_t, f / p_f);
    let mut out = Vec::with_capacity(n * f);
    for i in 0..gt {
        for j in 0..gf {
            for a in 0..p_t {
                out.extend_from_slice(&x.row(i * p_t + a)[j * p_f..(j + 1) * p_f]);
            }
        }
    }
    Tensor::new(&[gt * gf, p_t * p_f], out)
}

pub fn unpatchify(patches: &Tensor, n: usize, d_mel: usize, p_t: usize, p_f: usize) -> Result<Tensor> {
    if p_t == 0 || p_f == 0 || n % p_t != 0 || d_mel % p_f != 0 || patches.shape() != [n * d_mel / (p_t * p_f), p_t * p_f]
    {
        return Err(Error::invalid_shape(
            "unpatchify",
            format!("{:?} does not tile {n}×{d_mel} with {p_t}×{p_f}", patches.shape()),
        ));
    }
    let gf = d_mel / p_f;
    let mut out = vec![0.0; n * d_mel];
    for (pi, row) in patches.data().chunks(p_t * p_f).enumerate() {
        let (i, j) = (pi / gf, pi % gf);
        for a in 0..p_t {
            let dst = (i * p_t + a) * d_mel + j * p_f;
            out[dst..dst + p_f].copy_from_slice(&row[a * p_f..(a + 1) * p_f]);
        }
    }
    Tensor::new(&[n, d_mel], out)
}

/// Parameter indices into the generator's [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub byte_table: usize,
    pub e_x: usize,
    pub e_t: usize,
    pub latent: usize,
    pub query: usize,
    pub encoder: AttnBlock,
    pub blocks: Vec<AttnBlock>,
    pub decoder: AttnBlock,
    pub out_w: usize,
    pub out_b: usize,
}

/// Generator parameters plus the fixed positional encodings.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub layout: Layout,
    pe_patch: Tensor,
    pe_text: Tensor,
}

impl Generator {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let std = c.init_std;
        let mut p = ParamSet::new();
        let (patch_w, patch_b) = linear_params(&mut p, "patch", c.p_t * c.p_f, c.d_patch, std, rng);
        let byte_table = p.push("byte_embed", Tensor::trunc_normal(&[256, c.d_e], std, rng));
        let e_x = p.push("e_x", Tensor::trunc_normal(&[c.d_mod], std, rng));
        let e_t = p.push("e_t", Tensor::trunc_normal(&[c.d_mod], std, rng));
        let latent = p.push("latent", Tensor::trunc_normal(&[c.z, c.d], std, rng));
        let query = p.push("query", Tensor::trunc_normal(&[c.n, c.d_q], std, rng));
        let encoder = AttnBlock::new(&mut p, "enc", c.d, c.kv_width(), c.h, c.head_dim, c.ffn_hidden, std, rng);
        let blocks = (0..c.k)
            .map(|i| AttnBlock::new(&mut p, &format!("self{i}"), c.d, c.d, c.h, c.head_dim, c.ffn_hidden, std, rng))
            .collect();
        let decoder = AttnBlock::new(&mut p, "dec", c.d_q, c.d, c.h, c.head_dim, c.ffn_hidden, std, rng);
        let (out_w, out_b) = linear_params(&mut p, "out", c.d_q, c.d_mel, std, rng);
        let (gt, gf) = c.patch_grid();
        let pe_patch = pe::fourier_pe(&[gt, gf], c.d_ff / 4, c.d_ff)?;
        let pe_text = pe::fourier_pe(&[c.m], c.d_e / 2, c.d_e)?;
        let layout = Layout {
            patch_w,
            patch_b,
            byte_table,
            e_x,
            e_t,
            latent,
            query,
            encoder,
            blocks,
            decoder,
            out_w,
            out_b,
        };
        Ok(Generator {
            config,
            params: p,
            layout,
            pe_patch,
            pe_text,
        })
    }

    fn check_inputs(&self, masked: &Tensor, ids: &[usize]) -> Result<()> {
        let c = &self.config;
        if masked.shape() != [c.n, c.d_mel] {
            return Err(Error::shape("generator input", masked.shape(), &[c.n, c.d_mel]));
        }
        if ids.len() != c.m {
            return Err(Error::shape("transcript", &[ids.len()], &[c.m]));
        }
        Ok(())
    }

    fn finite(g: &Graph, v: Var, layer: usize, what: &str) -> Result<Var> {
        if g.value(v).is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("layer {layer} ({what})")))
        }
    }

    /// Key/value rows `[patches + m, d_e + d_mod]`.
    pub fn encoder_kv(&self, g: &mut Graph, v: &[Var], masked: &Tensor, ids: &[usize]) -> Result<Var> {
        self.check_inputs(masked, ids)?;
        let c = &self.config;
        let l = &self.layout;
        let scaled = Tensor::from_fn(masked.shape(), |i| (masked.data()[i] - c.mel_offset) / c.mel_scale);
        let patches = g.constant(patchify(&scaled, c.p_t, c.p_f)?);
        let proj = linear(g, patches, v[l.patch_w], v[l.patch_b])?;
        let pe2 = g.constant(self.pe_patch.clone());
        let np = c.patch_count();
        let ex = broadcast_rows(g, v[l.e_x], np)?;
        let patch_rows = g.concat(&[proj, pe2, ex], 1)?;

        let emb = g.gather(v[l.byte_table], ids)?;
        let pe1 = g.constant(self.pe_text.clone());
        let text = g.add(emb, pe1)?;
        let et = broadcast_rows(g, v[l.e_t], c.m)?;
        let text_rows = g.concat(&[text, et], 1)?;
        g.concat(&[patch_rows, text_rows], 0)
    }

    /// Latent after the encoder cross-attention, `[z, d]`.
    pub fn encode(&self, g: &mut Graph, v: &[Var], masked: &Tensor, ids: &[usize]) -> Result<Var> {
        let kv = self.encoder_kv(g, v, masked, ids)?;
        let kv = Self::finite(g, kv, 0, "encoder input")?;
        let lat = self.layout.encoder.forward(g, v, v[self.layout.latent], kv)?;
        Self::finite(g, lat, 1, "encoder cross-attention")
    }

    /// Output `[n, d_mel]` in log-mel units.
    pub fn forward_graph(&self, g: &mut Graph, v: &[Var], masked: &Tensor, ids: &[usize]) -> Result<Var> {
        let mut x = self.encode(g, v, masked, ids)?;
        for (i, b) in self.layout.blocks.iter().enumerate() {
            x = b.forward(g, v, x, x)?;
            x = Self::finite(g, x, 2 + i, "self-attention")?;
        }
        let k = self.layout.blocks.len();
        let y = self.layout.decoder.forward(g, v, v[self.layout.query], x)?;
        let y = Self::finite(g, y, 2 + k, "decoder cross-attention")?;
        let out = linear(g, y, v[self.layout.out_w], v[self.layout.out_b])?;
        let out = g.affine(out, self.config.mel_scale, self.config.mel_offset);
        Self::finite(g, out, 3 + k, "output projection")
    }

    /// Inference on one example.
    pub fn forward(&self, masked: &MelSpectrogram, transcript: &TranscriptEncoding) -> Result<MelSpectrogram> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &v, &masked.to_tensor(), &transcript.ids())?;
        MelSpectrogram::from_tensor(g.value(out), masked.hop_seconds, masked.frame_seconds)
    }

    /// Indices of every parameter after the encoder input layer: the
    /// encoder cross-attention, self-attention blocks, latent, query,
    /// decoder and output projection.
    pub fn post_encoder_indices(&self) -> Vec<usize> {
        let l = &self.layout;
        let mut idx = vec![l.latent, l.query, l.out_w, l.out_b];
        idx.extend(l.encoder.indices());
        for b in &l.blocks {
            idx.extend(b.indices());
        }
        idx.extend(l.decoder.indices());
        idx
    }
}

/// `[d]` → `[rows, d]` by a ones-column product.
fn broadcast_rows(g: &mut Graph, row: Var, rows: usize) -> Result<Var> {
    let d = g.shape(row)[0];
    let r = g.reshape(row, &[1, d])?;
    let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
    g.matmul(ones, r)
}
