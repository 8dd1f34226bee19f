//! Central finite-difference checks of the reverse pass.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Builds a graph from leaf inputs and returns the output node.
pub trait GraphFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> GraphFn for F {}

/// Which input components to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many randomly chosen components per input tensor.
    Sample { per_input: usize, seed: u64 },
}

/// Evaluates `f` and contracts its output with a fixed random cotangent so
/// non-scalar ops are checked against every output direction at once.
type Eval = (f64, Vec<bool>, Option<Vec<Vec<f64>>>);

fn contracted(f: &impl GraphFn, inputs: &[Tensor], track: bool) -> Result<Eval> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check forward output".into()));
    }
    let shape = g.shape(out).to_vec();
    let loss = if shape.is_empty() {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let w = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        g.sum(prod)
    };
    let value = g.value(loss).item();
    let kinks = g.kink_signature();
    if !track {
        return Ok((value, kinks, None));
    }
    let grads = g.backward(loss)?;
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, kinks, Some(per_input)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Maximum over checked components of `|analytic − numeric| / max(1, |numeric|)`.
    pub worst: f64,
    pub checked: usize,
    /// Components skipped because the stencil `x ± h` crossed the kink of an
    /// `|x|` or `max` op, where the central difference measures the jump
    /// rather than the derivative.
    pub straddled: usize,
}

/// Worst relative error; see [`GradCheckReport::worst`].
pub fn grad_check(inputs: &[Tensor], coverage: Coverage, f: impl GraphFn) -> Result<f64> {
    grad_check_report(inputs, coverage, f).map(|r| r.worst)
}

pub fn grad_check_report(inputs: &[Tensor], coverage: Coverage, f: impl GraphFn) -> Result<GradCheckReport> {
    let (_, base_kinks, analytic) = contracted(&f, inputs, true)?;
    let analytic = analytic.expect("tracked");
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let idx: Vec<usize> = match coverage {
            Coverage::All => (0..t.numel()).collect(),
            Coverage::Sample { per_input, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9e37_79b9));
                if t.numel() <= per_input {
                    (0..t.numel()).collect()
                } else {
                    (0..per_input).map(|_| rng.random_range(0..t.numel())).collect()
                }
            }
        };
        for i in idx {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + FD_STEP;
            let (plus, plus_kinks, _) = contracted(&f, &work, false)?;
            work[ti].data_mut()[i] = orig - FD_STEP;
            let (minus, minus_kinks, _) = contracted(&f, &work, false)?;
            work[ti].data_mut()[i] = orig;
            if plus_kinks != base_kinks || minus_kinks != base_kinks {
                report.straddled += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of input {ti}[{i}]")));
            }
            let err = (analytic[ti][i] - numeric).abs() / numeric.abs().max(1.0);
            report.worst = report.worst.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// The primitive ops covered by [`check_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Affine,
    Softmax,
    LayerNorm,
    Elu,
    Gelu,
    MeanAbs,
    Sum,
    Mean,
    Conv2d,
    Transpose,
    Permute,
    Reshape,
    Concat,
    Slice,
    MaxConst,
    Gather,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Affine,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Elu,
        OpKind::Gelu,
        OpKind::MeanAbs,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Conv2d,
        OpKind::Transpose,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::MaxConst,
        OpKind::Gather,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Random values in `[-2, 2]` kept at least `gap` away from `kink`.
fn away_from(shape: &[usize], kink: f64, gap: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(gap..2.0);
        if rng.random::<bool>() {
            kink + mag
        } else {
            kink - mag
        }
    })
}

/// Runs [`grad_check`] for one primitive on random inputs drawn from `seed`.
pub fn check_op(kind: OpKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -2.0, 2.0, &mut rng);
    let all = Coverage::All;
    match kind {
        OpKind::MatMul => grad_check(&[u(&[3, 4]), u(&[4, 5])], all, |g, v| g.matmul(v[0], v[1])),
        OpKind::BatchMatMul => grad_check(&[u(&[2, 3, 4]), u(&[2, 4, 3])], all, |g, v| {
            g.batch_matmul(v[0], v[1])
        }),
        OpKind::Add => grad_check(&[u(&[3, 4]), u(&[3, 4])], all, |g, v| g.add(v[0], v[1])),
        OpKind::Sub => grad_check(&[u(&[3, 4]), u(&[3, 4])], all, |g, v| g.sub(v[0], v[1])),
        OpKind::Mul => grad_check(&[u(&[3, 4]), u(&[3, 4])], all, |g, v| g.mul(v[0], v[1])),
        OpKind::AddRow => grad_check(&[u(&[3, 4]), u(&[4])], all, |g, v| g.add_row(v[0], v[1])),
        OpKind::Affine => grad_check(&[u(&[3, 4])], all, |g, v| Ok(g.affine(v[0], -1.7, 0.3))),
        OpKind::Softmax => grad_check(&[u(&[2, 8])], all, |g, v| g.softmax(v[0])),
        OpKind::LayerNorm => grad_check(&[u(&[2, 16]), u(&[16]), u(&[16])], all, |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        OpKind::Elu => grad_check(&[u(&[3, 5])], all, |g, v| Ok(g.elu(v[0]))),
        OpKind::Gelu => grad_check(&[u(&[3, 5])], all, |g, v| Ok(g.gelu(v[0]))),
        OpKind::MeanAbs => {
            let x = away_from(&[3, 5], 0.0, 1e-3, &mut rng);
            grad_check(&[x], all, |g, v| Ok(g.mean_abs(v[0])))
        }
        OpKind::Sum => grad_check(&[u(&[3, 5])], all, |g, v| Ok(g.sum(v[0]))),
        OpKind::Mean => grad_check(&[u(&[3, 5])], all, |g, v| Ok(g.mean(v[0]))),
        OpKind::Conv2d => grad_check(&[u(&[2, 7, 5]), u(&[3, 2, 3, 3]), u(&[3])], all, |g, v| {
            g.conv2d(v[0], v[1], v[2], (2, 2), (1, 1))
        }),
        OpKind::Transpose => grad_check(&[u(&[2, 3, 4])], all, |g, v| g.transpose(v[0])),
        OpKind::Permute => grad_check(&[u(&[2, 3, 4])], all, |g, v| g.permute(v[0], &[1, 2, 0])),
        OpKind::Reshape => grad_check(&[u(&[2, 6])], all, |g, v| g.reshape(v[0], &[3, 4])),
        OpKind::Concat => grad_check(&[u(&[2, 3]), u(&[2, 2])], all, |g, v| g.concat(&[v[0], v[1]], 1)),
        OpKind::Slice => grad_check(&[u(&[4, 3])], all, |g, v| g.slice(v[0], 0, 1, 2)),
        OpKind::MaxConst => {
            let x = away_from(&[3, 5], 0.5, 1e-3, &mut rng);
            grad_check(&[x], all, |g, v| Ok(g.max_const(v[0], 0.5)))
        }
        OpKind::Gather => grad_check(&[u(&[5, 3])], all, |g, v| g.gather(v[0], &[4, 0, 4, 2])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_across_abs_kink_is_skipped() {
        let x = Tensor::new(&[3], vec![2e-6, 0.5, -0.7]).unwrap();
        let r = grad_check_report(&[x], Coverage::All, |g, v| Ok(g.mean_abs(v[0]))).unwrap();
        assert_eq!((r.checked, r.straddled), (2, 1));
        assert!(r.worst < 1e-9);
    }

    #[test]
    fn linear_map_is_exact() {
        let err = check_op(OpKind::MatMul, 3).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn softmax_and_layer_norm_tolerances() {
        assert!(check_op(OpKind::Softmax, 1).unwrap() <= 1e-6);
        assert!(check_op(OpKind::LayerNorm, 1).unwrap() <= 1e-5);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let x = Tensor::new(&[1], vec![f64::NAN]).unwrap();
        let r = grad_check(&[x], Coverage::All, |g, v| Ok(g.elu(v[0])));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
