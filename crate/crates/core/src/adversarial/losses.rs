use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_feat: 10.0 }
    }
}

fn batch_check(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::shape(op, &[a], &[b]));
    }
    Ok(())
}

/// Batch mean of the per-example mean absolute error.
pub fn l1_rec_loss(g: &mut Graph, target: &[Var], pred: &[Var]) -> Result<Var> {
    batch_check("l1_rec_loss", target.len(), pred.len())?;
    let mut terms = Vec::with_capacity(target.len());
    for (t, p) in target.iter().zip(pred) {
        let d = g.sub(*t, *p)?;
        terms.push(g.mean_abs(d));
    }
    batch_mean(g, &terms)
}

/// Batch mean of `Σ_t max(0, 1 − real_t) + Σ_t max(0, 1 + fake_t)`.
pub fn hinge_d_loss(g: &mut Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    batch_check("hinge_d_loss", real.len(), fake.len())?;
    let mut terms = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        if g.value(*r).numel() == 0 || g.value(*f).numel() == 0 {
            return Err(Error::invalid_shape("hinge_d_loss", "empty logit sequence"));
        }
        let r = g.affine(*r, -1.0, 1.0);
        let r = g.max_const(r, 0.0);
        let f = g.affine(*f, 1.0, 1.0);
        let f = g.max_const(f, 0.0);
        let (sr, sf) = (g.sum(r), g.sum(f));
        terms.push(g.add(sr, sf)?);
    }
    batch_mean(g, &terms)
}

/// Batch mean of `(1/ℓ) Σ_i mean|real_i − fake_i|` over the ℓ layers.
pub fn feature_matching_loss(g: &mut Graph, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    batch_check("feature_matching_loss", real.len(), fake.len())?;
    let mut terms = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        if r.len() != f.len() || r.is_empty() {
            return Err(Error::shape("feature_matching_loss", &[r.len()], &[f.len()]));
        }
        let mut layers = Vec::with_capacity(r.len());
        for (a, b) in r.iter().zip(f) {
            let d = g.sub(*a, *b)?;
            layers.push(g.mean_abs(d));
        }
        terms.push(batch_mean(g, &layers)?);
    }
    batch_mean(g, &terms)
}

/// `rec + λ_feat · feat`; the generator gets no direct hinge term.
pub fn generator_loss(g: &mut Graph, rec: Var, feat: Var, w: LossWeights) -> Result<Var> {
    let f = g.scale(feat, w.lambda_feat);
    g.add(rec, f)
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

fn consts(g: &mut Graph, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| g.constant(t.clone())).collect()
}

pub fn l1_rec_value(target: &[Tensor], pred: &[Tensor]) -> Result<f64> {
    eval(|g| {
        let (t, p) = (consts(g, target), consts(g, pred));
        l1_rec_loss(g, &t, &p)
    })
}

pub fn hinge_d_value(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    eval(|g| {
        let (r, f) = (consts(g, real), consts(g, fake));
        hinge_d_loss(g, &r, &f)
    })
}

pub fn feature_matching_value(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<f64> {
    eval(|g| {
        let r: Vec<Vec<Var>> = real.iter().map(|l| consts(g, l)).collect();
        let f: Vec<Vec<Var>> = fake.iter().map(|l| consts(g, l)).collect();
        feature_matching_loss(g, &r, &f)
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{grad_check, Coverage};

    fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::uniform(shape, -2.0, 2.0, rng)
    }

    fn brute_l1(x: &[Tensor], y: &[Tensor]) -> f64 {
        let mut total = 0.0;
        for (a, b) in x.iter().zip(y) {
            let mut s = 0.0;
            for i in 0..a.numel() {
                s += (a.data()[i] - b.data()[i]).abs();
            }
            total += s / a.numel() as f64;
        }
        total / x.len() as f64
    }

    fn brute_hinge(r: &[Tensor], f: &[Tensor]) -> f64 {
        let mut total = 0.0;
        for (a, b) in r.iter().zip(f) {
            for v in a.data() {
                total += (1.0 - v).max(0.0);
            }
            for v in b.data() {
                total += (1.0 + v).max(0.0);
            }
        }
        total / r.len() as f64
    }

    fn brute_fm(r: &[Vec<Tensor>], f: &[Vec<Tensor>]) -> f64 {
        let mut total = 0.0;
        for (a, b) in r.iter().zip(f) {
            let mut per = 0.0;
            for (la, lb) in a.iter().zip(b) {
                let mut s = 0.0;
                for i in 0..la.numel() {
                    s += (la.data()[i] - lb.data()[i]).abs();
                }
                per += s / la.numel() as f64;
            }
            total += per / a.len() as f64;
        }
        total / r.len() as f64
    }

    #[test]
    fn l1_examples() {
        let x = Tensor::zeros(&[240, 64]);
        assert_eq!(l1_rec_value(&[x.clone()], &[x.clone()]).unwrap(), 0.0);
        assert_eq!(l1_rec_value(&[x.clone()], &[Tensor::full(&[240, 64], 1.0)]).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (rand_t(&[240, 64], &mut rng), rand_t(&[240, 64], &mut rng));
        let got = l1_rec_value(&[a.clone()], &[b.clone()]).unwrap();
        assert!((got - brute_l1(&[a], &[b])).abs() <= 1e-12);
        assert!(l1_rec_value(&[x], &[Tensor::zeros(&[240, 63])]).is_err());
    }

    #[test]
    fn hinge_examples() {
        let r = Tensor::new(&[3], vec![1.0, 2.0, 5.0]).unwrap();
        let f = Tensor::new(&[2], vec![-1.0, -3.0]).unwrap();
        assert_eq!(hinge_d_value(&[r], &[f]).unwrap(), 0.0);
        let z = Tensor::zeros(&[1]);
        assert_eq!(hinge_d_value(&[z.clone()], &[z]).unwrap(), 2.0);
        assert!(hinge_d_value(&[Tensor::zeros(&[0])], &[Tensor::zeros(&[1])]).is_err());
    }

    #[test]
    fn feature_matching_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real = vec![vec![rand_t(&[2, 5, 3], &mut rng), rand_t(&[4, 2, 2], &mut rng)]];
        assert_eq!(feature_matching_value(&real, &real).unwrap(), 0.0);
        let shifted: Vec<Vec<Tensor>> = real
            .iter()
            .map(|l| l.iter().map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i] + 1.0)).collect())
            .collect();
        assert!((feature_matching_value(&real, &shifted).unwrap() - 1.0).abs() < 1e-12);
        assert!(feature_matching_value(&real, &[real[0][..1].to_vec()]).is_err());
    }

    #[test]
    fn generator_loss_combination() {
        let mut g = Graph::new();
        let rec = g.constant(Tensor::scalar(0.2));
        let feat = g.constant(Tensor::scalar(0.05));
        let l = generator_loss(&mut g, rec, feat, LossWeights::default()).unwrap();
        assert!((g.value(l).item() - 0.7).abs() < 1e-15);
        let zero = g.constant(Tensor::scalar(0.0));
        let l = generator_loss(&mut g, zero, zero, LossWeights::default()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn generator_loss_gradient_wrt_prediction() {
        use crate::adversarial::{Discriminator, DiscriminatorConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Discriminator::new(DiscriminatorConfig::toy(), &mut rng).unwrap();
        let x = rand_t(&[48, 16], &mut rng);
        let xhat = rand_t(&[48, 16], &mut rng);
        let err = grad_check(&[xhat], Coverage::Sample { per_input: 40, seed: 5 }, |g, v| {
            let dv = d.params.bind(g, false);
            let xt = g.constant(x.clone());
            let real = d.forward(g, &dv, xt, None)?;
            let fake = d.forward(g, &dv, v[0], None)?;
            let rec = l1_rec_loss(g, &[xt], &[v[0]])?;
            let feat = feature_matching_loss(g, &[real.features], &[fake.features])?;
            generator_loss(g, rec, feat, LossWeights::default())
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_match_brute_force(seed in any::<u64>(), batch in 1usize..4, t in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Tensor> = (0..batch).map(|_| rand_t(&[t, 3], &mut rng)).collect();
            let b: Vec<Tensor> = (0..batch).map(|_| rand_t(&[t, 3], &mut rng)).collect();
            prop_assert!((l1_rec_value(&a, &b).unwrap() - brute_l1(&a, &b)).abs() <= 1e-12);
            let r: Vec<Tensor> = (0..batch).map(|_| rand_t(&[t], &mut rng)).collect();
            let f: Vec<Tensor> = (0..batch).map(|_| rand_t(&[t + 1], &mut rng)).collect();
            let h = hinge_d_value(&r, &f).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!((h - brute_hinge(&r, &f)).abs() <= 1e-12);
            let fa: Vec<Vec<Tensor>> = (0..batch).map(|_| vec![rand_t(&[2, t, 2], &mut rng), rand_t(&[t], &mut rng)]).collect();
            let fb: Vec<Vec<Tensor>> = (0..batch).map(|_| vec![rand_t(&[2, t, 2], &mut rng), rand_t(&[t], &mut rng)]).collect();
            let fc: Vec<Vec<Tensor>> = (0..batch).map(|_| vec![rand_t(&[2, t, 2], &mut rng), rand_t(&[t], &mut rng)]).collect();
            let ab = feature_matching_value(&fa, &fb).unwrap();
            prop_assert!((ab - brute_fm(&fa, &fb)).abs() <= 1e-12);
            prop_assert!((ab - feature_matching_value(&fb, &fa).unwrap()).abs() <= 1e-15);
            let ac = feature_matching_value(&fa, &fc).unwrap();
            let cb = feature_matching_value(&fc, &fb).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn hinge_zero_iff_margins(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = Tensor::uniform(&[5], 1.0, 3.0, &mut rng);
            let f = Tensor::uniform(&[5], -3.0, -1.0, &mut rng);
            prop_assert_eq!(hinge_d_value(&[r.clone()], &[f.clone()]).unwrap(), 0.0);
            let mut r2 = r.clone();
            r2.data_mut()[2] = 0.99;
            prop_assert!(hinge_d_value(&[r2], &[f]).unwrap() > 0.0);
        }
    }
}
