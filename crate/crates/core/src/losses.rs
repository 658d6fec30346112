//! Adversarial and reconstruction losses, expressed as graph ops.
//!
//! All reductions are means over every element. Losses that drive top-k
//! selection also expose a per-sample vector whose batch mean equals the
//! scalar.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f32 = 200.0;
pub const DEFAULT_EPS: f32 = 1e-6;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of data in `[-1, 1]`.
pub const SSIM_PEAK: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    Charbonnier,
    L1,
    SsimL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversarialKind {
    Lsgan,
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_recon: f32,
    pub eps_charbonnier: f32,
    pub recon: ReconKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: DEFAULT_LAMBDA,
            eps_charbonnier: DEFAULT_EPS,
            recon: ReconKind::Charbonnier,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_recon >= 0.0 && self.lambda_recon.is_finite()) {
            return Err(Error::Config(format!("lambda_recon {} must be >= 0", self.lambda_recon)));
        }
        if !(self.eps_charbonnier > 0.0 && self.eps_charbonnier.is_finite()) {
            return Err(Error::Config(format!("eps_charbonnier {} must be > 0", self.eps_charbonnier)));
        }
        Ok(())
    }
}

/// A loss as a scalar `[1]` plus its per-sample breakdown `[N]`.
#[derive(Clone, Copy, Debug)]
pub struct Reduced {
    pub total: Var,
    pub per_sample: Var,
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

fn reduce(g: &mut Graph, elementwise: Var) -> Reduced {
    Reduced {
        total: g.mean(elementwise),
        per_sample: g.sample_mean(elementwise),
    }
}

fn charbonnier_map(g: &mut Graph, pred: Var, target: Var, eps: f32) -> Result<Var> {
    same_shape(g, "charbonnier", pred, target)?;
    let r = g.sub(target, pred)?;
    let sq = g.square(r);
    let shifted = g.offset(sq, eps * eps);
    Ok(g.sqrt(shifted))
}

/// `mean(sqrt((target - pred)^2 + eps^2))`.
pub fn charbonnier(g: &mut Graph, pred: Var, target: Var, eps: f32) -> Result<Var> {
    let m = charbonnier_map(g, pred, target, eps)?;
    Ok(g.mean(m))
}

pub fn charbonnier_reduced(g: &mut Graph, pred: Var, target: Var, eps: f32) -> Result<Reduced> {
    let m = charbonnier_map(g, pred, target, eps)?;
    Ok(reduce(g, m))
}

fn l1_map(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, "l1_loss", pred, target)?;
    let r = g.sub(pred, target)?;
    Ok(g.abs(r))
}

pub fn l1_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let m = l1_map(g, pred, target)?;
    Ok(g.mean(m))
}

fn squared_distance_to(g: &mut Graph, scores: Var, label: f32) -> Var {
    let shifted = g.offset(scores, -label);
    g.square(shifted)
}

/// Minimized discriminator objective `mean((r - 1)^2) + mean(f^2)`.
pub fn lsgan_d_loss(g: &mut Graph, score_real: Var, score_fake: Var) -> Result<Var> {
    same_shape(g, "lsgan_d_loss", score_real, score_fake)?;
    let r = squared_distance_to(g, score_real, 1.0);
    let f = squared_distance_to(g, score_fake, 0.0);
    let (r, f) = (g.mean(r), g.mean(f));
    g.add(r, f)
}

/// `mean((f - 1)^2)`.
pub fn lsgan_g_adv_loss(g: &mut Graph, score_fake: Var) -> Var {
    let m = squared_distance_to(g, score_fake, 1.0);
    g.mean(m)
}

fn neg(g: &mut Graph, a: Var) -> Var {
    g.scale(a, -1.0)
}

/// Sigmoid cross-entropy on raw scores, written with softplus:
/// `-log(sigmoid(s)) = softplus(-s)`, `-log(1 - sigmoid(s)) = softplus(s)`.
pub fn bce_adv_losses(g: &mut Graph, score_real: Var, score_fake: Var) -> Result<(Var, Var)> {
    let d = bce_d_loss(g, score_real, score_fake)?;
    Ok((d, bce_g_loss(g, score_fake)))
}

pub fn bce_d_loss(g: &mut Graph, score_real: Var, score_fake: Var) -> Result<Var> {
    same_shape(g, "bce_d_loss", score_real, score_fake)?;
    let nr = neg(g, score_real);
    let real_term = g.softplus(nr);
    let fake_term = g.softplus(score_fake);
    let (a, b) = (g.mean(real_term), g.mean(fake_term));
    g.add(a, b)
}

pub fn bce_g_loss(g: &mut Graph, score_fake: Var) -> Var {
    let nf = neg(g, score_fake);
    let t = g.softplus(nf);
    g.mean(t)
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn ssim_constants() -> (f32, f32) {
    let c1 = (SSIM_K1 * SSIM_PEAK).powi(2);
    let c2 = (SSIM_K2 * SSIM_PEAK).powi(2);
    (c1 as f32, c2 as f32)
}

/// Local SSIM map `[N*C, 1, H-10, W-10]` over valid window positions.
fn ssim_map(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, "ssim_loss", pred, target)?;
    let [n, c, h, w] = g.value(pred).dims4("ssim_loss")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim_loss",
            format!("H={h}, W={w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps: Vec<f32> = gaussian_taps().into_iter().map(|v| v as f32).collect();
    let kv = g.constant(Tensor::new([1, 1, SSIM_WINDOW, 1], taps.clone())?);
    let kh = g.constant(Tensor::new([1, 1, 1, SSIM_WINDOW], taps)?);
    // the Gaussian window is separable: a vertical then a horizontal pass
    let blur = |g: &mut Graph, v: Var| -> Result<Var> {
        let t = g.conv2d(v, kv, None, 1, 0)?;
        g.conv2d(t, kh, None, 1, 0)
    };
    let x = g.reshape(pred, &[n * c, 1, h, w])?;
    let y = g.reshape(target, &[n * c, 1, h, w])?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let mx = blur(g, x)?;
    let my = blur(g, y)?;
    let exx = blur(g, xx)?;
    let eyy = blur(g, yy)?;
    let exy = blur(g, xy)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;
    let (c1, c2) = ssim_constants();
    let t = g.scale(mxy, 2.0);
    let num_l = g.offset(t, c1);
    let t = g.scale(cxy, 2.0);
    let num_s = g.offset(t, c2);
    let t = g.add(mx2, my2)?;
    let den_l = g.offset(t, c1);
    let t = g.add(vx, vy)?;
    let den_s = g.offset(t, c2);
    let num = g.mul(num_l, num_s)?;
    let den = g.mul(den_l, den_s)?;
    g.div(num, den)
}

fn one_minus(g: &mut Graph, a: Var) -> Var {
    let t = g.scale(a, -1.0);
    g.offset(t, 1.0)
}

/// `1 - SSIM`, Gaussian 11x11 window (sigma 1.5), peak 2.
pub fn ssim_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let m = ssim_map(g, pred, target)?;
    let s = g.mean(m);
    Ok(one_minus(g, s))
}

fn ssim_loss_reduced(g: &mut Graph, pred: Var, target: Var) -> Result<Reduced> {
    let n = g.shape(pred)[0];
    let m = ssim_map(g, pred, target)?;
    // one map per (sample, channel); fold channels back into the sample axis
    let [nc, _, oh, ow] = g.value(m).dims4("ssim_loss")?;
    let m = g.reshape(m, &[n, nc / n, oh, ow])?;
    let r = reduce(g, m);
    Ok(Reduced {
        total: one_minus(g, r.total),
        per_sample: one_minus(g, r.per_sample),
    })
}

/// Weighted reconstruction term `lambda * recon(pred, target)`.
pub fn recon_loss(g: &mut Graph, pred: Var, target: Var, w: &LossWeights) -> Result<Reduced> {
    let r = match w.recon {
        ReconKind::Charbonnier => charbonnier_reduced(g, pred, target, w.eps_charbonnier)?,
        ReconKind::L1 => {
            let m = l1_map(g, pred, target)?;
            reduce(g, m)
        }
        ReconKind::SsimL1 => {
            let s = ssim_loss_reduced(g, pred, target)?;
            let m = l1_map(g, pred, target)?;
            let l = reduce(g, m);
            Reduced {
                total: g.add(s.total, l.total)?,
                per_sample: g.add(s.per_sample, l.per_sample)?,
            }
        }
    };
    Ok(Reduced {
        total: g.scale(r.total, w.lambda_recon),
        per_sample: g.scale(r.per_sample, w.lambda_recon),
    })
}

/// Adversarial part of the generator objective.
pub fn generator_adv(g: &mut Graph, score_fake: Var, kind: AdversarialKind) -> Reduced {
    let m = match kind {
        AdversarialKind::Lsgan => squared_distance_to(g, score_fake, 1.0),
        AdversarialKind::Bce => {
            let nf = neg(g, score_fake);
            g.softplus(nf)
        }
    };
    reduce(g, m)
}

/// Parts of the generator objective, kept separate for logging.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub adv: Reduced,
    pub recon: Reduced,
    pub total: Reduced,
}

/// `lsgan_g_adv_loss + lambda * charbonnier` (or the configured variants).
pub fn generator_total_loss(
    g: &mut Graph,
    score_fake: Var,
    pred: Var,
    target: Var,
    w: &LossWeights,
    adv: AdversarialKind,
) -> Result<GeneratorLoss> {
    let a = generator_adv(g, score_fake, adv);
    let r = recon_loss(g, pred, target, w)?;
    let total = Reduced {
        total: g.add(a.total, r.total)?,
        per_sample: g.add(a.per_sample, r.per_sample)?,
    };
    Ok(GeneratorLoss { adv: a, recon: r, total })
}

pub fn scalar(g: &Graph, v: Var) -> f32 {
    g.value(v).data()[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(g: &mut Graph, shape: &[usize], data: Vec<f32>) -> Var {
        g.constant(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn charbonnier_anchors() {
        let mut g = Graph::new();
        let p = c(&mut g, &[2, 1, 2, 2], vec![0.3, -0.1, 0.7, 0.0, 1.0, -1.0, 0.5, 0.25]);
        let l = charbonnier(&mut g, p, p, DEFAULT_EPS).unwrap();
        assert_eq!(scalar(&g, l), 1e-6);
        let t = c(&mut g, &[1, 1, 1, 2], vec![3.0, 3.0]);
        let z = c(&mut g, &[1, 1, 1, 2], vec![0.0, 0.0]);
        let l = charbonnier(&mut g, z, t, DEFAULT_EPS).unwrap();
        assert!((scalar(&g, l) as f64 - 3.0).abs() < 1e-9);
        assert!(charbonnier(&mut g, z, p, DEFAULT_EPS).is_err());
    }

    #[test]
    fn lsgan_anchors() {
        let mut g = Graph::new();
        let one = c(&mut g, &[1, 1, 2, 2], vec![1.0; 4]);
        let zero = c(&mut g, &[1, 1, 2, 2], vec![0.0; 4]);
        let half = c(&mut g, &[1, 1, 2, 2], vec![0.5; 4]);
        let d = lsgan_d_loss(&mut g, one, zero).unwrap();
        assert_eq!(scalar(&g, d), 0.0);
        let d = lsgan_d_loss(&mut g, half, half).unwrap();
        assert_eq!(scalar(&g, d), 0.5);
        for (s, want) in [(one, 0.0), (zero, 1.0), (half, 0.25)] {
            let l = lsgan_g_adv_loss(&mut g, s);
            assert_eq!(scalar(&g, l), want);
        }
    }

    #[test]
    fn generator_total_anchors() {
        let mut g = Graph::new();
        let one = c(&mut g, &[2, 1, 2, 2], vec![1.0; 8]);
        let y = c(&mut g, &[2, 1, 4, 4], (0..32).map(|i| i as f32 / 40.0).collect());
        let l = generator_total_loss(&mut g, one, y, y, &LossWeights::default(), AdversarialKind::Lsgan).unwrap();
        assert!((scalar(&g, l.total.total) - 2e-4).abs() < 1e-9);

        let zero_lambda = LossWeights {
            lambda_recon: 0.0,
            ..LossWeights::default()
        };
        let s = c(&mut g, &[2, 1, 2, 2], vec![0.1, 0.4, -0.3, 0.9, 0.2, 0.0, 1.5, -1.0]);
        let p = c(&mut g, &[2, 1, 4, 4], vec![0.5; 32]);
        let l = generator_total_loss(&mut g, s, p, y, &zero_lambda, AdversarialKind::Lsgan).unwrap();
        let adv = lsgan_g_adv_loss(&mut g, s);
        assert_eq!(scalar(&g, l.total.total), scalar(&g, adv));
    }

    #[test]
    fn bce_anchors() {
        let mut g = Graph::new();
        let z = c(&mut g, &[1, 1, 1, 2], vec![0.0, 0.0]);
        let (d, gen) = bce_adv_losses(&mut g, z, z).unwrap();
        assert!((scalar(&g, d) - 2.0 * std::f32::consts::LN_2).abs() < 1e-6);
        assert!((scalar(&g, gen) - std::f32::consts::LN_2).abs() < 1e-6);
        let big = c(&mut g, &[1, 1, 1, 2], vec![1e4, 1e4]);
        let small = c(&mut g, &[1, 1, 1, 2], vec![-1e4, -1e4]);
        let (d, _) = bce_adv_losses(&mut g, big, small).unwrap();
        assert!(scalar(&g, d) < 1e-6);
        let mut g = Graph::new();
        let r = g.param(Tensor::new([1, 1, 1, 2], vec![1e4, -1e4]).unwrap());
        let f = g.param(Tensor::new([1, 1, 1, 2], vec![-1e4, 1e4]).unwrap());
        let (d, gen) = bce_adv_losses(&mut g, r, f).unwrap();
        assert!(scalar(&g, d).is_finite() && scalar(&g, gen).is_finite());
        let total = g.add(d, gen).unwrap();
        g.backward(total).unwrap();
        assert!(g.grad(r).unwrap().is_finite() && g.grad(f).unwrap().is_finite());
    }

    #[test]
    fn l1_and_ssim_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let a = g.constant(Tensor::uniform([2, 1, 16, 16], -1.0, 1.0, &mut rng));
        let l = l1_loss(&mut g, a, a).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let s = ssim_loss(&mut g, a, a).unwrap();
        assert!(scalar(&g, s).abs() < 1e-6);
        let b = g.offset(a, 0.2);
        let l = l1_loss(&mut g, b, a).unwrap();
        assert!((scalar(&g, l) - 0.2).abs() < 1e-6);
        let small = c(&mut g, &[1, 1, 8, 8], vec![0.0; 64]);
        assert!(ssim_loss(&mut g, small, small).is_err());
    }

    #[test]
    fn per_sample_mean_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for recon in [ReconKind::Charbonnier, ReconKind::L1, ReconKind::SsimL1] {
            let mut g = Graph::new();
            let s = g.constant(Tensor::randn([4, 1, 3, 3], 1.0, &mut rng));
            let p = g.constant(Tensor::uniform([4, 1, 16, 16], -1.0, 1.0, &mut rng));
            let t = g.constant(Tensor::uniform([4, 1, 16, 16], -1.0, 1.0, &mut rng));
            let w = LossWeights {
                recon,
                ..LossWeights::default()
            };
            let l = generator_total_loss(&mut g, s, p, t, &w, AdversarialKind::Lsgan).unwrap();
            let per = g.value(l.total.per_sample).data();
            let mean = per.iter().map(|&v| v as f64).sum::<f64>() / per.len() as f64;
            let total = scalar(&g, l.total.total) as f64;
            assert!((mean - total).abs() <= 1e-6 * total.abs().max(1.0), "{recon:?}: {mean} vs {total}");
        }
    }

    #[test]
    fn lsgan_invariant_to_spatial_permutation() {
        let mut g = Graph::new();
        let v = vec![0.3, -0.2, 1.4, 0.8, 0.0, 2.0];
        let mut p = v.clone();
        p.reverse();
        let a = c(&mut g, &[1, 1, 2, 3], v.clone());
        let b = c(&mut g, &[1, 1, 2, 3], p);
        let la = lsgan_g_adv_loss(&mut g, a);
        let lb = lsgan_g_adv_loss(&mut g, b);
        assert!((scalar(&g, la) - scalar(&g, lb)).abs() < 1e-6);
    }

    fn ch(r: &[f32], eps: f32) -> f32 {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([1, r.len()]));
        let t = g.constant(Tensor::new([1, r.len()], r.to_vec()).unwrap());
        let l = charbonnier(&mut g, z, t, eps).unwrap();
        scalar(&g, l)
    }

    proptest! {
        #[test]
        fn charbonnier_close_to_l1(r in proptest::collection::vec(-3.0f32..3.0, 1..32)) {
            let eps = 1e-3f32;
            let l1 = r.iter().map(|v| v.abs() as f64).sum::<f64>() / r.len() as f64;
            let c = ch(&r, eps) as f64;
            prop_assert!(c >= l1 - 1e-6);
            prop_assert!(c - l1 <= eps as f64 + 1e-6);
            prop_assert!(c >= eps as f64 * (1.0 - 1e-6));
        }

        #[test]
        fn charbonnier_midpoint_convex(a in -3.0f32..3.0, b in -3.0f32..3.0) {
            let eps = 1e-2f32;
            let mid = ch(&[(a + b) / 2.0], eps);
            let avg = (ch(&[a], eps) + ch(&[b], eps)) / 2.0;
            prop_assert!(mid <= avg + 1e-6);
        }

        #[test]
        fn losses_non_negative(v in proptest::collection::vec(-5.0f32..5.0, 8)) {
            let mut g = Graph::new();
            let a = g.constant(Tensor::new([1, 1, 2, 4], v.clone()).unwrap());
            let b = g.constant(Tensor::new([1, 1, 2, 4], v.iter().rev().copied().collect()).unwrap());
            let d = lsgan_d_loss(&mut g, a, b).unwrap();
            let ga = lsgan_g_adv_loss(&mut g, b);
            let (bd, bg) = bce_adv_losses(&mut g, a, b).unwrap();
            let l1 = l1_loss(&mut g, a, b).unwrap();
            for x in [d, ga, bd, bg, l1] {
                prop_assert!(scalar(&g, x) >= 0.0);
            }
        }
    }
}
