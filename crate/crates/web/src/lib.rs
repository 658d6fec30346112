//! Browser bindings for the demo page in `www/`.
//!
//! Three operations: a phantom viewer driven by the severity knob, a
//! Jacobian explorer for hand-set affine or single-bump fields, and metric
//! curves for an expansion map under increasing noise. The computations live
//! in [`demo`] so they can be tested natively; the `#[wasm_bindgen]` items
//! only convert errors.

use wasm_bindgen::prelude::*;

pub mod demo {
    use jexpand::metrics::{mae, psnr, spearman, ssim, PEAK};
    use jexpand::phantom::{jacobian_determinant, make_phantom_pair, Bump, DeformationField, FieldKind, JacobianMap, PhantomSpec};
    use jexpand::preprocess::UnitRescale;
    use jexpand::{Result, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[derive(Clone, Debug, PartialEq)]
    pub struct MapStats {
        pub mean: f64,
        pub sd: f64,
        pub min: f64,
        pub max: f64,
        pub non_positive: usize,
    }

    pub fn stats(j: &JacobianMap) -> MapStats {
        MapStats {
            mean: j.mean(),
            sd: j.sd(),
            min: j.min(),
            max: j.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            non_positive: j.non_positive,
        }
    }

    pub struct PhantomData {
        pub size: usize,
        /// Expiration-like slice in HU, row-major.
        pub image: Vec<f32>,
        pub jmap: Vec<f32>,
        pub stats: MapStats,
    }

    pub fn phantom(size: usize, severity: f64, num_blobs: usize, smoothness: f64, noise_sd: f64, seed: u64) -> Result<PhantomData> {
        let pair = make_phantom_pair(&PhantomSpec {
            size: (size, size),
            severity,
            num_blobs,
            smoothness_scale: smoothness,
            noise_sd,
            seed,
        })?;
        Ok(PhantomData {
            size,
            image: pair.image.into_data(),
            jmap: pair.jmap.values.iter().map(|&v| v as f32).collect(),
            stats: stats(&pair.jmap),
        })
    }

    /// `phi(p) = A p` on a `size x size` grid.
    pub fn affine(size: usize, a: [[f64; 2]; 2]) -> Result<JacobianMap> {
        jacobian_determinant(&DeformationField::affine(size, size, a, [0.0, 0.0])?)
    }

    /// One Gaussian bump of displacement centred in the grid.
    pub fn bump(size: usize, amplitude: [f64; 2], width: f64) -> Result<JacobianMap> {
        let c = (size as f64 - 1.0) / 2.0;
        let field = DeformationField::from_kind(
            size,
            size,
            FieldKind::SmoothRandom {
                bumps: vec![Bump {
                    center: [c, c],
                    amplitude,
                    width,
                }],
                scale: 1.0,
            },
        )?;
        jacobian_determinant(&field)
    }

    /// Metric values at each noise level; one entry per level.
    #[derive(Clone, Debug, Default, PartialEq)]
    pub struct NoiseCurve {
        pub psnr: Vec<f64>,
        pub ssim: Vec<f64>,
        pub mae: Vec<f64>,
        pub spearman: Vec<f64>,
    }

    /// Adds Gaussian noise (sd in `[-1, 1]` units) to a phantom's expansion
    /// map rescaled by its own range, and scores the noisy copy against the
    /// clean one. MAE is reported in J units.
    pub fn noise_curve(size: usize, severity: f64, levels: &[f64], seed: u64) -> Result<NoiseCurve> {
        let p = phantom(size, severity, 12, 6.0, 0.0, seed)?;
        let units = UnitRescale::new(p.stats.min, p.stats.max.max(p.stats.min + 1e-6))?;
        // f32 rounding can put the extremes one ulp outside [-1, 1]
        let clean = units.apply(&Tensor::new(vec![size, size], p.jmap)?).map(|v| v.clamp(-1.0, 1.0));
        let clean_j: Vec<f32> = clean.data().iter().map(|&v| units.inverse(v)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut out = NoiseCurve::default();
        for &sd in levels {
            let noise = Normal::new(0.0, sd.max(0.0) as f32).map_err(|e| jexpand::Error::InvalidArgument(e.to_string()))?;
            let noisy: Vec<f32> = clean.data().iter().map(|&v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0)).collect();
            let noisy = Tensor::new(vec![size, size], noisy)?;
            out.psnr.push(psnr(noisy.data(), clean.data(), PEAK)?.db().unwrap_or(f64::INFINITY));
            out.ssim.push(ssim(&noisy, &clean)?);
            let noisy_j: Vec<f32> = noisy.data().iter().map(|&v| units.inverse(v)).collect();
            out.mae.push(mae(&noisy_j, &clean_j)?);
            let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
            out.spearman.push(spearman(&to64(&noisy), &to64(&clean)).unwrap_or(f64::NAN));
        }
        Ok(out)
    }
}

fn js_err(e: jexpand::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Phantom {
    inner: demo::PhantomData,
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.inner.size
    }

    /// Slice intensities in HU.
    pub fn image(&self) -> Vec<f32> {
        self.inner.image.clone()
    }

    pub fn jmap(&self) -> Vec<f32> {
        self.inner.jmap.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn mean_j(&self) -> f64 {
        self.inner.stats.mean
    }

    #[wasm_bindgen(getter)]
    pub fn sd_j(&self) -> f64 {
        self.inner.stats.sd
    }
}

#[wasm_bindgen]
pub fn make_phantom(size: usize, severity: f64, noise_sd: f64, seed: u32) -> Result<Phantom, JsError> {
    demo::phantom(size, severity, 12, 6.0, noise_sd, seed as u64)
        .map(|inner| Phantom { inner })
        .map_err(js_err)
}

#[wasm_bindgen]
pub struct JacobianView {
    values: Vec<f32>,
    stats: demo::MapStats,
}

#[wasm_bindgen]
impl JacobianView {
    pub fn values(&self) -> Vec<f32> {
        self.values.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn mean(&self) -> f64 {
        self.stats.mean
    }

    #[wasm_bindgen(getter)]
    pub fn min(&self) -> f64 {
        self.stats.min
    }

    #[wasm_bindgen(getter)]
    pub fn max(&self) -> f64 {
        self.stats.max
    }

    /// Voxels where the transform folds (J <= 0).
    #[wasm_bindgen(getter)]
    pub fn folded(&self) -> usize {
        self.stats.non_positive
    }
}

fn view(j: jexpand::phantom::JacobianMap) -> JacobianView {
    JacobianView {
        stats: demo::stats(&j),
        values: j.values.iter().map(|&v| v as f32).collect(),
    }
}

#[wasm_bindgen]
pub fn affine_jacobian(size: usize, a11: f64, a12: f64, a21: f64, a22: f64) -> Result<JacobianView, JsError> {
    demo::affine(size, [[a11, a12], [a21, a22]]).map(view).map_err(js_err)
}

#[wasm_bindgen]
pub fn bump_jacobian(size: usize, amp_row: f64, amp_col: f64, width: f64) -> Result<JacobianView, JsError> {
    demo::bump(size, [amp_row, amp_col], width).map(view).map_err(js_err)
}

/// Flattened `[psnr, ssim, mae, spearman]` per noise level.
#[wasm_bindgen]
pub fn noise_metrics(size: usize, severity: f64, levels: Vec<f64>, seed: u32) -> Result<Vec<f64>, JsError> {
    let c = demo::noise_curve(size, severity, &levels, seed as u64).map_err(js_err)?;
    Ok((0..levels.len()).flat_map(|i| [c.psnr[i], c.ssim[i], c.mae[i], c.spearman[i]]).collect())
}
