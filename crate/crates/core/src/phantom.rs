//! Synthetic paired data: deformation fields, their Jacobian-determinant
//! maps, and expiration-like images coupled to those maps.
//!
//! Ground-truth expansion comes from known fields rather than from
//! registration, so every map has an exact analytic reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian-windowed vector bump `amplitude * exp(-|p - center|^2 / (2 width^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub amplitude: [f64; 2],
    pub width: f64,
}

impl Bump {
    fn eval(&self, y: f64, x: f64) -> [f64; 2] {
        let dy = y - self.center[0];
        let dx = x - self.center[1];
        let w = (-(dy * dy + dx * dx) / (2.0 * self.width * self.width)).exp();
        [self.amplitude[0] * w, self.amplitude[1] * w]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FieldKind {
    /// `u(p) = (A - I) p + t` with `p = (row, col)`.
    Affine { a: [[f64; 2]; 2], t: [f64; 2] },
    /// `u(p) = scale * sum of bumps`.
    SmoothRandom { bumps: Vec<Bump>, scale: f64 },
}

/// Displacement (in voxels) sampled on an `H x W` grid. The transform is
/// `phi(p) = p + u(p)`, with `p = (row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    displacement: Vec<[f64; 2]>,
    kind: FieldKind,
}

impl DeformationField {
    pub fn from_kind(height: usize, width: usize, kind: FieldKind) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("field grid must be non-empty".into()));
        }
        let mut field = Self {
            height,
            width,
            displacement: Vec::with_capacity(height * width),
            kind,
        };
        for r in 0..height {
            for c in 0..width {
                let d = field.displacement_at(r as f64, c as f64);
                if !(d[0].is_finite() && d[1].is_finite()) {
                    return Err(Error::NonFinite("deformation field"));
                }
                field.displacement.push(d);
            }
        }
        Ok(field)
    }

    pub fn identity(height: usize, width: usize) -> Result<Self> {
        Self::affine(height, width, [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    }

    pub fn affine(height: usize, width: usize, a: [[f64; 2]; 2], t: [f64; 2]) -> Result<Self> {
        Self::from_kind(height, width, FieldKind::Affine { a, t })
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn displacement(&self) -> &[[f64; 2]] {
        &self.displacement
    }

    /// Continuous displacement at an arbitrary (row, col) position.
    pub fn displacement_at(&self, y: f64, x: f64) -> [f64; 2] {
        match &self.kind {
            FieldKind::Affine { a, t } => [
                (a[0][0] - 1.0) * y + a[0][1] * x + t[0],
                a[1][0] * y + (a[1][1] - 1.0) * x + t[1],
            ],
            FieldKind::SmoothRandom { bumps, scale } => {
                let mut u = [0.0, 0.0];
                for b in bumps {
                    let v = b.eval(y, x);
                    u[0] += v[0];
                    u[1] += v[1];
                }
                [scale * u[0], scale * u[1]]
            }
        }
    }
}

/// Per-voxel local volume-change ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Voxels with `J <= 0` (folding); zero for orientation-preserving fields.
    pub non_positive: usize,
}

impl JacobianMap {
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation.
    pub fn sd(&self) -> f64 {
        let m = self.mean();
        (self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.values.iter().map(|&v| v as f32).collect();
        Tensor::from_parts(vec![self.height, self.width], data)
    }
}

/// Derivative of `f` along one axis of length `n` at index `i`.
///
/// Fourth-order stencils: five-point central inside, five-point one-sided
/// (or off-centre) in the two outer rows. Axes shorter than 5 fall back to
/// the second-order three-point stencils. All of them are exact for affine
/// data, and the fourth-order error on smooth bumps is far below the
/// second-order one.
fn axis_derivative(n: usize, i: usize, f: impl Fn(usize) -> f64) -> f64 {
    if n < 5 {
        return if i == 0 {
            (-3.0 * f(0) + 4.0 * f(1) - f(2)) / 2.0
        } else if i == n - 1 {
            (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / 2.0
        } else {
            (f(i + 1) - f(i - 1)) / 2.0
        };
    }
    match i {
        0 => (-25.0 * f(0) + 48.0 * f(1) - 36.0 * f(2) + 16.0 * f(3) - 3.0 * f(4)) / 12.0,
        1 => (-3.0 * f(0) - 10.0 * f(1) + 18.0 * f(2) - 6.0 * f(3) + f(4)) / 12.0,
        _ if i == n - 2 => (3.0 * f(n - 1) + 10.0 * f(n - 2) - 18.0 * f(n - 3) + 6.0 * f(n - 4) - f(n - 5)) / 12.0,
        _ if i == n - 1 => (25.0 * f(n - 1) - 48.0 * f(n - 2) + 36.0 * f(n - 3) - 16.0 * f(n - 4) + 3.0 * f(n - 5)) / 12.0,
        _ => (f(i - 2) - 8.0 * f(i - 1) + 8.0 * f(i + 1) - f(i + 2)) / 12.0,
    }
}

/// Determinant of `d phi / d p` at every grid voxel, `phi(p) = p + u(p)`.
pub fn jacobian_determinant(field: &DeformationField) -> Result<JacobianMap> {
    let (h, w) = field.grid_shape();
    if h < 3 || w < 3 {
        return Err(Error::InvalidArgument(format!(
            "jacobian needs a grid of at least 3x3, got {h}x{w}"
        )));
    }
    let u = field.displacement();
    let at = |r: usize, c: usize, comp: usize| u[r * w + c][comp];
    let mut values = Vec::with_capacity(h * w);
    let mut non_positive = 0;
    for r in 0..h {
        for c in 0..w {
            let duy_dy = axis_derivative(h, r, |k| at(k, c, 0));
            let duy_dx = axis_derivative(w, c, |k| at(r, k, 0));
            let dux_dy = axis_derivative(h, r, |k| at(k, c, 1));
            let dux_dx = axis_derivative(w, c, |k| at(r, k, 1));
            let j = (1.0 + duy_dy) * (1.0 + dux_dx) - duy_dx * dux_dy;
            if j <= 0.0 {
                non_positive += 1;
            }
            values.push(j);
        }
    }
    Ok(JacobianMap {
        height: h,
        width: w,
        values,
        non_positive,
    })
}

/// Parameters of one synthetic phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: (usize, usize),
    /// Disease-severity stand-in in `[0, 1]`; higher means less expansion.
    pub severity: f64,
    pub num_blobs: usize,
    /// Bump width in voxels.
    pub smoothness_scale: f64,
    /// Gaussian image noise in HU.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: (64, 64),
            severity: 0.5,
            num_blobs: 12,
            smoothness_scale: 6.0,
            noise_sd: 20.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.0 < 16 || self.size.1 < 16 {
            return Err(Error::InvalidArgument(format!(
                "phantom size must be at least 16x16, got {:?}",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::InvalidArgument(format!(
                "severity {} outside [0, 1]",
                self.severity
            )));
        }
        if !(self.smoothness_scale > 0.0) || !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidArgument(
                "smoothness_scale must be > 0 and noise_sd >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Target mean and SD of the expansion map for this severity.
    pub fn target_moments(&self) -> (f64, f64) {
        let s = self.severity;
        (1.9 + (1.1 - 1.9) * s, 0.5 + (0.15 - 0.5) * s)
    }
}

pub const MIN_FIELD_JACOBIAN: f64 = 0.05;
const MAX_HALVINGS: u32 = 20;

/// Sum of `num_blobs` random Gaussian bumps, halved until `min J > 0.05`.
pub fn make_smooth_field(spec: &PhantomSpec) -> Result<DeformationField> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amp = Normal::new(0.0, 0.5 * spec.smoothness_scale).expect("positive scale");
    let bumps: Vec<Bump> = (0..spec.num_blobs)
        .map(|_| Bump {
            center: [rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)],
            amplitude: [amp.sample(&mut rng), amp.sample(&mut rng)],
            width: spec.smoothness_scale,
        })
        .collect();
    let mut scale = 1.0;
    let mut min_j = f64::NEG_INFINITY;
    for _ in 0..=MAX_HALVINGS {
        let field = DeformationField::from_kind(
            h,
            w,
            FieldKind::SmoothRandom {
                bumps: bumps.clone(),
                scale,
            },
        )?;
        min_j = jacobian_determinant(&field)?.min();
        if min_j > MIN_FIELD_JACOBIAN {
            return Ok(field);
        }
        scale *= 0.5;
    }
    Err(Error::FieldGeneration {
        min_j,
        halvings: MAX_HALVINGS,
    })
}

/// Fixed monotone map from expansion ratio to expiration intensity (HU).
/// Lower expansion reads darker, as in air-trapped tissue.
pub fn expansion_to_hu(j: f64) -> f64 {
    -1000.0 + 1100.0 * (1.0 - (-j.max(0.0) / 1.2).exp())
}

/// Texture amplitude in HU.
const TEXTURE_HU: f64 = 15.0;
/// Weight of the ventral-dorsal ramp relative to the field's own pattern.
const RAMP_WEIGHT: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct PhantomPair {
    /// Expiration-like slice in HU, shape `[H, W]`.
    pub image: Tensor,
    pub jmap: JacobianMap,
    pub field: DeformationField,
}

/// Generates one (image, expansion map) pair.
///
/// The Jacobian of the smooth field supplies the spatial pattern. Its
/// standardized values are blended with a linear row ramp (dorsal voxels
/// expand more) and remapped to the severity's target mean and SD, then
/// floored at [`MIN_FIELD_JACOBIAN`]. An identity field (`num_blobs = 0`)
/// has no pattern to remap and yields the constant map `J = 1`.
pub fn make_phantom_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    let field = make_smooth_field(spec)?;
    let raw = jacobian_determinant(&field)?;
    let (h, w) = spec.size;
    let jmap = if spec.num_blobs == 0 {
        raw
    } else {
        modulate(&raw, spec)
    };

    // Stream 1 keeps image randomness independent of the field draw.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let phase_y = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_x = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, spec.noise_sd).expect("validated noise sd");
    let mut image = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let texture = TEXTURE_HU
                * (std::f64::consts::TAU * r as f64 / 7.0 + phase_y).sin()
                * (std::f64::consts::TAU * c as f64 / 5.0 + phase_x).sin();
            let n = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            image.push((expansion_to_hu(jmap.values[r * w + c]) + texture + n) as f32);
        }
    }
    Ok(PhantomPair {
        image: Tensor::new(vec![h, w], image)?,
        jmap,
        field,
    })
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - m) / sd).collect()
}

fn modulate(raw: &JacobianMap, spec: &PhantomSpec) -> JacobianMap {
    let (h, w) = (raw.height, raw.width);
    let pattern = standardize(&raw.values);
    let ramp: Vec<f64> = (0..h * w)
        .map(|i| (i / w) as f64 / (h - 1) as f64 * 2.0 - 1.0)
        .collect();
    let ramp = standardize(&ramp);
    let blended: Vec<f64> = pattern.iter().zip(&ramp).map(|(p, r)| p + RAMP_WEIGHT * r).collect();
    let z = standardize(&blended);
    let (mean, sd) = spec.target_moments();
    let values: Vec<f64> = z.iter().map(|z| (mean + sd * z).max(MIN_FIELD_JACOBIAN)).collect();
    JacobianMap {
        height: h,
        width: w,
        values,
        non_positive: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_field_gives_exact_ones() {
        let f = DeformationField::identity(9, 7).unwrap();
        let j = jacobian_determinant(&f).unwrap();
        assert!(j.values.iter().all(|&v| v == 1.0));
        assert_eq!(j.non_positive, 0);
    }

    #[test]
    fn anisotropic_affine() {
        let f = DeformationField::affine(12, 10, [[1.2, 0.0], [0.0, 0.8]], [0.3, -1.0]).unwrap();
        let j = jacobian_determinant(&f).unwrap();
        for v in &j.values {
            assert!((v - 0.96).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn uniform_scaling_is_s_squared() {
        let s = 1.3;
        let f = DeformationField::affine(8, 8, [[s, 0.0], [0.0, s]], [0.0, 0.0]).unwrap();
        let j = jacobian_determinant(&f).unwrap();
        for v in &j.values {
            assert!((v - s * s).abs() < 1e-9);
        }
    }

    #[test]
    fn folding_is_reported() {
        let f = DeformationField::affine(5, 5, [[-1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]).unwrap();
        let j = jacobian_determinant(&f).unwrap();
        assert_eq!(j.non_positive, 25);
        let tiny = DeformationField::identity(2, 5).unwrap();
        assert!(jacobian_determinant(&tiny).is_err());
    }

    #[test]
    fn zero_blobs_is_identity() {
        let spec = PhantomSpec {
            num_blobs: 0,
            ..PhantomSpec::default()
        };
        let f = make_smooth_field(&spec).unwrap();
        assert!(f.displacement().iter().all(|d| *d == [0.0, 0.0]));
    }

    #[test]
    fn smooth_field_is_deterministic_and_positive() {
        let spec = PhantomSpec::default();
        let a = make_smooth_field(&spec).unwrap();
        let b = make_smooth_field(&spec).unwrap();
        assert_eq!(a, b);
        assert!(jacobian_determinant(&a).unwrap().min() > MIN_FIELD_JACOBIAN);
        let other = make_smooth_field(&PhantomSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn spec_validation() {
        let mut s = PhantomSpec::default();
        s.size = (8, 64);
        assert!(s.validate().is_err());
        s = PhantomSpec {
            severity: 1.5,
            ..PhantomSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn noiseless_identity_phantom_is_texture_only() {
        let spec = PhantomSpec {
            num_blobs: 0,
            severity: 0.0,
            noise_sd: 0.0,
            ..PhantomSpec::default()
        };
        let p = make_phantom_pair(&spec).unwrap();
        assert!(p.jmap.values.iter().all(|&v| v == 1.0));
        let base = expansion_to_hu(1.0);
        for v in p.image.data() {
            assert!(((*v as f64) - base).abs() <= TEXTURE_HU + 1e-3);
        }
        let again = make_phantom_pair(&spec).unwrap();
        assert_eq!(p.image, again.image);
    }

    #[test]
    fn modulation_hits_target_moments() {
        let spec = PhantomSpec {
            severity: 0.25,
            ..PhantomSpec::default()
        };
        let p = make_phantom_pair(&spec).unwrap();
        let (m, sd) = spec.target_moments();
        assert!((p.jmap.mean() - m).abs() < 0.02);
        assert!((p.jmap.sd() - sd).abs() < 0.02);
        assert!(p.jmap.min() >= MIN_FIELD_JACOBIAN);
    }

    #[test]
    fn expansion_to_hu_is_monotone_in_range() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..100 {
            let v = expansion_to_hu(i as f64 * 0.05);
            assert!(v > prev);
            assert!((-1000.0..=100.0).contains(&v));
            prev = v;
        }
    }
}
