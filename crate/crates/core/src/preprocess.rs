//! Slice preprocessing: HU clipping, expansion-map clipping at
//! `mu +- 3 sigma` with training-set statistics, rescaling to `[-1, 1]`,
//! and center crop / pad to a fixed slice size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 1024.0;
/// Fill value for padding after rescaling (the image minimum).
pub const BACKGROUND: f32 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Unknown {
                what: "split",
                name: other.to_string(),
            }),
        }
    }
}

/// Expansion-map clipping statistics: `mu` is the mean of per-map means and
/// `sigma` the mean of per-map population SDs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipStats {
    pub mu: f64,
    pub sigma: f64,
    pub n_train: usize,
    pub source: Split,
}

impl ClipStats {
    pub fn lower(&self) -> f64 {
        self.mu - 3.0 * self.sigma
    }

    pub fn upper(&self) -> f64 {
        self.mu + 3.0 * self.sigma
    }

    fn require_train(&self) -> Result<()> {
        if self.source != Split::Train {
            return Err(Error::StatsFromTest(self.source.to_string()));
        }
        Ok(())
    }
}

pub fn clip_hu(image: &Tensor) -> Tensor {
    image.map(|v| v.clamp(HU_MIN, HU_MAX))
}

pub fn compute_clip_stats<'a>(maps: impl IntoIterator<Item = &'a [f32]>, source: Split) -> Result<ClipStats> {
    let mut sum_mean = 0.0f64;
    let mut sum_sd = 0.0f64;
    let mut n = 0usize;
    for m in maps {
        if m.is_empty() {
            return Err(Error::Empty("expansion map"));
        }
        let len = m.len() as f64;
        let mean = m.iter().map(|&v| v as f64).sum::<f64>() / len;
        let var = m.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len;
        sum_mean += mean;
        sum_sd += var.sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    Ok(ClipStats {
        mu: sum_mean / n as f64,
        sigma: sum_sd / n as f64,
        n_train: n,
        source,
    })
}

pub fn clip_j(jmap: &Tensor, stats: &ClipStats) -> Result<Tensor> {
    stats.require_train()?;
    let (lo, hi) = (stats.lower() as f32, stats.upper() as f32);
    Ok(jmap.map(|v| v.clamp(lo, hi)))
}

/// Affine map with `lo -> -1` and `hi -> 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitRescale {
    lo: f64,
    hi: f64,
}

impl UnitRescale {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rescale bounds need hi > lo, got lo={lo} hi={hi}"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn hu() -> Self {
        Self {
            lo: HU_MIN as f64,
            hi: HU_MAX as f64,
        }
    }

    pub fn for_stats(stats: &ClipStats) -> Result<Self> {
        Self::new(stats.lower(), stats.upper())
    }

    pub fn forward(&self, v: f32) -> f32 {
        ((v as f64 - self.lo) / (self.hi - self.lo) * 2.0 - 1.0) as f32
    }

    pub fn inverse(&self, v: f32) -> f32 {
        ((v as f64 + 1.0) / 2.0 * (self.hi - self.lo) + self.lo) as f32
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.forward(v))
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.inverse(v))
    }
}

pub fn rescale_to_unit(t: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    Ok(UnitRescale::new(lo, hi)?.apply(t))
}

pub fn rescale_from_unit(t: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    Ok(UnitRescale::new(lo, hi)?.invert(t))
}

/// Start offsets along one axis: positive crops, negative pads.
pub fn crop_pad_offset(size: usize, target: usize) -> isize {
    if size >= target {
        ((size - target) / 2) as isize
    } else {
        -(((target - size) / 2) as isize)
    }
}

/// Center crop (larger axes) or symmetric pad with [`BACKGROUND`] (smaller
/// axes) of an `[H, W]` slice. Odd padding puts the extra row/column last.
pub fn crop_or_pad(slice: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w) = match slice.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::dim("crop_or_pad", format!("expected [H, W], got {s:?}"))),
    };
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument("crop_or_pad target must be >= 1".into()));
    }
    let (oy, ox) = (crop_pad_offset(h, th), crop_pad_offset(w, tw));
    let src = slice.data();
    let mut out = vec![BACKGROUND; th * tw];
    for r in 0..th {
        let sr = r as isize + oy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for c in 0..tw {
            let sc = c as isize + ox;
            if sc >= 0 && sc < w as isize {
                out[r * tw + c] = src[sr as usize * w + sc as usize];
            }
        }
    }
    Tensor::new(vec![th, tw], out)
}

/// The full per-pair pipeline with fixed parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocessor {
    pub stats: ClipStats,
    pub target: (usize, usize),
}

impl Preprocessor {
    pub fn new(stats: ClipStats, target: (usize, usize)) -> Result<Self> {
        stats.require_train()?;
        UnitRescale::for_stats(&stats)?;
        Ok(Self { stats, target })
    }

    /// HU slice -> clip -> rescale -> crop/pad.
    pub fn image(&self, image: &Tensor) -> Result<Tensor> {
        crop_or_pad(&UnitRescale::hu().apply(&clip_hu(image)), self.target)
    }

    /// Expansion map -> clip -> rescale -> crop/pad.
    pub fn jmap(&self, jmap: &Tensor) -> Result<Tensor> {
        let r = UnitRescale::for_stats(&self.stats)?;
        // the f32 clip bounds can sit one ulp outside the f64 ones
        let unit = r.apply(&clip_j(jmap, &self.stats)?).map(|v| v.clamp(-1.0, 1.0));
        crop_or_pad(&unit, self.target)
    }

    pub fn j_rescale(&self) -> UnitRescale {
        UnitRescale::for_stats(&self.stats).expect("validated in new")
    }
}
