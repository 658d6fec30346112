//! Per-slice image metrics, aggregation and two-sample comparison.
//!
//! Everything here runs in f64. PSNR and SSIM use the scaled `[-1, 1]` data
//! over the full slice (peak 2); MAE and the global statistics use original
//! J units over lung pixels; DSC and Spearman use lung pixels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{lung_mask, SamplePair};
use crate::error::{Error, Result};
use crate::losses::{gaussian_taps, SSIM_K1, SSIM_K2, SSIM_PEAK, SSIM_WINDOW};
use crate::networks::{ModelSpec, NetworkParams};
use crate::preprocess::UnitRescale;
use crate::tensor::Tensor;
use crate::trainer::predict_samples;

pub const REPORT_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "id,severity,psnr,ssim,dsc_high,rs,mae,mean_j,sd_j";
pub const PEAK: f64 = 2.0;
pub const HIGH_QUANTILE: f64 = 0.75;
pub const METRICS: [&str; 7] = ["psnr", "ssim", "dsc_high", "rs", "mae", "mean_j", "sd_j"];

fn check_len(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("lengths {} and {} differ", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty(op));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// Zero mean squared error.
    Infinite,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

pub fn psnr(pred: &[f32], target: &[f32], peak: f64) -> Result<Psnr> {
    check_len("psnr", pred, target)?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr peak {peak} must be > 0")));
    }
    let mse = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (peak * peak / mse).log10())
    })
}

pub fn mae(pred: &[f32], target: &[f32]) -> Result<f64> {
    check_len("mae", pred, target)?;
    Ok(pred.iter().zip(target).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum::<f64>() / pred.len() as f64)
}

/// Valid-mode separable blur of an `h x w` image with the SSIM window.
fn blur(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; oh * w];
    for i in 0..oh {
        for j in 0..w {
            rows[i * w + j] = (0..k).map(|a| taps[a] * img[(i + a) * w + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|b| taps[b] * rows[i * w + j + b]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5), peak 2.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.ndim() != 2 {
        return Err(Error::dim(
            "ssim",
            format!("expected two equal [H, W] images, got {:?} and {:?}", pred.shape(), target.shape()),
        ));
    }
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim",
            format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps = gaussian_taps();
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mx, oh, ow) = blur(&x, h, w, &taps);
    let (my, ..) = blur(&y, h, w, &taps);
    let (exx, ..) = blur(&prod(&x, &x), h, w, &taps);
    let (eyy, ..) = blur(&prod(&y, &y), h, w, &taps);
    let (exy, ..) = blur(&prod(&x, &y), h, w, &taps);
    let c1 = (SSIM_K1 * SSIM_PEAK).powi(2);
    let c2 = (SSIM_K2 * SSIM_PEAK).powi(2);
    let total: f64 = (0..oh * ow)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (oh * ow) as f64)
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f32], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Dice overlap of the two images' above-quantile masks (strict `>`).
pub fn dsc_high(pred: &[f32], target: &[f32], q: f64) -> Result<f64> {
    check_len("dsc_high", pred, target)?;
    if pred.len() < 4 {
        return Err(Error::InvalidArgument(format!("dsc_high needs >= 4 pixels, got {}", pred.len())));
    }
    let (tp, tt) = (quantile(pred, q), quantile(target, q));
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let (ma, mb) = (p as f64 > tp, t as f64 > tt);
        a += ma as usize;
        b += mb as usize;
        both += (ma && mb) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation; `None` when either input is constant or `n < 2`.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Population mean and SD.
pub fn global_stats(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("lung mask"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U of the first sample: pairs where it is larger, ties count 1/2.
    pub u: f64,
    pub p_two_sided: f64,
    pub exact: bool,
}

const EXACT_LIMIT: usize = 12;

/// Number of arrangements of `m` and `n` items giving each U in `0..=m*n`.
fn u_counts(m: usize, n: usize) -> Vec<f64> {
    // table[i][j] = distribution for sizes (i, j); built up row by row
    let mut prev: Vec<Vec<f64>> = (0..=n).map(|_| vec![1.0]).collect();
    for i in 1..=m {
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        cur.push(vec![1.0]);
        for j in 1..=n {
            let mut d = vec![0.0; i * j + 1];
            // largest item belongs to the first sample: it beats all j others
            for (u, c) in prev[j].iter().enumerate() {
                d[u + j] += c;
            }
            for (u, c) in cur[j - 1].iter().enumerate() {
                d[u] += c;
            }
            cur.push(d);
        }
        prev = cur;
    }
    prev.swap_remove(n)
}

fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("mann_whitney_u sample"));
    }
    let (m, n) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let r_a: f64 = ranks[..m].iter().sum();
    let u = r_a - (m * (m + 1)) as f64 / 2.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let total = (m * n) as f64;
    if m + n <= EXACT_LIMIT && tie_sum == 0.0 {
        let counts = u_counts(m, n);
        let all: f64 = counts.iter().sum();
        let k = u.round() as usize;
        let lower: f64 = counts[..=k].iter().sum::<f64>() / all;
        let upper: f64 = counts[k..].iter().sum::<f64>() / all;
        return Ok(MannWhitney {
            u,
            p_two_sided: (2.0 * lower.min(upper)).min(1.0),
            exact: true,
        });
    }
    let nn = (m + n) as f64;
    let var = total / 12.0 * ((nn + 1.0) - tie_sum / (nn * (nn - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - total / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * normal_sf(z)).min(1.0)
    };
    Ok(MannWhitney {
        u,
        p_two_sided: p,
        exact: false,
    })
}

/// `**` below 1e-4, `*` below 0.01.
pub fn significance_marker(p: f64) -> &'static str {
    if p < 1e-4 {
        "**"
    } else if p < 0.01 {
        "*"
    } else {
        ""
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceMetrics {
    pub id: String,
    pub severity_tag: Option<String>,
    /// `None` with `psnr_infinite` set when prediction equals target.
    pub psnr_db: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub dsc_high: f64,
    /// `None` when either map is constant over the lung.
    pub spearman_rs: Option<f64>,
    pub mae: f64,
    /// Global statistics of the predicted map.
    pub mean_j: f64,
    pub sd_j: f64,
    /// Same statistics of the reference map.
    pub true_mean_j: f64,
    pub true_sd_j: f64,
}

impl SliceMetrics {
    /// Value of a metric by its CSV column name; `None` for missing values.
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "psnr" => self.psnr_db,
            "ssim" => Some(self.ssim),
            "dsc_high" => Some(self.dsc_high),
            "rs" => self.spearman_rs,
            "mae" => Some(self.mae),
            "mean_j" => Some(self.mean_j),
            "sd_j" => Some(self.sd_j),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub count: usize,
    /// Values that were missing or infinite.
    pub missing: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn summarize(values: &[Option<f64>]) -> Summary {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    Summary {
        count: values.len(),
        missing: values.len() - present.len(),
        mean: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
        median: median(&present),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSummary {
    /// `all`, a severity tag, or `untagged`.
    pub group: String,
    pub metrics: BTreeMap<String, Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub metric: String,
    pub median_a: Option<f64>,
    pub median_b: Option<f64>,
    pub u_statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    pub marker: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub version: u32,
    pub model: Option<String>,
    pub config_hash: Option<String>,
    pub split: String,
    pub peak: f64,
    pub dsc_quantile: f64,
    /// How background pixels enter each metric.
    pub notes: Vec<String>,
    pub slices: Vec<SliceMetrics>,
    pub groups: Vec<GroupSummary>,
}

impl MetricsReport {
    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.slices {
            let psnr = if s.psnr_infinite { "inf".to_string() } else { opt(s.psnr_db) };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.id,
                s.severity_tag.as_deref().unwrap_or(""),
                psnr,
                s.ssim,
                s.dsc_high,
                opt(s.spearman_rs),
                s.mae,
                s.mean_j,
                s.sd_j
            );
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, json_path: &Path) -> Result<()> {
        if let Some(dir) = json_path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(json_path, e))?;
        fs::write(json_path, text + "\n").map_err(|e| Error::io(json_path, e))?;
        let csv = json_path.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if r.version != REPORT_VERSION {
            return Err(Error::Config(format!(
                "{}: report version {} (expected {REPORT_VERSION})",
                path.display(),
                r.version
            )));
        }
        Ok(r)
    }
}

/// Metrics for one predicted map against its reference, both in `[-1, 1]`.
pub fn slice_metrics(sample: &SamplePair, pred: &Tensor, j_units: &UnitRescale) -> Result<SliceMetrics> {
    if pred.shape() != sample.y.shape() {
        return Err(Error::dim(
            "evaluate",
            format!("prediction {:?} vs reference {:?}", pred.shape(), sample.y.shape()),
        ));
    }
    let (p, t) = (pred.data(), sample.y.data());
    let mask = lung_mask(sample.x.data(), t);
    let pick = |v: &[f32]| -> Vec<f32> { v.iter().zip(&mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect() };
    let (pl, tl) = (pick(p), pick(t));
    if pl.is_empty() {
        return Err(Error::Empty("lung mask"));
    }
    let pj: Vec<f32> = pl.iter().map(|&v| j_units.inverse(v)).collect();
    let tj: Vec<f32> = tl.iter().map(|&v| j_units.inverse(v)).collect();
    let psnr = psnr(p, t, PEAK)?;
    let (mean_j, sd_j) = global_stats(&pj.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
    let (true_mean_j, true_sd_j) = global_stats(&tj.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    Ok(SliceMetrics {
        id: sample.id.clone(),
        severity_tag: sample.severity_tag.clone(),
        psnr_db: psnr.db(),
        psnr_infinite: psnr == Psnr::Infinite,
        ssim: ssim(pred, &sample.y)?,
        dsc_high: if pl.len() >= 4 { dsc_high(&pl, &tl, HIGH_QUANTILE)? } else { 1.0 },
        spearman_rs: spearman(&to64(&pl), &to64(&tl)),
        mae: mae(&pj, &tj)?,
        mean_j,
        sd_j,
        true_mean_j,
        true_sd_j,
    })
}

fn group_summaries(slices: &[SliceMetrics]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<String, Vec<&SliceMetrics>> = BTreeMap::new();
    for s in slices {
        let tag = s.severity_tag.clone().unwrap_or_else(|| "untagged".into());
        groups.entry(tag).or_default().push(s);
    }
    let summarize_group = |name: String, members: &[&SliceMetrics]| GroupSummary {
        group: name,
        metrics: METRICS
            .iter()
            .map(|&m| {
                let values: Vec<Option<f64>> = members.iter().map(|s| s.get(m)).collect();
                (m.to_string(), summarize(&values))
            })
            .collect(),
    };
    let all: Vec<&SliceMetrics> = slices.iter().collect();
    let mut out = vec![summarize_group("all".into(), &all)];
    out.extend(groups.into_iter().map(|(k, v)| summarize_group(k, &v)));
    out
}

fn report_notes() -> Vec<String> {
    vec![
        "psnr and ssim: full slice in [-1, 1] units, peak 2".into(),
        "mae, mean_j, sd_j: lung pixels in original J units".into(),
        "dsc_high and rs: lung pixels".into(),
    ]
}

/// Builds a report from precomputed predictions (one `[H, W]` map per sample).
pub fn evaluate_predictions(
    samples: &[SamplePair],
    preds: &[Tensor],
    j_units: &UnitRescale,
    split: &str,
    model: Option<String>,
    config_hash: Option<String>,
) -> Result<MetricsReport> {
    if samples.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} samples but {} predictions",
            samples.len(),
            preds.len()
        )));
    }
    let mut slices = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| slice_metrics(s, p, j_units))
        .collect::<Result<Vec<_>>>()?;
    slices.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(MetricsReport {
        version: REPORT_VERSION,
        model,
        config_hash,
        split: split.to_string(),
        peak: PEAK,
        dsc_quantile: HIGH_QUANTILE,
        notes: report_notes(),
        groups: group_summaries(&slices),
        slices,
    })
}

/// Runs the generator over `samples` and scores the predictions.
pub fn evaluate(
    model: &ModelSpec,
    generator: &mut NetworkParams,
    samples: &[SamplePair],
    j_units: &UnitRescale,
    split: &str,
    config_hash: Option<String>,
) -> Result<MetricsReport> {
    let preds = predict_samples(model, generator, samples, 16)?;
    evaluate_predictions(samples, &preds, j_units, split, Some(model.kind.to_string()), config_hash)
}

/// Mann-Whitney U per metric between two reports over the same slice ids.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Result<Vec<Comparison>> {
    let ids = |r: &MetricsReport| r.slices.iter().map(|s| s.id.clone()).collect::<BTreeSet<_>>();
    let (ia, ib) = (ids(a), ids(b));
    if ia != ib {
        let only_a = ia.difference(&ib).count();
        let only_b = ib.difference(&ia).count();
        return Err(Error::InvalidArgument(format!(
            "reports cover different slices ({only_a} only in the first, {only_b} only in the second)"
        )));
    }
    METRICS
        .iter()
        .map(|&m| {
            let va: Vec<f64> = a.slices.iter().filter_map(|s| s.get(m)).collect();
            let vb: Vec<f64> = b.slices.iter().filter_map(|s| s.get(m)).collect();
            let (u, p, exact) = if va.is_empty() || vb.is_empty() {
                (f64::NAN, 1.0, false)
            } else {
                let r = mann_whitney_u(&va, &vb)?;
                (r.u, r.p_two_sided, r.exact)
            };
            Ok(Comparison {
                metric: m.to_string(),
                median_a: median(&va),
                median_b: median(&vb),
                u_statistic: if u.is_nan() { 0.0 } else { u },
                p_value: p,
                exact,
                marker: significance_marker(p).to_string(),
            })
        })
        .collect()
}

/// Grid with one row per model and one column per metric; the second row
/// carries the markers of its comparison against the first.
pub fn render_table(name_a: &str, name_b: &str, comps: &[Comparison]) -> String {
    let width = name_a.len().max(name_b.len()).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "model");
    for c in comps {
        let _ = write!(out, " | {:>12}", c.metric);
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(width + comps.len() * 15));
    let cell = |v: Option<f64>, mark: &str| match v {
        Some(v) => format!("{v:.4}{mark}"),
        None => format!("n/a{mark}"),
    };
    let _ = write!(out, "{name_a:width$}");
    for c in comps {
        let _ = write!(out, " | {:>12}", cell(c.median_a, ""));
    }
    out.push('\n');
    let _ = write!(out, "{name_b:width$}");
    for c in comps {
        let _ = write!(out, " | {:>12}", cell(c.median_b, &c.marker));
    }
    out.push('\n');
    let _ = write!(out, "{:width$}", "p");
    for c in comps {
        let _ = write!(out, " | {:>12}", format!("{:.2e}", c.p_value));
    }
    out.push('\n');
    out.push_str("medians per slice; * p < 0.01, ** p < 0.0001 (two-sided Mann-Whitney U)\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Literal window-by-window SSIM with an explicit 2-D Gaussian kernel.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let k = SSIM_WINDOW;
        let s = crate::losses::SSIM_SIGMA;
        let half = (k / 2) as f64;
        let mut kern = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                let (da, db) = (a as f64 - half, b as f64 - half);
                kern[a * k + b] = (-(da * da + db * db) / (2.0 * s * s)).exp();
            }
        }
        let ks: f64 = kern.iter().sum();
        kern.iter_mut().for_each(|v| *v /= ks);
        let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut ux, mut uy) = (0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let wgt = kern[a * k + b];
                        ux += wgt * x[(i + a) * w + j + b];
                        uy += wgt * y[(i + a) * w + j + b];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let wgt = kern[a * k + b];
                        let dx = x[(i + a) * w + j + b] - ux;
                        let dy = y[(i + a) * w + j + b] - uy;
                        vx += wgt * dx * dx;
                        vy += wgt * dy * dy;
                        cxy += wgt * dx * dy;
                    }
                }
                acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    fn img(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::uniform([h, w], -1.0, 1.0, rng)
    }

    #[test]
    fn psnr_anchors() {
        let t = vec![0.1f32, -0.5, 0.9, 0.0];
        assert_eq!(psnr(&t, &t, PEAK).unwrap(), Psnr::Infinite);
        let target = vec![-1.0f32, -0.5, 0.0, 0.5, 0.8];
        let pred: Vec<f32> = target.iter().map(|v| v + 0.2).collect();
        let mse = pred.iter().zip(&target).map(|(p, t)| ((p - t) as f64).powi(2)).sum::<f64>() / 5.0;
        let want = 10.0 * (4.0 / mse).log10();
        let Psnr::Finite(db) = psnr(&pred, &target, PEAK).unwrap() else { panic!() };
        assert!((db - want).abs() < 1e-9);
        assert!((db - 20.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_falls_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = img(&mut rng, 32, 32);
        let mut monotone = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let vals: Vec<f64> = [0.01, 0.05, 0.1]
                .iter()
                .map(|&sd| {
                    let n = Normal::new(0.0f32, sd).unwrap();
                    let noisy: Vec<f32> = base.data().iter().map(|v| v + n.sample(&mut rng)).collect();
                    psnr(&noisy, base.data(), PEAK).unwrap().db().unwrap()
                })
                .collect();
            monotone += (vals[0] > vals[1] && vals[1] > vals[2]) as usize;
        }
        assert!(monotone >= 9);
    }

    #[test]
    fn mae_anchors() {
        let t = vec![0.3f32, -0.2, 0.7];
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        let p: Vec<f32> = t.iter().map(|v| v + 0.2).collect();
        assert!((mae(&p, &t).unwrap() - 0.2).abs() < 1e-7);
        assert!(mae(&p, &t[..2]).is_err());
    }

    #[test]
    fn ssim_matches_literal_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (a, b) = (img(&mut rng, 16, 16), img(&mut rng, 16, 16));
            let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
            let got = ssim(&a, &b).unwrap();
            assert!((got - ssim_oracle(&x, &y, 16, 16)).abs() < 1e-6);
            assert!((got - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }
        let a = img(&mut rng, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros([8, 8]), &Tensor::zeros([8, 8])).is_err());
    }

    #[test]
    fn dsc_anchors() {
        let a: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        let b: Vec<f32> = a.iter().rev().copied().collect();
        assert_eq!(dsc_high(&a, &a, 0.75).unwrap(), 1.0);
        assert_eq!(dsc_high(&a, &b, 0.75).unwrap(), 0.0);
        let c = vec![0.5f32; 16];
        assert_eq!(dsc_high(&c, &c, 0.75).unwrap(), 1.0);
        assert!(dsc_high(&a[..3], &a[..3], 0.75).is_err());
    }

    #[test]
    fn spearman_anchors() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]), Some(0.5));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        let x = [0.1, 0.5, 0.3, 2.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp() * 3.0).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    }

    #[test]
    fn global_stats_anchors() {
        assert_eq!(global_stats(&[2.5; 4]).unwrap(), (2.5, 0.0));
        assert_eq!(global_stats(&[1.0, 3.0, 1.0, 3.0]).unwrap(), (2.0, 1.0));
        assert!(global_stats(&[]).is_err());
    }

    /// Two-sided p from listing every split of the pooled ranks.
    fn enumeration_p(m: usize, n: usize, u_obs: f64) -> f64 {
        let total = m + n;
        let (mut le, mut ge, mut all) = (0usize, 0usize, 0usize);
        for mask in 0u32..(1 << total) {
            if mask.count_ones() as usize != m {
                continue;
            }
            // ranks 1..=total; members of the first sample are the set bits
            let r: usize = (0..total).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).sum();
            let u = r as f64 - (m * (m + 1)) as f64 / 2.0;
            all += 1;
            le += (u <= u_obs) as usize;
            ge += (u >= u_obs) as usize;
        }
        (2.0 * le.min(ge) as f64 / all as f64).min(1.0)
    }

    #[test]
    fn mann_whitney_anchors() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p_two_sided - 1.0 / 3.0).abs() < 1e-12);
        let a = [1.0, 2.0, 2.0, 5.0];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.u, 8.0);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn normal_approximation_near_exact_at_six_by_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = Normal::new(0.0, 1.0).unwrap();
        for shift in [0.0, 0.5, 1.0, 2.0] {
            let a: Vec<f64> = (0..6).map(|_| n.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..6).map(|_| n.sample(&mut rng) + shift).collect();
            let exact = mann_whitney_u(&a, &b).unwrap();
            assert!(exact.exact);
            // normal approximation evaluated by hand on the same U
            let total: f64 = 36.0;
            let var = total / 12.0 * 13.0;
            let z = ((exact.u - 18.0).abs() - 0.5).max(0.0) / var.sqrt();
            let approx = (2.0 * normal_sf(z)).min(1.0);
            assert!((approx - exact.p_two_sided).abs() < 0.02, "{approx} vs {}", exact.p_two_sided);
        }
    }

    #[test]
    fn markers() {
        assert_eq!(significance_marker(0.5), "");
        assert_eq!(significance_marker(0.01), "");
        assert_eq!(significance_marker(0.0099), "*");
        assert_eq!(significance_marker(1e-4), "*");
        assert_eq!(significance_marker(0.99e-4), "**");
    }

    proptest! {
        #[test]
        fn exact_path_equals_enumeration(m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
            prop_assume!(m + n <= 10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool: Vec<f64> = (0..m + n).map(|i| i as f64).collect();
            use rand::seq::SliceRandom;
            pool.shuffle(&mut rng);
            let (a, b) = pool.split_at(m);
            let r = mann_whitney_u(a, b).unwrap();
            prop_assert!(r.exact);
            prop_assert!((r.p_two_sided - enumeration_p(m, n, r.u)).abs() < 1e-12);
        }

        #[test]
        fn dsc_rank_invariant(v in proptest::collection::vec(-5.0f32..5.0, 16), w in proptest::collection::vec(-5.0f32..5.0, 16)) {
            let f = |x: f32| (x * 0.5).exp() * 2.0 + 1.0;
            let (fv, fw): (Vec<f32>, Vec<f32>) = (v.iter().map(|&x| f(x)).collect(), w.iter().map(|&x| f(x)).collect());
            let d0 = dsc_high(&v, &w, 0.75).unwrap();
            let d1 = dsc_high(&fv, &fw, 0.75).unwrap();
            prop_assert!((0.0..=1.0).contains(&d0));
            // exp is strictly monotone but may merge nearly equal f32 values
            let distinct = |x: &[f32]| { let mut s = x.to_vec(); s.sort_by(f32::total_cmp); s.dedup(); s.len() };
            prop_assume!(distinct(&fv) == distinct(&v) && distinct(&fw) == distinct(&w));
            prop_assert_eq!(d0, d1);
        }

        #[test]
        fn spearman_monotone_invariant(v in proptest::collection::vec(-5.0f64..5.0, 3..20), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, 1.0).unwrap();
            let w: Vec<f64> = v.iter().map(|_| n.sample(&mut rng)).collect();
            let fv: Vec<f64> = v.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            match (spearman(&v, &w), spearman(&fv, &w)) {
                (Some(a), Some(b)) => { prop_assert!((a - b).abs() < 1e-12); prop_assert!(a.abs() <= 1.0); }
                (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
            }
        }
    }

    fn sample(id: &str, tag: &str, y: Tensor) -> SamplePair {
        SamplePair {
            id: id.into(),
            x: Tensor::zeros(y.shape().to_vec()),
            y,
            severity_tag: Some(tag.into()),
        }
    }

    #[test]
    fn oracle_prediction_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<SamplePair> = (0..4)
            .map(|i| sample(&format!("s{i}"), if i < 2 { "low" } else { "high" }, Tensor::uniform([16, 16], -0.9, 0.9, &mut rng)))
            .collect();
        let preds: Vec<Tensor> = samples.iter().map(|s| s.y.clone()).collect();
        let units = UnitRescale::new(0.2, 3.0).unwrap();
        let r = evaluate_predictions(&samples, &preds, &units, "test", None, None).unwrap();
        assert_eq!(r.slices.len(), 4);
        for s in &r.slices {
            assert!(s.psnr_infinite && s.psnr_db.is_none());
            assert!((s.ssim - 1.0).abs() < 1e-12);
            assert_eq!(s.dsc_high, 1.0);
            assert_eq!(s.spearman_rs, Some(1.0));
            assert_eq!(s.mae, 0.0);
        }
        assert_eq!(r.groups.len(), 3);
        assert_eq!(r.to_csv().lines().next(), Some(CSV_HEADER));
        assert_eq!(r.to_csv().lines().count(), 5);

        let constant: Vec<Tensor> = samples.iter().map(|s| Tensor::full(s.y.shape().to_vec(), 0.1)).collect();
        let r = evaluate_predictions(&samples, &constant, &units, "test", None, None).unwrap();
        assert!(r.slices.iter().all(|s| s.spearman_rs.is_none()));
        assert_eq!(r.group("all").unwrap().metrics["rs"].missing, 4);

        let cmp = compare_reports(&r, &r).unwrap();
        assert!(cmp.iter().all(|c| c.marker.is_empty() && c.p_value > 0.9));
        let mut other = r.clone();
        other.slices.pop();
        assert!(compare_reports(&r, &other).is_err());
        let table = render_table("a", "b", &cmp);
        assert!(table.contains("psnr") && table.contains("p < 0.0001"));
    }

    #[test]
    fn report_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = vec![sample("a", "low", Tensor::uniform([16, 16], -0.5, 0.5, &mut rng))];
        let preds = vec![Tensor::uniform([16, 16], -0.5, 0.5, &mut rng)];
        let r = evaluate_predictions(&samples, &preds, &UnitRescale::new(0.0, 2.0).unwrap(), "test", Some("ours".into()), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        r.save(&path).unwrap();
        assert_eq!(MetricsReport::load(&path).unwrap(), r);
        assert!(dir.path().join("report.csv").is_file());
    }
}
