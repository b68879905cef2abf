//! Volume similarity metrics on `[0, 1]`-normalized volumes and per-sample
//! report aggregation.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::voxcore::{DomainTag, Volume};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Volume, b: &Volume) -> Result<()> {
    a.same_dims(b)?;
    for v in [a, b] {
        if v.domain() != DomainTag::Normalized01 {
            return Err(Error::Domain(format!("metrics need [0, 1] volumes, got {:?}", v.domain())));
        }
    }
    Ok(())
}

/// Maps a `[-1, 1]` volume (or any unconstrained network output) to `[0, 1]`
/// via `(v + 1)/2`, clamping values that fall outside.
pub fn to_unit_range(v: &Volume) -> Result<Volume> {
    if v.domain() == DomainTag::Normalized01 {
        return Ok(v.clone());
    }
    v.map(DomainTag::Normalized01, |x| ((x + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn mae(a: &Volume, b: &Volume) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.len() as f64)
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1/mse)` for unit peak; `+∞` when `mse = 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Sums over every length-`w` run along `axis` of an x-fastest grid.
fn box_sum(data: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut od = dims;
    od[axis] = dims[axis] + 1 - w;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut out = Vec::with_capacity(od.iter().product());
    for z in 0..od[2] {
        for y in 0..od[1] {
            for x in 0..od[0] {
                let base = x + dims[0] * (y + dims[1] * z);
                out.push((0..w).map(|k| data[base + k * stride]).sum());
            }
        }
    }
    (out, od)
}

fn window_sums(data: &[f64], dims: [usize; 3], w: usize) -> Vec<f64> {
    let (s, d) = box_sum(data, dims, 0, w);
    let (s, d) = box_sum(&s, d, 1, w);
    box_sum(&s, d, 2, w).0
}

/// Mean SSIM over all `window³` sub-blocks at stride 1, uniform weights and
/// population (co)variances.
pub fn ssim3d_with(a: &Volume, b: &Volume, window: usize, k1: f64, k2: f64, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    let d = a.dims();
    if window == 0 || d.iter().any(|&n| n < window) {
        return Err(invalid(format!("volume {d:?} is smaller than the {window}³ SSIM window")));
    }
    let (c1, c2) = ((k1 * peak).powi(2), (k2 * peak).powi(2));
    let (x, y) = (a.data(), b.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let [sx, sy, sxx, syy, sxy] = [x, y, &xx[..], &yy[..], &xy[..]].map(|m| window_sums(m, d, window));
    let n = (window * window * window) as f64;
    let mut total = 0.0;
    for i in 0..sx.len() {
        let (mx, my) = (sx[i] / n, sy[i] / n);
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / sx.len() as f64)
}

pub fn ssim3d(a: &Volume, b: &Volume) -> Result<f64> {
    ssim3d_with(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2, 1.0)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value `{t}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mae: f64,
    pub mse: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub summary: bool,
    pub n: usize,
    pub mean: MetricValues,
    pub std: MetricValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_sample: Vec<SampleMetrics>,
    pub mean: MetricValues,
    pub std: MetricValues,
}

/// All four metrics for one `[0, 1]` pair.
pub fn evaluate_pair(pred: &Volume, truth: &Volume) -> Result<MetricValues> {
    let e = mse(pred, truth)?;
    Ok(MetricValues { mae: mae(pred, truth)?, mse: e, psnr: psnr_from_mse(e), ssim: ssim3d(pred, truth)? })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if m.is_infinite() {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl MetricReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(invalid("a metric report needs at least one sample"));
        }
        let col = |f: fn(&MetricValues) -> f64| -> (f64, f64) {
            mean_std(&per_sample.iter().map(|s| f(&s.values)).collect::<Vec<_>>())
        };
        let (mae, psnr, mse, ssim) = (col(|v| v.mae), col(|v| v.psnr), col(|v| v.mse), col(|v| v.ssim));
        Ok(Self {
            mean: MetricValues { mae: mae.0, mse: mse.0, psnr: psnr.0, ssim: ssim.0 },
            std: MetricValues { mae: mae.1, mse: mse.1, psnr: psnr.1, ssim: ssim.1 },
            per_sample,
        })
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary { summary: true, n: self.per_sample.len(), mean: self.mean.clone(), std: self.std.clone() }
    }

    /// One JSON object per sample, then the summary object; newline-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.per_sample {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary())?);
        out.push('\n');
        Ok(out)
    }

    /// Parses [`MetricReport::to_jsonl`] output; the summary is recomputed
    /// from the samples.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v.get("summary").is_some() {
                continue;
            }
            samples.push(serde_json::from_value(v)?);
        }
        Self::from_samples(samples)
    }
}

/// Evaluates `(id, prediction, truth)` triples in the given order. Inputs in
/// `[-1, 1]` are first mapped to `[0, 1]`.
pub fn evaluate_batch(pairs: &[(String, Volume, Volume)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(invalid("evaluate_batch needs at least one pair"));
    }
    let mut samples = Vec::with_capacity(pairs.len());
    for (id, pred, truth) in pairs {
        let values = evaluate_pair(&to_unit_range(pred)?, &to_unit_range(truth)?)?;
        samples.push(SampleMetrics { id: id.clone(), values });
    }
    MetricReport::from_samples(samples)
}
