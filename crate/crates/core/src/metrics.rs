//! Error metrics for predicted material fields, derived moduli, distribution distances and
//! mass estimation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::mtd::MaterialTriplet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Ten,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Ten => x.log10(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Property {
    E,
    Nu,
    Rho,
}

impl Property {
    pub const ALL: [Property; 3] = [Property::E, Property::Nu, Property::Rho];

    pub fn of(self, t: &MaterialTriplet) -> f64 {
        match self {
            Property::E => t.e,
            Property::Nu => t.nu,
            Property::Rho => t.rho,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Property::E => "e",
            Property::Nu => "nu",
            Property::Rho => "rho",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean over objects of each object's voxel mean.
    PerObject,
    /// Mean over all voxels pooled.
    Global,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::PerObject => "per-object",
            Aggregation::Global => "global",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ade,
    Alde,
    Alre,
    Are,
    Mnre,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Ade, Metric::Alde, Metric::Alre, Metric::Are, Metric::Mnre];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ade => "ade",
            Metric::Alde => "alde",
            Metric::Alre => "alre",
            Metric::Are => "are",
            Metric::Mnre => "mnre",
        }
    }

    /// Per-pair term whose mean is the metric. `y` is ground truth, `p` the prediction.
    pub fn term(self, p: f64, y: f64, base: LogBase) -> Result<f64> {
        let positive = |what: &str| {
            if p > 0.0 && y > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!("{what} needs positive values, got prediction {p} and truth {y}")))
            }
        };
        match self {
            Metric::Ade => Ok((y - p).abs()),
            Metric::Alde => {
                positive("ALDE")?;
                Ok((base.log(y) - base.log(p)).abs())
            }
            Metric::Alre => {
                positive("ALRE")?;
                let ly = base.log(y);
                if ly == 0.0 {
                    return Err(invalid("ALRE is undefined when the log of the truth is 0"));
                }
                Ok((ly - base.log(p)).abs() / ly.abs())
            }
            Metric::Are => {
                positive("ARE")?;
                Ok((y - p).abs() / y)
            }
            Metric::Mnre => {
                positive("MnRE")?;
                Ok((y / p).min(p / y))
            }
        }
    }
}

/// Pairs of (prediction, truth) values for one object.
pub type ObjectValues<'a> = (&'a [f64], &'a [f64]);

/// One metric over several objects.
pub fn aggregate(metric: Metric, objects: &[ObjectValues], base: LogBase, mode: Aggregation) -> Result<f64> {
    if objects.is_empty() {
        return Err(invalid("no objects to evaluate"));
    }
    let mut per_object = Vec::with_capacity(objects.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for (pred, gt) in objects {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(invalid(format!("prediction and truth lengths must match and be non-zero ({} vs {})", pred.len(), gt.len())));
        }
        let mut sum = 0.0;
        for (&p, &y) in pred.iter().zip(gt.iter()) {
            sum += metric.term(p, y, base)?;
        }
        total += sum;
        count += pred.len();
        per_object.push(sum / pred.len() as f64);
    }
    Ok(match mode {
        Aggregation::PerObject => per_object.iter().sum::<f64>() / per_object.len() as f64,
        Aggregation::Global => total / count as f64,
    })
}

/// All five metrics for one property. Ratio and log metrics are `None` when some value is not
/// strictly positive (for instance ν = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldErrorReport {
    pub property: Property,
    pub aggregation: Aggregation,
    pub ade: f64,
    pub alde: Option<f64>,
    pub alre: Option<f64>,
    pub are: Option<f64>,
    pub mnre: Option<f64>,
}

impl FieldErrorReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Ade => Some(self.ade),
            Metric::Alde => self.alde,
            Metric::Alre => self.alre,
            Metric::Are => self.are,
            Metric::Mnre => self.mnre,
        }
    }
}

pub fn pointwise_errors(objects: &[ObjectValues], property: Property, base: LogBase, mode: Aggregation) -> Result<FieldErrorReport> {
    let opt = |m: Metric| aggregate(m, objects, base, mode).ok();
    Ok(FieldErrorReport {
        property,
        aggregation: mode,
        ade: aggregate(Metric::Ade, objects, base, mode)?,
        alde: opt(Metric::Alde),
        alre: opt(Metric::Alre),
        are: opt(Metric::Are),
        mnre: opt(Metric::Mnre),
    })
}

/// Reports for every property and both aggregation modes over objects of triplet pairs.
pub fn field_reports(objects: &[(Vec<MaterialTriplet>, Vec<MaterialTriplet>)], base: LogBase) -> Result<Vec<FieldErrorReport>> {
    let mut out = Vec::new();
    for prop in Property::ALL {
        let values: Vec<(Vec<f64>, Vec<f64>)> = objects
            .iter()
            .map(|(p, g)| (p.iter().map(|t| prop.of(t)).collect(), g.iter().map(|t| prop.of(t)).collect()))
            .collect();
        let slices: Vec<ObjectValues> = values.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
        for mode in [Aggregation::PerObject, Aggregation::Global] {
            out.push(pointwise_errors(&slices, prop, base, mode)?);
        }
    }
    Ok(out)
}

/// One line of the `property,metric,aggregation,value` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub property: String,
    pub metric: String,
    pub aggregation: String,
    pub value: f64,
}

pub fn report_rows(reports: &[FieldErrorReport]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for r in reports {
        for m in Metric::ALL {
            if let Some(value) = r.get(m) {
                rows.push(MetricRow {
                    property: r.property.name().into(),
                    metric: m.name().into(),
                    aggregation: r.aggregation.name().into(),
                    value,
                });
            }
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedModuli {
    pub shear: f64,
    pub bulk: f64,
    pub e_over_rho: f64,
    /// `E^{1/2} / ρ`.
    pub ashby_stiff: f64,
    /// `E^{1/3} / ρ`.
    pub ashby_energy: f64,
}

pub fn derived_moduli(t: &MaterialTriplet) -> Result<DerivedModuli> {
    if t.nu >= 0.5 {
        return Err(numeric(format!("bulk modulus is singular at ν = {}", t.nu)));
    }
    Ok(DerivedModuli {
        shear: t.e / (2.0 * (1.0 + t.nu)),
        bulk: t.e / (3.0 * (1.0 - 2.0 * t.nu)),
        e_over_rho: t.e / t.rho,
        ashby_stiff: t.e.sqrt() / t.rho,
        ashby_energy: t.e.cbrt() / t.rho,
    })
}

/// `Σ|x − y| / Σ(x + y)` for non-negative vectors.
pub fn bray_curtis(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid("Bray–Curtis inputs differ in length"));
    }
    if x.iter().chain(y).any(|&v| !(v >= 0.0)) {
        return Err(invalid("Bray–Curtis needs non-negative components"));
    }
    let den: f64 = x.iter().zip(y).map(|(a, b)| a + b).sum();
    if den == 0.0 {
        return Err(invalid("Bray–Curtis is undefined for two all-zero vectors"));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / den)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Linear-interpolated empirical quantile at `q ∈ [0, 1]` of sorted data.
fn quantile(s: &[f64], q: f64) -> f64 {
    if s.len() == 1 {
        return s[0];
    }
    let x = q * (s.len() - 1) as f64;
    let i = (x.floor() as usize).min(s.len() - 1);
    let f = x - i as f64;
    if f == 0.0 {
        s[i]
    } else {
        s[i] + f * (s[i + 1] - s[i])
    }
}

/// Order-`p` Wasserstein distance between two 1-D samples by sorted quantile coupling; the
/// smaller sample is resampled to the larger size.
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: u32) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("Wasserstein distance needs non-empty samples"));
    }
    if p == 0 {
        return Err(invalid("Wasserstein order must be at least 1"));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let m = sa.len().max(sb.len());
    let at = |s: &[f64], i: usize| if s.len() == m { s[i] } else { quantile(s, if m == 1 { 0.0 } else { i as f64 / (m - 1) as f64 }) };
    let mut sum = 0.0;
    for i in 0..m {
        sum += (at(&sa, i) - at(&sb, i)).abs().powi(p as i32);
    }
    Ok((sum / m as f64).powf(1.0 / p as f64))
}

/// Additive mass given to every histogram bin before renormalizing.
pub const KL_SMOOTHING: f64 = 1e-9;
pub const KL_DEFAULT_BINS: usize = 64;

/// `D_KL(p̂ ‖ q̂)` of equal-width histograms over the joint range of both samples.
pub fn kl_histogram(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("KL divergence needs non-empty samples"));
    }
    if bins < 2 {
        return Err(invalid("KL histogram needs at least 2 bins"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("KL samples must be finite"));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let hist = |s: &[f64]| {
        let mut h = vec![KL_SMOOTHING; bins];
        for &v in s {
            let i = if hi > lo { (((v - lo) / (hi - lo)) * bins as f64).floor() as usize } else { 0 };
            h[i.min(bins - 1)] += 1.0 / s.len() as f64;
        }
        let total: f64 = h.iter().sum();
        h.iter_mut().for_each(|x| *x /= total);
        h
    };
    let (p, q) = (hist(a), hist(b));
    Ok(p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>().max(0.0))
}

/// Mean density times the known volume.
pub fn mass_estimate(densities: &[f64], volume: f64) -> Result<f64> {
    if densities.is_empty() {
        return Err(invalid("mass estimate needs at least one density"));
    }
    if !(volume > 0.0) {
        return Err(invalid("volume must be positive"));
    }
    Ok(densities.iter().sum::<f64>() / densities.len() as f64 * volume)
}
