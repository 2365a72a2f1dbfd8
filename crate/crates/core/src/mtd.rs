//! Material triplets, measured range databases, sampling and normalization.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest Poisson ratio a triplet may carry.
pub const NU_LIMIT: f64 = 0.5;

/// One (E, ν, ρ) material point: Young's modulus in Pa, Poisson ratio, density in kg/m³.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialTriplet {
    #[serde(rename = "e_pa")]
    pub e: f64,
    pub nu: f64,
    #[serde(rename = "rho_kgm3")]
    pub rho: f64,
}

impl MaterialTriplet {
    /// Builds a triplet, rejecting values outside `e > 0`, `rho > 0`, `0 ≤ nu < 0.5`.
    pub fn new(e: f64, nu: f64, rho: f64) -> Result<Self> {
        let t = Self { e, nu, rho };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e.is_finite() && self.e > 0.0) {
            return Err(invalid(format!("Young's modulus must be positive and finite, got {}", self.e)));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(invalid(format!("density must be positive and finite, got {}", self.rho)));
        }
        if !(0.0..NU_LIMIT).contains(&self.nu) {
            return Err(invalid(format!("Poisson ratio must lie in [0, 0.5), got {}", self.nu)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.e, self.nu, self.rho]
    }
}

/// A named box of measured values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialRange {
    pub name: String,
    #[serde(rename = "e_pa")]
    pub e: [f64; 2],
    pub nu: [f64; 2],
    #[serde(rename = "rho_kgm3")]
    pub rho: [f64; 2],
}

impl MaterialRange {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(invalid(format!("range '{}': {field} {why}", self.name)));
        for (field, [lo, hi]) in [("e_pa", self.e), ("nu", self.nu), ("rho_kgm3", self.rho)] {
            if !(lo.is_finite() && hi.is_finite()) {
                return fail(field, "must be finite");
            }
            if lo > hi {
                return fail(field, "has lo > hi");
            }
        }
        if self.e[0] <= 0.0 {
            return fail("e_pa", "must be positive");
        }
        if self.rho[0] <= 0.0 {
            return fail("rho_kgm3", "must be positive");
        }
        if self.nu[0] < 0.0 || self.nu[1] >= NU_LIMIT {
            return fail("nu", "must lie in [0, 0.5)");
        }
        Ok(())
    }

    pub fn contains(&self, t: &MaterialTriplet) -> bool {
        (self.e[0]..=self.e[1]).contains(&t.e)
            && (self.nu[0]..=self.nu[1]).contains(&t.nu)
            && (self.rho[0]..=self.rho[1]).contains(&t.rho)
    }

    /// Extent used to apportion samples: decades of E and ρ plus the ν span scaled by its physical width.
    pub fn size(&self) -> f64 {
        (self.e[1].log10() - self.e[0].log10()) + (self.nu[1] - self.nu[0]) / NU_LIMIT + (self.rho[1].log10() - self.rho[0].log10())
    }

    /// Closest point of the range to `t`, property by property.
    pub fn clamp(&self, t: &MaterialTriplet) -> MaterialTriplet {
        MaterialTriplet {
            e: t.e.clamp(self.e[0], self.e[1]),
            nu: t.nu.clamp(self.nu[0], self.nu[1]),
            rho: t.rho.clamp(self.rho[0], self.rho[1]),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> MaterialTriplet {
        let log_uniform = |[lo, hi]: [f64; 2], rng: &mut R| {
            let (a, b) = (lo.log10(), hi.log10());
            10f64.powf(a + rng.random::<f64>() * (b - a)).clamp(lo, hi)
        };
        let e = log_uniform(self.e, rng);
        let nu = (self.nu[0] + rng.random::<f64>() * (self.nu[1] - self.nu[0])).clamp(self.nu[0], self.nu[1]);
        let rho = log_uniform(self.rho, rng);
        MaterialTriplet { e, nu, rho }
    }
}

/// Ordered, non-empty collection of uniquely named ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MaterialRange>", into = "Vec<MaterialRange>")]
pub struct MaterialRangeDb {
    ranges: Vec<MaterialRange>,
}

impl TryFrom<Vec<MaterialRange>> for MaterialRangeDb {
    type Error = Error;

    fn try_from(ranges: Vec<MaterialRange>) -> Result<Self> {
        Self::new(ranges)
    }
}

impl From<MaterialRangeDb> for Vec<MaterialRange> {
    fn from(db: MaterialRangeDb) -> Self {
        db.ranges
    }
}

impl MaterialRangeDb {
    pub fn new(ranges: Vec<MaterialRange>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(invalid("empty database"));
        }
        let mut seen = HashSet::new();
        for r in &ranges {
            r.validate()?;
            if !seen.insert(r.name.as_str()) {
                return Err(invalid(format!("duplicate range name '{}'", r.name)));
            }
        }
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[MaterialRange] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let ranges: Vec<MaterialRange> = serde_json::from_str(s)?;
        Self::new(ranges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Ranges for common engineering materials shipped with the crate.
    pub fn reference() -> Self {
        Self::from_json_str(include_str!("../data/reference_ranges.json")).expect("bundled range file is valid")
    }

    /// True if some range contains `t`.
    pub fn contains(&self, t: &MaterialTriplet) -> bool {
        self.ranges.iter().any(|r| r.contains(t))
    }

    /// Number of samples each range receives out of `total`.
    pub fn allocation(&self, total: usize) -> Vec<usize> {
        let sizes: Vec<f64> = self.ranges.iter().map(MaterialRange::size).collect();
        let sum: f64 = sizes.iter().sum();
        let share = |s: f64| if sum > 0.0 { s / sum } else { 1.0 / sizes.len() as f64 };
        sizes.iter().map(|&s| ((total as f64 * share(s)).round() as usize).max(1)).collect()
    }
}

/// Draws triplets from every range, proportionally to range size (at least one each).
pub fn sample_triplets(db: &MaterialRangeDb, total: usize, seed: u64) -> Result<Vec<MaterialTriplet>> {
    if total < db.len() {
        return Err(invalid(format!("total {total} is smaller than the database size {}", db.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    for (range, count) in db.ranges.iter().zip(db.allocation(total)) {
        out.extend((0..count).map(|_| range.sample(&mut rng)));
    }
    Ok(out)
}

fn dedupe_key(t: &MaterialTriplet) -> (String, String, String) {
    (format!("{:.5e}", t.e), format!("{:.5e}", t.nu), format!("{:.5e}", t.rho))
}

/// Drops triplets that agree with an earlier one to six significant digits in every property.
pub fn dedupe(triplets: &[MaterialTriplet]) -> Vec<MaterialTriplet> {
    let mut seen = HashSet::new();
    triplets.iter().filter(|t| seen.insert(dedupe_key(t))).copied().collect()
}

/// Min/max bounds of log10 E, ν and log10 ρ used to map triplets into the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub log_e: [f64; 2],
    pub nu: [f64; 2],
    pub log_rho: [f64; 2],
}

impl Normalizer {
    pub fn fit(triplets: &[MaterialTriplet]) -> Result<Self> {
        if triplets.len() < 2 {
            return Err(invalid("normalizer needs at least two triplets"));
        }
        let bounds = |f: &dyn Fn(&MaterialTriplet) -> f64| {
            triplets.iter().map(f).fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], v| [lo.min(v), hi.max(v)])
        };
        let n = Self {
            log_e: bounds(&|t| t.e.log10()),
            nu: bounds(&|t| t.nu),
            log_rho: bounds(&|t| t.rho.log10()),
        };
        n.check()?;
        Ok(n)
    }

    pub fn check(&self) -> Result<()> {
        for (name, [lo, hi]) in [("E", self.log_e), ("nu", self.nu), ("rho", self.log_rho)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid(format!("zero spread in {name}")));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, t: &MaterialTriplet) -> [f64; 3] {
        let unit = |v: f64, [lo, hi]: [f64; 2]| (v - lo) / (hi - lo);
        [unit(t.e.log10(), self.log_e), unit(t.nu, self.nu), unit(t.rho.log10(), self.log_rho)]
    }

    /// Inverse of [`Normalizer::normalize`]; no clamping is applied.
    pub fn denormalize(&self, x: [f64; 3]) -> MaterialTriplet {
        let lerp = |u: f64, [lo, hi]: [f64; 2]| lo + u * (hi - lo);
        MaterialTriplet {
            e: 10f64.powf(lerp(x[0], self.log_e)),
            nu: lerp(x[1], self.nu),
            rho: 10f64.powf(lerp(x[2], self.log_rho)),
        }
    }
}

/// Relative distance of a triplet from the closest range of a database.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityError {
    pub e_err: f64,
    pub nu_err: f64,
    pub rho_err: f64,
    /// Index of the range the errors were measured against.
    pub range: usize,
}

impl ValidityError {
    pub fn is_zero(&self) -> bool {
        self.e_err == 0.0 && self.nu_err == 0.0 && self.rho_err == 0.0
    }
}

fn clamp_distance(t: &MaterialTriplet, c: &MaterialTriplet) -> f64 {
    (t.e.log10() - c.e.log10()).abs() + (t.nu - c.nu).abs() / NU_LIMIT + (t.rho.log10() - c.rho.log10()).abs()
}

/// Errors against the range whose clamped projection is closest (ties go to the earlier range).
pub fn validity_error(t: &MaterialTriplet, db: &MaterialRangeDb) -> ValidityError {
    let mut best = (f64::INFINITY, 0, *t);
    for (i, r) in db.ranges.iter().enumerate() {
        let c = r.clamp(t);
        let d = if r.contains(t) { 0.0 } else { clamp_distance(t, &c) };
        if d < best.0 {
            best = (d, i, c);
        }
    }
    let (_, range, c) = best;
    let e_err = if t.e == c.e { 0.0 } else { (t.e.log10() - c.e.log10()).abs() / c.e.log10().abs().max(1e-12) };
    let nu_err = if t.nu == c.nu { 0.0 } else { (t.nu - c.nu).abs() / c.nu.max(1e-6) };
    let rho_err = if t.rho == c.rho { 0.0 } else { (t.rho - c.rho).abs() / c.rho };
    ValidityError { e_err, nu_err, rho_err, range }
}

#[derive(Serialize, Deserialize)]
struct TripletRow {
    e_pa: f64,
    nu: f64,
    rho_kgm3: f64,
}

/// Reads `e_pa,nu,rho_kgm3` rows, validating every triplet.
pub fn read_triplets_csv<R: Read>(reader: R) -> Result<Vec<MaterialTriplet>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<TripletRow>().enumerate() {
        let row = row?;
        let t = MaterialTriplet::new(row.e_pa, row.nu, row.rho_kgm3).map_err(|e| invalid(format!("row {}: {e}", line + 1)))?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_triplets_csv<W: Write>(writer: W, triplets: &[MaterialTriplet]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in triplets {
        w.serialize(TripletRow { e_pa: t.e, nu: t.nu, rho_kgm3: t.rho })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<MaterialTriplet>> {
    read_triplets_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(name: &str, e: [f64; 2], nu: [f64; 2], rho: [f64; 2]) -> MaterialRange {
        MaterialRange { name: name.into(), e, nu, rho }
    }

    fn steel() -> MaterialRange {
        range("Steel", [2e11, 2e11], [0.31, 0.31], [7700.0, 7700.0])
    }

    #[test]
    fn loads_single_entry() {
        let db = MaterialRangeDb::from_json_str(
            r#"[{"name":"Steel","e_pa":[2e11,2e11],"nu":[0.31,0.31],"rho_kgm3":[7700,7700]}]"#,
        )
        .unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.ranges()[0], steel());
    }

    #[test]
    fn rejects_empty_and_duplicates() {
        let err = MaterialRangeDb::from_json_str("[]").unwrap_err();
        assert!(err.to_string().contains("empty database"));
        let err = MaterialRangeDb::new(vec![steel(), steel()]).unwrap_err();
        assert!(err.to_string().contains("Steel"));
    }

    #[test]
    fn rejects_bad_field_with_its_name() {
        let err = MaterialRangeDb::new(vec![range("Foam", [1e6, 1e5], [0.1, 0.2], [10.0, 20.0])]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Foam") && msg.contains("e_pa"), "{msg}");
    }

    #[test]
    fn reference_db_is_valid() {
        let db = MaterialRangeDb::reference();
        assert_eq!(db.len(), 19);
        assert!(db.ranges().iter().any(|r| r.name == "Steel"));
    }

    #[test]
    fn zero_width_range_repeats_its_point() {
        let db = MaterialRangeDb::new(vec![steel()]).unwrap();
        let ts = sample_triplets(&db, 3, 1).unwrap();
        assert_eq!(ts, vec![MaterialTriplet { e: 2e11, nu: 0.31, rho: 7700.0 }; 3]);
    }

    #[test]
    fn allocation_follows_size_ratio() {
        // sizes: 3 decades of E against 1 decade.
        let db = MaterialRangeDb::new(vec![
            range("a", [1e6, 1e9], [0.3, 0.3], [1000.0, 1000.0]),
            range("b", [1e6, 1e7], [0.3, 0.3], [1000.0, 1000.0]),
        ])
        .unwrap();
        let counts = db.allocation(400);
        assert!(counts[0].abs_diff(300) <= 1 && counts[1].abs_diff(100) <= 1, "{counts:?}");
        let ts = sample_triplets(&db, 400, 5).unwrap();
        assert_eq!(ts.len(), counts.iter().sum::<usize>());
    }

    #[test]
    fn sampling_requires_one_per_range() {
        let db = MaterialRangeDb::reference();
        assert!(sample_triplets(&db, db.len() - 1, 0).is_err());
    }

    #[test]
    fn dedupe_at_six_digits() {
        let a = MaterialTriplet { e: 1e9, nu: 0.3, rho: 1000.0 };
        assert_eq!(dedupe(&[a, a]).len(), 1);
        let b = MaterialTriplet { e: 1.0000001e9, ..a };
        let c = MaterialTriplet { e: 1.0000002e9, ..a };
        assert_eq!(dedupe(&[b, c]), vec![b]);
        let d = MaterialTriplet { e: 2e9, ..a };
        assert_eq!(dedupe(&[a, d]), vec![a, d]);
    }

    #[test]
    fn normalizer_bounds_and_round_trip() {
        let ts = [
            MaterialTriplet { e: 1e5, nu: 0.2, rho: 10.0 },
            MaterialTriplet { e: 1e12, nu: 0.4, rho: 1e4 },
        ];
        let n = Normalizer::fit(&ts).unwrap();
        assert_eq!(n.log_e, [5.0, 12.0]);
        assert_eq!(n.nu, [0.2, 0.4]);
        assert_eq!(n.normalize(&ts[0]), [0.0, 0.0, 0.0]);
        assert_eq!(n.normalize(&ts[1]), [1.0, 1.0, 1.0]);
        let t = MaterialTriplet { e: 3.3e7, nu: 0.27, rho: 812.0 };
        let back = n.denormalize(n.normalize(&t));
        assert!(((back.e - t.e) / t.e).abs() < 1e-12);
        assert!(((back.nu - t.nu) / t.nu).abs() < 1e-12);
        assert!(((back.rho - t.rho) / t.rho).abs() < 1e-12);
    }

    #[test]
    fn normalizer_rejects_zero_spread() {
        let t = MaterialTriplet { e: 1e9, nu: 0.3, rho: 1000.0 };
        assert!(Normalizer::fit(&[t, t]).unwrap_err().to_string().contains("zero spread"));
    }

    #[test]
    fn validity_examples() {
        let db = MaterialRangeDb::new(vec![steel()]).unwrap();
        let inside = MaterialTriplet { e: 2e11, nu: 0.31, rho: 7700.0 };
        assert!(validity_error(&inside, &db).is_zero());
        let heavy = MaterialTriplet { rho: 15400.0, ..inside };
        let v = validity_error(&heavy, &db);
        assert_eq!((v.e_err, v.nu_err, v.rho_err), (0.0, 0.0, 1.0));
        let low = MaterialTriplet { e: 1e9, nu: 0.1, rho: 100.0 };
        let v = validity_error(&low, &db);
        assert!(v.e_err > 0.0 && v.nu_err > 0.0 && v.rho_err > 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let ts = vec![MaterialTriplet { e: 2e11, nu: 0.31, rho: 7700.0 }, MaterialTriplet { e: 3.5e6, nu: 0.49, rho: 950.5 }];
        let mut buf = Vec::new();
        write_triplets_csv(&mut buf, &ts).unwrap();
        assert!(buf.starts_with(b"e_pa,nu,rho_kgm3\n"));
        assert_eq!(read_triplets_csv(buf.as_slice()).unwrap(), ts);
    }
}
