//! Relative deviation bands between simulated and reference censuses.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use crate::census::{AgeClass, CensusKey, CensusTable, Dim, RegionId, Sex};
use crate::error::{Error, Result};
use crate::region::RegionLevel;

/// Smallest and largest `(Y - X) / max(1, X)`.
pub fn error_band(y: &[f64], x: &[f64]) -> Result<(f64, f64)> {
    if y.is_empty() || y.len() != x.len() {
        return Err(Error::invalid(format!("series of lengths {} and {}", y.len(), x.len())));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (a, b) in y.iter().zip(x) {
        let e = (a - b) / b.max(1.0);
        lo = lo.min(e);
        hi = hi.max(e);
    }
    Ok((lo, hi))
}

/// Cellwise mean of tables with identical resolution.
pub fn mc_mean(runs: &[CensusTable]) -> Result<CensusTable> {
    let first = runs.first().ok_or_else(|| Error::invalid("no runs to average"))?;
    let mut acc: BTreeMap<CensusKey, f64> = BTreeMap::new();
    for r in runs {
        if r.resolution() != first.resolution() {
            return Err(Error::ResolutionMismatch("runs differ in resolution".into()));
        }
        for (k, v) in r.iter() {
            *acc.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    let n = runs.len() as f64;
    let mut out = CensusTable::new(first.resolution().clone(), crate::census::ValueKind::Real);
    for (k, v) in acc {
        out.set(k, v / n)?;
    }
    Ok(out)
}

/// Grouping of a comparison: optional region level, sex, and age bands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub level: Option<RegionLevel>,
    pub sex: bool,
    /// `Some(0)` keeps the table's own age classes.
    pub age_band: Option<u32>,
}

impl GroupSpec {
    pub fn total() -> Self {
        GroupSpec { level: None, sex: false, age_band: None }
    }
}

impl FromStr for GroupSpec {
    type Err = Error;

    /// Comma list of `fed`, a level name, `sex`, `age` or `ageN`; `total`
    /// alone gives one global group.
    fn from_str(s: &str) -> Result<Self> {
        let mut g = GroupSpec::total();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "total" => {}
                "fed" => g.level = Some(RegionLevel::FederalStates),
                "sex" => g.sex = true,
                "age" => g.age_band = Some(0),
                t if t.starts_with("age") => {
                    let w: u32 = t[3..].parse().map_err(|_| Error::invalid(format!("bad age grouping {t:?}")))?;
                    if w == 0 {
                        return Err(Error::invalid("age band width must be positive"));
                    }
                    g.age_band = Some(w);
                }
                t => g.level = Some(t.parse()?),
            }
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationRow {
    pub region: RegionId,
    pub sex: Sex,
    pub age: Option<AgeClass>,
    pub e_min: f64,
    pub e_max: f64,
}

fn group_table(t: &CensusTable, g: &GroupSpec) -> Result<CensusTable> {
    let mut drop = vec![Dim::Region2];
    if g.level.is_none() {
        drop.push(Dim::Region);
    }
    if !g.sex {
        drop.push(Dim::Sex);
    }
    if g.age_band.is_none() {
        drop.push(Dim::Age);
    }
    let mut out = t.aggregate(&drop, g.level)?;
    if let (Some(w), Some(classes)) = (g.age_band, t.resolution().ages.as_ref()) {
        if w > 0 {
            let open = classes.iter().find(|c| c.end().is_none()).map(|c| c.start());
            let top = open.unwrap_or_else(|| classes.iter().filter_map(|c| c.end()).max().unwrap_or(0) + 1);
            out = out.regroup_ages(&AgeClass::bands(w, top))?;
        }
    }
    Ok(out)
}

/// One deviation row per group over years `window` (end exclusive).
pub fn compare(sim: &CensusTable, reference: &CensusTable, groups: &GroupSpec, window: Range<i32>) -> Result<Vec<DeviationRow>> {
    if window.is_empty() {
        return Err(Error::invalid("empty comparison window"));
    }
    for (name, t) in [("simulation", sim), ("reference", reference)] {
        let r = t.resolution();
        if r.first_year > window.start || r.last_year < window.end - 1 {
            return Err(Error::Missing(format!(
                "{name} covers {}..={} but the window is {}..{}",
                r.first_year, r.last_year, window.start, window.end
            )));
        }
    }
    let gs = group_table(sim, groups)?;
    let gr = group_table(reference, groups)?;
    let mut keys: BTreeSet<(RegionId, Sex, Option<AgeClass>)> = BTreeSet::new();
    for t in [&gs, &gr] {
        for k in t.keys().filter(|k| window.contains(&k.year)) {
            keys.insert((k.region.clone(), k.sex, k.age));
        }
    }
    let mut rows = Vec::new();
    for (region, sex, age) in keys {
        let (mut y, mut x) = (Vec::new(), Vec::new());
        for yr in window.clone() {
            let k = CensusKey::new(yr, region.clone(), sex, age);
            y.push(gs.get(&k));
            x.push(gr.get(&k));
        }
        let (e_min, e_max) = error_band(&y, &x)?;
        rows.push(DeviationRow { region, sex, age, e_min, e_max });
    }
    Ok(rows)
}

pub fn write_deviations<W: Write>(rows: &[DeviationRow], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wtr.write_record(["region", "sex", "age", "e_min_pct", "e_max_pct", "e_min", "e_max"])?;
    for r in rows {
        wtr.write_record([
            r.region.to_string(),
            r.sex.token().to_string(),
            r.age.map_or_else(|| "-".to_string(), |a| a.to_string()),
            format!("{:.2}", 100.0 * r.e_min),
            format!("{:.2}", 100.0 * r.e_max),
            crate::io::format_value(r.e_min),
            crate::io::format_value(r.e_max),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
