//! Population balance equations and the immigrant residual.

use std::collections::BTreeMap;

use crate::census::{CensusKey, CensusTable, Dim, RegionId, Sex, ValueKind};
use crate::error::{Error, Result};

/// `P + B + I - D - E`. Errors when inputs are inconsistent enough to go
/// negative.
pub fn project_population(p: f64, b: f64, i: f64, d: f64, e: f64) -> Result<f64> {
    project_population_regional(p, b, i, d, e, 0.0)
}

/// `P + B + I - D - E + dM`.
pub fn project_population_regional(p: f64, b: f64, i: f64, d: f64, e: f64, dm: f64) -> Result<f64> {
    let next = p + b + i - d - e + dm;
    if next < 0.0 {
        return Err(Error::domain(format!("balance gives negative population {next}")));
    }
    Ok(next)
}

/// `dM(r) = sum over r2 of M(r2 -> r) - M(r -> r2)`, keyed like the flow
/// table without the destination.
pub fn net_internal_migration(m: &CensusTable) -> Result<CensusTable> {
    if !m.resolution().od {
        return Err(Error::ResolutionMismatch("net migration needs a flow table".into()));
    }
    let mut res = m.resolution().clone();
    res.od = false;
    let mut acc: BTreeMap<CensusKey, f64> = BTreeMap::new();
    for (k, v) in m.iter() {
        let to = k.region2.clone().expect("flow keys carry a destination");
        if to == k.region {
            continue;
        }
        let out = CensusKey { region2: None, ..k.clone() };
        let inc = CensusKey { region: to, region2: None, ..k.clone() };
        *acc.entry(out).or_insert(0.0) -= v;
        *acc.entry(inc).or_insert(0.0) += v;
    }
    acc.retain(|_, v| *v != 0.0);
    Ok(CensusTable::from_parts(res, ValueKind::Signed, acc))
}

/// Rounds half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

#[derive(Clone, Debug, Default)]
pub struct ResidualReport {
    /// Cells whose residual was negative and set to zero.
    pub floored: Vec<(i32, Sex, f64)>,
}

/// National immigrants per (year, sex):
/// `round(P(y+1) - P(y) - B(y) + E(y) + D(y))`, floored at zero.
///
/// Inputs are summed over region and age first; `B` is keyed by the sex of
/// the newborn. Years are those of `P` that have a successor.
pub fn residual_immigrants(
    p: &CensusTable,
    b: &CensusTable,
    d: &CensusTable,
    e: &CensusTable,
) -> Result<(CensusTable, ResidualReport)> {
    let collapse = |t: &CensusTable| -> Result<BTreeMap<(i32, Sex), f64>> {
        let a = t.aggregate(&[Dim::Region, Dim::Age, Dim::Region2], None)?;
        Ok(a.iter().map(|(k, v)| ((k.year, k.sex), v)).collect())
    };
    let pr = p.resolution();
    if pr.sexes.is_none() {
        return Err(Error::ResolutionMismatch("population needs a sex dimension".into()));
    }
    if pr.last_year <= pr.first_year {
        return Err(Error::Missing("population needs at least two years".into()));
    }
    let years = pr.first_year..=pr.last_year - 1;
    for (name, t) in [("births", b), ("deaths", d), ("emigrants", e)] {
        let r = t.resolution();
        if r.first_year > *years.start() || r.last_year < *years.end() {
            return Err(Error::Missing(format!("{name} do not cover {}..={}", years.start(), years.end())));
        }
        if r.sexes.is_none() {
            return Err(Error::ResolutionMismatch(format!("{name} need a sex dimension")));
        }
    }
    let (pc, bc, dc, ec) = (collapse(p)?, collapse(b)?, collapse(d)?, collapse(e)?);
    let get = |m: &BTreeMap<(i32, Sex), f64>, y, s| m.get(&(y, s)).copied().unwrap_or(0.0);
    let res = crate::census::ResolutionSpec::new(years.clone(), crate::region::RegionLevel::Country).with_sexes();
    let mut out = CensusTable::new(res, ValueKind::Integer);
    let mut report = ResidualReport::default();
    for y in years {
        for s in [Sex::Male, Sex::Female] {
            let raw = get(&pc, y + 1, s) - get(&pc, y, s) - get(&bc, y, s) + get(&ec, y, s) + get(&dc, y, s);
            let mut v = round_half_away(raw);
            if v < 0.0 {
                log::warn!("negative immigrant residual {raw} for {y} {s}, set to 0");
                report.floored.push((y, s, raw));
                v = 0.0;
            }
            out.set(CensusKey::new(y, RegionId::country(), s, None), v)?;
        }
    }
    Ok((out, report))
}
