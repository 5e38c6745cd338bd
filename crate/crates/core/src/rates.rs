//! Event rates and birthday-to-birthday probabilities.

use std::collections::BTreeSet;

use crate::census::{CensusKey, CensusTable, ValueKind};
use crate::error::{Error, Result};

/// Expected fraction of the year of life lived by a person who has the
/// event, per age.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaProfile {
    head: Vec<f64>,
    rest: f64,
}

impl AlphaProfile {
    pub fn constant(alpha: f64) -> Result<Self> {
        Self::new(Vec::new(), alpha)
    }

    /// `head[a]` for the first ages, `rest` afterwards.
    pub fn new(head: Vec<f64>, rest: f64) -> Result<Self> {
        if head.iter().chain(std::iter::once(&rest)).any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("alpha values must lie in [0, 1]"));
        }
        Ok(AlphaProfile { head, rest })
    }

    /// Death-table emulation: 0.923 at age 0, 0.5 elsewhere.
    pub fn mortality() -> Self {
        Self::with_infant(0.923)
    }

    pub fn with_infant(alpha0: f64) -> Self {
        AlphaProfile { head: vec![alpha0], rest: 0.5 }
    }

    pub fn half() -> Self {
        AlphaProfile { head: Vec::new(), rest: 0.5 }
    }

    pub fn at(&self, age: usize) -> f64 {
        self.head.get(age).copied().unwrap_or(self.rest)
    }
}

/// `X / P_avg` cellwise.
pub fn average_rate(x: &CensusTable, p_avg: &CensusTable) -> Result<CensusTable> {
    let mut out = CensusTable::new(x.resolution().clone(), ValueKind::Real);
    for (k, v) in x.iter() {
        let p = p_avg.get(k);
        if p == 0.0 {
            return Err(Error::domain(format!("events at {k} without exposure")));
        }
        out.set(k.clone(), v / p)?;
    }
    Ok(out)
}

/// `rate / (1 + alpha * rate)`.
pub fn farr_probability(rate: f64, alpha: f64) -> f64 {
    rate / (1.0 + alpha * rate)
}

/// Expected count `P_avg * q / (1 - alpha * q)`.
pub fn invert_farr(q: f64, p_avg: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) || p_avg < 0.0 {
        return Err(Error::domain(format!("invert_farr needs q in [0,1] and P >= 0, got q={q}, P={p_avg}")));
    }
    let den = 1.0 - alpha * q;
    if den <= 0.0 {
        return Err(Error::domain(format!("invert_farr pole at q={q}, alpha={alpha}")));
    }
    Ok(p_avg * q / den)
}

/// Table whose values lie in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTable(CensusTable);

impl ProbabilityTable {
    pub fn new(table: CensusTable) -> Result<Self> {
        if let Some((k, v)) = table.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue { key: k.to_string(), value: v, reason: "probability outside [0,1]".into() });
        }
        Ok(ProbabilityTable(table))
    }

    pub fn table(&self) -> &CensusTable {
        &self.0
    }

    pub fn into_table(self) -> CensusTable {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClipStats {
    pub clipped: usize,
}

/// Model probabilities `(X^- + X^+) / 2` with
/// `X^-(y) = X(y) / (P_avg(y) + Q(y)/2)` and `X^+` the same quotient at
/// `min(y+1, y_n)`. `Q` counts cohort leavers (deaths plus emigrants).
pub fn farr_probability_model(
    x: &CensusTable,
    p: &CensusTable,
    q: &CensusTable,
    y_n: i32,
) -> Result<(ProbabilityTable, ClipStats)> {
    let xr = x.resolution();
    if p.level() != x.level() || q.level() != x.level() {
        return Err(Error::ResolutionMismatch("events, population and leavers must share a level".into()));
    }
    if y_n > xr.last_year || y_n < xr.first_year {
        return Err(Error::Missing(format!("event year {y_n} outside {}..={}", xr.first_year, xr.last_year)));
    }
    let pr = p.resolution();
    if pr.first_year > xr.first_year || pr.last_year < y_n {
        return Err(Error::Missing(format!(
            "population covers {}..={} but events need {}..={y_n}",
            pr.first_year, pr.last_year, xr.first_year
        )));
    }
    let p_last = pr.last_year;
    let quotient = |k: &CensusKey, year: i32| -> Result<f64> {
        let ky = k.with_year(year);
        let xv = x.get(&ky);
        if xv == 0.0 {
            return Ok(0.0);
        }
        let pa = 0.5 * (p.get(&ky) + p.get(&k.with_year((year + 1).min(p_last))));
        let den = pa + 0.5 * q.get(&ky);
        if den <= 0.0 {
            return Err(Error::domain(format!("events at {ky} without exposure")));
        }
        Ok(xv / den)
    };

    let mut res = xr.clone();
    res.last_year = y_n;
    let mut out = CensusTable::new(res, ValueKind::Real);
    let mut stats = ClipStats::default();
    for y in xr.first_year..=y_n {
        let y2 = (y + 1).min(y_n);
        let keys: BTreeSet<CensusKey> = x
            .keys()
            .filter(|k| k.year == y || k.year == y2)
            .map(|k| k.with_year(y))
            .collect();
        for k in keys {
            let mut v = 0.5 * quotient(&k, y)? + 0.5 * quotient(&k, y2)?;
            if v > 1.0 {
                stats.clipped += 1;
                v = 1.0;
            }
            out.set(k, v)?;
        }
    }
    if stats.clipped > 0 {
        log::warn!("{} probabilities clipped to 1", stats.clipped);
    }
    Ok((ProbabilityTable(out), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::census::{AgeClass, RegionId, ResolutionSpec, Sex};
    use crate::region::RegionLevel;
    use proptest::prelude::*;

    fn key(y: i32) -> CensusKey {
        CensusKey::new(y, RegionId::new("AT-1"), Sex::Female, Some(AgeClass::Single(30)))
    }

    fn res() -> ResolutionSpec {
        ResolutionSpec::new(2000..=2004, RegionLevel::FederalStates)
            .with_sexes()
            .with_ages(vec![AgeClass::Single(30)])
    }

    fn table(vals: &[f64]) -> CensusTable {
        let mut t = CensusTable::new(res(), ValueKind::Real);
        for (i, v) in vals.iter().enumerate() {
            t.set(key(2000 + i as i32), *v).unwrap();
        }
        t
    }

    #[test]
    fn scalar_examples() {
        assert_eq!(farr_probability(0.0, 0.5), 0.0);
        assert!((farr_probability(0.1, 0.5) - 2.0 / 21.0).abs() < 1e-16);
        assert!((farr_probability(0.01, 0.923) - 0.00990854).abs() < 1e-8);
        assert!((invert_farr(2.0 / 21.0, 1000.0, 0.5).unwrap() - 100.0).abs() < 1e-10);
        assert_eq!(invert_farr(0.0, 1000.0, 0.5).unwrap(), 0.0);
        assert!(invert_farr(1.0, 1000.0, 1.0).is_err());
    }

    #[test]
    fn average_rate_rules() {
        let x = table(&[100.0, 0.0, 0.0, 0.0, 0.0]);
        let p = table(&[1000.0, 0.0, 0.0, 0.0, 0.0]);
        let r = average_rate(&x, &p).unwrap();
        assert_eq!(r.get(&key(2000)), 0.1);
        assert_eq!(r.get(&key(2001)), 0.0);
        assert!(average_rate(&table(&[0.0, 1.0, 0.0, 0.0, 0.0]), &p).is_err());
    }

    #[test]
    fn stationary_model() {
        let p = table(&[1000.0; 5]);
        let d = table(&[100.0; 5]);
        let (pr, st) = farr_probability_model(&d, &p, &d, 2004).unwrap();
        assert_eq!(st.clipped, 0);
        for y in 2000..=2004 {
            assert!((pr.table().get(&key(y)) - 100.0 / 1050.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_year_mean() {
        let p = table(&[1000.0, 1200.0, 1100.0, 1000.0, 1000.0]);
        let x = table(&[50.0, 80.0, 0.0, 0.0, 0.0]);
        let q = table(&[60.0, 90.0, 0.0, 0.0, 0.0]);
        let (pr, _) = farr_probability_model(&x, &p, &q, 2004).unwrap();
        let m = 50.0 / (1100.0 + 30.0);
        let pl = 80.0 / (1150.0 + 45.0);
        assert!((pr.table().get(&key(2000)) - 0.5 * (m + pl)).abs() < 1e-15);
        // last year: the + term falls back to y_n itself
        let (pr, _) = farr_probability_model(&x, &p, &q, 2001).unwrap();
        assert!((pr.table().get(&key(2001)) - pl).abs() < 1e-15);
        assert!(farr_probability_model(&x, &p, &q, 2010).is_err());
    }

    #[test]
    fn zero_events() {
        let p = table(&[1000.0; 5]);
        let z = table(&[0.0; 5]);
        let (pr, _) = farr_probability_model(&z, &p, &z, 2004).unwrap();
        assert!(pr.table().is_empty());
    }

    #[test]
    fn clipping_counted() {
        let p = table(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        let x = table(&[10.0, 0.0, 0.0, 0.0, 0.0]);
        let q = table(&[0.0; 5]);
        let (pr, st) = farr_probability_model(&x, &p, &q, 2000).unwrap();
        assert_eq!(st.clipped, 1);
        assert_eq!(pr.table().get(&key(2000)), 1.0);
    }

    proptest! {
        #[test]
        fn invert_farr_recovers_counts(frac in 0.0f64..1.0, p in 1.0f64..1e6, alpha in 0.0f64..1.0) {
            let d = frac * p;
            let q = farr_probability(d / p, alpha);
            let back = invert_farr(q, p, alpha).unwrap();
            prop_assert!((back - d).abs() <= 1e-12 * d.max(1e-300) * 4.0, "{} vs {}", back, d);
        }

        #[test]
        fn farr_monotone_and_bounded(r1 in 0.0f64..50.0, dr in 1e-6f64..10.0, alpha in 0.01f64..1.0) {
            let a = farr_probability(r1, alpha);
            let b = farr_probability(r1 + dr, alpha);
            prop_assert!(b > a);
            prop_assert!(b <= (r1 + dr).min(1.0 / alpha) + 1e-15);
        }

        #[test]
        fn stationary_equals_single_year(pop in 10.0f64..1e5, frac in 0.0f64..0.3) {
            let d = pop * frac;
            let p = table(&[pop; 5]);
            let dt = table(&[d; 5]);
            let (pr, _) = farr_probability_model(&dt, &p, &dt, 2004).unwrap();
            let want = farr_probability(d / pop, 0.5);
            prop_assert!((pr.table().get(&key(2002)) - want).abs() <= 1e-14);
        }
    }
}
