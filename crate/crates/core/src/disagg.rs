//! Disaggregation of coarse counts over fine cells.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rayon::prelude::*;

use crate::census::{AgeClass, CensusKey, CensusTable, Dim, RegionId, ResolutionSpec, Sex, ValueKind};
use crate::error::{Error, Result};
use crate::region::{RegionHierarchy, RegionLevel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Integer apportionment, see [`huntington_hill`].
    HuntingtonHill,
    Proportional,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    prio: f64,
    p: f64,
    idx: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // priorities and weights are finite, so partial_cmp never fails
        self.prio
            .partial_cmp(&other.prio)
            .unwrap()
            .then(self.p.partial_cmp(&other.p).unwrap())
            .then(other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn priority(p: f64, w: u64) -> f64 {
    if w == 0 {
        p
    } else {
        let w = w as f64;
        p / (w * (w + 1.0)).sqrt()
    }
}

fn check_weights(p: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for &v in p {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!("weight {v} must be finite and non-negative")));
        }
        s += v;
    }
    Ok(s)
}

/// Apportions the non-negative integer `x` over weights `p`.
///
/// Each of the `x` seats goes to the largest `p_j / sqrt(w_j (w_j + 1))`,
/// with an unseated entry ranking at `p_j`. Ties go to the larger weight,
/// then the lower index. For integral weights the first `k * sum(p)` seats
/// are placed as `k * p` directly.
pub fn huntington_hill(x: f64, p: &[f64]) -> Result<Vec<u64>> {
    if !x.is_finite() || x < 0.0 || x.fract() != 0.0 {
        return Err(Error::invalid(format!("seat count {x} must be a non-negative integer")));
    }
    let total = check_weights(p)?;
    let mut w = vec![0u64; p.len()];
    if x == 0.0 {
        return Ok(w);
    }
    if total == 0.0 {
        return Err(Error::ZeroDistribution { cell: format!("{x} seats over zero weights") });
    }
    let mut remaining = x as u64;
    if p.iter().all(|v| v.fract() == 0.0) {
        let k = (x / total).floor() as u64;
        if k > 0 {
            for (wj, &pj) in w.iter_mut().zip(p) {
                *wj = k * pj as u64;
            }
            remaining -= k * total as u64;
        }
    }
    let mut heap: BinaryHeap<Entry> = p
        .iter()
        .enumerate()
        .filter(|(_, &pj)| pj > 0.0)
        .map(|(idx, &pj)| Entry { prio: priority(pj, w[idx]), p: pj, idx })
        .collect();
    for _ in 0..remaining {
        let mut top = heap.pop().expect("positive weights exist");
        w[top.idx] += 1;
        top.prio = priority(top.p, w[top.idx]);
        heap.push(top);
    }
    Ok(w)
}

/// `p_j * x / sum(p)`.
pub fn proportional(x: f64, p: &[f64]) -> Result<Vec<f64>> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::invalid(format!("amount {x} must be finite and non-negative")));
    }
    let total = check_weights(p)?;
    if total == 0.0 {
        if x == 0.0 {
            return Ok(vec![0.0; p.len()]);
        }
        return Err(Error::ZeroDistribution { cell: format!("{x} over zero weights") });
    }
    Ok(p.iter().map(|&pj| pj * x / total).collect())
}

pub struct DisaggSpec<'a> {
    pub source: &'a CensusTable,
    pub distribution: &'a CensusTable,
    /// Dimensions on which the distribution is matched exactly even though
    /// they are not refined. Unrefined dimensions outside the key are pooled.
    pub key_dims: Vec<Dim>,
    /// Target resolution; the year range is taken from the source.
    pub target: ResolutionSpec,
    pub method: Method,
    pub uniform_fallback: bool,
    pub hierarchy: &'a RegionHierarchy,
}

type DistKey = (Option<i32>, Option<RegionId>, Option<Sex>, Option<Option<AgeClass>>);

struct Matching {
    year: bool,
    region: bool,
    sex: bool,
    age: bool,
}

impl Matching {
    fn key(&self, k: &CensusKey) -> DistKey {
        (
            self.year.then_some(k.year),
            self.region.then(|| k.region.clone()),
            self.sex.then_some(k.sex),
            self.age.then_some(k.age),
        )
    }
}

/// Splits every source cell over the target cells it aggregates, weighted by
/// the matching distribution values.
pub fn disaggregate_table(spec: &DisaggSpec) -> Result<CensusTable> {
    let src = spec.source.resolution();
    let tgt = &spec.target;
    if src.od || tgt.od {
        return Err(Error::invalid("flow tables are not disaggregated here"));
    }
    if !tgt.level.is_finer_or_equal(src.level) {
        return Err(Error::NotCoarser { from: tgt.level.to_string(), to: src.level.to_string() });
    }
    let region_refined = tgt.level != src.level;
    let sex_refined = match (&src.sexes, &tgt.sexes) {
        (None, Some(_)) => true,
        (Some(a), Some(b)) if a == b => false,
        (None, None) => false,
        _ => return Err(Error::ResolutionMismatch("target sexes must equal or refine the source".into())),
    };
    let age_refined = match (&src.ages, &tgt.ages) {
        (None, Some(_)) => true,
        (Some(a), Some(b)) => a != b,
        (None, None) => false,
        (Some(_), None) => {
            return Err(Error::ResolutionMismatch("target drops the age dimension".into()))
        }
    };
    // each fine age class must sit inside exactly one coarse class
    let mut fine_ages: HashMap<Option<AgeClass>, Vec<Option<AgeClass>>> = HashMap::new();
    let tgt_ages = tgt.age_list();
    match &src.ages {
        None => {
            fine_ages.insert(None, tgt_ages.clone());
        }
        Some(coarse) => {
            for fa in tgt_ages.iter().flatten() {
                let owners: Vec<_> = coarse.iter().filter(|c| c.contains(*fa)).collect();
                if owners.len() != 1 {
                    return Err(Error::ResolutionMismatch(format!("age class {fa} does not nest in the source")));
                }
                fine_ages.entry(Some(*owners[0])).or_default().push(Some(*fa));
            }
        }
    }
    let m = Matching {
        year: spec.key_dims.contains(&Dim::Year),
        region: region_refined || spec.key_dims.contains(&Dim::Region),
        sex: sex_refined || spec.key_dims.contains(&Dim::Sex),
        age: age_refined || spec.key_dims.contains(&Dim::Age),
    };

    let mut dist = spec.distribution.clone();
    if m.region && dist.level() != tgt.level {
        dist = dist.aggregate(&[], Some(tgt.level))?;
    }
    if m.sex && dist.resolution().sexes.is_none() && tgt.sexes.is_some() {
        return Err(Error::ResolutionMismatch("distribution lacks the sex dimension".into()));
    }
    if m.age {
        match (&dist.resolution().ages, &tgt.ages) {
            (None, Some(_)) => {
                return Err(Error::ResolutionMismatch("distribution lacks the age dimension".into()))
            }
            (Some(d), Some(t)) if d != t => dist = dist.regroup_ages(t)?,
            _ => {}
        }
    }
    let mut weights: HashMap<DistKey, f64> = HashMap::new();
    for (k, v) in dist.iter() {
        *weights.entry(m.key(k)).or_insert(0.0) += v;
    }

    let mut children: HashMap<RegionId, Vec<RegionId>> = HashMap::new();
    for r in spec.source.regions() {
        let kids = spec.hierarchy.children(&r, src.level, tgt.level)?;
        if kids.is_empty() {
            return Err(Error::Missing(format!("no {} regions under {r}", tgt.level)));
        }
        children.insert(r, kids);
    }
    let tgt_sexes = tgt.sex_list();

    let cells: Vec<(&CensusKey, f64)> = spec.source.iter().collect();
    let parts: Vec<Result<Vec<(CensusKey, f64)>>> = cells
        .par_iter()
        .map(|&(ck, value)| {
            let sexes: Vec<Sex> = if sex_refined { tgt_sexes.clone() } else { vec![ck.sex] };
            let ages = fine_ages.get(&ck.age).cloned().unwrap_or_default();
            let mut fine = Vec::new();
            for r in &children[&ck.region] {
                for &s in &sexes {
                    for &a in &ages {
                        fine.push(CensusKey::new(ck.year, r.clone(), s, a));
                    }
                }
            }
            let mut w: Vec<f64> = fine.iter().map(|k| weights.get(&m.key(k)).copied().unwrap_or(0.0)).collect();
            if w.iter().all(|&v| v == 0.0) {
                if !spec.uniform_fallback {
                    return Err(Error::ZeroDistribution { cell: ck.to_string() });
                }
                log::warn!("uniform fallback for {ck}");
                w.iter_mut().for_each(|v| *v = 1.0);
            }
            let vals: Vec<f64> = match spec.method {
                Method::HuntingtonHill => {
                    huntington_hill(value, &w)
                        .map_err(|e| Error::invalid(format!("cell {ck}: {e}")))?
                        .into_iter()
                        .map(|v| v as f64)
                        .collect()
                }
                Method::Proportional => proportional(value, &w)?,
            };
            Ok(fine.into_iter().zip(vals).filter(|(_, v)| *v != 0.0).collect())
        })
        .collect();

    let kind = match spec.method {
        Method::HuntingtonHill => ValueKind::Integer,
        Method::Proportional => ValueKind::Real,
    };
    let mut res = tgt.clone();
    res.first_year = src.first_year;
    res.last_year = src.last_year;
    let mut out = CensusTable::new(res, kind);
    for part in parts {
        for (k, v) in part? {
            out.add(k, v)?;
        }
    }
    Ok(out)
}

/// Proportional split of a flow table onto finer origins and destinations.
///
/// A coarse flow `R1 -> R2` goes to the pairs `r1 -> r2` below it with
/// weight `w(r1) w(r2)`, where `w` is the year's total of `weights` in the
/// region (pooled over all years when the year is missing). With
/// `exclude_self`, pairs with `r1 == r2` get no weight.
pub fn disaggregate_flows(
    source: &CensusTable,
    weights: &CensusTable,
    level: RegionLevel,
    exclude_self: bool,
    hierarchy: &RegionHierarchy,
) -> Result<CensusTable> {
    let src = source.resolution();
    if !src.od {
        return Err(Error::invalid("flow disaggregation needs a flow table"));
    }
    if !level.is_finer_or_equal(src.level) {
        return Err(Error::NotCoarser { from: level.to_string(), to: src.level.to_string() });
    }
    let w = weights.aggregate(&[Dim::Sex, Dim::Age, Dim::Region2], Some(level))?;
    let pooled = w.aggregate(&[Dim::Year], None)?;
    let weight = |y: i32, r: &RegionId| -> f64 {
        let v = w.get(&CensusKey::new(y, r.clone(), Sex::Total, None));
        if w.resolution().years().contains(&y) {
            v
        } else {
            pooled.get(&CensusKey::new(pooled.resolution().first_year, r.clone(), Sex::Total, None))
        }
    };
    let mut res = src.clone();
    res.level = level;
    let mut out = CensusTable::new(res, ValueKind::Real);
    for (k, v) in source.iter() {
        let from = hierarchy.children(&k.region, src.level, level)?;
        let to = hierarchy.children(k.region2.as_ref().expect("flow keys carry a destination"), src.level, level)?;
        let mut pairs = Vec::new();
        let mut wts = Vec::new();
        for a in &from {
            for b in &to {
                if exclude_self && a == b {
                    continue;
                }
                pairs.push((a, b));
                wts.push(weight(k.year, a) * weight(k.year, b));
            }
        }
        if wts.iter().all(|x| *x == 0.0) {
            if pairs.is_empty() {
                return Err(Error::ZeroDistribution { cell: k.to_string() });
            }
            log::warn!("uniform fallback for flow {k}");
            wts.iter_mut().for_each(|x| *x = 1.0);
        }
        for ((a, b), part) in pairs.into_iter().zip(proportional(v, &wts)?) {
            if part != 0.0 {
                out.add(CensusKey::flow(k.year, a.clone(), k.sex, k.age, b.clone()), part)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Literal seat-by-seat loop with priorities recomputed from integers.
    fn hh_oracle(x: u64, p: &[f64]) -> Vec<u64> {
        let mut w = vec![0u64; p.len()];
        for _ in 0..x {
            let mut best: Option<usize> = None;
            for j in 0..p.len() {
                if p[j] <= 0.0 {
                    continue;
                }
                let v = priority(p[j], w[j]);
                best = match best {
                    None => Some(j),
                    Some(b) => {
                        let vb = priority(p[b], w[b]);
                        if v > vb || (v == vb && p[j] > p[b]) {
                            Some(j)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            w[best.unwrap()] += 1;
        }
        w
    }

    #[test]
    fn small_examples() {
        assert_eq!(huntington_hill(10.0, &[2.0, 3.0]).unwrap(), vec![4, 6]);
        assert_eq!(huntington_hill(3.0, &[1.0, 1.0]).unwrap(), vec![2, 1]);
        assert_eq!(huntington_hill(0.0, &[0.0, 0.0]).unwrap(), vec![0, 0]);
        assert_eq!(huntington_hill(5.0, &[0.0, 2.0]).unwrap(), vec![0, 5]);
        assert!(huntington_hill(1.5, &[1.0]).is_err());
        assert!(huntington_hill(-1.0, &[1.0]).is_err());
        assert!(huntington_hill(2.0, &[0.0]).is_err());
    }

    #[test]
    fn scaled_uniform_cells() {
        let p = vec![1000.0; 7];
        assert_eq!(huntington_hill(700.0, &p).unwrap(), vec![100; 7]);
    }

    #[test]
    fn proportional_split() {
        assert_eq!(proportional(10.0, &[1.0, 4.0]).unwrap(), vec![2.0, 8.0]);
        assert!(proportional(1.0, &[0.0]).is_err());
    }

    #[test]
    fn flows_split_by_weight_products() {
        let mut h = RegionHierarchy::new();
        for c in ["90101", "90201", "10101", "10102"] {
            h.insert(c, RegionLevel::MunicipalitiesDistricts).unwrap();
        }
        let dd = RegionLevel::DistrictsDistricts;
        let mut od = CensusTable::new(ResolutionSpec::new(2000..=2000, RegionLevel::Districts).with_od(), ValueKind::Integer);
        let f = |a: &str, b: &str| CensusKey::flow(2000, RegionId::new(a), Sex::Total, None, RegionId::new(b));
        od.set(f("900", "900"), 10.0).unwrap();
        od.set(f("101", "900"), 9.0).unwrap();
        let mut w = CensusTable::new(ResolutionSpec::new(2000..=2000, dd), ValueKind::Integer);
        for (r, v) in [("901", 1.0), ("902", 2.0), ("101", 5.0)] {
            w.set(CensusKey::new(2000, RegionId::new(r), Sex::Total, None), v).unwrap();
        }
        let out = disaggregate_flows(&od, &w, dd, true, &h).unwrap();
        assert_eq!(out.get(&f("901", "902")), 5.0);
        assert_eq!(out.get(&f("902", "901")), 5.0);
        assert_eq!(out.get(&f("901", "901")), 0.0);
        assert!((out.get(&f("101", "902")) - 6.0).abs() < 1e-12);
        let back = out.aggregate(&[], Some(RegionLevel::Districts)).unwrap();
        assert!(back.max_abs_diff(&od) < 1e-12);
        assert!(disaggregate_flows(&w, &w, dd, true, &h).is_err());
    }

    proptest! {
        #[test]
        fn hh_matches_literal_loop(x in 0u64..400, p in proptest::collection::vec(0u32..30, 1..8)) {
            let p: Vec<f64> = p.into_iter().map(f64::from).collect();
            prop_assume!(p.iter().sum::<f64>() > 0.0);
            prop_assert_eq!(huntington_hill(x as f64, &p).unwrap(), hh_oracle(x, &p));
        }

        #[test]
        fn hh_fractional_weights(x in 0u64..100, p in proptest::collection::vec(0.0f64..5.0, 1..6)) {
            prop_assume!(p.iter().sum::<f64>() > 0.0);
            let w = huntington_hill(x as f64, &p).unwrap();
            prop_assert_eq!(w.iter().sum::<u64>(), x);
            prop_assert_eq!(w, hh_oracle(x, &p));
        }

        #[test]
        fn hh_k_multiple(k in 0u64..20, p in proptest::collection::vec(0u32..20, 1..6)) {
            let p: Vec<f64> = p.into_iter().map(f64::from).collect();
            let s: f64 = p.iter().sum();
            prop_assume!(s > 0.0);
            let w = huntington_hill(k as f64 * s, &p).unwrap();
            let want: Vec<u64> = p.iter().map(|v| k * *v as u64).collect();
            prop_assert_eq!(w, want);
        }

        #[test]
        fn hh_zero_weight_never_drawn(x in 0u64..200, p in proptest::collection::vec(0u32..4, 1..8)) {
            let p: Vec<f64> = p.into_iter().map(f64::from).collect();
            prop_assume!(p.iter().sum::<f64>() > 0.0);
            let w = huntington_hill(x as f64, &p).unwrap();
            for (wj, pj) in w.iter().zip(&p) {
                if *pj == 0.0 { prop_assert_eq!(*wj, 0); }
            }
        }

        #[test]
        fn hh_house_monotone(x in 0u64..300, p in proptest::collection::vec(0.0f64..20.0, 1..8), integral: bool) {
            let p: Vec<f64> = if integral { p.into_iter().map(f64::floor).collect() } else { p };
            prop_assume!(p.iter().sum::<f64>() > 0.0);
            let lo = huntington_hill(x as f64, &p).unwrap();
            let hi = huntington_hill(x as f64 + 1.0, &p).unwrap();
            prop_assert!(lo.iter().zip(&hi).all(|(a, b)| b >= a), "{:?} -> {:?}", lo, hi);
        }

        #[test]
        fn proportional_conserves(x in 0.0f64..1e6, p in proptest::collection::vec(0.01f64..10.0, 1..10)) {
            let v = proportional(x, &p).unwrap();
            let s: f64 = v.iter().sum();
            prop_assert!((s - x).abs() <= 1e-9 * x.max(1.0));
        }
    }
}
