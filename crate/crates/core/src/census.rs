//! Census keys, resolutions and the sparse table type.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
pub use crate::region::RegionId;
use crate::region::{parent_region, RegionLevel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sex {
    Male,
    Female,
    /// No sex dimension.
    Total,
}

impl Sex {
    pub fn token(self) -> &'static str {
        match self {
            Sex::Male => "m",
            Sex::Female => "f",
            Sex::Total => "-",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Sex::Male => 0,
            Sex::Female => 1,
            Sex::Total => 2,
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Sex {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(Sex::Male),
            "f" => Ok(Sex::Female),
            "-" => Ok(Sex::Total),
            _ => Err(Error::invalid(format!("invalid sex {s:?}"))),
        }
    }
}

/// Age class. `Band` is inclusive on both ends; `Open(a)` is a and above.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AgeClass {
    Single(u32),
    Band { start: u32, end: u32 },
    Open(u32),
}

impl AgeClass {
    pub fn start(self) -> u32 {
        match self {
            AgeClass::Single(a) | AgeClass::Open(a) => a,
            AgeClass::Band { start, .. } => start,
        }
    }

    /// Last age of the class, `None` when open.
    pub fn end(self) -> Option<u32> {
        match self {
            AgeClass::Single(a) => Some(a),
            AgeClass::Band { end, .. } => Some(end),
            AgeClass::Open(_) => None,
        }
    }

    pub fn contains(self, inner: AgeClass) -> bool {
        if inner.start() < self.start() {
            return false;
        }
        match (self.end(), inner.end()) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(e), Some(ie)) => ie <= e,
        }
    }

    pub fn contains_age(self, age: u32) -> bool {
        self.contains(AgeClass::Single(age))
    }

    /// `Single(0..a_max)` followed by `Open(a_max)`.
    pub fn single_years(a_max: u32) -> Vec<AgeClass> {
        let mut v: Vec<AgeClass> = (0..a_max).map(AgeClass::Single).collect();
        v.push(AgeClass::Open(a_max));
        v
    }

    /// Bands of `width` years starting at 0, the last one open at `open_from`.
    pub fn bands(width: u32, open_from: u32) -> Vec<AgeClass> {
        let mut v = Vec::new();
        let mut s = 0;
        while s < open_from {
            let e = (s + width - 1).min(open_from - 1);
            v.push(if s == e { AgeClass::Single(s) } else { AgeClass::Band { start: s, end: e } });
            s += width;
        }
        v.push(AgeClass::Open(open_from));
        v
    }
}

impl Ord for AgeClass {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let key = |c: &AgeClass| (c.start(), c.end().unwrap_or(u32::MAX));
        key(self).cmp(&key(other))
    }
}

impl PartialOrd for AgeClass {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for AgeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgeClass::Single(a) => write!(f, "{a}"),
            AgeClass::Band { start, end } => write!(f, "{start}-{end}"),
            AgeClass::Open(a) => write!(f, "{a}+"),
        }
    }
}

impl FromStr for AgeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("invalid age class {s:?}"));
        if let Some(a) = s.strip_suffix('+') {
            return a.parse().map(AgeClass::Open).map_err(|_| bad());
        }
        if let Some((a, b)) = s.split_once('-') {
            let start: u32 = a.parse().map_err(|_| bad())?;
            let end: u32 = b.parse().map_err(|_| bad())?;
            if end < start {
                return Err(bad());
            }
            return Ok(if start == end { AgeClass::Single(start) } else { AgeClass::Band { start, end } });
        }
        s.parse().map(AgeClass::Single).map_err(|_| bad())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CensusKey {
    pub year: i32,
    pub region: RegionId,
    pub sex: Sex,
    pub age: Option<AgeClass>,
    /// Destination region of flow tables.
    pub region2: Option<RegionId>,
}

impl CensusKey {
    pub fn new(year: i32, region: RegionId, sex: Sex, age: Option<AgeClass>) -> Self {
        CensusKey { year, region, sex, age, region2: None }
    }

    pub fn flow(year: i32, from: RegionId, sex: Sex, age: Option<AgeClass>, to: RegionId) -> Self {
        CensusKey { year, region: from, sex, age, region2: Some(to) }
    }

    pub fn with_year(&self, year: i32) -> Self {
        CensusKey { year, ..self.clone() }
    }
}

impl fmt::Display for CensusKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}", self.year, self.region, self.sex)?;
        match self.age {
            Some(a) => write!(f, ", {a}")?,
            None => write!(f, ", -")?,
        }
        if let Some(r2) = &self.region2 {
            write!(f, " -> {r2}")?;
        }
        write!(f, ")")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dim {
    Year,
    Region,
    Sex,
    Age,
    Region2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolutionSpec {
    pub first_year: i32,
    pub last_year: i32,
    pub level: RegionLevel,
    /// `None` means the table has no sex dimension.
    pub sexes: Option<Vec<Sex>>,
    pub ages: Option<Vec<AgeClass>>,
    /// Flow tables carry a destination region at the same level.
    pub od: bool,
}

impl ResolutionSpec {
    pub fn new(years: std::ops::RangeInclusive<i32>, level: RegionLevel) -> Self {
        ResolutionSpec {
            first_year: *years.start(),
            last_year: *years.end(),
            level,
            sexes: None,
            ages: None,
            od: false,
        }
    }

    pub fn with_sexes(mut self) -> Self {
        self.sexes = Some(vec![Sex::Male, Sex::Female]);
        self
    }

    pub fn with_sex(mut self, sexes: Vec<Sex>) -> Self {
        self.sexes = Some(sexes);
        self
    }

    pub fn with_ages(mut self, ages: Vec<AgeClass>) -> Self {
        self.ages = Some(ages);
        self
    }

    pub fn with_od(mut self) -> Self {
        self.od = true;
        self
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.first_year..=self.last_year
    }

    pub fn with_years(mut self, years: std::ops::RangeInclusive<i32>) -> Self {
        self.first_year = *years.start();
        self.last_year = *years.end();
        self
    }

    pub fn sex_list(&self) -> Vec<Sex> {
        self.sexes.clone().unwrap_or_else(|| vec![Sex::Total])
    }

    pub fn age_list(&self) -> Vec<Option<AgeClass>> {
        match &self.ages {
            Some(a) => a.iter().copied().map(Some).collect(),
            None => vec![None],
        }
    }

    fn check_key(&self, key: &CensusKey) -> Result<()> {
        let bad = |why: &str| Error::ResolutionMismatch(format!("key {key} {why}"));
        if key.year < self.first_year || key.year > self.last_year {
            return Err(bad("outside the year range"));
        }
        match &self.sexes {
            None if key.sex != Sex::Total => return Err(bad("has a sex but the table has none")),
            Some(s) if !s.contains(&key.sex) => return Err(bad("has a sex not in the table")),
            _ => {}
        }
        match (&self.ages, key.age) {
            (None, Some(_)) => return Err(bad("has an age but the table has none")),
            (Some(_), None) => return Err(bad("lacks an age")),
            (Some(a), Some(c)) if !a.contains(&c) => return Err(bad("has an unknown age class")),
            _ => {}
        }
        if self.od != key.region2.is_some() {
            return Err(bad("does not match the flow dimension"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Real,
    Integer,
    /// Differences and net flows; the only kind allowing negatives.
    Signed,
}

/// Sparse census table. Absent keys are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CensusTable {
    res: ResolutionSpec,
    kind: ValueKind,
    cells: BTreeMap<CensusKey, f64>,
}

fn check_value(kind: ValueKind, key: &CensusKey, v: f64) -> Result<()> {
    let bad = |reason: &str| Error::InvalidValue { key: key.to_string(), value: v, reason: reason.into() };
    if !v.is_finite() {
        return Err(bad("not finite"));
    }
    if kind != ValueKind::Signed && v < 0.0 {
        return Err(bad("negative"));
    }
    if kind == ValueKind::Integer && v.fract() != 0.0 {
        return Err(bad("not integral"));
    }
    Ok(())
}

impl CensusTable {
    pub fn new(res: ResolutionSpec, kind: ValueKind) -> Self {
        CensusTable { res, kind, cells: BTreeMap::new() }
    }

    pub fn resolution(&self) -> &ResolutionSpec {
        &self.res
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    pub fn level(&self) -> RegionLevel {
        self.res.level
    }

    /// Sets a cell, replacing any previous value. Zero removes the cell.
    pub fn set(&mut self, key: CensusKey, v: f64) -> Result<()> {
        self.res.check_key(&key)?;
        check_value(self.kind, &key, v)?;
        if v == 0.0 {
            self.cells.remove(&key);
        } else {
            self.cells.insert(key, v);
        }
        Ok(())
    }

    /// Adds to a cell.
    pub fn add(&mut self, key: CensusKey, v: f64) -> Result<()> {
        let cur = self.get(&key);
        self.set(key, cur + v)
    }

    pub fn get(&self, key: &CensusKey) -> f64 {
        self.cells.get(key).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CensusKey, f64)> {
        self.cells.iter().map(|(k, v)| (k, *v))
    }

    pub fn keys(&self) -> impl Iterator<Item = &CensusKey> {
        self.cells.keys()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.cells.values().sum()
    }

    pub fn year_total(&self, year: i32) -> f64 {
        self.cells.iter().filter(|(k, _)| k.year == year).map(|(_, v)| v).sum()
    }

    pub fn regions(&self) -> BTreeSet<RegionId> {
        self.cells.keys().map(|k| k.region.clone()).collect()
    }

    /// Re-labels the value kind, checking every cell.
    pub fn into_kind(mut self, kind: ValueKind) -> Result<Self> {
        for (k, &v) in &self.cells {
            check_value(kind, k, v)?;
        }
        self.kind = kind;
        Ok(self)
    }

    /// Applies `f` to every stored value.
    pub fn map_values(&self, kind: ValueKind, f: impl Fn(&CensusKey, f64) -> f64) -> Result<Self> {
        let mut out = CensusTable::new(self.res.clone(), kind);
        for (k, &v) in &self.cells {
            out.set(k.clone(), f(k, v))?;
        }
        Ok(out)
    }

    pub fn filter(&self, keep: impl Fn(&CensusKey) -> bool) -> Self {
        CensusTable {
            res: self.res.clone(),
            kind: self.kind,
            cells: self.cells.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), *v)).collect(),
        }
    }

    /// Restricts to a year range and narrows the resolution.
    pub fn years(&self, years: std::ops::RangeInclusive<i32>) -> Self {
        let mut t = self.filter(|k| years.contains(&k.year));
        t.res.first_year = (*years.start()).max(self.res.first_year);
        t.res.last_year = (*years.end()).min(self.res.last_year);
        t
    }

    pub fn slice_year(&self, year: i32) -> Self {
        self.years(year..=year)
    }

    /// Moves every cell to another year, used to align slices.
    pub fn relabel_year(&self, year: i32) -> Result<Self> {
        let mut res = self.res.clone();
        res.first_year = year;
        res.last_year = year;
        let mut out = CensusTable::new(res, self.kind);
        for (k, &v) in &self.cells {
            out.add(k.with_year(year), v)?;
        }
        Ok(out)
    }

    /// Sums out the given dimensions and optionally coarsens the region
    /// level. Dropping `Region` on a flow table keeps the destination as the
    /// region; dropping `Year` collapses to the first year.
    pub fn aggregate(&self, drop: &[Dim], level: Option<RegionLevel>) -> Result<Self> {
        let mut res = self.res.clone();
        let to_level = level.unwrap_or(res.level);
        if !to_level.is_coarser_or_equal(res.level) {
            return Err(Error::NotCoarser { from: res.level.to_string(), to: to_level.to_string() });
        }
        let drop_year = drop.contains(&Dim::Year);
        let drop_region = drop.contains(&Dim::Region);
        let drop_sex = drop.contains(&Dim::Sex);
        let drop_age = drop.contains(&Dim::Age);
        let drop_r2 = drop.contains(&Dim::Region2);
        if drop_year {
            res.last_year = res.first_year;
        }
        if drop_sex {
            res.sexes = None;
        }
        if drop_age {
            res.ages = None;
        }
        let od_in = res.od;
        if drop_region && !od_in {
            res.level = RegionLevel::Country;
        } else {
            res.level = to_level;
        }
        if drop_region || drop_r2 {
            res.od = false;
        }
        let mut parents: HashMap<RegionId, RegionId> = HashMap::new();
        let mut lift = |r: &RegionId| -> Result<RegionId> {
            if let Some(p) = parents.get(r) {
                return Ok(p.clone());
            }
            let p = parent_region(r, self.res.level, to_level)?;
            parents.insert(r.clone(), p.clone());
            Ok(p)
        };
        let mut cells: BTreeMap<CensusKey, f64> = BTreeMap::new();
        for (k, &v) in &self.cells {
            let region = if drop_region {
                match (&k.region2, od_in) {
                    (Some(r2), true) => lift(r2)?,
                    _ => RegionId::country(),
                }
            } else {
                lift(&k.region)?
            };
            let region2 = if drop_region || drop_r2 {
                None
            } else {
                match &k.region2 {
                    Some(r2) => Some(lift(r2)?),
                    None => None,
                }
            };
            let nk = CensusKey {
                year: if drop_year { res.first_year } else { k.year },
                region,
                sex: if drop_sex { Sex::Total } else { k.sex },
                age: if drop_age { None } else { k.age },
                region2,
            };
            *cells.entry(nk).or_insert(0.0) += v;
        }
        cells.retain(|_, v| *v != 0.0);
        Ok(CensusTable { res, kind: self.kind, cells })
    }

    /// Maps every age class to the target class containing it.
    pub fn regroup_ages(&self, classes: &[AgeClass]) -> Result<Self> {
        let src = self
            .res
            .ages
            .as_ref()
            .ok_or_else(|| Error::ResolutionMismatch("table has no age dimension".into()))?;
        let mut map = HashMap::new();
        for &c in src {
            let t = classes
                .iter()
                .copied()
                .find(|t| t.contains(c))
                .ok_or_else(|| Error::ResolutionMismatch(format!("age class {c} fits no target class")))?;
            map.insert(c, t);
        }
        let mut res = self.res.clone();
        res.ages = Some(classes.to_vec());
        let mut cells: BTreeMap<CensusKey, f64> = BTreeMap::new();
        for (k, &v) in &self.cells {
            let mut nk = k.clone();
            nk.age = k.age.map(|a| map[&a]);
            *cells.entry(nk).or_insert(0.0) += v;
        }
        Ok(CensusTable { res, kind: self.kind, cells })
    }

    /// Folds all ages at or above `a_max` into the open class `a_max+`.
    pub fn fold_open_age(&self, a_max: u32) -> Result<Self> {
        let src = self
            .res
            .ages
            .as_ref()
            .ok_or_else(|| Error::ResolutionMismatch("table has no age dimension".into()))?;
        let mut classes: Vec<AgeClass> = src.iter().copied().filter(|c| c.end().is_some_and(|e| e < a_max)).collect();
        if let Some(c) = src.iter().find(|c| c.start() < a_max && c.end().is_none_or(|e| e >= a_max)) {
            return Err(Error::ResolutionMismatch(format!("age class {c} straddles {a_max}")));
        }
        classes.push(AgeClass::Open(a_max));
        self.regroup_ages(&classes)
    }

    /// General coarsening to `target`: region level, sex, age classes, the
    /// flow dimension and the year range.
    pub fn aggregate_to(&self, target: &ResolutionSpec) -> Result<Self> {
        let mut drop = Vec::new();
        match (&self.res.sexes, &target.sexes) {
            (Some(_), None) => drop.push(Dim::Sex),
            (None, Some(_)) => {
                return Err(Error::ResolutionMismatch("target has a sex dimension the source lacks".into()))
            }
            _ => {}
        }
        match (&self.res.ages, &target.ages) {
            (Some(_), None) => drop.push(Dim::Age),
            (None, Some(_)) => {
                return Err(Error::ResolutionMismatch("target has an age dimension the source lacks".into()))
            }
            _ => {}
        }
        match (self.res.od, target.od) {
            (true, false) => drop.push(Dim::Region2),
            (false, true) => {
                return Err(Error::ResolutionMismatch("target has a flow dimension the source lacks".into()))
            }
            _ => {}
        }
        let mut t = self.aggregate(&drop, Some(target.level))?;
        if let (Some(src), Some(ages)) = (&t.res.ages, &target.ages) {
            if src != ages {
                t = t.regroup_ages(ages)?;
            }
        }
        if let Some(s) = &target.sexes {
            t.res.sexes = Some(s.clone());
            if t.cells.keys().any(|k| !s.contains(&k.sex)) {
                return Err(Error::ResolutionMismatch("source has sexes outside the target".into()));
            }
        }
        Ok(t.years(target.years()))
    }

    /// Mid-year population `(P(y) + P(min(y+1, last))) / 2` as a one-year
    /// table labelled `y`.
    pub fn average_population(&self, year: i32) -> Result<Self> {
        if year < self.res.first_year || year > self.res.last_year {
            return Err(Error::Missing(format!("population for year {year}")));
        }
        let next = (year + 1).min(self.res.last_year);
        let mut res = self.res.clone();
        res.first_year = year;
        res.last_year = year;
        let mut cells: BTreeMap<CensusKey, f64> = BTreeMap::new();
        for (k, &v) in &self.cells {
            if k.year == year {
                *cells.entry(k.clone()).or_insert(0.0) += 0.5 * v;
            }
            if k.year == next {
                *cells.entry(k.with_year(year)).or_insert(0.0) += 0.5 * v;
            }
        }
        let kind = if self.kind == ValueKind::Signed { ValueKind::Signed } else { ValueKind::Real };
        Ok(CensusTable { res, kind, cells })
    }

    /// Concatenates tables with disjoint years and otherwise equal resolution.
    pub fn merge_time(tables: &[CensusTable]) -> Result<Self> {
        let first = tables.first().ok_or_else(|| Error::invalid("merge_time of no tables"))?;
        let mut res = first.res.clone();
        let mut kind = first.kind;
        let mut seen = BTreeSet::new();
        let mut cells = BTreeMap::new();
        for t in tables {
            let (a, b) = (&t.res, &first.res);
            if a.level != b.level || a.sexes != b.sexes || a.ages != b.ages || a.od != b.od {
                return Err(Error::ResolutionMismatch("merge_time inputs differ beyond years".into()));
            }
            for y in t.res.years() {
                if !seen.insert(y) {
                    return Err(Error::ResolutionMismatch(format!("year {y} appears twice")));
                }
            }
            res.first_year = res.first_year.min(a.first_year);
            res.last_year = res.last_year.max(a.last_year);
            if t.kind != kind {
                kind = if kind == ValueKind::Signed || t.kind == ValueKind::Signed {
                    ValueKind::Signed
                } else {
                    ValueKind::Real
                };
            }
            cells.extend(t.cells.iter().map(|(k, v)| (k.clone(), *v)));
        }
        let span: BTreeSet<i32> = res.years().collect();
        if span != seen {
            return Err(Error::ResolutionMismatch("merge_time leaves a gap in years".into()));
        }
        Ok(CensusTable { res, kind, cells })
    }

    /// Cellwise `self - other` as a signed table.
    pub fn difference(&self, other: &CensusTable) -> Result<Self> {
        let mut out = CensusTable::new(self.res.clone(), ValueKind::Signed);
        for (k, v) in self.iter() {
            out.cells.insert(k.clone(), v);
        }
        for (k, v) in other.iter() {
            *out.cells.entry(k.clone()).or_insert(0.0) -= v;
        }
        out.cells.retain(|_, v| *v != 0.0);
        Ok(out)
    }

    /// Largest absolute cellwise difference.
    pub fn max_abs_diff(&self, other: &CensusTable) -> f64 {
        let mut m: f64 = 0.0;
        for (k, v) in self.iter() {
            m = m.max((v - other.get(k)).abs());
        }
        for (k, v) in other.iter() {
            if !self.cells.contains_key(k) {
                m = m.max(v.abs());
            }
        }
        m
    }

    /// Widens the year range without touching cells.
    pub fn extend_years(&mut self, years: std::ops::RangeInclusive<i32>) {
        self.res.first_year = self.res.first_year.min(*years.start());
        self.res.last_year = self.res.last_year.max(*years.end());
    }

    pub(crate) fn from_parts(res: ResolutionSpec, kind: ValueKind, cells: BTreeMap<CensusKey, f64>) -> Self {
        CensusTable { res, kind, cells }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(s: &str) -> RegionId {
        RegionId::new(s)
    }

    fn fine_table() -> CensusTable {
        let res = ResolutionSpec::new(2000..=2001, RegionLevel::MunicipalitiesDistricts)
            .with_sexes()
            .with_ages(AgeClass::single_years(3));
        let mut t = CensusTable::new(res, ValueKind::Integer);
        let mut v = 1.0;
        for y in 2000..=2001 {
            for reg in ["10101", "10102", "90101", "90201"] {
                for s in [Sex::Male, Sex::Female] {
                    for a in AgeClass::single_years(3) {
                        t.set(CensusKey::new(y, r(reg), s, Some(a)), v).unwrap();
                        v += 1.0;
                    }
                }
            }
        }
        t
    }

    #[test]
    fn age_tokens() {
        for s in ["0", "7", "100+", "5-9"] {
            assert_eq!(s.parse::<AgeClass>().unwrap().to_string(), s);
        }
        assert!("9-5".parse::<AgeClass>().is_err());
        assert!(AgeClass::Open(95).contains(AgeClass::Open(100)));
        assert!(!AgeClass::Band { start: 0, end: 4 }.contains(AgeClass::Open(3)));
        assert_eq!(AgeClass::bands(20, 80).len(), 5);
    }

    #[test]
    fn rejects_bad_values() {
        let res = ResolutionSpec::new(2000..=2000, RegionLevel::Country);
        let mut t = CensusTable::new(res.clone(), ValueKind::Integer);
        let k = CensusKey::new(2000, RegionId::country(), Sex::Total, None);
        assert!(t.set(k.clone(), 1.5).is_err());
        assert!(t.set(k.clone(), -1.0).is_err());
        assert!(t.set(k.clone(), f64::NAN).is_err());
        assert!(t.set(CensusKey::new(2001, RegionId::country(), Sex::Total, None), 1.0).is_err());
        let mut s = CensusTable::new(res, ValueKind::Signed);
        s.set(k, -2.0).unwrap();
    }

    #[test]
    fn coarsen_to_states_conserves_total() {
        let t = fine_table();
        let c = t.aggregate(&[], Some(RegionLevel::FederalStates)).unwrap();
        assert_eq!(c.total(), t.total());
        assert_eq!(c.regions().len(), 2);
        let d = t.aggregate(&[Dim::Sex, Dim::Age], Some(RegionLevel::Districts)).unwrap();
        assert_eq!(d.get(&CensusKey::new(2000, r("900"), Sex::Total, None)), t
            .iter()
            .filter(|(k, _)| k.year == 2000 && k.region.as_str().starts_with('9'))
            .map(|(_, v)| v)
            .sum::<f64>());
    }

    #[test]
    fn fold_open() {
        let t = fine_table();
        let f = t.fold_open_age(1).unwrap();
        assert_eq!(f.resolution().ages.as_ref().unwrap(), &vec![AgeClass::Single(0), AgeClass::Open(1)]);
        assert_eq!(f.total(), t.total());
    }

    #[test]
    fn average_population_clamps_last_year() {
        let t = fine_table();
        let k = CensusKey::new(2001, r("10101"), Sex::Male, Some(AgeClass::Single(0)));
        let avg = t.average_population(2001).unwrap();
        assert_eq!(avg.get(&k), t.get(&k));
        let k0 = k.with_year(2000);
        let avg0 = t.average_population(2000).unwrap();
        assert_eq!(avg0.get(&k0), 0.5 * (t.get(&k0) + t.get(&k)));
    }

    #[test]
    fn merge_time_roundtrip() {
        let t = fine_table();
        let m = CensusTable::merge_time(&[t.slice_year(2000), t.slice_year(2001)]).unwrap();
        assert_eq!(m, t);
        assert!(CensusTable::merge_time(&[t.slice_year(2000), t.slice_year(2000)]).is_err());
    }

    #[test]
    fn flow_drops() {
        let res = ResolutionSpec::new(2000..=2000, RegionLevel::DistrictsDistricts).with_sexes().with_od();
        let mut od = CensusTable::new(res, ValueKind::Integer);
        od.set(CensusKey::flow(2000, r("901"), Sex::Male, None, r("902")), 3.0).unwrap();
        od.set(CensusKey::flow(2000, r("101"), Sex::Male, None, r("902")), 2.0).unwrap();
        let ii = od.aggregate(&[Dim::Region], None).unwrap();
        assert_eq!(ii.get(&CensusKey::new(2000, r("902"), Sex::Male, None)), 5.0);
        let ie = od.aggregate(&[Dim::Region2], None).unwrap();
        assert_eq!(ie.get(&CensusKey::new(2000, r("901"), Sex::Male, None)), 3.0);
        let st = od.aggregate(&[], Some(RegionLevel::FederalStates)).unwrap();
        assert_eq!(st.get(&CensusKey::flow(2000, r("AT-9"), Sex::Male, None, r("AT-9"))), 3.0);
    }

    proptest! {
        #[test]
        fn aggregation_conserves(vals in proptest::collection::vec(0u32..1000, 48)) {
            let mut t = fine_table();
            let keys: Vec<_> = t.keys().cloned().collect();
            for (k, v) in keys.iter().zip(vals.iter().cycle()) {
                t.set(k.clone(), *v as f64).unwrap();
            }
            for lvl in [RegionLevel::DistrictsDistricts, RegionLevel::Districts, RegionLevel::FederalStates, RegionLevel::Country] {
                let c = t.aggregate(&[Dim::Age], Some(lvl)).unwrap();
                prop_assert_eq!(c.total(), t.total());
                let cc = c.aggregate(&[Dim::Sex], Some(RegionLevel::Country)).unwrap();
                let direct = t.aggregate(&[Dim::Age, Dim::Sex], Some(RegionLevel::Country)).unwrap();
                prop_assert_eq!(cc, direct);
                let region_first = t.aggregate(&[], Some(lvl)).unwrap().aggregate(&[Dim::Sex], None).unwrap();
                prop_assert_eq!(region_first, t.aggregate(&[Dim::Sex], None).unwrap().aggregate(&[], Some(lvl)).unwrap());
                let two_step = t.aggregate(&[], Some(lvl)).unwrap().aggregate(&[], Some(RegionLevel::Country)).unwrap();
                prop_assert_eq!(two_step, t.aggregate(&[], Some(RegionLevel::Country)).unwrap());
            }
            let f = t.fold_open_age(1).unwrap();
            prop_assert_eq!(f.fold_open_age(1).unwrap(), f.clone());
            prop_assert_eq!(f.total(), t.total());
        }
    }
}
