//! Discrete-step stochastic microsimulation driven by probability tables.
//!
//! Every person gets a plan for each life-year, drawn at the birthday that
//! opens it: death and emigration are terminal and get uniform times in the
//! life-year, the earliest one wins; a birth (women) and an internal move
//! also get uniform times and happen only before the terminal event.
//! Pending events are processed in time order within each step. Newborns
//! and immigrants join at the end of the step they appear in; their
//! ongoing life-year is drawn conditioned on no terminal event before the
//! join time, so a cohort entering mid-life-year still has exactly the
//! tabulated probability of dying before its next birthday plus the share of
//! the following life-year inside the calendar year.
//!
//! The generator is ChaCha8 (`rand_chacha`). Run `k` uses seed `seed ^ k`;
//! each person-year draws from stream `mix(person id, age)` of that seed, and
//! ids are derived from parents and arrival indices rather than creation
//! order, so yearly and monthly stepping share their random numbers.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::balance::net_internal_migration;
use crate::census::{AgeClass, CensusKey, CensusTable, Dim, RegionId, ResolutionSpec, Sex, ValueKind};
use crate::config::KeyValues;
use crate::disagg::huntington_hill;
use crate::error::{Error, Result};
use crate::io::{load_table, save_table, ReadOptions};
use crate::region::{parent_region, RegionLevel};
use crate::validate::mc_mean;

/// Oldest single age; older persons share the parameters of this age.
pub const MAX_AGE: u32 = 100;
const N_AGE: usize = MAX_AGE as usize + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Year,
    Month,
}

impl Step {
    fn per_year(self) -> u32 {
        match self {
            Step::Year => 1,
            Step::Month => 12,
        }
    }
}

impl FromStr for Step {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "year" => Ok(Step::Year),
            "month" => Ok(Step::Month),
            _ => Err(Error::invalid(format!("step must be year or month, got {s:?}"))),
        }
    }
}

/// How the destination of an internal move is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImMode {
    /// No internal migration.
    None,
    /// From the origin's row of an origin-destination table by sex.
    Interregional,
    /// From the age profile of internal immigrants into each region.
    Biregional,
    /// From the flow table by origin, sex and age.
    Full,
}

impl FromStr for ImMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ImMode::None),
            "interregional" => Ok(ImMode::Interregional),
            "biregional" => Ok(ImMode::Biregional),
            "full" => Ok(ImMode::Full),
            _ => Err(Error::invalid(format!("unknown im_mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TablePaths {
    pub population: PathBuf,
    pub immigrants: Option<PathBuf>,
    pub births: Option<PathBuf>,
    pub deaths: Option<PathBuf>,
    pub emigrants: Option<PathBuf>,
    pub internal: Option<PathBuf>,
    pub destinations: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    /// First census year; the simulation starts on its Jan 1.
    pub t0: i32,
    /// Last census year.
    pub te: i32,
    pub step: Step,
    pub scale: f64,
    pub runs: usize,
    pub im_mode: ImMode,
    pub seed: u64,
    pub alpha_male: f64,
    pub tables: TablePaths,
}

impl ScenarioConfig {
    pub fn new(t0: i32, te: i32) -> Self {
        ScenarioConfig {
            t0,
            te,
            step: Step::Year,
            scale: 1.0,
            runs: 1,
            im_mode: ImMode::None,
            seed: 0,
            alpha_male: crate::fit::ALPHA_MALE,
            tables: TablePaths::default(),
        }
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = ScenarioConfig::new(kv.require("t0")?.parse().map_err(|_| Error::invalid("t0 must be a year"))?, 0);
        c.te = kv.require("te")?.parse().map_err(|_| Error::invalid("te must be a year"))?;
        c.step = kv.parsed_or("step", Step::Year)?;
        c.scale = kv.parsed_or("scale", 1.0)?;
        c.runs = kv.parsed_or("runs", 1)?;
        c.im_mode = kv.parsed_or("im_mode", ImMode::None)?;
        c.seed = kv.parsed_or("seed", 0)?;
        c.alpha_male = kv.parsed_or("alpha_male", crate::fit::ALPHA_MALE)?;
        c.tables = TablePaths {
            population: kv.path("population").ok_or_else(|| Error::Missing("config key population".into()))?,
            immigrants: kv.path("immigrants"),
            births: kv.path("births"),
            deaths: kv.path("deaths"),
            emigrants: kv.path("emigrants"),
            internal: kv.path("internal"),
            destinations: kv.path("destinations"),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t0 >= self.te {
            return Err(Error::invalid(format!("t0 {} must precede te {}", self.t0, self.te)));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::invalid(format!("scale {} must lie in (0, 1]", self.scale)));
        }
        if self.runs == 0 {
            return Err(Error::invalid("at least one run is required"));
        }
        if !(0.0..=1.0).contains(&self.alpha_male) {
            return Err(Error::invalid("alpha_male must be a probability"));
        }
        Ok(())
    }
}

/// Parameter tables; absent probability tables mean probability zero.
#[derive(Clone, Debug)]
pub struct Parameters {
    /// Population by single age; the `t0` slice initialises the run and all
    /// years weight the placement of movers inside their destination.
    pub population: CensusTable,
    pub immigrants: Option<CensusTable>,
    /// Birth probabilities of women by age.
    pub births: Option<CensusTable>,
    pub deaths: Option<CensusTable>,
    pub emigrants: Option<CensusTable>,
    /// Internal emigration probabilities.
    pub internal: Option<CensusTable>,
    /// Flow table (interregional, full) or internal immigrants (biregional).
    pub destinations: Option<CensusTable>,
}

impl Parameters {
    pub fn new(population: CensusTable) -> Self {
        Parameters {
            population,
            immigrants: None,
            births: None,
            deaths: None,
            emigrants: None,
            internal: None,
            destinations: None,
        }
    }

    pub fn load(paths: &TablePaths) -> Result<Self> {
        let opt = |p: &Option<PathBuf>| -> Result<Option<CensusTable>> {
            p.as_ref().map(|p| load_table(p, &ReadOptions::default())).transpose()
        };
        Ok(Parameters {
            population: load_table(&paths.population, &ReadOptions::default())?,
            immigrants: opt(&paths.immigrants)?,
            births: opt(&paths.births)?,
            deaths: opt(&paths.deaths)?,
            emigrants: opt(&paths.emigrants)?,
            internal: opt(&paths.internal)?,
            destinations: opt(&paths.destinations)?,
        })
    }
}

/// Dense lookup of a probability table by year, person region, sex and age.
struct Grid {
    first_year: i32,
    n_years: usize,
    n_regions: usize,
    map: Vec<usize>,
    data: Vec<f64>,
}

fn single_age_index(classes: &[AgeClass]) -> Vec<Option<usize>> {
    (0..N_AGE as u32)
        .map(|a| classes.iter().position(|c| if a == MAX_AGE { c.end().is_none() || c.contains_age(a) } else { c.contains_age(a) }))
        .collect()
}

fn region_map(name: &str, level: RegionLevel, regions: &[RegionId], pop_level: RegionLevel) -> Result<(Vec<RegionId>, Vec<usize>)> {
    let mut index: BTreeMap<RegionId, usize> = BTreeMap::new();
    let mut map = Vec::with_capacity(regions.len());
    for r in regions {
        let p = parent_region(r, pop_level, level)
            .map_err(|e| Error::ResolutionMismatch(format!("{name} table at {level} cannot host {r}: {e}")))?;
        let n = index.len();
        map.push(*index.entry(p).or_insert(n));
    }
    let mut list = vec![RegionId::country(); index.len()];
    for (r, i) in index {
        list[i] = r;
    }
    Ok((list, map))
}

fn check_years(name: &str, res: &ResolutionSpec, years: &std::ops::RangeInclusive<i32>) -> Result<()> {
    if res.first_year > *years.start() || res.last_year < *years.end() {
        return Err(Error::Missing(format!(
            "{name} table covers {}..={} but the scenario needs {}..={}",
            res.first_year,
            res.last_year,
            years.start(),
            years.end()
        )));
    }
    Ok(())
}

impl Grid {
    fn compile(name: &str, t: &CensusTable, regions: &[RegionId], pop_level: RegionLevel, years: &std::ops::RangeInclusive<i32>) -> Result<Grid> {
        let res = t.resolution();
        if res.od {
            return Err(Error::ResolutionMismatch(format!("{name} table must not be a flow table")));
        }
        check_years(name, res, years)?;
        let (list, map) = region_map(name, res.level, regions, pop_level)?;
        let present = t.regions();
        if let Some(r) = list.iter().find(|r| !present.contains(*r)) {
            return Err(Error::Missing(format!("{name} table has no cells for region {r}")));
        }
        let index: HashMap<&RegionId, usize> = list.iter().enumerate().map(|(i, r)| (r, i)).collect();
        let ages = res.ages.as_deref().map(single_age_index);
        let n_years = (res.last_year - res.first_year + 1) as usize;
        let n_regions = list.len();
        let mut data = vec![0.0; n_years * n_regions * 2 * N_AGE];
        for (k, v) in t.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidValue { key: k.to_string(), value: v, reason: format!("{name} probability outside [0, 1]") });
            }
            let (Some(&ri), yi) = (index.get(&k.region), (k.year - res.first_year) as usize) else { continue };
            let sexes: &[usize] = match k.sex {
                Sex::Male => &[0],
                Sex::Female => &[1],
                Sex::Total => &[0, 1],
            };
            for &s in sexes {
                for a in 0..N_AGE {
                    let hit = match (&ages, k.age) {
                        (Some(ix), Some(c)) => ix[a].is_some_and(|i| res.ages.as_ref().unwrap()[i] == c),
                        _ => true,
                    };
                    if hit {
                        data[((yi * n_regions + ri) * 2 + s) * N_AGE + a] = v;
                    }
                }
            }
        }
        Ok(Grid { first_year: res.first_year, n_years, n_regions, map, data })
    }

    fn get(&self, year: i32, region: usize, sex: Sex, age: u32) -> f64 {
        let yi = (year - self.first_year).clamp(0, self.n_years as i32 - 1) as usize;
        let a = age.min(MAX_AGE) as usize;
        self.data[((yi * self.n_regions + self.map[region]) * 2 + sex.index()) * N_AGE + a]
    }
}

/// Destination weights per year, origin, sex and age over destination
/// regions at the table's level.
struct Destinations {
    first_year: i32,
    n_years: usize,
    n_origins: usize,
    by_origin: bool,
    /// Person region to destination-level region.
    map: Vec<usize>,
    /// Destination-level region to the person regions inside it.
    members: Vec<Vec<usize>>,
    n_dest: usize,
    weights: Vec<f64>,
}

impl Destinations {
    fn compile(mode: ImMode, t: &CensusTable, regions: &[RegionId], pop_level: RegionLevel, years: &std::ops::RangeInclusive<i32>) -> Result<Self> {
        let res = t.resolution();
        match mode {
            ImMode::Interregional if !res.od => return Err(Error::ResolutionMismatch("interregional mode needs a flow table".into())),
            ImMode::Full if !res.od || res.ages.is_none() => {
                return Err(Error::ResolutionMismatch("full mode needs a flow table with ages".into()))
            }
            ImMode::Biregional if res.od || res.ages.is_none() => {
                return Err(Error::ResolutionMismatch("biregional mode needs internal immigrants by age".into()))
            }
            _ => {}
        }
        check_years("destinations", res, years)?;
        let (list, map) = region_map("destinations", res.level, regions, pop_level)?;
        let index: HashMap<&RegionId, usize> = list.iter().enumerate().map(|(i, r)| (r, i)).collect();
        let mut members = vec![Vec::new(); list.len()];
        for (pi, &di) in map.iter().enumerate() {
            members[di].push(pi);
        }
        let by_origin = res.od;
        let n_origins = if by_origin { list.len() } else { 1 };
        let n_dest = list.len();
        let n_years = (res.last_year - res.first_year + 1) as usize;
        let ages = res.ages.as_deref().map(single_age_index);
        let mut weights = vec![0.0; n_years * n_origins * 2 * N_AGE * n_dest];
        for (k, v) in t.iter() {
            let dest = if by_origin { k.region2.as_ref().unwrap() } else { &k.region };
            let (Some(&d), yi) = (index.get(dest), (k.year - res.first_year) as usize) else { continue };
            let o = if by_origin {
                match index.get(&k.region) {
                    Some(&o) => o,
                    None => continue,
                }
            } else {
                0
            };
            let sexes: &[usize] = match k.sex {
                Sex::Male => &[0],
                Sex::Female => &[1],
                Sex::Total => &[0, 1],
            };
            for &s in sexes {
                for a in 0..N_AGE {
                    let hit = match (&ages, k.age) {
                        (Some(ix), Some(c)) => ix[a].is_some_and(|i| res.ages.as_ref().unwrap()[i] == c),
                        _ => true,
                    };
                    if hit {
                        weights[((((yi * n_origins + o) * 2 + s) * N_AGE + a) * n_dest) + d] += v;
                    }
                }
            }
        }
        Ok(Destinations { first_year: res.first_year, n_years, n_origins, by_origin, map, members, n_dest, weights })
    }

    /// Destination-level region other than the origin's, or `None` when the
    /// row has no weight outside the origin.
    fn sample(&self, year: i32, origin: usize, sex: Sex, age: u32, u: f64) -> Option<usize> {
        let yi = (year - self.first_year).clamp(0, self.n_years as i32 - 1) as usize;
        let od = self.map[origin];
        let o = if self.by_origin { od } else { 0 };
        let base = (((yi * self.n_origins + o) * 2 + sex.index()) * N_AGE + age.min(MAX_AGE) as usize) * self.n_dest;
        let row = &self.weights[base..base + self.n_dest];
        let total: f64 = row.iter().enumerate().filter(|(d, _)| *d != od).map(|(_, w)| w).sum();
        if total <= 0.0 {
            return None;
        }
        let mut x = u * total;
        let mut last = None;
        for (d, w) in row.iter().enumerate() {
            if d == od || *w <= 0.0 {
                continue;
            }
            last = Some(d);
            if x < *w {
                return Some(d);
            }
            x -= w;
        }
        last
    }
}

/// Population weights used to place persons arriving in a coarse region.
struct Placement {
    first_year: i32,
    n_years: usize,
    n_regions: usize,
    totals: Vec<f64>,
}

impl Placement {
    fn new(p: &CensusTable, regions: &[RegionId]) -> Self {
        let res = p.resolution();
        let n_years = (res.last_year - res.first_year + 1) as usize;
        let index: HashMap<&RegionId, usize> = regions.iter().enumerate().map(|(i, r)| (r, i)).collect();
        let mut totals = vec![0.0; n_years * regions.len()];
        for (k, v) in p.iter() {
            if let Some(&i) = index.get(&k.region) {
                totals[(k.year - res.first_year) as usize * regions.len() + i] += v;
            }
        }
        Placement { first_year: res.first_year, n_years, n_regions: regions.len(), totals }
    }

    fn pick(&self, year: i32, members: &[usize], u: f64) -> usize {
        let yi = (year - self.first_year).clamp(0, self.n_years as i32 - 1) as usize;
        let w = |i: usize| self.totals[yi * self.n_regions + i];
        let total: f64 = members.iter().map(|&i| w(i)).sum();
        if total <= 0.0 {
            return members[((u * members.len() as f64) as usize).min(members.len() - 1)];
        }
        let mut x = u * total;
        for &i in members {
            if x < w(i) {
                return i;
            }
            x -= w(i);
        }
        *members.last().unwrap()
    }
}

/// Parameters compiled against the scenario's region list.
struct Compiled {
    cfg: ScenarioConfig,
    level: RegionLevel,
    regions: Vec<RegionId>,
    initial: Vec<(usize, Sex, u32, u64)>,
    /// Per simulated year: (region, sex, age, count) of immigrants at scale.
    immigrants: Vec<Vec<(usize, Sex, u32, u64)>>,
    births: Option<Grid>,
    deaths: Option<Grid>,
    emigrants: Option<Grid>,
    internal: Option<Grid>,
    destinations: Option<Destinations>,
    placement: Placement,
}

fn age_of(c: Option<AgeClass>) -> Result<u32> {
    match c {
        Some(AgeClass::Single(a)) | Some(AgeClass::Open(a)) => Ok(a.min(MAX_AGE)),
        other => Err(Error::ResolutionMismatch(format!("persons need single ages, got {other:?}"))),
    }
}

fn scaled_cells(cells: Vec<(usize, Sex, u32, f64)>, scale: f64, what: &str) -> Result<Vec<(usize, Sex, u32, u64)>> {
    let total: f64 = cells.iter().map(|c| c.3).sum();
    if total == 0.0 {
        return Ok(Vec::new());
    }
    if scale * total < 1.0 {
        return Err(Error::invalid(format!("{what}: scale {scale} leaves fewer than one person")));
    }
    let w: Vec<f64> = cells.iter().map(|c| c.3).collect();
    let counts = huntington_hill((scale * total).round(), &w)?;
    Ok(cells.into_iter().zip(counts).filter(|(_, n)| *n > 0).map(|(c, n)| (c.0, c.1, c.2, n)).collect())
}

impl Compiled {
    fn new(cfg: &ScenarioConfig, p: &Parameters) -> Result<Self> {
        cfg.validate()?;
        let pres = p.population.resolution();
        if pres.od || pres.sexes.is_none() || pres.ages.is_none() {
            return Err(Error::ResolutionMismatch("population needs sex and age dimensions".into()));
        }
        if p.population.kind() == ValueKind::Signed {
            return Err(Error::ResolutionMismatch("population must be non-negative".into()));
        }
        let level = pres.level;
        let mut regions: Vec<RegionId> = p.population.regions().into_iter().collect();
        if let Some(i) = &p.immigrants {
            if i.level() != level {
                return Err(Error::ResolutionMismatch(format!("immigrants at {} but population at {level}", i.level())));
            }
            for r in i.regions() {
                if !regions.contains(&r) {
                    regions.push(r);
                }
            }
            regions.sort();
        }
        let index: HashMap<RegionId, usize> = regions.iter().cloned().enumerate().map(|(i, r)| (r, i)).collect();
        let sim_years = cfg.t0..=cfg.te - 1;
        if !pres.years().contains(&cfg.t0) {
            return Err(Error::Missing(format!("population has no census for t0 = {}", cfg.t0)));
        }
        let mut init = Vec::new();
        for (k, v) in p.population.iter().filter(|(k, _)| k.year == cfg.t0) {
            if v.fract() != 0.0 {
                return Err(Error::InvalidValue { key: k.to_string(), value: v, reason: "persons must be whole".into() });
            }
            init.push((index[&k.region], k.sex, age_of(k.age)?, v));
        }
        let initial = scaled_cells(init, cfg.scale, "initial population")?;

        let mut immigrants = Vec::new();
        if let Some(it) = &p.immigrants {
            check_years("immigrants", it.resolution(), &sim_years)?;
            for y in sim_years.clone() {
                let mut cells = Vec::new();
                for (k, v) in it.iter().filter(|(k, _)| k.year == y) {
                    if k.sex == Sex::Total {
                        return Err(Error::ResolutionMismatch("immigrants need a sex".into()));
                    }
                    cells.push((index[&k.region], k.sex, age_of(k.age)?, v));
                }
                immigrants.push(scaled_cells(cells, cfg.scale, "immigrants")?);
            }
        } else {
            immigrants = vec![Vec::new(); (cfg.te - cfg.t0) as usize];
        }

        let grid = |name: &str, t: &Option<CensusTable>| -> Result<Option<Grid>> {
            t.as_ref().map(|t| Grid::compile(name, t, &regions, level, &sim_years)).transpose()
        };
        let (internal, destinations) = if cfg.im_mode == ImMode::None {
            (None, None)
        } else {
            let ie = p.internal.as_ref().ok_or_else(|| Error::Missing("internal emigration probabilities".into()))?;
            let d = p.destinations.as_ref().ok_or_else(|| Error::Missing("destination table".into()))?;
            (
                Some(Grid::compile("internal", ie, &regions, level, &sim_years)?),
                Some(Destinations::compile(cfg.im_mode, d, &regions, level, &sim_years)?),
            )
        };
        Ok(Compiled {
            cfg: cfg.clone(),
            level,
            placement: Placement::new(&p.population, &regions),
            births: grid("births", &p.births)?,
            deaths: grid("deaths", &p.deaths)?,
            emigrants: grid("emigrants", &p.emigrants)?,
            internal,
            destinations,
            regions,
            initial,
            immigrants,
        })
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix(splitmix(a) ^ b.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

const TAG_NEWBORN: u64 = 0xb1;
const TAG_IMMIGRANT: u64 = 0x1a;
const TAG_ORIGIN: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Birthday,
    Death,
    Emigration,
    Birth,
    Move,
}

#[derive(Clone, Copy, Debug)]
struct Event {
    time: f64,
    id: u64,
    kind: Kind,
    slot: u32,
    age: u32,
    u1: f64,
    u2: f64,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Event {}
impl Ord for Event {
    // reversed: BinaryHeap pops the earliest event
    fn cmp(&self, o: &Self) -> Ordering {
        o.time.total_cmp(&self.time).then(o.id.cmp(&self.id)).then(o.kind.cmp(&self.kind))
    }
}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

#[derive(Clone, Debug)]
struct Person {
    id: u64,
    sex: Sex,
    birth: f64,
    region: usize,
    alive: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunDiagnostics {
    /// Internal moves dropped because the destination row had no weight.
    pub cancelled_moves: u64,
    /// Entrants whose survival to the join time could not be sampled.
    pub forced_terminal: u64,
}

/// One Monte Carlo run: Jan 1 censuses and the events of each year, all at
/// the population's region level with single ages (`100+` open).
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub run: usize,
    pub population: CensusTable,
    /// Newborns by their own sex, age 0.
    pub births: CensusTable,
    /// Newborns by the mother's age.
    pub births_by_mother: CensusTable,
    pub deaths: CensusTable,
    pub emigrants: CensusTable,
    /// Immigrants by age at immigration.
    pub immigrants: CensusTable,
    pub internal_emigrants: CensusTable,
    pub internal_immigrants: CensusTable,
    /// Moves by origin, sex, age and destination.
    pub flows: CensusTable,
    pub diagnostics: RunDiagnostics,
}

struct Counter {
    n_regions: usize,
    first_year: i32,
    data: Vec<u64>,
}

impl Counter {
    fn new(years: usize, n_regions: usize, first_year: i32) -> Self {
        Counter { n_regions, first_year, data: vec![0; years * n_regions * 2 * N_AGE] }
    }

    fn add(&mut self, year: i32, region: usize, sex: Sex, age: u32) {
        let yi = (year - self.first_year) as usize;
        self.data[((yi * self.n_regions + region) * 2 + sex.index()) * N_AGE + age.min(MAX_AGE) as usize] += 1;
    }

    fn into_table(self, res: ResolutionSpec, regions: &[RegionId], ages: &[AgeClass]) -> Result<CensusTable> {
        let mut cells = BTreeMap::new();
        for (i, &n) in self.data.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let a = i % N_AGE;
            let s = if (i / N_AGE) % 2 == 0 { Sex::Male } else { Sex::Female };
            let r = (i / N_AGE / 2) % self.n_regions;
            let y = self.first_year + (i / N_AGE / 2 / self.n_regions) as i32;
            cells.insert(CensusKey::new(y, regions[r].clone(), s, Some(ages[a])), n as f64);
        }
        Ok(CensusTable::from_parts(res, ValueKind::Integer, cells))
    }
}

struct Run<'a> {
    c: &'a Compiled,
    base: ChaCha8Rng,
    persons: Vec<Person>,
    heap: BinaryHeap<Event>,
    diag: RunDiagnostics,
}

/// Draws of one life-year plan.
struct Plan {
    terminal: Option<(f64, Kind)>,
    birth: Option<f64>,
    mv: Option<f64>,
    u: [f64; 4],
}

impl<'a> Run<'a> {
    fn stream(&self, id: u64, tag: u64) -> ChaCha8Rng {
        let mut r = self.base.clone();
        r.set_stream(mix(id, tag));
        r.set_word_pos(0);
        r
    }

    fn draw(&self, rng: &mut ChaCha8Rng, p: &Person, age: u32, t_a: f64) -> Plan {
        let year = t_a.floor() as i32;
        let get = |g: &Option<Grid>| g.as_ref().map_or(0.0, |g| g.get(year, p.region, p.sex, age));
        let pd = get(&self.c.deaths);
        let pe = get(&self.c.emigrants);
        let pb = if p.sex == Sex::Female { get(&self.c.births) } else { 0.0 };
        let pm = get(&self.c.internal);
        let mut u = [0.0; 12];
        for v in &mut u {
            *v = rng.gen::<f64>();
        }
        let death = (u[0] < pd).then(|| (t_a + u[1], Kind::Death));
        let emig = (u[2] < pe).then(|| (t_a + u[3], Kind::Emigration));
        let terminal = match (death, emig) {
            (Some(d), Some(e)) => Some(if e.0 < d.0 { e } else { d }),
            (d, e) => d.or(e),
        };
        Plan {
            terminal,
            birth: (u[4] < pb).then(|| t_a + u[5]),
            mv: (u[6] < pm).then(|| t_a + u[7]),
            u: [u[8], u[9], u[10], u[11]],
        }
    }

    /// Schedules the life-year of `slot` at `age` opened at `t_a`; events
    /// before `t_c` are conditioned away.
    fn plan(&mut self, slot: usize, age: u32, t_a: f64, t_c: f64) {
        let p = self.persons[slot].clone();
        let mut rng = self.stream(p.id, age as u64);
        let mut plan = self.draw(&mut rng, &p, age, t_a);
        if t_c > t_a {
            let mut tries = 0;
            while plan.terminal.is_some_and(|(t, _)| t < t_c) && tries < 64 {
                plan = self.draw(&mut rng, &p, age, t_a);
                tries += 1;
            }
            if let Some((t, k)) = plan.terminal {
                if t < t_c {
                    // survival to t_c is (nearly) impossible: the event happens right after joining
                    self.diag.forced_terminal += 1;
                    plan.terminal = Some((t_c + (t_a + 1.0 - t_c) * plan.u[3], k));
                }
            }
        }
        let cut = plan.terminal.map_or(f64::INFINITY, |t| t.0);
        let ev = |time: f64, kind: Kind| Event { time, id: p.id, kind, slot: slot as u32, age, u1: plan.u[0], u2: plan.u[1] };
        if let Some((t, k)) = plan.terminal {
            self.heap.push(ev(t, k));
        } else {
            self.heap.push(Event { age: age + 1, ..ev(t_a + 1.0, Kind::Birthday) });
        }
        if let Some(t) = plan.birth.filter(|t| *t >= t_c && *t < cut) {
            self.heap.push(ev(t, Kind::Birth));
        }
        if let Some(t) = plan.mv.filter(|t| *t >= t_c && *t < cut) {
            self.heap.push(Event { u1: plan.u[2], ..ev(t, Kind::Move) });
        }
    }

    /// Adds a person at `t_c` and schedules the life-year containing it.
    fn join(&mut self, person: Person, t_c: f64) {
        let age = (t_c - person.birth).floor().max(0.0);
        let t_a = person.birth + age;
        self.persons.push(person);
        self.plan(self.persons.len() - 1, age as u32, t_a, t_c);
    }
}

fn person_ages() -> Vec<AgeClass> {
    AgeClass::single_years(MAX_AGE)
}

fn run_one(c: &Compiled, run: usize) -> Result<RunOutput> {
    let cfg = &c.cfg;
    let seed = cfg.seed ^ run as u64;
    let mut st = Run { c, base: ChaCha8Rng::seed_from_u64(seed), persons: Vec::new(), heap: BinaryHeap::new(), diag: RunDiagnostics::default() };
    let nr = c.regions.len();
    let n_years = (cfg.te - cfg.t0) as usize;
    let t0 = cfg.t0 as f64;

    let mut id = 0u64;
    for &(r, s, a, n) in &c.initial {
        for _ in 0..n {
            let mut rng = st.stream(id, TAG_ORIGIN);
            let birth = t0 - a as f64 - rng.gen::<f64>();
            st.join(Person { id, sex: s, birth, region: r, alive: true }, t0);
            id += 1;
        }
    }

    let mut census = Counter::new(n_years + 1, nr, cfg.t0);
    let mut births = Counter::new(n_years, nr, cfg.t0);
    let mut bm = Counter::new(n_years, nr, cfg.t0);
    let mut deaths = Counter::new(n_years, nr, cfg.t0);
    let mut emig = Counter::new(n_years, nr, cfg.t0);
    let mut imm = Counter::new(n_years, nr, cfg.t0);
    let mut ie = Counter::new(n_years, nr, cfg.t0);
    let mut ii = Counter::new(n_years, nr, cfg.t0);
    let mut flows: BTreeMap<(i32, usize, Sex, u32, usize), u64> = BTreeMap::new();

    let take_census = |persons: &[Person], census: &mut Counter, year: i32| {
        for p in persons.iter().filter(|p| p.alive) {
            let age = (year as f64 - p.birth).floor().max(0.0) as u32;
            census.add(year, p.region, p.sex, age);
        }
    };
    take_census(&st.persons, &mut census, cfg.t0);

    let spy = cfg.step.per_year();
    for (yi, year) in (cfg.t0..cfg.te).enumerate() {
        // arrivals of the year, ordered by arrival time
        let mut arrivals: Vec<(f64, Person)> = Vec::new();
        let mut k = 0u64;
        for &(r, s, a, n) in &c.immigrants[yi] {
            for _ in 0..n {
                let pid = mix(TAG_IMMIGRANT ^ ((year as u64) << 32), k);
                k += 1;
                let mut rng = st.stream(pid, TAG_ORIGIN);
                let t_i = year as f64 + rng.gen::<f64>();
                let birth = t_i - a as f64 - rng.gen::<f64>();
                imm.add(year, r, s, a);
                arrivals.push((t_i, Person { id: pid, sex: s, birth, region: r, alive: true }));
            }
        }
        arrivals.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.id.cmp(&y.1.id)));
        let mut next_arrival = 0;
        for step in 0..spy {
            let end = if step + 1 == spy { (year + 1) as f64 } else { year as f64 + (step + 1) as f64 / spy as f64 };
            let mut newborns: Vec<Person> = Vec::new();
            while st.heap.peek().is_some_and(|e| e.time < end) {
                let e = st.heap.pop().unwrap();
                let slot = e.slot as usize;
                let (sex, region) = (st.persons[slot].sex, st.persons[slot].region);
                match e.kind {
                    Kind::Birthday => {
                        let t_a = e.time;
                        st.plan(slot, e.age, t_a, t_a);
                    }
                    Kind::Death => {
                        deaths.add(year, region, sex, e.age);
                        st.persons[slot].alive = false;
                    }
                    Kind::Emigration => {
                        emig.add(year, region, sex, e.age);
                        st.persons[slot].alive = false;
                    }
                    Kind::Birth => {
                        let child_sex = if e.u1 < cfg.alpha_male { Sex::Male } else { Sex::Female };
                        births.add(year, region, child_sex, 0);
                        bm.add(year, region, Sex::Female, e.age);
                        let cid = mix(st.persons[slot].id ^ TAG_NEWBORN, e.age as u64);
                        newborns.push(Person { id: cid, sex: child_sex, birth: e.time, region, alive: true });
                    }
                    Kind::Move => {
                        let d = c.destinations.as_ref().expect("moves need destinations");
                        match d.sample(year, region, sex, e.age, e.u1) {
                            None => st.diag.cancelled_moves += 1,
                            Some(dest) => {
                                let to = c.placement.pick(year, &d.members[dest], e.u2);
                                ie.add(year, region, sex, e.age);
                                ii.add(year, to, sex, e.age);
                                *flows.entry((year, region, sex, e.age.min(MAX_AGE), to)).or_insert(0) += 1;
                                st.persons[slot].region = to;
                            }
                        }
                    }
                }
            }
            for p in newborns {
                st.join(p, end);
            }
            while next_arrival < arrivals.len() && arrivals[next_arrival].0 < end {
                let p = arrivals[next_arrival].1.clone();
                next_arrival += 1;
                st.join(p, end);
            }
        }
        take_census(&st.persons, &mut census, year + 1);
    }

    let ages = person_ages();
    let base = ResolutionSpec::new(cfg.t0..=cfg.te, c.level).with_sexes().with_ages(ages.clone());
    let ev = base.clone().with_years(cfg.t0..=cfg.te - 1);
    let mut fcells = BTreeMap::new();
    for ((y, r, s, a, to), n) in flows {
        fcells.insert(CensusKey::flow(y, c.regions[r].clone(), s, Some(ages[a as usize]), c.regions[to].clone()), n as f64);
    }
    Ok(RunOutput {
        run,
        population: census.into_table(base, &c.regions, &ages)?,
        births: births.into_table(ev.clone(), &c.regions, &ages)?,
        births_by_mother: bm.into_table(ev.clone(), &c.regions, &ages)?,
        deaths: deaths.into_table(ev.clone(), &c.regions, &ages)?,
        emigrants: emig.into_table(ev.clone(), &c.regions, &ages)?,
        immigrants: imm.into_table(ev.clone(), &c.regions, &ages)?,
        internal_emigrants: ie.into_table(ev.clone(), &c.regions, &ages)?,
        internal_immigrants: ii.into_table(ev.clone(), &c.regions, &ages)?,
        flows: CensusTable::from_parts(ev.with_od(), ValueKind::Integer, fcells),
        diagnostics: st.diag,
    })
}

/// All Monte Carlo runs, in parallel. Coverage problems are reported before
/// any stepping.
pub fn run(cfg: &ScenarioConfig, params: &Parameters) -> Result<Vec<RunOutput>> {
    let c = Compiled::new(cfg, params)?;
    (0..cfg.runs).into_par_iter().map(|k| run_one(&c, k)).collect()
}

impl RunOutput {
    /// Largest `|P(y+1) - P(y) - B - I + D + E - dM|` over year, region and
    /// sex.
    pub fn balance_residual(&self) -> Result<f64> {
        let kill = [Dim::Age];
        let p = self.population.aggregate(&kill, None)?;
        let b = self.births.aggregate(&kill, None)?;
        let i = self.immigrants.aggregate(&kill, None)?;
        let d = self.deaths.aggregate(&kill, None)?;
        let e = self.emigrants.aggregate(&kill, None)?;
        let dm = net_internal_migration(&self.flows)?.aggregate(&kill, None)?;
        let res = self.population.resolution();
        let mut worst: f64 = 0.0;
        for y in res.first_year..res.last_year {
            for r in p.regions().union(&dm.regions()) {
                for s in [Sex::Male, Sex::Female] {
                    let k = CensusKey::new(y, r.clone(), s, None);
                    let next = p.get(&k.with_year(y + 1));
                    let v = next - p.get(&k) - b.get(&k) - i.get(&k) + d.get(&k) + e.get(&k) - dm.get(&k);
                    worst = worst.max(v.abs());
                }
            }
        }
        Ok(worst)
    }

    pub fn tables(&self) -> [(&'static str, &CensusTable); 8] {
        [
            ("B", &self.births),
            ("BM", &self.births_by_mother),
            ("D", &self.deaths),
            ("E", &self.emigrants),
            ("I", &self.immigrants),
            ("IE", &self.internal_emigrants),
            ("II", &self.internal_immigrants),
            ("M", &self.flows),
        ]
    }
}

/// Writes `run_XXX.csv` (population), `run_XXX.<Q>.csv` per event table and
/// `mean.csv`, the mean population over runs.
pub fn write_outputs(outputs: &[RunOutput], dir: &Path) -> Result<()> {
    for o in outputs {
        save_table(&o.population, &dir.join(format!("run_{:03}.csv", o.run)))?;
        for (q, t) in o.tables() {
            save_table(t, &dir.join(format!("run_{:03}.{q}.csv", o.run)))?;
        }
    }
    let pops: Vec<CensusTable> = outputs.iter().map(|o| o.population.clone()).collect();
    save_table(&mc_mean(&pops)?, &dir.join("mean.csv"))?;
    Ok(())
}
