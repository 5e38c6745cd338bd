//! Synthetic multi-resolution census data.
//!
//! The truth is one simulator run on known parameter tables: Gompertz
//! mortality with a downward trend, Gaussian fertility with a rising mean
//! age, bell-shaped emigration and internal migration profiles, gravity
//! destination weights and a fixed immigrant stream. Because the simulator
//! counts every event, the truth satisfies the regional balance equations
//! exactly. [`pipeline_inputs`] then degrades it to the coarse tables the
//! pipeline starts from.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::census::{AgeClass, CensusKey, CensusTable, Dim, RegionId, ResolutionSpec, Sex, ValueKind};
use crate::config::KeyValues;
use crate::disagg::huntington_hill;
use crate::error::{Error, Result};
use crate::io::save_table;
use crate::lifetable::{life_expectancy, mac};
use crate::rates::AlphaProfile;
use crate::region::{parent_region, RegionHierarchy, RegionLevel};
use crate::simulate::{self, ImMode, Parameters, ScenarioConfig, MAX_AGE};

const MUNI: RegionLevel = RegionLevel::MunicipalitiesDistricts;

pub const DEFAULT_MUNICIPALITIES: [&str; 10] =
    ["10101", "10102", "10201", "30101", "30102", "30201", "30202", "90101", "90201", "90301"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub municipalities: Vec<RegionId>,
    pub first_year: i32,
    pub last_year: i32,
    /// Mean initial persons per municipality.
    pub base_population: f64,
    pub gompertz_a: f64,
    pub gompertz_b: f64,
    pub infant_q: f64,
    pub male_excess: f64,
    /// Log change of mortality per year.
    pub mortality_trend: f64,
    pub tfr: f64,
    pub mac: f64,
    pub mac_trend: f64,
    pub fertility_sd: f64,
    /// Peak annual emigration probability.
    pub emigration: f64,
    /// Peak annual internal migration probability.
    pub internal: f64,
    /// Immigrants per year as a share of the initial population.
    pub immigration: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            municipalities: DEFAULT_MUNICIPALITIES.iter().map(|c| RegionId::new(c)).collect(),
            first_year: 2000,
            last_year: 2030,
            base_population: 13_000.0,
            gompertz_a: 3e-5,
            gompertz_b: 0.095,
            infant_q: 0.0035,
            male_excess: 1.4,
            mortality_trend: -0.012,
            tfr: 1.45,
            mac: 29.5,
            mac_trend: 0.08,
            fertility_sd: 5.8,
            emigration: 0.012,
            internal: 0.05,
            immigration: 0.018,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = SynthSpec::default();
        let municipalities = match kv.get("municipalities") {
            Some(_) => kv.list::<String>("municipalities")?.iter().map(|c| RegionId::new(c)).collect(),
            None => d.municipalities.clone(),
        };
        let s = SynthSpec {
            municipalities,
            first_year: kv.parsed_or("first_year", d.first_year)?,
            last_year: kv.parsed_or("last_year", d.last_year)?,
            base_population: kv.parsed_or("base_population", d.base_population)?,
            gompertz_a: kv.parsed_or("gompertz_a", d.gompertz_a)?,
            gompertz_b: kv.parsed_or("gompertz_b", d.gompertz_b)?,
            infant_q: kv.parsed_or("infant_q", d.infant_q)?,
            male_excess: kv.parsed_or("male_excess", d.male_excess)?,
            mortality_trend: kv.parsed_or("mortality_trend", d.mortality_trend)?,
            tfr: kv.parsed_or("tfr", d.tfr)?,
            mac: kv.parsed_or("mac", d.mac)?,
            mac_trend: kv.parsed_or("mac_trend", d.mac_trend)?,
            fertility_sd: kv.parsed_or("fertility_sd", d.fertility_sd)?,
            emigration: kv.parsed_or("emigration", d.emigration)?,
            internal: kv.parsed_or("internal", d.internal)?,
            immigration: kv.parsed_or("immigration", d.immigration)?,
            seed: kv.parsed_or("seed", d.seed)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.municipalities.len() < 2 {
            return Err(Error::invalid("at least two municipalities are needed"));
        }
        for m in &self.municipalities {
            crate::region::validate_code(m.as_str(), MUNI)?;
        }
        if self.last_year - self.first_year < 2 {
            return Err(Error::invalid("at least three years are needed"));
        }
        if !(self.base_population >= 1.0) {
            return Err(Error::invalid("base_population must be at least 1"));
        }
        for (name, v) in [("emigration", self.emigration), ("internal", self.internal), ("infant_q", self.infant_q)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.fertility_sd > 0.0 && self.tfr >= 0.0 && self.immigration >= 0.0) {
            return Err(Error::invalid("fertility and immigration parameters must be non-negative"));
        }
        Ok(())
    }
}

/// True parameter tables the truth was simulated from.
#[derive(Clone, Debug)]
pub struct TrueParameters {
    pub deaths: CensusTable,
    pub births: CensusTable,
    pub emigrants: CensusTable,
    pub internal: CensusTable,
    pub destinations: CensusTable,
    pub immigrants: CensusTable,
}

/// Fine-resolution truth: municipality level, single ages, `100+` open.
#[derive(Clone, Debug)]
pub struct TruthBundle {
    pub hierarchy: RegionHierarchy,
    pub population: CensusTable,
    pub births: CensusTable,
    pub births_by_mother: CensusTable,
    pub deaths: CensusTable,
    pub emigrants: CensusTable,
    pub immigrants: CensusTable,
    pub internal_emigrants: CensusTable,
    pub internal_immigrants: CensusTable,
    pub flows: CensusTable,
    pub params: TrueParameters,
}

fn ages() -> Vec<AgeClass> {
    AgeClass::single_years(MAX_AGE)
}

fn age_class(a: u32) -> AgeClass {
    if a >= MAX_AGE {
        AgeClass::Open(MAX_AGE)
    } else {
        AgeClass::Single(a)
    }
}

fn parents(rs: &[RegionId], level: RegionLevel) -> Result<Vec<RegionId>> {
    let mut out: Vec<RegionId> = rs.iter().map(|r| parent_region(r, MUNI, level)).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// Table with a value for every (year, region, sex, age) from `f`.
fn dense(
    res: ResolutionSpec,
    regions: &[RegionId],
    kind: ValueKind,
    f: impl Fn(i32, &RegionId, Sex, u32) -> f64,
) -> Result<CensusTable> {
    let sexes = res.sex_list();
    let years = res.years();
    let mut t = CensusTable::new(res, kind);
    for y in years {
        for r in regions {
            for &s in &sexes {
                for a in 0..=MAX_AGE {
                    let v = f(y, r, s, a);
                    if v != 0.0 {
                        t.set(CensusKey::new(y, r.clone(), s, Some(age_class(a))), v)?;
                    }
                }
            }
        }
    }
    Ok(t)
}

struct Shapes<'a> {
    spec: &'a SynthSpec,
}

impl Shapes<'_> {
    fn death(&self, y: i32, s: Sex, a: u32, factor: f64) -> f64 {
        let sp = self.spec;
        let base = if a == 0 { sp.infant_q } else { sp.gompertz_a * (sp.gompertz_b * a as f64).exp() };
        let sex = if s == Sex::Male { sp.male_excess } else { 1.0 };
        (base * sex * factor * (sp.mortality_trend * (y - sp.first_year) as f64).exp()).min(1.0)
    }

    fn birth(&self, y: i32, a: u32) -> f64 {
        let sp = self.spec;
        if !(15..50).contains(&a) {
            return 0.0;
        }
        let m = sp.mac + sp.mac_trend * (y - sp.first_year) as f64;
        let z = (a as f64 - m) / sp.fertility_sd;
        sp.tfr / (sp.fertility_sd * (2.0 * std::f64::consts::PI).sqrt()) * (-0.5 * z * z).exp()
    }

    fn emigration(&self, a: u32, factor: f64) -> f64 {
        let z = (a as f64 - 27.0) / 12.0;
        self.spec.emigration * factor * (0.1 + (-z * z).exp())
    }

    fn internal(&self, a: u32, factor: f64) -> f64 {
        let z = (a as f64 - 25.0) / 10.0;
        self.spec.internal * factor * (0.2 + (-z * z).exp()) / 1.2
    }

    fn immigration_age(&self, a: u32) -> f64 {
        let z = (a as f64 - 27.0) / 9.0;
        0.05 + (-z * z).exp()
    }
}

pub fn generate_truth(spec: &SynthSpec) -> Result<TruthBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut munis = spec.municipalities.clone();
    munis.sort();
    munis.dedup();
    let mut hierarchy = RegionHierarchy::new();
    for m in &munis {
        hierarchy.insert(m.as_str(), MUNI)?;
    }
    let feds = parents(&munis, RegionLevel::FederalStates)?;
    let dds = parents(&munis, RegionLevel::DistrictsDistricts)?;
    let weight: Vec<f64> = munis.iter().map(|_| rng.gen_range(0.6..1.4)).collect();
    let fed_mort: Vec<f64> = feds.iter().map(|_| rng.gen_range(0.92..1.08)).collect();
    let dd_emig: Vec<f64> = dds.iter().map(|_| rng.gen_range(0.7..1.3)).collect();
    let muni_int: Vec<f64> = munis.iter().map(|_| rng.gen_range(0.8..1.2)).collect();
    let idx = |list: &[RegionId], r: &RegionId| list.iter().position(|x| x == r).unwrap();
    let sh = Shapes { spec };
    let (y1, yl) = (spec.first_year, spec.last_year);
    let ev_years = y1..=yl - 1;

    let deaths = dense(
        ResolutionSpec::new(ev_years.clone(), RegionLevel::FederalStates).with_sexes().with_ages(ages()),
        &feds,
        ValueKind::Real,
        |y, r, s, a| sh.death(y, s, a, fed_mort[idx(&feds, r)]),
    )?;
    let births = dense(
        ResolutionSpec::new(ev_years.clone(), RegionLevel::FederalStates).with_sex(vec![Sex::Female]).with_ages(ages()),
        &feds,
        ValueKind::Real,
        |y, _, _, a| sh.birth(y, a),
    )?;
    let emigrants = dense(
        ResolutionSpec::new(ev_years.clone(), RegionLevel::DistrictsDistricts).with_sexes().with_ages(ages()),
        &dds,
        ValueKind::Real,
        |_, r, _, a| sh.emigration(a, dd_emig[idx(&dds, r)]),
    )?;
    let internal = dense(
        ResolutionSpec::new(ev_years.clone(), MUNI).with_sexes().with_ages(ages()),
        &munis,
        ValueKind::Real,
        |_, r, _, a| sh.internal(a, muni_int[idx(&munis, r)]),
    )?;

    // gravity: closer pairs (same district, same state) attract more
    let mut destinations = CensusTable::new(ResolutionSpec::new(ev_years.clone(), MUNI).with_od(), ValueKind::Real);
    for y in ev_years.clone() {
        for (i, a) in munis.iter().enumerate() {
            for (j, b) in munis.iter().enumerate() {
                if i == j {
                    continue;
                }
                let same = |l| parent_region(a, MUNI, l).ok() == parent_region(b, MUNI, l).ok();
                let d = if same(RegionLevel::DistrictsDistricts) {
                    1.0
                } else if same(RegionLevel::FederalStates) {
                    2.0
                } else {
                    4.0
                };
                destinations.set(CensusKey::flow(y, a.clone(), Sex::Total, None, b.clone()), weight[j] / (d * d))?;
            }
        }
    }

    // initial population: stationary shape of the first year's survival
    let mut cells = Vec::new();
    let mut keys = Vec::new();
    for (i, m) in munis.iter().enumerate() {
        let fi = idx(&feds, &parent_region(m, MUNI, RegionLevel::FederalStates)?);
        for s in [Sex::Male, Sex::Female] {
            let mut surv = 1.0;
            for a in 0..=MAX_AGE {
                cells.push(weight[i] * surv * (-0.004 * a as f64).exp());
                keys.push(CensusKey::new(y1, m.clone(), s, Some(age_class(a))));
                surv *= 1.0 - sh.death(y1, s, a, fed_mort[fi]);
            }
        }
    }
    let total = (spec.base_population * munis.len() as f64).round();
    let counts = huntington_hill(total, &cells)?;
    let mut p0 = CensusTable::new(ResolutionSpec::new(y1..=y1, MUNI).with_sexes().with_ages(ages()), ValueKind::Integer);
    for (k, n) in keys.iter().zip(&counts) {
        if *n > 0 {
            p0.set(k.clone(), *n as f64)?;
        }
    }

    let mut immigrants = CensusTable::new(ResolutionSpec::new(ev_years.clone(), MUNI).with_sexes().with_ages(ages()), ValueKind::Integer);
    let mut w = Vec::new();
    let mut ikeys = Vec::new();
    for (i, m) in munis.iter().enumerate() {
        for s in [Sex::Male, Sex::Female] {
            for a in 0..=MAX_AGE {
                w.push(weight[i] * sh.immigration_age(a));
                ikeys.push((m.clone(), s, age_class(a)));
            }
        }
    }
    for y in ev_years.clone() {
        let n = (spec.immigration * total * (1.0 + 0.01 * (y - y1) as f64)).round();
        for ((m, s, a), c) in ikeys.iter().zip(huntington_hill(n, &w)?) {
            if c > 0 {
                immigrants.set(CensusKey::new(y, m.clone(), *s, Some(*a)), c as f64)?;
            }
        }
    }

    let mut cfg = ScenarioConfig::new(y1, yl);
    cfg.im_mode = ImMode::Interregional;
    cfg.seed = spec.seed;
    let params = Parameters {
        population: p0,
        immigrants: Some(immigrants.clone()),
        births: Some(births.clone()),
        deaths: Some(deaths.clone()),
        emigrants: Some(emigrants.clone()),
        internal: Some(internal.clone()),
        destinations: Some(destinations.clone()),
    };
    let run = simulate::run(&cfg, &params)?.remove(0);
    Ok(TruthBundle {
        hierarchy,
        population: run.population,
        births: run.births,
        births_by_mother: run.births_by_mother,
        deaths: run.deaths,
        emigrants: run.emigrants,
        immigrants: run.immigrants,
        internal_emigrants: run.internal_emigrants,
        internal_immigrants: run.internal_immigrants,
        flows: run.flows,
        params: TrueParameters { deaths, births, emigrants, internal, destinations, immigrants },
    })
}

/// Pure aggregation of a truth table to a coarser resolution.
pub fn degrade(t: &CensusTable, target: &ResolutionSpec) -> Result<CensusTable> {
    let from = t.level();
    if !target.level.is_coarser_or_equal(from) {
        return match from.compare(target.level) {
            crate::region::LevelOrder::Incomparable => {
                Err(Error::IncomparableLevels { from: from.to_string(), to: target.level.to_string() })
            }
            _ => Err(Error::NotCoarser { from: from.to_string(), to: target.level.to_string() }),
        };
    }
    t.aggregate_to(target)
}

impl TruthBundle {
    pub fn tables(&self) -> Vec<(&'static str, &CensusTable)> {
        vec![
            ("P", &self.population),
            ("B", &self.births),
            ("B_m", &self.births_by_mother),
            ("D", &self.deaths),
            ("E", &self.emigrants),
            ("I", &self.immigrants),
            ("IE", &self.internal_emigrants),
            ("II", &self.internal_immigrants),
            ("M", &self.flows),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, t) in self.tables() {
            save_table(t, &dir.join(format!("{name}.csv")))?;
        }
        let p = &self.params;
        for (name, t) in [
            ("Dp", &p.deaths),
            ("Bp", &p.births),
            ("Ep", &p.emigrants),
            ("IEp", &p.internal),
            ("OD_weights", &p.destinations),
        ] {
            save_table(t, &dir.join("params").join(format!("{name}.csv")))?;
        }
        Ok(())
    }

    /// Moves between different regions at `level`, by sex, age optional.
    pub fn flows_at(&self, level: RegionLevel, keep_age: bool) -> Result<CensusTable> {
        let drop: &[Dim] = if keep_age { &[] } else { &[Dim::Age] };
        let m = self.flows.aggregate(drop, Some(level))?;
        Ok(m.filter(|k| k.region2.as_ref() != Some(&k.region)))
    }
}

/// Years split between registry observations and forecasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputYears {
    pub obs_first: i32,
    /// Last observed year; later years only have forecasts.
    pub y0: i32,
}

/// National period life expectancy at ages 0 and 65 by sex, from the true
/// probabilities weighted by the true population.
fn national_life_expectancy(b: &TruthBundle, year: i32) -> Result<[f64; 4]> {
    let p = b.population.aggregate(&[], Some(RegionLevel::FederalStates))?;
    let alpha = AlphaProfile::mortality();
    let mut out = [0.0; 4];
    for (si, s) in [Sex::Male, Sex::Female].into_iter().enumerate() {
        let mut q = vec![0.0; MAX_AGE as usize + 1];
        for (a, qa) in q.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for fed in b.params.deaths.regions() {
                let k = CensusKey::new(year, fed.clone(), s, Some(age_class(a as u32)));
                let w = p.get(&k).max(1.0);
                num += w * b.params.deaths.get(&k);
                den += w;
            }
            *qa = num / den;
        }
        out[si] = life_expectancy(&q, 0, &alpha, MAX_AGE as usize)?;
        out[si + 2] = life_expectancy(&q, 65, &alpha, MAX_AGE as usize)?;
    }
    Ok(out)
}

/// The coarse tables the pipeline starts from, by file stem.
pub fn pipeline_inputs(b: &TruthBundle, years: InputYears) -> Result<Vec<(&'static str, CensusTable)>> {
    let InputYears { obs_first, y0 } = years;
    let last = b.population.resolution().last_year;
    if !(b.population.resolution().first_year <= obs_first && obs_first <= y0 && y0 < last - 1) {
        return Err(Error::invalid(format!("observed years {obs_first}..={y0} do not fit the truth")));
    }
    let obs = obs_first..=y0;
    let fc_p = y0 + 1..=last;
    let fc_ev = y0 + 1..=last - 1;
    use RegionLevel::{Country, Districts, DistrictsDistricts as Dd, FederalStates as Fed};
    let res = |years: std::ops::RangeInclusive<i32>, level| ResolutionSpec::new(years, level);
    let fold95: Vec<AgeClass> = AgeClass::single_years(95);
    let fold99: Vec<AgeClass> = AgeClass::single_years(99);
    let bands = AgeClass::bands(5, 100);

    let mut out = vec![
        ("pop_obs", degrade(&b.population, &res(obs.clone(), MUNI).with_sexes().with_ages(fold95))?),
        ("pop_obs_fed", degrade(&b.population, &res(obs.clone(), Fed).with_sexes().with_ages(ages()))?),
        ("pop_forecast", degrade(&b.population, &res(fc_p, Fed).with_sexes().with_ages(bands))?),
        (
            "births_mother",
            degrade(&b.births_by_mother, &res(obs.clone(), Fed).with_sex(vec![Sex::Female]).with_ages(ages()))?,
        ),
        ("births_sex", degrade(&b.births, &res(obs.clone(), Country).with_sexes())?),
        ("births_forecast", degrade(&b.births, &res(fc_ev.clone(), Fed))?),
        ("deaths_obs", degrade(&b.deaths, &res(obs.clone(), Fed).with_sexes().with_ages(fold99))?),
        ("deaths_forecast", degrade(&b.deaths, &res(fc_ev.clone(), Fed))?),
        ("emig_obs_fed", degrade(&b.emigrants, &res(obs.clone(), Fed).with_sexes().with_ages(ages()))?),
        ("emig_obs_dd", degrade(&b.emigrants, &res(obs.clone(), Dd).with_sexes())?),
        ("emig_forecast", degrade(&b.emigrants, &res(fc_ev.clone(), Fed).with_sexes())?),
        ("imm_obs", degrade(&b.immigrants, &res(obs.clone(), MUNI).with_sexes().with_ages(ages()))?),
    ];

    // internal migration without moves inside a districts_districts region
    let m_dd = b.flows_at(Dd, true)?;
    let m_dd_total = m_dd.aggregate(&[Dim::Age], None)?;
    out.push(("od_obs", degrade(&m_dd_total, &res(obs.clone(), Districts).with_sexes().with_od())?));
    let ie = m_dd_total.aggregate(&[Dim::Region2], None)?;
    let ii = m_dd_total.aggregate(&[Dim::Region], None)?;
    out.push(("ie_obs_dd", ie.years(obs.clone())));
    out.push(("ii_obs_dd", ii.years(obs.clone())));
    out.push(("ie_obs_age", m_dd.aggregate(&[Dim::Region, Dim::Region2], None)?.aggregate(&[Dim::Region], None)?.years(obs.clone())));

    // forecast targets: mean age at childbearing and life expectancies
    let bm = b.births_by_mother.aggregate(&[Dim::Region], None)?;
    let pf = b.population.aggregate(&[Dim::Region], None)?;
    let mut mac_t = CensusTable::new(res(fc_ev.clone(), Country), ValueKind::Real);
    let le_ages = vec![AgeClass::Single(0), AgeClass::Single(65)];
    let mut le_t = CensusTable::new(res(fc_ev.clone(), Country).with_sexes().with_ages(le_ages), ValueKind::Real);
    for y in fc_ev {
        let avg = pf.average_population(y)?;
        let rates: Vec<f64> = (0..=MAX_AGE)
            .map(|a| {
                let k = CensusKey::new(y, RegionId::country(), Sex::Female, Some(age_class(a)));
                let p = avg.get(&k);
                if p > 0.0 {
                    bm.get(&k) / p
                } else {
                    0.0
                }
            })
            .collect();
        mac_t.set(CensusKey::new(y, RegionId::country(), Sex::Total, None), mac(&rates)?)?;
        let le = national_life_expectancy(b, y)?;
        for (i, (s, a)) in [(Sex::Male, 0), (Sex::Female, 0), (Sex::Male, 65), (Sex::Female, 65)].into_iter().enumerate() {
            le_t.set(CensusKey::new(y, RegionId::country(), s, Some(AgeClass::Single(a))), le[i])?;
        }
    }
    out.push(("mac_forecast", mac_t));
    out.push(("le_forecast", le_t));
    Ok(out)
}

/// Writes `truth/`, `inputs/`, `regions.csv` and a `pipeline.cfg` ready for
/// the pipeline command.
pub fn write_dataset(spec: &SynthSpec, years: InputYears, dir: &Path) -> Result<TruthBundle> {
    let bundle = generate_truth(spec)?;
    bundle.write(&dir.join("truth"))?;
    for (name, t) in pipeline_inputs(&bundle, years)? {
        save_table(&t, &dir.join("inputs").join(format!("{name}.csv")))?;
    }
    let f = std::fs::File::create(dir.join("regions.csv")).map_err(|e| Error::file(dir.join("regions.csv"), e))?;
    bundle.hierarchy.write_manifest(f, &[MUNI])?;
    let sim_last = (years.obs_first + 25).min(spec.last_year);
    let cfg = format!(
        "inputs = inputs\nwork = work\nregions = regions.csv\ntruth = truth/P.csv\nobs_first = {}\ny0 = {}\nsim_first = {}\nsim_last = {sim_last}\nruns = 3\nseed = {}\nim_mode = full\n",
        years.obs_first, years.y0, years.obs_first, spec.seed
    );
    let path = dir.join("pipeline.cfg");
    std::fs::write(&path, cfg).map_err(|e| Error::file(path, e))?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { base_population: 800.0, first_year: 2000, last_year: 2008, ..SynthSpec::default() }
    }

    #[test]
    fn truth_balances_and_is_reproducible() {
        let spec = small();
        let b = generate_truth(&spec).unwrap();
        let b2 = generate_truth(&spec).unwrap();
        for ((_, x), (_, y)) in b.tables().iter().zip(b2.tables().iter()) {
            assert_eq!(x, y);
        }
        let run = simulate::RunOutput {
            run: 0,
            population: b.population.clone(),
            births: b.births.clone(),
            births_by_mother: b.births_by_mother.clone(),
            deaths: b.deaths.clone(),
            emigrants: b.emigrants.clone(),
            immigrants: b.immigrants.clone(),
            internal_emigrants: b.internal_emigrants.clone(),
            internal_immigrants: b.internal_immigrants.clone(),
            flows: b.flows.clone(),
            diagnostics: Default::default(),
        };
        assert_eq!(run.balance_residual().unwrap(), 0.0);
        assert_eq!(b.population.slice_year(2000).total(), 8000.0);
        // newborns by sex and by mother agree per year and region
        let kid = b.births.aggregate(&[Dim::Sex, Dim::Age], None).unwrap();
        let mom = b.births_by_mother.aggregate(&[Dim::Sex, Dim::Age], None).unwrap();
        assert_eq!(kid, mom);
        assert!(b.births_by_mother.keys().all(|k| k.sex == Sex::Female));
        assert!(b.deaths.total() > 0.0 && b.flows.total() > 0.0 && b.emigrants.total() > 0.0);
    }

    #[test]
    fn degrade_sums() {
        let b = generate_truth(&small()).unwrap();
        let p = &b.population;
        let res = ResolutionSpec::new(2000..=2008, MUNI).with_sexes().with_ages(AgeClass::bands(5, 100));
        let banded = degrade(p, &res).unwrap();
        let k = |a| CensusKey::new(2003, RegionId::new("10101"), Sex::Female, Some(a));
        let want: f64 = (20..25).map(|a| p.get(&k(AgeClass::Single(a)))).sum();
        assert_eq!(banded.get(&k(AgeClass::Band { start: 20, end: 24 })), want);
        let sexless = degrade(p, &ResolutionSpec::new(2000..=2008, MUNI).with_ages(ages())).unwrap();
        let a = AgeClass::Single(40);
        assert_eq!(
            sexless.get(&CensusKey::new(2003, RegionId::new("30201"), Sex::Total, Some(a))),
            p.get(&CensusKey::new(2003, RegionId::new("30201"), Sex::Male, Some(a)))
                + p.get(&CensusKey::new(2003, RegionId::new("30201"), Sex::Female, Some(a)))
        );
        assert!(degrade(&banded, &ResolutionSpec::new(2000..=2008, RegionLevel::MunicipalitiesRegistrationDistricts)).is_err());
        let same = degrade(p, p.resolution()).unwrap();
        assert_eq!(&same, p);
    }

    #[test]
    fn inputs_cover_all_stems() {
        let b = generate_truth(&small()).unwrap();
        let inputs = pipeline_inputs(&b, InputYears { obs_first: 2001, y0: 2004 }).unwrap();
        let names: Vec<&str> = inputs.iter().map(|x| x.0).collect();
        for n in ["pop_obs", "pop_forecast", "od_obs", "le_forecast", "mac_forecast", "ie_obs_age"] {
            assert!(names.contains(&n), "{n}");
        }
        let get = |n: &str| &inputs.iter().find(|x| x.0 == n).unwrap().1;
        // both internal margins describe the same moves
        assert_eq!(get("ie_obs_dd").total(), get("ii_obs_dd").total());
        assert_eq!(get("ie_obs_dd").total(), get("ie_obs_age").total());
        let le = get("le_forecast");
        let e0 = le.get(&CensusKey::new(2006, RegionId::country(), Sex::Female, Some(AgeClass::Single(0))));
        assert!(e0 > 60.0 && e0 < 95.0, "{e0}");
        assert!(pipeline_inputs(&b, InputYears { obs_first: 2001, y0: 2008 }).is_err());
    }
}
