//! End-to-end parametrisation, simulation and validation on coarse inputs.
//!
//! Stages read CSV files from the input and work directories and write
//! their results to the work directory. `manifest.csv` lists the files of
//! every stage with SHA-256 hashes; a stage whose inputs, configuration and
//! outputs are unchanged is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::balance::residual_immigrants;
use crate::census::{AgeClass, CensusKey, CensusTable, Dim, RegionId, ResolutionSpec, Sex, ValueKind};
use crate::config::KeyValues;
use crate::disagg::{disaggregate_flows, disaggregate_table, DisaggSpec, Method};
use crate::error::{Error, Result};
use crate::fit::{
    birth_start, fit_births, fit_mortality, reference_curve, trailing_years, BirthFitTarget, MortalityFitTarget,
    MortalityInputs,
};
use crate::io::{load_table, save_table, ReadOptions};
use crate::ipf::{ipf2, ipf3, Matrix, Tensor3, DEFAULT_MAX_ITER, DEFAULT_TOL_3D};
use crate::lifetable::mac;
use crate::rates::{farr_probability, farr_probability_model, invert_farr, AlphaProfile};
use crate::region::{parent_region, RegionHierarchy, RegionLevel};
use crate::simulate::{self, ImMode, Parameters, ScenarioConfig, Step, MAX_AGE};
use crate::validate::{compare, write_deviations, GroupSpec};

const MUNI: RegionLevel = RegionLevel::MunicipalitiesDistricts;
const FED: RegionLevel = RegionLevel::FederalStates;
const DD: RegionLevel = RegionLevel::DistrictsDistricts;
const NA: usize = MAX_AGE as usize + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Population,
    Emigrants,
    Deaths,
    Births,
    Immigrants,
    Internal,
    Probabilities,
    Simulate,
    Validate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Population,
        Stage::Emigrants,
        Stage::Deaths,
        Stage::Births,
        Stage::Immigrants,
        Stage::Internal,
        Stage::Probabilities,
        Stage::Simulate,
        Stage::Validate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Population => "population",
            Stage::Emigrants => "emigrants",
            Stage::Deaths => "deaths",
            Stage::Births => "births",
            Stage::Immigrants => "immigrants",
            Stage::Internal => "internal",
            Stage::Probabilities => "probabilities",
            Stage::Simulate => "simulate",
            Stage::Validate => "validate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub inputs: PathBuf,
    pub work: PathBuf,
    pub regions: PathBuf,
    /// Reference population for the validate stage.
    pub truth: Option<PathBuf>,
    pub obs_first: i32,
    /// Last year with observed registry data.
    pub y0: i32,
    pub sim_first: i32,
    /// Last census year of the simulation.
    pub sim_last: i32,
    pub runs: usize,
    pub seed: u64,
    pub im_mode: ImMode,
    pub step: Step,
    pub scale: f64,
    pub stages: Vec<Stage>,
}

impl PipelineConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let path = |k: &str| kv.path(k).ok_or_else(|| Error::Missing(format!("config key {k}")));
        let year = |k: &str| -> Result<i32> {
            kv.require(k)?.parse().map_err(|_| Error::invalid(format!("config key {k} must be a year")))
        };
        let stages = if kv.get("stages").is_some() { kv.list("stages")? } else { Stage::ALL.to_vec() };
        let c = PipelineConfig {
            inputs: path("inputs")?,
            work: path("work")?,
            regions: path("regions")?,
            truth: kv.path("truth"),
            obs_first: year("obs_first")?,
            y0: year("y0")?,
            sim_first: year("sim_first")?,
            sim_last: year("sim_last")?,
            runs: kv.parsed_or("runs", 1)?,
            seed: kv.parsed_or("seed", 0)?,
            im_mode: kv.parsed_or("im_mode", ImMode::Full)?,
            step: kv.parsed_or("step", Step::Year)?,
            scale: kv.parsed_or("scale", 1.0)?,
            stages,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.y0 < self.obs_first {
            return Err(Error::invalid("y0 precedes the first observed year"));
        }
        if self.sim_first < self.obs_first || self.sim_first >= self.sim_last {
            return Err(Error::invalid("simulation years must start at or after obs_first and span at least one year"));
        }
        if self.runs == 0 || !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::invalid("runs must be positive and scale in (0, 1]"));
        }
        for w in self.stages.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid(format!("stage {} must come before {}", w[1], w[0])));
            }
        }
        Ok(())
    }

    fn input(&self, stem: &str) -> PathBuf {
        self.inputs.join(format!("{stem}.csv"))
    }

    fn work_file(&self, stem: &str) -> PathBuf {
        self.work.join(format!("{stem}.csv"))
    }

    fn sim_dir(&self) -> PathBuf {
        self.work.join("sim")
    }

    fn fingerprint(&self) -> String {
        let c = PipelineConfig { stages: Vec::new(), ..self.clone() };
        hex::encode(Sha256::digest(format!("{c:?}").as_bytes()))
    }

    fn destinations_stem(&self) -> Option<&'static str> {
        match self.im_mode {
            ImMode::None => None,
            ImMode::Interregional => Some("OD_hat"),
            ImMode::Biregional => Some("II_hat"),
            ImMode::Full => Some("M_hat"),
        }
    }

    /// Files read and written by `stage`.
    pub fn stage_files(&self, stage: Stage) -> (Vec<PathBuf>, Vec<PathBuf>) {
        let i = |s: &[&str]| s.iter().map(|n| self.input(n)).collect::<Vec<_>>();
        let w = |s: &[&str]| s.iter().map(|n| self.work_file(n)).collect::<Vec<_>>();
        let cat = |a: Vec<PathBuf>, b: Vec<PathBuf>| a.into_iter().chain(b).collect::<Vec<_>>();
        let reg = vec![self.regions.clone()];
        match stage {
            Stage::Population => (cat(i(&["pop_obs", "pop_obs_fed", "pop_forecast"]), reg), w(&["P_hat"])),
            Stage::Emigrants => (
                cat(i(&["emig_obs_fed", "emig_obs_dd", "emig_forecast"]), cat(w(&["P_hat"]), reg)),
                w(&["E_hat"]),
            ),
            Stage::Deaths => (
                cat(i(&["deaths_obs", "deaths_forecast", "le_forecast"]), cat(w(&["P_hat", "E_hat"]), reg)),
                w(&["D_hat", "D_hat_dd", "Dp"]),
            ),
            Stage::Births => (
                cat(i(&["births_mother", "births_sex", "births_forecast", "mac_forecast"]), w(&["P_hat", "D_hat", "E_hat"])),
                cat(w(&["Bm_hat", "B_hat", "Bp"]), vec![self.work.join("alpha.cfg")]),
            ),
            Stage::Immigrants => (
                cat(i(&["imm_obs"]), cat(w(&["P_hat", "B_hat", "D_hat", "E_hat"]), reg)),
                w(&["I_national", "I_hat"]),
            ),
            Stage::Internal => (
                cat(i(&["od_obs", "ie_obs_dd", "ii_obs_dd", "ie_obs_age"]), cat(w(&["P_hat"]), reg)),
                w(&["IE_hat", "II_hat", "OD_hat", "M_hat"]),
            ),
            Stage::Probabilities => (w(&["P_hat", "E_hat", "D_hat_dd", "IE_hat"]), w(&["Ep", "IEp"])),
            Stage::Simulate => {
                let mut ins = w(&["P_hat", "I_hat", "Bp", "Dp", "Ep"]);
                ins.push(self.work.join("alpha.cfg"));
                if let Some(d) = self.destinations_stem() {
                    ins.extend(w(&["IEp", d]));
                }
                let dir = self.sim_dir();
                let mut outs = vec![dir.join("mean.csv")];
                for k in 0..self.runs {
                    outs.push(dir.join(format!("run_{k:03}.csv")));
                    for q in ["B", "BM", "D", "E", "I", "IE", "II", "M"] {
                        outs.push(dir.join(format!("run_{k:03}.{q}.csv")));
                    }
                }
                (ins, outs)
            }
            Stage::Validate => (
                vec![self.sim_dir().join("mean.csv")].into_iter().chain(self.truth.clone()).collect(),
                w(&["deviations_total", "deviations_groups"]),
            ),
        }
    }
}

/// One disaggregation step, kept so conservation can be checked.
#[derive(Clone, Debug)]
pub struct DisaggCheck {
    pub stage: Stage,
    pub name: String,
    pub method: Method,
    pub source: CensusTable,
    pub output: CensusTable,
}

impl DisaggCheck {
    /// The output aggregated back to the source resolution.
    pub fn reaggregated(&self) -> Result<CensusTable> {
        self.output.aggregate_to(self.source.resolution())
    }

    /// Largest `|re-aggregated - source| / max(1, |source|)`.
    pub fn max_rel_error(&self) -> Result<f64> {
        let back = self.reaggregated()?;
        let mut worst: f64 = 0.0;
        for (k, v) in self.source.iter() {
            worst = worst.max((back.get(k) - v).abs() / v.abs().max(1.0));
        }
        for (k, v) in back.iter() {
            if self.source.get(k) == 0.0 {
                worst = worst.max(v.abs());
            }
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineReport {
    pub stages: Vec<StageOutcome>,
    pub checks: Vec<DisaggCheck>,
    /// Grand-total deviation band of the validate stage.
    pub total_deviation: Option<(f64, f64)>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ManifestRow {
    stage: String,
    role: String,
    path: String,
    sha256: String,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let r = rec?;
        if r.len() != 4 {
            return Err(Error::Parse { line: rows.len() + 2, msg: "manifest rows need 4 fields".into() });
        }
        rows.push(ManifestRow { stage: r[0].into(), role: r[1].into(), path: r[2].into(), sha256: r[3].into() });
    }
    Ok(rows)
}

fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["stage", "role", "path", "sha256"])?;
    for r in rows {
        w.write_record([&r.stage, &r.role, &r.path, &r.sha256])?;
    }
    w.flush()?;
    Ok(())
}

fn stage_rows(cfg: &PipelineConfig, stage: Stage, with_outputs: bool) -> Result<Vec<ManifestRow>> {
    let (ins, outs) = cfg.stage_files(stage);
    let row = |role: &str, p: &Path, h: String| ManifestRow {
        stage: stage.name().into(),
        role: role.into(),
        path: p.display().to_string(),
        sha256: h,
    };
    let mut rows = vec![row("config", Path::new("-"), cfg.fingerprint())];
    for p in &ins {
        rows.push(row("input", p, sha256_file(p)?));
    }
    if with_outputs {
        for p in &outs {
            rows.push(row("output", p, sha256_file(p)?));
        }
    }
    Ok(rows)
}

fn up_to_date(cfg: &PipelineConfig, stage: Stage, manifest: &[ManifestRow]) -> bool {
    let recorded: Vec<&ManifestRow> = manifest.iter().filter(|r| r.stage == stage.name()).collect();
    if recorded.is_empty() {
        return false;
    }
    match stage_rows(cfg, stage, true) {
        Ok(now) => now.len() == recorded.len() && now.iter().zip(&recorded).all(|(a, b)| a == *b),
        Err(_) => false,
    }
}

/// Runs the configured stages in order. Outputs of completed stages are
/// kept and recorded when a later stage fails.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let manifest_path = cfg.work.join("manifest.csv");
    let mut report = PipelineReport::default();
    // every input must exist or come from an earlier stage
    let mut produced: Vec<PathBuf> = Vec::new();
    for &stage in &cfg.stages {
        let (ins, outs) = cfg.stage_files(stage);
        for p in ins {
            if !produced.contains(&p) && !p.exists() {
                return Err(Error::Missing(format!("stage {stage} needs {}", p.display())));
            }
        }
        produced.extend(outs);
    }
    if cfg.stages.is_empty() {
        write_manifest(&manifest_path, &[])?;
        return Ok(report);
    }
    std::fs::create_dir_all(&cfg.work).map_err(|e| Error::file(&cfg.work, e))?;
    let mut manifest = read_manifest(&manifest_path)?;
    let mut ctx = Ctx { cfg, hierarchy: None, checks: Vec::new() };
    for &stage in &cfg.stages {
        if up_to_date(cfg, stage, &manifest) {
            log::info!("stage {stage}: unchanged, skipped");
            report.stages.push(StageOutcome { stage, skipped: true });
            continue;
        }
        log::info!("stage {stage}: running");
        let started = std::time::Instant::now();
        let result = ctx.run(stage);
        log::info!("stage {stage}: {:.1} s", started.elapsed().as_secs_f64());
        report.checks.append(&mut ctx.checks);
        match result {
            Ok(dev) => {
                if dev.is_some() {
                    report.total_deviation = dev;
                }
            }
            Err(e) => {
                write_manifest(&manifest_path, &manifest)?;
                return Err(Error::invalid(format!("stage {stage} failed: {e}")));
            }
        }
        manifest.retain(|r| r.stage != stage.name());
        manifest.extend(stage_rows(cfg, stage, true)?);
        manifest.sort_by_key(|r| (r.stage.parse::<Stage>().ok(), r.role != "config"));
        write_manifest(&manifest_path, &manifest)?;
        report.stages.push(StageOutcome { stage, skipped: false });
    }
    Ok(report)
}

// ------------------------------------------------------------------ helpers

fn ages() -> Vec<AgeClass> {
    AgeClass::single_years(MAX_AGE)
}

fn age_class(a: usize) -> AgeClass {
    if a >= NA - 1 {
        AgeClass::Open(MAX_AGE)
    } else {
        AgeClass::Single(a as u32)
    }
}

fn load(path: &Path, level: RegionLevel, ages: Option<Vec<AgeClass>>) -> Result<CensusTable> {
    load_table(path, &ReadOptions { level: Some(level), kind: None, ages })
}

/// Cellwise sum of tables with the same region level.
fn add(a: &CensusTable, b: &CensusTable) -> Result<CensusTable> {
    let mut res = a.resolution().clone();
    res.first_year = res.first_year.min(b.resolution().first_year);
    res.last_year = res.last_year.max(b.resolution().last_year);
    let mut out = CensusTable::new(res, ValueKind::Real);
    for t in [a, b] {
        for (k, v) in t.iter() {
            out.add(k.clone(), v)?;
        }
    }
    Ok(out)
}

/// Repeats the last year's cells up to `last`.
fn carry_forward(t: &CensusTable, last: i32) -> Result<CensusTable> {
    let end = t.resolution().last_year;
    if last <= end {
        return Ok(t.clone());
    }
    let mut out = t.clone();
    out.extend_years(t.resolution().first_year..=last);
    let slice = t.slice_year(end);
    for y in end + 1..=last {
        for (k, v) in slice.iter() {
            out.set(k.with_year(y), v)?;
        }
    }
    Ok(out)
}

fn by_age(t: &CensusTable, year: i32, region: &RegionId, sex: Sex) -> Vec<f64> {
    (0..NA).map(|a| t.get(&CensusKey::new(year, region.clone(), sex, Some(age_class(a))))).collect()
}

fn scalar(t: &CensusTable, year: i32, region: &RegionId, sex: Sex, age: Option<AgeClass>) -> Result<f64> {
    let k = CensusKey::new(year, region.clone(), sex, age);
    if !t.resolution().years().contains(&year) {
        return Err(Error::Missing(format!("no value for {k}")));
    }
    Ok(t.get(&k))
}

const SEXES: [Sex; 2] = [Sex::Male, Sex::Female];

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    hierarchy: Option<RegionHierarchy>,
    checks: Vec<DisaggCheck>,
}

impl Ctx<'_> {
    fn hierarchy(&mut self) -> Result<&RegionHierarchy> {
        if self.hierarchy.is_none() {
            self.hierarchy = Some(RegionHierarchy::load(&self.cfg.regions)?);
        }
        Ok(self.hierarchy.as_ref().unwrap())
    }

    fn disaggregate(
        &mut self,
        stage: Stage,
        name: &str,
        source: &CensusTable,
        distribution: &CensusTable,
        key_dims: Vec<Dim>,
        target: ResolutionSpec,
        method: Method,
    ) -> Result<CensusTable> {
        let h = self.hierarchy()?.clone();
        let out = disaggregate_table(&DisaggSpec {
            source,
            distribution,
            key_dims,
            target,
            method,
            uniform_fallback: true,
            hierarchy: &h,
        })?;
        self.checks.push(DisaggCheck { stage, name: name.into(), method, source: source.clone(), output: out.clone() });
        Ok(out)
    }

    fn work(&self, stem: &str, level: RegionLevel, ages: Option<Vec<AgeClass>>) -> Result<CensusTable> {
        load(&self.cfg.work_file(stem), level, ages)
    }

    fn input(&self, stem: &str, level: RegionLevel, ages: Option<Vec<AgeClass>>) -> Result<CensusTable> {
        load(&self.cfg.input(stem), level, ages)
    }

    fn save(&self, stem: &str, t: &CensusTable) -> Result<()> {
        save_table(t, &self.cfg.work_file(stem))
    }

    fn run(&mut self, stage: Stage) -> Result<Option<(f64, f64)>> {
        match stage {
            Stage::Population => self.population()?,
            Stage::Emigrants => self.emigrants()?,
            Stage::Deaths => self.deaths()?,
            Stage::Births => self.births()?,
            Stage::Immigrants => self.immigrants()?,
            Stage::Internal => self.internal()?,
            Stage::Probabilities => self.probabilities()?,
            Stage::Simulate => self.simulate()?,
            Stage::Validate => return self.validate().map(Some),
        }
        Ok(None)
    }

    fn p_hat(&self) -> Result<CensusTable> {
        self.work("P_hat", MUNI, Some(ages()))
    }

    /// Population: open 95+ split and forecast disaggregation, single ages.
    fn population(&mut self) -> Result<()> {
        let obs = self.input("pop_obs", MUNI, Some(AgeClass::single_years(95)))?;
        let fed = self.input("pop_obs_fed", FED, Some(ages()))?;
        let fc = self.input("pop_forecast", FED, Some(AgeClass::bands(5, 100)))?;
        let target = ResolutionSpec::new(obs.resolution().years(), MUNI).with_sexes().with_ages(ages());
        let split = self.disaggregate(
            Stage::Population,
            "open age split",
            &obs,
            &fed,
            vec![Dim::Year, Dim::Sex],
            target.clone(),
            Method::HuntingtonHill,
        )?;
        let last_obs = split.slice_year(split.resolution().last_year);
        let forecast = self.disaggregate(
            Stage::Population,
            "forecast",
            &fc,
            &last_obs,
            vec![Dim::Sex],
            target,
            Method::HuntingtonHill,
        )?;
        self.save("P_hat", &CensusTable::merge_time(&[split, forecast])?)
    }

    /// Emigrants at districts_districts by sex and single age.
    fn emigrants(&mut self) -> Result<()> {
        let p = self.p_hat()?;
        let fed = self.input("emig_obs_fed", FED, Some(ages()))?;
        let dd = self.input("emig_obs_dd", DD, None)?;
        let fc = self.input("emig_forecast", FED, None)?;
        let p_dd = p.aggregate(&[], Some(DD))?;
        let p_fed = p.aggregate(&[], Some(FED))?;
        let national = fed.aggregate(&[Dim::Region], None)?;
        let regions = self.hierarchy()?.regions(DD);
        let years = fed.resolution().years();
        let res = ResolutionSpec::new(years.clone(), DD).with_sexes().with_ages(ages());
        let mut obs = CensusTable::new(res.clone(), ValueKind::Real);
        for y in years.clone() {
            let avg_dd = p_dd.average_population(y)?;
            let avg_fed = p_fed.average_population(y)?;
            for s in SEXES {
                // seed: district population times the state's age-specific rate
                let mut seed = Vec::with_capacity(regions.len() * NA);
                for r in &regions {
                    let f = parent_region(r, DD, FED)?;
                    let pe = by_age(&avg_dd, y, r, s);
                    let pf = by_age(&avg_fed, y, &f, s);
                    let ef = by_age(&fed, y, &f, s);
                    for a in 0..NA {
                        seed.push((pe[a] + 0.5) * ef[a] / (pf[a] + 0.5));
                    }
                }
                let rows: Vec<f64> = regions.iter().map(|r| dd.get(&CensusKey::new(y, r.clone(), s, None))).collect();
                let cols = by_age(&national, y, &RegionId::country(), s);
                let fitted = fit2(Matrix::new(regions.len(), NA, seed)?, &rows, &cols)?;
                for (i, r) in regions.iter().enumerate() {
                    for a in 0..NA {
                        let v = fitted.get(i, a);
                        if v != 0.0 {
                            obs.set(CensusKey::new(y, r.clone(), s, Some(age_class(a))), v)?;
                        }
                    }
                }
            }
        }
        let last = obs.slice_year(*years.end());
        let forecast =
            self.disaggregate(Stage::Emigrants, "forecast", &fc, &last, vec![Dim::Sex], res, Method::Proportional)?;
        self.save("E_hat", &CensusTable::merge_time(&[obs, forecast.into_kind(ValueKind::Real)?])?)
    }

    /// Deaths: open 99+ split, observed probabilities and mortality fits
    /// for the forecast years.
    fn deaths(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let p = self.p_hat()?;
        let e = self.work("E_hat", DD, Some(ages()))?;
        let obs = self.input("deaths_obs", FED, Some(AgeClass::single_years(99)))?;
        let fc = self.input("deaths_forecast", FED, None)?;
        let le = self.input("le_forecast", RegionLevel::Country, Some(vec![AgeClass::Single(0), AgeClass::Single(65)]))?;
        let p_fed = p.aggregate(&[], Some(FED))?;
        let e_fed = e.aggregate(&[], Some(FED))?;
        let target = ResolutionSpec::new(obs.resolution().years(), FED).with_sexes().with_ages(ages());
        let d_obs = self
            .disaggregate(
                Stage::Deaths,
                "open age split",
                &obs,
                &p,
                vec![Dim::Year, Dim::Sex, Dim::Region],
                target.clone(),
                Method::Proportional,
            )?
            .into_kind(ValueKind::Real)?;
        let y0 = d_obs.resolution().last_year;
        let q_obs = add(&d_obs, &e_fed.years(d_obs.resolution().years()))?;
        let (dp_obs, clip) = farr_probability_model(&d_obs, &p_fed, &q_obs, y0)?;
        if clip.clipped > 0 {
            log::warn!("{} observed death probabilities clipped", clip.clipped);
        }
        let dp_obs = dp_obs.into_table();

        let alpha = AlphaProfile::mortality();
        let feds = self.hierarchy()?.regions(FED);
        let fc_years: Vec<i32> = fc.resolution().years().filter(|y| *y > y0).collect();
        let ref_years = trailing_years(dp_obs.resolution().years(), y0, 3, &[]);
        let mut jobs = Vec::new();
        for f in &feds {
            let hist = |s| -> BTreeMap<i32, Vec<f64>> {
                dp_obs.resolution().years().map(|y| (y, by_age(&dp_obs, y, f, s))).collect()
            };
            let qref_m = repair_tail(reference_curve(&hist(Sex::Male), &ref_years, &[])?);
            let qref_f = repair_tail(reference_curve(&hist(Sex::Female), &ref_years, &[])?);
            for &y in &fc_years {
                let avg = p_fed.average_population(y)?;
                let c = RegionId::country();
                let lev = |s, a| scalar(&le, y, &c, s, Some(AgeClass::Single(a)));
                let target = MortalityFitTarget {
                    deaths: scalar(&fc, y, f, Sex::Total, None)?,
                    le_m_0: lev(Sex::Male, 0)?,
                    le_f_0: lev(Sex::Female, 0)?,
                    le_m_65: lev(Sex::Male, 65)?,
                    le_f_65: lev(Sex::Female, 65)?,
                };
                let inputs = MortalityInputs {
                    qref_m: qref_m.clone(),
                    qref_f: qref_f.clone(),
                    pop_m: by_age(&avg, y, f, Sex::Male),
                    pop_f: by_age(&avg, y, f, Sex::Female),
                    alpha: alpha.clone(),
                };
                jobs.push((f.clone(), y, target, inputs));
            }
        }
        let fits: Vec<Result<_>> = jobs
            .par_iter()
            .map(|(f, y, t, inp)| fit_mortality(t, inp).map(|fit| (f.clone(), *y, fit, inp.clone())))
            .collect();
        let fres = target.clone().with_years(fc_years.first().copied().unwrap_or(y0 + 1)..=fc_years.last().copied().unwrap_or(y0 + 1));
        let mut dp_fc = CensusTable::new(fres.clone(), ValueKind::Real);
        let mut d_fc = CensusTable::new(fres, ValueKind::Real);
        for r in fits {
            let (f, y, fit, inp) = r?;
            log::info!("mortality fit {f} {y}: objective {:.3e}", fit.objective);
            for (s, q, pop) in [(Sex::Male, &fit.q_m, &inp.pop_m), (Sex::Female, &fit.q_f, &inp.pop_f)] {
                for a in 0..NA {
                    let k = CensusKey::new(y, f.clone(), s, Some(age_class(a)));
                    if q[a] > 0.0 {
                        dp_fc.set(k.clone(), q[a])?;
                    }
                    let d = invert_farr(q[a], pop[a], alpha.at(a))?;
                    if d > 0.0 {
                        d_fc.set(k, d)?;
                    }
                }
            }
        }
        let (d_hat, dp) = if fc_years.is_empty() {
            (d_obs, dp_obs)
        } else {
            (CensusTable::merge_time(&[d_obs, d_fc])?, CensusTable::merge_time(&[dp_obs, dp_fc])?)
        };
        let d_dd = self
            .disaggregate(
                Stage::Deaths,
                "districts",
                &d_hat,
                &p,
                vec![Dim::Year, Dim::Sex, Dim::Age],
                ResolutionSpec::new(d_hat.resolution().years(), DD).with_sexes().with_ages(ages()),
                Method::Proportional,
            )?;
        let _ = cfg;
        self.save("D_hat", &d_hat)?;
        self.save("D_hat_dd", &d_dd)?;
        self.save("Dp", &dp)
    }

    /// Births by mother's age, by sex, probabilities and the male share.
    fn births(&mut self) -> Result<()> {
        let p = self.p_hat()?;
        let d = self.work("D_hat", FED, Some(ages()))?;
        let e = self.work("E_hat", DD, Some(ages()))?;
        let bm = self.input("births_mother", FED, Some(ages()))?;
        let bs = self.input("births_sex", RegionLevel::Country, None)?;
        let fc = self.input("births_forecast", FED, None)?;
        let mac_fc = self.input("mac_forecast", RegionLevel::Country, None)?;
        let p_fed = p.aggregate(&[], Some(FED))?;
        let y0 = bm.resolution().last_year;
        let q = add(&d, &e.aggregate(&[], Some(FED))?)?;
        let (bp_obs, _) = farr_probability_model(&bm, &p_fed, &q, y0)?;
        let bp_obs = bp_obs.into_table();
        let total = bs.total();
        if total <= 0.0 {
            return Err(Error::Missing("no observed births to estimate the male share".into()));
        }
        let alpha_m = bs.aggregate(&[], None)?.iter().filter(|(k, _)| k.sex == Sex::Male).map(|(_, v)| v).sum::<f64>() / total;

        let feds = self.hierarchy()?.regions(FED);
        let fc_years: Vec<i32> = fc.resolution().years().filter(|y| *y > y0).collect();
        let mut jobs = Vec::new();
        for f in &feds {
            let last_avg = p_fed.average_population(y0)?;
            let pop0 = by_age(&last_avg, y0, f, Sex::Female);
            let b0 = by_age(&bm, y0, f, Sex::Female);
            let rates0: Vec<f64> = b0.iter().zip(&pop0).map(|(b, p)| if *p > 0.0 { b / p } else { 0.0 }).collect();
            let theta0 = birth_start(&rates0, mac(&rates0)?);
            for &y in &fc_years {
                let avg = p_fed.average_population(y)?;
                let female = by_age(&avg, y, f, Sex::Female);
                let t = BirthFitTarget::new(
                    scalar(&fc, y, f, Sex::Total, None)?,
                    scalar(&mac_fc, y, &RegionId::country(), Sex::Total, None)?,
                    female,
                )?;
                jobs.push((f.clone(), y, t, theta0));
            }
        }
        let fits: Vec<Result<_>> =
            jobs.par_iter().map(|(f, y, t, th)| fit_births(t, *th).map(|b| (f.clone(), *y, b, t.female_pop.clone()))).collect();
        let mut bm_hat = bm.clone().into_kind(ValueKind::Real)?;
        let mut bp = bp_obs;
        let mut b_sex = bs.clone().into_kind(ValueKind::Real)?;
        if let (Some(&first), Some(&last)) = (fc_years.first(), fc_years.last()) {
            bm_hat.extend_years(first..=last);
            bp.extend_years(first..=last);
            b_sex.extend_years(first..=last);
        }
        let alpha = AlphaProfile::half();
        for r in fits {
            let (f, y, fit, female) = r?;
            log::info!("birth fit {f} {y}: objective {:.3e}", fit.objective);
            let mut born = 0.0;
            for a in 0..NA {
                let k = CensusKey::new(y, f.clone(), Sex::Female, Some(age_class(a)));
                let b = fit.rates[a] * female[a];
                born += b;
                if b > 0.0 {
                    bm_hat.set(k.clone(), b)?;
                }
                let pr = farr_probability(fit.rates[a], alpha.at(a));
                if pr > 0.0 {
                    bp.set(k, pr)?;
                }
            }
            let c = RegionId::country();
            b_sex.add(CensusKey::new(y, c.clone(), Sex::Male, None), alpha_m * born)?;
            b_sex.add(CensusKey::new(y, c, Sex::Female, None), (1.0 - alpha_m) * born)?;
        }
        self.save("Bm_hat", &bm_hat)?;
        self.save("B_hat", &b_sex)?;
        self.save("Bp", &bp)?;
        let path = self.cfg.work.join("alpha.cfg");
        std::fs::write(&path, format!("alpha_male = {alpha_m}\n")).map_err(|e| Error::file(path, e))
    }

    /// National immigrants from the balance equation, split by the observed
    /// immigrant structure.
    fn immigrants(&mut self) -> Result<()> {
        let p = self.p_hat()?;
        let b = self.work("B_hat", RegionLevel::Country, None)?;
        let d = self.work("D_hat", FED, Some(ages()))?;
        let e = self.work("E_hat", DD, Some(ages()))?;
        let dist = self.input("imm_obs", MUNI, Some(ages()))?;
        let last = d.resolution().last_year.min(e.resolution().last_year).min(b.resolution().last_year);
        let p = p.years(p.resolution().first_year..=last + 1);
        let (national, rep) = residual_immigrants(&p, &b, &d, &e)?;
        if !rep.floored.is_empty() {
            log::warn!("{} negative immigrant residuals set to zero", rep.floored.len());
        }
        let target = ResolutionSpec::new(national.resolution().years(), MUNI).with_sexes().with_ages(ages());
        let i_hat = self.disaggregate(
            Stage::Immigrants,
            "municipalities",
            &national,
            &dist,
            vec![Dim::Sex],
            target,
            Method::HuntingtonHill,
        )?;
        self.save("I_national", &national)?;
        self.save("I_hat", &i_hat)
    }

    /// Internal emigrants and immigrants by age, origin-destination flows
    /// and flows by age, all at districts_districts.
    fn internal(&mut self) -> Result<()> {
        let p = self.p_hat()?;
        let od = self.input("od_obs", RegionLevel::Districts, None)?;
        let ie = self.input("ie_obs_dd", DD, None)?;
        let ii = self.input("ii_obs_dd", DD, None)?;
        let by_age_nat = self.input("ie_obs_age", RegionLevel::Country, Some(ages()))?;
        let p_dd = p.aggregate(&[], Some(DD))?;
        let h = self.hierarchy()?.clone();
        let regions = h.regions(DD);
        let n = regions.len();
        let seed_od = disaggregate_flows(&od, &p_dd, DD, true, &h)?;
        self.checks.push(DisaggCheck {
            stage: Stage::Internal,
            name: "flows".into(),
            method: Method::Proportional,
            source: od.clone(),
            output: seed_od.clone(),
        });
        let years = ie.resolution().years();
        let aged = ResolutionSpec::new(years.clone(), DD).with_sexes().with_ages(ages());
        let mut ie_hat = CensusTable::new(aged.clone(), ValueKind::Real);
        let mut ii_hat = CensusTable::new(aged.clone(), ValueKind::Real);
        let mut od_hat = CensusTable::new(ResolutionSpec::new(years.clone(), DD).with_sexes().with_od(), ValueKind::Real);
        let mut m_hat = CensusTable::new(aged.with_od(), ValueKind::Real);
        let c = RegionId::country();
        for y in years {
            for s in SEXES {
                let seed: Vec<f64> =
                    regions.iter().flat_map(|r| by_age(&p_dd, y, r, s).into_iter().map(|v| v + 0.5)).collect();
                let cols = by_age(&by_age_nat, y, &c, s);
                let rows_ie: Vec<f64> = regions.iter().map(|r| ie.get(&CensusKey::new(y, r.clone(), s, None))).collect();
                let rows_ii: Vec<f64> = regions.iter().map(|r| ii.get(&CensusKey::new(y, r.clone(), s, None))).collect();
                let e_age = fit2(Matrix::new(n, NA, seed.clone())?, &rows_ie, &cols)?;
                let i_age = fit2(Matrix::new(n, NA, seed)?, &rows_ii, &cols)?;
                let mut m0 = Matrix::filled(n, n, 0.0);
                for (i, a) in regions.iter().enumerate() {
                    for (j, b) in regions.iter().enumerate() {
                        m0.set(i, j, seed_od.get(&CensusKey::flow(y, a.clone(), s, None, b.clone())));
                    }
                }
                let od_fit = fit2(m0, &rows_ie, &rows_ii)?;
                let support: Vec<f64> = (0..n * n * NA)
                    .map(|x| if od_fit.data[x / NA] > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let b3 = i_age.clone();
                let m3 = ipf3(&Tensor3::new([n, n, NA], support)?, &od_fit, &b3, &e_age, DEFAULT_TOL_3D, DEFAULT_MAX_ITER)?;
                log::info!("flows by age {y} {s}: {} sweeps, residual {:.2e}", m3.iterations, m3.residual);
                for (i, a) in regions.iter().enumerate() {
                    for k in 0..NA {
                        let age = Some(age_class(k));
                        if e_age.get(i, k) > 0.0 {
                            ie_hat.set(CensusKey::new(y, a.clone(), s, age), e_age.get(i, k))?;
                        }
                        if i_age.get(i, k) > 0.0 {
                            ii_hat.set(CensusKey::new(y, a.clone(), s, age), i_age.get(i, k))?;
                        }
                    }
                    for (j, b) in regions.iter().enumerate() {
                        if od_fit.get(i, j) > 0.0 {
                            od_hat.set(CensusKey::flow(y, a.clone(), s, None, b.clone()), od_fit.get(i, j))?;
                        }
                        for k in 0..NA {
                            let v = m3.fitted.get(i, j, k);
                            if v > 0.0 {
                                m_hat.set(CensusKey::flow(y, a.clone(), s, Some(age_class(k)), b.clone()), v)?;
                            }
                        }
                    }
                }
            }
        }
        self.save("IE_hat", &ie_hat)?;
        self.save("II_hat", &ii_hat)?;
        self.save("OD_hat", &od_hat)?;
        self.save("M_hat", &m_hat)
    }

    /// Emigration and internal emigration probabilities at
    /// districts_districts; internal ones are carried past the observed years.
    fn probabilities(&mut self) -> Result<()> {
        let p = self.p_hat()?.aggregate(&[], Some(DD))?;
        let e = self.work("E_hat", DD, Some(ages()))?;
        let d = self.work("D_hat_dd", DD, Some(ages()))?;
        let ie = self.work("IE_hat", DD, Some(ages()))?;
        let q = add(&d, &e)?;
        let last = e.resolution().last_year;
        let (ep, _) = farr_probability_model(&e, &p, &q, last)?;
        // internal emigrants leave the cell too
        let q_ie = add(&q, &ie)?;
        let (iep, _) = farr_probability_model(&ie, &p, &q_ie, ie.resolution().last_year)?;
        self.save("Ep", ep.table())?;
        self.save("IEp", &carry_forward(iep.table(), last)?)
    }

    fn simulate(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let alpha = KeyValues::load(&cfg.work.join("alpha.cfg"))?;
        let mut sc = ScenarioConfig::new(cfg.sim_first, cfg.sim_last);
        sc.step = cfg.step;
        sc.scale = cfg.scale;
        sc.runs = cfg.runs;
        sc.im_mode = cfg.im_mode;
        sc.seed = cfg.seed;
        sc.alpha_male = alpha.parsed_or("alpha_male", sc.alpha_male)?;
        let ev_last = cfg.sim_last - 1;
        let mut params = Parameters::new(self.p_hat()?);
        params.immigrants = Some(self.work("I_hat", MUNI, Some(ages()))?);
        params.births = Some(self.work("Bp", FED, Some(ages()))?);
        params.deaths = Some(self.work("Dp", FED, Some(ages()))?);
        params.emigrants = Some(self.work("Ep", DD, Some(ages()))?);
        if let Some(stem) = cfg.destinations_stem() {
            params.internal = Some(self.work("IEp", DD, Some(ages()))?);
            let ages = if cfg.im_mode == ImMode::Interregional { None } else { Some(ages()) };
            params.destinations = Some(carry_forward(&self.work(stem, DD, ages)?, ev_last)?);
        }
        let runs = simulate::run(&sc, &params)?;
        for r in &runs {
            if r.diagnostics.cancelled_moves > 0 {
                log::warn!("run {}: {} moves without destination", r.run, r.diagnostics.cancelled_moves);
            }
        }
        simulate::write_outputs(&runs, &cfg.sim_dir())
    }

    fn validate(&mut self) -> Result<(f64, f64)> {
        let cfg = self.cfg;
        let truth_path = cfg.truth.as_ref().ok_or_else(|| Error::Missing("config key truth".into()))?;
        let mean = load(&cfg.sim_dir().join("mean.csv"), MUNI, Some(ages()))?;
        let mean = mean.map_values(ValueKind::Real, |_, v| v / cfg.scale)?;
        let truth = load(truth_path, MUNI, Some(ages()))?;
        let window = cfg.sim_first..cfg.sim_last;
        let total = compare(&mean, &truth, &GroupSpec::total(), window.clone())?;
        let groups = compare(&mean, &truth, &"fed,sex,age20".parse()?, window)?;
        for (stem, rows) in [("deviations_total", &total), ("deviations_groups", &groups)] {
            let path = cfg.work_file(stem);
            let f = std::fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
            write_deviations(rows, std::io::BufWriter::new(f))?;
        }
        let row = &total[0];
        log::info!("grand total deviation {:.3}% to {:.3}%", 100.0 * row.e_min, 100.0 * row.e_max);
        Ok((row.e_min, row.e_max))
    }
}

/// Small populations leave old ages without deaths. From age 80 a zero
/// takes the value of the age below; an all-zero tail gets 1 at the open age.
fn repair_tail(mut q: Vec<f64>) -> Vec<f64> {
    for a in 81..q.len() {
        if q[a] == 0.0 {
            q[a] = q[a - 1];
        }
    }
    if let Some(last) = q.last_mut() {
        if *last == 0.0 {
            *last = 1.0;
        }
    }
    q
}

/// Two-dimensional fit to row and column totals, then exact row totals.
fn fit2(m0: Matrix, rows: &[f64], cols: &[f64]) -> Result<Matrix> {
    let total: f64 = rows.iter().sum();
    let out = ipf2(&m0, rows, cols, 1e-12 * total.max(1.0), DEFAULT_MAX_ITER)?;
    let mut x = out.fitted;
    let sums = x.row_sums();
    for (i, (&t, &s)) in rows.iter().zip(&sums).enumerate() {
        if s > 0.0 {
            for j in 0..x.cols {
                x.set(i, j, x.get(i, j) * t / s);
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{write_dataset, InputYears, SynthSpec};

    fn dataset(dir: &Path) -> PipelineConfig {
        let spec = SynthSpec { base_population: 600.0, first_year: 2000, last_year: 2010, ..SynthSpec::default() };
        write_dataset(&spec, InputYears { obs_first: 2001, y0: 2005 }, dir).unwrap();
        let mut kv = KeyValues::load(&dir.join("pipeline.cfg")).unwrap();
        kv.set("sim_last", "2009");
        kv.set("runs", "2");
        PipelineConfig::from_kv(&kv).unwrap()
    }

    #[test]
    fn stages_parse_and_order() {
        assert_eq!("births".parse::<Stage>().unwrap(), Stage::Births);
        assert!("nope".parse::<Stage>().is_err());
        let kv = KeyValues::parse(
            "inputs = i\nwork = w\nregions = r.csv\nobs_first = 2002\ny0 = 2014\nsim_first = 2002\nsim_last = 2027\nstages = deaths, population\n",
            Path::new("/x"),
        )
        .unwrap();
        assert!(PipelineConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn empty_stage_list_writes_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let kv = KeyValues::parse(
            "inputs = i\nwork = w\nregions = r.csv\nobs_first = 2002\ny0 = 2014\nsim_first = 2002\nsim_last = 2027\nstages =\n",
            dir.path(),
        )
        .unwrap();
        let cfg = PipelineConfig::from_kv(&kv).unwrap();
        let rep = run_pipeline(&cfg).unwrap();
        assert!(rep.stages.is_empty());
        let text = std::fs::read_to_string(dir.path().join("w/manifest.csv")).unwrap();
        assert_eq!(text, "stage,role,path,sha256\n");
    }

    #[test]
    fn small_pipeline_runs_and_reruns_as_noop() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dataset(dir.path());
        let rep = run_pipeline(&cfg).unwrap();
        assert!(rep.stages.iter().all(|s| !s.skipped));
        assert_eq!(rep.stages.len(), Stage::ALL.len());
        for c in &rep.checks {
            let err = c.max_rel_error().unwrap();
            match c.method {
                Method::HuntingtonHill => assert_eq!(c.reaggregated().unwrap().max_abs_diff(&c.source), 0.0, "{}", c.name),
                Method::Proportional => assert!(err <= 1e-9, "{} {}: {err}", c.stage, c.name),
            }
        }
        let (lo, hi) = rep.total_deviation.unwrap();
        assert!(lo.abs() < 0.05 && hi.abs() < 0.05, "{lo} {hi}");
        let again = run_pipeline(&cfg).unwrap();
        assert!(again.stages.iter().all(|s| s.skipped));
        assert!(cfg.work.join("M_hat.csv").exists() && cfg.work.join("deviations_groups.csv").exists());
    }

    #[test]
    fn missing_input_is_reported_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dataset(dir.path());
        std::fs::remove_file(cfg.inputs.join("od_obs.csv")).unwrap();
        let err = run_pipeline(&cfg).unwrap_err().to_string();
        assert!(err.contains("od_obs"), "{err}");
        assert!(!cfg.work.join("P_hat.csv").exists());
    }
}
