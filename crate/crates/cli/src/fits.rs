//! `fit-births` and `fit-mortality`. Targets are CSV rows per year and
//! region; each command writes the fitted table plus `<out>.report.csv`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use harmonize_core::fit::{
    birth_start, fit_births, fit_mortality, reference_curve, trailing_years, BirthFitTarget, MortalityFitTarget,
    MortalityInputs, A_MAX,
};
use harmonize_core::io::format_value;
use harmonize_core::lifetable::mac;
use harmonize_core::rates::AlphaProfile;
use harmonize_core::{AgeClass, CensusKey, CensusTable, RegionId, ResolutionSpec, Sex, ValueKind};

fn read_rows(path: &Path, cols: &[&str]) -> Result<Vec<(i32, RegionId, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).with_context(|| format!("{}: missing column {name:?}", path.display()))
    };
    let (yc, rc) = (find("year")?, find("region")?);
    let vc: Vec<usize> = cols.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let year = field(yc).parse().with_context(|| format!("{} line {line}: bad year", path.display()))?;
        let values = vc
            .iter()
            .map(|&c| field(c).parse::<f64>().with_context(|| format!("{} line {line}: bad number {:?}", path.display(), field(c))))
            .collect::<Result<_>>()?;
        out.push((year, RegionId::new(field(rc)), values));
    }
    if out.is_empty() {
        bail!("{} has no targets", path.display());
    }
    Ok(out)
}

fn load(path: &Path) -> Result<CensusTable> {
    let ages = Some(AgeClass::single_years(A_MAX as u32));
    harmonize_core::io::load_table(path, &harmonize_core::io::ReadOptions { ages, ..Default::default() })
        .with_context(|| format!("reading {}", path.display()))
}

fn by_age(t: &CensusTable, year: i32, region: &RegionId, sex: Sex) -> Vec<f64> {
    AgeClass::single_years(A_MAX as u32).into_iter().map(|a| t.get(&CensusKey::new(year, region.clone(), sex, Some(a)))).collect()
}

fn avg_by_age(t: &CensusTable, year: i32, region: &RegionId, sex: Sex) -> Result<Vec<f64>> {
    Ok(by_age(&t.average_population(year)?, year, region, sex))
}

fn report_path(out: &Path) -> PathBuf {
    out.with_extension("report.csv")
}

fn years_of(rows: &[(i32, RegionId, Vec<f64>)]) -> std::ops::RangeInclusive<i32> {
    let lo = rows.iter().map(|r| r.0).min().unwrap();
    let hi = rows.iter().map(|r| r.0).max().unwrap();
    lo..=hi
}

fn write_report(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn births(targets: &Path, population: &Path, observed: Option<&Path>, out: &Path) -> Result<()> {
    let rows = read_rows(targets, &["births", "mac"])?;
    let pop = load(population)?;
    let observed = observed.map(load).transpose()?;
    let mut jobs = Vec::new();
    for (y, r, v) in &rows {
        let female = avg_by_age(&pop, *y, r, Sex::Female)?;
        let target = BirthFitTarget::new(v[0], v[1], female)?;
        let theta0 = match &observed {
            Some(obs) => {
                let last = obs.keys().filter(|k| &k.region == r && k.year <= *y).map(|k| k.year).max();
                let last = last.with_context(|| format!("no observed rates for {r} up to {y}"))?;
                let rates = by_age(obs, last, r, Sex::Female);
                birth_start(&rates, mac(&rates)?)
            }
            None => [0.08, v[1], 5.0],
        };
        jobs.push((*y, r.clone(), target, theta0));
    }
    let fits: Vec<_> = jobs.par_iter().map(|(y, r, t, th)| fit_births(t, *th).map(|f| (*y, r.clone(), f))).collect();
    let res = ResolutionSpec::new(years_of(&rows), pop.level())
        .with_sex(vec![Sex::Female])
        .with_ages(AgeClass::single_years(A_MAX as u32));
    let mut table = CensusTable::new(res, ValueKind::Real);
    let mut report = Vec::new();
    for f in fits {
        let (y, r, fit) = f?;
        for (a, rate) in fit.rates.iter().enumerate() {
            if *rate > 0.0 {
                table.set(CensusKey::new(y, r.clone(), Sex::Female, Some(AgeClass::single_years(A_MAX as u32)[a])), *rate)?;
            }
        }
        let mut row = vec![y.to_string(), r.to_string()];
        row.extend(fit.theta.iter().map(|v| format_value(*v)));
        row.extend([format_value(fit.objective), fit.evals.to_string(), format_value(fit.births), format_value(fit.mac)]);
        report.push(row);
    }
    harmonize_core::io::save_table(&table, out)?;
    write_report(
        &report_path(out),
        &["year", "region", "theta1", "theta2", "theta3", "objective", "evals", "births", "mac"],
        report,
    )
}

pub struct MortalityArgs<'a> {
    pub targets: &'a Path,
    pub probabilities: &'a Path,
    pub population: &'a Path,
    pub qref_years: &'a [i32],
    pub exclude_years: &'a [i32],
    pub alpha0: f64,
    pub out: &'a Path,
}

pub fn mortality(args: &MortalityArgs) -> Result<()> {
    let rows = read_rows(args.targets, &["deaths", "le_m_0", "le_f_0", "le_m_65", "le_f_65"])?;
    let probs = load(args.probabilities)?;
    let pop = load(args.population)?;
    let alpha = AlphaProfile::new(vec![args.alpha0], 0.5)?;
    let first_target = *years_of(&rows).start();
    let ref_years = if args.qref_years.is_empty() {
        trailing_years(probs.resolution().years(), first_target - 1, 3, args.exclude_years)
    } else {
        args.qref_years.to_vec()
    };
    let mut curves: BTreeMap<(RegionId, Sex), Vec<f64>> = BTreeMap::new();
    let mut jobs = Vec::new();
    for (y, r, v) in &rows {
        for s in [Sex::Male, Sex::Female] {
            if !curves.contains_key(&(r.clone(), s)) {
                let hist: BTreeMap<i32, Vec<f64>> =
                    probs.resolution().years().map(|yy| (yy, by_age(&probs, yy, r, s))).collect();
                curves.insert((r.clone(), s), reference_curve(&hist, &ref_years, args.exclude_years)?);
            }
        }
        let target = MortalityFitTarget { deaths: v[0], le_m_0: v[1], le_f_0: v[2], le_m_65: v[3], le_f_65: v[4] };
        let inputs = MortalityInputs {
            qref_m: curves[&(r.clone(), Sex::Male)].clone(),
            qref_f: curves[&(r.clone(), Sex::Female)].clone(),
            pop_m: avg_by_age(&pop, *y, r, Sex::Male)?,
            pop_f: avg_by_age(&pop, *y, r, Sex::Female)?,
            alpha: alpha.clone(),
        };
        jobs.push((*y, r.clone(), target, inputs));
    }
    let fits: Vec<_> = jobs.par_iter().map(|(y, r, t, i)| fit_mortality(t, i).map(|f| (*y, r.clone(), f))).collect();
    let ages = AgeClass::single_years(A_MAX as u32);
    let res = ResolutionSpec::new(years_of(&rows), pop.level()).with_sexes().with_ages(ages.clone());
    let mut table = CensusTable::new(res, ValueKind::Real);
    let mut report = Vec::new();
    for f in fits {
        let (y, r, fit) = f?;
        for (s, q) in [(Sex::Male, &fit.q_m), (Sex::Female, &fit.q_f)] {
            for (a, v) in q.iter().enumerate() {
                if *v > 0.0 {
                    table.set(CensusKey::new(y, r.clone(), s, Some(ages[a])), *v)?;
                }
            }
        }
        let mut row = vec![y.to_string(), r.to_string()];
        row.extend(fit.theta.iter().map(|v| format_value(*v)));
        row.extend([format_value(fit.objective), fit.evals.to_string(), format_value(fit.deaths)]);
        row.extend(fit.le.iter().map(|v| format_value(*v)));
        report.push(row);
    }
    harmonize_core::io::save_table(&table, args.out)?;
    write_report(
        &report_path(args.out),
        &[
            "year", "region", "theta1", "theta2", "theta3", "theta4", "theta5", "theta6", "objective", "evals", "deaths",
            "le_m_0", "le_f_0", "le_m_65", "le_f_65",
        ],
        report,
    )
}
