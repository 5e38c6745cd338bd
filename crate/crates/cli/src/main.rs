//! `harmonize`: command line front end. Data goes to files, logs to stderr.
//! Exit status 0 on success, 1 on data or validation errors, 2 on usage
//! errors.

mod arrays;
mod fits;

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use harmonize_core::balance::residual_immigrants;
use harmonize_core::disagg::{disaggregate_table, DisaggSpec, Method};
use harmonize_core::io::{load_table, save_table, ReadOptions};
use harmonize_core::ipf::{ipf2, ipf3, Matrix, Tensor3, DEFAULT_MAX_ITER};
use harmonize_core::lifetable::build_life_table;
use harmonize_core::pipeline::{run_pipeline, PipelineConfig};
use harmonize_core::rates::{farr_probability_model, AlphaProfile};
use harmonize_core::simulate::{self, Parameters, ScenarioConfig};
use harmonize_core::synth::{write_dataset, InputYears, SynthSpec};
use harmonize_core::validate::{compare, write_deviations, GroupSpec};
use harmonize_core::{CensusTable, Dim, RegionHierarchy, ValueKind};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("HARMONIZE_BUILD"), ")");

#[derive(Parser)]
#[command(name = "harmonize", version = VERSION, about = "Harmonize regional census tables, fit parameters and simulate")]
struct Cli {
    /// Worker threads for parallel stages; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Hh,
    Prop,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic truth, degraded inputs and a pipeline config.
    Synth {
        /// key = value generator settings; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// First year with observed inputs; defaults to first year + 2.
        #[arg(long)]
        obs_first: Option<i32>,
        /// Last observed year; defaults to obs_first + 12.
        #[arg(long)]
        y0: Option<i32>,
    },
    /// Split a coarse table along a finer distribution.
    Disaggregate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        distribution: PathBuf,
        /// Dimensions matched between source and distribution.
        #[arg(long, value_delimiter = ',')]
        key: Vec<String>,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Region manifest; built from the distribution's codes when omitted.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Split evenly where the distribution is zero.
        #[arg(long)]
        uniform_fallback: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a matrix to row and column totals.
    Ipf2 {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        cols: PathBuf,
        /// Start matrix; all ones when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a three-way tensor to its three two-way margins.
    Ipf3 {
        /// Sum over k, indexed i,j.
        #[arg(long)]
        ab: PathBuf,
        /// Sum over i, indexed j,k.
        #[arg(long)]
        bc: PathBuf,
        /// Sum over j, indexed i,k.
        #[arg(long)]
        ac: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Birthday-to-birthday event probabilities from counts.
    Farr {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        population: PathBuf,
        /// Cohort leavers (deaths plus emigrants).
        #[arg(long)]
        leavers: PathBuf,
        /// Last event year; later years of the population are ignored.
        #[arg(long)]
        last_year: Option<i32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Period life table from death probabilities (`age,q`).
    Lifetable {
        #[arg(long)]
        q: PathBuf,
        #[arg(long, default_value_t = 0.923)]
        alpha0: f64,
        #[arg(long, default_value_t = 100_000.0)]
        radix: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit Gaussian fertility curves to total births and mean age.
    FitBirths {
        /// Columns year,region,births,mac.
        #[arg(long)]
        targets: PathBuf,
        /// Female population by single age.
        #[arg(long)]
        population: PathBuf,
        /// Observed birth rates; the last year of each region gives the start.
        #[arg(long)]
        observed_rates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scale reference death probabilities to deaths and life expectancies.
    FitMortality {
        /// Columns year,region,deaths,le_m_0,le_f_0,le_m_65,le_f_65.
        #[arg(long)]
        targets: PathBuf,
        /// Observed death probabilities by region, sex and single age.
        #[arg(long)]
        probabilities: PathBuf,
        /// Population by region, sex and single age.
        #[arg(long)]
        population: PathBuf,
        #[arg(long, value_delimiter = ',')]
        qref_years: Vec<i32>,
        #[arg(long, value_delimiter = ',')]
        exclude_years: Vec<i32>,
        #[arg(long, default_value_t = 0.923)]
        alpha0: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Balance equations.
    Balance {
        #[command(subcommand)]
        command: BalanceCommand,
    },
    /// Run the microsimulation.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Deviation bands of a simulated census against a reference.
    Validate {
        #[arg(long)]
        sim: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "total")]
        groups: String,
        /// Inclusive year range, `first:last`.
        #[arg(long, value_parser = parse_window)]
        window: Range<i32>,
        /// Divide simulated values by this population scale.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the stages of a pipeline config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum BalanceCommand {
    /// National immigrants per year and sex from the balance equation.
    ResidualImmigrants {
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        births: PathBuf,
        #[arg(long)]
        deaths: PathBuf,
        #[arg(long)]
        emigrants: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_window(s: &str) -> std::result::Result<Range<i32>, String> {
    let (a, b) = s.split_once(':').ok_or("expected first:last")?;
    let a: i32 = a.trim().parse().map_err(|_| format!("bad year {a:?}"))?;
    let b: i32 = b.trim().parse().map_err(|_| format!("bad year {b:?}"))?;
    if b < a {
        return Err(format!("window {a}:{b} is empty"));
    }
    Ok(a..b + 1)
}

fn parse_dim(s: &str) -> Result<Dim> {
    Ok(match s.trim() {
        "year" => Dim::Year,
        "region" => Dim::Region,
        "sex" => Dim::Sex,
        "age" => Dim::Age,
        "region2" => Dim::Region2,
        other => bail!("unknown dimension {other:?}; expected year, region, sex, age or region2"),
    })
}

fn load(path: &Path) -> Result<CensusTable> {
    load_table(path, &ReadOptions::default()).with_context(|| format!("reading {}", path.display()))
}

fn save(t: &CensusTable, path: &Path) -> Result<()> {
    save_table(t, path).with_context(|| format!("writing {}", path.display()))
}

fn synth(spec: Option<&Path>, out_dir: &Path, obs_first: Option<i32>, y0: Option<i32>) -> Result<()> {
    let spec = match spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    let obs_first = obs_first.unwrap_or(spec.first_year + 2);
    let y0 = y0.unwrap_or((obs_first + 12).min(spec.last_year - 2));
    write_dataset(&spec, InputYears { obs_first, y0 }, out_dir)?;
    log::info!("synthetic dataset written to {}", out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn disaggregate(
    source: &Path,
    distribution: &Path,
    key: &[String],
    method: MethodArg,
    regions: Option<&Path>,
    uniform_fallback: bool,
    out: &Path,
) -> Result<()> {
    let src = load(source)?;
    let dist = load(distribution)?;
    let hierarchy = match regions {
        Some(p) => RegionHierarchy::load(p)?,
        None => {
            let mut h = RegionHierarchy::new();
            for r in dist.regions() {
                h.insert(r.as_str(), dist.level())?;
            }
            h
        }
    };
    let target = dist.resolution().clone().with_years(src.resolution().years());
    let result = disaggregate_table(&DisaggSpec {
        source: &src,
        distribution: &dist,
        key_dims: key.iter().map(|k| parse_dim(k)).collect::<Result<_>>()?,
        target,
        method: match method {
            MethodArg::Hh => Method::HuntingtonHill,
            MethodArg::Prop => Method::Proportional,
        },
        uniform_fallback,
        hierarchy: &hierarchy,
    })?;
    save(&result, out)
}

fn run_ipf2(rows: &Path, cols: &Path, init: Option<&Path>, tol: f64, max_iter: usize, out: &Path) -> Result<()> {
    let a = arrays::read_vector(rows)?;
    let b = arrays::read_vector(cols)?;
    let m0 = match init {
        Some(p) => arrays::read_matrix(p, Some((a.len(), b.len())))?,
        None => Matrix::filled(a.len(), b.len(), 1.0),
    };
    let o = ipf2(&m0, &a, &b, tol, max_iter)?;
    log::info!("ipf2: {} sweeps, residual {:e}, converged {}", o.iterations, o.residual, o.converged);
    arrays::write_matrix(out, &o.fitted)
}

fn run_ipf3(ab: &Path, bc: &Path, ac: &Path, init: Option<&Path>, tol: f64, max_iter: usize, out: &Path) -> Result<()> {
    let (a, b, c) = arrays::read_margins(ab, bc, ac)?;
    let dims = [a.rows, a.cols, b.cols];
    let m0 = match init {
        Some(p) => arrays::read_tensor(p, dims)?,
        None => Tensor3::filled(dims, 1.0),
    };
    let o = ipf3(&m0, &a, &b, &c, tol, max_iter)?;
    log::info!("ipf3: {} sweeps, residual {:e}, converged {}", o.iterations, o.residual, o.converged);
    arrays::write_tensor(out, &o.fitted)
}

fn farr(events: &Path, population: &Path, leavers: &Path, last_year: Option<i32>, out: &Path) -> Result<()> {
    let x = load(events)?;
    let p = load(population)?;
    let q = load(leavers)?;
    let y_n = last_year.unwrap_or(x.resolution().last_year);
    let (probs, stats) = farr_probability_model(&x, &p, &q, y_n)?;
    if stats.clipped > 0 {
        log::warn!("{} probabilities clipped to 1", stats.clipped);
    }
    save(probs.table(), out)
}

fn lifetable(q_path: &Path, alpha0: f64, radix: f64, out: &Path) -> Result<()> {
    let q = arrays::read_vector_named(q_path, "age", "q")?;
    if q.is_empty() {
        bail!("{} has no death probabilities", q_path.display());
    }
    let alpha = AlphaProfile::new(vec![alpha0], 0.5)?;
    let t = build_life_table(&q, &alpha, q.len() - 1, radix)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(out)?;
    w.write_record(["age", "q", "l", "d", "L", "T", "e"])?;
    for a in 0..t.q.len() {
        let f = harmonize_core::io::format_value;
        w.write_record([a.to_string(), f(t.q[a]), f(t.l[a]), f(t.d[a]), f(t.big_l[a]), f(t.t[a]), f(t.e[a])])?;
    }
    w.flush()?;
    Ok(())
}

fn residual(population: &Path, births: &Path, deaths: &Path, emigrants: &Path, out: &Path) -> Result<()> {
    let (i, report) = residual_immigrants(&load(population)?, &load(births)?, &load(deaths)?, &load(emigrants)?)?;
    for (y, s, raw) in &report.floored {
        log::warn!("immigrants {y} {s}: negative residual {raw} set to 0");
    }
    save(&i, out)
}

fn simulate_cmd(config: &Path, out_dir: &Path) -> Result<()> {
    let cfg = ScenarioConfig::load(config)?;
    let params = Parameters::load(&cfg.tables)?;
    let runs = simulate::run(&cfg, &params)?;
    for r in &runs {
        let d = &r.diagnostics;
        if d.cancelled_moves > 0 || d.forced_terminal > 0 {
            log::warn!("run {}: {} moves without destination, {} forced events", r.run, d.cancelled_moves, d.forced_terminal);
        }
    }
    simulate::write_outputs(&runs, out_dir)?;
    log::info!("{} runs written to {}", runs.len(), out_dir.display());
    Ok(())
}

fn validate_cmd(sim: &Path, reference: &Path, groups: &str, window: Range<i32>, scale: f64, out: &Path) -> Result<()> {
    if !(scale > 0.0) {
        bail!("scale must be positive");
    }
    let sim = load(sim)?.map_values(ValueKind::Real, |_, v| v / scale)?;
    let rows = compare(&sim, &load(reference)?, &groups.parse::<GroupSpec>()?, window)?;
    let f = std::fs::File::create(out).with_context(|| format!("writing {}", out.display()))?;
    write_deviations(&rows, std::io::BufWriter::new(f))?;
    Ok(())
}

fn pipeline(config: &Path) -> Result<()> {
    let cfg = PipelineConfig::load(config)?;
    let report = run_pipeline(&cfg)?;
    for s in &report.stages {
        log::info!("{}: {}", s.stage, if s.skipped { "unchanged" } else { "done" });
    }
    if !report.checks.is_empty() {
        let path = cfg.work.join("checks.csv");
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&path)?;
        w.write_record(["stage", "step", "method", "max_rel_error"])?;
        let stages: BTreeSet<_> = report.checks.iter().map(|c| c.stage).collect();
        for stage in stages {
            for c in report.checks.iter().filter(|c| c.stage == stage) {
                let method = match c.method {
                    Method::HuntingtonHill => "hh",
                    Method::Proportional => "prop",
                };
                w.write_record([stage.name(), &c.name, method, &format!("{:e}", c.max_rel_error()?)])?;
            }
        }
        w.flush()?;
    }
    if let Some((lo, hi)) = report.total_deviation {
        log::info!("grand total deviation between {:.3}% and {:.3}%", 100.0 * lo, 100.0 * hi);
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { spec, out_dir, obs_first, y0 } => synth(spec.as_deref(), &out_dir, obs_first, y0),
        Command::Disaggregate { source, distribution, key, method, regions, uniform_fallback, out } => {
            disaggregate(&source, &distribution, &key, method, regions.as_deref(), uniform_fallback, &out)
        }
        Command::Ipf2 { rows, cols, init, tol, max_iter, out } => run_ipf2(&rows, &cols, init.as_deref(), tol, max_iter, &out),
        Command::Ipf3 { ab, bc, ac, init, tol, max_iter, out } => {
            run_ipf3(&ab, &bc, &ac, init.as_deref(), tol, max_iter, &out)
        }
        Command::Farr { events, population, leavers, last_year, out } => farr(&events, &population, &leavers, last_year, &out),
        Command::Lifetable { q, alpha0, radix, out } => lifetable(&q, alpha0, radix, &out),
        Command::FitBirths { targets, population, observed_rates, out } => {
            fits::births(&targets, &population, observed_rates.as_deref(), &out)
        }
        Command::FitMortality { targets, probabilities, population, qref_years, exclude_years, alpha0, out } => {
            fits::mortality(&fits::MortalityArgs {
                targets: &targets,
                probabilities: &probabilities,
                population: &population,
                qref_years: &qref_years,
                exclude_years: &exclude_years,
                alpha0,
                out: &out,
            })
        }
        Command::Balance { command: BalanceCommand::ResidualImmigrants { population, births, deaths, emigrants, out } } => {
            residual(&population, &births, &deaths, &emigrants, &out)
        }
        Command::Simulate { config, out_dir } => simulate_cmd(&config, &out_dir),
        Command::Validate { sim, reference, groups, window, scale, out } => {
            validate_cmd(&sim, &reference, &groups, window, scale, &out)
        }
        Command::Pipeline { config } => pipeline(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::new().parse_filters(level).format_timestamp(None).target(env_logger::Target::Stderr).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}
