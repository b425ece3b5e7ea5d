mod output;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use deud::association::{associate, Policy, SWEEP_OFFSETS_DB};
use deud::campaign::{run_campaign, summarize, CampaignSettings};
use deud::interference::LinkSystem;
use deud::model::{OverlapModel, OverlapScheme, Provenance, Scenario};
use deud::optimizer::{
    minimize_power, optimize_estimated_overlap, solve, theta_sweep, PowerMode, Solution,
    SolveOptions,
};
use deud::pf::{pf_allocate, Split};
use deud::scenario::{generate, ScenarioConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use output::{ensure_dir, num, write_json, CsvOut};

/// Version of the JSON layouts written by this tool.
const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "deud",
    version,
    about = "Joint UL/DL bandwidth and power optimization for HetNets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OverlapArg {
    None,
    Pairwise,
    Specific,
}

impl From<OverlapArg> for OverlapScheme {
    fn from(a: OverlapArg) -> Self {
        match a {
            OverlapArg::None => OverlapScheme::None,
            OverlapArg::Pairwise => OverlapScheme::CellPairwise,
            OverlapArg::Specific => OverlapScheme::CellSpecific,
        }
    }
}

#[derive(clap::Args)]
struct SolveArgs {
    /// One DL PSD per cell instead of one per link.
    #[arg(long)]
    cell_specific: bool,
    /// Power-budget scale of the power update.
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value_t = deud::sif::DEFAULT_MAX_ITER)]
    max_iter: usize,
}

impl SolveArgs {
    fn options(&self) -> SolveOptions {
        SolveOptions {
            mode: if self.cell_specific {
                PowerMode::CellSpecific
            } else {
                PowerMode::PerLink
            },
            theta: self.theta,
            max_iter: self.max_iter,
            ..Default::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random scenario from a TOML config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize one scenario under one association policy.
    Solve {
        #[arg(long)]
        scenario: PathBuf,
        /// coud, deud-p or deud-o:OFFSET
        #[arg(long)]
        policy: Policy,
        #[arg(long, value_enum, default_value = "none")]
        overlap: OverlapArg,
        #[command(flatten)]
        solve: SolveArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize under every DeUD_O offset and rank the results.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated offsets in dB; `a..b` expands in steps of 2.
        #[arg(long)]
        offsets: Option<String>,
        #[arg(long, value_enum, default_value = "none")]
        overlap: OverlapArg,
        #[command(flatten)]
        solve: SolveArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Utility versus power-budget scale, for one or more noise levels.
    ThetaSweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        policy: Policy,
        /// Comma-separated θ values.
        #[arg(
            long,
            default_value = "0.01,0.11,0.21,0.31,0.41,0.51,0.61,0.71,0.81,0.91,1.01"
        )]
        thetas: String,
        /// Comma-separated noise levels in dBm per RB; the scenario's own when absent.
        #[arg(long, allow_hyphen_values = true)]
        noise_dbm: Option<String>,
        #[arg(long)]
        cell_specific: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo campaign over random scenarios.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        /// Worker threads; all cores when unset.
        #[arg(long, env = "DEUD_WORKERS")]
        workers: Option<usize>,
        /// Overlap scheme of the partial-overlap re-solve.
        #[arg(long, value_enum, default_value = "pairwise")]
        partial: OverlapArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the optimizer against the fixed-split PF baseline.
    ComparePf {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        policy: Policy,
        #[arg(long, default_value_t = 9)]
        ul_rbs: usize,
        #[arg(long, default_value_t = 16)]
        dl_rbs: usize,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Smallest PSD meeting every demand for the bandwidth of a solution.
    MinimizePower {
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// `solution.json`: self-contained so that later commands need no other input.
#[derive(Serialize, Deserialize)]
struct SolutionFile {
    schema_version: u32,
    provenance: Provenance,
    policy: Policy,
    options: SolveOptions,
    overlap: OverlapModel,
    solution: Solution,
    scenario: Scenario,
}

/// Whether every iteration behind the written artifacts converged.
struct Converged(bool);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(Converged(true)) => ExitCode::SUCCESS,
        Ok(Converged(false)) => {
            eprintln!("warning: an iteration stopped before reaching its tolerance; results written anyway");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let stalled = e
                .downcast_ref::<deud::Error>()
                .is_some_and(|d| d.is_not_converged());
            ExitCode::from(if stalled { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<Converged> {
    match command {
        Command::Generate { config, seed, out } => cmd_generate(&config, seed, &out),
        Command::Solve {
            scenario,
            policy,
            overlap,
            solve,
            out,
        } => cmd_solve(&scenario, policy, overlap.into(), &solve.options(), &out),
        Command::Sweep {
            scenario,
            offsets,
            overlap,
            solve,
            out,
        } => {
            let offsets = match offsets {
                Some(s) => parse_offsets(&s)?,
                None => SWEEP_OFFSETS_DB.to_vec(),
            };
            cmd_sweep(&scenario, &offsets, overlap.into(), &solve.options(), &out)
        }
        Command::ThetaSweep {
            scenario,
            policy,
            thetas,
            noise_dbm,
            cell_specific,
            out,
        } => cmd_theta_sweep(
            &scenario,
            policy,
            &thetas,
            noise_dbm.as_deref(),
            cell_specific,
            &out,
        ),
        Command::Montecarlo {
            config,
            trials,
            seed_base,
            workers,
            partial,
            out,
        } => cmd_montecarlo(&config, trials, seed_base, workers, partial.into(), &out),
        Command::ComparePf {
            scenario,
            policy,
            ul_rbs,
            dl_rbs,
            rounds,
            out,
        } => cmd_compare_pf(&scenario, policy, Split { ul_rbs, dl_rbs }, rounds, &out),
        Command::MinimizePower { solution, out } => cmd_minimize_power(&solution, &out),
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Scenario::from_json(&text).with_context(|| format!("invalid scenario {}", path.display()))
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    ScenarioConfig::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
}

/// Provenance of an artifact derived from `scenario`.
fn provenance_of(scenario: &Scenario) -> Provenance {
    let p = scenario.provenance();
    Provenance::new(
        p.and_then(|p| p.seed),
        p.and_then(|p| p.config_hash.clone()),
    )
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("invalid number '{t}'"))
        })
        .collect()
}

fn parse_offsets(s: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for item in s.split(',') {
        let item = item.trim();
        if let Some((a, b)) = item.split_once("..") {
            let a: f64 = a
                .parse()
                .with_context(|| format!("invalid offset range '{item}'"))?;
            let b: f64 = b
                .parse()
                .with_context(|| format!("invalid offset range '{item}'"))?;
            if b < a {
                bail!("empty offset range '{item}'");
            }
            let mut v = a;
            while v <= b + 1e-9 {
                out.push(v);
                v += 2.0;
            }
        } else {
            out.push(
                item.parse()
                    .with_context(|| format!("invalid offset '{item}'"))?,
            );
        }
    }
    Ok(out)
}

fn cmd_generate(config: &Path, seed: u64, out: &Path) -> Result<Converged> {
    let cfg = load_config(config)?;
    let scenario = generate(&cfg, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(out, scenario.to_json()? + "\n")
        .with_context(|| format!("cannot write {}", out.display()))?;
    log::info!(
        "wrote {} ({} BSs, {} UEs)",
        out.display(),
        scenario.bs_count(),
        scenario.ue_count()
    );
    Ok(Converged(true))
}

/// Solves once, re-solving under estimated overlap factors unless the
/// scheme is `None`.
fn solve_policy(
    scenario: &Scenario,
    policy: Policy,
    scheme: OverlapScheme,
    opts: &SolveOptions,
) -> Result<(Solution, OverlapModel)> {
    if scheme == OverlapScheme::None {
        let assoc = associate(&policy, scenario);
        let (sys, _) = LinkSystem::new(scenario, &assoc, &OverlapModel::none())?;
        let mut sol = solve(&sys, opts)?;
        sol.policy = Some(policy);
        return Ok((sol, OverlapModel::none()));
    }
    let (full, partial, overlap) = optimize_estimated_overlap(&policy, scenario, scheme, opts)?;
    if !full.converged {
        log::warn!("full-overlap pre-solve did not converge; overlap estimate may be off");
    }
    Ok((partial, overlap))
}

fn cmd_solve(
    path: &Path,
    policy: Policy,
    scheme: OverlapScheme,
    opts: &SolveOptions,
    out: &Path,
) -> Result<Converged> {
    let scenario = load_scenario(path)?;
    let (solution, overlap) = solve_policy(&scenario, policy, scheme, opts)?;
    ensure_dir(out)?;
    let prov = provenance_of(&scenario);
    let mut trace = CsvOut::create(
        &out.join("trace.csv"),
        &prov,
        &["iteration", "step", "lambda", "g1", "g2", "residual"],
    )?;
    for r in &solution.trace.rows {
        trace.row([
            r.iteration.to_string(),
            r.step.to_string(),
            num(r.lambda),
            num(r.g1),
            num(r.g2),
            num(r.residual),
        ])?;
    }
    trace.finish()?;
    let converged = solution.converged;
    println!(
        "{policy}: lambda = {:.6e} (UL {:.6e}, DL {:.6e}), step {}, g1 = {:.6}, g2 = {:.6}",
        solution.lambda,
        solution.lambda_ul,
        solution.lambda_dl,
        solution.step,
        solution.g1,
        solution.g2
    );
    let file = SolutionFile {
        schema_version: OUTPUT_SCHEMA_VERSION,
        provenance: prov,
        policy,
        options: opts.clone(),
        overlap,
        solution,
        scenario,
    };
    write_json(&out.join("solution.json"), &file)?;
    Ok(Converged(converged))
}

#[derive(Serialize)]
struct RankEntry {
    rank: usize,
    offset_db: f64,
    lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    equivalent: Option<&'static str>,
}

#[derive(Serialize)]
struct SweepSummary {
    schema_version: u32,
    provenance: Provenance,
    overlap: OverlapScheme,
    top3: Vec<RankEntry>,
}

fn cmd_sweep(
    path: &Path,
    offsets: &[f64],
    scheme: OverlapScheme,
    opts: &SolveOptions,
    out: &Path,
) -> Result<Converged> {
    let scenario = load_scenario(path)?;
    let opts = SolveOptions {
        record_trace: false,
        ..opts.clone()
    };
    let mut rows = Vec::with_capacity(offsets.len());
    for &offset_db in offsets {
        let policy = Policy::DeudO { offset_db };
        let (sol, _) = solve_policy(&scenario, policy, scheme, &opts)?;
        rows.push((offset_db, policy, sol));
    }
    ensure_dir(out)?;
    let prov = provenance_of(&scenario);
    let mut csv = CsvOut::create(
        &out.join("sweep.csv"),
        &prov,
        &[
            "offset_db",
            "policy",
            "lambda",
            "lambda_ul",
            "lambda_dl",
            "g1",
            "g2",
            "step",
            "converged",
        ],
    )?;
    for (offset, policy, s) in &rows {
        csv.row([
            offset.to_string(),
            policy.to_string(),
            num(s.lambda),
            num(s.lambda_ul),
            num(s.lambda_dl),
            num(s.g1),
            num(s.g2),
            s.step.to_string(),
            s.converged.to_string(),
        ])?;
    }
    csv.finish()?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    // stable sort keeps the smaller offset first on ties
    order.sort_by(|&a, &b| rows[b].2.lambda.total_cmp(&rows[a].2.lambda));
    let top3: Vec<RankEntry> = order
        .iter()
        .take(3)
        .enumerate()
        .map(|(rank, &i)| RankEntry {
            rank: rank + 1,
            offset_db: rows[i].0,
            lambda: rows[i].2.lambda,
            equivalent: rows[i].1.equivalent_tag(),
        })
        .collect();
    for e in &top3 {
        println!(
            "#{} offset {} dB: lambda = {:.6e}",
            e.rank, e.offset_db, e.lambda
        );
    }
    write_json(
        &out.join("summary.json"),
        &SweepSummary {
            schema_version: OUTPUT_SCHEMA_VERSION,
            provenance: prov,
            overlap: scheme,
            top3,
        },
    )?;
    Ok(Converged(rows.iter().all(|r| r.2.converged)))
}

fn cmd_theta_sweep(
    path: &Path,
    policy: Policy,
    thetas: &str,
    noise_dbm: Option<&str>,
    cell_specific: bool,
    out: &Path,
) -> Result<Converged> {
    let scenario = load_scenario(path)?;
    let thetas = parse_list(thetas)?;
    let noises = match noise_dbm {
        Some(s) => parse_list(s)?,
        None => vec![scenario.file().noise_dbm_per_rb],
    };
    let opts = SolveOptions {
        mode: if cell_specific {
            PowerMode::CellSpecific
        } else {
            PowerMode::PerLink
        },
        record_trace: false,
        ..Default::default()
    };
    let assoc = associate(&policy, &scenario);
    ensure_dir(out)?;
    let prov = provenance_of(&scenario);
    let mut csv = CsvOut::create(
        &out.join("theta.csv"),
        &prov,
        &["noise_dbm", "theta", "lambda", "g1", "g2"],
    )?;
    for &noise in &noises {
        let s = scenario.with_noise_dbm(noise)?;
        let (sys, _) = LinkSystem::new(&s, &assoc, &OverlapModel::none())?;
        for pt in theta_sweep(&sys, &thetas, &opts)? {
            csv.row([
                noise.to_string(),
                pt.theta.to_string(),
                num(pt.lambda),
                num(pt.g1),
                num(pt.g2),
            ])?;
        }
    }
    csv.finish()?;
    Ok(Converged(true))
}

fn cmd_montecarlo(
    config: &Path,
    trials: usize,
    seed_base: u64,
    workers: Option<usize>,
    partial: OverlapScheme,
    out: &Path,
) -> Result<Converged> {
    if trials == 0 {
        bail!("--trials must be positive");
    }
    if workers == Some(0) {
        bail!("--workers must be positive");
    }
    let cfg = load_config(config)?;
    let settings = CampaignSettings {
        partial,
        ..Default::default()
    };
    let results = run_campaign(&cfg, trials, seed_base, &settings, workers)?;
    let summary = summarize(&results, seed_base)?;
    ensure_dir(out)?;
    let prov = Provenance::new(Some(seed_base), Some(cfg.hash()));

    let mut csv = CsvOut::create(
        &out.join("trials.csv"),
        &prov,
        &[
            "trial",
            "seed",
            "policy",
            "lambda_full",
            "lambda_partial",
            "lambda_ul",
            "lambda_dl",
            "g1",
            "g2",
            "converged",
        ],
    )?;
    for r in &results {
        for o in &r.policies {
            csv.row([
                r.trial.to_string(),
                r.seed.to_string(),
                o.policy.to_string(),
                num(o.lambda_full),
                num(o.lambda_partial),
                num(o.lambda_ul),
                num(o.lambda_dl),
                num(o.g1),
                num(o.g2),
                o.converged.to_string(),
            ])?;
        }
    }
    csv.finish()?;

    let mut pf = CsvOut::create(
        &out.join("pf.csv"),
        &prov,
        &[
            "trial",
            "seed",
            "policy",
            "pf_lambda_ul",
            "pf_lambda_dl",
            "opt_lambda_ul",
            "opt_lambda_dl",
        ],
    )?;
    for r in &results {
        for o in &r.pf {
            pf.row([
                r.trial.to_string(),
                r.seed.to_string(),
                o.policy.to_string(),
                num(o.pf_lambda_ul),
                num(o.pf_lambda_dl),
                num(o.opt_lambda_ul),
                num(o.opt_lambda_dl),
            ])?;
        }
    }
    pf.finish()?;

    let mut agg = CsvOut::create(
        &out.join("aggregate.csv"),
        &prov,
        &[
            "policy",
            "mean_full",
            "ci_full",
            "mean_partial",
            "ci_partial",
            "top3_share",
        ],
    )?;
    for s in &summary.policies {
        agg.row([
            s.policy.to_string(),
            num(s.full.mean),
            num(s.full.half_width),
            num(s.partial.mean),
            num(s.partial.half_width),
            num(s.top3_share),
        ])?;
    }
    agg.finish()?;

    #[derive(Serialize)]
    struct Out<'a> {
        schema_version: u32,
        provenance: Provenance,
        config: &'a ScenarioConfig,
        summary: &'a deud::campaign::CampaignSummary,
    }
    write_json(
        &out.join("summary.json"),
        &Out {
            schema_version: OUTPUT_SCHEMA_VERSION,
            provenance: prov,
            config: &cfg,
            summary: &summary,
        },
    )?;
    println!(
        "{} trials: best policy {} with mean lambda {:.2}x CoUD; partial/full overlap {:.2}x",
        summary.trials, summary.best_policy, summary.best_over_coud, summary.partial_over_full
    );
    for s in &summary.pf {
        println!(
            "{}: optimizer beats PF in {:.0}% of trials",
            s.policy,
            100.0 * s.win_share
        );
    }
    Ok(Converged(summary.non_converged == 0))
}

fn cmd_compare_pf(
    path: &Path,
    policy: Policy,
    split: Split,
    rounds: usize,
    out: &Path,
) -> Result<Converged> {
    let scenario = load_scenario(path)?;
    let assoc = associate(&policy, &scenario);
    let (sys, _) = LinkSystem::new(&scenario, &assoc, &OverlapModel::none())?;
    let opts = SolveOptions {
        record_trace: false,
        ..Default::default()
    };
    let opt = solve(&sys, &opts)?;
    let base = pf_allocate(&sys, split, &opts.initial_psd, rounds)?;
    ensure_dir(out)?;
    let prov = provenance_of(&scenario);
    let mut csv = CsvOut::create(
        &out.join("compare_pf.csv"),
        &prov,
        &["method", "policy", "lambda_ul", "lambda_dl", "lambda"],
    )?;
    csv.row([
        "pf".to_string(),
        policy.to_string(),
        num(base.lambda_ul),
        num(base.lambda_dl),
        num(base.min_direction()),
    ])?;
    csv.row([
        "joint".to_string(),
        policy.to_string(),
        num(opt.lambda_ul),
        num(opt.lambda_dl),
        num(opt.lambda),
    ])?;
    csv.finish()?;
    println!(
        "PF: UL {:.4e} DL {:.4e}; joint: UL {:.4e} DL {:.4e}",
        base.lambda_ul, base.lambda_dl, opt.lambda_ul, opt.lambda_dl
    );
    Ok(Converged(opt.converged))
}

#[derive(Serialize)]
struct MinPowerFile<'a> {
    schema_version: u32,
    provenance: Provenance,
    policy: Policy,
    result: &'a deud::optimizer::PowerMinimization,
}

fn cmd_minimize_power(path: &Path, out: &Path) -> Result<Converged> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let file: SolutionFile = serde_json::from_str(&text)
        .with_context(|| format!("invalid solution file {}", path.display()))?;
    let assoc = associate(&file.policy, &file.scenario);
    let (sys, _) = LinkSystem::new(&file.scenario, &assoc, &file.overlap)?;
    let m = minimize_power(&sys, &file.solution.allocation, &file.options)?;
    ensure_dir(out)?;
    println!(
        "lambda* = {:.6e} -> lambda = {:.8}; psi ratio {:.4e}",
        m.lambda_star, m.lambda, m.saving_ratio
    );
    write_json(
        &out.join("min_power.json"),
        &MinPowerFile {
            schema_version: OUTPUT_SCHEMA_VERSION,
            provenance: file.provenance,
            policy: file.policy,
            result: &m,
        },
    )?;
    Ok(Converged(true))
}
