//! Command-line surface for the matchlab toolkit.
//!
//! Four commands tie the library into reproducible runs: `verify` recomputes
//! the two-university benchmark and its directional claims, `simulate` runs
//! the mechanism comparison on a synthetic market, `fit` estimates the
//! conditional-logit choice model from a CSV, and `gen-market` persists a
//! generated market for later simulate runs. Every output is a pure function
//! of the configuration and `--seed`; `--threads` (or MATCHLAB_THREADS) only
//! sizes the worker pool. Each run ends by atomically writing a
//! `manifest.toml` that records what produced which files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use matchlab::logit::{
    distance_equivalent, fit_mle, marginal_effects_early_offer, ChoiceDataset, FitMode,
    LogitError,
};
use matchlab::mechanism::MechanismKind;
use matchlab::rng::RngStream;
use matchlab::sim::{
    compare, generate_market, read_sim_market, run_samples, write_eu_csv, write_pi_csv,
    write_sim_market, write_theta_csv, SimConfig,
};
use matchlab::two_univ::{
    admissible_cost_grid, check_flagged_cells_mc, check_reference_table, check_sign_conditions,
    narrow_support_effects, write_reference_table_csv, write_sign_checks_csv, NarrowSupportParams,
    SignCheck, TwoUnivParams, DEFAULT_COST,
};

/// Seed used by commands whose configuration carries none of its own.
const DEFAULT_SEED: u64 = 17;
const MANIFEST: &str = "manifest.toml";

#[derive(Parser)]
#[command(
    name = "matchlab",
    version,
    about = "Matching-market simulation and verification toolkit",
    propagate_version = true
)]
struct Cli {
    /// Root seed for every random quantity in the run; simulate and
    /// gen-market default to the seed in their config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (fallback: MATCHLAB_THREADS). Affects wall-clock time
    /// only, never any output byte.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recompute the two-university benchmark and check the published
    /// values, the directional claims, and the near-certain-quality
    /// counterexample.
    Verify {
        /// Inspection cost as NUM/DEN, or "grid" for a 101-point sweep of
        /// the admissible interval.
        #[arg(long, default_value = "3339/65536")]
        k: String,
        /// Simulation draws used to adjudicate the flagged benchmark cells.
        #[arg(long, default_value_t = 10_000_000)]
        mc_draws: u64,
    },
    /// Compare mechanisms on a synthetic market.
    Simulate {
        /// Simulation config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Ingest a previously written market instead of generating one.
        #[arg(long)]
        market_dir: Option<PathBuf>,
        /// Mechanisms to run next to the full-information benchmark.
        #[arg(long, default_value = "da,dosv,hybrid", value_delimiter = ',')]
        mechanisms: Vec<String>,
    },
    /// Fit the conditional-logit choice model to a choice-data CSV.
    Fit {
        /// Choice-data CSV; see the README for the schema.
        #[arg(long)]
        data: PathBuf,
        /// "acceptance" (one chosen program) or "ranked" (full lists).
        #[arg(long, default_value = "acceptance")]
        mode: String,
    },
    /// Generate a market and persist it for later simulate runs.
    GenMarket {
        /// Simulation config (TOML).
        #[arg(long)]
        config: PathBuf,
    },
}

/// Failures split by exit code: bad input (2) versus failed checks or
/// computations (1).
#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Failure(msg) => f.write_str(msg),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

/// What a command produced: the hash of the config bytes it consumed ("-"
/// when it takes no input file), the resolved seed, the files written, and
/// any failed checks (reported after the manifest is written).
struct CmdOutcome {
    config_sha256: String,
    seed: u64,
    outputs: Vec<String>,
    failures: Vec<String>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_sha256: String,
    seed: u64,
    artifact_version: String,
    outputs: Vec<String>,
    duration_seconds: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Failure(_) => 1,
            })
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| failure(format!("creating {}: {e}", cli.out.display())))?;
    let started = Instant::now();
    let (command, outcome) = match &cli.command {
        Command::Verify { k, mc_draws } => {
            ("verify", cmd_verify(cli.seed, k, *mc_draws, &cli.out)?)
        }
        Command::Simulate {
            config,
            market_dir,
            mechanisms,
        } => (
            "simulate",
            cmd_simulate(cli.seed, config, market_dir.as_deref(), mechanisms, &cli.out)?,
        ),
        Command::Fit { data, mode } => ("fit", cmd_fit(cli.seed, data, mode, &cli.out)?),
        Command::GenMarket { config } => ("gen-market", cmd_gen_market(cli.seed, config, &cli.out)?),
    };
    write_manifest(
        &cli.out,
        &RunManifest {
            command: command.to_string(),
            config_sha256: outcome.config_sha256,
            seed: outcome.seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: outcome.outputs,
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!(
            "{} check(s) failed:\n  {}",
            outcome.failures.len(),
            outcome.failures.join("\n  ")
        )))
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MATCHLAB_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                usage(format!("MATCHLAB_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| failure(format!("configuring {n} worker threads: {e}")))
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| failure(format!("encoding manifest: {e}")))?;
    let tmp = out.join("manifest.toml.tmp");
    std::fs::write(&tmp, text).map_err(|e| failure(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, out.join(MANIFEST))
        .map_err(|e| failure(format!("renaming {}: {e}", tmp.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        let _ = write!(s, "{b:02x}");
    }
    s
}

// ---------------------------------------------------------------------------
// verify

enum CostArg {
    Grid,
    Rational(u64, u64),
}

fn parse_cost(s: &str) -> Result<CostArg, CliError> {
    if s.trim().eq_ignore_ascii_case("grid") {
        return Ok(CostArg::Grid);
    }
    let bad = || usage(format!("--k must be NUM/DEN or \"grid\", got {s:?}"));
    let (num, den) = s.split_once('/').ok_or_else(bad)?;
    let num: u64 = num.trim().parse().map_err(|_| bad())?;
    let den: u64 = den.trim().parse().map_err(|_| bad())?;
    if den == 0 {
        return Err(usage("--k denominator must be nonzero"));
    }
    Ok(CostArg::Rational(num, den))
}

fn cmd_verify(
    cli_seed: Option<u64>,
    k: &str,
    mc_draws: u64,
    out: &Path,
) -> Result<CmdOutcome, CliError> {
    let seed = cli_seed.unwrap_or(DEFAULT_SEED);
    let base = TwoUnivParams::benchmark();
    let mut outputs = Vec::new();
    let mut failures = Vec::new();

    match parse_cost(k)? {
        CostArg::Rational(num, den) => {
            let params = base.with_cost(num as f64 / den as f64);
            params.validate().map_err(usage)?;
            if params.cost == DEFAULT_COST {
                verify_reference_table(&params, mc_draws, seed, out, &mut outputs, &mut failures)?;
            } else {
                println!(
                    "cost {num}/{den} differs from the benchmark cost; skipping the printed-value comparison"
                );
            }
            let checks = check_sign_conditions(&params).map_err(failure)?;
            report_signs(&checks, 1, &mut failures);
            write_sign_checks_csv(&out.join("sign_checks.csv"), &checks).map_err(failure)?;
            outputs.push("sign_checks.csv".to_string());
        }
        CostArg::Grid => {
            let grid = admissible_cost_grid(&base, 101).map_err(usage)?;
            let n_costs = grid.len();
            let mut all = Vec::new();
            for cost in grid {
                all.extend(check_sign_conditions(&base.with_cost(cost)).map_err(failure)?);
            }
            report_signs(&all, n_costs, &mut failures);
            write_sign_checks_csv(&out.join("sign_checks.csv"), &all).map_err(failure)?;
            outputs.push("sign_checks.csv".to_string());
        }
    }
    verify_counterexample(&mut failures);
    Ok(CmdOutcome {
        config_sha256: "-".to_string(),
        seed,
        outputs,
        failures,
    })
}

/// Compares the 75 recomputed benchmark cells against the published values
/// at print precision, then adjudicates the flagged cells (where the exact
/// computation disagrees with the printed number) by simulation.
fn verify_reference_table(
    params: &TwoUnivParams,
    mc_draws: u64,
    seed: u64,
    out: &Path,
    outputs: &mut Vec<String>,
    failures: &mut Vec<String>,
) -> Result<(), CliError> {
    let checks = check_reference_table(params, 0.05).map_err(failure)?;
    write_reference_table_csv(&out.join("reference_table.csv"), &checks).map_err(failure)?;
    outputs.push("reference_table.csv".to_string());
    let flagged = checks.iter().filter(|c| c.cell.flagged).count();
    let mut pass = 0usize;
    for c in checks.iter().filter(|c| !c.cell.flagged) {
        if c.pass {
            pass += 1;
        } else {
            failures.push(format!(
                "benchmark cell {} {} {}: computed {:.4} vs published {} (err {:.4})",
                c.cell.mechanism,
                c.cell.case.label(),
                c.cell.statistic.label(),
                c.computed_scaled,
                c.cell.printed,
                c.abs_err
            ));
        }
    }
    println!(
        "reference table: {pass}/{} cells within 0.05, {flagged} flagged for adjudication",
        checks.len() - flagged
    );
    for c in check_flagged_cells_mc(params, mc_draws, &RngStream::root(seed).fork(0))
        .map_err(failure)?
    {
        let line = format!(
            "flagged cell {} {} {}: exact {:.6}, simulated {:.6} (se {:.2e}, {} draws)",
            c.cell.mechanism,
            c.cell.case.label(),
            c.cell.statistic.label(),
            c.computed,
            c.mc_value,
            c.mc_se,
            mc_draws
        );
        if c.within_3_sigma {
            println!("{line} -> exact value confirmed");
        } else {
            failures.push(format!("{line} -> outside 3 standard errors"));
        }
    }
    Ok(())
}

fn report_signs(checks: &[SignCheck], n_costs: usize, failures: &mut Vec<String>) {
    let bad = checks.iter().filter(|c| !c.sign_ok).count();
    println!(
        "directional checks: {}/{} hold across {n_costs} cost value(s)",
        checks.len() - bad,
        checks.len()
    );
    for c in checks.iter().filter(|c| !c.sign_ok) {
        failures.push(format!(
            "directional check {} at {} (cost {}): value {}",
            c.claim, c.case, c.k, c.value
        ));
    }
}

/// Early offers need not help: when one university's quality is already
/// near-certain, every effect is zero or negative and their weighted average
/// is strictly negative.
fn verify_counterexample(failures: &mut Vec<String>) {
    let params = NarrowSupportParams {
        mu1: 0.75,
        half_width: 0.005,
        p1: 0.3,
        p2: 0.8,
        cost: 0.015,
    };
    let e = match narrow_support_effects(&params) {
        Ok(e) => e,
        Err(e) => {
            failures.push(format!("near-certain-quality market: {e}"));
            return;
        }
    };
    let expect = params.mu1 - 1.0;
    let cells = [
        ("university 1, offer vs none", e.u1_offer1_vs_none, expect),
        ("university 1, both offers vs other's", e.u1_offers_vs_offer2, expect),
        ("university 2, offer vs none", e.u2_offer2_vs_none, 0.0),
        ("university 2, both offers vs other's", e.u2_offers_vs_offer1, 0.0),
        ("first-offer effect, university 1", e.first_offer_u1, 0.0),
        ("first-offer effect, university 2", e.first_offer_u2, 0.0),
    ];
    for (label, got, want) in cells {
        if got != want {
            failures.push(format!(
                "near-certain-quality market: {label} = {got}, expected {want}"
            ));
        }
    }
    if e.weighted_average < 0.0 {
        println!(
            "near-certain-quality market: weighted early-offer effect {:.4} < 0",
            e.weighted_average
        );
    } else {
        failures.push(format!(
            "near-certain-quality market: weighted early-offer effect {} is not negative",
            e.weighted_average
        ));
    }
}

// ---------------------------------------------------------------------------
// simulate / gen-market

fn read_sim_config(path: &Path) -> Result<(Vec<u8>, SimConfig), CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| usage(format!("{} is not UTF-8: {e}", path.display())))?;
    let cfg: SimConfig =
        toml::from_str(text).map_err(|e| usage(format!("parsing {}: {e}", path.display())))?;
    cfg.validate().map_err(usage)?;
    Ok((bytes, cfg))
}

fn parse_mechanisms(names: &[String]) -> Result<Vec<MechanismKind>, CliError> {
    names
        .iter()
        .map(|s| {
            MechanismKind::parse(s)
                .ok_or_else(|| usage(format!("unknown mechanism {s:?} (expected da, dosv, hybrid)")))
        })
        .collect()
}

fn cmd_simulate(
    cli_seed: Option<u64>,
    config: &Path,
    market_dir: Option<&Path>,
    mechanisms: &[String],
    out: &Path,
) -> Result<CmdOutcome, CliError> {
    let (bytes, cfg) = read_sim_config(config)?;
    let kinds = parse_mechanisms(mechanisms)?;
    let seed = cli_seed.unwrap_or(cfg.seed);
    let stream = RngStream::root(seed);
    let market = match market_dir {
        Some(dir) => read_sim_market(dir).map_err(usage)?,
        None => generate_market(&cfg, &stream.fork(1)).map_err(usage)?,
    };
    let results = run_samples(&market, cfg.n_samples, &kinds, &stream.fork(2)).map_err(failure)?;
    let stats = compare(&results);

    write_theta_csv(&stats, &out.join("theta.csv")).map_err(failure)?;
    write_eu_csv(&stats, &out.join("eu.csv")).map_err(failure)?;
    write_pi_csv(&stats, &out.join("pi.csv")).map_err(failure)?;

    println!(
        "{} students, {} programs, {} samples",
        market.market.students.len(),
        market.market.programs.len() - 1,
        results.n_samples
    );
    for ((label, theta), eu) in stats.theta.iter().zip(&results.eu) {
        let mean_eu = eu.iter().sum::<f64>() / eu.len() as f64;
        println!("  {label:<10} list-order share {theta:.4}  mean utility {mean_eu:.4}");
    }
    for p in &stats.pairs {
        println!(
            "  {:<22} better {:.4}  worse {:.4}  equal {:.4}",
            p.pair, p.better, p.worse, p.equal
        );
    }
    Ok(CmdOutcome {
        config_sha256: sha256_hex(&bytes),
        seed,
        outputs: ["theta.csv", "eu.csv", "pi.csv"].map(String::from).to_vec(),
        failures: Vec::new(),
    })
}

fn cmd_gen_market(
    cli_seed: Option<u64>,
    config: &Path,
    out: &Path,
) -> Result<CmdOutcome, CliError> {
    let (bytes, cfg) = read_sim_config(config)?;
    let seed = cli_seed.unwrap_or(cfg.seed);
    let market = generate_market(&cfg, &RngStream::root(seed).fork(1)).map_err(usage)?;
    write_sim_market(&market, out).map_err(failure)?;
    let seats: u32 = market.market.programs.iter().map(|p| p.capacity).sum();
    println!(
        "wrote {} students and {} programs ({} seats) to {}",
        market.market.students.len(),
        market.market.programs.len() - 1,
        seats,
        out.display()
    );
    Ok(CmdOutcome {
        config_sha256: sha256_hex(&bytes),
        seed,
        outputs: [
            "students.csv",
            "programs.csv",
            "applications.csv",
            "rankings.csv",
            "utilities.csv",
        ]
        .map(String::from)
        .to_vec(),
        failures: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// fit

fn cmd_fit(
    cli_seed: Option<u64>,
    data: &Path,
    mode: &str,
    out: &Path,
) -> Result<CmdOutcome, CliError> {
    let mode = FitMode::parse(mode)
        .ok_or_else(|| usage(format!("--mode must be \"acceptance\" or \"ranked\", got {mode:?}")))?;
    let bytes =
        std::fs::read(data).map_err(|e| usage(format!("reading {}: {e}", data.display())))?;
    let dataset = ChoiceDataset::read_csv(data).map_err(usage)?;
    let report = fit_mle(&dataset, mode).map_err(|e| match e {
        LogitError::Invalid(_) => usage(e),
        other => failure(other),
    })?;
    report.write_csv(&out.join("estimates.csv")).map_err(failure)?;
    println!(
        "{} fit: {} events from {} students ({} dropped), log-likelihood {:.4}, {} iterations",
        report.mode.label(),
        report.n_events,
        report.n_students_used,
        report.n_students_dropped,
        report.loglik,
        report.iterations
    );
    for i in 0..report.design.names.len() {
        println!(
            "  {:<24} {:>12.6}  (se {:.6})",
            report.design.names[i], report.estimates[i], report.std_errs[i]
        );
    }

    let effects = marginal_effects_early_offer(&dataset, &report).map_err(failure)?;
    let mut text = String::from("quantity,value\n");
    for (name, value) in [
        ("baseline", effects.baseline),
        ("early_offer", effects.early_offer),
        ("early_and_first", effects.early_and_first),
    ] {
        let _ = writeln!(text, "{name},{value}");
    }
    write_text(&out.join("marginal_effects.csv"), &text)?;
    println!(
        "marginal effects: baseline probability {:.4}, early offer {:+.4}, first early offer {:+.4}",
        effects.baseline, effects.early_offer, effects.early_and_first
    );

    let coeff = |name: &str| {
        report
            .coefficient(name)
            .map(|(est, _)| est)
            .ok_or_else(|| failure(format!("coefficient {name} missing from the fit")))
    };
    let gamma_d = coeff("distance_km")?;
    let gamma_d2 = coeff("distance_km_sq")?;
    let beta_eo = coeff("early_offer")?;
    let beta_feo = coeff("first_early_offer")?;
    let feasible: Vec<f64> = dataset
        .rows
        .iter()
        .filter(|r| r.feasible)
        .map(|r| r.distance_km)
        .collect();
    let at_km = feasible.iter().sum::<f64>() / feasible.len() as f64;
    let mut text = String::from("effect,delta_u,at_km,km_equivalent\n");
    for (name, delta_u) in [("early_offer", beta_eo), ("early_and_first", beta_eo + beta_feo)] {
        match distance_equivalent(gamma_d, gamma_d2, delta_u, at_km) {
            Ok(km) => {
                let _ = writeln!(text, "{name},{delta_u},{at_km},{km}");
                println!("  {name}: worth {km:.1} km of distance at {at_km:.1} km");
            }
            Err(e) => {
                let _ = writeln!(text, "{name},{delta_u},{at_km},");
                println!("  {name}: no distance equivalent at {at_km:.1} km ({e})");
            }
        }
    }
    write_text(&out.join("distance_equivalents.csv"), &text)?;

    Ok(CmdOutcome {
        config_sha256: sha256_hex(&bytes),
        seed: cli_seed.unwrap_or(DEFAULT_SEED),
        outputs: ["estimates.csv", "marginal_effects.csv", "distance_equivalents.csv"]
            .map(String::from)
            .to_vec(),
        failures: Vec::new(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| failure(format!("writing {}: {e}", path.display())))
}
