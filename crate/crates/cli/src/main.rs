use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pame_core::analysis::{self, SweepAxis};
use pame_core::engine::output::{write_metrics_csv, Summary};
use pame_core::engine::{EngineError, RunConfig, RunStatus, SetupReport, Simulation};
use pame_core::losses::{LossSpec, DEFAULT_RIDGE};
use pame_core::pme;
use pame_core::rng::{self, Purpose};
use rand::Rng;

#[derive(Parser)]
#[command(name = "pame", version, about = "Decentralized learning with partial message exchange")]
struct Cli {
    /// Worker threads (default: all cores). Never changes results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key.path=value`, applied in order.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Replaces the seed in the config.
    #[arg(long, env = "PAME_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the parameter conditions. Exit 0 on pass, 2 with warnings, 1 on error.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one simulation. Exit 0 when converged, 3 at the iteration cap.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the engine over a grid of one parameter and several seeds.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// transmission_rate, participation_rate, comm_period or degree
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Run a built-in check: unbiasedness, srswor or gradcheck. Exit 0 iff it passes.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct OracleArgs {
    which: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trials (default 100000 for unbiasedness, 100 for gradcheck).
    #[arg(long)]
    trials: Option<usize>,
    /// Coordinates sent per message in the unbiasedness check.
    #[arg(long, default_value_t = 2)]
    s: usize,
    /// Population size for the srswor check.
    #[arg(long, default_value_t = 6)]
    q: usize,
    /// Sample size for the srswor check; all sizes when absent.
    #[arg(long)]
    r: Option<usize>,
    /// linear or logistic
    #[arg(long, default_value = "linear")]
    loss: String,
}

struct Ui {
    quiet: bool,
}

impl Ui {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn make_absolute(base: &Path, rel: &str) -> Result<String> {
    let p = base.join(rel);
    let p = p.canonicalize().with_context(|| format!("cannot resolve {}", p.display()))?;
    Ok(p.to_string_lossy().into_owned())
}

/// Parses the config and applies overrides and the seed. Paths in the result
/// are absolute, so the effective config can be rerun from anywhere.
fn load_config(args: &ConfigArgs) -> Result<(RunConfig, PathBuf)> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("cannot read {}", args.config.display()))?;
    let mut cfg = RunConfig::from_json_with_overrides(&text, &args.overrides)
        .map_err(|e| anyhow!("{}: {e}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    if let Some(f) = &cfg.graph.file {
        cfg.graph.file = Some(make_absolute(&base, f)?);
    }
    if let Some(f) = &cfg.data.manifest {
        cfg.data.manifest = Some(make_absolute(&base, f)?);
    }
    Ok((cfg, base))
}

fn print_report(ui: &Ui, r: &SetupReport) {
    ui.say(format!("zeta = {:.6}", r.zeta));
    let upper = r.gamma_upper.map_or("inf".to_string(), |u| format!("{u:.6}"));
    ui.say(format!("admissible gamma interval: (1, {upper}) with k0 = {}; gamma = {}", r.k0, r.gamma));
    ui.say(format!("transmission rate p = {:.4}, t_min = {}", r.p, r.t_min));
    let worst = r.nodes.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min);
    let passing = r.nodes.iter().filter(|c| c.pass).count();
    ui.say(format!(
        "condition margins (rhs - lhs): {passing}/{} nodes pass, worst {worst:.6e}, rhs = {:.6e}",
        r.nodes.len(),
        r.nodes.first().map_or(f64::NAN, |c| c.rhs)
    ));
    ui.say(format!(
        "sigma_required = {:.6e} (alpha_max {:.4e}, eps_hat {:.4e}); sigma0 = {} -> {}",
        r.sigma_required,
        r.alpha_max,
        r.epsilon_hat,
        r.sigma0,
        if r.sigma_ok { "ok" } else { "below" }
    ));
    for w in &r.warnings {
        ui.say(format!("warning: {w}"));
    }
    ui.say(if r.pass { "verdict: pass" } else { "verdict: warn" });
}

fn write_effective_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json_pretty() + "\n")?;
    Ok(())
}

fn validate(ui: &Ui, args: &ConfigArgs, out: Option<&Path>) -> Result<u8> {
    let (cfg, base) = load_config(args)?;
    let sim = Simulation::from_config(&cfg, &base)?;
    let report = sim.setup_report()?;
    print_report(ui, &report);
    if let Some(out) = out {
        write_effective_config(out, &cfg)?;
        fs::write(out.join("setup.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(if report.pass { 0 } else { 2 })
}

fn run(ui: &Ui, args: &ConfigArgs, out: &Path) -> Result<u8> {
    let (cfg, base) = load_config(args)?;
    let sim = Simulation::from_config(&cfg, &base)?;
    let report = sim.setup_report()?;
    for w in &report.warnings {
        ui.say(format!("warning: {w}"));
    }
    write_effective_config(out, &cfg)?;
    fs::write(out.join("setup.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let result = sim.run()?;
    let mut csv = Vec::new();
    write_metrics_csv(&result.records, &mut csv)?;
    fs::write(out.join("metrics.csv"), csv)?;
    let summary = Summary::from_output(&result);
    fs::write(out.join("summary.json"), summary.to_json_pretty()? + "\n")?;
    ui.say(format!(
        "{}: {} iterations, f = {:.6e}, {} bits",
        summary.status, summary.iters, summary.final_objective, summary.total_bits
    ));
    Ok(match result.status {
        RunStatus::Converged => 0,
        RunStatus::MaxIters => 3,
    })
}

fn sweep(ui: &Ui, args: &ConfigArgs, out: &Path, axis: &str, values: &[f64], seeds: &[u64]) -> Result<u8> {
    let axis = SweepAxis::parse(axis).ok_or_else(|| anyhow!("unknown sweep axis {axis:?}"))?;
    let (cfg, base) = load_config(args)?;
    let result = analysis::sweep(&cfg, &base, axis, values, seeds)?;
    write_effective_config(out, &cfg)?;
    let (csv, _) = result.write(out, &cfg)?;
    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    ui.say(format!("{} cells written to {}", result.cells.len(), csv.display()));
    for c in result.cells.iter().filter(|c| c.error.is_some()) {
        ui.say(format!("cell {}={} seed {}: {}", axis.name(), c.axis_value, c.seed, c.error.as_deref().unwrap_or("")));
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

fn worked_example_vectors() -> Vec<Vec<f64>> {
    vec![vec![2.0, 8.0, 1.0, 4.0], vec![4.0, 7.0, 2.0, 5.0], vec![3.0, 6.0, 0.0, 6.0]]
}

fn oracle(ui: &Ui, args: &OracleArgs) -> Result<u8> {
    let (pass, report) = match args.which.as_str() {
        "unbiasedness" => {
            let rep = analysis::unbiasedness_test(&worked_example_vectors(), args.s, args.trials.unwrap_or(100_000), args.seed)?;
            ui.say(format!("conditional mean {:?} vs {:?}: {}", rep.conditional.mean, rep.conditional.target, verdict(rep.conditional.pass)));
            ui.say(format!("naive mean {:?} vs {:?}: {}", rep.naive_scaled.mean, rep.naive_scaled.target, verdict(rep.naive_scaled.pass)));
            (rep.pass(), serde_json::to_value(&rep)?)
        }
        "srswor" => {
            if args.q == 0 || args.q > 20 {
                bail!("--q must lie in 1..=20");
            }
            let mut rng = rng::stream(args.seed, Purpose::Oracle, &[args.q as u64]);
            let x: Vec<i64> = (0..args.q).map(|_| rng.gen_range(-20..=20)).collect();
            let sizes: Vec<usize> = match args.r {
                Some(r) => vec![r],
                None => (1..=args.q).collect(),
            };
            let mut rows = Vec::new();
            let mut all = true;
            for r in sizes {
                let (var, second) = analysis::srswor_enumeration(&x, r)?;
                let ok = var == pme::srswor_variance_exact(&x, r)?
                    && second == pme::srswor_second_moment_exact(&x, r)?;
                let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
                let bound = pme::srswor_moments(&xf, r)?.bound_holds;
                all &= ok && bound;
                ui.say(format!("q={} r={r}: variance {var} exact {}, bound {}", args.q, verdict(ok), verdict(bound)));
                rows.push(serde_json::json!({"r": r, "variance": var.to_string(), "exact_match": ok, "bound_holds": bound}));
            }
            (all, serde_json::json!({"data": x, "sizes": rows}))
        }
        "gradcheck" => {
            let spec = match args.loss.as_str() {
                "linear" => LossSpec::linear(),
                "logistic" => LossSpec::logistic(DEFAULT_RIDGE),
                other => bail!("unknown loss {other:?} (expected linear or logistic)"),
            };
            let rep = analysis::gradcheck(&spec, args.trials.unwrap_or(100), args.seed)?;
            ui.say(format!("max relative error {:.3e} (< {:e}): {}", rep.max_rel_err, rep.tolerance, verdict(rep.pass)));
            (rep.pass, serde_json::to_value(&rep)?)
        }
        other => bail!("unknown oracle {other:?} (expected unbiasedness, srswor or gradcheck)"),
    };
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join(format!("oracle_{}.json", args.which)), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    ui.say(verdict(pass));
    Ok(if pass { 0 } else { 1 })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "fail"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let ui = Ui { quiet: cli.quiet };
    let result = match &cli.command {
        Command::Validate { cfg, out } => validate(&ui, cfg, out.as_deref()),
        Command::Run { cfg, out } => run(&ui, cfg, out),
        Command::Sweep { cfg, out, axis, values, seeds } => sweep(&ui, cfg, out, axis, values, seeds),
        Command::Oracle(args) => oracle(&ui, args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            match e.downcast_ref::<EngineError>() {
                Some(EngineError::NonFiniteValue { .. }) => eprintln!("error: run aborted: {e}"),
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::from(1)
        }
    }
}
