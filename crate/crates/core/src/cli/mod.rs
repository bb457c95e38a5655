//! Scenario-driven command line: `regtrace <command> --scenario <path>`.

pub mod checks;
pub mod pipeline;
pub mod report;
pub mod scenario;

use crate::error::{Error, Result};
use crate::model::{validate_scenario, SpectralModel};
use crate::traces::{fit_weyl_exponent, weyl_cap, weyl_perturbed, weyl_unperturbed, SubsequenceParams};
use clap::{Parser, ValueEnum};
use pipeline::{build_ledger, first_trace_rows, prepare, run_second_trace, PipelineConfig, Prepared};
use scenario::{load_scenario, Scenario};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Validate the scenario and print the model.
    Validate,
    /// Print the Galerkin system summary.
    Assemble,
    /// First-trace ledger.
    Trace1,
    /// Second-trace ledger with residues and remainders.
    Trace2,
    /// Run every identity check; exit 3 if one fails.
    Checks,
    /// Weyl-exponent fits.
    Asymptotics,
    /// Everything, with report.json.
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "regtrace", version, about = "Regularized trace verification")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory (default: the scenario's `output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of residue terms m (default: the scenario's, else m_star).
    #[arg(long)]
    pub m: Option<usize>,
    /// Quadrature node multiplier (default: the scenario's).
    #[arg(long = "nodes-mult")]
    pub nodes_mult: Option<usize>,
}

/// Exit status: 0 success, 1 input error, 2 numerical failure, 3 failed check.
pub const EXIT_CHECKS_FAILED: i32 = 3;

struct Context {
    scenario: Scenario,
    model: SpectralModel,
    config: PipelineConfig,
    out_dir: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let mut scenario = load_scenario(&cli.scenario)?;
        if let Some(m) = cli.m {
            scenario.raw.m_override = Some(m);
        }
        if let Some(mult) = cli.nodes_mult {
            crate::resolvent::check_multiplier(mult).map_err(|e| Error::Scenario(e.to_string()))?;
            scenario.run.nodes_mult = mult;
        }
        let model = validate_scenario(&scenario.raw)?;
        let config = PipelineConfig {
            nodes_mult: scenario.run.nodes_mult,
            selection: SubsequenceParams {
                gap_floor_rel: scenario.run.gap_floor,
                safe_fraction: scenario.run.safe_fraction,
                measure: scenario.run.gap_measure,
                ..SubsequenceParams::default()
            },
        };
        let out_dir = cli.out.clone().unwrap_or_else(|| scenario.run.output.clone());
        Ok(Self {
            scenario,
            model,
            config,
            out_dir,
        })
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Error::Io(format!("cannot create {}: {e}", self.out_dir.display())))?;
        Ok(self.out_dir.join(name))
    }
}

/// Run one command; returns the process exit status. Messages go to stdout,
/// errors are returned to the caller.
pub fn run(cli: &Cli) -> Result<i32> {
    let ctx = Context::new(cli)?;
    match cli.command {
        Command::Validate => {
            println!("{}", pretty(&report::model_json(&ctx.model))?);
            Ok(0)
        }
        Command::Assemble => {
            let system = crate::galerkin::assemble_q_matrix(&ctx.model);
            println!("{}", pretty(&report::summary_json(&system.summary()))?);
            Ok(0)
        }
        Command::Trace1 => {
            let prep = prepare(ctx.model.clone(), &ctx.config)?;
            let ledger = build_ledger(&prep, &[], 1)?;
            let rows = first_trace_rows(&prep, &ledger)?;
            let path = ctx.out("ledger_trace1.csv")?;
            report::write_file(&path, &report::trace1_csv(&prep, &ledger, &rows))?;
            println!("rhs_first = {:.16e}", prep.rhs_first);
            for r in &rows {
                println!("p = {:>3}  n_p = {:>6}  lhs1 = {:+.16e}  error = {:+.3e}", r.p, r.cut.n_p, r.lhs1, r.error);
            }
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Trace2 => {
            let run = run_second_trace(ctx.model.clone(), &ctx.config)?;
            let path = ctx.out("ledger_trace2.csv")?;
            report::write_file(&path, &report::trace2_csv(&run))?;
            println!("rhs_second = {:.16e}  (m = {})", run.prepared.rhs_second, run.ledger.m);
            for c in &run.cuts {
                println!(
                    "p = {:>3}  n_p = {:>6}  lhs2 = {:+.16e}  error = {:+.3e}  remainder = {:+.3e}",
                    c.p,
                    c.cut.n_p,
                    c.lhs2,
                    c.lhs2 - run.prepared.rhs_second,
                    c.remainder.value
                );
            }
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Checks => {
            let run = run_second_trace(ctx.model.clone(), &ctx.config)?;
            let checks = checks::run_checks(&run, ctx.config.nodes_mult, ctx.scenario.run.safe_fraction)?;
            let path = ctx.out("checks.csv")?;
            report::write_file(&path, &report::checks_csv(&checks))?;
            print_checks(&checks);
            Ok(status(&checks))
        }
        Command::Asymptotics => {
            let prep = prepare(ctx.model.clone(), &ctx.config)?;
            let (weyl, csv) = weyl_outputs(&prep, ctx.scenario.run.safe_fraction);
            report::write_file(&ctx.out("weyl.csv")?, &csv)?;
            println!("{}", pretty(&weyl)?);
            Ok(0)
        }
        Command::Report => {
            let run = run_second_trace(ctx.model.clone(), &ctx.config)?;
            let checks = checks::run_checks(&run, ctx.config.nodes_mult, ctx.scenario.run.safe_fraction)?;
            let prep = &run.prepared;
            let trace1_ledger = build_ledger(prep, &[], 1)?;
            let rows = first_trace_rows(prep, &trace1_ledger)?;
            let (weyl, weyl_csv) = weyl_outputs(prep, ctx.scenario.run.safe_fraction);
            let json = report::report_json(&run, &checks, weyl, &prep.system.summary());
            report::write_json(&ctx.out("report.json")?, &json)?;
            report::write_file(&ctx.out("ledger_trace1.csv")?, &report::trace1_csv(prep, &trace1_ledger, &rows))?;
            report::write_file(&ctx.out("ledger_trace2.csv")?, &report::trace2_csv(&run))?;
            report::write_file(&ctx.out("checks.csv")?, &report::checks_csv(&checks))?;
            report::write_file(&ctx.out("weyl.csv")?, &weyl_csv)?;
            print_checks(&checks);
            println!("wrote {}", ctx.out_dir.display());
            Ok(status(&checks))
        }
    }
}

fn weyl_outputs(prep: &Prepared, safe_fraction: f64) -> (serde_json::Value, String) {
    let model = prep.model();
    let cap = weyl_cap(model, safe_fraction);
    let mu = weyl_unperturbed(model, cap);
    let lambda = weyl_perturbed(model, &prep.lambda, cap);
    let json = report::weyl_json(
        &fit_weyl_exponent(&mu),
        &fit_weyl_exponent(&lambda),
        model.constants.beta,
    );
    (json, report::weyl_csv(&mu, &lambda))
}

fn pretty(v: &serde_json::Value) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))
}

fn print_checks(checks: &[checks::Check]) {
    for c in checks {
        println!(
            "{:<26} {}  measured {:.3e}  tolerance {:.1e}  {}",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.measured,
            c.tolerance,
            c.detail
        );
    }
}

fn status(checks: &[checks::Check]) -> i32 {
    if checks::all_pass(checks) {
        0
    } else {
        EXIT_CHECKS_FAILED
    }
}

/// Apply `REGTRACE_THREADS` to the global worker pool. Results do not depend
/// on the worker count.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("REGTRACE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Scenario(format!("REGTRACE_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Scenario(format!("cannot size the worker pool: {e}")))
}
