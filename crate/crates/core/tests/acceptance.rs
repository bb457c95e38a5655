//! Acceptance gate: one test per criterion, each printing a single
//! `criterion N ... PASS|FAIL` line to stderr.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regtrace::cli::checks::SERIES_FORM_BUDGET;
use regtrace::cli::pipeline::{prepare, run_second_trace, PipelineConfig, TraceRun};
use regtrace::cli::scenario::{load_scenario, Scenario};
use regtrace::fourier::{ibp_identity_check, oscillatory_sum_limit, absolute_series, DiagonalProfile};
use regtrace::model::{validate_scenario, RawScenario, SpectralModel};
use regtrace::resolvent::{contour_d_ps_all, residue_s2_closed_form, residues_by_quadrature};
use regtrace::traces::{
    fit_weyl_exponent, rhs_second_routes, weyl_cap, weyl_perturbed, weyl_unperturbed, SubsequenceParams,
};
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

const RUNTIME_LIMIT: Duration = Duration::from_secs(120);

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.scn"))
}

fn load(name: &str) -> (Scenario, SpectralModel, PipelineConfig) {
    let scenario = load_scenario(&scenario_path(name)).unwrap();
    let model = validate_scenario(&scenario.raw).unwrap();
    let config = PipelineConfig {
        nodes_mult: scenario.run.nodes_mult,
        selection: SubsequenceParams {
            gap_floor_rel: scenario.run.gap_floor,
            safe_fraction: scenario.run.safe_fraction,
            measure: scenario.run.gap_measure,
            ..SubsequenceParams::default()
        },
    };
    (scenario, model, config)
}

struct Reference {
    scenario: Scenario,
    run: TraceRun,
    elapsed: Duration,
}

fn reference() -> &'static Reference {
    static CELL: OnceLock<Reference> = OnceLock::new();
    CELL.get_or_init(|| {
        let (scenario, model, config) = load("reference");
        let start = Instant::now();
        let run = run_second_trace(model, &config).unwrap();
        Reference {
            scenario,
            run,
            elapsed: start.elapsed(),
        }
    })
}

fn report(n: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {name:<32} {verdict}  {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn c01_contour_second_moment() {
    let r = reference();
    let worst = r
        .run
        .cuts
        .iter()
        .map(|c| (c.second_moment_contour - c.second_moment).abs() / (1.0 + c.second_moment.abs()))
        .fold(0.0, f64::max);
    let fast = r.elapsed <= RUNTIME_LIMIT;
    report(
        1,
        "contour second moment",
        worst <= 1e-8 && fast && !r.run.cuts.is_empty(),
        format!("worst {worst:.3e} over {} cuts; run {:.1?}", r.run.cuts.len(), r.elapsed),
    );
}

#[test]
fn c02_d_ps_form_equivalence() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for name in ["reference", "degenerate", "fourth_order"] {
        let (_, model, config) = load(name);
        let prep = prepare(model, &config).unwrap();
        let nnz = prep.system.qmat.nnz().max(1) as f64;
        let mut used = 0;
        for (i, cut) in prep.cuts.iter().enumerate() {
            let contour = prep.contour(cut, config.nodes_mult).unwrap();
            if i > 0 && contour.nodes as f64 * nnz > SERIES_FORM_BUDGET {
                break;
            }
            for pair in contour_d_ps_all(&prep.system, &contour, 4).unwrap() {
                worst = worst.max(pair.deviation());
            }
            used += 1;
        }
        details.push(format!("{name}: {used} cuts"));
    }
    let elapsed = start.elapsed();
    report(
        2,
        "D_ps form equivalence s=1..4",
        worst <= 1e-8 && elapsed <= RUNTIME_LIMIT,
        format!("worst {worst:.3e} ({}); {elapsed:.1?}", details.join(", ")),
    );
}

#[test]
fn c03_residue_closed_form() {
    let r = reference();
    let prep = &r.run.prepared;
    let last = prep.last_index();
    let mut singles: Vec<_> = prep
        .clusters
        .iter()
        .filter(|c| c.indices.len() == 1 && c.indices[0] < last)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    singles.shuffle(&mut rng);
    let sample = &singles[..50.min(singles.len())];
    let mut worst = 0.0f64;
    for cluster in sample {
        let closed = residue_s2_closed_form(&prep.system, cluster.indices[0]);
        let quad = residues_by_quadrature(&prep.system, cluster, 2, r.scenario.run.nodes_mult).unwrap()[1];
        worst = worst.max((closed - quad).abs() / closed.abs().max(quad.abs()));
    }
    report(
        3,
        "s=2 residue closed form",
        sample.len() == 50 && worst <= 1e-9,
        format!("worst {worst:.3e} over {} poles", sample.len()),
    );
}

#[test]
fn c04_expansion_closure() {
    let r = reference();
    let worst = r
        .run
        .cuts
        .iter()
        .map(|c| (c.closure_residual() / c.closure_scale()).abs())
        .fold(0.0, f64::max);
    report(
        4,
        "expansion closure",
        worst <= 1e-7,
        format!("worst {worst:.3e} over {} cuts, m = {}", r.run.cuts.len(), r.run.ledger.m),
    );
}

#[test]
fn c05_second_trace_convergence() {
    let r = reference();
    let model = r.run.prepared.model();
    let rhs = r.run.prepared.rhs_second;
    let (a, b) = rhs_second_routes(model);
    let routes = (a - b).abs() / (1.0 + a.abs().max(b.abs()));
    let first = (r.run.cuts.first().unwrap().lhs2 - rhs).abs();
    let last = (r.run.cuts.last().unwrap().lhs2 - rhs).abs();
    report(
        5,
        "second trace convergence",
        model.m == model.constants.m_star && routes <= 1e-12 && last <= 0.01 * (1.0 + rhs.abs()) && last < first,
        format!("m = {}, error {first:.3e} -> {last:.3e}, routes {routes:.1e}", model.m),
    );
}

#[test]
fn c06_first_trace_convergence() {
    let r = reference();
    let rhs = r.run.prepared.rhs_first;
    let first = (r.run.cuts.first().unwrap().lhs1 - rhs).abs();
    let last = (r.run.cuts.last().unwrap().lhs1 - rhs).abs();
    report(
        6,
        "first trace convergence",
        last <= 0.01 * (1.0 + rhs.abs()) && last < first,
        format!("error {first:.3e} -> {last:.3e}"),
    );
}

#[test]
fn c07_remainder_decay() {
    let r = reference();
    let first = r.run.cuts.first().unwrap().remainder.value.abs();
    let last = r.run.cuts.last().unwrap().remainder.value.abs();
    report(
        7,
        "remainder decay",
        last <= 0.1 * first,
        format!("|D| {first:.3e} -> {last:.3e}"),
    );
}

#[test]
fn c08_integration_by_parts() {
    let mut worst = 0.0f64;
    for name in ["reference", "fourth_order", "degenerate"] {
        let (_, model, _) = load(name);
        for j in 1..=model.t {
            let profile = DiagonalProfile::new(&model, j);
            for k in 0..64 {
                let c = ibp_identity_check(&profile, k, model.r);
                worst = worst.max((c.lhs - c.rhs).abs() / (1.0 + c.lhs.abs()));
            }
        }
    }
    report(8, "integration by parts", worst <= 1e-10, format!("worst {worst:.3e}"));
}

#[test]
fn c09_absolute_series_bound() {
    let mut pass = true;
    let mut details = Vec::new();
    // Both scenarios have an odd highest frequency.
    for name in ["reference", "fourth_order"] {
        let (_, model, _) = load(name);
        let series = absolute_series(&model, model.k_modes).unwrap();
        let monotone = series.partial_sums.windows(2).all(|w| w[1] >= w[0]);
        let bounded = series.total() <= series.bound;
        let n_max = model.potential.max_frequency() as usize;
        let expected = (n_max + 1) / 2;
        pass &= n_max % 2 == 1 && monotone && bounded && series.stabilization_index == expected;
        details.push(format!(
            "{name}: {:.4e} <= {:.4e}, stabilizes at {} (n_max {n_max})",
            series.total(),
            series.bound,
            series.stabilization_index
        ));
    }
    report(9, "absolute series bound", pass, details.join("; "));
}

fn random_scenario(rng: &mut ChaCha8Rng) -> RawScenario {
    let r: u32 = rng.gen_range(1..=2);
    let threshold = 2.0 * r as f64 / (2.0 * r as f64 - 1.0);
    let alpha = threshold + rng.gen_range(0.2..3.0);
    let t = rng.gen_range(1..=3);
    let mut terms = Vec::new();
    for n in 0..=rng.gen_range(1..=7u32) {
        if n > 0 && rng.gen_bool(0.3) {
            continue;
        }
        let mut c = vec![vec![0.0; t]; t];
        for i in 0..t {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                c[i][j] = v;
                c[j][i] = v;
            }
        }
        terms.push((n, c));
    }
    RawScenario {
        r,
        a: rng.gen_range(0.5..2.0),
        alpha,
        t,
        k_modes: 16,
        terms,
        m_override: None,
    }
}

#[test]
fn c10_endpoint_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let model = validate_scenario(&random_scenario(&mut rng)).unwrap();
        let rhs = regtrace::traces::rhs_second(&model).unwrap();
        let limit = oscillatory_sum_limit(&model).unwrap();
        worst = worst.max((limit - rhs).abs() / (1.0 + rhs.abs()));
    }
    report(10, "endpoint evaluation", worst <= 1e-12, format!("worst {worst:.3e} over 10 scenarios"));
}

#[test]
fn c11_weyl_exponent() {
    let mut pass = true;
    let mut details = Vec::new();
    for name in ["reference", "fourth_order"] {
        let (scenario, model, config) = load(name);
        let beta = model.constants.beta;
        let lambda = if name == "reference" {
            reference().run.prepared.lambda.clone()
        } else {
            prepare(model.clone(), &config).unwrap().lambda
        };
        let cap = weyl_cap(&model, scenario.run.safe_fraction);
        for (which, values) in [
            ("mu", weyl_unperturbed(&model, cap)),
            ("lambda", weyl_perturbed(&model, &lambda, cap)),
        ] {
            let fit = fit_weyl_exponent(&values).unwrap();
            let dev = (fit.slope - beta).abs() / beta;
            pass &= dev <= 0.05;
            details.push(format!("(r={}, alpha={}) {which} {:.4} vs {beta:.4}", model.r, model.alpha, fit.slope));
        }
    }
    report(11, "weyl exponent", pass, details.join("; "));
}

#[test]
fn c12_hypothesis_gate() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_regtrace"))
        .args(["validate", "--scenario"])
        .arg(scenario_path("alpha2"))
        .output()
        .unwrap();
    let code = out.status.code();
    report(
        12,
        "hypothesis gate",
        code == Some(1),
        format!("exit {code:?}: {}", String::from_utf8_lossy(&out.stderr).trim()),
    );
}
