//! The named identity checks run by `checks` and `report`.

use super::pipeline::TraceRun;
use crate::error::Result;
use crate::fourier::{
    ibp_identity_check, oscillatory_limit_by_endpoints, oscillatory_sum, absolute_series, DiagonalProfile,
};
use crate::resolvent::{contour_d_ps_all, relative_deviation, residue_s2_closed_form, residues_by_quadrature};
use crate::traces::{
    first_trace_magnitude, fit_weyl_exponent, rhs_first_routes, second_trace_magnitude, rhs_second_routes, weyl_cap, weyl_perturbed, weyl_unperturbed,
};

/// Largest nodes × nonzeros product for which the series-form equivalence is
/// evaluated at a cut; the first cut is always evaluated.
pub const SERIES_FORM_BUDGET: f64 = 2e7;
/// Number of singleton poles sampled for the s = 2 closed-form check.
pub const RESIDUE_SAMPLES: usize = 50;
/// Highest k in the integration-by-parts check (exclusive).
pub const IBP_MODES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &'static str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            measured,
            tolerance,
            pass: measured <= tolerance,
            detail,
        }
    }

    fn failed(name: &'static str, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            measured: f64::NAN,
            tolerance,
            pass: false,
            detail,
        }
    }
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

pub fn run_checks(run: &TraceRun, nodes_mult: usize, safe_fraction: f64) -> Result<Vec<Check>> {
    let prep = &run.prepared;
    let model = prep.model();
    let system = &prep.system;
    let mut out = Vec::new();

    let threshold = 2.0 * model.r as f64 / (2.0 * model.r as f64 - 1.0);
    out.push(Check {
        name: "hypothesis",
        measured: model.alpha - threshold,
        tolerance: 0.0,
        pass: model.alpha > threshold,
        detail: format!("alpha = {} against 2r/(2r-1) = {threshold}", model.alpha),
    });

    let (a, b) = rhs_second_routes(model);
    out.push(Check::at_most(
        "rhs_second_routes",
        rel(a, b),
        1e-12,
        format!("endpoint {a:.16e}, cosine {b:.16e}"),
    ));
    let (a, b) = rhs_first_routes(model);
    out.push(Check::at_most(
        "rhs_first_routes",
        rel(a, b),
        1e-12,
        format!("endpoint {a:.16e}, cosine {b:.16e}"),
    ));

    let worst = run
        .cuts
        .iter()
        .map(|c| rel(c.second_moment_contour, c.second_moment))
        .fold(0.0, f64::max);
    out.push(Check::at_most(
        "second_moment_contour",
        worst,
        1e-8,
        format!("{} cuts", run.cuts.len()),
    ));

    // series-form equivalence and residue closure for s = 1..4 on cuts within budget.
    let nnz = system.qmat.nnz().max(1) as f64;
    let mut equiv = 0.0f64;
    let mut closure = 0.0f64;
    let mut used = 0;
    for (i, cut) in prep.cuts.iter().enumerate() {
        let contour = prep.contour(cut, nodes_mult)?;
        if i > 0 && contour.nodes as f64 * nnz > SERIES_FORM_BUDGET {
            break;
        }
        let s_max = 4.min(model.m.max(1));
        let pairs = contour_d_ps_all(system, &contour, 4)?;
        for (k, pair) in pairs.iter().enumerate() {
            let s = k + 1;
            equiv = equiv.max(pair.deviation());
            if s >= 2 && s <= s_max {
                let from_residues = run.ledger.d_ps(cut.n_p, s)?;
                // Both sides carry their own quadrature rounding.
                let scale = pair.scale + run.residues.d_ps_scale(&prep.clusters, cut.n_p, s);
                closure = closure.max(relative_deviation(pair.series, from_residues, scale));
            }
        }
        used += 1;
    }
    out.push(Check::at_most(
        "d_ps_form_equivalence",
        equiv,
        1e-8,
        format!("s = 1..4 on the first {used} cuts"),
    ));
    out.push(Check::at_most(
        "residue_theorem_closure",
        closure,
        1e-8,
        format!("s = 2..4 on the first {used} cuts"),
    ));

    // s = 2 closed form against quadrature on evenly spaced singleton poles.
    let last = prep.last_index();
    let singles: Vec<_> = prep
        .clusters
        .iter()
        .filter(|c| c.indices.len() == 1 && c.indices[0] < last)
        .collect();
    let step = singles.len().div_ceil(RESIDUE_SAMPLES).max(1);
    let mut worst = 0.0f64;
    let mut sampled = 0;
    for cluster in singles.iter().step_by(step) {
        let closed = residue_s2_closed_form(system, cluster.indices[0]);
        let quad = residues_by_quadrature(system, cluster, 2, nodes_mult)?[1];
        let denom = closed.abs().max(quad.abs());
        if denom > 0.0 {
            worst = worst.max((closed - quad).abs() / denom);
        }
        sampled += 1;
    }
    out.push(Check::at_most(
        "residue_closed_form_s2",
        worst,
        1e-9,
        format!("{sampled} singleton poles"),
    ));

    let worst = run
        .cuts
        .iter()
        .map(|c| rel(c.d_p1_contour, c.d_p1_expansion()))
        .fold(0.0, f64::max);
    out.push(Check::at_most(
        "d_p1_expansion",
        worst,
        1e-7,
        "contour quadrature against diagonal + oscillatory closed form".into(),
    ));

    let worst = run
        .cuts
        .iter()
        .map(|c| (c.closure_residual() / c.closure_scale()).abs())
        .fold(0.0, f64::max);
    out.push(Check::at_most(
        "expansion_closure",
        worst,
        1e-7,
        format!("m = {}, windowed remainder", model.m),
    ));

    let worst = run
        .cuts
        .iter()
        .map(|c| {
            let rebuilt = c.lhs2 + c.d_ps.iter().sum::<f64>() + c.d_p1_diagonal;
            rel(rebuilt, c.second_moment)
        })
        .fold(0.0, f64::max);
    out.push(Check::at_most(
        "bookkeeping",
        worst,
        1e-8,
        "second-trace partial sum plus corrections against the direct sum".into(),
    ));

    let last_n = prep.last_index();
    let eps_n = last_n as f64 * f64::EPSILON;
    out.push(convergence(
        "first_trace_convergence",
        run.cuts.iter().map(|c| c.lhs1).collect(),
        prep.rhs_first,
        eps_n * first_trace_magnitude(&run.ledger, last_n)?,
    ));
    out.push(convergence(
        "second_trace_convergence",
        run.cuts.iter().map(|c| c.lhs2).collect(),
        prep.rhs_second,
        eps_n * second_trace_magnitude(&run.ledger, last_n, model.m)?,
    ));

    let first = run.cuts.first().map_or(0.0, |c| c.remainder.value.abs());
    let last_rem = run.cuts.last().map_or(0.0, |c| c.remainder.value.abs());
    let ratio = if last_rem == 0.0 { 0.0 } else { last_rem / first };
    out.push(Check::at_most(
        "remainder_decay",
        ratio,
        0.1,
        format!("|D^(m)| {first:.3e} at the first cut, {last_rem:.3e} at the last"),
    ));

    let mut worst = 0.0f64;
    for j in 1..=model.t {
        let profile = DiagonalProfile::new(model, j);
        for k in 0..IBP_MODES {
            let c = ibp_identity_check(&profile, k, model.r);
            let scale = 1.0 + c.lhs.abs();
            worst = worst
                .max((c.lhs - c.rhs).abs() / scale)
                .max((c.lhs - c.rhs_closed).abs() / scale);
        }
    }
    out.push(Check::at_most(
        "ibp_identity",
        worst,
        1e-10,
        format!("j <= {}, k < {IBP_MODES}", model.t),
    ));

    let top_odd = (1..=model.potential.max_frequency())
        .rev()
        .find(|&n| n % 2 == 1 && (1..=model.t).any(|j| model.potential.diag(n, j) != 0.0));
    let expected = top_odd.map_or(0, |n| (n as usize + 1) / 2);
    out.push(match absolute_series(model, model.k_modes) {
        Ok(series) => Check {
            name: "absolute_series_bound",
            measured: series.total(),
            tolerance: series.bound,
            pass: series.stabilization_index == expected,
            detail: format!(
                "nondecreasing and bounded; stabilizes at {} (expected {expected})",
                series.stabilization_index
            ),
        },
        Err(e) => Check::failed("absolute_series_bound", f64::NAN, e.to_string()),
    });

    let direct = oscillatory_sum(model);
    out.push(Check::at_most(
        "endpoint_evaluation",
        rel(direct, prep.rhs_second),
        1e-12,
        format!("oscillatory limit {direct:.16e}"),
    ));
    let endpoints = oscillatory_limit_by_endpoints(model);
    out.push(Check::at_most(
        "endpoint_weights",
        rel(endpoints, direct),
        1e-10,
        format!("weighted endpoint series {endpoints:.16e}"),
    ));

    let beta = model.constants.beta;
    let cap = weyl_cap(model, safe_fraction);
    for (name, values) in [
        ("weyl_exponent_mu", weyl_unperturbed(model, cap)),
        ("weyl_exponent_lambda", weyl_perturbed(model, &prep.lambda, cap)),
    ] {
        out.push(match fit_weyl_exponent(&values) {
            Ok(fit) => Check::at_most(
                name,
                (fit.slope - beta).abs() / beta,
                0.05,
                format!("slope {:.6} against {beta:.6} over ranks {}..{}", fit.slope, fit.lo, fit.hi),
            ),
            Err(e) => Check::failed(name, 0.05, e.to_string()),
        });
    }
    Ok(out)
}

/// Error at the last cut within 1% and below the error at the first cut,
/// unless it is already within `rounding`, the summation error bound of the
/// last partial sum.
fn convergence(name: &'static str, lhs: Vec<f64>, rhs: f64, rounding: f64) -> Check {
    let scale = 1.0 + rhs.abs();
    let (Some(&first), Some(&last)) = (lhs.first(), lhs.last()) else {
        return Check::failed(name, 0.01, "no cuts".into());
    };
    let (e_first, e_last) = ((first - rhs).abs(), (last - rhs).abs());
    let measured = e_last / scale;
    let decreasing = e_last < e_first || e_last <= rounding;
    Check {
        name,
        measured,
        tolerance: 0.01,
        pass: measured <= 0.01 && decreasing,
        detail: format!(
            "error {e_first:.3e} at the first cut, {e_last:.3e} at the last (rounding bound {rounding:.3e})"
        ),
    }
}
