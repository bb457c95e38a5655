//! JSON and CSV writers. Every real number is printed with 17 significant
//! digits so the files round-trip exactly and repeat byte for byte.

use super::checks::Check;
use super::pipeline::{CutReport, FirstTraceRow, Prepared, TraceRun};
use crate::error::{Error, Result};
use crate::galerkin::GalerkinSummary;
use crate::model::SpectralModel;
use crate::traces::{second_trace_term, TraceLedger, WeylFit};
use serde_json::{json, Map, Number, Value};
use std::fmt::Write as _;
use std::path::Path;

pub fn num(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    let text = format!("{x:.16e}");
    Value::Number(text.parse::<Number>().expect("formatted float is a JSON number"))
}

pub fn opt_num(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

/// `{:.16e}` for CSV cells; empty for non-finite values.
fn cell(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        String::new()
    }
}

fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn model_json(model: &SpectralModel) -> Value {
    let terms: Vec<Value> = model
        .potential
        .terms()
        .iter()
        .map(|t| {
            let rows: Vec<Value> = (0..t.coeff.dim())
                .map(|i| Value::Array(t.coeff.row(i).iter().map(|&v| num(v)).collect()))
                .collect();
            json!({ "n": t.n, "matrix": rows })
        })
        .collect();
    let c = &model.constants;
    json!({
        "r": model.r,
        "a": num(model.a),
        "alpha": num(model.alpha),
        "T": model.t,
        "K": model.k_modes,
        "m": model.m,
        "dimension": model.dimension(),
        "potential": terms,
        "constants": {
            "beta": num(c.beta),
            "delta": num(c.delta),
            "m_star": c.m_star,
            "m_floor": c.m_floor,
            "d1_estimate": opt_num(c.d1_estimate),
            "d2_estimate": opt_num(c.d2_estimate),
        },
    })
}

pub fn summary_json(s: &GalerkinSummary) -> Value {
    json!({
        "dimension": s.dimension,
        "nnz": s.nnz,
        "fill_fraction": num(s.fill_fraction),
        "max_abs": num(s.max_abs),
        "frobenius": num(s.frobenius),
    })
}

fn cuts_json(prep: &Prepared) -> Value {
    let accepted: Vec<Value> = prep
        .cuts
        .iter()
        .map(|c| json!({ "n_p": c.n_p, "b_p": num(c.b), "gap_p": num(c.gap) }))
        .collect();
    let dropped: Vec<Value> = prep
        .dropped
        .iter()
        .map(|(c, why)| json!({ "n_p": c.n_p, "b_p": num(c.b), "reason": why }))
        .collect();
    json!({ "accepted": accepted, "dropped": dropped })
}

fn cut_json(c: &CutReport, prep: &Prepared) -> Value {
    let d_ps: Vec<Value> = c.d_ps.iter().map(|&v| num(v)).collect();
    json!({
        "p": c.p,
        "n_p": c.cut.n_p,
        "b_p": num(c.cut.b),
        "gap_p": num(c.cut.gap),
        "lhs1": num(c.lhs1),
        "error1": num(c.lhs1 - prep.rhs_first),
        "lhs2": num(c.lhs2),
        "error2": num(c.lhs2 - prep.rhs_second),
        "second_moment": num(c.second_moment),
        "second_moment_contour": num(c.second_moment_contour),
        "d_p1_contour": num(c.d_p1_contour),
        "d_p1_expansion": num(c.d_p1_expansion()),
        "d_ps": d_ps,
        "remainder": num(c.remainder.value),
        "remainder_window": c.remainder.window,
        "closure_residual": num(c.closure_residual()),
    })
}

pub fn checks_json(checks: &[Check]) -> Value {
    Value::Array(
        checks
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "measured": num(c.measured),
                    "tolerance": num(c.tolerance),
                    "pass": c.pass,
                    "detail": c.detail,
                })
            })
            .collect(),
    )
}

pub fn weyl_json(mu_fit: &Result<WeylFit>, lambda_fit: &Result<WeylFit>, beta: f64) -> Value {
    let one = |f: &Result<WeylFit>| match f {
        Ok(f) => json!({
            "slope": num(f.slope),
            "d1": num(f.d1),
            "rank_lo": f.lo,
            "rank_hi": f.hi,
        }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    json!({ "expected_slope": num(beta), "mu": one(mu_fit), "lambda": one(lambda_fit) })
}

pub fn report_json(
    run: &TraceRun,
    checks: &[Check],
    weyl: Value,
    summary: &GalerkinSummary,
) -> Value {
    let prep = &run.prepared;
    let mut root = Map::new();
    root.insert(
        "status".into(),
        Value::String(if super::checks::all_pass(checks) { "pass" } else { "fail" }.into()),
    );
    root.insert("model".into(), model_json(prep.model()));
    root.insert("rhs_first".into(), num(prep.rhs_first));
    root.insert("rhs_second".into(), num(prep.rhs_second));
    root.insert("galerkin".into(), summary_json(summary));
    root.insert("subsequence".into(), cuts_json(prep));
    root.insert(
        "cuts".into(),
        Value::Array(run.cuts.iter().map(|c| cut_json(c, prep)).collect()),
    );
    root.insert("weyl".into(), weyl);
    root.insert("checks".into(), checks_json(checks));
    Value::Object(root)
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    write_file(path, &text)
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))
}

fn cut_positions(prep: &Prepared) -> Vec<Option<usize>> {
    let mut at = vec![None; prep.last_index()];
    for (i, c) in prep.cuts.iter().enumerate() {
        at[c.n_p - 1] = Some(i);
    }
    at
}

/// One row per state q ≤ n_P; cut columns filled on the rows that end a cut.
pub fn trace1_csv(prep: &Prepared, ledger: &TraceLedger, rows: &[FirstTraceRow]) -> String {
    let mut out = String::from("q,k,j,mu,lambda,shift,diag_integral,term,partial_sum,cut_p,b_p,rhs_first,error\n");
    let at = cut_positions(prep);
    let mut partial = 0.0;
    for (q, e) in ledger.entries.iter().enumerate() {
        let term = e.shift - e.diag_integral;
        partial += term;
        let (p, b, err) = match at[q] {
            Some(i) => (
                (i + 1).to_string(),
                cell(rows[i].cut.b),
                cell(rows[i].error),
            ),
            None => Default::default(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{p},{b},{},{err}",
            q + 1,
            e.k,
            e.j,
            cell(e.mu),
            cell(e.lambda),
            cell(e.shift),
            cell(e.diag_integral),
            cell(term),
            cell(partial),
            cell(prep.rhs_first),
        );
    }
    out
}

pub fn trace2_csv(run: &TraceRun) -> String {
    let prep = &run.prepared;
    let ledger = &run.ledger;
    let mut out = String::from(
        "q,k,j,mu,lambda,shift,diag_integral,oscillatory,residue_correction,term,partial_sum,cut_p,b_p,remainder,rhs_second,error\n",
    );
    let at = cut_positions(prep);
    let m = ledger.m;
    let mut partial = 0.0;
    for (q, e) in ledger.entries.iter().enumerate() {
        let term = second_trace_term(e, m);
        let correction: f64 = (2..=m)
            .map(|s| {
                let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
                2.0 * sign / s as f64 * e.residues[s - 2]
            })
            .sum();
        partial += term;
        let (p, b, rem, err) = match at[q] {
            Some(i) => {
                let c = &run.cuts[i];
                (
                    (i + 1).to_string(),
                    cell(c.cut.b),
                    cell(c.remainder.value),
                    cell(c.lhs2 - prep.rhs_second),
                )
            }
            None => Default::default(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{p},{b},{rem},{},{err}",
            q + 1,
            e.k,
            e.j,
            cell(e.mu),
            cell(e.lambda),
            cell(e.shift),
            cell(e.diag_integral),
            cell(e.oscillatory),
            cell(correction),
            cell(term),
            cell(partial),
            cell(prep.rhs_second),
        );
    }
    out
}

pub fn checks_csv(checks: &[Check]) -> String {
    let mut out = String::from("name,measured,tolerance,pass,detail\n");
    for c in checks {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            c.name,
            cell(c.measured),
            cell(c.tolerance),
            c.pass,
            quoted(&c.detail)
        );
    }
    out
}

/// Rank-wise unperturbed and perturbed eigenvalues below the fit cap.
pub fn weyl_csv(mu: &[f64], lambda: &[f64]) -> String {
    let mut out = String::from("rank,mu,lambda\n");
    for i in 0..mu.len().max(lambda.len()) {
        let a = mu.get(i).map_or(String::new(), |&v| cell(v));
        let b = lambda.get(i).map_or(String::new(), |&v| cell(v));
        let _ = writeln!(out, "{},{a},{b}", i + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_carry_seventeen_digits() {
        let v = num(0.1);
        assert_eq!(v.to_string(), "1.0000000000000001e-1");
        assert_eq!(v.to_string().parse::<f64>().unwrap(), 0.1);
        assert_eq!(num(f64::NAN), Value::Null);
        let third = num(1.0 / 3.0).to_string().parse::<f64>().unwrap();
        assert_eq!(third, 1.0 / 3.0);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(quoted("a \"b\", c"), "\"a \"\"b\"\", c\"");
    }
}
