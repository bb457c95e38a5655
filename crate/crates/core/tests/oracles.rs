//! End-to-end runs on single-term potentials whose limits are known in
//! closed form.

use regtrace::cli::pipeline::{run_second_trace, PipelineConfig};
use regtrace::fourier::absolute_series;
use regtrace::model::{validate_scenario, RawScenario};
use regtrace::traces::SubsequenceParams;
use std::f64::consts::PI;

fn single_term(n: u32, k_modes: usize) -> RawScenario {
    RawScenario {
        r: 1,
        a: 1.0,
        alpha: 3.0,
        t: 1,
        k_modes,
        terms: vec![(n, vec![vec![1.0]])],
        m_override: None,
    }
}

fn config() -> PipelineConfig {
    PipelineConfig {
        nodes_mult: 128,
        selection: SubsequenceParams::default(),
    }
}

#[test]
fn first_harmonic_limits() {
    let model = validate_scenario(&single_term(1, 256)).unwrap();
    let run = run_second_trace(model, &config()).unwrap();
    let prep = &run.prepared;
    assert_eq!(prep.rhs_first, 0.5);
    assert_eq!(prep.rhs_second, 1.25);

    let first = run.cuts.first().unwrap();
    let last = run.cuts.last().unwrap();
    assert!((last.lhs1 - 0.5).abs() < (first.lhs1 - 0.5).abs());
    assert!((last.lhs1 - 0.5).abs() <= 0.01 * 1.5, "lhs1 {}", last.lhs1);
    assert!((last.lhs2 - 1.25).abs() < (first.lhs2 - 1.25).abs());
    assert!((last.lhs2 - 1.25).abs() <= 0.01 * 2.25, "lhs2 {}", last.lhs2);
}

#[test]
fn even_harmonic_limits_vanish() {
    let model = validate_scenario(&single_term(2, 128)).unwrap();
    let run = run_second_trace(model, &config()).unwrap();
    assert_eq!(run.prepared.rhs_first, 0.0);
    assert_eq!(run.prepared.rhs_second, 0.0);
    let last = run.cuts.last().unwrap();
    assert!(last.lhs1.abs() <= 0.01, "lhs1 {}", last.lhs1);
    assert!(last.lhs2.abs() <= 0.01, "lhs2 {}", last.lhs2);
}

#[test]
fn absolute_series_of_first_harmonic() {
    let model = validate_scenario(&single_term(1, 16)).unwrap();
    let series = absolute_series(&model, 16).unwrap();
    assert_eq!(series.stabilization_index, 1);
    assert!((series.total() - 5.0 * PI / 8.0).abs() < 1e-13);
    assert!(series.total() <= series.bound);
}
