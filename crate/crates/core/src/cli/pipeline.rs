//! The verification pipeline: spectrum, cuts, residues, ledger and the
//! per-cut contour quantities.

use crate::eigen::eigvalsh;
use crate::error::{Error, Result};
use crate::galerkin::{assemble_q_matrix, GalerkinSystem};
use crate::model::SpectralModel;
use crate::shift::refine_shifts;
use crate::resolvent::{
    check_contour, cluster_poles, contour_d_p1, contour_second_moment_shifted, default_cluster_tol,
    remainder_windowed, residue_s2_closed_form, residues_with_scales, ContourSpec, PoleCluster,
    WindowedRemainder,
};
use crate::traces::{
    first_trace_partial, rhs_first, rhs_second, second_trace_partial, select_subsequence, Cut,
    SubsequenceParams, TraceLedger,
};
use rayon::prelude::*;

/// Graph radius the remainder window starts from.
pub const WINDOW_START_HOPS: usize = 4;
/// Relative change at which the remainder window stops growing.
pub const WINDOW_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub nodes_mult: usize,
    pub selection: SubsequenceParams,
}

/// Spectrum and admissible cuts of a model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub system: GalerkinSystem,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    /// λ_q − μ_q for ranks below the last cut.
    pub shifts: Vec<f64>,
    pub clusters: Vec<PoleCluster>,
    pub cuts: Vec<Cut>,
    /// Cuts proposed by the selection but rejected by the contour checks.
    pub dropped: Vec<(Cut, String)>,
    pub rhs_first: f64,
    pub rhs_second: f64,
}

impl Prepared {
    pub fn model(&self) -> &SpectralModel {
        &self.system.model
    }

    pub fn last_index(&self) -> usize {
        self.cuts.last().map_or(0, |c| c.n_p)
    }

    /// λ_q − μ_q for every rank: refined below the last cut, from the dense
    /// spectrum above it.
    pub fn all_shifts(&self) -> Vec<f64> {
        let mut out = self.shifts.clone();
        out.extend((out.len()..self.mu.len()).map(|q| self.lambda[q] - self.mu[q]));
        out
    }

    pub fn contour(&self, cut: &Cut, mult: usize) -> Result<ContourSpec> {
        ContourSpec::for_cut(cut.b, cut.gap, mult)
    }
}

pub fn prepare(model: SpectralModel, config: &PipelineConfig) -> Result<Prepared> {
    let rhs_first = rhs_first(&model)?;
    let rhs_second = rhs_second(&model)?;
    let system = assemble_q_matrix(&model);
    let mu = system.mu();
    let lambda = eigvalsh(&system.full_matrix())?;
    let tol = config.selection.cluster_tol.unwrap_or_else(|| default_cluster_tol(&mu));
    let clusters = cluster_poles(&mu, tol);
    let proposed = select_subsequence(&mu, &config.selection)?;

    let mut cuts = Vec::new();
    let mut dropped = Vec::new();
    for cut in proposed.cuts {
        let checked = ContourSpec::for_cut(cut.b, cut.gap, config.nodes_mult)
            .and_then(|c| check_contour(&c, &mu, Some(&lambda)));
        match checked {
            Ok(n) if n == cut.n_p => cuts.push(cut),
            Ok(n) => dropped.push((cut, format!("contour encloses {n} states"))),
            Err(e) => dropped.push((cut, e.to_string())),
        }
    }
    if cuts.is_empty() {
        return Err(Error::ContourSelection(
            "no proposed cut separates the perturbed spectrum".into(),
        ));
    }
    let last = cuts.last().map_or(0, |c| c.n_p);
    let shifts = refine_shifts(&system, &clusters, &lambda, last)?;
    Ok(Prepared {
        system,
        mu,
        lambda,
        shifts,
        clusters,
        cuts,
        dropped,
        rhs_first,
        rhs_second,
    })
}

/// Per-cluster residues for s = 1..=m (index s−1) and the quadrature
/// magnitudes that bound their rounding.
#[derive(Debug, Clone, Default)]
pub struct ClusterResidues {
    pub values: Vec<Vec<f64>>,
    pub scales: Vec<Vec<f64>>,
}

impl ClusterResidues {
    /// Σ (2/s)·scale over the clusters inside the first n_p states.
    pub fn d_ps_scale(&self, clusters: &[PoleCluster], n_p: usize, s: usize) -> f64 {
        clusters
            .iter()
            .zip(&self.scales)
            .filter(|(c, _)| c.indices.iter().all(|&q| q < n_p))
            .map(|(_, sc)| sc.get(s - 1).copied().unwrap_or(0.0))
            .sum::<f64>()
            * 2.0
            / s as f64
    }
}

/// Residues of every cluster below the last cut; clusters beyond it get
/// empty lists. Singleton s = 2 values use the closed form.
pub fn cluster_residues(prep: &Prepared, m: usize, mult: usize) -> Result<ClusterResidues> {
    let last = prep.last_index();
    let system = &prep.system;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = prep
        .clusters
        .par_iter()
        .map(|cluster| {
            if cluster.indices.iter().all(|&q| q >= last) || m < 2 {
                return Ok((Vec::new(), Vec::new()));
            }
            let (mut res, scales) = residues_with_scales(system, cluster, m, mult)?;
            if cluster.indices.len() == 1 {
                res[1] = residue_s2_closed_form(system, cluster.indices[0]);
            }
            Ok((res, scales))
        })
        .collect::<Result<_>>()?;
    let (values, scales) = pairs.into_iter().unzip();
    Ok(ClusterResidues { values, scales })
}

/// Ledger with residues through m (m = 1 needs none).
pub fn build_ledger(prep: &Prepared, residues: &[Vec<f64>], m: usize) -> Result<TraceLedger> {
    TraceLedger::build(
        &prep.system,
        &prep.lambda,
        &prep.shifts,
        prep.last_index(),
        &prep.clusters,
        residues,
        m,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstTraceRow {
    pub p: usize,
    pub cut: Cut,
    pub lhs1: f64,
    pub error: f64,
}

pub fn first_trace_rows(prep: &Prepared, ledger: &TraceLedger) -> Result<Vec<FirstTraceRow>> {
    prep.cuts
        .iter()
        .enumerate()
        .map(|(i, cut)| {
            let lhs1 = first_trace_partial(ledger, cut.n_p)?;
            Ok(FirstTraceRow {
                p: i + 1,
                cut: *cut,
                lhs1,
                error: lhs1 - prep.rhs_first,
            })
        })
        .collect()
}

/// Everything measured at one cut of the second-trace run.
#[derive(Debug, Clone, PartialEq)]
pub struct CutReport {
    pub p: usize,
    pub cut: Cut,
    pub lhs1: f64,
    pub lhs2: f64,
    /// Σ_{q≤n_p}(λ_q² − μ_q²) summed directly.
    pub second_moment: f64,
    pub second_moment_contour: f64,
    /// D_p1 by contour quadrature (series form).
    pub d_p1_contour: f64,
    /// D_p1 = diagonal + oscillatory from the closed-form expansion.
    pub d_p1_diagonal: f64,
    pub d_p1_oscillatory: f64,
    /// D_ps for s = 2..=m from the residues (index s−2).
    pub d_ps: Vec<f64>,
    pub remainder: WindowedRemainder,
}

impl CutReport {
    pub fn d_p1_expansion(&self) -> f64 {
        self.d_p1_diagonal + self.d_p1_oscillatory
    }

    /// Σ(λ²−μ²) − Σ_{s=1}^m D_ps − D^(m).
    pub fn closure_residual(&self) -> f64 {
        self.second_moment
            - self.d_p1_contour
            - self.d_ps.iter().sum::<f64>()
            - self.remainder.value
    }

    /// Magnitude against which the closure residual is judged.
    pub fn closure_scale(&self) -> f64 {
        let terms = self.d_p1_contour.abs()
            + self.d_ps.iter().map(|v| v.abs()).sum::<f64>()
            + self.remainder.value.abs();
        1.0 + self.second_moment.abs().max(terms)
    }
}

pub fn cut_reports(prep: &Prepared, ledger: &TraceLedger, m: usize, mult: usize) -> Result<Vec<CutReport>> {
    let system = &prep.system;
    prep.cuts
        .par_iter()
        .enumerate()
        .map(|(i, cut)| {
            let contour = prep.contour(cut, mult)?;
            let n = cut.n_p;
            let (d_p1_diagonal, d_p1_oscillatory) = ledger.d_p1_expansion(n)?;
            let d_ps = (2..=m).map(|s| ledger.d_ps(n, s)).collect::<Result<Vec<_>>>()?;
            let remainder = if m >= 2 {
                remainder_windowed(
                    system,
                    &prep.lambda,
                    n,
                    cut.b,
                    cut.gap,
                    m,
                    WINDOW_START_HOPS,
                    WINDOW_TOL,
                )?
            } else {
                return Err(Error::Quadrature("the second-trace run needs m >= 2".into()));
            };
            Ok(CutReport {
                p: i + 1,
                cut: *cut,
                lhs1: first_trace_partial(ledger, n)?,
                lhs2: second_trace_partial(ledger, n, m)?,
                second_moment: ledger.second_moment(n)?,
                second_moment_contour: contour_second_moment_shifted(system, &prep.all_shifts(), &contour)?,
                d_p1_contour: contour_d_p1(system, &contour)?,
                d_p1_diagonal,
                d_p1_oscillatory,
                d_ps,
                remainder,
            })
        })
        .collect()
}

/// The complete second-trace run.
#[derive(Debug, Clone)]
pub struct TraceRun {
    pub prepared: Prepared,
    pub residues: ClusterResidues,
    pub ledger: TraceLedger,
    pub cuts: Vec<CutReport>,
}

pub fn run_second_trace(model: SpectralModel, config: &PipelineConfig) -> Result<TraceRun> {
    let m = model.m;
    if m < 2 {
        return Err(Error::Scenario("m must be at least 2 for the second trace".into()));
    }
    let prepared = prepare(model, config)?;
    let residues = cluster_residues(&prepared, m, config.nodes_mult)?;
    let ledger = build_ledger(&prepared, &residues.values, m)?;
    let cuts = cut_reports(&prepared, &ledger, m, config.nodes_mult)?;
    Ok(TraceRun {
        prepared,
        residues,
        ledger,
        cuts,
    })
}
