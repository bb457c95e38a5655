//! Trace formulas: choice of spectral cuts, the per-state ledger, the
//! first and second regularized partial sums, their closed-form
//! right-hand sides and the Weyl-exponent fit.

use crate::error::{Error, Result};
use crate::galerkin::{enumerate_basis, GalerkinSystem};
use crate::model::{potential_eval, SpectralModel};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapMeasure {
    /// (μ_{n+1} − μ_n)/μ_{n+1}.
    Relative,
    /// μ_{n+1} − μ_n.
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsequenceParams {
    /// Cuts need gap ≥ gap_floor_rel·μ_N.
    pub gap_floor_rel: f64,
    /// Cuts need μ_{n+1} ≤ safe_fraction·μ_N.
    pub safe_fraction: f64,
    pub measure: GapMeasure,
    /// Width of the first window; later windows grow by `growth`.
    pub first_window: usize,
    pub growth: f64,
    /// Gaps at or below this split a pole cluster and are never cut.
    pub cluster_tol: Option<f64>,
}

impl Default for SubsequenceParams {
    fn default() -> Self {
        Self {
            gap_floor_rel: 1e-6,
            safe_fraction: 0.5,
            measure: GapMeasure::Relative,
            first_window: 1,
            growth: 2.0,
            cluster_tol: None,
        }
    }
}

/// Cut after the n_p-th unperturbed eigenvalue (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cut {
    pub n_p: usize,
    pub b: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subsequence {
    pub cuts: Vec<Cut>,
}

impl Subsequence {
    pub fn last_index(&self) -> usize {
        self.cuts.last().map_or(0, |c| c.n_p)
    }
}

pub fn select_subsequence(mu: &[f64], params: &SubsequenceParams) -> Result<Subsequence> {
    let n = mu.len();
    if n < 8 {
        return Err(Error::Selection(format!("need at least 8 eigenvalues, got {n}")));
    }
    if mu.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Selection("eigenvalues must be sorted ascending".into()));
    }
    if params.first_window == 0 || !(params.growth >= 1.0) {
        return Err(Error::Selection("window widths must be positive and non-shrinking".into()));
    }
    let top = mu[n - 1];
    let floor = params.gap_floor_rel * top;
    let cluster_tol = params
        .cluster_tol
        .unwrap_or_else(|| crate::resolvent::default_cluster_tol(mu));

    // Cut index c (1-based) separates mu[c-1] and mu[c].
    let admissible = |c: usize| {
        let gap = mu[c] - mu[c - 1];
        gap > 0.0 && gap >= floor && gap > cluster_tol && mu[c] <= params.safe_fraction * top
    };
    let measure = |c: usize| {
        let gap = mu[c] - mu[c - 1];
        match params.measure {
            GapMeasure::Relative => gap / mu[c].abs().max(f64::MIN_POSITIVE),
            GapMeasure::Absolute => gap,
        }
    };

    let mut cuts = Vec::new();
    let mut lo = 1;
    let mut width = params.first_window as f64;
    while lo < n {
        let hi = (lo + width as usize - 1).min(n - 1);
        let mut best: Option<(usize, f64)> = None;
        for c in lo..=hi {
            if !admissible(c) {
                continue;
            }
            let v = measure(c);
            if best.map_or(true, |(_, b)| v >= b) {
                best = Some((c, v));
            }
        }
        if let Some((c, _)) = best {
            cuts.push(Cut {
                n_p: c,
                b: 0.5 * (mu[c - 1] + mu[c]),
                gap: mu[c] - mu[c - 1],
            });
        }
        lo = hi + 1;
        width = (width * params.growth).ceil();
    }
    if cuts.is_empty() {
        return Err(Error::Selection("no admissible cut in any window".into()));
    }
    Ok(Subsequence { cuts })
}

/// Per-state record of the quantities entering both partial sums.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub k: usize,
    pub j: usize,
    pub mu: f64,
    pub lambda: f64,
    /// λ_q − μ_q, known to the accuracy of the coupling rather than of λ_q.
    pub shift: f64,
    /// (1/π)∫(Qφ_j, φ_j) dx = (C_0)_{jj}.
    pub diag_integral: f64,
    /// (C_{2k+1})_{jj}, the oscillatory diagonal coefficient.
    pub oscillatory: f64,
    /// Residues of λ·tr(B^s) at μ_q for s = 2..=m (index s−2); a cluster's
    /// residue is shared equally by its members.
    pub residues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLedger {
    pub entries: Vec<LedgerEntry>,
    /// Largest s with residues recorded.
    pub m: usize,
}

impl TraceLedger {
    /// Ledger for q < n_last. `shifts[q]` = λ_q − μ_q for q < n_last;
    /// `cluster_residues[c][s-1]` holds the residue of cluster c for s = 1..;
    /// only clusters inside the ledger are read.
    pub fn build(
        system: &GalerkinSystem,
        lambda: &[f64],
        shifts: &[f64],
        n_last: usize,
        clusters: &[crate::resolvent::PoleCluster],
        cluster_residues: &[Vec<f64>],
        m: usize,
    ) -> Result<Self> {
        if lambda.len() != system.dim() || n_last > system.dim() || shifts.len() < n_last {
            return Err(Error::Bookkeeping("spectrum and system sizes differ".into()));
        }
        let mut share: Vec<Option<Vec<f64>>> = vec![None; n_last];
        for (c, cluster) in clusters.iter().enumerate() {
            let inside = cluster.indices.iter().filter(|&&q| q < n_last).count();
            if inside == 0 {
                continue;
            }
            if inside != cluster.indices.len() {
                return Err(Error::Bookkeeping(format!(
                    "cut at {n_last} splits the cluster at {}",
                    cluster.value
                )));
            }
            if m < 2 {
                for &q in &cluster.indices {
                    share[q] = Some(Vec::new());
                }
                continue;
            }
            let res = cluster_residues.get(c).ok_or_else(|| {
                Error::Bookkeeping(format!("missing residues for cluster at {}", cluster.value))
            })?;
            if res.len() < m {
                return Err(Error::Bookkeeping(format!(
                    "residues known up to s = {}, need {m}",
                    res.len()
                )));
            }
            let size = cluster.indices.len() as f64;
            let per: Vec<f64> = (2..=m).map(|s| res[s - 1] / size).collect();
            for &q in &cluster.indices {
                share[q] = Some(per.clone());
            }
        }
        let model = &system.model;
        let entries = (0..n_last)
            .map(|q| {
                let b = system.basis[q];
                let residues = share[q]
                    .take()
                    .ok_or_else(|| Error::Bookkeeping(format!("state {} has no cluster", q + 1)))?;
                Ok(LedgerEntry {
                    k: b.k,
                    j: b.j,
                    mu: b.mu,
                    lambda: lambda[q],
                    shift: shifts[q],
                    diag_integral: system.diag_integral(q),
                    oscillatory: model.potential.diag(2 * b.k as u32 + 1, b.j),
                    residues,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, m })
    }

    fn prefix(&self, n_p: usize) -> Result<&[LedgerEntry]> {
        self.entries
            .get(..n_p)
            .ok_or_else(|| Error::Bookkeeping(format!("ledger holds {} states, need {n_p}", self.entries.len())))
    }

    /// Σ_{q≤n_p} (λ_q² − μ_q²).
    pub fn second_moment(&self, n_p: usize) -> Result<f64> {
        Ok(self.prefix(n_p)?.iter().map(squared_shift).sum())
    }

    /// D_ps = 2(−1)^s/s·Σ_{q≤n_p} Res_q(s), for s ≥ 2.
    pub fn d_ps(&self, n_p: usize, s: usize) -> Result<f64> {
        if s < 2 || s > self.m {
            return Err(Error::Bookkeeping(format!("no residues for s = {s}")));
        }
        let sum: f64 = self.prefix(n_p)?.iter().map(|e| e.residues[s - 2]).sum();
        Ok(2.0 * sign(s) / s as f64 * sum)
    }

    /// D_p1 = 2Σ μ_q Q_qq = 2Σ μ_q (C_0)_{jj} + Σ μ_q (C_{2k+1})_{jj}.
    pub fn d_p1_expansion(&self, n_p: usize) -> Result<(f64, f64)> {
        let p = self.prefix(n_p)?;
        let diagonal = p.iter().map(|e| 2.0 * e.mu * e.diag_integral).sum();
        let oscillatory = p.iter().map(|e| e.mu * e.oscillatory).sum();
        Ok((diagonal, oscillatory))
    }
}

fn sign(s: usize) -> f64 {
    if s % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Σ_{q≤n_p} [λ_q − μ_q − (C_0)_{j_q j_q}].
pub fn first_trace_partial(ledger: &TraceLedger, n_p: usize) -> Result<f64> {
    Ok(ledger
        .prefix(n_p)?
        .iter()
        .map(|e| e.shift - e.diag_integral)
        .sum())
}

/// Per-state term of the second-trace partial sum.
pub fn second_trace_term(e: &LedgerEntry, m: usize) -> f64 {
    let corrections: f64 = (2..=m).map(|s| 2.0 * sign(s) / s as f64 * e.residues[s - 2]).sum();
    // Grouped as 2μ(d − C) + d² so the two O(μ) products never cancel.
    2.0 * e.mu * (e.shift - e.diag_integral) + e.shift * e.shift - corrections
}

/// λ_q² − μ_q² = d(2μ_q + d) with d the shift.
pub fn squared_shift(e: &LedgerEntry) -> f64 {
    e.shift * (2.0 * e.mu + e.shift)
}

/// Σ_{q≤n_p} of the magnitudes of everything added into the second-trace
/// partial sum; n_p·eps times this bounds its rounding error.
pub fn second_trace_magnitude(ledger: &TraceLedger, n_p: usize, m: usize) -> Result<f64> {
    Ok(ledger
        .prefix(n_p)?
        .iter()
        .map(|e| {
            let corrections: f64 = (2..=m.min(ledger.m)).map(|s| 2.0 / s as f64 * e.residues[s - 2].abs()).sum();
            (2.0 * e.mu * (e.shift - e.diag_integral)).abs() + e.shift * e.shift + corrections
        })
        .sum())
}

/// First-trace counterpart of [`second_trace_magnitude`].
pub fn first_trace_magnitude(ledger: &TraceLedger, n_p: usize) -> Result<f64> {
    Ok(ledger
        .prefix(n_p)?
        .iter()
        .map(|e| e.shift.abs() + e.diag_integral.abs())
        .sum())
}

/// Σ_{q≤n_p} [λ_q² − μ_q² − 2Σ_{s=2}^m (−1)^s s^{−1} Res_q(s) − (2μ_q/π)∫(Qφ,φ)].
pub fn second_trace_partial(ledger: &TraceLedger, n_p: usize, m: usize) -> Result<f64> {
    if m > ledger.m {
        return Err(Error::Bookkeeping(format!(
            "residues known up to s = {}, asked for m = {m}",
            ledger.m
        )));
    }
    Ok(ledger.prefix(n_p)?.iter().map(|e| second_trace_term(e, m)).sum())
}

fn trace_weighted(model: &SpectralModel, x: f64, d: u32, weighted: bool) -> f64 {
    let q = potential_eval(&model.potential, model.t, x, d);
    (0..model.t)
        .map(|i| if weighted { model.gamma(i + 1) } else { 1.0 } * q[(i, i)])
        .sum()
}

fn agree(a: f64, b: f64, what: &str) -> Result<f64> {
    if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
        return Err(Error::InternalConsistency(format!(
            "{what}: endpoint route {a} and closed form {b} differ"
        )));
    }
    Ok(b)
}

/// Both routes to the second-trace right-hand side: (endpoint values,
/// cosine closed form).
pub fn rhs_second_routes(model: &SpectralModel) -> (f64, f64) {
    let r = model.r;
    let d = 2 * r;
    let sign_r = if r % 2 == 0 { 1.0 } else { -1.0 };
    let endpoint = sign_r * 2f64.powi(-1 - 2 * r as i32)
        * (trace_weighted(model, 0.0, d, false) - trace_weighted(model, PI, d, false))
        + 0.5 * (trace_weighted(model, 0.0, 0, true) - trace_weighted(model, PI, 0, true));
    let mut closed = 0.0;
    for term in model.potential.terms().iter().filter(|t| t.n % 2 == 1) {
        let n = term.n as f64;
        let tr = term.coeff.trace();
        let tr_a: f64 = (0..model.t).map(|i| model.gamma(i + 1) * term.coeff[(i, i)]).sum();
        closed += 2f64.powi(-2 * r as i32) * n.powi(2 * r as i32) * tr + tr_a;
    }
    (endpoint, closed)
}

/// (−1)^r 2^{−1−2r}[trQ^{(2r)}(0) − trQ^{(2r)}(π)] + ½[tr AQ(0) − tr AQ(π)].
pub fn rhs_second(model: &SpectralModel) -> Result<f64> {
    let (endpoint, closed) = rhs_second_routes(model);
    agree(endpoint, closed, "second-trace right-hand side")
}

/// Both routes to the first-trace right-hand side.
pub fn rhs_first_routes(model: &SpectralModel) -> (f64, f64) {
    let endpoint = 0.25 * (trace_weighted(model, 0.0, 0, false) - trace_weighted(model, PI, 0, false));
    let closed = 0.5
        * model
            .potential
            .terms()
            .iter()
            .filter(|t| t.n % 2 == 1)
            .map(|t| t.coeff.trace())
            .sum::<f64>();
    (endpoint, closed)
}

/// ¼[trQ(0) − trQ(π)].
pub fn rhs_first(model: &SpectralModel) -> Result<f64> {
    let (endpoint, closed) = rhs_first_routes(model);
    agree(endpoint, closed, "first-trace right-hand side")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeylFit {
    pub slope: f64,
    pub d1: f64,
    /// Fitted rank window (1-based, inclusive).
    pub lo: usize,
    pub hi: usize,
}

/// Least-squares slope of log(value) against log(rank) over ranks [N/4, N/2].
pub fn fit_weyl_exponent(values: &[f64]) -> Result<WeylFit> {
    let n = values.len();
    if n < 64 {
        return Err(Error::Selection(format!("Weyl fit needs at least 64 values, got {n}")));
    }
    let (lo, hi) = (n / 4, n / 2);
    let mut pts = Vec::with_capacity(hi - lo + 1);
    for rank in lo..=hi {
        let v = values[rank - 1];
        if !(v > 0.0) {
            return Err(Error::Selection(format!("non-positive value {v} at rank {rank}")));
        }
        pts.push(((rank as f64).ln(), v.ln()));
    }
    let len = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / len;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / len;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(WeylFit {
        slope,
        d1: (my - slope * mx).exp(),
        lo,
        hi,
    })
}

/// Largest value for which listings below are complete: the fraction
/// `safe_fraction` of the top cosine level.
pub fn weyl_cap(model: &SpectralModel, safe_fraction: f64) -> f64 {
    safe_fraction * model.cosine_level(model.k_modes - 1)
}

/// Unperturbed levels with j > T (never coupled by Q), up to the cap.
fn uncoupled_levels(model: &SpectralModel, cap: f64, from_j: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut j = from_j;
    while model.gamma(j) + model.cosine_level(0) <= cap {
        for k in 0..model.k_modes {
            let v = model.mu(k, j);
            if v > cap {
                break;
            }
            out.push(v);
        }
        j += 1;
    }
    out
}

/// Complete sorted list of unperturbed eigenvalues (all j) up to the cap.
pub fn weyl_unperturbed(model: &SpectralModel, cap: f64) -> Vec<f64> {
    let mut v = uncoupled_levels(model, cap, 1);
    v.sort_by(f64::total_cmp);
    v
}

/// Perturbed eigenvalues up to the cap: Galerkin eigenvalues of the coupled
/// block j ≤ T merged with the untouched levels j > T.
pub fn weyl_perturbed(model: &SpectralModel, lambda: &[f64], cap: f64) -> Vec<f64> {
    let mut v: Vec<f64> = lambda.iter().copied().filter(|&l| l <= cap).collect();
    v.extend(uncoupled_levels(model, cap, model.t + 1));
    v.sort_by(f64::total_cmp);
    v
}

/// d1 from the unperturbed Weyl fit and the empirical gap constant
/// d2 = min over cuts p and q > n_p of (μ_q − μ_{n_p})/(q^β − n_p^β).
pub fn estimate_constants(model: &SpectralModel) -> (Option<f64>, Option<f64>) {
    let params = SubsequenceParams::default();
    let d1 = fit_weyl_exponent(&weyl_unperturbed(model, weyl_cap(model, params.safe_fraction)))
        .ok()
        .map(|f| f.d1);
    let mu: Vec<f64> = enumerate_basis(model).iter().map(|b| b.mu).collect();
    let d2 = select_subsequence(&mu, &params)
        .ok()
        .and_then(|sub| gap_constant(&mu, &sub, model.constants.beta));
    (d1, d2)
}

pub fn gap_constant(mu: &[f64], sub: &Subsequence, beta: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for cut in &sub.cuts {
        let np = cut.n_p;
        let base = (np as f64).powf(beta);
        for q in np + 1..=mu.len() {
            let v = (mu[q - 1] - mu[np - 1]) / ((q as f64).powf(beta) - base);
            best = Some(best.map_or(v, |b: f64| b.min(v)));
        }
    }
    best
}
