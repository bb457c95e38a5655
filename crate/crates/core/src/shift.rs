//! Eigenvalue shifts λ_q − μ_q accurate to the size of the coupling.
//!
//! A dense solve of diag(μ) + Q fixes each λ only to about eps·max μ, and
//! the trace sums multiply that error by 2μ_q; for high-order operators this
//! swamps the quantity being measured. Instead each pole cluster G is folded
//! against its graph neighbourhood R:
//!
//!   H(d) = (M_GG − c) + M_GR ((c + d) − M_RR)^{-1} M_RG,   d = eig(H(d)),
//!
//! with c the cluster value, so every matrix that is diagonalized has been
//! shifted by c first and the shift d comes out directly.

use crate::eigen::eigh;
use crate::error::{Error, Result};
use crate::galerkin::GalerkinSystem;
use crate::linalg::DenseMatrix;
use crate::resolvent::PoleCluster;
use rayon::prelude::*;

pub const START_HOPS: usize = 4;
/// Window growth stops when the shifts move by less than this (relative to
/// 1 + |d|).
pub const WINDOW_TOL: f64 = 1e-12;
const MAX_ITER: usize = 200;
const MAX_REFINE: usize = 8;

/// Shifts λ_q − μ_q for ranks q < n_last, paired rank-wise. Clusters must
/// not straddle n_last; `lambda` (from a dense solve) is used only to
/// confirm the pairing.
pub fn refine_shifts(
    system: &GalerkinSystem,
    clusters: &[PoleCluster],
    lambda: &[f64],
    n_last: usize,
) -> Result<Vec<f64>> {
    let inside: Vec<&PoleCluster> = clusters
        .iter()
        .filter(|c| c.indices.iter().any(|&q| q < n_last))
        .collect();
    if inside.iter().any(|c| c.indices.iter().any(|&q| q >= n_last)) {
        return Err(Error::Bookkeeping(format!("a cluster straddles rank {n_last}")));
    }
    let folded: Vec<Vec<(f64, f64)>> = inside
        .par_iter()
        .map(|c| {
            let seeds: Vec<f64> = c.indices.iter().map(|&q| lambda[q] - c.value).collect();
            cluster_shifts(system, c, &seeds)
        })
        .collect::<Result<_>>()?;
    let mut values: Vec<(f64, f64)> = folded.into_iter().flatten().collect();
    values.sort_by(|a, b| (a.0 + a.1).total_cmp(&(b.0 + b.1)));

    let mu = system.mu();
    let scale = mu.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    values
        .iter()
        .enumerate()
        .map(|(q, &(base, d))| {
            let refined = base + d;
            if (refined - lambda[q]).abs() > 1e-9 * scale {
                return Err(Error::Bookkeeping(format!(
                    "refined eigenvalue {refined} at rank {} disagrees with {}",
                    q + 1,
                    lambda[q]
                )));
            }
            Ok((base - mu[q]) + d)
        })
        .collect()
}

/// (cluster value, shift) for every eigenvalue branch of the cluster,
/// growing the neighbourhood until the shifts settle. `seeds` are the dense
/// estimates of the shifts, one per member.
fn cluster_shifts(system: &GalerkinSystem, cluster: &PoleCluster, seeds: &[f64]) -> Result<Vec<(f64, f64)>> {
    let c = cluster.value;
    let mut hops = START_HOPS;
    let mut previous: Option<Vec<f64>> = None;
    loop {
        let window = system.qmat.neighbourhood(&cluster.indices, hops);
        let full = window.len() == system.dim();
        let d = fold(system, &cluster.indices, &window, c, seeds)?;
        let settled = previous.as_ref().is_some_and(|p| {
            p.iter()
                .zip(&d)
                .all(|(a, b)| (a - b).abs() <= WINDOW_TOL * (1.0 + b.abs()))
        });
        if settled || full {
            return Ok(d.into_iter().map(|v| (c, v)).collect());
        }
        previous = Some(d);
        hops *= 2;
    }
}

/// Fixed points d = e(H(d)) of the folded problem on one window, one per
/// seed. Since H′(d) = −M_GR A^{-2} M_RG is negative semidefinite,
/// f(d) = e(H(d)) − d has slope at most −1 between poles, and Newton's
/// method from the dense estimate converges.
///
/// The outer eigen-decomposition is exact only to eps·max|θ|, which is far
/// too coarse next to a close neighbour when μ is large. It therefore serves
/// only as an approximate inverse: each solve with d − (M_RR − c) is refined
/// against residuals formed from the sparse rows, whose diagonal μ_r − c is
/// exact.
fn fold(system: &GalerkinSystem, members: &[usize], window: &[usize], c: f64, seeds: &[f64]) -> Result<Vec<f64>> {
    let rest: Vec<usize> = window.iter().copied().filter(|q| !members.contains(q)).collect();
    let g = members.len();
    let nr = rest.len();
    let mu = |q: usize| system.basis[q].mu;

    let mut position = vec![usize::MAX; system.dim()];
    for (a, &q) in rest.iter().enumerate() {
        position[q] = a;
    }
    // Off-diagonal outer couplings and the member couplings M_RG, by row.
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nr];
    let mut couple = vec![vec![0.0; g]; nr];
    for (a, &qa) in rest.iter().enumerate() {
        for (qb, v) in system.qmat.row(qa) {
            if qb == qa {
                continue;
            }
            if position[qb] != usize::MAX {
                rows[a].push((position[qb], v));
            } else if let Some(i) = members.iter().position(|&m| m == qb) {
                couple[a][i] = v;
            }
        }
    }
    // Diagonal of the shifted outer block.
    let diag: Vec<f64> = rest.iter().map(|&q| system.qmat.get(q, q) + (mu(q) - c)).collect();

    let mut outer = DenseMatrix::zeros(nr);
    for a in 0..nr {
        for &(b, v) in &rows[a] {
            outer[(a, b)] = v;
        }
        outer[(a, a)] = diag[a];
    }
    let spectrum = if nr > 0 { Some(eigh(&outer)?) } else { None };

    let mut inner = DenseMatrix::zeros(g);
    for (i, &qi) in members.iter().enumerate() {
        for (j, &qj) in members.iter().enumerate() {
            inner[(i, j)] = system.qmat.get(qi, qj);
        }
        inner[(i, i)] += mu(qi) - c;
    }

    // x ≈ (d − outer)^{-1} b from the eigen-decomposition.
    let approx = |d: f64, b: &[f64]| -> Vec<f64> {
        let s = spectrum.as_ref().expect("outer block present");
        let mut x = vec![0.0; nr];
        for (r, &theta) in s.values.iter().enumerate() {
            let v = s.vector(r);
            let coef = v.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (d - theta);
            for (xi, vi) in x.iter_mut().zip(v) {
                *xi += coef * vi;
            }
        }
        x
    };
    let solve = |d: f64, b: &[f64]| -> Vec<f64> {
        let mut x = approx(d, b);
        for _ in 0..MAX_REFINE {
            let residual: Vec<f64> = (0..nr)
                .map(|a| {
                    let off: f64 = rows[a].iter().map(|&(k, v)| v * x[k]).sum();
                    b[a] - ((d - diag[a]) * x[a] - off)
                })
                .collect();
            let dx = approx(d, &residual);
            let size = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let step = dx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            if step <= f64::EPSILON * size {
                break;
            }
        }
        x
    };
    let folded = |d: f64| -> DenseMatrix {
        let mut h = inner.clone();
        if nr == 0 {
            return h;
        }
        for j in 0..g {
            let b: Vec<f64> = couple.iter().map(|row| row[j]).collect();
            let x = solve(d, &b);
            for i in 0..g {
                let add: f64 = couple.iter().zip(&x).map(|(row, xv)| row[i] * xv).sum();
                h[(i, j)] += 0.5 * add;
                h[(j, i)] += 0.5 * add;
            }
        }
        h
    };

    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut d = seed;
        let mut converged = false;
        for _ in 0..MAX_ITER {
            let h = folded(d);
            let spectrum = eigh(&h)?;
            let branch = (0..g)
                .min_by(|&a, &b| (spectrum.values[a] - d).abs().total_cmp(&(spectrum.values[b] - d).abs()))
                .expect("cluster has members");
            let v = spectrum.vector(branch);
            // vᵀH′(d)v = −|A^{-1} M_RG v|².
            let slope = if nr == 0 {
                0.0
            } else {
                let b: Vec<f64> = couple.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect();
                -solve(d, &b).iter().map(|y| y * y).sum::<f64>()
            };
            let step = (spectrum.values[branch] - d) / (1.0 - slope);
            d += step;
            if !d.is_finite() {
                break;
            }
            if step.abs() <= 4.0 * f64::EPSILON * (1.0 + d.abs() + h.max_abs()) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::InternalConsistency(format!(
                "eigenvalue shift near {c} did not converge"
            )));
        }
        out.push(d);
    }
    Ok(out)
}
