//! Truncated cosine/eigenvector basis and the perturbation matrix in it.

use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::model::SpectralModel;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

/// Basis function sqrt(2/pi) cos((k+1/2)x) phi_j, with its unperturbed eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisIndex {
    pub k: usize,
    pub j: usize,
    pub mu: f64,
}

/// All (k < K, 1 <= j <= T) sorted by mu, ties broken by (j, k).
pub fn enumerate_basis(model: &SpectralModel) -> Vec<BasisIndex> {
    let mut basis = Vec::with_capacity(model.dimension());
    for j in 1..=model.t {
        for k in 0..model.k_modes {
            basis.push(BasisIndex {
                k,
                j,
                mu: model.mu(k, j),
            });
        }
    }
    basis.sort_by(|a, b| a.mu.total_cmp(&b.mu).then(a.j.cmp(&b.j)).then(a.k.cmp(&b.k)));
    basis
}

/// Integral over [0, pi] of cos(nx) cos((k+1/2)x) cos((k'+1/2)x).
pub fn overlap_integral(n: u32, k: usize, kp: usize) -> f64 {
    if n == 0 {
        return if k == kp { FRAC_PI_2 } else { 0.0 };
    }
    let n = n as usize;
    let mut hits = 0;
    if n == k + kp + 1 {
        hits += 1;
    }
    if n == k.abs_diff(kp) {
        hits += 1;
    }
    FRAC_PI_4 * hits as f64
}

#[derive(Debug, Clone)]
pub struct GalerkinSystem {
    pub model: SpectralModel,
    pub basis: Vec<BasisIndex>,
    pub qmat: CsrMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalerkinSummary {
    pub dimension: usize,
    pub nnz: usize,
    pub fill_fraction: f64,
    pub max_abs: f64,
    pub frobenius: f64,
}

pub fn assemble_q_matrix(model: &SpectralModel) -> GalerkinSystem {
    let basis = enumerate_basis(model);
    let t = model.t;
    let kk = model.k_modes;
    let mut position = vec![0usize; kk * t];
    for (p, b) in basis.iter().enumerate() {
        position[b.k * t + b.j - 1] = p;
    }

    let terms = model.potential.terms();
    let rows = basis
        .iter()
        .map(|b| {
            let mut row: Vec<(usize, f64)> = Vec::new();
            let mut partners: Vec<usize> = Vec::new();
            for term in terms {
                let n = term.n as usize;
                if n == 0 {
                    partners.push(b.k);
                    continue;
                }
                if n > b.k && n - b.k - 1 < kk {
                    partners.push(n - b.k - 1);
                }
                if b.k + n < kk {
                    partners.push(b.k + n);
                }
                if b.k >= n {
                    partners.push(b.k - n);
                }
            }
            partners.sort_unstable();
            partners.dedup();
            for &kp in &partners {
                for jp in 1..=t {
                    let mut v = 0.0;
                    for term in terms {
                        let w = overlap_integral(term.n, b.k, kp);
                        if w != 0.0 {
                            v += w * term.coeff[(b.j - 1, jp - 1)];
                        }
                    }
                    if v != 0.0 {
                        row.push((position[kp * t + jp - 1], v * 2.0 / PI));
                    }
                }
            }
            row
        })
        .collect();

    GalerkinSystem {
        model: model.clone(),
        basis,
        qmat: CsrMatrix::from_rows(rows),
    }
}

impl GalerkinSystem {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn mu(&self) -> Vec<f64> {
        self.basis.iter().map(|b| b.mu).collect()
    }

    pub fn q_dense(&self) -> DenseMatrix {
        self.qmat.to_dense()
    }

    /// diag(mu) + Qmat.
    pub fn full_matrix(&self) -> DenseMatrix {
        let mut m = self.q_dense();
        for (i, b) in self.basis.iter().enumerate() {
            m[(i, i)] += b.mu;
        }
        m
    }

    pub fn q_diag(&self, q: usize) -> f64 {
        self.qmat.get(q, q)
    }

    /// (1/pi) int_0^pi (Q phi_j, phi_j) dx = (C_0)_{jj} for basis state q.
    pub fn diag_integral(&self, q: usize) -> f64 {
        self.model.potential.diag(0, self.basis[q].j)
    }

    /// Sub-system on the given basis positions (kept in the given order).
    pub fn restrict(&self, indices: &[usize]) -> GalerkinSystem {
        GalerkinSystem {
            model: self.model.clone(),
            basis: indices.iter().map(|&i| self.basis[i]).collect(),
            qmat: self.qmat.restrict(indices),
        }
    }

    pub fn summary(&self) -> GalerkinSummary {
        let n = self.dim();
        let mut max_abs: f64 = 0.0;
        let mut sq = 0.0;
        for i in 0..n {
            for (_, v) in self.qmat.row(i) {
                max_abs = max_abs.max(v.abs());
                sq += v * v;
            }
        }
        GalerkinSummary {
            dimension: n,
            nnz: self.qmat.nnz(),
            fill_fraction: if n == 0 {
                0.0
            } else {
                self.qmat.nnz() as f64 / (n * n) as f64
            },
            max_abs,
            frobenius: sq.sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_scenario, RawScenario};

    fn model(k_modes: usize, terms: Vec<(u32, Vec<Vec<f64>>)>) -> SpectralModel {
        validate_scenario(&RawScenario {
            r: 1,
            a: 1.0,
            alpha: 3.0,
            t: 2,
            k_modes,
            terms,
            m_override: None,
        })
        .unwrap()
    }

    #[test]
    fn first_states_of_small_basis() {
        let m = model(2, vec![]);
        let b = enumerate_basis(&m);
        let got: Vec<(usize, usize, f64)> = b.iter().map(|b| (b.k, b.j, b.mu)).collect();
        assert_eq!(
            got,
            vec![(0, 1, 1.25), (1, 1, 3.25), (0, 2, 8.25), (1, 2, 10.25)]
        );
    }

    #[test]
    fn overlap_cases() {
        assert!((overlap_integral(1, 0, 0) - FRAC_PI_4).abs() < 1e-15);
        assert!((overlap_integral(0, 3, 3) - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(overlap_integral(0, 3, 4), 0.0);
        assert_eq!(overlap_integral(5, 0, 1), 0.0);
        // n = 2 hits both |k-k'| = 2 and k+k'+1 = 2? only the former for (0, 2).
        assert!((overlap_integral(2, 0, 2) - FRAC_PI_4).abs() < 1e-15);
        // n = 1 with k = 0, k' = 0 uses the reflection, with k = 0, k' = 1 the difference.
        assert!((overlap_integral(1, 0, 1) - FRAC_PI_4).abs() < 1e-15);
        // Both branches at once: n = 3, k = 1, k' = 1 has k+k'+1 = 3, |k-k'| = 0.
        assert!((overlap_integral(3, 1, 1) - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn constant_potential_is_diagonal_in_k() {
        let m = model(6, vec![(0, vec![vec![1.0, 0.5], vec![0.5, 2.0]])]);
        let sys = assemble_q_matrix(&m);
        for (p, bp) in sys.basis.iter().enumerate() {
            for (q, v) in sys.qmat.row(p) {
                let bq = sys.basis[q];
                assert_eq!(bp.k, bq.k);
                let expected = m.potential.term(0).unwrap()[(bp.j - 1, bq.j - 1)];
                assert!((v - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn diagonal_entries_follow_closed_form() {
        let m = model(
            8,
            vec![
                (0, vec![vec![0.2, 0.05], vec![0.05, -0.1]]),
                (1, vec![vec![0.5, 0.1], vec![0.1, 0.3]]),
                (3, vec![vec![-0.2, 0.1], vec![0.1, 0.1]]),
            ],
        );
        let sys = assemble_q_matrix(&m);
        for (q, b) in sys.basis.iter().enumerate() {
            let expected =
                m.potential.diag(0, b.j) + 0.5 * m.potential.diag(2 * b.k as u32 + 1, b.j);
            assert!((sys.q_diag(q) - expected).abs() < 1e-15);
        }
        assert_eq!(sys.qmat.to_dense().asymmetry(), 0.0);
    }

    #[test]
    fn restriction_preserves_entries() {
        let m = model(8, vec![(2, vec![vec![0.5, 0.1], vec![0.1, 0.3]])]);
        let sys = assemble_q_matrix(&m);
        let idx = [1, 4, 5, 9];
        let sub = sys.restrict(&idx);
        let full = sys.q_dense();
        let local = sub.q_dense();
        for (a, &ga) in idx.iter().enumerate() {
            for (b, &gb) in idx.iter().enumerate() {
                assert_eq!(local[(a, b)], full[(ga, gb)]);
            }
        }
    }
}
