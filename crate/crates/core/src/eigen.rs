//! Dense symmetric eigensolver: Householder tridiagonalization followed by
//! the implicit QL iteration (the tred2/tql2 pair of EISPACK).
//!
//! The working array is column-major so that the inner loops of both phases
//! run over contiguous memory.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Total QL iterations allowed, per unit of dimension.
const ITERATIONS_PER_ROW: usize = 30;

#[derive(Debug, Clone)]
pub struct SpectrumResult {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Column-major eigenvectors; column q belongs to values[q].
    vectors: Vec<f64>,
    /// max_q ||M v_q - lambda_q v_q||_2.
    pub residual_bound: f64,
}

impl SpectrumResult {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, q: usize) -> &[f64] {
        let n = self.dim();
        &self.vectors[q * n..(q + 1) * n]
    }
}

/// Eigenvalues and orthonormal eigenvectors of a symmetric matrix.
pub fn eigh(m: &DenseMatrix) -> Result<SpectrumResult> {
    let n = m.dim();
    let mut work = Tridiagonal::new(m, true);
    work.ql(true)?;
    let (values, vectors) = work.sorted();

    let mut residual_bound: f64 = 0.0;
    for q in 0..n {
        let v = &vectors[q * n..(q + 1) * n];
        let mv = m.matvec(v);
        let res: f64 = mv
            .iter()
            .zip(v)
            .map(|(a, b)| (a - values[q] * b).powi(2))
            .sum::<f64>()
            .sqrt();
        residual_bound = residual_bound.max(res);
    }
    let scale = m.frobenius().max(f64::MIN_POSITIVE);
    if residual_bound > 1e-10 * scale {
        return Err(Error::InternalConsistency(format!(
            "eigenpair residual {residual_bound:.3e} exceeds 1e-10 ||M||_F"
        )));
    }
    Ok(SpectrumResult {
        values,
        vectors,
        residual_bound,
    })
}

/// Eigenvalues only, ascending.
pub fn eigvalsh(m: &DenseMatrix) -> Result<Vec<f64>> {
    let mut work = Tridiagonal::new(m, false);
    work.ql(false)?;
    Ok(work.sorted().0)
}

struct Tridiagonal {
    n: usize,
    d: Vec<f64>,
    e: Vec<f64>,
    /// Column-major: v[col * n + row].
    v: Vec<f64>,
}

impl Tridiagonal {
    fn new(m: &DenseMatrix, accumulate: bool) -> Self {
        let n = m.dim();
        // Column-major copy; tred2 only reads the lower triangle.
        let mut v = vec![0.0; n * n];
        for c in 0..n {
            for r in 0..n {
                v[c * n + r] = m[(r, c)];
            }
        }
        let mut t = Tridiagonal {
            n,
            d: vec![0.0; n],
            e: vec![0.0; n],
            v,
        };
        if n > 0 {
            t.reduce(accumulate);
        }
        t
    }

    fn reduce(&mut self, accumulate: bool) {
        let n = self.n;
        let Tridiagonal { d, e, v, .. } = self;
        let at = |r: usize, c: usize| c * n + r;

        for j in 0..n {
            d[j] = v[at(n - 1, j)];
        }

        for i in (1..n).rev() {
            let mut scale = 0.0;
            let mut h = 0.0;
            for dk in d.iter().take(i) {
                scale += dk.abs();
            }
            if scale == 0.0 {
                e[i] = d[i - 1];
                for j in 0..i {
                    d[j] = v[at(i - 1, j)];
                    v[at(i, j)] = 0.0;
                    v[at(j, i)] = 0.0;
                }
            } else {
                // Householder vector.
                for dk in d.iter_mut().take(i) {
                    *dk /= scale;
                    h += *dk * *dk;
                }
                let mut f = d[i - 1];
                let mut g = h.sqrt();
                if f > 0.0 {
                    g = -g;
                }
                e[i] = scale * g;
                h -= f * g;
                d[i - 1] = f - g;
                for ej in e.iter_mut().take(i) {
                    *ej = 0.0;
                }

                // Similarity transformation of the remaining block.
                for j in 0..i {
                    f = d[j];
                    v[at(j, i)] = f;
                    let col = &v[j * n..j * n + i];
                    g = e[j] + col[j] * f;
                    for k in (j + 1)..i {
                        g += col[k] * d[k];
                        e[k] += col[k] * f;
                    }
                    e[j] = g;
                }
                f = 0.0;
                for j in 0..i {
                    e[j] /= h;
                    f += e[j] * d[j];
                }
                let hh = f / (h + h);
                for j in 0..i {
                    e[j] -= hh * d[j];
                }
                for j in 0..i {
                    f = d[j];
                    g = e[j];
                    let col = &mut v[j * n..j * n + i];
                    for k in j..i {
                        col[k] -= f * e[k] + g * d[k];
                    }
                    d[j] = v[at(i - 1, j)];
                    v[at(i, j)] = 0.0;
                }
            }
            d[i] = h;
        }

        if !accumulate {
            for j in 0..n {
                d[j] = v[at(j, j)];
            }
            e[0] = 0.0;
            return;
        }

        for i in 0..n - 1 {
            v[at(n - 1, i)] = v[at(i, i)];
            v[at(i, i)] = 1.0;
            let h = d[i + 1];
            if h != 0.0 {
                for k in 0..=i {
                    d[k] = v[at(k, i + 1)] / h;
                }
                for j in 0..=i {
                    let mut g = 0.0;
                    for k in 0..=i {
                        g += v[at(k, i + 1)] * v[at(k, j)];
                    }
                    let col = &mut v[j * n..j * n + i + 1];
                    for (k, c) in col.iter_mut().enumerate() {
                        *c -= g * d[k];
                    }
                }
            }
            for k in 0..=i {
                v[at(k, i + 1)] = 0.0;
            }
        }
        for j in 0..n {
            d[j] = v[at(n - 1, j)];
            v[at(n - 1, j)] = 0.0;
        }
        v[at(n - 1, n - 1)] = 1.0;
        e[0] = 0.0;
    }

    fn ql(&mut self, accumulate: bool) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Ok(());
        }
        let Tridiagonal { d, e, v, .. } = self;
        for i in 1..n {
            e[i - 1] = e[i];
        }
        e[n - 1] = 0.0;

        let budget = ITERATIONS_PER_ROW * n;
        let mut iterations = 0usize;
        let mut f = 0.0;
        let mut tst1: f64 = 0.0;
        let eps = f64::EPSILON;
        for l in 0..n {
            tst1 = tst1.max(d[l].abs() + e[l].abs());
            let mut m = l;
            while m < n {
                if e[m].abs() <= eps * tst1 {
                    break;
                }
                m += 1;
            }

            if m > l {
                loop {
                    iterations += 1;
                    if iterations > budget {
                        let worst = e.iter().fold(0.0f64, |w, x| w.max(x.abs()));
                        return Err(Error::Numerical {
                            worst_offdiag: worst,
                        });
                    }

                    // Implicit shift.
                    let mut g = d[l];
                    let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                    let mut r = p.hypot(1.0);
                    if p < 0.0 {
                        r = -r;
                    }
                    d[l] = e[l] / (p + r);
                    d[l + 1] = e[l] * (p + r);
                    let dl1 = d[l + 1];
                    let mut h = g - d[l];
                    for di in d.iter_mut().skip(l + 2) {
                        *di -= h;
                    }
                    f += h;

                    // Implicit QL sweep.
                    p = d[m];
                    let mut c = 1.0;
                    let mut c2 = c;
                    let mut c3 = c;
                    let el1 = e[l + 1];
                    let mut s = 0.0;
                    let mut s2 = 0.0;
                    for i in (l..m).rev() {
                        c3 = c2;
                        c2 = c;
                        s2 = s;
                        g = c * e[i];
                        h = c * p;
                        r = p.hypot(e[i]);
                        e[i + 1] = s * r;
                        s = e[i] / r;
                        c = p / r;
                        p = c * d[i] - s * g;
                        d[i + 1] = h + s * (c * g + s * d[i]);

                        if accumulate {
                            let (left, right) = v.split_at_mut((i + 1) * n);
                            let vi = &mut left[i * n..];
                            let vi1 = &mut right[..n];
                            for k in 0..n {
                                let hk = vi1[k];
                                vi1[k] = s * vi[k] + c * hk;
                                vi[k] = c * vi[k] - s * hk;
                            }
                        }
                    }
                    p = -s * s2 * c3 * el1 * e[l] / dl1;
                    e[l] = s * p;
                    d[l] = c * p;

                    if e[l].abs() <= eps * tst1 {
                        break;
                    }
                }
            }
            d[l] += f;
            e[l] = 0.0;
        }
        Ok(())
    }

    fn sorted(self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.d[a].total_cmp(&self.d[b]));
        let values = order.iter().map(|&i| self.d[i]).collect();
        let mut vectors = Vec::new();
        if self.v.len() == n * n {
            vectors.reserve(n * n);
            for &i in &order {
                vectors.extend_from_slice(&self.v[i * n..(i + 1) * n]);
            }
        }
        (values, vectors)
    }
}
