use num_complex::Complex64;
use proptest::prelude::*;
use regtrace::eigen::{eigh, eigvalsh};
use regtrace::galerkin::{assemble_q_matrix, GalerkinSystem};
use regtrace::linalg::DenseMatrix;
use regtrace::model::{validate_scenario, RawScenario};
use regtrace::quadrature::adaptive_gauss_legendre;
use regtrace::resolvent::{
    cluster_poles, contour_d_ps_all, default_cluster_tol, relative_deviation, residues_with_scales, trace_power,
    ContourSpec, DEFAULT_NODE_MULT,
};
use regtrace::shift::refine_shifts;
use regtrace::traces::{rhs_first, rhs_second};
use std::f64::consts::PI;

fn symmetric(n: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-10.0f64..10.0, n * n).prop_map(move |v| {
        let mut m = DenseMatrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                m[(i, j)] = v[i * n + j];
                m[(j, i)] = v[i * n + j];
            }
        }
        m
    })
}

fn any_symmetric() -> impl Strategy<Value = DenseMatrix> {
    (1usize..=10).prop_flat_map(symmetric)
}

fn coefficient(t: usize, amp: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(-amp..amp, t * t).prop_map(move |v| {
        let mut c = vec![vec![0.0; t]; t];
        for i in 0..t {
            for j in 0..=i {
                c[i][j] = v[i * t + j];
                c[j][i] = v[i * t + j];
            }
        }
        c
    })
}

/// Small valid scenarios with a mild potential and distinct levels.
fn small_scenario(max_t: usize, k_modes: usize, amp: f64) -> impl Strategy<Value = RawScenario> {
    (1u32..=2, 0.5f64..2.0, 0.1f64..2.5, 1usize..=max_t).prop_flat_map(move |(r, a, extra, t)| {
        let threshold = 2.0 * r as f64 / (2.0 * r as f64 - 1.0);
        prop::collection::vec((0u32..=5, coefficient(t, amp)), 1..=3).prop_map(move |terms| {
            let mut terms = terms;
            terms.sort_by_key(|(n, _)| *n);
            terms.dedup_by_key(|(n, _)| *n);
            RawScenario {
                r,
                a,
                alpha: threshold + extra,
                t,
                k_modes,
                terms,
                m_override: None,
            }
        })
    })
}

fn system_of(raw: &RawScenario) -> GalerkinSystem {
    assemble_q_matrix(&validate_scenario(raw).unwrap())
}

/// Eigenvalues of a symmetric 3×3 matrix from the trigonometric solution of
/// its characteristic cubic, ascending.
fn cubic_eigenvalues(m: &DenseMatrix) -> [f64; 3] {
    let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
    let q = m.trace() / 3.0;
    if p1 == 0.0 {
        let mut d = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        d.sort_by(f64::total_cmp);
        return d;
    }
    let p2 = (0..3).map(|i| (m[(i, i)] - q).powi(2)).sum::<f64>() + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = |i: usize, j: usize| (m[(i, j)] - if i == j { q } else { 0.0 }) / p;
    let det = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
        + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    [lo, 3.0 * q - hi - lo, hi]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigenvalues_are_sorted_and_preserve_invariants(m in any_symmetric()) {
        let values = eigvalsh(&m).unwrap();
        let scale = 1.0 + m.frobenius();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((values.iter().sum::<f64>() - m.trace()).abs() <= 1e-12 * scale * m.dim() as f64);
        let squares: f64 = values.iter().map(|v| v * v).sum();
        prop_assert!((squares - m.frobenius().powi(2)).abs() <= 1e-12 * scale * scale);
    }

    #[test]
    fn eigenvectors_are_orthonormal_with_small_residuals(m in any_symmetric()) {
        let n = m.dim();
        let s = eigh(&m).unwrap();
        let scale = 1.0 + m.frobenius();
        for a in 0..n {
            let v = s.vector(a);
            let mv = m.matvec(v);
            let residual = mv.iter().zip(v).map(|(x, y)| (x - s.values[a] * y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(residual <= 1e-12 * scale, "residual {residual}");
            for b in 0..n {
                let dot: f64 = v.iter().zip(s.vector(b)).map(|(x, y)| x * y).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn three_by_three_matches_trigonometric_cubic(m in symmetric(3)) {
        let values = eigvalsh(&m).unwrap();
        let oracle = cubic_eigenvalues(&m);
        let scale = 1.0 + m.frobenius();
        for (v, o) in values.iter().zip(oracle) {
            prop_assert!((v - o).abs() <= 1e-10 * scale, "{values:?} vs {oracle:?}");
        }
    }

    #[test]
    fn rhs_is_linear_in_the_potential(raw in small_scenario(3, 4, 1.0), t in 0u32..=2) {
        let base = validate_scenario(&raw).unwrap();
        let mut scaled = raw.clone();
        for (_, c) in &mut scaled.terms {
            for row in c.iter_mut() {
                for v in row.iter_mut() {
                    *v *= t as f64;
                }
            }
        }
        let scaled = validate_scenario(&scaled).unwrap();
        let t = t as f64;
        let (s0, s1) = (rhs_second(&base).unwrap(), rhs_second(&scaled).unwrap());
        let (f0, f1) = (rhs_first(&base).unwrap(), rhs_first(&scaled).unwrap());
        prop_assert!((s1 - t * s0).abs() <= 1e-12 * (1.0 + t * s0.abs()));
        prop_assert!((f1 - t * f0).abs() <= 1e-12 * (1.0 + t * f0.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matrix_elements_match_quadrature(raw in small_scenario(2, 4, 1.0)) {
        let system = system_of(&raw);
        let n = system.dim();
        for a in 0..n {
            for b in a..n {
                let (pa, pb) = (system.basis[a], system.basis[b]);
                let f = |x: f64| {
                    let q: f64 = raw.terms.iter().map(|(n, c)| c[pa.j - 1][pb.j - 1] * (*n as f64 * x).cos()).sum();
                    2.0 / PI * q * ((pa.k as f64 + 0.5) * x).cos() * ((pb.k as f64 + 0.5) * x).cos()
                };
                let oracle = adaptive_gauss_legendre(&f, 0.0, PI, 1e-13);
                let entry = system.qmat.get(a, b);
                prop_assert!((entry - oracle).abs() <= 1e-11, "({a},{b}): {entry} vs {oracle}");
                prop_assert_eq!(entry, system.qmat.get(b, a));
            }
        }
    }

    #[test]
    fn trace_powers_are_conjugate_symmetric(
        raw in small_scenario(2, 4, 0.5),
        re in -50.0f64..50.0,
        im in 0.5f64..20.0,
        s in 1usize..=4,
    ) {
        let system = system_of(&raw);
        let z = Complex64::new(re, im);
        let up = trace_power(&system, z, s).unwrap();
        let down = trace_power(&system, z.conj(), s).unwrap();
        prop_assert!((up.conj() - down).norm() <= 1e-12 * (1e-300 + up.norm()));
    }

    #[test]
    fn perturbed_levels_stay_within_the_coupling_norm(raw in small_scenario(3, 6, 1.0)) {
        let system = system_of(&raw);
        let lambda = eigvalsh(&system.full_matrix()).unwrap();
        let norm = system.q_dense().frobenius();
        for (l, m) in lambda.iter().zip(system.mu()) {
            prop_assert!((l - m).abs() <= norm * (1.0 + 1e-12) + 1e-12 * m.abs());
        }
    }

    #[test]
    fn refined_shifts_reproduce_dense_eigenvalues(raw in small_scenario(3, 6, 0.5)) {
        let system = system_of(&raw);
        let lambda = eigvalsh(&system.full_matrix()).unwrap();
        let mu = system.mu();
        let clusters = cluster_poles(&mu, default_cluster_tol(&mu));
        let shifts = refine_shifts(&system, &clusters, &lambda, system.dim()).unwrap();
        let scale = mu.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for q in 0..system.dim() {
            prop_assert!((mu[q] + shifts[q] - lambda[q]).abs() <= 1e-12 * scale, "rank {q}");
        }
        let total: f64 = shifts.iter().sum();
        let trace: f64 = (0..system.dim()).map(|q| system.q_diag(q)).sum();
        prop_assert!((total - trace).abs() <= 1e-12 * (1.0 + trace.abs()) * system.dim() as f64);
    }

    #[test]
    fn residues_close_the_contour_integral(raw in small_scenario(2, 5, 0.3)) {
        let system = system_of(&raw);
        let mu = system.mu();
        // Cut at the widest gap among the lower half of the spectrum.
        let half = mu.len() / 2;
        let n_p = (1..=half.max(1)).max_by(|&a, &b| (mu[a] - mu[a - 1]).total_cmp(&(mu[b] - mu[b - 1]))).unwrap();
        let gap = mu[n_p] - mu[n_p - 1];
        prop_assume!(gap > 1.0);
        let contour = ContourSpec::for_cut(0.5 * (mu[n_p] + mu[n_p - 1]), gap, DEFAULT_NODE_MULT).unwrap();
        let pairs = contour_d_ps_all(&system, &contour, 4).unwrap();
        let clusters = cluster_poles(&mu, default_cluster_tol(&mu));
        let inside: Vec<_> = clusters.iter().filter(|c| c.indices.iter().all(|&q| q < n_p)).collect();
        prop_assert_eq!(inside.iter().map(|c| c.indices.len()).sum::<usize>(), n_p);
        let mut sums = [0.0; 4];
        let mut scales = [0.0; 4];
        for cluster in inside {
            let (values, sc) = residues_with_scales(&system, cluster, 4, DEFAULT_NODE_MULT).unwrap();
            for s in 2..=4 {
                sums[s - 1] += values[s - 1];
                scales[s - 1] += sc[s - 1];
            }
        }
        for s in 2..=4 {
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            let from_residues = 2.0 * sign / s as f64 * sums[s - 1];
            let pair = &pairs[s - 1];
            let scale = pair.scale + 2.0 / s as f64 * scales[s - 1];
            let dev = relative_deviation(pair.series, from_residues, scale);
            prop_assert!(dev <= 1e-8, "s = {s}: {} vs {from_residues} ({dev:.3e})", pair.series);
            prop_assert!(pair.deviation() <= 1e-8, "s = {s}: forms disagree");
        }
    }
}
