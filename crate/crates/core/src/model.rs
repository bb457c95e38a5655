//! Operator parameters, the cosine-series potential and derived constants.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Relative tolerance for accepting a coefficient matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Largest Galerkin dimension accepted (dense storage of the perturbation).
pub const MAX_DIMENSION: usize = 16384;

/// One term C_n cos(nx) of the potential.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTerm {
    pub n: u32,
    pub coeff: DenseMatrix,
}

/// Q(x) = sum_n C_n cos(nx), terms sorted by frequency.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Potential {
    terms: Vec<PotentialTerm>,
}

impl Potential {
    pub fn terms(&self) -> &[PotentialTerm] {
        &self.terms
    }

    pub fn term(&self, n: u32) -> Option<&DenseMatrix> {
        self.terms
            .binary_search_by_key(&n, |t| t.n)
            .ok()
            .map(|i| &self.terms[i].coeff)
    }

    /// Diagonal entry (C_n)_{jj} with 1-based j, zero when the term is absent.
    pub fn diag(&self, n: u32, j: usize) -> f64 {
        self.term(n).map_or(0.0, |c| c[(j - 1, j - 1)])
    }

    pub fn max_frequency(&self) -> u32 {
        self.terms.last().map_or(0, |t| t.n)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coeff.max_abs() == 0.0)
    }
}

/// Unvalidated scenario content: model parameters and potential terms.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScenario {
    pub r: u32,
    pub a: f64,
    pub alpha: f64,
    pub t: usize,
    pub k_modes: usize,
    pub terms: Vec<(u32, Vec<Vec<f64>>)>,
    pub m_override: Option<usize>,
}

/// Exponents and constants of the eigenvalue asymptotics.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticConstants {
    /// mu_n ~ d1 n^beta.
    pub beta: f64,
    pub delta: f64,
    /// Default expansion order, floor(|expr|) + 1.
    pub m_star: usize,
    /// floor(|expr|) without the increment.
    pub m_floor: usize,
    /// Fitted Weyl constant of the unperturbed spectrum, when enough modes exist.
    pub d1_estimate: Option<f64>,
    /// Empirical gap constant over the selected subsequence.
    pub d2_estimate: Option<f64>,
}

impl AsymptoticConstants {
    pub fn exponents(r: u32, alpha: f64) -> (f64, f64, usize, usize) {
        let r2 = 2.0 * r as f64;
        let beta = r2 * alpha / (r2 + alpha);
        let expr = (r2 * alpha + 3.0 * r2 + 3.0 * alpha) / (r2 * alpha - r2 - alpha);
        let m_floor = expr.abs().floor() as usize;
        (beta, beta - 1.0, m_floor + 1, m_floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    pub r: u32,
    pub a: f64,
    pub alpha: f64,
    pub t: usize,
    pub k_modes: usize,
    pub potential: Potential,
    /// Expansion order in use (m_star unless overridden).
    pub m: usize,
    pub constants: AsymptoticConstants,
}

impl SpectralModel {
    /// Eigenvalue gamma_j = a j^alpha of the constant coefficient, j >= 1.
    pub fn gamma(&self, j: usize) -> f64 {
        gamma(self.a, self.alpha, j)
    }

    /// (k + 1/2)^{2r}.
    pub fn cosine_level(&self, k: usize) -> f64 {
        (k as f64 + 0.5).powi(2 * self.r as i32)
    }

    /// Unperturbed eigenvalue for basis pair (k, j).
    pub fn mu(&self, k: usize, j: usize) -> f64 {
        self.cosine_level(k) + self.gamma(j)
    }

    pub fn dimension(&self) -> usize {
        self.k_modes * self.t
    }

    /// Derivative of the potential, restricted to the orders the formulas use.
    pub fn potential_derivative(&self, x: f64, d: u32) -> Result<DenseMatrix> {
        if d > 2 * self.r + 2 {
            return Err(Error::Scenario(format!(
                "derivative order {d} exceeds 2r+2 = {}",
                2 * self.r + 2
            )));
        }
        Ok(potential_eval(&self.potential, self.t, x, d))
    }
}

pub fn gamma(a: f64, alpha: f64, j: usize) -> f64 {
    a * (j as f64).powf(alpha)
}

/// d-th derivative of Q at x: sum_n C_n n^d cos(nx + d pi/2).
pub fn potential_eval(potential: &Potential, t: usize, x: f64, d: u32) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(t);
    for term in potential.terms() {
        let n = term.n as f64;
        let scale = if d == 0 { 1.0 } else { n.powi(d as i32) };
        if scale == 0.0 {
            continue;
        }
        let phase = match d % 4 {
            0 => (n * x).cos(),
            1 => -(n * x).sin(),
            2 => -(n * x).cos(),
            _ => (n * x).sin(),
        };
        let w = scale * phase;
        for i in 0..t {
            for j in 0..t {
                out[(i, j)] += w * term.coeff[(i, j)];
            }
        }
    }
    out
}

pub fn validate_scenario(raw: &RawScenario) -> Result<SpectralModel> {
    if raw.r < 1 {
        return Err(Error::Scenario("r must be a positive integer".into()));
    }
    if !(raw.a.is_finite() && raw.a > 0.0) {
        return Err(Error::Scenario(format!("a must be positive, got {}", raw.a)));
    }
    if !(raw.alpha.is_finite() && raw.alpha > 0.0) {
        return Err(Error::Scenario(format!("alpha must be positive, got {}", raw.alpha)));
    }
    let r2 = 2.0 * raw.r as f64;
    let threshold = r2 / (r2 - 1.0);
    if raw.alpha <= threshold {
        return Err(Error::Hypothesis(format!(
            "alpha = {} must exceed 2r/(2r-1) = {threshold}",
            raw.alpha
        )));
    }
    if raw.t < 1 || raw.k_modes < 1 {
        return Err(Error::Scenario("T and K must be at least 1".into()));
    }
    let dim = raw.t.checked_mul(raw.k_modes).unwrap_or(usize::MAX);
    if dim > MAX_DIMENSION {
        return Err(Error::Scenario(format!(
            "Galerkin dimension K*T = {dim} exceeds {MAX_DIMENSION}"
        )));
    }
    let top = (raw.k_modes as f64 - 0.5).powi(2 * raw.r as i32);
    if !top.is_finite() {
        return Err(Error::Scenario("cosine levels overflow; reduce K or r".into()));
    }
    if raw.m_override == Some(0) {
        return Err(Error::Scenario("m must be at least 1".into()));
    }

    let mut terms: Vec<PotentialTerm> = Vec::with_capacity(raw.terms.len());
    for (n, rows) in &raw.terms {
        if terms.iter().any(|t| t.n == *n) {
            return Err(Error::Scenario(format!("duplicate term for n = {n}")));
        }
        if rows.len() != raw.t || rows.iter().any(|row| row.len() != raw.t) {
            return Err(Error::Scenario(format!(
                "coefficient matrix for n = {n} must be {0}x{0}",
                raw.t
            )));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Scenario(format!("non-finite coefficient for n = {n}")));
        }
        let c = DenseMatrix::from_rows(rows);
        let asymmetry = c.asymmetry();
        if asymmetry > SYMMETRY_TOL * c.max_abs().max(1.0) {
            return Err(Error::NonSymmetric { n: *n, asymmetry });
        }
        let mut sym = c.clone();
        for i in 0..raw.t {
            for j in 0..raw.t {
                sym[(i, j)] = 0.5 * (c[(i, j)] + c[(j, i)]);
            }
        }
        terms.push(PotentialTerm { n: *n, coeff: sym });
    }
    terms.sort_by_key(|t| t.n);
    let potential = Potential { terms };
    check_endpoint_condition(&potential, raw.t, raw.r)?;

    let (beta, delta, m_star, m_floor) = AsymptoticConstants::exponents(raw.r, raw.alpha);
    let mut model = SpectralModel {
        r: raw.r,
        a: raw.a,
        alpha: raw.alpha,
        t: raw.t,
        k_modes: raw.k_modes,
        potential,
        m: raw.m_override.unwrap_or(m_star),
        constants: AsymptoticConstants {
            beta,
            delta,
            m_star,
            m_floor,
            d1_estimate: None,
            d2_estimate: None,
        },
    };
    let (d1, d2) = crate::traces::estimate_constants(&model);
    model.constants.d1_estimate = d1;
    model.constants.d2_estimate = d2;
    Ok(model)
}

/// Odd derivatives of orders 1, 3, ..., 2r+1 must vanish at both endpoints.
/// Cosine series satisfy this identically; the check guards the evaluation
/// path and rejects nothing but numerical garbage.
fn check_endpoint_condition(potential: &Potential, t: usize, r: u32) -> Result<()> {
    for i in 0..=r {
        let order = 2 * i + 1;
        let scale: f64 = potential
            .terms()
            .iter()
            .map(|term| (term.n as f64).powi(order as i32) * term.coeff.max_abs())
            .sum();
        let tolerance = 1e-12 * (1.0 + scale);
        for x in [0.0, std::f64::consts::PI] {
            let deviation = potential_eval(potential, t, x, order).max_abs();
            if deviation > tolerance {
                return Err(Error::EndpointCondition {
                    order,
                    deviation,
                    tolerance,
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    pub(crate) fn raw(r: u32, alpha: f64) -> RawScenario {
        RawScenario {
            r,
            a: 1.0,
            alpha,
            t: 2,
            k_modes: 8,
            terms: vec![(1, vec![vec![0.5, 0.1], vec![0.1, 0.3]])],
            m_override: None,
        }
    }

    #[test]
    fn accepts_reference_exponents() {
        let m = validate_scenario(&raw(1, 3.0)).unwrap();
        assert!((m.constants.beta - 1.2).abs() < 1e-15);
        assert!((m.constants.delta - 0.2).abs() < 1e-15);
        // (6 + 6 + 9) / (6 - 2 - 3) = 21 -> m_star = 22.
        assert_eq!(m.constants.m_star, 22);
        assert_eq!(m.constants.m_floor, 21);
        assert_eq!(m.m, 22);
    }

    #[test]
    fn m_star_for_fourth_order() {
        // r = 2, alpha = 4: (16 + 12 + 12) / (16 - 4 - 4) = 5 -> 6.
        let (beta, _, m_star, _) = AsymptoticConstants::exponents(2, 4.0);
        assert!((beta - 2.0).abs() < 1e-15);
        assert_eq!(m_star, 6);
    }

    #[test]
    fn rejects_alpha_at_or_below_threshold() {
        assert!(matches!(
            validate_scenario(&raw(1, 2.0)),
            Err(Error::Hypothesis(_))
        ));
        assert!(matches!(
            validate_scenario(&raw(1, 1.5)),
            Err(Error::Hypothesis(_))
        ));
        // r = 2 threshold is 4/3.
        assert!(validate_scenario(&raw(2, 1.4)).is_ok());
    }

    #[test]
    fn rejects_asymmetric_and_malformed_terms() {
        let mut s = raw(1, 3.0);
        s.terms = vec![(2, vec![vec![1.0, 0.2], vec![0.1, 1.0]])];
        assert!(matches!(validate_scenario(&s), Err(Error::NonSymmetric { n: 2, .. })));

        let mut s = raw(1, 3.0);
        s.terms = vec![(2, vec![vec![1.0, 0.2]])];
        assert!(matches!(validate_scenario(&s), Err(Error::Scenario(_))));

        let mut s = raw(1, 3.0);
        s.terms.push((1, vec![vec![0.0; 2]; 2]));
        assert!(matches!(validate_scenario(&s), Err(Error::Scenario(_))));

        let mut s = raw(1, 3.0);
        s.k_modes = 9000;
        assert!(matches!(validate_scenario(&s), Err(Error::Scenario(_))));
    }

    #[test]
    fn tiny_asymmetry_is_symmetrized() {
        let mut s = raw(1, 3.0);
        s.terms = vec![(1, vec![vec![1.0, 0.2], vec![0.2 + 1e-14, 1.0]])];
        let m = validate_scenario(&s).unwrap();
        assert_eq!(m.potential.term(1).unwrap().asymmetry(), 0.0);
    }

    #[test]
    fn gamma_is_exact_power() {
        let m = validate_scenario(&raw(1, 3.0)).unwrap();
        assert_eq!(m.gamma(1), 1.0);
        assert_eq!(m.gamma(2), 8.0);
        assert_eq!(m.mu(0, 1), 1.25);
        assert_eq!(m.mu(1, 2), 10.25);
    }

    #[test]
    fn second_derivative_of_cosine_at_pi() {
        let m = validate_scenario(&raw(1, 3.0)).unwrap();
        let c1 = m.potential.term(1).unwrap().clone();
        // d^2/dx^2 cos x = -cos x, equal to +1 at x = pi.
        let q2 = m.potential_derivative(PI, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((q2[(i, j)] - c1[(i, j)]).abs() < 1e-15);
            }
        }
        assert!(m.potential_derivative(0.0, 5).is_err());
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let mut s = raw(1, 3.0);
        s.terms = vec![
            (0, vec![vec![0.3, 0.0], vec![0.0, 0.1]]),
            (2, vec![vec![0.5, 0.1], vec![0.1, -0.3]]),
            (3, vec![vec![0.2, 0.4], vec![0.4, 0.7]]),
        ];
        let m = validate_scenario(&s).unwrap();
        let h = 1e-5;
        for d in 0..4 {
            for &x in &[0.3, 1.1, 2.9] {
                let fd = {
                    let p = potential_eval(&m.potential, 2, x + h, d);
                    let q = potential_eval(&m.potential, 2, x - h, d);
                    (p[(0, 1)] - q[(0, 1)]) / (2.0 * h)
                };
                let exact = potential_eval(&m.potential, 2, x, d + 1)[(0, 1)];
                assert!((fd - exact).abs() < 1e-6, "d={d} x={x}: {fd} vs {exact}");
            }
        }
    }
}
