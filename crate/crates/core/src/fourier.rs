//! Cosine-series side of the second trace: the diagonal profiles
//! h_j(x) = (Q(x)φ_j, φ_j), integration by parts against cos((2k+1)x), the
//! absolute-convergence bound and the endpoint evaluation of the
//! oscillatory sum.

use crate::eigen::eigvalsh;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{potential_eval, SpectralModel};
use crate::quadrature::composite_gauss_legendre;
use std::f64::consts::{FRAC_PI_2, PI};

/// Panels and order of the composite Gauss-Legendre rule used by the checks.
pub const CHECK_PANELS: usize = 64;
pub const CHECK_ORDER: usize = 8;

/// Cosine series of h_j: pairs (n, (C_n)_{jj}) with non-zero coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalProfile {
    pub j: usize,
    pub coefficients: Vec<(u32, f64)>,
}

impl DiagonalProfile {
    pub fn new(model: &SpectralModel, j: usize) -> Self {
        let coefficients = model
            .potential
            .terms()
            .iter()
            .map(|t| (t.n, t.coeff[(j - 1, j - 1)]))
            .filter(|(_, c)| *c != 0.0)
            .collect();
        Self { j, coefficients }
    }

    pub fn coefficient(&self, n: u32) -> f64 {
        self.coefficients
            .iter()
            .find(|(m, _)| *m == n)
            .map_or(0.0, |(_, c)| *c)
    }

    /// h_j^{(d)}(x).
    pub fn eval(&self, x: f64, d: u32) -> f64 {
        self.coefficients
            .iter()
            .map(|&(n, c)| {
                let nf = n as f64;
                let scale = if d == 0 { 1.0 } else { nf.powi(d as i32) };
                let phase = match d % 4 {
                    0 => (nf * x).cos(),
                    1 => -(nf * x).sin(),
                    2 => -(nf * x).cos(),
                    _ => (nf * x).sin(),
                };
                c * scale * phase
            })
            .sum()
    }

    pub fn max_frequency(&self) -> u32 {
        self.coefficients.iter().map(|(n, _)| *n).max().unwrap_or(0)
    }
}

/// ∫_0^π cos(nx) cos(mx) dx.
fn cosine_product(n: u32, m: u32) -> f64 {
    match (n == m, n) {
        (true, 0) => PI,
        (true, _) => FRAC_PI_2,
        _ => 0.0,
    }
}

/// ∫_0^π h_j(x) cos((2k+1)x) dx = (π/2)(C_{2k+1})_{jj}.
pub fn h_fourier_coeff(profile: &DiagonalProfile, k: usize) -> f64 {
    FRAC_PI_2 * profile.coefficient(2 * k as u32 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbpCheck {
    /// ∫ h_j cos((2k+1)x) dx in closed form.
    pub lhs: f64,
    /// ((−1)^{r+1}/(2k+1)^{2r+2}) ∫ h_j^{(2r+2)} cos((2k+1)x) dx by quadrature.
    pub rhs: f64,
    /// The same right-hand side in closed form.
    pub rhs_closed: f64,
}

/// Integration by parts 2r+2 times against cos((2k+1)x).
pub fn ibp_identity_check(profile: &DiagonalProfile, k: usize, r: u32) -> IbpCheck {
    let freq = 2 * k as u32 + 1;
    let order = 2 * r + 2;
    let sign = if (r + 1) % 2 == 0 { 1.0 } else { -1.0 };
    let factor = sign / (freq as f64).powi(order as i32);

    let lhs = h_fourier_coeff(profile, k);
    // Derivative series: d^{2r+2} cos(nx) = (−1)^{r+1} n^{2r+2} cos(nx).
    let rhs_closed = factor
        * profile
            .coefficients
            .iter()
            .map(|&(n, c)| sign * c * (n as f64).powi(order as i32) * cosine_product(n, freq))
            .sum::<f64>();
    // Keep at least one panel per half period of the fastest factor.
    let top = freq + profile.max_frequency();
    let panels = CHECK_PANELS * (top as usize).div_ceil(CHECK_PANELS).max(1);
    let quad = composite_gauss_legendre(
        |x| profile.eval(x, order) * (freq as f64 * x).cos(),
        0.0,
        PI,
        panels,
        CHECK_ORDER,
    );
    IbpCheck {
        lhs,
        rhs: factor * quad,
        rhs_closed,
    }
}

/// Sum of singular values of a square matrix, from the eigenvalues of MᵀM.
pub fn nuclear_norm(m: &DenseMatrix) -> Result<f64> {
    let gram = m.transpose().matmul(m);
    Ok(eigvalsh(&gram)?.iter().map(|v| v.max(0.0).sqrt()).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsoluteSeries {
    /// partial_sums[i] sums k < i+1.
    pub partial_sums: Vec<f64>,
    pub bound: f64,
    /// Smallest K_limit from which the partial sums no longer change.
    pub stabilization_index: usize,
}

impl AbsoluteSeries {
    pub fn total(&self) -> f64 {
        self.partial_sums.last().copied().unwrap_or(0.0)
    }
}

/// Absolute partial sums of Σ_k Σ_j [(k+1/2)^{2r} + γ_j]·∫h_j cos((2k+1)x)
/// and the bound (π²/8)·∫_0^π [‖Q^{(2r+2)}‖_* + ‖A Q″‖_*] dx.
pub fn absolute_series(model: &SpectralModel, k_limit: usize) -> Result<AbsoluteSeries> {
    let profiles: Vec<DiagonalProfile> = (1..=model.t).map(|j| DiagonalProfile::new(model, j)).collect();
    let mut partial_sums = Vec::with_capacity(k_limit);
    let mut acc = 0.0;
    for k in 0..k_limit {
        for p in &profiles {
            acc += ((model.cosine_level(k) + model.gamma(p.j)) * h_fourier_coeff(p, k)).abs();
        }
        partial_sums.push(acc);
    }

    let t = model.t;
    let high = 2 * model.r + 2;
    let gammas: Vec<f64> = (1..=t).map(|j| model.gamma(j)).collect();
    let integrand = |x: f64| -> f64 {
        let qh = potential_eval(&model.potential, t, x, high);
        let q2 = potential_eval(&model.potential, t, x, 2);
        let mut aq2 = q2.clone();
        for i in 0..t {
            for j in 0..t {
                aq2[(i, j)] = gammas[i] * q2[(i, j)];
            }
        }
        match (nuclear_norm(&qh), nuclear_norm(&aq2)) {
            (Ok(a), Ok(b)) => a + b,
            _ => f64::NAN,
        }
    };
    let panels = CHECK_PANELS * (model.potential.max_frequency() as usize).div_ceil(CHECK_PANELS).max(1);
    let integral = composite_gauss_legendre(integrand, 0.0, PI, panels, CHECK_ORDER);
    if !integral.is_finite() {
        return Err(Error::Invariant("nuclear-norm integral is not finite".into()));
    }
    let bound = PI * PI / 8.0 * integral;

    if partial_sums.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Invariant("absolute partial sums decrease".into()));
    }
    let total = partial_sums.last().copied().unwrap_or(0.0);
    if total > bound * (1.0 + 1e-12) {
        return Err(Error::Invariant(format!(
            "absolute partial sum {total} exceeds the bound {bound}"
        )));
    }
    let stabilization_index = partial_sums
        .iter()
        .position(|&v| v == total)
        .map_or(0, |i| if total == 0.0 { 0 } else { i + 1 });
    Ok(AbsoluteSeries {
        partial_sums,
        bound,
        stabilization_index,
    })
}

/// (2/π)·Σ_k Σ_j [(k+1/2)^{2r} + γ_j]·∫h_j cos((2k+1)x) dx, summed over the
/// finite cosine support.
pub fn oscillatory_sum(model: &SpectralModel) -> f64 {
    let kmax = (model.potential.max_frequency() as usize) / 2 + 1;
    let mut acc = 0.0;
    for j in 1..=model.t {
        let p = DiagonalProfile::new(model, j);
        for k in 0..kmax {
            acc += (model.cosine_level(k) + model.gamma(j)) * h_fourier_coeff(&p, k);
        }
    }
    2.0 / PI * acc
}

/// The oscillatory-sum limit, required to match the closed-form second-trace
/// right-hand side.
pub fn oscillatory_sum_limit(model: &SpectralModel) -> Result<f64> {
    let direct = oscillatory_sum(model);
    let rhs = crate::traces::rhs_second(model)?;
    if (direct - rhs).abs() > 1e-12 * (1.0 + rhs.abs()) {
        return Err(Error::InternalConsistency(format!(
            "oscillatory limit {direct} differs from the right-hand side {rhs}"
        )));
    }
    Ok(direct)
}

/// Same limit through the Fourier cosine series of
/// g_j = (−1/4)^r h_j^{(2r)} + γ_j h_j with weights M_0 = 1/π, M_k = 2/π,
/// evaluated at both endpoints: Σ_j [g_j(0) − g_j(π)]/2.
pub fn oscillatory_limit_by_endpoints(model: &SpectralModel) -> f64 {
    let r = model.r;
    let quarter = (-0.25f64).powi(r as i32);
    let deriv_sign = if r % 2 == 0 { 1.0 } else { -1.0 };
    let mut total = 0.0;
    for j in 1..=model.t {
        let p = DiagonalProfile::new(model, j);
        let gamma = model.gamma(j);
        // Cosine coefficients of g_j.
        let g: Vec<(u32, f64)> = p
            .coefficients
            .iter()
            .map(|&(n, c)| {
                let d2r = deriv_sign * (n as f64).powi(2 * r as i32) * c;
                (n, quarter * d2r + gamma * c)
            })
            .collect();
        let top = p.max_frequency();
        let (mut at0, mut at_pi) = (0.0, 0.0);
        for k in 0..=top {
            let integral: f64 = g.iter().map(|&(n, c)| c * cosine_product(n, k)).sum();
            let weight = if k == 0 { 1.0 / PI } else { 2.0 / PI };
            let a_k = weight * integral;
            at0 += a_k;
            at_pi += a_k * (k as f64 * PI).cos();
        }
        total += 0.5 * (at0 - at_pi);
    }
    total
}
