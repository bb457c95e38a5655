//! Resolvent-trace calculus on the Galerkin system: traces of powers of
//! B(λ) = Q·diag(1/(μ−λ)), residues at unperturbed eigenvalues, contour
//! integrals of the expansion terms and of the remainder.

use crate::eigen::{eigh, SpectrumResult};
use crate::error::{Error, Result};
use crate::galerkin::GalerkinSystem;
use crate::linalg::CsrMatrix;
use num_complex::Complex64;
use std::f64::consts::PI;

/// Smallest node count on any circle.
pub const MIN_NODES: usize = 64;
/// Smallest accepted node multiplier (nodes per radius/gap unit).
pub const MIN_NODE_MULT: usize = 16;
/// Default node multiplier; the trapezoid error on a cut contour is about
/// exp(-mult/4) relative to the integrand.
pub const DEFAULT_NODE_MULT: usize = 128;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Equispaced circle for the trapezoidal rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourSpec {
    pub center: f64,
    pub radius: f64,
    pub nodes: usize,
}

impl ContourSpec {
    /// max(64, mult·ceil(radius/gap)).
    pub fn nodes_for(radius: f64, gap: f64, mult: usize) -> usize {
        let ratio = (radius / gap).ceil().max(1.0);
        MIN_NODES.max((mult as f64 * ratio).min(1e9) as usize)
    }

    /// Circle of radius b about the origin for a cut with spectral gap `gap`.
    pub fn for_cut(b: f64, gap: f64, mult: usize) -> Result<Self> {
        check_multiplier(mult)?;
        Ok(Self {
            center: 0.0,
            radius: b,
            nodes: Self::nodes_for(b, gap, mult),
        })
    }

    /// Node λ_n and weight w_n with (1/2πi)∮ f dλ ≈ Σ f(λ_n) w_n. Nodes are
    /// offset by half a step so that they come in conjugate pairs.
    fn node(&self, n: usize) -> (Complex64, Complex64) {
        let (offset, w) = self.node_offset(n);
        (self.center + offset, w)
    }

    /// Node position relative to the centre, and its weight.
    fn node_offset(&self, n: usize) -> (Complex64, Complex64) {
        let theta = 2.0 * PI * (n as f64 + 0.5) / self.nodes as f64;
        let offset = Complex64::from_polar(self.radius, theta);
        (offset, offset / self.nodes as f64)
    }
}

pub fn check_multiplier(mult: usize) -> Result<()> {
    if mult < MIN_NODE_MULT {
        return Err(Error::Quadrature(format!(
            "node multiplier {mult} below the minimum {MIN_NODE_MULT}"
        )));
    }
    Ok(())
}

/// Unperturbed eigenvalues sharing a value (within tolerance).
#[derive(Debug, Clone, PartialEq)]
pub struct PoleCluster {
    pub value: f64,
    pub indices: Vec<usize>,
    /// Half the distance to the nearest μ outside the cluster.
    pub radius: f64,
}

/// Default clustering tolerance: 1e-9 of the largest |μ|.
pub fn default_cluster_tol(mu: &[f64]) -> f64 {
    1e-9 * mu.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Partition the sorted unperturbed eigenvalues into clusters.
pub fn cluster_poles(mu: &[f64], tol: f64) -> Vec<PoleCluster> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &m) in mu.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if m - mu[g[0]] <= tol => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let mut clusters = Vec::with_capacity(groups.len());
    for (c, g) in groups.iter().enumerate() {
        let value = g.iter().map(|&i| mu[i]).sum::<f64>() / g.len() as f64;
        let mut nearest = f64::INFINITY;
        if c > 0 {
            nearest = nearest.min(value - mu[*groups[c - 1].last().unwrap()]);
        }
        if c + 1 < groups.len() {
            nearest = nearest.min(mu[groups[c + 1][0]] - value);
        }
        if !nearest.is_finite() {
            nearest = value.abs().max(1.0);
        }
        clusters.push(PoleCluster {
            value,
            indices: g.clone(),
            radius: 0.5 * nearest,
        });
    }
    clusters
}

fn max_abs_mu(system: &GalerkinSystem) -> f64 {
    system.basis.iter().fold(0.0f64, |m, b| m.max(b.mu.abs()))
}

/// 1/(μ_q − λ) for every basis state, rejecting λ too close to a pole.
fn unperturbed_resolvent(system: &GalerkinSystem, lambda: Complex64) -> Result<Vec<Complex64>> {
    let floor = 1e-8 * max_abs_mu(system).max(1.0);
    system
        .basis
        .iter()
        .enumerate()
        .map(|(q, b)| {
            let d = b.mu - lambda;
            if d.norm() < floor {
                Err(Error::PoleProximity { index: q + 1, mu: b.mu })
            } else {
                Ok(d.inv())
            }
        })
        .collect()
}

/// tr(B^s) and tr(R⁰B^s) for s = 1..=s_max, index s−1.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePowers {
    pub plain: Vec<Complex64>,
    pub resolvent: Vec<Complex64>,
}

/// tr(B(λ)^s) with B(λ) = Q·diag(1/(μ−λ)).
pub fn trace_power(system: &GalerkinSystem, lambda: Complex64, s: usize) -> Result<Complex64> {
    Ok(trace_powers(system, lambda, s)?.plain[s - 1])
}

/// All trace powers up to s_max at one point, by sparse column walks: the
/// diagonal entry (B^s)_ii is read off the walk started at e_i.
pub fn trace_powers(system: &GalerkinSystem, lambda: Complex64, s_max: usize) -> Result<TracePowers> {
    let r = unperturbed_resolvent(system, lambda)?;
    let n = system.dim();
    let q = &system.qmat;
    let mut plain = vec![ZERO; s_max];
    let mut resolvent = vec![ZERO; s_max];
    if s_max == 0 {
        return Ok(TracePowers { plain, resolvent });
    }

    let mut walker = SparseWalker::new(n);
    for i in 0..n {
        walker.start(i, r[i]);
        for s in 1..=s_max {
            if s > 1 {
                walker.step(q, &r);
            } else {
                walker.first_step(q, i);
            }
            let d = walker.value(i);
            plain[s - 1] += d;
            resolvent[s - 1] += d * r[i];
            if walker.is_empty() {
                break;
            }
        }
    }
    Ok(TracePowers { plain, resolvent })
}

/// Complex vector with tracked support, for repeated products with B.
struct SparseWalker {
    x: Vec<Complex64>,
    y: Vec<Complex64>,
    active: Vec<usize>,
    next: Vec<usize>,
    mark: Vec<bool>,
    seed_weight: Complex64,
}

impl SparseWalker {
    fn new(n: usize) -> Self {
        Self {
            x: vec![ZERO; n],
            y: vec![ZERO; n],
            active: Vec::new(),
            next: Vec::new(),
            mark: vec![false; n],
            seed_weight: ZERO,
        }
    }

    fn start(&mut self, _i: usize, weight: Complex64) {
        for &k in &self.active {
            self.x[k] = ZERO;
        }
        self.active.clear();
        self.seed_weight = weight;
    }

    /// x = B e_i = r_i Q e_i.
    fn first_step(&mut self, q: &CsrMatrix, i: usize) {
        for (k, v) in q.row(i) {
            self.x[k] = self.seed_weight * v;
            self.active.push(k);
        }
    }

    /// x ← Q (r ⊙ x), using the symmetry of Q to scatter rows.
    fn step(&mut self, q: &CsrMatrix, r: &[Complex64]) {
        self.next.clear();
        for &j in &self.active {
            let c = self.x[j] * r[j];
            self.x[j] = ZERO;
            if c == ZERO {
                continue;
            }
            for (k, v) in q.row(j) {
                if !self.mark[k] {
                    self.mark[k] = true;
                    self.next.push(k);
                }
                self.y[k] += c * v;
            }
        }
        for &k in &self.next {
            self.mark[k] = false;
        }
        std::mem::swap(&mut self.x, &mut self.y);
        std::mem::swap(&mut self.active, &mut self.next);
    }

    fn value(&self, i: usize) -> Complex64 {
        self.x[i]
    }

    fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

/// Trapezoidal (1/2πi)∮ f dλ; returns the sum and Σ|terms| for the
/// imaginary-part check.
fn circle_sum<F>(contour: &ContourSpec, mut f: F) -> Result<(Complex64, f64)>
where
    F: FnMut(Complex64) -> Result<Complex64>,
{
    let mut sum = ZERO;
    let mut scale = 0.0;
    for n in 0..contour.nodes {
        let (lambda, w) = contour.node(n);
        let term = f(lambda)? * w;
        sum += term;
        scale += term.norm();
    }
    Ok((sum, scale))
}

fn real_part_checked(value: Complex64, scale: f64, tol: f64, what: &str) -> Result<f64> {
    if value.im.abs() > tol * (value.re.abs() + scale) {
        return Err(Error::Quadrature(format!(
            "{what}: imaginary part {:.3e} against real part {:.3e}",
            value.im, value.re
        )));
    }
    Ok(value.re)
}

/// Number of values enclosed by the circle and the gap used for its
/// separation test: μ_{n+1} − μ_n if the circle separates two values, twice
/// the distance to the nearest value otherwise.
fn enclosed_and_gap(contour: &ContourSpec, mu: &[f64]) -> (usize, f64) {
    let inside = |v: f64| (v - contour.center).abs() < contour.radius;
    let n = mu.iter().filter(|&&v| inside(v)).count();
    let below = mu.iter().copied().filter(|&v| inside(v)).fold(f64::NEG_INFINITY, f64::max);
    let above = mu.iter().copied().filter(|&v| !inside(v)).fold(f64::INFINITY, f64::min);
    let edge = contour.center + contour.radius;
    let gap = match (below.is_finite(), above.is_finite()) {
        (true, true) => above - below,
        (true, false) => 2.0 * (edge - below),
        (false, true) => 2.0 * (above - edge),
        (false, false) => f64::INFINITY,
    };
    (n, gap)
}

/// Enforce the ContourSpec invariants against μ (and λ when given); returns
/// the number of enclosed unperturbed eigenvalues.
pub fn check_contour(contour: &ContourSpec, mu: &[f64], lambda: Option<&[f64]>) -> Result<usize> {
    let (n, gap) = enclosed_and_gap(contour, mu);
    if !(gap > 0.0) {
        return Err(Error::ContourSelection("contour does not separate the spectrum".into()));
    }
    let sep = 0.25 * gap;
    let too_close = |v: f64| ((v - contour.center).abs() - contour.radius).abs() < sep;
    if let Some(q) = mu.iter().position(|&v| too_close(v)) {
        return Err(Error::ContourSelection(format!(
            "mu_{} = {} lies within gap/4 of the contour",
            q + 1,
            mu[q]
        )));
    }
    if let Some(lam) = lambda {
        if let Some(q) = lam.iter().position(|&v| too_close(v)) {
            return Err(Error::ContourSelection(format!(
                "lambda_{} = {} lies within gap/4 of the contour",
                q + 1,
                lam[q]
            )));
        }
        let inside = lam
            .iter()
            .filter(|&&v| (v - contour.center).abs() < contour.radius)
            .count();
        if inside != n {
            return Err(Error::ContourSelection(format!(
                "contour encloses {n} unperturbed but {inside} perturbed eigenvalues"
            )));
        }
    }
    let needed = if gap.is_finite() {
        MIN_NODE_MULT as f64 * (contour.radius / gap).ceil()
    } else {
        0.0
    };
    if contour.nodes < MIN_NODES || (contour.nodes as f64) < needed {
        return Err(Error::Quadrature(format!(
            "{} nodes are too few for radius {} and gap {gap}",
            contour.nodes, contour.radius
        )));
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpsForm {
    /// ((−1)^{s+1}/2πi)∮ λ² tr(R⁰(QR⁰)^s) dλ.
    Resolvent,
    /// ((−1)^s/πis)∮ λ tr((QR⁰)^s) dλ.
    Series,
}

pub fn contour_d_ps(system: &GalerkinSystem, contour: &ContourSpec, s: usize, form: DpsForm) -> Result<f64> {
    let all = contour_d_ps_all(system, contour, s)?;
    Ok(match form {
        DpsForm::Resolvent => all[s - 1].resolvent,
        DpsForm::Series => all[s - 1].series,
    })
}

/// Both forms of D_ps, with the rounding-noise level of the quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpsPair {
    pub resolvent: f64,
    pub series: f64,
    /// Σ|terms| of the larger of the two sums, in the units of D_ps; a few
    /// machine epsilons of this is rounding noise.
    pub scale: f64,
}

impl DpsPair {
    /// Relative disagreement. Values that cancel down to the rounding level
    /// are measured against 1e9·eps·scale, so that 1e-8 relative admits ten
    /// epsilons of the summed magnitude.
    pub fn deviation(&self) -> f64 {
        relative_deviation(self.resolvent, self.series, self.scale)
    }
}

/// |a − b| / max(|a|, |b|, 1e9·eps·scale).
pub fn relative_deviation(a: f64, b: f64, scale: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e9 * f64::EPSILON * scale)
}

/// Both forms for s = 1..=s_max in one pass.
pub fn contour_d_ps_all(system: &GalerkinSystem, contour: &ContourSpec, s_max: usize) -> Result<Vec<DpsPair>> {
    check_contour(contour, &system.mu(), None)?;
    let mut res_sum = vec![ZERO; s_max];
    let mut res_scale = vec![0.0; s_max];
    let mut th_sum = vec![ZERO; s_max];
    let mut th_scale = vec![0.0; s_max];
    for n in 0..contour.nodes {
        let (lambda, w) = contour.node(n);
        let tp = trace_powers(system, lambda, s_max)?;
        for s in 0..s_max {
            let a = lambda * lambda * tp.resolvent[s] * w;
            let b = lambda * tp.plain[s] * w;
            res_sum[s] += a;
            res_scale[s] += a.norm();
            th_sum[s] += b;
            th_scale[s] += b.norm();
        }
    }
    (0..s_max)
        .map(|i| {
            let s = i + 1;
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            let a = real_part_checked(res_sum[i], res_scale[i], 1e-8, "D_ps (resolvent form)")?;
            let b = real_part_checked(th_sum[i], th_scale[i], 1e-8, "D_ps (series form)")?;
            let factor = 2.0 / s as f64;
            Ok(DpsPair {
                resolvent: -sign * a,
                series: factor * sign * b,
                scale: res_scale[i].max(factor * th_scale[i]),
            })
        })
        .collect()
}

/// D_p1 in the series form, −(1/πi)∮ λ Σ_q Q_qq/(μ_q−λ) dλ: for s = 1 only
/// the diagonal of Q enters the trace, so each node costs O(N).
pub fn contour_d_p1(system: &GalerkinSystem, contour: &ContourSpec) -> Result<f64> {
    let mu = system.mu();
    check_contour(contour, &mu, None)?;
    let diag: Vec<(f64, f64)> = (0..system.dim())
        .map(|q| (mu[q], system.q_diag(q)))
        .filter(|&(_, d)| d != 0.0)
        .collect();
    let (sum, scale) = circle_sum(contour, |z| {
        let mut acc = ZERO;
        for &(m, d) in &diag {
            acc += d / (m - z);
        }
        Ok(z * acc)
    })?;
    Ok(-2.0 * real_part_checked(sum, scale, 1e-8, "D_p1")?)
}

/// (1/2πi)∮ λ tr(B^s) dλ, the sum of enclosed residues.
pub fn contour_trace_moment(system: &GalerkinSystem, contour: &ContourSpec, s: usize) -> Result<f64> {
    let (sum, scale) = circle_sum(contour, |lambda| Ok(lambda * trace_power(system, lambda, s)?))?;
    real_part_checked(sum, scale, 1e-8, "trace moment")
}

/// −(1/2πi)∮ λ² Σ_q [1/(λ_q−λ) − 1/(μ_q−λ)] dλ.
pub fn contour_second_moment(system: &GalerkinSystem, lambda_values: &[f64], contour: &ContourSpec) -> Result<f64> {
    let shifts: Vec<f64> = lambda_values.iter().zip(system.mu()).map(|(l, m)| l - m).collect();
    contour_second_moment_shifted(system, &shifts, contour)
}

/// The same integral from the shifts d_q = λ_q − μ_q, with the integrand
/// written as Σ_q −d_q/((λ_q−λ)(μ_q−λ)) so no difference of resolvents is
/// formed.
pub fn contour_second_moment_shifted(system: &GalerkinSystem, shifts: &[f64], contour: &ContourSpec) -> Result<f64> {
    let mu = system.mu();
    let lambda_values: Vec<f64> = mu.iter().zip(shifts).map(|(m, d)| m + d).collect();
    check_contour(contour, &mu, Some(&lambda_values))?;
    let terms: Vec<(f64, f64, f64)> = mu
        .iter()
        .zip(shifts)
        .filter(|&(_, &d)| d != 0.0)
        .map(|(&m, &d)| (m + d, m, -d))
        .collect();
    let (sum, scale) = circle_sum(contour, |z| {
        let mut acc = ZERO;
        for &(l, m, d) in &terms {
            acc += d / ((l - z) * (m - z));
        }
        Ok(z * z * acc)
    })?;
    Ok(-real_part_checked(sum, scale, 1e-8, "second moment")?)
}

/// Residue at a singleton pole for s = 2:
/// Q_qq² − 2μ_q Σ_{b≠q} Q_qb²/(μ_b − μ_q).
pub fn residue_s2_closed_form(system: &GalerkinSystem, q: usize) -> f64 {
    let mu_q = system.basis[q].mu;
    let mut cross = 0.0;
    for (b, v) in system.qmat.row(q) {
        if b != q {
            cross += v * v / (system.basis[b].mu - mu_q);
        }
    }
    let qq = system.q_diag(q);
    qq * qq - 2.0 * mu_q * cross
}

/// Residue of λ·tr(B^s) at the cluster value, closed form where available.
pub fn residue_at_pole(system: &GalerkinSystem, cluster: &PoleCluster, s: usize, mult: usize) -> Result<f64> {
    if s < 2 {
        return Err(Error::Quadrature("residues are defined for s >= 2".into()));
    }
    if s == 2 && cluster.indices.len() == 1 {
        check_cluster(system, cluster)?;
        return Ok(residue_s2_closed_form(system, cluster.indices[0]));
    }
    Ok(residues_by_quadrature(system, cluster, s, mult)?[s - 1])
}

fn check_cluster(system: &GalerkinSystem, cluster: &PoleCluster) -> Result<()> {
    if !(cluster.radius >= 1e-10 * max_abs_mu(system)) {
        return Err(Error::DegenerateGap {
            value: cluster.value,
            radius: cluster.radius,
        });
    }
    Ok(())
}

/// Residues of λ·tr(B^s) at a cluster for s = 1..=s_max (index s−1), by
/// trapezoidal quadrature on the circle of radius cluster.radius/2.
///
/// B is split as B_reg + U·Z·Eᵀ, with Z the cluster's own resolvent entries
/// and B_reg the rest. The part of tr(B^s) without any Z factor is analytic
/// inside the circle and integrates to zero, so only the words containing Z
/// are formed:
///   tr(B^s)_singular = Σ_{j≥1} (s/j)·[x^{s−j}] tr(G(x)^j),
///   G(x) = Σ_a x^a Z·Eᵀ B_reg^a Q E,
/// where the blocks Eᵀ B_reg^a Q E come from walks that start and end in the
/// cluster. Walks are restricted to states that can still return in time.
pub fn residues_by_quadrature(
    system: &GalerkinSystem,
    cluster: &PoleCluster,
    s_max: usize,
    mult: usize,
) -> Result<Vec<f64>> {
    Ok(residues_with_scales(system, cluster, s_max, mult)?.0)
}

/// Residues together with Σ|trapezoid terms| for each s, the magnitude that
/// sets their rounding level.
pub fn residues_with_scales(
    system: &GalerkinSystem,
    cluster: &PoleCluster,
    s_max: usize,
    mult: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_cluster(system, cluster)?;
    check_multiplier(mult)?;
    let rho = 0.5 * cluster.radius;
    let contour = ContourSpec {
        center: cluster.value,
        radius: rho,
        nodes: ContourSpec::nodes_for(rho, 2.0 * cluster.radius, mult),
    };
    let local = LocalPatch::new(system, &cluster.indices, s_max, cluster.value);
    let c = cluster.indices.len();

    let mut sums = vec![ZERO; s_max];
    let mut scales = vec![0.0; s_max];
    let mut blocks = vec![vec![ZERO; c * c]; s_max];
    for n in 0..contour.nodes {
        let (offset, w) = contour.node_offset(n);
        let lambda = contour.center + offset;
        local.blocks(offset, &mut blocks);
        let singular = singular_traces(&blocks, c, s_max);
        for s in 0..s_max {
            let term = lambda * singular[s] * w;
            sums[s] += term;
            scales[s] += term.norm();
        }
    }
    let values = (0..s_max)
        .map(|i| real_part_checked(sums[i], scales[i], 1e-9, "pole residue"))
        .collect::<Result<Vec<_>>>()?;
    Ok((values, scales))
}

/// Neighbourhood of a cluster, ordered by graph distance so that the rows a
/// walk still needs form a prefix.
struct LocalPatch {
    /// μ relative to the cluster value, so that μ − λ keeps its relative
    /// accuracy on the small circle even when μ is large.
    mu: Vec<f64>,
    q: CsrMatrix,
    /// Number of local states within distance d, for d = 0..=depth.
    within: Vec<usize>,
    members: usize,
    s_max: usize,
}

impl LocalPatch {
    fn new(system: &GalerkinSystem, members: &[usize], s_max: usize, center: f64) -> Self {
        let depth = s_max / 2;
        let dist = system.qmat.graph_distances(members, depth);
        let mut order: Vec<usize> = members.to_vec();
        let mut rest: Vec<usize> = (0..system.dim())
            .filter(|&i| dist[i] <= depth && dist[i] > 0)
            .collect();
        rest.sort_by_key(|&i| (dist[i], i));
        order.extend(rest);
        let within = (0..=depth)
            .map(|d| order.iter().filter(|&&i| dist[i] <= d).count())
            .collect();
        Self {
            mu: order.iter().map(|&i| system.basis[i].mu - center).collect(),
            q: system.qmat.restrict(&order),
            within,
            members: members.len(),
            s_max,
        }
    }

    fn rows_needed(&self, remaining: usize) -> usize {
        self.within[remaining.min(self.within.len() - 1)]
    }

    /// G_a = Z·Eᵀ B_reg^a Q E for a = 0..s_max, row-major c×c blocks, at
    /// λ = center + offset.
    fn blocks(&self, offset: Complex64, out: &mut [Vec<Complex64>]) {
        let lambda = offset;
        let len = self.mu.len();
        let c = self.members;
        let r: Vec<Complex64> = self
            .mu
            .iter()
            .enumerate()
            .map(|(i, &m)| if i < c { ZERO } else { (m - lambda).inv() })
            .collect();
        let z: Vec<Complex64> = self.mu[..c].iter().map(|&m| (m - lambda).inv()).collect();

        // Columns V_0 = Q E, one per member; then V_a = Q R_reg V_{a−1}.
        let mut cols: Vec<Vec<Complex64>> = (0..c)
            .map(|m| {
                let mut v = vec![ZERO; len];
                for (i, val) in self.q.row(m) {
                    v[i] = Complex64::new(val, 0.0);
                }
                v
            })
            .collect();
        let mut scaled = vec![ZERO; len];
        for a in 0..self.s_max {
            if a > 0 {
                // Entries farther than s_max−1−a from the cluster cannot return.
                let rows = self.rows_needed(self.s_max - 1 - a);
                let prev_rows = self.rows_needed(self.s_max - a);
                for col in cols.iter_mut() {
                    for i in 0..prev_rows {
                        scaled[i] = col[i] * r[i];
                    }
                    for i in 0..rows {
                        let mut acc = ZERO;
                        for (j, val) in self.q.row(i) {
                            if j < prev_rows {
                                acc += scaled[j] * val;
                            }
                        }
                        col[i] = acc;
                    }
                    for v in col.iter_mut().take(prev_rows).skip(rows) {
                        *v = ZERO;
                    }
                }
            }
            let g = &mut out[a];
            for row in 0..c {
                for (cc, col) in cols.iter().enumerate() {
                    g[row * c + cc] = z[row] * col[row];
                }
            }
        }
    }
}

/// Σ_{j=1}^{s} (s/j)·tr([x^{s−j}] G(x)^j) for s = 1..=s_max.
fn singular_traces(g: &[Vec<Complex64>], c: usize, s_max: usize) -> Vec<Complex64> {
    let mut out = vec![ZERO; s_max];
    // power[d] = [x^d] G(x)^j, kept for d ≤ s_max − j.
    let mut power: Vec<Vec<Complex64>> = g.to_vec();
    for j in 1..=s_max {
        for d in 0..=(s_max - j) {
            let s = j + d;
            let tr: Complex64 = (0..c).map(|i| power[d][i * c + i]).sum();
            out[s - 1] += tr * (s as f64 / j as f64);
        }
        if j == s_max {
            break;
        }
        let keep = s_max - j; // degrees 0..keep−1 for the next power
        let mut next = vec![vec![ZERO; c * c]; keep];
        for (d, slot) in next.iter_mut().enumerate() {
            for e in 0..=d {
                mat_mul_acc(&power[e], &g[d - e], slot, c);
            }
        }
        power = next;
    }
    out
}

fn mat_mul_acc(a: &[Complex64], b: &[Complex64], out: &mut [Complex64], c: usize) {
    for i in 0..c {
        for k in 0..c {
            let aik = a[i * c + k];
            if aik == ZERO {
                continue;
            }
            for j in 0..c {
                out[i * c + j] += aik * b[k * c + j];
            }
        }
    }
}

/// λ²·tr(R_λ B^{m+1}) with R_λ from the eigendecomposition of the system.
fn remainder_integrand(
    system: &GalerkinSystem,
    spectrum: &SpectrumResult,
    lambda: Complex64,
    m: usize,
) -> Result<Complex64> {
    let r = unperturbed_resolvent(system, lambda)?;
    let n = system.dim();
    let mut x = vec![ZERO; n];
    let mut y = vec![ZERO; n];
    let mut total = ZERO;
    for k in 0..n {
        let v = spectrum.vector(k);
        for i in 0..n {
            x[i] = Complex64::new(v[i], 0.0);
        }
        for _ in 0..=m {
            for i in 0..n {
                x[i] *= r[i];
            }
            system.qmat.matvec_complex(&x, &mut y);
            std::mem::swap(&mut x, &mut y);
        }
        let quad: Complex64 = v.iter().zip(&x).map(|(a, b)| b * *a).sum();
        total += quad / (spectrum.values[k] - lambda);
    }
    Ok(lambda * lambda * total)
}

fn sign_of(m: usize) -> f64 {
    if m % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// D^(m) = ((−1)^m/2πi)∮ λ² tr(R_λ (QR⁰_λ)^{m+1}) dλ on the circle.
pub fn remainder_estimate(
    system: &GalerkinSystem,
    spectrum: &SpectrumResult,
    contour: &ContourSpec,
    m: usize,
) -> Result<f64> {
    check_contour(contour, &system.mu(), Some(&spectrum.values))?;
    let (sum, scale) = circle_sum(contour, |z| remainder_integrand(system, spectrum, z, m))?;
    Ok(sign_of(m) * real_part_checked(sum, scale, 1e-8, "remainder")?)
}

/// Step of the trapezoid in the sinh-mapped line variable; the error is
/// about exp(−π²/h).
pub const LINE_STEP: f64 = 0.25;

/// D^(m) with the circle deformed to the vertical line Re λ = b.
///
/// For m ≥ 2 the integrand decays like |λ|^{−m}, so the circle of radius b
/// and the line through b enclose the same poles and the arc at infinity
/// contributes nothing. With y = c·sinh t (c = gap/4) the line integral is
/// (1/π)∫_0^∞ Re f(b+iy) dy, summed by the trapezoid rule in t.
pub fn remainder_on_line(
    system: &GalerkinSystem,
    spectrum: &SpectrumResult,
    b: f64,
    gap: f64,
    m: usize,
) -> Result<f64> {
    if m < 2 {
        return Err(Error::Quadrature("line deformation needs m >= 2".into()));
    }
    let c = 0.25 * gap;
    let h = LINE_STEP;
    let eval = |t: f64| -> Result<f64> {
        let y = c * t.sinh();
        let f = remainder_integrand(system, spectrum, Complex64::new(b, y), m)?;
        Ok(f.re * c * t.cosh())
    };
    let mut total = 0.5 * eval(0.0)?;
    let mut quiet = 0;
    let mut t = 0.0;
    while t < 80.0 {
        t += h;
        let g = eval(t)?;
        total += g;
        if g == 0.0 || g.abs() <= 1e-18 * total.abs() {
            quiet += 1;
            if quiet >= 4 {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    if !total.is_finite() {
        return Err(Error::Quadrature("remainder line integral is not finite".into()));
    }
    Ok(sign_of(m) * total * h / PI)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedRemainder {
    pub value: f64,
    /// Graph radius of the window finally used.
    pub hops: usize,
    pub window: usize,
}

/// D^(m) on the sub-system of states within `hops` edges of the two states
/// adjacent to the cut, growing the window until the value settles.
///
/// The remainder integrand carries m+1 factors of Q between resolvents, so
/// its value on the cut line is governed by states near the cut; far states
/// enter only through long chains of small couplings.
pub fn remainder_windowed(
    system: &GalerkinSystem,
    lambda_values: &[f64],
    n_p: usize,
    b: f64,
    gap: f64,
    m: usize,
    start_hops: usize,
    rel_tol: f64,
) -> Result<WindowedRemainder> {
    let mu = system.mu();
    let line = ContourSpec {
        center: 0.0,
        radius: b,
        nodes: usize::MAX,
    };
    check_contour(&line, &mu, Some(lambda_values))?;
    let seeds: Vec<usize> = [n_p.checked_sub(1), Some(n_p)]
        .into_iter()
        .flatten()
        .filter(|&i| i < system.dim())
        .collect();

    let mut hops = start_hops.max(1);
    let mut previous: Option<f64> = None;
    loop {
        let window = system.qmat.neighbourhood(&seeds, hops);
        let full = window.len() == system.dim();
        let sub = system.restrict(&window);
        let spectrum = eigh(&sub.full_matrix())?;
        let sep = 0.25 * gap;
        if spectrum.values.iter().any(|&v| (v - b).abs() < sep) {
            if full {
                return Err(Error::ContourSelection(
                    "perturbed eigenvalue within gap/4 of the cut".into(),
                ));
            }
            hops *= 2;
            continue;
        }
        let value = remainder_on_line(&sub, &spectrum, b, gap, m)?;
        let settled = match previous {
            Some(p) => (value - p).abs() <= rel_tol * value.abs().max(p.abs()),
            None => false,
        };
        if full || settled {
            return Ok(WindowedRemainder {
                value,
                hops,
                window: window.len(),
            });
        }
        previous = Some(value);
        hops *= 2;
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::galerkin::BasisIndex;
    use crate::linalg::DenseMatrix;
    use crate::model::{validate_scenario, RawScenario};

    /// Hand-built system with given μ and symmetric Q.
    pub(crate) fn toy(mu: &[f64], q: &[Vec<f64>]) -> GalerkinSystem {
        let model = validate_scenario(&RawScenario {
            r: 1,
            a: 1.0,
            alpha: 3.0,
            t: 1,
            k_modes: mu.len(),
            terms: vec![],
            m_override: None,
        })
        .unwrap();
        GalerkinSystem {
            model,
            basis: mu
                .iter()
                .enumerate()
                .map(|(k, &m)| BasisIndex { k, j: 1, mu: m })
                .collect(),
            qmat: CsrMatrix::from_dense(&DenseMatrix::from_rows(q)),
        }
    }

    fn two_level() -> GalerkinSystem {
        toy(&[1.0, 2.0], &[vec![0.0, 0.5], vec![0.5, 0.0]])
    }

    #[test]
    fn trace_power_examples() {
        let one = toy(&[1.25], &[vec![0.5]]);
        let v = trace_power(&one, ZERO, 1).unwrap();
        assert!((v.re - 0.4).abs() < 1e-15 && v.im == 0.0);

        let v = trace_power(&two_level(), ZERO, 2).unwrap();
        assert!((v.re - 0.25).abs() < 1e-15);

        let zero = toy(&[1.0, 2.0], &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(trace_power(&zero, Complex64::new(0.3, 0.1), 3).unwrap(), ZERO);
    }

    #[test]
    fn trace_power_rejects_pole() {
        let err = trace_power(&two_level(), Complex64::new(2.0, 0.0), 2).unwrap_err();
        assert!(matches!(err, Error::PoleProximity { index: 2, .. }));
    }

    #[test]
    fn clusters_group_equal_values() {
        let c = cluster_poles(&[1.0, 2.0, 2.0, 5.0], 1e-9);
        assert_eq!(c.len(), 3);
        assert_eq!(c[1].indices, vec![1, 2]);
        assert_eq!(c[1].radius, 0.5);
        assert_eq!(c[2].radius, 1.5);
    }

    #[test]
    fn residue_examples() {
        let sys = two_level();
        let cl = cluster_poles(&sys.mu(), 1e-9);
        let closed = residue_at_pole(&sys, &cl[0], 2, DEFAULT_NODE_MULT).unwrap();
        assert!((closed + 0.5).abs() < 1e-15);
        let quad = residues_by_quadrature(&sys, &cl[0], 2, DEFAULT_NODE_MULT).unwrap()[1];
        assert!((quad + 0.5).abs() < 1e-13, "{quad}");

        let diag = toy(&[1.0, 3.0], &[vec![0.7, 0.0], vec![0.0, -0.2]]);
        let cl = cluster_poles(&diag.mu(), 1e-9);
        let quad = residues_by_quadrature(&diag, &cl[1], 2, DEFAULT_NODE_MULT).unwrap()[1];
        assert!((quad - 0.04).abs() < 1e-14);
    }

    #[test]
    fn second_moment_examples() {
        let sys = two_level();
        let spec = eigh(&sys.full_matrix()).unwrap();
        let big = ContourSpec { center: 0.0, radius: 3.0, nodes: 256 };
        let v = contour_second_moment(&sys, &spec.values, &big).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");

        let cut = ContourSpec::for_cut(1.5, 1.0, DEFAULT_NODE_MULT).unwrap();
        let v = contour_second_moment(&sys, &spec.values, &cut).unwrap();
        let l1 = 1.5 - 0.5f64.sqrt();
        assert!((v - (l1 * l1 - 1.0)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn contour_validation() {
        let sys = two_level();
        let bad = ContourSpec { center: 0.0, radius: 1.1, nodes: 256 };
        assert!(matches!(check_contour(&bad, &sys.mu(), None), Err(Error::ContourSelection(_))));
        let few = ContourSpec { center: 0.0, radius: 1.5, nodes: 32 };
        assert!(matches!(check_contour(&few, &sys.mu(), None), Err(Error::Quadrature(_))));
        assert!(ContourSpec::for_cut(1.5, 1.0, 8).is_err());
    }

    #[test]
    fn d_ps_two_level_forms_and_residues() {
        let sys = two_level();
        let contour = ContourSpec { center: 0.0, radius: 3.0, nodes: 512 };
        let all = contour_d_ps_all(&sys, &contour, 4).unwrap();
        let cl = cluster_poles(&sys.mu(), 1e-9);
        for (i, pair) in all.iter().enumerate() {
            let s = i + 1;
            let th = pair.series;
            assert!(pair.deviation() < 1e-8, "s={s}: {pair:?}");
            if s >= 2 {
                let sum: f64 = cl
                    .iter()
                    .map(|c| residue_at_pole(&sys, c, s, DEFAULT_NODE_MULT).unwrap())
                    .sum();
                let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
                let expected = 2.0 * sign / s as f64 * sum;
                assert!((th - expected).abs() < 1e-12, "s={s}: {th} vs {expected}");
            }
        }
    }

    #[test]
    fn remainder_closes_expansion_two_level() {
        let sys = two_level();
        let spec = eigh(&sys.full_matrix()).unwrap();
        let contour = ContourSpec::for_cut(1.5, 1.0, DEFAULT_NODE_MULT).unwrap();
        let m = 3;
        let dps = contour_d_ps_all(&sys, &contour, m).unwrap();
        let direct = (spec.values[0] - 1.0) * (spec.values[0] + 1.0);
        let rem = remainder_estimate(&sys, &spec, &contour, m).unwrap();
        let sum: f64 = dps.iter().map(|p| p.resolvent).sum();
        assert!((direct - sum - rem).abs() < 1e-12, "{direct} {sum} {rem}");
        let line = remainder_on_line(&sys, &spec, 1.5, 1.0, m).unwrap();
        assert!((line - rem).abs() < 1e-12 * (1.0 + rem.abs()), "{line} vs {rem}");
    }

    #[test]
    fn d_p1_diagonal_route_matches_both_forms() {
        let sys = toy(&[1.0, 2.0, 4.0], &[
            vec![0.3, 0.5, 0.0],
            vec![0.5, -0.2, 0.1],
            vec![0.0, 0.1, 0.7],
        ]);
        let contour = ContourSpec::for_cut(3.0, 2.0, DEFAULT_NODE_MULT).unwrap();
        let d = contour_d_p1(&sys, &contour).unwrap();
        // 2·Σ μ_q Q_qq over the enclosed poles.
        let expected = 2.0 * (1.0 * 0.3 + 2.0 * -0.2);
        assert!((d - expected).abs() < 1e-12, "{d} vs {expected}");
        let pair = contour_d_ps_all(&sys, &contour, 1).unwrap()[0];
        assert!((pair.series - d).abs() < 1e-12 && (pair.resolvent - d).abs() < 1e-12);
    }
}
