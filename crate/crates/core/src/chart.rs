//! Canonical coordinates `Phi(t) = exp(t . X_{J0}) x0` and the pulled-back
//! fields `Y_j = Phi^* X_j`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccmetric::{graded_index, MetricParams};
use crate::error::{check_dim, Error, Result};
use crate::fields::{cramer, select_j0, structure_coefficients, wedge_det, DomainBox, IndexTuple, J0Choice, StructureTensor, VectorSystem};
use crate::flows::{self, check_condition_c, probe_delta0, ConditionCReport, Delta0Options, Delta0Report, FlowOptions};
use crate::funcspaces::{cml_norm, Region, SampleFamily};
use crate::linalg::{self, Mat};
use crate::odecore::{self, GridFunction, GridSpec, Kernel, MatrixField, PicardReport};
use crate::sampling;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChartConfig {
    pub zeta: f64,
    /// Upper end of the condition-C search for `eta`.
    pub eta_max: f64,
    /// Grid resolution for `A`; chosen from the dimension when absent.
    pub resolution: Option<usize>,
    pub tol: f64,
    /// RK4 steps for one evaluation of `Phi` (fixed, so `Phi` is smooth in `t`).
    pub flow_steps: usize,
    pub condition_dirs: usize,
    pub bisection_steps: usize,
    pub fd_step: f64,
    /// Smallest admissible `|det (I + A)|` in the inverse function step.
    pub c0: f64,
    pub verify_samples: usize,
    pub seed: u64,
    /// Forces `J0` (0-based) instead of selecting it.
    pub j0: Option<IndexTuple>,
    pub delta0_theta: usize,
    pub delta0_points: usize,
}

impl Default for ChartConfig {
    fn default() -> Self {
        ChartConfig {
            zeta: 0.5,
            eta_max: 1.0,
            resolution: None,
            tol: 1e-10,
            flow_steps: 64,
            condition_dirs: 32,
            bisection_steps: 10,
            fd_step: 1e-5,
            c0: 1e-8,
            verify_samples: 20,
            seed: 0,
            j0: None,
            delta0_theta: 16,
            delta0_points: 4,
        }
    }
}

fn default_resolution(n: usize) -> usize {
    match n {
        1 => 64,
        2 => 16,
        3 => 8,
        _ => 4,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChartRadii {
    /// Largest `eta` found where condition C holds.
    pub eta: f64,
    /// Domain-imposed cap on `|t|`.
    pub xi_box: Option<f64>,
    pub eta0: f64,
    /// Radius of the Picard ball.
    pub eta_prime: f64,
    /// Radius on which `Phi` is certified (inverse function step).
    pub eta1: f64,
    pub xi1: Option<f64>,
    pub xi2: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtaProbe {
    /// `(eta, holds)` in probe order.
    pub probes: Vec<(f64, bool)>,
    /// `eta` ended below `eta_max`.
    pub limited: bool,
    pub witness: Option<ConditionCReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IftReport {
    pub kappa: f64,
    /// Radius from the Lipschitz condition; `None` when the derivative is constant.
    pub delta0: Option<f64>,
    pub lipschitz: f64,
    pub inverse_sup: f64,
    pub det_min: f64,
    pub sup_norm: f64,
    /// `1/2 inf |det| sup |dPsi|^{-(n-1)}`, constant calibrated on the identity.
    pub cofactor_bound: f64,
    pub cofactor_holds: bool,
}

/// One checked property of a built chart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Residual {
    pub item: String,
    pub quantity: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Residual {
    fn new(item: &str, quantity: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Residual {
            item: item.into(),
            quantity: quantity.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChartDiagnostics {
    pub j0: J0Choice,
    pub eta_probe: EtaProbe,
    pub d: f64,
    pub picard: PicardReport,
    pub ift: IftReport,
    pub delta0: Option<Delta0Report>,
    /// Smallest `|det X_J0(Phi(t))| / |det X_J0(x0)|` seen at verification samples.
    pub chi_det_ratio_min: f64,
    pub residuals: Vec<Residual>,
}

impl ChartDiagnostics {
    pub fn all_pass(&self) -> bool {
        self.residuals.iter().all(|r| r.pass)
    }
}

/// A built chart. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Chart {
    system: VectorSystem,
    sub: VectorSystem,
    pub x0: Vec<f64>,
    pub j0: IndexTuple,
    pub zeta: f64,
    pub a: GridFunction,
    pub radii: ChartRadii,
    flow_steps: usize,
    blowup: f64,
    fd_step: f64,
}

/// `C(t)_{j,k} = sum_l t_l c_{j,l}^k` for a structure tensor of the basis.
pub fn c_from_structure(c: &StructureTensor, t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            out[j * n + k] = (0..n).map(|l| t[l] * c.get(j, l, k)).sum();
        }
    }
    out
}

/// The matrix field `C(t)` of a basis system along a map `Phi`.
pub struct CMatrix<'a, F> {
    pub sub: &'a VectorSystem,
    pub phi: F,
}

/// `C(t)_{j,k} = sum_l t_l c_{j,l}^k(Phi(t))`.
pub fn build_c_matrix<F>(sub: &VectorSystem, phi: F) -> Result<CMatrix<'_, F>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if sub.q() != sub.dim() {
        return Err(Error::invalid("C(t) needs exactly n basis fields"));
    }
    Ok(CMatrix { sub, phi })
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>> + Sync> MatrixField for CMatrix<'_, F> {
    fn dim(&self) -> usize {
        self.sub.dim()
    }

    fn eval(&self, t: &[f64]) -> Result<Vec<f64>> {
        let c = structure_coefficients(self.sub, &(self.phi)(t)?)?;
        Ok(c_from_structure(&c, t))
    }
}

/// `exp(t . X) x0` with a fixed number of RK4 steps; with `rs`, the states
/// at the sorted times `rs` (Hermite dense output) instead.
fn exp_fixed(sub: &VectorSystem, t: &[f64], x0: &[f64], steps: usize, blowup: f64, rs: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
    check_dim(sub.q(), t.len())?;
    let domain = sub.domain();
    if !domain.contains(x0) {
        return Err(Error::ExitedDomain { time: 0.0, state: x0.to_vec() });
    }
    let mut scratch = vec![0.0; sub.dim()];
    let f = |p: &[f64], o: &mut [f64]| sub.combination_into(t, p, o, &mut scratch);
    match rs {
        None => Ok(vec![flows::integrate(f, x0, 1.0, steps, domain, blowup, None)?]),
        Some(rs) => {
            let mut out = Vec::with_capacity(rs.len());
            let mut next = 0;
            while next < rs.len() && rs[next] <= 0.0 {
                out.push(x0.to_vec());
                next += 1;
            }
            let mut obs = |seg: &flows::Segment| {
                while next < rs.len() && (rs[next] <= seg.r1 || seg.r1 >= 1.0) {
                    out.push(seg.at(rs[next].min(seg.r1)));
                    next += 1;
                }
                next < rs.len()
            };
            flows::integrate(f, x0, 1.0, steps, domain, blowup, Some(&mut obs))?;
            Ok(out)
        }
    }
}

fn identity_plus(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for i in 0..n {
        m[i * n + i] += 1.0;
    }
    m
}

impl Chart {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn system(&self) -> &VectorSystem {
        &self.system
    }

    /// The basis subsystem `X_{J0}` in chart order.
    pub fn basis(&self) -> &VectorSystem {
        &self.sub
    }

    pub fn phi(&self, t: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), t.len())?;
        if t.iter().all(|v| *v == 0.0) {
            return Ok(self.x0.clone());
        }
        Ok(exp_fixed(&self.sub, t, &self.x0, self.flow_steps, self.blowup, None)?.remove(0))
    }

    /// `Phi(s t)` at the quadrature nodes `s` of the integral operator.
    fn phi_ray(&self, t: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (s, _) = odecore::quadrature();
        exp_fixed(&self.sub, t, &self.x0, self.flow_steps, self.blowup, Some(&s))
    }

    /// `C(t)`.
    pub fn c_matrix(&self, t: &[f64]) -> Result<Vec<f64>> {
        let c = structure_coefficients(&self.sub, &self.phi(t)?)?;
        Ok(c_from_structure(&c, t))
    }

    /// `A(t)` by one application of the integral operator to the grid
    /// solution, which is smoother than interpolating the grid directly.
    pub fn a_at(&self, t: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), t.len())?;
        let n = self.dim();
        if linalg::norm(t) == 0.0 {
            return Ok(vec![0.0; n * n]);
        }
        if linalg::norm(t) > self.radii.eta_prime * (1.0 + 1e-12) {
            return Err(Error::OutsideGrid { point: t.to_vec() });
        }
        let (s, _) = odecore::quadrature();
        let cs: Vec<Vec<f64>> = self
            .phi_ray(t)?
            .iter()
            .zip(&s)
            .map(|(p, &si)| {
                let st: Vec<f64> = t.iter().map(|v| v * si).collect();
                Ok(c_from_structure(&structure_coefficients(&self.sub, p)?, &st))
            })
            .collect::<Result<_>>()?;
        odecore::apply_t_at(&self.a, t, &cs)
    }

    /// Rows `Y_{J0[p]}(t)` of `I + A(t)`, flattened.
    pub fn y_basis(&self, t: &[f64]) -> Result<Vec<f64>> {
        Ok(identity_plus(&self.a_at(t)?, self.dim()))
    }

    /// `Y_j(t)` for an original index `j`.
    pub fn y(&self, j: usize, t: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let rows = self.y_basis(t)?;
        if let Some(p) = self.j0.indices().iter().position(|&i| i == j) {
            return Ok(rows[p * n..(p + 1) * n].to_vec());
        }
        let b = self.dependent_coeffs(j, t)?;
        Ok((0..n).map(|i| (0..n).map(|l| b[l] * rows[l * n + i]).sum()).collect())
    }

    /// Coefficients `b_j^l(t)` with `Y_j = sum_l b_j^l Y_{J0[l]}`.
    pub fn dependent_coeffs(&self, j: usize, t: &[f64]) -> Result<Vec<f64>> {
        if j >= self.system.q() {
            return Err(Error::invalid(format!("field index {} out of range", j + 1)));
        }
        let p = self.phi(t)?;
        let basis = self.sub.columns(&p)?;
        cramer(&basis, &self.system.field(j).eval(&p)?).map_err(|e| {
            Error::Chart(format!("basis degenerate at Phi(t) = {p:?}: {e}"))
        })
    }

    /// `dPhi(t)` by central differences.
    pub fn dphi(&self, t: &[f64]) -> Result<Mat> {
        linalg::fd_jacobian(|u| self.phi(u), t, self.dim(), self.fd_step)
    }

    /// `dPhi(t)^{-1} X_j(Phi(t))`, independent of `A`.
    pub fn pullback_direct(&self, j: usize, t: &[f64]) -> Result<Vec<f64>> {
        pullback_direct(|u| self.phi(u), self.system.field(j), t, self.fd_step)
    }

    /// `(|det dPhi(t)| det(I + A(t)), |det X_J0(Phi(t))|)`.
    pub fn det_identity(&self, t: &[f64]) -> Result<(f64, f64)> {
        let n = self.dim();
        let dphi = self.dphi(t)?;
        let ia = Mat::from_row_slice(n, n, &self.y_basis(t)?);
        let lhs = linalg::det(&dphi).abs() * linalg::det(&ia);
        let rhs = linalg::det(&self.sub.matrix(&self.phi(t)?)?).abs();
        Ok((lhs, rhs))
    }

    /// Newton iteration for `Phi(t) = y` from `guess` (the origin when absent).
    pub fn inverse(&self, y: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = self.dim();
        check_dim(n, y.len())?;
        let mut t = guess.map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let limit = 4.0 * self.radii.eta_prime;
        let scale = 1.0 + linalg::norm(y);
        for _ in 0..50 {
            let p = self.phi(&t)?;
            let r: Vec<f64> = p.iter().zip(y).map(|(a, b)| a - b).collect();
            if linalg::norm(&r) <= 1e-13 * scale {
                return Ok(t);
            }
            let step = linalg::solve(&self.dphi(&t)?, &r)?;
            for i in 0..n {
                t[i] -= step[i];
            }
            if !(linalg::norm(&t) <= limit) {
                return Err(Error::Chart(format!("point {y:?} lies outside the chart image")));
            }
            if linalg::norm(&step) <= 1e-15 * (1.0 + linalg::norm(&t)) {
                return Ok(t);
            }
        }
        let r = linalg::dist(&self.phi(&t)?, y);
        if r <= 1e-9 * scale {
            return Ok(t);
        }
        Err(Error::NoConvergence(format!("chart inverse stalled at residual {r:.3e}")))
    }

    /// Pulled-back structure functions `c o Phi` in chart order, with the
    /// largest residual of the finite-difference brackets `[Y_j, Y_k]`
    /// expanded against them.
    pub fn pullback_structure(&self, t: &[f64]) -> Result<(StructureTensor, f64)> {
        let n = self.dim();
        let c = structure_coefficients(&self.sub, &self.phi(t)?)?;
        let h = 1e-4 * self.radii.eta_prime.min(1.0);
        let rows = self.y_basis(t)?;
        // derivatives d_i of every row
        let mut d = vec![vec![0.0; n * n]; n];
        for (i, di) in d.iter_mut().enumerate() {
            let mut p = t.to_vec();
            p[i] = t[i] + h;
            let a = self.y_basis(&p)?;
            p[i] = t[i] - h;
            let b = self.y_basis(&p)?;
            for k in 0..n * n {
                di[k] = (a[k] - b[k]) / (2.0 * h);
            }
        }
        let mut worst: f64 = 0.0;
        for j in 0..n {
            for k in 0..n {
                // [Y_j, Y_k] = (Y_j . grad) Y_k - (Y_k . grad) Y_j
                let br: Vec<f64> = (0..n)
                    .map(|m| {
                        (0..n)
                            .map(|i| rows[j * n + i] * d[i][k * n + m] - rows[k * n + i] * d[i][j * n + m])
                            .sum::<f64>()
                    })
                    .collect();
                let expanded: Vec<f64> = (0..n).map(|m| (0..n).map(|l| c.get(j, k, l) * rows[l * n + m]).sum()).collect();
                worst = worst.max(linalg::dist(&br, &expanded));
            }
        }
        Ok((c, worst))
    }

    /// `sup |Y_j|_{C^1}` over a lattice in `B^n(0.9 eta1)`, one entry per field.
    pub fn y_norms(&self, resolution: usize) -> Result<Vec<f64>> {
        let fam = SampleFamily::lattice(&Region::ball(vec![0.0; self.dim()], 0.9 * self.radii.eta1), resolution)?;
        (0..self.system.q())
            .map(|j| {
                let f = |t: &[f64]| self.y(j, t);
                Ok(cml_norm(&f, 1, 0, 1.0, &fam)?.estimate)
            })
            .collect()
    }

    pub fn export(&self, diagnostics: &ChartDiagnostics) -> ChartExport {
        ChartExport {
            schema_version: SCHEMA_VERSION,
            x0: self.x0.clone(),
            j0: self.j0.indices().iter().map(|i| i + 1).collect(),
            zeta: self.zeta,
            radii: self.radii.clone(),
            diagnostics: diagnostics.clone(),
            grid: self.a.spec.clone(),
        }
    }
}

/// JSON header of an exported chart; `A` itself goes to a grid CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChartExport {
    pub schema_version: u32,
    pub x0: Vec<f64>,
    /// 1-based indices.
    pub j0: Vec<usize>,
    pub zeta: f64,
    pub radii: ChartRadii,
    pub diagnostics: ChartDiagnostics,
    pub grid: GridSpec,
}

/// `dPhi(t)^{-1} X(Phi(t))` with `dPhi` from central differences of `phi`.
pub fn pullback_direct<F>(phi: F, x: &crate::fields::VectorField, t: &[f64], h_fd: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = t.len();
    let dphi = linalg::fd_jacobian(&phi, t, n, h_fd)?;
    let v = x.eval(&phi(t)?)?;
    linalg::solve(&dphi, &v).map_err(|_| Error::Singular(format!("dPhi is singular at {t:?}")))
}

/// Inverse function constants for `Psi_u(v) = exp(v . Y) u` from the matrix
/// `M(u)` whose columns are `Y_j(u)`: `kappa = 1 / (2 sup |M^{-1}|)` and
/// `delta0 = kappa / L` with `L` bounding `|d/dv dPsi_u(v)|` near `v = 0`.
pub fn ift_kappa<F>(m: F, nodes: &[Vec<f64>], c0: f64, fd_step: f64) -> Result<IftReport>
where
    F: Fn(&[f64]) -> Result<Mat> + Sync,
{
    if nodes.is_empty() {
        return Err(Error::invalid("no nodes for the inverse function estimate"));
    }
    let n = nodes[0].len();
    let per: Vec<(f64, f64, f64, f64)> = nodes
        .par_iter()
        .map(|u| {
            let mu = m(u)?;
            let det = linalg::det(&mu).abs();
            let inv = linalg::op_norm(&linalg::inverse(&mu).map_err(|_| Error::Degenerate(format!("Y fields degenerate at {u:?}")))?);
            let mut dm = Vec::with_capacity(n);
            for i in 0..n {
                let mut p = u.clone();
                p[i] = u[i] + fd_step;
                let a = m(&p)?;
                p[i] = u[i] - fd_step;
                let b = m(&p)?;
                dm.push((a - b) / (2.0 * fd_step));
            }
            // |sum_{jk} v_j w_k (Y_j . grad) Y_k| <= |v||w| (sum_{jk} |(Y_j . grad) Y_k|^2)^{1/2}
            let mut l2 = 0.0;
            for j in 0..n {
                for k in 0..n {
                    let term: Vec<f64> = (0..n).map(|r| (0..n).map(|i| mu[(i, j)] * dm[i][(r, k)]).sum()).collect();
                    l2 += term.iter().map(|v| v * v).sum::<f64>();
                }
            }
            Ok((det, inv, l2.sqrt(), linalg::op_norm(&mu)))
        })
        .collect::<Result<_>>()?;
    let det_min = per.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if !(det_min >= c0) {
        return Err(Error::Degenerate(format!("inf |det Y| = {det_min:.3e} is below {c0:e}")));
    }
    let inverse_sup = per.iter().map(|p| p.1).fold(0.0, f64::max);
    // derivative noise of size fd error is not a Lipschitz constant
    let lipschitz = per.iter().map(|p| p.2).fold(0.0, f64::max);
    let lipschitz = if lipschitz < 1e-9 { 0.0 } else { lipschitz };
    let sup_norm = per.iter().map(|p| p.3).fold(0.0, f64::max);
    let kappa = 0.5 / inverse_sup;
    let cofactor_bound = 0.5 * det_min * sup_norm.powi(-(n as i32 - 1));
    Ok(IftReport {
        kappa,
        delta0: if lipschitz > 0.0 { Some(kappa / lipschitz) } else { None },
        lipschitz,
        inverse_sup,
        det_min,
        sup_norm,
        cofactor_bound,
        cofactor_holds: kappa >= cofactor_bound * (1.0 - 1e-12),
    })
}

/// Largest `eta <= eta_max` where the sampled condition C holds, by halving then bisection.
fn probe_eta(sub: &VectorSystem, x0: &[f64], cfg: &ChartConfig) -> Result<(f64, EtaProbe)> {
    let opts = FlowOptions::default();
    let mut probes = Vec::new();
    let check = |eta: f64, probes: &mut Vec<(f64, bool)>| -> Result<ConditionCReport> {
        let r = check_condition_c(sub, x0, eta, &opts, cfg.condition_dirs)?;
        probes.push((eta, r.holds));
        Ok(r)
    };
    let first = check(cfg.eta_max, &mut probes)?;
    if first.holds {
        return Ok((cfg.eta_max, EtaProbe { probes, limited: false, witness: None }));
    }
    let mut bad = cfg.eta_max;
    let mut good = None;
    for _ in 0..40 {
        let eta = bad / 2.0;
        if check(eta, &mut probes)?.holds {
            good = Some(eta);
            break;
        }
        bad = eta;
    }
    let Some(mut good) = good else {
        return Err(Error::Chart(format!("condition C fails at every probed eta down to {bad:.3e}")));
    };
    for _ in 0..cfg.bisection_steps {
        let mid = 0.5 * (good + bad);
        if check(mid, &mut probes)?.holds {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok((good, EtaProbe { probes, limited: true, witness: Some(first) }))
}

/// `dist(x0, boundary) / sup |(X_1, ..., X_n)|_{2}` over a lattice of the
/// cube reaching the boundary: by Cauchy-Schwarz no flow with `|t|` below
/// this leaves the domain.
fn xi_box(sub: &VectorSystem, x0: &[f64]) -> Result<Option<f64>> {
    let d = sub.domain();
    if !d.is_bounded() {
        return Ok(None);
    }
    let n = x0.len();
    let dist = (0..n).map(|i| (x0[i] - d.lo[i]).min(d.hi[i] - x0[i])).fold(f64::INFINITY, f64::min);
    let cube = DomainBox::cube(x0, dist);
    let per = if n <= 3 { 5 } else { 3 };
    let mut sup: f64 = 0.0;
    for id in 0..(per as usize).pow(n as u32) {
        let mut rem = id;
        let p: Vec<f64> = (0..n)
            .map(|i| {
                let k = rem % per;
                rem /= per;
                cube.lo[i] + (cube.hi[i] - cube.lo[i]) * k as f64 / (per - 1) as f64
            })
            .collect();
        let s: f64 = sub.columns(&p)?.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum();
        sup = sup.max(s.sqrt());
    }
    Ok(Some(if sup > 0.0 { 1.05f64.recip() * dist / sup } else { f64::INFINITY }))
}

/// Runs the full construction at `x0`.
pub fn build_chart(s: &VectorSystem, x0: &[f64], cfg: &ChartConfig) -> Result<(Chart, ChartDiagnostics)> {
    let n = s.dim();
    check_dim(n, x0.len())?;
    if !s.spans_at(x0)? {
        return Err(Error::NotSpanning { point: x0.to_vec() });
    }
    let choice = match &cfg.j0 {
        None => select_j0(s, x0, cfg.zeta)?,
        Some(j) => {
            check_dim(n, j.len())?;
            let det = wedge_det(s, j, x0)?;
            let best = select_j0(s, x0, cfg.zeta)?;
            if det == 0.0 {
                return Err(Error::NotSpanning { point: x0.to_vec() });
            }
            let ratio = best.det.abs() / det.abs();
            J0Choice {
                j0: j.clone(),
                det,
                ratio: ratio.max(1.0),
                zeta: cfg.zeta,
                zeta_holds: ratio <= 1.0 / cfg.zeta,
            }
        }
    };
    let sub = s.subsystem(&choice.j0);
    let (eta, eta_probe) = probe_eta(&sub, x0, cfg)?;
    let xb = xi_box(&sub, x0)?;
    let eta0 = xb.map_or(eta, |b| eta.min(b));
    let res = cfg.resolution.unwrap_or_else(|| default_resolution(n));
    let blowup = FlowOptions::default().blowup_norm;
    let mut chart = Chart {
        system: s.clone(),
        sub,
        x0: x0.to_vec(),
        j0: choice.j0.clone(),
        zeta: cfg.zeta,
        a: GridFunction::zeros(&GridSpec::new(n, eta0, 1)?),
        radii: ChartRadii {
            eta,
            xi_box: xb,
            eta0,
            eta_prime: eta0,
            eta1: eta0,
            xi1: None,
            xi2: None,
        },
        flow_steps: cfg.flow_steps.max(1),
        blowup,
        fd_step: cfg.fd_step,
    };

    // D over B(eta0)
    let probe = GridSpec::new(n, eta0, (res / 2).max(4))?;
    let d = {
        let cm = build_c_matrix(&chart.sub, |t: &[f64]| chart.phi(t))?;
        odecore::estimate_d(&cm, &probe)?
    };
    // margin nodes of the Picard grid must stay inside B(eta0)
    let shrink = res as f64 / (res as f64 + (n as f64).sqrt());
    let mut eta_prime = eta0 * shrink;
    if d > 0.0 {
        eta_prime = eta_prime.min(1.0 / (10.0 * d));
    }
    let spec = GridSpec::new(n, eta_prime, res)?;
    let kernel = {
        let ch = &chart;
        Kernel::from_rays(&spec, |t, s| {
            if linalg::norm(t) == 0.0 {
                return Ok(vec![vec![0.0; n * n]; s.len()]);
            }
            let pts = exp_fixed(&ch.sub, t, &ch.x0, ch.flow_steps, ch.blowup, Some(s))?;
            pts.iter()
                .zip(s)
                .map(|(p, &si)| {
                    let st: Vec<f64> = t.iter().map(|v| v * si).collect();
                    let c = structure_coefficients(&ch.sub, p)
                        .map_err(|e| Error::Chart(format!("structure coefficients fail along the image at {p:?}: {e}")))?;
                    Ok(c_from_structure(&c, &st))
                })
                .collect()
        })?
    };
    let (a, picard) = odecore::picard_iterate(&kernel, d, cfg.tol, None, eta0)?;
    chart.a = a;
    chart.radii.eta_prime = eta_prime;
    chart.radii.eta1 = eta_prime;

    // inverse function step on the grid values of A
    let coarse = GridSpec::new(n, eta_prime, res.min(6))?;
    let nodes: Vec<Vec<f64>> = (0..coarse.node_count())
        .filter(|&i| coarse.in_ball(i))
        .map(|i| coarse.node(i))
        .collect();
    let ift = {
        let a = &chart.a;
        ift_kappa(
            |u: &[f64]| {
                let mut p = u.to_vec();
                let r = linalg::norm(&p);
                if r > eta_prime {
                    p.iter_mut().for_each(|v| *v *= eta_prime / r);
                }
                Ok(Mat::from_row_slice(n, n, &identity_plus(&a.eval(&p)?, n)).transpose())
            },
            &nodes,
            cfg.c0,
            1e-3 * spec.h(),
        )?
    };
    let delta0 = if cfg.delta0_theta > 0 {
        let k = DomainBox::cube(x0, 0.05 * eta_prime).intersect(s.domain());
        let grid: Vec<f64> = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|f| f * eta_prime).collect();
        let opts = Delta0Options {
            theta_samples: cfg.delta0_theta,
            point_samples: cfg.delta0_points,
            ..Default::default()
        };
        Some(probe_delta0(&chart.sub, &k, &grid, &opts)?)
    } else {
        None
    };
    let mut delta1 = ift.delta0.unwrap_or(f64::INFINITY);
    if let Some(r) = &delta0 {
        delta1 = delta1.min(r.delta0);
    }
    chart.radii.eta1 = (ift.kappa * delta1).min(eta_prime);

    let mut diag = ChartDiagnostics {
        j0: choice,
        eta_probe,
        d,
        picard,
        ift,
        delta0,
        chi_det_ratio_min: 1.0,
        residuals: Vec::new(),
    };
    verify_chart(&chart, &mut diag, cfg.verify_samples, cfg.seed)?;
    let inj = verify_injectivity(&chart, cfg.verify_samples.max(10), cfg.seed)?;
    if let Some(w) = &inj.witness {
        return Err(Error::Chart(format!(
            "Phi is not injective: t = {:?}, t' = {:?} map within ratio {:.3e}",
            w.t, w.t_prime, w.ratio
        )));
    }
    diag.residuals.push(Residual::new("injectivity", "-min ratio", -inj.min_ratio, -1e-6));
    Ok((chart, diag))
}

/// Sample points in `B^n(radius)` from an indexed stream.
fn random_ball_point(seed: u64, index: u64, n: usize, radius: f64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = sampling::stream_rng(seed, index);
    loop {
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if linalg::norm(&p) <= 1.0 {
            return p.into_iter().map(|v| v * radius).collect();
        }
    }
}

/// Residual tables at `samples` random `t` in `B^n(eta1)`.
pub fn verify_chart(chart: &Chart, diag: &mut ChartDiagnostics, samples: usize, seed: u64) -> Result<()> {
    let n = chart.dim();
    let q = chart.system.q();
    let mut out = Vec::new();
    out.push(Residual::new("phi-origin", "|Phi(0) - x0|", linalg::dist(&chart.phi(&vec![0.0; n])?, &chart.x0), 0.0));
    out.push(Residual::new("A-origin", "|A(0)|", odecore::op_norm_flat(chart.a.at_node(chart.a.spec.origin()), n), 0.0));
    out.push(Residual::new("A-bound", "sup |A|", diag.picard.sup, 0.5));
    out.push(Residual::new("A-bound-picard", "sup |A| on the Picard ball", diag.picard.sup, 1.0 / 16.0 + 1e-12));
    out.push(Residual::new(
        "A-linear-bound",
        "sup |A(t)| / (5/8 D |t|)",
        diag.picard.linear_bound_ratio,
        1.0 + 1e-6,
    ));
    let ts: Vec<Vec<f64>> = (0..samples as u64).map(|i| random_ball_point(seed, i, n, chart.radii.eta1)).collect();
    let det0 = linalg::det(&chart.sub.matrix(&chart.x0)?).abs();
    let rows: Vec<(f64, f64, f64, f64)> = ts
        .par_iter()
        .map(|t| {
            let dphi = chart.dphi(t)?;
            let p = chart.phi(t)?;
            let mut pull: f64 = 0.0;
            for j in 0..q {
                let x = chart.system.field(j).eval(&p)?;
                let y = chart.y(j, t)?;
                let r = linalg::dist(&linalg::mat_vec(&dphi, &y), &x) / (1.0 + linalg::norm(&x));
                pull = pull.max(r);
            }
            let (lhs, rhs) = chart.det_identity(t)?;
            let det_rel = (lhs - rhs).abs() / rhs.max(1e-300);
            let mut dep: f64 = 0.0;
            for j in 0..q {
                if chart.j0.indices().contains(&j) {
                    continue;
                }
                let b = chart.dependent_coeffs(j, t)?;
                let basis = chart.sub.columns(&p)?;
                let x = chart.system.field(j).eval(&p)?;
                let comb: Vec<f64> = (0..n).map(|i| (0..n).map(|l| b[l] * basis[l][i]).sum()).collect();
                dep = dep.max(linalg::dist(&comb, &x) / (1.0 + linalg::norm(&x)));
            }
            Ok((pull, det_rel, dep, rhs / det0))
        })
        .collect::<Result<_>>()?;
    let max = |f: fn(&(f64, f64, f64, f64)) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    out.push(Residual::new("pullback", "max |dPhi Y_j - X_j o Phi| / (1 + |X_j|)", max(|r| r.0), 1e-5));
    out.push(Residual::new("determinant", "max relative error of |det dPhi| det(I+A) = |det X_J0 o Phi|", max(|r| r.1), 1e-4));
    out.push(Residual::new("dependent", "max |sum_l b_k^l X_l - X_k| / (1 + |X_k|)", max(|r| r.2), 1e-8));
    diag.chi_det_ratio_min = rows.iter().map(|r| r.3).fold(1.0, f64::min);
    diag.residuals.extend(out);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectivityWitness {
    pub t: Vec<f64>,
    pub t_prime: Vec<f64>,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub pairs: usize,
    /// `min |Phi(t) - Phi(t')| / |t - t'|` over the pairs.
    pub min_ratio: f64,
    pub witness: Option<InjectivityWitness>,
}

/// Random pairs in `B^n(eta1)`; a ratio below `1e-6` is a collision witness.
pub fn verify_injectivity(chart: &Chart, pairs: usize, seed: u64) -> Result<InjectivityReport> {
    let n = chart.dim();
    let r = chart.radii.eta1;
    let ratios: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..pairs as u64)
        .into_par_iter()
        .map(|i| {
            let t = random_ball_point(seed ^ 0x9e37_79b9, 2 * i, n, r);
            let u = random_ball_point(seed ^ 0x9e37_79b9, 2 * i + 1, n, r);
            let d = linalg::dist(&t, &u);
            let ratio = if d == 0.0 { f64::INFINITY } else { linalg::dist(&chart.phi(&t)?, &chart.phi(&u)?) / d };
            Ok((ratio, t, u))
        })
        .collect::<Result<_>>()?;
    let worst = ratios.iter().min_by(|a, b| a.0.total_cmp(&b.0));
    let min_ratio = worst.map_or(f64::INFINITY, |w| w.0);
    Ok(InjectivityReport {
        pairs,
        min_ratio,
        witness: worst.filter(|w| w.0 < 1e-6).map(|w| InjectivityWitness {
            t: w.1.clone(),
            t_prime: w.2.clone(),
            ratio: w.0,
        }),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiiReport {
    pub xi1: Option<f64>,
    pub xi2: Option<f64>,
    /// `(xi, violations)` for the sub-basis ball inside the chart image.
    pub xi1_trials: Vec<(f64, usize)>,
    /// `(xi, violations)` for the full ball inside `B_{X_J0}(x0, xi1)`.
    pub xi2_trials: Vec<(f64, usize)>,
}

/// Largest `xi1`, `xi2` on the ladder `eta1 (3/4)^k` such that sampled
/// points of `B_{X_J0}(x0, xi1)` lie in `Phi(B^n(eta1))` and sampled points of
/// `B_X(x0, xi2)` lie in `B_{X_J0}(x0, xi1)`.
pub fn radii_estimates(chart: &Chart, params: &MetricParams, samples: usize, seed: u64) -> Result<RadiiReport> {
    let ladder: Vec<f64> = (0..12).map(|k| chart.radii.eta1 * 0.75f64.powi(k)).collect();
    let n = chart.dim();
    let ones_n = vec![1.0; n];
    let ones_q = vec![1.0; chart.system.q()];
    let mut xi1_trials = Vec::new();
    let mut xi1 = None;
    for &xi in &ladder {
        let idx = graded_index(&chart.sub, &ones_n, &chart.x0, xi, params)?;
        let pts = idx.sample_members(samples, seed, 200 * samples);
        let bad = pts
            .par_iter()
            .filter(|y| match chart.inverse(y, None) {
                Ok(t) => linalg::norm(&t) > chart.radii.eta1 * (1.0 + 1e-9),
                Err(_) => true,
            })
            .count();
        xi1_trials.push((xi, bad));
        if bad == 0 {
            xi1 = Some(xi);
            break;
        }
    }
    let mut xi2_trials = Vec::new();
    let mut xi2 = None;
    if let Some(x1) = xi1 {
        let target = graded_index(&chart.sub, &ones_n, &chart.x0, x1, params)?;
        for &xi in ladder.iter().filter(|&&v| v <= x1) {
            let idx = graded_index(&chart.system, &ones_q, &chart.x0, xi, params)?;
            let pts = idx.sample_members(samples, seed ^ 1, 200 * samples);
            let bad = pts.par_iter().filter(|y| !target.contains(y)).count();
            xi2_trials.push((xi, bad));
            if bad == 0 {
                xi2 = Some(xi);
                break;
            }
        }
    }
    Ok(RadiiReport {
        xi1,
        xi2,
        xi1_trials,
        xi2_trials,
    })
}

/// Writes the radii found by [`radii_estimates`] into the chart.
pub fn with_radii(mut chart: Chart, r: &RadiiReport) -> Chart {
    chart.radii.xi1 = r.xi1;
    chart.radii.xi2 = r.xi2;
    chart
}
