//! Fixed-step RK4 flows `e^{tX}x`, multi-field exponentials, the sampled
//! existence condition on `B^q(eta)` and the non-return probe.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fields::{DomainBox, VectorField, VectorSystem};
use crate::linalg;
use crate::sampling;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowOptions {
    /// RK4 steps per unit of flow time (per unit of `|a|` for `exp_multi`).
    pub steps_per_unit: f64,
    /// Hard cap on the number of steps of a single integration.
    pub max_steps: usize,
    /// Trajectories with a state norm above this are reported as blow-up.
    pub blowup_norm: f64,
    /// Containment box; the field or system domain is used when absent.
    pub domain: Option<DomainBox>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            steps_per_unit: 200.0,
            max_steps: 2_000_000,
            blowup_norm: 1e8,
            domain: None,
        }
    }
}

impl FlowOptions {
    pub fn with_steps(steps_per_unit: f64) -> Self {
        FlowOptions {
            steps_per_unit,
            ..Default::default()
        }
    }

    pub fn steps_for(&self, length: f64) -> Result<usize> {
        if !(self.steps_per_unit >= 1.0) {
            return Err(Error::invalid("steps per unit must be at least 1"));
        }
        let s = (length.abs() * self.steps_per_unit).ceil().max(1.0);
        if !s.is_finite() || s > self.max_steps as f64 {
            return Err(Error::invalid(format!("flow needs {s} steps, above the cap {}", self.max_steps)));
        }
        Ok(s as usize)
    }
}

/// One RK4 step interval with endpoint states and derivatives; supports
/// cubic Hermite dense output (same order as the integrator).
pub struct Segment<'a> {
    pub r0: f64,
    pub r1: f64,
    pub x0: &'a [f64],
    pub f0: &'a [f64],
    pub x1: &'a [f64],
    pub f1: &'a [f64],
}

impl Segment<'_> {
    pub fn at(&self, r: f64) -> Vec<f64> {
        let h = self.r1 - self.r0;
        let s = (r - self.r0) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        (0..self.x0.len())
            .map(|i| h00 * self.x0[i] + h10 * h * self.f0[i] + h01 * self.x1[i] + h11 * h * self.f1[i])
            .collect()
    }
}

/// Integrates `x' = f(x)` from `r = 0` to `r = t` with `steps` RK4 steps.
///
/// `observe` sees every step as a [`Segment`] and may stop the integration
/// early by returning `false`; the state reached so far is then returned.
pub fn integrate<F>(
    mut f: F,
    x0: &[f64],
    t: f64,
    steps: usize,
    domain: &DomainBox,
    blowup: f64,
    mut observe: Option<&mut dyn FnMut(&Segment) -> bool>,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = x0.len();
    let h = t / steps as f64;
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut f_next = vec![0.0; n];
    f(&x, &mut k1)?;
    for s in 0..steps {
        let r0 = s as f64 * h;
        let r1 = if s + 1 == steps { t } else { (s + 1) as f64 * h };
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        f(&tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        f(&tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        f(&tmp, &mut k4)?;
        for i in 0..n {
            next[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if next.iter().any(|v| !v.is_finite()) || linalg::norm(&next) > blowup {
            return Err(Error::BlowUp { time: r1 });
        }
        if !domain.contains(&next) {
            return Err(Error::ExitedDomain { time: r1, state: next });
        }
        let last = s + 1 == steps;
        if observe.is_some() || !last {
            f(&next, &mut f_next)?;
        }
        if let Some(obs) = observe.as_mut() {
            let seg = Segment {
                r0,
                r1,
                x0: &x,
                f0: &k1,
                x1: &next,
                f1: &f_next,
            };
            if !obs(&seg) {
                return Ok(next);
            }
        }
        std::mem::swap(&mut x, &mut next);
        std::mem::swap(&mut k1, &mut f_next);
    }
    Ok(x)
}

fn field_domain<'a>(opts: &'a FlowOptions, fallback: &'a DomainBox) -> &'a DomainBox {
    opts.domain.as_ref().unwrap_or(fallback)
}

/// `e^{tX} x0`.
pub fn flow(x: &VectorField, x0: &[f64], t: f64, opts: &FlowOptions) -> Result<Vec<f64>> {
    check_dim(x.dim(), x0.len())?;
    let unbounded = DomainBox::unbounded(x.dim());
    let domain = field_domain(opts, &unbounded);
    if !domain.contains(x0) {
        return Err(Error::ExitedDomain { time: 0.0, state: x0.to_vec() });
    }
    let steps = opts.steps_for(t)?;
    integrate(|p, out| x.eval_into(p, out), x0, t, steps, domain, opts.blowup_norm, None)
}

/// `e^{a_1 X_1 + ... + a_q X_q} x0`: the time-one flow of the frozen combination.
pub fn exp_multi(s: &VectorSystem, a: &[f64], x0: &[f64], opts: &FlowOptions) -> Result<Vec<f64>> {
    exp_multi_time(s, a, x0, 1.0, opts)
}

/// Flow of `sum_j a_j X_j` for time `t`; uses `ceil(|a| |t| * steps_per_unit)` steps.
pub fn exp_multi_time(s: &VectorSystem, a: &[f64], x0: &[f64], t: f64, opts: &FlowOptions) -> Result<Vec<f64>> {
    check_dim(s.q(), a.len())?;
    check_dim(s.dim(), x0.len())?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let domain = field_domain(opts, s.domain());
    if !domain.contains(x0) {
        return Err(Error::ExitedDomain { time: 0.0, state: x0.to_vec() });
    }
    let len = linalg::norm(a) * t.abs();
    if len == 0.0 {
        return Ok(x0.to_vec());
    }
    let steps = opts.steps_for(len)?;
    let mut scratch = vec![0.0; s.dim()];
    integrate(
        |p, out| s.combination_into(a, p, out, &mut scratch),
        x0,
        t,
        steps,
        domain,
        opts.blowup_norm,
        None,
    )
}

/// States `e^{r (a . X)} x0` at the sorted times `rs` in `[0, 1]`, using
/// Hermite dense output of a single integration.
pub fn exp_multi_samples(
    s: &VectorSystem,
    a: &[f64],
    x0: &[f64],
    rs: &[f64],
    opts: &FlowOptions,
) -> Result<Vec<Vec<f64>>> {
    check_dim(s.q(), a.len())?;
    let domain = field_domain(opts, s.domain());
    if !domain.contains(x0) {
        return Err(Error::ExitedDomain { time: 0.0, state: x0.to_vec() });
    }
    let len = linalg::norm(a);
    if len == 0.0 {
        return Ok(vec![x0.to_vec(); rs.len()]);
    }
    let steps = opts.steps_for(len)?;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rs.len());
    let mut next = 0usize;
    while next < rs.len() && rs[next] <= 0.0 {
        out.push(x0.to_vec());
        next += 1;
    }
    let mut scratch = vec![0.0; s.dim()];
    let mut obs = |seg: &Segment| {
        while next < rs.len() && (rs[next] <= seg.r1 || seg.r1 >= 1.0) {
            out.push(seg.at(rs[next].min(seg.r1)));
            next += 1;
        }
        next < rs.len()
    };
    integrate(
        |p, o| s.combination_into(a, p, o, &mut scratch),
        x0,
        1.0,
        steps,
        domain,
        opts.blowup_norm,
        Some(&mut obs),
    )?;
    Ok(out)
}

/// A coefficient vector whose flow failed, with the failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionWitness {
    pub a: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionCReport {
    pub eta: f64,
    pub holds: bool,
    pub samples: usize,
    pub witness: Option<ConditionWitness>,
}

/// Radii sampled by the existence check: `eta (1 - 10^-k)` for `k = 1..4`, and `eta / 2`.
fn condition_radii(eta: f64) -> Vec<f64> {
    let mut r: Vec<f64> = (1..=4).map(|k| eta * (1.0 - 10f64.powi(-k))).collect();
    r.push(eta / 2.0);
    r
}

/// Sampled check that `e^{a . X} x0` exists in the domain for `a` in `B^q(eta)`.
///
/// A `true` answer is a certificate on the sampled set only.
pub fn check_condition_c(
    s: &VectorSystem,
    x0: &[f64],
    eta: f64,
    opts: &FlowOptions,
    n_dirs: usize,
) -> Result<ConditionCReport> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    check_dim(s.dim(), x0.len())?;
    let q = s.q();
    let dirs = sampling::sphere_directions(n_dirs.max(2 * q), q);
    let candidates: Vec<Vec<f64>> = condition_radii(eta)
        .into_iter()
        .flat_map(|r| dirs.iter().map(move |d| d.iter().map(|v| v * r).collect::<Vec<f64>>()))
        .collect();
    let failure = candidates
        .par_iter()
        .enumerate()
        .find_map_first(|(i, a)| match exp_multi(s, a, x0, opts) {
            Ok(_) => None,
            Err(e @ (Error::ExitedDomain { .. } | Error::BlowUp { .. } | Error::NonFinite | Error::Domain(_))) => {
                Some((i, e.to_string()))
            }
            Err(e) => Some((i, format!("evaluation failed: {e}"))),
        });
    Ok(ConditionCReport {
        eta,
        holds: failure.is_none(),
        samples: candidates.len(),
        witness: failure.map(|(i, reason)| ConditionWitness {
            a: candidates[i].clone(),
            reason,
        }),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Delta0Options {
    /// Number of unit directions `theta` in `S^{q-1}`.
    pub theta_samples: usize,
    /// Number of base points in `K` (the center is always included).
    pub point_samples: usize,
    /// Return tolerance; `1e-3 * diam(K)` when absent.
    pub return_tol: Option<f64>,
    pub flow: FlowOptions,
}

impl Default for Delta0Options {
    fn default() -> Self {
        Delta0Options {
            theta_samples: 32,
            point_samples: 16,
            return_tol: None,
            flow: FlowOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnEvent {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub r: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Delta0Report {
    pub delta0: f64,
    pub return_tol: f64,
    pub checked: usize,
    pub excluded: usize,
    /// Earliest detected return, if any.
    pub violation: Option<ReturnEvent>,
}

/// Earliest `r in (0, r_max]` at which `e^{r theta . X} x` comes back within
/// `tol` of `x` after having left the `2 tol` neighbourhood.
fn first_return(
    s: &VectorSystem,
    theta: &[f64],
    x: &[f64],
    r_max: f64,
    tol: f64,
    opts: &FlowOptions,
) -> Result<Option<(f64, f64)>> {
    let domain = field_domain(opts, s.domain());
    let steps = opts.steps_for(r_max)?;
    let mut left = false;
    let mut found: Option<(f64, f64)> = None;
    let mut prev: Option<(f64, f64)> = None; // (r, d) of the previous step end
    let mut before_prev = f64::INFINITY;
    let mut prev_seg: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    let mut scratch = vec![0.0; s.dim()];
    let mut obs = |seg: &Segment| {
        let d1 = linalg::dist(seg.x1, x);
        if !left {
            left = d1 > 2.0 * tol;
            if !left {
                prev = None;
            }
        } else if let Some((rp, dp)) = prev {
            // distance stopped decreasing: a local minimum lies in the last two steps
            if d1 >= dp && dp <= before_prev && before_prev.is_finite() {
                let (xa, fa, ra) = prev_seg.clone().expect("segment recorded");
                let lo = ra;
                let hi = seg.r1;
                let eval = |r: f64| {
                    let p = if r <= rp {
                        Segment {
                            r0: ra,
                            r1: rp,
                            x0: &xa,
                            f0: &fa,
                            x1: seg.x0,
                            f1: seg.f0,
                        }
                        .at(r)
                    } else {
                        seg.at(r)
                    };
                    linalg::dist(&p, x)
                };
                let (rm, dm) = golden_min(eval, lo, hi, 40);
                if dm <= tol {
                    found = Some((rm, dm));
                    return false;
                }
            }
        }
        before_prev = if left { prev.map_or(f64::INFINITY, |p| p.1) } else { f64::INFINITY };
        prev = Some((seg.r1, d1));
        prev_seg = Some((seg.x0.to_vec(), seg.f0.to_vec(), seg.r0));
        true
    };
    let res = integrate(
        |p, o| s.combination_into(theta, p, o, &mut scratch),
        x,
        r_max,
        steps,
        domain,
        opts.blowup_norm,
        Some(&mut obs),
    );
    match res {
        Ok(_) | Err(Error::ExitedDomain { .. }) | Err(Error::BlowUp { .. }) => Ok(found),
        Err(e) => Err(e),
    }
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Largest `delta` in `delta_grid` such that no sampled orbit `r -> e^{r theta . X} x`
/// with `x in K`, `|theta| = 1`, `theta . X(x) != 0` returns to `x` for `r in (0, delta]`.
pub fn probe_delta0(s: &VectorSystem, k: &DomainBox, delta_grid: &[f64], opts: &Delta0Options) -> Result<Delta0Report> {
    if delta_grid.is_empty() || opts.theta_samples == 0 {
        return Err(Error::invalid("delta grid and theta samples must be non-empty"));
    }
    if !k.is_bounded() {
        return Err(Error::invalid("the probe set K must be a bounded box"));
    }
    check_dim(s.dim(), k.dim())?;
    let n = s.dim();
    let q = s.q();
    let mut grid: Vec<f64> = delta_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let r_max = *grid.last().expect("non-empty");
    let tol = opts.return_tol.unwrap_or(1e-3 * k.diameter());
    let mut points = vec![k.lo.iter().zip(&k.hi).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<f64>>()];
    for i in 0..opts.point_samples.saturating_sub(1) {
        let u = sampling::halton(i as u64, n);
        points.push((0..n).map(|d| k.lo[d] + u[d] * (k.hi[d] - k.lo[d])).collect());
    }
    let thetas = sampling::sphere_directions(opts.theta_samples.max(2 * q), q);
    let pairs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..thetas.len()).map(move |t| (p, t)))
        .collect();
    let results: Vec<Result<Option<Option<(f64, f64)>>>> = pairs
        .par_iter()
        .map(|&(p, t)| {
            let x = &points[p];
            let v = s.combination(&thetas[t], x)?;
            let scale = s.columns(x)?.iter().map(|c| linalg::norm(c)).fold(0.0, f64::max);
            if linalg::norm(&v) <= 1e-12 * scale.max(1e-300) {
                return Ok(None);
            }
            first_return(s, &thetas[t], x, r_max, tol, &opts.flow).map(Some)
        })
        .collect();
    let mut excluded = 0;
    let mut best: Option<ReturnEvent> = None;
    for (&(p, t), res) in pairs.iter().zip(results) {
        match res? {
            None => excluded += 1,
            Some(None) => {}
            Some(Some((r, d))) => {
                if best.as_ref().map_or(true, |b| r < b.r) {
                    best = Some(ReturnEvent {
                        x: points[p].clone(),
                        theta: thetas[t].clone(),
                        r,
                        distance: d,
                    });
                }
            }
        }
    }
    let delta0 = match &best {
        None => r_max,
        Some(ev) => grid.iter().copied().filter(|d| *d < ev.r).fold(0.0, f64::max),
    };
    Ok(Delta0Report {
        delta0,
        return_tol: tol,
        checked: pairs.len() - excluded,
        excluded,
        violation: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quad() -> VectorField {
        VectorField::parse("Q", &["x1^2"]).unwrap()
    }

    #[test]
    fn flow_examples() {
        let dx = VectorField::axis(0, 1);
        let o = FlowOptions::default();
        assert!((flow(&dx, &[0.0], 0.7, &o).unwrap()[0] - 0.7).abs() < 1e-14);
        let q = quad();
        let x = flow(&q, &[1.0], 0.5, &o).unwrap()[0];
        assert!((x - 2.0).abs() < 1e-6, "{x}");
        let near = flow(&q, &[1.0], 0.999, &o).unwrap()[0];
        assert!(near.is_finite() && near > 50.0);
        assert!(matches!(flow(&q, &[1.0], 1.1, &o), Err(Error::BlowUp { .. })));
    }

    #[test]
    fn domain_exit_reports_time() {
        let dx = VectorField::axis(0, 1);
        let o = FlowOptions {
            domain: Some(DomainBox::new(vec![-1.0], vec![1.0]).unwrap()),
            ..Default::default()
        };
        match flow(&dx, &[0.0], 2.0, &o) {
            Err(Error::ExitedDomain { time, .. }) => assert!((time - 1.0).abs() < 0.01),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let q = quad();
        let exact = 1.0 / (1.0 - 0.8);
        let err = |spu: f64| (flow(&q, &[1.0], 0.8, &FlowOptions::with_steps(spu)).unwrap()[0] - exact).abs();
        let ratio = err(40.0) / err(80.0);
        assert!((10.0..=24.0).contains(&ratio), "ratio {ratio}");
    }

    fn heisenberg() -> VectorSystem {
        let x = VectorField::parse("X", &["1", "0", "-x2/2"]).unwrap();
        let y = VectorField::parse("Y", &["0", "1", "x1/2"]).unwrap();
        let t = VectorField::parse("T", &["0", "0", "1"]).unwrap();
        VectorSystem::new(vec![x, y, t], DomainBox::unbounded(3)).unwrap()
    }

    #[test]
    fn exp_multi_examples() {
        let o = FlowOptions::default();
        let h = heisenberg();
        let p = exp_multi(&h, &[1.0, 1.0, 0.0], &[0.0; 3], &o).unwrap();
        assert!(linalg::dist(&p, &[1.0, 1.0, 0.0]) < 1e-12);
        let e = VectorSystem::euclidean(2);
        let p = exp_multi(&e, &[1.0, 2.0], &[0.5, 0.5], &o).unwrap();
        assert!(linalg::dist(&p, &[1.5, 2.5]) < 1e-12);
        let a = exp_multi(&h, &[0.3, 0.0, 0.0], &[0.1, 0.2, 0.3], &o).unwrap();
        let b = flow(h.field(0), &[0.1, 0.2, 0.3], 0.3, &o).unwrap();
        assert!(linalg::dist(&a, &b) < 1e-8);
    }

    #[test]
    fn dense_samples_match_direct_flows() {
        let x = VectorField::parse("X", &["1", "x1^2"]).unwrap();
        let y = VectorField::parse("Y", &["sin(x2)", "1"]).unwrap();
        let s = VectorSystem::new(vec![x, y], DomainBox::unbounded(2)).unwrap();
        let a = [0.7, -0.4];
        let o = FlowOptions::default();
        let rs = [0.0, 0.1234, 0.5, 0.77, 1.0];
        let samples = exp_multi_samples(&s, &a, &[0.2, 0.1], &rs, &o).unwrap();
        for (r, p) in rs.iter().zip(&samples) {
            let ar: Vec<f64> = a.iter().map(|v| v * r).collect();
            let direct = exp_multi(&s, &ar, &[0.2, 0.1], &FlowOptions::with_steps(2000.0)).unwrap();
            assert!(linalg::dist(p, &direct) < 1e-9, "r={r}");
        }
    }

    #[test]
    fn condition_c_examples() {
        let o = FlowOptions::default();
        let e = VectorSystem::euclidean(2)
            .with_domain(DomainBox::cube(&[0.0, 0.0], 1.5))
            .unwrap();
        assert!(check_condition_c(&e, &[0.0, 0.0], 1.0, &o, 16).unwrap().holds);
        let q = VectorSystem::new(vec![quad()], DomainBox::unbounded(1)).unwrap();
        assert!(check_condition_c(&q, &[1.0], 0.9, &o, 2).unwrap().holds);
        let bad = check_condition_c(&q, &[1.0], 1.1, &o, 2).unwrap();
        assert!(!bad.holds);
        assert!(bad.witness.unwrap().a[0] > 1.0);
        assert!(check_condition_c(&q, &[1.0], 0.0, &o, 2).is_err());
    }

    fn rotation(k: f64) -> VectorSystem {
        let r = VectorField::parse("R", &[&format!("-{k}*x2"), &format!("{k}*x1")]).unwrap();
        VectorSystem::new(vec![r], DomainBox::cube(&[0.0, 0.0], 3.0)).unwrap()
    }

    #[test]
    fn delta0_examples() {
        let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
        let k = DomainBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let o = Delta0Options {
            theta_samples: 8,
            point_samples: 6,
            ..Default::default()
        };
        let e = VectorSystem::euclidean(2).with_domain(DomainBox::cube(&[0.0, 0.0], 5.0)).unwrap();
        let rep = probe_delta0(&e, &k, &grid, &o).unwrap();
        assert_eq!(rep.delta0, 1.0);
        assert!(rep.violation.is_none());

        let annulus = DomainBox::new(vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        let rep = probe_delta0(&rotation(10.0), &annulus, &grid, &o).unwrap();
        let ev = rep.violation.expect("rotation returns");
        assert!((ev.r - std::f64::consts::TAU / 10.0).abs() < 1e-3, "{}", ev.r);
        assert!((0.31..=0.66).contains(&rep.delta0), "{}", rep.delta0);
    }

    #[test]
    fn zero_combinations_are_excluded() {
        let r = VectorField::parse("R", &["-10*x2", "10*x1"]).unwrap();
        let z = VectorField::parse("Z", &["0", "0"]).unwrap();
        let s = VectorSystem::new(vec![r, z], DomainBox::cube(&[0.0, 0.0], 3.0)).unwrap();
        let k = DomainBox::new(vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        let o = Delta0Options {
            theta_samples: 4,
            point_samples: 2,
            ..Default::default()
        };
        let rep = probe_delta0(&s, &k, &[0.2, 0.5, 1.0], &o).unwrap();
        assert_eq!(rep.excluded, 2 * 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn group_law_and_reversibility(x0 in -1.0f64..1.0, y0 in -1.0f64..1.0, s in -0.5f64..0.5, t in -0.5f64..0.5) {
            let f = VectorField::parse("F", &["sin(x2) + 1", "cos(x1) * x2"]).unwrap();
            let o = FlowOptions::default();
            let p = [x0, y0];
            let a = flow(&f, &flow(&f, &p, s, &o).unwrap(), t, &o).unwrap();
            let b = flow(&f, &p, s + t, &o).unwrap();
            prop_assert!(linalg::dist(&a, &b) < 1e-7);
            let back = flow(&f, &flow(&f, &p, t, &o).unwrap(), -t, &o).unwrap();
            prop_assert!(linalg::dist(&back, &p) < 1e-7);
        }

        #[test]
        fn exp_multi_reparametrization(a1 in -1.0f64..1.0, a2 in -1.0f64..1.0) {
            let x = VectorField::parse("X", &["1", "x1^2"]).unwrap();
            let y = VectorField::parse("Y", &["x2", "1"]).unwrap();
            let s = VectorSystem::new(vec![x, y], DomainBox::unbounded(2)).unwrap();
            let o = FlowOptions::default();
            let one = exp_multi(&s, &[a1, a2], &[0.1, 0.2], &o).unwrap();
            let half = exp_multi_time(&s, &[2.0 * a1, 2.0 * a2], &[0.1, 0.2], 0.5, &o).unwrap();
            prop_assert!(linalg::dist(&one, &half) < 1e-7);
        }
    }
}
