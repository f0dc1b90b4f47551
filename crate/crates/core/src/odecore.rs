//! The singular matrix ODE `d/dr (r A(r theta)) = -A^2 - C A - C`, solved as
//! the fixed point of
//! `T(A)(x) = int_0^1 -A(sx)^2 - C(sx) A(sx) - C(sx) ds`
//! on a Cartesian grid over `B^n(eta)`.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, Mat};
use crate::sampling;

/// A matrix-valued function `x -> C(x)`, values flattened row-major.
pub trait MatrixField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// [`MatrixField`] backed by a closure.
pub struct MatrixFn<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>> + Sync> MatrixFn<F> {
    pub fn new(n: usize, f: F) -> Self {
        MatrixFn { n, f }
    }
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>> + Sync> MatrixField for MatrixFn<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = (self.f)(x)?;
        check_dim(self.n * self.n, v.len())?;
        Ok(v)
    }
}

/// The identically zero field.
pub fn zero_field(n: usize) -> MatrixFn<impl Fn(&[f64]) -> Result<Vec<f64>> + Sync> {
    MatrixFn::new(n, move |_| Ok(vec![0.0; n * n]))
}

pub(crate) fn mat_mul(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// Operator norm of a flat `n x n` matrix.
pub fn op_norm_flat(a: &[f64], n: usize) -> f64 {
    match n {
        1 => a[0].abs(),
        2 => {
            let s = a.iter().map(|v| v * v).sum::<f64>();
            let det = a[0] * a[3] - a[1] * a[2];
            let disc = (s * s - 4.0 * det * det).max(0.0).sqrt();
            ((s + disc) / 2.0).sqrt()
        }
        _ => linalg::op_norm(&Mat::from_row_slice(n, n, a)),
    }
}

/// Composite Gauss-Legendre rule on `[0, 1]`: 4 panels of 4 points.
pub fn quadrature() -> ([f64; 16], [f64; 16]) {
    const X: [f64; 4] = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
    const W: [f64; 4] = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
    let mut s = [0.0; 16];
    let mut w = [0.0; 16];
    for p in 0..4 {
        for k in 0..4 {
            s[4 * p + k] = (p as f64 + 0.5 + 0.5 * X[k]) / 4.0;
            w[4 * p + k] = W[k] / 8.0;
        }
    }
    (s, w)
}

/// Cartesian grid of spacing `h = eta / resolution`, node indices
/// `-(resolution+1)..=resolution+1` per axis. Nodes with
/// `|x| <= eta + h sqrt(n)` are active, so every cell meeting the ball has
/// active corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub eta: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(n: usize, eta: f64, resolution: usize) -> Result<Self> {
        if n == 0 || resolution == 0 || !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!(
                "grid needs n >= 1, resolution >= 1 and eta > 0 (got n={n}, eta={eta}, resolution={resolution})"
            )));
        }
        let side = 2 * (resolution + 1) + 1;
        if side.checked_pow(n as u32).is_none_or(|t| t > 20_000_000) {
            return Err(Error::invalid("grid too large"));
        }
        Ok(GridSpec { n, eta, resolution })
    }

    pub fn h(&self) -> f64 {
        self.eta / self.resolution as f64
    }

    fn half(&self) -> usize {
        self.resolution + 1
    }

    fn side(&self) -> usize {
        2 * self.half() + 1
    }

    pub fn node_count(&self) -> usize {
        self.side().pow(self.n as u32)
    }

    pub fn node(&self, id: usize) -> Vec<f64> {
        let side = self.side();
        let half = self.half() as f64;
        let h = self.h();
        let mut rem = id;
        (0..self.n)
            .map(|_| {
                let k = rem % side;
                rem /= side;
                (k as f64 - half) * h
            })
            .collect()
    }

    fn id_of(&self, idx: &[usize]) -> usize {
        let side = self.side();
        idx.iter().rev().fold(0, |acc, &k| acc * side + k)
    }

    pub fn origin(&self) -> usize {
        self.id_of(&vec![self.half(); self.n])
    }

    pub fn active_radius(&self) -> f64 {
        self.eta + self.h() * (self.n as f64).sqrt()
    }

    pub fn is_active(&self, id: usize) -> bool {
        linalg::norm(&self.node(id)) <= self.active_radius() * (1.0 + 1e-12)
    }

    /// Whether node `id` lies in the closed ball `B^n(eta)`.
    pub fn in_ball(&self, id: usize) -> bool {
        linalg::norm(&self.node(id)) <= self.eta * (1.0 + 1e-12)
    }

    pub fn active_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.is_active(i)).collect()
    }
}

/// `n x n` matrices at the active nodes of a [`GridSpec`], multilinear in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub spec: GridSpec,
    /// Row-major matrices, `n*n` per node (zeros at inactive nodes).
    pub values: Vec<f64>,
    pub active: Vec<bool>,
}

impl GridFunction {
    pub fn zeros(spec: &GridSpec) -> Self {
        let count = spec.node_count();
        let active = (0..count).map(|i| spec.is_active(i)).collect();
        GridFunction {
            values: vec![0.0; count * spec.n * spec.n],
            spec: spec.clone(),
            active,
        }
    }

    /// Samples `f` at every active node.
    pub fn sample(spec: &GridSpec, f: &dyn MatrixField) -> Result<Self> {
        check_dim(spec.n, f.dim())?;
        let mut g = GridFunction::zeros(spec);
        let nn = spec.n * spec.n;
        let ids = spec.active_nodes();
        let vals: Vec<Vec<f64>> = ids.par_iter().map(|&i| f.eval(&spec.node(i))).collect::<Result<_>>()?;
        for (i, v) in ids.iter().zip(vals) {
            g.values[i * nn..(i + 1) * nn].copy_from_slice(&v);
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn at_node(&self, id: usize) -> &[f64] {
        let nn = self.spec.n * self.spec.n;
        &self.values[id * nn..(id + 1) * nn]
    }

    /// Multilinear interpolation; fails if a needed corner is inactive.
    pub fn eval(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.spec.n * self.spec.n];
        self.eval_into(p, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.spec.n;
        let nn = n * n;
        check_dim(n, p.len())?;
        let h = self.spec.h();
        let half = self.spec.half() as f64;
        let side = self.spec.side();
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        if n > 8 {
            return Err(Error::invalid("grid functions support n <= 8"));
        }
        for i in 0..n {
            let u = p[i] / h + half;
            let mut k = u.floor();
            if k >= (side - 1) as f64 {
                k = (side - 2) as f64;
            }
            if k < 0.0 || u > (side - 1) as f64 + 1e-9 {
                return Err(Error::OutsideGrid { point: p.to_vec() });
            }
            base[i] = k as usize;
            frac[i] = (u - k).clamp(0.0, 1.0);
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut idx = [0usize; 8];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            for i in 0..n {
                let bit = (corner >> i) & 1;
                idx[i] = base[i] + bit;
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
            }
            if w == 0.0 {
                continue;
            }
            let id = self.spec.id_of(&idx[..n]);
            if !self.active[id] {
                return Err(Error::OutsideGrid { point: p.to_vec() });
            }
            for (o, v) in out.iter_mut().zip(&self.values[id * nn..(id + 1) * nn]) {
                *o += w * v;
            }
        }
        Ok(())
    }

    /// Largest `|A(x)|_op` over nodes of the closed ball.
    pub fn sup_norm(&self) -> f64 {
        (0..self.spec.node_count())
            .filter(|&i| self.spec.in_ball(i))
            .map(|i| op_norm_flat(self.at_node(i), self.spec.n))
            .fold(0.0, f64::max)
    }

    /// CSV layout: `n,eta,resolution` header and values, then one row per
    /// active node with coordinates and the row-major matrix.
    pub fn to_csv(&self) -> String {
        let n = self.spec.n;
        let mut s = String::new();
        let _ = writeln!(s, "n,eta,resolution");
        let _ = writeln!(s, "{},{},{}", n, self.spec.eta, self.spec.resolution);
        let cols: Vec<String> = (1..=n)
            .map(|i| format!("x{i}"))
            .chain((1..=n).flat_map(|i| (1..=n).map(move |j| format!("a{i}{j}"))))
            .collect();
        let _ = writeln!(s, "{}", cols.join(","));
        for id in 0..self.spec.node_count() {
            if !self.active[id] {
                continue;
            }
            let row: Vec<String> = self
                .spec
                .node(id)
                .iter()
                .chain(self.at_node(id))
                .map(|v| v.to_string())
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |m: &str| Error::invalid(format!("grid CSV: {m}"));
        lines.next().ok_or_else(|| bad("missing header"))?;
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("missing sizes"))?.split(',').collect();
        if head.len() != 3 {
            return Err(bad("size row needs n,eta,resolution"));
        }
        let n: usize = head[0].trim().parse().map_err(|_| bad("n"))?;
        let eta: f64 = head[1].trim().parse().map_err(|_| bad("eta"))?;
        let res: usize = head[2].trim().parse().map_err(|_| bad("resolution"))?;
        let spec = GridSpec::new(n, eta, res)?;
        let mut g = GridFunction::zeros(&spec);
        lines.next();
        let h = spec.h();
        let half = spec.half() as f64;
        let nn = n * n;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let v: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| bad("number")))
                .collect::<Result<_>>()?;
            check_dim(n + nn, v.len())?;
            let idx: Vec<usize> = v[..n].iter().map(|x| (x / h + half).round() as usize).collect();
            let id = spec.id_of(&idx);
            if !g.active[id] {
                return Err(bad("row for an inactive node"));
            }
            g.values[id * nn..(id + 1) * nn].copy_from_slice(&v[n..]);
        }
        Ok(g)
    }
}

/// `C` at the quadrature points `s_q x` of every active node.
pub struct Kernel {
    pub spec: GridSpec,
    s: [f64; 16],
    w: [f64; 16],
    /// `c[slot][q]` flattened; `slot` indexes active nodes.
    c: Vec<f64>,
    slot: Vec<usize>,
    active: Vec<usize>,
}

impl Kernel {
    pub fn from_field(spec: &GridSpec, c: &dyn MatrixField) -> Result<Self> {
        check_dim(spec.n, c.dim())?;
        Kernel::from_rays(spec, |x, s| {
            s.iter()
                .map(|&si| c.eval(&x.iter().map(|v| v * si).collect::<Vec<f64>>()))
                .collect()
        })
    }

    /// Builds the kernel from a ray sampler `(x, [s_q]) -> [C(s_q x)]`.
    pub fn from_rays<F>(spec: &GridSpec, ray: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64]) -> Result<Vec<Vec<f64>>> + Sync,
    {
        let (s, w) = quadrature();
        let nn = spec.n * spec.n;
        let active = spec.active_nodes();
        let mut slot = vec![usize::MAX; spec.node_count()];
        for (k, &id) in active.iter().enumerate() {
            slot[id] = k;
        }
        let rows: Vec<Vec<Vec<f64>>> = active
            .par_iter()
            .map(|&id| ray(&spec.node(id), &s))
            .collect::<Result<_>>()?;
        let mut c = Vec::with_capacity(active.len() * 16 * nn);
        for r in rows {
            check_dim(16, r.len())?;
            for m in r {
                check_dim(nn, m.len())?;
                c.extend_from_slice(&m);
            }
        }
        Ok(Kernel {
            spec: spec.clone(),
            s,
            w,
            c,
            slot,
            active,
        })
    }

    fn c_at(&self, id: usize, q: usize) -> &[f64] {
        let nn = self.spec.n * self.spec.n;
        let k = self.slot[id];
        &self.c[(k * 16 + q) * nn..(k * 16 + q + 1) * nn]
    }

    /// `C` at the nodes themselves (`s = 1` is not a quadrature point, so this
    /// extrapolates nothing: it is only used to bound `|C(x)| / |x|`).
    pub fn d_estimate(&self) -> f64 {
        // |C(s x)| / (s |x|) at every quadrature point inside the ball
        let n = self.spec.n;
        let mut d: f64 = 0.0;
        for &id in &self.active {
            let r = linalg::norm(&self.spec.node(id));
            if r == 0.0 {
                continue;
            }
            for q in 0..16 {
                if r * self.s[q] <= self.spec.eta * (1.0 + 1e-12) {
                    d = d.max(op_norm_flat(self.c_at(id, q), n) / (r * self.s[q]));
                }
            }
        }
        d
    }
}

/// `-A^2 - C A - C` accumulated with weight `w` into `acc`.
fn accumulate(a: &[f64], c: &[f64], w: f64, n: usize, acc: &mut [f64], tmp: &mut [f64]) {
    mat_mul(a, a, n, tmp);
    for (o, t) in acc.iter_mut().zip(tmp.iter()) {
        *o -= w * t;
    }
    mat_mul(c, a, n, tmp);
    for ((o, t), cv) in acc.iter_mut().zip(tmp.iter()).zip(c) {
        *o -= w * (t + cv);
    }
}

fn clamp_to_ball(p: &mut [f64], eta: f64) {
    let r = linalg::norm(p);
    if r > eta {
        p.iter_mut().for_each(|v| *v *= eta / r);
    }
}

/// `T(A)` at every active node. Nodes outside `B^n(eta)` read `A` at points
/// pulled radially into the ball.
pub fn apply_t(a: &GridFunction, kernel: &Kernel) -> Result<GridFunction> {
    if a.spec != kernel.spec {
        return Err(Error::invalid("grid mismatch between A and the kernel"));
    }
    let n = a.spec.n;
    let nn = n * n;
    let origin = a.spec.origin();
    let rows: Vec<Vec<f64>> = kernel
        .active
        .par_iter()
        .map(|&id| {
            let mut acc = vec![0.0; nn];
            if id == origin {
                return Ok(acc);
            }
            let x = a.spec.node(id);
            let mut av = vec![0.0; nn];
            let mut tmp = vec![0.0; nn];
            let mut p = vec![0.0; n];
            for q in 0..16 {
                for i in 0..n {
                    p[i] = x[i] * kernel.s[q];
                }
                clamp_to_ball(&mut p, a.spec.eta);
                a.eval_into(&p, &mut av)?;
                accumulate(&av, kernel.c_at(id, q), kernel.w[q], n, &mut acc, &mut tmp);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut out = GridFunction::zeros(&a.spec);
    for (&id, r) in kernel.active.iter().zip(rows) {
        out.values[id * nn..(id + 1) * nn].copy_from_slice(&r);
    }
    Ok(out)
}

/// `T(A)(x)` at an arbitrary `x` in the ball, given `C(s_q x)` at the
/// quadrature points of [`quadrature`].
pub fn apply_t_at(a: &GridFunction, x: &[f64], c_on_ray: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = a.spec.n;
    let nn = n * n;
    check_dim(16, c_on_ray.len())?;
    let (s, w) = quadrature();
    let mut acc = vec![0.0; nn];
    let mut av = vec![0.0; nn];
    let mut tmp = vec![0.0; nn];
    let mut p = vec![0.0; n];
    for q in 0..16 {
        for i in 0..n {
            p[i] = x[i] * s[q];
        }
        clamp_to_ball(&mut p, a.spec.eta);
        a.eval_into(&p, &mut av)?;
        accumulate(&av, &c_on_ray[q], w[q], n, &mut acc, &mut tmp);
    }
    Ok(acc)
}

/// `max_{0 != x in B(eta)} |C(x)|_op / |x|` over grid nodes; requires `C(0) = 0`.
pub fn estimate_d(c: &dyn MatrixField, spec: &GridSpec) -> Result<f64> {
    check_dim(spec.n, c.dim())?;
    let c0 = c.eval(&vec![0.0; spec.n])?;
    if op_norm_flat(&c0, spec.n) > 1e-10 {
        return Err(Error::invalid("C(0) must vanish"));
    }
    let ids: Vec<usize> = (0..spec.node_count()).filter(|&i| spec.in_ball(i) && i != spec.origin()).collect();
    let vals: Vec<f64> = ids
        .par_iter()
        .map(|&i| {
            let x = spec.node(i);
            Ok(op_norm_flat(&c.eval(&x)?, spec.n) / linalg::norm(&x))
        })
        .collect::<Result<_>>()?;
    Ok(vals.into_iter().fold(0.0, f64::max))
}

/// `sup_{0 != x in B(eta)} |A(x) - B(x)|_op / |x|` over grid nodes.
pub fn weighted_distance(a: &GridFunction, b: &GridFunction) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::invalid("grid mismatch"));
    }
    let n = a.spec.n;
    let origin = a.spec.origin();
    Ok((0..a.spec.node_count())
        .into_par_iter()
        .filter(|&i| i != origin && a.spec.in_ball(i))
        .map(|i| {
            let d: Vec<f64> = a.at_node(i).iter().zip(b.at_node(i)).map(|(p, q)| p - q).collect();
            op_norm_flat(&d, n) / linalg::norm(&a.spec.node(i))
        })
        .reduce(|| 0.0, f64::max))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PicardReport {
    pub d_estimate: f64,
    pub eta_requested: f64,
    pub eta: f64,
    /// `eta` was cut down to `1 / (10 D)`.
    pub truncated: bool,
    pub iterations: usize,
    /// `d(A_{k+1}, A_k)` for every iteration.
    pub distances: Vec<f64>,
    /// `d(T(A), A)` for the returned `A`.
    pub fixed_point_residual: f64,
    /// `max |A(x)| / (5/8 D |x|)` over nonzero ball nodes (`<= 1` expected).
    pub linear_bound_ratio: f64,
    /// `max |A(x)|` over ball nodes (`<= 1/16` expected).
    pub sup: f64,
    pub bounds_hold: bool,
}

impl PicardReport {
    /// Ratios `d_{k+1} / d_k`.
    pub fn ratios(&self) -> Vec<f64> {
        self.distances
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

/// Iteration cap from the guaranteed rate `1/5`.
pub fn iteration_cap(d1: f64, tol: f64) -> usize {
    let k = ((tol * 0.8 / d1.max(tol)).ln() / (0.2f64).ln()).ceil();
    k.max(0.0) as usize + 5
}

/// Picard iteration `A_{k+1} = T(A_k)` from `init` (zero when absent).
pub fn picard_iterate(kernel: &Kernel, d: f64, tol: f64, init: Option<GridFunction>, eta_requested: f64) -> Result<(GridFunction, PicardReport)> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let spec = &kernel.spec;
    let mut a = init.unwrap_or_else(|| GridFunction::zeros(spec));
    if a.spec != *spec {
        return Err(Error::invalid("initial guess lives on a different grid"));
    }
    let mut distances = Vec::new();
    let mut cap = usize::MAX;
    let mut slow = 0;
    loop {
        let next = apply_t(&a, kernel)?;
        let dk = weighted_distance(&next, &a)?;
        distances.push(dk);
        a = next;
        if distances.len() == 1 {
            cap = iteration_cap(dk, tol);
        }
        if dk < tol {
            break;
        }
        if let [.., prev, last] = distances[..] {
            if last > 0.5 * prev {
                slow += 1;
                if slow >= 3 {
                    return Err(Error::Contraction(format!(
                        "successive distances {prev:.3e} -> {last:.3e}; refine the grid or check D"
                    )));
                }
            } else {
                slow = 0;
            }
        }
        if distances.len() > cap {
            return Err(Error::NoConvergence(format!(
                "Picard iteration did not reach tol {tol:e} within {cap} steps (last {dk:.3e})"
            )));
        }
    }
    let origin = spec.origin();
    let nn = spec.n * spec.n;
    a.values[origin * nn..(origin + 1) * nn].iter_mut().for_each(|v| *v = 0.0);
    let residual = weighted_distance(&apply_t(&a, kernel)?, &a)?;
    let mut lin: f64 = 0.0;
    let mut sup: f64 = 0.0;
    for id in 0..spec.node_count() {
        if !spec.in_ball(id) {
            continue;
        }
        let v = op_norm_flat(a.at_node(id), spec.n);
        sup = sup.max(v);
        let r = linalg::norm(&spec.node(id));
        if r > 0.0 {
            let bound = 0.625 * d * r;
            lin = lin.max(if bound > 0.0 { v / bound } else if v > 0.0 { f64::INFINITY } else { 0.0 });
        }
    }
    // slack for rounding in the fixed point
    let bounds_hold = lin <= 1.0 + 1e-6 && sup <= 1.0 / 16.0 + 1e-12;
    let report = PicardReport {
        d_estimate: d,
        eta_requested,
        eta: spec.eta,
        truncated: spec.eta < eta_requested,
        iterations: distances.len(),
        distances,
        fixed_point_residual: residual,
        linear_bound_ratio: lin,
        sup,
        bounds_hold,
    };
    Ok((a, report))
}

/// Solves `T(A) = A` on `B^n(min(eta, 1/(10 D)))`.
pub fn picard_solve(c: &dyn MatrixField, eta: f64, resolution: usize, tol: f64) -> Result<(GridFunction, PicardReport)> {
    let probe = GridSpec::new(c.dim(), eta, resolution)?;
    let d = estimate_d(c, &probe)?;
    let eta_eff = if d > 0.0 { eta.min(1.0 / (10.0 * d)) } else { eta };
    let spec = GridSpec::new(c.dim(), eta_eff, resolution)?;
    let kernel = Kernel::from_field(&spec, c)?;
    picard_iterate(&kernel, d, tol, None, eta)
}

/// Random element of the admissible set: `A(0) = 0`, `|A| <= 1/10`,
/// `A(x) = R1 (u.x)/eta + R2 ((v.x)/eta)^2`.
pub fn random_admissible(spec: &GridSpec, rng: &mut impl Rng) -> GridFunction {
    let n = spec.n;
    let nn = n * n;
    let unit = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = linalg::norm(&v).max(1e-12);
        v.into_iter().map(|a| a / r).collect()
    };
    let scaled = |rng: &mut dyn rand::RngCore, size: f64| -> Vec<f64> {
        let m: Vec<f64> = (0..nn).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = op_norm_flat(&m, n).max(1e-12);
        m.into_iter().map(|a| a * size / norm).collect()
    };
    let split = rng.gen_range(0.2..0.8);
    let total = 0.1 * rng.gen_range(0.3..1.0);
    let u = unit(rng);
    let v = unit(rng);
    let r1 = scaled(rng, total * split);
    let r2 = scaled(rng, total * (1.0 - split));
    let mut g = GridFunction::zeros(spec);
    for id in 0..spec.node_count() {
        if !g.active[id] {
            continue;
        }
        let x = spec.node(id);
        // keep the margin shell inside the admissible bound too
        let scale = spec.eta.max(linalg::norm(&x));
        let a = x.iter().zip(&u).map(|(p, q)| p * q).sum::<f64>() / scale;
        let b = (x.iter().zip(&v).map(|(p, q)| p * q).sum::<f64>() / scale).powi(2);
        for k in 0..nn {
            g.values[id * nn + k] = r1[k] * a + r2[k] * b;
        }
    }
    g
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionReport {
    pub eta: f64,
    pub trials: usize,
    pub max_ratio: f64,
    /// Trials skipped because `A = B` on the grid.
    pub degenerate: usize,
}

/// `max d(T(A), T(B)) / d(A, B)` over random admissible pairs.
pub fn contraction_diagnostic(c: &dyn MatrixField, eta: f64, resolution: usize, trials: usize, seed: u64) -> Result<ContractionReport> {
    let probe = GridSpec::new(c.dim(), eta, resolution)?;
    let d = estimate_d(c, &probe)?;
    let eta_eff = if d > 0.0 { eta.min(1.0 / (10.0 * d)) } else { eta };
    let spec = GridSpec::new(c.dim(), eta_eff, resolution)?;
    let kernel = Kernel::from_field(&spec, c)?;
    let mut rng = sampling::stream_rng(seed, 0);
    let mut max_ratio: f64 = 0.0;
    let mut degenerate = 0;
    for t in 0..trials {
        let a = if t == 0 { GridFunction::zeros(&spec) } else { random_admissible(&spec, &mut rng) };
        let b = random_admissible(&spec, &mut rng);
        let dab = weighted_distance(&a, &b)?;
        if dab <= 1e-300 {
            degenerate += 1;
            continue;
        }
        let ta = apply_t(&a, &kernel)?;
        let tb = apply_t(&b, &kernel)?;
        max_ratio = max_ratio.max(weighted_distance(&ta, &tb)? / dab);
    }
    Ok(ContractionReport {
        eta: eta_eff,
        trials,
        max_ratio,
        degenerate,
    })
}

/// `max |d/dr (r A(r theta)) + A^2 + C A + C|_op` over rays and radii, the
/// derivative by central differences of width one grid spacing.
pub fn ode_residual(a: &GridFunction, c: &dyn MatrixField, theta_samples: usize, radii: &[f64]) -> Result<f64> {
    let n = a.spec.n;
    let nn = n * n;
    let h = a.spec.h();
    let dirs = sampling::sphere_directions(theta_samples.max(2 * n), n);
    let mut worst: f64 = 0.0;
    let mut tmp = vec![0.0; nn];
    for th in &dirs {
        for &r in radii {
            if !(r > 0.0 && r <= a.spec.eta) {
                continue;
            }
            let (r0, r1) = ((r - h / 2.0).max(0.0), (r + h / 2.0).min(a.spec.eta));
            let at = |s: f64| -> Result<Vec<f64>> {
                let p: Vec<f64> = th.iter().map(|v| v * s).collect();
                a.eval(&p)
            };
            let (a0, a1) = (at(r0)?, at(r1)?);
            let x: Vec<f64> = th.iter().map(|v| v * r).collect();
            let av = a.eval(&x)?;
            let cv = c.eval(&x)?;
            let mut res: Vec<f64> = (0..nn).map(|k| (r1 * a1[k] - r0 * a0[k]) / (r1 - r0)).collect();
            mat_mul(&av, &av, n, &mut tmp);
            res.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
            mat_mul(&cv, &av, n, &mut tmp);
            res.iter_mut().zip(tmp.iter().zip(&cv)).for_each(|(o, (t, cc))| *o += t + cc);
            worst = worst.max(op_norm_flat(&res, n));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcspaces::{cml_norm, Region, SampleFamily};

    fn scalar() -> MatrixFn<impl Fn(&[f64]) -> Result<Vec<f64>> + Sync> {
        MatrixFn::new(1, |x: &[f64]| Ok(vec![x[0]]))
    }

    #[test]
    fn quadrature_integrates_polynomials() {
        let (s, w) = quadrature();
        let int = |p: i32| s.iter().zip(&w).map(|(a, b)| b * a.powi(p)).sum::<f64>();
        assert!((int(0) - 1.0).abs() < 1e-14);
        assert!((int(7) - 1.0 / 8.0).abs() < 1e-14);
    }

    #[test]
    fn interpolation_reproduces_nodes_and_linear_functions() {
        let spec = GridSpec::new(2, 0.5, 6).unwrap();
        let lin = MatrixFn::new(2, |x: &[f64]| Ok(vec![x[0], 2.0 * x[1], x[0] - x[1], 1.0 + x[0]]));
        let g = GridFunction::sample(&spec, &lin).unwrap();
        for id in spec.active_nodes() {
            assert!(linalg::dist(&g.eval(&spec.node(id)).unwrap(), g.at_node(id)) < 1e-14);
        }
        let p = [0.123, -0.31];
        let v = g.eval(&p).unwrap();
        let exact = lin.eval(&p).unwrap();
        assert!(linalg::dist(&v, &exact) < 1e-14);
        assert_eq!(g.eval(&[0.0, 0.0]).unwrap(), lin.eval(&[0.0, 0.0]).unwrap());
        assert!(g.eval(&[5.0, 0.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = GridSpec::new(2, 0.3, 3).unwrap();
        let f = MatrixFn::new(2, |x: &[f64]| Ok(vec![x[0].sin(), x[1] / 3.0, 0.1, x[0] * x[1]]));
        let g = GridFunction::sample(&spec, &f).unwrap();
        let back = GridFunction::from_csv(&g.to_csv()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn d_examples() {
        let spec = GridSpec::new(1, 0.5, 8).unwrap();
        assert_eq!(estimate_d(&zero_field(1), &spec).unwrap(), 0.0);
        assert!((estimate_d(&scalar(), &spec).unwrap() - 1.0).abs() < 1e-12);
        // linear pencil C(x) = M (u.x)
        let m = [1.0, 2.0, -0.5, 0.3];
        let u = [0.6, 0.8];
        let pencil = MatrixFn::new(2, move |x: &[f64]| {
            let t = u[0] * x[0] + u[1] * x[1];
            Ok(m.iter().map(|v| v * t).collect())
        });
        let spec2 = GridSpec::new(2, 0.4, 16).unwrap();
        let d = estimate_d(&pencil, &spec2).unwrap();
        // direct maximization: |M| * max |u.x|/|x| = |M|
        let oracle = op_norm_flat(&m, 2);
        assert!((d - oracle).abs() <= 0.02 * oracle, "{d} {oracle}");
        let shifted = MatrixFn::new(1, |x: &[f64]| Ok(vec![x[0] + 1.0]));
        assert!(estimate_d(&shifted, &spec).is_err());
    }

    #[test]
    fn t_examples() {
        let spec = GridSpec::new(1, 0.1, 16).unwrap();
        let zero = GridFunction::zeros(&spec);
        let k0 = Kernel::from_field(&spec, &zero_field(1)).unwrap();
        assert_eq!(apply_t(&zero, &k0).unwrap(), zero);
        let k = Kernel::from_field(&spec, &scalar()).unwrap();
        let t0 = apply_t(&zero, &k).unwrap();
        for id in spec.active_nodes() {
            let x = spec.node(id)[0];
            assert!((t0.at_node(id)[0] + x / 2.0).abs() < 1e-15);
        }
        assert!(weighted_distance(&t0, &zero).unwrap() <= 0.5 * 1.0 + 1e-12);
    }

    #[test]
    fn weighted_distance_examples() {
        let spec = GridSpec::new(1, 0.5, 10).unwrap();
        let lin = GridFunction::sample(&spec, &MatrixFn::new(1, |x: &[f64]| Ok(vec![-3.0 * x[0]]))).unwrap();
        let zero = GridFunction::zeros(&spec);
        assert_eq!(weighted_distance(&lin, &lin).unwrap(), 0.0);
        assert!((weighted_distance(&lin, &zero).unwrap() - 3.0).abs() < 1e-12);
        let mut rng = sampling::stream_rng(1, 1);
        for _ in 0..10 {
            let s2 = GridSpec::new(2, 0.3, 4).unwrap();
            let (a, b, c) = (
                random_admissible(&s2, &mut rng),
                random_admissible(&s2, &mut rng),
                random_admissible(&s2, &mut rng),
            );
            let ab = weighted_distance(&a, &b).unwrap();
            assert!((ab - weighted_distance(&b, &a).unwrap()).abs() <= 1e-12);
            assert!(weighted_distance(&a, &c).unwrap() <= ab + weighted_distance(&b, &c).unwrap() + 1e-12);
        }
    }

    #[test]
    fn picard_zero_field() {
        let (a, rep) = picard_solve(&zero_field(2), 0.5, 4, 1e-12).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(a.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn picard_scalar_example() {
        let (a, rep) = picard_solve(&scalar(), 0.1, 64, 1e-12).unwrap();
        assert_eq!(rep.eta, 0.1);
        let v = a.eval(&[0.1]).unwrap()[0];
        let series = -0.05 + 0.01 / 12.0;
        assert!((v - series).abs() <= 2e-4, "{v}");
        assert!(rep.bounds_hold, "{rep:?}");
        assert!(rep.fixed_point_residual <= 2e-12);
        for r in rep.ratios().iter().skip(1) {
            assert!(*r <= 0.2 + 0.05, "{r}");
        }
        let res = ode_residual(&a, &scalar(), 2, &(1..20).map(|i| i as f64 * 0.005).collect::<Vec<_>>()).unwrap();
        assert!(res <= 1e-4, "{res}");
    }

    #[test]
    fn eta_is_truncated_to_one_over_ten_d() {
        let big = MatrixFn::new(1, |x: &[f64]| Ok(vec![5.0 * x[0]]));
        let (_, rep) = picard_solve(&big, 1.0, 32, 1e-10).unwrap();
        assert!(rep.truncated);
        assert!((rep.eta - 0.02).abs() < 1e-12);
    }

    #[test]
    fn residual_detects_perturbations() {
        let spec = GridSpec::new(1, 0.5, 64).unwrap();
        let zero = GridFunction::zeros(&spec);
        let radii: Vec<f64> = (1..10).map(|i| i as f64 * 0.05).collect();
        assert_eq!(ode_residual(&zero, &zero_field(1), 2, &radii).unwrap(), 0.0);
        let bumped = GridFunction::sample(&spec, &MatrixFn::new(1, |x: &[f64]| Ok(vec![0.01 * x[0]]))).unwrap();
        assert!(ode_residual(&bumped, &zero_field(1), 2, &radii).unwrap() >= 0.005);
        // on B(0.1) the same bump moves d/dr (r A) by only 0.02 r
        let (a, _) = picard_solve(&scalar(), 0.1, 64, 1e-12).unwrap();
        let mut b = a.clone();
        for id in b.spec.active_nodes() {
            let x = b.spec.node(id)[0];
            b.values[id] += 0.01 * x;
        }
        let r = ode_residual(&b, &scalar(), 2, &[0.05]).unwrap();
        assert!((r - 0.001).abs() < 2e-4, "{r}");
    }

    #[test]
    fn contraction_is_at_most_a_fifth() {
        let rep = contraction_diagnostic(&scalar(), 0.1, 32, 50, 11).unwrap();
        assert!(rep.max_ratio <= 0.25, "{rep:?}");
        let z = contraction_diagnostic(&zero_field(2), 0.2, 6, 10, 3).unwrap();
        assert!(z.max_ratio <= 0.25);
    }

    #[test]
    fn fixed_point_is_unique() {
        let c = MatrixFn::new(2, |x: &[f64]| Ok(vec![x[0], x[1], -x[1], 0.5 * x[0]]));
        let spec0 = GridSpec::new(2, 1.0, 8).unwrap();
        let d = estimate_d(&c, &spec0).unwrap();
        let spec = GridSpec::new(2, 1.0 / (10.0 * d), 8).unwrap();
        let kernel = Kernel::from_field(&spec, &c).unwrap();
        let tol = 1e-10;
        let (a, _) = picard_iterate(&kernel, d, tol, None, 1.0).unwrap();
        let mut rng = sampling::stream_rng(4, 0);
        let init = random_admissible(&spec, &mut rng);
        let (b, _) = picard_iterate(&kernel, d, tol, Some(init), 1.0).unwrap();
        assert!(weighted_distance(&a, &b).unwrap() <= 3.0 * tol);
    }

    #[test]
    fn solution_regularity_is_stable_under_refinement() {
        let fam = SampleFamily::lattice(&Region::interval(-0.1, 0.1), 40).unwrap();
        let norm = |res: usize| {
            let (a, _) = picard_solve(&scalar(), 0.1, res, 1e-12).unwrap();
            cml_norm(&|x: &[f64]| a.eval(x), 0, 2, 0.5, &fam).unwrap().estimate
        };
        let (coarse, fine) = (norm(32), norm(64));
        assert!(coarse.is_finite() && (fine - coarse).abs() <= 0.1 * coarse, "{coarse} {fine}");
    }
}
