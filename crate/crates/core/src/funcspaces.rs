//! Sup-estimators for Hölder, Zygmund and vector-field-adapted norms.
//!
//! Every estimate is a supremum over a finite sample family (lattice points,
//! lattice pairs and equally spaced triples), hence a lower bound for the true
//! norm. All norms of one family share the same samples, so inequalities
//! that the definitions imply pair by pair also hold between the estimates.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccmetric::{cc_distance, MetricParams};
use crate::error::{check_dim, Error, Result};
use crate::expr::Expr;
use crate::fields::{DomainBox, VectorSystem};
use crate::flows::{exp_multi_samples, FlowOptions};
use crate::linalg;
use crate::sampling;

/// Where a norm is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Box(DomainBox),
    Ball { center: Vec<f64>, radius: f64 },
}

impl Region {
    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        Region::Ball { center, radius }
    }

    /// `[-r, r]^n` or `B^n(r)` style helper for one-dimensional intervals.
    pub fn interval(lo: f64, hi: f64) -> Self {
        Region::Box(DomainBox {
            lo: vec![lo],
            hi: vec![hi],
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Box(b) => b.dim(),
            Region::Ball { center, .. } => center.len(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box(b) => x.iter().zip(b.lo.iter().zip(&b.hi)).all(|(v, (lo, hi))| {
                let slack = 1e-12 * (hi - lo);
                *v >= lo - slack && *v <= hi + slack
            }),
            Region::Ball { center, radius } => linalg::dist(x, center) <= *radius * (1.0 + 1e-12),
        }
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Region::Box(b) => (b.lo.clone(), b.hi.clone()),
            Region::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
        }
    }
}

/// Finite sample family: points, pairs `(x, y)` and triples `(x, x+h, x+2h)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleFamily {
    pub points: Vec<Vec<f64>>,
    pub pairs: Vec<(usize, usize)>,
    pub triples: Vec<[usize; 3]>,
    /// Lattice intervals per axis of the bounding box.
    pub resolution: usize,
    /// Distinct step lengths used by pairs, ascending.
    pub steps: Vec<f64>,
}

/// Lattice offset multipliers: every integer up to 4, then a 1.5-dyadic ladder.
fn multipliers(limit: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=limit.min(4)).collect();
    let mut k = 4usize;
    while k * 2 <= limit {
        out.push(k * 3 / 2);
        out.push(k * 2);
        k *= 2;
    }
    out.retain(|&v| v <= limit);
    out.sort_unstable();
    out.dedup();
    out
}

impl SampleFamily {
    /// Uniform lattice with `resolution` intervals per axis over the region's
    /// bounding box, restricted to the region. One-dimensional families use
    /// all pairs; higher dimensions use axis and diagonal offsets on a ladder.
    pub fn lattice(region: &Region, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::invalid("lattice resolution must be positive"));
        }
        let n = region.dim();
        let (lo, hi) = region.bounds();
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return Err(Error::invalid("norm regions must be bounded"));
        }
        let per = resolution + 1;
        let total = per.checked_pow(n as u32).filter(|t| *t <= 4_000_000).ok_or_else(|| {
            Error::invalid("lattice too large; lower the resolution")
        })?;
        let mut points = Vec::new();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut keys = Vec::new();
        for id in 0..total {
            let mut rem = id;
            let key: Vec<usize> = (0..n)
                .map(|_| {
                    let k = rem % per;
                    rem /= per;
                    k
                })
                .collect();
            let p: Vec<f64> = (0..n)
                .map(|i| lo[i] + (hi[i] - lo[i]) * key[i] as f64 / resolution as f64)
                .collect();
            if region.contains(&p) {
                index.insert(key.clone(), points.len());
                keys.push(key);
                points.push(p);
            }
        }
        let offsets: Vec<Vec<i64>> = if n == 1 {
            (1..=resolution as i64).map(|k| vec![k]).collect()
        } else {
            let mut dirs = Vec::new();
            for id in 0..3usize.pow(n as u32) {
                let mut rem = id;
                let d: Vec<i64> = (0..n)
                    .map(|_| {
                        let v = (rem % 3) as i64 - 1;
                        rem /= 3;
                        v
                    })
                    .collect();
                // canonical: first nonzero component positive
                if let Some(first) = d.iter().find(|v| **v != 0) {
                    if *first > 0 {
                        dirs.push(d);
                    }
                }
            }
            let mut offs = Vec::new();
            for m in multipliers(resolution) {
                for d in &dirs {
                    offs.push(d.iter().map(|v| v * m as i64).collect());
                }
            }
            offs
        };
        let shift = |key: &[usize], off: &[i64], times: i64| -> Option<usize> {
            let k: Option<Vec<usize>> = key
                .iter()
                .zip(off)
                .map(|(a, b)| usize::try_from(*a as i64 + times * b).ok())
                .collect();
            k.and_then(|k| index.get(&k).copied())
        };
        let mut pairs = Vec::new();
        let mut triples = Vec::new();
        let mut steps = Vec::new();
        for off in &offsets {
            let len = (0..n)
                .map(|i| {
                    let d = off[i] as f64 * (hi[i] - lo[i]) / resolution as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            let mut used = false;
            for (i, key) in keys.iter().enumerate() {
                if let Some(j) = shift(key, off, 1) {
                    pairs.push((i, j));
                    used = true;
                    if let Some(k) = shift(key, off, 2) {
                        triples.push([i, j, k]);
                    }
                }
            }
            if used {
                steps.push(len);
            }
        }
        steps.sort_by(f64::total_cmp);
        steps.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
        Ok(SampleFamily {
            points,
            pairs,
            triples,
            resolution,
            steps,
        })
    }

    /// The same family with every point mapped by `f` (pairs and triples kept).
    pub fn mapped<F: Fn(&[f64]) -> Vec<f64>>(&self, f: F) -> Self {
        SampleFamily {
            points: self.points.iter().map(|p| f(p)).collect(),
            ..self.clone()
        }
    }
}

/// Norm estimate with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    /// One of `C^m`, `H^{m,s}`, `Zyg^s`, `C_X^m`, `H_X^{m,s}`, `Zyg_X^s`, `C^{m,l,w}`.
    pub family: String,
    pub m: usize,
    pub l: Option<usize>,
    pub s: Option<f64>,
    pub omega_exponent: Option<f64>,
    pub resolution: usize,
    pub points: usize,
    pub pairs: usize,
    pub triples: usize,
    pub estimate: f64,
    /// Always `lower-bound`.
    pub semantics: String,
    /// Named partial sums (sup parts, difference parts).
    pub parts: BTreeMap<String, f64>,
    /// Set when only a searchable subfamily of the defining paths was used.
    pub subfamily: bool,
    /// Samples dropped because a path left the region or the domain.
    pub skipped: usize,
}

impl NormReport {
    fn new(family: &str, fam: &SampleFamily, m: usize) -> Self {
        NormReport {
            family: family.to_string(),
            m,
            l: None,
            s: None,
            omega_exponent: None,
            resolution: fam.resolution,
            points: fam.points.len(),
            pairs: fam.pairs.len(),
            triples: fam.triples.len(),
            estimate: 0.0,
            semantics: "lower-bound".into(),
            parts: BTreeMap::new(),
            subfamily: false,
            skipped: 0,
        }
    }
}

/// All multi-indices `alpha in N^n` with `|alpha| <= m`, as sorted axis lists.
fn multi_indices(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut layer = vec![vec![]];
    for _ in 0..m {
        let mut next = Vec::new();
        for a in &layer {
            let start = a.last().copied().unwrap_or(0);
            for k in start..n {
                let mut b: Vec<usize> = a.clone();
                b.push(k);
                next.push(b);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// All ordered lists over `{0..q}` of length `<= m`.
fn ordered_indices(q: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut layer = vec![vec![]];
    for _ in 0..m {
        let mut next = Vec::new();
        for a in &layer {
            for k in 0..q {
                let mut b: Vec<usize> = a.clone();
                b.push(k);
                next.push(b);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// `d^alpha f` with exact expressions, falling back to central differences of
/// the previous derivative where the exact one is undefined (as `|x|'` at 0).
struct Derivative {
    chain: Vec<(Expr, usize)>,
    base: Expr,
}

impl Derivative {
    fn new(f: &Expr, alpha: &[usize]) -> Result<Self> {
        let mut chain = Vec::new();
        let mut cur = f.clone();
        for &k in alpha {
            let next = cur.differentiate(k)?;
            chain.push((cur, k));
            cur = next;
        }
        Ok(Derivative { chain, base: cur })
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.eval_level(self.chain.len(), x)
    }

    fn eval_level(&self, level: usize, x: &[f64]) -> Result<f64> {
        let expr = if level == self.chain.len() {
            &self.base
        } else {
            &self.chain[level].0
        };
        match expr.eval(x) {
            Ok(v) => Ok(v),
            Err(Error::Domain(_)) if level > 0 => {
                let k = self.chain[level - 1].1;
                let h = 1e-6 * x[k].abs().max(1.0);
                let mut p = x.to_vec();
                p[k] = x[k] + h;
                let a = self.eval_level(level - 1, &p)?;
                p[k] = x[k] - h;
                let b = self.eval_level(level - 1, &p)?;
                Ok((a - b) / (2.0 * h))
            }
            Err(e) => Err(e),
        }
    }
}

fn values<F: Fn(&[f64]) -> Result<f64> + Sync>(f: F, fam: &SampleFamily) -> Result<Vec<f64>> {
    fam.points.par_iter().map(|p| f(p)).collect()
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).fold(0.0, f64::max)
}

fn holder_seminorm(v: &[f64], fam: &SampleFamily, s: f64) -> f64 {
    fam.pairs
        .iter()
        .map(|&(i, j)| {
            let d = linalg::dist(&fam.points[i], &fam.points[j]);
            (v[i] - v[j]).abs() / d.powf(s)
        })
        .fold(0.0, f64::max)
}

fn second_difference_part(v: &[f64], fam: &SampleFamily, s: f64) -> f64 {
    fam.triples
        .iter()
        .map(|&[i, j, k]| {
            let h = linalg::dist(&fam.points[i], &fam.points[j]);
            (v[k] - 2.0 * v[j] + v[i]).abs() / h.powf(s)
        })
        .fold(0.0, f64::max)
}

fn check_region(f: &Expr, fam: &SampleFamily) -> Result<()> {
    if fam.points.is_empty() {
        return Err(Error::invalid("sample family has no points inside the region"));
    }
    check_dim(f.dim(), fam.points[0].len())
}

fn split_order(s: f64) -> Result<(usize, f64)> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::invalid(format!("Zygmund order must be positive, got {s}")));
    }
    let m = (s.ceil() as usize).saturating_sub(1);
    Ok((m, s - m as f64))
}

/// `||f||_{C^m} = sum_{|alpha| <= m} sup |d^alpha f|`.
pub fn c_m_norm(f: &Expr, m: usize, fam: &SampleFamily) -> Result<NormReport> {
    check_region(f, fam)?;
    let mut rep = NormReport::new("C^m", fam, m);
    for alpha in multi_indices(f.dim(), m) {
        let d = Derivative::new(f, &alpha)?;
        let sup = sup_abs(&values(|x| d.eval(x), fam)?);
        *rep.parts.entry(format!("sup_order_{}", alpha.len())).or_default() += sup;
        rep.estimate += sup;
    }
    Ok(rep)
}

/// `||f||_{H^{m,s}} = sum_{|alpha| <= m} (sup |d^alpha f| + sup |x-y|^{-s} |d^alpha f(x) - d^alpha f(y)|)`.
pub fn holder_norm(f: &Expr, m: usize, s: f64, fam: &SampleFamily) -> Result<NormReport> {
    check_region(f, fam)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("Hölder exponent must lie in [0, 1], got {s}")));
    }
    let mut rep = NormReport::new("H^{m,s}", fam, m);
    rep.s = Some(s);
    for alpha in multi_indices(f.dim(), m) {
        let d = Derivative::new(f, &alpha)?;
        let v = values(|x| d.eval(x), fam)?;
        let sup = sup_abs(&v);
        let semi = holder_seminorm(&v, fam, s);
        *rep.parts.entry("sup".into()).or_default() += sup;
        *rep.parts.entry("seminorm".into()).or_default() += semi;
        rep.estimate += sup + semi;
    }
    Ok(rep)
}

/// `||f||_{Zyg^{m+s}} = sum_{|alpha| <= m} (||d^alpha f||_{H^{0,s/2}} + sup |h|^{-s} |Delta_h^2 d^alpha f|)`.
pub fn zygmund_norm(f: &Expr, s: f64, fam: &SampleFamily) -> Result<NormReport> {
    check_region(f, fam)?;
    let (m, base) = split_order(s)?;
    let mut rep = NormReport::new("Zyg^s", fam, m);
    rep.s = Some(s);
    for alpha in multi_indices(f.dim(), m) {
        let d = Derivative::new(f, &alpha)?;
        let v = values(|x| d.eval(x), fam)?;
        let sup = sup_abs(&v);
        let semi = holder_seminorm(&v, fam, base / 2.0);
        let second = second_difference_part(&v, fam, base);
        *rep.parts.entry("sup".into()).or_default() += sup;
        *rep.parts.entry("half_order_seminorm".into()).or_default() += semi;
        *rep.parts.entry("second_difference".into()).or_default() += second;
        rep.estimate += sup + semi + second;
    }
    Ok(rep)
}

/// `X^alpha f` for an ordered list, exact for expression-backed fields and
/// by central differences along flows otherwise.
enum FieldDerivative<'a> {
    Exact(Derivative),
    Flow {
        f: &'a Expr,
        s: &'a VectorSystem,
        alpha: Vec<usize>,
        h: f64,
    },
}

impl<'a> FieldDerivative<'a> {
    fn new(f: &'a Expr, s: &'a VectorSystem, alpha: &[usize]) -> Result<Self> {
        if s.is_symbolic() {
            let n = s.dim();
            // X_j g = sum_i a_{j,i} d_i g, applied right to left
            let mut cur = f.clone();
            for &j in alpha.iter().rev() {
                let coeffs = s.field(j).coefficients().expect("symbolic");
                let mut acc = Expr::constant(0.0, n);
                for (i, a) in coeffs.iter().enumerate() {
                    acc = &acc + &(a * &cur.differentiate(i)?);
                }
                cur = acc;
            }
            Ok(FieldDerivative::Exact(Derivative::new(&cur, &[])?))
        } else {
            Ok(FieldDerivative::Flow {
                f,
                s,
                alpha: alpha.to_vec(),
                h: 1e-4,
            })
        }
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            FieldDerivative::Exact(d) => d.eval(x),
            FieldDerivative::Flow { f, s, alpha, h } => flow_derivative(f, s, alpha, *h, x),
        }
    }
}

fn flow_derivative(f: &Expr, s: &VectorSystem, alpha: &[usize], h: f64, x: &[f64]) -> Result<f64> {
    let Some((&j, rest)) = alpha.split_first() else {
        return f.eval(x);
    };
    let opts = FlowOptions::with_steps(2000.0);
    let plus = crate::flows::flow(s.field(j), x, h, &opts)?;
    let minus = crate::flows::flow(s.field(j), x, -h, &opts)?;
    Ok((flow_derivative(f, s, rest, h, &plus)? - flow_derivative(f, s, rest, h, &minus)?) / (2.0 * h))
}

/// Distance estimates for every pair of the family (computed once, reused).
pub fn pair_distances(s: &VectorSystem, fam: &SampleFamily, params: &MetricParams) -> Result<Vec<f64>> {
    fam.pairs
        .par_iter()
        .map(|&(i, j)| cc_distance(s, &fam.points[i], &fam.points[j], params).map(|d| d.rho))
        .collect()
}

fn adapted_seminorm(v: &[f64], fam: &SampleFamily, rho: &[f64], s: f64) -> f64 {
    fam.pairs
        .iter()
        .zip(rho)
        .map(|(&(i, j), &r)| {
            // rho = inf: rho^{-s} = 0 for s > 0 and rho^0 = 1
            let w = if s == 0.0 {
                1.0
            } else if r.is_infinite() {
                0.0
            } else {
                r.powf(-s)
            };
            if w == 0.0 {
                0.0
            } else {
                (v[i] - v[j]).abs() * w
            }
        })
        .fold(0.0, f64::max)
}

/// `||f||_{C_X^m} = sum_{|alpha| <= m} sup |X^alpha f|` over ordered multi-indices.
pub fn adapted_c_m_norm(f: &Expr, s: &VectorSystem, m: usize, fam: &SampleFamily) -> Result<NormReport> {
    check_region(f, fam)?;
    check_dim(s.dim(), f.dim())?;
    let mut rep = NormReport::new("C_X^m", fam, m);
    for alpha in ordered_indices(s.q(), m) {
        let d = FieldDerivative::new(f, s, &alpha)?;
        let sup = sup_abs(&values(|x| d.eval(x), fam)?);
        rep.estimate += sup;
    }
    Ok(rep)
}

/// `||f||_{H_X^{m,s}} = sum_{|alpha| <= m} (sup |X^alpha f| + sup rho(x,y)^{-s} |X^alpha f(x) - X^alpha f(y)|)`.
///
/// `rho` are the pair distances from [`pair_distances`].
pub fn adapted_holder_norm(f: &Expr, s: &VectorSystem, m: usize, exponent: f64, fam: &SampleFamily, rho: &[f64]) -> Result<NormReport> {
    check_region(f, fam)?;
    check_dim(s.dim(), f.dim())?;
    check_dim(fam.pairs.len(), rho.len())?;
    if !(0.0..=1.0).contains(&exponent) {
        return Err(Error::invalid(format!("Hölder exponent must lie in [0, 1], got {exponent}")));
    }
    let mut rep = NormReport::new("H_X^{m,s}", fam, m);
    rep.s = Some(exponent);
    for alpha in ordered_indices(s.q(), m) {
        let d = FieldDerivative::new(f, s, &alpha)?;
        let v = values(|x| d.eval(x), fam)?;
        let sup = sup_abs(&v);
        let semi = adapted_seminorm(&v, fam, rho, exponent);
        *rep.parts.entry("sup".into()).or_default() += sup;
        *rep.parts.entry("seminorm".into()).or_default() += semi;
        rep.estimate += sup + semi;
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathFamily {
    /// Unit constant controls in `R^q`.
    pub directions: usize,
    /// Step lengths `h`; the family's lattice steps are used when empty.
    pub steps: Vec<f64>,
    pub flow: FlowOptions,
}

impl Default for PathFamily {
    fn default() -> Self {
        PathFamily {
            directions: 12,
            steps: Vec::new(),
            flow: FlowOptions::default(),
        }
    }
}

/// `||f||_{Zyg_X^{m+s}}` with the path supremum taken over constant-control
/// paths `gamma(t) = e^{t d . X} x`, `|d| = 1`, `t in [0, 2h]`.
#[allow(clippy::too_many_arguments)]
pub fn adapted_zygmund_norm(
    f: &Expr,
    s: &VectorSystem,
    order: f64,
    region: &Region,
    fam: &SampleFamily,
    rho: &[f64],
    paths: &PathFamily,
) -> Result<NormReport> {
    check_region(f, fam)?;
    check_dim(s.dim(), f.dim())?;
    check_dim(fam.pairs.len(), rho.len())?;
    let (m, base) = split_order(order)?;
    let mut rep = NormReport::new("Zyg_X^s", fam, m);
    rep.s = Some(order);
    rep.subfamily = true;
    let dirs = sampling::sphere_directions(paths.directions.max(2 * s.q()), s.q());
    let steps = if paths.steps.is_empty() { fam.steps.clone() } else { paths.steps.clone() };
    // endpoints gamma(h), gamma(2h) for every (point, direction, step)
    let (nd, ns) = (dirs.len(), steps.len());
    let jobs: Vec<(usize, usize, usize)> = (0..fam.points.len())
        .flat_map(|p| (0..nd).flat_map(move |d| (0..ns).map(move |h| (p, d, h))))
        .collect();
    let ends: Vec<Option<(Vec<f64>, Vec<f64>)>> = jobs
        .par_iter()
        .map(|&(p, d, h)| {
            let a: Vec<f64> = dirs[d].iter().map(|v| v * 2.0 * steps[h]).collect();
            match exp_multi_samples(s, &a, &fam.points[p], &[0.5, 1.0], &paths.flow) {
                Ok(e) if region.contains(&e[0]) && region.contains(&e[1]) => Some((e[0].clone(), e[1].clone())),
                _ => None,
            }
        })
        .collect();
    rep.skipped = ends.iter().filter(|e| e.is_none()).count();
    for alpha in ordered_indices(s.q(), m) {
        let d = FieldDerivative::new(f, s, &alpha)?;
        let v = values(|x| d.eval(x), fam)?;
        let sup = sup_abs(&v);
        let semi = adapted_seminorm(&v, fam, rho, base / 2.0);
        let mut second: f64 = 0.0;
        for (&(p, _, h), e) in jobs.iter().zip(&ends) {
            if let Some((mid, end)) = e {
                let val = (d.eval(end)? - 2.0 * d.eval(mid)? + v[p]).abs() / steps[h].powf(base);
                second = second.max(val);
            }
        }
        *rep.parts.entry("sup".into()).or_default() += sup;
        *rep.parts.entry("half_order_seminorm".into()).or_default() += semi;
        *rep.parts.entry("second_difference".into()).or_default() += second;
        rep.estimate += sup + semi + second;
    }
    Ok(rep)
}

/// A vector-valued function sampled pointwise (for example an interpolated grid function).
pub type VectorFn<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a;

/// `sum_{|beta| <= m} sum_{j <= l} sup w(|h|)^{-j} |Delta_h^j d^beta F|` with
/// `w(h) = h^omega_exponent`, derivatives by central differences.
pub fn cml_norm(f: &VectorFn, m: usize, l: usize, omega_exponent: f64, fam: &SampleFamily) -> Result<NormReport> {
    if l > 2 {
        return Err(Error::invalid("only l in {0, 1, 2} is supported"));
    }
    if fam.points.is_empty() {
        return Err(Error::invalid("sample family has no points inside the region"));
    }
    let n = fam.points[0].len();
    let mut rep = NormReport::new("C^{m,l,w}", fam, m);
    rep.l = Some(l);
    rep.omega_exponent = Some(omega_exponent);
    for beta in multi_indices(n, m) {
        let vals: Vec<Vec<f64>> = fam
            .points
            .par_iter()
            .map(|p| fd_derivative(f, &beta, p))
            .collect::<Result<_>>()?;
        let sup = vals.iter().map(|v| linalg::norm(v)).fold(0.0, f64::max);
        *rep.parts.entry("j0".into()).or_default() += sup;
        rep.estimate += sup;
        if l >= 1 {
            let first = fam
                .pairs
                .iter()
                .map(|&(i, j)| {
                    let h = linalg::dist(&fam.points[i], &fam.points[j]);
                    linalg::dist(&vals[i], &vals[j]) / h.powf(omega_exponent)
                })
                .fold(0.0, f64::max);
            *rep.parts.entry("j1".into()).or_default() += first;
            rep.estimate += first;
        }
        if l == 2 {
            let second = fam
                .triples
                .iter()
                .map(|&[i, j, k]| {
                    let h = linalg::dist(&fam.points[i], &fam.points[j]);
                    let d2: Vec<f64> = (0..vals[i].len()).map(|c| vals[k][c] - 2.0 * vals[j][c] + vals[i][c]).collect();
                    linalg::norm(&d2) / h.powf(2.0 * omega_exponent)
                })
                .fold(0.0, f64::max);
            *rep.parts.entry("j2".into()).or_default() += second;
            rep.estimate += second;
        }
    }
    Ok(rep)
}

fn fd_derivative(f: &VectorFn, beta: &[usize], x: &[f64]) -> Result<Vec<f64>> {
    let Some((&k, rest)) = beta.split_first() else {
        return f(x);
    };
    let h = 1e-4 * x[k].abs().max(1.0);
    let mut p = x.to_vec();
    p[k] = x[k] + h;
    let a = fd_derivative(f, rest, &p)?;
    p[k] = x[k] - h;
    let b = fd_derivative(f, rest, &p)?;
    Ok(a.iter().zip(&b).map(|(u, v)| (u - v) / (2.0 * h)).collect())
}

/// One inequality checked on estimator values: `lhs <= constant * rhs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InclusionItem {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub constant: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InclusionReport {
    pub items: Vec<InclusionItem>,
}

impl InclusionReport {
    pub fn holds(&self) -> bool {
        self.items.iter().all(|i| i.holds)
    }
}

fn item(name: &str, lhs: f64, constant: f64, rhs: f64) -> InclusionItem {
    InclusionItem {
        name: name.into(),
        lhs,
        rhs,
        constant,
        holds: lhs <= constant * rhs * (1.0 + 1e-12) + 1e-300,
    }
}

/// The four inclusion inequalities between Hölder and Zygmund norms of order
/// `m`, for exponents `s1 <= s2` in `(0, 1]`, on one shared sample family.
pub fn inclusion_check(f: &Expr, m: usize, s1: f64, s2: f64, fam: &SampleFamily) -> Result<InclusionReport> {
    if !(0.0 < s1 && s1 <= s2 && s2 <= 1.0) {
        return Err(Error::invalid("inclusion check needs 0 < s1 <= s2 <= 1"));
    }
    let h1 = holder_norm(f, m, s1, fam)?.estimate;
    let h2 = holder_norm(f, m, s2, fam)?.estimate;
    let lip = holder_norm(f, m, 1.0, fam)?.estimate;
    let cm1 = c_m_norm(f, m + 1, fam)?.estimate;
    let z1 = zygmund_norm(f, m as f64 + s1, fam)?.estimate;
    let z2 = zygmund_norm(f, m as f64 + s2, fam)?.estimate;
    Ok(InclusionReport {
        items: vec![
            item("H^{m,s1} <= 3 H^{m,s2}", h1, 3.0, h2),
            item("H^{m,1} <= C^{m+1}", lip, 1.0, cm1),
            item("Zyg^{m+s1} <= 5 H^{m,s1}", z1, 5.0, h1),
            item("Zyg^{m+s1} <= 15 Zyg^{m+s2}", z1, 15.0, z2),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::VectorField;
    use proptest::prelude::*;

    fn e(s: &str) -> Expr {
        Expr::parse(s, 1).unwrap()
    }

    fn unit() -> SampleFamily {
        SampleFamily::lattice(&Region::interval(-1.0, 1.0), 200).unwrap()
    }

    #[test]
    fn holder_examples() {
        let fam = unit();
        assert!((holder_norm(&e("x1"), 0, 1.0, &fam).unwrap().estimate - 2.0).abs() < 1e-12);
        assert!((holder_norm(&e("3.5"), 2, 0.5, &fam).unwrap().estimate - 3.5).abs() < 1e-12);
        assert!((c_m_norm(&e("x1^2"), 1, &fam).unwrap().estimate - 3.0).abs() < 1e-12);
        assert!((holder_norm(&e("x1^2"), 1, 0.0, &fam).unwrap().estimate - 8.0).abs() < 1e-12);
    }

    #[test]
    fn zygmund_examples() {
        let fam = unit();
        let affine = zygmund_norm(&e("2*x1 + 1"), 1.0, &fam).unwrap();
        assert!(affine.parts["second_difference"] <= 1e-12);
        let h = holder_norm(&e("2*x1 + 1"), 0, 0.5, &fam).unwrap().estimate;
        assert!((affine.estimate - h).abs() < 1e-12);
        let abs = zygmund_norm(&e("abs(x1)"), 1.0, &fam).unwrap();
        assert!((abs.parts["second_difference"] - 2.0).abs() < 1e-9);
        let sq = zygmund_norm(&e("x1^2"), 1.0, &fam).unwrap();
        assert!((sq.parts["second_difference"] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn higher_order_zygmund_recurses_through_derivatives() {
        let fam = unit();
        let z = zygmund_norm(&e("x1^3"), 1.5, &fam).unwrap();
        let z0 = zygmund_norm(&e("x1^3"), 0.5, &fam).unwrap().estimate;
        let z1 = zygmund_norm(&e("3*x1^2"), 0.5, &fam).unwrap().estimate;
        assert!((z.estimate - z0 - z1).abs() < 1e-9);
    }

    #[test]
    fn cml_examples() {
        let fam = unit();
        let sq = |x: &[f64]| Ok(vec![x[0] * x[0]]);
        let r = cml_norm(&sq, 0, 2, 0.5, &fam).unwrap();
        assert!((r.parts["j2"] - 2.0).abs() < 1e-9);
        let c2 = cml_norm(&sq, 1, 0, 0.5, &fam).unwrap();
        assert!((c2.estimate - 3.0).abs() < 1e-6);
        let lin = |x: &[f64]| Ok(vec![x[0]]);
        let h = cml_norm(&lin, 0, 1, 1.0, &fam).unwrap();
        let semi = holder_norm(&e("x1"), 0, 1.0, &fam).unwrap().parts["seminorm"];
        assert!((h.parts["j1"] - semi).abs() < 1e-12);
    }

    #[test]
    fn inclusions_hold_on_examples() {
        let fam = unit();
        for f in ["x1", "x1^2", "abs(x1)"] {
            for (s1, s2) in [(0.5, 1.0), (0.25, 0.75), (1.0, 1.0)] {
                let rep = inclusion_check(&e(f), 0, s1, s2, &fam).unwrap();
                assert!(rep.holds(), "{f} {s1} {s2}: {:?}", rep.items);
            }
        }
    }

    #[test]
    fn adapted_examples() {
        let fam = unit();
        let dx = VectorSystem::euclidean(1);
        let p = MetricParams::default();
        let rho = pair_distances(&dx, &fam, &p).unwrap();
        let f = e("x1");
        let a = adapted_holder_norm(&f, &dx, 1, 0.0, &fam, &rho).unwrap();
        assert!((a.parts["sup"] - 2.0).abs() < 1e-12);
        assert!((adapted_c_m_norm(&f, &dx, 1, &fam).unwrap().estimate - 2.0).abs() < 1e-12);
        let h = holder_norm(&f, 0, 1.0, &fam).unwrap().estimate;
        let a1 = adapted_holder_norm(&f, &dx, 0, 1.0, &fam, &rho).unwrap().estimate;
        assert!((a1 - h).abs() <= 0.05 * h);
        // doubling the field halves rho and doubles X f
        let two = dx.scaled(&[2.0]).unwrap();
        let rho2 = pair_distances(&two, &fam, &p).unwrap();
        let b = adapted_holder_norm(&f, &two, 0, 1.0, &fam, &rho2).unwrap();
        assert!((b.parts["seminorm"] - 2.0).abs() < 1e-6);
        assert!((adapted_c_m_norm(&f, &two, 1, &fam).unwrap().estimate - 3.0).abs() < 1e-12);
    }

    #[test]
    fn adapted_zygmund_matches_euclidean() {
        let region = Region::Box(DomainBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap());
        let fam = SampleFamily::lattice(&region, 8).unwrap();
        let s = VectorSystem::euclidean(2);
        let rho = pair_distances(&s, &fam, &MetricParams::default()).unwrap();
        let f = Expr::parse("sin(x1)*cos(x2) + x1^2", 2).unwrap();
        let z = zygmund_norm(&f, 1.0, &fam).unwrap().estimate;
        let paths = PathFamily {
            directions: 8,
            ..Default::default()
        };
        let za = adapted_zygmund_norm(&f, &s, 1.0, &region, &fam, &rho, &paths).unwrap();
        assert!((za.estimate - z).abs() <= 0.05 * z, "{} {}", za.estimate, z);
        assert!(za.subfamily);
        let c = Expr::parse("4", 2).unwrap();
        let zc = adapted_zygmund_norm(&c, &s, 1.0, &region, &fam, &rho, &paths).unwrap();
        assert_eq!(zc.estimate, 4.0);
    }

    #[test]
    fn heisenberg_vertical_coordinate_is_flat_along_paths() {
        let x = VectorField::parse("X", &["1", "0", "-x2/2"]).unwrap();
        let y = VectorField::parse("Y", &["0", "1", "x1/2"]).unwrap();
        let t = VectorField::parse("T", &["0", "0", "1"]).unwrap();
        let s = VectorSystem::new(vec![x, y, t], DomainBox::unbounded(3)).unwrap();
        let region = Region::ball(vec![0.0; 3], 1.0);
        let fam = SampleFamily::lattice(&region, 4).unwrap();
        let rho = vec![1.0; fam.pairs.len()];
        let f = Expr::parse("x3", 3).unwrap();
        let z = adapted_zygmund_norm(&f, &s, 1.0, &region, &fam, &rho, &PathFamily::default()).unwrap();
        assert!(z.parts["second_difference"] <= 1e-6);
    }

    #[test]
    fn refinement_is_monotone() {
        let f = e("sin(3*x1) + abs(x1)");
        let r = Region::interval(-1.0, 1.0);
        let coarse = SampleFamily::lattice(&r, 50).unwrap();
        let fine = SampleFamily::lattice(&r, 100).unwrap();
        for (a, b) in [
            (holder_norm(&f, 1, 0.5, &coarse).unwrap(), holder_norm(&f, 1, 0.5, &fine).unwrap()),
            (zygmund_norm(&f, 0.7, &coarse).unwrap(), zygmund_norm(&f, 0.7, &fine).unwrap()),
        ] {
            assert!(b.estimate >= a.estimate - 1e-12);
        }
    }

    #[test]
    fn affine_change_of_variables_preserves_adapted_norms() {
        let x = VectorField::parse("X", &["1", "x1"]).unwrap();
        let y = VectorField::parse("Y", &["0", "1"]).unwrap();
        let s = VectorSystem::new(vec![x, y], DomainBox::unbounded(2)).unwrap();
        let m = linalg::Mat::from_row_slice(2, 2, &[1.5, 0.3, -0.2, 0.8]);
        let b = [0.4, -0.1];
        let pushed = s.push_affine(&m, &b).unwrap();
        let minv = linalg::inverse(&m).unwrap();
        let f = Expr::parse("x1^2 + sin(x2)", 2).unwrap();
        // f o Psi^{-1}(y) = f(M^{-1}(y - b))
        let pre: Vec<Expr> = (0..2)
            .map(|i| {
                let mut acc = Expr::constant(0.0, 2);
                for k in 0..2 {
                    acc = &acc + &(&Expr::var(k, 2) - &Expr::constant(b[k], 2)).scale(minv[(i, k)]);
                }
                acc
            })
            .collect();
        let g = f.substitute(&pre).unwrap();
        let region = Region::ball(vec![0.0, 0.0], 0.5);
        let fam = SampleFamily::lattice(&region, 6).unwrap();
        let image = fam.mapped(|p| {
            let v = linalg::mat_vec(&m, p);
            vec![v[0] + b[0], v[1] + b[1]]
        });
        let p = MetricParams::default();
        let rho = pair_distances(&s, &fam, &p).unwrap();
        let rho_img = pair_distances(&pushed, &image, &p).unwrap();
        let a = adapted_holder_norm(&f, &s, 1, 0.5, &fam, &rho).unwrap().estimate;
        let c = adapted_holder_norm(&g, &pushed, 1, 0.5, &image, &rho_img).unwrap().estimate;
        assert!((a - c).abs() <= 0.05 * a, "{a} {c}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn zygmund_algebra_property(a in -2.0f64..2.0, b in -2.0f64..2.0, s in 0.2f64..1.0) {
            let fam = SampleFamily::lattice(&Region::interval(-1.0, 1.0), 60).unwrap();
            let f = e(&format!("sin({a}*x1)"));
            let g = e(&format!("abs(x1 - {})", b / 4.0));
            let fg = &f * &g;
            let zf = zygmund_norm(&f, s, &fam).unwrap().estimate;
            let zg = zygmund_norm(&g, s, &fam).unwrap().estimate;
            let zfg = zygmund_norm(&fg, s, &fam).unwrap().estimate;
            prop_assert!(zfg <= 6.0 * zf * zg + 1e-12);
        }
    }
}
