//! Carnot-Caratheodory distance and ball estimators.
//!
//! `B_X(x, delta)` is the set of endpoints of paths `g' = sum a_j delta X_j(g)`
//! on `[0, 1]` with `|a| < 1`. Every estimate here works with the scaled
//! system `delta X` and unit budget: a shortest-path graph of short
//! constant-control segments grown from the center, finished by a Newton
//! solve for one constant-control leg `e^{b . X} z = y`. Found paths are
//! genuine, so distances are upper bounds and balls are inner estimates.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fields::{DomainBox, VectorSystem};
use crate::flows::{exp_multi, FlowOptions};
use crate::linalg::{self, Mat};
use crate::sampling::{self, MC_BLOCK};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricParams {
    /// Graph cells per axis of the bounding box.
    pub resolution: usize,
    /// Number of unit control directions per graph node (made symmetric).
    pub directions: usize,
    /// Graph segment length, as a fraction of the radius.
    pub tau: f64,
    /// Nodes refined by Newton per query (after linear screening).
    pub candidates: usize,
    /// Candidates whose linearized cost exceeds the target by more than this are skipped.
    pub screen: f64,
    pub steps_per_unit: f64,
    pub newton_iters: usize,
    /// Per-axis residual tolerance relative to the box half-widths.
    pub newton_tol: f64,
    pub max_nodes: usize,
    /// Safety factor on the bounding box half-widths.
    pub box_margin: f64,
    /// Radius doublings tried by `cc_distance` before reporting unreachable.
    pub max_doublings: usize,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            resolution: 16,
            directions: 16,
            tau: 0.1,
            candidates: 4,
            screen: 1.0,
            steps_per_unit: 24.0,
            newton_iters: 16,
            newton_tol: 1e-8,
            max_nodes: 200_000,
            box_margin: 1.05,
            max_doublings: 40,
        }
    }
}

impl MetricParams {
    /// Twice the graph resolution and twice the directions.
    pub fn refined(&self) -> Self {
        MetricParams {
            resolution: self.resolution * 2,
            directions: self.directions * 2,
            tau: self.tau / 2.0,
            ..self.clone()
        }
    }
}

/// Distances below this fraction of the radius count as zero.
pub const RESOLUTION_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphNode {
    pub pos: Vec<f64>,
    pub cost: f64,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Shortest-path tree of constant-control segments; node 0 is the source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CCGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub resolution: usize,
    pub directions: usize,
    pub tau: f64,
}

/// Control directions closed under negation, so every segment can be reversed.
fn symmetric_directions(count: usize, q: usize) -> Vec<Vec<f64>> {
    let half = sampling::sphere_directions(count.div_ceil(2).max(q), q);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(2 * half.len());
    for d in half {
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let seen = |v: &Vec<f64>, out: &Vec<Vec<f64>>| out.iter().any(|w| linalg::dist(w, v) < 1e-12);
        if !seen(&d, &out) {
            out.push(d);
        }
        if !seen(&neg, &out) {
            out.push(neg);
        }
    }
    out
}

#[derive(PartialEq)]
struct Queued(f64, usize);

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Outcome of one distance query against a [`BallIndex`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reach {
    /// Estimated distance in units of the index radius (`inf` if unreachable).
    pub cost: f64,
    /// Constant-control legs used after the graph path (0 for the center).
    pub legs: usize,
}

/// Bounding box, graph and lookup tables for the unit ball of a (scaled) system.
pub struct BallIndex {
    system: VectorSystem,
    center: Vec<f64>,
    half: Vec<f64>,
    width: Vec<f64>,
    graph: CCGraph,
    cells: HashMap<Vec<i64>, usize>,
    pinvs: Vec<Mat>,
    flow: FlowOptions,
    params: MetricParams,
}

/// Half-widths `W` with `W_i >= margin * sup_{x + [-W, W]} sqrt(sum_j X_{j,i}^2)`,
/// the sup sampled on a lattice of the box. A unit-cost path moves axis `i`
/// at speed at most that square root, so it cannot leave such a box.
fn bounding_half_widths(s: &VectorSystem, x: &[f64], margin: f64) -> Result<Vec<f64>> {
    let n = s.dim();
    let lattice = if n <= 3 { 5 } else { 3 };
    let speeds = |half: &[f64]| -> Result<Vec<f64>> {
        let mut best = vec![0.0f64; n];
        let total = (lattice as usize).pow(n as u32);
        for idx in 0..total {
            let mut rem = idx;
            let p: Vec<f64> = (0..n)
                .map(|i| {
                    let k = rem % lattice;
                    rem /= lattice;
                    x[i] + half[i] * (2.0 * k as f64 / (lattice - 1) as f64 - 1.0)
                })
                .collect();
            if !s.domain().contains(&p) {
                continue;
            }
            let cols = s.columns(&p)?;
            for i in 0..n {
                let v = cols.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt();
                best[i] = best[i].max(v);
            }
        }
        Ok(best)
    };
    let mut half = vec![0.0; n];
    for _ in 0..200 {
        let next: Vec<f64> = speeds(&half)?.iter().map(|v| margin * v).collect();
        let grew = next
            .iter()
            .zip(&half)
            .any(|(a, b)| *a > *b * (1.0 + 1e-9) && *a > 0.0);
        half = next.iter().zip(&half).map(|(a, b)| a.max(*b)).collect();
        if !grew {
            break;
        }
        let dom = s.domain();
        if (0..n).all(|i| x[i] - half[i] <= dom.lo[i] && x[i] + half[i] >= dom.hi[i]) {
            break;
        }
    }
    Ok(half)
}

impl BallIndex {
    /// Index for the unit ball of `s` around `x`.
    pub fn build(s: &VectorSystem, x: &[f64], params: &MetricParams) -> Result<Self> {
        check_dim(s.dim(), x.len())?;
        if !s.domain().contains(x) {
            return Err(Error::invalid("ball center lies outside the domain"));
        }
        let n = s.dim();
        let q = s.q();
        let mut half = bounding_half_widths(s, x, params.box_margin)?;
        let dom = s.domain();
        for (i, h) in half.iter_mut().enumerate() {
            // keep the box non-degenerate so cells and volumes stay defined
            if *h == 0.0 {
                *h = f64::MIN_POSITIVE.sqrt();
            }
            let room = (x[i] - dom.lo[i]).max(dom.hi[i] - x[i]);
            *h = h.min(room);
        }
        let res = params.resolution.max(1) as f64;
        let width: Vec<f64> = half.iter().map(|h| 2.0 * h / res).collect();
        let bbox = DomainBox {
            lo: (0..n).map(|i| x[i] - half[i]).collect(),
            hi: (0..n).map(|i| x[i] + half[i]).collect(),
        }
        .intersect(dom);
        let flow = FlowOptions {
            steps_per_unit: params.steps_per_unit,
            domain: Some(bbox),
            ..Default::default()
        };
        let mut index = BallIndex {
            system: s.clone(),
            center: x.to_vec(),
            half,
            width,
            graph: CCGraph {
                nodes: vec![GraphNode {
                    pos: x.to_vec(),
                    cost: 0.0,
                    parent: None,
                }],
                edges: Vec::new(),
                resolution: params.resolution,
                directions: 0,
                tau: params.tau,
            },
            cells: HashMap::new(),
            pinvs: Vec::new(),
            flow,
            params: params.clone(),
        };
        let dirs = symmetric_directions(params.directions, q);
        index.graph.directions = dirs.len();
        index.grow(&dirs)?;
        for node in &index.graph.nodes {
            let m = index.system.matrix(&node.pos)?;
            index.pinvs.push(linalg::pinv(&m, 1e-10));
        }
        Ok(index)
    }

    fn key(&self, p: &[f64]) -> Vec<i64> {
        (0..p.len())
            .map(|i| ((p[i] - (self.center[i] - self.half[i])) / self.width[i]).floor() as i64)
            .collect()
    }

    fn grow(&mut self, dirs: &[Vec<f64>]) -> Result<()> {
        let tau = self.params.tau;
        let k0 = self.key(&self.center);
        self.cells.insert(k0, 0);
        let mut settled = vec![false];
        let mut heap = BinaryHeap::new();
        heap.push(Queued(0.0, 0));
        while let Some(Queued(c, i)) = heap.pop() {
            if settled[i] || c > self.graph.nodes[i].cost {
                continue;
            }
            settled[i] = true;
            let next_cost = c + tau;
            if next_cost > 1.0 + 1e-12 {
                continue;
            }
            let from = self.graph.nodes[i].pos.clone();
            for d in dirs {
                let a: Vec<f64> = d.iter().map(|v| v * tau).collect();
                let p = match exp_multi(&self.system, &a, &from, &self.flow) {
                    Ok(p) => p,
                    Err(Error::ExitedDomain { .. } | Error::BlowUp { .. } | Error::Domain(_) | Error::NonFinite) => {
                        continue
                    }
                    Err(e) => return Err(e),
                };
                let k = self.key(&p);
                match self.cells.get(&k) {
                    None => {
                        if self.graph.nodes.len() >= self.params.max_nodes {
                            continue;
                        }
                        let j = self.graph.nodes.len();
                        self.graph.nodes.push(GraphNode {
                            pos: p,
                            cost: next_cost,
                            parent: Some(i),
                        });
                        settled.push(false);
                        self.cells.insert(k, j);
                        heap.push(Queued(next_cost, j));
                    }
                    Some(&j) => {
                        if !settled[j] && next_cost < self.graph.nodes[j].cost {
                            self.graph.nodes[j] = GraphNode {
                                pos: p,
                                cost: next_cost,
                                parent: Some(i),
                            };
                            heap.push(Queued(next_cost, j));
                        }
                    }
                }
            }
        }
        self.graph.edges = self
            .graph
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(j, nd)| {
                nd.parent.map(|i| GraphEdge {
                    from: i,
                    to: j,
                    weight: tau,
                })
            })
            .collect();
        Ok(())
    }

    pub fn graph(&self) -> &CCGraph {
        &self.graph
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn system(&self) -> &VectorSystem {
        &self.system
    }

    /// Bounding box `center +- half-widths` (clipped to the domain).
    pub fn bounding_box(&self) -> DomainBox {
        self.flow.domain.clone().expect("set at build")
    }

    pub fn box_volume(&self) -> f64 {
        let b = self.bounding_box();
        b.lo.iter().zip(&b.hi).map(|(a, c)| c - a).product()
    }

    fn scaled_residual(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.half).map(|(v, h)| v.abs() / h).fold(0.0, f64::max)
    }

    fn endpoint(&self, b: &[f64], z: &[f64]) -> Option<Vec<f64>> {
        exp_multi(&self.system, b, z, &self.flow).ok()
    }

    /// Cost `|b|` of a constant-control leg `e^{b . X} z = y`, if Newton finds one
    /// with `|b| <= cap`.
    fn leg(&self, node: usize, y: &[f64], cap: f64) -> Option<f64> {
        let z = &self.graph.nodes[node].pos;
        let diff: Vec<f64> = y.iter().zip(z).map(|(a, b)| a - b).collect();
        if self.scaled_residual(&diff) <= self.params.newton_tol {
            return Some(0.0);
        }
        let mut jmat = self.system.matrix(z).ok()?;
        let mut p = self.pinvs[node].clone();
        let mut b = linalg::mat_vec(&p, &diff);
        let mut exact_jac = false;
        let mut prev = f64::INFINITY;
        let mut stalls = 0;
        for _ in 0..self.params.newton_iters {
            if linalg::norm(&b) > cap {
                return None;
            }
            let e = self.endpoint(&b, z)?;
            let f: Vec<f64> = e.iter().zip(y).map(|(a, c)| a - c).collect();
            let r = self.scaled_residual(&f);
            if r <= self.params.newton_tol {
                return Some(linalg::norm(&b));
            }
            if r > 0.5 * prev {
                stalls += 1;
                if stalls > 3 {
                    return None;
                }
                if !exact_jac || stalls > 1 {
                    jmat = self.leg_jacobian(&b, z, &e)?;
                    p = linalg::pinv(&jmat, 1e-10);
                    exact_jac = true;
                }
            } else {
                stalls = 0;
            }
            prev = prev.min(r);
            // minimum-norm step for the linearized constraint
            let jb = linalg::mat_vec(&jmat, &b);
            let rhs: Vec<f64> = jb.iter().zip(&f).map(|(a, c)| a - c).collect();
            b = linalg::mat_vec(&p, &rhs);
        }
        None
    }

    fn leg_jacobian(&self, b: &[f64], z: &[f64], e: &[f64]) -> Option<Mat> {
        let n = self.system.dim();
        let q = self.system.q();
        let h = 1e-6 * linalg::norm(b).max(1e-2);
        let mut m = Mat::zeros(n, q);
        let mut bp = b.to_vec();
        for j in 0..q {
            bp[j] = b[j] + h;
            let ep = self.endpoint(&bp, z)?;
            bp[j] = b[j];
            for i in 0..n {
                m[(i, j)] = (ep[i] - e[i]) / h;
            }
        }
        Some(m)
    }

    /// Estimated distance from the center to `y` in units of the radius.
    /// With `target`, stops as soon as a path of cost below it is found.
    pub fn reach(&self, y: &[f64], target: Option<f64>) -> Reach {
        let n = self.system.dim();
        let diff: Vec<f64> = y.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        if self.scaled_residual(&diff) <= RESOLUTION_FLOOR * 1e-3 {
            return Reach { cost: 0.0, legs: 0 };
        }
        let k = self.key(y);
        let mut cands: Vec<(f64, usize)> = Vec::new();
        let lin = |j: usize| {
            let z = &self.graph.nodes[j].pos;
            let d: Vec<f64> = y.iter().zip(z).map(|(a, b)| a - b).collect();
            self.graph.nodes[j].cost + linalg::norm(&linalg::mat_vec(&self.pinvs[j], &d))
        };
        cands.push((lin(0), 0));
        let total = 3usize.pow(n as u32);
        let mut off = vec![0i64; n];
        for idx in 0..total {
            let mut rem = idx;
            for o in off.iter_mut() {
                *o = (rem % 3) as i64 - 1;
                rem /= 3;
            }
            let kk: Vec<i64> = k.iter().zip(&off).map(|(a, b)| a + b).collect();
            if let Some(&j) = self.cells.get(&kk) {
                if j != 0 {
                    cands.push((lin(j), j));
                }
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let bound = target.unwrap_or(f64::INFINITY);
        let mut best = f64::INFINITY;
        let mut legs = 1;
        for &(l, j) in cands.iter().take(self.params.candidates.max(1)) {
            let g = self.graph.nodes[j].cost;
            let limit = bound.min(best);
            if l > limit + self.params.screen || g >= best {
                continue;
            }
            let cap = if limit.is_finite() { limit - g + self.params.screen } else { 4.0 };
            if let Some(c) = self.leg(j, y, cap) {
                best = best.min(g + c);
                if let Some(t) = target {
                    if best < t {
                        break;
                    }
                }
            }
        }
        if best.is_infinite() {
            // one leg cannot turn corners (rank-deficient frames); try two
            for &(_, j) in cands.iter().take(self.params.candidates.max(1)) {
                let g = self.graph.nodes[j].cost;
                let limit = bound.min(best);
                if g >= limit {
                    continue;
                }
                let cap = if limit.is_finite() { limit - g + self.params.screen } else { 4.0 };
                if let Some(c) = self.two_legs(j, y, cap) {
                    best = best.min(g + c);
                    legs = 2;
                    if target.is_some_and(|t| best < t) {
                        break;
                    }
                }
            }
        }
        Reach {
            cost: if best < RESOLUTION_FLOOR { 0.0 } else { best },
            legs,
        }
    }

    /// Cost `|b1| + |b2|` of `e^{b2 . X} e^{b1 . X} z = y`, by minimum-norm
    /// Gauss-Newton with difference Jacobians.
    fn two_legs(&self, node: usize, y: &[f64], cap: f64) -> Option<f64> {
        let n = self.system.dim();
        let q = self.system.q();
        let z = &self.graph.nodes[node].pos;
        let diff: Vec<f64> = y.iter().zip(z).map(|(a, b)| a - b).collect();
        let lin = linalg::mat_vec(&self.pinvs[node], &diff);
        // off-axis start so the Jacobian sees the bracket directions
        let mut b: Vec<f64> = (0..2 * q)
            .map(|k| 0.5 * lin[k % q] + if k < q { 0.05 } else { -0.05 } * ((k % q) as f64 + 1.0) / q as f64)
            .collect();
        let end = |b: &[f64]| -> Option<Vec<f64>> {
            let mid = self.endpoint(&b[..q], z)?;
            self.endpoint(&b[q..], &mid)
        };
        let cost = |b: &[f64]| linalg::norm(&b[..q]) + linalg::norm(&b[q..]);
        let mut prev = f64::INFINITY;
        let mut stalls = 0;
        for _ in 0..self.params.newton_iters {
            if cost(&b) > cap {
                return None;
            }
            let e = end(&b)?;
            let f: Vec<f64> = e.iter().zip(y).map(|(a, c)| a - c).collect();
            let r = self.scaled_residual(&f);
            if r <= self.params.newton_tol {
                return Some(cost(&b));
            }
            if r > 0.5 * prev {
                stalls += 1;
                if stalls > 3 {
                    return None;
                }
            } else {
                stalls = 0;
            }
            prev = prev.min(r);
            let h = 1e-6 * linalg::norm(&b).max(1e-2);
            let mut jm = Mat::zeros(n, 2 * q);
            let mut bp = b.clone();
            for k in 0..2 * q {
                bp[k] = b[k] + h;
                let ep = end(&bp)?;
                bp[k] = b[k];
                for i in 0..n {
                    jm[(i, k)] = (ep[i] - e[i]) / h;
                }
            }
            let p = linalg::pinv(&jm, 1e-10);
            let jb = linalg::mat_vec(&jm, &b);
            let rhs: Vec<f64> = jb.iter().zip(&f).map(|(a, c)| a - c).collect();
            b = linalg::mat_vec(&p, &rhs);
        }
        None
    }

    /// Membership in the open unit ball under the estimator.
    pub fn contains(&self, y: &[f64]) -> bool {
        self.reach(y, Some(1.0)).cost < 1.0
    }

    fn sample_in_box(&self, rng: &mut impl Rng) -> Vec<f64> {
        let b = self.bounding_box();
        (0..b.dim()).map(|i| b.lo[i] + rng.gen::<f64>() * (b.hi[i] - b.lo[i])).collect()
    }

    /// Hit count over `samples` uniform box points.
    pub fn count_hits(&self, samples: usize, seed: u64) -> usize {
        let blocks = samples.div_ceil(MC_BLOCK);
        (0..blocks)
            .into_par_iter()
            .map(|blk| {
                let mut rng = sampling::stream_rng(seed, blk as u64);
                let len = MC_BLOCK.min(samples - blk * MC_BLOCK);
                (0..len)
                    .filter(|_| {
                        let y = self.sample_in_box(&mut rng);
                        self.contains(&y)
                    })
                    .count()
            })
            .sum()
    }

    /// `(sum w, sum w^2, hits)` over the hits among `samples` box points, with
    /// the same sample stream as [`BallIndex::count_hits`].
    pub fn weighted_hits(&self, samples: usize, seed: u64, w: &(dyn Fn(&[f64]) -> Result<f64> + Sync)) -> Result<(f64, f64, usize)> {
        let blocks = samples.div_ceil(MC_BLOCK);
        let parts: Vec<(f64, f64, usize)> = (0..blocks)
            .into_par_iter()
            .map(|blk| {
                let mut rng = sampling::stream_rng(seed, blk as u64);
                let len = MC_BLOCK.min(samples - blk * MC_BLOCK);
                let mut acc = (0.0, 0.0, 0);
                for _ in 0..len {
                    let y = self.sample_in_box(&mut rng);
                    if self.contains(&y) {
                        let v = w(&y)?;
                        acc.0 += v;
                        acc.1 += v * v;
                        acc.2 += 1;
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        // fixed summation order keeps results independent of the thread count
        Ok(parts.into_iter().fold((0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2)))
    }

    /// Up to `count` members of the ball, found by rejection sampling from the box.
    pub fn sample_members(&self, count: usize, seed: u64, max_tries: usize) -> Vec<Vec<f64>> {
        let mut rng = sampling::stream_rng(seed, u64::MAX);
        let mut out = Vec::with_capacity(count);
        for _ in 0..max_tries {
            if out.len() == count {
                break;
            }
            let y = self.sample_in_box(&mut rng);
            if self.contains(&y) {
                out.push(y);
            }
        }
        out
    }
}

/// Upper estimate of `rho(x, y)` with bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceEstimate {
    /// `inf` when no connecting path was found.
    pub rho: f64,
    /// Radius of the ball index that produced the estimate.
    pub radius: f64,
    pub graph_nodes: usize,
}

fn scaled_by(s: &VectorSystem, r: f64) -> Result<VectorSystem> {
    s.scaled(&vec![r; s.q()])
}

/// Upper estimate of the Carnot-Caratheodory distance `rho(x, y)`.
pub fn cc_distance(s: &VectorSystem, x: &[f64], y: &[f64], params: &MetricParams) -> Result<DistanceEstimate> {
    check_dim(s.dim(), x.len())?;
    check_dim(s.dim(), y.len())?;
    if !s.domain().contains(y) {
        return Err(Error::invalid("target point lies outside the domain"));
    }
    if x == y {
        return Ok(DistanceEstimate {
            rho: 0.0,
            radius: 0.0,
            graph_nodes: 0,
        });
    }
    // the direct leg from x gives a radius whose ball certainly reaches y
    let probe = {
        let sup = s.columns(x)?.iter().map(|c| linalg::norm(c)).fold(0.0, f64::max);
        let guess = if sup > 0.0 { linalg::dist(x, y) / sup } else { 1.0 };
        let unit = scaled_by(s, guess)?;
        let one_node = MetricParams {
            max_nodes: 1,
            ..params.clone()
        };
        let idx = BallIndex::build(&unit, x, &one_node)?;
        let r = idx.reach(y, None);
        if r.cost.is_finite() && r.cost > 0.0 {
            Some(guess * r.cost)
        } else {
            None
        }
    };
    let mut radius = probe.unwrap_or_else(|| {
        let sup = s
            .columns(x)
            .map(|c| c.iter().map(|v| linalg::norm(v)).fold(0.0, f64::max))
            .unwrap_or(0.0);
        if sup > 0.0 {
            linalg::dist(x, y) / sup
        } else {
            1.0
        }
    });
    let mut nodes = 0;
    for _ in 0..=params.max_doublings {
        let unit = scaled_by(s, radius)?;
        let idx = BallIndex::build(&unit, x, params)?;
        nodes = idx.graph().nodes.len();
        let r = idx.reach(y, None);
        if r.cost.is_finite() {
            return Ok(DistanceEstimate {
                rho: radius * r.cost,
                radius,
                graph_nodes: nodes,
            });
        }
        radius *= 2.0;
    }
    Ok(DistanceEstimate {
        rho: f64::INFINITY,
        radius,
        graph_nodes: nodes,
    })
}

/// Factors `delta^{d_j}`.
pub fn graded_factors(degrees: &[f64], delta: f64) -> Vec<f64> {
    degrees.iter().map(|&d| delta.powf(d)).collect()
}

/// Index of the ball `B_{(X,d)}(x, delta)`, i.e. the unit ball of `delta^d X`.
pub fn graded_index(s: &VectorSystem, degrees: &[f64], x: &[f64], delta: f64, params: &MetricParams) -> Result<BallIndex> {
    check_dim(s.q(), degrees.len())?;
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("ball radius must be positive, got {delta}")));
    }
    let scaled = s.scaled(&graded_factors(degrees, delta))?;
    BallIndex::build(&scaled, x, params)
}

/// Whether `y` lies in `B_X(x, delta)` under the estimator.
pub fn ball_membership(s: &VectorSystem, x: &[f64], delta: f64, y: &[f64], params: &MetricParams) -> Result<bool> {
    let idx = graded_index(s, &vec![1.0; s.q()], x, delta, params)?;
    check_dim(s.dim(), y.len())?;
    Ok(idx.contains(y))
}

/// Monte-Carlo estimate of the Lebesgue measure of a ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallEstimate {
    pub center: Vec<f64>,
    pub delta: f64,
    pub volume: f64,
    pub stderr: f64,
    pub samples: usize,
    pub hits: usize,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub seed: u64,
}

impl BallEstimate {
    fn from_index(idx: &BallIndex, delta: f64, samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::invalid("at least one sample is required"));
        }
        let hits = idx.count_hits(samples, seed);
        let bvol = idx.box_volume();
        let p = hits as f64 / samples as f64;
        let b = idx.bounding_box();
        Ok(BallEstimate {
            center: idx.center().to_vec(),
            delta,
            volume: p * bvol,
            stderr: (p * (1.0 - p) / samples as f64).sqrt() * bvol,
            samples,
            hits,
            box_lo: b.lo,
            box_hi: b.hi,
            seed,
        })
    }
}

/// `Leb(B_X(x, delta))` by Monte-Carlo over the bounding box.
pub fn ball_volume(s: &VectorSystem, x: &[f64], delta: f64, samples: usize, seed: u64, params: &MetricParams) -> Result<BallEstimate> {
    ball_volume_graded(s, &vec![1.0; s.q()], x, delta, samples, seed, params)
}

/// `Leb(B_{(X,d)}(x, delta))` for a graded family.
pub fn ball_volume_graded(
    s: &VectorSystem,
    degrees: &[f64],
    x: &[f64],
    delta: f64,
    samples: usize,
    seed: u64,
    params: &MetricParams,
) -> Result<BallEstimate> {
    let idx = graded_index(s, degrees, x, delta, params)?;
    BallEstimate::from_index(&idx, delta, samples, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoublingReport {
    pub delta: f64,
    pub ratio: f64,
    pub small: BallEstimate,
    pub large: BallEstimate,
}

/// `Vol(B(x, 2 delta)) / Vol(B(x, delta))` for a graded family.
pub fn doubling_ratio(
    s: &VectorSystem,
    degrees: &[f64],
    x: &[f64],
    delta: f64,
    samples: usize,
    seed: u64,
    params: &MetricParams,
) -> Result<DoublingReport> {
    let small = ball_volume_graded(s, degrees, x, delta, samples, seed, params)?;
    let large = ball_volume_graded(s, degrees, x, 2.0 * delta, samples, seed, params)?;
    if small.volume <= 0.0 {
        return Err(Error::Degenerate(format!("ball of radius {delta} has zero estimated volume")));
    }
    Ok(DoublingReport {
        delta,
        ratio: large.volume / small.volume,
        small,
        large,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainmentViolation {
    pub kind: String,
    pub point: Vec<f64>,
    pub delta_small: f64,
    pub delta_large: f64,
    pub other_center: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub containment_checked: usize,
    pub engulfing_checked: usize,
    pub engulfing_constant: f64,
    pub violations: Vec<ContainmentViolation>,
}

impl ContainmentReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Sampled checks of `B(x, d1) subset B(x, d2)` for `d1 <= d2` and of engulfing:
/// for `y in B(x, d)` (so the two balls meet), `B(y, d) subset B(x, C d)`.
#[allow(clippy::too_many_arguments)]
pub fn containment_check(
    s: &VectorSystem,
    degrees: &[f64],
    x: &[f64],
    deltas: &[f64],
    pairs: usize,
    engulf_constant: f64,
    seed: u64,
    params: &MetricParams,
) -> Result<ContainmentReport> {
    if deltas.is_empty() {
        return Err(Error::invalid("containment check needs at least one radius"));
    }
    let mut grid = deltas.to_vec();
    grid.sort_by(f64::total_cmp);
    let indices: Vec<BallIndex> = grid
        .iter()
        .map(|&d| graded_index(s, degrees, x, d, params))
        .collect::<Result<_>>()?;
    let mut report = ContainmentReport {
        containment_checked: 0,
        engulfing_checked: 0,
        engulfing_constant: engulf_constant,
        violations: Vec::new(),
    };
    let pair_list: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|a| ((a + 1)..grid.len()).map(move |b| (a, b)))
        .collect();
    if !pair_list.is_empty() {
        let per = pairs.div_ceil(pair_list.len()).max(1);
        for (k, &(a, b)) in pair_list.iter().enumerate() {
            let pts = indices[a].sample_members(per, seed.wrapping_add(k as u64), per * 200);
            for p in pts {
                report.containment_checked += 1;
                if !indices[b].contains(&p) {
                    report.violations.push(ContainmentViolation {
                        kind: "containment".into(),
                        point: p,
                        delta_small: grid[a],
                        delta_large: grid[b],
                        other_center: None,
                    });
                }
            }
        }
    }
    let per_delta = (pairs / (2 * grid.len())).max(1);
    for (k, &d) in grid.iter().enumerate() {
        let centers = indices[k].sample_members(2, seed ^ 0x9e37_79b9 ^ k as u64, 2000);
        let big = graded_index(s, degrees, x, engulf_constant * d, params)?;
        for (c, y) in centers.iter().enumerate() {
            let around = graded_index(s, degrees, y, d, params)?;
            let pts = around.sample_members(per_delta.div_ceil(2), seed.wrapping_add(1000 + c as u64), per_delta * 200);
            for p in pts {
                report.engulfing_checked += 1;
                if !big.contains(&p) {
                    report.violations.push(ContainmentViolation {
                        kind: "engulfing".into(),
                        point: p,
                        delta_small: d,
                        delta_large: engulf_constant * d,
                        other_center: Some(y.clone()),
                    });
                }
            }
        }
    }
    Ok(report)
}
