//! Graded systems `(X_j, d_j)`, the determinant function `Lambda(x, delta)`,
//! scaling charts and volume-law experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ccmetric::{ball_volume_graded, containment_check, doubling_ratio, graded_index, BallIndex, ContainmentReport, MetricParams};
use crate::chart::{build_chart, Chart, ChartConfig, ChartDiagnostics};
use crate::error::{check_dim, Error, Result};
use crate::fields::{brackets, IndexTuple, VectorField, VectorSystem};
use crate::linalg;
use crate::sampling;

/// Bookkeeping for one field of a graded system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedEntry {
    pub name: String,
    pub degree: f64,
    /// Right-nested bracket word (0-based generator indices), when expanded.
    pub word: Option<Vec<usize>>,
    pub zero: bool,
    /// Index of an earlier field equal to this one at the sample points.
    pub duplicate_of: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GradedSystem {
    system: VectorSystem,
    entries: Vec<GradedEntry>,
    max_order: Option<usize>,
}

fn probe_points(n: usize) -> Vec<Vec<f64>> {
    (1..6).map(|i| sampling::halton(i, n).iter().map(|u| 2.0 * u - 1.0).collect()).collect()
}

fn flag_entries(system: &VectorSystem, entries: &mut [GradedEntry]) -> Result<()> {
    let pts = probe_points(system.dim());
    let vals: Vec<Vec<Vec<f64>>> = system
        .fields()
        .iter()
        .map(|f| pts.iter().map(|p| f.eval(p)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    for j in 0..entries.len() {
        entries[j].zero = system.field(j).is_identically_zero() || vals[j].iter().all(|v| v.iter().all(|c| *c == 0.0));
        entries[j].duplicate_of = (0..j).find(|&i| {
            vals[i].iter().zip(&vals[j]).all(|(a, b)| linalg::dist(a, b) <= 1e-12 * (1.0 + linalg::norm(a)))
        });
    }
    Ok(())
}

impl GradedSystem {
    pub fn new(system: VectorSystem, degrees: Vec<f64>) -> Result<Self> {
        check_dim(system.q(), degrees.len())?;
        if let Some(d) = degrees.iter().find(|d| !(**d >= 1.0) || !d.is_finite()) {
            return Err(Error::invalid(format!("formal degrees must be finite and >= 1, got {d}")));
        }
        let mut entries: Vec<GradedEntry> = system
            .fields()
            .iter()
            .zip(&degrees)
            .map(|(f, &d)| GradedEntry {
                name: f.name().to_string(),
                degree: d,
                word: None,
                zero: false,
                duplicate_of: None,
            })
            .collect();
        flag_entries(&system, &mut entries)?;
        Ok(GradedSystem {
            system,
            entries,
            max_order: None,
        })
    }

    pub fn system(&self) -> &VectorSystem {
        &self.system
    }

    pub fn entries(&self) -> &[GradedEntry] {
        &self.entries
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.degree).collect()
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    /// `{ delta^{d_j} X_j }`.
    pub fn scaled(&self, delta: f64) -> Result<VectorSystem> {
        if !(delta > 0.0) {
            return Err(Error::invalid(format!("delta must be positive, got {delta}")));
        }
        self.system.scaled(&self.degrees().iter().map(|d| delta.powf(*d)).collect::<Vec<_>>())
    }

    /// Unit ball of the scaled system, i.e. `B_{(X,d)}(x, delta)`.
    pub fn ball(&self, x: &[f64], delta: f64, params: &MetricParams) -> Result<BallIndex> {
        graded_index(&self.system, &self.degrees(), x, delta, params)
    }
}

/// All right-nested brackets `[V_{j1}, [V_{j2}, ..., V_{jk}]]` with `k <= m`,
/// degree `k`. Words ending in a repeated letter are formally zero and left
/// out; other zero or repeated brackets are kept and flagged.
pub fn hormander_expand(v: &VectorSystem, m: usize) -> Result<GradedSystem> {
    if !v.is_symbolic() {
        return Err(Error::invalid("Hörmander expansion needs expression-backed fields"));
    }
    if m == 0 {
        return Err(Error::invalid("expansion order must be at least 1"));
    }
    let r = v.q();
    let mut words: Vec<Vec<usize>> = (0..r).map(|j| vec![j]).collect();
    let mut fields: Vec<VectorField> = v.fields().iter().enumerate().map(|(j, f)| f.clone().with_name(format!("V{}", j + 1))).collect();
    let mut layer: Vec<(Vec<usize>, VectorField)> = words.iter().cloned().zip(fields.iter().cloned()).collect();
    for _ in 2..=m {
        let mut next = Vec::new();
        for a in 0..r {
            for (w, f) in &layer {
                if w.len() == 1 && w[0] == a {
                    continue;
                }
                let g = fields[a].bracket_symbolic(f)?;
                let mut word = vec![a];
                word.extend(w);
                next.push((word, g));
            }
        }
        for (w, f) in &next {
            words.push(w.clone());
            fields.push(f.clone());
        }
        layer = next;
    }
    let degrees: Vec<f64> = words.iter().map(|w| w.len() as f64).collect();
    let system = VectorSystem::new(fields, v.domain().clone())?;
    let mut g = GradedSystem::new(system, degrees)?;
    for (e, w) in g.entries.iter_mut().zip(words) {
        e.word = Some(w);
    }
    g.max_order = Some(m);
    Ok(g)
}

type Combo = BTreeMap<Vec<usize>, f64>;

/// `[X_u, X_w]` as a combination of right-nested words, by the Jacobi identity
/// `[[V_a, X_u'], X_w] = [V_a, [X_u', X_w]] - [X_u', [V_a, X_w]]`.
fn bracket_words(u: &[usize], w: &[usize]) -> Combo {
    let mut out = Combo::new();
    if u.len() == 1 {
        let mut word = vec![u[0]];
        word.extend(w);
        out.insert(word, 1.0);
        return out;
    }
    let (a, rest) = (u[0], &u[1..]);
    for (word, c) in bracket_words(rest, w) {
        for (ww, cc) in bracket_words(&[a], &word) {
            *out.entry(ww).or_default() += c * cc;
        }
    }
    let mut aw = vec![a];
    aw.extend(w);
    for (word, c) in bracket_words(rest, &aw) {
        *out.entry(word).or_default() -= c;
    }
    out
}

fn formally_zero(word: &[usize]) -> bool {
    let k = word.len();
    k >= 2 && word[k - 1] == word[k - 2]
}

/// Constant structure coefficients of an expanded system for the pairs with
/// `d_j + d_k <= m`: `(j, k, [(l, c)])`.
pub fn jacobi_structure(g: &GradedSystem) -> Result<Vec<(usize, usize, Vec<(usize, f64)>)>> {
    let Some(m) = g.max_order else {
        return Err(Error::invalid("structure constants need a Hörmander-expanded system"));
    };
    let words: Vec<&Vec<usize>> = g.entries.iter().map(|e| e.word.as_ref().expect("expanded")).collect();
    let lookup: BTreeMap<&Vec<usize>, usize> = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
    let mut out = Vec::new();
    for j in 0..words.len() {
        for k in 0..words.len() {
            if words[j].len() + words[k].len() > m {
                continue;
            }
            let mut coeffs = Vec::new();
            for (word, c) in bracket_words(words[j], words[k]) {
                if c == 0.0 || formally_zero(&word) {
                    continue;
                }
                let l = lookup[&word];
                coeffs.push((l, c));
            }
            out.push((j, k, coeffs));
        }
    }
    Ok(out)
}

/// Largest `|[X_j, X_k] - sum_l c X_l|` at `points` for the constants of [`jacobi_structure`].
pub fn bracket_closure_residual(g: &GradedSystem, points: &[Vec<f64>]) -> Result<f64> {
    let c = jacobi_structure(g)?;
    let mut worst: f64 = 0.0;
    for p in points {
        let br = brackets(&g.system, p)?;
        let cols = g.system.columns(p)?;
        for (j, k, coeffs) in &c {
            let mut r = br[*j][*k].clone();
            for (l, v) in coeffs {
                for i in 0..r.len() {
                    r[i] -= v * cols[*l][i];
                }
            }
            worst = worst.max(linalg::norm(&r));
        }
    }
    Ok(worst)
}

/// `Lambda(x, delta)` and the first increasing tuple attaining it.
pub fn lambda_tuple(g: &GradedSystem, x: &[f64], delta: f64) -> Result<(f64, IndexTuple)> {
    let n = g.dim();
    let cols = g.scaled(delta)?.columns(x)?;
    let mut best = (-1.0, IndexTuple(Vec::new()));
    for j in IndexTuple::increasing(n, g.system.q()) {
        let c: Vec<Vec<f64>> = j.indices().iter().map(|&i| cols[i].clone()).collect();
        let d = linalg::det(&linalg::from_columns(&c, n)).abs();
        if d > best.0 {
            best = (d, j);
        }
    }
    Ok(best)
}

/// `max_J |det(delta^{d_J} X_J(x))|`.
pub fn lambda(g: &GradedSystem, x: &[f64], delta: f64) -> Result<f64> {
    Ok(lambda_tuple(g, x, delta)?.0)
}

/// Chart of `delta^d X` at `x` with `J0` forced to the `Lambda`-maximizing tuple.
pub fn nsw_chart(g: &GradedSystem, x: &[f64], delta: f64, cfg: &ChartConfig) -> Result<(Chart, ChartDiagnostics)> {
    let (lam, tuple) = lambda_tuple(g, x, delta)?;
    if !(lam > 0.0) {
        return Err(Error::NotSpanning { point: x.to_vec() });
    }
    let cfg = ChartConfig {
        j0: Some(tuple),
        ..cfg.clone()
    };
    build_chart(&g.scaled(delta)?, x, &cfg)
}

/// `|det dPhi_{x,delta}(t)| / Lambda(x, delta)` at `samples` points of `B^n(eta1)`.
pub fn jacobian_band(chart: &Chart, lambda: f64, samples: usize) -> Result<Vec<f64>> {
    let n = chart.dim();
    sampling::ball_points(samples, n, 0.9 * chart.radii.eta1)
        .iter()
        .map(|t| Ok(linalg::det(&chart.dphi(t)?).abs() / lambda))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeRow {
    pub delta: f64,
    pub volume: f64,
    pub stderr: f64,
    pub lambda: f64,
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeLaw {
    pub schema_version: u32,
    pub center: Vec<f64>,
    pub samples: usize,
    pub rows: Vec<VolumeRow>,
    /// Least-squares slope of `log volume` against `log delta` (two or more radii).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_slope: Option<f64>,
    /// Fit residuals in log space.
    pub residuals: Vec<f64>,
    /// `max ratio / min ratio`.
    pub band: f64,
}

impl VolumeLaw {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,volume,stderr,lambda,ratio\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.delta, r.volume, r.stderr, r.lambda, r.ratio);
        }
        s
    }
}

fn fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Seed of the `index`-th radius of an experiment.
pub fn delta_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x0000_0100_0000_01b3).wrapping_add(index as u64)
}

/// Monte-Carlo ball volumes against `Lambda` over `deltas`, with the log-log slope.
pub fn volume_vs_lambda(g: &GradedSystem, x: &[f64], deltas: &[f64], samples: usize, seed: u64, params: &MetricParams) -> Result<VolumeLaw> {
    if deltas.is_empty() {
        return Err(Error::invalid("at least one delta is required"));
    }
    if samples == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(Error::invalid(format!("delta must lie in (0, 1], got {d}")));
    }
    let degrees = g.degrees();
    let mut rows = Vec::with_capacity(deltas.len());
    for (i, &d) in deltas.iter().enumerate() {
        let s = delta_seed(seed, i);
        let est = ball_volume_graded(&g.system, &degrees, x, d, samples, s, params)?;
        if est.hits == 0 {
            return Err(Error::Degenerate(format!("no Monte-Carlo hits at delta = {d}; raise the sample count")));
        }
        let lam = lambda(g, x, d)?;
        rows.push(VolumeRow {
            delta: d,
            volume: est.volume,
            stderr: est.stderr,
            lambda: lam,
            ratio: est.volume / lam,
            seed: s,
        });
    }
    let distinct = {
        let mut v: Vec<f64> = deltas.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    let lx: Vec<f64> = rows.iter().map(|r| r.delta.ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.volume.ln()).collect();
    let (slope, lambda_slope, residuals) = if distinct >= 2 {
        let (a, b) = fit(&lx, &ly);
        let ll: Vec<f64> = rows.iter().map(|r| r.lambda.ln()).collect();
        let res = lx.iter().zip(&ly).map(|(x, y)| y - (a * x + b)).collect();
        (Some(a), Some(fit(&lx, &ll).0), res)
    } else {
        (None, None, Vec::new())
    };
    let max = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let min = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    Ok(VolumeLaw {
        schema_version: crate::chart::SCHEMA_VERSION,
        center: x.to_vec(),
        samples,
        rows,
        slope,
        lambda_slope,
        residuals,
        band: max / min,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxiomReport {
    pub containment: Vec<ContainmentReport>,
    /// Smallest tried engulfing constant with no sampled violation, per point.
    pub engulfing_constant: Vec<Option<f64>>,
    /// `Lambda(x, d1) <= Lambda(x, d2)` for every sampled `d1 <= d2`.
    pub lambda_monotone: bool,
    /// `(x index, delta, ratio)`.
    pub doubling: Vec<(usize, f64, f64)>,
}

impl AxiomReport {
    pub fn containment_holds(&self) -> bool {
        self.containment.iter().all(|c| c.violations.iter().all(|v| v.kind != "containment"))
    }
}

/// Sampled checks of the multiscale axioms at each point.
pub fn multiscale_axioms(g: &GradedSystem, xs: &[Vec<f64>], deltas: &[f64], pairs: usize, samples: usize, seed: u64, params: &MetricParams) -> Result<AxiomReport> {
    let degrees = g.degrees();
    let mut containment = Vec::new();
    let mut engulfing_constant = Vec::new();
    let mut lambda_monotone = true;
    let mut doubling = Vec::new();
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    for (i, x) in xs.iter().enumerate() {
        let mut found = None;
        let mut last = None;
        for c in [2.0, 3.0, 4.0, 6.0, 8.0] {
            let rep = containment_check(&g.system, &degrees, x, &sorted, pairs, c, delta_seed(seed, i), params)?;
            let engulf_ok = rep.violations.iter().all(|v| v.kind != "engulfing");
            last = Some(rep);
            if engulf_ok {
                found = Some(c);
                break;
            }
        }
        containment.push(last.expect("tried"));
        engulfing_constant.push(found);
        let lams: Vec<f64> = sorted.iter().map(|&d| lambda(g, x, d)).collect::<Result<_>>()?;
        lambda_monotone &= lams.windows(2).all(|w| w[0] <= w[1] * (1.0 + 1e-12));
        for (k, &d) in sorted.iter().enumerate() {
            if 2.0 * d <= 1.0 {
                let r = doubling_ratio(&g.system, &degrees, x, d, samples, delta_seed(seed ^ 0xd0, k), params)?;
                doubling.push((i, d, r.ratio));
            }
        }
    }
    Ok(AxiomReport {
        containment,
        engulfing_constant,
        lambda_monotone,
        doubling,
    })
}

/// Number of `(y, delta)` where membership in `B_{(X,d)}(x, delta)` and in
/// the unit ball of `delta^d X` disagree.
pub fn definitional_identity(g: &GradedSystem, x: &[f64], samples: &[(Vec<f64>, f64)], params: &MetricParams) -> Result<usize> {
    let mut mismatches = 0;
    let mut cache: BTreeMap<u64, (BallIndex, BallIndex)> = BTreeMap::new();
    for (y, d) in samples {
        let key = d.to_bits();
        if !cache.contains_key(&key) {
            let a = g.ball(x, *d, params)?;
            let b = graded_index(&g.scaled(*d)?, &vec![1.0; g.system.q()], x, 1.0, params)?;
            cache.insert(key, (a, b));
        }
        let (a, b) = &cache[&key];
        if a.contains(y) != b.contains(y) {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}
