//! Densities `nu = w dx` on the domain, the distinguished density `nu0`, and
//! ball measures.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccmetric::{graded_index, MetricParams};
use crate::chart::Chart;
use crate::error::{check_dim, Error, Result};
use crate::expr::Expr;
use crate::fields::{IndexTuple, VectorField, VectorSystem};
use crate::linalg;
use crate::sampling;

#[derive(Clone, Debug)]
enum Weight {
    Lebesgue(usize),
    Expr(Expr),
    /// `1 / |det X_J0(x)|`.
    Nu0(VectorSystem),
}

/// A density given by its weight against Lebesgue measure.
#[derive(Clone, Debug)]
pub struct Density {
    weight: Weight,
    scale: f64,
}

impl Density {
    pub fn lebesgue(n: usize) -> Self {
        Density {
            weight: Weight::Lebesgue(n),
            scale: 1.0,
        }
    }

    pub fn from_expr(w: Expr) -> Self {
        Density {
            weight: Weight::Expr(w),
            scale: 1.0,
        }
    }

    /// The distinguished density with `nu0(X_J0) = 1`.
    pub fn nu0(s: &VectorSystem, j0: &IndexTuple) -> Result<Self> {
        check_dim(s.dim(), j0.len())?;
        Ok(Density {
            weight: Weight::Nu0(s.subsystem(j0)),
            scale: 1.0,
        })
    }

    /// `c nu`.
    pub fn scaled(&self, c: f64) -> Self {
        Density {
            weight: self.weight.clone(),
            scale: self.scale * c,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.weight {
            Weight::Lebesgue(n) => *n,
            Weight::Expr(e) => e.dim(),
            Weight::Nu0(s) => s.dim(),
        }
    }

    pub fn is_nu0(&self) -> bool {
        matches!(self.weight, Weight::Nu0(_))
    }

    /// Short label used in reports.
    pub fn tag(&self) -> String {
        let base = match &self.weight {
            Weight::Lebesgue(_) => "lebesgue".to_string(),
            Weight::Expr(_) => "weight".to_string(),
            Weight::Nu0(_) => "nu0".to_string(),
        };
        if self.scale == 1.0 {
            base
        } else {
            format!("{}*{base}", self.scale)
        }
    }

    pub fn weight(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let w = match &self.weight {
            Weight::Lebesgue(_) => 1.0,
            Weight::Expr(e) => e.eval(x)?,
            Weight::Nu0(s) => {
                let d = linalg::det(&s.matrix(x)?).abs();
                if d == 0.0 {
                    return Err(Error::Degenerate(format!("det X_J0 vanishes at {x:?}")));
                }
                1.0 / d
            }
        };
        Ok(self.scale * w)
    }

    /// `grad w(x)`: exact for expression weights, central differences for `nu0`.
    pub fn weight_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.weight {
            Weight::Lebesgue(n) => Ok(vec![0.0; *n]),
            Weight::Expr(e) => e.gradient().iter().map(|g| Ok(self.scale * g.eval(x)?)).collect(),
            Weight::Nu0(_) => {
                let j = linalg::fd_jacobian(|p| Ok(vec![self.weight(p)?]), x, 1, 1e-6)?;
                Ok((0..x.len()).map(|i| j[(0, i)]).collect())
            }
        }
    }

    /// Sign of the weight, checked to be the same at every point.
    pub fn constant_sign(&self, points: &[Vec<f64>]) -> Result<f64> {
        let mut sign = 0.0;
        for p in points {
            let w = self.weight(p)?;
            let s = if w > 0.0 {
                1.0
            } else if w < 0.0 {
                -1.0
            } else {
                return Err(Error::Degenerate(format!("density weight vanishes at {p:?}")));
            };
            if sign != 0.0 && s != sign {
                return Err(Error::Degenerate(format!("density weight changes sign at {p:?}")));
            }
            sign = s;
        }
        Ok(sign)
    }
}

/// `|det(Z_1 | ... | Z_n)| / |det X_J0(x)|`.
pub fn nu0_eval(s: &VectorSystem, j0: &IndexTuple, x: &[f64], z: &[Vec<f64>]) -> Result<f64> {
    let n = s.dim();
    check_dim(n, z.len())?;
    let base = linalg::det(&s.subsystem(j0).matrix(x)?).abs();
    if base == 0.0 {
        return Err(Error::Degenerate(format!("det X_J0 vanishes at {x:?}")));
    }
    Ok(linalg::det(&linalg::from_columns(z, n)).abs() / base)
}

/// `f` with `L_X nu = f nu`: `div X + (X w) / w`.
pub fn lie_ratio(x: &VectorField, nu: &Density, p: &[f64]) -> Result<f64> {
    check_dim(nu.dim(), x.dim())?;
    let w = nu.weight(p)?;
    if w == 0.0 {
        return Err(Error::Degenerate(format!("density weight vanishes at {p:?}")));
    }
    let jac = x.jacobian(p)?;
    let div: f64 = (0..p.len()).map(|i| jac[(i, i)]).sum();
    let xv = x.eval(p)?;
    let g = nu.weight_gradient(p)?;
    Ok(div + xv.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / w)
}

/// `h(t) = w(Phi(t)) |det dPhi(t)|`, so that `Phi^* nu = h dt`.
pub fn pullback_h(chart: &Chart, nu: &Density, t: &[f64]) -> Result<f64> {
    let p = chart.phi(t)?;
    Ok(nu.weight(&p)? * linalg::det(&chart.dphi(t)?).abs())
}

/// Monte-Carlo `nu`-measure of a ball.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    pub hits: usize,
}

fn weighted_ball(s: &VectorSystem, x0: &[f64], radius: f64, nu: &Density, samples: usize, seed: u64, params: &MetricParams) -> Result<MeasureEstimate> {
    if samples == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    let idx = graded_index(s, &vec![1.0; s.q()], x0, radius, params)?;
    let (sw, sw2, hits) = idx.weighted_hits(samples, seed, &|y| nu.weight(y))?;
    let vol = idx.box_volume();
    let m = samples as f64;
    let mean = sw / m;
    let var = (sw2 / m - mean * mean).max(0.0);
    Ok(MeasureEstimate {
        value: vol * mean,
        stderr: vol * (var / m).sqrt(),
        samples,
        hits,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BallMeasureReport {
    pub density: String,
    pub radius: f64,
    /// `nu(B_{X_J0}(x0, xi))`.
    pub basis_ball: MeasureEstimate,
    /// `nu(B_X(x0, xi))`.
    pub full_ball: MeasureEstimate,
    /// `|nu(X_J0)(x0)|`.
    pub basis_comparator: f64,
    /// `max_J |nu(X_J)(x0)|`.
    pub max_comparator: f64,
    /// `full / basis`, `basis / basis_comparator`, `full / max_comparator`.
    pub ratios: Vec<(String, f64)>,
}

/// Both ball measures at radius `xi` with the two pointwise comparators.
pub fn ball_measure_compare(
    s: &VectorSystem,
    j0: &IndexTuple,
    x0: &[f64],
    nu: &Density,
    xi: f64,
    samples: usize,
    seed: u64,
    params: &MetricParams,
) -> Result<BallMeasureReport> {
    let sub = s.subsystem(j0);
    let basis_ball = weighted_ball(&sub, x0, xi, nu, samples, seed, params)?;
    let full_ball = weighted_ball(s, x0, xi, nu, samples, seed, params)?;
    let w0 = nu.weight(x0)?;
    let cols = s.columns(x0)?;
    let n = s.dim();
    let det_of = |j: &IndexTuple| {
        let c: Vec<Vec<f64>> = j.indices().iter().map(|&i| cols[i].clone()).collect();
        linalg::det(&linalg::from_columns(&c, n)).abs()
    };
    let basis_comparator = (w0 * det_of(j0)).abs();
    let max_comparator = IndexTuple::increasing(n, s.q())
        .iter()
        .map(|j| (w0 * det_of(j)).abs())
        .fold(0.0, f64::max);
    if !(basis_ball.value > 0.0 && full_ball.value > 0.0 && basis_comparator > 0.0) {
        return Err(Error::Degenerate("ball measure or comparator vanishes".into()));
    }
    let ratios = vec![
        ("full/basis".to_string(), full_ball.value / basis_ball.value),
        ("basis/comparator".to_string(), basis_ball.value / basis_comparator),
        ("full/max_comparator".to_string(), full_ball.value / max_comparator),
    ];
    Ok(BallMeasureReport {
        density: nu.tag(),
        radius: xi,
        basis_ball,
        full_ball,
        basis_comparator,
        max_comparator,
        ratios,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMeasureCheck {
    pub radius: f64,
    pub monte_carlo: MeasureEstimate,
    pub quadrature: f64,
    /// `|mc - quadrature| / stderr`.
    pub z: f64,
}

/// `nu(Phi(B^n(r)))` by Monte-Carlo in the image against a lattice
/// quadrature of `h` over `B^n(r)`.
pub fn image_measure_check(chart: &Chart, nu: &Density, r: f64, samples: usize, quad_resolution: usize, seed: u64) -> Result<ImageMeasureCheck> {
    let n = chart.dim();
    if !(r > 0.0 && r <= chart.radii.eta1) {
        return Err(Error::invalid(format!("radius {r} must lie in (0, eta1]")));
    }
    // bounding box of the image from boundary samples, padded
    let dirs = sampling::sphere_directions(64 * n, n);
    let mut lo = chart.x0.clone();
    let mut hi = chart.x0.clone();
    for d in &dirs {
        let p = chart.phi(&d.iter().map(|v| v * r).collect::<Vec<f64>>())?;
        for i in 0..n {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    for i in 0..n {
        let pad = 0.1 * (hi[i] - lo[i]);
        lo[i] -= pad;
        hi[i] += pad;
    }
    let vol: f64 = (0..n).map(|i| hi[i] - lo[i]).product();
    let blocks = samples.div_ceil(sampling::MC_BLOCK);
    let parts: Vec<(f64, f64, usize)> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut rng = sampling::stream_rng(seed, blk as u64);
            let len = sampling::MC_BLOCK.min(samples - blk * sampling::MC_BLOCK);
            let mut acc = (0.0, 0.0, 0);
            for _ in 0..len {
                let y: Vec<f64> = (0..n).map(|i| lo[i] + rng.gen::<f64>() * (hi[i] - lo[i])).collect();
                let inside = matches!(chart.inverse(&y, None), Ok(t) if linalg::norm(&t) <= r);
                if inside {
                    let w = nu.weight(&y)?;
                    acc.0 += w;
                    acc.1 += w * w;
                    acc.2 += 1;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (sw, sw2, hits) = parts.into_iter().fold((0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let m = samples as f64;
    let mean = sw / m;
    let var = (sw2 / m - mean * mean).max(0.0);
    let mc = MeasureEstimate {
        value: vol * mean,
        stderr: vol * (var / m).sqrt(),
        samples,
        hits,
    };
    // midpoint lattice on the cube [-r, r]^n, cells whose center is in the ball
    let k = quad_resolution.max(2);
    let h = 2.0 * r / k as f64;
    let cells: Vec<Vec<f64>> = (0..k.pow(n as u32))
        .map(|id| {
            let mut rem = id;
            (0..n)
                .map(|_| {
                    let c = rem % k;
                    rem /= k;
                    -r + (c as f64 + 0.5) * h
                })
                .collect()
        })
        .filter(|t: &Vec<f64>| linalg::norm(t) <= r)
        .collect();
    let vals: Vec<f64> = cells.par_iter().map(|t| pullback_h(chart, nu, t)).collect::<Result<_>>()?;
    // rescale so the lattice ball volume matches the exact ball volume
    let exact_ball = ball_volume(n, r);
    let cell_vol = h.powi(n as i32);
    let quadrature = vals.iter().sum::<f64>() * cell_vol * exact_ball / (cells.len() as f64 * cell_vol);
    Ok(ImageMeasureCheck {
        radius: r,
        z: (mc.value - quadrature).abs() / mc.stderr.max(1e-300),
        monte_carlo: mc,
        quadrature,
    })
}

fn ball_volume(n: usize, r: f64) -> f64 {
    // V_n = pi^{n/2} / Gamma(n/2 + 1), via V_n = 2 pi / n V_{n-2}
    let mut v = if n % 2 == 0 { 1.0 } else { 2.0 };
    let mut k = if n % 2 == 0 { 2 } else { 3 };
    while k <= n {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k += 2;
    }
    v * r.powi(n as i32)
}

/// `max / min` of `nu / nu0 = w |det X_J0|` over `points`, with the common sign.
pub fn ratio_band(nu: &Density, s: &VectorSystem, j0: &IndexTuple, points: &[Vec<f64>]) -> Result<(f64, f64)> {
    let sign = nu.constant_sign(points)?;
    let sub = s.subsystem(j0);
    let vals: Vec<f64> = points
        .iter()
        .map(|p| Ok(nu.weight(p)?.abs() * linalg::det(&sub.matrix(p)?).abs()))
        .collect::<Result<_>>()?;
    let max = vals.iter().copied().fold(0.0, f64::max);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((max / min, sign))
}
