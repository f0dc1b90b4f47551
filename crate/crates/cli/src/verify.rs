//! Invariant suites over the built-in examples, with a JUnit-style report.

use std::fmt::Write as _;

use cccharts::ccmetric::{doubling_ratio, MetricParams};
use cccharts::chart::{build_chart, ChartConfig};
use cccharts::density::{ball_measure_compare, Density};
use cccharts::fields::{IndexTuple, VectorSystem};
use cccharts::flows::{check_condition_c, probe_delta0, Delta0Options, FlowOptions};
use cccharts::funcspaces::{inclusion_check, zygmund_norm, Region, SampleFamily};
use cccharts::linalg::{self, Mat};
use cccharts::odecore::{contraction_diagnostic, picard_solve, MatrixFn};
use cccharts::scaling::volume_vs_lambda;
use cccharts::{DomainBox, Expr, Result};

use crate::builtins;

pub const SUITES: [&str; 9] = [
    "euclid",
    "ode",
    "chart",
    "volume",
    "doubling",
    "sharpness",
    "norms",
    "density",
    "equivariance",
];

#[derive(Debug, Clone)]
pub struct Case {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Monte-Carlo samples per radius.
    pub samples: usize,
    pub inject_fault: bool,
}

fn at_most(suite: &'static str, name: impl Into<String>, value: f64, bound: f64) -> Case {
    Case {
        suite,
        name: name.into(),
        value,
        bound: format!("<= {bound:e}"),
        pass: value <= bound,
    }
}

fn within(suite: &'static str, name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Case {
    Case {
        suite,
        name: name.into(),
        value,
        bound: format!("in [{lo:e}, {hi:e}]"),
        pass: (lo..=hi).contains(&value),
    }
}

fn flag(suite: &'static str, name: impl Into<String>, ok: bool) -> Case {
    Case {
        suite,
        name: name.into(),
        value: if ok { 1.0 } else { 0.0 },
        bound: "== 1".into(),
        pass: ok,
    }
}

/// Runs one suite; errors become failed cases.
pub fn run_suite(name: &str, opts: &VerifyOptions) -> Vec<Case> {
    let suite: &'static str = SUITES.iter().find(|s| **s == name).copied().unwrap_or("unknown");
    let res = match suite {
        "euclid" => euclid(opts),
        "ode" => ode(opts),
        "chart" => chart(opts),
        "volume" => volume(opts),
        "doubling" => doubling(opts),
        "sharpness" => sharpness(opts),
        "norms" => norms(opts),
        "density" => density(opts),
        "equivariance" => equivariance(opts),
        _ => return vec![flag("unknown", format!("suite {name} exists"), false)],
    };
    res.unwrap_or_else(|e| vec![flag(suite, format!("suite ran without error: {e}"), false)])
}

fn euclid(o: &VerifyOptions) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    for n in [2, 3] {
        let s = builtins::euclidean(n, o.inject_fault);
        let x0: Vec<f64> = (0..n).map(|i| 0.25 * i as f64 - 0.1).collect();
        let (c, _) = build_chart(&s, &x0, &ChartConfig { seed: o.seed, ..Default::default() })?;
        let a = c.a.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        out.push(at_most("euclid", format!("n={n} max |A| on the grid"), a, 1e-10));
        let mut phi: f64 = 0.0;
        let mut y: f64 = 0.0;
        for t in cccharts::sampling::ball_points(20, n, c.radii.eta1) {
            let p = c.phi(&t)?;
            let shift: Vec<f64> = x0.iter().zip(&t).map(|(a, b)| a + b).collect();
            phi = phi.max(linalg::dist(&p, &shift));
            for j in 0..n {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                y = y.max(linalg::dist(&c.y(j, &t)?, &e));
            }
        }
        out.push(at_most("euclid", format!("n={n} max |Phi(t) - x0 - t|"), phi, 1e-8));
        out.push(at_most("euclid", format!("n={n} max |Y_j - e_j|"), y, 1e-8));
    }
    Ok(out)
}

fn ode(o: &VerifyOptions) -> Result<Vec<Case>> {
    let c = MatrixFn::new(1, |x: &[f64]| Ok(vec![x[0]]));
    let (a, rep) = picard_solve(&c, 0.1, 64, 1e-12)?;
    let v = a.eval(&[0.1])?[0];
    Ok(vec![
        at_most("ode", "max |A(x)| / (5/8 |x|)", rep.linear_bound_ratio, 1.0 + 1e-6),
        at_most("ode", "max |A(x)|", rep.sup, 1.0 / 16.0),
        within("ode", "A(0.1)", v, -0.04917 - 2e-4, -0.04917 + 2e-4),
        at_most("ode", "contraction ratio over 50 pairs", contraction_diagnostic(&c, 0.1, 32, 50, o.seed)?.max_ratio, 0.25),
    ])
}

fn chart(o: &VerifyOptions) -> Result<Vec<Case>> {
    let s = builtins::heisenberg();
    let cfg = ChartConfig {
        verify_samples: 100,
        seed: o.seed,
        ..Default::default()
    };
    let (_, diag) = build_chart(&s, &[0.0; 3], &cfg)?;
    let get = |item: &str| diag.residuals.iter().find(|r| r.item == item).map_or(f64::INFINITY, |r| r.value);
    Ok(vec![
        at_most("chart", "Heisenberg dPhi Y_j - X_j o Phi", get("pullback"), 1e-5),
        at_most("chart", "Heisenberg determinant identity (relative)", get("determinant"), 1e-4),
        flag("chart", "Heisenberg all chart residuals", diag.all_pass()),
    ])
}

fn volume(o: &VerifyOptions) -> Result<Vec<Case>> {
    let deltas = [0.2, 0.4, 0.6, 0.8, 1.0];
    let p = MetricParams::default();
    let h = volume_vs_lambda(&builtins::heisenberg_graded(), &[0.0; 3], &deltas, o.samples, o.seed, &p)?;
    let g = volume_vs_lambda(&builtins::grushin_graded(), &[0.0; 2], &deltas, o.samples, o.seed, &p)?;
    Ok(vec![
        within("volume", "Heisenberg log-log slope", h.slope.unwrap_or(f64::NAN), 3.75, 4.25),
        at_most("volume", "Heisenberg Vol/Lambda band", h.band, 10.0),
        within("volume", "Grushin log-log slope", g.slope.unwrap_or(f64::NAN), 2.75, 3.25),
        at_most("volume", "Grushin Vol/Lambda band", g.band, 10.0),
    ])
}

fn doubling(o: &VerifyOptions) -> Result<Vec<Case>> {
    let p = MetricParams::default();
    let h = builtins::heisenberg_graded();
    let mut out = Vec::new();
    for (k, d) in [0.1, 0.2, 0.4].into_iter().enumerate() {
        let r = doubling_ratio(h.system(), &h.degrees(), &[0.0; 3], d, o.samples, o.seed.wrapping_add(k as u64), &p)?;
        out.push(within("doubling", format!("Heisenberg ratio at delta={d}"), r.ratio, 8.0, 32.0));
    }
    let e = VectorSystem::euclidean(2);
    let r = doubling_ratio(&e, &[1.0, 1.0], &[0.0; 2], 0.25, o.samples, o.seed, &p)?;
    out.push(within("doubling", "Euclidean n=2 ratio", r.ratio, 3.6, 4.4));
    Ok(out)
}

fn sharpness(_o: &VerifyOptions) -> Result<Vec<Case>> {
    let q = builtins::quadratic();
    let f = FlowOptions::default();
    let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    let opts = Delta0Options {
        theta_samples: 8,
        point_samples: 6,
        ..Default::default()
    };
    let k = DomainBox::new(vec![0.5, 0.5], vec![1.0, 1.0])?;
    let d0 = probe_delta0(&builtins::rotation(10.0), &k, &grid, &opts)?.delta0;
    Ok(vec![
        flag("sharpness", "condition C holds for x^2 d/dx at eta=0.9", check_condition_c(&q, &[1.0], 0.9, &f, 2)?.holds),
        flag("sharpness", "condition C fails for x^2 d/dx at eta=1.1", !check_condition_c(&q, &[1.0], 1.1, &f, 2)?.holds),
        within("sharpness", "rotation K=10 delta0", d0, 0.31, 0.66),
    ])
}

fn norms(_o: &VerifyOptions) -> Result<Vec<Case>> {
    let fam = SampleFamily::lattice(&Region::interval(-1.0, 1.0), 200)?;
    let mut out = Vec::new();
    for f in ["x1", "x1^2", "abs(x1)"] {
        let e = Expr::parse(f, 1)?;
        for (s1, s2) in [(0.25, 0.75), (0.5, 1.0)] {
            for item in inclusion_check(&e, 0, s1, s2, &fam)?.items {
                out.push(flag("norms", format!("{f} s1={s1} s2={s2}: {}", item.name), item.holds));
            }
        }
    }
    let abs = zygmund_norm(&Expr::parse("abs(x1)", 1)?, 1.0, &fam)?;
    out.push(within("norms", "|x| second difference", abs.parts["second_difference"], 1.95, 2.05));
    let aff = zygmund_norm(&Expr::parse("3*x1 - 0.5", 1)?, 1.0, &fam)?;
    out.push(at_most("norms", "affine second difference", aff.parts["second_difference"], 1e-12));
    Ok(out)
}

fn density(o: &VerifyOptions) -> Result<Vec<Case>> {
    let e = VectorSystem::euclidean(2);
    let j = IndexTuple(vec![0, 1]);
    let p = MetricParams::default();
    let leb = Density::lebesgue(2);
    let r1 = ball_measure_compare(&e, &j, &[0.0; 2], &leb, 1.0, o.samples, o.seed, &p)?;
    let r10 = ball_measure_compare(&e, &j, &[0.0; 2], &leb.scaled(10.0), 1.0, o.samples, o.seed, &p)?;
    let pi = std::f64::consts::PI;
    let comb = (r1.basis_ball.stderr.powi(2) + r1.full_ball.stderr.powi(2)).sqrt();
    let lin = [
        r10.basis_ball.value / r1.basis_ball.value,
        r10.full_ball.value / r1.full_ball.value,
        r10.basis_comparator / r1.basis_comparator,
        r10.max_comparator / r1.max_comparator,
    ]
    .iter()
    .fold(0.0f64, |m, v| m.max((v - 10.0).abs() / 10.0));
    let ratios = r1.ratios.iter().zip(&r10.ratios).fold(0.0f64, |m, (a, b)| m.max((a.1 - b.1).abs() / a.1.abs()));
    Ok(vec![
        at_most("density", "|nu(B_J0) - pi| in combined stderr", (r1.basis_ball.value - pi).abs() / comb, 3.0),
        at_most("density", "|nu(B_X) - pi| in combined stderr", (r1.full_ball.value - pi).abs() / comb, 3.0),
        at_most("density", "linearity under nu -> 10 nu (relative)", lin, 1e-10),
        at_most("density", "ratio change under nu -> 10 nu (relative)", ratios, 1e-10),
    ])
}

fn equivariance(o: &VerifyOptions) -> Result<Vec<Case>> {
    use rand::Rng;
    let mut rng = cccharts::sampling::stream_rng(o.seed, 99);
    let s = builtins::heisenberg();
    // random well-conditioned map: identity plus a small perturbation
    let m = Mat::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3));
    let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pushed = s.push_affine(&m, &b)?;
    let x0 = [0.1, -0.2, 0.05];
    let y0: Vec<f64> = linalg::mat_vec(&m, &x0).iter().zip(&b).map(|(a, c)| a + c).collect();
    let cfg = ChartConfig { seed: o.seed, ..Default::default() };
    let (c1, _) = build_chart(&s, &x0, &cfg)?;
    let cfg2 = ChartConfig {
        j0: Some(c1.j0.clone()),
        ..cfg
    };
    let (c2, _) = build_chart(&pushed, &y0, &cfg2)?;
    let r = c1.radii.eta1.min(c2.radii.eta1);
    let mut worst: f64 = 0.0;
    for t in cccharts::sampling::ball_points(50, 3, r) {
        let psi: Vec<f64> = linalg::mat_vec(&m, &c1.phi(&t)?).iter().zip(&b).map(|(a, c)| a + c).collect();
        worst = worst.max(linalg::dist(&c2.phi(&t)?, &psi));
    }
    Ok(vec![at_most("equivariance", "sup |Phi'(t) - Psi(Phi(t))|", worst, 1e-6)])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// JUnit-style XML without timings, so equal runs give equal bytes.
pub fn junit(cases: &[Case], seed: u64) -> String {
    let failures = cases.iter().filter(|c| !c.pass).count();
    let mut x = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        x,
        "<testsuites name=\"cccharts-verify\" tests=\"{}\" failures=\"{failures}\">",
        cases.len()
    );
    let mut suites: Vec<&str> = cases.iter().map(|c| c.suite).collect();
    suites.dedup();
    for s in suites {
        let mine: Vec<&Case> = cases.iter().filter(|c| c.suite == s).collect();
        let f = mine.iter().filter(|c| !c.pass).count();
        let _ = writeln!(x, "  <testsuite name=\"{s}\" tests=\"{}\" failures=\"{f}\">", mine.len());
        let _ = writeln!(x, "    <properties><property name=\"seed\" value=\"{seed}\"/></properties>");
        for c in mine {
            let _ = write!(x, "    <testcase classname=\"{s}\" name=\"{}\">", escape(&c.name));
            let detail = escape(&format!("value={:e} bound: {}", c.value, c.bound));
            if c.pass {
                let _ = writeln!(x, "<system-out>{detail}</system-out></testcase>");
            } else {
                let _ = writeln!(x, "<failure message=\"{detail}\"/></testcase>");
            }
        }
        let _ = writeln!(x, "  </testsuite>");
    }
    x.push_str("</testsuites>\n");
    x
}

/// One line per case.
pub fn summary(cases: &[Case]) -> String {
    let mut s = String::new();
    for c in cases {
        let _ = writeln!(
            s,
            "{} {}::{} value={:e} {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.suite,
            c.name,
            c.value,
            c.bound
        );
    }
    s
}
