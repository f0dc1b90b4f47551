//! Acceptance criteria, one pass/fail line each.
//!
//! Every check runs inside its own closure, so a failure in one criterion
//! still lets the others report. The process exits nonzero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cccharts::ccmetric::{doubling_ratio, MetricParams};
use cccharts::chart::{build_chart, ChartConfig};
use cccharts::density::{ball_measure_compare, Density};
use cccharts::fields::{DomainBox, IndexTuple, VectorSystem};
use cccharts::flows::{check_condition_c, probe_delta0, Delta0Options, FlowOptions};
use cccharts::funcspaces::{inclusion_check, zygmund_norm, Region, SampleFamily};
use cccharts::linalg::{self, Mat};
use cccharts::odecore::{contraction_diagnostic, picard_solve, MatrixFn};
use cccharts::sampling::{ball_points, stream_rng};
use cccharts::scaling::volume_vs_lambda;
use cccharts::Expr;
use cccharts_cli::builtins;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, what: String) -> Result<String, String> {
    if cond {
        Ok(what)
    } else {
        Err(what)
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let r = f();
    let el = t.elapsed();
    match r {
        Ok(m) if el <= limit => Ok(format!("{m}; {:.2}s", el.as_secs_f64())),
        Ok(m) => Err(format!("{m}; took {:.2}s > {:.0}s", el.as_secs_f64(), limit.as_secs_f64())),
        Err(m) => Err(m),
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn euclidean_degeneracy() -> Outcome {
    timed(Duration::from_secs(1), || {
        let mut worst = [0.0f64; 3];
        for n in [2, 3] {
            let s = VectorSystem::euclidean(n);
            let x0: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 + 0.1).collect();
            let (c, _) = build_chart(&s, &x0, &ChartConfig::default()).map_err(err)?;
            worst[0] = worst[0].max(c.a.values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            for t in ball_points(20, n, c.radii.eta1) {
                let shift: Vec<f64> = x0.iter().zip(&t).map(|(a, b)| a + b).collect();
                worst[1] = worst[1].max(linalg::dist(&c.phi(&t).map_err(err)?, &shift));
                for j in 0..n {
                    let mut e = vec![0.0; n];
                    e[j] = 1.0;
                    worst[2] = worst[2].max(linalg::dist(&c.y(j, &t).map_err(err)?, &e));
                }
            }
        }
        check(
            worst[0] <= 1e-10 && worst[1] <= 1e-8 && worst[2] <= 1e-8,
            format!("|A|={:e} |Phi-x0-t|={:e} |Y-e|={:e}", worst[0], worst[1], worst[2]),
        )
    })
}

fn explicit_ode_bounds() -> Outcome {
    timed(Duration::from_secs(5), || {
        let c = MatrixFn::new(1, |x: &[f64]| Ok(vec![x[0]]));
        let (a, rep) = picard_solve(&c, 0.1, 64, 1e-12).map_err(err)?;
        let v = a.eval(&[0.1]).map_err(err)?[0];
        let k = contraction_diagnostic(&c, 0.1, 32, 50, 1).map_err(err)?.max_ratio;
        check(
            rep.linear_bound_ratio <= 1.0 + 1e-9
                && rep.sup <= 1.0 / 16.0
                && (v + 0.04917).abs() <= 2e-4
                && k <= 0.25,
            format!(
                "|A|/(5/8|x|)={:.6} sup={:.6} A(0.1)={v:.6} contraction={k:.4}",
                rep.linear_bound_ratio, rep.sup
            ),
        )
    })
}

fn chart_consistency() -> Outcome {
    timed(Duration::from_secs(10), || {
        let cfg = ChartConfig {
            verify_samples: 100,
            ..Default::default()
        };
        let (_, d) = build_chart(&builtins::heisenberg(), &[0.0; 3], &cfg).map_err(err)?;
        let get = |k: &str| d.residuals.iter().find(|r| r.item == k).map_or(f64::INFINITY, |r| r.value);
        let (p, det) = (get("pullback"), get("determinant"));
        check(p <= 1e-5 && det <= 1e-4, format!("pullback={p:e} determinant={det:e}"))
    })
}

fn volume_law() -> Outcome {
    timed(Duration::from_secs(90), || {
        let deltas = [0.2, 0.4, 0.6, 0.8, 1.0];
        let p = MetricParams::default();
        let h = volume_vs_lambda(&builtins::heisenberg_graded(), &[0.0; 3], &deltas, 200_000, 5, &p).map_err(err)?;
        let g = volume_vs_lambda(&builtins::grushin_graded(), &[0.0; 2], &deltas, 200_000, 5, &p).map_err(err)?;
        let (hs, gs) = (h.slope.unwrap_or(f64::NAN), g.slope.unwrap_or(f64::NAN));
        check(
            (hs - 4.0).abs() <= 0.25 && (gs - 3.0).abs() <= 0.25 && h.band <= 10.0 && g.band <= 10.0,
            format!("Heisenberg slope={hs:.4} band={:.3}; Grushin slope={gs:.4} band={:.3}", h.band, g.band),
        )
    })
}

fn doubling() -> Outcome {
    let p = MetricParams::default();
    let h = builtins::heisenberg_graded();
    let mut ratios = Vec::new();
    for d in [0.1, 0.2, 0.4] {
        ratios.push(doubling_ratio(h.system(), &h.degrees(), &[0.0; 3], d, 50_000, 9, &p).map_err(err)?.ratio);
    }
    let e = doubling_ratio(&VectorSystem::euclidean(2), &[1.0, 1.0], &[0.0; 2], 0.3, 50_000, 9, &p)
        .map_err(err)?
        .ratio;
    check(
        ratios.iter().all(|r| (8.0..=32.0).contains(r)) && (e - 4.0).abs() <= 0.4,
        format!("Heisenberg {ratios:?}; Euclidean {e:.4}"),
    )
}

fn sharpness() -> Outcome {
    let q = builtins::quadratic();
    let f = FlowOptions::default();
    let at_09 = check_condition_c(&q, &[1.0], 0.9, &f, 2).map_err(err)?.holds;
    let at_11 = check_condition_c(&q, &[1.0], 1.1, &f, 2).map_err(err)?.holds;
    let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    let opts = Delta0Options {
        theta_samples: 8,
        point_samples: 6,
        ..Default::default()
    };
    let k = DomainBox::new(vec![0.5, 0.5], vec![1.0, 1.0]).map_err(err)?;
    let d0 = probe_delta0(&builtins::rotation(10.0), &k, &grid, &opts).map_err(err)?.delta0;
    check(
        at_09 && !at_11 && (0.31..=0.66).contains(&d0),
        format!("holds(0.9)={at_09} holds(1.1)={at_11} delta0={d0}"),
    )
}

fn function_space_constants() -> Outcome {
    let fam = SampleFamily::lattice(&Region::interval(-1.0, 1.0), 200).map_err(err)?;
    let mut items = 0;
    for f in ["x1", "x1^2", "abs(x1)"] {
        let e = Expr::parse(f, 1).map_err(err)?;
        for (s1, s2) in [(0.25, 0.75), (0.5, 1.0), (0.1, 0.2)] {
            let r = inclusion_check(&e, 0, s1, s2, &fam).map_err(err)?;
            if !r.holds() {
                return Err(format!("{f} s1={s1} s2={s2}: {:?}", r.items));
            }
            items += r.items.len();
        }
    }
    let abs = zygmund_norm(&Expr::parse("abs(x1)", 1).map_err(err)?, 1.0, &fam).map_err(err)?.parts["second_difference"];
    let aff = zygmund_norm(&Expr::parse("-2*x1 + 0.7", 1).map_err(err)?, 1.0, &fam).map_err(err)?.parts["second_difference"];
    check(
        (abs - 2.0).abs() <= 0.05 && aff <= 1e-12,
        format!("{items} inequalities hold; |x| second difference={abs:.6} affine={aff:e}"),
    )
}

fn density_corollary() -> Outcome {
    let e = VectorSystem::euclidean(2);
    let j = IndexTuple(vec![0, 1]);
    let p = MetricParams::default();
    let leb = Density::lebesgue(2);
    let r1 = ball_measure_compare(&e, &j, &[0.0; 2], &leb, 1.0, 100_000, 4, &p).map_err(err)?;
    let r10 = ball_measure_compare(&e, &j, &[0.0; 2], &leb.scaled(10.0), 1.0, 100_000, 4, &p).map_err(err)?;
    let pi = std::f64::consts::PI;
    let se = (r1.basis_ball.stderr.powi(2) + r1.full_ball.stderr.powi(2)).sqrt();
    let z = [(r1.basis_ball.value - pi).abs() / se, (r1.full_ball.value - pi).abs() / se];
    let pairs = [
        (r1.basis_ball.value, r10.basis_ball.value),
        (r1.full_ball.value, r10.full_ball.value),
        (r1.basis_comparator, r10.basis_comparator),
        (r1.max_comparator, r10.max_comparator),
    ];
    let lin = pairs.iter().fold(0.0f64, |m, (a, b)| m.max((b / a - 10.0).abs() / 10.0));
    let rat = r1.ratios.iter().zip(&r10.ratios).fold(0.0f64, |m, (a, b)| m.max((a.1 - b.1).abs() / a.1));
    check(
        z[0] <= 3.0 && z[1] <= 3.0 && lin <= 1e-10 && rat <= 1e-10,
        format!("z={:.3}/{:.3} linearity={lin:e} ratio drift={rat:e}", z[0], z[1]),
    )
}

fn affine_equivariance() -> Outcome {
    let mut rng = stream_rng(21, 0);
    let s = builtins::heisenberg();
    let m = Mat::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3));
    let cond = {
        let sv = m.singular_values();
        sv.max() / sv.min()
    };
    let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let psi = |x: &[f64]| -> Vec<f64> { linalg::mat_vec(&m, x).iter().zip(&b).map(|(a, c)| a + c).collect() };
    let x0 = [0.2, 0.1, -0.3];
    let (c1, _) = build_chart(&s, &x0, &ChartConfig::default()).map_err(err)?;
    let cfg2 = ChartConfig {
        j0: Some(c1.j0.clone()),
        ..Default::default()
    };
    let (c2, _) = build_chart(&s.push_affine(&m, &b).map_err(err)?, &psi(&x0), &cfg2).map_err(err)?;
    let r = c1.radii.eta1.min(c2.radii.eta1);
    let mut worst = 0.0f64;
    for t in ball_points(50, 3, r) {
        worst = worst.max(linalg::dist(&c2.phi(&t).map_err(err)?, &psi(&c1.phi(&t).map_err(err)?)));
    }
    check(worst <= 1e-6, format!("sup |Phi'-Psi o Phi|={worst:e} (cond {cond:.2})"))
}

fn run_verify(dir: &Path, extra: &[&str]) -> Result<(String, Vec<u8>), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cccharts"))
        .args(["verify", "--seed", "7", "--out"])
        .arg(dir)
        .args(extra)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("verify exited with {:?}", out.status.code()));
    }
    let xml = std::fs::read(dir.join("verify.xml")).map_err(err)?;
    Ok((String::from_utf8_lossy(&out.stdout).into_owned(), xml))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let runs: Vec<(String, Vec<u8>)> = [("a", &[][..]), ("b", &[][..]), ("t1", &["--threads", "1"][..]), ("t8", &["--threads", "8"][..])]
        .iter()
        .map(|(d, extra)| run_verify(&tmp.path().join(d), extra))
        .collect::<Result<_, _>>()?;
    let same = runs.windows(2).all(|w| w[0] == w[1]);
    check(same, format!("{} runs, {} report bytes, identical={same}", runs.len(), runs[0].1.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("euclidean degeneracy", euclidean_degeneracy),
        ("explicit ODE bounds", explicit_ode_bounds),
        ("chart consistency", chart_consistency),
        ("volume law", volume_law),
        ("doubling", doubling),
        ("sharpness examples", sharpness),
        ("function-space constants", function_space_constants),
        ("density measures", density_corollary),
        ("affine equivariance", affine_equivariance),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(m) => println!("criterion {:2} PASS {name}: {m}", i + 1),
            Err(m) => {
                println!("criterion {:2} FAIL {name}: {m}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
