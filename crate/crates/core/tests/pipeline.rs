use cccharts::ccmetric::MetricParams;
use cccharts::chart::{build_chart, ChartConfig};
use cccharts::density::{image_measure_check, pullback_h, Density};
use cccharts::fields::{DomainBox, VectorField, VectorSystem};
use cccharts::odecore::GridFunction;
use cccharts::sampling::ball_points;
use cccharts::scaling::{hormander_expand, jacobian_band, lambda, nsw_chart, volume_vs_lambda};
use cccharts::{linalg, Expr};

fn exp_system() -> VectorSystem {
    let x1 = VectorField::parse("X1", &["1", "0"]).unwrap();
    let x2 = VectorField::parse("X2", &["0", "exp(x1)"]).unwrap();
    VectorSystem::new(vec![x1, x2], DomainBox::unbounded(2)).unwrap()
}

fn heisenberg() -> VectorSystem {
    let f = |n: &str, c: &[&str]| VectorField::parse(n, c).unwrap();
    VectorSystem::new(
        vec![f("X", &["1", "0", "-x2/2"]), f("Y", &["0", "1", "x1/2"]), f("T", &["0", "0", "1"])],
        DomainBox::unbounded(3),
    )
    .unwrap()
}

#[test]
fn nonlinear_chart_inverts_and_pulls_back() {
    let s = exp_system();
    let (c, d) = build_chart(&s, &[0.2, -0.1], &ChartConfig::default()).unwrap();
    assert!(d.all_pass(), "{:?}", d.residuals);
    for t in ball_points(10, 2, 0.8 * c.radii.eta1) {
        let x = c.phi(&t).unwrap();
        let back = c.inverse(&x, None).unwrap();
        assert!(linalg::dist(&back, &t) < 1e-9, "{t:?} -> {back:?}");
        for j in 0..2 {
            let lhs = linalg::mat_vec(&c.dphi(&t).unwrap(), &c.y(j, &t).unwrap());
            let rhs = s.field(j).eval(&x).unwrap();
            assert!(linalg::dist(&lhs, &rhs) < 1e-5);
        }
    }
}

#[test]
fn a_grid_survives_csv() {
    let (c, _) = build_chart(&heisenberg(), &[0.0; 3], &ChartConfig::default()).unwrap();
    let back = GridFunction::from_csv(&c.a.to_csv()).unwrap();
    assert_eq!(back.spec, c.a.spec);
    for (u, v) in back.values.iter().zip(&c.a.values) {
        assert!((u - v).abs() <= 1e-15 * (1.0 + v.abs()));
    }
}

#[test]
fn image_measure_matches_quadrature() {
    let s = exp_system();
    let (c, _) = build_chart(&s, &[0.0, 0.0], &ChartConfig::default()).unwrap();
    let nu = Density::from_expr(Expr::parse("1 + x1^2", 2).unwrap());
    let r = 0.5 * c.radii.eta1;
    let m = image_measure_check(&c, &nu, r, 40_000, 24, 2).unwrap();
    assert!(m.z < 4.0, "{m:?}");
    // h(0) is the weight times |det X_J0| at the base point
    assert!((pullback_h(&c, &nu, &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn grushin_from_two_generators() {
    let a = VectorField::parse("V1", &["1", "0"]).unwrap();
    let b = VectorField::parse("V2", &["0", "x1"]).unwrap();
    let g = hormander_expand(&VectorSystem::new(vec![a, b], DomainBox::unbounded(2)).unwrap(), 2).unwrap();
    assert_eq!(g.degrees(), vec![1.0, 1.0, 2.0, 2.0]);
    let law = volume_vs_lambda(&g, &[0.0, 0.0], &[0.25, 0.5, 1.0], 20_000, 3, &MetricParams::default()).unwrap();
    assert!((law.slope.unwrap() - 3.0).abs() < 0.3, "{law:?}");
    assert!(law.band < 10.0);
}

#[test]
fn scaled_chart_jacobian_tracks_lambda() {
    let s = heisenberg();
    let g = cccharts::scaling::GradedSystem::new(s, vec![1.0, 1.0, 2.0]).unwrap();
    for delta in [0.25, 1.0] {
        let (c, d) = nsw_chart(&g, &[0.3, 0.0, 0.1], delta, &ChartConfig::default()).unwrap();
        assert!(d.all_pass());
        let l = lambda(&g, &[0.3, 0.0, 0.1], delta).unwrap();
        let band = jacobian_band(&c, l, 20).unwrap();
        let (lo, hi) = band.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(lo > 0.25 && hi < 4.0, "delta={delta}: {lo} {hi}");
    }
}
