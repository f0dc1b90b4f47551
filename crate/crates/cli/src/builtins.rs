//! Built-in example systems used by `verify`.

use cccharts::fields::{DomainBox, VectorField, VectorSystem};
use cccharts::scaling::GradedSystem;

fn system(fields: &[(&str, &[&str])], domain: DomainBox) -> VectorSystem {
    let fields = fields
        .iter()
        .map(|(name, c)| VectorField::parse(*name, c).expect("built-in field parses"))
        .collect();
    VectorSystem::new(fields, domain).expect("built-in system is valid")
}

/// `X = d1 - x2/2 d3`, `Y = d2 + x1/2 d3`, `T = d3`.
pub fn heisenberg() -> VectorSystem {
    system(
        &[("X", &["1", "0", "-x2/2"]), ("Y", &["0", "1", "x1/2"]), ("T", &["0", "0", "1"])],
        DomainBox::unbounded(3),
    )
}

pub fn heisenberg_graded() -> GradedSystem {
    GradedSystem::new(heisenberg(), vec![1.0, 1.0, 2.0]).expect("valid degrees")
}

/// `d1`, `x1 d2`, `d2` with degrees `1, 1, 2`.
pub fn grushin_graded() -> GradedSystem {
    let s = system(&[("A", &["1", "0"]), ("B", &["0", "x1"]), ("C", &["0", "1"])], DomainBox::unbounded(2));
    GradedSystem::new(s, vec![1.0, 1.0, 2.0]).expect("valid degrees")
}

/// `k (-x2 d1 + x1 d2)` on `[-3, 3]^2`.
pub fn rotation(k: f64) -> VectorSystem {
    let (a, b) = (format!("-{k}*x2"), format!("{k}*x1"));
    system(&[("R", &[&a, &b])], DomainBox::cube(&[0.0, 0.0], 3.0))
}

/// `x^2 d/dx` on the line.
pub fn quadratic() -> VectorSystem {
    system(&[("Q", &["x1^2"])], DomainBox::unbounded(1))
}

/// The standard basis; with `fault`, the first field is bent so the chart
/// is no longer flat.
pub fn euclidean(n: usize, fault: bool) -> VectorSystem {
    if !fault {
        return VectorSystem::euclidean(n);
    }
    let mut fields: Vec<VectorField> = (0..n).map(|i| VectorField::axis(i, n)).collect();
    let mut c: Vec<String> = vec!["0".into(); n];
    c[0] = "1".into();
    // a bend along x2 that does not commute with d2
    c[n - 1] = if n == 1 { "1+0.5*x1".into() } else { "0.5*x2".into() };
    let refs: Vec<&str> = c.iter().map(|s| s.as_str()).collect();
    fields[0] = VectorField::parse("E1", &refs).expect("parses");
    VectorSystem::new(fields, DomainBox::unbounded(n)).expect("valid")
}
