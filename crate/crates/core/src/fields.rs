//! Vector fields on boxes of `R^n`, brackets, structure coefficients and
//! wedge determinants.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::expr::Expr;
use crate::linalg::{self, Mat};

/// Default central-difference step (scaled by `max(1, |x_k|)`).
pub const H_FD: f64 = 1e-5;

/// Relative determinant threshold used to decide that fields span.
pub const SPAN_TOL: f64 = 1e-10;

/// Axis-aligned domain `prod [lo_i, hi_i]`; infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::invalid("domain box needs lo < hi on every axis"));
        }
        Ok(DomainBox { lo, hi })
    }

    pub fn unbounded(n: usize) -> Self {
        DomainBox {
            lo: vec![f64::NEG_INFINITY; n],
            hi: vec![f64::INFINITY; n],
        }
    }

    /// The cube `center + [-half, half]^n`.
    pub fn cube(center: &[f64], half: f64) -> Self {
        DomainBox {
            lo: center.iter().map(|c| c - half).collect(),
            hi: center.iter().map(|c| c + half).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    pub fn intersect(&self, other: &DomainBox) -> DomainBox {
        DomainBox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.max(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.min(*b)).collect(),
        }
    }
}

type NativeFn = dyn Fn(&[f64], &mut [f64]) -> Result<()> + Send + Sync;

#[derive(Clone)]
enum Repr {
    Symbolic {
        coeffs: Vec<Expr>,
        /// `jac[i][k] = d coeff_i / d x_k`
        jac: Vec<Vec<Expr>>,
    },
    Native(Arc<NativeFn>),
}

/// A vector field `X = sum_i a_i(x) d/dx_i`, identified with `x -> (a_1, ..., a_n)`.
#[derive(Clone)]
pub struct VectorField {
    name: String,
    dim: usize,
    repr: Repr,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Symbolic { coeffs, .. } => {
                let parts: Vec<String> = coeffs.iter().map(|c| c.to_string()).collect();
                write!(f, "{}({})", self.name, parts.join(", "))
            }
            Repr::Native(_) => write!(f, "{}(<native, n={}>)", self.name, self.dim),
        }
    }
}

impl VectorField {
    /// Field with expression coefficients; the Jacobian is differentiated exactly.
    pub fn symbolic(name: impl Into<String>, coeffs: Vec<Expr>) -> Result<Self> {
        let dim = coeffs.len();
        if dim == 0 {
            return Err(Error::invalid("a vector field needs at least one coefficient"));
        }
        for c in &coeffs {
            check_dim(dim, c.dim())?;
        }
        let jac = coeffs.iter().map(Expr::gradient).collect();
        Ok(VectorField {
            name: name.into(),
            dim,
            repr: Repr::Symbolic { coeffs, jac },
        })
    }

    pub fn parse(name: impl Into<String>, coeffs: &[&str]) -> Result<Self> {
        let n = coeffs.len();
        let exprs = coeffs
            .iter()
            .map(|c| Expr::parse(c, n))
            .collect::<Result<Vec<_>>>()?;
        VectorField::symbolic(name, exprs)
    }

    /// Field given by an arbitrary function; Jacobians fall back to central differences.
    pub fn native<F>(name: impl Into<String>, dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) -> Result<()> + Send + Sync + 'static,
    {
        VectorField {
            name: name.into(),
            dim,
            repr: Repr::Native(Arc::new(f)),
        }
    }

    /// The constant field `d/dx_axis`.
    pub fn axis(axis: usize, dim: usize) -> Self {
        let coeffs = (0..dim)
            .map(|i| Expr::constant(if i == axis { 1.0 } else { 0.0 }, dim))
            .collect();
        VectorField::symbolic(format!("e{}", axis + 1), coeffs).expect("valid dimension")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coefficients(&self) -> Option<&[Expr]> {
        match &self.repr {
            Repr::Symbolic { coeffs, .. } => Some(coeffs),
            Repr::Native(_) => None,
        }
    }

    pub fn is_symbolic(&self) -> bool {
        matches!(self.repr, Repr::Symbolic { .. })
    }

    /// True when every coefficient is the constant zero expression.
    pub fn is_identically_zero(&self) -> bool {
        self.coefficients()
            .map(|c| c.iter().all(Expr::is_zero))
            .unwrap_or(false)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim, x.len())?;
        match &self.repr {
            Repr::Symbolic { coeffs, .. } => {
                for (o, c) in out.iter_mut().zip(coeffs) {
                    *o = c.eval(x)?;
                }
                Ok(())
            }
            Repr::Native(f) => {
                f(x, out)?;
                if out.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::NonFinite)
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// `n x n` Jacobian: exact for symbolic fields, central differences otherwise.
    pub fn jacobian(&self, x: &[f64]) -> Result<Mat> {
        self.jacobian_with_step(x, H_FD)
    }

    pub fn jacobian_with_step(&self, x: &[f64], h: f64) -> Result<Mat> {
        check_dim(self.dim, x.len())?;
        match &self.repr {
            Repr::Symbolic { jac, .. } => {
                let mut m = Mat::zeros(self.dim, self.dim);
                for (i, row) in jac.iter().enumerate() {
                    for (k, e) in row.iter().enumerate() {
                        m[(i, k)] = e.eval(x)?;
                    }
                }
                Ok(m)
            }
            Repr::Native(_) => linalg::fd_jacobian(|p| self.eval(p), x, self.dim, h),
        }
    }

    pub fn fd_jacobian(&self, x: &[f64], h: f64) -> Result<Mat> {
        linalg::fd_jacobian(|p| self.eval(p), x, self.dim, h)
    }

    /// `c * X`.
    pub fn scaled(&self, c: f64) -> VectorField {
        match &self.repr {
            Repr::Symbolic { coeffs, .. } => {
                let scaled = coeffs.iter().map(|e| e.scale(c)).collect();
                VectorField::symbolic(self.name.clone(), scaled).expect("same dimension")
            }
            Repr::Native(f) => {
                let f = f.clone();
                VectorField::native(self.name.clone(), self.dim, move |x, out| {
                    f(x, out)?;
                    out.iter_mut().for_each(|v| *v *= c);
                    Ok(())
                })
            }
        }
    }

    /// Symbolic Lie bracket `[self, other] = (D other) self - (D self) other`.
    pub fn bracket_symbolic(&self, other: &VectorField) -> Result<VectorField> {
        check_dim(self.dim, other.dim)?;
        let (Repr::Symbolic { coeffs: a, jac: da }, Repr::Symbolic { coeffs: b, jac: db }) =
            (&self.repr, &other.repr)
        else {
            return Err(Error::invalid("symbolic brackets need expression-backed fields"));
        };
        let n = self.dim;
        let coeffs = (0..n)
            .map(|k| {
                let mut acc = Expr::constant(0.0, n);
                for i in 0..n {
                    acc = &acc + &(&a[i] * &db[k][i]);
                    acc = &acc - &(&b[i] * &da[k][i]);
                }
                acc
            })
            .collect();
        VectorField::symbolic(format!("[{},{}]", self.name, other.name), coeffs)
    }

    /// Pushforward under the affine map `y = M x + b`:
    /// `(Psi_* X)(y) = M X(M^{-1}(y - b))`.
    pub fn push_affine(&self, m: &Mat, b: &[f64]) -> Result<VectorField> {
        let n = self.dim;
        check_dim(n, m.nrows())?;
        check_dim(n, b.len())?;
        let minv = linalg::inverse(m)?;
        match &self.repr {
            Repr::Symbolic { coeffs, .. } => {
                // x_i = sum_k minv[i][k] (y_k - b_k)
                let preimage: Vec<Expr> = (0..n)
                    .map(|i| {
                        let mut acc = Expr::constant(0.0, n);
                        for k in 0..n {
                            let shifted = &Expr::var(k, n) - &Expr::constant(b[k], n);
                            acc = &acc + &shifted.scale(minv[(i, k)]);
                        }
                        acc
                    })
                    .collect();
                let pulled = coeffs
                    .iter()
                    .map(|c| c.substitute(&preimage))
                    .collect::<Result<Vec<_>>>()?;
                let pushed = (0..n)
                    .map(|i| {
                        let mut acc = Expr::constant(0.0, n);
                        for k in 0..n {
                            acc = &acc + &pulled[k].scale(m[(i, k)]);
                        }
                        acc
                    })
                    .collect();
                VectorField::symbolic(self.name.clone(), pushed)
            }
            Repr::Native(_) => {
                let this = self.clone();
                let m = m.clone();
                let b = b.to_vec();
                Ok(VectorField::native(self.name.clone(), n, move |y, out| {
                    let shifted: Vec<f64> = y.iter().zip(&b).map(|(p, q)| p - q).collect();
                    let x = linalg::mat_vec(&minv, &shifted);
                    let v = this.eval(&x)?;
                    out.copy_from_slice(&linalg::mat_vec(&m, &v));
                    Ok(())
                }))
            }
        }
    }
}

/// Lie bracket value `[Xa, Xb](x) = (DXb) Xa - (DXa) Xb`.
pub fn commutator(xa: &VectorField, xb: &VectorField, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(xa.dim(), xb.dim())?;
    let va = xa.eval(x)?;
    let vb = xb.eval(x)?;
    let da = xa.jacobian(x)?;
    let db = xb.jacobian(x)?;
    let t1 = linalg::mat_vec(&db, &va);
    let t2 = linalg::mat_vec(&da, &vb);
    Ok(t1.iter().zip(&t2).map(|(p, q)| p - q).collect())
}

/// Ordered tuple of field indices (0-based internally, printed 1-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndexTuple(pub Vec<usize>);

impl IndexTuple {
    pub fn new(indices: Vec<usize>, n: usize, q: usize) -> Result<Self> {
        check_dim(n, indices.len())?;
        if let Some(bad) = indices.iter().find(|&&j| j >= q) {
            return Err(Error::invalid(format!("field index {} exceeds q = {q}", bad + 1)));
        }
        Ok(IndexTuple(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// All strictly increasing `n`-tuples from `{0..q}` in lexicographic order.
    pub fn increasing(n: usize, q: usize) -> Vec<IndexTuple> {
        let mut out = Vec::new();
        let mut cur = Vec::with_capacity(n);
        fn rec(start: usize, n: usize, q: usize, cur: &mut Vec<usize>, out: &mut Vec<IndexTuple>) {
            if cur.len() == n {
                out.push(IndexTuple(cur.clone()));
                return;
            }
            for j in start..q {
                cur.push(j);
                rec(j + 1, n, q, cur, out);
                cur.pop();
            }
        }
        rec(0, n, q, &mut cur, &mut out);
        out
    }
}

impl fmt::Display for IndexTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|j| (j + 1).to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// User-supplied structure functions `c[j][k][l]` with `[X_j, X_k] = sum_l c[j][k][l] X_l`.
pub type StructureExprs = Vec<Vec<Vec<Expr>>>;

/// `q` vector fields on a common box domain of `R^n`.
#[derive(Clone, Debug)]
pub struct VectorSystem {
    dim: usize,
    fields: Vec<VectorField>,
    domain: DomainBox,
    structure: Option<Arc<StructureExprs>>,
}

impl VectorSystem {
    pub fn new(fields: Vec<VectorField>, domain: DomainBox) -> Result<Self> {
        let Some(first) = fields.first() else {
            return Err(Error::invalid("a system needs at least one field"));
        };
        let dim = first.dim();
        for f in &fields {
            check_dim(dim, f.dim())?;
        }
        check_dim(dim, domain.dim())?;
        Ok(VectorSystem {
            dim,
            fields,
            domain,
            structure: None,
        })
    }

    /// Standard basis `d/dx_1, ..., d/dx_n` on an unbounded domain.
    pub fn euclidean(n: usize) -> Self {
        let fields = (0..n).map(|i| VectorField::axis(i, n)).collect();
        VectorSystem::new(fields, DomainBox::unbounded(n)).expect("valid")
    }

    /// Attaches user structure functions after checking the bracket residual at `samples`.
    pub fn with_structure(mut self, c: StructureExprs, samples: &[Vec<f64>], tol: f64) -> Result<Self> {
        let q = self.q();
        if c.len() != q || c.iter().any(|row| row.len() != q || row.iter().any(|v| v.len() != q)) {
            return Err(Error::invalid("structure coefficients must be q x q x q"));
        }
        for x in samples {
            let cols = self.columns(x)?;
            for j in 0..q {
                for k in 0..q {
                    let br = commutator(&self.fields[j], &self.fields[k], x)?;
                    let mut resid = br.clone();
                    for l in 0..q {
                        let cv = c[j][k][l].eval(x)?;
                        for i in 0..self.dim {
                            resid[i] -= cv * cols[l][i];
                        }
                    }
                    let scale = 1.0 + linalg::norm(&br);
                    if linalg::norm(&resid) > tol * scale {
                        return Err(Error::invalid(format!(
                            "structure coefficients for [X{},X{}] leave residual {:.3e} at {x:?}",
                            j + 1,
                            k + 1,
                            linalg::norm(&resid)
                        )));
                    }
                }
            }
        }
        self.structure = Some(Arc::new(c));
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn q(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn field(&self, j: usize) -> &VectorField {
        &self.fields[j]
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn with_domain(mut self, domain: DomainBox) -> Result<Self> {
        check_dim(self.dim, domain.dim())?;
        self.domain = domain;
        Ok(self)
    }

    pub fn user_structure(&self) -> Option<&StructureExprs> {
        self.structure.as_deref()
    }

    pub fn is_symbolic(&self) -> bool {
        self.fields.iter().all(VectorField::is_symbolic)
    }

    /// Field values `X_1(x), ..., X_q(x)`.
    pub fn columns(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.fields.iter().map(|f| f.eval(x)).collect()
    }

    /// The `n x q` matrix with columns `X_j(x)`.
    pub fn matrix(&self, x: &[f64]) -> Result<Mat> {
        let cols = self.columns(x)?;
        Ok(linalg::from_columns(&cols, self.dim))
    }

    /// `sum_j a_j X_j(x)` written into `out`.
    pub fn combination_into(&self, a: &[f64], x: &[f64], out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (f, &aj) in self.fields.iter().zip(a) {
            if aj == 0.0 {
                continue;
            }
            f.eval_into(x, scratch)?;
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += aj * s;
            }
        }
        Ok(())
    }

    pub fn combination(&self, a: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.q(), a.len())?;
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        self.combination_into(a, x, &mut out, &mut scratch)?;
        Ok(out)
    }

    /// Subsystem `X_J` in the order given by `j`. User structure functions are dropped.
    pub fn subsystem(&self, j: &IndexTuple) -> VectorSystem {
        VectorSystem {
            dim: self.dim,
            fields: j.indices().iter().map(|&i| self.fields[i].clone()).collect(),
            domain: self.domain.clone(),
            structure: None,
        }
    }

    /// `{ factors[j] * X_j }`.
    pub fn scaled(&self, factors: &[f64]) -> Result<VectorSystem> {
        check_dim(self.q(), factors.len())?;
        Ok(VectorSystem {
            dim: self.dim,
            fields: self.fields.iter().zip(factors).map(|(f, &c)| f.scaled(c)).collect(),
            domain: self.domain.clone(),
            structure: self.structure.as_ref().map(|c| {
                // [aX_j, bX_k] = ab sum_l c (X_l) = sum_l (ab / c_l) c (c_l X_l)
                let q = factors.len();
                let scaled: StructureExprs = (0..q)
                    .map(|j| {
                        (0..q)
                            .map(|k| {
                                (0..q)
                                    .map(|l| {
                                        let f = factors[j] * factors[k] / factors[l];
                                        c[j][k][l].scale(if f.is_finite() { f } else { 0.0 })
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                Arc::new(scaled)
            }),
        })
    }

    /// Pushforward of every field under `y = M x + b`; the domain becomes the
    /// bounding box of the image.
    pub fn push_affine(&self, m: &Mat, b: &[f64]) -> Result<VectorSystem> {
        let fields = self
            .fields
            .iter()
            .map(|f| f.push_affine(m, b))
            .collect::<Result<Vec<_>>>()?;
        let n = self.dim;
        let domain = if self.domain.is_bounded() {
            let mut lo = b.to_vec();
            let mut hi = b.to_vec();
            for i in 0..n {
                for k in 0..n {
                    let (a, c) = (m[(i, k)] * self.domain.lo[k], m[(i, k)] * self.domain.hi[k]);
                    lo[i] += a.min(c);
                    hi[i] += a.max(c);
                }
            }
            DomainBox { lo, hi }
        } else {
            DomainBox::unbounded(n)
        };
        VectorSystem::new(fields, domain)
    }

    fn span_threshold(&self, cols: &[Vec<f64>]) -> f64 {
        let maxcol = cols.iter().map(|c| linalg::norm(c)).fold(0.0, f64::max);
        SPAN_TOL * maxcol.powi(self.dim as i32)
    }

    /// Whether `X_1(x), ..., X_q(x)` span `R^n` under the scale-aware threshold.
    pub fn spans_at(&self, x: &[f64]) -> Result<bool> {
        let cols = self.columns(x)?;
        let thr = self.span_threshold(&cols);
        let best = IndexTuple::increasing(self.dim, self.q())
            .iter()
            .map(|j| det_of(&cols, j, self.dim).abs())
            .fold(0.0, f64::max);
        Ok(best > 0.0 && best >= thr)
    }
}

fn det_of(cols: &[Vec<f64>], j: &IndexTuple, n: usize) -> f64 {
    let m = Mat::from_fn(n, n, |r, c| cols[j.0[c]][r]);
    linalg::det(&m)
}

/// Determinant of the matrix with columns `X_{j_1}(x), ..., X_{j_n}(x)`.
pub fn wedge_det(s: &VectorSystem, j: &IndexTuple, x: &[f64]) -> Result<f64> {
    check_dim(s.dim(), j.len())?;
    let cols: Vec<Vec<f64>> = j
        .indices()
        .iter()
        .map(|&i| s.field(i).eval(x))
        .collect::<Result<_>>()?;
    Ok(linalg::det(&linalg::from_columns(&cols, s.dim())))
}

/// Outcome of choosing the basis tuple at a point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct J0Choice {
    pub j0: IndexTuple,
    pub det: f64,
    /// `max_J |det X_J| / |det X_J0|`, always `>= 1`.
    pub ratio: f64,
    pub zeta: f64,
    /// Whether `ratio <= 1 / zeta`.
    pub zeta_holds: bool,
}

/// Picks the lexicographically smallest increasing tuple maximizing `|det X_J(x0)|`.
pub fn select_j0(s: &VectorSystem, x0: &[f64], zeta: f64) -> Result<J0Choice> {
    if !(zeta > 0.0 && zeta <= 1.0) {
        return Err(Error::invalid(format!("zeta must lie in (0, 1], got {zeta}")));
    }
    let cols = s.columns(x0)?;
    let n = s.dim();
    let tuples = IndexTuple::increasing(n, s.q());
    let dets: Vec<f64> = tuples.iter().map(|j| det_of(&cols, j, n)).collect();
    let max = dets.iter().map(|d| d.abs()).fold(0.0, f64::max);
    if max == 0.0 || max < s.span_threshold(&cols) {
        return Err(Error::NotSpanning { point: x0.to_vec() });
    }
    // ties within rounding go to the earliest tuple
    let pick = dets
        .iter()
        .position(|d| d.abs() >= max * (1.0 - 1e-12))
        .expect("maximum exists");
    let ratio = max / dets[pick].abs();
    Ok(J0Choice {
        j0: tuples[pick].clone(),
        det: dets[pick],
        ratio,
        zeta,
        zeta_holds: ratio <= 1.0 / zeta,
    })
}

/// Coefficients `b_l` with `y = sum_l b_l basis_l`, by determinant quotients:
/// `b_l = det(basis_1, ..., y, ..., basis_n) / det(basis_1, ..., basis_n)`.
pub fn cramer(basis: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    check_dim(n, basis.len())?;
    let base = linalg::from_columns(basis, n);
    let d = linalg::det(&base);
    let scale = basis.iter().map(|c| linalg::norm(c)).fold(0.0, f64::max);
    if d == 0.0 || d.abs() < 1e-14 * scale.powi(n as i32) {
        return Err(Error::Singular("basis determinant vanishes".into()));
    }
    Ok((0..n)
        .map(|l| {
            let mut m = base.clone();
            for i in 0..n {
                m[(i, l)] = y[i];
            }
            linalg::det(&m) / d
        })
        .collect())
}

/// Cramer coefficients of `y(x)` in the basis `basis_1(x), ..., basis_n(x)`.
pub fn cramer_coeffs(basis: &[VectorField], y: &VectorField, x: &[f64]) -> Result<Vec<f64>> {
    let cols: Vec<Vec<f64>> = basis.iter().map(|b| b.eval(x)).collect::<Result<_>>()?;
    cramer(&cols, &y.eval(x)?)
}

/// Structure tensor `c[j][k][l]`, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureTensor {
    pub q: usize,
    pub data: Vec<f64>,
}

impl StructureTensor {
    pub fn zeros(q: usize) -> Self {
        StructureTensor {
            q,
            data: vec![0.0; q * q * q],
        }
    }

    pub fn get(&self, j: usize, k: usize, l: usize) -> f64 {
        self.data[(j * self.q + k) * self.q + l]
    }

    pub fn set(&mut self, j: usize, k: usize, l: usize, v: f64) {
        let q = self.q;
        self.data[(j * q + k) * q + l] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// All brackets `[X_j, X_k](x)` for `j < k` (antisymmetry gives the rest).
pub fn brackets(s: &VectorSystem, x: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    let q = s.q();
    let vals = s.columns(x)?;
    let jacs: Vec<Mat> = s.fields().iter().map(|f| f.jacobian(x)).collect::<Result<_>>()?;
    let n = s.dim();
    let mut out = vec![vec![vec![0.0; n]; q]; q];
    for j in 0..q {
        for k in (j + 1)..q {
            let t1 = linalg::mat_vec(&jacs[k], &vals[j]);
            let t2 = linalg::mat_vec(&jacs[j], &vals[k]);
            for i in 0..n {
                out[j][k][i] = t1[i] - t2[i];
                out[k][j][i] = -(t1[i] - t2[i]);
            }
        }
    }
    Ok(out)
}

/// Structure coefficients at `x`: user-supplied functions when present,
/// otherwise the minimum-Euclidean-norm solution of
/// `[X_j, X_k](x) = sum_l c_{j,k}^l X_l(x)`.
pub fn structure_coefficients(s: &VectorSystem, x: &[f64]) -> Result<StructureTensor> {
    let q = s.q();
    let mut t = StructureTensor::zeros(q);
    if let Some(c) = s.user_structure() {
        for j in 0..q {
            for k in 0..q {
                for l in 0..q {
                    t.set(j, k, l, c[j][k][l].eval(x)?);
                }
            }
        }
        return Ok(t);
    }
    if !s.spans_at(x)? {
        return Err(Error::NotSpanning { point: x.to_vec() });
    }
    let p = linalg::pinv(&s.matrix(x)?, 1e-12);
    let br = brackets(s, x)?;
    for j in 0..q {
        for k in (j + 1)..q {
            let c = linalg::mat_vec(&p, &br[j][k]);
            for l in 0..q {
                t.set(j, k, l, c[l]);
                t.set(k, j, l, -c[l]);
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn heisenberg() -> VectorSystem {
        let x = VectorField::parse("X", &["1", "0", "-x2/2"]).unwrap();
        let y = VectorField::parse("Y", &["0", "1", "x1/2"]).unwrap();
        let t = VectorField::parse("T", &["0", "0", "1"]).unwrap();
        VectorSystem::new(vec![x, y, t], DomainBox::unbounded(3)).unwrap()
    }

    #[test]
    fn jacobian_examples() {
        let f = VectorField::parse("F", &["x1^2", "0"]).unwrap();
        let j = f.jacobian(&[3.0, 1.0]).unwrap();
        assert_eq!(j, Mat::from_row_slice(2, 2, &[6.0, 0.0, 0.0, 0.0]));
        let c = VectorField::axis(0, 2);
        assert_eq!(c.jacobian(&[0.3, -2.0]).unwrap(), Mat::zeros(2, 2));
        let h = heisenberg();
        let jx = h.field(0).jacobian(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(jx[(2, 1)], -0.5);
    }

    #[test]
    fn exact_jacobian_matches_differences() {
        let f = VectorField::parse("F", &["sin(x1)*x2", "exp(x1 - x2^2)"]).unwrap();
        let x = [0.3, -0.7];
        let exact = f.jacobian(&x).unwrap();
        let fd = f.fd_jacobian(&x, 1e-5).unwrap();
        assert!((exact - fd).abs().max() < 1e-8);
    }

    #[test]
    fn commutator_examples() {
        let dx = VectorField::axis(0, 2);
        let dy = VectorField::axis(1, 2);
        assert_eq!(commutator(&dx, &dy, &[0.4, 0.1]).unwrap(), vec![0.0, 0.0]);
        let h = heisenberg();
        let b = commutator(h.field(0), h.field(1), &[0.3, -0.8, 2.0]).unwrap();
        assert_eq!(b, vec![0.0, 0.0, 1.0]);
        let xdy = VectorField::parse("G", &["0", "x1"]).unwrap();
        assert_eq!(commutator(&dx, &xdy, &[0.5, 0.5]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn heisenberg_structure_constants() {
        let h = heisenberg();
        let c = structure_coefficients(&h, &[0.2, -0.4, 1.0]).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    let expect = match (j, k, l) {
                        (0, 1, 2) => 1.0,
                        (1, 0, 2) => -1.0,
                        _ => 0.0,
                    };
                    assert!((c.get(j, k, l) - expect).abs() < 1e-12, "{j}{k}{l}");
                }
            }
        }
        let e = VectorSystem::euclidean(3);
        assert_eq!(structure_coefficients(&e, &[1.0, 2.0, 3.0]).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn structure_requires_span() {
        let f = VectorField::parse("F", &["1", "0"]).unwrap();
        let s = VectorSystem::new(vec![f], DomainBox::unbounded(2)).unwrap();
        assert!(matches!(structure_coefficients(&s, &[0.0, 0.0]), Err(Error::NotSpanning { .. })));
    }

    #[test]
    fn user_structure_is_checked() {
        let h = heisenberg();
        let n = 3;
        let zero = || Expr::constant(0.0, n);
        let mut c: StructureExprs = vec![vec![vec![zero(), zero(), zero()]; 3]; 3];
        c[0][1][2] = Expr::constant(1.0, n);
        c[1][0][2] = Expr::constant(-1.0, n);
        let samples = vec![vec![0.0, 0.0, 0.0], vec![1.0, -2.0, 0.5]];
        let ok = h.clone().with_structure(c.clone(), &samples, 1e-9).unwrap();
        assert_eq!(structure_coefficients(&ok, &[0.0; 3]).unwrap().get(0, 1, 2), 1.0);
        c[0][1][2] = Expr::constant(2.0, n);
        assert!(h.with_structure(c, &samples, 1e-9).is_err());
    }

    #[test]
    fn wedge_examples() {
        let a = VectorField::parse("A", &["1", "0"]).unwrap();
        let b = VectorField::parse("B", &["0", "2"]).unwrap();
        let s = VectorSystem::new(vec![a, b], DomainBox::unbounded(2)).unwrap();
        let x = [0.0, 0.0];
        assert_eq!(wedge_det(&s, &IndexTuple(vec![0, 1]), &x).unwrap(), 2.0);
        assert_eq!(wedge_det(&s, &IndexTuple(vec![0, 0]), &x).unwrap(), 0.0);
        assert_eq!(wedge_det(&s, &IndexTuple(vec![1, 0]), &x).unwrap(), -2.0);
    }

    #[test]
    fn j0_examples() {
        let f = |c: [&str; 2]| VectorField::parse("F", &c).unwrap();
        let s = VectorSystem::new(vec![f(["1", "0"]), f(["0", "1"]), f(["10", "0"])], DomainBox::unbounded(2)).unwrap();
        let pick = select_j0(&s, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(pick.j0, IndexTuple(vec![1, 2]));
        assert_eq!(pick.ratio, 1.0);
        assert!(pick.zeta_holds);
        let scaled = s.scaled(&[7.0, 7.0, 7.0]).unwrap();
        assert_eq!(select_j0(&scaled, &[0.0, 0.0], 0.5).unwrap().j0, pick.j0);
        let e = VectorSystem::euclidean(3);
        assert_eq!(select_j0(&e, &[0.0; 3], 1.0).unwrap().j0, IndexTuple(vec![0, 1, 2]));
        assert!(select_j0(&e, &[0.0; 3], 0.0).is_err());
        let deg = VectorSystem::new(vec![f(["1", "0"]), f(["2", "0"])], DomainBox::unbounded(2)).unwrap();
        assert!(matches!(select_j0(&deg, &[0.0, 0.0], 1.0), Err(Error::NotSpanning { .. })));
    }

    #[test]
    fn cramer_examples() {
        let basis = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        // oracle: direct linear solve
        let m = linalg::from_columns(&basis, 2);
        let direct = linalg::solve(&m, &[3.0, 4.0]).unwrap();
        let b = cramer(&basis, &[3.0, 4.0]).unwrap();
        assert_eq!(b, direct);
        assert_eq!(b, vec![3.0, 2.0]);
        assert_eq!(cramer(&basis, &basis[0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(cramer(&basis, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(cramer(&[vec![1.0, 0.0], vec![2.0, 0.0]], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn affine_pushforward_is_conjugation() {
        let h = heisenberg();
        let m = Mat::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.0, 1.0, 0.3, 0.1, 0.0, 1.5]);
        let b = [0.2, -0.1, 0.4];
        let pushed = h.push_affine(&m, &b).unwrap();
        let x = [0.3, 0.7, -0.2];
        let y: Vec<f64> = linalg::mat_vec(&m, &x).iter().zip(&b).map(|(p, q)| p + q).collect();
        for j in 0..3 {
            let expect = linalg::mat_vec(&m, &h.field(j).eval(&x).unwrap());
            let got = pushed.field(j).eval(&y).unwrap();
            assert!(linalg::dist(&expect, &got) < 1e-12);
        }
    }

    fn small_field() -> impl Strategy<Value = VectorField> {
        let coeff = prop::sample::select(vec![
            "x1", "x2", "x3", "x1*x2", "sin(x1)", "cos(x2)*x3", "x3^2", "exp(x1/3)", "1", "x1 - x2*x3",
        ]);
        proptest::collection::vec(coeff, 3).prop_map(|c| VectorField::parse("V", &[c[0], c[1], c[2]]).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn jacobi_identity(a in small_field(), b in small_field(), c in small_field(),
                           x in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let ab = a.bracket_symbolic(&b).unwrap();
            let bc = b.bracket_symbolic(&c).unwrap();
            let ca = c.bracket_symbolic(&a).unwrap();
            let t1 = commutator(&a, &bc, &x).unwrap();
            let t2 = commutator(&b, &ca, &x).unwrap();
            let t3 = commutator(&c, &ab, &x).unwrap();
            let sum: Vec<f64> = (0..3).map(|i| t1[i] + t2[i] + t3[i]).collect();
            prop_assert!(linalg::norm(&sum) <= 1e-6);
        }

        #[test]
        fn cramer_residual(entries in proptest::collection::vec(-2.0f64..2.0, 9),
                           y in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let basis: Vec<Vec<f64>> = entries.chunks(3).map(|c| c.to_vec()).collect();
            let d = linalg::det(&linalg::from_columns(&basis, 3));
            prop_assume!(d.abs() >= 1e-8);
            if let Ok(b) = cramer(&basis, &y) {
                let mut r = y.clone();
                for l in 0..3 { for i in 0..3 { r[i] -= b[l] * basis[l][i]; } }
                // conditioning enters through the determinant quotients
                let cond = basis.iter().map(|c| linalg::norm(c)).fold(0.0, f64::max).powi(3) / d.abs();
                prop_assert!(linalg::norm(&r) <= 1e-10 * linalg::norm(&y).max(1e-300) * cond.max(1.0));
            }
        }

        #[test]
        fn wedge_multilinear(entries in proptest::collection::vec(-2.0f64..2.0, 9),
                             w in proptest::collection::vec(-2.0f64..2.0, 3),
                             alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let cols: Vec<Vec<f64>> = entries.chunks(3).map(|c| c.to_vec()).collect();
            let base = linalg::det(&linalg::from_columns(&cols, 3));
            let mut with_w = cols.clone();
            with_w[1] = w.clone();
            let dw = linalg::det(&linalg::from_columns(&with_w, 3));
            let mut mixed = cols.clone();
            mixed[1] = (0..3).map(|i| alpha * cols[1][i] + beta * w[i]).collect();
            let dm = linalg::det(&linalg::from_columns(&mixed, 3));
            prop_assert!((dm - (alpha * base + beta * dw)).abs() <= 1e-10 * (1.0 + dm.abs()));
        }

        #[test]
        fn structure_antisymmetric(x in proptest::collection::vec(-1.0f64..1.0, 2)) {
            let f = |c: [&str; 2]| VectorField::parse("F", &c).unwrap();
            let s = VectorSystem::new(vec![f(["1", "x2"]), f(["x1^2", "1"]), f(["sin(x2)", "x1"])], DomainBox::unbounded(2)).unwrap();
            prop_assume!(s.spans_at(&x).unwrap());
            let c = structure_coefficients(&s, &x).unwrap();
            for j in 0..3 { for k in 0..3 { for l in 0..3 {
                prop_assert!((c.get(j, k, l) + c.get(k, j, l)).abs() < 1e-12);
            }}}
        }
    }
}
