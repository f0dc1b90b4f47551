//! TOML experiment configuration.

use std::path::Path;

use cccharts::chart::ChartConfig;
use cccharts::density::Density;
use cccharts::fields::{DomainBox, VectorField, VectorSystem};
use cccharts::scaling::GradedSystem;
use cccharts::Expr;
use serde::Deserialize;

/// Configuration problems map to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub coefficients: Vec<String>,
    pub degree: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// One structure function `c_{j,k}^l` (1-based indices); missing entries are zero.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub expr: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub grid: Option<usize>,
    pub rk4_steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    pub zeta: f64,
    pub eta_max: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let c = ChartConfig::default();
        SolverSpec {
            grid: None,
            rk4_steps: c.flow_steps,
            samples: 20_000,
            seed: 0,
            tol: c.tol,
            zeta: c.zeta,
            eta_max: c.eta_max,
        }
    }
}

/// Inputs of the single-purpose subcommands.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    /// Ball radius for `ball`.
    pub delta: f64,
    /// Radii for `scaling` (overridden by `--deltas`).
    pub deltas: Vec<f64>,
    /// End point for `distance`.
    pub target: Option<Vec<f64>>,
    /// Flow time and 1-based field index (or coefficients) for `flow`.
    pub time: f64,
    pub field: Option<usize>,
    pub coefficients: Option<Vec<f64>>,
    pub flow_samples: usize,
    /// Function, kind and parameters for `norms`.
    pub function: Option<String>,
    pub norm: String,
    pub m: usize,
    pub s: f64,
    pub s2: f64,
    pub radius: f64,
    pub resolution: usize,
    /// Sampled `Y_j` rows written by `chart`.
    pub y_samples: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            delta: 1.0,
            deltas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            target: None,
            time: 1.0,
            field: None,
            coefficients: None,
            flow_samples: 11,
            function: None,
            norm: "zygmund".into(),
            m: 0,
            s: 1.0,
            s2: 0.5,
            radius: 1.0,
            resolution: 16,
            y_samples: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: Option<u32>,
    pub dimension: usize,
    pub domain: Option<DomainSpec>,
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub structure: Vec<StructureSpec>,
    pub base_point: Vec<f64>,
    pub density: Option<String>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub experiment: ExperimentSpec,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Parses and validates; every expression is parsed here.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(text).map_err(|e| cfg_err(format!("invalid config: {e}")))?;
        if let Some(v) = c.schema_version {
            if v != 1 {
                return Err(cfg_err(format!("unsupported schema_version {v}")));
            }
        }
        if c.dimension == 0 {
            return Err(cfg_err("dimension must be positive"));
        }
        if c.fields.is_empty() {
            return Err(cfg_err("at least one field is required"));
        }
        if c.base_point.len() != c.dimension {
            return Err(cfg_err(format!("base_point has {} entries, expected {}", c.base_point.len(), c.dimension)));
        }
        c.system()?;
        c.density()?;
        if let Some(f) = &c.experiment.function {
            Expr::parse(f, c.dimension).map_err(|e| cfg_err(format!("function: {e}")))?;
        }
        if c.solver.samples == 0 {
            return Err(cfg_err("solver.samples must be positive"));
        }
        Ok(c)
    }

    pub fn domain(&self) -> Result<DomainBox, ConfigError> {
        match &self.domain {
            None => Ok(DomainBox::unbounded(self.dimension)),
            Some(d) => {
                if d.lo.len() != self.dimension || d.hi.len() != self.dimension {
                    return Err(cfg_err("domain bounds must have one entry per coordinate"));
                }
                DomainBox::new(d.lo.clone(), d.hi.clone()).map_err(|e| cfg_err(format!("domain: {e}")))
            }
        }
    }

    pub fn system(&self) -> Result<VectorSystem, ConfigError> {
        let n = self.dimension;
        let fields = self
            .fields
            .iter()
            .map(|f| {
                if f.coefficients.len() != n {
                    return Err(cfg_err(format!("field {} needs {n} coefficients", f.name)));
                }
                let coeffs = f
                    .coefficients
                    .iter()
                    .map(|c| Expr::parse(c, n).map_err(|e| cfg_err(format!("field {}: {e}", f.name))))
                    .collect::<Result<Vec<_>, _>>()?;
                VectorField::symbolic(f.name.clone(), coeffs).map_err(|e| cfg_err(format!("field {}: {e}", f.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let s = VectorSystem::new(fields, self.domain()?).map_err(|e| cfg_err(e.to_string()))?;
        if self.structure.is_empty() {
            return Ok(s);
        }
        let q = s.q();
        let mut c = vec![vec![vec![Expr::constant(0.0, n); q]; q]; q];
        for e in &self.structure {
            if [e.j, e.k, e.l].iter().any(|&i| i == 0 || i > q) {
                return Err(cfg_err(format!("structure index out of range: ({}, {}, {})", e.j, e.k, e.l)));
            }
            c[e.j - 1][e.k - 1][e.l - 1] = Expr::parse(&e.expr, n).map_err(|err| cfg_err(format!("structure: {err}")))?;
        }
        s.with_structure(c, std::slice::from_ref(&self.base_point), 1e-8)
            .map_err(|e| cfg_err(e.to_string()))
    }

    pub fn graded(&self) -> Result<GradedSystem, ConfigError> {
        let degrees = self
            .fields
            .iter()
            .map(|f| f.degree.ok_or_else(|| cfg_err(format!("field {} has no degree", f.name))))
            .collect::<Result<Vec<_>, _>>()?;
        GradedSystem::new(self.system()?, degrees).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn density(&self) -> Result<Density, ConfigError> {
        match &self.density {
            None => Ok(Density::lebesgue(self.dimension)),
            Some(w) => Ok(Density::from_expr(
                Expr::parse(w, self.dimension).map_err(|e| cfg_err(format!("density: {e}")))?,
            )),
        }
    }

    pub fn chart_config(&self) -> ChartConfig {
        ChartConfig {
            zeta: self.solver.zeta,
            eta_max: self.solver.eta_max,
            resolution: self.solver.grid,
            tol: self.solver.tol,
            flow_steps: self.solver.rk4_steps,
            seed: self.solver.seed,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEISENBERG: &str = r#"
dimension = 3
base_point = [0.0, 0.0, 0.0]

[[fields]]
name = "X"
coefficients = ["1", "0", "-x2/2"]
degree = 1

[[fields]]
name = "Y"
coefficients = ["0", "1", "x1/2"]
degree = 1

[[fields]]
name = "T"
coefficients = ["0", "0", "1"]
degree = 2
"#;

    #[test]
    fn parses_and_builds() {
        let c = Config::parse(HEISENBERG).unwrap();
        assert_eq!(c.system().unwrap().q(), 3);
        assert_eq!(c.graded().unwrap().degrees(), vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::parse(&HEISENBERG.replace("x2/2", "x2/")).is_err());
        assert!(Config::parse(&HEISENBERG.replace("dimension = 3", "dimension = 3\nbogus = 1")).is_err());
        assert!(Config::parse(&HEISENBERG.replace("[0.0, 0.0, 0.0]", "[0.0]")).is_err());
        assert!(Config::parse(&HEISENBERG.replace("x1/2", "x4")).is_err());
        let no_deg = Config::parse(&HEISENBERG.replace("degree = 2", "")).unwrap();
        assert!(no_deg.graded().is_err());
    }

    #[test]
    fn structure_functions_are_checked() {
        let ok = format!("{HEISENBERG}\n[[structure]]\nj = 1\nk = 2\nl = 3\nexpr = \"1\"\n[[structure]]\nj = 2\nk = 1\nl = 3\nexpr = \"-1\"\n");
        assert!(Config::parse(&ok).is_ok());
        let bad = ok.replace("expr = \"1\"", "expr = \"2\"");
        assert!(Config::parse(&bad).is_err());
    }
}
