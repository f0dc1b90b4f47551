//! Subcommand dispatch and artifact emission.

use std::fs;
use std::path::{Path, PathBuf};

use cccharts::ccmetric::{cc_distance, graded_index, MetricParams};
use cccharts::chart::{build_chart, SCHEMA_VERSION};
use cccharts::flows::{exp_multi_time, FlowOptions};
use cccharts::funcspaces::{adapted_c_m_norm, c_m_norm, holder_norm, inclusion_check, zygmund_norm, Region, SampleFamily};
use cccharts::sampling;
use cccharts::scaling::volume_vs_lambda;
use cccharts::Expr;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Config, ConfigError};
use crate::verify::{self, VerifyOptions};

#[derive(Debug, Parser)]
#[command(name = "cccharts", version, about = "Canonical coordinate charts for families of vector fields")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// TOML experiment file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Grid resolution (nodes per half-axis).
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Worker threads; falls back to CCCHARTS_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Radius grid `START:END:COUNT`.
    #[arg(long, global = true, value_parser = parse_deltas)]
    pub deltas: Option<DeltaGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaGrid(pub Vec<f64>);

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the chart at the base point.
    Chart,
    /// Monte-Carlo measure of `B(x0, delta)`.
    Ball,
    /// Carnot-Caratheodory distance from the base point to the target.
    Distance,
    /// Norm estimates of the configured function.
    Norms,
    /// Ball volume against `Lambda` over a radius grid.
    Scaling,
    /// Trajectory of a field (or combination) from the base point.
    Flow,
    /// Invariant suites on the built-in examples.
    Verify {
        /// Run only this suite (repeatable).
        #[arg(long)]
        suite: Vec<String>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// `START:END:COUNT`, evenly spaced and inclusive.
pub fn parse_deltas(s: &str) -> Result<DeltaGrid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts[..] else {
        return Err("expected START:END:COUNT".into());
    };
    let a: f64 = a.parse().map_err(|e| format!("start: {e}"))?;
    let b: f64 = b.parse().map_err(|e| format!("end: {e}"))?;
    let c: usize = c.parse().map_err(|e| format!("count: {e}"))?;
    match c {
        0 => Err("count must be positive".into()),
        1 => Ok(DeltaGrid(vec![a])),
        _ => Ok(DeltaGrid((0..c).map(|i| a + (b - a) * i as f64 / (c - 1) as f64).collect())),
    }
}

#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Failure(String),
}

impl CmdError {
    pub fn code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Failure(_) => 1,
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Usage(e.0)
    }
}

impl From<cccharts::Error> for CmdError {
    fn from(e: cccharts::Error) -> Self {
        CmdError::Failure(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CmdError {
    CmdError::Failure(format!("cannot write {}: {e}", path.display()))
}

type CmdResult = Result<(), CmdError>;

/// Thread count from the flag, else the environment.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CmdError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("CCCHARTS_THREADS") {
        Ok(v) if !v.is_empty() => v
            .parse()
            .map(Some)
            .map_err(|_| CmdError::Usage(format!("CCCHARTS_THREADS must be a count, got {v:?}"))),
        _ => Ok(None),
    }
}

/// Runs the command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CmdError::Usage(m) => eprintln!("error: {m}"),
                CmdError::Failure(m) => eprintln!("failure: {m}"),
            }
            e.code()
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let g = &cli.global;
    if let Some(t) = thread_count(g.threads)? {
        if t == 0 {
            return Err(CmdError::Usage("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    fs::create_dir_all(&g.out).map_err(|e| io_err(&g.out, e))?;
    if let Command::Verify { suite, inject_fault } = &cli.command {
        return cmd_verify(g, suite, *inject_fault);
    }
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| CmdError::Usage("--config is required for this subcommand".into()))?;
    let cfg = Config::load(path)?;
    match cli.command {
        Command::Chart => cmd_chart(&cfg, g),
        Command::Ball => cmd_ball(&cfg, g),
        Command::Distance => cmd_distance(&cfg, g),
        Command::Norms => cmd_norms(&cfg, g),
        Command::Scaling => cmd_scaling(&cfg, g),
        Command::Flow => cmd_flow(&cfg, g),
        Command::Verify { .. } => unreachable!(),
    }
}

fn write(dir: &Path, name: &str, body: &str) -> CmdResult {
    let p = dir.join(name);
    fs::write(&p, body).map_err(|e| io_err(&p, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> CmdResult {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CmdError::Failure(e.to_string()))?;
    s.push('\n');
    write(dir, name, &s)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>, dir: &Path, name: &str) -> CmdResult {
    let bytes = w.into_inner().map_err(|e| CmdError::Failure(e.to_string()))?;
    write(dir, name, &String::from_utf8_lossy(&bytes))
}

fn csv_fail(e: csv::Error) -> CmdError {
    CmdError::Failure(e.to_string())
}

fn seed(cfg: &Config, g: &Global) -> u64 {
    g.seed.unwrap_or(cfg.solver.seed)
}

fn samples(cfg: &Config, g: &Global) -> Result<usize, CmdError> {
    match g.samples.unwrap_or(cfg.solver.samples) {
        0 => Err(CmdError::Usage("samples must be positive".into())),
        n => Ok(n),
    }
}

fn cmd_chart(cfg: &Config, g: &Global) -> CmdResult {
    let s = cfg.system()?;
    let mut cc = cfg.chart_config();
    cc.seed = seed(cfg, g);
    if g.grid.is_some() {
        cc.resolution = g.grid;
    }
    if let Some(t) = g.tol {
        cc.tol = t;
    }
    let (chart, diag) = build_chart(&s, &cfg.base_point, &cc)?;
    write_json(&g.out, "chart.json", &chart.export(&diag))?;
    write(&g.out, "a_grid.csv", &chart.a.to_csv())?;
    let n = chart.dim();
    if cfg.experiment.y_samples > 0 {
        let mut w = csv_writer();
        let mut head = vec!["schema_version".to_string(), "j".into()];
        head.extend((1..=n).map(|i| format!("t{i}")));
        head.extend((1..=n).map(|i| format!("y{i}")));
        w.write_record(&head).map_err(csv_fail)?;
        for t in sampling::ball_points(cfg.experiment.y_samples, n, chart.radii.eta1) {
            for j in 0..s.q() {
                let y = chart.y(j, &t)?;
                let mut row = vec![SCHEMA_VERSION.to_string(), (j + 1).to_string()];
                row.extend(t.iter().chain(&y).map(|v| v.to_string()));
                w.write_record(&row).map_err(csv_fail)?;
            }
        }
        finish_csv(w, &g.out, "y_samples.csv")?;
    }
    println!("j0 = {:?}", chart.j0.indices().iter().map(|i| i + 1).collect::<Vec<_>>());
    println!("eta1 = {:e}", chart.radii.eta1);
    for r in &diag.residuals {
        println!(
            "{} {} {} = {:e} (tolerance {:e})",
            if r.pass { "ok  " } else { "FAIL" },
            r.item,
            r.quantity,
            r.value,
            r.tolerance
        );
    }
    if diag.all_pass() {
        Ok(())
    } else {
        Err(CmdError::Failure("chart residual checks failed".into()))
    }
}

fn cmd_ball(cfg: &Config, g: &Global) -> CmdResult {
    let s = cfg.system()?;
    let nu = cfg.density()?;
    let m = samples(cfg, g)?;
    let seed = seed(cfg, g);
    let delta = cfg.experiment.delta;
    let degrees = match cfg.fields.iter().all(|f| f.degree.is_some()) {
        true => cfg.fields.iter().map(|f| f.degree.unwrap_or(1.0)).collect(),
        false => vec![1.0; s.q()],
    };
    let idx = graded_index(&s, &degrees, &cfg.base_point, delta, &MetricParams::default())?;
    let (sw, sw2, hits) = idx.weighted_hits(m, seed, &|y| nu.weight(y))?;
    let vol = idx.box_volume();
    let mean = sw / m as f64;
    let var = (sw2 / m as f64 - mean * mean).max(0.0);
    let (value, stderr) = (vol * mean, vol * (var / m as f64).sqrt());
    let mut w = csv_writer();
    let n = s.dim();
    let mut head = vec!["schema_version".to_string()];
    head.extend((1..=n).map(|i| format!("x{i}")));
    head.extend(["delta", "weight", "measure", "stderr", "samples", "hits", "seed"].map(String::from));
    w.write_record(&head).map_err(csv_fail)?;
    let mut row = vec![SCHEMA_VERSION.to_string()];
    row.extend(cfg.base_point.iter().map(|v| v.to_string()));
    row.extend([
        delta.to_string(),
        nu.tag(),
        value.to_string(),
        stderr.to_string(),
        m.to_string(),
        hits.to_string(),
        seed.to_string(),
    ]);
    w.write_record(&row).map_err(csv_fail)?;
    finish_csv(w, &g.out, "ball.csv")?;
    println!("measure = {value:e} +- {stderr:e} ({hits} of {m} samples)");
    Ok(())
}

#[derive(Serialize)]
struct DistanceOut {
    schema_version: u32,
    x: Vec<f64>,
    y: Vec<f64>,
    /// `null` when no connecting path was found.
    rho: Option<f64>,
    radius: f64,
    graph_nodes: usize,
}

fn cmd_distance(cfg: &Config, g: &Global) -> CmdResult {
    let s = cfg.system()?;
    let y = cfg
        .experiment
        .target
        .clone()
        .ok_or_else(|| CmdError::Usage("experiment.target is required for distance".into()))?;
    if y.len() != s.dim() {
        return Err(CmdError::Usage(format!("experiment.target needs {} entries", s.dim())));
    }
    let d = cc_distance(&s, &cfg.base_point, &y, &MetricParams::default())?;
    let out = DistanceOut {
        schema_version: SCHEMA_VERSION,
        x: cfg.base_point.clone(),
        y,
        rho: d.rho.is_finite().then_some(d.rho),
        radius: d.radius,
        graph_nodes: d.graph_nodes,
    };
    write_json(&g.out, "distance.json", &out)?;
    println!("rho <= {:e}", d.rho);
    Ok(())
}

#[derive(Serialize)]
struct NormsOut<T> {
    schema_version: u32,
    function: String,
    report: T,
}

fn cmd_norms(cfg: &Config, g: &Global) -> CmdResult {
    let e = &cfg.experiment;
    let text = e
        .function
        .clone()
        .ok_or_else(|| CmdError::Usage("experiment.function is required for norms".into()))?;
    let f = Expr::parse(&text, cfg.dimension).map_err(|err| CmdError::Usage(err.to_string()))?;
    let fam = SampleFamily::lattice(&Region::ball(cfg.base_point.clone(), e.radius), e.resolution)?;
    match e.norm.as_str() {
        "zygmund" => write_norms(&g.out, &text, &zygmund_norm(&f, e.s, &fam)?),
        "holder" => write_norms(&g.out, &text, &holder_norm(&f, e.m, e.s, &fam)?),
        "cm" => write_norms(&g.out, &text, &c_m_norm(&f, e.m, &fam)?),
        "adapted-cm" => write_norms(&g.out, &text, &adapted_c_m_norm(&f, &cfg.system()?, e.m, &fam)?),
        "inclusion" => write_norms(&g.out, &text, &inclusion_check(&f, e.m, e.s2, e.s, &fam)?),
        other => Err(CmdError::Usage(format!(
            "unknown norm {other:?} (zygmund, holder, cm, adapted-cm, inclusion)"
        ))),
    }
}

fn write_norms<T: Serialize>(dir: &Path, function: &str, report: &T) -> CmdResult {
    let out = NormsOut {
        schema_version: SCHEMA_VERSION,
        function: function.to_string(),
        report,
    };
    write_json(dir, "norms.json", &out)?;
    println!("{}", serde_json::to_string(report).map_err(|e| CmdError::Failure(e.to_string()))?);
    Ok(())
}

fn cmd_scaling(cfg: &Config, g: &Global) -> CmdResult {
    let gs = cfg.graded()?;
    let m = samples(cfg, g)?;
    let deltas = g.deltas.clone().map(|d| d.0).unwrap_or_else(|| cfg.experiment.deltas.clone());
    if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
        return Err(CmdError::Usage("deltas must lie in (0, 1]".into()));
    }
    let law = volume_vs_lambda(&gs, &cfg.base_point, &deltas, m, seed(cfg, g), &MetricParams::default())?;
    let mut w = csv_writer();
    w.write_record(["schema_version", "delta", "volume", "stderr", "lambda", "ratio", "seed"])
        .map_err(csv_fail)?;
    for r in &law.rows {
        w.write_record(&[
            law.schema_version.to_string(),
            r.delta.to_string(),
            r.volume.to_string(),
            r.stderr.to_string(),
            r.lambda.to_string(),
            r.ratio.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_fail)?;
    }
    finish_csv(w, &g.out, "scaling.csv")?;
    write_json(&g.out, "scaling.json", &law)?;
    match law.slope {
        Some(s) => println!("slope = {s:e}, band = {:e}", law.band),
        None => println!("single radius, band = {:e}", law.band),
    }
    Ok(())
}

fn cmd_flow(cfg: &Config, g: &Global) -> CmdResult {
    let s = cfg.system()?;
    let e = &cfg.experiment;
    let a = match (&e.coefficients, e.field) {
        (Some(c), None) if c.len() == s.q() => c.clone(),
        (None, Some(j)) if (1..=s.q()).contains(&j) => {
            let mut a = vec![0.0; s.q()];
            a[j - 1] = 1.0;
            a
        }
        (None, None) if s.q() == 1 => vec![1.0],
        _ => {
            return Err(CmdError::Usage(format!(
                "flow needs experiment.field in 1..={} or {} coefficients",
                s.q(),
                s.q()
            )))
        }
    };
    if e.flow_samples < 2 {
        return Err(CmdError::Usage("experiment.flow_samples must be at least 2".into()));
    }
    let opts = FlowOptions::default();
    let n = s.dim();
    let mut w = csv_writer();
    let mut head = vec!["schema_version".to_string(), "t".into()];
    head.extend((1..=n).map(|i| format!("x{i}")));
    w.write_record(&head).map_err(csv_fail)?;
    let mut last = cfg.base_point.clone();
    for k in 0..e.flow_samples {
        let t = e.time * k as f64 / (e.flow_samples - 1) as f64;
        last = exp_multi_time(&s, &a, &cfg.base_point, t, &opts)?;
        let mut row = vec![SCHEMA_VERSION.to_string(), t.to_string()];
        row.extend(last.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_fail)?;
    }
    finish_csv(w, &g.out, "flow.csv")?;
    println!("x({}) = {:?}", e.time, last);
    Ok(())
}

fn cmd_verify(g: &Global, suites: &[String], inject_fault: bool) -> CmdResult {
    for s in suites {
        if !verify::SUITES.contains(&s.as_str()) {
            return Err(CmdError::Usage(format!("unknown suite {s:?}; known: {}", verify::SUITES.join(", "))));
        }
    }
    let opts = VerifyOptions {
        seed: g.seed.unwrap_or(0),
        samples: g.samples.unwrap_or(20_000),
        inject_fault,
    };
    if opts.samples == 0 {
        return Err(CmdError::Usage("samples must be positive".into()));
    }
    let mut cases = Vec::new();
    for name in verify::SUITES {
        if suites.is_empty() || suites.iter().any(|s| s == name) {
            cases.extend(verify::run_suite(name, &opts));
        }
    }
    print!("{}", verify::summary(&cases));
    write(&g.out, "verify.xml", &verify::junit(&cases, opts.seed))?;
    let failed = cases.iter().filter(|c| !c.pass).count();
    println!("{} cases, {failed} failed", cases.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(CmdError::Failure(format!("{failed} verify cases failed")))
    }
}
