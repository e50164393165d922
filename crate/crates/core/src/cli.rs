//! Command-line front end: configuration, dispatch and file outputs.
//!
//! Every command writes plain files into the output directory: CSV for
//! fields, arcs and tables, pretty JSON for reports. Nothing time- or
//! randomness-dependent is written, so identical configurations produce
//! byte-identical outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::action::{peierls_barrier, CostMatrix, HorizonSettings, Scheme};
use crate::barrier::{self, BarrierData, BarrierTolerances};
use crate::characteristics::{hamiltonian_flow, integrate_generalized, monotonicity_check, singular_persistence_check, FlowSettings};
use crate::error::{Error, Result};
use crate::homoclinic::{antipodal_detection, common_reachable_gradient, default_match_tol, settle_homoclinic, HomoclinicSettings};
use crate::model::{Covector, MechanicalSystem, Point, TorusGrid};
use crate::semiconcave::{regularity_test, CovectorPolytope, EstimatorParams, SuperdiffEstimator};
use crate::weakkam::{
    check_energy_condition, fixed_point_residual, lift_v, solve_alpha_u, solve_forward, ScalarField, SolveReport, SolverSettings,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

/// Largest 2D grid on which dense pair tables (Peierls barrier) are built.
pub const MAX_PAIR_GRID_2D: usize = 32;

/// Nodes sampled by the energy-shell check.
const SHELL_SAMPLES: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub tol_fp: f64,
    /// Singularity threshold on the superdifferential diameter; `0.2ρ` if unset.
    pub tol_sing: Option<f64>,
    pub tol_shell: f64,
    pub tol_aubry: f64,
    pub tol_h: f64,
    pub tol_b: f64,
    pub cal_tol: f64,
    /// Gradient matching tolerance; `0.05ρ` if unset.
    pub match_tol: Option<f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tol_fp: 1e-9,
            tol_sing: None,
            tol_shell: 0.1,
            tol_aubry: 1e-6,
            tol_h: 1e-4,
            tol_b: 2e-2,
            cal_tol: 0.05,
            match_tol: None,
        }
    }
}

/// Everything a command needs; read from a TOML file and/or flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: Option<PathBuf>,
    /// Cohomology class; empty means zero.
    pub c: Vec<f64>,
    pub grid: usize,
    /// Solver time step; the system default if unset.
    pub dt: Option<f64>,
    /// Step of generalized characteristics; `h / speed` if unset.
    pub ds: Option<f64>,
    /// Horizon of characteristics and flows.
    pub tau: f64,
    pub at: Option<Vec<f64>>,
    pub out: PathBuf,
    pub tolerances: Tolerances,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: None,
            c: Vec::new(),
            grid: 128,
            dt: None,
            ds: None,
            tau: 1.0,
            at: None,
            out: PathBuf::from("out"),
            tolerances: Tolerances::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML configuration; errors carry the line and field.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks the grid size and tolerance signs.
    pub fn validate(&self) -> Result<()> {
        if !(16..=512).contains(&self.grid) || !self.grid.is_power_of_two() {
            return Err(Error::Config(format!("grid: {} is not a power of two in [16, 512]", self.grid)));
        }
        let t = &self.tolerances;
        let named = [
            ("tol_fp", Some(t.tol_fp)),
            ("tol_sing", t.tol_sing),
            ("tol_shell", Some(t.tol_shell)),
            ("tol_aubry", Some(t.tol_aubry)),
            ("tol_h", Some(t.tol_h)),
            ("tol_b", Some(t.tol_b)),
            ("cal_tol", Some(t.cal_tol)),
            ("match_tol", t.match_tol),
        ];
        for (name, value) in named {
            if let Some(v) = value {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Config(format!("tolerances.{name}: must be positive, got {v}")));
                }
            }
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt <= 0.5) {
                return Err(Error::Config(format!("dt: must lie in (0, 0.5], got {dt}")));
            }
        }
        if let Some(ds) = self.ds {
            if !(ds > 0.0) {
                return Err(Error::Config(format!("ds: must be positive, got {ds}")));
            }
        }
        if !self.tau.is_finite() {
            return Err(Error::Config(format!("tau: must be finite, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn load_system(&self) -> Result<MechanicalSystem> {
        let path = self.system.as_ref().ok_or_else(|| Error::Config("system: no system file given".into()))?;
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        MechanicalSystem::from_json_str(&text)
    }

    fn vector(values: &[f64], dim: usize, what: &str) -> Result<[f64; 2]> {
        match values.len() {
            0 => Ok([0.0, 0.0]),
            n if n == dim => Ok([values[0], if dim == 2 { values[1] } else { 0.0 }]),
            n => Err(Error::Config(format!("{what}: expected {dim} components, got {n}"))),
        }
    }

    pub fn class(&self, dim: usize) -> Result<Covector> {
        Ok(Covector(Self::vector(&self.c, dim, "c")?))
    }

    pub fn point(&self, dim: usize) -> Result<Point> {
        let at = self.at.as_ref().ok_or_else(|| Error::Config("at: this command needs a point".into()))?;
        if at.is_empty() {
            return Err(Error::Config("at: empty point".into()));
        }
        Self::vector(at, dim, "at")
    }
}

/// Comma-separated numbers given as one flag value.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatList(pub Vec<f64>);

fn parse_list(s: &str) -> std::result::Result<FloatList, String> {
    s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect::<std::result::Result<_, _>>().map(FloatList)
}

#[derive(Debug, Parser)]
#[command(name = "wkam", version, about = "Weak KAM solutions, singular sets and homoclinic orbits on the torus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: Options,
}

/// Flags shared by every command; they override the configuration file.
#[derive(Debug, Default, Args)]
pub struct Options {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// System definition (JSON).
    #[arg(long, global = true)]
    pub system: Option<PathBuf>,
    /// Cohomology class, comma separated.
    #[arg(long, global = true, value_parser = parse_list, allow_hyphen_values = true)]
    pub c: Option<FloatList>,
    /// Grid points per axis.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Solver time step.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// Step of generalized characteristics.
    #[arg(long, global = true)]
    pub ds: Option<f64>,
    /// Horizon of characteristics and flows (negative flows run backward).
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    /// Query point, comma separated.
    #[arg(long, alias = "from", global = true, value_parser = parse_list, allow_hyphen_values = true)]
    pub at: Option<FloatList>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long = "tol-fp", alias = "tol", global = true)]
    pub tol_fp: Option<f64>,
    #[arg(long = "tol-sing", global = true)]
    pub tol_sing: Option<f64>,
    #[arg(long = "tol-shell", global = true)]
    pub tol_shell: Option<f64>,
    #[arg(long = "tol-aubry", global = true)]
    pub tol_aubry: Option<f64>,
    #[arg(long = "tol-h", global = true)]
    pub tol_h: Option<f64>,
    #[arg(long = "tol-b", global = true)]
    pub tol_b: Option<f64>,
    #[arg(long = "cal-tol", alias = "tol-cal", global = true)]
    pub cal_tol: Option<f64>,
    #[arg(long = "match-tol", alias = "tol-match", global = true)]
    pub match_tol: Option<f64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Tabulate α(c) along the first axis.
    Alpha {
        /// `start:stop:count` values of c₁; the other component comes from --c.
        #[arg(long, allow_hyphen_values = true)]
        sweep: Option<String>,
    },
    /// Solve for α(c) and the weak KAM solution.
    Solve,
    /// Estimate the singular set of the lifted solution; with --at, also the
    /// superdifferential there.
    Singular,
    /// Follow a generalized characteristic from --at.
    Char,
    /// Integrate the Hamiltonian flow from (--at, --p).
    Flow {
        /// Initial momentum, comma separated.
        #[arg(long, value_parser = parse_list, allow_hyphen_values = true)]
        p: Option<FloatList>,
    },
    /// Aubry set, classes, Mather pseudometric and barrier function.
    Barrier,
    /// Homoclinic orbit glued at --at.
    Homoclinic {
        /// Aubry base point of the conjugate pair, comma separated.
        #[arg(long = "pair-base", value_parser = parse_list, allow_hyphen_values = true)]
        pair_base: Option<FloatList>,
    },
    /// Run the invariant suite.
    Validate,
}

impl Options {
    /// Configuration file (if any) overridden by the flags that were given.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.system {
            cfg.system = Some(v.clone());
        }
        if let Some(v) = &self.c {
            cfg.c = v.0.clone();
        }
        if let Some(v) = self.grid {
            cfg.grid = v;
        }
        if self.dt.is_some() {
            cfg.dt = self.dt;
        }
        if self.ds.is_some() {
            cfg.ds = self.ds;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = &self.at {
            cfg.at = Some(v.0.clone());
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        let t = &mut cfg.tolerances;
        for (slot, flag) in [
            (&mut t.tol_fp, self.tol_fp),
            (&mut t.tol_shell, self.tol_shell),
            (&mut t.tol_aubry, self.tol_aubry),
            (&mut t.tol_h, self.tol_h),
            (&mut t.tol_b, self.tol_b),
            (&mut t.cal_tol, self.cal_tol),
        ] {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        if self.tol_sing.is_some() {
            t.tol_sing = self.tol_sing;
        }
        if self.match_tol.is_some() {
            t.match_tol = self.match_tol;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome of a command: the files written and whether its checks held.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub passed: bool,
    pub summary: Value,
}

/// Exit status for an error: configuration and input problems, convergence
/// failures, and violated invariants or preconditions.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidSystem(_) | Error::Json(_) | Error::Io(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::NoConvergence { .. }
        | Error::BarrierNotConverged { .. }
        | Error::AlphaMismatch { .. }
        | Error::IntegratorAccuracy { .. } => EXIT_CONVERGENCE,
        _ => EXIT_INVARIANT,
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }
}

/// A solved system: the shared first stage of most commands.
struct Solved {
    sys: MechanicalSystem,
    grid: TorusGrid,
    c: Covector,
    scheme: Scheme,
    u: ScalarField,
    report: SolveReport,
}

impl Solved {
    fn new(cfg: &RunConfig, grid_n: usize) -> Result<Self> {
        let sys = cfg.load_system()?;
        let grid = TorusGrid::new(sys.dim(), grid_n)?;
        let c = cfg.class(sys.dim())?;
        Self::with(sys, grid, c, cfg)
    }

    fn with(sys: MechanicalSystem, grid: TorusGrid, c: Covector, cfg: &RunConfig) -> Result<Self> {
        let scheme = Scheme::for_system(&sys, c, &grid, cfg.dt, None)?;
        let settings = SolverSettings { tol_fp: cfg.tolerances.tol_fp, ..SolverSettings::default() };
        let (u, report) = solve_alpha_u(&sys, c, grid, &scheme, &settings)?;
        Ok(Solved { sys, grid, c, scheme, u, report })
    }

    fn params(&self, cfg: &RunConfig) -> EstimatorParams {
        let mut p = EstimatorParams::for_system(&self.sys, self.report.alpha, &self.grid);
        if let Some(t) = cfg.tolerances.tol_sing {
            p.tol_sing = t;
        }
        p
    }

    fn match_tol(&self, cfg: &RunConfig) -> f64 {
        cfg.tolerances.match_tol.unwrap_or_else(|| default_match_tol(&self.sys, self.report.alpha, &self.grid))
    }

    fn supercritical(&self) -> bool {
        check_energy_condition(self.report.alpha, &self.sys, &self.grid, 0.0)
    }

    fn header(&self) -> Value {
        json!({
            "system": self.sys.label,
            "dim": self.sys.dim(),
            "c": &self.c.0[..self.sys.dim()],
            "grid": self.grid.n(),
            "alpha": self.report.alpha,
            "solve": &self.report,
            "max_potential": self.sys.max_potential_on(&self.grid),
            "energy_condition": self.supercritical(),
        })
    }
}

fn pair_grid_size(dim: usize, n: usize) -> usize {
    if dim == 2 {
        n.min(MAX_PAIR_GRID_2D)
    } else {
        n
    }
}

/// Barrier stage on a (possibly coarser) solve.
fn barrier_stage(solved: &Solved, cfg: &RunConfig) -> Result<BarrierData> {
    let horizons = HorizonSettings { tol_h: cfg.tolerances.tol_h, ..HorizonSettings::default() };
    let h = peierls_barrier(&solved.sys, solved.c, solved.grid, solved.report.alpha, &solved.scheme, &horizons)?;
    let tols = BarrierTolerances { tol_aubry: cfg.tolerances.tol_aubry, tol_b: cfg.tolerances.tol_b, ..BarrierTolerances::default() };
    match barrier::detect_aubry_set(&h, &solved.sys, tols.tol_aubry, 0.0) {
        Ok(_) => barrier::analyze(&h, &tols),
        Err(e) => Err(e),
    }
}

fn cmd_alpha(cfg: &RunConfig, sweep: Option<&str>, out: &mut Outputs) -> Result<RunOutcome> {
    let sys = cfg.load_system()?;
    let grid = TorusGrid::new(sys.dim(), cfg.grid)?;
    let base = cfg.class(sys.dim())?;
    let values: Vec<f64> = match sweep {
        None => vec![base.0[0]],
        Some(s) => {
            let parts: Vec<&str> = s.split(':').collect();
            let bad = || Error::Config(format!("sweep: expected start:stop:count, got {s:?}"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
            let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
            let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            (0..n).map(|k| if n == 1 { a } else { a + (b - a) * k as f64 / (n - 1) as f64 }).collect()
        }
    };
    let mut rows = Vec::new();
    for c1 in values {
        let c = Covector([c1, base.0[1]]);
        let solved = Solved::with(sys.clone(), grid, c, cfg)?;
        rows.push((c, solved.report));
    }
    let two = sys.dim() == 2;
    out.write("alpha.csv", |w| {
        writeln!(w, "{}", if two { "c0,c1,alpha,iterations,residual" } else { "c,alpha,iterations,residual" })?;
        for (c, r) in &rows {
            if two {
                writeln!(w, "{},{},{},{},{}", c.0[0], c.0[1], r.alpha, r.iterations, r.residual)?;
            } else {
                writeln!(w, "{},{},{},{}", c.0[0], r.alpha, r.iterations, r.residual)?;
            }
        }
        Ok(())
    })?;
    let summary = json!({
        "system": sys.label,
        "grid": grid.n(),
        "rows": rows.iter().map(|(c, r)| json!({"c": &c.0[..sys.dim()], "alpha": r.alpha})).collect::<Vec<_>>(),
    });
    out.json("alpha.json", &summary)?;
    Ok(RunOutcome { files: Vec::new(), passed: true, summary })
}

fn cmd_solve(cfg: &RunConfig, out: &mut Outputs) -> Result<RunOutcome> {
    let solved = Solved::new(cfg, cfg.grid)?;
    out.write("u.csv", |w| solved.u.write_csv(w))?;
    let summary = solved.header();
    out.json("solve.json", &summary)?;
    Ok(RunOutcome { files: Vec::new(), passed: true, summary })
}

fn cmd_singular(cfg: &RunConfig, out: &mut Outputs) -> Result<RunOutcome> {
    let solved = Solved::new(cfg, cfg.grid)?;
    let v = lift_v(&solved.u, solved.c);
    let est = SuperdiffEstimator::new(&v, solved.params(cfg));
    let sing = est.singular_set();
    out.write("singular.csv", |w| sing.write_csv(w))?;
    let mut summary = solved.header();
    summary["singular_count"] = json!(sing.nodes.len());
    summary["tol_sing"] = json!(sing.tol);
    summary["estimator"] = json!(est.params());
    if cfg.at.is_some() {
        let x = cfg.point(solved.sys.dim())?;
        let dim = solved.sys.dim();
        let verts = |poly: &CovectorPolytope| -> Vec<Vec<f64>> { poly.vertices().iter().map(|p| p.0[..dim].to_vec()).collect() };
        let reach = est.reachable_gradients(x)?;
        let sup = est.superdifferential(x)?;
        let regularity = regularity_test(&sup, 0.0);
        let report = json!({
            "at": &x[..dim],
            "reachable_gradients": verts(&reach),
            "superdifferential": verts(&sup),
            "diameter": sup.diameter(),
            "regular": regularity.regular,
            "margin": regularity.margin,
        });
        out.json("superdiff.json", &report)?;
        summary["superdiff"] = report;
    }
    out.json("singular.json", &summary)?;
    Ok(RunOutcome { files: Vec::new(), passed: true, summary })
}

fn cmd_char(cfg: &RunConfig, out: &mut Outputs) -> Result<RunOutcome> {
    let solved = Solved::new(cfg, cfg.grid)?;
    let x0 = cfg.point(solved.sys.dim())?;
    let v = lift_v(&solved.u, solved.c);
    let params = solved.params(cfg);
    let est = SuperdiffEstimator::new(&v, params);
    let chi = integrate_generalized(&est, &solved.sys, x0, cfg.tau, cfg.ds)?;
    out.write("char.csv", |w| chi.write_csv(w, solved.sys.dim()))?;
    let mono = monotonicity_check(&chi, &solved.sys);
    let persistence = singular_persistence_check(&chi, params.tol_sing).ok();
    let mut summary = solved.header();
    summary["from"] = json!(&x0[..solved.sys.dim()]);
    summary["tau"] = json!(cfg.tau);
    summary["ds"] = json!(chi.ds);
    summary["stalled_at"] = json!(chi.stalled_at);
    summary["excursion"] = json!(chi.excursion());
    summary["monotonicity"] = json!(mono);
    summary["singular_fraction"] = json!(persistence);
    out.json("char.json", &summary)?;
    Ok(RunOutcome { files: Vec::new(), passed: true, summary })
}

fn cmd_flow(cfg: &RunConfig, p: &[f64], out: &mut Outputs) -> Result<RunOutcome> {
    let sys = cfg.load_system()?;
    let x0 = cfg.point(sys.dim())?;
    if p.is_empty() {
        return Err(Error::Config("p: the flow needs an initial momentum".into()));
    }
    let p0 = Covector(RunConfig::vector(p, sys.dim(), "p")?);
    let traj = hamiltonian_flow(&sys, x0, p0, cfg.tau, &FlowSettings::default())?;
    out.write("flow.csv", |w| traj.write_csv(w, &sys))?;
    let (x1, p1) = traj.last();
    let summary = json!({
        "system": sys.label,
        "from": &x0[..sys.dim()],
        "p0": &p0.0[..sys.dim()],
        "t_end": cfg.tau,
        "to": &x1[..sys.dim()],
        "p_end": &p1.0[..sys.dim()],
        "energy": traj.energy,
        "energy_drift": traj.energy_drift,
        "max_step_error": traj.max_step_error,
    });
    out.json("flow.json", &summary)?;
    Ok(RunOutcome { files: Vec::new(), passed: true, summary })
}

fn barrier_files(data: &BarrierData, grid: &TorusGrid, out: &mut Outputs) -> Result<()> {
    out.write("barrier.csv", |w| data.barrier.write_csv(w))?;
    let coords =
        |nodes: &[usize]| -> Vec<Value> { nodes.iter().map(|&i| json!({"index": i, "x": &grid.coord(i)[..grid.dim()]})).collect() };
    let aubry: Vec<Value> = data
        .aubry_nodes
        .iter()
        .zip(&data.aubry_values)
        .map(|(&i, &hxx)| json!({"index": i, "x": &grid.coord(i)[..grid.dim()], "h_xx": hxx}))
        .collect();
    out.json("aubry.json", &json!(aubry))?;
    let classes: Vec<Value> = data.classes.iter().map(|c| json!(coords(c))).collect();
    out.json("classes.json", &json!(classes))?;
    out.write("pseudometric.csv", |w| {
        let k = data.aubry_nodes.len();
        let head: Vec<String> = data.aubry_nodes.iter().map(|i| i.to_string()).collect();
        writeln!(w, "index,{}", head.join(","))?;
        for (a, &i) in data.aubry_nodes.iter().enumerate() {
            let row: Vec<String> = data.pseudometric[a * k..(a + 1) * k].iter().map(|d| d.to_string()).collect();
            writeln!(w, "{i},{}", row.join(","))?;
        }
        Ok(())
    })
}

fn cmd_barrier(cfg: &RunConfig, out: &mut Outputs) -> Result<RunOutcome> {
    let sys = cfg.load_system()?;
    let solved = Solved::new(cfg, pair_grid_size(sys.dim(), cfg.grid))?;
    let data = barrier_stage(&solved, cfg)?;
    barrier_files(&data, &solved.grid, out)?;
    let passed = data.check(cfg.tolerances.tol_b).is_ok();
    let mut summary = solved.header();
    summary["barrier"] = json!(data.report());
    summary["invariants_hold"] = json!(passed);
    out.json("barrier.json", &summary)?;
    Ok(RunOutcome { files: Vec::new(), passed, summary })
}

fn cmd_homoclinic(cfg: &RunConfig, pair_base: Option<&[f64]>, out: &mut Outputs) -> Result<RunOutcome> {
    let sys = cfg.load_system()?;
    let solved = Solved::new(cfg, pair_grid_size(sys.dim(), cfg.grid))?;
    let x = cfg.point(sys.dim())?;
    let horizons = HorizonSettings { tol_h: cfg.tolerances.tol_h, ..HorizonSettings::default() };
    let h = peierls_barrier(&solved.sys, solved.c, solved.grid, solved.report.alpha, &solved.scheme, &horizons)?;
    let aubry = barrier::detect_aubry_set(&h, &solved.sys, cfg.tolerances.tol_aubry, 0.0)?;
    let base = match pair_base {
        Some(y) => solved.grid.nearest_node(RunConfig::vector(y, sys.dim(), "pair-base")?),
        None => aubry[0],
    };
    let pair = barrier::conjugate_pair(&h, base)?;
    let params = solved.params(cfg);
    let match_tol = solved.match_tol(cfg);
    let (p, source) = match common_reachable_gradient(&pair.minus, &pair.plus, x, params, match_tol)? {
        Some(p) => (p, "common_reachable_gradient"),
        None => {
            let v = lift_v(&pair.minus, solved.c);
            match antipodal_detection(&v, x, params, match_tol)? {
                Some((p1, _)) => (p1 - solved.c, "antipodal_pair"),
                None => return Err(Error::Precondition("no common reachable gradient or antipodal pair at the glue point".into())),
            }
        }
    };
    let settings =
        HomoclinicSettings { cal_tol: cfg.tolerances.cal_tol, tol_shell: cfg.tolerances.tol_shell, ..HomoclinicSettings::default() };
    let orbit = settle_homoclinic(&sys, &pair.minus, &pair.plus, x, p, &aubry, &settings)?;
    out.write("orbit.csv", |w| orbit.write_csv(w, &sys))?;
    let settled = orbit.settled(settings.settle_tol);
    let mut summary = solved.header();
    summary["hypothesis"] = json!(if solved.supercritical() { "supercritical" } else { "critical" });
    summary["pair_base"] = json!(&solved.grid.coord(base)[..sys.dim()]);
    summary["glue_point"] = json!(&x[..sys.dim()]);
    summary["p"] = json!(&p.0[..sys.dim()]);
    summary["p_source"] = json!(source);
    summary["momentum"] = json!(&orbit.momentum.0[..sys.dim()]);
    summary["horizon"] = json!(orbit.horizon);
    summary["backward_defect"] = json!(orbit.backward_defect);
    summary["forward_defect"] = json!(orbit.forward_defect);
    summary["energy_drift"] = json!(orbit.energy_drift);
    summary["gluing_defect"] = json!(orbit.gluing_defect);
    summary["endpoint_distances"] = json!(orbit.endpoint_distances);
    summary["settled"] = json!(settled);
    out.json("homoclinic.json", &summary)?;
    Ok(RunOutcome { files: Vec::new(), passed: settled, summary })
}

/// One line of the invariant suite.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
    pub detail: String,
}

impl Check {
    fn upper(name: &str, value: f64, bound: f64, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed: value <= bound, value, bound, detail: detail.into() }
    }

    fn failed(name: &str, err: &Error) -> Self {
        Check { name: name.into(), passed: false, value: f64::NAN, bound: f64::NAN, detail: format!("[{}] {err}", err.module()) }
    }
}

/// Evenly strided sample of `count` nodes.
fn sample_nodes(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    (0..count).map(|k| k * len / count).collect()
}

/// The invariant suite on the configured system.
pub fn validate_checks(cfg: &RunConfig) -> Result<(Vec<Check>, Value)> {
    let solved = Solved::new(cfg, cfg.grid)?;
    let (sys, grid, c, alpha) = (&solved.sys, solved.grid, solved.c, solved.report.alpha);
    let tol = &cfg.tolerances;
    let mut checks = Vec::new();

    let k = CostMatrix::one_step(sys, c, grid, &solved.scheme)?;
    let res = fixed_point_residual(&solved.u, &k, alpha)?;
    checks.push(Check::upper("fixed_point_residual", res, 5.0 * tol.tol_fp, "‖T u + αΔ − u‖∞"));

    let settings = SolverSettings { tol_fp: tol.tol_fp, ..SolverSettings::default() };
    match solve_forward(sys, c, grid, &solved.scheme, &settings, Some(alpha)) {
        Ok((_, r)) => checks.push(Check::upper("forward_alpha", (r.alpha - alpha).abs(), 2.0 * tol.tol_fp / solved.scheme.dt, "|α⁺ − α⁻|")),
        Err(e) => checks.push(Check::failed("forward_alpha", &e)),
    }

    let v = lift_v(&solved.u, c);
    let params = solved.params(cfg);
    let est = SuperdiffEstimator::new(&v, params);
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for i in sample_nodes(grid.len(), SHELL_SAMPLES) {
        match est.reachable_gradients(grid.coord(i)) {
            Ok(poly) => {
                for p in poly.vertices() {
                    worst = worst.max(crate::semiconcave::energy_shell_residual(sys, alpha, grid.coord(i), *p));
                }
            }
            Err(e) => failure = Some(e),
        }
    }
    match failure {
        None => checks.push(Check::upper("energy_shell", worst, tol.tol_shell, "max |⟨Ap,p⟩ − 2(α − V)| over sampled vertices")),
        Some(e) => checks.push(Check::failed("energy_shell", &e)),
    }

    let sing = est.singular_set();
    if let Some(&start) = sing.nodes.first() {
        match integrate_generalized(&est, sys, grid.coord(start), cfg.tau, cfg.ds) {
            Ok(chi) => {
                let m = monotonicity_check(&chi, sys);
                checks.push(Check::upper("characteristic_monotonicity", m.worst_defect, tol.tol_shell, "max ⟨p,Ap⟩ − dv/ds"));
            }
            Err(e) => checks.push(Check::failed("characteristic_monotonicity", &e)),
        }
    }

    if !solved.supercritical() {
        let coarse;
        let pair_solved = if pair_grid_size(sys.dim(), cfg.grid) == cfg.grid {
            &solved
        } else {
            coarse = Solved::new(cfg, pair_grid_size(sys.dim(), cfg.grid))?;
            &coarse
        };
        match barrier_stage(pair_solved, cfg) {
            Ok(data) => {
                let r = data.report();
                checks.push(Check::upper("barrier_nonnegative", -r.min_barrier, tol.tol_b, "−min B*"));
                checks.push(Check::upper("barrier_on_aubry", r.barrier_on_aubry, tol.tol_b, "max B* on the Aubry set"));
                checks.push(Check::upper("pseudometric_nonnegative", -r.min_pseudometric, 2.0 * tol.tol_h, "−min d_c"));
                if let Some(pair) = &data.pair {
                    let k = CostMatrix::one_step(&pair_solved.sys, pair_solved.c, pair_solved.grid, &pair_solved.scheme)?;
                    let res = barrier::pair_residual(pair, &k)?;
                    checks.push(Check::upper("pair_residual", res, 5.0 * tol.tol_fp, "‖T u⁻ + αΔ − u⁻‖∞"));
                    checks.push(Check::upper("barrier_pair_gap", r.pair_gap.unwrap_or(0.0), tol.tol_b, "‖B* − (u⁻ − u⁺)‖∞"));
                }
            }
            Err(e) => checks.push(Check::failed("barrier", &e)),
        }
    }
    Ok((checks, solved.header()))
}

fn cmd_validate(cfg: &RunConfig, out: &mut Outputs) -> Result<RunOutcome> {
    let (checks, mut summary) = validate_checks(cfg)?;
    let passed = checks.iter().all(|c| c.passed);
    summary["checks"] = json!(checks);
    summary["passed"] = json!(passed);
    out.json("validate.json", &summary)?;
    Ok(RunOutcome { files: Vec::new(), passed, summary })
}

/// Runs one command and writes its files into `cfg.out`.
pub fn run(command: &Command, cfg: &RunConfig) -> Result<RunOutcome> {
    let mut out = Outputs::new(&cfg.out)?;
    let mut outcome = match command {
        Command::Alpha { sweep } => cmd_alpha(cfg, sweep.as_deref(), &mut out),
        Command::Solve => cmd_solve(cfg, &mut out),
        Command::Singular => cmd_singular(cfg, &mut out),
        Command::Char => cmd_char(cfg, &mut out),
        Command::Flow { p } => cmd_flow(cfg, p.as_ref().map_or(&[][..], |l| &l.0[..]), &mut out),
        Command::Barrier => cmd_barrier(cfg, &mut out),
        Command::Homoclinic { pair_base } => cmd_homoclinic(cfg, pair_base.as_ref().map(|l| &l.0[..]), &mut out),
        Command::Validate => cmd_validate(cfg, &mut out),
    }?;
    outcome.files = out.files;
    Ok(outcome)
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cfg = match cli.options.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            return exit_code(&e);
        }
    };
    match run(&cli.command, &cfg) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
            if outcome.passed {
                EXIT_OK
            } else {
                eprintln!("error [cli]: invariant violated, see the report in {}", cfg.out.display());
                EXIT_INVARIANT
            }
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_name_the_field() {
        let err = RunConfig::from_toml_str("grid = 128\n[tolerances]\ntol_fp = \"x\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tol_fp") && msg.contains("line 3"), "{msg}");
        let err = RunConfig::from_toml_str("grd = 128\n").unwrap_err().to_string();
        assert!(err.contains("grd"), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.grid = 100;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.grid = 1024;
        assert!(cfg.validate().is_err());
        cfg.grid = 64;
        cfg.tolerances.tol_b = 0.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("tol_b"));
        cfg.tolerances.tol_b = 0.1;
        cfg.tolerances.match_tol = Some(-1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let cli = Cli::try_parse_from(["wkam", "solve", "--c", "0.5,-0.25", "--grid", "64", "--tol-h", "1e-5"]).unwrap();
        let cfg = cli.options.resolve().unwrap();
        assert_eq!(cfg.c, vec![0.5, -0.25]);
        assert_eq!(cfg.grid, 64);
        assert_eq!(cfg.tolerances.tol_h, 1e-5);
        assert_eq!(cfg.class(2).unwrap(), Covector::new(0.5, -0.25));
        assert!(cfg.class(1).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::NoConvergence { iterations: 1, oscillation: 1.0 }), EXIT_CONVERGENCE);
        assert_eq!(exit_code(&Error::EmptyAubrySet), EXIT_INVARIANT);
    }
}
