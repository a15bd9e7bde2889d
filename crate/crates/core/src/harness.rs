//! Built-in benchmark problems, experiment configs and convergence tables.
//!
//! Config files are plain `key = value` lines; `#` starts a comment and
//! lists are comma separated. Mesh sizes are given as exponents `k` of
//! `2^-k` on the unit box.
//!
//! ```text
//! problem    = plane_wave_2d      # plane_wave_2d | scatterers_2d | plane_wave_3d | custom
//! kappa      = 16                 # number or 2^k
//! coarse     = 3, 4, 5, 6         # H = 2^-k
//! fine       = 8                  # h = 2^-k
//! m          = 1, 2
//! methods    = mspgfem, fem_coarse, bestapprox
//! quadrature = 5
//! output     = results/plane_wave # writes <output>.csv and <output>.json
//! seed       = 1
//! cache      = cache_dir          # optional corrector cache directory
//! dim        = 2                  # custom problem only
//! source     = 1.0                # custom problem only, constant f
//! ```

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use num_complex::Complex64;
use serde::Serialize;

use crate::assembly::{
    assemble_global, v_norm_error, CoarseField, ExactSolution, FieldOn, ProblemData,
    DEFAULT_QUADRATURE,
};
use crate::corrector::{build_cache, CorrectorCache, Oversampling};
use crate::error::{Error, Result};
use crate::grid::{build_mesh, classify_patches, free_nodes, BoundaryTag, BoxDomain};
use crate::interpolation::MeshPair;
use crate::solver::{
    best_approximation, best_approximation_of_fine, solve_mspgfem, solve_standard_fem, PgOptions,
};

/// Propagation direction of the 2D plane wave.
pub const PLANE_WAVE_2D_DIRECTION: [f64; 2] = [0.6, 0.8];

/// Propagation direction of the 3D plane wave before normalization.
pub const PLANE_WAVE_3D_DIRECTION: [f64; 3] = [2.0, 3.0, 5.0];

/// Scatterer boxes of the 2D multiple-scattering domain, in units of 1/16.
pub const SCATTERER_HOLES: [([f64; 2], [f64; 2]); 3] = [
    ([5.0, 5.0], [7.0, 7.0]),
    ([10.0, 8.0], [12.0, 10.0]),
    ([4.0, 10.0], [6.0, 13.0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemName {
    PlaneWave2d,
    Scatterers2d,
    PlaneWave3d,
    Custom,
}

impl FromStr for ProblemName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane_wave_2d" => Ok(Self::PlaneWave2d),
            "scatterers_2d" => Ok(Self::Scatterers2d),
            "plane_wave_3d" => Ok(Self::PlaneWave3d),
            "custom" => Ok(Self::Custom),
            other => Err(Error::UnknownProblem(other.to_string())),
        }
    }
}

impl fmt::Display for ProblemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PlaneWave2d => "plane_wave_2d",
            Self::Scatterers2d => "scatterers_2d",
            Self::PlaneWave3d => "plane_wave_3d",
            Self::Custom => "custom",
        })
    }
}

/// Domain and data of a benchmark problem.
#[derive(Debug, Clone)]
pub struct BuiltinProblem {
    pub name: ProblemName,
    pub domain: BoxDomain,
    pub data: ProblemData,
}

/// `u(x) = exp(−iκ x·d)` with its gradient `−iκ d u`.
pub fn plane_wave(direction: &[f64], kappa: f64) -> ExactSolution {
    let mut d = [0.0; 3];
    d[..direction.len()].copy_from_slice(direction);
    let value = move |x: &[f64; 3]| {
        let phase = -kappa * (x[0] * d[0] + x[1] * d[1] + x[2] * d[2]);
        Complex64::from_polar(1.0, phase)
    };
    ExactSolution {
        value: Arc::new(value),
        gradient: Some(Arc::new(move |x: &[f64; 3]| {
            let u = value(x);
            let f = Complex64::new(0.0, -kappa) * u;
            [f * d[0], f * d[1], f * d[2]]
        })),
    }
}

/// Boundary datum `∂_ν u − iκu` for which `u` solves
/// `a(u, v) = (g, v)_{Γ_R}` with `a` containing `−iκ(u, v)_{Γ_R}`.
pub fn plane_wave_robin(direction: &[f64], kappa: f64) -> crate::assembly::BoundaryFn {
    let u = plane_wave(direction, kappa);
    let grad = u.gradient.clone().expect("plane wave has a gradient");
    Arc::new(move |x, n| {
        let g = grad(x);
        let dn = g[0] * n[0] + g[1] * n[1] + g[2] * n[2];
        dn - Complex64::new(0.0, kappa) * (u.value)(x)
    })
}

/// Incident-wave datum `iκ u_in + ∂_ν u_in` on the outer boundary.
pub fn incident_robin(direction: &[f64], kappa: f64) -> crate::assembly::BoundaryFn {
    let u = plane_wave(direction, kappa);
    let grad = u.gradient.clone().expect("plane wave has a gradient");
    Arc::new(move |x, n| {
        let g = grad(x);
        let dn = g[0] * n[0] + g[1] * n[1] + g[2] * n[2];
        Complex64::new(0.0, kappa) * (u.value)(x) + dn
    })
}

pub fn scatterer_domain() -> BoxDomain {
    SCATTERER_HOLES
        .iter()
        .try_fold(BoxDomain::unit(2), |d, (lo, hi)| {
            d.with_hole(&[lo[0] / 16.0, lo[1] / 16.0], &[hi[0] / 16.0, hi[1] / 16.0])
        })
        .expect("scatterer holes are valid")
}

pub fn unit_direction_3d() -> [f64; 3] {
    let n = PLANE_WAVE_3D_DIRECTION.iter().map(|x| x * x).sum::<f64>().sqrt();
    PLANE_WAVE_3D_DIRECTION.map(|x| x / n)
}

/// Domain and data of a named benchmark. `custom` is a pure-Robin unit
/// square with unit source and no exact solution.
pub fn builtin_problem(name: &str, kappa: f64) -> Result<BuiltinProblem> {
    let name: ProblemName = name.parse()?;
    Ok(match name {
        ProblemName::PlaneWave2d => BuiltinProblem {
            name,
            domain: BoxDomain::unit(2),
            data: ProblemData {
                source: None,
                robin: Some(plane_wave_robin(&PLANE_WAVE_2D_DIRECTION, kappa)),
                exact: Some(plane_wave(&PLANE_WAVE_2D_DIRECTION, kappa)),
            },
        },
        ProblemName::PlaneWave3d => {
            let d = unit_direction_3d();
            BuiltinProblem {
                name,
                domain: BoxDomain::unit(3),
                data: ProblemData {
                    source: None,
                    robin: Some(plane_wave_robin(&d, kappa)),
                    exact: Some(plane_wave(&d, kappa)),
                },
            }
        }
        ProblemName::Scatterers2d => BuiltinProblem {
            name,
            domain: scatterer_domain(),
            data: ProblemData {
                source: None,
                robin: Some(incident_robin(&PLANE_WAVE_2D_DIRECTION, kappa)),
                exact: None,
            },
        },
        ProblemName::Custom => custom_problem(2, 1.0),
    })
}

fn custom_problem(dim: usize, source: f64) -> BuiltinProblem {
    BuiltinProblem {
        name: ProblemName::Custom,
        domain: BoxDomain::unit(dim).with_all_outer(BoundaryTag::Robin),
        data: ProblemData {
            source: Some(Arc::new(move |_| Complex64::new(source, 0.0))),
            robin: None,
            exact: None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mspgfem,
    FemCoarse,
    Bestapprox,
    /// Use the fine-grid FEM solution as the error reference even when an
    /// exact solution exists. Produces no rows of its own.
    FemFineReference,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mspgfem" => Ok(Self::Mspgfem),
            "fem_coarse" => Ok(Self::FemCoarse),
            "bestapprox" => Ok(Self::Bestapprox),
            "fem_fine_reference" => Ok(Self::FemFineReference),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mspgfem => "mspgfem",
            Self::FemCoarse => "fem_coarse",
            Self::Bestapprox => "bestapprox",
            Self::FemFineReference => "fem_fine_reference",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub problem: ProblemName,
    pub kappa: f64,
    /// Exponents `k` of the coarse mesh sizes `H = 2^-k`.
    pub coarse_levels: Vec<u32>,
    /// Exponent of the fine mesh size `h = 2^-k`.
    pub fine_level: u32,
    pub m_list: Vec<usize>,
    pub methods: Vec<Method>,
    pub quadrature: usize,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    /// Dimension of the `custom` problem.
    pub dim: usize,
    /// Constant source of the `custom` problem.
    pub source: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemName::PlaneWave2d,
            kappa: 16.0,
            coarse_levels: vec![3, 4, 5],
            fine_level: 7,
            m_list: vec![2],
            methods: vec![Method::Mspgfem, Method::FemCoarse, Method::Bestapprox],
            quadrature: DEFAULT_QUADRATURE,
            output: None,
            seed: 0,
            cache_dir: None,
            dim: 2,
            source: 1.0,
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub kappa: Option<f64>,
    pub m: Option<Vec<usize>>,
    pub coarse: Option<Vec<u32>>,
    pub fine: Option<u32>,
    pub problem: Option<ProblemName>,
    pub output: Option<PathBuf>,
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

/// Parses a number or a power of two written `2^k`.
pub fn parse_kappa(value: &str) -> std::result::Result<f64, String> {
    let v = value.trim();
    let k = if let Some(e) = v.strip_prefix("2^") {
        e.trim()
            .parse::<i32>()
            .map(|e| 2f64.powi(e))
            .map_err(|e| format!("`{v}`: {e}"))?
    } else {
        v.parse::<f64>().map_err(|e| format!("`{v}`: {e}"))?
    };
    if !(k.is_finite() && k >= 0.0) {
        return Err(format!("wave number must be finite and non-negative, got {v}"));
    }
    Ok(k)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line, msg };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "problem" => cfg.problem = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "kappa" => cfg.kappa = parse_kappa(value).map_err(err)?,
                "coarse" => cfg.coarse_levels = parse_list(value).map_err(err)?,
                "fine" => cfg.fine_level = value.parse().map_err(|e| err(format!("`{value}`: {e}")))?,
                "m" => cfg.m_list = parse_list(value).map_err(err)?,
                "methods" => cfg.methods = parse_list(value).map_err(err)?,
                "quadrature" => {
                    cfg.quadrature = value.parse().map_err(|e| err(format!("`{value}`: {e}")))?
                }
                "output" => cfg.output = Some(PathBuf::from(value)),
                "seed" => cfg.seed = value.parse().map_err(|e| err(format!("`{value}`: {e}")))?,
                "cache" => cfg.cache_dir = Some(PathBuf::from(value)),
                "dim" => cfg.dim = value.parse().map_err(|e| err(format!("`{value}`: {e}")))?,
                "source" => cfg.source = value.parse().map_err(|e| err(format!("`{value}`: {e}")))?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(k) = o.kappa {
            self.kappa = k;
        }
        if let Some(m) = &o.m {
            self.m_list = m.clone();
        }
        if let Some(c) = &o.coarse {
            self.coarse_levels = c.clone();
        }
        if let Some(f) = o.fine {
            self.fine_level = f;
        }
        if let Some(p) = o.problem {
            self.problem = p;
        }
        if let Some(out) = &o.output {
            self.output = Some(out.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if self.coarse_levels.is_empty() {
            return bad("no coarse levels".into());
        }
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if self.methods.contains(&Method::Mspgfem) && self.m_list.is_empty() {
            return bad("mspgfem requires at least one m".into());
        }
        if self.m_list.contains(&0) {
            return bad("m must be at least 1".into());
        }
        let max = *self.coarse_levels.iter().max().expect("non-empty");
        if self.fine_level < max {
            return bad(format!("fine level {} is coarser than H = 2^-{max}", self.fine_level));
        }
        if self.fine_level > 24 {
            return bad(format!("fine level {} is too large", self.fine_level));
        }
        if self.problem == ProblemName::Scatterers2d && self.coarse_levels.iter().any(|&k| k < 4) {
            return bad("scatterers_2d needs coarse levels of at least 4 (n ≥ 16)".into());
        }
        if self.problem == ProblemName::Custom && !(1..=3).contains(&self.dim) {
            return bad(format!("dimension {} not in 1..=3", self.dim));
        }
        if self.quadrature == 0 {
            return bad("quadrature order must be positive".into());
        }
        Ok(())
    }

    pub fn problem_setup(&self) -> Result<BuiltinProblem> {
        match self.problem {
            ProblemName::Custom => Ok(custom_problem(self.dim, self.source)),
            p => builtin_problem(&p.to_string(), self.kappa),
        }
    }
}

/// One line of a convergence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub kappa: f64,
    #[serde(rename = "H")]
    pub coarse_h: f64,
    pub h: f64,
    pub m: Option<usize>,
    pub method: Method,
    pub error_v: Option<f64>,
    pub dofs_coarse: usize,
    pub dofs_fine: usize,
    pub n_classes: Option<usize>,
    pub wall_time: f64,
    pub failure: Option<String>,
}

impl ConvergenceRow {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

pub const CSV_HEADER: &str = "kappa,H,h,m,method,error_V,dofs_coarse,dofs_fine,n_classes,status";

fn opt<T: fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map_or(String::new(), T::to_string)
}

/// CSV without timings, so that identical configs give identical files.
pub fn write_csv<W: Write>(rows: &[ConvergenceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        let status = match &r.failure {
            None => "ok".to_string(),
            Some(msg) => format!("\"failed: {}\"", msg.replace('"', "'")),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.kappa,
            r.coarse_h,
            r.h,
            opt(&r.m),
            r.method,
            r.error_v.map_or(String::new(), |e| format!("{e:e}")),
            r.dofs_coarse,
            r.dofs_fine,
            opt(&r.n_classes),
            status
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct JsonReport<'a> {
    config: &'a ExperimentConfig,
    rows: &'a [ConvergenceRow],
}

pub fn write_json<W: Write>(config: &ExperimentConfig, rows: &[ConvergenceRow], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, &JsonReport { config, rows })?;
    Ok(())
}

/// Writes `<output>.csv` and `<output>.json`.
pub fn write_outputs(config: &ExperimentConfig, rows: &[ConvergenceRow], output: &Path) -> Result<()> {
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let csv = std::fs::File::create(output.with_extension("csv"))?;
    write_csv(rows, std::io::BufWriter::new(csv))?;
    let json = std::fs::File::create(output.with_extension("json"))?;
    write_json(config, rows, std::io::BufWriter::new(json))
}

fn cache_path(dir: &Path, pair: &MeshPair, m: usize, kappa: f64) -> PathBuf {
    let key = crate::corrector::CacheKey::of(pair, m, kappa);
    dir.join(format!(
        "corr_{:016x}_{}_{}_{:016x}_{}.bin",
        key.domain,
        key.cells_per_axis[0],
        key.levels,
        key.kappa.to_bits(),
        key.m
    ))
}

fn load_or_build_cache(
    dir: Option<&Path>,
    pair: &MeshPair,
    m: usize,
    kappa: f64,
) -> Result<CorrectorCache> {
    if let Some(dir) = dir {
        let path = cache_path(dir, pair, m, kappa);
        if let Ok(f) = std::fs::File::open(&path) {
            match CorrectorCache::read_from(std::io::BufReader::new(f), pair, m, kappa) {
                Ok(c) => {
                    info!("loaded corrector cache {}", path.display());
                    return Ok(c);
                }
                Err(e) => warn!("ignoring cache {}: {e}", path.display()),
            }
        }
        let cache = build_cache(pair, m, kappa, true)?;
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(&path)?;
        cache.write_to(std::io::BufWriter::new(f))?;
        return Ok(cache);
    }
    build_cache(pair, m, kappa, true)
}

/// Per-level state built on demand.
struct Level<'a> {
    config: &'a ExperimentConfig,
    problem: &'a BuiltinProblem,
    k: u32,
    pair: Option<MeshPair>,
    reference: Option<Vec<Complex64>>,
}

impl<'a> Level<'a> {
    fn n(&self) -> usize {
        1usize << self.k
    }

    fn coarse_mesh(&self) -> Result<crate::grid::StructuredMesh> {
        let dim = self.problem.domain.dim;
        build_mesh(&self.problem.domain, &vec![self.n(); dim])
    }

    fn pair(&mut self) -> Result<&MeshPair> {
        if self.pair.is_none() {
            let levels = (self.config.fine_level - self.k) as usize;
            self.pair = Some(MeshPair::new(self.coarse_mesh()?, levels)?);
        }
        Ok(self.pair.as_ref().expect("just built"))
    }

    fn uses_reference(&self) -> bool {
        self.problem.data.exact.is_none() || self.config.methods.contains(&Method::FemFineReference)
    }

    fn reference(&mut self) -> Result<&[Complex64]> {
        if self.reference.is_none() {
            let kappa = self.config.kappa;
            let q = self.config.quadrature;
            let data = self.problem.data.clone();
            let pair = self.pair()?;
            let u = solve_standard_fem(pair.fine(), &pair.fine_dofs, kappa, &data, q)?;
            self.reference = Some(u);
        }
        Ok(self.reference.as_deref().expect("just built"))
    }

    /// `‖u − u_H‖_V` for a coarse field.
    fn coarse_error(&mut self, u: &CoarseField) -> Result<(f64, usize, usize)> {
        let kappa = self.config.kappa;
        let q = self.config.quadrature;
        if self.uses_reference() {
            self.reference()?;
            let pair = self.pair.as_ref().expect("built with the reference");
            let r = self.reference.as_ref().expect("just built");
            let diff: Vec<Complex64> = pair.prolong(u).iter().zip(r).map(|(a, b)| a - b).collect();
            let e = crate::assembly::v_norm(pair.fine(), &pair.fine_dofs, kappa, &diff);
            return Ok((e, pair.coarse_dofs.len(), pair.fine_dofs.len()));
        }
        let exact = self.problem.data.exact.as_ref().expect("checked above");
        let dofs_fine = self.pair.as_ref().map_or(0, |p| p.fine_dofs.len());
        let mesh = match &self.pair {
            Some(p) => p.coarse.clone(),
            None => self.coarse_mesh()?,
        };
        let dofs = free_nodes(&mesh);
        let e = v_norm_error(&mesh, &dofs, kappa, exact, FieldOn::Fine(u), q)?;
        Ok((e, dofs.len(), dofs_fine))
    }
}

/// Runs every `(H, m, method)` combination of `config`. Methods that do not
/// depend on `m` give one row per `H` with an empty `m`. Failures are
/// recorded in the row and the run continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ConvergenceRow>> {
    config.validate()?;
    let problem = config.problem_setup()?;
    let kappa = config.kappa;
    let h = 2f64.powi(-(config.fine_level as i32));
    let mut levels: Vec<u32> = config.coarse_levels.clone();
    levels.sort_unstable_by(|a, b| b.cmp(a));
    levels.dedup();
    levels.reverse();
    let mut methods: Vec<Method> = config
        .methods
        .iter()
        .copied()
        .filter(|m| *m != Method::FemFineReference)
        .collect();
    methods.sort_unstable();
    methods.dedup();
    let mut ms = config.m_list.clone();
    ms.sort_unstable();
    ms.dedup();

    let mut rows = Vec::new();
    for &k in &levels {
        let mut level = Level {
            config,
            problem: &problem,
            k,
            pair: None,
            reference: None,
        };
        let coarse_h = 2f64.powi(-(k as i32));
        for &method in &methods {
            let row_ms: Vec<Option<usize>> = if method == Method::Mspgfem {
                ms.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for m in row_ms {
                let start = Instant::now();
                let result = run_row(&mut level, method, m);
                let wall_time = start.elapsed().as_secs_f64();
                let row = match result {
                    Ok((error, dofs_coarse, dofs_fine, n_classes)) => ConvergenceRow {
                        kappa,
                        coarse_h,
                        h,
                        m,
                        method,
                        error_v: Some(error),
                        dofs_coarse,
                        dofs_fine,
                        n_classes,
                        wall_time,
                        failure: None,
                    },
                    Err(e) => {
                        warn!("H = 2^-{k}, m = {m:?}, {method}: {e}");
                        ConvergenceRow {
                            kappa,
                            coarse_h,
                            h,
                            m,
                            method,
                            error_v: None,
                            dofs_coarse: 0,
                            dofs_fine: 0,
                            n_classes: None,
                            wall_time,
                            failure: Some(e.to_string()),
                        }
                    }
                };
                info!(
                    "H = 2^-{k} m = {} {method}: {}",
                    opt(&m),
                    row.error_v.map_or("failed".to_string(), |e| format!("{e:.4e}"))
                );
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

type RowResult = Result<(f64, usize, usize, Option<usize>)>;

fn run_row(level: &mut Level<'_>, method: Method, m: Option<usize>) -> RowResult {
    let kappa = level.config.kappa;
    let q = level.config.quadrature;
    match method {
        Method::Mspgfem => {
            let m = m.expect("mspgfem rows carry m");
            let cache_dir = level.config.cache_dir.clone();
            let data = level.problem.data.clone();
            let pair = level.pair()?;
            let cache = load_or_build_cache(cache_dir.as_deref(), pair, m, kappa)?;
            let options = PgOptions {
                quadrature: q,
                cache: Some(&cache),
                ..PgOptions::default()
            };
            let sol = solve_mspgfem(pair, kappa, Oversampling::Layers(m), &data, options)?;
            let n_classes = sol.diagnostics.n_classes;
            let (e, nc, nf) = level.coarse_error(&sol.u)?;
            Ok((e, nc, nf, Some(n_classes)))
        }
        Method::FemCoarse => {
            let mesh = level.coarse_mesh()?;
            let dofs = free_nodes(&mesh);
            let u = solve_standard_fem(&mesh, &dofs, kappa, &level.problem.data, q)?;
            let (e, nc, nf) = level.coarse_error(&CoarseField(u))?;
            Ok((e, nc, nf, None))
        }
        Method::Bestapprox => {
            let u = if level.uses_reference() {
                level.reference()?;
                let pair = level.pair.as_ref().expect("built with the reference");
                let parts = assemble_global(pair.fine(), &pair.fine_dofs, kappa);
                best_approximation_of_fine(pair, &parts, level.reference.as_ref().expect("built"))?
            } else {
                let mesh = level.coarse_mesh()?;
                let dofs = free_nodes(&mesh);
                let exact = level.problem.data.exact.as_ref().expect("exact solution");
                CoarseField(best_approximation(&mesh, &dofs, kappa, exact, q)?)
            };
            let (e, nc, nf) = level.coarse_error(&u)?;
            Ok((e, nc, nf, None))
        }
        Method::FemFineReference => unreachable!("filtered before the row loop"),
    }
}

/// Configuration statistics of one mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PatchStats {
    pub n_per_axis: usize,
    pub m: usize,
    pub n_classes: usize,
    pub n_cells: usize,
    pub reuse_factor: f64,
    pub seconds: f64,
}

/// Classifies the `m`-patches of the mesh with `n` cells per axis.
pub fn report_patch_stats(domain: &BoxDomain, n: usize, m: usize) -> Result<PatchStats> {
    let mesh = build_mesh(domain, &vec![n; domain.dim])?;
    let start = Instant::now();
    let classes = classify_patches(&mesh, m);
    let seconds = start.elapsed().as_secs_f64();
    let n_cells = classes.n_cells();
    Ok(PatchStats {
        n_per_axis: n,
        m,
        n_classes: classes.len(),
        n_cells,
        reuse_factor: n_cells as f64 / classes.len().max(1) as f64,
        seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_wave_directions_are_unit() {
        let d2: f64 = PLANE_WAVE_2D_DIRECTION.iter().map(|x| x * x).sum();
        assert!((d2 - 1.0).abs() < 1e-15);
        let d3: f64 = unit_direction_3d().iter().map(|x| x * x).sum();
        assert!((d3 - 1.0).abs() < 1e-15);
        let raw: f64 = PLANE_WAVE_3D_DIRECTION.iter().map(|x| x * x).sum();
        assert_eq!(raw, 38.0);
    }

    #[test]
    fn plane_wave_modulus_one() {
        let u = plane_wave(&PLANE_WAVE_2D_DIRECTION, 16.0);
        for x in [[0.1, 0.2, 0.0], [0.9, 0.33, 0.0], [0.5, 0.5, 0.0]] {
            assert!(((u.value)(&x).norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn scatterer_mesh_active_cells() {
        let mesh = build_mesh(&scatterer_domain(), &[16, 16]).unwrap();
        assert_eq!(mesh.active_cells().len(), 242);
        let mesh = build_mesh(&scatterer_domain(), &[256, 256]).unwrap();
        assert_eq!(mesh.active_cells().len(), 61952);
    }

    #[test]
    fn config_round_trip() {
        let text = "problem = scatterers_2d # comment\nkappa = 2^5\ncoarse = 4, 5\nfine = 7\n\
                    m = 1,2,3\nmethods = mspgfem, bestapprox\nquadrature = 8\nseed = 7\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.problem, ProblemName::Scatterers2d);
        assert_eq!(cfg.kappa, 32.0);
        assert_eq!(cfg.coarse_levels, vec![4, 5]);
        assert_eq!(cfg.fine_level, 7);
        assert_eq!(cfg.m_list, vec![1, 2, 3]);
        assert_eq!(cfg.methods, vec![Method::Mspgfem, Method::Bestapprox]);
        assert_eq!(cfg.quadrature, 8);
        assert_eq!(cfg.seed, 7);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_errors_name_the_line() {
        let err = ExperimentConfig::parse("kappa = 4\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        let err = ExperimentConfig::parse("methods = mspgfem, magic\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let mut cfg = ExperimentConfig::parse("coarse = 5\nfine = 4\n").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply(&Overrides {
            fine: Some(6),
            ..Overrides::default()
        });
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_problem() {
        assert!(matches!(builtin_problem("nope", 1.0), Err(Error::UnknownProblem(_))));
    }
}
