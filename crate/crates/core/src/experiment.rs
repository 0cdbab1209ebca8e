//! JSON-configured experiment drivers. Each driver reads one config file, writes
//! CSV (and occasionally JSON) files into an output directory and reports whether
//! the inputs were admissible.
//!
//! Every CSV starts with `#`-prefixed provenance lines (crate version, command,
//! SHA-256 of the config bytes, seed) followed by a header row whose column names
//! carry units in brackets (`[L]` is the fixture length unit, `[1]` dimensionless).
//! Nothing time- or machine-dependent is written, so identical configs and seeds
//! give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cgo_fourier::{build_zeta, write_samples_csv, FourierProbe, RemainderConfig, TraceModel};
use crate::dtn::{BoundaryGram, DtnMatrix};
use crate::fem::{FrequencySpec, Mesh, MeshConfig};
use crate::partition::{validate, FieldFile, Violation};
use crate::reconstruction::{landweber_run, MisfitModel, ReconstructionConfig};
use crate::shape::{gateaux_derivative, max_regular_scale};
use crate::stability::{lipschitz_sweep, match_partitions, measured_c1, MatchConfig, MatchOutcome};
use crate::{fixtures, Deformation, Error, PiecewiseField, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Validate,
    Sweep,
    Derivative,
    Match,
    Fourier,
    Reconstruct,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Sweep => "sweep",
            Command::Derivative => "derivative",
            Command::Match => "match",
            Command::Fourier => "fourier",
            Command::Reconstruct => "reconstruct",
        }
    }
}

/// A field given by fixture name or by a [`FieldFile`] path (relative to the
/// config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldRef {
    Fixture { fixture: String },
    Path { path: PathBuf },
}

/// Vertex displacement field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeformationSpec {
    Zero,
    /// Moves one vertex.
    Vertex { vertex: usize, vector: [f64; 3] },
    /// One vector per vertex.
    Displacements { vectors: Vec<[f64; 3]> },
}

impl DeformationSpec {
    fn build(&self, f: &PiecewiseField) -> Result<Deformation> {
        let n = f.partition().vertices().len();
        let d = match self {
            DeformationSpec::Zero => Deformation::zero(n),
            DeformationSpec::Vertex { vertex, vector } => {
                if *vertex >= n {
                    return Err(Error::InvalidInput(format!("vertex {vertex} out of range ({n} vertices)")));
                }
                Deformation::single(n, *vertex, Vector3::from(*vector))
            }
            DeformationSpec::Displacements { vectors } => {
                if vectors.len() != n {
                    return Err(Error::InvalidInput(format!("{} displacements for {n} vertices", vectors.len())));
                }
                Deformation { displacements: vectors.iter().map(|v| Vector3::from(*v)).collect() }
            }
        };
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyConfig {
    pub omega: f64,
    pub omega0: f64,
    pub omega1: f64,
    /// Enclosing radius; the partition's own when absent.
    #[serde(default)]
    pub radius: Option<f64>,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self { omega: 1.2, omega0: 0.5, omega1: 1.25, radius: None }
    }
}

impl FrequencyConfig {
    fn spec(&self, f: &PiecewiseField) -> Result<FrequencySpec> {
        let r = self.radius.unwrap_or_else(|| f.partition().enclosing_radius());
        FrequencySpec::new(self.omega, self.omega0, self.omega1, r)
    }
}

fn default_mesh() -> MeshConfig {
    MeshConfig { target_h: 0.25, order: Default::default(), augmented: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub field: FieldRef,
    #[serde(default)]
    pub seed: u64,
    /// Samples per radius for the ball-constant measurement.
    #[serde(default = "default_c1_samples")]
    pub c1_samples: usize,
}

fn default_c1_samples() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub field: FieldRef,
    pub deformation: DeformationSpec,
    /// Explicit deformation parameters; otherwise `t_max·{1, …, points}/points`.
    #[serde(default)]
    pub t_grid: Option<Vec<f64>>,
    /// Defaults to the largest scale (at most 1) keeping the insphere floor.
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_mesh")]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub frequency: FrequencyConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_points() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivativeConfig {
    pub field: FieldRef,
    pub deformation: DeformationSpec,
    #[serde(default)]
    pub t0: f64,
    /// Pairs of the lowest `probes` boundary modes are evaluated.
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_mesh")]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub frequency: FrequencyConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_probes() -> usize {
    3
}

/// Second field of a pair: a field reference or a deformation of the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SecondField {
    Field { field1: FieldRef },
    Deformed { deformation: DeformationSpec },
}

impl SecondField {
    fn load(&self, f0: &PiecewiseField, base: &Path) -> Result<PiecewiseField> {
        match self {
            SecondField::Field { field1 } => load_field(field1, base),
            SecondField::Deformed { deformation } => f0.deform(&deformation.build(f0)?, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCommandConfig {
    pub field0: FieldRef,
    #[serde(flatten)]
    pub second: SecondField,
    #[serde(default)]
    pub c1: Option<f64>,
    #[serde(default = "default_interior")]
    pub interior_samples: usize,
    #[serde(default = "default_c1_samples")]
    pub c1_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_interior() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    pub field0: FieldRef,
    #[serde(flatten)]
    pub second: SecondField,
    pub xi: Vec<[f64; 3]>,
    pub mu: Vec<f64>,
    #[serde(default)]
    pub traces: TraceModel,
    #[serde(default)]
    pub remainder: RemainderConfig,
    #[serde(default = "default_mesh")]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub frequency: FrequencyConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    /// Starting field; its labels are kept throughout.
    pub field: FieldRef,
    /// Ground truth generating the data. Mutually exclusive with `jitter`.
    #[serde(default)]
    pub truth: Option<FieldRef>,
    /// Ground truth = `field` with every free interior vertex moved uniformly
    /// within a ball of radius `jitter·d₁` (seeded).
    #[serde(default)]
    pub jitter: Option<f64>,
    #[serde(default = "default_mesh")]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub frequency: FrequencyConfig,
    #[serde(default)]
    pub reconstruction: ReconstructionConfig,
    #[serde(default)]
    pub seed: u64,
}

/// Where a run reads and writes, plus the optional seed override.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

/// Result of a run that got past config parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    /// `false` when the inputs violate a domain rule (exit code 1).
    pub admissible: bool,
    pub files: Vec<PathBuf>,
    /// Human-readable summary printed by the binary.
    pub summary: String,
}

/// Provenance lines written ahead of every CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub command: Command,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: Command, config_bytes: &[u8], seed: u64) -> Self {
        Self { command, config_sha256: hex::encode(Sha256::digest(config_bytes)), seed }
    }

    pub fn header(&self) -> String {
        format!(
            "# tetrastab {VERSION}\n# command: {}\n# config_sha256: {}\n# seed: {}\n",
            self.command.name(),
            self.config_sha256,
            self.seed
        )
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let cfg = serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok((cfg, bytes))
}

/// Loads a named fixture (`reference`, `two_tet`) or a field file.
pub fn load_field(r: &FieldRef, base: &Path) -> Result<PiecewiseField> {
    match r {
        FieldRef::Fixture { fixture } => match fixture.as_str() {
            "reference" => Ok(fixtures::reference_field()),
            "two_tet" => Ok(fixtures::two_tet_field()),
            other => Err(Error::Parse(format!("unknown fixture `{other}`"))),
        },
        FieldRef::Path { path } => {
            let p = base.join(path);
            let s = fs::read_to_string(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            FieldFile::from_json(&s)?.field()
        }
    }
}

fn write_csv(out: &Path, name: &str, prov: &Provenance, body: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    let path = out.join(name);
    let mut bytes = prov.header().into_bytes();
    bytes.extend_from_slice(body);
    fs::write(&path, bytes)?;
    files.push(path);
    Ok(())
}

fn fmt(x: f64) -> String {
    // `+ 0.0` turns `-0` into `0`
    format!("{:e}", x + 0.0)
}

/// Runs one command. Config and I/O problems come back as `Err`; domain
/// violations that still produce a report come back with `admissible = false`.
pub fn run(command: Command, opts: &RunOptions) -> Result<RunReport> {
    let base = opts.config.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&opts.out)?;
    match command {
        Command::Validate => {
            let (cfg, bytes): (ValidateConfig, _) = read_config(&opts.config)?;
            let seed = opts.seed.unwrap_or(cfg.seed);
            cmd_validate(&cfg, &base, &opts.out, Provenance::new(command, &bytes, seed))
        }
        Command::Sweep => {
            let (cfg, bytes): (SweepConfig, _) = read_config(&opts.config)?;
            let seed = opts.seed.unwrap_or(cfg.seed);
            cmd_sweep(&cfg, &base, &opts.out, Provenance::new(command, &bytes, seed))
        }
        Command::Derivative => {
            let (cfg, bytes): (DerivativeConfig, _) = read_config(&opts.config)?;
            let seed = opts.seed.unwrap_or(cfg.seed);
            cmd_derivative(&cfg, &base, &opts.out, Provenance::new(command, &bytes, seed))
        }
        Command::Match => {
            let (cfg, bytes): (MatchCommandConfig, _) = read_config(&opts.config)?;
            let seed = opts.seed.unwrap_or(cfg.seed);
            cmd_match(&cfg, &base, &opts.out, Provenance::new(command, &bytes, seed))
        }
        Command::Fourier => {
            let (cfg, bytes): (FourierConfig, _) = read_config(&opts.config)?;
            let seed = opts.seed.unwrap_or(cfg.seed);
            cmd_fourier(&cfg, &base, &opts.out, Provenance::new(command, &bytes, seed))
        }
        Command::Reconstruct => {
            let (cfg, bytes): (ReconstructConfig, _) = read_config(&opts.config)?;
            let seed = opts.seed.unwrap_or(cfg.seed);
            cmd_reconstruct(&cfg, &base, &opts.out, Provenance::new(command, &bytes, seed))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct ValidationJson<'a> {
    admissible: bool,
    violations: &'a [Violation],
    tetrahedra: usize,
    vertices: usize,
    r1: f64,
    n0: usize,
    min_insphere: f64,
    d1: Option<f64>,
    alpha1: Option<f64>,
    c1: Option<f64>,
    seed: u64,
}

pub fn cmd_validate(cfg: &ValidateConfig, base: &Path, out: &Path, prov: Provenance) -> Result<RunReport> {
    let f = load_field(&cfg.field, base)?;
    let report = validate(&f);
    let p = f.partition();
    let reg = p.regularity_constants().ok();
    let c1 = if report.is_admissible() { measured_c1(p, p.r1(), cfg.c1_samples, prov.seed).ok() } else { None };
    let json = ValidationJson {
        admissible: report.is_admissible(),
        violations: &report.violations,
        tetrahedra: p.len(),
        vertices: p.vertices().len(),
        r1: p.r1(),
        n0: p.n0(),
        min_insphere: p.min_insphere_radius(),
        d1: reg.map(|r| r.0),
        alpha1: reg.map(|r| r.1),
        c1,
        seed: prov.seed,
    };
    let path = out.join("validate.json");
    fs::write(&path, serde_json::to_string_pretty(&json)? + "\n")?;
    let mut summary = format!("{} tetrahedra, admissible: {}\n", p.len(), report.is_admissible());
    for v in &report.violations {
        let _ = writeln!(summary, "violation {} at {:?}: {}", v.rule, v.indices, v.detail);
    }
    Ok(RunReport { admissible: report.is_admissible(), files: vec![path], summary })
}

pub fn cmd_sweep(cfg: &SweepConfig, base: &Path, out: &Path, prov: Provenance) -> Result<RunReport> {
    let f = load_field(&cfg.field, base)?;
    let d = cfg.deformation.build(&f)?;
    let fs = cfg.frequency.spec(&f)?;
    let grid = if d.is_zero() {
        // every t gives the same partition
        vec![0.0]
    } else if let Some(g) = &cfg.t_grid {
        g.clone()
    } else {
        if cfg.points == 0 {
            return Err(Error::InvalidInput("points must be positive".into()));
        }
        let t_max = cfg.t_max.unwrap_or_else(|| max_regular_scale(f.partition(), &d, 1.0));
        (1..=cfg.points).map(|i| t_max * i as f64 / cfg.points as f64).collect()
    };
    let rows = lipschitz_sweep(&f, &d, &fs, &grid, &cfg.mesh, prov.seed)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t[1]", "d_T[L]", "dtn_star_norm[1/L]", "ratio[1/L^2]", "mesh_h[L]", "n_dofs[1]", "seed[1]"])?;
    for r in &rows {
        w.write_record([
            fmt(r.t),
            fmt(r.d_t),
            fmt(r.dtn_norm),
            r.ratio.map_or(String::new(), fmt),
            fmt(r.mesh_h),
            r.n_dofs.to_string(),
            r.seed.to_string(),
        ])?;
    }
    let mut files = Vec::new();
    write_csv(out, "sweep.csv", &prov, &into_bytes(w)?, &mut files)?;
    let summary = format!("{} sweep rows", rows.len());
    Ok(RunReport { admissible: true, files, summary })
}

fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

pub fn cmd_derivative(cfg: &DerivativeConfig, base: &Path, out: &Path, prov: Provenance) -> Result<RunReport> {
    let f = load_field(&cfg.field, base)?;
    let d = cfg.deformation.build(&f)?;
    let fs = cfg.frequency.spec(&f)?;
    let mesh = Mesh::build(f.partition(), &cfg.mesh, fs.radius, f.values().q0())?;
    let gram = BoundaryGram::new(&mesh)?;
    let basis = gram.probe_basis(cfg.probes);
    let col = |c: usize| (0..basis.nrows()).map(|i| basis[(i, c)]).collect::<Vec<f64>>();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["probe_a[1]", "probe_b[1]", "derivative[1/L]", "volume_form[1/L]", "relative_gap[1]"])?;
    for a in 0..basis.ncols() {
        for b in 0..basis.ncols() {
            let g = gateaux_derivative(&f, &d, cfg.t0, &col(a), &col(b), &fs, &mesh)?;
            w.write_record([a.to_string(), b.to_string(), fmt(g.facet), fmt(g.volume), fmt(g.relative_gap())])?;
        }
    }
    let mut files = Vec::new();
    write_csv(out, "derivative.csv", &prov, &into_bytes(w)?, &mut files)?;
    let summary = format!("{} probe pairs on {} dofs", basis.ncols().pow(2), mesh.n_dofs());
    Ok(RunReport { admissible: true, files, summary })
}

pub fn cmd_match(cfg: &MatchCommandConfig, base: &Path, out: &Path, prov: Provenance) -> Result<RunReport> {
    let f0 = load_field(&cfg.field0, base)?;
    let f1 = cfg.second.load(&f0, base)?;
    let mc = MatchConfig {
        c1: cfg.c1,
        interior_samples: cfg.interior_samples,
        c1_seed: prov.seed,
        c1_samples: cfg.c1_samples,
    };
    let m = match_partitions(&f0, &f1, f0.values(), &mc)?;
    let mut files = Vec::new();
    let json = out.join("match.json");
    fs::write(&json, serde_json::to_string_pretty(&m)? + "\n")?;
    files.push(json);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tet0[1]", "tet1[1]", "hausdorff[L]"])?;
    if let Some(perm) = m.permutation() {
        for (j, (&k, h)) in perm.iter().zip(&m.hausdorff).enumerate() {
            w.write_record([j.to_string(), k.to_string(), fmt(*h)])?;
        }
    }
    write_csv(out, "permutation.csv", &prov, &into_bytes(w)?, &mut files)?;
    let summary = match &m.outcome {
        MatchOutcome::Matched { permutation } => format!("matched: {permutation:?}"),
        MatchOutcome::Unmatched(u) => format!("not matched: {u:?}"),
    };
    Ok(RunReport { admissible: m.is_matched(), files, summary })
}

pub fn cmd_fourier(cfg: &FourierConfig, base: &Path, out: &Path, prov: Provenance) -> Result<RunReport> {
    let f0 = load_field(&cfg.field0, base)?;
    let f1 = cfg.second.load(&f0, base)?;
    let fs = cfg.frequency.spec(&f0)?;
    let mesh = Mesh::build(f0.partition(), &cfg.mesh, fs.radius, f0.values().q0())?;
    let probe = FourierProbe::new(&mesh, &f0, &f1, &fs)?.with_traces(cfg.traces, cfg.remainder);
    let mut samples = Vec::new();
    for xi in &cfg.xi {
        for &mu in &cfg.mu {
            samples.push(probe.estimate(&build_zeta(Vector3::from(*xi), mu)?)?);
        }
    }
    let mut body = Vec::new();
    write_samples_csv(&samples, &mut body)?;
    let mut files = Vec::new();
    write_csv(out, "fourier.csv", &prov, &body, &mut files)?;
    let summary = format!("{} samples on {} dofs", samples.len(), mesh.n_dofs());
    Ok(RunReport { admissible: true, files, summary })
}

/// Moves every interior vertex of `f` uniformly within a ball of radius `radius`.
pub fn jitter_interior(f: &PiecewiseField, radius: f64, seed: u64) -> Result<PiecewiseField> {
    let p = f.partition();
    let on_boundary = p.boundary_vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Deformation::zero(p.vertices().len());
    for (v, b) in on_boundary.iter().enumerate() {
        if *b {
            continue;
        }
        d.displacements[v] = loop {
            let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if w.norm_squared() <= 1.0 {
                break w * radius;
            }
        };
    }
    f.deform(&d, 1.0)
}

pub fn cmd_reconstruct(cfg: &ReconstructConfig, base: &Path, out: &Path, prov: Provenance) -> Result<RunReport> {
    let initial = load_field(&cfg.field, base)?;
    let truth = match (&cfg.truth, cfg.jitter) {
        (Some(t), None) => load_field(t, base)?,
        (None, Some(j)) => {
            let (d1, _) = initial.partition().regularity_constants()?;
            jitter_interior(&initial, j * d1, prov.seed)?
        }
        _ => return Err(Error::Parse("give exactly one of `truth` and `jitter`".into())),
    };
    let fs = cfg.frequency.spec(&initial)?;
    let mesh = Mesh::build(initial.partition(), &cfg.mesh, fs.radius, initial.values().q0())?;
    let gram = BoundaryGram::new(&mesh)?;
    let target = DtnMatrix::for_field(&mesh, &truth, &fs)?;
    let model = MisfitModel::new(&target, &gram, &fs, &mesh, cfg.reconstruction.probe_budget)?;
    let rc = ReconstructionConfig { seed: prov.seed, ..cfg.reconstruction };
    let (end, log) = landweber_run(&initial, &model, &rc, Some(truth.partition()))?;
    let mut body = Vec::new();
    log.write_csv(&mut body)?;
    let mut files = Vec::new();
    write_csv(out, "reconstruct.csv", &prov, &body, &mut files)?;
    let final_path = out.join("final_field.json");
    fs::write(&final_path, FieldFile::from_field(&end, None).to_json()? + "\n")?;
    files.push(final_path);
    let (a, b) = (log.initial(), log.last_accepted());
    let summary = format!(
        "misfit {} -> {}, d_T {} -> {}, {} rows, termination {:?}",
        fmt(a.misfit),
        fmt(b.misfit),
        a.d_t.map_or(String::new(), fmt),
        b.d_t.map_or(String::new(), fmt),
        log.rows.len(),
        log.termination
    );
    Ok(RunReport { admissible: true, files, summary })
}

/// Exit code for an error: 2 for config and I/O problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Parse(_) => 2,
        _ => 1,
    }
}
