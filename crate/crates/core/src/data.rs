//! Ground truth, experiment splits, and on-disk formats.
//!
//! Layout under a data root:
//!
//! ```text
//! <root>/<mesh_id>/<aoa>_<mach>.fld     one sample
//! <root>/splits/<name>.csv              mesh_id,aoa,mach,role
//! <root>/exclusions/<name>.csv          mesh_id,aoa,mach
//! ```
//!
//! A `.fld` file is little-endian: the magic `CFDGFLD\0`, a `u32` version, the
//! 64-byte hex SHA-256 of the mesh in SU2 form, `aoa: f64`, `mach: f64`,
//! `n: u64`, then `3n` `f64` values `(vx, vy, p)` in node order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{Mesh, Point};
use crate::par;
use crate::pipeline::{ModelParams, OptimizerState, TrainConfig};
use crate::solver::{FreestreamSpec, SolveOptions, Solver, SolverError};

pub const SAMPLE_MAGIC: &[u8; 8] = b"CFDGFLD\0";
pub const DATASET_MAGIC: &[u8; 8] = b"CFDGSET\0";
pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

pub const AOAS: [f64; 21] = [
    -10.0, -9.0, -8.0, -7.0, -6.0, -5.0, -4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0,
    9.0, 10.0,
];
pub const MACH_INTERP_TRAIN: [f64; 8] = [0.2, 0.3, 0.35, 0.4, 0.5, 0.55, 0.6, 0.7];
pub const MACH_INTERP_TEST: [f64; 3] = [0.25, 0.45, 0.65];
pub const GENERALIZATION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MESH_ID: &str = "naca0012";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a sample file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("sample was generated for mesh {found}, expected {expected}")]
    MeshHashMismatch { expected: String, found: String },
    #[error("sample has {got} rows but mesh `{mesh_id}` has {expected} nodes")]
    RowMismatch {
        mesh_id: String,
        expected: usize,
        got: usize,
    },
    #[error("unknown split `{0}` (interpolation|generalization|multi-airfoil)")]
    UnknownSplit(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("no mesh registered for `{0}`")]
    UnknownMesh(String),
    #[error("invalid sample parameters: {0}")]
    Solver(#[from] SolverError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Ground truth for one flow condition on one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub mesh_id: String,
    pub aoa: f64,
    pub mach: f64,
    /// `(vx, vy, p)` per fine node.
    pub fields: Array2<f64>,
}

impl FieldSample {
    pub fn freestream(&self) -> Result<FreestreamSpec, SolverError> {
        FreestreamSpec::new(self.aoa, self.mach)
    }
}

fn encode_into(out: &mut Vec<u8>, s: &FieldSample, mesh_hash: &str) {
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut h = [b'0'; 64];
    let hb = mesh_hash.as_bytes();
    h[..hb.len().min(64)].copy_from_slice(&hb[..hb.len().min(64)]);
    out.extend_from_slice(&h);
    out.extend_from_slice(&s.aoa.to_le_bytes());
    out.extend_from_slice(&s.mach.to_le_bytes());
    out.extend_from_slice(&(s.fields.nrows() as u64).to_le_bytes());
    for v in s.fields.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_sample(s: &FieldSample, mesh_hash: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(100 + 24 * s.fields.nrows());
    encode_into(&mut out, s, mesh_hash);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).ok_or(DataError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DataError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_from(r: &mut Reader<'_>, mesh_id: &str, mesh_hash: &str) -> Result<FieldSample, DataError> {
    if r.take(8)? != SAMPLE_MAGIC {
        return Err(DataError::BadMagic);
    }
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(DataError::Version(v));
    }
    let found = String::from_utf8_lossy(r.take(64)?).into_owned();
    if found != mesh_hash {
        return Err(DataError::MeshHashMismatch {
            expected: mesh_hash.to_string(),
            found,
        });
    }
    let aoa = r.f64()?;
    let mach = r.f64()?;
    let n = r.u64()? as usize;
    let bytes = n.checked_mul(24).ok_or(DataError::Truncated)?;
    let raw = r.take(bytes)?;
    let vals = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(FieldSample {
        mesh_id: mesh_id.to_string(),
        aoa,
        mach,
        fields: Array2::from_shape_vec((n, 3), vals).expect("length checked"),
    })
}

/// Inverse of [`encode_sample`]; trailing bytes are an error.
pub fn decode_sample(bytes: &[u8], mesh_id: &str, mesh_hash: &str) -> Result<FieldSample, DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let s = decode_from(&mut r, mesh_id, mesh_hash)?;
    if r.pos != bytes.len() {
        return Err(DataError::Truncated);
    }
    Ok(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Several samples, possibly on different meshes, in one file.
pub fn save_dataset(
    path: &Path,
    samples: &[FieldSample],
    hashes: &BTreeMap<String, String>,
) -> Result<(), DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        let hash = hashes
            .get(&s.mesh_id)
            .ok_or_else(|| DataError::UnknownMesh(s.mesh_id.clone()))?;
        out.extend_from_slice(&(s.mesh_id.len() as u64).to_le_bytes());
        out.extend_from_slice(s.mesh_id.as_bytes());
        encode_into(&mut out, s, hash);
    }
    write_atomic(path, &out)
}

pub fn load_dataset(path: &Path, hashes: &BTreeMap<String, String>) -> Result<Vec<FieldSample>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != DATASET_MAGIC {
        return Err(DataError::BadMagic);
    }
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(DataError::Version(v));
    }
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u64()? as usize;
        let id = String::from_utf8_lossy(r.take(len)?).into_owned();
        let hash = hashes
            .get(&id)
            .ok_or_else(|| DataError::UnknownMesh(id.clone()))?;
        out.push(decode_from(&mut r, &id, hash)?);
    }
    if r.pos != bytes.len() {
        return Err(DataError::Truncated);
    }
    Ok(out)
}

/// Sample cache rooted at a directory.
#[derive(Debug, Clone)]
pub struct DataStore {
    pub root: PathBuf,
}

impl DataStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn sample_path(&self, mesh_id: &str, aoa: f64, mach: f64) -> PathBuf {
        self.root.join(mesh_id).join(format!("{aoa}_{mach}.fld"))
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        self.root.join("splits").join(format!("{name}.csv"))
    }

    pub fn exclusions_path(&self, name: &str) -> PathBuf {
        self.root.join("exclusions").join(format!("{name}.csv"))
    }

    pub fn save(&self, sample: &FieldSample, mesh: &Mesh) -> Result<PathBuf, DataError> {
        check_rows(sample, mesh)?;
        let path = self.sample_path(&sample.mesh_id, sample.aoa, sample.mach);
        write_atomic(&path, &encode_sample(sample, &mesh.content_hash()))?;
        Ok(path)
    }

    /// `Ok(None)` when the sample is not cached.
    pub fn load(
        &self,
        mesh_id: &str,
        mesh: &Mesh,
        aoa: f64,
        mach: f64,
    ) -> Result<Option<FieldSample>, DataError> {
        let path = self.sample_path(mesh_id, aoa, mach);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let s = decode_sample(&bytes, mesh_id, &mesh.content_hash())?;
        check_rows(&s, mesh)?;
        Ok(Some(s))
    }

    /// Load every entry of `entries`; missing samples are an error.
    pub fn load_entries(
        &self,
        entries: &[SplitEntry],
        meshes: &BTreeMap<String, Mesh>,
    ) -> Result<Vec<FieldSample>, DataError> {
        entries
            .iter()
            .map(|e| {
                let mesh = meshes
                    .get(&e.mesh_id)
                    .ok_or_else(|| DataError::UnknownMesh(e.mesh_id.clone()))?;
                self.load(&e.mesh_id, mesh, e.aoa, e.mach)?.ok_or_else(|| {
                    let path = self.sample_path(&e.mesh_id, e.aoa, e.mach);
                    DataError::Io {
                        path,
                        source: std::io::Error::new(
                            std::io::ErrorKind::NotFound,
                            "sample missing; run gen-data first",
                        ),
                    }
                })
            })
            .collect()
    }
}

fn check_rows(s: &FieldSample, mesh: &Mesh) -> Result<(), DataError> {
    if s.fields.nrows() != mesh.num_nodes() {
        return Err(DataError::RowMismatch {
            mesh_id: s.mesh_id.clone(),
            expected: mesh.num_nodes(),
            got: s.fields.nrows(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct GenerationReport {
    pub samples: Vec<FieldSample>,
    pub solved: usize,
    pub cached: usize,
    /// Conditions that did not converge or failed, with the reason.
    pub failed: Vec<(f64, f64, String)>,
}

/// Converged fine-mesh solves for every `(aoa, mach)`, served from and
/// written to `store`. `mesh` must be triangular.
pub fn generate_ground_truth(
    store: &DataStore,
    mesh_id: &str,
    mesh: &Mesh,
    params: &[(f64, f64)],
    tol: f64,
    max_iters: usize,
) -> Result<GenerationReport, DataError> {
    let solver = Solver::new(mesh)?;
    for &(aoa, mach) in params {
        FreestreamSpec::new(aoa, mach)?;
    }
    let opts = SolveOptions {
        max_iters,
        residual_tol: tol,
        ..SolveOptions::converged()
    };
    enum Outcome {
        Cached(FieldSample),
        Solved(FieldSample),
        Failed(String),
    }
    let outcomes = par::map(params, |&(aoa, mach)| -> Result<Outcome, DataError> {
        if let Some(s) = store.load(mesh_id, mesh, aoa, mach)? {
            return Ok(Outcome::Cached(s));
        }
        let spec = FreestreamSpec::new(aoa, mach)?;
        match solver.solve(&mesh.nodes, &spec, &opts) {
            Ok(out) if out.final_residual_norm < tol => {
                let s = FieldSample {
                    mesh_id: mesh_id.to_string(),
                    aoa,
                    mach,
                    fields: out.node_fields,
                };
                store.save(&s, mesh)?;
                Ok(Outcome::Solved(s))
            }
            Ok(out) => Ok(Outcome::Failed(format!(
                "not converged after {} iterations (residual {:e})",
                out.iterations_run, out.final_residual_norm
            ))),
            Err(e) => Ok(Outcome::Failed(e.to_string())),
        }
    });
    let mut report = GenerationReport::default();
    for (&(aoa, mach), o) in params.iter().zip(outcomes) {
        match o? {
            Outcome::Cached(s) => {
                report.cached += 1;
                report.samples.push(s);
            }
            Outcome::Solved(s) => {
                report.solved += 1;
                report.samples.push(s);
            }
            Outcome::Failed(msg) => {
                log::warn!("{mesh_id} aoa={aoa} mach={mach} excluded: {msg}");
                report.failed.push((aoa, mach, msg));
            }
        }
    }
    Ok(report)
}

/// Largest local Mach number in a node field. Density is recovered from the
/// isentropic relation `p = rho^gamma / gamma` of the freestream.
pub fn max_local_mach(fields: &Array2<f64>, gamma: f64) -> f64 {
    fields
        .rows()
        .into_iter()
        .map(|r| {
            let p = r[2].max(f64::MIN_POSITIVE);
            let rho = (gamma * p).powf(1.0 / gamma);
            r[0].hypot(r[1]) / (gamma * p / rho).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Samples whose field reaches supersonic speed somewhere.
pub fn flag_shocks(samples: &[FieldSample]) -> Vec<&FieldSample> {
    samples
        .iter()
        .filter(|s| max_local_mach(&s.fields, 1.4) > 1.0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub mesh_id: String,
    pub aoa: f64,
    pub mach: f64,
}

impl SplitEntry {
    pub fn new(mesh_id: &str, aoa: f64, mach: f64) -> Self {
        Self {
            mesh_id: mesh_id.to_string(),
            aoa,
            mach,
        }
    }

    fn key(&self) -> (String, u64, u64) {
        (self.mesh_id.clone(), self.aoa.to_bits(), self.mach.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub name: String,
    pub train: Vec<SplitEntry>,
    pub test: Vec<SplitEntry>,
}

impl SplitSpec {
    pub fn mesh_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .train
            .iter()
            .chain(&self.test)
            .map(|e| e.mesh_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mesh_id,aoa,mach,role\n");
        for (role, list) in [("train", &self.train), ("test", &self.test)] {
            for e in list {
                s.push_str(&format!("{},{},{},{role}\n", e.mesh_id, e.aoa, e.mach));
            }
        }
        s
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["interpolation", "generalization", "multi-airfoil"];

/// Every Mach number that appears in either interpolation set, ascending.
pub fn all_machs() -> Vec<f64> {
    let mut m: Vec<f64> = MACH_INTERP_TRAIN
        .iter()
        .chain(&MACH_INTERP_TEST)
        .copied()
        .collect();
    m.sort_by(f64::total_cmp);
    m
}

fn grid(mesh_id: &str, machs: &[f64]) -> Vec<SplitEntry> {
    machs
        .iter()
        .flat_map(|&m| AOAS.iter().map(move |&a| SplitEntry::new(mesh_id, a, m)))
        .collect()
}

/// The named split on the single-airfoil mesh `mesh_id` (ignored by
/// `multi-airfoil`), minus `exclusions` from the training side.
pub fn make_split(name: &str, mesh_id: &str, exclusions: &[SplitEntry]) -> Result<SplitSpec, DataError> {
    let (train, test) = match name {
        "interpolation" => (
            grid(mesh_id, &MACH_INTERP_TRAIN),
            grid(mesh_id, &MACH_INTERP_TEST),
        ),
        "generalization" => {
            let (hi, lo): (Vec<f64>, Vec<f64>) = all_machs()
                .into_iter()
                .partition(|&m| m > GENERALIZATION_THRESHOLD);
            (grid(mesh_id, &lo), grid(mesh_id, &hi))
        }
        "multi-airfoil" => {
            let machs = all_machs();
            let mut train = grid("naca4412", &machs);
            train.extend(grid("rae2822", &machs));
            (train, grid("naca0012", &machs))
        }
        other => return Err(DataError::UnknownSplit(other.to_string())),
    };
    let excluded: std::collections::BTreeSet<_> = exclusions.iter().map(SplitEntry::key).collect();
    let train = train
        .into_iter()
        .filter(|e| !excluded.contains(&e.key()))
        .collect();
    Ok(SplitSpec {
        name: name.to_string(),
        train,
        test,
    })
}

/// Read `mesh_id,aoa,mach` rows; a missing file means no exclusions.
/// Blank lines, `#` comments and a header row are skipped.
pub fn read_exclusions(path: &Path) -> Result<Vec<SplitEntry>, DataError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("mesh_id") {
            continue;
        }
        let parse_err = |msg: &str| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(parse_err("expected mesh_id,aoa,mach"));
        }
        let aoa = cols[1].parse().map_err(|_| parse_err("bad aoa"))?;
        let mach = cols[2].parse().map_err(|_| parse_err("bad mach"))?;
        out.push(SplitEntry::new(cols[0], aoa, mach));
    }
    Ok(out)
}

pub fn write_split(store: &DataStore, split: &SplitSpec) -> Result<PathBuf, DataError> {
    let path = store.split_path(&split.name);
    write_atomic(&path, split.to_csv().as_bytes())?;
    Ok(path)
}

/// Everything needed to resume or reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ModelParams, optimizer: Option<OptimizerState>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed: config.seed,
            config,
            params,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_vec(self).map_err(|e| DataError::Checkpoint(e.to_string()))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let c: Self = serde_json::from_slice(&bytes).map_err(|e| DataError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(DataError::Version(c.version));
        }
        Ok(c)
    }
}

/// `x,y,vx,vy,p` per node.
pub fn fields_csv(nodes: &[Point], fields: &Array2<f64>) -> String {
    let mut s = String::from("x,y,vx,vy,p\n");
    for (p, r) in nodes.iter().zip(fields.rows()) {
        s.push_str(&format!(
            "{:e},{:e},{:e},{:e},{:e}\n",
            p[0], p[1], r[0], r[1], r[2]
        ));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    write_atomic(path, text.as_bytes())
}
