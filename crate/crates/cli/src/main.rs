use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfdgcn::data::{self, Checkpoint, DataError, DataStore, FieldSample, SplitEntry, SplitSpec};
use cfdgcn::mesh::{element_orientations, parse_su2, triangulate, write_su2, Mesh};
use cfdgcn::pipeline::{
    self, Baseline, Domain, MetricRow, ModelParams, PipelineError, TrainConfig, TrainObserver,
};
use cfdgcn::solver::{FreestreamSpec, SolverError};

#[derive(Parser)]
#[command(
    name = "cfdgcn",
    version,
    about = "Hybrid solver/graph-network flow prediction on airfoil meshes"
)]
struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset root. Defaults to $CFDGCN_DATA_ROOT, then `data`.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print node, element and marker counts and element orientation signs.
    MeshInfo { mesh: PathBuf },
    /// Split quads into triangles and write the mesh to a new file.
    Convert {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the fine-mesh ground truth for every sample of a split.
    GenData(GenDataArgs),
    /// Train a model and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Test (or train) RMSE of a checkpoint or the coarse-solve baseline.
    Eval(EvalArgs),
    /// One forward pass for a single flow condition.
    Predict(PredictArgs),
    /// Compare every reverse-mode gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a sample file as `x,y,vx,vy,p` CSV.
    ExportFields(ExportArgs),
}

#[derive(Args, Clone)]
struct MeshArgs {
    /// Directory holding `<mesh_id>_fine.su2` and `<mesh_id>_coarse.su2`.
    #[arg(long, default_value = "meshes")]
    mesh_dir: PathBuf,
    /// Fine mesh for single-airfoil splits (overrides the mesh directory).
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Coarse mesh for single-airfoil splits (overrides the mesh directory).
    #[arg(long)]
    coarse_mesh: Option<PathBuf>,
    /// Mesh id used by the single-airfoil splits.
    #[arg(long, default_value = data::DEFAULT_MESH_ID)]
    mesh_id: String,
}

#[derive(Args, Clone)]
struct SplitArgs {
    /// interpolation | generalization | multi-airfoil
    #[arg(long, default_value = "generalization")]
    split: String,
    /// Keep every n-th sample of each side of the split.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    meshes: MeshArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 20000)]
    max_iters: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    meshes: MeshArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// `key = value` file with any TrainConfig fields; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    coarse_iters: Option<usize>,
    /// none | ucm | gcn | frozen
    #[arg(long)]
    baseline: Option<Baseline>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for metrics.csv, config.txt and checkpoint.json.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    meshes: MeshArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Trained model; without it the coarse-solve baseline is evaluated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate the training side instead of the test side.
    #[arg(long)]
    on_train: bool,
    /// Per-sample CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    meshes: MeshArgs,
    /// Trained model; without it the coarse-solve baseline is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    aoa: f64,
    #[arg(long)]
    mach: f64,
    /// `.fld` sample file, or CSV for any other extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "meshes/tiny_fine.su2")]
    mesh: PathBuf,
    #[arg(long, default_value = "meshes/tiny_coarse.su2")]
    coarse_mesh: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    max_rel_err: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    /// Sample file; otherwise the sample is looked up in the dataset root.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fine mesh the sample belongs to.
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value = data::DEFAULT_MESH_ID)]
    mesh_id: String,
    #[arg(long, allow_hyphen_values = true)]
    aoa: Option<f64>,
    #[arg(long)]
    mach: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const SOLVER: u8 = 3;
const CHECK: u8 = 4;

impl Failure {
    fn usage(m: impl fmt::Display) -> Self {
        Self {
            code: USAGE,
            message: m.to_string(),
        }
    }

    fn data(m: impl fmt::Display) -> Self {
        Self {
            code: DATA,
            message: m.to_string(),
        }
    }
}

impl From<cfdgcn::Error> for Failure {
    fn from(e: cfdgcn::Error) -> Self {
        use cfdgcn::Error as E;
        let code = match &e {
            E::Solver(_) | E::Pipeline(PipelineError::Solver { .. } | PipelineError::CoarseMesh(_)) => SOLVER,
            E::Pipeline(PipelineError::Config(_) | PipelineError::FlowCondition(_)) => USAGE,
            E::Data(DataError::UnknownSplit(_) | DataError::Solver(SolverError::InvalidFreestream(_))) => {
                USAGE
            }
            _ => DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

macro_rules! impl_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                cfdgcn::Error::from(e).into()
            }
        }
    )*};
}
impl_from!(DataError, PipelineError, SolverError, cfdgcn::mesh::MeshError);

type Res<T = ()> = Result<T, Failure>;

fn read_mesh(path: &Path) -> Res<Mesh> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    parse_su2(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Res {
    data::write_text(path, text)?;
    Ok(())
}

fn data_root(cli: &Cli) -> PathBuf {
    cli.data_root
        .clone()
        .or_else(|| std::env::var_os("CFDGCN_DATA_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

impl MeshArgs {
    /// Fine (triangulated) and coarse mesh for `id`.
    fn pair(&self, id: &str) -> Res<(Mesh, Mesh)> {
        let single = id == self.mesh_id;
        let fine = match (&self.mesh, single) {
            (Some(p), true) => p.clone(),
            _ => self.mesh_dir.join(format!("{id}_fine.su2")),
        };
        let coarse = match (&self.coarse_mesh, single) {
            (Some(p), true) => p.clone(),
            _ => self.mesh_dir.join(format!("{id}_coarse.su2")),
        };
        Ok((triangulate(&read_mesh(&fine)?)?, read_mesh(&coarse)?))
    }
}

fn strided(list: &[SplitEntry], stride: usize) -> Vec<SplitEntry> {
    list.iter().step_by(stride).cloned().collect()
}

/// The split after exclusions and striding.
fn load_split(root: &DataStore, args: &SplitArgs, meshes: &MeshArgs) -> Res<SplitSpec> {
    if args.stride == 0 {
        return Err(Failure::usage("--stride must be positive"));
    }
    let exclusions = data::read_exclusions(&root.exclusions_path(&args.split))?;
    let s = data::make_split(&args.split, &meshes.mesh_id, &exclusions)?;
    Ok(SplitSpec {
        train: strided(&s.train, args.stride),
        test: strided(&s.test, args.stride),
        name: s.name,
    })
}

struct Loaded {
    domains: BTreeMap<String, Domain>,
    fine: BTreeMap<String, Mesh>,
}

fn load_domains(ids: &[String], meshes: &MeshArgs) -> Res<Loaded> {
    let mut out = Loaded {
        domains: BTreeMap::new(),
        fine: BTreeMap::new(),
    };
    for id in ids {
        let (fine, coarse) = meshes.pair(id)?;
        out.domains
            .insert(id.clone(), Domain::new(id.clone(), &fine, &coarse)?);
        out.fine.insert(id.clone(), fine);
    }
    Ok(out)
}

fn mesh_info(path: &Path) -> Res {
    let mesh = read_mesh(path)?;
    println!("nodes {}", mesh.num_nodes());
    println!("elements {}", mesh.num_elements());
    let quads = mesh.elements.len() - mesh.elements.iter().filter(|e| e.vertices().len() == 3).count();
    println!("quads {quads}");
    for m in &mesh.markers {
        println!(
            "marker {} segments {} nodes {}",
            m.tag,
            m.segments.len(),
            m.nodes().len()
        );
    }
    let tri = triangulate(&mesh)?;
    let o = element_orientations(&tri.nodes, &tri.triangles()?);
    let pos = o.iter().filter(|&&v| v > 0.0).count();
    let neg = o.iter().filter(|&&v| v < 0.0).count();
    println!(
        "orientation positive {pos} negative {neg} degenerate {}",
        o.len() - pos - neg
    );
    Ok(())
}

fn convert(input: &Path, out: &Path) -> Res {
    if input == out {
        return Err(Failure::usage("refusing to overwrite the input mesh"));
    }
    let mesh = triangulate(&read_mesh(input)?)?;
    write_file(out, &write_su2(&mesh))?;
    println!("wrote {} ({} triangles)", out.display(), mesh.num_elements());
    Ok(())
}

fn gen_data(root: &DataStore, a: &GenDataArgs) -> Res {
    let split = load_split(root, &a.split, &a.meshes)?;
    let mut failed = 0;
    for id in split.mesh_ids() {
        let (fine, _) = a.meshes.pair(&id)?;
        let params: Vec<(f64, f64)> = split
            .train
            .iter()
            .chain(&split.test)
            .filter(|e| e.mesh_id == id)
            .map(|e| (e.aoa, e.mach))
            .collect();
        let r = data::generate_ground_truth(root, &id, &fine, &params, a.tol, a.max_iters)?;
        println!(
            "{id}: solved {} cached {} failed {}",
            r.solved,
            r.cached,
            r.failed.len()
        );
        for (aoa, mach, why) in &r.failed {
            println!("excluded {id},{aoa},{mach}: {why}");
        }
        failed += r.failed.len();
        for s in data::flag_shocks(&r.samples) {
            println!("flagged supersonic {id},{},{}", s.aoa, s.mach);
        }
    }
    let path = data::write_split(root, &split)?;
    println!(
        "split {} train {} test {} -> {}",
        split.name,
        split.train.len(),
        split.test.len(),
        path.display()
    );
    if failed > 0 {
        println!(
            "{failed} samples did not converge; add them to {}",
            root.exclusions_path(&split.name).display()
        );
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> Res<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        cfg.apply_kv(&text)?;
    }
    macro_rules! flag {
        ($($f:ident),*) => {$( if let Some(v) = a.$f { cfg.$f = v; } )*};
    }
    flag!(epochs, batch_size, lr, coarse_iters, baseline, seed, hidden);
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Appends each epoch's metric row to the log as it arrives.
struct MetricLog {
    path: PathBuf,
    text: String,
    error: Option<Failure>,
}

impl TrainObserver for MetricLog {
    fn on_epoch(&mut self, row: &MetricRow, _params: &ModelParams) {
        let line = row.to_csv();
        println!("{line}");
        self.text.push_str(&line);
        self.text.push('\n');
        if self.error.is_none() {
            if let Err(e) = data::write_text(&self.path, &self.text) {
                self.error = Some(e.into());
            }
        }
    }
}

fn load_samples(
    root: &DataStore,
    entries: &[SplitEntry],
    fine: &BTreeMap<String, Mesh>,
) -> Res<Vec<FieldSample>> {
    Ok(root.load_entries(entries, fine)?)
}

fn train(root: &DataStore, a: &TrainArgs) -> Res {
    let cfg = train_config(a)?;
    let split = load_split(root, &a.split, &a.meshes)?;
    let loaded = load_domains(&split.mesh_ids(), &a.meshes)?;
    let train_s = load_samples(root, &split.train, &loaded.fine)?;
    let test_s = load_samples(root, &split.test, &loaded.fine)?;
    let params = ModelParams::init(&cfg, loaded.domains.values())?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::data(format!("{}: {e}", a.out.display())))?;
    write_file(&a.out.join("config.txt"), &cfg.to_kv())?;
    let mut log = MetricLog {
        path: a.out.join("metrics.csv"),
        text: format!("{}\n", MetricRow::HEADER),
        error: None,
    };
    println!("{}", MetricRow::HEADER);
    let out = pipeline::train(&cfg, &loaded.domains, params, &train_s, &test_s, &mut log)?;
    if let Some(e) = log.error {
        return Err(e);
    }
    let ckpt = Checkpoint::new(cfg, out.params, Some(out.optimizer));
    ckpt.save(&a.out.join("checkpoint.json"))?;
    if out.skipped_samples > 0 {
        eprintln!(
            "skipped {} samples whose coarse solve failed",
            out.skipped_samples
        );
    }
    Ok(())
}

/// Model and config from a checkpoint, or the coarse-solve baseline.
fn model_for(
    checkpoint: Option<&Path>,
    domains: &BTreeMap<String, Domain>,
) -> Res<(ModelParams, TrainConfig)> {
    match checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            for id in domains.keys() {
                if !c.params.coarse_nodes.contains_key(id) {
                    return Err(Failure::data(format!("checkpoint has no coarse mesh for `{id}`")));
                }
            }
            Ok((c.params, c.config))
        }
        None => {
            let cfg = TrainConfig {
                baseline: Baseline::Ucm,
                ..TrainConfig::default()
            };
            Ok((ModelParams::init(&cfg, domains.values())?, cfg))
        }
    }
}

fn eval(root: &DataStore, a: &EvalArgs) -> Res {
    let split = load_split(root, &a.split, &a.meshes)?;
    let entries = if a.on_train { &split.train } else { &split.test };
    let ids: Vec<String> = {
        let mut v: Vec<String> = entries.iter().map(|e| e.mesh_id.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let loaded = load_domains(&ids, &a.meshes)?;
    let samples = load_samples(root, entries, &loaded.fine)?;
    let (params, cfg) = model_for(a.checkpoint.as_deref(), &loaded.domains)?;
    let r = pipeline::evaluate(&params, &loaded.domains, &samples, &cfg)?;
    println!("samples {} failed {}", samples.len(), r.failed.len());
    println!("rmse {:e}", r.rmse);
    if let Some(out) = &a.out {
        let mut text = String::from("mesh_id,aoa,mach,mse\n");
        for (s, l) in samples.iter().zip(&r.per_sample) {
            text.push_str(&format!("{},{},{},{l:e}\n", s.mesh_id, s.aoa, s.mach));
        }
        write_file(out, &text)?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Res {
    let spec = FreestreamSpec::new(a.aoa, a.mach).map_err(Failure::usage)?;
    let loaded = load_domains(std::slice::from_ref(&a.meshes.mesh_id), &a.meshes)?;
    let (params, cfg) = model_for(a.checkpoint.as_deref(), &loaded.domains)?;
    let domain = &loaded.domains[&a.meshes.mesh_id];
    let pred = pipeline::forward(&params, domain, &spec, &cfg)?;
    let sample = FieldSample {
        mesh_id: a.meshes.mesh_id.clone(),
        aoa: a.aoa,
        mach: a.mach,
        fields: pred.fields,
    };
    if a.out.extension().is_some_and(|e| e == "fld") {
        let bytes = data::encode_sample(&sample, &domain.fine.content_hash());
        fs::write(&a.out, bytes).map_err(|e| Failure::data(format!("{}: {e}", a.out.display())))?;
    } else {
        write_file(&a.out, &data::fields_csv(&domain.fine.nodes, &sample.fields))?;
    }
    println!("wrote {} nodes to {}", sample.fields.nrows(), a.out.display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Res {
    let fine = read_mesh(&a.mesh)?;
    let coarse = read_mesh(&a.coarse_mesh)?;
    let checks = cfdgcn::gradcheck::run_all(&fine, &coarse, a.seed)?;
    let mut worst: f64 = 0.0;
    for c in &checks {
        let ok = c.report.max_rel_error < a.max_rel_err;
        println!(
            "{:<24} checked {:>4}  max rel err {:.3e}  {}",
            c.name,
            c.report.checked,
            c.report.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        worst = worst.max(c.report.max_rel_error);
    }
    if worst < a.max_rel_err {
        Ok(())
    } else {
        Err(Failure {
            code: CHECK,
            message: format!("max relative error {worst:.3e} exceeds {:.3e}", a.max_rel_err),
        })
    }
}

fn export_fields(root: &DataStore, a: &ExportArgs) -> Res {
    let mesh = triangulate(&read_mesh(&a.mesh)?)?;
    let sample = match (&a.input, a.aoa, a.mach) {
        (Some(p), _, _) => {
            let bytes = fs::read(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
            data::decode_sample(&bytes, &a.mesh_id, &mesh.content_hash())?
        }
        (None, Some(aoa), Some(mach)) => root
            .load(&a.mesh_id, &mesh, aoa, mach)?
            .ok_or_else(|| Failure::data(format!("no sample for {} aoa={aoa} mach={mach}", a.mesh_id)))?,
        _ => return Err(Failure::usage("give --input, or both --aoa and --mach")),
    };
    if sample.fields.nrows() != mesh.num_nodes() {
        return Err(Failure::data("sample and mesh node counts differ"));
    }
    write_file(&a.out, &data::fields_csv(&mesh.nodes, &sample.fields))?;
    println!("wrote {} nodes to {}", mesh.num_nodes(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Res {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::usage)?;
    }
    let root = DataStore::new(data_root(&cli));
    match &cli.command {
        Command::MeshInfo { mesh } => mesh_info(mesh),
        Command::Convert { input, out } => convert(input, out),
        Command::GenData(a) => gen_data(&root, a),
        Command::Train(a) => train(&root, a),
        Command::Eval(a) => eval(&root, a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportFields(a) => export_fields(&root, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
