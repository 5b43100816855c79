//! The hybrid model, its baselines, and the training and evaluation loops.
//!
//! Forward pass of the full model:
//!
//! 1. solve the coarse mesh at the sample's freestream for a fixed budget,
//! 2. interpolate the coarse `(vx, vy, p)` onto the fine nodes,
//! 3. run `num_layers` graph convolutions over the fine mesh starting from
//!    `(x, y, sdf, aoa, mach)`, with the interpolated fields appended to the
//!    activations after layer `concat_layer`; the last layer is linear.
//!
//! Training differentiates the loss with respect to the layer weights and the
//! coarse node coordinates. Coordinate updates go through
//! [`crate::meshopt::project_update_pinned`] before they are applied.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FieldSample;
use crate::gnn::{Adam, GcnLayer, GnnError, NormalizedAdjacency};
use crate::mesh::{build_graph, orientation, signed_distance, triangulate, Mesh, MeshError, Point};
use crate::meshopt::{project_update_pinned, MeshOptError};
use crate::par;
use crate::solver::{FreestreamSpec, SolveOptions, Solver, SolverError};
use crate::upsample::{build_plan, build_plan_inference, UpsampleError};

pub const NUM_FEATURES: usize = 5;
pub const NUM_OUTPUTS: usize = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("solver failed on {sample}: {source}")]
    Solver {
        sample: String,
        #[source]
        source: SolverError,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Upsample(#[from] UpsampleError),
    #[error(transparent)]
    MeshOpt(#[from] MeshOptError),
    #[error("coarse mesh: {0}")]
    CoarseMesh(SolverError),
    #[error("invalid flow condition: {0}")]
    FlowCondition(SolverError),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no mesh registered under `{0}`")]
    UnknownMesh(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Which model a run trains or evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// The full hybrid model.
    None,
    /// Upsampled coarse solve, no learning.
    Ucm,
    /// Graph convolutions only, no solver.
    Gcn,
    /// Full model with coarse coordinates held fixed.
    Frozen,
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "ucm" => Ok(Self::Ucm),
            "gcn" => Ok(Self::Gcn),
            "frozen" => Ok(Self::Frozen),
            _ => Err(format!("unknown baseline `{s}` (none|ucm|gcn|frozen)")),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Ucm => "ucm",
            Self::Gcn => "gcn",
            Self::Frozen => "frozen",
        })
    }
}

/// How per-sample errors are pooled into one RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmseMode {
    /// Over all field entries of all samples.
    Pooled,
    /// Square root of the mean per-sample MSE.
    PerSample,
}

impl FromStr for RmseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "per-sample" => Ok(Self::PerSample),
            _ => Err(format!("unknown rmse mode `{s}` (pooled|per-sample)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub coarse_iters: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub knn_k: usize,
    /// 1-based layer after whose activation the upsampled fields are appended.
    pub concat_layer: usize,
    pub num_layers: usize,
    pub num_upsample: usize,
    pub hidden: usize,
    pub baseline: Baseline,
    /// Pin coarse nodes on markers so the body and farfield keep their shape.
    pub freeze_boundary: bool,
    /// Pass coordinate updates through flip projection.
    pub project_updates: bool,
    pub cfl: f64,
    pub rmse_mode: RmseMode,
    /// Evaluate the test set every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 16,
            coarse_iters: 200,
            epochs: 1,
            max_steps: None,
            seed: 0,
            knn_k: crate::upsample::DEFAULT_K,
            concat_layer: 3,
            num_layers: 6,
            num_upsample: 1,
            hidden: 512,
            baseline: Baseline::None,
            freeze_boundary: true,
            project_updates: true,
            cfl: 0.8,
            rmse_mode: RmseMode::Pooled,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.coarse_iters == 0 || self.knn_k == 0 || self.hidden == 0 {
            return bad("batch_size, coarse_iters, knn_k and hidden must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.num_layers < 2 {
            return bad("need at least two layers");
        }
        if self.concat_layer == 0 || self.concat_layer >= self.num_layers {
            return bad("concat_layer must lie in 1..num_layers");
        }
        if self.num_upsample != 1 {
            return bad("only a single upsampling step is supported");
        }
        if !(self.cfl > 0.0) {
            return bad("cfl must be positive");
        }
        Ok(())
    }

    /// Set one field from its name and textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
            v.parse()
                .map_err(|_| PipelineError::Config(format!("bad value `{v}` for `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "coarse_iters" => self.coarse_iters = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = if v == "none" { None } else { Some(parse(key, v)?) },
            "seed" => self.seed = parse(key, v)?,
            "knn_k" => self.knn_k = parse(key, v)?,
            "concat_layer" => self.concat_layer = parse(key, v)?,
            "num_layers" => self.num_layers = parse(key, v)?,
            "num_upsample" => self.num_upsample = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "baseline" => self.baseline = v.parse().map_err(PipelineError::Config)?,
            "freeze_boundary" => self.freeze_boundary = parse(key, v)?,
            "project_updates" => self.project_updates = parse(key, v)?,
            "cfl" => self.cfl = parse(key, v)?,
            "rmse_mode" => self.rmse_mode = v.parse().map_err(PipelineError::Config)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            other => return Err(PipelineError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), PipelineError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every field as `key = value` lines; [`TrainConfig::apply_kv`] inverts it.
    pub fn to_kv(&self) -> String {
        let rmse = match self.rmse_mode {
            RmseMode::Pooled => "pooled",
            RmseMode::PerSample => "per-sample",
        };
        let max_steps = self.max_steps.map_or("none".to_string(), |n| n.to_string());
        format!(
            "lr = {}\nbatch_size = {}\ncoarse_iters = {}\nepochs = {}\nmax_steps = {max_steps}\n\
             seed = {}\nknn_k = {}\nconcat_layer = {}\nnum_layers = {}\nnum_upsample = {}\n\
             hidden = {}\nbaseline = {}\nfreeze_boundary = {}\nproject_updates = {}\ncfl = {}\n\
             rmse_mode = {rmse}\neval_every = {}\n",
            self.lr,
            self.batch_size,
            self.coarse_iters,
            self.epochs,
            self.seed,
            self.knn_k,
            self.concat_layer,
            self.num_layers,
            self.num_upsample,
            self.hidden,
            self.baseline,
            self.freeze_boundary,
            self.project_updates,
            self.cfl,
            self.eval_every,
        )
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            cfl: self.cfl,
            ..SolveOptions::fixed(self.coarse_iters)
        }
    }
}

/// A fine/coarse mesh pair with everything derived from its topology.
#[derive(Debug, Clone)]
pub struct Domain {
    pub id: String,
    pub fine: Mesh,
    pub coarse: Mesh,
    adj: NormalizedAdjacency,
    sdf: Vec<f64>,
    solver: Solver,
    coarse_tris: Vec<[usize; 3]>,
    coarse_boundary: BTreeSet<usize>,
}

impl Domain {
    /// Quads in either mesh are split into triangles.
    pub fn new(id: impl Into<String>, fine: &Mesh, coarse: &Mesh) -> Result<Self, PipelineError> {
        let fine = triangulate(fine)?;
        let coarse = triangulate(coarse)?;
        let adj = NormalizedAdjacency::from_graph(&build_graph(&fine)?);
        let sdf = signed_distance(&fine.nodes, &fine, "airfoil")?;
        let solver = Solver::new(&coarse).map_err(PipelineError::CoarseMesh)?;
        let coarse_tris = coarse.triangles()?;
        let coarse_boundary = coarse.markers.iter().flat_map(|m| m.nodes()).collect();
        Ok(Self {
            id: id.into(),
            fine,
            coarse,
            adj,
            sdf,
            solver,
            coarse_tris,
            coarse_boundary,
        })
    }

    pub fn features(&self, spec: &FreestreamSpec) -> Array2<f64> {
        features_from(&self.fine.nodes, &self.sdf, spec)
    }

    pub fn coarse_triangles(&self) -> &[[usize; 3]] {
        &self.coarse_tris
    }

    pub fn coarse_boundary(&self) -> &BTreeSet<usize> {
        &self.coarse_boundary
    }
}

fn features_from(nodes: &[Point], sdf: &[f64], spec: &FreestreamSpec) -> Array2<f64> {
    Array2::from_shape_fn((nodes.len(), NUM_FEATURES), |(i, j)| match j {
        0 => nodes[i][0],
        1 => nodes[i][1],
        2 => sdf[i],
        3 => spec.aoa,
        _ => spec.mach,
    })
}

/// Node features `(x, y, sdf, aoa_degrees, mach)`.
pub fn build_features(fine: &Mesh, spec: &FreestreamSpec) -> Result<Array2<f64>, PipelineError> {
    let sdf = signed_distance(&fine.nodes, fine, "airfoil")?;
    Ok(features_from(&fine.nodes, &sdf, spec))
}

/// Mean squared error over all entries.
pub fn loss_mse(y: &Array2<f64>, yhat: &Array2<f64>) -> Result<f64, PipelineError> {
    if y.dim() != yhat.dim() {
        return Err(PipelineError::ShapeMismatch {
            expected: y.dim(),
            got: yhat.dim(),
        });
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    CfdGcn,
    GcnOnly,
    Ucm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub layers: Vec<GcnLayer>,
    /// Trainable coarse coordinates per mesh id.
    pub coarse_nodes: BTreeMap<String, Vec<Point>>,
    pub frozen_mesh: bool,
    pub hidden_channels: usize,
    /// 1-based; 0 when nothing is concatenated.
    pub concat_layer: usize,
}

impl ModelParams {
    /// Fresh parameters for `cfg.baseline`, seeded from `cfg.seed`.
    pub fn init<'a>(
        cfg: &TrainConfig,
        domains: impl IntoIterator<Item = &'a Domain>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let kind = match cfg.baseline {
            Baseline::None | Baseline::Frozen => ModelKind::CfdGcn,
            Baseline::Gcn => ModelKind::GcnOnly,
            Baseline::Ucm => ModelKind::Ucm,
        };
        let concat = if kind == ModelKind::CfdGcn {
            cfg.concat_layer
        } else {
            0
        };
        let layers = if kind == ModelKind::Ucm {
            Vec::new()
        } else {
            (0..cfg.num_layers)
                .map(|i| {
                    let fan_in = match i {
                        0 => NUM_FEATURES,
                        _ if concat > 0 && i == concat => cfg.hidden + NUM_OUTPUTS,
                        _ => cfg.hidden,
                    };
                    let fan_out = if i + 1 == cfg.num_layers {
                        NUM_OUTPUTS
                    } else {
                        cfg.hidden
                    };
                    GcnLayer::new(fan_in, fan_out, &mut rng)
                })
                .collect()
        };
        let coarse_nodes = domains
            .into_iter()
            .map(|d| (d.id.clone(), d.coarse.nodes.clone()))
            .collect();
        Ok(Self {
            kind,
            layers,
            coarse_nodes,
            frozen_mesh: cfg.baseline == Baseline::Frozen,
            hidden_channels: cfg.hidden,
            concat_layer: concat,
        })
    }

    fn coarse_for(&self, domain: &Domain) -> Result<&[Point], PipelineError> {
        let nodes = self
            .coarse_nodes
            .get(&domain.id)
            .ok_or_else(|| PipelineError::UnknownMesh(domain.id.clone()))?;
        if nodes.len() != domain.coarse.num_nodes() {
            return Err(PipelineError::ShapeMismatch {
                expected: (domain.coarse.num_nodes(), 2),
                got: (nodes.len(), 2),
            });
        }
        Ok(nodes)
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn uses_solver(&self) -> bool {
        self.kind != ModelKind::GcnOnly
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fields: Array2<f64>,
    /// Coarse solve at the coarse nodes.
    pub coarse: Option<Array2<f64>>,
    /// Coarse solve interpolated to the fine nodes.
    pub upsampled: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    /// Gradient for the coarse coordinates of the sample's mesh.
    pub coarse: Vec<Point>,
}

fn sample_label(domain: &Domain, spec: &FreestreamSpec) -> String {
    format!("{} aoa={} mach={}", domain.id, spec.aoa, spec.mach)
}

struct CoarseTape {
    record: Option<crate::solver::ForwardRecord>,
    plan: crate::upsample::UpsamplePlan,
    values: Array2<f64>,
}

struct Tape {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
    coarse: Option<CoarseTape>,
}

fn coarse_path(
    domain: &Domain,
    nodes: &[Point],
    spec: &FreestreamSpec,
    cfg: &TrainConfig,
    record: bool,
    positions_needed: bool,
) -> Result<(CoarseTape, Array2<f64>), PipelineError> {
    let label = || sample_label(domain, spec);
    let opts = cfg.solve_options();
    let (values, rec) = if record {
        let (out, rec) = domain
            .solver
            .solve_recorded(nodes, spec, &opts)
            .map_err(|source| PipelineError::Solver {
                sample: label(),
                source,
            })?;
        (out.node_fields, Some(rec))
    } else {
        let out = domain
            .solver
            .solve(nodes, spec, &opts)
            .map_err(|source| PipelineError::Solver {
                sample: label(),
                source,
            })?;
        (out.node_fields, None)
    };
    let plan = if positions_needed {
        build_plan(&domain.fine.nodes, nodes, cfg.knn_k)?
    } else {
        build_plan_inference(&domain.fine.nodes, nodes, cfg.knn_k)?
    };
    let up = plan.apply(values.view())?;
    Ok((
        CoarseTape {
            record: rec,
            plan,
            values,
        },
        up,
    ))
}

/// Upsampled coarse solve, the UCM baseline.
pub fn predict_ucm(
    domain: &Domain,
    coarse_nodes: &[Point],
    spec: &FreestreamSpec,
    cfg: &TrainConfig,
) -> Result<Array2<f64>, PipelineError> {
    Ok(coarse_path(domain, coarse_nodes, spec, cfg, false, false)?.1)
}

fn run(
    params: &ModelParams,
    domain: &Domain,
    spec: &FreestreamSpec,
    cfg: &TrainConfig,
    train: bool,
) -> Result<(Prediction, Tape), PipelineError> {
    let mut tape = Tape {
        inputs: Vec::new(),
        outputs: Vec::new(),
        coarse: None,
    };
    let mut upsampled = None;
    if params.uses_solver() {
        let nodes = params.coarse_for(domain)?;
        let differentiate_mesh = train && !params.frozen_mesh;
        let (ct, up) = coarse_path(domain, nodes, spec, cfg, differentiate_mesh, differentiate_mesh)?;
        tape.coarse = Some(ct);
        upsampled = Some(up);
    }
    if params.kind == ModelKind::Ucm {
        let fields = upsampled.clone().expect("ucm uses the solver");
        let coarse = tape.coarse.as_ref().map(|c| c.values.clone());
        return Ok((
            Prediction {
                fields,
                coarse,
                upsampled,
            },
            tape,
        ));
    }

    let last = params.layers.len() - 1;
    let mut z = domain.features(spec);
    for (i, layer) in params.layers.iter().enumerate() {
        if params.concat_layer > 0 && i == params.concat_layer {
            let up = upsampled.as_ref().expect("concatenation needs the solver");
            z = concatenate(Axis(1), &[z.view(), up.view()]).expect("row counts agree");
        }
        let out = layer.forward(&domain.adj, z.view(), i != last)?;
        if train {
            tape.inputs.push(z);
            tape.outputs.push(out.clone());
        }
        z = out;
    }
    let coarse = tape.coarse.as_ref().map(|c| c.values.clone());
    Ok((
        Prediction {
            fields: z,
            coarse,
            upsampled,
        },
        tape,
    ))
}

pub fn forward(
    params: &ModelParams,
    domain: &Domain,
    spec: &FreestreamSpec,
    cfg: &TrainConfig,
) -> Result<Prediction, PipelineError> {
    Ok(run(params, domain, spec, cfg, false)?.0)
}

/// Loss and gradients for one sample.
pub fn forward_backward(
    params: &ModelParams,
    domain: &Domain,
    spec: &FreestreamSpec,
    target: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<(f64, ModelGrads), PipelineError> {
    let (pred, tape) = run(params, domain, spec, cfg, true)?;
    let loss = loss_mse(target, &pred.fields)?;
    let mut coarse = vec![[0.0; 2]; domain.coarse.num_nodes()];
    if params.kind == ModelKind::Ucm {
        return Ok((
            loss,
            ModelGrads {
                layers: Vec::new(),
                coarse,
            },
        ));
    }
    let scale = 2.0 / target.len() as f64;
    let mut g = (&pred.fields - target) * scale;
    let mut layer_grads = Vec::with_capacity(params.layers.len());
    let mut up_grad = None;
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let grads = layer.backward(
            &domain.adj,
            tape.inputs[i].view(),
            tape.outputs[i].view(),
            i != last,
            g.view(),
        )?;
        layer_grads.push((grads.weight, grads.bias));
        g = grads.input;
        if params.concat_layer > 0 && i == params.concat_layer {
            let h = params.hidden_channels;
            up_grad = Some(g.slice(s![.., h..]).to_owned());
            g = g.slice(s![.., ..h]).to_owned();
        }
    }
    layer_grads.reverse();

    if let (Some(gu), Some(ct), false) = (up_grad, tape.coarse.as_ref(), params.frozen_mesh) {
        let ug = ct.plan.apply_backward(ct.values.view(), gu.view())?;
        let rec = ct.record.as_ref().expect("recorded when the mesh is trained");
        let sg = domain
            .solver
            .backward(rec, ug.values.view())
            .map_err(|source| PipelineError::Solver {
                sample: sample_label(domain, spec),
                source,
            })?;
        for (c, (a, b)) in coarse.iter_mut().zip(ug.positions.iter().zip(&sg.nodes)) {
            c[0] = a[0] + b[0];
            c[1] = a[1] + b[1];
        }
    }
    Ok((
        loss,
        ModelGrads {
            layers: layer_grads,
            coarse,
        },
    ))
}

fn domain_for<'a>(
    domains: &'a BTreeMap<String, Domain>,
    sample: &FieldSample,
) -> Result<&'a Domain, PipelineError> {
    domains
        .get(&sample.mesh_id)
        .ok_or_else(|| PipelineError::UnknownMesh(sample.mesh_id.clone()))
}

fn pooled_rmse(mode: RmseMode, losses: &[(f64, usize)]) -> f64 {
    if losses.is_empty() {
        return f64::NAN;
    }
    match mode {
        RmseMode::Pooled => {
            let entries: usize = losses.iter().map(|l| l.1).sum();
            (losses.iter().map(|(l, n)| l * *n as f64).sum::<f64>() / entries as f64).sqrt()
        }
        RmseMode::PerSample => (losses.iter().map(|l| l.0).sum::<f64>() / losses.len() as f64).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    /// Per-sample MSE, `NaN` for samples that failed.
    pub per_sample: Vec<f64>,
    pub failed: Vec<usize>,
}

/// RMSE of `params` over `samples`. Samples whose coarse solve fails are
/// reported in `failed` and left out of the RMSE.
pub fn evaluate(
    params: &ModelParams,
    domains: &BTreeMap<String, Domain>,
    samples: &[FieldSample],
    cfg: &TrainConfig,
) -> Result<EvalReport, PipelineError> {
    let results = par::map(samples, |s| -> Result<f64, PipelineError> {
        let d = domain_for(domains, s)?;
        let pred = forward(
            params,
            d,
            &s.freestream().map_err(PipelineError::FlowCondition)?,
            cfg,
        )?;
        loss_mse(&s.fields, &pred.fields)
    });
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(l) => {
                per_sample.push(l);
                ok.push((l, samples[i].fields.len()));
            }
            Err(PipelineError::Solver { sample, source }) => {
                log::warn!("evaluation skipped {sample}: {source}");
                per_sample.push(f64::NAN);
                failed.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        rmse: pooled_rmse(cfg.rmse_mode, &ok),
        per_sample,
        failed,
    })
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub wall_seconds: f64,
    pub flipped_elements_zeroed: usize,
}

impl MetricRow {
    pub const HEADER: &'static str = "epoch,step,train_rmse,test_rmse,wall_seconds,flipped_elements_zeroed";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:.3},{}",
            self.epoch,
            self.step,
            self.train_rmse,
            self.test_rmse,
            self.wall_seconds,
            self.flipped_elements_zeroed
        )
    }

    /// The row without its timing column, for run-to-run comparison.
    pub fn deterministic_part(&self) -> (usize, usize, u64, u64, usize) {
        (
            self.epoch,
            self.step,
            self.train_rmse.to_bits(),
            self.test_rmse.to_bits(),
            self.flipped_elements_zeroed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub layers: Vec<[Adam; 2]>,
    pub coarse: BTreeMap<String, Adam>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| [Adam::new(l.weight.len(), lr), Adam::new(l.bias.len(), lr)])
                .collect(),
            coarse: params
                .coarse_nodes
                .iter()
                .map(|(k, v)| (k.clone(), Adam::new(2 * v.len(), lr)))
                .collect(),
            step: 0,
        }
    }
}

/// Passed to [`TrainObserver::on_step`] after every optimizer step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Mean loss over the batch samples that succeeded.
    pub batch_loss: f64,
    pub skipped: usize,
    pub flipped_elements_zeroed: usize,
    pub params: &'a ModelParams,
}

pub trait TrainObserver {
    fn on_step(&mut self, _event: &StepEvent<'_>) {}
    fn on_epoch(&mut self, _row: &MetricRow, _params: &ModelParams) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub metrics: Vec<MetricRow>,
    pub skipped_samples: usize,
}

fn apply_adam(adam: &mut Adam, params: &mut [f64], grad: &[f64], what: &str) {
    if let Err(e) = adam.step(params, grad) {
        log::warn!("skipped update of {what}: {e}");
    }
}

/// Train from `params` on `train`, logging test RMSE on `test`.
pub fn train(
    cfg: &TrainConfig,
    domains: &BTreeMap<String, Domain>,
    mut params: ModelParams,
    train: &[FieldSample],
    test: &[FieldSample],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    for s in train.iter().chain(test) {
        domain_for(domains, s)?;
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut opt = OptimizerState::new(&params, cfg.lr);
    let mut metrics = Vec::new();
    let mut skipped_total = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let trains = params.kind != ModelKind::Ucm;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 0..cfg.epochs {
        if opt.step >= budget {
            break;
        }
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        let mut epoch_flips = 0;
        for batch in order.chunks(cfg.batch_size) {
            if opt.step >= budget {
                break;
            }
            let results = par::map(batch, |&i| {
                let s = &train[i];
                let d = domain_for(domains, s)?;
                forward_backward(
                    &params,
                    d,
                    &s.freestream().map_err(PipelineError::FlowCondition)?,
                    &s.fields,
                    cfg,
                )
            });
            let mut ok: Vec<(usize, f64, ModelGrads)> = Vec::new();
            let mut skipped = 0;
            for (&i, r) in batch.iter().zip(results) {
                match r {
                    Ok((l, g)) => ok.push((i, l, g)),
                    Err(PipelineError::Solver { sample, source }) => {
                        log::warn!("training skipped {sample}: {source}");
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            skipped_total += skipped;
            let mut flips = 0;
            let batch_loss = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|o| o.1).sum::<f64>() / ok.len() as f64
            };
            if trains && !ok.is_empty() {
                let inv = 1.0 / ok.len() as f64;
                for (li, layer) in params.layers.iter_mut().enumerate() {
                    let mut gw = Array2::zeros(layer.weight.dim());
                    let mut gb = Array1::zeros(layer.bias.dim());
                    for (_, _, g) in &ok {
                        gw.scaled_add(inv, &g.layers[li].0);
                        gb.scaled_add(inv, &g.layers[li].1);
                    }
                    let [aw, ab] = &mut opt.layers[li];
                    apply_adam(
                        aw,
                        layer.weight.as_slice_mut().expect("standard layout"),
                        gw.as_slice().expect("standard layout"),
                        "weights",
                    );
                    apply_adam(
                        ab,
                        layer.bias.as_slice_mut().expect("standard layout"),
                        gb.as_slice().expect("standard layout"),
                        "bias",
                    );
                }
                if params.kind == ModelKind::CfdGcn && !params.frozen_mesh {
                    flips = update_coarse(cfg, domains, &mut params, &mut opt, train, &ok, inv)?;
                }
            }
            for (i, l, _) in &ok {
                epoch_losses.push((*l, train[*i].fields.len()));
            }
            epoch_flips += flips;
            opt.step += 1;
            observer.on_step(&StepEvent {
                epoch,
                step: opt.step,
                batch_loss,
                skipped,
                flipped_elements_zeroed: flips,
                params: &params,
            });
        }
        let last_epoch = epoch + 1 == cfg.epochs || opt.step >= budget;
        let test_rmse = if !test.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
            evaluate(&params, domains, test, cfg)?.rmse
        } else {
            f64::NAN
        };
        let row = MetricRow {
            epoch,
            step: opt.step,
            train_rmse: pooled_rmse(cfg.rmse_mode, &epoch_losses),
            test_rmse,
            wall_seconds: start.elapsed().as_secs_f64(),
            flipped_elements_zeroed: epoch_flips,
        };
        log::info!("{}", row.to_csv());
        observer.on_epoch(&row, &params);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        metrics,
        skipped_samples: skipped_total,
    })
}

/// Adam delta on each mesh's coarse coordinates, projected and applied.
/// Returns the number of flipped elements whose updates were zeroed.
fn update_coarse(
    cfg: &TrainConfig,
    domains: &BTreeMap<String, Domain>,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    train: &[FieldSample],
    ok: &[(usize, f64, ModelGrads)],
    inv: f64,
) -> Result<usize, PipelineError> {
    let mut grads: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (i, _, g) in ok {
        let id = train[*i].mesh_id.as_str();
        let acc = grads.entry(id).or_insert_with(|| vec![0.0; 2 * g.coarse.len()]);
        for (k, p) in g.coarse.iter().enumerate() {
            acc[2 * k] += inv * p[0];
            acc[2 * k + 1] += inv * p[1];
        }
    }
    let mut flips = 0;
    for (id, grad) in grads {
        let domain = &domains[id];
        let adam = opt
            .coarse
            .get_mut(id)
            .ok_or_else(|| PipelineError::UnknownMesh(id.into()))?;
        let raw = match adam.delta(&grad) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("skipped coarse update of {id}: {e}");
                continue;
            }
        };
        let nodes = params.coarse_nodes.get_mut(id).expect("initialized per domain");
        let mut delta: Vec<Point> = raw.chunks(2).map(|c| [c[0], c[1]]).collect();
        if cfg.freeze_boundary {
            for &n in domain.coarse_boundary() {
                delta[n] = [0.0, 0.0];
            }
        }
        if cfg.project_updates {
            let pinned = if cfg.freeze_boundary {
                domain.coarse_boundary().clone()
            } else {
                BTreeSet::new()
            };
            let p = project_update_pinned(nodes, &delta, domain.coarse_triangles(), &pinned)?;
            flips += p.flipped_elements;
            delta = p.projected;
        }
        for (n, d) in nodes.iter_mut().zip(&delta) {
            n[0] += d[0];
            n[1] += d[1];
        }
    }
    Ok(flips)
}

/// Signs of every coarse element orientation.
pub fn orientation_signs(nodes: &[Point], tris: &[[usize; 3]]) -> Vec<f64> {
    tris.iter()
        .map(|&[i, j, k]| orientation(nodes[i], nodes[j], nodes[k]).signum())
        .collect()
}

#[cfg(test)]
mod tests;
