//! Finite-difference gradient checking.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gnn::{GcnLayer, NormalizedAdjacency};
use crate::mesh::{build_graph, knn, triangulate, Mesh, Point};
use crate::pipeline::{forward, forward_backward, loss_mse, Domain, ModelParams, TrainConfig};
use crate::solver::{FreestreamSpec, SolveOptions, Solver};
use crate::upsample::{build_plan, build_plan_inference};
use crate::Error;

/// Central differences of `f` at `x` with step `h * max(|x_i|, 1)`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            xs[i] = x[i] + step;
            let fp = f(&xs);
            xs[i] = x[i] - step;
            let fm = f(&xs);
            xs[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Per-component relative error `|a - f| / max(|a|, |f|, floor)`, where
/// `floor = floor_frac * max_i |f_i|` keeps round-off on near-zero entries
/// from dominating.
pub fn compare(analytic: &[f64], fd: &[f64], floor_frac: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), fd.len());
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (floor_frac * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: analytic.len(),
    };
    for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
        let err = (a - f).abs() / a.abs().max(f.abs()).max(floor);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = i;
        }
    }
    report
}

/// One named gradient comparison with the bound it is expected to meet.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl Check {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

fn diameter(nodes: &[Point]) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in nodes {
        for i in 0..2 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    (hi[0] - lo[0]).hypot(hi[1] - lo[1])
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn flat(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| [p[0], p[1]]).collect()
}

fn unflat(x: &[f64]) -> Vec<Point> {
    x.chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Coarse nodes that coincide with a fine node. Their interpolation weight
/// is a hard copy, so they are left out of position checks.
fn coincident(fine: &[Point], coarse: &[Point]) -> BTreeSet<usize> {
    coarse
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            fine.iter()
                .any(|f| (f[0] - c[0]).powi(2) + (f[1] - c[1]).powi(2) < crate::upsample::SNAP_DIST2)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Coarse nodes tied for the last neighbor slot of some fine node. Any
/// perturbation swaps the neighbor set there, so the map is not
/// differentiable in their positions.
fn tied(fine: &[Point], coarse: &[Point], k: usize) -> Result<BTreeSet<usize>, Error> {
    let mut out = BTreeSet::new();
    if coarse.len() <= k {
        return Ok(out);
    }
    for hits in knn(fine, coarse, k + 1)? {
        let (a, b) = (hits[k - 1], hits[k]);
        if b.dist2 - a.dist2 <= 1e-9 * b.dist2 {
            out.extend([a.index, b.index]);
        }
    }
    Ok(out)
}

/// Solver reverse pass against central differences over every node
/// coordinate and both flow parameters, for `iterations` unrolled steps.
pub fn solver_check(mesh: &Mesh, iterations: usize, seed: u64) -> Result<Check, Error> {
    let mesh = triangulate(mesh)?;
    let solver = Solver::new(&mesh)?;
    let opts = SolveOptions::fixed(iterations);
    let spec = FreestreamSpec::new(3.0, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cot = random_matrix(mesh.num_nodes(), 3, &mut rng);
    let (_, rec) = solver.solve_recorded(&mesh.nodes, &spec, &opts)?;
    let g = solver.backward(&rec, cot.view())?;
    let n = mesh.num_nodes();
    let loss = |x: &[f64]| {
        let s = FreestreamSpec::new(x[2 * n], x[2 * n + 1]).expect("valid near the base point");
        let out = solver
            .solve(&unflat(&x[..2 * n]), &s, &opts)
            .expect("valid near the base point");
        (&out.node_fields * &cot).sum()
    };
    let mut x = flat(&mesh.nodes);
    x.extend([spec.aoa, spec.mach]);
    let fd = central_difference(loss, &x, 1e-6 * diameter(&mesh.nodes));
    let mut an = flat(&g.nodes);
    an.extend([g.aoa, g.mach]);
    Ok(Check {
        name: "solver",
        tolerance: 1e-4,
        report: compare(&an, &fd, 1e-3),
    })
}

/// One ReLU graph convolution on the graph of `mesh`: weight, bias and
/// input gradients.
pub fn gcn_check(mesh: &Mesh, seed: u64) -> Result<Vec<Check>, Error> {
    let adj = NormalizedAdjacency::from_graph(&build_graph(&triangulate(mesh)?)?);
    let n = adj.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = GcnLayer::new(4, 3, &mut rng);
    let z = random_matrix(n, 4, &mut rng);
    let cot = random_matrix(n, 3, &mut rng);
    let out = layer.forward(&adj, z.view(), true)?;
    let g = layer.backward(&adj, z.view(), out.view(), true, cot.view())?;
    let eval = |l: &GcnLayer, z: &Array2<f64>| {
        (&l.forward(&adj, z.view(), true).expect("shapes fixed") * &cot).sum()
    };

    let w0: Vec<f64> = layer.weight.iter().copied().collect();
    let fd_w = central_difference(
        |x| {
            let mut l = layer.clone();
            l.weight.iter_mut().zip(x).for_each(|(w, v)| *w = *v);
            eval(&l, &z)
        },
        &w0,
        1e-6,
    );
    let b0 = layer.bias.to_vec();
    let fd_b = central_difference(
        |x| {
            let mut l = layer.clone();
            l.bias.iter_mut().zip(x).for_each(|(w, v)| *w = *v);
            eval(&l, &z)
        },
        &b0,
        1e-6,
    );
    let z0: Vec<f64> = z.iter().copied().collect();
    let fd_z = central_difference(
        |x| {
            eval(
                &layer,
                &Array2::from_shape_vec(z.dim(), x.to_vec()).expect("same shape"),
            )
        },
        &z0,
        1e-6,
    );
    let to_vec = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
    Ok(vec![
        Check {
            name: "gcn weights",
            tolerance: 1e-6,
            report: compare(&to_vec(&g.weight), &fd_w, 1e-3),
        },
        Check {
            name: "gcn bias",
            tolerance: 1e-6,
            report: compare(&g.bias.to_vec(), &fd_b, 1e-3),
        },
        Check {
            name: "gcn input",
            tolerance: 1e-6,
            report: compare(&to_vec(&g.input), &fd_z, 1e-3),
        },
    ])
}

/// Interpolation from `coarse` to `fine` nodes: value gradients (linear)
/// and coarse position gradients.
pub fn upsample_check(fine: &Mesh, coarse: &Mesh, seed: u64) -> Result<Vec<Check>, Error> {
    let k = crate::upsample::DEFAULT_K;
    let plan = build_plan(&fine.nodes, &coarse.nodes, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = random_matrix(coarse.num_nodes(), 3, &mut rng);
    let cot = random_matrix(fine.num_nodes(), 3, &mut rng);
    let g = plan.apply_backward(values.view(), cot.view())?;

    let v0: Vec<f64> = values.iter().copied().collect();
    let fd_v = central_difference(
        |x| {
            let v = Array2::from_shape_vec(values.dim(), x.to_vec()).expect("same shape");
            (&plan.apply(v.view()).expect("shapes fixed") * &cot).sum()
        },
        &v0,
        1.0,
    );

    let mut skip = coincident(&fine.nodes, &coarse.nodes);
    skip.extend(tied(&fine.nodes, &coarse.nodes, k)?);
    let free: Vec<usize> = (0..coarse.num_nodes()).filter(|i| !skip.contains(i)).collect();
    let p0: Vec<f64> = free.iter().flat_map(|&i| coarse.nodes[i]).collect();
    let fd_p = central_difference(
        |x| {
            let mut nodes = coarse.nodes.clone();
            for (j, &i) in free.iter().enumerate() {
                nodes[i] = [x[2 * j], x[2 * j + 1]];
            }
            let p = build_plan_inference(&fine.nodes, &nodes, k).expect("nonempty");
            (&p.apply(values.view()).expect("shapes fixed") * &cot).sum()
        },
        &p0,
        1e-6 * diameter(&coarse.nodes),
    );
    let an_p: Vec<f64> = free.iter().flat_map(|&i| g.positions[i]).collect();
    Ok(vec![
        Check {
            name: "upsample values",
            tolerance: 1e-6,
            report: compare(&g.values.iter().copied().collect::<Vec<_>>(), &fd_v, 1e-3),
        },
        Check {
            name: "upsample positions",
            tolerance: 1e-4,
            report: compare(&an_p, &fd_p, 1e-3),
        },
    ])
}

/// The whole model with a single coarse iteration: all layer parameters,
/// and the coarse coordinates off the markers.
pub fn pipeline_check(fine: &Mesh, coarse: &Mesh, seed: u64) -> Result<Vec<Check>, Error> {
    let domain = Domain::new("check", fine, coarse)?;
    let cfg = TrainConfig {
        coarse_iters: 1,
        hidden: 4,
        num_layers: 3,
        concat_layer: 2,
        seed,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(&cfg, [&domain])?;
    let spec = FreestreamSpec::new(3.0, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let target = random_matrix(domain.fine.num_nodes(), 3, &mut rng);
    let (_, g) = forward_backward(&params, &domain, &spec, &target, &cfg)?;
    let loss = |p: &ModelParams| {
        let y = forward(p, &domain, &spec, &cfg)
            .expect("valid near the base point")
            .fields;
        loss_mse(&target, &y).expect("shapes fixed")
    };

    let w0: Vec<f64> = params
        .layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect();
    let fd_w = central_difference(
        |x| {
            let mut p = params.clone();
            let mut it = x.iter();
            for l in &mut p.layers {
                for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                    *v = *it.next().expect("same length");
                }
            }
            loss(&p)
        },
        &w0,
        1e-6,
    );
    let an_w: Vec<f64> = g
        .layers
        .iter()
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
        .collect();

    let pinned = domain.coarse_boundary();
    let mut skip = coincident(&domain.fine.nodes, &domain.coarse.nodes);
    skip.extend(tied(&domain.fine.nodes, &domain.coarse.nodes, cfg.knn_k)?);
    let free: Vec<usize> = (0..domain.coarse.num_nodes())
        .filter(|i| !pinned.contains(i) && !skip.contains(i))
        .collect();
    let x0: Vec<f64> = free.iter().flat_map(|&i| domain.coarse.nodes[i]).collect();
    let fd_x = central_difference(
        |x| {
            let mut p = params.clone();
            let nodes = p.coarse_nodes.get_mut("check").expect("initialized");
            for (j, &i) in free.iter().enumerate() {
                nodes[i] = [x[2 * j], x[2 * j + 1]];
            }
            loss(&p)
        },
        &x0,
        1e-6 * diameter(&domain.coarse.nodes),
    );
    let an_x: Vec<f64> = free.iter().flat_map(|&i| g.coarse[i]).collect();
    Ok(vec![
        Check {
            name: "pipeline weights",
            tolerance: 1e-4,
            report: compare(&an_w, &fd_w, 1e-3),
        },
        Check {
            name: "pipeline coarse nodes",
            tolerance: 1e-4,
            report: compare(&an_x, &fd_x, 1e-3),
        },
    ])
}

/// Every suite on a fine/coarse pair: the solver runs on the coarse mesh
/// with two iterations, the GCN on the coarse mesh graph.
pub fn run_all(fine: &Mesh, coarse: &Mesh, seed: u64) -> Result<Vec<Check>, Error> {
    let mut out = vec![solver_check(coarse, 2, seed)?];
    out.extend(gcn_check(coarse, seed)?);
    out.extend(upsample_check(fine, coarse, seed)?);
    out.extend(pipeline_check(fine, coarse, seed)?);
    Ok(out)
}
