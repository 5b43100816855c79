use super::*;
use crate::gradcheck::{central_difference, compare};
use crate::mesh::{Element, Marker};
use crate::meshgen::{self, Naca4};
use rand::{Rng, SeedableRng};

fn naca0012() -> Naca4 {
    Naca4::parse("0012").unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        coarse_iters: 30,
        hidden: 8,
        num_layers: 4,
        concat_layer: 2,
        ..TrainConfig::default()
    }
}

fn desk_domain() -> Domain {
    Domain::new(
        "naca0012",
        &meshgen::desk_fine(naca0012()).build(),
        &meshgen::desk_coarse(naca0012()).build(),
    )
    .unwrap()
}

fn domains(d: Domain) -> BTreeMap<String, Domain> {
    BTreeMap::from([(d.id.clone(), d)])
}

fn truth(d: &Domain, conditions: &[(f64, f64)]) -> Vec<FieldSample> {
    let solver = Solver::new(&d.fine).unwrap();
    let opts = SolveOptions {
        residual_tol: 1e-6,
        ..SolveOptions::converged()
    };
    conditions
        .iter()
        .map(|&(aoa, mach)| FieldSample {
            mesh_id: d.id.clone(),
            aoa,
            mach,
            fields: solver
                .solve(&d.fine.nodes, &FreestreamSpec::new(aoa, mach).unwrap(), &opts)
                .unwrap()
                .node_fields,
        })
        .collect()
}

/// Rectangle tagged farfield, with one bottom-edge segment also tagged
/// airfoil so distance features exist.
fn box_mesh(n: usize) -> Mesh {
    let mut m = meshgen::rectangle(n, n, [-1.0, -1.0], 2.0, 2.0, "farfield");
    m.markers.push(Marker::new("airfoil", vec![[0, 1]]));
    m
}

#[test]
fn features_of_a_single_node() {
    let m = Mesh::new(
        vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        vec![Element::Triangle([0, 1, 2])],
        vec![
            Marker::new("airfoil", vec![[0, 1]]),
            Marker::new("farfield", vec![[1, 2], [2, 0]]),
        ],
    )
    .unwrap();
    let f = build_features(&m, &FreestreamSpec::new(2.0, 0.3).unwrap()).unwrap();
    assert_eq!(f.dim(), (3, NUM_FEATURES));
    assert_eq!(f.row(2).to_vec(), vec![0.0, 1.0, 1.0, 2.0, 0.3]);
    assert_eq!(f[[0, 2]], 0.0);
}

#[test]
fn mse_examples() {
    let y = Array2::zeros((1, 3));
    assert_eq!(loss_mse(&y, &Array2::ones((1, 3))).unwrap(), 1.0);
    let y = Array2::zeros((2, 3));
    let yhat = ndarray::array![[1.0, 1.0, 1.0], [2.0, -1.0, 1.0]];
    assert_eq!(loss_mse(&y, &yhat).unwrap(), 1.5);
    assert!(matches!(
        loss_mse(&y, &Array2::zeros((3, 3))),
        Err(PipelineError::ShapeMismatch { .. })
    ));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            concat_layer: 6,
            ..TrainConfig::default()
        },
        TrainConfig {
            concat_layer: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            num_upsample: 2,
            ..TrainConfig::default()
        },
        TrainConfig {
            num_layers: 1,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))), "{bad:?}");
    }
    for b in ["none", "ucm", "gcn", "frozen"] {
        assert_eq!(b.parse::<Baseline>().unwrap().to_string(), b);
    }
    assert!("cnn".parse::<Baseline>().is_err());
    assert_eq!("per-sample".parse::<RmseMode>().unwrap(), RmseMode::PerSample);
}

#[test]
fn config_text_round_trip() {
    let cfg = TrainConfig {
        lr: 3e-4,
        max_steps: Some(40),
        baseline: Baseline::Frozen,
        rmse_mode: RmseMode::PerSample,
        freeze_boundary: false,
        ..TrainConfig::default()
    };
    let mut back = TrainConfig::default();
    back.apply_kv(&cfg.to_kv()).unwrap();
    assert_eq!(back, cfg);
    back.apply_kv("# comment\n\nepochs = 7  # trailing\nmax_steps = none\n")
        .unwrap();
    assert_eq!((back.epochs, back.max_steps), (7, None));
    assert!(back.apply_kv("epochs = seven").is_err());
    assert!(back.apply_kv("momentum = 0.9").is_err());
    assert!(back.apply_kv("epochs 3").is_err());
}

#[test]
fn layer_shapes() {
    let d = desk_domain();
    let cfg = TrainConfig {
        hidden: 16,
        ..TrainConfig::default()
    };
    let p = ModelParams::init(&cfg, [&d]).unwrap();
    let dims: Vec<(usize, usize)> = p.layers.iter().map(|l| l.weight.dim()).collect();
    assert_eq!(
        dims,
        vec![(5, 16), (16, 16), (16, 16), (19, 16), (16, 16), (16, 3)]
    );
    let g = ModelParams::init(
        &TrainConfig {
            baseline: Baseline::Gcn,
            ..cfg.clone()
        },
        [&d],
    )
    .unwrap();
    assert_eq!(g.layers[3].weight.dim(), (16, 16));
    let u = ModelParams::init(
        &TrainConfig {
            baseline: Baseline::Ucm,
            ..cfg
        },
        [&d],
    )
    .unwrap();
    assert_eq!(u.num_weights(), 0);
}

#[test]
fn zero_weights_predict_zero() {
    let d = desk_domain();
    let mut p = ModelParams::init(&small_cfg(), [&d]).unwrap();
    for l in &mut p.layers {
        l.weight.fill(0.0);
        l.bias.fill(0.0);
    }
    let pred = forward(&p, &d, &FreestreamSpec::new(3.0, 0.5).unwrap(), &small_cfg()).unwrap();
    assert_eq!(pred.fields.dim(), (d.fine.num_nodes(), 3));
    assert!(pred.fields.iter().all(|&v| v == 0.0));
    assert!(pred.upsampled.is_some());
}

#[test]
fn ucm_is_the_upsampled_solve() {
    let d = desk_domain();
    let cfg = small_cfg();
    let spec = FreestreamSpec::new(-4.0, 0.45).unwrap();
    let full = ModelParams::init(&cfg, [&d]).unwrap();
    let ucm = ModelParams::init(
        &TrainConfig {
            baseline: Baseline::Ucm,
            ..cfg.clone()
        },
        [&d],
    )
    .unwrap();
    let a = forward(&ucm, &d, &spec, &cfg).unwrap().fields;
    let b = predict_ucm(&d, &d.coarse.nodes, &spec, &cfg).unwrap();
    let c = forward(&full, &d, &spec, &cfg).unwrap().upsampled.unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn ucm_without_walls_is_freestream() {
    let d = Domain::new(
        "box",
        &box_mesh(6),
        &meshgen::rectangle(3, 3, [-1.0, -1.0], 2.0, 2.0, "farfield"),
    )
    .unwrap();
    let spec = FreestreamSpec::new(6.0, 0.55).unwrap();
    let y = predict_ucm(&d, &d.coarse.nodes, &spec, &small_cfg()).unwrap();
    let [u, v] = spec.velocity();
    for r in y.rows() {
        assert!((r[0] - u).abs() < 1e-12);
        assert!((r[1] - v).abs() < 1e-12);
        assert!((r[2] - 1.0 / 1.4).abs() < 1e-12);
    }
}

#[test]
fn ucm_on_identical_meshes_is_the_solve() {
    let fine = meshgen::desk_coarse(naca0012()).build();
    let d = Domain::new("same", &fine, &fine).unwrap();
    let cfg = small_cfg();
    let spec = FreestreamSpec::new(2.0, 0.4).unwrap();
    let y = predict_ucm(&d, &d.coarse.nodes, &spec, &cfg).unwrap();
    let direct = d
        .solver
        .solve(&d.coarse.nodes, &spec, &cfg.solve_options())
        .unwrap();
    assert_eq!(y, direct.node_fields);
}

fn permuted(m: &Mesh, perm: &[usize]) -> Mesh {
    // perm[old] = new
    let mut nodes = vec![[0.0; 2]; m.num_nodes()];
    for (old, &new) in perm.iter().enumerate() {
        nodes[new] = m.nodes[old];
    }
    let elements = m
        .elements
        .iter()
        .map(|e| match e {
            Element::Triangle(t) => Element::Triangle(t.map(|i| perm[i])),
            Element::Quad(q) => Element::Quad(q.map(|i| perm[i])),
        })
        .collect();
    let markers = m
        .markers
        .iter()
        .map(|mk| {
            Marker::new(
                mk.tag.clone(),
                mk.segments.iter().map(|s| s.map(|i| perm[i])).collect(),
            )
        })
        .collect();
    Mesh::new(nodes, elements, markers).unwrap()
}

#[test]
fn gcn_only_is_permutation_equivariant() {
    let fine = meshgen::tiny(naca0012(), 8, 4).build();
    let coarse = meshgen::tiny(naca0012(), 4, 3).build();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut perm: Vec<usize> = (0..fine.num_nodes()).collect();
    perm.shuffle(&mut rng);
    let a = Domain::new("m", &fine, &coarse).unwrap();
    let b = Domain::new("m", &permuted(&fine, &perm), &coarse).unwrap();
    let cfg = TrainConfig {
        baseline: Baseline::Gcn,
        ..small_cfg()
    };
    let p = ModelParams::init(&cfg, [&a]).unwrap();
    let spec = FreestreamSpec::new(1.0, 0.3).unwrap();
    let ya = forward(&p, &a, &spec, &cfg).unwrap();
    let yb = forward(&p, &b, &spec, &cfg).unwrap();
    assert!(ya.upsampled.is_none());
    for (old, &new) in perm.iter().enumerate() {
        for c in 0..3 {
            assert!((ya.fields[[old, c]] - yb.fields[[new, c]]).abs() < 1e-12);
        }
    }

    let full = ModelParams::init(&small_cfg(), [&a]).unwrap();
    let yf = forward(&full, &a, &spec, &small_cfg()).unwrap();
    assert_ne!(yf.fields, ya.fields);
}

#[test]
fn frozen_mesh_gets_no_gradient_and_stays_put() {
    let d = desk_domain();
    let samples = truth(&d, &[(2.0, 0.4), (-3.0, 0.3)]);
    let cfg = TrainConfig {
        baseline: Baseline::Frozen,
        max_steps: Some(3),
        epochs: 3,
        batch_size: 1,
        ..small_cfg()
    };
    let p = ModelParams::init(&cfg, [&d]).unwrap();
    assert!(p.frozen_mesh);
    let (_, g) = forward_backward(
        &p,
        &d,
        &samples[0].freestream().unwrap(),
        &samples[0].fields,
        &cfg,
    )
    .unwrap();
    assert!(g.coarse.iter().all(|c| c == &[0.0, 0.0]));
    let before = p.coarse_nodes.clone();
    let ds = domains(d);
    let out = train(&cfg, &ds, p.clone(), &samples, &[], &mut ()).unwrap();
    assert_eq!(out.params.coarse_nodes, before);
    assert_ne!(out.params.layers, p.layers);
}

#[test]
fn training_reduces_the_loss() {
    let d = desk_domain();
    let samples = truth(&d, &[(-2.0, 0.3), (0.0, 0.4), (3.0, 0.35), (5.0, 0.5)]);
    let cfg = TrainConfig {
        epochs: 50,
        ..small_cfg()
    };
    let ds = domains(d);
    let p = ModelParams::init(&cfg, ds.values()).unwrap();
    let before = evaluate(&p, &ds, &samples, &cfg).unwrap().rmse;
    let out = train(&cfg, &ds, p, &samples, &samples, &mut ()).unwrap();
    assert_eq!(out.optimizer.step, 50);
    assert_eq!(out.metrics.len(), 50);
    let after = evaluate(&out.params, &ds, &samples, &cfg).unwrap().rmse;
    assert!(after < 0.5 * before, "{before} -> {after}");
    assert_eq!(out.metrics.last().unwrap().test_rmse, after);
    assert_ne!(
        out.params.coarse_nodes,
        ModelParams::init(&cfg, ds.values()).unwrap().coarse_nodes
    );
}

struct SignWatch {
    tris: Vec<[usize; 3]>,
    worst: f64,
}

impl TrainObserver for SignWatch {
    fn on_step(&mut self, e: &StepEvent<'_>) {
        for nodes in e.params.coarse_nodes.values() {
            for s in orientation_signs(nodes, &self.tris) {
                self.worst = self.worst.min(s);
            }
        }
    }
}

#[test]
fn projection_prevents_flips_at_high_learning_rate() {
    let d = desk_domain();
    let samples = truth(&d, &[(4.0, 0.5)]);
    let tris = d.coarse_triangles().to_vec();
    let ds = domains(d);
    let cfg = TrainConfig {
        lr: 0.5,
        batch_size: 1,
        epochs: 5,
        ..small_cfg()
    };
    let p = ModelParams::init(&cfg, ds.values()).unwrap();

    let raw = TrainConfig {
        project_updates: false,
        ..cfg.clone()
    };
    let mut watch = SignWatch {
        tris: tris.clone(),
        worst: 1.0,
    };
    train(&raw, &ds, p.clone(), &samples, &[], &mut watch).unwrap();
    assert!(watch.worst < 0.0);

    let mut watch = SignWatch { tris, worst: 1.0 };
    let out = train(&cfg, &ds, p, &samples, &[], &mut watch).unwrap();
    assert_eq!(watch.worst, 1.0);
    assert!(
        out.metrics
            .iter()
            .map(|m| m.flipped_elements_zeroed)
            .sum::<usize>()
            > 0
    );
}

#[test]
fn boundary_nodes_stay_pinned() {
    let d = desk_domain();
    let samples = truth(&d, &[(4.0, 0.5)]);
    let boundary = d.coarse_boundary().clone();
    let ds = domains(d);
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 1,
        epochs: 3,
        ..small_cfg()
    };
    let p = ModelParams::init(&cfg, ds.values()).unwrap();
    let out = train(&cfg, &ds, p.clone(), &samples, &[], &mut ()).unwrap();
    let (a, b) = (&p.coarse_nodes["naca0012"], &out.params.coarse_nodes["naca0012"]);
    for n in 0..a.len() {
        assert_eq!(boundary.contains(&n), a[n] == b[n], "node {n}");
    }
}

#[test]
fn training_is_deterministic() {
    let d = desk_domain();
    let samples = truth(&d, &[(-2.0, 0.3), (0.0, 0.4), (3.0, 0.35)]);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 11,
        ..small_cfg()
    };
    let ds = domains(d);
    let run = || {
        let p = ModelParams::init(&cfg, ds.values()).unwrap();
        train(&cfg, &ds, p, &samples, &samples[..1], &mut ()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.params, b.params);
    let key = |o: &TrainOutcome| {
        o.metrics
            .iter()
            .map(MetricRow::deterministic_part)
            .collect::<Vec<_>>()
    };
    assert_eq!(key(&a), key(&b));
}

#[test]
fn max_steps_stops_mid_epoch() {
    let d = desk_domain();
    let samples = truth(&d, &[(-2.0, 0.3), (0.0, 0.4), (3.0, 0.35)]);
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 1,
        max_steps: Some(4),
        ..small_cfg()
    };
    let ds = domains(d);
    let p = ModelParams::init(&cfg, ds.values()).unwrap();
    let out = train(&cfg, &ds, p, &samples, &samples, &mut ()).unwrap();
    assert_eq!(out.optimizer.step, 4);
    assert_eq!(out.metrics.len(), 2);
    assert!(out.metrics[1].test_rmse.is_finite());
}

#[test]
fn evaluation_skips_failed_solves() {
    let good = desk_domain();
    let fine = meshgen::desk_fine(naca0012()).build();
    let bad = Domain::new("bad", &fine, &meshgen::desk_coarse(naca0012()).build()).unwrap();
    let mut samples = truth(&good, &[(1.0, 0.3)]);
    let mut other = samples[0].clone();
    other.mesh_id = "bad".into();
    samples.push(other);
    let cfg = small_cfg();
    let mut ds = domains(good);
    ds.insert("bad".into(), bad);
    let mut p = ModelParams::init(&cfg, ds.values()).unwrap();
    for n in p.coarse_nodes.get_mut("bad").unwrap() {
        n[0] = -n[0];
    }
    let r = evaluate(&p, &ds, &samples, &cfg).unwrap();
    assert_eq!(r.failed, vec![1]);
    assert!(r.per_sample[1].is_nan());
    assert_eq!(r.rmse, r.per_sample[0].sqrt());

    samples[1].mesh_id = "unknown".into();
    assert!(matches!(
        evaluate(&p, &ds, &samples, &cfg),
        Err(PipelineError::UnknownMesh(_))
    ));
}

#[test]
fn rmse_pooling_modes() {
    let losses = [(1.0, 1), (4.0, 3)];
    assert_eq!(pooled_rmse(RmseMode::Pooled, &losses), (13.0f64 / 4.0).sqrt());
    assert_eq!(pooled_rmse(RmseMode::PerSample, &losses), 2.5f64.sqrt());
    assert!(pooled_rmse(RmseMode::Pooled, &[]).is_nan());
}

#[test]
fn empty_training_set_is_rejected() {
    let ds = domains(desk_domain());
    let p = ModelParams::init(&small_cfg(), ds.values()).unwrap();
    assert!(matches!(
        train(&small_cfg(), &ds, p, &[], &[], &mut ()),
        Err(PipelineError::EmptyDataset)
    ));
}

#[test]
fn metric_row_csv() {
    let r = MetricRow {
        epoch: 2,
        step: 30,
        train_rmse: 0.5,
        test_rmse: f64::NAN,
        wall_seconds: 1.23456,
        flipped_elements_zeroed: 1,
    };
    assert_eq!(r.to_csv(), "2,30,5e-1,NaN,1.235,1");
    assert_eq!(
        MetricRow::HEADER.split(',').count(),
        r.to_csv().split(',').count()
    );
}

fn flatten(p: &ModelParams) -> Vec<f64> {
    p.layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

fn unflatten(p: &mut ModelParams, x: &[f64]) {
    let mut it = x.iter();
    for l in &mut p.layers {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = *it.next().unwrap();
        }
    }
}

/// Whole-model gradients against central differences on a fine mesh of
/// 24 nodes with a single coarse iteration.
#[test]
fn end_to_end_gradients_match_finite_differences() {
    let fine = meshgen::tiny(naca0012(), 6, 4).build();
    assert!(fine.num_nodes() <= 30);
    let mut coarse = meshgen::tiny(naca0012(), 4, 3).build();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in &mut coarse.nodes[4..8] {
        p[0] += rng.gen_range(-0.1..0.1);
        p[1] += rng.gen_range(-0.1..0.1);
    }
    let d = Domain::new("tiny", &fine, &coarse).unwrap();
    let cfg = TrainConfig {
        coarse_iters: 1,
        hidden: 4,
        num_layers: 3,
        concat_layer: 2,
        seed: 9,
        ..small_cfg()
    };
    let params = ModelParams::init(&cfg, [&d]).unwrap();
    let spec = FreestreamSpec::new(3.0, 0.5).unwrap();
    let target = Array2::from_shape_fn((fine.num_nodes(), 3), |(i, c)| {
        0.1 * (i as f64).sin() + c as f64 * 0.3
    });
    let (_, g) = forward_backward(&params, &d, &spec, &target, &cfg).unwrap();

    let loss_with =
        |p: &ModelParams| loss_mse(&target, &forward(p, &d, &spec, &cfg).unwrap().fields).unwrap();

    let w0 = flatten(&params);
    let fd_w = central_difference(
        |x| {
            let mut p = params.clone();
            unflatten(&mut p, x);
            loss_with(&p)
        },
        &w0,
        1e-6,
    );
    let an_w: Vec<f64> = g
        .layers
        .iter()
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
        .collect();
    let r = compare(&an_w, &fd_w, 1e-3);
    assert!(r.passes(1e-4), "weights {r:?}");

    // coordinate steps scale with the domain size, as in the solver checks
    let diameter = 2.0
        * coarse
            .nodes
            .iter()
            .map(|p| (p[0] - 0.5).hypot(p[1]))
            .fold(0.0, f64::max);
    let interior: Vec<usize> = (4..8).collect();
    let x0: Vec<f64> = interior.iter().flat_map(|&n| coarse.nodes[n]).collect();
    let fd_x = central_difference(
        |x| {
            let mut p = params.clone();
            let nodes = p.coarse_nodes.get_mut("tiny").unwrap();
            for (k, &n) in interior.iter().enumerate() {
                nodes[n] = [x[2 * k], x[2 * k + 1]];
            }
            loss_with(&p)
        },
        &x0,
        1e-6 * diameter,
    );
    let an_x: Vec<f64> = interior.iter().flat_map(|&n| g.coarse[n]).collect();
    assert!(an_x.iter().any(|v| v.abs() > 0.0));
    let r = compare(&an_x, &fd_x, 1e-3);
    assert!(r.passes(1e-4), "coarse nodes {r:?}");
}
