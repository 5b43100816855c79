//! Test RMSE of UCM, GCN-only, frozen-mesh and full models on the shipped
//! NACA0012 mesh pair after a fixed step budget.
//!
//! ```text
//! cargo run --release -p cfdgcn --example ordering -- generalization 0 1 2
//! ```
//!
//! Ground truth is cached under `$CFDGCN_DATA_ROOT` (default `data`).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use cfdgcn::data::{generate_ground_truth, make_split, DataStore, DEFAULT_MESH_ID};
use cfdgcn::mesh::{parse_su2, triangulate};
use cfdgcn::pipeline::{evaluate, train, Baseline, Domain, ModelParams, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let split_name = args.next().unwrap_or_else(|| "generalization".into());
    let seeds: Vec<u64> = args.map(|s| s.parse()).collect::<Result<_, _>>()?;
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };

    let meshes = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../meshes");
    let read = |name: &str| -> Result<_, Box<dyn std::error::Error>> {
        Ok(parse_su2(&std::fs::read_to_string(meshes.join(name))?)?)
    };
    let id = DEFAULT_MESH_ID;
    let fine = triangulate(&read("naca0012_fine.su2")?)?;
    let coarse = read("naca0012_coarse.su2")?;
    let store = DataStore::new(std::env::var("CFDGCN_DATA_ROOT").unwrap_or_else(|_| "data".into()));
    let split = make_split(&split_name, id, &[])?;
    let conditions: Vec<(f64, f64)> = split
        .train
        .iter()
        .chain(&split.test)
        .map(|e| (e.aoa, e.mach))
        .collect();
    let report = generate_ground_truth(&store, id, &fine, &conditions, 1e-8, 20000)?;
    eprintln!(
        "ground truth: solved {} cached {} failed {}",
        report.solved,
        report.cached,
        report.failed.len()
    );
    let by_id = BTreeMap::from([(id.to_string(), fine.clone())]);
    let train_set = store.load_entries(&split.train, &by_id)?;
    let test_set = store.load_entries(&split.test, &by_id)?;
    let domains = BTreeMap::from([(id.to_string(), Domain::new(id, &fine, &coarse)?)]);

    println!("split,seed,baseline,train_rmse,test_rmse,seconds");
    for &seed in &seeds {
        for baseline in [Baseline::Ucm, Baseline::Gcn, Baseline::Frozen, Baseline::None] {
            let cfg = TrainConfig {
                hidden: 128,
                lr: 3e-3,
                batch_size: 16,
                epochs: 1000,
                max_steps: Some(500),
                eval_every: 1000,
                seed,
                baseline,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let mut params = ModelParams::init(&cfg, domains.values())?;
            if baseline != Baseline::Ucm {
                params = train(&cfg, &domains, params, &train_set, &[], &mut ())?.params;
            }
            let tr = evaluate(&params, &domains, &train_set, &cfg)?.rmse;
            let te = evaluate(&params, &domains, &test_set, &cfg)?.rmse;
            let secs = start.elapsed().as_secs_f64();
            println!("{split_name},{seed},{baseline},{tr:.4e},{te:.4e},{secs:.1}");
        }
    }
    Ok(())
}
