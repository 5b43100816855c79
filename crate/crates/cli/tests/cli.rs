use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn meshes() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../meshes")
}

fn cfdgcn(args: &[&str], data_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfdgcn"))
        .args(args)
        .env("CFDGCN_DATA_ROOT", data_root)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_code(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const ONE_TRIANGLE: &str = "NDIME= 2
NELEM= 1
5 0 1 2 0
NPOIN= 3
0 0 0
1 0 1
0 1 2
NMARK= 2
MARKER_TAG= airfoil
MARKER_ELEMS= 1
3 0 1
MARKER_TAG= farfield
MARKER_ELEMS= 2
3 1 2
3 2 0
";

#[test]
fn mesh_info_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.su2");
    fs::write(&path, ONE_TRIANGLE).unwrap();
    let o = cfdgcn(&["mesh-info", s(&path)], dir.path());
    assert_code(&o, 0);
    let out = stdout(&o);
    assert!(out.contains("nodes 3\n"), "{out}");
    assert!(out.contains("elements 1\n"), "{out}");
    assert!(out.contains("marker airfoil segments 1"), "{out}");
    assert!(out.contains("orientation positive 1 negative 0"), "{out}");

    let o = cfdgcn(&["mesh-info", s(&dir.path().join("missing.su2"))], dir.path());
    assert_code(&o, 2);
}

#[test]
fn convert_writes_a_new_file_only() {
    let dir = tempfile::tempdir().unwrap();
    let input = meshes().join("naca0012_coarse.su2");
    let before = fs::read(&input).unwrap();
    let out = dir.path().join("tri.su2");
    assert_code(&cfdgcn(&["convert", s(&input), "--out", s(&out)], dir.path()), 0);
    assert_eq!(fs::read(&input).unwrap(), before);
    let o = cfdgcn(&["mesh-info", s(&out)], dir.path());
    assert!(stdout(&o).contains("elements 128\nquads 0\n"), "{}", stdout(&o));

    assert_code(&cfdgcn(&["convert", s(&input)], dir.path()), 1);
    assert_code(&cfdgcn(&["convert", s(&out), "--out", s(&out)], dir.path()), 1);
}

#[test]
fn gradcheck_on_shipped_tiny_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let fine = meshes().join("tiny_fine.su2");
    let coarse = meshes().join("tiny_coarse.su2");
    let args = ["gradcheck", "--mesh", s(&fine), "--coarse-mesh", s(&coarse)];
    let o = cfdgcn(&[&args[..], &["--max-rel-err", "1e-4"]].concat(), dir.path());
    assert_code(&o, 0);
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(" ok")).count(), 8);
    let o = cfdgcn(&[&args[..], &["--max-rel-err", "1e-30"]].concat(), dir.path());
    assert_code(&o, 4);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["train", "--baseline", "cnn"],
        &["train", "--split", "extrapolation"],
        &["train", "--lr", "-1"],
        &["train", "--set", "momentum=0.9"],
        &["eval", "--stride", "0"],
        &["predict", "--aoa", "95", "--mach", "0.5", "--out", "x.csv"],
        &[],
    ] {
        let o = cfdgcn(args, dir.path());
        assert_code(&o, 1);
    }
    assert_code(&cfdgcn(&["--help"], dir.path()), 0);
}

#[test]
fn missing_ground_truth_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfdgcn(
        &[
            "train",
            "--mesh-dir",
            s(&meshes()),
            "--out",
            s(&dir.path().join("run")),
        ],
        dir.path(),
    );
    assert_code(&o, 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));
}

#[test]
fn inverted_coarse_mesh_is_a_solver_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(meshes().join("tiny_coarse.su2")).unwrap();
    let mut mesh = cfdgcn::mesh::parse_su2(&text).unwrap();
    for p in &mut mesh.nodes {
        p[0] = -p[0];
    }
    let bad = dir.path().join("bad.su2");
    fs::write(&bad, cfdgcn::mesh::write_su2(&mesh)).unwrap();
    let fine = meshes().join("tiny_fine.su2");
    let o = cfdgcn(
        &[
            "predict",
            "--mesh",
            s(&fine),
            "--coarse-mesh",
            s(&bad),
            "--aoa",
            "2",
            "--mach",
            "0.4",
            "--out",
            s(&dir.path().join("p.csv")),
        ],
        dir.path(),
    );
    assert_code(&o, 3);
}

/// Metric log without its timing column.
fn metrics_without_time(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let t = header.iter().position(|h| *h == "wall_seconds").unwrap();
    text.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.remove(t);
            cols.join(",")
        })
        .collect()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let m = meshes();
    let mesh_dir = ["--mesh-dir", s(&m)];
    let split = ["--split", "generalization", "--stride", "10"];

    let o = cfdgcn(&[&["gen-data"][..], &mesh_dir, &split].concat(), &root);
    assert_code(&o, 0);
    assert!(
        stdout(&o).contains("naca0012: solved 24 cached 0 failed 0"),
        "{}",
        stdout(&o)
    );
    assert!(root.join("splits/generalization.csv").exists());
    assert_eq!(root.join("naca0012").read_dir().unwrap().count(), 24);
    let o = cfdgcn(&[&["gen-data"][..], &mesh_dir, &split].concat(), &root);
    assert!(stdout(&o).contains("solved 0 cached 24"), "{}", stdout(&o));

    let config = dir.path().join("train.cfg");
    fs::write(
        &config,
        "# small run\nepochs = 1\nhidden = 8\nnum_layers = 4\nconcat_layer = 2\n",
    )
    .unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = cfdgcn(
            &[
                &["train"][..],
                &mesh_dir,
                &split,
                &[
                    "--config",
                    s(&config),
                    "--epochs",
                    "2",
                    "--seed",
                    "7",
                    "--batch-size",
                    "8",
                ],
                &["--coarse-iters", "50", "--out", s(&out)],
            ]
            .concat(),
            &root,
        );
        assert_code(&o, 0);
        runs.push(out);
    }
    let (a, b) = (
        metrics_without_time(&runs[0].join("metrics.csv")),
        metrics_without_time(&runs[1].join("metrics.csv")),
    );
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    let cfg = fs::read_to_string(runs[0].join("config.txt")).unwrap();
    assert!(cfg.contains("epochs = 2\n") && cfg.contains("hidden = 8\n") && cfg.contains("seed = 7\n"));
    let ckpt = runs[0].join("checkpoint.json");
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        fs::read(runs[1].join("checkpoint.json")).unwrap()
    );

    let o = cfdgcn(
        &[&["eval"][..], &mesh_dir, &split, &["--checkpoint", s(&ckpt)]].concat(),
        &root,
    );
    assert_code(&o, 0);
    assert!(stdout(&o).contains("samples 9 failed 0"), "{}", stdout(&o));
    let per_sample = dir.path().join("ucm.csv");
    let o = cfdgcn(
        &[&["eval"][..], &mesh_dir, &split, &["--out", s(&per_sample)]].concat(),
        &root,
    );
    assert_code(&o, 0);
    assert_eq!(fs::read_to_string(&per_sample).unwrap().lines().count(), 10);

    let fld = dir.path().join("pred.fld");
    let o = cfdgcn(
        &[
            &["predict"][..],
            &mesh_dir,
            &[
                "--checkpoint",
                s(&ckpt),
                "--aoa",
                "-3",
                "--mach",
                "0.6",
                "--out",
                s(&fld),
            ],
        ]
        .concat(),
        &root,
    );
    assert_code(&o, 0);
    let fine = m.join("naca0012_fine.su2");
    let csv = dir.path().join("pred.csv");
    let o = cfdgcn(
        &[
            "export-fields",
            "--input",
            s(&fld),
            "--mesh",
            s(&fine),
            "--out",
            s(&csv),
        ],
        &root,
    );
    assert_code(&o, 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,vx,vy,p"));
    assert_eq!(text.lines().count(), 625);

    let truth = dir.path().join("truth.csv");
    let o = cfdgcn(
        &[
            "export-fields",
            "--mesh",
            s(&fine),
            "--aoa",
            "-10",
            "--mach",
            "0.2",
            "--out",
            s(&truth),
        ],
        &root,
    );
    assert_code(&o, 0);
    let other = m.join("naca4412_fine.su2");
    let o = cfdgcn(
        &[
            "export-fields",
            "--input",
            s(&fld),
            "--mesh",
            s(&other),
            "--out",
            s(&csv),
        ],
        &root,
    );
    assert_code(&o, 2);
}
