//! End-to-end checks of the command-line surface: artifacts, exit codes and
//! flag handling, driving the real binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rpgan"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_ring_cfg(dir: &Path, out: &Path, steps: usize, seed: u64) -> std::path::PathBuf {
    let cfg = format!(
        "arch.kind = mlp\narch.z_dim = 8\narch.hidden = 16,16\narch.out_dim = 2\narch.m = 4,4,4\n\
         train.steps = {steps}\ntrain.seed = {seed}\ntrain.diversity_weight = 0.05\n\
         data.kind = ring\ndata.count = 1024\nout.dir = {}\n",
        out.display()
    );
    let path = dir.join(format!("ring_{seed}.cfg"));
    std::fs::write(&path, cfg).unwrap();
    path
}

fn write_linear_cfg(dir: &Path, out: &Path) -> std::path::PathBuf {
    let cfg = format!(
        "arch.kind = linear\narch.shapes = 16,16,24,32,20,16\narch.m = 4,4,4,3,3\n\
         train.steps = 0\ntrain.seed = 2\ndata.kind = ring\nout.dir = {}\n",
        out.display()
    );
    let path = dir.join("linear.cfg");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn train_produces_artifacts_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_ring_cfg(dir.path(), &out, 50, 1);
    let res = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(out.join("checkpoint.rpgn").exists());
    assert!(out.join("report.csv").exists());
    assert!(out.join("resolved.cfg").exists());
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("step,loss_d,loss_g,diversity_term\n"));
    assert_eq!(report.lines().count(), 51);

    // the resolved config reproduces the run when fed back in
    let resolved = std::fs::read_to_string(out.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("train.lr = 0.00025"));
    assert!(resolved.contains("train.beta1 = 0.5"));
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    // missing dataset path for idx data
    let bad = dir.path().join("bad.cfg");
    std::fs::write(
        &bad,
        "arch.kind = mlp\narch.z_dim = 4\narch.hidden = 8\narch.out_dim = 2\narch.m = 2,2\n\
         train.steps = 1\ndata.kind = idx\nout.dir = x\n",
    )
    .unwrap();
    let res = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("data.path"));

    // unknown key
    let unknown = dir.path().join("unknown.cfg");
    std::fs::write(
        &unknown,
        "arch.kind = mlp\narch.z_dim = 4\narch.hidden = 8\narch.out_dim = 2\narch.m = 2,2\n\
         train.steps = 1\ntrain.bogus = 1\ndata.kind = ring\nout.dir = x\n",
    )
    .unwrap();
    let res = run(&["train", "--config", unknown.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("train.bogus"));
}

#[test]
fn fuse_rejects_nonlinear_ranges_and_impossible_tolerances() {
    let dir = tempfile::tempdir().unwrap();

    // a relu generator cannot fuse: exit 2 naming the bucket
    let mlp_out = dir.path().join("mlp");
    let cfg = write_ring_cfg(dir.path(), &mlp_out, 0, 3);
    assert!(run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let ck = mlp_out.join("checkpoint.rpgn");
    let res = run(&[
        "fuse",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--range",
        "1..2",
        "--count",
        "4",
        "--out",
        dir.path().join("f0").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("bucket 0"));

    // a linear generator fuses; an unreachable tolerance exits 4 with the diff
    let lin_out = dir.path().join("lin");
    let lcfg = write_linear_cfg(dir.path(), &lin_out);
    assert!(run(&["train", "--config", lcfg.to_str().unwrap()])
        .status
        .success());
    let lck = lin_out.join("checkpoint.rpgn");
    let fuse_out = dir.path().join("f1");
    let res = run(&[
        "fuse",
        "--checkpoint",
        lck.to_str().unwrap(),
        "--range",
        "3..5",
        "--count",
        "8",
        "--out",
        fuse_out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(fuse_out.join("fused.rpgn").exists());
    let bench = std::fs::read_to_string(fuse_out.join("bench.csv")).unwrap();
    assert!(bench.starts_with("variant,batch,ns_per_image,flops,speedup\n"));

    let res = run(&[
        "fuse",
        "--checkpoint",
        lck.to_str().unwrap(),
        "--range",
        "3..5",
        "--count",
        "8",
        "--tolerance",
        "0",
        "--out",
        dir.path().join("f2").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&res.stderr).contains("max abs diff"));
}

#[test]
fn analyze_reports_unit_first_bucket_and_route_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_ring_cfg(dir.path(), &out, 30, 4);
    assert!(run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let an = dir.path().join("an");
    let res = run(&[
        "analyze",
        "--checkpoint",
        out.join("checkpoint.rpgn").to_str().unwrap(),
        "--metric",
        "pixel",
        "--routes",
        "25",
        "--per-bucket",
        "3",
        "--out",
        an.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let csv = std::fs::read_to_string(an.join("diversity.csv")).unwrap();
    let first = csv.lines().nth(1).unwrap();
    assert!(
        first.starts_with("1,pixel,1,0"),
        "first bucket row: {first}"
    );
    assert!(csv.contains("routes_used=25 routes_skipped=0"));
}

#[test]
fn sweep_accepts_the_full_grid_and_dedups() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let cfg = write_ring_cfg(dir.path(), &out, 20, 5);
    let res = bin()
        .args([
            "sweep-nin",
            "--config",
            cfg.to_str().unwrap(),
            "--values",
            "5,10,15,20,25,30,35,40,45,50,5",
        ])
        .output()
        .unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(String::from_utf8_lossy(&res.stderr).contains("duplicate"));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11, "header plus ten values");
    for v in [5, 10, 50] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{v},"))));
        assert!(out.join(format!("nin_{v}/checkpoint.rpgn")).exists());
    }
}

#[test]
fn generate_is_byte_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_ring_cfg(dir.path(), &out, 20, 8);
    assert!(run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let ck = out.join("checkpoint.rpgn");
    let (g1, g2) = (dir.path().join("g1"), dir.path().join("g2"));
    for g in [&g1, &g2] {
        let res = run(&[
            "generate",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--count",
            "12",
            "--seed",
            "5",
            "--out",
            g.to_str().unwrap(),
        ]);
        assert!(res.status.success());
    }
    for f in ["routes.csv", "points.csv"] {
        assert_eq!(
            std::fs::read(g1.join(f)).unwrap(),
            std::fs::read(g2.join(f)).unwrap(),
            "{f} must be byte-identical"
        );
    }
}

#[test]
fn idx_dataset_feeds_a_conv_model_through_the_cli() {
    // synthetic 4x4 "digit" cube in IDX layout, colorized during loading,
    // trained briefly, then analyzed with image grids
    let dir = tempfile::tempdir().unwrap();
    let idx = dir.path().join("digits.idx");
    let (n, h, w) = (48usize, 4usize, 4usize);
    let mut bytes = vec![0u8, 0, 0x08, 3];
    for d in [n, h, w] {
        bytes.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for i in 0..n * h * w {
        bytes.push(((i * 37) % 251) as u8);
    }
    std::fs::write(&idx, bytes).unwrap();

    let out = dir.path().join("run");
    let cfg = dir.path().join("conv.cfg");
    std::fs::write(
        &cfg,
        format!(
            "arch.kind = conv
arch.z_dim = 8
arch.stem = 4x2x2
arch.channels = 4
             arch.out_channels = 3
arch.m = 2,2,2
disc.channels = 4
             train.steps = 5
train.batch = 4
train.seed = 2
             data.kind = idx
data.path = {}
data.colorize = true
out.dir = {}
",
            idx.display(),
            out.display()
        ),
    )
    .unwrap();
    let res = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );

    let an = dir.path().join("an");
    let res = run(&[
        "analyze",
        "--checkpoint",
        out.join("checkpoint.rpgn").to_str().unwrap(),
        "--metric",
        "color",
        "--routes",
        "8",
        "--per-bucket",
        "2",
        "--out",
        an.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(an.join("diversity.csv").exists());
    // three-channel model: one PPM grid per bucket
    for b in 1..=3 {
        let grid = an.join(format!("bucket_{b}.ppm"));
        let bytes = std::fs::read(&grid).unwrap();
        assert!(bytes.starts_with(b"P6\n"), "grid {b} header");
    }

    let gen_out = dir.path().join("gen");
    let res = run(&[
        "generate",
        "--checkpoint",
        out.join("checkpoint.rpgn").to_str().unwrap(),
        "--count",
        "6",
        "--cols",
        "3",
        "--out",
        gen_out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(gen_out.join("samples.ppm").exists());
    assert!(gen_out.join("routes.csv").exists());
}

#[test]
fn extend_and_invert_wrap_the_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_ring_cfg(dir.path(), &out, 40, 6);
    assert!(run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let ck = out.join("checkpoint.rpgn");

    let ext = dir.path().join("ext");
    let res = run(&[
        "extend",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--add",
        "2,0,1",
        "--out",
        ext.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(String::from_utf8_lossy(&res.stdout).contains("[6, 4, 5]"));

    let inv = dir.path().join("inv");
    let res = run(&[
        "invert",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--samples",
        "200",
        "--epochs",
        "2",
        "--out",
        inv.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let acc = std::fs::read_to_string(inv.join("accuracy.csv")).unwrap();
    assert!(acc.starts_with("bucket,accuracy\n"));
    assert_eq!(acc.lines().count(), 4);
    assert!(inv.join("inverter.rpgn").exists());
}
