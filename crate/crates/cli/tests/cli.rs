use std::path::Path;
use std::process::{Command, Output};

fn kpx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpx"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kpx(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    kpx(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn total(audit: &str) -> usize {
    audit
        .lines()
        .find_map(|l| l.strip_prefix("total,"))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["params", "--bogus"]), 1);
    assert_eq!(code(&["bench", "--op", "conv9"]), 1);
    assert_eq!(code(&["kernel", "check", "/nonexistent/kernel.txt"]), 2);
    assert_eq!(code(&["params", "--arch", "kpconvz-xl"]), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ply");
    std::fs::write(&bad, "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n").unwrap();
    let out = kpx(&["subsample", "--in", p(&bad), "--cell", "0.1", "--out", p(&dir.path().join("o.ply"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nbatch_clouds = \"four\"\n").unwrap();
    assert_eq!(code(&["train", "--config", p(&cfg)]), 2);
}

#[test]
fn params_audit_matches_construction() {
    let audit = ok(&["params", "--arch", "kpconvx-l", "--classes", "13"]);
    let n = total(&audit);
    assert!((n as f64 / 13.5e6 - 1.0).abs() < 0.05, "{n}");
    assert!(audit.starts_with("module,parameters\n"));
    assert!(audit.lines().any(|l| l.starts_with("modulation,")));
    assert_eq!(total(&ok(&["params", "--arch", "kpconvx-l", "--classes", "13", "--analytic"])), n);

    let d = total(&ok(&["params", "--arch", "kpconvd-l", "--classes", "13"]));
    assert!(d < n);
    let all = total(&ok(&["params", "--arch", "kpconvx-l", "--groups", "C", "--analytic"]));
    let one = total(&ok(&["params", "--arch", "kpconvx-l", "--groups", "1", "--analytic"]));
    assert!(one > n && n > all);
}

#[test]
fn params_reads_architecture_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.toml");
    std::fs::write(&run, "preset = \"kpconvd-s\"\n[architecture]\nhead = { task = \"segmentation\", classes = 20 }\n").unwrap();
    let from_file = total(&ok(&["params", "--arch", p(&run), "--analytic"]));
    let from_flags = total(&ok(&["params", "--arch", "kpconvd-s", "--classes", "20", "--analytic"]));
    assert_eq!(from_file, from_flags);
}

#[test]
fn kernel_init_check_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for f in [&a, &b] {
        ok(&["kernel", "init", "--shells", "1,14,28", "--radius", "2.1", "--seed", "3", "--out", p(f)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let report = ok(&["kernel", "check", p(&a)]);
    assert!(report.contains("status,pass"), "{report}");
    assert!(report.contains("points,43"));

    let stdout = ok(&["kernel", "init", "--shells", "1,14,28", "--radius", "2.1", "--seed", "3"]);
    assert_eq!(stdout.as_bytes(), std::fs::read(&a).unwrap());

    let csv = dir.path().join("regions.csv");
    let hist = ok(&["kernel", "regions", p(&a), "--resolution", "12", "--out", p(&csv)]);
    assert_eq!(hist.lines().count(), 44);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("x,y,z,region\n"));

    // a point pushed off its shell fails the check
    let text = std::fs::read_to_string(&a).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let last = lines.len() - 1;
    let t: Vec<&str> = lines[last].split_whitespace().collect();
    let x: Vec<f64> = t[..3].iter().map(|v| v.parse::<f64>().unwrap() * 1.01).collect();
    lines[last] = format!("{} {} {} {}", x[0], x[1], x[2], t[3]);
    let broken = dir.path().join("broken.txt");
    std::fs::write(&broken, lines.join("\n") + "\n").unwrap();
    let out = kpx(&["kernel", "check", p(&broken)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("status,fail"));
}

#[test]
fn synth_and_subsample() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--task", "seg", "--seed", "4", "--points", "500", "--train-clouds", "2", "--val-clouds", "1", "--out-dir", p(d)]);
    }
    let f = a.join("train/0000.ply");
    assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(b.join("train/0000.ply")).unwrap());
    assert!(a.join("val/0000.ply").exists());

    let out = dir.path().join("sub.ply");
    ok(&["subsample", "--in", p(&f), "--cell", "0.2", "--out", p(&out)]);
    let count = |path: &Path| -> usize {
        let text = std::fs::read_to_string(path).unwrap();
        let line = text.lines().find(|l| l.starts_with("element vertex")).unwrap();
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };
    assert!(count(&out) < count(&f));
    assert!(std::fs::read_to_string(&out).unwrap().contains("property int label"));
}

const SMALL: [&str; 14] = [
    "--points", "600", "--train-clouds", "2", "--val-clouds", "1", "--epochs", "2", "--steps", "1", "--accumulation",
    "1", "--batch-clouds", "1",
];

#[test]
fn training_is_deterministic_and_checkpoints_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let metrics = dir.path().join(format!("{name}.csv"));
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        let mut args = vec!["train", "--preset", "tiny-seg", "--seed", "1", "--metrics", p(&metrics), "--checkpoint", p(&ckpt)];
        args.extend(SMALL);
        let printed = ok(&args);
        (printed, std::fs::read_to_string(&metrics).unwrap(), ckpt)
    };
    let (printed, log_a, ckpt) = run("a");
    let (_, log_b, _) = run("b");
    assert_eq!(log_a, log_b);
    assert!(log_a.starts_with("epoch,step,lr,loss,acc\n"));
    assert_eq!(log_a.lines().count(), 3);

    let evaluated = ok(&["eval", "--checkpoint", p(&ckpt), "--seed", "1", "--points", "600", "--val-clouds", "1"]);
    assert_eq!(evaluated, printed);
}

#[test]
fn flags_override_the_run_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "preset = \"tiny-seg\"\n[architecture]\ndroppath_rate = 0.0\n[train.optimizer]\nepochs = 1\nsteps_per_epoch = 1\naccumulation = 1\n[train]\nbatch_clouds = 1\n[data]\npoints_per_cloud = 600\ntrain_clouds = 2\nval_clouds = 1\n",
    )
    .unwrap();
    let log = |extra: &[&str]| {
        let m = dir.path().join("m.csv");
        let mut args = vec!["train", "--config", p(&cfg), "--metrics", p(&m)];
        args.extend(extra);
        ok(&args);
        std::fs::read_to_string(&m).unwrap()
    };
    assert_eq!(log(&[]).lines().count(), 2);
    assert_eq!(log(&["--epochs", "2"]).lines().count(), 3);
}

#[test]
fn bench_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let args = [
        "bench", "--op", "kpconvd", "--sweep", "K=7,15", "--n", "64", "--h", "4", "--c", "8", "--trials", "5", "--out",
        p(&out),
    ];
    ok(&args);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let status = Command::new(env!("CARGO_BIN_EXE_kpx"))
        .args(&args)
        .env("KPX_THREADS", "2")
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(code(&["bench", "--trials", "2", "--n", "64"]), 2);
}
