use std::path::Path;
use std::process::{Command, Output};

fn mlsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlsim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

#[test]
fn bench_reports_published_scale() {
    let o = mlsim(&["bench", "--levels", "l2,l3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let params = field(&text, "params ");
    let flops = field(&text, "flops ");
    assert!((params - 0.5e6).abs() <= 0.15 * 0.5e6, "{params}");
    assert!((flops - 0.96e9).abs() <= 0.35 * 0.96e9, "{flops}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mlsim(&["bench", "--bogus"]).status.code(), Some(2));
    assert_eq!(mlsim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mlsim(&["bench", "--levels", "l7"]).status.code(), Some(2));
    let o = mlsim(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let o = mlsim(&["infer", "--ckpt", missing.to_str().unwrap(), "a.ppm", "b.ppm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("none.ckpt"));
    assert_eq!(mlsim(&["gradcheck", "--op", "nope"]).status.code(), Some(1));
}

#[test]
fn gradcheck_all_passes() {
    let o = mlsim(&["gradcheck", "--op", "all"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.ends_with(" ok")).count(), 8, "{text}");
}

fn train(data: &Path, out: &Path, seed: &str) -> Output {
    mlsim(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch",
        "12",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let p = |name: &str| dir.path().join(name);
    let o = mlsim(&[
        "gen-data",
        "--identities",
        "4",
        "--views-per-camera",
        "2",
        "--cameras",
        "2",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("wrote 16 images"));

    let o = train(&data, &p("a.ckpt"), "1");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(train(&data, &p("b.ckpt"), "1").status.success());
    assert_eq!(std::fs::read(p("a.ckpt")).unwrap(), std::fs::read(p("b.ckpt")).unwrap());

    let report = p("report.csv");
    let o = mlsim(&[
        "eval",
        "--ckpt",
        p("a.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--trials",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,seed,rank1,rank5,rank10,params,flops");
    assert!(lines[1].starts_with("l2l3,0,"), "{}", lines[1]);

    let img = data.join("0").join("0_0.ppm");
    let img = img.to_str().unwrap();
    let o = mlsim(&["infer", "--ckpt", p("a.ckpt").to_str().unwrap(), img, img]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let score = field(&text, "simi_score ");
    let prob = field(&text, "match_probability ");
    assert!(score > 0.2 / 1e-4 * 0.9, "{text}");
    assert!((0.0..=1.0).contains(&prob));
    assert_eq!(field(&text, "descriptor_distance "), 0.0);

    let maps = p("maps");
    let other = data.join("1").join("1_0.ppm");
    let o = mlsim(&[
        "export-simmaps",
        "--ckpt",
        p("a.ckpt").to_str().unwrap(),
        img,
        other.to_str().unwrap(),
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = std::fs::read_dir(&maps).unwrap().count();
    assert_eq!(written, 12);
    assert!(maps.join("l2_a-upper_0.pgm").exists());
}
