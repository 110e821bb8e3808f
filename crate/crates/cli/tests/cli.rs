use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gftnn-aec")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One far-end single-talk utterance of two seconds.
fn simulate(dir: &Path) -> std::path::PathBuf {
    let grid = dir.join("grid.json");
    fs::write(
        &grid,
        r#"{"ser_db": [15], "snr_db": ["inf"], "scenarios": ["st-fe"], "utterances": 1, "duration_s": 2}"#,
    )
    .unwrap();
    let out = dir.join("set");
    let o = run(&["simulate", "--grid", p(&grid), "--out-dir", p(&out), "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("entries=1"));
    out
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["process", "--mic", "a.wav"])), 1);
    assert_eq!(code(&run(&["process", "--mic", "a", "--ref", "b", "--out", "c", "--filter", "lms"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["process", "--mic", "nope.wav", "--ref", "nope.wav", "--out", p(&dir.path().join("o.wav"))]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"filtr": "mdf"}"#).unwrap();
    let o = run(&["eval", "--manifest", "m.txt", "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn simulate_process_eval() {
    let dir = tempfile::tempdir().unwrap();
    let set = simulate(dir.path());
    let manifest = set.join("manifest.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    let line = text.lines().find(|l| !l.starts_with('#')).unwrap();
    let field = |k: &str| {
        line.split('\t').find_map(|kv| kv.strip_prefix(&format!("{k}="))).unwrap().to_string()
    };
    let (d, x) = (set.join(field("d")), set.join(field("x")));

    let out_a = dir.path().join("a.wav");
    let out_b = dir.path().join("b.wav");
    let o = run(&["process", "--mic", p(&d), "--ref", p(&x), "--out", p(&out_a), "--filter", "mdf"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout(&o);
    for key in ["filter=mdf", "delay_samples=", "latency_samples=1535", "rtf_total="] {
        assert!(report.contains(key), "{key} missing from\n{report}");
    }
    let o = run(&["process", "--mic", p(&d), "--ref", p(&x), "--out", p(&out_b), "--filter", "mdf"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());

    let csv = dir.path().join("t.csv");
    let o = run(&["eval", "--manifest", p(&manifest), "--filter", "mdf", "--csv", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ST-FE"));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 2);
}

#[test]
fn missing_model_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let set = simulate(dir.path());
    let wav = fs::read_dir(set.join("stfe_ser15")).unwrap().next().unwrap().unwrap().path();
    let o = run(&[
        "process", "--mic", p(&wav), "--ref", p(&wav), "--out", p(&dir.path().join("o.wav")),
        "--model", p(&dir.path().join("absent.gftw")),
    ]);
    assert_eq!(code(&o), 3);
    let junk = dir.path().join("junk.gftw");
    fs::write(&junk, b"not a weight file").unwrap();
    let o = run(&["process", "--mic", p(&wav), "--ref", p(&wav), "--out", p(&dir.path().join("o.wav")), "--model", p(&junk)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn wideband_rate_needs_subband_off() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    fs::write(&grid, r#"{"ser_db": ["inf"], "snr_db": ["inf"], "scenarios": ["st-ne"], "utterances": 1, "duration_s": 1, "rate": 16000}"#).unwrap();
    let set = dir.path().join("set");
    assert_eq!(code(&run(&["simulate", "--grid", p(&grid), "--out-dir", p(&set)])), 0);
    let wav = fs::read_dir(set.join("stne_snrinf")).unwrap().map(|e| e.unwrap().path()).find(|p| p.to_str().unwrap().ends_with("_d.wav")).unwrap();
    let out = dir.path().join("o.wav");
    assert_eq!(code(&run(&["process", "--mic", p(&wav), "--ref", p(&wav), "--out", p(&out)])), 1);
    let o = run(&["process", "--mic", p(&wav), "--ref", p(&wav), "--out", p(&out), "--subband", "off"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("latency_samples=480"));
}

#[test]
fn empty_manifest_gives_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.txt");
    fs::write(&m, "# gftnn-aec manifest v1\n").unwrap();
    let o = run(&["eval", "--manifest", p(&m)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("scenario"));
    assert_eq!(out.lines().filter(|l| !l.starts_with('#')).count(), 1);
}
