use std::path::PathBuf;
use std::process::{Command, Output};

fn pacsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacsim"))
        .args(args)
        .env_remove("PACSIM_KEY")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn listing_a1_json_to_stdout() {
    let out = pacsim(&["run", &fixture("listing_a1.pir"), "--json", "-"]);
    assert_eq!(out.status.code(), Some(1));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let v = doc["violations"].as_array().unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0]["kind"], "spatial-oob");
    assert_eq!(v[0]["offset"], 150);
}

#[test]
fn good_program_exits_zero() {
    let out = pacsim(&["run", &fixture("good.pir")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = pacsim(&["run", &fixture("good.pir"), "--tool", "baseline", "--opt", "loop-inv,redundant,static"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn write_only_flag() {
    assert_eq!(pacsim(&["run", &fixture("read_oob.pir"), "--write-only"]).status.code(), Some(0));
    assert_eq!(pacsim(&["run", &fixture("write_oob.pir"), "--write-only"]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(pacsim(&["run", &fixture("good.pir"), "--bogus"]).status.code(), Some(2));
    assert_eq!(pacsim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(pacsim(&["run", &fixture("good.pir"), "--opt", "unroll"]).status.code(), Some(2));
    assert_eq!(pacsim(&["run", "/nonexistent.pir"]).status.code(), Some(2));
}

#[test]
fn parse_errors_cite_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.pir");
    std::fs::write(&path, "func main {\n  %a = alloc heap 8\n  store %a 4\n}\n").unwrap();
    let out = pacsim(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("3:"), "{err}");
}

#[test]
fn bad_key_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_pacsim"))
        .args(["run", &fixture("good.pir")])
        .env("PACSIM_KEY", "not-a-key")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corpus_then_score_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = pacsim(&["corpus", "--seed", "5", "--per-cwe", "3", "--out", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(corpus.join("manifest.json").exists());
    assert!(corpus.join("cwe416-bad-002.pir").exists());

    let mut reports = Vec::new();
    for n in 0..2 {
        let json = dir.path().join(format!("score{n}.json"));
        let out = pacsim(&["score", "--corpus", corpus.to_str().unwrap(), "--tool", "pacsan", "--json", json.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        reports.push(std::fs::read(json).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let doc: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(doc["meta"]["seed"], 5);
    assert_eq!(doc["cases"].as_array().unwrap().len(), 60);
}

#[test]
fn collide_prints_both_rates() {
    let out = pacsim(&["collide", "--trials", "100000"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("analytic   5.960464e-8"), "{text}");
    assert!(text.contains("empirical"));
}
