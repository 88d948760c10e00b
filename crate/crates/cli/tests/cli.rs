use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> tempfile::TempDir {
    let src = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/e2e");
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("images")).unwrap();
    for sub in ["", "images"] {
        for e in fs::read_dir(src.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                fs::copy(&p, dir.path().join(sub).join(p.file_name().unwrap())).unwrap();
            }
        }
    }
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hatescope"))
        .current_dir(dir)
        .env_remove("PERSPECTIVE_API_KEY")
        .args(args)
        .output()
        .unwrap()
}

fn edit_config(dir: &Path, from: &str, to: &str) {
    let path = dir.join("hatescope.toml");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains(from));
    fs::write(&path, text.replacen(from, to, 1)).unwrap();
}

#[test]
fn stage_before_its_inputs_exits_2() {
    let dir = fixture();
    assert!(run(dir.path(), &["ingest"]).status.success());
    let out = run(dir.path(), &["score"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires: "), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_run_then_cached_rerun() {
    let dir = fixture();
    let first = run(dir.path(), &["all"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains(": ran ")).count(), 14, "{stdout}");
    assert!(dir.path().join("run/report/report.md").is_file());
    let again = run(dir.path(), &["report"]);
    assert!(String::from_utf8_lossy(&again.stdout).starts_with("report: cached"));
    let changed = run(dir.path(), &["score", "--threshold", "0.35"]);
    assert!(String::from_utf8_lossy(&changed.stdout).starts_with("score: ran"));
}

#[test]
fn config_problems_exit_2() {
    let dir = fixture();
    assert_eq!(run(dir.path(), &["--config", "missing.toml", "ingest"]).status.code(), Some(2));
    edit_config(dir.path(), "seed = 20170101", "seed = 1\nsurprise = true");
    assert_eq!(run(dir.path(), &["ingest"]).status.code(), Some(2));
}

#[test]
fn missing_credentials_exit_2() {
    let dir = fixture();
    edit_config(dir.path(), "provider = \"lexicon\"", "provider = \"perspective\"");
    assert!(run(dir.path(), &["ingest"]).status.success());
    let out = run(dir.path(), &["toxicity"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PERSPECTIVE_API_KEY"));
}

#[test]
fn unreachable_sidecar_exits_3() {
    let dir = fixture();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    edit_config(
        dir.path(),
        "provider = \"fixture\"",
        &format!("provider = \"remote\"\nsidecar_url = \"http://127.0.0.1:{port}\"\nmax_retries = 0"),
    );
    let out = run(dir.path(), &["all"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn held_run_lock_exits_2() {
    let dir = fixture();
    fs::create_dir_all(dir.path().join("run")).unwrap();
    fs::write(dir.path().join("run/.lock"), "1\n").unwrap();
    let out = run(dir.path(), &["ingest"]);
    assert_eq!(out.status.code(), Some(2));
}
