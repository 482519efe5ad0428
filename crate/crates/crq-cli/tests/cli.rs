use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn crq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crq")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("crq-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn malformed_matrix_row_is_a_parse_error_naming_the_line() {
    let dir = scratch("malformed");
    let model = dir.join("bad.model");
    std::fs::write(&model, "n = 3\nm = 1\nq = 1\nradius = 1\n[H1]\n1,0 0,0\n0,0\n").unwrap();
    let out = crq(&["check-geometry", "--model", model.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 7"), "{}", stderr(&out));
}

#[test]
fn q_beyond_n_minus_m_is_rejected() {
    let dir = scratch("bigq");
    let model = dir.join("q.model");
    std::fs::write(&model, "n = 3\nm = 1\nq = 3\nradius = 1\n[H1]\n1,0 0,0\n0,0 -1,0\n").unwrap();
    let out = crq(&["check-geometry", "--model", model.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("invalid model"), "{}", stderr(&out));
}

#[test]
fn ladder_must_decrease() {
    let out = crq(&["run-homotopy", "--eps", "0.05,0.1", "--budget", "1000,2000"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("strictly decreasing"));
}

#[test]
fn homotopy_without_certification_names_the_missing_step() {
    let dir = scratch("uncertified");
    let out = crq(&["run-homotopy", "--eps", "0.1", "--budget", "1000", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("crq check-geometry"), "{}", stderr(&out));
}

#[test]
fn small_pipeline_passes_and_reruns_byte_identically() {
    let a = scratch("pipeline-a");
    let b = scratch("pipeline-b");
    for dir in [&a, &b] {
        let out_dir = dir.to_str().unwrap();
        for args in [
            vec!["check-geometry"],
            vec!["--cmd", "audit-barrier", "--samples", "1000"],
            vec!["run-homotopy", "--eps", "0.1", "--budget", "1000"],
        ] {
            let mut full = args.clone();
            full.extend(["--out", out_dir]);
            let out = crq(&full);
            assert_eq!(out.status.code(), Some(0), "{args:?}: {}{}", String::from_utf8_lossy(&out.stdout), stderr(&out));
        }
    }
    for file in ["check-geometry.json", "audit-barrier.json", "run-homotopy.json", "residual.csv", "barrier_quotients.csv"] {
        assert_eq!(read(&a.join(file)), read(&b.join(file)), "{file}");
    }
    let grids: Vec<_> = std::fs::read_dir(a.join("grids")).unwrap().collect();
    assert_eq!(grids.len(), 5);
    // a second run over the same caches verifies them instead of rewriting
    let out = crq(&["run-homotopy", "--eps", "0.1", "--budget", "1000", "--sequential", "--out", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(read(&a.join("run-homotopy.json")), read(&b.join("run-homotopy.json")));
}

#[test]
fn corrupted_grid_cache_is_refused() {
    let dir = scratch("corrupt");
    let d = dir.to_str().unwrap();
    assert_eq!(crq(&["check-geometry", "--out", d]).status.code(), Some(0));
    assert_eq!(crq(&["run-homotopy", "--eps", "0.1", "--budget", "1000", "--out", d]).status.code(), Some(0));
    let cache = std::fs::read_dir(dir.join("grids")).unwrap().next().unwrap().unwrap().path();
    let text = read(&cache).replacen("\"seed\": ", "\"seed\": 9", 1);
    std::fs::write(&cache, text).unwrap();
    let out = crq(&["run-homotopy", "--eps", "0.1", "--budget", "1000", "--out", d]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("grid cache"), "{}", stderr(&out));
}
