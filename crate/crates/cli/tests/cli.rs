use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn asset(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets").join(rel)
}

fn infinity(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infinity")).args(args).output().unwrap()
}

fn run_nat(out: &Path, mode: &str, trace: bool) -> Output {
    let topo = asset("topologies/line3_store.json");
    let app = asset("nat.iapp");
    let workload = asset("workloads/nat_spill.json");
    let policy = asset("policy.json");
    let mut args = vec![
        "run",
        "--topology",
        topo.to_str().unwrap(),
        "--app",
        app.to_str().unwrap(),
        "--workload",
        workload.to_str().unwrap(),
        "--policy",
        policy.to_str().unwrap(),
        "--seed",
        "5",
        "--horizon-us",
        "40000",
        "--mode",
        mode,
        "--out",
        out.to_str().unwrap(),
    ];
    if trace {
        args.push("--trace");
    }
    infinity(&args)
}

#[test]
fn run_then_check_against_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (ours, oracle) = (dir.path().join("normal"), dir.path().join("oracle"));
    let out = run_nat(&ours, "normal", true);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("vert_disaggregate=1"), "{stdout}");
    for f in ["summary.csv", "audit.jsonl", "report.json", "trace.log"] {
        assert!(ours.join(f).is_file(), "missing {f}");
    }
    assert!(run_nat(&oracle, "oracle", false).status.success());

    let check = infinity(&["check", "--report", ours.to_str().unwrap(), "--oracle", oracle.to_str().unwrap()]);
    let text = String::from_utf8(check.stdout).unwrap();
    assert!(check.status.success(), "{text}");
    assert!(text.starts_with("PASS"), "{text}");
}

#[test]
fn identical_command_lines_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_nat(&a, "normal", true).status.success());
    assert!(run_nat(&b, "normal", true).status.success());
    for f in ["summary.csv", "audit.jsonl", "report.json", "trace.log"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_nat(dir.path(), "sideways", false);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let missing = dir.path().join("nowhere");
    let out = infinity(&["check", "--report", missing.to_str().unwrap(), "--oracle", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
