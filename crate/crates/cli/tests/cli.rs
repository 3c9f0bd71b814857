use std::path::PathBuf;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckcs-bench"))
        .args(args)
        .env_remove("CKCS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "core", "scenarios", name].iter().collect();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_prints_cover_and_counters() {
    let o = bench(&["run", &scenario("leave_batch.scn")]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("cover {K_2,K_3,K_{5,6},K_7}"), "{out}");
    assert!(out.contains("keygen=1 encrypt=4"), "{out}");
    assert_eq!(out, stdout(&bench(&["run", &scenario("leave_batch.scn")])));
}

#[test]
fn run_failures_exit_3() {
    let o = bench(&["run", "/nonexistent.scn"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sweep_csv_has_closed_form_ckcs_joins() {
    let o = bench(&[
        "sweep", "--protocols", "ckcs,lkh,oft,okd", "--n", "1024,4096", "--m", "64,256", "--ops", "join,leave",
    ]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("protocol,n,m,op,keygen,encrypt"));
    let mut ckcs_joins = 0;
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        if f[0] == "ckcs" && f[3] == "join" {
            let m: u64 = f[2].parse().unwrap();
            assert_eq!(f[4].parse::<u64>().unwrap(), m + 1, "{l}");
            ckcs_joins += 1;
        }
    }
    assert_eq!(ckcs_joins, 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed: 1 (default)"));
}

#[test]
fn sweep_writes_into_the_output_dir() {
    let dir = std::env::temp_dir().join(format!("ckcs-cli-{}", std::process::id()));
    let o = Command::new(env!("CARGO_BIN_EXE_ckcs-bench"))
        .args(["sweep", "--protocols", "ckcs,okd", "--n", "64", "--m", "4", "--seed", "3"])
        .env("CKCS_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let notes = std::fs::read_to_string(dir.join("sweep.csv.notes.txt")).unwrap();
    assert!(notes.contains("paper-level OKD"), "{notes}");
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn audit_is_secure_by_default_and_breaks_with_public_codes() {
    let o = bench(&["audit", "--trials", "20", "--max-n", "24", "--seed", "7"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    for p in ["ckcs", "lkh", "oft", "paper-level OKD"] {
        assert!(out.contains(&format!("{p} forward: secure")), "{out}");
    }

    let o = bench(&["audit", "--trials", "20", "--max-n", "24", "--seed", "7", "--protocols", "ckcs", "--codes-public"]);
    assert_eq!(o.status.code(), Some(5));
    let out = stdout(&o);
    assert!(out.contains("BREACH"), "{out}");
    assert!(out.contains("code-derive("), "{out}");
}

#[test]
fn vectors_pass_and_bad_files_exit_6() {
    assert!(bench(&["vectors"]).status.success());
    let bad = std::env::temp_dir().join(format!("ckcs-vec-{}.txt", std::process::id()));
    std::fs::write(&bad, "derive, 00, 11\n").unwrap();
    let o = bench(&["vectors", "--file", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(6));
    std::fs::remove_file(bad).ok();
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bench(&[]).status.code(), Some(2));
    assert_eq!(bench(&["sweep", "--protocols", "abc"]).status.code(), Some(2));
}
