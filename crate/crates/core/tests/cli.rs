use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dualfl");
const COLUMNS: &str =
    "round,beta,E_err_rel,sq_param_err,grad_norm,zeta_sum_norm,max_gap,total_local_iters";

fn dualfl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn default_run_prints_a_trace() {
    let o = dualfl(&["run", "--rounds", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("# dualfl trace\n"));
    assert!(!out.contains("run.threads"));
    let mut data = out.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(data.next(), Some(COLUMNS));
    let rows: Vec<&str> = data.collect();
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[0], (i + 1).to_string());
        assert!(fields[3].contains('e'), "{row}");
    }
}

#[test]
fn traces_are_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.cfg",
        "problem.clients = 6\ndualfl.rho = 1e-2\nrun.rounds = 30\n",
    );
    let mut files = Vec::new();
    for (i, threads) in ["1", "1", "4"].iter().enumerate() {
        let out = dir.path().join(format!("t{i}.csv"));
        let o = dualfl(&[
            "run",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(code(&o), 0);
        files.push(fs::read(out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
    let other = dir.path().join("seed.csv");
    dualfl(&[
        "run",
        "--config",
        &cfg,
        "--out",
        other.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_ne!(files[0], fs::read(other).unwrap());
}

#[test]
fn missed_target_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "run.rounds = 3\nrun.target = 1e-30\n");
    let o = dualfl(&["run", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    let cfg = write_config(dir.path(), "d.cfg", "run.rounds = 200\nrun.target = 1e-6\n");
    assert_eq!(code(&dualfl(&["run", "--config", &cfg])), 0);
}

#[test]
fn configuration_and_io_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "u.cfg", "problem.colour = red\n");
    assert_eq!(code(&dualfl(&["run", "--config", &unknown])), 2);
    let missing = dir.path().join("absent.cfg");
    assert_eq!(
        code(&dualfl(&["run", "--config", missing.to_str().unwrap()])),
        2
    );
    let wrong_mode = write_config(dir.path(), "m.cfg", "mode = baseline\n");
    assert_eq!(code(&dualfl(&["run", "--config", &wrong_mode])), 2);
    let bad_nu = write_config(dir.path(), "n.cfg", "dualfl.nu = 5\n");
    assert_eq!(code(&dualfl(&["run", "--config", &bad_nu])), 2);
    let unwritable = dir.path().join("no/such/dir/t.csv");
    assert_eq!(
        code(&dualfl(&[
            "run",
            "--rounds",
            "2",
            "--out",
            unwritable.to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn sweep_writes_one_tagged_trace_per_rho() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = dualfl(&[
        "sweep-rho",
        "--rounds",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    for i in 0..4 {
        let t = fs::read_to_string(dir.path().join(format!("sweep_rho{i}.csv"))).unwrap();
        assert!(t.contains(COLUMNS));
    }
}

#[test]
fn verify_duality_agrees_with_exact_solves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "v.cfg",
        "local.solver = exact\nlocal.stop = gap_fixed\nlocal.tol = 1e-14\nrun.rounds = 30\n",
    );
    let o = dualfl(&["verify-duality", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("verdict = agree"));
}

#[test]
fn baseline_and_regularized_subcommands_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualfl(&["baseline", "--rounds", "20"]);
    assert_eq!(code(&o), 0);
    let cfg = write_config(
        dir.path(),
        "r.cfg",
        "problem.kind = least_squares\nproblem.samples = 3\nproblem.dim = 30\nregularized.epsilon = 0.4\nrun.rounds = 50\n",
    );
    let o = dualfl(&["regularized-run", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha = "));
}
