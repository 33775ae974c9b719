use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn amss(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amss"))
        .args(args)
        .env("AMSS_OUTPUT_ROOT", root)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

const SMALL: &str = "seed = 5\n\
data.dims = 3,4\n\
data.snr = 2,0.5\n\
data.classes = 3\n\
data.train = 120\n\
data.val = 30\n\
data.test = 60\n\
model.widths = 6\n\
train.epochs = 2\n\
train.batch_size = 30\n";

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", "strategy = amss_plus\noutput.dir = runs/a\n");
    let out = amss(dir.path(), &["run", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/a");
    for name in ["metrics.csv", "significance.csv", "selections.csv", "summary.json", "checkpoint.bin", "loss.svg"] {
        assert!(run.join(name).is_file(), "missing {name}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let again = amss(dir.path(), &["run", "--config", &cfg, "--out", "runs/b"]);
    assert!(again.status.success());
    assert_eq!(
        fs::read(run.join("metrics.csv")).unwrap(),
        fs::read(dir.path().join("runs/b/metrics.csv")).unwrap()
    );

    let plot = amss(dir.path(), &["plot", "--run", "runs/a", "--run", "runs/b", "--out", "cmp"]);
    assert!(plot.status.success(), "{}", String::from_utf8_lossy(&plot.stderr));
    assert!(dir.path().join("cmp/loss.svg").is_file());
}

#[test]
fn bad_configs_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "strategy = global_wise\n");
    let out = amss(dir.path(), &["run", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("strategy.v"));

    let typo = write_config(dir.path(), "typo.cfg", "optim.lrr = 0.1\n");
    let out = amss(dir.path(), &["run", "--config", &typo]);
    assert!(!out.status.success());
    // SMALL has ten lines, so the typo sits on line 11.
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo.cfg:11: unknown key"));

    let missing = amss(dir.path(), &["run", "--config", "does-not-exist.cfg"]);
    assert!(!missing.status.success());
    let no_args = amss(dir.path(), &["grid"]);
    assert!(!no_args.status.success());
    let empty_plot = amss(dir.path(), &["plot", "--run", "nowhere"]);
    assert!(!empty_plot.status.success());
}

#[test]
fn gen_data_grid_and_tau_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_config(dir.path(), "spec.cfg", "");
    let out = amss(dir.path(), &["gen-data", "--spec", &spec, "--out", "data/set.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("data/set.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 210);

    // Train from the saved file instead of regenerating.
    let from_file = dir.path().join("file.cfg");
    fs::write(
        &from_file,
        format!(
            "data.path = {}\nmodel.widths = 6\ntrain.epochs = 1\nstrategy = uniform_mask\nstrategy.rho = 1,1\n",
            dir.path().join("data/set.csv").display()
        ),
    )
    .unwrap();
    let grid = amss(
        dir.path(),
        &["grid", "--config", from_file.to_str().unwrap(), "--axis1", "0.5,1", "--axis2", "1", "--out", "g"],
    );
    assert!(grid.status.success(), "{}", String::from_utf8_lossy(&grid.stderr));
    let csv = fs::read_to_string(dir.path().join("g/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let tau_cfg = write_config(dir.path(), "tau.cfg", "strategy = amss\n");
    let tau = amss(dir.path(), &["tau-sweep", "--config", &tau_cfg, "--taus", "0.25,1", "--out", "t"]);
    assert!(tau.status.success(), "{}", String::from_utf8_lossy(&tau.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("t/tau_sweep.csv")).unwrap().lines().count(), 3);

    let wrong = amss(dir.path(), &["tau-sweep", "--config", &spec, "--taus", "1"]);
    assert!(!wrong.status.success());
}

#[test]
fn verify_passes_with_a_modest_draw_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = amss(dir.path(), &["verify", "--draws", "20000", "--seed", "3"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("[PASS]") && !stdout.contains("[FAIL]"));
}
