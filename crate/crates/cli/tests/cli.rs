use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "
[PROCESS]
lr = 1e-2
epochs = 6
data_scheme = gen, tf
pipeline_scheme = mlp

[MONITOR]
nb_processus = 2
multiplicity = 2

[gen]
type = gen
class = dataset_generator
data_size = 120
d_in = 2
batch_size = 16
key = data_{class}

[tf]
type = tf
class = transform
style = standardisation

[brick]
type = mlp
class = mlp_brick
length = 2
width = 1, 2
key = mlp_{class}
";

const PLOTS: &str = "
[global]
file_title = small.plot

[plot_1]
abscissae = width
ordinates = test_loss
include_keys = class
include_values = [mlp_brick]
excludes = width
plot_type = violin
";

fn gridrun(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridrun"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("gridrun runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn no_arguments_prints_help_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = gridrun(&[], dir.path());
    assert_eq!(code(&o), 2);
    let text = String::from_utf8_lossy(&o.stderr).to_string() + &String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&gridrun(&["gen"], d)), 2);
    assert_eq!(code(&gridrun(&["gen", "-c", "missing.ini", "-o", "out"], d)), 2);
    std::fs::write(d.join("bad.ini"), "[PROCESS]\nepochs = 2\n").unwrap();
    assert_eq!(code(&gridrun(&["gen", "-c", "bad.ini", "-o", "out"], d)), 2);
    assert_eq!(code(&gridrun(&["monitor", "--db", "missing.db"], d)), 2);
}

#[test]
fn gen_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/reference_sweep.ini");
    for out in ["a", "b"] {
        let o = gridrun(&["gen", "-c", cfg, "-o", out], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let list = |sub: &str| {
        let mut names: Vec<String> = std::fs::read_dir(d.join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    };
    let names = list("a");
    assert_eq!(names.len(), 576 + 2);
    assert_eq!(names, list("b"));
    for n in &names {
        assert_eq!(std::fs::read(d.join("a").join(n)).unwrap(), std::fs::read(d.join("b").join(n)).unwrap());
    }
}

#[test]
fn small_sweep_through_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.ini"), SMALL).unwrap();
    std::fs::write(d.join("plots.ini"), PLOTS).unwrap();
    assert_eq!(code(&gridrun(&["gen", "-c", "small.ini", "-o", "pipes"], d)), 0);
    let monitor: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("pipes/monitor.json")).unwrap()).unwrap();
    assert_eq!(monitor["multiplicity"], 2);

    assert_eq!(
        code(&gridrun(&["run", "-d", "pipes", "--db", "runs.db", "--inject-fault", "nonsense"], d)),
        2
    );
    let o = gridrun(&["run", "-d", "pipes", "--db", "runs.db", "--seed", "3", "--json"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["done"], 4);
    assert_eq!(summary["failed"], 0);

    let o = gridrun(&["monitor", "--db", "runs.db", "--json"], d);
    assert_eq!(code(&o), 0);
    let status: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(status["total"], 4);
    assert_eq!(status["status"]["done"], 4);
    assert_eq!(status["recent_failures"].as_array().unwrap().len(), 0);

    let o = gridrun(&["rerun", "--db", "runs.db", "--where", "mult_index = 0", "--epochs", "2", "-d", "pipes", "--json"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rerun: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rerun["selected"], 2);
    assert_eq!(code(&gridrun(&["rerun", "--db", "runs.db", "--where", "epochs <", "--epochs", "1"], d)), 2);

    assert_eq!(code(&gridrun(&["lossplot", "--db", "runs.db", "-o", "loss"], d)), 0);
    let loss: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("loss/lossplots.json")).unwrap()).unwrap();
    assert_eq!(loss["plots"].as_array().unwrap().len(), 4);

    let o = gridrun(&["metaplot", "-c", "plots.ini", "--db", "runs.db", "-o", "meta"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(d.join("meta/small_plot_1.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="violin""#).count(), 2);
    assert!(d.join("meta/manifest.json").is_file());
}
