use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afa_core::data::{save_dataset, Dataset, Split};
use afa_core::Tensor32;

fn afa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afa"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AFA_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "afa failed:\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Header and rows of a bundle CSV, skipping the hash comment.
fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column<'a>(header: &[String], row: &'a [String], name: &str) -> &'a str {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    &row[i]
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Small mixture task with one trained model and every table enabled.
const MIXTURE: &str = r#"
name = "mixture"
seed = 11

[dataset]
kind = "gaussian_mixture"
[dataset.spec]
num_classes = 3
dim = 2
center_radius = 2.0
sigma = 0.3
train_per_class = 20
test_per_class = 10

[model]
kind = "mlp"
hidden = [16, 8]
projection = { out = 8 }

[stage_defaults]
epochs = 3
batch_size = 16
augmentation = {}
attack = { epsilon = 0.1, step_size = 0.05, iterations = 2, clamp = [-10.0, 10.0] }

[[runs]]
name = "afa"
[[runs.stages]]
strategy = { kind = "afa", lambda1 = 1.0, lambda2 = 2.0 }
[[runs.stages]]
strategy = { kind = "finetune", mode = "alf" }
epochs = 2

[evaluation]
attacks = [{ epsilon = 0.1, step_size = 0.05, iterations = 3, clamp = [-10.0, 10.0] }]
metrics = ["linf", "l2"]
modes = ["train-train", "train-test", "train-adv"]
spaces = ["input", "penultimate"]
k = [1, 3]
layers = []
layer_attack = true
lipschitz = { runs = 2, attack = { epsilon = 0.1, step_size = 0.05, iterations = 2, clamp = [-10.0, 10.0] } }
lipschitz_samples = 10
"#;

#[test]
fn lemma1_preset_reports_aligned_and_perfect_nn() {
    let dir = tempfile::tempdir().unwrap();
    ok(&afa(&["run", "--preset", "lemma1", "--out", "b"], dir.path()));
    let (h, rows) = table(&dir.path().join("b/alignment.csv"));
    let tt = rows.iter().find(|r| column(&h, r, "mode") == "train-test").unwrap();
    assert_eq!(column(&h, tt, "verdict"), "aligned");
    assert_eq!(column(&h, tt, "nn_accuracy"), "1");
    assert!(rows.iter().all(|r| column(&h, r, "verdict") == "aligned"));
    assert!(!dir.path().join("b/PARTIAL").exists());
    assert!(!dir.path().join("b/.lock").exists());
}

#[test]
fn misaligned_preset_names_a_witness() {
    let dir = tempfile::tempdir().unwrap();
    ok(&afa(&["run", "--preset", "misaligned-witness", "--out", "b"], dir.path()));
    let (h, rows) = table(&dir.path().join("b/alignment.csv"));
    assert_eq!(column(&h, &rows[0], "verdict"), "misaligned");
    let w: usize = column(&h, &rows[0], "witness").parse().unwrap();
    assert!(w < 60);
    let nn: f64 = column(&h, &rows[0], "nn_accuracy").parse().unwrap();
    assert!(nn < 1.0);
}

#[test]
fn every_file_cites_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), MIXTURE).unwrap();
    ok(&afa(&["run", "m.toml", "--out", "b"], dir.path()));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("b/manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    let mut csvs = 0;
    for e in fs::read_dir(dir.path().join("b")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "csv" || x == "toml") {
            let first = fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
            assert_eq!(first, format!("# config_hash={hash}"), "{}", p.display());
            csvs += 1;
        }
    }
    // accuracy, alignment, pairs, accordance, layers, lipschitz, two
    // histories and the resolved config
    assert_eq!(csvs, 9);
    let v = afa(&["validate-config", "m.toml"], dir.path());
    ok(&v);
    assert!(String::from_utf8_lossy(&v.stdout).contains(&hash));
}

#[test]
fn rerun_reproduces_every_csv_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), MIXTURE).unwrap();
    ok(&afa(&["run", "m.toml", "--out", "a"], dir.path()));
    ok(&afa(&["run", "m.toml", "--out", "b"], dir.path()));
    let mut compared = 0;
    for e in fs::read_dir(dir.path().join("a")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "csv") {
            let other = dir.path().join("b").join(p.file_name().unwrap());
            assert_eq!(fs::read(&p).unwrap(), fs::read(&other).unwrap(), "{}", p.display());
            compared += 1;
        }
    }
    assert_eq!(compared, 8);
    let ck = |d: &str| fs::read(dir.path().join(d).join("checkpoints/afa.afa")).unwrap();
    assert_eq!(ck("a"), ck("b"));
}

/// Parses an exported embedding CSV into labels and a feature tensor.
fn read_embeddings(path: &Path) -> (Vec<usize>, Tensor32) {
    let (h, rows) = table(path);
    assert_eq!(&h[..2], ["id", "label"]);
    let width = h.len() - 2;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
        labels.push(r[1].parse().unwrap());
        data.extend(r[2..].iter().map(|v| v.parse::<f32>().unwrap()));
    }
    (labels, Tensor32::new(vec![rows.len(), width], data).unwrap())
}

#[test]
fn exported_embeddings_round_trip_into_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.toml"), MIXTURE).unwrap();
    ok(&afa(&["run", "m.toml", "--out", "b"], d));
    for split in ["train", "test"] {
        ok(&afa(
            &[
                "export-embeddings",
                "m.toml",
                "--checkpoint",
                "b/checkpoints/afa.afa",
                "--split",
                split,
                "--out",
                &format!("emb/{split}.csv"),
            ],
            d,
        ));
    }
    let (train_labels, train_x) = read_embeddings(&d.join("emb/train.csv"));
    let (test_labels, test_x) = read_embeddings(&d.join("emb/test.csv"));
    // 3 classes x 20 train / 10 test; width of the 8-unit penultimate layer
    assert_eq!(train_x.shape(), &[60, 8]);
    assert_eq!(test_x.shape(), &[30, 8]);
    let raw = fs::read_to_string(d.join("emb/test.csv")).unwrap();
    assert_eq!(raw.lines().filter(|l| !l.starts_with('#')).count(), 31);

    let tr = Dataset::new(train_x, train_labels, 3, Split::Train).unwrap();
    let te = Dataset::new(test_x, test_labels, 3, Split::Test).unwrap();
    save_dataset(&tr, d.join("emb"), "train").unwrap();
    save_dataset(&te, d.join("emb"), "test").unwrap();
    let cfg = r#"
name = "embedded"
seed = 0
[dataset]
kind = "files"
train = "emb/train.json"
test = "emb/test.json"
[evaluation]
metrics = ["linf", "l2"]
modes = ["train-train", "train-test"]
"#;
    fs::write(d.join("e.toml"), cfg).unwrap();
    ok(&afa(&["run", "e.toml", "--out", "e"], d));

    let (h1, direct) = table(&d.join("b/alignment.csv"));
    let (h2, exported) = table(&d.join("e/alignment.csv"));
    let pick = |h: &[String], r: &[String]| -> Vec<String> {
        [
            "metric",
            "mode",
            "separation_min",
            "separation_avg",
            "separation_max",
            "clustering_min",
            "clustering_avg",
            "clustering_max",
            "verdict",
            "witness",
            "nn_accuracy",
        ]
        .iter()
        .map(|c| column(h, r, c).to_string())
        .collect()
    };
    let want: Vec<Vec<String>> = direct
        .iter()
        .filter(|r| column(&h1, r, "space") == "penultimate" && column(&h1, r, "mode") != "train-adv")
        .map(|r| pick(&h1, r))
        .collect();
    let got: Vec<Vec<String>> = exported.iter().map(|r| pick(&h2, r)).collect();
    assert_eq!(want.len(), 4);
    assert_eq!(got, want);
}

#[test]
fn compare_builds_one_row_per_strategy() {
    let mnist = mnist_dir();
    if !mnist.join("train-images-idx3-ubyte").exists() {
        eprintln!("skipping: no MNIST at {}", mnist.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"
name = "cmp"
seed = 4
[dataset]
kind = "mnist"
path = "{}"
train_per_class = 8
test_per_class = 4
[model]
kind = "image_cnn"
channels = [4, 4]
fc = 16
projection = {{ out = 16 }}
[stage_defaults]
epochs = 1
batch_size = 20
augmentation = {{}}
attack = {{ epsilon = 0.1, step_size = 0.05, iterations = 1 }}
[compare]
finetune_epochs = 1
[evaluation]
attacks = [{{ epsilon = 0.3, step_size = 0.1, iterations = 2 }}]
"#,
        mnist.display()
    );
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    ok(&afa(
        &["compare", "c.toml", "--strategies", "natural,pgd_at,afa", "--out", "o"],
        dir.path(),
    ));
    let (h, rows) = table(&dir.path().join("o/accuracy.csv"));
    assert_eq!(h, ["run", "stages", "clean_accuracy", "pgd_eps0.3_steps2"]);
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["natural", "pgd_at", "afa"]);
    assert_eq!(rows[2][1], "afa+finetune_alf");
    // Every row is scored on the same 40 test images.
    for r in &rows {
        let a: f64 = r[2].parse().unwrap();
        assert!((a * 40.0 - (a * 40.0).round()).abs() < 1e-9, "{a}");
    }
    let (_, align) = table(&dir.path().join("o/alignment.csv"));
    assert_eq!(align.len(), 3);
}

#[test]
fn validation_lists_all_errors_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let bad = r#"
name = ""
seed = 0
[dataset]
kind = "mnist"
path = "nowhere"
[model]
kind = "mlp"
[[runs]]
name = "x"
stages = [{ strategy = { kind = "natural" }, epochs = 0, batch_size = 0 }]
[evaluation]
k = [0]
"#;
    fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = afa(&["validate-config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["name must not be empty", "missing", "epochs", "batch_size", "k values"] {
        assert!(err.contains(needle), "{needle:?} not in {err}");
    }

    fs::write(dir.path().join("typo.toml"), MIXTURE.replace("sigma = 0.3", "sigma = 0.3\nsigmaa = 1")).unwrap();
    let out = afa(&["validate-config", "typo.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigmaa"));

    fs::write(dir.path().join("noseed.toml"), MIXTURE.replace("seed = 11", "")).unwrap();
    let out = afa(&["validate-config", "noseed.toml"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed is required"));
}

#[test]
fn failures_leave_a_partial_marker_and_locks_block_runs() {
    let dir = tempfile::tempdir().unwrap();
    let diverging = MIXTURE.replace("batch_size = 16", "batch_size = 16\noptimizer = { lr = 1e30 }");
    fs::write(dir.path().join("d.toml"), diverging).unwrap();
    let out = afa(&["run", "d.toml", "--out", "b"], dir.path());
    assert!(!out.status.success());
    let marker = fs::read_to_string(dir.path().join("b/PARTIAL")).unwrap();
    assert!(marker.contains("run failed"), "{marker}");
    assert!(!dir.path().join("b/.lock").exists());
    let report = afa(&["report", "b"], dir.path());
    assert!(!report.status.success());

    fs::create_dir_all(dir.path().join("c")).unwrap();
    fs::write(dir.path().join("c/.lock"), "1").unwrap();
    let out = afa(&["run", "--preset", "lemma1", "--out", "c"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn report_prints_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    ok(&afa(&["run", "--preset", "theorem1", "--out", "b"], dir.path()));
    let json = afa(&["report", "b", "--format", "json"], dir.path());
    ok(&json);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    let rows = v["tables"]["alignment"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["nn_accuracy"], serde_json::json!(1));
    let csv = afa(&["report", "b", "--format", "csv"], dir.path());
    ok(&csv);
    let text = String::from_utf8_lossy(&csv.stdout);
    assert!(text.contains("# table=alignment") && text.contains("# table=separation_pairs"));
}

#[test]
fn presets_are_listed_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = afa(&["presets"], dir.path());
    ok(&out);
    let names: Vec<String> = String::from_utf8_lossy(&out.stdout).lines().map(String::from).collect();
    assert_eq!(names.len(), 7);
    for n in &names {
        let text = afa(&["presets", n], dir.path());
        ok(&text);
        let needs_mnist = String::from_utf8_lossy(&text.stdout).contains("kind = \"mnist\"");
        if !needs_mnist {
            ok(&afa(&["validate-config", "--preset", n], dir.path()));
        } else if mnist_dir().join("train-images-idx3-ubyte").exists() {
            // MNIST presets resolve `data/mnist` against the working directory.
            let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
            ok(&afa(&["validate-config", "--preset", n], &root));
        }
    }
}
