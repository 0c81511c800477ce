use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sdtnet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdtnet"))
        .args(args)
        .current_dir(cwd)
        .env("SDTNET_RUNS_DIR", cwd.join("runs"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

const TINY: &str = "\
# small network for quick runs
val_subjects = 2
test_subjects = 2
labels_fraction = 0.5
batch_size = 2
max_epochs = 1
steps_per_epoch = 2
parallel = false
network.anatomy_channels = 4
network.n_z = 4
network.anatomy_widths = 4,4,8,8
network.transformer_widths = 4,4,4,4
network.transformer_bottleneck = 8
network.transformer_hidden = 8
network.transformer_code_channels = 2
network.modality_widths = 4,4,4
network.decoder_width = 4
network.segmentor_width = 4
network.discriminator_widths = 4,4,4
network.mi_widths = 4,4,4
";

fn dataset(dir: &Path) {
    ok(&sdtnet(dir, &["phantom", "--subjects", "8", "--frames", "4", "--size", "32", "--seed", "2", "-o", "data"]));
    fs::write(dir.join("tiny.txt"), TINY).unwrap();
}

fn frame_count(dir: &Path, prefix: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix))
        .count()
}

#[test]
fn phantom_writes_layout_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let o = sdtnet(t.path(), &["phantom", "--subjects", "20", "--frames", "10", "--size", "64", "--seed", "1", "-o", "a"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("20 subjects"));
    let subjects: Vec<_> = fs::read_dir(t.path().join("a")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(subjects.len(), 20);
    for s in &subjects {
        assert_eq!(frame_count(s, "frame_"), 10);
        assert_eq!(frame_count(s, "label_"), 10);
        assert!(s.join("meta.json").exists());
    }
    ok(&sdtnet(t.path(), &["phantom", "--subjects", "20", "--frames", "10", "--size", "64", "--seed", "1", "-o", "b"]));
    for s in &subjects {
        let name = s.file_name().unwrap();
        for f in fs::read_dir(s).unwrap() {
            let f = f.unwrap();
            let other = t.path().join("b").join(name).join(f.file_name());
            assert_eq!(fs::read(f.path()).unwrap(), fs::read(other).unwrap());
        }
    }
    let again = sdtnet(t.path(), &["phantom", "--subjects", "2", "--frames", "4", "--size", "32", "-o", "a"]);
    assert_eq!(again.status.code(), Some(2));
    ok(&sdtnet(t.path(), &["phantom", "--subjects", "2", "--frames", "4", "--size", "32", "-o", "a", "--force"]));
}

#[test]
fn phantom_rejects_size_not_multiple_of_16() {
    let t = tempfile::tempdir().unwrap();
    let o = sdtnet(t.path(), &["phantom", "--subjects", "2", "--size", "60", "-o", "d"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_rejects_unknown_key_and_missing_data() {
    let t = tempfile::tempdir().unwrap();
    let o = sdtnet(t.path(), &["train", "--data", "nowhere", "--no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = sdtnet(t.path(), &["train", "--data", "nowhere"]);
    assert_eq!(o.status.code(), Some(3));
    let o = sdtnet(t.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_keys_with_defaults() {
    let t = tempfile::tempdir().unwrap();
    let o = sdtnet(t.path(), &["train", "--help"]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    for (key, default) in [("weights.lambda0", "10"), ("weights.lambda2", "10"), ("weights.lambda_kl", "0.1"), ("training.lr_max", "0.0001"), ("training.lr_min", "0.00001"), ("training.lr_period_epochs", "20")] {
        let line = text.lines().find(|l| l.trim_start().starts_with(key)).unwrap_or_else(|| panic!("{key} missing"));
        assert_eq!(line.split_whitespace().nth(1), Some(default), "{line}");
    }
}

#[test]
fn train_eval_synthesize_factors() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    dataset(p);
    ok(&sdtnet(p, &["train", "-c", "tiny.txt", "--data", "data", "--run_id=a", "--seed=3"]));
    let run = p.join("runs/a");
    for f in ["best/manifest.json", "best/params.safetensors", "last/manifest.json", "log.csv", "split.json", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let again = sdtnet(p, &["train", "-c", "tiny.txt", "--data", "data", "--run_id=a"]);
    assert_eq!(again.status.code(), Some(2));

    ok(&sdtnet(p, &["train", "-c", "tiny.txt", "--data", "data", "--run_id=sdnet", "--weights.lambda3=0"]));
    let log = fs::read_to_string(p.join("runs/sdnet/log.csv")).unwrap();
    let col = log.lines().next().unwrap().split(',').position(|c| c == "tr").unwrap();
    for line in log.lines().skip(1) {
        assert_eq!(line.split(',').nth(col), Some("0"));
    }

    ok(&sdtnet(p, &["eval", "-k", "runs/a/best", "-s", "test"]));
    let metrics = p.join("reports/a/metrics.csv");
    assert!(metrics.exists() && p.join("reports/a/summary.json").exists());
    // 2 test subjects x 2 phases x 3 classes
    let rows = fs::read_to_string(&metrics).unwrap();
    assert_eq!(rows.lines().filter(|l| l.contains(",ED,") || l.contains(",ES,")).count(), 12);
    assert_eq!(frame_count(&p.join("reports/a/overlays"), ""), 4);

    ok(&sdtnet(p, &["eval", "-k", "runs/a/best", "-s", "all", "-o", "all_a"]));
    ok(&sdtnet(p, &["eval", "-k", "runs/a/best", "-s", "all", "--compare", "all_a/metrics.csv", "-o", "cmp"]));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("cmp/summary.json")).unwrap()).unwrap();
    for class in ["LV", "MYO", "RV", "mean"] {
        assert_eq!(summary["p_values"][class], 1.0, "{summary}");
    }

    ok(&sdtnet(p, &["synthesize", "-k", "runs/a/best", "--frames", "7"]));
    assert_eq!(frame_count(&p.join("reports/a/synthesis"), "frame_"), 7);

    let img = p.join("data").join(fs::read_dir(p.join("data")).unwrap().next().unwrap().unwrap().file_name()).join("frame_000.png");
    ok(&sdtnet(p, &["factors", "-k", "runs/a/best", "-i", img.to_str().unwrap(), "-o", "f.png"]));
    let panel = image::open(p.join("f.png")).unwrap();
    assert_eq!((panel.width(), panel.height()), (32 * 5, 32));

    fs::write(run.join("best/manifest.json"), "{").unwrap();
    let o = sdtnet(p, &["eval", "-k", "runs/a/best"]);
    assert_eq!(o.status.code(), Some(4));
}
