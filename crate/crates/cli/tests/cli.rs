use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "batch_size = 2
epochs = 2
image_size = 32
checkpoint_every = 1

[model]
channels = [4, 4, 4, 8, 8]
width = 4
";

fn clnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clnet"))
        .args(args)
        .output()
        .expect("spawn clnet")
}

fn ok(args: &[&str]) -> String {
    let out = clnet(args);
    assert!(
        out.status.success(),
        "clnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic data plus a tiny-model config in a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--n", "3", "--size", "32", "--out", p(&data)]);
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, data, cfg)
}

#[test]
fn help_matches_golden() {
    let got = ok(&["--help"]);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    if std::env::var_os("CLNET_BLESS").is_some() {
        fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, fs::read_to_string(&golden).unwrap());
}

#[test]
fn help_lists_every_config_key() {
    let help = ok(&["train", "--help"]);
    assert!(help.contains("--prompt-source"));
    let top = ok(&["--help"]);
    for (key, _, _) in clnet::config::TrainConfig::documented_keys() {
        assert!(top.contains(&key), "{key}");
    }
}

#[test]
fn full_pipeline() {
    let (dir, data, cfg) = workspace();
    let run = dir.path().join("run");
    let stdout = ok(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)]);
    assert!(stdout.trim().ends_with("last.ckpt"));
    for f in ["last.ckpt", "history.csv", "epoch_0001.ckpt", "epoch_0002.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 4);

    let preds = dir.path().join("preds");
    ok(&[
        "predict",
        "--checkpoint",
        p(&run.join("last.ckpt")),
        "--input",
        p(&data.join("images")),
        "--out",
        p(&preds),
        "--overlay",
    ]);
    for k in 0..3 {
        assert!(preds.join(format!("synth_{k:04}.png")).is_file());
        assert!(preds.join(format!("synth_{k:04}_overlay.png")).is_file());
    }

    let prompts = dir.path().join("prompts.csv");
    ok(&[
        "make-prompts",
        "--data",
        p(&data),
        "--checkpoint",
        p(&run.join("last.ckpt")),
        "--out",
        p(&prompts),
    ]);
    let text = fs::read_to_string(&prompts).unwrap();
    assert!(text.starts_with("image_id,x0,y0,x1,y1,source\n"));
    assert_eq!(text.lines().count(), 4);

    // Overlays share the directory, so only bare maps are scored.
    let only_maps = dir.path().join("maps");
    fs::create_dir(&only_maps).unwrap();
    for k in 0..3 {
        let name = format!("synth_{k:04}.png");
        fs::copy(preds.join(&name), only_maps.join(&name)).unwrap();
    }
    let table = ok(&["eval", "--pred", p(&only_maps), "--gt", p(&data.join("masks"))]);
    assert!(table.contains("mDice"));
    assert!(table.contains("| 3 |"));
}

#[test]
fn resume_continues_from_checkpoint() {
    let (dir, data, cfg) = workspace();
    let run = dir.path().join("run");
    ok(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)]);
    let full = fs::read_to_string(run.join("history.csv")).unwrap();
    let again = dir.path().join("again");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--resume",
        p(&run.join("epoch_0001.ckpt")),
        "--out",
        p(&again),
    ]);
    assert_eq!(fs::read_to_string(again.join("history.csv")).unwrap(), full);
}

#[test]
fn eval_output_is_stable() {
    let (dir, data, _) = workspace();
    let csv_a = dir.path().join("a.csv");
    let csv_b = dir.path().join("b.csv");
    let masks = data.join("masks");
    let a = ok(&["eval", "--pred", p(&masks), "--gt", p(&masks), "--csv", p(&csv_a)]);
    let b = ok(&["eval", "--pred", p(&masks), "--gt", p(&masks), "--csv", p(&csv_b)]);
    assert_eq!(a, b);
    assert_eq!(fs::read(&csv_a).unwrap(), fs::read(&csv_b).unwrap());
    let csv = fs::read_to_string(&csv_a).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("mean,1,1,"));
}

#[test]
fn eval_rejects_mismatched_ids() {
    let (dir, data, _) = workspace();
    let preds = dir.path().join("preds");
    fs::create_dir(&preds).unwrap();
    fs::copy(data.join("masks/synth_0000.png"), preds.join("synth_0000.png")).unwrap();
    fs::copy(data.join("masks/synth_0001.png"), preds.join("other.png")).unwrap();
    let out = clnet(&["eval", "--pred", p(&preds), "--gt", p(&data.join("masks"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("other") && err.contains("synth_0002"), "{err}");
}

#[test]
fn invalid_input_exits_with_one() {
    let (dir, data, cfg) = workspace();
    let out = clnet(&["train", "--data", p(&data), "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = clnet(&["train", "--data", p(&data), "--config", p(&cfg), "--image-size", "33"]);
    assert_eq!(out.status.code(), Some(1));
    let out = clnet(&["train", "--data", p(&data), "--config", p(&cfg), "--set", "nonsense=1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = clnet(&["train", "--data", p(&data), "--config", p(&cfg), "--prompt-source", "box3"]);
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochs = \"many\"\n").unwrap();
    let out = clnet(&["train", "--data", p(&data), "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn missing_backend_and_missing_data_exit_with_two() {
    let (dir, data, cfg) = workspace();
    let out = clnet(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--segmenter",
        "external:sam-vit-b",
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sam-vit-b"));
    let out = clnet(&["train", "--data", p(&dir.path().join("nowhere")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synthetic_data_is_reproducible_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth-data", "--n", "2", "--size", "32", "--seed", "9", "--out", p(&a)]);
    ok(&["synth-data", "--n", "2", "--size", "32", "--seed", "9", "--out", p(&b)]);
    for sub in ["images", "scribbles", "masks"] {
        for k in 0..2 {
            let f = format!("{sub}/synth_{k:04}.png");
            assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f}");
        }
    }
}
