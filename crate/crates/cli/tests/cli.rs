use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
n_pairs = 4
n_singles = 2
level = 2

[flatten]
height = 16
width = 16

[model]
reduction = 4

[model.encoder]
height = 16
width = 16
channels = [4, 4]
fingerprint_dim = 6

[train]
epochs_pretrain = 1
epochs_finetune = 1
epochs_fusion = 1
batch_pretrain = 2
batch_finetune = 2

[eval]
rounds = 1
saliency_patch = 8
"#;

fn morphprint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphprint"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(morphprint(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    let o = morphprint(&[
        "gradcheck",
        "--seeds",
        "1",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = morphprint(&["gradcheck", "--seeds", "2", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("conv2d"));
    assert!(!stdout(&o).contains("FAIL"));
    assert!(dir.path().join("gradcheck.csv").exists());
}

#[test]
fn synth_is_deterministic_and_records_its_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = morphprint(&[
            "synth",
            "--subjects",
            "4",
            "--seed",
            "7",
            "--config",
            &cfg,
            "--out",
            path(out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let manifest = |d: &Path| std::fs::read(d.join("manifest.csv")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    assert_eq!(
        manifest(&a).iter().filter(|&&c| c == b'\n').count(),
        1 + 2 * (4 * 2 + 2)
    );
    let run = std::fs::read_to_string(a.join("run.toml")).unwrap();
    for key in ["config_hash", "seed = 7", "version", "inputs", "timestamp"] {
        assert!(run.contains(key), "{key}");
    }
    let strip = |d: &Path| {
        std::fs::read_to_string(d.join("run.toml"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("timestamp") && !l.contains(path(d)))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&a), strip(&b));
    let resolved = std::fs::read_to_string(a.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("weight_scale") && resolved.contains("seed = 7"));
}

#[test]
fn flatten_needs_a_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(
        morphprint(&["synth", "--config", &cfg, "--out", path(&data)])
            .status
            .success()
    );
    let sphere = data.join("template_left.obj");
    let features = data.join("features/pair000_scan0_left.csv");
    let o = morphprint(&[
        "flatten",
        "--mesh",
        path(&sphere),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no boundary"), "{}", stderr(&o));

    let half = dir.path().join("half");
    let o = morphprint(&[
        "flatten",
        "--mesh",
        path(&sphere),
        "--features",
        path(&features),
        "--half",
        "pos",
        "--config",
        &cfg,
        "--out",
        path(&half),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(half.join("distortion.txt")).unwrap();
    assert!(report.contains("flipped_faces=0"), "{report}");

    let img = dir.path().join("img");
    let o = morphprint(&[
        "rasterize",
        "--mesh",
        path(&half.join("half.obj")),
        "--features",
        path(&half.join("half_features.csv")),
        "--map",
        path(&half.join("planar_map.csv")),
        "--config",
        &cfg,
        "--out",
        path(&img),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let fimg = img.join("image.fimg");
    assert_eq!(&std::fs::read(&fimg).unwrap()[..4], b"FIMG");

    let aug = dir.path().join("aug");
    let o = morphprint(&[
        "augment",
        "--image",
        path(&fimg),
        "--config",
        &cfg,
        "--out",
        path(&aug),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_ne!(
        std::fs::read(aug.join("view1.fimg")).unwrap(),
        std::fs::read(aug.join("view2.fimg")).unwrap()
    );
}

#[test]
fn train_eval_and_saliency_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(
        morphprint(&["synth", "--config", &cfg, "--out", path(&data)])
            .status
            .success()
    );
    let manifest = data.join("manifest.csv");
    let model = dir.path().join("model");
    let o = morphprint(&[
        "train",
        "--manifest",
        path(&manifest),
        "--config",
        &cfg,
        "--out",
        path(&model),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "model.pset",
        "model.toml",
        "stats.csv",
        "history.csv",
        "run.toml",
    ] {
        assert!(model.join(f).exists(), "{f}");
    }

    let eval = dir.path().join("eval");
    let run_eval = || {
        morphprint(&[
            "eval",
            "--manifest",
            path(&manifest),
            "--model",
            path(&model),
            "--config",
            &cfg,
            "--out",
            path(&eval),
        ])
    };
    let o = run_eval();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = std::fs::read(eval.join("similarity.csv")).unwrap();
    assert!(String::from_utf8_lossy(&first).starts_with("row,col,distance"));
    assert!(run_eval().status.success());
    assert_eq!(std::fs::read(eval.join("similarity.csv")).unwrap(), first);

    let sal = dir.path().join("sal");
    let o = morphprint(&[
        "saliency",
        "--manifest",
        path(&manifest),
        "--model",
        path(&model),
        "--subject",
        "pair001",
        "--config",
        &cfg,
        "--out",
        path(&sal),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(sal.join("saliency.csv").exists());

    let o = morphprint(&[
        "saliency",
        "--manifest",
        path(&manifest),
        "--model",
        path(&model),
        "--subject",
        "single000",
        "--config",
        &cfg,
        "--out",
        path(&sal),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = morphprint(&[
        "eval",
        "--manifest",
        path(&dir.path().join("missing.csv")),
        "--config",
        &cfg,
        "--out",
        path(&eval),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cross_validation_commands_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(morphprint(&[
        "synth",
        "--subjects",
        "6",
        "--config",
        &cfg,
        "--out",
        path(&data)
    ])
    .status
    .success());
    let manifest = data.join("manifest.csv");
    let o = morphprint(&[
        "ablate",
        "--manifest",
        path(&manifest),
        "--config",
        &cfg,
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert!(
        table.starts_with("label,description,n_test,top1,top5\nA,"),
        "{table}"
    );
    assert_eq!(table.lines().count(), 5);
    let o = morphprint(&[
        "channels",
        "--manifest",
        path(&manifest),
        "--config",
        &cfg,
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("channels.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    let o = morphprint(&[
        "eval",
        "--manifest",
        path(&manifest),
        "--config",
        &cfg,
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("metrics.csv").exists());
}
