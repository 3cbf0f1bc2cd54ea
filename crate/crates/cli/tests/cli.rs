use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentpath::cluster::{write_cluster_model, ClusterModel};
use latentpath::data::manifest::load_manifest;
use latentpath::data::netpbm::read_pam;
use latentpath::data::{save_manifest, Image, Label, PatchRecord, PatchSet, SetRole, Stain};
use latentpath::experiment::encode_set;
use latentpath::models::{
    to_blocks, ArchitectureConfig, AutoencoderModel, ClassifierHead, EncoderModel,
};
use latentpath::tensor::{read_checkpoint, write_checkpoint};

/// Settings small enough for a debug-speed test run.
const TINY: &[&str] = &[
    "--set",
    "latent_dim=8",
    "--set",
    "base_channels=4",
    "--set",
    "channel_cap=8",
    "--set",
    "batch_size=8",
    "--set",
    "kmeans_k=4",
    "--set",
    "augment=false",
];

fn latentpath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentpath"))
        .args(args)
        .env_remove("LATENTPATH_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = latentpath(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    stdout(&out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: usize) {
    ok(&[
        "synth",
        s(dir),
        "--size",
        "16",
        "--count",
        &count.to_string(),
        "--region-size",
        "48",
        "--seed",
        "7",
    ]);
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 60);
    synth(&b, 60);
    let ta = tree_bytes(&a);
    assert!(ta.iter().any(|(p, _)| p == Path::new("manifest.csv")));
    assert!(ta.iter().any(|(p, _)| p == Path::new("test_manifest.csv")));
    assert!(ta.iter().any(|(p, _)| p == Path::new("region/mask.pgm")));
    assert_eq!(ta, tree_bytes(&b));
}

#[test]
fn synth_prints_class_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&[
        "synth",
        s(tmp.path()),
        "--size",
        "16",
        "--count",
        "30",
        "--seed",
        "1",
    ]);
    assert!(out.contains("train: 30 patches (stroma"), "{out}");
    assert!(out.contains("test: 10 patches"), "{out}");
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_latentpath"));
        cmd.args([
            "synth",
            s(dir),
            "--size",
            "16",
            "--count",
            "12",
            "--region-size",
            "16",
        ]);
        cmd.env_remove("LATENTPATH_SEED");
        if let Some(e) = env {
            cmd.env("LATENTPATH_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        tree_bytes(dir)
    };
    let by_env = run(&tmp.path().join("env"), Some("11"), None);
    let by_flag = run(&tmp.path().join("flag"), None, Some("11"));
    let other = run(&tmp.path().join("other"), Some("12"), None);
    let flag_wins = run(&tmp.path().join("both"), Some("12"), Some("11"));
    assert_eq!(by_env, by_flag);
    assert_ne!(by_env, other);
    assert_eq!(by_flag, flag_wins);
}

#[test]
fn synth_defaults_to_64_pixel_patches() {
    let out = ok(&["synth", "--help"]);
    assert!(out.contains("[default: 64]"), "{out}");
}

#[test]
fn synth_rejects_non_power_of_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = latentpath(&["synth", s(tmp.path()), "--size", "63", "--count", "5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("patch size must be a power of two"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let out = latentpath(&["synth", "/tmp/x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = latentpath(&[
        "train-ae",
        "--data",
        "/definitely/missing",
        "--out",
        "/tmp/ae.lpth",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not exist"));
    let out = latentpath(&["evaluate", "--data", "/definitely/missing"]);
    assert_eq!(out.status.code(), Some(2));
    let out = latentpath(&["synth", "/tmp/x", "--set", "nonsense_key=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expected: &[(&str, &[&str])] = &[
        (
            "synth",
            &["--size", "--count", "--seed", "--config", "--preset"],
        ),
        (
            "train-ae",
            &["--data", "--target", "--out", "--config", "--seed"],
        ),
        (
            "cluster",
            &[
                "--encoder",
                "--data",
                "--labels-n",
                "--seed",
                "--out",
                "--k",
            ],
        ),
        (
            "train-head",
            &["--encoder", "--data", "--labels-n", "--out"],
        ),
        (
            "train-supervised",
            &["--data", "--labels-n", "--input", "--out"],
        ),
        (
            "evaluate",
            &[
                "--manifest",
                "--data",
                "--supervised",
                "--encoder",
                "--head",
                "--clusters",
            ],
        ),
        (
            "map",
            &["--image", "--mask", "--stride", "--out", "--encoder"],
        ),
        (
            "grid",
            &["--data", "--out", "--jobs", "--preset", "--config"],
        ),
    ];
    for (cmd, flags) in expected {
        let help = ok(&[cmd, "--help"]);
        for flag in *flags {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn cross_target_needs_ihc_images() {
    let tmp = tempfile::tempdir().unwrap();
    let records: Vec<PatchRecord> = (0..24)
        .map(|i| {
            let mut r =
                PatchRecord::new(Image::filled(3, 16, 16, i as f64 / 30.0), format!("p{i}"));
            r.label = Some(Label::ALL[[0, 1, 2, 2][i % 4]]);
            r
        })
        .collect();
    let set = PatchSet::new(records, SetRole::Source).unwrap();
    save_manifest(&set, tmp.path(), "manifest.csv").unwrap();
    save_manifest(&set, tmp.path(), "test_manifest.csv").unwrap();
    let out = latentpath(&with_tiny(&[
        "train-ae",
        "--data",
        s(tmp.path()),
        "--target",
        "cross",
        "--out",
        s(&tmp.path().join("ae.lpth")),
    ]));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("configuration error"),
        "{}",
        stderr(&out)
    );
    assert!(stderr(&out).contains("ihc image"), "{}", stderr(&out));
}

#[test]
fn pipeline_commands_work_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 120);
    let ae = tmp.path().join("models/ae.lpth");
    let out = ok(&with_tiny(&[
        "train-ae",
        "--data",
        s(&data),
        "--out",
        s(&ae),
        "--epochs",
        "4",
        "--set",
        "ae_learning_rate=0.01",
    ]));
    assert!(out.contains("over 4 epochs"), "{out}");
    let loss = std::fs::read_to_string(tmp.path().join("models/ae_loss.csv")).unwrap();
    let rows: Vec<f64> = loss
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(loss.lines().next(), Some("epoch,mean_loss"));
    assert_eq!(rows.len(), 4);
    assert!(rows[3] < rows[0], "{rows:?}");

    // clustering is reproducible for a fixed seed
    let clusters = [tmp.path().join("k1.lpkm"), tmp.path().join("k2.lpkm")];
    for path in &clusters {
        ok(&with_tiny(&[
            "cluster",
            "--encoder",
            s(&ae),
            "--data",
            s(&data),
            "--labels-n",
            "20",
            "--seed",
            "3",
            "--out",
            s(path),
        ]));
    }
    assert_eq!(
        std::fs::read(&clusters[0]).unwrap(),
        std::fs::read(&clusters[1]).unwrap()
    );

    let empty = latentpath(&with_tiny(&[
        "cluster",
        "--encoder",
        s(&ae),
        "--data",
        s(&data),
        "--labels-n",
        "0",
        "--out",
        s(&tmp.path().join("k0.lpkm")),
    ]));
    assert!(empty.status.success());
    assert!(stderr(&empty).contains("every cluster is assigned stroma"));
    assert!(
        stdout(&empty).contains("stroma 4, benign 0, tumour 0"),
        "{}",
        stdout(&empty)
    );

    let head = tmp.path().join("head.lpth");
    ok(&with_tiny(&[
        "train-head",
        "--encoder",
        s(&ae),
        "--data",
        s(&data),
        "--labels-n",
        "20",
        "--out",
        s(&head),
        "--epochs",
        "3",
    ]));
    let sup = tmp.path().join("sup.lpth");
    ok(&with_tiny(&[
        "train-supervised",
        "--data",
        s(&data),
        "--labels-n",
        "20",
        "--out",
        s(&sup),
        "--epochs",
        "2",
    ]));
    assert!(tmp.path().join("sup_loss.csv").exists());

    for models in [
        vec!["--encoder", s(&ae), "--head", s(&head)],
        vec!["--encoder", s(&ae), "--clusters", s(&clusters[0])],
        vec!["--supervised", s(&sup)],
    ] {
        let mut args = vec!["evaluate", "--data", s(&data)];
        args.extend(models);
        let out = ok(&args);
        assert!(out.starts_with("F1 "), "{out}");
    }
    let out = latentpath(&["evaluate", "--data", s(&data), "--encoder", s(&ae)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_perfect_fixture_prints_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 30);
    let arch = ArchitectureConfig {
        patch_size: 16,
        latent_dim: 8,
        base_channels: 4,
        channel_cap: 8,
        ..ArchitectureConfig::default()
    };
    let ae = AutoencoderModel::<f64>::new(&arch, 1).unwrap();
    let ae_path = tmp.path().join("ae.lpth");
    write_checkpoint(&ae_path, &to_blocks(&ae.named_parameters())).unwrap();

    // one centroid per test patch, labelled with its true class
    let test = load_manifest(&data.join("test_manifest.csv"), SetRole::Test).unwrap();
    let encoder = EncoderModel::<f64>::from_blocks(&read_checkpoint(&ae_path).unwrap()).unwrap();
    let latents = encode_set(&encoder, &test, Stain::He, 16).unwrap();
    let model = ClusterModel {
        k: test.len(),
        dim: 8,
        centroids: latents,
        cluster_labels: test.labels().unwrap(),
        inertia: 0.0,
        inertia_history: Vec::new(),
        iterations: 0,
    };
    let clusters = tmp.path().join("perfect.lpkm");
    write_cluster_model(&clusters, &model).unwrap();
    let out = ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--encoder",
        s(&ae_path),
        "--clusters",
        s(&clusters),
    ]);
    assert!(out.contains("F1 1.000"), "{out}");
}

#[test]
fn map_on_256_region_with_stride_32_has_49_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        s(&data),
        "--count",
        "3",
        "--region-size",
        "256",
        "--seed",
        "2",
    ]);
    let arch = ArchitectureConfig {
        patch_size: 64,
        latent_dim: 8,
        base_channels: 4,
        channel_cap: 8,
        ..ArchitectureConfig::default()
    };
    let ae = AutoencoderModel::<f64>::new(&arch, 1).unwrap();
    let ae_path = tmp.path().join("ae.lpth");
    write_checkpoint(&ae_path, &to_blocks(&ae.named_parameters())).unwrap();
    let head_path = tmp.path().join("head.lpth");
    write_checkpoint(
        &head_path,
        &to_blocks(&ClassifierHead::<f64>::new(8, 4).unwrap().named_parameters()),
    )
    .unwrap();
    let out_dir = tmp.path().join("map");
    let out = ok(&[
        "map",
        "--image",
        s(&data.join("region/he.ppm")),
        "--mask",
        s(&data.join("region/mask.pgm")),
        "--stride",
        "32",
        "--out",
        s(&out_dir),
        "--encoder",
        s(&ae_path),
        "--head",
        s(&head_path),
    ]);
    assert!(out.starts_with("49 windows"), "{out}");
    assert!(out.contains("agreement "), "{out}");
    let map = read_pam(&out_dir.join("map.pam")).unwrap();
    assert_eq!((map.width, map.height), (256, 256));
    let allowed = [[0, 0, 0, 0], [0, 255, 0, 255], [255, 0, 0, 255]];
    assert!(map.data.iter().all(|p| allowed.contains(p)));
    assert!(out_dir.join("overlay.ppm").exists());
}

#[test]
fn grid_writes_identical_results_twice() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.conf");
    std::fs::write(
        &config,
        "# tiny grid\npatch_size = 16\nlatent_dim = 8\nbase_channels = 4\nchannel_cap = 8\n\
         dr_size = 40\ndb_size = 40\ntest_size = 24\nsynthetic_train = 150\nsynthetic_test = 60\n\
         nlp_grid = 8, 20\nrepeats = 2\nbatch_size = 8\nae_epochs = 1\nhead_epochs = 3\n\
         supervised_epochs = 1\nkmeans_k = 4\n",
    )
    .unwrap();
    let runs = ["one", "two"].map(|name| tmp.path().join(name));
    for (i, out) in runs.iter().enumerate() {
        let jobs = if i == 0 { "1" } else { "3" };
        let text = ok(&[
            "grid",
            "--config",
            s(&config),
            "--out",
            s(out),
            "--jobs",
            jobs,
            "--quiet",
        ]);
        assert!(text.contains("NLP"), "{text}");
    }
    for name in [
        "results.csv",
        "summary.csv",
        "table.txt",
        "autoencoder_same_loss.csv",
    ] {
        let a = std::fs::read(runs[0].join(name)).unwrap();
        let b = std::fs::read(runs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
    let results = std::fs::read_to_string(runs[0].join("results.csv")).unwrap();
    assert_eq!(
        results.lines().next(),
        Some("method,stain_variant,nlp,repeat,f1,tp,fp,fn,tn")
    );
    // 2 budgets x 2 repeats x (2 + 2 + 1) variants
    assert_eq!(results.lines().count(), 1 + 20);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs[0].join("run_manifest.json")).unwrap())
            .unwrap();
    assert!(manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .any(|a| a == "results.csv"));
    assert!(manifest["config"]
        .as_str()
        .unwrap()
        .contains("nlp_grid = 8,20"));

    // the snapshot config reproduces the run
    let again = tmp.path().join("again");
    ok(&[
        "grid",
        "--config",
        s(&runs[0].join("config.txt")),
        "--out",
        s(&again),
        "--quiet",
    ]);
    assert_eq!(
        std::fs::read(runs[0].join("results.csv")).unwrap(),
        std::fs::read(again.join("results.csv")).unwrap()
    );
}
