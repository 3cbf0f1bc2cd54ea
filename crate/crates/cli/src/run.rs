use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use latentpath::cluster::{read_cluster_model, write_cluster_model, ClusterModel};
use latentpath::data::manifest::load_manifest;
use latentpath::data::netpbm::{read_pgm_mask, read_ppm, write_pam, write_pgm_mask, write_ppm};
use latentpath::data::{
    balanced_counts, generate_region, generate_synthetic, save_manifest, Image, Label, PatchSet,
    SetRole, Stain, TISSUE_RATIOS,
};
use latentpath::experiment::grid::{autoencoder_seed, subset_indices};
use latentpath::experiment::train::images_of;
use latentpath::experiment::{
    evaluate_f1, predict_semi_supervised, predict_supervised, predict_unsupervised, prepare_data,
    render_classification_map, run_grid, split_data, train_autoencoder, train_semi_supervised,
    train_supervised, train_unsupervised_labeling, write_loss_curve, ExperimentConfig,
    ExperimentData, Preset,
};
use latentpath::io_util::write_atomic;
use latentpath::models::{
    to_blocks, AutoencoderModel, ClassifierHead, EncoderModel, SupervisedClassifier, TargetStain,
};
use latentpath::rng::derive_seed;
use latentpath::tensor::{read_checkpoint, write_checkpoint};
use serde::Serialize;

use crate::{Common, ModelArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] latentpath::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for usage and configuration mistakes, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(latentpath::Error::Usage(_) | latentpath::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// `run/ae.lpth` -> `run/ae_loss.csv`.
fn loss_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    checkpoint.with_file_name(format!("{stem}_loss.csv"))
}

pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let preset: Preset = match &common.preset {
        Some(p) => p.parse()?,
        None => Preset::Desk,
    };
    let mut config = ExperimentConfig::preset(preset);
    if let Some(path) = &common.config {
        require_exists(path, "config file")?;
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        config.apply_text(&text)?;
    }
    for kv in &common.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(key, value)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Largest `n` whose ratio-balanced class counts fit in `counts`.
fn max_balanced(counts: [usize; 3]) -> usize {
    let total: usize = counts.iter().sum();
    (0..=total)
        .rev()
        .find(|&n| {
            balanced_counts(n, TISSUE_RATIOS)
                .is_ok_and(|want| want.iter().zip(counts).all(|(w, c)| *w <= c))
        })
        .unwrap_or(0)
}

/// Loads a dataset directory and splits it, shrinking the configured set
/// sizes to what the pools can supply.
fn load_splits(config: &mut ExperimentConfig, dir: &Path) -> Result<ExperimentData> {
    require_exists(dir, "data directory")?;
    let pool = load_manifest(&dir.join("manifest.csv"), SetRole::Source)?;
    let test_pool = load_manifest(&dir.join("test_manifest.csv"), SetRole::Test)?;
    if let Some(size) = pool.patch_size() {
        config.patch_size = size;
    }
    let db = config
        .db_size
        .min(max_balanced(pool.class_counts()))
        .min(pool.len() / 2);
    let dr = config.dr_size.min(pool.len() - db);
    let test = config.test_size.min(max_balanced(test_pool.class_counts()));
    if (db, dr, test) != (config.db_size, config.dr_size, config.test_size) {
        eprintln!("note: using D_r {dr}, D_b {db}, test {test} for the available records");
    }
    config.db_size = db;
    config.dr_size = dr;
    config.test_size = test;
    config.data_dir = Some(dir.to_path_buf());
    Ok(split_data(config, &pool, &test_pool)?)
}

fn labelled_subset(config: &ExperimentConfig, db: &PatchSet, n: usize) -> Result<PatchSet> {
    if n > db.len() {
        return Err(usage(format!(
            "--labels-n {n} exceeds the {} labelled records",
            db.len()
        )));
    }
    let idx = subset_indices(config, db, n, 0)?;
    Ok(db.select(&idx, SetRole::BalancedLabeled))
}

fn read_encoder(path: &Path) -> Result<EncoderModel<f64>> {
    require_exists(path, "encoder checkpoint")?;
    Ok(EncoderModel::from_blocks(&read_checkpoint(path)?)?)
}

pub fn cmd_synth(
    common: &Common,
    out: &Path,
    size: usize,
    count: usize,
    test_count: Option<usize>,
    region_size: usize,
) -> Result<()> {
    let mut config = load_config(common)?;
    config.patch_size = size;
    config.synthetic_train = count;
    config.synthetic_test = test_count.unwrap_or((count / 3).max(1));
    let synthetic = config.synthetic();
    synthetic.validate()?;
    create_dir(out)?;
    let (train, test) = generate_synthetic(&synthetic, derive_seed(config.seed, "synthetic"))?;
    save_manifest(&train, out, "manifest.csv")?;
    save_manifest(&test, out, "test_manifest.csv")?;
    let region = generate_region(region_size, region_size, derive_seed(config.seed, "region"))?;
    let region_dir = out.join("region");
    create_dir(&region_dir)?;
    write_ppm(&region_dir.join("he.ppm"), &region.he_image)?;
    write_ppm(&region_dir.join("ihc.ppm"), &region.ihc_image)?;
    write_pgm_mask(&region_dir.join("mask.pgm"), &region.mask)?;
    for (name, set) in [("train", &train), ("test", &test)] {
        let [s, b, t] = set.class_counts();
        println!(
            "{name}: {} patches (stroma {s}, benign {b}, tumour {t})",
            set.len()
        );
    }
    println!("region: {region_size}x{region_size}");
    Ok(())
}

pub fn cmd_train_ae(
    common: &Common,
    data: &Path,
    target: &str,
    out: &Path,
    epochs: Option<usize>,
) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(e) = epochs {
        config.ae_epochs = e;
    }
    let target: TargetStain = target.parse()?;
    let data = load_splits(&mut config, data)?;
    let seed = autoencoder_seed(&config, target);
    let model = AutoencoderModel::new(&config.architecture(target), seed)?;
    let (model, curve) = train_autoencoder(&data.dr, model, &config.ae_hyper(seed))?;
    ensure_parent(out)?;
    write_checkpoint(out, &to_blocks(&model.named_parameters()))?;
    write_loss_curve(&loss_path(out), &curve)?;
    match (curve.first(), curve.last()) {
        (Some(first), Some(last)) => {
            println!("loss {first:.6} -> {last:.6} over {} epochs", curve.len())
        }
        _ => println!("no epochs run"),
    }
    Ok(())
}

pub fn cmd_cluster(
    common: &Common,
    encoder: &Path,
    data: &Path,
    labels_n: usize,
    k: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(k) = k {
        config.kmeans_k = k;
    }
    let encoder = read_encoder(encoder)?;
    let data = load_splits(&mut config, data)?;
    let subset = labelled_subset(&config, &data.db, labels_n)?;
    if labels_n == 0 {
        eprintln!("warning: no labelled points, every cluster is assigned stroma");
    }
    let model = train_unsupervised_labeling(
        &encoder,
        &data.dr,
        &subset,
        &config.kmeans(),
        derive_seed(config.seed, "cluster"),
    )?;
    ensure_parent(out)?;
    write_cluster_model(out, &model)?;
    let mut per_label = [0usize; 3];
    for &l in &model.cluster_labels {
        per_label[l.index()] += 1;
    }
    println!(
        "{} clusters after {} iterations, inertia {:.4}: stroma {}, benign {}, tumour {}",
        model.k, model.iterations, model.inertia, per_label[0], per_label[1], per_label[2]
    );
    Ok(())
}

pub fn cmd_train_head(
    common: &Common,
    encoder: &Path,
    data: &Path,
    labels_n: usize,
    out: &Path,
    epochs: Option<usize>,
) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(e) = epochs {
        config.head_epochs = e;
    }
    let encoder = read_encoder(encoder)?;
    let data = load_splits(&mut config, data)?;
    let subset = labelled_subset(&config, &data.db, labels_n)?;
    let head = train_semi_supervised(
        &encoder,
        &subset,
        &config.head_hyper(derive_seed(config.seed, "head")),
    )?;
    ensure_parent(out)?;
    write_checkpoint(out, &to_blocks(&head.named_parameters()))?;
    println!("head trained on {} labelled patches", subset.len());
    Ok(())
}

pub fn cmd_train_supervised(
    common: &Common,
    data: &Path,
    labels_n: usize,
    input: &str,
    out: &Path,
    epochs: Option<usize>,
) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(e) = epochs {
        config.supervised_epochs = e;
    }
    let input: Stain = input.parse()?;
    let data = load_splits(&mut config, data)?;
    let subset = labelled_subset(&config, &data.db, labels_n)?;
    let (model, curve) = train_supervised(
        &subset,
        input,
        &config.architecture(TargetStain::SameStain),
        &config.supervised_hyper(derive_seed(config.seed, "supervised")),
    )?;
    ensure_parent(out)?;
    write_checkpoint(out, &to_blocks(&model.named_parameters()))?;
    write_loss_curve(&loss_path(out), &curve)?;
    println!(
        "supervised model trained on {} labelled patches, final loss {:.6}",
        subset.len(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

enum Predictor {
    Supervised(SupervisedClassifier<f64>),
    Semi(EncoderModel<f64>, ClassifierHead<f64>),
    Unsupervised(EncoderModel<f64>, ClusterModel),
}

impl Predictor {
    fn load(args: &ModelArgs) -> Result<Predictor> {
        if let Some(path) = &args.supervised {
            require_exists(path, "supervised checkpoint")?;
            return Ok(Predictor::Supervised(SupervisedClassifier::from_blocks(
                &read_checkpoint(path)?,
            )?));
        }
        let Some(encoder) = &args.encoder else {
            return Err(usage(
                "give --supervised, or --encoder with --head or --clusters",
            ));
        };
        let encoder = read_encoder(encoder)?;
        if let Some(head) = &args.head {
            require_exists(head, "head checkpoint")?;
            return Ok(Predictor::Semi(
                encoder,
                ClassifierHead::from_blocks(&read_checkpoint(head)?)?,
            ));
        }
        if let Some(clusters) = &args.clusters {
            require_exists(clusters, "cluster model")?;
            return Ok(Predictor::Unsupervised(
                encoder,
                read_cluster_model(clusters)?,
            ));
        }
        Err(usage("--encoder needs --head or --clusters"))
    }

    fn patch_size(&self) -> usize {
        match self {
            Predictor::Supervised(m) => m.encoder.patch_size(),
            Predictor::Semi(e, _) | Predictor::Unsupervised(e, _) => e.patch_size(),
        }
    }

    fn predict(&self, images: &[&Image]) -> latentpath::Result<Vec<Label>> {
        match self {
            Predictor::Supervised(m) => predict_supervised(m, images),
            Predictor::Semi(e, h) => predict_semi_supervised(e, h, images),
            Predictor::Unsupervised(e, c) => predict_unsupervised(e, c, images),
        }
    }
}

pub fn cmd_evaluate(
    common: &Common,
    manifest: Option<&Path>,
    data: Option<&Path>,
    models: &ModelArgs,
) -> Result<()> {
    load_config(common)?;
    let path = match (manifest, data) {
        (Some(m), _) => m.to_path_buf(),
        (None, Some(d)) => d.join("test_manifest.csv"),
        (None, None) => return Err(usage("give --manifest or --data")),
    };
    require_exists(&path, "manifest")?;
    let predictor = Predictor::load(models)?;
    let test = load_manifest(&path, SetRole::Test)?;
    let input: Stain = models.input.parse()?;
    let metrics = evaluate_f1(|set| predictor.predict(&images_of(set, input)?), &test)?;
    println!("F1 {:.3}", metrics.f1);
    println!(
        "tp {} fp {} fn {} tn {}",
        metrics.tp, metrics.fp, metrics.fn_, metrics.tn
    );
    Ok(())
}

pub fn cmd_map(
    common: &Common,
    image: &Path,
    mask: Option<&Path>,
    stride: usize,
    out: &Path,
    models: &ModelArgs,
) -> Result<()> {
    load_config(common)?;
    require_exists(image, "region image")?;
    if let Some(m) = mask {
        require_exists(m, "mask")?;
    }
    if stride == 0 {
        return Err(usage("--stride must be positive"));
    }
    let predictor = Predictor::load(models)?;
    let region = read_ppm(image)?;
    let map = render_classification_map(
        |w| predictor.predict(w),
        &region,
        predictor.patch_size(),
        stride,
    )?;
    create_dir(out)?;
    write_pam(&out.join("map.pam"), &map.map)?;
    write_ppm(&out.join("overlay.ppm"), &map.overlay)?;
    let mut counts = [0usize; 3];
    for w in &map.windows {
        counts[w.label.index()] += 1;
    }
    println!(
        "{} windows: stroma {}, benign {}, tumour {}",
        map.windows.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    if let Some(m) = mask {
        let mask = read_pgm_mask(m)?;
        if (mask.height, mask.width) != (region.height, region.width) {
            return Err(usage("mask and region sizes differ"));
        }
        println!("agreement {:.3}", map.agreement(&mask));
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    config: String,
    seeds: BTreeMap<String, u64>,
    artifacts: Vec<String>,
    stage_seconds: BTreeMap<String, f64>,
}

pub fn cmd_grid(
    common: &Common,
    data_dir: Option<&Path>,
    out: &Path,
    jobs: usize,
    quiet: bool,
) -> Result<()> {
    let mut config = load_config(common)?;
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let mut stages = BTreeMap::new();
    let started = Instant::now();
    let dir = data_dir
        .map(Path::to_path_buf)
        .or_else(|| config.data_dir.clone());
    let data = match dir {
        Some(dir) => load_splits(&mut config, &dir)?,
        None => prepare_data(&config)?,
    };
    stages.insert("data".to_string(), started.elapsed().as_secs_f64());
    create_dir(out)?;

    let progress = |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    };
    let outcome = run_grid(&config, &data, jobs, &progress)?;
    for (stage, secs) in &outcome.timings {
        stages.insert(stage.clone(), *secs);
    }

    let mut artifacts = Vec::new();
    let mut seeds = BTreeMap::new();
    seeds.insert("base".to_string(), config.seed);
    let mut write_text = |name: &str, text: &str| -> Result<()> {
        write_atomic(&out.join(name), |w| {
            w.write_all(text.as_bytes())?;
            Ok(())
        })?;
        artifacts.push(name.to_string());
        Ok(())
    };
    write_text("config.txt", &config.to_text())?;
    write_text("results.csv", &outcome.table.results_csv())?;
    write_text("summary.csv", &outcome.table.summary_csv())?;
    let table = outcome.table.render_text();
    write_text("table.txt", &table)?;
    for p in &outcome.pretrained {
        let checkpoint = format!("autoencoder_{}.lpth", p.target);
        let loss = format!("autoencoder_{}_loss.csv", p.target);
        write_checkpoint(&out.join(&checkpoint), &p.blocks)?;
        write_loss_curve(&out.join(&loss), &p.loss_curve)?;
        seeds.insert(
            format!("autoencoder/{}", p.target),
            autoencoder_seed(&config, p.target),
        );
        artifacts.push(checkpoint);
        artifacts.push(loss);
    }
    if config.data_dir.is_none() {
        seeds.insert(
            "synthetic".to_string(),
            derive_seed(config.seed, "synthetic"),
        );
    }
    stages.insert("total".to_string(), started.elapsed().as_secs_f64());
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        config: config.to_text(),
        seeds,
        artifacts,
        stage_seconds: stages,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("run manifest serialises");
    write_atomic(&out.join("run_manifest.json"), |w| {
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    print!("{table}");
    Ok(())
}
