//! The label-budget grid: pretrain once per reconstruction target, then
//! for every (budget, repeat) draw a labelled subset and run each method.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use super::config::{ExperimentConfig, Method, StainVariant};
use super::metrics::{metrics_from_predictions, Metrics};
use super::train::{
    encode_set, images_of, label_from_latents, predict_head, predict_supervised, train_autoencoder,
    train_head, train_supervised, LossCurve,
};
use crate::cluster::predict_clusters;
use crate::data::manifest::load_manifest;
use crate::data::sampling::balanced_indices;
use crate::data::{
    generate_synthetic, sample_balanced, sample_random, Label, PatchSet, SetRole, Stain,
    TISSUE_RATIOS,
};
use crate::error::{Error, Result};
use crate::models::{to_blocks, AutoencoderModel, EncoderModel, TargetStain};
use crate::rng::{derive_seed, derive_seed_indexed};
use crate::tensor::ParamBlock;

/// The three data roles of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    /// Unlabelled pretraining set.
    pub dr: PatchSet,
    /// Labelled pool the budget subsets are drawn from.
    pub db: PatchSet,
    pub test: PatchSet,
}

/// Builds D_b, then D_r from the remaining records, and a ratio-balanced
/// test set. Sources are the manifests under `data_dir` or, when none is
/// configured, the synthetic generator.
pub fn prepare_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let (pool, test_pool) = match &config.data_dir {
        Some(dir) => (
            load_manifest(&dir.join("manifest.csv"), SetRole::Source)?,
            load_manifest(&dir.join("test_manifest.csv"), SetRole::Test)?,
        ),
        None => generate_synthetic(&config.synthetic(), derive_seed(config.seed, "synthetic"))?,
    };
    split_data(config, &pool, &test_pool)
}

pub fn split_data(
    config: &ExperimentConfig,
    pool: &PatchSet,
    test_pool: &PatchSet,
) -> Result<ExperimentData> {
    let db_idx = balanced_indices(
        pool,
        config.db_size,
        TISSUE_RATIOS,
        derive_seed(config.seed, "db"),
    )?;
    let db = pool.select(&db_idx, SetRole::BalancedLabeled);
    let mut taken = vec![false; pool.len()];
    for &i in &db_idx {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..pool.len()).filter(|&i| !taken[i]).collect();
    let dr = sample_random(
        &pool.select(&rest, SetRole::Source),
        config.dr_size,
        derive_seed(config.seed, "dr"),
    )?;
    let mut test = sample_balanced(
        test_pool,
        config.test_size,
        TISSUE_RATIOS,
        derive_seed(config.seed, "test"),
    )?;
    test.role = SetRole::Test;
    Ok(ExperimentData { dr, db, test })
}

/// A trained autoencoder, stored as parameter blocks so it can cross
/// thread boundaries.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub target: TargetStain,
    pub blocks: Vec<ParamBlock>,
    pub loss_curve: LossCurve,
}

impl Pretrained {
    pub fn autoencoder(&self) -> Result<AutoencoderModel<f64>> {
        AutoencoderModel::from_blocks(&self.blocks, self.target)
    }

    pub fn encoder(&self) -> Result<EncoderModel<f64>> {
        EncoderModel::from_blocks(&self.blocks)
    }
}

pub fn autoencoder_seed(config: &ExperimentConfig, target: TargetStain) -> u64 {
    derive_seed(config.seed, &format!("autoencoder/{target}"))
}

/// Seed of the trainable parts of one grid cell.
pub fn cell_seed(
    base: u64,
    method: Method,
    variant: StainVariant,
    nlp: usize,
    repeat: usize,
) -> u64 {
    derive_seed_indexed(
        base,
        &format!("cell/{method}/{variant}/{nlp}"),
        repeat as u64,
    )
}

/// The labelled subset of one (budget, repeat); shared by all methods so
/// they are compared on the same labels.
pub fn subset_indices(
    config: &ExperimentConfig,
    db: &PatchSet,
    nlp: usize,
    repeat: usize,
) -> Result<Vec<usize>> {
    balanced_indices(
        db,
        nlp,
        TISSUE_RATIOS,
        derive_seed_indexed(config.seed, &format!("subset/{nlp}"), repeat as u64),
    )
}

pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

/// Runs `tasks` on `jobs` threads; results come back in task order.
fn run_parallel<T: Sync, R: Send>(
    tasks: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let slots: Vec<Mutex<Option<Result<R>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(task) = tasks.get(i) else { break };
        let out = f(task);
        let failed = out.is_err();
        *slots[i].lock().expect("result slot") = Some(out);
        if failed {
            next.store(tasks.len(), Ordering::SeqCst);
        }
    };
    if jobs <= 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs.min(tasks.len()) {
                s.spawn(worker);
            }
        });
    }
    let mut out = Vec::with_capacity(tasks.len());
    for slot in slots {
        match slot.into_inner().expect("result slot") {
            Some(r) => out.push(r?),
            None => return Err(Error::Usage("grid aborted after an earlier failure".into())),
        }
    }
    Ok(out)
}

/// One autoencoder per configured target, unless no method needs it.
pub fn pretrain_autoencoders(
    config: &ExperimentConfig,
    data: &ExperimentData,
    jobs: usize,
    progress: Progress,
) -> Result<Vec<Pretrained>> {
    if config.methods.iter().all(|m| *m == Method::Supervised) {
        return Ok(Vec::new());
    }
    run_parallel(&config.targets, jobs, |&target| {
        let seed = autoencoder_seed(config, target);
        let started = Instant::now();
        let model = AutoencoderModel::new(&config.architecture(target), seed)?;
        let (model, curve) = train_autoencoder(&data.dr, model, &config.ae_hyper(seed))?;
        progress(&format!(
            "autoencoder {target}: final loss {:.5} after {} epochs ({:.0}s)",
            curve.last().copied().unwrap_or(f64::NAN),
            curve.len(),
            started.elapsed().as_secs_f64()
        ));
        Ok(Pretrained {
            target,
            blocks: to_blocks(&model.named_parameters()),
            loss_curve: curve,
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub variant: StainVariant,
    pub nlp: usize,
    pub repeat: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub method: Method,
    pub variant: StainVariant,
    pub nlp: usize,
    pub f1_mean: f64,
    /// Sample standard deviation; 0 for a single repeat.
    pub f1_std: f64,
}

pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    /// Sorted by (method, variant, nlp, repeat).
    pub runs: Vec<RunResult>,
    pub cells: Vec<CellSummary>,
}

pub const RESULTS_HEADER: &str = "method,stain_variant,nlp,repeat,f1,tp,fp,fn,tn";
pub const SUMMARY_HEADER: &str = "method,stain_variant,nlp,f1_mean,f1_std";

impl ResultsTable {
    pub fn from_runs(mut runs: Vec<RunResult>) -> ResultsTable {
        runs.sort_by_key(|r| (r.method, r.variant, r.nlp, r.repeat));
        let mut groups: BTreeMap<(Method, StainVariant, usize), Vec<f64>> = BTreeMap::new();
        for r in &runs {
            groups
                .entry((r.method, r.variant, r.nlp))
                .or_default()
                .push(r.metrics.f1);
        }
        let cells = groups
            .into_iter()
            .map(|((method, variant, nlp), f1s)| {
                let (f1_mean, f1_std) = mean_and_sample_std(&f1s);
                CellSummary {
                    method,
                    variant,
                    nlp,
                    f1_mean,
                    f1_std,
                }
            })
            .collect();
        ResultsTable { runs, cells }
    }

    pub fn cell(&self, method: Method, variant: StainVariant, nlp: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.variant == variant && c.nlp == nlp)
    }

    pub fn results_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.runs {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{},{},{}",
                r.method, r.variant, r.nlp, r.repeat, m.f1, m.tp, m.fp, m.fn_, m.tn
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                c.method, c.variant, c.nlp, c.f1_mean, c.f1_std
            );
        }
        out
    }

    /// Methods as columns, label budgets as rows, cells `mean ± std`.
    pub fn render_text(&self) -> String {
        let mut columns: Vec<(Method, StainVariant)> =
            self.cells.iter().map(|c| (c.method, c.variant)).collect();
        columns.dedup();
        let mut budgets: Vec<usize> = self.cells.iter().map(|c| c.nlp).collect();
        budgets.sort_unstable();
        budgets.dedup();
        let headers: Vec<String> = columns
            .iter()
            .map(|(m, v)| format!("{} {}", m, v.arrow()))
            .collect();
        let width = headers.iter().map(String::len).max().unwrap_or(0).max(11);
        let mut out = format!("{:>6}", "NLP");
        for h in &headers {
            let _ = write!(out, " | {h:>width$}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(6 + headers.len() * (width + 3)));
        out.push('\n');
        for nlp in budgets {
            let _ = write!(out, "{nlp:>6}");
            for &(m, v) in &columns {
                let text = self
                    .cell(m, v, nlp)
                    .map(|c| format!("{:.2} ± {:.2}", c.f1_mean, c.f1_std))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(out, " | {text:>width$}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub table: ResultsTable,
    pub pretrained: Vec<Pretrained>,
    /// Wall-clock seconds per stage, for run manifests.
    pub timings: Vec<(String, f64)>,
}

struct VariantLatents {
    target: TargetStain,
    dim: usize,
    dr: Vec<f64>,
    db: Vec<f64>,
    test: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Cell {
    method: Method,
    variant: StainVariant,
    nlp: usize,
    repeat: usize,
}

fn rows(latents: &[f64], dim: usize, indices: &[usize]) -> Vec<f64> {
    indices
        .iter()
        .flat_map(|&i| latents[i * dim..(i + 1) * dim].iter().copied())
        .collect()
}

pub fn run_grid(
    config: &ExperimentConfig,
    data: &ExperimentData,
    jobs: usize,
    progress: Progress,
) -> Result<GridOutcome> {
    let started = Instant::now();
    let pretrained = pretrain_autoencoders(config, data, jobs, progress)?;
    let pretrain_secs = started.elapsed().as_secs_f64();
    let mut outcome = run_grid_pretrained(config, data, pretrained, jobs, progress)?;
    outcome
        .timings
        .insert(0, ("pretrain".into(), pretrain_secs));
    Ok(outcome)
}

/// Runs every grid cell on already trained autoencoders.
pub fn run_grid_pretrained(
    config: &ExperimentConfig,
    data: &ExperimentData,
    pretrained: Vec<Pretrained>,
    jobs: usize,
    progress: Progress,
) -> Result<GridOutcome> {
    config.validate()?;
    let started = Instant::now();
    let mut latents = Vec::new();
    for p in &pretrained {
        let encoder = p.encoder()?;
        let encode = |set: &PatchSet| encode_set(&encoder, set, Stain::He, 64);
        latents.push(VariantLatents {
            target: p.target,
            dim: encoder.latent_dim(),
            dr: encode(&data.dr)?,
            db: encode(&data.db)?,
            test: encode(&data.test)?,
        });
    }
    let encode_secs = started.elapsed().as_secs_f64();
    let truth = data.test.labels()?;
    let db_labels = data.db.labels()?;

    let mut cells = Vec::new();
    // heaviest cells first so parallel workers finish together
    let mut budgets = config.nlp_grid.clone();
    budgets.sort_unstable_by(|a, b| b.cmp(a));
    budgets.dedup();
    for &nlp in &budgets {
        for repeat in 0..config.repeats {
            for (method, variant) in config.variants() {
                cells.push(Cell {
                    method,
                    variant,
                    nlp,
                    repeat,
                });
            }
        }
    }
    let subsets: BTreeMap<(usize, usize), Vec<usize>> = budgets
        .iter()
        .flat_map(|&nlp| (0..config.repeats).map(move |r| (nlp, r)))
        .map(|(nlp, r)| subset_indices(config, &data.db, nlp, r).map(|idx| ((nlp, r), idx)))
        .collect::<Result<_>>()?;

    let grid_started = Instant::now();
    let done = AtomicUsize::new(0);
    let runs = run_parallel(&cells, jobs, |cell| {
        let idx = &subsets[&(cell.nlp, cell.repeat)];
        let seed = cell_seed(
            config.seed,
            cell.method,
            cell.variant,
            cell.nlp,
            cell.repeat,
        );
        let subset_labels: Vec<Label> = idx.iter().map(|&i| db_labels[i]).collect();
        let predicted = match cell.method {
            Method::Supervised => {
                let input = match cell.variant {
                    StainVariant::Ihc => Stain::Ihc,
                    _ => Stain::He,
                };
                let subset = data.db.select(idx, SetRole::BalancedLabeled);
                let arch = config.architecture(TargetStain::SameStain);
                let (model, _) =
                    train_supervised(&subset, input, &arch, &config.supervised_hyper(seed))?;
                predict_supervised(&model, &images_of(&data.test, input)?)?
            }
            Method::SemiSupervised | Method::Unsupervised => {
                let v = latents
                    .iter()
                    .find(|v| StainVariant::for_target(v.target) == cell.variant)
                    .ok_or_else(|| {
                        Error::Config(format!("no autoencoder for variant {}", cell.variant))
                    })?;
                let subset_latents = rows(&v.db, v.dim, idx);
                if cell.method == Method::SemiSupervised {
                    let head = train_head(
                        &subset_latents,
                        &subset_labels,
                        v.dim,
                        &config.head_hyper(seed),
                    )?;
                    predict_head(&head, &v.test)?
                } else {
                    let model = label_from_latents(
                        &v.dr,
                        &subset_latents,
                        &subset_labels,
                        v.dim,
                        &config.kmeans(),
                        seed,
                    )?;
                    predict_clusters(&v.test, &model)?
                }
            }
        };
        let metrics = metrics_from_predictions(&predicted, &truth)?;
        let n = done.fetch_add(1, Ordering::SeqCst) + 1;
        progress(&format!(
            "[{n}/{}] {} {} nlp={} repeat={}: F1 {:.3}",
            cells.len(),
            cell.method,
            cell.variant,
            cell.nlp,
            cell.repeat,
            metrics.f1
        ));
        Ok(RunResult {
            method: cell.method,
            variant: cell.variant,
            nlp: cell.nlp,
            repeat: cell.repeat,
            metrics,
        })
    })?;
    Ok(GridOutcome {
        table: ResultsTable::from_runs(runs),
        pretrained,
        timings: vec![
            ("encode".into(), encode_secs),
            ("grid".into(), grid_started.elapsed().as_secs_f64()),
        ],
    })
}
