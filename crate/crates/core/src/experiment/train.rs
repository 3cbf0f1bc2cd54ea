//! The three training procedures and batched inference helpers.

use rand::seq::SliceRandom;

use super::config::TrainHyper;
use crate::cluster::{kmeans_fit, label_clusters, predict_clusters, ClusterModel, KMeansConfig};
use crate::data::{AugmentParams, Image, Label, PatchRecord, PatchSet, Stain};
use crate::error::{Error, Result};
use crate::models::{
    ArchitectureConfig, AutoencoderModel, ClassifierHead, EncoderModel, SupervisedClassifier,
    TargetStain,
};
use crate::rng::{derive_seed_indexed, rng};
use crate::tensor::{no_grad, Optimizer, Tensor};

/// Per-epoch mean training loss.
pub type LossCurve = Vec<f64>;

fn image_of(record: &PatchRecord, stain: Stain) -> Result<&Image> {
    record
        .image(stain)
        .ok_or_else(|| Error::Config(format!("record {} has no {stain} image", record.source_id)))
}

/// Stacks the chosen images into an `[N, 3, S, S]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<f64>> {
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut n = 0;
    for img in images {
        match shape {
            None => shape = Some(img.dims()),
            Some(d) if d != img.dims() => {
                return Err(Error::Input(format!(
                    "image {:?} does not match batch shape {d:?}",
                    img.dims()
                )));
            }
            _ => {}
        }
        data.extend_from_slice(&img.data);
        n += 1;
    }
    let (c, h, w) = shape.ok_or_else(|| Error::Input("empty batch".into()))?;
    Tensor::from_vec(&[n, c, h, w], data)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed_indexed(seed, "epoch", epoch as u64)));
    order
}

/// Input and target of one training example. Flips hit both; colour jitter
/// only the input.
fn augmented_pair(
    record: &PatchRecord,
    input: Stain,
    target: Option<Stain>,
    hyper: &TrainHyper,
    draw: u64,
) -> Result<(Image, Option<Image>)> {
    let mut x = image_of(record, input)?.clone();
    let mut y = target.map(|s| image_of(record, s).cloned()).transpose()?;
    if let Some(ranges) = &hyper.augment {
        let params =
            AugmentParams::sample(ranges, derive_seed_indexed(hyper.seed, "augment", draw));
        params.apply_geometry(&mut x);
        params.apply_color(&mut x);
        if let Some(y) = &mut y {
            params.apply_geometry(y);
        }
    }
    Ok((x, y))
}

fn target_stain(target: TargetStain) -> Stain {
    match target {
        TargetStain::SameStain => Stain::He,
        TargetStain::CrossStain => Stain::Ihc,
    }
}

/// Minimises reconstruction MSE of the configured target from H&E input.
pub fn train_autoencoder(
    dr: &PatchSet,
    model: AutoencoderModel<f64>,
    hyper: &TrainHyper,
) -> Result<(AutoencoderModel<f64>, LossCurve)> {
    hyper.validate()?;
    if dr.is_empty() {
        return Err(Error::Input("autoencoder training set is empty".into()));
    }
    let target = target_stain(model.target_stain);
    if !dr.has_stain(target) {
        return Err(Error::Config(format!(
            "reconstruction target {} needs an {target} image on every record",
            model.target_stain
        )));
    }
    let mut optimizer = Optimizer::adam(model.parameters(), hyper.learning_rate);
    let n = dr.len();
    let mut curve = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let order = epoch_order(n, hyper.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x, y) = augmented_pair(
                    &dr.records[i],
                    Stain::He,
                    Some(target),
                    hyper,
                    (epoch * n + i) as u64,
                )?;
                inputs.push(x);
                targets.push(y.expect("target requested"));
            }
            let x = stack_images(&inputs)?;
            let y = stack_images(&targets)?;
            optimizer.zero_grad();
            let loss = model.reconstruct(&x)?.mse_loss(&y)?;
            loss.backward()?;
            optimizer.step()?;
            total += loss.item() * chunk.len() as f64;
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "autoencoder loss diverged at epoch {epoch}"
            )));
        }
        curve.push(mean);
    }
    Ok((model, curve))
}

/// Latents of every record's `stain` image, row-major `[N, latent_dim]`.
pub fn encode_set(
    encoder: &EncoderModel<f64>,
    set: &PatchSet,
    stain: Stain,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(set.len() * encoder.latent_dim());
    no_grad(|| -> Result<()> {
        for chunk in set.records.chunks(batch_size.max(1)) {
            let images = chunk
                .iter()
                .map(|r| image_of(r, stain))
                .collect::<Result<Vec<_>>>()?;
            let z = encoder.encode(&stack_images(images)?)?;
            out.extend_from_slice(&z.data());
        }
        Ok(())
    })?;
    Ok(out)
}

/// Softmax cross-entropy training of a fresh head on fixed latents.
pub fn train_head(
    latents: &[f64],
    labels: &[Label],
    latent_dim: usize,
    hyper: &TrainHyper,
) -> Result<ClassifierHead<f64>> {
    hyper.validate()?;
    if labels.is_empty() {
        return Err(Error::Input(
            "cannot train a classifier on an empty labelled set".into(),
        ));
    }
    if latents.len() != labels.len() * latent_dim {
        return Err(Error::Input(format!(
            "{} labels need {} latent values, got {}",
            labels.len(),
            labels.len() * latent_dim,
            latents.len()
        )));
    }
    let head = ClassifierHead::new(latent_dim, hyper.seed)?;
    let mut optimizer = Optimizer::adam(head.parameters(), hyper.learning_rate);
    for epoch in 0..hyper.epochs {
        for chunk in epoch_order(labels.len(), hyper.seed, epoch).chunks(hyper.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * latent_dim);
            for &i in chunk {
                x.extend_from_slice(&latents[i * latent_dim..(i + 1) * latent_dim]);
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i].index()).collect();
            optimizer.zero_grad();
            let loss = head
                .classify_latent(&Tensor::from_vec(&[chunk.len(), latent_dim], x)?)?
                .softmax_cross_entropy(&y)?;
            loss.backward()?;
            optimizer.step()?;
        }
    }
    Ok(head)
}

/// Linear head on latents of a frozen encoder. The encoder only runs
/// without gradient recording, so its parameters cannot change.
pub fn train_semi_supervised(
    encoder: &EncoderModel<f64>,
    subset: &PatchSet,
    hyper: &TrainHyper,
) -> Result<ClassifierHead<f64>> {
    if subset.is_empty() {
        return Err(Error::Input("labelled subset is empty".into()));
    }
    let labels = subset.labels()?;
    let latents = encode_set(encoder, subset, Stain::He, hyper.batch_size)?;
    train_head(&latents, &labels, encoder.latent_dim(), hyper)
}

/// k-means on pre-computed D_r latents, then majority voting by the
/// labelled subset.
pub fn label_from_latents(
    dr_latents: &[f64],
    subset_latents: &[f64],
    subset_labels: &[Label],
    dim: usize,
    kmeans: &KMeansConfig,
    seed: u64,
) -> Result<ClusterModel> {
    let fitted = kmeans_fit(dr_latents, dim, kmeans, seed)?;
    label_clusters(&fitted, subset_latents, subset_labels)
}

pub fn train_unsupervised_labeling(
    encoder: &EncoderModel<f64>,
    dr: &PatchSet,
    subset: &PatchSet,
    kmeans: &KMeansConfig,
    seed: u64,
) -> Result<ClusterModel> {
    let dim = encoder.latent_dim();
    let dr_latents = encode_set(encoder, dr, Stain::He, 64)?;
    let subset_latents = encode_set(encoder, subset, Stain::He, 64)?;
    label_from_latents(
        &dr_latents,
        &subset_latents,
        &subset.labels()?,
        dim,
        kmeans,
        seed,
    )
}

/// End-to-end training of a freshly initialised encoder and head.
pub fn train_supervised(
    subset: &PatchSet,
    input: Stain,
    architecture: &ArchitectureConfig,
    hyper: &TrainHyper,
) -> Result<(SupervisedClassifier<f64>, LossCurve)> {
    hyper.validate()?;
    if subset.is_empty() {
        return Err(Error::Input("labelled subset is empty".into()));
    }
    if !subset.has_stain(input) {
        return Err(Error::Config(format!(
            "supervised input {input} is missing from some records"
        )));
    }
    let labels = subset.labels()?;
    let model = SupervisedClassifier::new(architecture, hyper.seed)?;
    let mut optimizer = Optimizer::adam(model.parameters(), hyper.learning_rate);
    let n = subset.len();
    let mut curve = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut total = 0.0;
        for chunk in epoch_order(n, hyper.seed, epoch).chunks(hyper.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                inputs.push(
                    augmented_pair(
                        &subset.records[i],
                        input,
                        None,
                        hyper,
                        (epoch * n + i) as u64,
                    )?
                    .0,
                );
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i].index()).collect();
            optimizer.zero_grad();
            let loss = model
                .classify(&stack_images(&inputs)?)?
                .softmax_cross_entropy(&y)?;
            loss.backward()?;
            optimizer.step()?;
            total += loss.item() * chunk.len() as f64;
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "supervised loss diverged at epoch {epoch}"
            )));
        }
        curve.push(mean);
    }
    Ok((model, curve))
}

fn argmax_labels(logits: &Tensor<f64>) -> Vec<Label> {
    logits
        .argmax_rows()
        .into_iter()
        .map(|c| Label::ALL[c])
        .collect()
}

pub fn predict_head(head: &ClassifierHead<f64>, latents: &[f64]) -> Result<Vec<Label>> {
    let d = head.latent_dim();
    if !latents.len().is_multiple_of(d) {
        return Err(Error::Input(format!("latent rows must have width {d}")));
    }
    if latents.is_empty() {
        return Ok(Vec::new());
    }
    let logits = no_grad(|| {
        head.classify_latent(&Tensor::from_vec(
            &[latents.len() / d, d],
            latents.to_vec(),
        )?)
    })?;
    Ok(argmax_labels(&logits))
}

pub fn predict_semi_supervised(
    encoder: &EncoderModel<f64>,
    head: &ClassifierHead<f64>,
    images: &[&Image],
) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let z = encoder.encode_frozen(&stack_images(chunk.iter().copied())?)?;
        out.extend(predict_head(head, &z.data())?);
    }
    Ok(out)
}

/// `label_of(assign_cluster(encode(x)))` for every image.
pub fn predict_unsupervised(
    encoder: &EncoderModel<f64>,
    model: &ClusterModel,
    images: &[&Image],
) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let z = encoder.encode_frozen(&stack_images(chunk.iter().copied())?)?;
        out.extend(predict_clusters(&z.data(), model)?);
    }
    Ok(out)
}

pub fn predict_supervised(
    model: &SupervisedClassifier<f64>,
    images: &[&Image],
) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let logits = no_grad(|| model.classify(&stack_images(chunk.iter().copied())?))?;
        out.extend(argmax_labels(&logits));
    }
    Ok(out)
}

/// The `stain` image of every record.
pub fn images_of(set: &PatchSet, stain: Stain) -> Result<Vec<&Image>> {
    set.records.iter().map(|r| image_of(r, stain)).collect()
}
