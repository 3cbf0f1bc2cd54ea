//! k-means over latent vectors and majority-vote cluster labelling.
//!
//! Points are stored row-major in a flat slice with an explicit width.
//! Seeding and centroid sums walk the points in a canonical
//! (lexicographically sorted) order, so permuting the input never changes
//! the partition or the centroid values.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng as _;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::io_util::{read_u32, write_atomic, ByteReader};
use crate::rng::rng;

pub const CLUSTER_MAGIC: &[u8; 4] = b"LPKM";
pub const CLUSTER_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 50;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Lloyd stops once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: DEFAULT_K,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    /// One label per cluster once [`label_clusters`] has run; empty before.
    pub cluster_labels: Vec<Label>,
    pub inertia: f64,
    /// Inertia of the assignment made at the start of each Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn is_labeled(&self) -> bool {
        self.cluster_labels.len() == self.k
    }

    pub fn label_of(&self, cluster: usize) -> Result<Label> {
        self.cluster_labels.get(cluster).copied().ok_or_else(|| {
            Error::Usage("cluster model has no labels; run label_clusters first".into())
        })
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Input(format!(
            "{} values do not form rows of width {dim}",
            points.len()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("latents contain non-finite values".into()));
    }
    Ok(points.len() / dim)
}

/// Nearest centroid and its squared distance; ties go to the lower index.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn canonical_order(points: &[f64], dim: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len() / dim).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (
            &points[a * dim..(a + 1) * dim],
            &points[b * dim..(b + 1) * dim],
        );
        ra.iter()
            .zip(rb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

fn kmeans_pp(points: &[f64], dim: usize, order: &[usize], k: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(order[r.gen_range(0..order.len())]));
    let mut best: Vec<f64> = order
        .iter()
        .map(|&i| squared_distance(row(i), &centroids[..dim]))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let target = r.gen_range(0.0..total);
            let mut acc = 0.0;
            best.iter()
                .position(|&w| {
                    acc += w;
                    acc > target
                })
                .unwrap_or_else(|| best.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            r.gen_range(0..order.len())
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(order[pick]));
        for (b, &i) in best.iter_mut().zip(order) {
            *b = b.min(squared_distance(row(i), &centroids[start..]));
        }
    }
    centroids
}

/// Lloyd iterations from k-means++ seeding. Clusters that lose all members
/// keep their previous centroid.
pub fn kmeans_fit(
    points: &[f64],
    dim: usize,
    config: &KMeansConfig,
    seed: u64,
) -> Result<ClusterModel> {
    let n = check_points(points, dim)?;
    if n == 0 {
        return Err(Error::Input("k-means needs at least one point".into()));
    }
    if config.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let k = config.k;
    let order = canonical_order(points, dim);
    let mut centroids = kmeans_pp(points, dim, &order, k, seed);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        for &i in &order {
            let (j, d) = nearest(&points[i * dim..(i + 1) * dim], &centroids, dim);
            changed |= assignment[i] != j;
            assignment[i] = j;
            inertia += d;
        }
        history.push(inertia);
        if !changed || iterations >= config.max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for &i in &order {
            let j = assignment[i];
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&points[i * dim..(i + 1) * dim])
            {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let row = &mut centroids[j * dim..(j + 1) * dim];
            let mut moved = 0.0;
            for (c, s) in row.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                let mean = s / counts[j] as f64;
                moved += (mean - *c) * (mean - *c);
                *c = mean;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < config.tol {
            // settle the assignment against the final centroids
            let inertia = order
                .iter()
                .map(|&i| nearest(&points[i * dim..(i + 1) * dim], &centroids, dim).1)
                .sum();
            history.push(inertia);
            break;
        }
    }
    Ok(ClusterModel {
        k,
        dim,
        centroids,
        cluster_labels: Vec::new(),
        inertia: *history.last().unwrap_or(&0.0),
        inertia_history: history,
        iterations,
    })
}

pub fn assign_cluster(latent: &[f64], model: &ClusterModel) -> Result<usize> {
    if latent.len() != model.dim {
        return Err(Error::Input(format!(
            "latent width {} does not match cluster width {}",
            latent.len(),
            model.dim
        )));
    }
    Ok(nearest(latent, &model.centroids, model.dim).0)
}

pub fn assign_all(points: &[f64], model: &ClusterModel) -> Result<Vec<usize>> {
    if !points.len().is_multiple_of(model.dim) {
        return Err(Error::Input(format!(
            "latent rows must have width {}",
            model.dim
        )));
    }
    points
        .chunks_exact(model.dim)
        .map(|p| assign_cluster(p, model))
        .collect()
}

/// Plurality label of the labelled latents assigned to each cluster. A
/// cluster without voters is Stroma; ties go to the lower class index.
pub fn label_clusters(
    model: &ClusterModel,
    latents: &[f64],
    labels: &[Label],
) -> Result<ClusterModel> {
    if latents.len() != labels.len() * model.dim {
        return Err(Error::Input(format!(
            "{} labels need {} latent values of width {}, got {}",
            labels.len(),
            labels.len() * model.dim,
            model.dim,
            latents.len()
        )));
    }
    let mut votes = vec![[0usize; 3]; model.k];
    for (cluster, label) in assign_all(latents, model)?.into_iter().zip(labels) {
        votes[cluster][label.index()] += 1;
    }
    let cluster_labels = votes
        .iter()
        .map(|v| {
            let mut best = 0;
            for c in 1..3 {
                if v[c] > v[best] {
                    best = c;
                }
            }
            Label::ALL[best]
        })
        .collect();
    Ok(ClusterModel {
        cluster_labels,
        ..model.clone()
    })
}

pub fn predict_clusters(points: &[f64], model: &ClusterModel) -> Result<Vec<Label>> {
    assign_all(points, model)?
        .into_iter()
        .map(|j| model.label_of(j))
        .collect()
}

pub fn encode_cluster_model(model: &ClusterModel) -> Result<Vec<u8>> {
    if !model.is_labeled() {
        return Err(Error::Usage(
            "only labelled cluster models can be saved".into(),
        ));
    }
    let mut out = Vec::with_capacity(16 + model.centroids.len() * 8 + model.k);
    out.extend_from_slice(CLUSTER_MAGIC);
    out.extend_from_slice(&CLUSTER_VERSION.to_le_bytes());
    for v in [model.k, model.dim] {
        let v = u32::try_from(v).map_err(|_| Error::Input("cluster model too large".into()))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &model.centroids {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend(model.cluster_labels.iter().map(|l| l.index() as u8));
    Ok(out)
}

/// Inertia and history are not stored; a decoded model reports zero
/// inertia and an empty history.
pub fn decode_cluster_model(bytes: &[u8], path: &Path) -> Result<ClusterModel> {
    let bad = |m: &str| Error::format(path, m);
    let mut r = ByteReader::new(bytes);
    if r.take_slice(4).map_err(|_| bad("truncated header"))? != CLUSTER_MAGIC {
        return Err(bad("bad magic, expected LPKM"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
    if version != CLUSTER_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let k = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
    let dim = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
    if k == 0 || dim == 0 {
        return Err(bad("k and width must be positive"));
    }
    let raw = r
        .take_slice(k * dim * 8)
        .map_err(|_| bad("truncated centroids"))?;
    let centroids: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite centroid"));
    }
    let cluster_labels = r
        .take_slice(k)
        .map_err(|_| bad("truncated labels"))?
        .iter()
        .map(|&b| Label::from_index(usize::from(b)).map_err(|e| bad(&e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(ClusterModel {
        k,
        dim,
        centroids,
        cluster_labels,
        inertia: 0.0,
        inertia_history: Vec::new(),
        iterations: 0,
    })
}

pub fn write_cluster_model(path: &Path, model: &ClusterModel) -> Result<()> {
    let bytes = encode_cluster_model(model)?;
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn read_cluster_model(path: &Path) -> Result<ClusterModel> {
    decode_cluster_model(&std::fs::read(path)?, path)
}
