//! Construction of the unlabelled set D_r and the ratio-balanced set D_b.

use rand::seq::SliceRandom;

use super::{ClassMask, Label, PatchSet, SetRole};
use crate::error::{Error, Result};
use crate::rng::rng;

/// Stroma / benign epithelium / tumour proportions of every labelled set.
pub const TISSUE_RATIOS: [f64; 3] = [0.25, 0.25, 0.50];

/// Largest-remainder apportionment of `n` over `ratios`; equal remainders
/// go to the lower class index.
pub fn balanced_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || total <= 0.0 {
        return Err(Error::Input(format!("invalid class ratios {ratios:?}")));
    }
    let quotas = ratios.map(|r| n as f64 * r / total);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut order = [0, 1, 2];
    // stable sort keeps index order among equal remainders
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor()))
    });
    let assigned: usize = counts.iter().sum();
    for &c in order.iter().take(n.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    Ok(counts)
}

/// Uniform draw of `n` records without replacement; labels are dropped.
pub fn sample_random(source: &PatchSet, n: usize, seed: u64) -> Result<PatchSet> {
    if n > source.len() {
        return Err(Error::Input(format!(
            "cannot draw {n} records from a set of {}",
            source.len()
        )));
    }
    let mut indices: Vec<usize> = (0..source.len()).collect();
    // the shuffled part is the returned slice, not the prefix
    let (picked, _) = indices.partial_shuffle(&mut rng(seed), n);
    let mut set = source.select(picked, SetRole::RandomUnlabeled);
    for r in &mut set.records {
        r.label = None;
    }
    Ok(set)
}

/// Draws per-class counts from [`balanced_counts`], uniformly within each
/// class. The result is shuffled.
pub fn sample_balanced(
    source: &PatchSet,
    n: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<PatchSet> {
    let indices = balanced_indices(source, n, ratios, seed)?;
    Ok(source.select(&indices, SetRole::BalancedLabeled))
}

/// Positions in `source` chosen by [`sample_balanced`].
pub fn balanced_indices(
    source: &PatchSet,
    n: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<usize>> {
    let counts = balanced_counts(n, ratios)?;
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, r) in source.records.iter().enumerate() {
        let label = r.label.ok_or_else(|| {
            Error::Input(format!(
                "{} is unlabelled; balanced sampling needs labels",
                r.source_id
            ))
        })?;
        by_class[label.index()].push(i);
    }
    let mut r = rng(seed);
    let mut chosen = Vec::with_capacity(n);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < counts[class] {
            return Err(Error::Input(format!(
                "class {} has {} records but {} are required",
                Label::ALL[class],
                members.len(),
                counts[class]
            )));
        }
        let (picked, _) = members.partial_shuffle(&mut r, counts[class]);
        chosen.extend_from_slice(picked);
    }
    chosen.shuffle(&mut r);
    Ok(chosen)
}

/// Class at `(floor(H/2), floor(W/2))`.
pub fn center_pixel_label(mask: &ClassMask) -> Result<Label> {
    if mask.height == 0 || mask.width == 0 {
        return Err(Error::Input("empty mask".into()));
    }
    Label::from_index(usize::from(mask.get(mask.height / 2, mask.width / 2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, PatchRecord};
    use proptest::prelude::*;

    fn pool(counts: [usize; 3]) -> PatchSet {
        let mut records = Vec::new();
        for (class, &count) in counts.iter().enumerate() {
            for i in 0..count {
                let mut r = PatchRecord::new(Image::filled(3, 2, 2, 0.5), format!("{class}-{i}"));
                r.label = Some(Label::ALL[class]);
                records.push(r);
            }
        }
        PatchSet::new(records, SetRole::Source).unwrap()
    }

    #[test]
    fn counts_follow_largest_remainder() {
        assert_eq!(balanced_counts(4, TISSUE_RATIOS).unwrap(), [1, 1, 2]);
        assert_eq!(balanced_counts(10, TISSUE_RATIOS).unwrap(), [3, 2, 5]);
        assert_eq!(
            balanced_counts(1000, TISSUE_RATIOS).unwrap(),
            [250, 250, 500]
        );
        assert_eq!(balanced_counts(1, TISSUE_RATIOS).unwrap(), [0, 0, 1]);
        assert_eq!(balanced_counts(30, TISSUE_RATIOS).unwrap(), [8, 7, 15]);
        assert_eq!(balanced_counts(0, TISSUE_RATIOS).unwrap(), [0, 0, 0]);
        assert!(balanced_counts(5, [0.0, -1.0, 2.0]).is_err());
    }

    #[test]
    fn center_convention_uses_floor() {
        let mask = ClassMask::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(center_pixel_label(&mask).unwrap(), Label::Stroma);
        let mut big = ClassMask::new(256, 256, vec![0; 256 * 256]).unwrap();
        big.data[128 * 256 + 128] = 2;
        assert_eq!(center_pixel_label(&big).unwrap(), Label::Tumour);
        let bad = ClassMask::new(1, 1, vec![7]).unwrap();
        assert!(center_pixel_label(&bad).is_err());
    }

    #[test]
    fn random_sampling_exhausts_and_repeats() {
        let src = pool([5, 5, 5]);
        let all = sample_random(&src, 15, 3).unwrap();
        let mut ids: Vec<_> = all.records.iter().map(|r| r.source_id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = src.records.iter().map(|r| r.source_id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
        assert!(all.records.iter().all(|r| r.label.is_none()));
        assert_eq!(
            sample_random(&src, 7, 1).unwrap(),
            sample_random(&src, 7, 1).unwrap()
        );
        assert!(sample_random(&src, 16, 1).is_err());
    }

    #[test]
    fn balanced_sampling_names_short_class() {
        let err = sample_balanced(&pool([10, 1, 10]), 8, TISSUE_RATIOS, 0).unwrap_err();
        assert!(err.to_string().contains("benign"), "{err}");
    }

    // Small draws from a large pool must reach its far end.
    #[test]
    fn draws_cover_the_whole_pool() {
        let source = pool([400, 400, 400]);
        let mut max_random = 0;
        let mut max_balanced = 0;
        for seed in 0..20 {
            let set = sample_random(&source, 10, seed).unwrap();
            let within = set.records.iter().map(|r| {
                r.source_id
                    .split('-')
                    .nth(1)
                    .unwrap()
                    .parse::<usize>()
                    .unwrap()
            });
            max_random = max_random.max(within.max().unwrap());
            let idx = balanced_indices(&source, 8, TISSUE_RATIOS, seed).unwrap();
            max_balanced = max_balanced.max(*idx.iter().max().unwrap());
        }
        assert!(max_random > 300, "{max_random}");
        assert!(max_balanced > 900, "{max_balanced}");
    }

    proptest! {
        #[test]
        fn balanced_counts_are_exact(n in 4usize..=1000, seed in any::<u64>()) {
            let set = sample_balanced(&pool([300, 300, 550]), n, TISSUE_RATIOS, seed).unwrap();
            let counts = set.class_counts();
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            for (c, r) in counts.iter().zip(TISSUE_RATIOS) {
                prop_assert!((*c as f64 - n as f64 * r).abs() < 1.0);
            }
            prop_assert_eq!(set.role, SetRole::BalancedLabeled);
        }
    }
}
