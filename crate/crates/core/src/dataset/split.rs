//! Cluster filtering and stratified train/test splitting.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One splittable item: an id the caller can map back, its class label and
/// an optional temporal cluster key.
#[derive(Clone, Debug)]
pub struct SplitItem {
    pub id: usize,
    pub label: usize,
    pub cluster: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct SplitResult {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Clusters whose members were kept out of the training split.
    pub excluded_clusters: Vec<u64>,
}

/// Stratified split with cluster filtering: clusters smaller than
/// `min_cluster` are excluded from training (their members remain test
/// candidates). Per-class train counts follow the fraction by largest
/// remainder, keeping class proportions within one sample.
pub fn split_and_filter(
    items: &[SplitItem],
    train_fraction: f64,
    min_cluster: usize,
    seed: u64,
) -> Result<SplitResult> {
    if items.is_empty() {
        return Err(Error::Data("nothing to split".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArg(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    // Cluster sizes.
    let mut cluster_sizes: HashMap<u64, usize> = HashMap::new();
    for item in items {
        if let Some(c) = item.cluster {
            *cluster_sizes.entry(c).or_insert(0) += 1;
        }
    }
    let mut excluded: Vec<u64> = cluster_sizes
        .iter()
        .filter(|(_, &n)| n < min_cluster)
        .map(|(&c, _)| c)
        .collect();
    excluded.sort_unstable();
    let is_excluded = |item: &SplitItem| {
        item.cluster
            .map(|c| cluster_sizes[&c] < min_cluster)
            .unwrap_or(false)
    };

    // Group by class, keeping first-seen class order stable.
    let mut class_order: Vec<usize> = Vec::new();
    let mut by_class: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, item) in items.iter().enumerate() {
        if !by_class.contains_key(&item.label) {
            class_order.push(item.label);
        }
        by_class.entry(item.label).or_default().push(i);
    }

    // Ideal per-class train counts via largest remainder.
    let train_total = (train_fraction * items.len() as f64).round() as usize;
    let mut want: Vec<(usize, usize, f64)> = Vec::new(); // (label, floor, frac)
    let mut floor_sum = 0usize;
    for &label in &class_order {
        let n = by_class[&label].len() as f64;
        let ideal = train_fraction * n;
        let fl = ideal.floor() as usize;
        floor_sum += fl;
        want.push((label, fl, ideal - ideal.floor()));
    }
    let mut leftover = train_total.saturating_sub(floor_sum);
    // Distribute remainders, largest first; ties by class label.
    let mut order: Vec<usize> = (0..want.len()).collect();
    order.sort_by(|&a, &b| {
        want[b].2
            .partial_cmp(&want[a].2)
            .unwrap()
            .then(want[a].0.cmp(&want[b].0))
    });
    let mut target: HashMap<usize, usize> = HashMap::new();
    for idx in order {
        let (label, fl, _) = want[idx];
        let extra = if leftover > 0 {
            leftover -= 1;
            1
        } else {
            0
        };
        target.insert(label, fl + extra);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut result = SplitResult { excluded_clusters: excluded, ..Default::default() };
    for &label in &class_order {
        let mut members = by_class[&label].clone();
        members.shuffle(&mut rng);
        let goal = *target.get(&label).unwrap_or(&0);
        let mut taken = 0usize;
        let mut rest = Vec::new();
        for idx in members {
            if taken < goal && !is_excluded(&items[idx]) {
                result.train.push(items[idx].id);
                taken += 1;
            } else {
                rest.push(items[idx].id);
            }
        }
        if taken == 0 && goal > 0 {
            return Err(Error::Data(format!(
                "class {label} has no training samples after cluster filtering"
            )));
        }
        result.test.extend(rest);
    }
    Ok(result)
}

/// Frame indices of the approach window: along-track distance d with
/// -l2 <= d <= -l1. An empty result means the track never approaches.
pub fn slice_approach(pose_track: &[f64], l1: f64, l2: f64) -> Result<Vec<usize>> {
    if !(l2 > l1 && l1 >= 0.0) {
        return Err(Error::InvalidArg(format!(
            "approach window needs L2 > L1 >= 0, got L1={l1}, L2={l2}"
        )));
    }
    Ok(pose_track
        .iter()
        .enumerate()
        .filter(|(_, &d)| -l2 <= d && d <= -l1)
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(labels: &[usize]) -> Vec<SplitItem> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| SplitItem { id: i, label, cluster: None })
            .collect()
    }

    #[test]
    fn approach_window_examples() {
        let track = [-10.0, -7.0, -4.0, -2.0, -0.5, 1.0];
        let idx = slice_approach(&track, 0.0, 5.0).unwrap();
        assert_eq!(idx, vec![2, 3, 4]);
        // Effectively unbounded window keeps everything at or before center.
        let idx = slice_approach(&track, 0.0, 1e9).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        // Entirely past the center: empty, not fabricated.
        let idx = slice_approach(&[0.5, 1.5, 3.0], 0.0, 5.0).unwrap();
        assert!(idx.is_empty());
        assert!(slice_approach(&track, 5.0, 5.0).is_err());
    }

    #[test]
    fn small_clusters_excluded_from_train() {
        // Clusters of sizes 7, 4, 6; the size-4 cluster may not train.
        let mut all = Vec::new();
        let mut id = 0;
        for (cluster, size) in [(0u64, 7usize), (1, 4), (2, 6)] {
            for _ in 0..size {
                all.push(SplitItem { id, label: 1, cluster: Some(cluster) });
                id += 1;
            }
        }
        let r = split_and_filter(&all, 0.7, 5, 9).unwrap();
        assert_eq!(r.excluded_clusters, vec![1]);
        for &tid in &r.train {
            let item = &all[tid];
            assert_ne!(item.cluster, Some(1), "excluded cluster member trained");
        }
        assert_eq!(r.train.len() + r.test.len(), all.len());
    }

    #[test]
    fn exact_counts_on_paper_ratio() {
        // 162 samples at ratio 126:36.
        let labels: Vec<usize> = (0..162).map(|i| 1 + i % 7).collect();
        let r = split_and_filter(&items(&labels), 126.0 / 162.0, 5, 3).unwrap();
        assert_eq!(r.train.len(), 126);
        assert_eq!(r.test.len(), 36);
    }

    #[test]
    fn stratification_within_one_sample() {
        let labels: Vec<usize> = (0..140).map(|i| 1 + i % 7).collect();
        let r = split_and_filter(&items(&labels), 0.75, 5, 1).unwrap();
        let mut per_class = [0usize; 8];
        for &id in &r.train {
            per_class[1 + id % 7] += 1;
        }
        for c in 1..=7 {
            let n = 20.0;
            let ideal = 0.75 * n;
            assert!(
                (per_class[c] as f64 - ideal).abs() <= 1.0,
                "class {c}: {} vs {ideal}",
                per_class[c]
            );
        }
    }

    #[test]
    fn same_seed_same_split() {
        let labels: Vec<usize> = (0..50).map(|i| 1 + i % 5).collect();
        let a = split_and_filter(&items(&labels), 0.8, 5, 7).unwrap();
        let b = split_and_filter(&items(&labels), 0.8, 5, 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = split_and_filter(&items(&labels), 0.8, 5, 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn all_filtered_class_errors() {
        let all: Vec<SplitItem> = (0..8)
            .map(|i| SplitItem { id: i, label: 1, cluster: Some(0) })
            .collect();
        // Single cluster of size 8 < 10: no class-1 training samples left.
        assert!(split_and_filter(&all, 0.75, 10, 1).is_err());
    }
}
