//! Synthetic corpora, manifest-driven ingestion, approach slicing and
//! train/test splits.

mod manifest;
mod render;
mod scene;
mod sequence;
mod split;

pub use manifest::{load_manifest, write_manifest, ManifestRow, ManifestSequence, MANIFEST_HEADER};
pub use render::mix_seed;
pub use scene::{generate_scene, SceneParams, SceneSample};
pub use sequence::{generate_sequence, SequenceParams, SequenceSample};
pub use split::{slice_approach, split_and_filter, SplitItem, SplitResult};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::MaskTable;
use crate::pdv::{IntersectionClass, MotionClass};

/// Corpus configuration (JSON-serializable).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes_per_class_train: usize,
    pub scenes_per_class_test: usize,
    pub sequences_per_class_train: usize,
    pub sequences_per_class_test: usize,
    pub scene: SceneParams,
    pub sequence: SequenceParams,
    pub seed: u64,
}

impl DatasetConfig {
    /// The default synthetic corpus: 120 train + 20 test scenes per class,
    /// 40 train + 10 test sequences per class.
    pub fn standard(seed: u64) -> Self {
        DatasetConfig {
            scenes_per_class_train: 120,
            scenes_per_class_test: 20,
            sequences_per_class_train: 40,
            sequences_per_class_test: 10,
            scene: SceneParams::default(),
            sequence: SequenceParams::default(),
            seed,
        }
    }

    /// A much smaller corpus for quick smoke runs.
    pub fn small(seed: u64) -> Self {
        DatasetConfig {
            scenes_per_class_train: 6,
            scenes_per_class_test: 2,
            sequences_per_class_train: 3,
            sequences_per_class_test: 1,
            ..Self::standard(seed)
        }
    }
}

/// Per-sample generation seed: pure function of corpus seed, class, index
/// and split, so parallel generation stays reproducible.
fn sample_seed(corpus_seed: u64, kind: u64, class: u64, index: u64, test: bool) -> u64 {
    mix_seed(
        corpus_seed,
        kind ^ class.wrapping_mul(0x1_0000) ^ index.wrapping_mul(4) ^ (test as u64 * 2 + 1),
    )
}

/// Generate the scene corpus (train, test), parallel over samples.
pub fn build_scene_corpus(cfg: &DatasetConfig) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let gen_split = |count: usize, test: bool| -> Result<Vec<SceneSample>> {
        let jobs: Vec<(IntersectionClass, u64)> = IntersectionClass::ALL
            .iter()
            .flat_map(|&c| {
                (0..count).map(move |i| {
                    (c, sample_seed(cfg.seed, 0x5ce, c.label() as u64, i as u64, test))
                })
            })
            .collect();
        jobs.par_iter()
            .map(|&(c, seed)| generate_scene(c, seed, &cfg.scene))
            .collect()
    };
    Ok((
        gen_split(cfg.scenes_per_class_train, false)?,
        gen_split(cfg.scenes_per_class_test, true)?,
    ))
}

/// Generate the sequence corpus (train, test), parallel over samples.
pub fn build_sequence_corpus(
    cfg: &DatasetConfig,
) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
    let gen_split = |count: usize, test: bool| -> Result<Vec<SequenceSample>> {
        let jobs: Vec<(MotionClass, u64)> = MotionClass::ALL
            .iter()
            .flat_map(|&m| {
                (0..count).map(move |i| {
                    (m, sample_seed(cfg.seed, 0x5e9, m.label() as u64, i as u64, test))
                })
            })
            .collect();
        jobs.par_iter()
            .map(|&(m, seed)| generate_sequence(m, seed, &cfg.sequence))
            .collect()
    };
    Ok((
        gen_split(cfg.sequences_per_class_train, false)?,
        gen_split(cfg.sequences_per_class_test, true)?,
    ))
}

/// Ego-motion a vehicle could plausibly have taken through a scene of the
/// given class, drawn uniformly from the mask-compatible set.
pub fn paired_motion(class: IntersectionClass, seed: u64) -> MotionClass {
    let table = MaskTable::default();
    let compat: Vec<MotionClass> = MotionClass::ALL
        .iter()
        .copied()
        .filter(|&m| table.compatible_classes(m).contains(&class.label()))
        .collect();
    let pick = (mix_seed(seed, 0x30710) as usize) % compat.len();
    compat[pick]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_counts_and_determinism() {
        let cfg = DatasetConfig::small(5);
        let (train, test) = build_scene_corpus(&cfg).unwrap();
        assert_eq!(train.len(), 7 * cfg.scenes_per_class_train);
        assert_eq!(test.len(), 7 * cfg.scenes_per_class_test);
        let (train2, _) = build_scene_corpus(&cfg).unwrap();
        assert_eq!(train[0].image.data(), train2[0].image.data());
        // Train and test use disjoint seeds.
        assert_ne!(train[0].seed, test[0].seed);
    }

    #[test]
    fn paired_motion_is_mask_compatible() {
        let table = MaskTable::default();
        for seed in 0..32 {
            for &class in &IntersectionClass::ALL {
                let m = paired_motion(class, seed);
                assert!(
                    table.compatible_classes(m).contains(&class.label()),
                    "class {class:?} got incompatible motion {m:?}"
                );
            }
        }
    }
}
