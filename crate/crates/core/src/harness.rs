//! End-to-end run routines shared by the CLI and the acceptance tests:
//! corpus construction, the two training loops, mirrored-consistency
//! evaluation and the fused TPV+FPV evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_scene_corpus, build_sequence_corpus, mix_seed, paired_motion, DatasetConfig,
    SceneSample, SequenceSample,
};
use crate::error::{Error, Result};
use crate::eval::{config_digest, EvalReport};
use crate::flow::{compute_flow, flow_to_color, FlowField};
use crate::fpv::{fpv_train_epoch, FNet, FNetConfig, SequenceInputs};
use crate::fusion::{fuse, MaskTable};
use crate::nn::{ParamStore, Sgd};
use crate::pdv::{IntersectionClass, MotionClass, MotionPdv};
use crate::tensor::Tensor;
use crate::tnet::{tnet_train_epoch, EpochMetrics, LabeledImage, TNet, TNetConfig};

impl FlowField {
    /// Flow of the horizontally mirrored frame pair: u negated, columns
    /// reversed.
    pub fn mirrored(&self) -> FlowField {
        let (h, w) = (self.height, self.width);
        let mut u = vec![0.0; h * w];
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let src = y * w + (w - 1 - x);
                u[y * w + x] = -self.u[src];
                v[y * w + x] = self.v[src];
            }
        }
        FlowField { width: w, height: h, u, v }
    }
}

// ── TPV run ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TpvRunConfig {
    pub model: TNetConfig,
    pub data: DatasetConfig,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
}

impl TpvRunConfig {
    pub fn standard(seed: u64) -> Self {
        TpvRunConfig {
            model: TNetConfig::toy(seed),
            data: DatasetConfig::standard(seed),
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            batch: 8,
        }
    }
}

pub struct TpvRunResult {
    pub model: TNet,
    pub store: ParamStore,
    pub epoch_metrics: Vec<EpochMetrics>,
    pub test_report: EvalReport,
    pub test_scenes: Vec<SceneSample>,
}

pub fn scenes_to_labeled(scenes: &[SceneSample]) -> Vec<LabeledImage> {
    scenes
        .iter()
        .map(|s| LabeledImage { image: s.image.clone(), label: s.label })
        .collect()
}

/// Parallel TPV evaluation over labeled scenes.
pub fn eval_tpv(
    model: &TNet,
    store: &ParamStore,
    scenes: &[SceneSample],
    digest: &str,
    seed: u64,
) -> Result<EvalReport> {
    let pairs: Result<Vec<(usize, usize)>> = scenes
        .par_iter()
        .map(|s| {
            let pdv = model.forward_pdv(store, &s.image)?;
            Ok((s.label.label(), pdv.argmax_class().label()))
        })
        .collect();
    EvalReport::from_pairs(7, &pairs?, digest, seed)
}

/// Build the synthetic corpus, train for the configured epochs and
/// evaluate on the held-out scenes.
pub fn train_tpv(cfg: &TpvRunConfig) -> Result<TpvRunResult> {
    cfg.model.validate()?;
    let (train_scenes, test_scenes) = build_scene_corpus(&cfg.data)?;
    let train = scenes_to_labeled(&train_scenes);
    let mut store = ParamStore::new();
    let model = TNet::init(&mut store, cfg.model.clone())?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.model.seed, 0x7a11));
    let mut epoch_metrics = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        epoch_metrics.push(tnet_train_epoch(
            &model,
            &mut store,
            &mut opt,
            &train,
            cfg.batch,
            &mut shuffle_rng,
        )?);
    }
    let digest = config_digest(cfg);
    let test_report = eval_tpv(&model, &store, &test_scenes, &digest, cfg.model.seed)?;
    Ok(TpvRunResult { model, store, epoch_metrics, test_report, test_scenes })
}

// ── FPV run ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FpvRunConfig {
    pub model: FNetConfig,
    pub data: DatasetConfig,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Train on mirrored copies with swapped labels as well.
    pub mirror_augment: bool,
}

impl FpvRunConfig {
    pub fn standard(seed: u64) -> Self {
        FpvRunConfig {
            model: FNetConfig::toy(seed),
            data: DatasetConfig::standard(seed),
            epochs: 20,
            lr: 0.1,
            momentum: 0.9,
            batch: 8,
            mirror_augment: true,
        }
    }
}

pub struct FpvRunResult {
    pub model: FNet,
    pub store: ParamStore,
    pub epoch_metrics: Vec<EpochMetrics>,
    pub test_report: EvalReport,
    /// Fraction of test sequences whose mirrored prediction equals the
    /// swapped prediction of the original.
    pub mirror_consistency: f64,
}

/// Precompute flow-color step inputs for a sequence and its mirror.
/// The mirrored inputs reuse the same flow fields (u negated, columns
/// reversed) instead of re-estimating flow on mirrored frames.
fn prepare_with_mirror(model: &FNet, seq: &SequenceSample) -> Result<(SequenceInputs, SequenceInputs)> {
    if !model.config.use_flow {
        let inputs = model.prepare_inputs(&seq.frames)?;
        let mirrored = model.prepare_inputs(&seq.mirrored().frames)?;
        return Ok((
            SequenceInputs { inputs, label: seq.motion_label },
            SequenceInputs { inputs: mirrored, label: seq.motion_label.mirrored() },
        ));
    }
    let mut inputs = Vec::with_capacity(seq.frames.len() - 1);
    let mut mirrored = Vec::with_capacity(seq.frames.len() - 1);
    for pair in seq.frames.windows(2) {
        let flow = compute_flow(&pair[0], &pair[1], &model.config.flow)?;
        inputs.push(flow_to_color(&flow));
        mirrored.push(flow_to_color(&flow.mirrored()));
    }
    Ok((
        SequenceInputs { inputs, label: seq.motion_label },
        SequenceInputs { inputs: mirrored, label: seq.motion_label.mirrored() },
    ))
}

/// Motion evaluation over prepared inputs.
pub fn eval_fpv_prepared(
    model: &FNet,
    store: &ParamStore,
    data: &[SequenceInputs],
    digest: &str,
    seed: u64,
) -> Result<EvalReport> {
    let pairs: Result<Vec<(usize, usize)>> = data
        .par_iter()
        .map(|s| {
            let pdv = model.classify_inputs(store, &s.inputs)?;
            Ok((s.label.label(), pdv.argmax_class().label()))
        })
        .collect();
    EvalReport::from_pairs(3, &pairs?, digest, seed)
}

pub fn train_fpv(cfg: &FpvRunConfig) -> Result<FpvRunResult> {
    cfg.model.validate()?;
    let (train_seqs, test_seqs) = build_sequence_corpus(&cfg.data)?;
    let mut store = ParamStore::new();
    let model = FNet::init(&mut store, cfg.model.clone())?;

    let prep = |seqs: &[SequenceSample]| -> Result<Vec<(SequenceInputs, SequenceInputs)>> {
        seqs.par_iter().map(|s| prepare_with_mirror(&model, s)).collect()
    };
    let train_pairs = prep(&train_seqs)?;
    let test_pairs = prep(&test_seqs)?;

    let mut train: Vec<SequenceInputs> = Vec::new();
    for (orig, mirror) in train_pairs {
        train.push(orig);
        if cfg.mirror_augment {
            train.push(mirror);
        }
    }

    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.model.seed, 0xf1a9));
    let mut epoch_metrics = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        epoch_metrics.push(fpv_train_epoch(
            &model,
            &mut store,
            &mut opt,
            &train,
            cfg.batch,
            &mut shuffle_rng,
        )?);
    }

    let digest = config_digest(cfg);
    let test: Vec<SequenceInputs> = test_pairs.iter().map(|(o, _)| o.clone()).collect();
    let test_report = eval_fpv_prepared(&model, &store, &test, &digest, cfg.model.seed)?;

    // Mirror consistency on the real mirrored-frame path (flow re-estimated
    // on mirrored frames, not derived), which is what a user would run.
    let consistent: Result<Vec<bool>> = test_seqs
        .par_iter()
        .map(|seq| {
            let p = model.sequence_classify(&store, &seq.frames)?;
            let pm = model.sequence_classify(&store, &seq.mirrored().frames)?;
            Ok(pm.argmax_class() == p.argmax_class().mirrored())
        })
        .collect();
    let consistent = consistent?;
    let mirror_consistency =
        consistent.iter().filter(|&&b| b).count() as f64 / consistent.len() as f64;

    Ok(FpvRunResult { model, store, epoch_metrics, test_report, mirror_consistency })
}

// ── fused evaluation ─────────────────────────────────────────────────

/// A confident synthetic motion PDV: the predicted class carries mass just
/// above the T threshold; the two remaining classes receive distinct tiny
/// probabilities in index order so argmin stays well defined.
pub fn confident_motion_pdv(predicted: MotionClass) -> MotionPdv {
    let mut p = [0.0; 3];
    p[predicted.index()] = 0.99996;
    let mut rest = [2.5e-5, 1.5e-5].into_iter();
    for i in 0..3 {
        if i != predicted.index() {
            p[i] = rest.next().unwrap();
        }
    }
    MotionPdv::new(p).expect("confident pdv sums to 1")
}

/// Calibrated synthetic FPV: correct with probability `accuracy`, otherwise
/// one of the two wrong classes, always fully confident.
pub fn calibrated_motion_pdv(
    true_motion: MotionClass,
    accuracy: f64,
    rng: &mut ChaCha8Rng,
) -> MotionPdv {
    let correct = rng.gen::<f64>() < accuracy;
    let predicted = if correct {
        true_motion
    } else {
        let others: Vec<MotionClass> = MotionClass::ALL
            .iter()
            .copied()
            .filter(|&m| m != true_motion)
            .collect();
        others[rng.gen_range(0..others.len())]
    };
    confident_motion_pdv(predicted)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FuseEvalSummary {
    pub fused_top1: f64,
    pub tpv_top1: f64,
    /// Class 2/3 cross-confusions (both directions) before and after fusion.
    pub pair23_tpv: u64,
    pub pair23_fused: u64,
    pub t_applied: u64,
    pub fallbacks: u64,
}

pub struct FuseEvalResult {
    pub fused: EvalReport,
    pub tpv_alone: EvalReport,
    pub summary: FuseEvalSummary,
}

/// Joint evaluation over test scenes: every scene is paired with a
/// mask-compatible ego-motion; the motion PDV comes from `motion_source`.
pub fn fuse_eval<F>(
    model: &TNet,
    store: &ParamStore,
    test_scenes: &[SceneSample],
    table: &MaskTable,
    digest: &str,
    seed: u64,
    mut motion_source: F,
) -> Result<FuseEvalResult>
where
    F: FnMut(usize, &SceneSample, MotionClass) -> Result<MotionPdv>,
{
    if test_scenes.is_empty() {
        return Err(Error::Data("empty fusion test split".into()));
    }
    // TPV posteriors in parallel, everything else sequentially seeded.
    let tpv_pdvs: Result<Vec<_>> = test_scenes
        .par_iter()
        .map(|s| model.forward_pdv(store, &s.image))
        .collect();
    let tpv_pdvs = tpv_pdvs?;

    let mut tpv_pairs = Vec::with_capacity(test_scenes.len());
    let mut fused_pairs = Vec::with_capacity(test_scenes.len());
    let mut t_applied = 0u64;
    let mut fallbacks = 0u64;
    for (i, (scene, tpv_pdv)) in test_scenes.iter().zip(&tpv_pdvs).enumerate() {
        let motion = paired_motion(scene.label, mix_seed(seed, 0xea0 + i as u64));
        let motion_pdv = motion_source(i, scene, motion)?;
        let fused = fuse(&motion_pdv, tpv_pdv, table)?;
        if fused.applied_t {
            t_applied += 1;
        }
        if fused.fallback {
            fallbacks += 1;
        }
        tpv_pairs.push((scene.label.label(), tpv_pdv.argmax_class().label()));
        fused_pairs.push((scene.label.label(), fused.pdv.argmax_class().label()));
    }
    let tpv_alone = EvalReport::from_pairs(7, &tpv_pairs, digest, seed)?;
    let fused = EvalReport::from_pairs(7, &fused_pairs, digest, seed)?;
    let summary = FuseEvalSummary {
        fused_top1: fused.top1,
        tpv_top1: tpv_alone.top1,
        pair23_tpv: tpv_alone.pair_confusions(2, 3),
        pair23_fused: fused.pair_confusions(2, 3),
        t_applied,
        fallbacks,
    };
    Ok(FuseEvalResult { fused, tpv_alone, summary })
}

/// Fused evaluation with the calibrated synthetic FPV.
pub fn fuse_eval_calibrated(
    model: &TNet,
    store: &ParamStore,
    test_scenes: &[SceneSample],
    accuracy: f64,
    table: &MaskTable,
    digest: &str,
    seed: u64,
) -> Result<FuseEvalResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xca11b));
    fuse_eval(model, store, test_scenes, table, digest, seed, move |_, _, motion| {
        Ok(calibrated_motion_pdv(motion, accuracy, &mut rng))
    })
}

/// Fused evaluation with a trained FPV model classifying a freshly rendered
/// passage sequence of the paired motion class.
pub fn fuse_eval_with_fpv(
    tnet: &TNet,
    tnet_store: &ParamStore,
    fnet: &FNet,
    fnet_store: &ParamStore,
    test_scenes: &[SceneSample],
    seq_params: &crate::dataset::SequenceParams,
    table: &MaskTable,
    digest: &str,
    seed: u64,
) -> Result<FuseEvalResult> {
    fuse_eval(tnet, tnet_store, test_scenes, table, digest, seed, |i, _, motion| {
        let seq = crate::dataset::generate_sequence(motion, mix_seed(seed, 0xf0e + i as u64), seq_params)?;
        fnet.sequence_classify(fnet_store, &seq.frames)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_pdv_shape() {
        let p = confident_motion_pdv(MotionClass::TurnRight);
        assert!(p.values()[1] >= 0.9999);
        assert_eq!(p.argmax_class(), MotionClass::TurnRight);
        let sum: f64 = p.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // argmin is the later remaining class (gets the smaller residual).
        let sel = crate::fusion::select_masks(&p, &MaskTable::default());
        assert_eq!(sel.c_minus, MotionClass::TurnLeft);
        assert!(sel.t.is_some());
    }

    #[test]
    fn calibrated_accuracy_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = 0;
        let n = 2000;
        for _ in 0..n {
            let p = calibrated_motion_pdv(MotionClass::GoStraight, 0.95, &mut rng);
            if p.argmax_class() == MotionClass::GoStraight {
                hits += 1;
            }
        }
        let acc = hits as f64 / n as f64;
        assert!((acc - 0.95).abs() < 0.02, "observed accuracy {acc}");
    }

    #[test]
    fn mirrored_flow_negates_u() {
        let mut f = FlowField::zeros(1, 2);
        f.u = vec![1.0, 2.0];
        f.v = vec![3.0, 4.0];
        let m = f.mirrored();
        assert_eq!(m.u, vec![-2.0, -1.0]);
        assert_eq!(m.v, vec![4.0, 3.0]);
    }
}
