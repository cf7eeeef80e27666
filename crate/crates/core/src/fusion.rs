//! The I-Net: deterministic combination of the motion PDV and the
//! intersection PDV through hard mask vectors.
//!
//! For every class c the fused score is I[c] = W_S[c] P_M[c], where W_S is
//! selected by the least-likely motion class c-. When the top motion
//! confidence reaches the threshold, the second mask applies:
//! I[c] = W_S[c] P_M[c] T[c], with T selected by the most-likely class c+.
//! The result is renormalized; if the masks annihilate everything the
//! unmodified intersection PDV is returned and flagged.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pdv::{IntersectionPdv, MotionClass, MotionPdv};

/// Default confidence needed before the T mask applies.
pub const DEFAULT_T_THRESHOLD: f64 = 0.9999;

/// The six hard-coded 7-vectors and the confidence threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTable {
    /// Row per ego-motion class c- (go straight, turn right, turn left).
    pub w_s: [[f64; 7]; 3],
    /// Row per ego-motion class c+.
    pub t: [[f64; 7]; 3],
    pub threshold: f64,
}

impl Default for MaskTable {
    fn default() -> Self {
        MaskTable {
            w_s: [
                [0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], // c- = go straight
                [1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0], // c- = turn right
                [1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0], // c- = turn left
            ],
            t: [
                [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0], // c+ = go straight
                [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0], // c+ = turn right
                [0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0], // c+ = turn left
            ],
            threshold: DEFAULT_T_THRESHOLD,
        }
    }
}

impl MaskTable {
    pub fn with_threshold(threshold: f64) -> Self {
        MaskTable { threshold, ..Default::default() }
    }

    pub fn w_s_row(&self, c_minus: MotionClass) -> &[f64; 7] {
        &self.w_s[c_minus.index()]
    }

    pub fn t_row(&self, c_plus: MotionClass) -> &[f64; 7] {
        &self.t[c_plus.index()]
    }

    /// Intersection classes compatible with a motion class under T (used by
    /// the synthetic pairing of scenes with plausible ego-motions).
    pub fn compatible_classes(&self, motion: MotionClass) -> Vec<usize> {
        self.t[motion.index()]
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Masks picked for one motion PDV.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSelection {
    pub w_s: [f64; 7],
    /// Present only when the top-1 confidence reaches the threshold.
    pub t: Option<[f64; 7]>,
    pub c_minus: MotionClass,
    pub c_plus: MotionClass,
}

/// c- = argmin, c+ = argmax of the motion probabilities; ties break toward
/// the lowest class index. T applies when max >= threshold.
pub fn select_masks(motion: &MotionPdv, table: &MaskTable) -> MaskSelection {
    let p = motion.values();
    let mut lo = 0;
    let mut hi = 0;
    for i in 1..3 {
        if p[i] < p[lo] {
            lo = i;
        }
        if p[i] > p[hi] {
            hi = i;
        }
    }
    let c_minus = MotionClass::ALL[lo];
    let c_plus = MotionClass::ALL[hi];
    let t = if p[hi] >= table.threshold {
        Some(*table.t_row(c_plus))
    } else {
        None
    };
    MaskSelection { w_s: *table.w_s_row(c_minus), t, c_minus, c_plus }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    pub pdv: IntersectionPdv,
    pub applied_t: bool,
    pub c_minus: MotionClass,
    pub c_plus: MotionClass,
    /// True when the masks zeroed every class and the unmodified TPV output
    /// was returned instead.
    pub fallback: bool,
}

/// Fuse over raw non-negative scores (need not be normalized; the output is).
pub fn fuse_scores(
    motion: &MotionPdv,
    tpv_scores: &[f64; 7],
    table: &MaskTable,
) -> Result<FusionResult> {
    let sel = select_masks(motion, table);
    let mut masked = [0.0; 7];
    for c in 0..7 {
        masked[c] = sel.w_s[c] * tpv_scores[c];
        if let Some(t) = &sel.t {
            masked[c] *= t[c];
        }
    }
    let sum: f64 = masked.iter().sum();
    if sum == 0.0 {
        let total: f64 = tpv_scores.iter().sum();
        let mut p = [0.0; 7];
        for c in 0..7 {
            p[c] = tpv_scores[c] / total;
        }
        return Ok(FusionResult {
            pdv: IntersectionPdv::new(p)?,
            applied_t: sel.t.is_some(),
            c_minus: sel.c_minus,
            c_plus: sel.c_plus,
            fallback: true,
        });
    }
    let mut p = [0.0; 7];
    for c in 0..7 {
        p[c] = masked[c] / sum;
    }
    Ok(FusionResult {
        pdv: IntersectionPdv::new(p)?,
        applied_t: sel.t.is_some(),
        c_minus: sel.c_minus,
        c_plus: sel.c_plus,
        fallback: false,
    })
}

/// Fuse a motion PDV with the TPV posterior.
pub fn fuse(
    motion: &MotionPdv,
    tpv: &IntersectionPdv,
    table: &MaskTable,
) -> Result<FusionResult> {
    fuse_scores(motion, tpv.values(), table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_vectors_match_the_fixed_table() {
        let t = MaskTable::default();
        assert_eq!(t.w_s[0], [0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.w_s[1], [1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.w_s[2], [1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.t[0], [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.t[1], [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(t.t[2], [0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(t.threshold, 0.9999);
    }

    #[test]
    fn select_low_confidence_picks_w_s_only() {
        let table = MaskTable::default();
        let sel = select_masks(&MotionPdv::new([0.5, 0.3, 0.2]).unwrap(), &table);
        assert_eq!(sel.c_minus, MotionClass::TurnLeft);
        assert_eq!(sel.w_s, [1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(sel.t.is_none());
        assert_eq!(sel.c_plus, MotionClass::GoStraight);
    }

    #[test]
    fn select_tie_breaks_to_lowest_index() {
        let table = MaskTable::default();
        let third = 1.0 / 3.0;
        let sel = select_masks(&MotionPdv::new([third, third, third]).unwrap(), &table);
        assert_eq!(sel.c_minus, MotionClass::GoStraight);
        assert_eq!(sel.c_plus, MotionClass::GoStraight);
        assert!(sel.t.is_none());
    }

    #[test]
    fn select_confident_straight_applies_t() {
        let table = MaskTable::default();
        let sel = select_masks(&MotionPdv::new([0.99995, 0.00003, 0.00002]).unwrap(), &table);
        assert_eq!(sel.c_plus, MotionClass::GoStraight);
        assert_eq!(sel.t, Some([1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn fuse_uniform_tpv_single_mask() {
        let table = MaskTable::default();
        let motion = MotionPdv::new([0.5, 0.3, 0.2]).unwrap();
        let r = fuse(&motion, &IntersectionPdv::uniform(), &table).unwrap();
        let sixth = 1.0 / 6.0;
        let expect = [sixth, sixth, 0.0, sixth, sixth, sixth, sixth];
        for (a, b) in r.pdv.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(!r.applied_t && !r.fallback);
    }

    #[test]
    fn fuse_confident_straight_worked_example() {
        let table = MaskTable::default();
        let motion = MotionPdv::new([0.99995, 0.00003, 0.00002]).unwrap();
        let tpv = IntersectionPdv::new([0.4, 0.3, 0.05, 0.05, 0.1, 0.05, 0.05]).unwrap();
        let r = fuse(&motion, &tpv, &table).unwrap();
        assert!(r.applied_t);
        assert_eq!(r.c_minus, MotionClass::TurnLeft);
        let expect = [0.4 / 0.6, 0.0, 0.0, 0.0, 0.1 / 0.6, 0.05 / 0.6, 0.05 / 0.6];
        for (a, b) in r.pdv.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{:?} vs {expect:?}", r.pdv.values());
        }
    }

    #[test]
    fn fuse_confident_right_keeps_class_two() {
        let table = MaskTable::default();
        let motion = MotionPdv::new([0.00001, 0.99998, 0.00001]).unwrap();
        let tpv = IntersectionPdv::new([0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let r = fuse(&motion, &tpv, &table).unwrap();
        assert!(r.applied_t);
        assert_eq!(r.pdv.values(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let table = MaskTable::default();
        let at = MotionPdv::new([0.9999, 0.00006, 0.00004]).unwrap();
        assert!(select_masks(&at, &table).t.is_some());
        let eps = 1e-7;
        let below = MotionPdv::new([0.9999 - eps, 0.00006 + eps, 0.00004]).unwrap();
        assert!(select_masks(&below, &table).t.is_none());
    }

    #[test]
    fn annihilating_masks_fall_back_to_tpv() {
        let table = MaskTable::default();
        // Confident straight keeps {1,5,6,7}; TPV mass entirely on class 2.
        let motion = MotionPdv::new([0.99996, 0.00003, 0.00001]).unwrap();
        let tpv = IntersectionPdv::new([0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let r = fuse(&motion, &tpv, &table).unwrap();
        assert!(r.fallback);
        assert_eq!(r.pdv, tpv);
    }

    #[test]
    fn masked_classes_are_exactly_zero() {
        let table = MaskTable::default();
        let motion = MotionPdv::new([0.2, 0.5, 0.3]).unwrap();
        let tpv = IntersectionPdv::new([0.2, 0.1, 0.1, 0.2, 0.1, 0.2, 0.1]).unwrap();
        let r = fuse(&motion, &tpv, &table).unwrap();
        assert_eq!(r.c_minus, MotionClass::GoStraight);
        assert_eq!(r.pdv.values()[0], 0.0);
    }

    #[test]
    fn scaling_tpv_scores_leaves_result_unchanged() {
        let table = MaskTable::default();
        let motion = MotionPdv::new([0.1, 0.6, 0.3]).unwrap();
        let scores = [0.3, 0.1, 0.25, 0.05, 0.15, 0.05, 0.1];
        let base = fuse_scores(&motion, &scores, &table).unwrap();
        for k in [0.25, 3.0, 1e6] {
            let scaled: Vec<f64> = scores.iter().map(|v| v * k).collect();
            let scaled: [f64; 7] = scaled.try_into().unwrap();
            let r = fuse_scores(&motion, &scaled, &table).unwrap();
            for (a, b) in r.pdv.values().iter().zip(base.pdv.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
