//! Class enumerations and probability density vectors for the two modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_INTERSECTION_CLASSES: usize = 7;
pub const NUM_MOTION_CLASSES: usize = 3;

/// The 7 intersection classes, numbered as in the class figure:
/// #1 go straight, #2 turn right, #3 turn left, #4 right facing T-junction,
/// #5 left facing T-junction, #6 bottom facing T-junction, #7 crossroad.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntersectionClass {
    GoStraight = 1,
    TurnRight = 2,
    TurnLeft = 3,
    RightFacingT = 4,
    LeftFacingT = 5,
    BottomFacingT = 6,
    Crossroad = 7,
}

impl IntersectionClass {
    pub const ALL: [IntersectionClass; 7] = [
        IntersectionClass::GoStraight,
        IntersectionClass::TurnRight,
        IntersectionClass::TurnLeft,
        IntersectionClass::RightFacingT,
        IntersectionClass::LeftFacingT,
        IntersectionClass::BottomFacingT,
        IntersectionClass::Crossroad,
    ];

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL
            .get(label.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Data(format!("intersection label {label} not in 1..=7")))
    }

    /// 1-based class number.
    pub fn label(self) -> usize {
        self as usize
    }

    /// 0-based index into PDVs and confusion rows.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    /// Class of the horizontally mirrored scene: 2<->3, 4<->5, others fixed.
    pub fn mirrored(self) -> Self {
        match self {
            IntersectionClass::TurnRight => IntersectionClass::TurnLeft,
            IntersectionClass::TurnLeft => IntersectionClass::TurnRight,
            IntersectionClass::RightFacingT => IntersectionClass::LeftFacingT,
            IntersectionClass::LeftFacingT => IntersectionClass::RightFacingT,
            other => other,
        }
    }
}

/// Ego-motion classes in the fixed PDV order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionClass {
    GoStraight = 0,
    TurnRight = 1,
    TurnLeft = 2,
}

impl MotionClass {
    pub const ALL: [MotionClass; 3] = [
        MotionClass::GoStraight,
        MotionClass::TurnRight,
        MotionClass::TurnLeft,
    ];

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::Data(format!("motion index {index} not in 0..=2")))
    }

    /// 1-based label used in manifests (1 straight, 2 right, 3 left).
    pub fn from_label(label: usize) -> Result<Self> {
        Self::from_index(label.wrapping_sub(1))
    }

    pub fn label(self) -> usize {
        self as usize + 1
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn mirrored(self) -> Self {
        match self {
            MotionClass::TurnRight => MotionClass::TurnLeft,
            MotionClass::TurnLeft => MotionClass::TurnRight,
            MotionClass::GoStraight => MotionClass::GoStraight,
        }
    }
}

const PDV_SUM_TOL: f64 = 1e-6;

fn check_pdv(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite { context: "probability density vector".into() });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PDV_SUM_TOL {
        return Err(Error::InvalidArg(format!("PDV sums to {sum}, expected 1")));
    }
    Ok(())
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Probability density over the 7 intersection classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionPdv(pub [f64; NUM_INTERSECTION_CLASSES]);

impl IntersectionPdv {
    pub fn new(p: [f64; NUM_INTERSECTION_CLASSES]) -> Result<Self> {
        check_pdv(&p)?;
        Ok(IntersectionPdv(p))
    }

    pub fn uniform() -> Self {
        IntersectionPdv([1.0 / 7.0; 7])
    }

    pub fn values(&self) -> &[f64; 7] {
        &self.0
    }

    /// Ties break toward the lowest class number.
    pub fn argmax_class(&self) -> IntersectionClass {
        IntersectionClass::ALL[argmax(&self.0)]
    }
}

/// Probability density over {go straight, turn right, turn left}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionPdv(pub [f64; NUM_MOTION_CLASSES]);

impl MotionPdv {
    pub fn new(p: [f64; NUM_MOTION_CLASSES]) -> Result<Self> {
        check_pdv(&p)?;
        Ok(MotionPdv(p))
    }

    pub fn values(&self) -> &[f64; 3] {
        &self.0
    }

    pub fn argmax_class(&self) -> MotionClass {
        MotionClass::ALL[argmax(&self.0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdv_validation() {
        assert!(IntersectionPdv::new([1.0 / 7.0; 7]).is_ok());
        assert!(IntersectionPdv::new([0.5; 7]).is_err());
        assert!(MotionPdv::new([0.5, 0.25, 0.25]).is_ok());
        assert!(MotionPdv::new([-0.1, 0.6, 0.5]).is_err());
    }

    #[test]
    fn mirror_duality() {
        use IntersectionClass::*;
        assert_eq!(TurnRight.mirrored(), TurnLeft);
        assert_eq!(RightFacingT.mirrored(), LeftFacingT);
        assert_eq!(BottomFacingT.mirrored(), BottomFacingT);
        assert_eq!(Crossroad.mirrored(), Crossroad);
        assert_eq!(GoStraight.mirrored(), GoStraight);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let p = MotionPdv::new([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert_eq!(p.argmax_class(), MotionClass::GoStraight);
    }
}
