//! Synthetic egocentric passage sequences: a camera translating (go
//! straight) or progressively yawing (turn right / turn left) through a
//! textured ground-plane world with a distant backdrop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{mix_seed, value_noise, Camera};
use crate::error::{Error, Result};
use crate::fusion::MaskTable;
use crate::image_io::mirror_horizontal;
use crate::pdv::{IntersectionClass, MotionClass};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceParams {
    pub size: (usize, usize),
    pub frames: usize,
    /// Meters per frame.
    pub speed: f64,
    /// Heading change per frame for the turn classes, degrees.
    pub yaw_rate_deg: f64,
    /// Along-track distance from the start to the intersection center.
    pub start_distance: f64,
    pub texture_scale: f64,
    pub cam_height: f64,
    pub fov_deg: f64,
    pub pitch_down_deg: f64,
    /// Relative jitter applied once per sequence to speed and yaw rate.
    pub jitter: f64,
}

impl Default for SequenceParams {
    fn default() -> Self {
        SequenceParams {
            size: (48, 48),
            frames: 12,
            speed: 1.2,
            yaw_rate_deg: 6.0,
            start_distance: 8.0,
            texture_scale: 1.0,
            cam_height: 1.5,
            fov_deg: 75.0,
            pitch_down_deg: 10.0,
            jitter: 0.2,
        }
    }
}

/// A labeled passage sequence with its pose track.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    /// Grayscale (H, W) frames.
    pub frames: Vec<Tensor>,
    /// Signed along-track distance to the intersection center per frame,
    /// strictly increasing.
    pub pose_track: Vec<f64>,
    pub motion_label: MotionClass,
    /// A topology compatible with the motion under the fusion mask table.
    pub intersection_label: IntersectionClass,
    pub seed: u64,
}

impl SequenceSample {
    /// Mirrored frames with the swapped turn label.
    pub fn mirrored(&self) -> SequenceSample {
        SequenceSample {
            frames: self.frames.iter().map(mirror_horizontal).collect(),
            pose_track: self.pose_track.clone(),
            motion_label: self.motion_label.mirrored(),
            intersection_label: self.intersection_label.mirrored(),
            seed: self.seed,
        }
    }
}

fn render_frame(
    cam_pos: (f64, f64, f64),
    heading: f64,
    params: &SequenceParams,
    tex_seed: u64,
) -> Tensor {
    let (h, w) = params.size;
    let cam = Camera::new(
        w,
        h,
        params.fov_deg,
        heading,
        params.pitch_down_deg.to_radians(),
    );
    let scale = params.texture_scale;
    let wall_seed = mix_seed(tex_seed, 0xbac);
    let mut data = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let (dx, dy, dz) = cam.ray(row, col);
            let value = if dy < -1e-6 {
                let t = -cam_pos.1 / dy;
                let gx = cam_pos.0 + t * dx;
                let gz = cam_pos.2 + t * dz;
                let n = value_noise(gx / scale, gz / scale, tex_seed);
                let depth = (gx - cam_pos.0).hypot(gz - cam_pos.2);
                let fade = (depth / 25.0).clamp(0.0, 1.0);
                (0.25 + 0.5 * n) * (1.0 - fade) + 0.5 * fade
            } else {
                // Distant backdrop: texture in view direction only, so it
                // shifts with rotation and ignores translation.
                let az = dx.atan2(dz);
                let ev = dy / dx.hypot(dz);
                let n = value_noise(az * 30.0 / scale, ev * 30.0 / scale, wall_seed);
                0.35 + 0.4 * n
            };
            data[row * w + col] = value.clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![h, w], data).expect("frame shape")
}

/// Render a passage sequence for a motion class. Strictly increasing pose
/// track; identical (motion, seed, params) produce identical frames.
pub fn generate_sequence(
    motion: MotionClass,
    seed: u64,
    params: &SequenceParams,
) -> Result<SequenceSample> {
    if params.frames < 10 {
        return Err(Error::InvalidArg(format!(
            "sequence needs at least 10 frames, got {}",
            params.frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x60 + motion.index() as u64));
    let jit = |rng: &mut ChaCha8Rng, j: f64| -> f64 {
        if j > 0.0 {
            1.0 + rng.gen_range(-j..j)
        } else {
            1.0
        }
    };
    let speed = params.speed * jit(&mut rng, params.jitter);
    let yaw_rate = params.yaw_rate_deg.to_radians() * jit(&mut rng, params.jitter);
    // Positive camera yaw looks right, so turn right = positive rate.
    let rate = match motion {
        MotionClass::GoStraight => 0.0,
        MotionClass::TurnRight => yaw_rate,
        MotionClass::TurnLeft => -yaw_rate,
    };
    let tex_seed = mix_seed(seed, 0x7e7);
    let intersection = {
        let compat = MaskTable::default().compatible_classes(motion);
        let pick = rng.gen_range(0..compat.len());
        IntersectionClass::from_label(compat[pick])?
    };

    let mut frames = Vec::with_capacity(params.frames);
    let mut pose_track = Vec::with_capacity(params.frames);
    let (mut x, mut z) = (0.0_f64, 0.0_f64);
    let mut heading = 0.0_f64;
    for i in 0..params.frames {
        frames.push(render_frame((x, params.cam_height, z), heading, params, tex_seed));
        // Pose track must stay strictly increasing even at zero speed.
        pose_track.push(i as f64 * speed.max(1e-6) - params.start_distance);
        heading += rate;
        let (sh, ch) = heading.sin_cos();
        x += speed * sh;
        z += speed * ch;
    }
    Ok(SequenceSample {
        frames,
        pose_track,
        motion_label: motion,
        intersection_label: intersection,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{compute_flow, FlowParams};

    fn interior_mean_u(sample: &SequenceSample) -> f64 {
        let params = FlowParams::default();
        let mut sum = 0.0;
        let mut n = 0.0;
        for pair in sample.frames.windows(2).take(4) {
            let flow = compute_flow(&pair[0], &pair[1], &params).unwrap();
            let (h, w) = (flow.height, flow.width);
            for y in h / 4..3 * h / 4 {
                for x in w / 4..3 * w / 4 {
                    sum += flow.at(y, x).0;
                    n += 1.0;
                }
            }
        }
        sum / n
    }

    #[test]
    fn same_seed_identical_sequence() {
        let p = SequenceParams::default();
        let a = generate_sequence(MotionClass::TurnRight, 3, &p).unwrap();
        let b = generate_sequence(MotionClass::TurnRight, 3, &p).unwrap();
        assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data(), fb.data());
        }
        assert_eq!(a.pose_track, b.pose_track);
    }

    #[test]
    fn zero_speed_straight_gives_identical_frames() {
        let mut p = SequenceParams::default();
        p.speed = 0.0;
        p.jitter = 0.0;
        let s = generate_sequence(MotionClass::GoStraight, 5, &p).unwrap();
        for f in &s.frames[1..] {
            assert_eq!(f.data(), s.frames[0].data());
        }
        // Track still strictly increasing.
        for w in s.pose_track.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn pose_track_is_strictly_increasing() {
        let p = SequenceParams::default();
        let s = generate_sequence(MotionClass::TurnLeft, 8, &p).unwrap();
        for w in s.pose_track.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(s.pose_track[0] < 0.0);
    }

    #[test]
    fn flow_statistics_match_motion_classes() {
        let p = SequenceParams::default();
        let straight = generate_sequence(MotionClass::GoStraight, 21, &p).unwrap();
        let right = generate_sequence(MotionClass::TurnRight, 21, &p).unwrap();
        let left = generate_sequence(MotionClass::TurnLeft, 21, &p).unwrap();
        let mu_s = interior_mean_u(&straight);
        let mu_r = interior_mean_u(&right);
        let mu_l = interior_mean_u(&left);
        // Turning right pans the view right, content shifts left (u < 0).
        assert!(mu_r < -0.5, "turn right mean u = {mu_r}");
        assert!(mu_l > 0.5, "turn left mean u = {mu_l}");
        assert!(mu_s.abs() < 0.5, "straight mean u = {mu_s}");
    }

    #[test]
    fn compatible_intersection_labels_only() {
        let p = SequenceParams::default();
        let table = MaskTable::default();
        for seed in 0..8 {
            for &motion in &MotionClass::ALL {
                let s = generate_sequence(motion, seed, &p).unwrap();
                let compat = table.compatible_classes(motion);
                assert!(compat.contains(&s.intersection_label.label()));
            }
        }
    }

    #[test]
    fn mirrored_sequence_swaps_turn_labels() {
        let p = SequenceParams::default();
        let s = generate_sequence(MotionClass::TurnRight, 2, &p).unwrap();
        let m = s.mirrored();
        assert_eq!(m.motion_label, MotionClass::TurnLeft);
        let mm = m.mirrored();
        assert_eq!(mm.frames[0].data(), s.frames[0].data());
    }
}
