//! Synthetic third-person approach scenes: a flat-shaded perspective road
//! layout for each of the seven intersection topologies, with value-noise
//! texture and randomized viewpoint inside the approach band.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{mix_seed, value_noise, Camera};
use crate::error::Result;
use crate::image_io::mirror_horizontal;
use crate::pdv::IntersectionClass;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneParams {
    /// (height, width) of the rendered image.
    pub size: (usize, usize),
    pub road_half_width: f64,
    pub arm_length: f64,
    /// Camera distance band before the intersection center (meters).
    pub approach_band: (f64, f64),
    pub lateral_jitter: f64,
    pub yaw_jitter_deg: f64,
    /// Side arms leave the approach axis at an angle sampled from this range
    /// (90 is perpendicular; small angles make left/right genuinely
    /// confusable).
    pub arm_angle_range_deg: (f64, f64),
    pub texture_amp: f64,
    pub texture_scale: f64,
    pub cam_height: f64,
    pub fov_deg: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            size: (64, 64),
            road_half_width: 2.5,
            arm_length: 40.0,
            approach_band: (1.0, 5.0),
            lateral_jitter: 1.2,
            yaw_jitter_deg: 12.0,
            arm_angle_range_deg: (35.0, 90.0),
            texture_amp: 0.08,
            texture_scale: 0.75,
            cam_height: 1.6,
            fov_deg: 75.0,
        }
    }
}

impl SceneParams {
    /// No viewpoint jitter: fixed distance, centered, axis-aligned arms.
    pub fn frozen(mut self) -> Self {
        let mid = 0.5 * (self.approach_band.0 + self.approach_band.1);
        self.approach_band = (mid, mid);
        self.lateral_jitter = 0.0;
        self.yaw_jitter_deg = 0.0;
        self.arm_angle_range_deg = (90.0, 90.0);
        self
    }
}

/// One labeled approach image.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub image: Tensor,
    pub label: IntersectionClass,
    pub seed: u64,
    pub params: SceneParams,
}

impl SceneSample {
    /// Horizontal mirror with the dual label (2<->3, 4<->5, others fixed).
    pub fn mirrored(&self) -> SceneSample {
        SceneSample {
            image: mirror_horizontal(&self.image),
            label: self.label.mirrored(),
            seed: self.seed,
            params: self.params.clone(),
        }
    }
}

/// Ground-plane arm: unit direction away from the intersection center.
struct Arm {
    dx: f64,
    dz: f64,
}

/// Arms per class, not counting the approach arm which is always present.
/// `a` is the side-arm angle from the forward axis in radians (pi/2 is
/// perpendicular). E arms head toward +x, W arms toward -x.
fn class_arms(class: IntersectionClass, a_east: f64, a_west: f64) -> Vec<Arm> {
    let north = Arm { dx: 0.0, dz: 1.0 };
    let east = Arm { dx: a_east.sin(), dz: a_east.cos() };
    let west = Arm { dx: -a_west.sin(), dz: a_west.cos() };
    match class {
        IntersectionClass::GoStraight => vec![north],
        IntersectionClass::TurnRight => vec![east],
        IntersectionClass::TurnLeft => vec![west],
        IntersectionClass::RightFacingT => vec![north, east],
        IntersectionClass::LeftFacingT => vec![north, west],
        IntersectionClass::BottomFacingT => vec![east, west],
        IntersectionClass::Crossroad => vec![north, east, west],
    }
}

fn on_road(x: f64, z: f64, arms: &[Arm], half_width: f64, length: f64) -> bool {
    for arm in arms {
        let along = x * arm.dx + z * arm.dz;
        let across = x * arm.dz - z * arm.dx;
        if along >= -half_width && along <= length && across.abs() <= half_width {
            return true;
        }
    }
    false
}

/// Render one scene. Identical (class, seed, params) produce identical
/// pixels.
pub fn generate_scene(
    class: IntersectionClass,
    seed: u64,
    params: &SceneParams,
) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class.label() as u64));
    let (h, w) = params.size;
    // Draw the viewpoint and both side-arm angles in a fixed order so all
    // classes consume the same RNG stream.
    let dist = if params.approach_band.0 < params.approach_band.1 {
        rng.gen_range(params.approach_band.0..params.approach_band.1)
    } else {
        params.approach_band.0
    };
    let lateral = if params.lateral_jitter > 0.0 {
        rng.gen_range(-params.lateral_jitter..params.lateral_jitter)
    } else {
        0.0
    };
    let yaw = if params.yaw_jitter_deg > 0.0 {
        rng.gen_range(-params.yaw_jitter_deg..params.yaw_jitter_deg).to_radians()
    } else {
        0.0
    };
    let (lo, hi) = params.arm_angle_range_deg;
    let mut draw_angle = || -> f64 {
        if lo < hi {
            rng.gen_range(lo..hi).to_radians()
        } else {
            lo.to_radians()
        }
    };
    let a_east = draw_angle();
    let a_west = draw_angle();

    let mut arms = class_arms(class, a_east, a_west);
    // Approach arm back toward (and past) the camera.
    arms.push(Arm { dx: 0.0, dz: -1.0 });

    let cam = Camera::new(w, h, params.fov_deg, yaw, 0.0);
    let cam_pos = (lateral, params.cam_height, -dist);
    let tex_seed = mix_seed(seed, 0x5ce_u64 + class.label() as u64);
    let noise_amp = params.texture_amp;
    let scale = params.texture_scale;

    let road_base = [0.20, 0.20, 0.23];
    let ground_base = [0.40, 0.47, 0.30];
    let horizon_color = [0.78, 0.83, 0.88];
    let sky_top = [0.35, 0.55, 0.85];

    let mut data = vec![0.0; h * w * 3];
    for row in 0..h {
        for col in 0..w {
            let (dx, dy, dz) = cam.ray(row, col);
            let px = &mut data[(row * w + col) * 3..(row * w + col) * 3 + 3];
            if dy >= -1e-9 {
                // Sky gradient toward the horizon.
                let t = (row as f64 / (h as f64 / 2.0)).clamp(0.0, 1.0);
                for c in 0..3 {
                    px[c] = sky_top[c] + (horizon_color[c] - sky_top[c]) * t;
                }
                continue;
            }
            let t = -cam_pos.1 / dy;
            let gx = cam_pos.0 + t * dx;
            let gz = cam_pos.2 + t * dz;
            let base = if on_road(gx, gz, &arms, params.road_half_width, params.arm_length) {
                road_base
            } else {
                ground_base
            };
            let n = value_noise(gx / scale, gz / scale, tex_seed);
            let shade = (n - 0.5) * 2.0 * noise_amp;
            // Fade distant ground into the horizon color.
            let depth = (gx - cam_pos.0).hypot(gz - cam_pos.2);
            let fade = (depth / 80.0).clamp(0.0, 1.0);
            for c in 0..3 {
                px[c] = ((base[c] + shade) * (1.0 - fade) + horizon_color[c] * fade)
                    .clamp(0.0, 1.0);
            }
        }
    }
    Ok(SceneSample {
        image: Tensor::new(vec![h, w, 3], data)?,
        label: class,
        seed,
        params: params.clone(),
    })
}
