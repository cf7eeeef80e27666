//! Shared pinhole-camera and value-noise helpers for the synthetic
//! generators. Everything is a pure function of its inputs, which is what
//! makes the generators byte-reproducible.

/// Deterministic lattice hash to [0, 1).
pub fn hash01(ix: i64, iz: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iz as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothstep-interpolated value noise in [0, 1).
pub fn value_noise(x: f64, z: f64, seed: u64) -> f64 {
    let (xf, zf) = (x.floor(), z.floor());
    let (ix, iz) = (xf as i64, zf as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sz) = (smooth(x - xf), smooth(z - zf));
    let v00 = hash01(ix, iz, seed);
    let v10 = hash01(ix + 1, iz, seed);
    let v01 = hash01(ix, iz + 1, seed);
    let v11 = hash01(ix + 1, iz + 1, seed);
    let a = v00 + (v10 - v00) * sx;
    let b = v01 + (v11 - v01) * sx;
    a + (b - a) * sz
}

/// Mix a stream id into a base seed (stable across platforms).
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut h = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h
}

#[derive(Clone, Copy, Debug)]
pub struct Camera {
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    /// Yaw around the vertical axis; positive turns the view to the right.
    pub yaw: f64,
    /// Downward tilt in radians (0 keeps the horizon at the image middle).
    pub pitch_down: f64,
}

impl Camera {
    pub fn new(width: usize, height: usize, fov_deg: f64, yaw: f64, pitch_down: f64) -> Self {
        let focal = 0.5 * width as f64 / (fov_deg.to_radians() / 2.0).tan();
        Camera { focal, width, height, yaw, pitch_down }
    }

    /// World-space direction of the pixel-center ray (x right, y up,
    /// z forward before yaw).
    pub fn ray(&self, row: usize, col: usize) -> (f64, f64, f64) {
        let x = (col as f64 + 0.5 - self.width as f64 / 2.0) / self.focal;
        let y = (self.height as f64 / 2.0 - row as f64 - 0.5) / self.focal;
        let z = 1.0;
        // Pitch (tilt down), then yaw.
        let (sp, cp) = self.pitch_down.sin_cos();
        let (y, z) = (y * cp - z * sp, y * sp + z * cp);
        let (sy, cy) = self.yaw.sin_cos();
        let (x, z) = (x * cy + z * sy, -x * sy + z * cy);
        (x, y, z)
    }
}
