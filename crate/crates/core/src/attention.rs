//! Patch-wise self-attention block.
//!
//! For every location i the block gathers the footprint patch x_{R(i)},
//! derives attention weights through delta (star / clique / concatenation)
//! followed by a small two-layer map, and aggregates beta-transformed
//! features with a Hadamard product:
//!
//!   y_i = sum_{j in R(i)} alpha(x_{R(i)})_j ⊙ beta(x_j)
//!
//! The aggregated features then pass through batch norm, ReLU and a final
//! linear expansion back to C channels, with an optional residual.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, Forward, LinearLayer, Mode, ParamStore};
use crate::tape::{Var, GATHER_ZERO};
use crate::tensor::Tensor;

/// The three delta aggregations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaVariant {
    Star,
    Clique,
    Concat,
}

#[derive(Clone, Debug)]
pub struct SABlockConfig {
    /// Input/output channel count C.
    pub channels: usize,
    /// Reduced dimension d of the phi/psi/beta streams.
    pub reduced_dim: usize,
    /// Footprint window k (odd).
    pub footprint_k: usize,
    pub variant: DeltaVariant,
    /// Positive divisor s of d; alpha carries d/s channels, each broadcast
    /// over a group of s consecutive channels.
    pub share_factor: usize,
    /// Hidden width of the two-layer alpha map.
    pub alpha_hidden: usize,
    /// Normalize alpha over footprint positions per channel.
    pub alpha_softmax: bool,
    pub residual: bool,
}

impl SABlockConfig {
    /// Defaults: k=3, s=d (one shared weight row per position), no alpha
    /// softmax, residual on.
    pub fn new(channels: usize, reduced_dim: usize, variant: DeltaVariant) -> Result<Self> {
        let cfg = SABlockConfig {
            channels,
            reduced_dim,
            footprint_k: 3,
            variant,
            share_factor: reduced_dim,
            alpha_hidden: 0,
            alpha_softmax: false,
            residual: true,
        };
        let mut cfg = cfg;
        cfg.alpha_hidden = (2 * cfg.footprint_len() * cfg.group_channels()).max(8);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.footprint_k % 2 == 0 || self.footprint_k == 0 {
            return Err(Error::InvalidArg(format!(
                "footprint_k must be odd, got {}",
                self.footprint_k
            )));
        }
        if self.reduced_dim == 0 || self.reduced_dim > self.channels {
            return Err(Error::InvalidArg(format!(
                "reduced_dim {} must be in 1..={}",
                self.reduced_dim, self.channels
            )));
        }
        if self.share_factor == 0 || self.reduced_dim % self.share_factor != 0 {
            return Err(Error::InvalidArg(format!(
                "share_factor {} must divide reduced_dim {}",
                self.share_factor, self.reduced_dim
            )));
        }
        if self.alpha_hidden == 0 {
            return Err(Error::InvalidArg("alpha_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Footprint size m = k*k.
    pub fn footprint_len(&self) -> usize {
        self.footprint_k * self.footprint_k
    }

    /// Channels carried by alpha per position: d / s.
    pub fn group_channels(&self) -> usize {
        self.reduced_dim / self.share_factor
    }

    /// Length of delta's output: star m, clique m^2, concat d + m*d.
    pub fn delta_len(&self) -> usize {
        let m = self.footprint_len();
        match self.variant {
            DeltaVariant::Star => m,
            DeltaVariant::Clique => m * m,
            DeltaVariant::Concat => self.reduced_dim + m * self.reduced_dim,
        }
    }

    /// Output length of the alpha map: one row of d/s channels per position.
    pub fn alpha_len(&self) -> usize {
        self.footprint_len() * self.group_channels()
    }
}

// ── footprints ───────────────────────────────────────────────────────

/// The gathered neighborhood of one query location.
#[derive(Clone, Debug)]
pub struct Footprint {
    pub center: (usize, usize),
    /// Raster-ordered spatial locations; `None` marks out-of-image positions
    /// whose features are zero-filled.
    pub indices: Vec<Option<(usize, usize)>>,
    /// Gathered features, shape (k*k, C).
    pub patch: Tensor,
}

impl Footprint {
    /// Position of the center inside the raster ordering.
    pub fn center_position(k: usize) -> usize {
        (k * k) / 2
    }
}

/// Gather the k x k neighborhood of `center` in raster order, zero-filling
/// positions outside the image.
pub fn extract_footprint(x: &Tensor, center: (usize, usize), k: usize) -> Result<Footprint> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidArg(format!("footprint k must be odd, got {k}")));
    }
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Shape { op: "extract_footprint", detail: format!("{s:?}") });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if center.0 >= h || center.1 >= w {
        return Err(Error::InvalidArg(format!(
            "center {center:?} outside {h}x{w} image"
        )));
    }
    let half = (k / 2) as isize;
    let mut indices = Vec::with_capacity(k * k);
    let mut patch = vec![0.0; k * k * c];
    let mut row = 0usize;
    for dr in -half..=half {
        for dc in -half..=half {
            let r = center.0 as isize + dr;
            let cc = center.1 as isize + dc;
            if r >= 0 && r < h as isize && cc >= 0 && cc < w as isize {
                let (r, cc) = (r as usize, cc as usize);
                indices.push(Some((r, cc)));
                let src = &x.data()[(r * w + cc) * c..(r * w + cc + 1) * c];
                patch[row * c..(row + 1) * c].copy_from_slice(src);
            } else {
                indices.push(None);
            }
            row += 1;
        }
    }
    Ok(Footprint {
        center,
        indices,
        patch: Tensor::new(vec![k * k, c], patch)?,
    })
}

/// Flat gather indices for every location of an HxW map: length H*W*m, with
/// `GATHER_ZERO` marking out-of-image positions.
pub fn footprint_gather_indices(h: usize, w: usize, k: usize) -> Vec<usize> {
    let half = (k / 2) as isize;
    let mut out = Vec::with_capacity(h * w * k * k);
    for r in 0..h as isize {
        for c in 0..w as isize {
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                        out.push((rr as usize) * w + cc as usize);
                    } else {
                        out.push(GATHER_ZERO);
                    }
                }
            }
        }
    }
    out
}

// ── per-location reference operations ────────────────────────────────

/// Straight-line delta for a single footprint. `phi_rows`/`psi_rows` are the
/// (m, d) mapped features of the footprint; `center_phi` is phi(x_i).
pub fn compute_delta(
    variant: DeltaVariant,
    phi_rows: &Tensor,
    psi_rows: &Tensor,
    center_phi: &Tensor,
) -> Result<Tensor> {
    let (sp, sq) = (phi_rows.shape(), psi_rows.shape());
    if sp.len() != 2 || sq.len() != 2 || sp != sq {
        return Err(Error::Shape {
            op: "compute_delta",
            detail: format!("phi {sp:?} vs psi {sq:?}"),
        });
    }
    let (m, d) = (sp[0], sp[1]);
    if center_phi.shape() != [d] {
        return Err(Error::Shape {
            op: "compute_delta",
            detail: format!("center {:?} vs d={d}", center_phi.shape()),
        });
    }
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    match variant {
        DeltaVariant::Star => {
            let mut out = Vec::with_capacity(m);
            for j in 0..m {
                out.push(dot(center_phi.data(), &psi_rows.data()[j * d..(j + 1) * d]));
            }
            Tensor::new(vec![m], out)
        }
        DeltaVariant::Clique => {
            let mut out = Vec::with_capacity(m * m);
            for j in 0..m {
                let pj = &phi_rows.data()[j * d..(j + 1) * d];
                for kk in 0..m {
                    out.push(dot(pj, &psi_rows.data()[kk * d..(kk + 1) * d]));
                }
            }
            Tensor::new(vec![m * m], out)
        }
        DeltaVariant::Concat => {
            let mut out = Vec::with_capacity(d + m * d);
            out.extend_from_slice(center_phi.data());
            out.extend_from_slice(psi_rows.data());
            Tensor::new(vec![d + m * d], out)
        }
    }
}

/// Weights of the two-layer alpha map.
pub struct AlphaMapWeights<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

/// Straight-line alpha map: relu(delta W1 + b1) W2 + b2, reshaped to one
/// weight row of d/s channels per footprint position.
pub fn compute_alpha(
    delta: &Tensor,
    config: &SABlockConfig,
    weights: &AlphaMapWeights,
) -> Result<Tensor> {
    if delta.shape() != [config.delta_len()] {
        return Err(Error::Shape {
            op: "compute_alpha",
            detail: format!(
                "delta {:?} vs expected [{}]",
                delta.shape(),
                config.delta_len()
            ),
        });
    }
    let (m, g) = (config.footprint_len(), config.group_channels());
    let hidden = config.alpha_hidden;
    let mut h = vec![0.0; hidden];
    for (j, hv) in h.iter_mut().enumerate() {
        let mut acc = weights.b1.data()[j];
        for (i, &x) in delta.data().iter().enumerate() {
            acc += x * weights.w1.data()[i * hidden + j];
        }
        *hv = acc.max(0.0);
    }
    let out_len = m * g;
    let mut a = vec![0.0; out_len];
    for (j, av) in a.iter_mut().enumerate() {
        let mut acc = weights.b2.data()[j];
        for (i, &x) in h.iter().enumerate() {
            acc += x * weights.w2.data()[i * out_len + j];
        }
        *av = acc;
    }
    if config.alpha_softmax {
        // Normalize over positions for each channel column.
        for col in 0..g {
            let mx = (0..m).map(|j| a[j * g + col]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (a[j * g + col] - mx).exp();
                a[j * g + col] = e;
                sum += e;
            }
            for j in 0..m {
                a[j * g + col] /= sum;
            }
        }
    }
    Tensor::new(vec![m, g], a)
}

// ── the block ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SABlock {
    pub config: SABlockConfig,
    pub prefix: String,
    phi: LinearLayer,
    psi: LinearLayer,
    beta: LinearLayer,
    alpha1: LinearLayer,
    alpha2: LinearLayer,
    norm: BatchNormLayer,
    expand: LinearLayer,
}

impl SABlock {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: SABlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.channels, config.reduced_dim);
        let phi = LinearLayer::init(store, &format!("{prefix}.phi"), c, d, rng)?;
        let psi = LinearLayer::init(store, &format!("{prefix}.psi"), c, d, rng)?;
        let beta = LinearLayer::init(store, &format!("{prefix}.beta"), c, d, rng)?;
        let alpha1 = LinearLayer::init(
            store,
            &format!("{prefix}.alpha1"),
            config.delta_len(),
            config.alpha_hidden,
            rng,
        )?;
        let alpha2 = LinearLayer::init(
            store,
            &format!("{prefix}.alpha2"),
            config.alpha_hidden,
            config.alpha_len(),
            rng,
        )?;
        // Start near uniform attention so the block begins as footprint
        // average pooling of beta features.
        let m = config.footprint_len() as f64;
        store
            .get_mut(&format!("{prefix}.alpha2.b"))?
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 1.0 / m);
        let norm = BatchNormLayer::init(store, &format!("{prefix}.norm"), d)?;
        let expand = LinearLayer::init(store, &format!("{prefix}.expand"), d, c, rng)?;
        Ok(SABlock {
            config,
            prefix: prefix.to_string(),
            phi,
            psi,
            beta,
            alpha1,
            alpha2,
            norm,
            expand,
        })
    }

    /// Rebuild the layer handles for an existing store (e.g. after loading).
    pub fn describe(prefix: &str, config: SABlockConfig) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.channels, config.reduced_dim);
        Ok(SABlock {
            phi: LinearLayer::describe(&format!("{prefix}.phi"), c, d),
            psi: LinearLayer::describe(&format!("{prefix}.psi"), c, d),
            beta: LinearLayer::describe(&format!("{prefix}.beta"), c, d),
            alpha1: LinearLayer::describe(
                &format!("{prefix}.alpha1"),
                config.delta_len(),
                config.alpha_hidden,
            ),
            alpha2: LinearLayer::describe(
                &format!("{prefix}.alpha2"),
                config.alpha_hidden,
                config.alpha_len(),
            ),
            norm: BatchNormLayer { name: format!("{prefix}.norm"), channels: d, eps: 1e-5 },
            expand: LinearLayer::describe(&format!("{prefix}.expand"), d, c),
            prefix: prefix.to_string(),
            config,
        })
    }

    /// Gather a (HW*m, d) tensor of mapped features by footprint index,
    /// using a sentinel row holding the map of the zero feature vector so
    /// padded positions contribute map(0) (the bias).
    fn gather_mapped(
        &self,
        fwd: &mut Forward,
        mapped: Var,
        layer: &LinearLayer,
        indices: &Arc<Vec<usize>>,
        hw: usize,
    ) -> Result<Var> {
        let c = self.config.channels;
        let zero_in = fwd.input(Tensor::zeros(&[1, c]));
        let zero_row = layer.forward(fwd, zero_in)?;
        let with_sentinel = fwd.tape.concat(&[mapped, zero_row], 0)?;
        let sentinel = hw;
        let idx: Vec<usize> = indices
            .iter()
            .map(|&i| if i == GATHER_ZERO { sentinel } else { i })
            .collect();
        fwd.tape.gather_rows(with_sentinel, Arc::new(idx))
    }

    /// Eq. (1) aggregation for every location: returns (HW, d) pre-norm.
    pub fn forward_aggregate(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let s = fwd.tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.config.channels {
            return Err(Error::Shape {
                op: "sa_block",
                detail: format!("input {s:?} vs channels {}", self.config.channels),
            });
        }
        let (h, w) = (s[0], s[1]);
        let hw = h * w;
        let (m, d) = (self.config.footprint_len(), self.config.reduced_dim);
        let indices = Arc::new(footprint_gather_indices(h, w, self.config.footprint_k));

        let x_flat = fwd.tape.reshape(x, &[hw, self.config.channels])?;
        let phi = self.phi.forward(fwd, x_flat)?;
        let psi = self.psi.forward(fwd, x_flat)?;
        let beta = self.beta.forward(fwd, x_flat)?;

        let psi_g3 = {
            let g = self.gather_mapped(fwd, psi, &self.psi, &indices, hw)?;
            fwd.tape.reshape(g, &[hw, m, d])?
        };
        let beta_g3 = {
            let g = self.gather_mapped(fwd, beta, &self.beta, &indices, hw)?;
            fwd.tape.reshape(g, &[hw, m, d])?
        };

        let delta = match self.config.variant {
            DeltaVariant::Concat => {
                let psi_flat = fwd.tape.reshape(psi_g3, &[hw, m * d])?;
                fwd.tape.concat(&[phi, psi_flat], 1)?
            }
            DeltaVariant::Star => {
                let phi_c = fwd.tape.reshape(phi, &[hw, 1, d])?;
                let phi_b = fwd.tape.broadcast_axis(phi_c, 1, m)?;
                let prod = fwd.tape.hadamard(phi_b, psi_g3)?;
                fwd.tape.sum_axis(prod, 2)?
            }
            DeltaVariant::Clique => {
                let phi_g3 = {
                    let g = self.gather_mapped(fwd, phi, &self.phi, &indices, hw)?;
                    fwd.tape.reshape(g, &[hw, m, d])?
                };
                let phi_j = fwd.tape.reshape(phi_g3, &[hw, m, 1, d])?;
                let phi_jb = fwd.tape.broadcast_axis(phi_j, 2, m)?;
                let psi_k = fwd.tape.reshape(psi_g3, &[hw, 1, m, d])?;
                let psi_kb = fwd.tape.broadcast_axis(psi_k, 1, m)?;
                let prod = fwd.tape.hadamard(phi_jb, psi_kb)?;
                let summed = fwd.tape.sum_axis(prod, 3)?;
                fwd.tape.reshape(summed, &[hw, m * m])?
            }
        };

        let hidden = self.alpha1.forward(fwd, delta)?;
        let hidden = fwd.tape.relu(hidden)?;
        let alpha = self.alpha2.forward(fwd, hidden)?;
        let g = self.config.group_channels();
        let alpha = fwd.tape.reshape(alpha, &[hw, m, g])?;
        let alpha = if self.config.alpha_softmax {
            fwd.tape.softmax(alpha, 1)?
        } else {
            alpha
        };
        let alpha_full = if self.config.share_factor > 1 {
            let a4 = fwd.tape.reshape(alpha, &[hw, m, g, 1])?;
            let ab = fwd.tape.broadcast_axis(a4, 3, self.config.share_factor)?;
            fwd.tape.reshape(ab, &[hw, m, d])?
        } else {
            alpha
        };

        let weighted = fwd.tape.hadamard(alpha_full, beta_g3)?;
        fwd.tape.sum_axis(weighted, 1)
    }

    /// Full block: aggregation, norm, nonlinearity, expansion to C, residual.
    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let s = fwd.tape.shape(x).to_vec();
        let (h, w, c) = (s[0], s[1], s[2]);
        let agg = self.forward_aggregate(fwd, x)?;
        let normed = self.norm.forward(fwd, agg)?;
        let activated = fwd.tape.relu(normed)?;
        let expanded = self.expand.forward(fwd, activated)?;
        let out = if self.config.residual {
            let x_flat = fwd.tape.reshape(x, &[h * w, c])?;
            fwd.tape.add(expanded, x_flat)?
        } else {
            expanded
        };
        fwd.tape.reshape(out, &[h, w, c])
    }

    /// Convenience wrapper running the block on a plain tensor.
    pub fn forward_tensor(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut fwd = Forward::new(store, mode);
        let xv = fwd.input(x.clone());
        let y = self.forward(&mut fwd, xv)?;
        Ok(fwd.tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn footprint_on_single_pixel_is_all_padding() {
        let x = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
        let fp = extract_footprint(&x, (0, 0), 3).unwrap();
        assert_eq!(fp.patch.shape(), &[9, 2]);
        for j in 0..9 {
            if j == Footprint::center_position(3) {
                assert_eq!(fp.indices[j], Some((0, 0)));
                assert_eq!(&fp.patch.data()[j * 2..j * 2 + 2], &[3.0, 4.0]);
            } else {
                assert_eq!(fp.indices[j], None);
                assert_eq!(&fp.patch.data()[j * 2..j * 2 + 2], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn footprint_interior_raster_order() {
        // 5x5 image with feature = flat index.
        let mut data = Vec::new();
        for i in 0..25 {
            data.push(i as f64);
        }
        let x = Tensor::new(vec![5, 5, 1], data).unwrap();
        let fp = extract_footprint(&x, (2, 2), 3).unwrap();
        let expect = [6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0];
        assert_eq!(fp.patch.data(), &expect);
    }

    #[test]
    fn footprint_k1_is_identity_window() {
        let x = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let fp = extract_footprint(&x, (1, 0), 1).unwrap();
        assert_eq!(fp.patch.shape(), &[1, 2]);
        assert_eq!(fp.patch.data(), &[4.0, 5.0]);
    }

    #[test]
    fn footprint_rejects_even_k() {
        let x = Tensor::zeros(&[3, 3, 1]);
        assert!(extract_footprint(&x, (1, 1), 2).is_err());
    }

    #[test]
    fn concat_delta_length() {
        let phi = Tensor::zeros(&[9, 4]);
        let psi = Tensor::zeros(&[9, 4]);
        let center = Tensor::zeros(&[4]);
        let d = compute_delta(DeltaVariant::Concat, &phi, &psi, &center).unwrap();
        assert_eq!(d.shape(), &[40]);
    }

    #[test]
    fn star_delta_orthogonal_footprint() {
        // center phi = e0; psi rows orthogonal to e0 except the self row.
        let psi = Tensor::new(vec![3, 2], vec![0.0, 1.0, 1.0, 0.0, 0.0, 2.0]).unwrap();
        let phi = Tensor::zeros(&[3, 2]);
        let center = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let d = compute_delta(DeltaVariant::Star, &phi, &psi, &center).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn clique_delta_hand_example() {
        let phi = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let psi = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let center = Tensor::zeros(&[2]);
        let d = compute_delta(DeltaVariant::Clique, &phi, &psi, &center).unwrap();
        assert_eq!(d.data(), &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn alpha_zero_map_gives_zero() {
        let mut cfg = SABlockConfig::new(8, 4, DeltaVariant::Concat).unwrap();
        cfg.alpha_hidden = 6;
        let w1 = Tensor::zeros(&[cfg.delta_len(), 6]);
        let b1 = Tensor::zeros(&[6]);
        let w2 = Tensor::zeros(&[6, cfg.alpha_len()]);
        let b2 = Tensor::zeros(&[cfg.alpha_len()]);
        let delta = Tensor::zeros(&[cfg.delta_len()]);
        let a = compute_alpha(&delta, &cfg, &AlphaMapWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 })
            .unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.shape(), &[9, 1]);
    }

    #[test]
    fn zero_input_zero_bias_residual_gives_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SABlockConfig::new(4, 2, DeltaVariant::Concat).unwrap();
        let block = SABlock::init(&mut store, "blk", cfg, &mut rng).unwrap();
        // Zero every bias-like parameter so zeros propagate.
        for name in ["blk.phi.b", "blk.psi.b", "blk.beta.b", "blk.alpha1.b", "blk.alpha2.b", "blk.norm.beta", "blk.expand.b"] {
            store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::zeros(&[3, 3, 4]);
        let y = block.forward_tensor(&store, &x, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "{:?}", &y.data()[..8]);
    }

    #[test]
    fn single_pixel_input_matches_direct_two_stream() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = SABlockConfig::new(4, 2, DeltaVariant::Concat).unwrap();
        let block = SABlock::init(&mut store, "b", cfg.clone(), &mut rng).unwrap();
        let x = Tensor::new(vec![1, 1, 4], vec![0.3, -0.7, 1.2, 0.5]).unwrap();
        let y = block.forward_tensor(&store, &x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);

        // Straight-line single-position computation via the reference ops.
        let fp = extract_footprint(&x, (0, 0), 3).unwrap();
        let lin = |rows: &Tensor, w: &Tensor, b: &Tensor| -> Tensor {
            let (m, c) = (rows.shape()[0], rows.shape()[1]);
            let d = w.shape()[1];
            let mut out = vec![0.0; m * d];
            for r in 0..m {
                for o in 0..d {
                    let mut acc = b.data()[o];
                    for i in 0..c {
                        acc += rows.data()[r * c + i] * w.data()[i * d + o];
                    }
                    out[r * d + o] = acc;
                }
            }
            Tensor::new(vec![m, d], out).unwrap()
        };
        let phi_rows = lin(&fp.patch, store.get("b.phi.w").unwrap(), store.get("b.phi.b").unwrap());
        let psi_rows = lin(&fp.patch, store.get("b.psi.w").unwrap(), store.get("b.psi.b").unwrap());
        let beta_rows = lin(&fp.patch, store.get("b.beta.w").unwrap(), store.get("b.beta.b").unwrap());
        let cp = Footprint::center_position(3);
        let center_phi =
            Tensor::new(vec![2], phi_rows.data()[cp * 2..cp * 2 + 2].to_vec()).unwrap();
        let delta = compute_delta(DeltaVariant::Concat, &phi_rows, &psi_rows, &center_phi).unwrap();
        let alpha = compute_alpha(
            &delta,
            &cfg,
            &AlphaMapWeights {
                w1: store.get("b.alpha1.w").unwrap(),
                b1: store.get("b.alpha1.b").unwrap(),
                w2: store.get("b.alpha2.w").unwrap(),
                b2: store.get("b.alpha2.b").unwrap(),
            },
        )
        .unwrap();
        // Aggregate, eval-mode BN, relu, expand, residual.
        let mut agg = vec![0.0; 2];
        for j in 0..9 {
            for ch in 0..2 {
                agg[ch] += alpha.data()[j] * beta_rows.data()[j * 2 + ch];
            }
        }
        let gamma = store.get("b.norm.gamma").unwrap().data();
        let betap = store.get("b.norm.beta").unwrap().data();
        let rm = store.get("b.norm.running_mean").unwrap().data();
        let rv = store.get("b.norm.running_var").unwrap().data();
        let mut act = vec![0.0; 2];
        for ch in 0..2 {
            let xhat = (agg[ch] - rm[ch]) / (rv[ch] + 1e-5).sqrt();
            act[ch] = (gamma[ch] * xhat + betap[ch]).max(0.0);
        }
        let ew = store.get("b.expand.w").unwrap().data();
        let eb = store.get("b.expand.b").unwrap().data();
        for o in 0..4 {
            let mut acc = eb[o];
            for i in 0..2 {
                acc += act[i] * ew[i * 4 + o];
            }
            acc += x.data()[o];
            assert!(
                (acc - y.data()[o]).abs() < 1e-12,
                "channel {o}: {acc} vs {}",
                y.data()[o]
            );
        }
    }
}
