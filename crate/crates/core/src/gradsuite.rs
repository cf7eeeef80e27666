//! The full gradient-check suite: every primitive, the self-attention block
//! in all three delta variants, the transition layer, the recurrent cell and
//! a two-stage micro T-Net, each compared against central differences over
//! many seeds.
//!
//! ReLU and max-pooling kinks make a single finite-difference step
//! unreliable: a perturbation can push a pre-activation across zero and
//! poison that element's estimate. Elements failing at the default step are
//! re-estimated at smaller steps (the oracle's h -> 0 limit); a genuine
//! backward bug disagrees at every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{DeltaVariant, SABlock, SABlockConfig};
use crate::error::Result;
use crate::fpv::{FNet, FNetConfig, LstmCell};
use crate::gradcheck::GradCheckItem;
use crate::nn::{Forward, Mode, ParamStore};
use crate::tape::{BnMode, Var, GATHER_ZERO};
use crate::tensor::Tensor;
use crate::tnet::{TNet, TNetConfig, Transition};

pub struct SuiteConfig {
    pub seeds: u32,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seeds: 20, tolerance: 1e-4 }
    }
}

/// Finite-difference steps tried per element, largest first.
const STEP_LADDER: [f64; 3] = [1e-5, 1e-6, 2.5e-7];

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-3)
}

type RunFn = Box<dyn Fn(&mut Forward, &[Var]) -> Result<Var>>;

/// One checkable program: a parameter store, extra input tensors, and the
/// forward program producing a scalar loss.
pub struct GradCase {
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub mode: Mode,
    pub run: RunFn,
}

impl GradCase {
    fn loss(&self, store: &ParamStore, inputs: &[Tensor]) -> Result<f64> {
        let mut fwd = Forward::new(store, self.mode);
        let vars: Vec<Var> = inputs.iter().map(|t| fwd.input(t.clone())).collect();
        let out = (self.run)(&mut fwd, &vars)?;
        fwd.tape.value(out).as_scalar()
    }

    /// Analytic gradients: trainable store params (in store order, by name)
    /// and each extra input.
    fn analytic(&self) -> Result<(Vec<(String, Vec<f64>)>, Vec<Vec<f64>>)> {
        let mut fwd = Forward::new(&self.store, self.mode);
        let vars: Vec<Var> = inputs_as_grad_leaves(&mut fwd, &self.inputs);
        let out = (self.run)(&mut fwd, &vars)?;
        fwd.tape.backward(out)?;
        let param_grads = fwd.grads();
        let input_grads = vars
            .iter()
            .zip(&self.inputs)
            .map(|(v, t)| {
                fwd.tape
                    .leaf_grad(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect();
        Ok((param_grads, input_grads))
    }

    /// Worst relative error across every parameter and input element.
    pub fn max_error(&self, tolerance: f64) -> Result<f64> {
        let (param_grads, input_grads) = self.analytic()?;
        let mut worst = 0.0_f64;

        // Parameters: perturb a working copy of the store in place.
        let mut store = self.store.clone();
        for (name, analytic) in &param_grads {
            for k in 0..analytic.len() {
                let a = analytic[k];
                let mut best = f64::INFINITY;
                for &h in &STEP_LADDER {
                    let orig = store.get(name)?.data()[k];
                    store.get_mut(name)?.data_mut()[k] = orig + h;
                    let fp = self.loss(&store, &self.inputs)?;
                    store.get_mut(name)?.data_mut()[k] = orig - h;
                    let fm = self.loss(&store, &self.inputs)?;
                    store.get_mut(name)?.data_mut()[k] = orig;
                    best = best.min(rel_err(a, (fp - fm) / (2.0 * h)));
                    if best <= tolerance {
                        break;
                    }
                }
                worst = worst.max(best);
            }
        }

        // Inputs likewise.
        let mut inputs = self.inputs.clone();
        for (idx, analytic) in input_grads.iter().enumerate() {
            for k in 0..analytic.len() {
                let a = analytic[k];
                let mut best = f64::INFINITY;
                for &h in &STEP_LADDER {
                    let orig = inputs[idx].data()[k];
                    inputs[idx].data_mut()[k] = orig + h;
                    let fp = self.loss(&self.store, &inputs)?;
                    inputs[idx].data_mut()[k] = orig - h;
                    let fm = self.loss(&self.store, &inputs)?;
                    inputs[idx].data_mut()[k] = orig;
                    best = best.min(rel_err(a, (fp - fm) / (2.0 * h)));
                    if best <= tolerance {
                        break;
                    }
                }
                worst = worst.max(best);
            }
        }
        Ok(worst)
    }
}

fn inputs_as_grad_leaves(fwd: &mut Forward, inputs: &[Tensor]) -> Vec<Var> {
    inputs
        .iter()
        .map(|t| fwd.tape.leaf(t.clone().requires_grad(true)))
        .collect()
}

/// Reduce any output to a scalar with fixed random coefficients.
fn weighted_sum(fwd: &mut Forward, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let len = fwd.tape.value(x).len();
    let coef = Tensor::uniform(&[len], -1.0, 1.0, rng);
    let flat = fwd.tape.reshape(x, &[len])?;
    let c = fwd.input(coef);
    let prod = fwd.tape.hadamard(flat, c)?;
    fwd.tape.sum_axis(prod, 0)
}

fn rng_for(name: &str, seed: u64) -> ChaCha8Rng {
    let mut h = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01B3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn case_runner(
    name: &str,
    cfg: &SuiteConfig,
    build: impl Fn(u64) -> Result<GradCase>,
) -> Result<GradCheckItem> {
    let mut worst = 0.0_f64;
    for seed in 0..cfg.seeds {
        let case = build(seed as u64)?;
        worst = worst.max(case.max_error(cfg.tolerance)?);
    }
    Ok(GradCheckItem {
        name: name.to_string(),
        seeds: cfg.seeds,
        tolerance: cfg.tolerance,
        max_rel_error: worst,
        passed: worst <= cfg.tolerance,
    })
}

// ── case builders ────────────────────────────────────────────────────

fn primitive_case(name: &'static str, seed: u64) -> Result<GradCase> {
    let mut rng = rng_for(name, seed);
    let t = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, -1.0, 1.0, rng);
    let coef_seed = rng.gen::<u64>();
    let make = |inputs: Vec<Tensor>,
                f: Box<dyn Fn(&mut Forward, &[Var]) -> Result<Var>>|
     -> GradCase {
        GradCase {
            store: ParamStore::new(),
            inputs,
            mode: Mode::Eval,
            run: Box::new(move |fwd, vars| {
                let out = f(fwd, vars)?;
                let mut crng = ChaCha8Rng::seed_from_u64(coef_seed);
                weighted_sum(fwd, out, &mut crng)
            }),
        }
    };
    Ok(match name {
        "primitive/matmul" => make(
            vec![t(&[3, 4], &mut rng), t(&[4, 2], &mut rng)],
            Box::new(|fwd, v| fwd.tape.matmul(v[0], v[1])),
        ),
        "primitive/conv2d_s1p1" => make(
            vec![t(&[5, 6, 3], &mut rng), t(&[3, 3, 3, 4], &mut rng), t(&[4], &mut rng)],
            Box::new(|fwd, v| fwd.tape.conv2d(v[0], v[1], v[2], 1, 1)),
        ),
        "primitive/conv2d_s2p0" => make(
            vec![t(&[7, 5, 2], &mut rng), t(&[3, 3, 2, 3], &mut rng), t(&[3], &mut rng)],
            Box::new(|fwd, v| fwd.tape.conv2d(v[0], v[1], v[2], 2, 0)),
        ),
        "primitive/linear" => make(
            vec![t(&[5, 4], &mut rng), t(&[4, 6], &mut rng), t(&[6], &mut rng)],
            Box::new(|fwd, v| fwd.tape.linear(v[0], v[1], v[2])),
        ),
        "primitive/relu" => make(
            vec![t(&[4, 5], &mut rng)],
            Box::new(|fwd, v| fwd.tape.relu(v[0])),
        ),
        "primitive/sigmoid" => make(
            vec![t(&[4, 5], &mut rng)],
            Box::new(|fwd, v| fwd.tape.sigmoid(v[0])),
        ),
        "primitive/tanh" => make(
            vec![t(&[4, 5], &mut rng)],
            Box::new(|fwd, v| fwd.tape.tanh(v[0])),
        ),
        "primitive/batch_norm_train" => make(
            vec![t(&[6, 3], &mut rng), t(&[3], &mut rng), t(&[3], &mut rng)],
            Box::new(|fwd, v| fwd.tape.batch_norm(v[0], v[1], v[2], 1e-5, &BnMode::Train)),
        ),
        "primitive/batch_norm_eval" => {
            let mean: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..2.0)).collect();
            make(
                vec![t(&[6, 3], &mut rng), t(&[3], &mut rng), t(&[3], &mut rng)],
                Box::new(move |fwd, v| {
                    let mode = BnMode::Eval { mean: mean.clone(), var: var.clone() };
                    fwd.tape.batch_norm(v[0], v[1], v[2], 1e-5, &mode)
                }),
            )
        }
        "primitive/maxpool2x2_stride2" => make(
            vec![t(&[4, 6, 2], &mut rng)],
            Box::new(|fwd, v| fwd.tape.maxpool2x2(v[0])),
        ),
        "primitive/softmax" => make(
            vec![t(&[3, 5], &mut rng)],
            Box::new(|fwd, v| fwd.tape.softmax(v[0], 1)),
        ),
        "primitive/hadamard" => make(
            vec![t(&[3, 4], &mut rng), t(&[3, 4], &mut rng)],
            Box::new(|fwd, v| fwd.tape.hadamard(v[0], v[1])),
        ),
        "primitive/add" => make(
            vec![t(&[3, 4], &mut rng), t(&[3, 4], &mut rng)],
            Box::new(|fwd, v| fwd.tape.add(v[0], v[1])),
        ),
        "primitive/concat" => make(
            vec![t(&[2, 3], &mut rng), t(&[2, 2], &mut rng), t(&[2, 4], &mut rng)],
            Box::new(|fwd, v| fwd.tape.concat(v, 1)),
        ),
        "composite/softmax_cross_entropy" => {
            let target = (seed % 7) as usize;
            GradCase {
                store: ParamStore::new(),
                inputs: vec![t(&[7], &mut rng)],
                mode: Mode::Eval,
                run: Box::new(move |fwd, v| fwd.tape.cross_entropy_logits(v[0], target)),
            }
        }
        "composite/internal_ops_chain" => make(
            vec![t(&[4, 3], &mut rng), t(&[1, 5], &mut rng)],
            Box::new(|fwd, v| {
                let idx = std::sync::Arc::new(vec![2usize, GATHER_ZERO, 0, 1, 3, 1]);
                let g = fwd.tape.gather_rows(v[0], idx)?;
                let r = fwd.tape.reshape(g, &[2, 9])?;
                let s = fwd.tape.slice_last(r, 2, 5)?;
                let sc = fwd.tape.scale(s, 1.7)?;
                let b = fwd.tape.broadcast_axis(v[1], 0, 2)?;
                let m = fwd.tape.hadamard(sc, b)?;
                fwd.tape.sum_axis(m, 1)
            }),
        ),
        other => panic!("unknown primitive case {other}"),
    })
}

fn sa_block_case(variant: DeltaVariant, k: usize, seed: u64) -> Result<GradCase> {
    let mut rng = rng_for("sa_block", seed ^ (k as u64) << 8);
    let channels = 4;
    let cfg = SABlockConfig::new(channels, 2, variant)?.with_footprint_k(k)?;
    let mut store = ParamStore::new();
    let block = SABlock::init(&mut store, "blk", cfg, &mut rng)?;
    let x = Tensor::uniform(&[4, 4, channels], -1.0, 1.0, &mut rng);
    let coef_seed = rng.gen::<u64>();
    Ok(GradCase {
        store,
        inputs: vec![x],
        mode: Mode::Train,
        run: Box::new(move |fwd, v| {
            let y = block.forward(fwd, v[0])?;
            let mut crng = ChaCha8Rng::seed_from_u64(coef_seed);
            weighted_sum(fwd, y, &mut crng)
        }),
    })
}

fn transition_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for("transition", seed);
    let mut store = ParamStore::new();
    let trans = Transition::init(&mut store, "t", 3, 5, &mut rng)?;
    let x = Tensor::uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
    let coef_seed = rng.gen::<u64>();
    Ok(GradCase {
        store,
        inputs: vec![x],
        mode: Mode::Train,
        run: Box::new(move |fwd, v| {
            let y = trans.forward(fwd, v[0])?;
            let mut crng = ChaCha8Rng::seed_from_u64(coef_seed);
            weighted_sum(fwd, y, &mut crng)
        }),
    })
}

fn recurrent_cell_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for("lstm", seed);
    let mut store = ParamStore::new();
    let cell = LstmCell::init(&mut store, "cell", 6, 5, &mut rng)?;
    let x = Tensor::uniform(&[1, 6], -1.0, 1.0, &mut rng);
    let h = Tensor::uniform(&[1, 5], -1.0, 1.0, &mut rng);
    let c = Tensor::uniform(&[1, 5], -1.0, 1.0, &mut rng);
    let coef_seed = rng.gen::<u64>();
    Ok(GradCase {
        store,
        inputs: vec![x, h, c],
        mode: Mode::Eval,
        run: Box::new(move |fwd, v| {
            let (h_next, c_next) = cell.step(fwd, v[0], v[1], v[2])?;
            let both = fwd.tape.concat(&[h_next, c_next], 1)?;
            let mut crng = ChaCha8Rng::seed_from_u64(coef_seed);
            weighted_sum(fwd, both, &mut crng)
        }),
    })
}

fn micro_tnet_case(seed: u64) -> Result<GradCase> {
    let mut cfg = TNetConfig::micro(seed);
    cfg.seed = seed.wrapping_mul(31).wrapping_add(17);
    let mut store = ParamStore::new();
    let model = TNet::init(&mut store, cfg)?;
    let mut rng = rng_for("micro_tnet", seed);
    let img = Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng);
    let target = (seed % 7) as usize;
    Ok(GradCase {
        store,
        inputs: vec![img],
        mode: Mode::Train,
        run: Box::new(move |fwd, v| {
            let logits = model.forward(fwd, v[0])?;
            fwd.tape.cross_entropy_logits(logits, target)
        }),
    })
}

fn extractor_recurrence_case(seed: u64) -> Result<GradCase> {
    let cfg = FNetConfig {
        input_size: (8, 8),
        conv_channels: vec![2, 3],
        feature_dim: 4,
        hidden_dim: 3,
        num_classes: 3,
        use_flow: true,
        flow: crate::flow::FlowParams { levels: 1, block: 3, search_radius: 1 },
        seed: seed.wrapping_mul(7).wrapping_add(3),
    };
    let mut store = ParamStore::new();
    let model = FNet::init(&mut store, cfg)?;
    let mut rng = rng_for("fpv_micro", seed);
    let steps: Vec<Tensor> = (0..2)
        .map(|_| Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng))
        .collect();
    let target = (seed % 3) as usize;
    Ok(GradCase {
        store,
        inputs: vec![],
        mode: Mode::Train,
        run: Box::new(move |fwd, _| {
            let logits = model.forward_sequence(fwd, &steps)?;
            fwd.tape.cross_entropy_logits(logits, target)
        }),
    })
}

const PRIMITIVE_CASES: [&str; 16] = [
    "primitive/matmul",
    "primitive/conv2d_s1p1",
    "primitive/conv2d_s2p0",
    "primitive/linear",
    "primitive/relu",
    "primitive/sigmoid",
    "primitive/tanh",
    "primitive/batch_norm_train",
    "primitive/batch_norm_eval",
    "primitive/maxpool2x2_stride2",
    "primitive/softmax",
    "primitive/hadamard",
    "primitive/add",
    "primitive/concat",
    "composite/softmax_cross_entropy",
    "composite/internal_ops_chain",
];

/// Run everything. Each returned item carries its worst relative error.
pub fn run_full_suite(cfg: &SuiteConfig) -> Result<Vec<GradCheckItem>> {
    let mut items = Vec::new();
    for name in PRIMITIVE_CASES {
        items.push(case_runner(name, cfg, |seed| primitive_case(name, seed))?);
    }
    for variant in [DeltaVariant::Star, DeltaVariant::Clique, DeltaVariant::Concat] {
        for k in [1usize, 3] {
            let name = format!("attention/sa_block_{variant:?}_k{k}").to_lowercase();
            items.push(case_runner(&name, cfg, |seed| sa_block_case(variant, k, seed))?);
        }
    }
    items.push(case_runner("tnet/transition", cfg, transition_case)?);
    items.push(case_runner("fpv/recurrent_cell", cfg, recurrent_cell_case)?);
    items.push(case_runner("fpv/extractor_recurrence", cfg, extractor_recurrence_case)?);
    items.push(case_runner("tnet/micro_2stage", cfg, micro_tnet_case)?);
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_primitives_pass() {
        let cfg = SuiteConfig { seeds: 3, tolerance: 1e-4 };
        for name in ["primitive/matmul", "primitive/relu", "primitive/batch_norm_train"] {
            let item = case_runner(name, &cfg, |seed| primitive_case(name, seed)).unwrap();
            assert!(item.passed, "{}", item.line());
        }
    }

    #[test]
    fn quick_sa_block_concat_passes() {
        let cfg = SuiteConfig { seeds: 2, tolerance: 1e-4 };
        let item = case_runner("attention/sa_block_concat_k3", &cfg, |seed| {
            sa_block_case(DeltaVariant::Concat, 3, seed)
        })
        .unwrap();
        assert!(item.passed, "{}", item.line());
    }

    #[test]
    fn quick_recurrent_cell_passes() {
        let cfg = SuiteConfig { seeds: 3, tolerance: 1e-4 };
        let item = case_runner("fpv/recurrent_cell", &cfg, recurrent_cell_case).unwrap();
        assert!(item.passed, "{}", item.line());
    }
}
