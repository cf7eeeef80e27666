//! Named parameter store, layer wrappers and SGD.
//!
//! Models keep their weights in a `ParamStore` keyed by dotted names
//! ("tnet.stage2.block0.phi.w"). A `Forward` context registers parameters as
//! tape leaves on first use, so independent samples can run in parallel over
//! disjoint tapes while sharing the store read-only.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::{BnMode, Tape, Var};
use crate::tensor::Tensor;

/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArg(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::InvalidArg(format!("unknown parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iterate in insertion order (the checkpoint and gradient order).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(move |n| (n.as_str(), &self.tensors[self.index[n]]))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, t)| t.wants_grad())
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-sample forward context: one tape plus lazily registered parameters.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
    pub mode: Mode,
    pub bn_observed: Vec<BnObservation>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            vars: HashMap::new(),
            mode,
            bn_observed: Vec::new(),
        }
    }

    /// Register (or reuse) a store parameter as a tape leaf.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Collect leaf gradients in store insertion order (deterministic).
    pub fn grads(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, _) in self.store.iter() {
            if let Some(&v) = self.vars.get(name) {
                if let Some(g) = self.tape.leaf_grad(v) {
                    out.push((name.to_string(), g.to_vec()));
                }
            }
        }
        out
    }
}

// ── layers ───────────────────────────────────────────────────────────

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        store.insert(
            &format!("{name}.w"),
            Tensor::randn(&[in_dim, out_dim], he_std(in_dim), rng).requires_grad(true),
        )?;
        store.insert(
            &format!("{name}.b"),
            Tensor::zeros(&[out_dim]).requires_grad(true),
        )?;
        Ok(LinearLayer { name: name.to_string(), in_dim, out_dim })
    }

    pub fn describe(name: &str, in_dim: usize, out_dim: usize) -> Self {
        LinearLayer { name: name.to_string(), in_dim, out_dim }
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let w = fwd.param(&format!("{}.w", self.name))?;
        let b = fwd.param(&format!("{}.b", self.name))?;
        fwd.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_ch;
        store.insert(
            &format!("{name}.w"),
            Tensor::randn(&[kernel, kernel, in_ch, out_ch], he_std(fan_in), rng)
                .requires_grad(true),
        )?;
        store.insert(
            &format!("{name}.b"),
            Tensor::zeros(&[out_ch]).requires_grad(true),
        )?;
        Ok(Conv2dLayer { name: name.to_string(), kernel, in_ch, out_ch, stride, pad })
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let w = fwd.param(&format!("{}.w", self.name))?;
        let b = fwd.param(&format!("{}.b", self.name))?;
        fwd.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        store.insert(
            &format!("{name}.gamma"),
            Tensor::full(&[channels], 1.0).requires_grad(true),
        )?;
        store.insert(
            &format!("{name}.beta"),
            Tensor::zeros(&[channels]).requires_grad(true),
        )?;
        store.insert(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
        store.insert(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0))?;
        Ok(BatchNormLayer { name: name.to_string(), channels, eps: 1e-5 })
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let gamma = fwd.param(&format!("{}.gamma", self.name))?;
        let beta = fwd.param(&format!("{}.beta", self.name))?;
        match fwd.mode {
            Mode::Train => {
                let y = fwd.tape.batch_norm(x, gamma, beta, self.eps, &BnMode::Train)?;
                let (mean, var) = fwd.tape.bn_saved_stats(y).expect("train bn saves stats");
                fwd.bn_observed.push(BnObservation {
                    name: self.name.clone(),
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = fwd.store().get(&format!("{}.running_mean", self.name))?.data().to_vec();
                let var = fwd.store().get(&format!("{}.running_var", self.name))?.data().to_vec();
                fwd.tape.batch_norm(x, gamma, beta, self.eps, &BnMode::Eval { mean, var })
            }
        }
    }
}

/// Fold batch-average statistics into the running buffers, sample order fixed.
pub fn apply_bn_updates(
    store: &mut ParamStore,
    per_sample: &[Vec<BnObservation>],
    momentum: f64,
) -> Result<()> {
    if per_sample.is_empty() {
        return Ok(());
    }
    // name -> (sum_mean, sum_var, count), first-seen order
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, (Vec<f64>, Vec<f64>, usize)> = HashMap::new();
    for obs_list in per_sample {
        for obs in obs_list {
            let entry = acc.entry(obs.name.clone()).or_insert_with(|| {
                order.push(obs.name.clone());
                (vec![0.0; obs.mean.len()], vec![0.0; obs.var.len()], 0)
            });
            for (a, &m) in entry.0.iter_mut().zip(&obs.mean) {
                *a += m;
            }
            for (a, &v) in entry.1.iter_mut().zip(&obs.var) {
                *a += v;
            }
            entry.2 += 1;
        }
    }
    for name in order {
        let (sum_m, sum_v, count) = &acc[&name];
        let k = *count as f64;
        let rm = store.get_mut(&format!("{name}.running_mean"))?;
        for (r, &s) in rm.data_mut().iter_mut().zip(sum_m) {
            *r = (1.0 - momentum) * *r + momentum * (s / k);
        }
        let rv = store.get_mut(&format!("{name}.running_var"))?;
        for (r, &s) in rv.data_mut().iter_mut().zip(sum_v) {
            *r = (1.0 - momentum) * *r + momentum * (s / k);
        }
    }
    Ok(())
}

// ── optimizer ────────────────────────────────────────────────────────

/// Plain SGD with momentum over named gradients.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: HashMap::new() }
    }

    /// `scale` is applied to each gradient before the update (1/batch).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(String, Vec<f64>)],
        scale: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(name)?;
            let data = p.data_mut();
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] + g[i] * scale;
                data[i] -= self.lr * v[i];
            }
        }
        Ok(())
    }
}

// ── batched training step ────────────────────────────────────────────

/// Outcome of one sample's forward/backward inside a minibatch.
pub struct SampleResult {
    pub loss: f64,
    pub correct: bool,
    pub grads: Vec<(String, Vec<f64>)>,
    pub bn_observed: Vec<BnObservation>,
}

/// Run forward/backward for each sample of a minibatch in parallel and
/// reduce gradients in sample order, which keeps the sums independent of
/// thread scheduling.
pub fn minibatch_grads<S: Sync>(
    store: &ParamStore,
    samples: &[S],
    run: impl Fn(&mut Forward, &S) -> Result<(Var, bool)> + Sync,
) -> Result<(Vec<(String, Vec<f64>)>, f64, usize, Vec<Vec<BnObservation>>)> {
    let results: Vec<Result<SampleResult>> = samples
        .par_iter()
        .map(|s| {
            let mut fwd = Forward::new(store, Mode::Train);
            let (loss_var, correct) = run(&mut fwd, s)?;
            let loss = fwd.tape.value(loss_var).as_scalar()?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { context: "minibatch loss".into() });
            }
            fwd.tape.backward(loss_var)?;
            Ok(SampleResult {
                loss,
                correct,
                grads: fwd.grads(),
                bn_observed: std::mem::take(&mut fwd.bn_observed),
            })
        })
        .collect();

    let mut summed: Vec<(String, Vec<f64>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut bn_all = Vec::with_capacity(samples.len());
    for r in results {
        let r = r?;
        loss_sum += r.loss;
        if r.correct {
            correct += 1;
        }
        for (name, g) in r.grads {
            match index.get(&name) {
                Some(&i) => {
                    for (a, b) in summed[i].1.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    index.insert(name.clone(), summed.len());
                    summed.push((name, g));
                }
            }
        }
        bn_all.push(r.bn_observed);
    }
    Ok((summed, loss_sum, correct, bn_all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn store_rejects_duplicates_and_unknowns() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(store.insert("a", Tensor::zeros(&[2])).is_err());
        assert!(store.get("b").is_err());
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap().requires_grad(true))
            .unwrap();
        let before = store.get("w").unwrap().data().to_vec();
        let mut opt = Sgd::new(0.0, 0.9);
        opt.step(&mut store, &[("w".to_string(), vec![10.0, -3.0])], 1.0).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &before[..]);
    }

    #[test]
    fn linear_layer_runs_forward() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = LinearLayer::init(&mut store, "fc", 3, 2, &mut rng).unwrap();
        let mut fwd = Forward::new(&store, Mode::Eval);
        let x = fwd.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = layer.forward(&mut fwd, x).unwrap();
        assert_eq!(fwd.tape.shape(y), &[1, 2]);
    }

    #[test]
    fn bn_running_stats_update_deterministically() {
        let mut store = ParamStore::new();
        BatchNormLayer::init(&mut store, "bn", 2).unwrap();
        let obs = vec![vec![BnObservation {
            name: "bn".into(),
            mean: vec![1.0, 2.0],
            var: vec![0.5, 0.25],
        }]];
        apply_bn_updates(&mut store, &obs, 0.1).unwrap();
        let rm = store.get("bn.running_mean").unwrap().data().to_vec();
        assert!((rm[0] - 0.1).abs() < 1e-12 && (rm[1] - 0.2).abs() < 1e-12);
        let rv = store.get("bn.running_var").unwrap().data().to_vec();
        assert!((rv[0] - (0.9 + 0.05)).abs() < 1e-12);
    }
}
