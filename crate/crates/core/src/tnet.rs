//! The TPV classifier: a small convolutional stem, staged transition layers
//! with patch-wise self-attention blocks, and a 7-class softmax head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{DeltaVariant, SABlock, SABlockConfig};
use crate::error::{Error, Result};
use crate::nn::{
    apply_bn_updates, minibatch_grads, BatchNormLayer, Conv2dLayer, Forward, LinearLayer, Mode,
    ParamStore, Sgd, BN_MOMENTUM,
};
use crate::pdv::{IntersectionClass, IntersectionPdv};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Model configuration. The JSON document uses exactly these keys.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TNetConfig {
    /// (height, width) of the input image.
    pub input_size: (usize, usize),
    /// Output channels of each transition, one entry per stage.
    pub stage_channels: Vec<usize>,
    /// Self-attention blocks following each transition.
    pub sa_blocks_per_stage: Vec<usize>,
    pub variant: DeltaVariant,
    pub footprint_k: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl TNetConfig {
    /// The full-scale configuration: 224x224 input, five transitions with
    /// outputs 112x112x64 ... 7x7x2048, 19 attention blocks, 7 classes.
    pub fn paper() -> Self {
        TNetConfig {
            input_size: (224, 224),
            stage_channels: vec![64, 256, 512, 1024, 2048],
            sa_blocks_per_stage: vec![2, 3, 4, 6, 4],
            variant: DeltaVariant::Concat,
            footprint_k: 3,
            num_classes: 7,
            seed: 0,
        }
    }

    /// Desk-scale configuration trainable on a CPU.
    pub fn toy(seed: u64) -> Self {
        TNetConfig {
            input_size: (64, 64),
            stage_channels: vec![8, 16, 32, 64, 64],
            sa_blocks_per_stage: vec![1, 1, 1, 1, 1],
            variant: DeltaVariant::Concat,
            footprint_k: 3,
            num_classes: 7,
            seed,
        }
    }

    /// Two-stage micro model used by the gradient suite.
    pub fn micro(seed: u64) -> Self {
        TNetConfig {
            input_size: (8, 8),
            stage_channels: vec![4, 8],
            sa_blocks_per_stage: vec![1, 1],
            variant: DeltaVariant::Concat,
            footprint_k: 3,
            num_classes: 7,
            seed,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::InvalidArg("at least one stage required".into()));
        }
        if self.stage_channels.len() != self.sa_blocks_per_stage.len() {
            return Err(Error::InvalidArg(format!(
                "stage_channels ({}) and sa_blocks_per_stage ({}) disagree",
                self.stage_channels.len(),
                self.sa_blocks_per_stage.len()
            )));
        }
        let div = 1usize << self.stages();
        if self.input_size.0 % div != 0 || self.input_size.1 % div != 0 {
            return Err(Error::InvalidArg(format!(
                "input {}x{} not divisible by 2^{} transitions",
                self.input_size.0,
                self.input_size.1,
                self.stages()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArg("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Output shape (h, w, c) after each transition+blocks stage.
    pub fn shape_trace(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = self.input_size;
        let mut out = Vec::new();
        for &c in &self.stage_channels {
            h /= 2;
            w /= 2;
            out.push((h, w, c));
        }
        out
    }

    /// Reduced dimension for a stage's attention blocks: C/4, at least 2,
    /// clamped to C.
    pub fn reduced_dim(channels: usize) -> usize {
        (channels / 4).max(2).min(channels)
    }

    fn block_config(&self, channels: usize) -> Result<SABlockConfig> {
        SABlockConfig::new(channels, Self::reduced_dim(channels), self.variant)?
            .with_footprint_k(self.footprint_k)
    }
}

impl SABlockConfig {
    /// Change the footprint window, re-deriving the alpha hidden width.
    pub fn with_footprint_k(mut self, k: usize) -> Result<Self> {
        self.footprint_k = k;
        self.alpha_hidden = (2 * self.footprint_len() * self.group_channels()).max(8);
        self.validate()?;
        Ok(self)
    }
}

/// Down-sampling block: batch norm, ReLU, 2x2 max pooling with stride 2 and
/// a linear map expanding the channel dimension.
#[derive(Clone, Debug)]
pub struct Transition {
    pub name: String,
    bn: BatchNormLayer,
    expand: LinearLayer,
}

impl Transition {
    pub fn init<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bn = BatchNormLayer::init(store, &format!("{name}.bn"), c_in)?;
        let expand = LinearLayer::init(store, &format!("{name}.expand"), c_in, c_out, rng)?;
        Ok(Transition { name: name.to_string(), bn, expand })
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let s = fwd.tape.shape(x).to_vec();
        if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::Shape {
                op: "transition",
                detail: format!("input {s:?} must have even spatial extents"),
            });
        }
        let y = self.bn.forward(fwd, x)?;
        let y = fwd.tape.relu(y)?;
        let y = fwd.tape.maxpool2x2(y)?;
        self.expand.forward(fwd, y)
    }
}

pub struct TNet {
    pub config: TNetConfig,
    stem: Conv2dLayer,
    stages: Vec<(Transition, Vec<SABlock>)>,
    head: LinearLayer,
}

impl TNet {
    /// Build and initialize the parameters into `store`, seeded by the
    /// config seed.
    pub fn init(store: &mut ParamStore, config: TNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c0 = config.stage_channels[0];
        let stem = Conv2dLayer::init(store, "tnet.stem", 3, 3, c0, 1, 1, &mut rng)?;
        let mut stages = Vec::new();
        let mut c_in = c0;
        for (t, (&c_out, &blocks)) in config
            .stage_channels
            .iter()
            .zip(&config.sa_blocks_per_stage)
            .enumerate()
        {
            let trans =
                Transition::init(store, &format!("tnet.stage{t}.transition"), c_in, c_out, &mut rng)?;
            let mut sa = Vec::new();
            for b in 0..blocks {
                sa.push(SABlock::init(
                    store,
                    &format!("tnet.stage{t}.block{b}"),
                    config.block_config(c_out)?,
                    &mut rng,
                )?);
            }
            stages.push((trans, sa));
            c_in = c_out;
        }
        let head = LinearLayer::init(store, "tnet.head", c_in, config.num_classes, &mut rng)?;
        Ok(TNet { config, stem, stages, head })
    }

    /// Forward to class logits. The input must match the configured size
    /// exactly; there is no silent resize.
    pub fn forward(&self, fwd: &mut Forward, image: Var) -> Result<Var> {
        let s = fwd.tape.shape(image).to_vec();
        let (h, w) = self.config.input_size;
        if s != [h, w, 3] {
            return Err(Error::Shape {
                op: "tnet_forward",
                detail: format!("input {s:?} does not match configured {h}x{w}x3"),
            });
        }
        let mut x = self.stem.forward(fwd, image)?;
        for (trans, blocks) in &self.stages {
            x = trans.forward(fwd, x)?;
            for block in blocks {
                x = block.forward(fwd, x)?;
            }
        }
        // Global average pooling then the output layer.
        let s = fwd.tape.shape(x).to_vec();
        let flat = fwd.tape.reshape(x, &[s[0] * s[1], s[2]])?;
        let summed = fwd.tape.sum_axis(flat, 0)?;
        let pooled = fwd.tape.scale(summed, 1.0 / (s[0] * s[1]) as f64)?;
        self.head.forward(fwd, pooled)
    }

    /// Forward a plain image to a normalized probability vector.
    pub fn forward_pdv(&self, store: &ParamStore, image: &Tensor) -> Result<IntersectionPdv> {
        let mut fwd = Forward::new(store, Mode::Eval);
        let img = fwd.input(image.clone());
        let logits = self.forward(&mut fwd, img)?;
        let probs = fwd.tape.softmax(logits, 0)?;
        let v = fwd.tape.value(probs).data();
        let mut p = [0.0; 7];
        if v.len() != 7 {
            return Err(Error::Shape {
                op: "tnet_forward",
                detail: format!("expected 7 classes, got {}", v.len()),
            });
        }
        p.copy_from_slice(v);
        IntersectionPdv::new(p)
    }
}

/// One labeled single-view sample.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: IntersectionClass,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub top1: f64,
}

/// Training hyper-parameters for the epoch loop.
#[derive(Clone, Copy, Debug)]
pub struct TrainParams {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { lr: 0.05, momentum: 0.9, batch_size: 8 }
    }
}

/// One epoch of SGD over the split: seeded shuffle, parallel per-sample
/// gradients reduced in sample order, batch-norm running updates folded in
/// deterministically.
pub fn tnet_train_epoch(
    model: &TNet,
    store: &mut ParamStore,
    opt: &mut Sgd,
    data: &[LabeledImage],
    batch: usize,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let batch = batch.max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(shuffle_rng);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in order.chunks(batch) {
        let samples: Vec<&LabeledImage> = chunk.iter().map(|&i| &data[i]).collect();
        let (grads, batch_loss, batch_correct, bn_obs) =
            minibatch_grads(store, &samples, |fwd, s| {
                let img = fwd.input(s.image.clone());
                let logits = model.forward(fwd, img)?;
                let target = s.label.index();
                let pred = argmax_slice(fwd.tape.value(logits).data());
                let loss = fwd.tape.cross_entropy_logits(logits, target)?;
                Ok((loss, pred == target))
            })?;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite { context: "tnet epoch loss".into() });
        }
        opt.step(store, &grads, 1.0 / chunk.len() as f64)?;
        apply_bn_updates(store, &bn_obs, BN_MOMENTUM)?;
        loss_sum += batch_loss;
        correct += batch_correct;
    }
    Ok(EpochMetrics {
        mean_loss: loss_sum / data.len() as f64,
        top1: correct as f64 / data.len() as f64,
    })
}

pub(crate) fn argmax_slice(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_shape_rule() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Transition::init(&mut store, "t", 4, 16, &mut rng).unwrap();
        let mut fwd = Forward::new(&store, Mode::Eval);
        let x = fwd.input(Tensor::zeros(&[8, 8, 4]));
        let y = t.forward(&mut fwd, x).unwrap();
        assert_eq!(fwd.tape.shape(y), &[4, 4, 16]);
    }

    #[test]
    fn transition_rejects_odd_extents() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Transition::init(&mut store, "t", 2, 4, &mut rng).unwrap();
        let mut fwd = Forward::new(&store, Mode::Eval);
        let x = fwd.input(Tensor::zeros(&[5, 6, 2]));
        assert!(t.forward(&mut fwd, x).is_err());
    }

    #[test]
    fn transition_constant_input_gives_constant_channels_eval() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Transition::init(&mut store, "t", 3, 5, &mut rng).unwrap();
        let mut fwd = Forward::new(&store, Mode::Eval);
        let x = fwd.input(Tensor::full(&[4, 4, 3], 0.7));
        let y = t.forward(&mut fwd, x).unwrap();
        let out = fwd.tape.value(y);
        // Every spatial position carries the same channel vector.
        let c = 5;
        let first = out.data()[..c].to_vec();
        for pos in 1..4 {
            assert_eq!(&out.data()[pos * c..(pos + 1) * c], &first[..]);
        }
    }

    #[test]
    fn transition_matches_composed_primitive_chain() {
        use crate::tape::{BnMode, PrimitiveKind};
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Transition::init(&mut store, "t", 3, 4, &mut rng).unwrap();
        let x = Tensor::uniform(&[4, 6, 3], -1.0, 1.0, &mut rng);

        let mut fwd = Forward::new(&store, Mode::Eval);
        let xv = fwd.input(x.clone());
        let y = t.forward(&mut fwd, xv).unwrap();
        let got = fwd.tape.value(y).clone();

        // Same computation spelled out with forward_primitive calls.
        let mut tape = crate::tape::Tape::new();
        let xv = tape.constant(x);
        let gamma = tape.constant(store.get("t.bn.gamma").unwrap().clone());
        let beta = tape.constant(store.get("t.bn.beta").unwrap().clone());
        let mode = BnMode::Eval {
            mean: store.get("t.bn.running_mean").unwrap().data().to_vec(),
            var: store.get("t.bn.running_var").unwrap().data().to_vec(),
        };
        let b = tape
            .forward_primitive(&PrimitiveKind::BatchNorm { eps: 1e-5, mode }, &[xv, gamma, beta])
            .unwrap();
        let r = tape.forward_primitive(&PrimitiveKind::Relu, &[b]).unwrap();
        let p = tape.forward_primitive(&PrimitiveKind::MaxPool2x2Stride2, &[r]).unwrap();
        let w = tape.constant(store.get("t.expand.w").unwrap().clone());
        let bias = tape.constant(store.get("t.expand.b").unwrap().clone());
        let out = tape.forward_primitive(&PrimitiveKind::Linear, &[p, w, bias]).unwrap();
        assert_eq!(tape.value(out).data(), got.data());
    }

    #[test]
    fn paper_scale_shape_trace() {
        let cfg = TNetConfig::paper();
        cfg.validate().unwrap();
        assert_eq!(
            cfg.shape_trace(),
            vec![
                (112, 112, 64),
                (56, 56, 256),
                (28, 28, 512),
                (14, 14, 1024),
                (7, 7, 2048)
            ]
        );
        assert_eq!(cfg.sa_blocks_per_stage.iter().sum::<usize>(), 19);
        assert_eq!(cfg.num_classes, 7);
    }

    #[test]
    fn forward_rejects_wrong_input_size() {
        let mut store = ParamStore::new();
        let model = TNet::init(&mut store, TNetConfig::micro(0)).unwrap();
        let bad = Tensor::zeros(&[16, 16, 3]);
        assert!(model.forward_pdv(&store, &bad).is_err());
    }

    #[test]
    fn forward_pdv_is_normalized_and_deterministic() {
        let mut store = ParamStore::new();
        let model = TNet::init(&mut store, TNetConfig::micro(42)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng);
        let p1 = model.forward_pdv(&store, &img).unwrap();
        let p2 = model.forward_pdv(&store, &img).unwrap();
        assert_eq!(p1, p2, "identical input and weights must give identical PDVs");
        let sum: f64 = p1.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn config_json_keys_are_exact() {
        let cfg = TNetConfig::toy(3);
        let json = serde_json::to_value(&cfg).unwrap();
        let obj = json.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            vec![
                "footprint_k",
                "input_size",
                "num_classes",
                "sa_blocks_per_stage",
                "seed",
                "stage_channels",
                "variant"
            ]
        );
        let back: TNetConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back.stage_channels, cfg.stage_channels);
        // Unknown keys are rejected.
        let bad = r#"{"input_size":[8,8],"stage_channels":[4],"sa_blocks_per_stage":[1],"variant":"concat","footprint_k":3,"num_classes":7,"seed":0,"extra":1}"#;
        assert!(serde_json::from_str::<TNetConfig>(bad).is_err());
    }

    #[test]
    fn zero_lr_leaves_weights_bit_identical() {
        let mut store = ParamStore::new();
        let model = TNet::init(&mut store, TNetConfig::micro(7)).unwrap();
        let before: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = vec![LabeledImage {
            image: Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng),
            label: IntersectionClass::TurnRight,
        }];
        let mut opt = Sgd::new(0.0, 0.9);
        let mut srng = ChaCha8Rng::seed_from_u64(2);
        tnet_train_epoch(&model, &mut store, &mut opt, &data, 8, &mut srng).unwrap();
        // Trainable weights unchanged; running stats are allowed to move.
        for ((name, t), old) in store.iter().zip(&before) {
            if t.wants_grad() {
                assert_eq!(t.data(), &old[..], "{name} changed under zero lr");
            }
        }
    }

    #[test]
    fn overfits_a_single_sample() {
        let mut store = ParamStore::new();
        let model = TNet::init(&mut store, TNetConfig::micro(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sample = LabeledImage {
            image: Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng),
            label: IntersectionClass::LeftFacingT,
        };
        let data = vec![sample; 8];
        let mut opt = Sgd::new(0.1, 0.9);
        let mut srng = ChaCha8Rng::seed_from_u64(5);
        let mut last = f64::INFINITY;
        for _ in 0..60 {
            last = tnet_train_epoch(&model, &mut store, &mut opt, &data, 8, &mut srng)
                .unwrap()
                .mean_loss;
            if last <= 1e-2 {
                break;
            }
        }
        assert!(last <= 1e-2, "failed to memorize one sample, loss {last}");
    }
}
