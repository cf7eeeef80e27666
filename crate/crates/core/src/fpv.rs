//! The first-person-vision motion classifier: pairwise optical flow over the
//! frame sequence, flow color encoding, a small convolutional feature
//! extractor per flow image, a gated recurrent chain and a 3-class softmax.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{compute_flow, flow_to_color, FlowParams};
use crate::nn::{
    apply_bn_updates, minibatch_grads, Conv2dLayer, Forward, LinearLayer, Mode, ParamStore, Sgd,
    BN_MOMENTUM,
};
use crate::pdv::{MotionClass, MotionPdv};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::tnet::argmax_slice;

/// Hidden and cell state of the recurrent chain.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Tensor,
    pub c: Tensor,
}

impl RecurrentState {
    /// Sequence-start state: all zeros.
    pub fn zeros(width: usize) -> Self {
        RecurrentState { h: Tensor::zeros(&[width]), c: Tensor::zeros(&[width]) }
    }
}

/// Standard LSTM cell. Gate layout along the 4H axis is [input, forget,
/// candidate, output]; a single bias vector serves both input and hidden
/// contributions.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub name: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std_ih = (1.0 / in_dim as f64).sqrt();
        let std_hh = (1.0 / hidden as f64).sqrt();
        store.insert(
            &format!("{name}.w_ih"),
            Tensor::randn(&[in_dim, 4 * hidden], std_ih, rng).requires_grad(true),
        )?;
        store.insert(
            &format!("{name}.w_hh"),
            Tensor::randn(&[hidden, 4 * hidden], std_hh, rng).requires_grad(true),
        )?;
        // Forget-gate bias starts at 1 so early training keeps cell memory.
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for i in hidden..2 * hidden {
            bias.data_mut()[i] = 1.0;
        }
        store.insert(&format!("{name}.b"), bias.requires_grad(true))?;
        Ok(LstmCell { name: name.to_string(), in_dim, hidden })
    }

    /// One step on the tape; shapes (1, in) and (1, H).
    pub fn step(&self, fwd: &mut Forward, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let w_ih = fwd.param(&format!("{}.w_ih", self.name))?;
        let w_hh = fwd.param(&format!("{}.w_hh", self.name))?;
        let b = fwd.param(&format!("{}.b", self.name))?;
        let zero_b = fwd.input(Tensor::zeros(&[4 * hd]));
        let gx = fwd.tape.linear(x, w_ih, b)?;
        let gh = fwd.tape.linear(h, w_hh, zero_b)?;
        let gates = fwd.tape.add(gx, gh)?;
        let i_g = fwd.tape.slice_last(gates, 0, hd)?;
        let i_g = fwd.tape.sigmoid(i_g)?;
        let f_g = fwd.tape.slice_last(gates, hd, hd)?;
        let f_g = fwd.tape.sigmoid(f_g)?;
        let g_g = fwd.tape.slice_last(gates, 2 * hd, hd)?;
        let g_g = fwd.tape.tanh(g_g)?;
        let o_g = fwd.tape.slice_last(gates, 3 * hd, hd)?;
        let o_g = fwd.tape.sigmoid(o_g)?;
        let keep = fwd.tape.hadamard(f_g, c)?;
        let write = fwd.tape.hadamard(i_g, g_g)?;
        let c_next = fwd.tape.add(keep, write)?;
        let c_act = fwd.tape.tanh(c_next)?;
        let h_next = fwd.tape.hadamard(o_g, c_act)?;
        Ok((h_next, c_next))
    }
}

/// One recurrent update on plain tensors (inference path).
pub fn recurrent_step(
    x: &Tensor,
    state: &RecurrentState,
    store: &ParamStore,
    cell: &LstmCell,
) -> Result<RecurrentState> {
    if x.shape() != [cell.in_dim] || state.h.shape() != [cell.hidden] {
        return Err(Error::Shape {
            op: "recurrent_step",
            detail: format!(
                "x {:?}, h {:?} vs cell ({}, {})",
                x.shape(),
                state.h.shape(),
                cell.in_dim,
                cell.hidden
            ),
        });
    }
    let mut fwd = Forward::new(store, Mode::Eval);
    let xv = {
        let t = x.reshaped(&[1, cell.in_dim])?;
        fwd.input(t)
    };
    let hv = fwd.input(state.h.reshaped(&[1, cell.hidden])?);
    let cv = fwd.input(state.c.reshaped(&[1, cell.hidden])?);
    let (h, c) = cell.step(&mut fwd, xv, hv, cv)?;
    Ok(RecurrentState {
        h: fwd.tape.value(h).reshaped(&[cell.hidden])?,
        c: fwd.tape.value(c).reshaped(&[cell.hidden])?,
    })
}

/// F-Net configuration (free-form JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FNetConfig {
    pub input_size: (usize, usize),
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Feed flow-color images (true) or raw frames (ablation).
    pub use_flow: bool,
    pub flow: FlowParams,
    pub seed: u64,
}

impl FNetConfig {
    pub fn toy(seed: u64) -> Self {
        FNetConfig {
            input_size: (48, 48),
            conv_channels: vec![8, 16, 32],
            feature_dim: 64,
            hidden_dim: 64,
            num_classes: 3,
            use_flow: true,
            flow: FlowParams::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::InvalidArg("conv_channels must not be empty".into()));
        }
        self.flow.validate()?;
        if self.num_classes < 2 || self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArg("bad fnet dimensions".into()));
        }
        Ok(())
    }
}

pub struct FNet {
    pub config: FNetConfig,
    convs: Vec<Conv2dLayer>,
    project: LinearLayer,
    lstm: LstmCell,
    head: LinearLayer,
}

impl FNet {
    pub fn init(store: &mut ParamStore, config: FNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in config.conv_channels.iter().enumerate() {
            convs.push(Conv2dLayer::init(
                store,
                &format!("fnet.conv{i}"),
                3,
                c_in,
                c_out,
                2,
                1,
                &mut rng,
            )?);
            c_in = c_out;
        }
        let project = LinearLayer::init(store, "fnet.project", c_in, config.feature_dim, &mut rng)?;
        let lstm = LstmCell::init(store, "fnet.lstm", config.feature_dim, config.hidden_dim, &mut rng)?;
        let head = LinearLayer::init(store, "fnet.head", config.hidden_dim, config.num_classes, &mut rng)?;
        Ok(FNet { config, convs, project, lstm, head })
    }

    pub fn lstm_cell(&self) -> &LstmCell {
        &self.lstm
    }

    /// Per-frame feature vector from one (H, W, 3) input image.
    pub fn frame_features(&self, fwd: &mut Forward, image: Var) -> Result<Var> {
        let mut x = image;
        for conv in &self.convs {
            x = conv.forward(fwd, x)?;
            x = fwd.tape.relu(x)?;
        }
        let s = fwd.tape.shape(x).to_vec();
        let flat = fwd.tape.reshape(x, &[s[0] * s[1], s[2]])?;
        let sum = fwd.tape.sum_axis(flat, 0)?;
        let pooled = fwd.tape.scale(sum, 1.0 / (s[0] * s[1]) as f64)?;
        let feat = self.project.forward(fwd, pooled)?;
        fwd.tape.relu(feat)
    }

    /// Run the recurrent chain over prepared per-step inputs and return the
    /// class logits from the final hidden state.
    pub fn forward_sequence(&self, fwd: &mut Forward, inputs: &[Tensor]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Data("empty step-input sequence".into()));
        }
        let hd = self.config.hidden_dim;
        let mut h = fwd.input(Tensor::zeros(&[1, hd]));
        let mut c = fwd.input(Tensor::zeros(&[1, hd]));
        for input in inputs {
            let img = fwd.input(input.clone());
            let feat = self.frame_features(fwd, img)?;
            let feat = fwd.tape.reshape(feat, &[1, self.config.feature_dim])?;
            let (nh, nc) = self.lstm.step(fwd, feat, h, c)?;
            h = nh;
            c = nc;
        }
        let logits = self.head.forward(fwd, h)?;
        fwd.tape.reshape(logits, &[self.config.num_classes])
    }

    /// Per-step network inputs for a grayscale frame sequence: pairwise flow
    /// color images, or raw frames replicated to 3 channels when flow is
    /// disabled.
    pub fn prepare_inputs(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        if frames.len() < 2 {
            return Err(Error::Data(format!(
                "sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let (h, w) = self.config.input_size;
        for f in frames {
            if f.shape() != [h, w] {
                return Err(Error::Shape {
                    op: "fpv_prepare",
                    detail: format!("frame {:?} vs configured {h}x{w}", f.shape()),
                });
            }
        }
        if self.config.use_flow {
            frames
                .windows(2)
                .map(|pair| {
                    let flow = compute_flow(&pair[0], &pair[1], &self.config.flow)?;
                    Ok(flow_to_color(&flow))
                })
                .collect()
        } else {
            frames
                .iter()
                .skip(1)
                .map(|f| {
                    let mut data = Vec::with_capacity(f.len() * 3);
                    for &v in f.data() {
                        data.extend_from_slice(&[v, v, v]);
                    }
                    Tensor::new(vec![h, w, 3], data)
                })
                .collect()
        }
    }

    /// Classify a grayscale frame sequence into a motion PDV.
    pub fn sequence_classify(&self, store: &ParamStore, frames: &[Tensor]) -> Result<MotionPdv> {
        let inputs = self.prepare_inputs(frames)?;
        self.classify_inputs(store, &inputs)
    }

    /// Classify prepared per-step inputs.
    pub fn classify_inputs(&self, store: &ParamStore, inputs: &[Tensor]) -> Result<MotionPdv> {
        let mut fwd = Forward::new(store, Mode::Eval);
        let logits = self.forward_sequence(&mut fwd, inputs)?;
        let probs = fwd.tape.softmax(logits, 0)?;
        let v = fwd.tape.value(probs).data();
        let mut p = [0.0; 3];
        p.copy_from_slice(v);
        MotionPdv::new(p)
    }
}

/// A training sample: precomputed per-step inputs plus the motion label.
#[derive(Clone, Debug)]
pub struct SequenceInputs {
    pub inputs: Vec<Tensor>,
    pub label: MotionClass,
}

/// Precompute step inputs for many sequences in parallel (flow is by far
/// the most expensive part of the pipeline).
pub fn prepare_many(
    model: &FNet,
    sequences: &[(Vec<Tensor>, MotionClass)],
) -> Result<Vec<SequenceInputs>> {
    sequences
        .par_iter()
        .map(|(frames, label)| {
            Ok(SequenceInputs { inputs: model.prepare_inputs(frames)?, label: *label })
        })
        .collect()
}

/// One epoch of SGD over prepared sequences.
pub fn fpv_train_epoch(
    model: &FNet,
    store: &mut ParamStore,
    opt: &mut Sgd,
    data: &[SequenceInputs],
    batch: usize,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<crate::tnet::EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let batch = batch.max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(shuffle_rng);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in order.chunks(batch) {
        let samples: Vec<&SequenceInputs> = chunk.iter().map(|&i| &data[i]).collect();
        let (grads, batch_loss, batch_correct, bn_obs) =
            minibatch_grads(store, &samples, |fwd, s| {
                let logits = model.forward_sequence(fwd, &s.inputs)?;
                let target = s.label.index();
                let pred = argmax_slice(fwd.tape.value(logits).data());
                let loss = fwd.tape.cross_entropy_logits(logits, target)?;
                Ok((loss, pred == target))
            })?;
        opt.step(store, &grads, 1.0 / chunk.len() as f64)?;
        apply_bn_updates(store, &bn_obs, BN_MOMENTUM)?;
        loss_sum += batch_loss;
        correct += batch_correct;
    }
    Ok(crate::tnet::EpochMetrics {
        mean_loss: loss_sum / data.len() as f64,
        top1: correct as f64 / data.len() as f64,
    })
}
