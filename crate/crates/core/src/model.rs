//! Frozen heterogeneous feed-forward backbones with exact forward/backward
//! passes, so adapter gradients can be checked against finite differences.
//!
//! Backbone weights are never trained after construction; adapters carry all
//! trainable parameters. Activation is tanh by default (smooth, so central
//! finite differences are clean); the final layer emits raw logits.

use crate::adapter::{sigmoid, AdapterSet, GateParams, LayerAdapter};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::stream_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture description: per-layer (d_in, d_out) pairs chaining from
/// input_dim to output_dim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_type_id: String,
    pub widths: Vec<(usize, usize)>,
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ModelSpec {
    /// Uniform hidden width: input -> w -> ... -> w -> output.
    pub fn uniform(model_type_id: &str, depth: usize, width: usize, input_dim: usize, output_dim: usize) -> Self {
        let mut widths = Vec::with_capacity(depth);
        for l in 0..depth {
            let d_in = if l == 0 { input_dim } else { width };
            let d_out = if l == depth - 1 { output_dim } else { width };
            widths.push((d_in, d_out));
        }
        ModelSpec {
            model_type_id: model_type_id.to_string(),
            widths,
            activation: Activation::Tanh,
            input_dim,
            output_dim,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::invalid("ModelSpec", "depth must be >= 1"));
        }
        if self.widths[0].0 != self.input_dim {
            return Err(Error::invalid("ModelSpec", "first layer d_in != input_dim"));
        }
        if self.widths.last().unwrap().1 != self.output_dim {
            return Err(Error::invalid("ModelSpec", "last layer d_out != output_dim"));
        }
        for w in self.widths.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(Error::invalid("ModelSpec", "layer widths do not chain"));
            }
        }
        if self.widths.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(Error::invalid("ModelSpec", "zero-width layer"));
        }
        Ok(())
    }

    /// Total backbone parameter count; used to pick the pivot/probe model.
    pub fn param_count(&self) -> usize {
        self.widths.iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// A pretrained-then-frozen backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenModel {
    pub spec: ModelSpec,
    pub layer_weights: Vec<Matrix>,
    pub layer_biases: Vec<Vector>,
    pub seed: u64,
}

/// Mini-batch of rows with class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, input_dim: usize, output_dim: usize) -> Result<()> {
        if self.inputs.rows() != self.labels.len() {
            return Err(Error::dims("Batch", self.inputs.rows(), self.labels.len()));
        }
        if self.inputs.cols() != input_dim {
            return Err(Error::dims("Batch input_dim", input_dim, self.inputs.cols()));
        }
        if self.labels.iter().any(|&y| y >= output_dim) {
            return Err(Error::invalid("Batch", "label out of range"));
        }
        Ok(())
    }
}

/// How adapters enter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    AdaptersOff,
    LocalOnly,
    GlobalOnly,
    GatedDual,
}

/// Everything the backward pass and the alignment hooks need from a forward
/// pass: per-layer inputs, pre-activations, the r-dim A outputs and the
/// d_out-dim adapter (B-path) outputs of both adapter sets.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub layer_inputs: Vec<Matrix>,
    pub preacts: Vec<Matrix>,
    pub a_out_local: Vec<Matrix>,
    pub a_out_global: Vec<Matrix>,
    pub contrib_local: Vec<Matrix>,
    pub contrib_global: Vec<Matrix>,
}

/// Gradients for every trainable parameter: adapter factors plus gates.
/// Frozen tensors (backbone, PQ A/B, the whole global set) never appear.
#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum LayerGrads {
    Conv { a: Matrix, b: Matrix },
    Pq { p: Matrix, q: Vector },
}

/// Deterministic scaled-Gaussian weights, then a fixed number of full-batch
/// pretraining steps on a shared synthetic task so frozen features carry
/// structure (random features would make alignment and CKA vacuous).
pub fn build_frozen(spec: &ModelSpec, seed: u64) -> Result<FrozenModel> {
    spec.validate()?;
    let mut weights = Vec::with_capacity(spec.depth());
    let mut biases = Vec::with_capacity(spec.depth());
    for (l, &(d_in, d_out)) in spec.widths.iter().enumerate() {
        let mut rng = stream_rng(seed, "frozen-init", l as u64);
        let std = 1.0 / (d_in as f64).sqrt();
        weights.push(Matrix::from_fn(d_out, d_in, |_, _| gaussian(&mut rng) * std));
        biases.push(Vector::zeros(d_out));
    }
    let mut model = FrozenModel {
        spec: spec.clone(),
        layer_weights: weights,
        layer_biases: biases,
        seed,
    };
    pretrain(&mut model, seed)?;
    Ok(model)
}

pub const PRETRAIN_STEPS: usize = 200;
const PRETRAIN_SAMPLES: usize = 256;
const PRETRAIN_LR: f64 = 0.5;
pub const PRETRAIN_NOISE_STD: f64 = 0.5;

/// Class prototypes of the shared pretraining task. The fixed stream seed
/// keeps the task identical for every model type and disjoint from every
/// scenario stream regardless of the scenario master seed.
pub fn pretrain_prototypes(input_dim: usize, classes: usize) -> Matrix {
    let mut rng = stream_rng(0x5eed_cafe, "pretrain-task", 0);
    Matrix::from_fn(classes, input_dim, |_, _| gaussian(&mut rng))
}

/// Draw from the pretraining distribution with a caller-provided stream
/// (used for public alignment data, which shares the distribution but never
/// the samples).
pub fn sample_pretrain_distribution(
    protos: &Matrix,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Batch {
    let d = protos.cols();
    let c = protos.rows();
    let mut inputs = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.random_range(0..c);
        for j in 0..d {
            inputs.set(i, j, protos.at(y, j) + PRETRAIN_NOISE_STD * gaussian(rng));
        }
        labels.push(y);
    }
    Batch { inputs, labels }
}

/// Shared pretraining: full-batch steps on the common synthetic task so
/// frozen features carry structure before the model is locked.
fn pretrain(model: &mut FrozenModel, _seed: u64) -> Result<()> {
    let spec = model.spec.clone();
    let c = spec.output_dim;
    let d = spec.input_dim;
    let protos = pretrain_prototypes(d, c);
    let mut rng = stream_rng(0x5eed_cafe, "pretrain-samples", 0);
    let mut inputs = Matrix::zeros(PRETRAIN_SAMPLES, d);
    let mut labels = Vec::with_capacity(PRETRAIN_SAMPLES);
    for i in 0..PRETRAIN_SAMPLES {
        let y = i % c;
        for j in 0..d {
            inputs.set(i, j, protos.at(y, j) + PRETRAIN_NOISE_STD * gaussian(&mut rng));
        }
        labels.push(y);
    }
    let batch = Batch { inputs, labels };

    for _ in 0..PRETRAIN_STEPS {
        backbone_step(model, &batch, PRETRAIN_LR);
    }
    if !model.layer_weights.iter().all(|w| w.is_finite()) {
        return Err(Error::NonFinite {
            context: "pretrain".into(),
        });
    }
    Ok(())
}

/// One full-batch gradient step on all backbone weights and biases
/// (only used during construction; the result is frozen afterwards).
fn backbone_step(model: &mut FrozenModel, batch: &Batch, lr: f64) {
    let depth = model.spec.depth();
    let act = model.spec.activation;
    let m = batch.len();

    let mut layer_inputs: Vec<Matrix> = Vec::with_capacity(depth);
    let mut preacts: Vec<Matrix> = Vec::with_capacity(depth);
    let mut h = batch.inputs.clone();
    for l in 0..depth {
        layer_inputs.push(h.clone());
        let mut u = h.matmul_nt(&model.layer_weights[l]);
        add_bias(&mut u, &model.layer_biases[l]);
        preacts.push(u.clone());
        h = if l + 1 < depth { apply_act(&u, act) } else { u };
    }

    let mut g = softmax_ce_grad(&h, &batch.labels);
    for l in (0..depth).rev() {
        // g^T * H is already d_out x d_in
        let dw = g.matmul_tn(&layer_inputs[l]);
        let db = column_sums(&g);
        let mut dh = g.matmul(&model.layer_weights[l]);
        if l > 0 {
            mul_act_derivative(&mut dh, &preacts[l - 1], act);
        }
        model.layer_weights[l].axpy(-lr, &dw);
        let mdb = &mut model.layer_biases[l];
        for (b, d) in mdb.data_mut().iter_mut().zip(db.data()) {
            *b -= lr * d;
        }
        g = dh;
    }
    let _ = m;
}

fn gaussian(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn apply_act(u: &Matrix, act: Activation) -> Matrix {
    let mut out = u.clone();
    for v in out.data_mut() {
        *v = act.apply(*v);
    }
    out
}

fn mul_act_derivative(g: &mut Matrix, pre: &Matrix, act: Activation) {
    for (gv, pv) in g.data_mut().iter_mut().zip(pre.data()) {
        *gv *= act.derivative(*pv);
    }
}

fn add_bias(u: &mut Matrix, bias: &Vector) {
    let cols = u.cols();
    for i in 0..u.rows() {
        let row = u.row_mut(i);
        for j in 0..cols {
            row[j] += bias.data()[j];
        }
    }
}

fn column_sums(m: &Matrix) -> Vector {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    Vector::from(out)
}

/// dL/d(logits) of mean cross-entropy: (softmax - onehot) / m, row per sample.
fn softmax_ce_grad(logits: &Matrix, labels: &[usize]) -> Matrix {
    let m = labels.len();
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let dst = g.row_mut(i);
        for j in 0..row.len() {
            dst[j] = exps[j] / sum / m as f64;
        }
        dst[labels[i]] -= 1.0 / m as f64;
    }
    g
}

fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let m = labels.len() as f64;
    let mut loss = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += logsum - row[labels[i]];
    }
    loss / m
}

/// Adapter contribution of one layer for a batch H (rows are samples):
/// returns (a_out = H A^T, contrib = adapter output added to the residual).
fn adapter_path(ad: &LayerAdapter, h: &Matrix) -> (Matrix, Matrix) {
    match ad {
        LayerAdapter::Conv(l) => {
            let a_out = h.matmul_nt(&l.a); // m x r
            let contrib = a_out.matmul_nt(&l.b); // m x d_out
            (a_out, contrib)
        }
        LayerAdapter::Pq(pq) => {
            let a_out = h.matmul_nt(&pq.a); // m x r
            let mut inner = a_out.matmul_nt(&pq.p); // m x r
            let cols = inner.cols();
            for i in 0..inner.rows() {
                let row = inner.row_mut(i);
                for j in 0..cols {
                    row[j] += pq.q.data()[j];
                }
            }
            let contrib = inner.matmul_nt(&pq.b); // m x d_out
            (a_out, contrib)
        }
    }
}

/// Full forward pass of the backbone with dual adapters.
///
/// Per-layer output is `W_p h + b` plus the adapter contribution selected by
/// `mode`; `GatedDual` mixes the local and global adapter outputs with the
/// per-layer sigmoid gate. `AdaptersOff` scales every adapter contribution
/// to zero so the tape reflects the frozen backbone path.
pub fn forward(
    model: &FrozenModel,
    local: &AdapterSet,
    global: &AdapterSet,
    gates: &GateParams,
    x: &Matrix,
    mode: ForwardMode,
) -> Result<(Matrix, ForwardTape)> {
    let depth = model.spec.depth();
    if x.cols() != model.spec.input_dim {
        return Err(Error::dims("forward input", model.spec.input_dim, x.cols()));
    }
    // both paths are evaluated for the tape, so both must fit
    check_adapter_dims(model, local)?;
    check_adapter_dims(model, global)?;
    if gates.beta.len() != depth {
        return Err(Error::dims("gates", depth, gates.beta.len()));
    }
    let act = model.spec.activation;

    let mut tape = ForwardTape {
        layer_inputs: Vec::with_capacity(depth),
        preacts: Vec::with_capacity(depth),
        a_out_local: Vec::with_capacity(depth),
        a_out_global: Vec::with_capacity(depth),
        contrib_local: Vec::with_capacity(depth),
        contrib_global: Vec::with_capacity(depth),
    };

    let mut h = x.clone();
    for l in 0..depth {
        tape.layer_inputs.push(h.clone());
        let mut u = h.matmul_nt(&model.layer_weights[l]);
        add_bias(&mut u, &model.layer_biases[l]);

        let (a_l, c_l) = adapter_path(&local.layers[l], &h);
        let (a_g, c_g) = adapter_path(&global.layers[l], &h);
        match mode {
            ForwardMode::AdaptersOff => {}
            ForwardMode::LocalOnly => u.axpy(1.0, &c_l),
            ForwardMode::GlobalOnly => u.axpy(1.0, &c_g),
            ForwardMode::GatedDual => {
                let bt = sigmoid(gates.beta[l]);
                u.axpy(1.0 - bt, &c_l);
                u.axpy(bt, &c_g);
            }
        }
        tape.a_out_local.push(a_l);
        tape.a_out_global.push(a_g);
        tape.contrib_local.push(c_l);
        tape.contrib_global.push(c_g);
        tape.preacts.push(u.clone());
        h = if l + 1 < depth { apply_act(&u, act) } else { u };
    }
    Ok((h, tape))
}

fn check_adapter_dims(model: &FrozenModel, set: &AdapterSet) -> Result<()> {
    if set.layers.len() != model.spec.depth() {
        return Err(Error::dims(
            "adapter set depth",
            model.spec.depth(),
            set.layers.len(),
        ));
    }
    for (l, ad) in set.layers.iter().enumerate() {
        let (d_in, d_out) = model.spec.widths[l];
        if ad.d_in() != d_in || ad.d_out() != d_out {
            return Err(Error::DimMismatch {
                context: format!("adapter at layer {}", l + 1),
                expected: format!("{d_in}->{d_out}"),
                got: format!("{}->{}", ad.d_in(), ad.d_out()),
            });
        }
    }
    Ok(())
}

/// Mean cross-entropy plus gradients for the trainable parameters of the
/// LOCAL adapter set and the gates. The global set and the backbone receive
/// no gradient entries, and PQ layers only report dP/dQ.
pub fn loss_and_grads(
    model: &FrozenModel,
    local: &AdapterSet,
    global: &AdapterSet,
    gates: &GateParams,
    batch: &Batch,
    mode: ForwardMode,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Empty {
            what: "batch".into(),
        });
    }
    batch.validate(model.spec.input_dim, model.spec.output_dim)?;
    let (logits, tape) = forward(model, local, global, gates, &batch.inputs, mode)?;
    let loss = mean_cross_entropy(&logits, &batch.labels);
    let depth = model.spec.depth();
    let act = model.spec.activation;

    let mut layer_grads: Vec<Option<LayerGrads>> = (0..depth).map(|_| None).collect();
    let mut beta_grads = vec![0.0; depth];

    let mut g = softmax_ce_grad(&logits, &batch.labels); // dL/du at layer depth-1
    for l in (0..depth).rev() {
        let (s_local, s_global, gate_active) = match mode {
            ForwardMode::AdaptersOff => (0.0, 0.0, false),
            ForwardMode::LocalOnly => (1.0, 0.0, false),
            ForwardMode::GlobalOnly => (0.0, 1.0, false),
            ForwardMode::GatedDual => {
                let bt = sigmoid(gates.beta[l]);
                (1.0 - bt, bt, true)
            }
        };

        if gate_active {
            // dL/dbeta = sum g . (contrib_global - contrib_local) * sigmoid'
            let bt = sigmoid(gates.beta[l]);
            let mut acc = 0.0;
            for (gv, (cg, cl)) in g
                .data()
                .iter()
                .zip(tape.contrib_global[l].data().iter().zip(tape.contrib_local[l].data()))
            {
                acc += gv * (cg - cl);
            }
            beta_grads[l] = acc * bt * (1.0 - bt);
        }

        // Local adapter parameter grads.
        let h_in = &tape.layer_inputs[l];
        layer_grads[l] = Some(match &local.layers[l] {
            LayerAdapter::Conv(conv) => {
                if s_local != 0.0 {
                    let gb = g.matmul(&conv.b); // m x r
                    let da = gb.matmul_tn(h_in).scale(s_local); // r x d_in
                    let db = g.matmul_tn(&tape.a_out_local[l]).scale(s_local); // d_out x r
                    LayerGrads::Conv { a: da, b: db }
                } else {
                    LayerGrads::Conv {
                        a: Matrix::zeros(conv.a.rows(), conv.a.cols()),
                        b: Matrix::zeros(conv.b.rows(), conv.b.cols()),
                    }
                }
            }
            LayerAdapter::Pq(pq) => {
                if s_local != 0.0 {
                    let gb = g.matmul(&pq.b); // m x r
                    let dp = gb.matmul_tn(&tape.a_out_local[l]).scale(s_local); // r x r
                    let dq = column_sums(&gb).scale(s_local);
                    LayerGrads::Pq { p: dp, q: dq }
                } else {
                    LayerGrads::Pq {
                        p: Matrix::zeros(pq.rank, pq.rank),
                        q: Vector::zeros(pq.rank),
                    }
                }
            }
        });

        if l == 0 {
            break;
        }

        // Input gradient: backbone path + both adapter paths.
        let mut dh = g.matmul(&model.layer_weights[l]);
        if s_local != 0.0 {
            dh.axpy(1.0, &adapter_input_grad(&local.layers[l], &g, s_local));
        }
        if s_global != 0.0 {
            dh.axpy(1.0, &adapter_input_grad(&global.layers[l], &g, s_global));
        }
        mul_act_derivative(&mut dh, &tape.preacts[l - 1], act);
        g = dh;
    }

    Ok((
        loss,
        Grads {
            layers: layer_grads.into_iter().map(|x| x.unwrap()).collect(),
            beta: beta_grads,
        },
    ))
}

fn adapter_input_grad(ad: &LayerAdapter, g: &Matrix, scale: f64) -> Matrix {
    match ad {
        LayerAdapter::Conv(conv) => g.matmul(&conv.b).matmul(&conv.a).scale(scale),
        LayerAdapter::Pq(pq) => g
            .matmul(&pq.b)
            .matmul(&pq.p)
            .matmul(&pq.a)
            .scale(scale),
    }
}

/// Flattened gradient of the batch loss w.r.t. the probe model's final-layer
/// weight matrix (adapters absent, probe frozen; the gradient is computed,
/// never applied). Row-major over the d_out x d_in matrix.
pub fn last_layer_gradient(probe: &FrozenModel, batch: &Batch) -> Result<Vector> {
    if batch.is_empty() {
        return Err(Error::Empty {
            what: "batch".into(),
        });
    }
    batch.validate(probe.spec.input_dim, probe.spec.output_dim)?;
    let depth = probe.spec.depth();
    let act = probe.spec.activation;

    let mut h = batch.inputs.clone();
    for l in 0..depth - 1 {
        let mut u = h.matmul_nt(&probe.layer_weights[l]);
        add_bias(&mut u, &probe.layer_biases[l]);
        h = apply_act(&u, act);
    }
    let mut logits = h.matmul_nt(&probe.layer_weights[depth - 1]);
    add_bias(&mut logits, &probe.layer_biases[depth - 1]);

    let g = softmax_ce_grad(&logits, &batch.labels);
    let dw = g.matmul_tn(&h); // d_out x d_in
    Ok(Vector::from(dw.data().to_vec()))
}

/// Loss only (used by finite-difference oracles and evaluation).
pub fn loss_only(
    model: &FrozenModel,
    local: &AdapterSet,
    global: &AdapterSet,
    gates: &GateParams,
    batch: &Batch,
    mode: ForwardMode,
) -> Result<f64> {
    let (logits, _) = forward(model, local, global, gates, &batch.inputs, mode)?;
    Ok(mean_cross_entropy(&logits, &batch.labels))
}
