//! Per-client state machine: streaming data into episodic memory,
//! memory-only local training of the gated dual adapter, and the
//! relevance-probe gradient pipeline (EMA + sanitization).
//!
//! Only sanitized gradients and local adapters ever cross the client/server
//! boundary. The global adapter set is frozen the moment it arrives.

use crate::adapter::{AdapterSet, GateParams, LayerAdapter};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{last_layer_gradient, loss_and_grads, Batch, ForwardMode, FrozenModel, LayerGrads};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Shared sanitization parameters: one binary mask for every client in a
/// run, Gaussian noise scale, and the subsample ratio that sized the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanitizationSpec {
    pub mask: Vec<bool>,
    pub noise_scale: f64,
    pub subsample_ratio: f64,
}

impl SanitizationSpec {
    /// Draw a mask with exactly round(ratio * dim) active dimensions.
    pub fn generate(dim: usize, subsample_ratio: f64, noise_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let keep = (subsample_ratio * dim as f64).round() as usize;
        let keep = keep.min(dim);
        // partial Fisher-Yates over indices
        let mut idx: Vec<usize> = (0..dim).collect();
        for i in 0..keep {
            let j = rng.random_range(i..dim);
            idx.swap(i, j);
        }
        let mut mask = vec![false; dim];
        for &i in idx.iter().take(keep) {
            mask[i] = true;
        }
        SanitizationSpec {
            mask,
            noise_scale,
            subsample_ratio,
        }
    }

    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Stream/training schedule knobs for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub local_steps_per_round: usize,
    /// Probe frequency: the gradient probe fires on steps where
    /// step_index % probe_every == 0.
    pub probe_every: usize,
    /// EMA ratio for the decayed gradient.
    pub alpha: f64,
    pub lr_pq: f64,
    pub lr_other: f64,
    /// Optional SGD momentum; 0.0 is plain SGD.
    pub momentum: f64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_every == 0 {
            return Err(Error::invalid("StreamConfig", "probe_every must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("StreamConfig", "alpha must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("StreamConfig", "batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// One observed (input, label) sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: usize,
}

/// Everything a client owns between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub model_type_id: String,
    pub local_adapters: AdapterSet,
    pub global_adapters: AdapterSet,
    pub gates: GateParams,
    /// Append-only episodic memory (memory-infinite setting).
    pub memory: Vec<Sample>,
    /// Decayed (EMA) probe gradient; zero until the first probe lands.
    pub ema_gradient: Vector,
    /// False until the EMA has absorbed at least one probe gradient. The
    /// first transmission before any probe is suppressed so the server can
    /// apply its cold-start rule instead of reading pure noise.
    pub has_probe_evidence: bool,
    pub batch_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    momentum_buf: Option<MomentumBuf>,
}

#[derive(Debug, Clone)]
struct MomentumBuf {
    layers: Vec<LayerGrads>,
    beta: Vec<f64>,
}

impl ClientState {
    pub fn new(
        client_id: usize,
        model_type_id: &str,
        adapters: AdapterSet,
        probe_dim: usize,
        batch_rng: ChaCha8Rng,
        noise_rng: ChaCha8Rng,
    ) -> Self {
        let depth = adapters.depth();
        ClientState {
            client_id,
            model_type_id: model_type_id.to_string(),
            local_adapters: adapters.clone(),
            global_adapters: adapters,
            gates: GateParams::zeros(depth),
            memory: Vec::new(),
            ema_gradient: Vector::zeros(probe_dim),
            has_probe_evidence: false,
            batch_rng,
            noise_rng,
            momentum_buf: None,
        }
    }

    /// Append one streamed sample to episodic memory.
    pub fn observe(&mut self, sample: Sample) {
        self.memory.push(sample);
    }

    /// Replace the global adapter set; it stays frozen during local training.
    pub fn receive_global(&mut self, global: AdapterSet) -> Result<()> {
        if global.layers.len() != self.local_adapters.layers.len() {
            return Err(Error::dims(
                "receive_global",
                self.local_adapters.layers.len(),
                global.layers.len(),
            ));
        }
        for (l, (g, loc)) in global
            .layers
            .iter()
            .zip(&self.local_adapters.layers)
            .enumerate()
        {
            if g.d_in() != loc.d_in() || g.d_out() != loc.d_out() {
                return Err(Error::DimMismatch {
                    context: format!("receive_global layer {}", l + 1),
                    expected: format!("{}->{}", loc.d_in(), loc.d_out()),
                    got: format!("{}->{}", g.d_in(), g.d_out()),
                });
            }
        }
        self.global_adapters = global;
        Ok(())
    }

    /// Uniform batch from episodic memory (with replacement).
    fn draw_batch(&mut self, input_dim: usize, batch_size: usize) -> Batch {
        let n = self.memory.len();
        let mut inputs = Matrix::zeros(batch_size, input_dim);
        let mut labels = Vec::with_capacity(batch_size);
        for b in 0..batch_size {
            let pick = self.batch_rng.random_range(0..n);
            let s = &self.memory[pick];
            for (j, v) in s.input.iter().enumerate() {
                inputs.set(b, j, *v);
            }
            labels.push(s.label);
        }
        Batch { inputs, labels }
    }
}

/// One memory-only training step. Draws a uniform batch, descends the gated
/// dual loss on the trainable parameters (P/Q at lr_pq; conventional A/B and
/// the gates at lr_other), and fires the probe on schedule. The probe model
/// and the global adapters are never touched.
pub fn local_step(
    state: &mut ClientState,
    frozen_model: &FrozenModel,
    probe_model: &FrozenModel,
    step_index: usize,
    cfg: &StreamConfig,
) -> Result<(f64, Option<Vector>)> {
    cfg.validate()?;
    if state.memory.is_empty() {
        return Err(Error::Empty {
            what: "episodic memory".into(),
        });
    }
    let batch = state.draw_batch(frozen_model.spec.input_dim, cfg.batch_size);
    let (loss, grads) = loss_and_grads(
        frozen_model,
        &state.local_adapters,
        &state.global_adapters,
        &state.gates,
        &batch,
        ForwardMode::GatedDual,
    )?;

    apply_sgd(state, &grads.layers, &grads.beta, cfg);

    let probe = if step_index % cfg.probe_every == 0 {
        let probe_batch = if probe_model.spec.input_dim == frozen_model.spec.input_dim {
            batch
        } else {
            return Err(Error::dims(
                "probe input",
                frozen_model.spec.input_dim,
                probe_model.spec.input_dim,
            ));
        };
        Some(last_layer_gradient(probe_model, &probe_batch)?)
    } else {
        None
    };
    Ok((loss, probe))
}

fn apply_sgd(state: &mut ClientState, layer_grads: &[LayerGrads], beta_grads: &[f64], cfg: &StreamConfig) {
    // Fold momentum into an effective gradient buffer when requested.
    let effective: (Vec<LayerGrads>, Vec<f64>) = if cfg.momentum > 0.0 {
        let buf = state.momentum_buf.get_or_insert_with(|| MomentumBuf {
            layers: layer_grads.to_vec(),
            beta: vec![0.0; beta_grads.len()],
        });
        for (v, g) in buf.layers.iter_mut().zip(layer_grads) {
            match (v, g) {
                (LayerGrads::Conv { a: va, b: vb }, LayerGrads::Conv { a: ga, b: gb }) => {
                    *va = va.scale(cfg.momentum).add(ga);
                    *vb = vb.scale(cfg.momentum).add(gb);
                }
                (LayerGrads::Pq { p: vp, q: vq }, LayerGrads::Pq { p: gp, q: gq }) => {
                    *vp = vp.scale(cfg.momentum).add(gp);
                    *vq = vq.scale(cfg.momentum).add(gq);
                }
                _ => unreachable!("momentum buffer shape drift"),
            }
        }
        for (v, g) in buf.beta.iter_mut().zip(beta_grads) {
            *v = *v * cfg.momentum + g;
        }
        (buf.layers.clone(), buf.beta.clone())
    } else {
        (layer_grads.to_vec(), beta_grads.to_vec())
    };

    for (layer, grad) in state.local_adapters.layers.iter_mut().zip(&effective.0) {
        match (layer, grad) {
            (LayerAdapter::Conv(conv), LayerGrads::Conv { a, b }) => {
                conv.a.axpy(-cfg.lr_other, a);
                conv.b.axpy(-cfg.lr_other, b);
            }
            (LayerAdapter::Pq(pq), LayerGrads::Pq { p, q }) => {
                pq.p.axpy(-cfg.lr_pq, p);
                for (qv, gv) in pq.q.data_mut().iter_mut().zip(q.data()) {
                    *qv -= cfg.lr_pq * gv;
                }
            }
            _ => unreachable!("gradient shape drift"),
        }
    }
    for (b, g) in state.gates.beta.iter_mut().zip(&effective.1) {
        *b -= cfg.lr_other * g;
    }
}

/// EMA update of the decayed gradient: (1 - alpha) ghat + alpha g.
pub fn update_ema(ghat: &Vector, g: &Vector, alpha: f64) -> Result<Vector> {
    if ghat.dim() != g.dim() {
        return Err(Error::dims("update_ema", ghat.dim(), g.dim()));
    }
    Ok(ghat.scale(1.0 - alpha).add(&g.scale(alpha)))
}

/// Transmission-time sanitization: add fresh Gaussian noise scaled by mu,
/// then zero every masked-out dimension.
pub fn sanitize(ghat: &Vector, spec: &SanitizationSpec, rng: &mut ChaCha8Rng) -> Result<Vector> {
    if ghat.dim() != spec.mask.len() {
        return Err(Error::dims("sanitize", spec.mask.len(), ghat.dim()));
    }
    let mut out = vec![0.0; ghat.dim()];
    for (i, o) in out.iter_mut().enumerate() {
        // draw noise for every dimension so the stream consumption does not
        // depend on the mask
        let eps = gaussian(rng);
        if spec.mask[i] {
            *o = ghat.data()[i] + spec.noise_scale * eps;
        }
    }
    Ok(Vector::from(out))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// What the client uploads at the end of a round.
#[derive(Debug, Clone)]
pub struct ClientPayload {
    pub client_id: usize,
    pub model_type_id: String,
    pub local_adapters: AdapterSet,
    /// None while the client has no probe evidence (cold start).
    pub sanitized_gradient: Option<Vector>,
}

/// Run one round of local training: consume the round's stream chunk
/// (observe-then-step, with any extra steps replaying memory), EMA the mean
/// of the round's probe gradients, and build the upload payload.
pub fn run_round(
    state: &mut ClientState,
    frozen_model: &FrozenModel,
    probe_model: &FrozenModel,
    chunk: &[Sample],
    cfg: &StreamConfig,
    sanitation: &SanitizationSpec,
) -> Result<(Vec<f64>, ClientPayload)> {
    let mut losses = Vec::with_capacity(cfg.local_steps_per_round);
    let mut probe_grads: Vec<Vector> = Vec::new();
    for step in 0..cfg.local_steps_per_round {
        if step < chunk.len() {
            state.observe(chunk[step].clone());
        }
        let (loss, probe) = local_step(state, frozen_model, probe_model, step, cfg)?;
        losses.push(loss);
        if let Some(g) = probe {
            probe_grads.push(g);
        }
    }
    // any stream overflow beyond the step budget still lands in memory
    for sample in chunk.iter().skip(cfg.local_steps_per_round) {
        state.observe(sample.clone());
    }

    if !probe_grads.is_empty() {
        let dim = probe_grads[0].dim();
        let mut mean = Vector::zeros(dim);
        for g in &probe_grads {
            mean = mean.add(g);
        }
        let mean = mean.scale(1.0 / probe_grads.len() as f64);
        state.ema_gradient = update_ema(&state.ema_gradient, &mean, cfg.alpha)?;
        state.has_probe_evidence = true;
    }

    let sanitized = if state.has_probe_evidence {
        Some(sanitize(&state.ema_gradient, sanitation, &mut state.noise_rng)?)
    } else {
        None
    };

    Ok((
        losses,
        ClientPayload {
            client_id: state.client_id,
            model_type_id: state.model_type_id.clone(),
            local_adapters: state.local_adapters.clone(),
            sanitized_gradient: sanitized,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterSet;
    use crate::model::{build_frozen, ModelSpec};
    use crate::rng::stream_rng;

    fn cfg() -> StreamConfig {
        StreamConfig {
            batch_size: 8,
            local_steps_per_round: 40,
            probe_every: 10,
            alpha: 0.5,
            lr_pq: 5e-2,
            lr_other: 2e-2,
            momentum: 0.0,
        }
    }

    fn toy_client(seed: u64) -> (ClientState, FrozenModel, FrozenModel) {
        let spec = ModelSpec::uniform("small", 4, 16, 8, 4);
        let model = build_frozen(&spec, 7).unwrap();
        let probe = model.clone();
        let adapters = AdapterSet::init(&spec.widths, 2, 4, 3).unwrap();
        let probe_dim = 4 * 16;
        let state = ClientState::new(
            0,
            "small",
            adapters,
            probe_dim,
            stream_rng(seed, "batch", 0),
            stream_rng(seed, "noise", 0),
        );
        (state, model, probe)
    }

    fn linear_separable_samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = stream_rng(seed, "samples", 0);
        (0..n)
            .map(|i| {
                let label = i % 4;
                let mut input = vec![0.0; 8];
                input[label] = 2.0;
                for v in input.iter_mut() {
                    *v += 0.1 * rng.random_range(-1.0..1.0);
                }
                Sample { input, label }
            })
            .collect()
    }

    #[test]
    fn observe_appends_in_order() {
        let (mut state, _, _) = toy_client(1);
        let samples = linear_separable_samples(5, 2);
        for s in &samples {
            state.observe(s.clone());
        }
        assert_eq!(state.memory.len(), 5);
        for (m, s) in state.memory.iter().zip(&samples) {
            assert_eq!(m, s);
        }
    }

    #[test]
    fn local_step_rejects_empty_memory() {
        let (mut state, model, probe) = toy_client(1);
        assert!(matches!(
            local_step(&mut state, &model, &probe, 0, &cfg()),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn identical_runs_yield_identical_trajectories() {
        let run = || {
            let (mut state, model, probe) = toy_client(5);
            let chunk = linear_separable_samples(40, 3);
            let spec = SanitizationSpec::generate(64, 0.4, 1e-4, &mut stream_rng(9, "mask", 0));
            let (losses, payload) = run_round(&mut state, &model, &probe, &chunk, &cfg(), &spec).unwrap();
            (losses, payload.sanitized_gradient)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1.map(|v| v.data().to_vec()), g2.map(|v| v.data().to_vec()));
    }

    #[test]
    fn global_adapters_stay_bit_identical_through_training() {
        let (mut state, model, probe) = toy_client(6);
        let frozen_global = state.global_adapters.clone();
        let chunk = linear_separable_samples(60, 4);
        for s in &chunk {
            state.observe(s.clone());
        }
        for step in 0..100 {
            local_step(&mut state, &model, &probe, step, &cfg()).unwrap();
        }
        assert_eq!(state.global_adapters, frozen_global);
        // and local adapters did move
        assert_ne!(state.local_adapters, frozen_global);
    }

    #[test]
    fn loss_decreases_on_separable_task() {
        let (mut state, model, probe) = toy_client(7);
        let chunk = linear_separable_samples(100, 5);
        for s in &chunk {
            state.observe(s.clone());
        }
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..200 {
            let (loss, _) = local_step(&mut state, &model, &probe, step, &cfg()).unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(last < 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn probes_fire_only_on_schedule() {
        let (mut state, model, probe) = toy_client(8);
        for s in linear_separable_samples(20, 6) {
            state.observe(s);
        }
        let c = cfg();
        for step in 0..25 {
            let (_, p) = local_step(&mut state, &model, &probe, step, &c).unwrap();
            assert_eq!(p.is_some(), step % c.probe_every == 0, "step {step}");
        }
    }

    #[test]
    fn update_ema_arithmetic() {
        let z = Vector::zeros(2);
        let g1 = Vector::from(vec![1.0, 0.0]);
        let e1 = update_ema(&z, &g1, 0.5).unwrap();
        assert_eq!(e1.data(), &[0.5, 0.0]);
        let g2 = Vector::from(vec![0.0, 1.0]);
        let e2 = update_ema(&e1, &g2, 0.5).unwrap();
        assert_eq!(e2.data(), &[0.25, 0.5]);
        // alpha = 1 tracks the latest gradient exactly
        let e3 = update_ema(&e2, &g1, 1.0).unwrap();
        assert_eq!(e3.data(), g1.data());
    }

    #[test]
    fn ema_is_order_sensitive_where_plain_mean_is_not() {
        let g_a = Vector::from(vec![1.0, 0.0, 0.0]);
        let g_b = Vector::from(vec![0.0, 1.0, 0.0]);
        let alpha = 0.5;
        let z = Vector::zeros(3);
        let ema_ab = update_ema(&update_ema(&z, &g_a, alpha).unwrap(), &g_b, alpha).unwrap();
        let ema_ba = update_ema(&update_ema(&z, &g_b, alpha).unwrap(), &g_a, alpha).unwrap();
        let mean_ab = g_a.add(&g_b).scale(0.5);
        let mean_ba = g_b.add(&g_a).scale(0.5);
        assert!(mean_ab.sub(&mean_ba).norm() < 1e-12);
        assert!(ema_ab.sub(&ema_ba).norm() > 0.1);
    }

    #[test]
    fn sanitize_contracts() {
        let mut rng = stream_rng(11, "mask", 0);
        let spec = SanitizationSpec::generate(10, 0.4, 0.0, &mut rng);
        assert_eq!(spec.popcount(), 4);
        let g = Vector::from((0..10).map(|i| i as f64).collect::<Vec<_>>());
        let mut noise_rng = stream_rng(11, "noise", 0);
        let s = sanitize(&g, &spec, &mut noise_rng).unwrap();
        // mu = 0: masked entries exact, others exactly zero
        for i in 0..10 {
            if spec.mask[i] {
                assert_eq!(s.data()[i], g.data()[i]);
            } else {
                assert_eq!(s.data()[i], 0.0);
            }
        }
        // nonzero count bounded by popcount
        let nz = s.data().iter().filter(|v| **v != 0.0).count();
        assert!(nz <= spec.popcount());
    }

    #[test]
    fn sanitize_noise_std_matches_mu() {
        let dim = 1000;
        let mut mask_rng = stream_rng(12, "mask", 0);
        let spec = SanitizationSpec::generate(dim, 1.0, 1.0, &mut mask_rng);
        let z = Vector::zeros(dim);
        let mut noise_rng = stream_rng(12, "noise", 0);
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..100 {
            let s = sanitize(&z, &spec, &mut noise_rng).unwrap();
            for v in s.data() {
                acc += v * v;
                count += 1;
            }
        }
        let std = (acc / count as f64).sqrt();
        assert!((std - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn sanitize_is_deterministic_for_fixed_seed() {
        let mut mask_rng = stream_rng(13, "mask", 0);
        let spec = SanitizationSpec::generate(32, 0.4, 1e-4, &mut mask_rng);
        let g = Vector::from((0..32).map(|i| (i as f64).sin()).collect::<Vec<_>>());
        let a = sanitize(&g, &spec, &mut stream_rng(13, "noise", 7)).unwrap();
        let b = sanitize(&g, &spec, &mut stream_rng(13, "noise", 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn receive_global_swap_and_freeze() {
        let (mut state, model, probe) = toy_client(20);
        for s in linear_separable_samples(30, 8) {
            state.observe(s);
        }
        // train a bit so local differs from global
        for step in 0..20 {
            local_step(&mut state, &model, &probe, step, &cfg()).unwrap();
        }
        let new_global = state.local_adapters.clone();
        state.receive_global(new_global.clone()).unwrap();
        for step in 0..20 {
            local_step(&mut state, &model, &probe, step, &cfg()).unwrap();
        }
        assert_eq!(state.global_adapters, new_global);

        // dimension mismatch rejected
        let bad = AdapterSet::init(&[(8, 16), (16, 16), (16, 16), (16, 5)], 2, 4, 0).unwrap();
        assert!(state.receive_global(bad).is_err());
    }

    #[test]
    fn training_batches_come_from_memory() {
        let (mut state, _, _) = toy_client(21);
        let samples = linear_separable_samples(10, 9);
        for s in &samples {
            state.observe(s.clone());
        }
        let batch = state.draw_batch(8, 16);
        for b in 0..16 {
            let row = batch.inputs.row(b);
            let found = state
                .memory
                .iter()
                .any(|s| s.input == row && s.label == batch.labels[b]);
            assert!(found, "batch row {b} not in memory");
        }
    }
}
