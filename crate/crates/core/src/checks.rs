//! Self-contained property suites with fixed seeds, behind the `check`
//! command. Each suite prints one pass/fail line per property; any failure
//! is a nonzero exit for the CLI.

use crate::adapter::{delta_weight, init_orthogonal, span_dimension, AdapterSet, GateParams, LayerAdapter};
use crate::align::{align_all, AlignmentConfig, PublicDataset};
use crate::bench::{generate_scenario, ScenarioConfig};
use crate::client::{update_ema, ClientPayload};
use crate::error::{Error, Result};
use crate::linalg::{cosine, Matrix, Vector};
use crate::model::{build_frozen, loss_and_grads, loss_only, Batch, ForwardMode, LayerGrads, ModelSpec};
use crate::par::ExecMode;
use crate::rng::stream_rng;
use crate::server::{aggregate, aggregation_weights, relevance_matrix};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub results: Vec<PropertyResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{} {}::{} {}\n",
                if r.passed { "PASS" } else { "FAIL" },
                self.suite,
                r.name,
                r.detail
            ));
        }
        out.push_str(&format!(
            "suite {}: {}\n",
            self.suite,
            if self.passed() { "ok" } else { "FAILED" }
        ));
        out
    }
}

pub const SUITES: &[&str] = &["theorem1", "theorem2", "gradients", "alignment", "rela"];

pub fn run_suite(suite: &str, mode: ExecMode) -> Result<SuiteReport> {
    match suite {
        "theorem1" => Ok(suite_theorem1()),
        "theorem2" => Ok(suite_theorem2()),
        "gradients" => Ok(suite_gradients()),
        "alignment" => Ok(suite_alignment(mode)),
        "rela" => Ok(suite_rela()),
        other => Err(Error::invalid(
            "check",
            format!("unknown suite `{other}` (expected {})", SUITES.join("|")),
        )),
    }
}

fn result(name: &str, passed: bool, detail: String) -> PropertyResult {
    PropertyResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Normwise relative error between an analytic gradient tensor and its
/// central-finite-difference estimate from a loss-perturbation closure.
fn fd_rel_err(analytic: &[f64], h: f64, mut apply: impl FnMut(usize, f64) -> f64) -> f64 {
    let mut num = 0.0;
    let mut fd_norm = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let lp = apply(k, h);
        let lm = apply(k, -h);
        let f = (lp - lm) / (2.0 * h);
        num += (a - f) * (a - f);
        fd_norm += f * f;
    }
    let an_norm: f64 = analytic.iter().map(|a| a * a).sum();
    num.sqrt() / fd_norm.sqrt().max(an_norm.sqrt()).max(1e-8)
}

/// Span-dimension property: orthonormal factors span exactly r^2 dimensions;
/// a deliberately rank-deficient A spans fewer.
pub fn suite_theorem1() -> SuiteReport {
    let mut results = Vec::new();

    let mut worst: Option<(u64, usize, usize)> = None;
    let mut all_full = true;
    for seed in 0..50u64 {
        let mut rng = stream_rng(seed, "theorem1", 0);
        let r = [2usize, 3, 4][rng.random_range(0..3)];
        let d_in = rng.random_range(r..=16);
        let d_out = rng.random_range(r..=16);
        let ad = init_orthogonal(r, d_in, d_out, seed).expect("init");
        let rank = span_dimension(&ad).expect("span");
        if rank != r * r {
            all_full = false;
            worst = Some((seed, rank, r * r));
        }
    }
    results.push(result(
        "orthonormal_span_is_r_squared",
        all_full,
        match worst {
            None => "rank == r^2 across 50 seeds (r in {2,3,4}, d up to 16)".into(),
            Some((s, got, want)) => format!("seed {s}: rank {got} != {want}"),
        },
    ));

    let mut deficient_ok = true;
    for seed in 0..10u64 {
        let mut ad = init_orthogonal(3, 12, 12, 1000 + seed).expect("init");
        let row: Vec<f64> = ad.a.row(0).to_vec();
        for (j, v) in row.iter().enumerate() {
            ad.a.set(1, j, *v);
        }
        if span_dimension(&ad).expect("span") >= 9 {
            deficient_ok = false;
        }
    }
    results.push(result(
        "rank_deficient_a_spans_less",
        deficient_ok,
        "duplicated A row drops the span below r^2".into(),
    ));

    SuiteReport {
        suite: "theorem1".into(),
        results,
    }
}

/// Zero-aggregation-error property: with shared frozen orthonormal A/B and
/// Q = 0, averaging P on the server equals averaging the full updates.
pub fn suite_theorem2() -> SuiteReport {
    let mut max_err: f64 = 0.0;
    let mut checked = 0usize;
    for case in 0..100u64 {
        let mut rng = stream_rng(case, "theorem2", 0);
        let n = rng.random_range(2..=8);
        let r = [2usize, 4, 8][rng.random_range(0..3)];
        let dims = [8usize, 16, 32];
        let d_in = dims[rng.random_range(0..3)].max(r);
        let d_out = dims[rng.random_range(0..3)].max(r);
        let base = init_orthogonal(r, d_in, d_out, case).expect("init");

        // payloads share the frozen factors and differ only in P
        let mut payloads = Vec::with_capacity(n);
        for id in 0..n {
            let mut set = AdapterSet::init(&[(d_in, d_out)], 1, r, case).expect("set");
            let pq = set.pq_at_block_mut(0);
            pq.a = base.a.clone();
            pq.b = base.b.clone();
            pq.p = Matrix::from_fn(r, r, |_, _| rng.random_range(-2.0..2.0));
            pq.q = Vector::zeros(r);
            payloads.push(ClientPayload {
                client_id: id,
                model_type_id: "shared".into(),
                local_adapters: set,
                sanitized_gradient: None,
            });
        }
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for (j, v) in row.iter().enumerate() {
                w.set(i, j, v / sum);
            }
        }

        // practical route: server-side factor averaging, then B P* A
        let dispatch = aggregate(&payloads, &w).expect("aggregate");
        for i in 0..n {
            let (practical, _) = delta_weight(dispatch.per_client[i].pq_at_block(0));
            // ideal route: average the full updates directly
            let mut ideal = Matrix::zeros(d_out, d_in);
            for j in 0..n {
                let (dj, _) = delta_weight(payloads[j].local_adapters.pq_at_block(0));
                ideal.axpy(w.at(i, j), &dj);
            }
            let err = practical.sub(&ideal).frobenius_norm();
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    let passed = max_err <= 1e-10;
    SuiteReport {
        suite: "theorem2".into(),
        results: vec![result(
            "aggregation_error_zero",
            passed,
            format!("max Frobenius error {max_err:.3e} over {checked} client updates (tol 1e-10)"),
        )],
    }
}

/// Central finite differences (h = 1e-4) for every trainable parameter
/// class on a depth-4 width-16 net at 20 random parameter points. Returns
/// the worst per-tensor normwise relative error through the suite report.
pub fn suite_gradients() -> SuiteReport {
    let spec = ModelSpec::uniform("fd", 4, 16, 8, 4);
    let h = 1e-4;
    let mut worst: f64 = 0.0;

    for point in 0..20u64 {
        let mut rng = stream_rng(point, "fd-point", 0);
        let model = build_frozen(&spec, point).expect("model");
        let mut local = AdapterSet::init(&spec.widths, 2, 4, point + 1).expect("local");
        let mut global = AdapterSet::init(&spec.widths, 2, 4, point + 2).expect("global");
        for set in [&mut local, &mut global] {
            for layer in &mut set.layers {
                match layer {
                    LayerAdapter::Conv(c) => {
                        c.a = Matrix::from_fn(c.a.rows(), c.a.cols(), |_, _| rng.random_range(-0.4..0.4));
                        c.b = Matrix::from_fn(c.b.rows(), c.b.cols(), |_, _| rng.random_range(-0.4..0.4));
                    }
                    LayerAdapter::Pq(p) => {
                        p.p = Matrix::from_fn(p.rank, p.rank, |_, _| rng.random_range(-0.4..0.4));
                        p.q = Vector::from(
                            (0..p.rank).map(|_| rng.random_range(-0.4..0.4)).collect::<Vec<_>>(),
                        );
                    }
                }
            }
        }
        let mut gates = GateParams::zeros(spec.depth());
        for b in &mut gates.beta {
            *b = rng.random_range(-1.0..1.0);
        }
        let inputs = Matrix::from_fn(8, spec.input_dim, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..8).map(|_| rng.random_range(0..spec.output_dim)).collect();
        let batch = Batch { inputs, labels };
        let mode = ForwardMode::GatedDual;

        let (_, grads) = loss_and_grads(&model, &local, &global, &gates, &batch, mode).expect("grads");

        for l in 0..spec.depth() {
            match &grads.layers[l] {
                LayerGrads::Conv { a: da, b: db } => {
                    let e = fd_rel_err(da.data(), h, |k, eps| {
                        let mut set = local.clone();
                        if let LayerAdapter::Conv(c) = &mut set.layers[l] {
                            c.a.data_mut()[k] += eps;
                        }
                        loss_only(&model, &set, &global, &gates, &batch, mode).unwrap()
                    });
                    worst = worst.max(e);
                    let e = fd_rel_err(db.data(), h, |k, eps| {
                        let mut set = local.clone();
                        if let LayerAdapter::Conv(c) = &mut set.layers[l] {
                            c.b.data_mut()[k] += eps;
                        }
                        loss_only(&model, &set, &global, &gates, &batch, mode).unwrap()
                    });
                    worst = worst.max(e);
                }
                LayerGrads::Pq { p: dp, q: dq } => {
                    let e = fd_rel_err(dp.data(), h, |k, eps| {
                        let mut set = local.clone();
                        if let LayerAdapter::Pq(p) = &mut set.layers[l] {
                            p.p.data_mut()[k] += eps;
                        }
                        loss_only(&model, &set, &global, &gates, &batch, mode).unwrap()
                    });
                    worst = worst.max(e);
                    let e = fd_rel_err(dq.data(), h, |k, eps| {
                        let mut set = local.clone();
                        if let LayerAdapter::Pq(p) = &mut set.layers[l] {
                            p.q.data_mut()[k] += eps;
                        }
                        loss_only(&model, &set, &global, &gates, &batch, mode).unwrap()
                    });
                    worst = worst.max(e);
                }
            }
        }
        let e = fd_rel_err(&grads.beta, h, |k, eps| {
            let mut gg = gates.clone();
            gg.beta[k] += eps;
            loss_only(&model, &local, &global, &gg, &batch, mode).unwrap()
        });
        worst = worst.max(e);
    }

    let passed = worst <= 1e-4;
    SuiteReport {
        suite: "gradients".into(),
        results: vec![result(
            "finite_difference_match",
            passed,
            format!("max relative FD error {worst:.3e} over 20 points (tol 1e-4)"),
        )],
    }
}

/// Default two-type toy pair, full alignment pipeline, per-layer efficacy.
pub fn suite_alignment(mode: ExecMode) -> SuiteReport {
    let _ = mode;
    let mut results = Vec::new();

    let cfg = ScenarioConfig::default();
    let scenario = generate_scenario(&cfg, 0).expect("scenario");
    let models: Vec<_> = scenario
        .frozen_models
        .iter()
        .cloned()
        .zip(scenario.init_adapters.iter().cloned())
        .collect();
    let align_cfg = AlignmentConfig {
        lambda: cfg.hyper.lambda,
        lr: cfg.hyper.align_lr,
        epochs: cfg.hyper.align_epochs,
        public_batch_size: cfg.hyper.align_batch_size,
        ..Default::default()
    };
    let public: &PublicDataset = &scenario.public_data;
    let (aligned, report) = align_all(&models, public, &align_cfg).expect("align_all");

    let mut halved = true;
    let mut details = Vec::new();
    for ty in &report.types {
        for b in &ty.blocks {
            let ratio = if b.pre_gap > 0.0 {
                b.post_gap / b.pre_gap
            } else {
                0.0
            };
            details.push(format!(
                "{} block {}: gap {:.4} -> {:.4} ({:.1}%)",
                ty.model_type_id,
                b.block,
                b.pre_gap,
                b.post_gap,
                ratio * 100.0
            ));
            if ratio > 0.5 {
                halved = false;
            }
        }
    }
    results.push(result(
        "a_feature_gap_halved_per_layer",
        halved,
        details.join("; "),
    ));

    let mut ortho_ok = true;
    let mut worst_gap: f64 = 0.0;
    for set in &aligned {
        for k in 0..set.n_blocks() {
            let pq = set.pq_at_block(k);
            worst_gap = worst_gap.max(pq.a_orthonormality_gap());
            worst_gap = worst_gap.max(pq.b_orthonormality_gap());
            if pq.a_orthonormality_gap() > 1e-6 || pq.b_orthonormality_gap() > 1e-6 {
                ortho_ok = false;
            }
        }
    }
    results.push(result(
        "orthonormality_after_pipeline",
        ortho_ok,
        format!("worst Gram gap {worst_gap:.3e} (tol 1e-6)"),
    ));

    let pivot_unchanged = aligned[0] == models[0].1 || aligned[1] == models[1].1;
    results.push(result(
        "pivot_bit_unchanged",
        pivot_unchanged,
        "one type is the pivot and survives alignment bit-for-bit".into(),
    ));

    SuiteReport {
        suite: "alignment".into(),
        results,
    }
}

/// RELA weight algebra: row-stochasticity, the closed-form two-client case,
/// cosine scale invariance, and the EMA order-sensitivity motivation.
pub fn suite_rela() -> SuiteReport {
    let mut results = Vec::new();

    // row stochasticity over random similarity matrices
    let mut stochastic = true;
    let mut worst_row_gap: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = stream_rng(seed, "rela-s", 0);
        let n = rng.random_range(2..=8);
        let grads: Vec<Option<Vector>> = (0..n)
            .map(|_| {
                if rng.random_range(0.0..1.0) < 0.15 {
                    None // degenerate client
                } else {
                    Some(Vector::from(
                        (0..12).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
                    ))
                }
            })
            .collect();
        let (s, degenerate) = relevance_matrix(&grads).expect("relevance");
        let w = aggregation_weights(&s, 0.5, &degenerate).expect("weights");
        for i in 0..n {
            let sum: f64 = w.row(i).iter().sum();
            worst_row_gap = worst_row_gap.max((sum - 1.0).abs());
            if (sum - 1.0).abs() > 1e-9 || w.row(i).iter().any(|&v| v < 0.0) {
                stochastic = false;
            }
        }
    }
    results.push(result(
        "rows_stochastic",
        stochastic,
        format!("worst |row sum - 1| = {worst_row_gap:.3e} over 50 random rounds (tol 1e-9)"),
    ));

    // closed-form N=2 case
    let s = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).expect("s");
    let w = aggregation_weights(&s, 0.5, &[false, false]).expect("w");
    let expected = (2.0f64).exp() / ((2.0f64).exp() + 1.0);
    let err = (w.at(0, 0) - expected).abs();
    results.push(result(
        "closed_form_two_client_softmax",
        err <= 1e-9,
        format!("w11 = {} vs e^2/(e^2+1) = {expected} (err {err:.3e})", w.at(0, 0)),
    ));

    // scale invariance: weights identical under positive per-client rescaling
    let mut scale_ok = true;
    for seed in 0..20u64 {
        let mut rng = stream_rng(seed, "rela-scale", 0);
        let n = 4;
        let grads: Vec<Vector> = (0..n)
            .map(|_| Vector::from((0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let scaled: Vec<Option<Vector>> = grads
            .iter()
            .map(|g| Some(g.scale(rng.random_range(0.01..100.0))))
            .collect();
        let plain: Vec<Option<Vector>> = grads.iter().map(|g| Some(g.clone())).collect();
        let (s1, d1) = relevance_matrix(&plain).expect("rel");
        let (s2, d2) = relevance_matrix(&scaled).expect("rel");
        let w1 = aggregation_weights(&s1, 0.5, &d1).expect("w");
        let w2 = aggregation_weights(&s2, 0.5, &d2).expect("w");
        if w1.sub(&w2).max_abs() > 1e-12 {
            scale_ok = false;
        }
    }
    results.push(result(
        "cosine_scale_invariance",
        scale_ok,
        "weights unchanged under positive per-client gradient rescaling".into(),
    ));

    // EMA order sensitivity: A->B vs B->A diverge while plain means agree
    let g_a = Vector::from(vec![1.0, 0.0, 0.0, 0.0]);
    let g_b = Vector::from(vec![0.0, 1.0, 0.0, 0.0]);
    let alpha = 0.5;
    let z = Vector::zeros(4);
    let ema_ab = update_ema(&update_ema(&z, &g_a, alpha).unwrap(), &g_b, alpha).unwrap();
    let ema_ba = update_ema(&update_ema(&z, &g_b, alpha).unwrap(), &g_a, alpha).unwrap();
    let mean_gap = g_a
        .add(&g_b)
        .scale(0.5)
        .sub(&g_b.add(&g_a).scale(0.5))
        .norm();
    let ema_gap = ema_ab.sub(&ema_ba).norm();
    results.push(result(
        "ema_order_sensitivity",
        mean_gap < 1e-12 && ema_gap > 0.1,
        format!("plain-mean gap {mean_gap:.3e}, EMA gap {ema_gap:.3}"),
    ));

    // monotonicity: cos ordering implies weight ordering
    let mut mono_ok = true;
    for seed in 0..20u64 {
        let mut rng = stream_rng(seed, "rela-mono", 0);
        let n = 5;
        let mut s = Matrix::identity(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(-1.0..1.0);
                s.set(i, j, v);
                s.set(j, i, v);
            }
        }
        let w = aggregation_weights(&s, 0.5, &vec![false; n]).expect("w");
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if s.at(i, j) > s.at(i, k) && w.at(i, j) <= w.at(i, k) {
                        mono_ok = false;
                    }
                }
            }
        }
    }
    results.push(result(
        "weight_monotone_in_similarity",
        mono_ok,
        "cos(i,j) > cos(i,k) implies w_ij > w_ik".into(),
    ));

    // degenerate cosine rule
    let z2 = Vector::zeros(3);
    let c = cosine(&z2, &z2).expect("cosine");
    results.push(result(
        "degenerate_cosine_flagged_zero",
        c.value == 0.0 && c.degenerate,
        "cos(0, 0) = 0 with the degenerate flag set".into(),
    ));

    SuiteReport {
        suite: "rela".into(),
        results,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theorem_suites_pass() {
        let t1 = suite_theorem1();
        assert!(t1.passed(), "{}", t1.render_text());
        let t2 = suite_theorem2();
        assert!(t2.passed(), "{}", t2.render_text());
    }

    #[test]
    fn rela_suite_passes() {
        let r = suite_rela();
        assert!(r.passed(), "{}", r.render_text());
    }

    #[test]
    fn unknown_suite_rejected() {
        assert!(run_suite("nope", ExecMode::default()).is_err());
    }
}
