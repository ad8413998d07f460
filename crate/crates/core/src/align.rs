//! One-shot pre-federation alignment of PQ-LoRA adapters across
//! heterogeneous model types.
//!
//! For every non-pivot model type and every block ordinal k:
//!   1. A is fit by gradient descent to match the pivot's r-dim A-features
//!      on public data, with an orthogonality penalty on its row Gram;
//!   2. A is snapped to the closest row-orthonormal matrix via SVD;
//!   3. B is rebuilt through CCA between the two models' B-path features;
//!   4. P and Q are copied from the pivot so all types share one init.
//!
//! Alignment runs exactly once, before any federation round, and never
//! mutates the pivot.

use crate::adapter::{AdapterSet, GateParams, PqLoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::{cca, cka, nearest_orthogonal, Matrix, Orientation};
use crate::model::{forward, Batch, ForwardMode, FrozenModel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PivotRule {
    /// Fewest backbone parameters wins; ties break on type order.
    SmallestModel,
    Explicit(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Weight of the orthogonality penalty on A's row Gram.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub public_batch_size: usize,
    /// Ridge added to both CCA covariances; None picks 1e-6 x trace scale.
    pub ridge: Option<f64>,
    pub pivot_rule: PivotRule,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            lambda: 0.5,
            lr: 0.05,
            epochs: 120,
            public_batch_size: 64,
            ridge: None,
            pivot_rule: PivotRule::SmallestModel,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid("AlignmentConfig", "lambda must be >= 0"));
        }
        if self.lr <= 0.0 {
            return Err(Error::invalid("AlignmentConfig", "lr must be > 0"));
        }
        Ok(())
    }
}

/// Public samples shared by all model types, drawn from a generator
/// distribution disjoint from every client task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublicDataset {
    pub samples: Batch,
}

impl PublicDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// r-dim output of the frozen A factor.
    AOut,
    /// d_out-dim B-path feature B(A h). P and Q are zero before federation,
    /// so this is the nonzero reading of "output of the B module" under
    /// adapter-scaled-to-zero capture.
    BOut,
}

/// Hidden state entering `layer` (1-based) for every public sample, computed
/// with all adapter contributions scaled to zero.
pub fn layer_input_features(
    model: &FrozenModel,
    adapters: &AdapterSet,
    data: &PublicDataset,
    layer: usize,
) -> Result<Matrix> {
    if layer == 0 || layer > adapters.depth() {
        return Err(Error::invalid("layer_input_features", "layer out of range"));
    }
    let gates = GateParams::zeros(adapters.depth());
    let (_, tape) = forward(
        model,
        adapters,
        adapters,
        &gates,
        &data.samples.inputs,
        ForwardMode::AdaptersOff,
    )?;
    Ok(tape.layer_inputs[layer - 1].clone())
}

/// Feature capture at a PQ layer with the adapter contribution to the
/// residual stream scaled to zero, so features reflect the frozen backbone
/// path.
pub fn capture_features(
    model: &FrozenModel,
    adapters: &AdapterSet,
    data: &PublicDataset,
    which: FeatureKind,
    layer: usize,
) -> Result<Matrix> {
    if !adapters.pq_layer_indices.contains(&layer) {
        return Err(Error::NotPqLayer { layer });
    }
    let h = layer_input_features(model, adapters, data, layer)?;
    let pq = adapters.layers[layer - 1]
        .as_pq()
        .ok_or(Error::NotPqLayer { layer })?;
    let a_out = h.matmul_nt(&pq.a); // m x r
    match which {
        FeatureKind::AOut => Ok(a_out),
        FeatureKind::BOut => Ok(a_out.matmul_nt(&pq.b)), // m x d_out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignAStats {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean L2 norm of the per-sample r-dim feature difference.
    pub initial_gap: f64,
    pub final_gap: f64,
}

fn mean_feature_gap(f_pivot: &Matrix, f_other: &Matrix) -> f64 {
    let m = f_pivot.rows();
    let mut acc = 0.0;
    for i in 0..m {
        let mut sq = 0.0;
        for (a, b) in f_pivot.row(i).iter().zip(f_other.row(i)) {
            sq += (a - b) * (a - b);
        }
        acc += sq.sqrt();
    }
    acc / m as f64
}

fn objective(a: &Matrix, h_other: &Matrix, f_pivot: &Matrix, lambda: f64) -> f64 {
    let pred = h_other.matmul_nt(a);
    let m = h_other.rows() as f64;
    let l2 = pred.sub(f_pivot).data().iter().map(|v| v * v).sum::<f64>() / m;
    let gram_gap = a
        .matmul_nt(a)
        .sub(&Matrix::identity(a.rows()))
        .frobenius_norm();
    l2 + lambda * gram_gap * gram_gap
}

/// Fit `other`'s A to the pivot's r-dim features by mini-batch gradient
/// descent on the regularized L2 objective. The pivot adapter is read-only;
/// `h_pivot`/`h_other` are the matched-layer input features over the same
/// public samples.
pub fn align_a(
    pivot: &PqLoraAdapter,
    other: &PqLoraAdapter,
    h_pivot: &Matrix,
    h_other: &Matrix,
    cfg: &AlignmentConfig,
) -> Result<(PqLoraAdapter, AlignAStats)> {
    cfg.validate()?;
    if pivot.rank != other.rank {
        return Err(Error::dims("align_a rank", pivot.rank, other.rank));
    }
    if h_pivot.rows() != h_other.rows() {
        return Err(Error::dims("align_a samples", h_pivot.rows(), h_other.rows()));
    }
    let m = h_pivot.rows();
    if m == 0 {
        return Err(Error::Empty {
            what: "public features".into(),
        });
    }
    let f_pivot = h_pivot.matmul_nt(&pivot.a); // m x r, fixed target

    let mut a = other.a.clone();
    let initial_loss = objective(&a, h_other, &f_pivot, cfg.lambda);
    let initial_gap = mean_feature_gap(&f_pivot, &h_other.matmul_nt(&a));

    let bs = cfg.public_batch_size.max(1).min(m);
    for _ in 0..cfg.epochs {
        let mut start = 0;
        while start < m {
            let end = (start + bs).min(m);
            let nb = (end - start) as f64;
            // grad of the batch L2 term: (2/|S|) (A h - f) h^T
            let mut grad = Matrix::zeros(a.rows(), a.cols());
            for s in start..end {
                let h_row = h_other.row(s);
                // residual = A h - f  (r-dim)
                for i in 0..a.rows() {
                    let mut pred = 0.0;
                    for (av, hv) in a.row(i).iter().zip(h_row) {
                        pred += av * hv;
                    }
                    let resid = 2.0 * (pred - f_pivot.at(s, i)) / nb;
                    if resid == 0.0 {
                        continue;
                    }
                    let grow = grad.row_mut(i);
                    for (gv, hv) in grow.iter_mut().zip(h_row) {
                        *gv += resid * hv;
                    }
                }
            }
            // grad of lambda * ||A A^T - I||_F^2: 4 lambda (A A^T - I) A
            if cfg.lambda > 0.0 {
                let gram_gap = a.matmul_nt(&a).sub(&Matrix::identity(a.rows()));
                grad.axpy(4.0 * cfg.lambda, &gram_gap.matmul(&a));
            }
            a.axpy(-cfg.lr, &grad);
            start = end;
        }
    }

    if !a.is_finite() {
        return Err(Error::NonFinite {
            context: "align_a result".into(),
        });
    }
    let final_loss = objective(&a, h_other, &f_pivot, cfg.lambda);
    let final_gap = mean_feature_gap(&f_pivot, &h_other.matmul_nt(&a));
    let mut aligned = other.clone();
    aligned.a = a;
    Ok((
        aligned,
        AlignAStats {
            initial_loss,
            final_loss,
            initial_gap,
            final_gap,
        },
    ))
}

/// Snap A to the closest row-orthonormal matrix (SVD projection).
pub fn orthogonalize_a(ad: &PqLoraAdapter) -> Result<PqLoraAdapter> {
    let (a, _unique) = nearest_orthogonal(&ad.a, Orientation::Rows)?;
    let mut out = ad.clone();
    out.a = a;
    Ok(out)
}

/// Rebuild the other model's B from the pivot's through the CCA-maximally
/// correlated space: B_j = pinv(Pi_j)^T Pi_i^T B_i, re-orthonormalized in
/// column orientation when the projection drifts past 1e-6.
pub fn align_b(
    pivot_b: &Matrix,
    h_pivot: &Matrix,
    h_other: &Matrix,
    r: usize,
    ridge: f64,
) -> Result<Matrix> {
    let cca_out = cca(h_pivot, h_other, r, ridge)?;
    let pinv_pj = crate::linalg::pinv(&cca_out.pi_j, 1e-10)?; // r x d_j
    let b_new = pinv_pj
        .transpose() // d_j x r
        .matmul(&cca_out.pi_i.matmul_tn(pivot_b)); // (r x d_i^T... ) -> see below
    // pi_i^T * B_i: (r x d_i) * (d_i x r) = r x r
    let gram_gap = b_new
        .matmul_tn(&b_new)
        .sub(&Matrix::identity(r))
        .frobenius_norm();
    if gram_gap > 1e-6 {
        let (ortho, _) = nearest_orthogonal(&b_new, Orientation::Cols)?;
        Ok(ortho)
    } else {
        Ok(b_new)
    }
}

/// Per block ordinal report of what alignment changed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockAlignReport {
    pub block: usize,
    pub pivot_layer: usize,
    pub other_layer: usize,
    pub pre_gap: f64,
    pub post_gap: f64,
    pub pre_b_cka: f64,
    pub post_b_cka: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeAlignReport {
    pub model_type_id: String,
    pub blocks: Vec<BlockAlignReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub pivot_type_id: String,
    pub types: Vec<TypeAlignReport>,
}

/// Align every non-pivot model type to the single global pivot (the smallest
/// model). Matched layers pair by block ordinal. Returns one aligned adapter
/// set per input type, pivot unchanged, plus the gap report.
pub fn align_all(
    models: &[(FrozenModel, AdapterSet)],
    public: &PublicDataset,
    cfg: &AlignmentConfig,
) -> Result<(Vec<AdapterSet>, AlignmentReport)> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::Empty {
            what: "model list".into(),
        });
    }
    if public.is_empty() {
        return Err(Error::Empty {
            what: "public dataset".into(),
        });
    }
    let n_blocks = models[0].1.n_blocks();
    let rank = models[0].1.pq_at_block(0).rank;
    for (m, set) in models {
        set.validate()?;
        if set.n_blocks() != n_blocks {
            return Err(Error::dims("align_all n_blocks", n_blocks, set.n_blocks()));
        }
        if set.pq_at_block(0).rank != rank {
            return Err(Error::dims("align_all rank", rank, set.pq_at_block(0).rank));
        }
        let _ = m;
    }

    let pivot_idx = match &cfg.pivot_rule {
        PivotRule::SmallestModel => models
            .iter()
            .enumerate()
            .min_by_key(|(i, (m, _))| (m.spec.param_count(), *i))
            .map(|(i, _)| i)
            .unwrap(),
        PivotRule::Explicit(id) => models
            .iter()
            .position(|(m, _)| &m.spec.model_type_id == id)
            .ok_or_else(|| Error::invalid("align_all", format!("unknown pivot type {id}")))?,
    };
    let (pivot_model, pivot_set) = &models[pivot_idx];

    let ridge = cfg.ridge.unwrap_or_else(|| {
        // trace scale over the pivot's first-block B features
        let h = layer_input_features(pivot_model, pivot_set, public, pivot_set.pq_layer_indices[0])
            .expect("pivot capture");
        crate::linalg::trace_scale_ridge(&h, &h)
    });

    let mut out: Vec<AdapterSet> = models.iter().map(|(_, s)| s.clone()).collect();
    let mut report = AlignmentReport {
        pivot_type_id: pivot_model.spec.model_type_id.clone(),
        types: Vec::new(),
    };

    for (t, (model, set)) in models.iter().enumerate() {
        if t == pivot_idx {
            continue;
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for k in 0..n_blocks {
            let pivot_layer = pivot_set.pq_layer_indices[k];
            let other_layer = set.pq_layer_indices[k];
            let h_pivot = layer_input_features(pivot_model, pivot_set, public, pivot_layer)?;
            let h_other = layer_input_features(model, set, public, other_layer)?;
            let pivot_pq = pivot_set.pq_at_block(k);
            let other_pq = out[t].pq_at_block(k).clone();

            // Pre-alignment measurements.
            let f_pivot = h_pivot.matmul_nt(&pivot_pq.a);
            let pre_gap = mean_feature_gap(&f_pivot, &h_other.matmul_nt(&other_pq.a));
            let pivot_bout = f_pivot.matmul_nt(&pivot_pq.b);
            let pre_bout = h_other.matmul_nt(&other_pq.a).matmul_nt(&other_pq.b);
            let pre_b_cka = cka(&pivot_bout, &pre_bout)?;

            // A: fit then snap to orthonormal rows.
            let (fitted, _stats) = align_a(pivot_pq, &other_pq, &h_pivot, &h_other, cfg)?;
            let mut aligned = orthogonalize_a(&fitted)?;

            // B: CCA between B-path features using the aligned A.
            let other_bout = h_other.matmul_nt(&aligned.a).matmul_nt(&aligned.b);
            aligned.b = align_b(&pivot_pq.b, &pivot_bout, &other_bout, rank, ridge)?;

            // Shared initialization of the dimension-invariant modules.
            aligned.p = pivot_pq.p.clone();
            aligned.q = pivot_pq.q.clone();

            let post_gap = mean_feature_gap(&f_pivot, &h_other.matmul_nt(&aligned.a));
            let post_bout = h_other.matmul_nt(&aligned.a).matmul_nt(&aligned.b);
            let post_b_cka = cka(&pivot_bout, &post_bout)?;

            *out[t].pq_at_block_mut(k) = aligned;
            blocks.push(BlockAlignReport {
                block: k + 1,
                pivot_layer,
                other_layer,
                pre_gap,
                post_gap,
                pre_b_cka,
                post_b_cka,
            });
        }
        report.types.push(TypeAlignReport {
            model_type_id: model.spec.model_type_id.clone(),
            blocks,
        });
    }

    Ok((out, report))
}
