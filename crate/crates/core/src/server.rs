//! Server-side round barrier: relevance matrix from sanitized gradients,
//! softmax aggregation weights, and per-client customized global adapters.
//!
//! Cross-type sharing is limited to the dimension-invariant P/Q modules;
//! conventional-LoRA layers aggregate within each model-type cohort with
//! renormalized weights. Frozen PQ A/B factors and the gates never move
//! across the wire.

use crate::adapter::{AdapterSet, LayerAdapter};
use crate::client::ClientPayload;
use crate::error::{Error, Result};
use crate::linalg::{cosine, Matrix, Vector};
use crate::rng::fnv1a64;
use serde::{Deserialize, Serialize};

/// Pairwise cosine state for one round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelevanceState {
    pub s: Matrix,
    pub w: Matrix,
    pub tau: f64,
    /// Clients whose gradient carried no evidence this round.
    pub degenerate: Vec<bool>,
}

/// Pairwise cosine similarities. A missing/zero gradient is "no evidence":
/// its off-diagonal entries are 0 and the diagonal stays 1.
pub fn relevance_matrix(gradients: &[Option<Vector>]) -> Result<(Matrix, Vec<bool>)> {
    let n = gradients.len();
    let dim = gradients.iter().flatten().map(|g| g.dim()).next();
    if let Some(d) = dim {
        for g in gradients.iter().flatten() {
            if g.dim() != d {
                return Err(Error::dims("relevance_matrix", d, g.dim()));
            }
        }
    }
    let degenerate: Vec<bool> = gradients
        .iter()
        .map(|g| g.as_ref().map(|v| v.is_zero()).unwrap_or(true))
        .collect();
    let mut s = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let value = if degenerate[i] || degenerate[j] {
                0.0
            } else {
                let c = cosine(
                    gradients[i].as_ref().unwrap(),
                    gradients[j].as_ref().unwrap(),
                )?;
                if c.degenerate {
                    0.0
                } else {
                    c.value
                }
            };
            s.set(i, j, value);
            s.set(j, i, value);
        }
    }
    Ok((s, degenerate))
}

/// Row-wise softmax of S / tau. Degenerate clients receive exactly uniform
/// rows (cold-start rule); everyone else weighs them through cos = 0 terms.
pub fn aggregation_weights(s: &Matrix, tau: f64, degenerate: &[bool]) -> Result<Matrix> {
    if tau <= 0.0 {
        return Err(Error::invalid("aggregation_weights", "tau must be > 0"));
    }
    let n = s.rows();
    if s.cols() != n || degenerate.len() != n {
        return Err(Error::dims("aggregation_weights", n, s.cols()));
    }
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        if degenerate[i] {
            for j in 0..n {
                w.set(i, j, 1.0 / n as f64);
            }
            continue;
        }
        let row = s.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        let exps: Vec<f64> = row.iter().map(|v| (v / tau - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..n {
            w.set(i, j, exps[j] / sum);
        }
    }
    Ok(w)
}

/// Customized global adapter sets, one per client.
#[derive(Debug, Clone)]
pub struct GlobalDispatch {
    pub per_client: Vec<AdapterSet>,
}

/// Weighted aggregation of local adapters.
///
/// PQ layers: P and Q at block k average over ALL clients with row i of W.
/// Conventional layers: A and B average over the same-type cohort with the
/// row renormalized over that cohort. Frozen PQ A/B stay the aligned ones
/// for the receiving client's type.
pub fn aggregate(payloads: &[ClientPayload], w: &Matrix) -> Result<GlobalDispatch> {
    let n = payloads.len();
    if w.rows() != n || w.cols() != n {
        return Err(Error::dims("aggregate", n, w.rows()));
    }
    for i in 0..n {
        let sum: f64 = w.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-9 || w.row(i).iter().any(|&x| x < 0.0) {
            return Err(Error::invalid(
                "aggregate",
                format!("row {i} of W is not stochastic (sum {sum})"),
            ));
        }
    }

    let mut per_client = Vec::with_capacity(n);
    for i in 0..n {
        let mine = &payloads[i];
        let mut out = mine.local_adapters.clone();
        let n_blocks = out.n_blocks();

        // Dimension-invariant modules: weighted sum across all clients.
        for k in 0..n_blocks {
            let rank = out.pq_at_block(k).rank;
            let mut p = Matrix::zeros(rank, rank);
            let mut q = Vector::zeros(rank);
            for (j, payload) in payloads.iter().enumerate() {
                let wij = w.at(i, j);
                let other = payload.local_adapters.pq_at_block(k);
                if other.rank != rank {
                    return Err(Error::dims("aggregate rank", rank, other.rank));
                }
                p.axpy(wij, &other.p);
                for (qv, ov) in q.data_mut().iter_mut().zip(other.q.data()) {
                    *qv += wij * ov;
                }
            }
            let pq = out.pq_at_block_mut(k);
            pq.p = p;
            pq.q = q;
        }

        // Conventional layers: same-type cohort with renormalized weights.
        let cohort: Vec<usize> = (0..n)
            .filter(|&j| payloads[j].model_type_id == mine.model_type_id)
            .collect();
        let cohort_mass: f64 = cohort.iter().map(|&j| w.at(i, j)).sum();
        for (l, layer) in out.layers.iter_mut().enumerate() {
            let LayerAdapter::Conv(conv) = layer else {
                continue;
            };
            let mut a = Matrix::zeros(conv.a.rows(), conv.a.cols());
            let mut b = Matrix::zeros(conv.b.rows(), conv.b.cols());
            for &j in &cohort {
                // cohort includes i itself, so mass can only vanish if every
                // weight in it is zero; fall back to the client's own layer.
                let wij = if cohort_mass > 0.0 {
                    w.at(i, j) / cohort_mass
                } else if j == i {
                    1.0
                } else {
                    0.0
                };
                let LayerAdapter::Conv(other) = &payloads[j].local_adapters.layers[l] else {
                    return Err(Error::invalid(
                        "aggregate",
                        format!("layer {} kind mismatch within cohort", l + 1),
                    ));
                };
                a.axpy(wij, &other.a);
                b.axpy(wij, &other.b);
            }
            conv.a = a;
            conv.b = b;
        }

        per_client.push(out);
    }
    Ok(GlobalDispatch { per_client })
}

/// Equal-weight baseline: aggregate with uniform rows.
pub fn aggregate_equal(payloads: &[ClientPayload]) -> Result<GlobalDispatch> {
    let n = payloads.len();
    let w = Matrix::from_fn(n, n, |_, _| 1.0 / n as f64);
    aggregate(payloads, &w)
}

/// Structured per-round record for logs: S, W, and a checksum per dispatched
/// adapter set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub s: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub dispatch_checksums: Vec<String>,
}

pub fn round_record(round: usize, rel: &RelevanceState, dispatch: &GlobalDispatch) -> RoundRecord {
    let to_rows = |m: &Matrix| {
        (0..m.rows())
            .map(|i| m.row(i).to_vec())
            .collect::<Vec<_>>()
    };
    let checksums = dispatch
        .per_client
        .iter()
        .map(|set| {
            let text = crate::checkpoint::write_adapter_set(set, "dispatch");
            format!("{:016x}", fnv1a64(text.as_bytes()))
        })
        .collect();
    RoundRecord {
        round,
        s: to_rows(&rel.s),
        w: to_rows(&rel.w),
        dispatch_checksums: checksums,
    }
}
