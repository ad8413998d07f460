//! Conventional LoRA and PQ-LoRA adapters.
//!
//! A PQ-LoRA adapter keeps its low-rank factors A (r x d_I, orthonormal rows)
//! and B (d_O x r, orthonormal columns) frozen and trains only the
//! dimension-invariant modules P (r x r) and Q (r), which makes P and Q
//! shareable across backbones with different hidden sizes.

use crate::error::{Error, Result};
use crate::linalg::{nearest_orthogonal, numerical_rank, Matrix, Orientation, Vector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Conventional LoRA: both factors trainable, update = B * A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: Matrix, // r x d_I
    pub b: Matrix, // d_O x r
    pub rank: usize,
}

impl LoraAdapter {
    /// Standard zero-update init: A scaled Gaussian, B zero.
    pub fn init(rank: usize, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        if rank > d_in.min(d_out) {
            return Err(Error::invalid(
                "LoraAdapter::init",
                format!("rank {rank} > min({d_in},{d_out})"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_in as f64).sqrt();
        let a = Matrix::from_fn(rank, d_in, |_, _| sample_gaussian(&mut rng) * std);
        let b = Matrix::zeros(d_out, rank);
        Ok(LoraAdapter { a, b, rank })
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }
}

/// PQ-LoRA: frozen A/B, trainable P/Q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqLoraAdapter {
    pub a: Matrix, // r x d_I, frozen
    pub b: Matrix, // d_O x r, frozen
    pub p: Matrix, // r x r, trainable
    pub q: Vector, // r, trainable
    pub rank: usize,
}

impl PqLoraAdapter {
    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// Frobenius gap of A's row Gram from I_r.
    pub fn a_orthonormality_gap(&self) -> f64 {
        let g = self.a.matmul_nt(&self.a);
        g.sub(&Matrix::identity(self.rank)).frobenius_norm()
    }

    /// Frobenius gap of B's column Gram from I_r.
    pub fn b_orthonormality_gap(&self) -> f64 {
        let g = self.b.matmul_tn(&self.b);
        g.sub(&Matrix::identity(self.rank)).frobenius_norm()
    }
}

/// Block-final layer indices (1-based) for attaching PQ-LoRA: the k-th of
/// n_blocks lands at k * floor(depth / n_blocks), with the last block always
/// pinned to the final layer.
pub fn block_indices(depth: usize, n_blocks: usize) -> Result<Vec<usize>> {
    if n_blocks == 0 || n_blocks > depth {
        return Err(Error::invalid(
            "block_indices",
            format!("n_blocks {n_blocks} out of range for depth {depth}"),
        ));
    }
    let step = depth / n_blocks;
    let mut out: Vec<usize> = (1..n_blocks).map(|k| k * step).collect();
    out.push(depth);
    // Degenerate small-depth cases can collide at 0 or duplicate; shift up.
    for k in 0..out.len() {
        if out[k] == 0 || (k > 0 && out[k] <= out[k - 1]) {
            out[k] = if k > 0 { out[k - 1] + 1 } else { 1 };
        }
    }
    debug_assert_eq!(*out.last().unwrap(), depth);
    Ok(out)
}

fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and portable.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Orthogonal init: A with orthonormal rows, B with orthonormal columns,
/// P = 0 and Q = 0 so the initial update is exactly zero.
pub fn init_orthogonal(rank: usize, d_in: usize, d_out: usize, seed: u64) -> Result<PqLoraAdapter> {
    if rank > d_in.min(d_out) {
        return Err(Error::invalid(
            "init_orthogonal",
            format!("rank {rank} > min({d_in},{d_out})"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ga = Matrix::from_fn(rank, d_in, |_, _| sample_gaussian(&mut rng));
    let gb = Matrix::from_fn(d_out, rank, |_, _| sample_gaussian(&mut rng));
    let (a, _) = nearest_orthogonal(&ga, Orientation::Rows)?;
    let (b, _) = nearest_orthogonal(&gb, Orientation::Cols)?;
    Ok(PqLoraAdapter {
        a,
        b,
        p: Matrix::zeros(rank, rank),
        q: Vector::zeros(rank),
        rank,
    })
}

/// Eq.-5 forward for a single hidden vector: W_p h + B (P A h + Q).
pub fn pq_forward(w_p: &Matrix, ad: &PqLoraAdapter, h: &Vector) -> Result<Vector> {
    if w_p.cols() != h.dim() || ad.d_in() != h.dim() || ad.d_out() != w_p.rows() {
        return Err(Error::dims(
            "pq_forward",
            format!("W_p {}x{}, adapter {}->{}", w_p.rows(), w_p.cols(), ad.d_in(), ad.d_out()),
            h.dim(),
        ));
    }
    let ah = ad.a.matvec(h);
    let mut pah = ad.p.matvec(&ah);
    for (x, q) in pah.data_mut().iter_mut().zip(ad.q.data()) {
        *x += q;
    }
    Ok(w_p.matvec(h).add(&ad.b.matvec(&pah)))
}

/// Gated dual-adapter combination: base + (1 - sigmoid(beta)) h_local +
/// sigmoid(beta) h_global.
pub fn gated_combine(base: &Vector, h_local: &Vector, h_global: &Vector, beta: f64) -> Vector {
    let bt = sigmoid(beta);
    let mut out = base.clone();
    for ((o, l), g) in out
        .data_mut()
        .iter_mut()
        .zip(h_local.data())
        .zip(h_global.data())
    {
        *o += (1.0 - bt) * l + bt * g;
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weight update implied by a PQ adapter, split as in the aggregation-error
/// analysis: the matrix part B P A and the bias part B Q reported separately.
pub fn delta_weight(ad: &PqLoraAdapter) -> (Matrix, Vector) {
    let bpa = ad.b.matmul(&ad.p).matmul(&ad.a);
    let bq = ad.b.matvec(&ad.q);
    (bpa, bq)
}

/// Dimension of span{ b_i a_j^T } as the numerical rank (tol 1e-8) of the
/// matrix whose r^2 columns are the vectorized outer products.
pub fn span_dimension(ad: &PqLoraAdapter) -> Result<usize> {
    let r = ad.rank;
    let d_out = ad.d_out();
    let d_in = ad.d_in();
    let mut m = Matrix::zeros(d_out * d_in, r * r);
    for i in 0..r {
        for j in 0..r {
            let col = i * r + j;
            for x in 0..d_out {
                let bi = ad.b.at(x, i);
                if bi == 0.0 {
                    continue;
                }
                for y in 0..d_in {
                    m.set(x * d_in + y, col, bi * ad.a.at(j, y));
                }
            }
        }
    }
    numerical_rank(&m, 1e-8)
}

/// Per-layer adapter assignment for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerAdapter {
    Conv(LoraAdapter),
    Pq(PqLoraAdapter),
}

impl LayerAdapter {
    pub fn d_in(&self) -> usize {
        match self {
            LayerAdapter::Conv(l) => l.d_in(),
            LayerAdapter::Pq(p) => p.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            LayerAdapter::Conv(l) => l.d_out(),
            LayerAdapter::Pq(p) => p.d_out(),
        }
    }

    pub fn as_pq(&self) -> Option<&PqLoraAdapter> {
        match self {
            LayerAdapter::Pq(p) => Some(p),
            _ => None,
        }
    }
}

/// One adapter per backbone layer; PQ-LoRA at block-final layers (1-based
/// indices, last == depth), conventional LoRA everywhere else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub layers: Vec<LayerAdapter>,
    pub pq_layer_indices: Vec<usize>,
}

impl AdapterSet {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.pq_layer_indices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.layers.len();
        if self.pq_layer_indices.is_empty() {
            return Err(Error::invalid("AdapterSet", "no pq layers"));
        }
        if *self.pq_layer_indices.last().unwrap() != depth {
            return Err(Error::invalid(
                "AdapterSet",
                "last pq layer index must equal depth",
            ));
        }
        for w in self.pq_layer_indices.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(
                    "AdapterSet",
                    "pq layer indices must be strictly increasing",
                ));
            }
        }
        for (l, ad) in self.layers.iter().enumerate() {
            let want_pq = self.pq_layer_indices.contains(&(l + 1));
            let is_pq = matches!(ad, LayerAdapter::Pq(_));
            if want_pq != is_pq {
                return Err(Error::invalid(
                    "AdapterSet",
                    format!("layer {} adapter kind does not match pq indices", l + 1),
                ));
            }
        }
        Ok(())
    }

    /// PQ adapter at block ordinal k (0-based over blocks).
    pub fn pq_at_block(&self, k: usize) -> &PqLoraAdapter {
        let layer = self.pq_layer_indices[k];
        self.layers[layer - 1].as_pq().expect("pq index points at pq layer")
    }

    pub fn pq_at_block_mut(&mut self, k: usize) -> &mut PqLoraAdapter {
        let layer = self.pq_layer_indices[k];
        match &mut self.layers[layer - 1] {
            LayerAdapter::Pq(p) => p,
            _ => panic!("pq index points at non-pq layer"),
        }
    }

    /// Fresh adapter set for a chain of layer shapes (d_in, d_out), PQ-LoRA
    /// at the block-final layers.
    pub fn init(
        shapes: &[(usize, usize)],
        n_blocks: usize,
        rank: usize,
        seed: u64,
    ) -> Result<AdapterSet> {
        let depth = shapes.len();
        let pq_layer_indices = block_indices(depth, n_blocks)?;
        let mut layers = Vec::with_capacity(depth);
        for (l, &(d_in, d_out)) in shapes.iter().enumerate() {
            let layer_seed = crate::rng::derive_seed(seed, "adapter-layer", l as u64);
            let ad = if pq_layer_indices.contains(&(l + 1)) {
                LayerAdapter::Pq(init_orthogonal(rank, d_in, d_out, layer_seed)?)
            } else {
                LayerAdapter::Conv(LoraAdapter::init(rank, d_in, d_out, layer_seed)?)
            };
            layers.push(ad);
        }
        Ok(AdapterSet {
            layers,
            pq_layer_indices,
        })
    }
}

/// Per-layer gate parameters; beta is unconstrained, the forward pass uses
/// sigmoid(beta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub beta: Vec<f64>,
}

impl GateParams {
    pub fn zeros(depth: usize) -> Self {
        GateParams {
            beta: vec![0.0; depth],
        }
    }

    pub fn beta_tilde(&self, layer: usize) -> f64 {
        sigmoid(self.beta[layer])
    }
}
