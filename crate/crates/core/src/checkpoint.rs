//! Adapter checkpoint files: a flat named-tensor container with shape
//! headers and deterministic ordering (layer index, then A/B/P/Q).
//!
//! The format is line-oriented text. Values print in Rust's shortest
//! round-trip notation, so write -> read is bit-exact. Example:
//!
//! ```text
//! adapter-checkpoint v1
//! model_type small
//! pq_layers 2 4 6 8
//! tensor layer1.A 8 16
//! 0.1 -0.25 ...
//! ```

use crate::adapter::{AdapterSet, LayerAdapter, LoraAdapter, PqLoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use std::fmt::Write as _;
use std::path::Path;

const MAGIC: &str = "adapter-checkpoint v1";

pub fn write_adapter_set(set: &AdapterSet, model_type_id: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "model_type {model_type_id}");
    let _ = writeln!(
        out,
        "pq_layers {}",
        set.pq_layer_indices
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    for (l, layer) in set.layers.iter().enumerate() {
        let idx = l + 1;
        match layer {
            LayerAdapter::Conv(conv) => {
                push_matrix(&mut out, &format!("layer{idx}.A"), &conv.a);
                push_matrix(&mut out, &format!("layer{idx}.B"), &conv.b);
            }
            LayerAdapter::Pq(pq) => {
                push_matrix(&mut out, &format!("layer{idx}.A"), &pq.a);
                push_matrix(&mut out, &format!("layer{idx}.B"), &pq.b);
                push_matrix(&mut out, &format!("layer{idx}.P"), &pq.p);
                push_vector(&mut out, &format!("layer{idx}.Q"), &pq.q);
            }
        }
    }
    out
}

fn push_matrix(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
    let vals: Vec<String> = m.data().iter().map(|v| format!("{v}")).collect();
    let _ = writeln!(out, "{}", vals.join(" "));
}

fn push_vector(out: &mut String, name: &str, v: &Vector) {
    let _ = writeln!(out, "tensor {name} {} 1", v.dim());
    let vals: Vec<String> = v.data().iter().map(|x| format!("{x}")).collect();
    let _ = writeln!(out, "{}", vals.join(" "));
}

pub fn read_adapter_set(text: &str) -> Result<(AdapterSet, String)> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("bad magic line".into()));
    }
    let model_type = lines
        .next()
        .and_then(|l| l.strip_prefix("model_type "))
        .ok_or_else(|| Error::Checkpoint("missing model_type".into()))?
        .to_string();
    let pq_layers: Vec<usize> = lines
        .next()
        .and_then(|l| l.strip_prefix("pq_layers "))
        .ok_or_else(|| Error::Checkpoint("missing pq_layers".into()))?
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Checkpoint(e.to_string())))
        .collect::<Result<_>>()?;

    let mut tensors: Vec<(String, Matrix)> = Vec::new();
    while let Some(header) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(Error::Checkpoint(format!("bad tensor header: {header}")));
        }
        let name = parts[1].to_string();
        let rows: usize = parts[2].parse().map_err(|_| Error::Checkpoint("bad rows".into()))?;
        let cols: usize = parts[3].parse().map_err(|_| Error::Checkpoint("bad cols".into()))?;
        let data_line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing data for {name}")))?;
        let data: Vec<f64> = data_line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Checkpoint(e.to_string())))
            .collect::<Result<_>>()?;
        tensors.push((name.clone(), Matrix::new(rows, cols, data)?));
    }

    let find = |name: &str| -> Result<&Matrix> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };

    let depth = tensors
        .iter()
        .filter_map(|(n, _)| {
            n.strip_prefix("layer")
                .and_then(|rest| rest.split('.').next())
                .and_then(|idx| idx.parse::<usize>().ok())
        })
        .max()
        .ok_or_else(|| Error::Checkpoint("no layer tensors".into()))?;

    let mut layers = Vec::with_capacity(depth);
    for idx in 1..=depth {
        let a = find(&format!("layer{idx}.A"))?.clone();
        let b = find(&format!("layer{idx}.B"))?.clone();
        if pq_layers.contains(&idx) {
            let p = find(&format!("layer{idx}.P"))?.clone();
            let qm = find(&format!("layer{idx}.Q"))?;
            let q = Vector::from(qm.data().to_vec());
            let rank = a.rows();
            layers.push(LayerAdapter::Pq(PqLoraAdapter { a, b, p, q, rank }));
        } else {
            let rank = a.rows();
            layers.push(LayerAdapter::Conv(LoraAdapter { a, b, rank }));
        }
    }
    let set = AdapterSet {
        layers,
        pq_layer_indices: pq_layers,
    };
    set.validate()?;
    Ok((set, model_type))
}

pub fn save_adapter_set(path: &Path, set: &AdapterSet, model_type_id: &str) -> Result<()> {
    std::fs::write(path, write_adapter_set(set, model_type_id))?;
    Ok(())
}

pub fn load_adapter_set(path: &Path) -> Result<(AdapterSet, String)> {
    let text = std::fs::read_to_string(path)?;
    read_adapter_set(&text)
}
