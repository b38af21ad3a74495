//! Graph convolution over the taxonomy.
//!
//! One layer computes `H' = ReLU(A · H · W + b)` where `A` is the 0/1
//! adjacency (self-loops included by default) with no degree normalization.
//! `W` is stored `d_in × d_out`. Neighbour contributions are summed in
//! ascending value order per coordinate, which makes the output independent
//! of node numbering down to the last bit.

use serde::{Deserialize, Serialize};
use taxolink_numerics::params::Parameterized;
use taxolink_numerics::tensor::{gemv_t_acc, outer_acc};
use taxolink_numerics::{Rng, Tensor};

use crate::error::{Error, Result};
use crate::taxonomy::Adjacency;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GcnLayer {
    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub layers: Vec<GcnLayer>,
}

impl GcnParams {
    /// Layers chaining `dims[0] → dims[1] → …`, weights uniform in
    /// `±√(6/(d_in+d_out))`, biases zero.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "GCN needs at least one layer with positive sizes, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.uniform_range(-bound, bound)).collect();
                GcnLayer {
                    weight: Tensor::matrix(w[0], w[1], data).expect("sized"),
                    bias: Tensor::zeros(&[w[1]]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<GcnLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("GCN needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rank() != 2 || l.bias.shape() != [l.d_out()] {
                return Err(Error::Config(format!("GCN layer {i} has inconsistent shapes")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::Config(format!(
                    "GCN layer {} outputs {} but layer {} expects {}",
                    i,
                    w[0].d_out(),
                    i + 1,
                    w[1].d_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| GcnLayer {
                    weight: Tensor::zeros_like(&l.weight),
                    bias: Tensor::zeros_like(&l.bias),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").d_out()
    }
}

impl Parameterized for GcnParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.weight"), &l.weight);
            f(&format!("layer{i}.bias"), &l.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.weight"), &mut l.weight);
            f(&format!("layer{i}.bias"), &mut l.bias);
        }
    }
}

/// Row-wise `H · W`; each row is computed independently of the others.
fn rows_times(h: &Tensor, w: &Tensor) -> Tensor {
    let (n, d_out) = (h.rows(), w.cols());
    let mut out = Tensor::zeros(&[n, d_out]);
    for v in 0..n {
        gemv_t_acc(w.data(), w.rows(), d_out, h.row(v), out.row_mut(v));
    }
    out
}

/// Pre-activation `A · M + b`, summing each coordinate in ascending order.
fn aggregate(adj: &Adjacency, m: &Tensor, bias: &[f64]) -> Tensor {
    let (n, d) = (m.rows(), m.cols());
    let mut out = Tensor::zeros(&[n, d]);
    let mut buf = Vec::new();
    for v in 0..n {
        let ns = adj.neighbors(v);
        let row = out.row_mut(v);
        for j in 0..d {
            buf.clear();
            buf.extend(ns.iter().map(|&u| m.get(u, j)));
            buf.sort_unstable_by(f64::total_cmp);
            row[j] = buf.iter().sum::<f64>() + bias[j];
        }
    }
    out
}

fn check_layer(h: &Tensor, adj: &Adjacency, layer: &GcnLayer) -> Result<()> {
    if h.rank() != 2 || h.cols() != layer.d_in() {
        return Err(Error::Config(format!(
            "GCN input has shape {:?}, layer expects {} columns",
            h.shape(),
            layer.d_in()
        )));
    }
    if adj.len() != h.rows() {
        return Err(Error::Config(format!(
            "adjacency covers {} nodes but input has {} rows",
            adj.len(),
            h.rows()
        )));
    }
    Ok(())
}

/// One layer; returns `(output, pre_activation)`.
pub fn gcn_layer_forward(
    h: &Tensor,
    adj: &Adjacency,
    layer: &GcnLayer,
) -> Result<(Tensor, Tensor)> {
    check_layer(h, adj, layer)?;
    let pre = aggregate(adj, &rows_times(h, &layer.weight), layer.bias.data());
    let out = pre.map(|z| z.max(0.0));
    Ok((out, pre))
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnCache {
    /// Input to each layer (`H⁽⁰⁾ … H⁽ᴸ⁻¹⁾`).
    pub inputs: Vec<Tensor>,
    pub pre_activations: Vec<Tensor>,
}

/// Applies every layer in turn and returns the final node matrix.
pub fn gcn_encode(adj: &Adjacency, params: &GcnParams, h0: &Tensor) -> Result<(Tensor, GcnCache)> {
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut h = h0.clone();
    for layer in &params.layers {
        let (out, pre) = gcn_layer_forward(&h, adj, layer)?;
        inputs.push(std::mem::replace(&mut h, out));
        pre_activations.push(pre);
    }
    if !h.is_finite() {
        return Err(Error::Divergence("GCN produced non-finite node states".into()));
    }
    Ok((h, GcnCache { inputs, pre_activations }))
}

/// Gradients of all layer parameters given `d_out = ∂loss/∂H⁽ᴸ⁾`.
/// ReLU uses subgradient 0 at 0.
pub fn gcn_backward(
    adj: &Adjacency,
    params: &GcnParams,
    cache: &GcnCache,
    d_out: &Tensor,
) -> Result<GcnParams> {
    let mut grads = params.zeros_like();
    let mut upstream = d_out.clone();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let pre = &cache.pre_activations[l];
        if upstream.shape() != pre.shape() {
            return Err(Error::Config(format!(
                "GCN upstream gradient has shape {:?}, expected {:?}",
                upstream.shape(),
                pre.shape()
            )));
        }
        let (n, d_out) = (pre.rows(), pre.cols());
        let d_in = layer.d_in();
        let mut dz = upstream;
        for (g, &z) in dz.data_mut().iter_mut().zip(pre.data()) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        // dM = Aᵀ·dZ, and A is symmetric
        let mut dm = Tensor::zeros(&[n, d_out]);
        for v in 0..n {
            for &u in adj.neighbors(v) {
                for (a, b) in dm.row_mut(u).iter_mut().zip(dz.row(v)) {
                    *a += b;
                }
            }
        }
        let g = &mut grads.layers[l];
        for v in 0..n {
            for (b, d) in g.bias.data_mut().iter_mut().zip(dz.row(v)) {
                *b += d;
            }
            outer_acc(g.weight.data_mut(), cache.inputs[l].row(v), dm.row(v));
        }
        if l > 0 {
            let mut dh = Tensor::zeros(&[n, d_in]);
            for v in 0..n {
                let row = dh.row_mut(v);
                for (i, r) in row.iter_mut().enumerate() {
                    *r = layer.weight.row(i).iter().zip(dm.row(v)).map(|(w, d)| w * d).sum();
                }
            }
            upstream = dh;
        } else {
            upstream = Tensor::zeros(&[0]);
        }
    }
    Ok(grads)
}
