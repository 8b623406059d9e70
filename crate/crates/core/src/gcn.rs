//! Spectral graph convolution over the salient and contextual graphs.
//!
//! Each layer computes `Y = relu(L_norm X Θᵀ)` where
//! `L_norm = (D+I)^{-1/2} (A+I) (D+I)^{-1/2}` and `D` is the weighted degree.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::GraphGeometry;
use crate::ops;
use crate::params::{he_uniform, ParamRegistry};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-12;

fn check_adjacency(a: &Tensor) -> Result<usize> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::config(format!("adjacency must be square, got {:?}", a.shape())));
    }
    let k = a.shape()[0];
    let d = a.data();
    for i in 0..k {
        for j in i + 1..k {
            let gap = (d[i * k + j] - d[j * k + i]).abs();
            if gap > SYMMETRY_TOL {
                return Err(Error::data(format!("adjacency not symmetric at ({i},{j}): |diff| = {gap:e}")));
            }
        }
    }
    if let Some(pos) = d.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::data(format!("adjacency entry ({},{}) = {} is not a nonnegative weight", pos / k, pos % k, d[pos])));
    }
    Ok(k)
}

fn degrees(a: &Tensor, k: usize) -> Vec<f64> {
    a.data().chunks(k).map(|row| row.iter().sum()).collect()
}

/// `L = D - A` with `D` the diagonal of row sums.
pub fn laplacian(a: &Tensor) -> Result<Tensor> {
    let k = check_adjacency(a)?;
    let deg = degrees(a, k);
    let mut l = Tensor::from_fn(&[k, k], |p| -a.data()[p]);
    for (i, d) in deg.iter().enumerate() {
        l.data_mut()[i * k + i] += d;
    }
    Ok(l)
}

/// Renormalized propagation operator of one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationMatrix {
    pub l_norm: Tensor,
}

impl PropagationMatrix {
    pub fn k(&self) -> usize {
        self.l_norm.shape()[0]
    }

    /// Stack per-sample operators into `[N,K,K]`.
    pub fn stack(mats: &[PropagationMatrix]) -> Result<Tensor> {
        Tensor::stack(&mats.iter().map(|m| &m.l_norm).collect::<Vec<_>>())
    }
}

pub fn propagation_matrix(a: &Tensor) -> Result<PropagationMatrix> {
    let k = check_adjacency(a)?;
    let inv_sqrt: Vec<f64> = degrees(a, k).iter().map(|d| 1.0 / (d + 1.0).sqrt()).collect();
    let l_norm = Tensor::from_fn(&[k, k], |p| {
        let (i, j) = (p / k, p % k);
        let a_hat = a.data()[p] + if i == j { 1.0 } else { 0.0 };
        inv_sqrt[i] * a_hat * inv_sqrt[j]
    });
    Ok(PropagationMatrix { l_norm })
}

/// Propagation matrices of every sample in a graph batch, `[N,K,K]`.
pub fn batch_propagation(geometry: &GraphGeometry) -> Result<Tensor> {
    let n = geometry.indices.len();
    let mats = (0..n)
        .map(|i| propagation_matrix(&geometry.adjacency_of(i)))
        .collect::<Result<Vec<_>>>()?;
    PropagationMatrix::stack(&mats)
}

/// Untracked `relu(L X Θᵀ)` with one operator shared across the batch.
pub fn gcn_layer(x: &Tensor, l: &PropagationMatrix, theta: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[1] != l.k() {
        return Err(Error::config(format!(
            "node features {:?} do not match a {}-node propagation matrix",
            x.shape(),
            l.k()
        )));
    }
    let (n, k, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ls = Tensor::stack(&vec![&l.l_norm; n])?;
    let mixed = ops::batched_left_matmul(&ls, x)?;
    let y = ops::linear(&mixed.reshape(&[n * k, c])?, theta, None)?;
    let cout = y.shape()[1];
    Ok(ops::relu(&y.reshape(&[n, k, cout])?))
}

/// Flatten salient then contextual node features into `[N, 2*K*C]`.
pub fn graph_readout(y_sag: &Tensor, y_cag: &Tensor) -> Result<Tensor> {
    if y_sag.shape() != y_cag.shape() || y_sag.rank() != 3 {
        return Err(Error::config(format!(
            "readout needs matching [N,K,C] inputs, got {:?} and {:?}",
            y_sag.shape(),
            y_cag.shape()
        )));
    }
    let n = y_sag.shape()[0];
    let flat = y_sag.numel() / n;
    ops::concat_axis1(&[&y_sag.reshape(&[n, flat])?, &y_cag.reshape(&[n, flat])?])
}

/// Stack of graph convolution layers for one graph kind.
#[derive(Clone, Debug)]
pub struct GcnBranch {
    pub c_in: usize,
    pub c_out: usize,
    pub layers: usize,
    prefix: String,
}

impl GcnBranch {
    /// Parameters live under `{prefix}.theta` (first layer) and
    /// `{prefix}.theta{l}` for any deeper layer `l`.
    pub fn new(c_in: usize, c_out: usize, layers: usize, prefix: &str) -> Result<Self> {
        if layers == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::config(format!(
                "graph branch needs positive sizes, got c_in={c_in} c_out={c_out} layers={layers}"
            )));
        }
        Ok(GcnBranch { c_in, c_out, layers, prefix: prefix.to_string() })
    }

    pub fn theta_name(&self, layer: usize) -> String {
        if layer == 0 {
            format!("{}.theta", self.prefix)
        } else {
            format!("{}.theta{layer}", self.prefix)
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in 0..self.layers {
            let cin = if l == 0 { self.c_in } else { self.c_out };
            reg.insert(&self.theta_name(l), he_uniform(&[self.c_out, cin], cin, rng))?;
        }
        Ok(())
    }

    /// `x: [N,K,C_in]`, `l: [N,K,K]` -> `[N,K,C_out]`.
    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var, l: &Tensor) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.c_in {
            return Err(Error::config(format!(
                "graph branch expects [N,K,{}] node features, got {shape:?}",
                self.c_in
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        let mut h = x;
        for layer in 0..self.layers {
            let cin = if layer == 0 { self.c_in } else { self.c_out };
            let mixed = tape.propagate(l.clone(), h)?;
            let flat = tape.reshape(mixed, &[n * k, cin])?;
            let theta = tape.param(reg, &self.theta_name(layer))?;
            let y = tape.linear(flat, theta, None)?;
            let y = tape.reshape(y, &[n, k, self.c_out])?;
            h = tape.relu(y);
        }
        Ok(h)
    }
}

/// Tracked counterpart of [`graph_readout`].
pub fn readout(tape: &mut Tape, y_sag: Var, y_cag: Var) -> Result<Var> {
    let s = tape.shape(y_sag).to_vec();
    if s.len() != 3 || tape.shape(y_cag) != s.as_slice() {
        return Err(Error::config(format!(
            "readout needs matching [N,K,C] inputs, got {s:?} and {:?}",
            tape.shape(y_cag)
        )));
    }
    let a = tape.reshape(y_sag, &[s[0], s[1] * s[2]])?;
    let b = tape.reshape(y_cag, &[s[0], s[1] * s[2]])?;
    tape.concat(&[a, b])
}
