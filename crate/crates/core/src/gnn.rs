//! Graph convolutions over mesh graphs, and Adam.
//!
//! A layer computes `B (Z W) + b` with `B = D^-1/2 (A + I) D^-1/2`, where
//! `D` counts self-loops. `b` is one row broadcast over all nodes.
//! Nonlinearities are left to the caller.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::Graph;

#[derive(Debug, Error, PartialEq)]
pub enum GnnError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
}

/// Symmetric normalized adjacency with self-loops, in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    num_nodes: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn from_graph(graph: &Graph) -> Self {
        let n = graph.num_nodes;
        let mut lists = graph.adjacency_lists();
        for (i, l) in lists.iter_mut().enumerate() {
            l.push(i);
            l.sort_unstable();
            l.dedup();
        }
        let degree: Vec<usize> = lists.iter().map(Vec::len).collect();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (i, l) in lists.iter().enumerate() {
            for &j in l {
                indices.push(j);
                values.push(1.0 / ((degree[i] * degree[j]) as f64).sqrt());
            }
            indptr.push(indices.len());
        }
        Self {
            num_nodes: n,
            indptr,
            indices,
            values,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, GnnError> {
        if x.nrows() != self.num_nodes {
            return Err(GnnError::ShapeMismatch {
                what: "adjacency operand",
                expected: (self.num_nodes, x.ncols()),
                got: x.dim(),
            });
        }
        let mut out = Array2::zeros(x.dim());
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for p in self.indptr[i]..self.indptr[i + 1] {
                row.scaled_add(self.values[p], &x.row(self.indices[p]));
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.num_nodes, self.num_nodes));
        for i in 0..self.num_nodes {
            for p in self.indptr[i]..self.indptr[i + 1] {
                d[[i, self.indices[p]]] = self.values[p];
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array2<f64>,
}

impl GcnLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..limit)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn check_input(&self, z: &ArrayView2<f64>) -> Result<(), GnnError> {
        if z.ncols() != self.fan_in() {
            return Err(GnnError::ShapeMismatch {
                what: "layer input",
                expected: (z.nrows(), self.fan_in()),
                got: z.dim(),
            });
        }
        Ok(())
    }

    /// `B Z W + b`, clamped at zero when `relu` is set.
    pub fn forward(
        &self,
        adj: &NormalizedAdjacency,
        z: ArrayView2<f64>,
        relu: bool,
    ) -> Result<Array2<f64>, GnnError> {
        self.check_input(&z)?;
        let mut out = adj.apply(z.dot(&self.weight).view())?;
        out += &self.bias;
        if relu {
            out.mapv_inplace(|v| v.max(0.0));
        }
        Ok(out)
    }

    /// Gradients given the loss gradient `grad_out` of this layer's output.
    /// With `relu`, `output` is the recorded forward activation and supplies
    /// the mask.
    pub fn backward(
        &self,
        adj: &NormalizedAdjacency,
        z: ArrayView2<f64>,
        output: ArrayView2<f64>,
        relu: bool,
        grad_out: ArrayView2<f64>,
    ) -> Result<LayerGrads, GnnError> {
        self.check_input(&z)?;
        let shape = (z.nrows(), self.fan_out());
        for (what, got) in [
            ("output gradient", grad_out.dim()),
            ("recorded output", output.dim()),
        ] {
            if got != shape {
                return Err(GnnError::ShapeMismatch {
                    what,
                    expected: shape,
                    got,
                });
            }
        }
        let mut g = grad_out.to_owned();
        if relu {
            g.zip_mut_with(&output, |g, &o| {
                if o <= 0.0 {
                    *g = 0.0
                }
            });
        }
        let grad_out = g.view();
        // B is symmetric, so its transpose is itself
        let h = adj.apply(grad_out)?;
        Ok(LayerGrads {
            weight: z.t().dot(&h),
            bias: grad_out.sum_axis(Axis(0)),
            input: h.dot(&self.weight.t()),
        })
    }
}

/// Adam over one flat parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// The increment Adam would add to the parameters. Moments advance; a
    /// non-finite gradient leaves all state untouched.
    pub fn delta(&mut self, grad: &[f64]) -> Result<Vec<f64>, GnnError> {
        if grad.len() != self.m.len() {
            return Err(GnnError::ShapeMismatch {
                what: "adam gradient",
                expected: (self.m.len(), 1),
                got: (grad.len(), 1),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(GnnError::NonFiniteGradient(i));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        Ok(grad
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                -self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps)
            })
            .collect())
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), GnnError> {
        if params.len() != self.m.len() {
            return Err(GnnError::ShapeMismatch {
                what: "adam parameters",
                expected: (self.m.len(), 1),
                got: (params.len(), 1),
            });
        }
        let d = self.delta(grad)?;
        params.iter_mut().zip(d).for_each(|(p, d)| *p += d);
        Ok(())
    }
}
