//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A forward pass records one node per primitive op. Each node captures the
//! input values it needs and knows how to turn an output gradient into
//! gradient contributions for its parents. `backward` walks the tape in
//! reverse, accumulating into per-node buffers.
//!
//! Stop-gradient is structural: `sg` copies a value into a fresh node with no
//! parents, so nothing upstream of it ever receives a contribution.

mod conv;
mod norm;
mod softmax;

pub use norm::{BnState, BnStats, NORM_EPS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(Var, Tensor)>>;

struct Node {
    value: Tensor,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, value: Tensor, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameters, probed inputs).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Non-differentiable input. Structurally identical to a leaf; kept as a
    /// separate entry point for readability at call sites.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Stop-gradient: value passes through, nothing flows back.
    pub fn sg(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, None)
    }

    /// Reverse sweep from `root` (seeded with ones). Returns the gradient
    /// accumulators for every node; untouched nodes stay `None`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::filled(&self.nodes[root.0].value.shape, 1.0);
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].backward {
                for (parent, contrib) in back(&g) {
                    debug_assert_eq!(
                        contrib.shape, self.nodes[parent.0].value.shape,
                        "gradient shape mismatch at node {}",
                        parent.0
                    );
                    match &mut grads[parent.0] {
                        Some(acc) => {
                            for (a, c) in acc.data.iter_mut().zip(contrib.data.iter()) {
                                *a += c;
                            }
                        }
                        None => grads[parent.0] = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    // ---- elementwise and structural primitives ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g| vec![(a, g.clone()), (b, g.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::Shape(format!(
                "sub: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let neg = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| -v).collect(),
                };
                vec![(a, g.clone()), (b, neg)]
            })),
        ))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        if va.shape != vb.shape {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&vb.data).map(|(g, y)| g * y).collect(),
                };
                let db = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&va.data).map(|(g, x)| g * x).collect(),
                };
                vec![(a, da), (b, db)]
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|v| v * c).collect(),
        };
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(
                    a,
                    Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|v| v * c).collect(),
                    },
                )]
            })),
        )
    }

    /// Broadcast-add a length-`c` bias to every row of an `[r × c]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.shape.len() != 2 || vb.shape != vec![va.shape[1]] {
            return Err(Error::Shape(format!(
                "add_bias: {:?} with bias {:?}",
                va.shape, vb.shape
            )));
        }
        let (r, c) = (va.shape[0], va.shape[1]);
        let mut data = va.data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vb.data[j];
            }
        }
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g.data[i * c + j];
                    }
                }
                vec![
                    (a, g.clone()),
                    (
                        bias,
                        Tensor {
                            shape: vec![c],
                            data: db,
                        },
                    ),
                ]
            })),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::Shape(format!(
                "matmul: {:?} by {:?}",
                va.shape, vb.shape
            )));
        }
        let out = matmul_raw(&va, &vb);
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                // dA = g · Bᵀ, dB = Aᵀ · g
                let da = matmul_raw(g, &transpose_raw(&vb));
                let db = matmul_raw(&transpose_raw(&va), g);
                vec![(a, da), (b, db)]
            })),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape.len() != 2 {
            return Err(Error::Shape(format!("transpose: {:?}", va.shape)));
        }
        let out = transpose_raw(va);
        Ok(self.push(
            out,
            Some(Box::new(move |g| vec![(a, transpose_raw(g))])),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero tensors".into()));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let cols = self.value(parts[0]).cols();
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape.len() != 2 || v.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: inconsistent shape {:?}",
                    v.shape
                )));
            }
            row_counts.push(v.rows());
            data.extend_from_slice(&v.data);
        }
        let total: usize = row_counts.iter().sum();
        let out = Tensor {
            shape: vec![total, cols],
            data,
        };
        let parts: Vec<Var> = parts.to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut res = Vec::with_capacity(parts.len());
                let mut off = 0;
                for (&p, &r) in parts.iter().zip(&row_counts) {
                    let slice = g.data[off * cols..(off + r) * cols].to_vec();
                    res.push((
                        p,
                        Tensor {
                            shape: vec![r, cols],
                            data: slice,
                        },
                    ));
                    off += r;
                }
                res
            })),
        ))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let va = self.value(a);
        if va.shape.len() != 2 || r1 > va.rows() || r0 > r1 {
            return Err(Error::Shape(format!(
                "slice_rows {}..{} of {:?}",
                r0, r1, va.shape
            )));
        }
        let (rows, cols) = (va.rows(), va.cols());
        let out = Tensor {
            shape: vec![r1 - r0, cols],
            data: va.data[r0 * cols..r1 * cols].to_vec(),
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = Tensor::zeros(&[rows, cols]);
                da.data[r0 * cols..r1 * cols].copy_from_slice(&g.data);
                vec![(a, da)]
            })),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let va = self.value(a);
        if va.shape.len() != 2 || c1 > va.cols() || c0 > c1 {
            return Err(Error::Shape(format!(
                "slice_cols {}..{} of {:?}",
                c0, c1, va.shape
            )));
        }
        let (rows, cols) = (va.rows(), va.cols());
        let w = c1 - c0;
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&va.data[i * cols + c0..i * cols + c1]);
        }
        let out = Tensor {
            shape: vec![rows, w],
            data,
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    da.data[i * cols + c0..i * cols + c1]
                        .copy_from_slice(&g.data[i * w..(i + 1) * w]);
                }
                vec![(a, da)]
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero tensors".into()));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape.len() != 2 || v.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: inconsistent shape {:?}",
                    v.shape
                )));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                data.extend_from_slice(&v.data[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor {
            shape: vec![rows, total],
            data,
        };
        let parts: Vec<Var> = parts.to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut res: Vec<(Var, Tensor)> = parts
                    .iter()
                    .zip(&widths)
                    .map(|(&p, &w)| (p, Tensor::zeros(&[rows, w])))
                    .collect();
                for i in 0..rows {
                    let mut off = 0;
                    for (idx, &w) in widths.iter().enumerate() {
                        res[idx].1.data[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data[i * total + off..i * total + off + w]);
                        off += w;
                    }
                }
                res
            })),
        ))
    }

    /// Row `i` of the input becomes rows `i*k .. i*k+k` of the output.
    pub fn repeat_each_row(&mut self, a: Var, k: usize) -> Result<Var> {
        let va = self.value(a);
        if va.shape.len() != 2 {
            return Err(Error::Shape(format!("repeat_each_row: {:?}", va.shape)));
        }
        let (rows, cols) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(rows * k * cols);
        for i in 0..rows {
            for _ in 0..k {
                data.extend_from_slice(&va.data[i * cols..(i + 1) * cols]);
            }
        }
        let out = Tensor {
            shape: vec![rows * k, cols],
            data,
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    for r in 0..k {
                        let src = (i * k + r) * cols;
                        for j in 0..cols {
                            da.data[i * cols + j] += g.data[src + j];
                        }
                    }
                }
                vec![(a, da)]
            })),
        ))
    }

    /// The whole input block repeated `k` times along rows.
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let va = self.value(a);
        if va.shape.len() != 2 {
            return Err(Error::Shape(format!("tile_rows: {:?}", va.shape)));
        }
        let (rows, cols) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(rows * k * cols);
        for _ in 0..k {
            data.extend_from_slice(&va.data);
        }
        let out = Tensor {
            shape: vec![rows * k, cols],
            data,
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = Tensor::zeros(&[rows, cols]);
                for r in 0..k {
                    for i in 0..rows * cols {
                        da.data[i] += g.data[r * rows * cols + i];
                    }
                }
                vec![(a, da)]
            })),
        ))
    }

    /// Gather embedding rows for a token id sequence; backward scatter-adds.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape.len() != 2 {
            return Err(Error::Shape(format!("embed table: {:?}", vt.shape)));
        }
        let (vocab, d) = (vt.rows(), vt.cols());
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab(id));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&vt.data[id * d..(id + 1) * d]);
        }
        let out = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        let ids = ids.to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut dt = Tensor::zeros(&[vocab, d]);
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt.data[id * d + j] += g.data[pos * d + j];
                    }
                }
                vec![(table, dt)]
            })),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(
            out,
            Some(Box::new(move |g| {
                let d = g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(
                    a,
                    Tensor {
                        shape: g.shape.clone(),
                        data: d,
                    },
                )]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s: Vec<f64> = va.data.iter().map(|&v| sigmoid_scalar(v)).collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data: s.clone(),
        };
        self.push(
            out,
            Some(Box::new(move |g| {
                let d = g
                    .data
                    .iter()
                    .zip(&s)
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                vec![(
                    a,
                    Tensor {
                        shape: g.shape.clone(),
                        data: d,
                    },
                )]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let y: Vec<f64> = va.data.iter().map(|&v| v.tanh()).collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data: y.clone(),
        };
        self.push(
            out,
            Some(Box::new(move |g| {
                let d = g.data.iter().zip(&y).map(|(g, &y)| g * (1.0 - y * y)).collect();
                vec![(
                    a,
                    Tensor {
                        shape: g.shape.clone(),
                        data: d,
                    },
                )]
            })),
        )
    }

    /// x · sigmoid(x)
    pub fn swish(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&v| v * sigmoid_scalar(v)).collect(),
        };
        self.push(
            out,
            Some(Box::new(move |g| {
                let d = g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(g, &x)| {
                        let s = sigmoid_scalar(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                vec![(
                    a,
                    Tensor {
                        shape: g.shape.clone(),
                        data: d,
                    },
                )]
            })),
        )
    }

    /// Gated linear unit over the channel axis: `[t × 2d] → [t × d]`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a).clone();
        if va.shape.len() != 2 || va.cols() % 2 != 0 {
            return Err(Error::Shape(format!(
                "glu needs even channel count, got {:?}",
                va.shape
            )));
        }
        let (t, d2) = (va.rows(), va.cols());
        let d = d2 / 2;
        let mut data = Vec::with_capacity(t * d);
        for i in 0..t {
            for j in 0..d {
                let x = va.data[i * d2 + j];
                let gate = va.data[i * d2 + d + j];
                data.push(x * sigmoid_scalar(gate));
            }
        }
        let out = Tensor {
            shape: vec![t, d],
            data,
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = Tensor::zeros(&[t, d2]);
                for i in 0..t {
                    for j in 0..d {
                        let x = va.data[i * d2 + j];
                        let s = sigmoid_scalar(va.data[i * d2 + d + j]);
                        let gv = g.data[i * d + j];
                        da.data[i * d2 + j] = gv * s;
                        da.data[i * d2 + d + j] = gv * x * s * (1.0 - s);
                    }
                }
                vec![(a, da)]
            })),
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape.clone();
        let s: f64 = va.data.iter().sum();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g| {
                vec![(a, Tensor::filled(&shape, g.data[0]))]
            })),
        )
    }
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data[j * r + i] = a.data[i * c + j];
        }
    }
    out
}
