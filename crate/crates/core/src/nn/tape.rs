//! Reverse-mode autodiff over a flat tape of tensor ops.
//!
//! Every op the forecaster, weight-VAE and flow-matching networks need is a
//! tape node with a hand-written backward rule; composites (attention, FFN,
//! graph conv) are built from these in `layers`. The tape is rebuilt per
//! training step. Any non-finite value poisons the tape and surfaces as a
//! numeric error instead of propagating NaNs.

use crate::error::{Error, Result};
use crate::nn::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstId(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = X @ W or X @ W^T with X viewed as (rows, last_dim), W 2D.
    MatMul2 {
        x: Var,
        w: Var,
        tw: bool,
    },
    /// y[b] = A @ x[b] for a constant n-by-n matrix over the (..., n, c) view.
    AdjMatmul {
        adj: ConstId,
        x: Var,
        n: usize,
    },
    /// Valid correlation along the leading time axis of (t, s, c_in)
    /// with kernel (c_out, c_in, k).
    ConvTime {
        x: Var,
        w: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddScalar {
        a: Var,
    },
    /// Broadcast add of a length-D vector over the rows of (..., D).
    AddRow {
        a: Var,
        v: Var,
    },
    /// Broadcast multiply of a length-D vector over the rows of (..., D).
    MulRow {
        a: Var,
        v: Var,
    },
    MulConst {
        a: Var,
        c: ConstId,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    SoftmaxRows {
        a: Var,
    },
    /// Row-wise normalization to zero mean / unit variance (no affine).
    LayerNormRows {
        a: Var,
        /// saved (mean, rstd) per row
        aux: Vec<(f64, f64)>,
    },
    SliceCols {
        a: Var,
        from: usize,
        to: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    /// Contiguous row range of a 2-D tensor.
    SliceRows {
        a: Var,
        from: usize,
        to: usize,
    },
    /// Stack 2-D tensors with equal column counts along the row axis.
    ConcatRows {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
    SumAll {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consts: Vec<Tensor>,
    poisoned: Option<String>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant_tensor(&mut self, t: Tensor) -> ConstId {
        self.consts.push(t);
        ConstId(self.consts.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn check_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(msg) => Err(Error::Numeric(msg.clone())),
            None => Ok(()),
        }
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.check_finite()?;
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar, got shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(format!(
                "non-finite value produced by node {} ({:?})",
                self.nodes.len(),
                op_name(&op)
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- ops ----

    pub fn matmul(&mut self, x: Var, w: Var, transpose_w: bool) -> Result<Var> {
        let (xs, ws) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if ws.shape.len() != 2 {
            return Err(Error::Shape(format!("matmul weight must be 2D: {:?}", ws.shape)));
        }
        let (p, q) = (ws.shape[0], ws.shape[1]);
        let k = xs.last_dim();
        let rows = xs.rows();
        let out = if transpose_w {
            if k != q {
                return Err(Error::Shape(format!(
                    "matmul: x last dim {k} != weight cols {q} (transposed)"
                )));
            }
            p
        } else {
            if k != p {
                return Err(Error::Shape(format!(
                    "matmul: x last dim {k} != weight rows {p}"
                )));
            }
            q
        };
        let mut y = vec![0.0; rows * out];
        gemm(rows, k, out, 1.0, &xs.data, false, &ws.data, transpose_w, 0.0, &mut y);
        let mut shape = xs.shape.clone();
        if shape.is_empty() {
            shape = vec![1];
        }
        *shape.last_mut().unwrap() = out;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor { shape, data: y }, Op::MatMul2 { x, w, tw: transpose_w }, ng))
    }

    pub fn adj_matmul(&mut self, adj: ConstId, x: Var) -> Result<Var> {
        let a = &self.consts[adj.0];
        let n = a.shape[0];
        if a.shape != vec![n, n] {
            return Err(Error::Shape("adjacency must be square".into()));
        }
        let xs = &self.nodes[x.0].value;
        let c = xs.last_dim();
        if xs.shape.len() < 2 || xs.shape[xs.shape.len() - 2] != n {
            return Err(Error::Shape(format!(
                "adj_matmul: x shape {:?} incompatible with n={n}",
                xs.shape
            )));
        }
        let batch = xs.numel() / (n * c);
        let mut y = vec![0.0; xs.numel()];
        for b in 0..batch {
            let xb = &xs.data[b * n * c..(b + 1) * n * c];
            let yb = &mut y[b * n * c..(b + 1) * n * c];
            gemm(n, n, c, 1.0, &a.data, false, xb, false, 0.0, yb);
        }
        let shape = xs.shape.clone();
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data: y }, Op::AdjMatmul { adj, x, n }, ng))
    }

    pub fn conv_time(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = &self.nodes[x.0].value;
        let ws = &self.nodes[w.0].value;
        if xs.shape.len() != 3 || ws.shape.len() != 3 {
            return Err(Error::Shape(format!(
                "conv_time expects x (t,s,c_in) and w (c_out,c_in,k), got {:?} / {:?}",
                xs.shape, ws.shape
            )));
        }
        let (t, s, c_in) = (xs.shape[0], xs.shape[1], xs.shape[2]);
        let (c_out, wc_in, k) = (ws.shape[0], ws.shape[1], ws.shape[2]);
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv_time channel mismatch: {c_in} vs {wc_in}"
            )));
        }
        if t < k {
            return Err(Error::Shape(format!(
                "conv_time: time length {t} shorter than kernel {k}"
            )));
        }
        let t_out = t - k + 1;
        let rows = t_out * s;
        let mut y = vec![0.0; rows * c_out];
        let mut wj = vec![0.0; c_out * c_in];
        for j in 0..k {
            for o in 0..c_out {
                for i in 0..c_in {
                    wj[o * c_in + i] = ws.data[o * c_in * k + i * k + j];
                }
            }
            let xj = &xs.data[j * s * c_in..(j + t_out) * s * c_in];
            gemm(rows, c_in, c_out, 1.0, xj, false, &wj, true, 1.0, &mut y);
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            Tensor {
                shape: vec![t_out, s, c_out],
                data: y,
            },
            Op::ConvTime { x, w },
            ng,
        ))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, which: &str) -> Result<(Tensor, bool)> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape != bv.shape {
            return Err(Error::Shape(format!(
                "{which}: shapes {:?} vs {:?}",
                av.shape, bv.shape
            )));
        }
        let data: Vec<f64> = match which {
            "add" => av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
            "sub" => av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect(),
            "mul" => av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        Ok((
            Tensor {
                shape: av.shape.clone(),
                data,
            },
            self.ng(a) || self.ng(b),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary_same_shape(a, b, "add")?;
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary_same_shape(a, b, "sub")?;
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary_same_shape(a, b, "mul")?;
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x * c).collect(),
        };
        let ng = self.ng(a);
        self.push(t, Op::Scale { a, c }, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x + c).collect(),
        };
        let ng = self.ng(a);
        self.push(t, Op::AddScalar { a }, ng)
    }

    fn rowwise(&mut self, a: Var, v: Var, mul: bool) -> Result<Var> {
        let (av, vv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let d = av.last_dim();
        if vv.numel() != d {
            return Err(Error::Shape(format!(
                "row broadcast: vector length {} != last dim {}",
                vv.numel(),
                d
            )));
        }
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data.chunks(d) {
            for (x, y) in row.iter().zip(&vv.data) {
                data.push(if mul { x * y } else { x + y });
            }
        }
        let t = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let ng = self.ng(a) || self.ng(v);
        let op = if mul { Op::MulRow { a, v } } else { Op::AddRow { a, v } };
        Ok(self.push(t, op, ng))
    }

    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.rowwise(a, v, false)
    }

    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.rowwise(a, v, true)
    }

    pub fn mul_const(&mut self, a: Var, c: ConstId) -> Result<Var> {
        let (av, cv) = (&self.nodes[a.0].value, &self.consts[c.0]);
        if av.shape != cv.shape {
            return Err(Error::Shape(format!(
                "mul_const: shapes {:?} vs {:?}",
                av.shape, cv.shape
            )));
        }
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&cv.data).map(|(x, y)| x * y).collect(),
        };
        let ng = self.ng(a);
        Ok(self.push(t, Op::MulConst { a, c }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x.max(0.0)).collect(),
        };
        let ng = self.ng(a);
        self.push(t, Op::Relu { a }, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        };
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid { a }, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x.exp()).collect(),
        };
        let ng = self.ng(a);
        self.push(t, Op::Exp { a }, ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x.clamp(lo, hi)).collect(),
        };
        let ng = self.ng(a);
        self.push(t, Op::Clamp { a, lo, hi }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data.chunks(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let t = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let ng = self.ng(a);
        self.push(t, Op::SoftmaxRows { a }, ng)
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let mut data = Vec::with_capacity(av.numel());
        let mut aux = Vec::with_capacity(av.rows());
        for row in av.data.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            aux.push((mean, rstd));
            data.extend(row.iter().map(|x| (x - mean) * rstd));
        }
        let t = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let ng = self.ng(a);
        self.push(t, Op::LayerNormRows { a, aux }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        if from >= to || to > d {
            return Err(Error::Shape(format!(
                "slice_cols: [{from}, {to}) out of last dim {d}"
            )));
        }
        let width = to - from;
        let mut data = Vec::with_capacity(av.rows() * width);
        for row in av.data.chunks(d) {
            data.extend_from_slice(&row[from..to]);
        }
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = width;
        let ng = self.ng(a);
        Ok(self.push(Tensor { shape, data }, Op::SliceCols { a, from, to }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let lead: Vec<usize> = {
            let s = &self.nodes[parts[0].0].value.shape;
            s[..s.len() - 1].to_vec()
        };
        let mut width = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(Error::Shape("concat_cols: row mismatch".into()));
            }
            width += v.last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let d = v.last_dim();
                data.extend_from_slice(&v.data[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor { shape, data },
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape.len() != 2 {
            return Err(Error::Shape(format!("slice_rows expects 2-D, got {:?}", av.shape)));
        }
        let (m, d) = (av.shape[0], av.shape[1]);
        if from >= to || to > m {
            return Err(Error::Shape(format!("slice_rows: [{from}, {to}) out of {m} rows")));
        }
        let data = av.data[from * d..to * d].to_vec();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor { shape: vec![to - from, d], data },
            Op::SliceRows { a, from, to },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let d = {
            let v = &self.nodes[parts[0].0].value;
            if v.shape.len() != 2 {
                return Err(Error::Shape(format!("concat_rows expects 2-D, got {:?}", v.shape)));
            }
            v.shape[1]
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape.len() != 2 || v.shape[1] != d {
                return Err(Error::Shape(format!(
                    "concat_rows: part shape {:?} incompatible with width {d}",
                    v.shape
                )));
            }
            rows += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor { shape: vec![rows, d], data },
            Op::ConcatRows { parts: parts.to_vec() },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let t = av.reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape { a }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data.iter().sum::<f64>() / v.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll { a }, ng)
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_finite()?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gy);
            // keep the grad available for leaves and intermediate inspection
            self.grads[i] = Some(gy);
        }
        for g in self.grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape.clone();
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.data.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => {
                *slot = Some(Tensor {
                    shape,
                    data: delta.to_vec(),
                });
            }
        }
    }

    fn grad_buf(&mut self, v: Var) -> &mut Tensor {
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(Tensor::zeros(self.nodes[v.0].value.shape.clone()));
        }
        self.grads[v.0].as_mut().unwrap()
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, i: usize, gy: &Tensor) {
        // Move the op out to appease the borrow checker; restore afterwards.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul2 { x, w, tw } => {
                let (x, w, tw) = (*x, *w, *tw);
                let rows = self.nodes[x.0].value.rows();
                let k = self.nodes[x.0].value.last_dim();
                let out = gy.last_dim();
                if self.nodes[x.0].needs_grad {
                    let wd = self.nodes[w.0].value.data.clone();
                    let gx = self.grad_buf(x);
                    // tw: dX += dY @ W ; else dX += dY @ W^T
                    gemm(rows, out, k, 1.0, &gy.data, false, &wd, !tw, 1.0, &mut gx.data);
                }
                if self.nodes[w.0].needs_grad {
                    let xd = self.nodes[x.0].value.data.clone();
                    let gw = self.grad_buf(w);
                    if tw {
                        // dW += dY^T @ X  (W is (out, k))
                        gemm(out, rows, k, 1.0, &gy.data, true, &xd, false, 1.0, &mut gw.data);
                    } else {
                        // dW += X^T @ dY  (W is (k, out))
                        gemm(k, rows, out, 1.0, &xd, true, &gy.data, false, 1.0, &mut gw.data);
                    }
                }
            }
            Op::AdjMatmul { adj, x, n } => {
                let (adj, x, n) = (*adj, *x, *n);
                if self.nodes[x.0].needs_grad {
                    let c = self.nodes[x.0].value.last_dim();
                    let batch = gy.numel() / (n * c);
                    let a = self.consts[adj.0].data.clone();
                    let gx = self.grad_buf(x);
                    for b in 0..batch {
                        let gyb = &gy.data[b * n * c..(b + 1) * n * c];
                        let gxb = &mut gx.data[b * n * c..(b + 1) * n * c];
                        // dX = A^T dY
                        gemm(n, n, c, 1.0, &a, true, gyb, false, 1.0, gxb);
                    }
                }
            }
            Op::ConvTime { x, w } => {
                let (x, w) = (*x, *w);
                let xs = self.nodes[x.0].value.shape.clone();
                let ws = self.nodes[w.0].value.shape.clone();
                let (s, c_in) = (xs[1], xs[2]);
                let (c_out, k) = (ws[0], ws[2]);
                let t_out = gy.shape[0];
                let rows = t_out * s;
                if self.nodes[w.0].needs_grad {
                    let xd = self.nodes[x.0].value.data.clone();
                    let mut gwj = vec![0.0; c_out * c_in];
                    for j in 0..k {
                        let xj = &xd[j * s * c_in..(j + t_out) * s * c_in];
                        gwj.iter_mut().for_each(|v| *v = 0.0);
                        gemm(c_out, rows, c_in, 1.0, &gy.data, true, xj, false, 0.0, &mut gwj);
                        let gw = self.grad_buf(w);
                        for o in 0..c_out {
                            for ci in 0..c_in {
                                gw.data[o * c_in * k + ci * k + j] += gwj[o * c_in + ci];
                            }
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let wd = self.nodes[w.0].value.data.clone();
                    let mut wj = vec![0.0; c_out * c_in];
                    for j in 0..k {
                        for o in 0..c_out {
                            for ci in 0..c_in {
                                wj[o * c_in + ci] = wd[o * c_in * k + ci * k + j];
                            }
                        }
                        let gx = self.grad_buf(x);
                        let gxj = &mut gx.data[j * s * c_in..(j + t_out) * s * c_in];
                        gemm(rows, c_out, c_in, 1.0, &gy.data, false, &wj, false, 1.0, gxj);
                    }
                }
            }
            Op::Add { a, b } => {
                self.accum(*a, &gy.data);
                self.accum(*b, &gy.data);
            }
            Op::Sub { a, b } => {
                self.accum(*a, &gy.data);
                let neg: Vec<f64> = gy.data.iter().map(|v| -v).collect();
                self.accum(*b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let bv = &self.nodes[b.0].value;
                    let da: Vec<f64> = gy.data.iter().zip(&bv.data).map(|(g, v)| g * v).collect();
                    self.accum(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let av = &self.nodes[a.0].value;
                    let db: Vec<f64> = gy.data.iter().zip(&av.data).map(|(g, v)| g * v).collect();
                    self.accum(b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = gy.data.iter().map(|g| g * c).collect();
                self.accum(*a, &da);
            }
            Op::AddScalar { a } => {
                self.accum(*a, &gy.data);
            }
            Op::AddRow { a, v } => {
                self.accum(*a, &gy.data);
                let (v, a) = (*v, *a);
                if self.nodes[v.0].needs_grad {
                    let d = self.nodes[a.0].value.last_dim();
                    let mut dv = vec![0.0; d];
                    for row in gy.data.chunks(d) {
                        for (s, g) in dv.iter_mut().zip(row) {
                            *s += g;
                        }
                    }
                    self.accum(v, &dv);
                }
            }
            Op::MulRow { a, v } => {
                let (a, v) = (*a, *v);
                let d = self.nodes[a.0].value.last_dim();
                if self.nodes[a.0].needs_grad {
                    let vv = self.nodes[v.0].value.data.clone();
                    let mut da = Vec::with_capacity(gy.numel());
                    for row in gy.data.chunks(d) {
                        for (g, s) in row.iter().zip(&vv) {
                            da.push(g * s);
                        }
                    }
                    self.accum(a, &da);
                }
                if self.nodes[v.0].needs_grad {
                    let av = &self.nodes[a.0].value;
                    let mut dv = vec![0.0; d];
                    for (grow, arow) in gy.data.chunks(d).zip(av.data.chunks(d)) {
                        for ((s, g), x) in dv.iter_mut().zip(grow).zip(arow) {
                            *s += g * x;
                        }
                    }
                    self.accum(v, &dv);
                }
            }
            Op::MulConst { a, c } => {
                let cv = &self.consts[c.0];
                let da: Vec<f64> = gy.data.iter().zip(&cv.data).map(|(g, v)| g * v).collect();
                self.accum(*a, &da);
            }
            Op::Relu { a } => {
                let av = &self.nodes[a.0].value;
                let da: Vec<f64> = gy
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(*a, &da);
            }
            Op::Sigmoid { a } => {
                let yv = &self.nodes[i].value;
                let da: Vec<f64> = gy
                    .data
                    .iter()
                    .zip(&yv.data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accum(*a, &da);
            }
            Op::Exp { a } => {
                let yv = &self.nodes[i].value;
                let da: Vec<f64> = gy.data.iter().zip(&yv.data).map(|(g, y)| g * y).collect();
                self.accum(*a, &da);
            }
            Op::Clamp { a, lo, hi } => {
                let av = &self.nodes[a.0].value;
                let da: Vec<f64> = gy
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                self.accum(*a, &da);
            }
            Op::SoftmaxRows { a } => {
                let yv = &self.nodes[i].value;
                let d = yv.last_dim();
                let mut da = Vec::with_capacity(yv.numel());
                for (yrow, grow) in yv.data.chunks(d).zip(gy.data.chunks(d)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    da.extend(yrow.iter().zip(grow).map(|(y, g)| y * (g - dot)));
                }
                self.accum(*a, &da);
            }
            Op::LayerNormRows { a, aux } => {
                let av = &self.nodes[a.0].value;
                let d = av.last_dim();
                let dn = d as f64;
                let mut da = Vec::with_capacity(av.numel());
                for ((xrow, grow), (mean, rstd)) in
                    av.data.chunks(d).zip(gy.data.chunks(d)).zip(aux.iter())
                {
                    let gmean: f64 = grow.iter().sum::<f64>() / dn;
                    let mut gxhat_dot = 0.0;
                    for (x, g) in xrow.iter().zip(grow) {
                        gxhat_dot += g * (x - mean) * rstd;
                    }
                    gxhat_dot /= dn;
                    for (x, g) in xrow.iter().zip(grow) {
                        let xhat = (x - mean) * rstd;
                        da.push(rstd * (g - gmean - xhat * gxhat_dot));
                    }
                }
                self.accum(*a, &da);
            }
            Op::SliceCols { a, from, to } => {
                let (a, from, to) = (*a, *from, *to);
                if self.nodes[a.0].needs_grad {
                    let d = self.nodes[a.0].value.last_dim();
                    let w = to - from;
                    let rows = self.nodes[a.0].value.rows();
                    let mut da = vec![0.0; rows * d];
                    for r in 0..rows {
                        da[r * d + from..r * d + to].copy_from_slice(&gy.data[r * w..(r + 1) * w]);
                    }
                    self.accum(a, &da);
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let rows = gy.rows();
                let total = gy.last_dim();
                let mut offset = 0;
                for p in parts {
                    let d = self.nodes[p.0].value.last_dim();
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(rows * d);
                        for r in 0..rows {
                            dp.extend_from_slice(&gy.data[r * total + offset..r * total + offset + d]);
                        }
                        self.accum(p, &dp);
                    }
                    offset += d;
                }
            }
            Op::SliceRows { a, from, to } => {
                let (a, from, to) = (*a, *from, *to);
                if self.nodes[a.0].needs_grad {
                    let d = self.nodes[a.0].value.shape[1];
                    let m = self.nodes[a.0].value.shape[0];
                    let mut da = vec![0.0; m * d];
                    da[from * d..to * d].copy_from_slice(&gy.data);
                    self.accum(a, &da);
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if self.nodes[p.0].needs_grad {
                        let dp = gy.data[offset..offset + len].to_vec();
                        self.accum(p, &dp);
                    }
                    offset += len;
                }
            }
            Op::Reshape { a } => {
                self.accum(*a, &gy.data);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].value.numel();
                let da = vec![gy.data[0]; n];
                self.accum(*a, &da);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].value.numel();
                let da = vec![gy.data[0] / n as f64; n];
                self.accum(*a, &da);
            }
        }
        self.nodes[i].op = op;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul2 { .. } => "matmul",
        Op::AdjMatmul { .. } => "adj_matmul",
        Op::ConvTime { .. } => "conv_time",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::AddRow { .. } => "add_row",
        Op::MulRow { .. } => "mul_row",
        Op::MulConst { .. } => "mul_const",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Exp { .. } => "exp",
        Op::Clamp { .. } => "clamp",
        Op::SoftmaxRows { .. } => "softmax",
        Op::LayerNormRows { .. } => "layer_norm",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatRows { .. } => "concat_rows",
        Op::Reshape { .. } => "reshape",
        Op::SumAll { .. } => "sum",
        Op::MeanAll { .. } => "mean",
    }
}
