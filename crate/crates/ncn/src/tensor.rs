//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! The op set is exactly what the model's forward pass needs, nothing more.
//! Everything is generic over the element type: training runs in f32, while
//! tests instantiate the same code in f64 so finite-difference gradient
//! checks can be held to tight tolerances.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type of the engine (f32 for training, f64 for gradient checks).
pub trait Elem:
    Float + NumAssign + FromPrimitive + ToPrimitive + std::iter::Sum + Send + Sync + std::fmt::Debug + 'static
{
}
impl Elem for f32 {}
impl Elem for f64 {}

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<E> {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn scalar(v: E) -> Tensor<E> {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Tensor<E>> {
        Tensor::new(shape, data.iter().map(|&v| E::from_f64(v).unwrap()).collect())
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Tensor<E>> {
        Tensor::new(shape, data.iter().map(|&v| E::from_f32(v).unwrap()).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| F::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// Reference to a value recorded on a [`Tape`].
pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(VarId, VarId),
    AddBias(VarId, VarId),
    Relu(VarId),
    ConcatLastDim(VarId, VarId),
    Mul(VarId, VarId),
    SoftmaxLastDim(VarId),
    LogSoftmaxLastDim(VarId),
    NllLoss(VarId, Vec<usize>),
    Conv2dHx1(VarId, VarId, VarId),
    SwapAxes12(VarId),
    Reshape(VarId),
    RowScale { x: VarId, w: VarId, col: usize },
}

struct Node<E> {
    value: Tensor<E>,
    grad: Vec<E>,
    op: Op,
}

/// Ordered record of executed ops. Backward walks the record in exact
/// reverse execution order, accumulating gradients additively so an input
/// feeding several ops receives every contribution.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Tape<E> {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: VarId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: VarId) -> &[E] {
        &self.nodes[id].grad
    }

    fn push(&mut self, value: Tensor<E>, op: Op) -> VarId {
        debug_assert!(
            value.data.iter().all(|v| v.is_finite()),
            "non-finite value out of {:?}",
            op
        );
        let grad = vec![E::zero(); value.numel()];
        self.nodes.push(Node { value, grad, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor<E>) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// a: [..., p, q] times b: [q, r] -> [..., p, r].
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape.len() < 2 || bv.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs [..., p, q] x [q, r], got {:?} x {:?}",
                av.shape, bv.shape
            )));
        }
        let q = av.shape[av.shape.len() - 1];
        let (bq, r) = (bv.shape[0], bv.shape[1]);
        if q != bq {
            return Err(Error::Shape(format!(
                "matmul inner dims {} vs {}",
                q, bq
            )));
        }
        let rows = av.numel() / q;
        let mut out = vec![E::zero(); rows * r];
        let (a_data, b_data) = (&av.data, &bv.data);
        out.par_chunks_mut(r).enumerate().for_each(|(i, out_row)| {
            let a_row = &a_data[i * q..(i + 1) * q];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &b_data[k * r..(k + 1) * r];
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        });
        let mut shape = av.shape.clone();
        let last = shape.len() - 1;
        shape[last] = r;
        Ok(self.push(Tensor { shape, data: out }, Op::Matmul(a, b)))
    }

    /// x: [..., r] + bias: [r], broadcast over leading dims.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (xv, bv) = (&self.nodes[x].value, &self.nodes[bias].value);
        let r = *xv.shape.last().ok_or_else(|| Error::Shape("add_bias on scalar".into()))?;
        if bv.shape != [r] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match last dim {}",
                bv.shape, r
            )));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(r) {
            for (o, &b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let xv = &self.nodes[x].value;
        let data = xv.data.iter().map(|&v| v.max(E::zero())).collect();
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(x))
    }

    /// Concatenate along the last dimension; leading dims must agree.
    pub fn concat_last_dim(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape.is_empty()
            || bv.shape.is_empty()
            || av.shape[..av.shape.len() - 1] != bv.shape[..bv.shape.len() - 1]
        {
            return Err(Error::Shape(format!(
                "concat_last_dim of {:?} and {:?}",
                av.shape, bv.shape
            )));
        }
        let p = av.shape[av.shape.len() - 1];
        let q = bv.shape[bv.shape.len() - 1];
        let rows = av.numel() / p.max(1);
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for i in 0..rows {
            data.extend_from_slice(&av.data[i * p..(i + 1) * p]);
            data.extend_from_slice(&bv.data[i * q..(i + 1) * q]);
        }
        let mut shape = av.shape.clone();
        let last = shape.len() - 1;
        shape[last] = p + q;
        Ok(self.push(Tensor { shape, data }, Op::ConcatLastDim(a, b)))
    }

    /// Element-wise product of same-shape tensors.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape != bv.shape {
            return Err(Error::Shape(format!(
                "elementwise mul of {:?} and {:?}",
                av.shape, bv.shape
            )));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let shape = av.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn softmax_last_dim(&mut self, x: VarId) -> Result<VarId> {
        let xv = &self.nodes[x].value;
        let r = *xv.shape.last().unwrap_or(&0);
        if r == 0 {
            return Err(Error::Shape("softmax over empty dim".into()));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(r) {
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::SoftmaxLastDim(x)))
    }

    pub fn log_softmax_last_dim(&mut self, x: VarId) -> Result<VarId> {
        let xv = &self.nodes[x].value;
        let r = *xv.shape.last().unwrap_or(&0);
        if r == 0 {
            return Err(Error::Shape("log_softmax over empty dim".into()));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(r) {
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let sum: E = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::LogSoftmaxLastDim(x)))
    }

    /// Negative log likelihood over a batch of log-probabilities [B, c],
    /// averaged over the batch.
    pub fn nll_loss(&mut self, log_probs: VarId, targets: &[usize]) -> Result<VarId> {
        let lv = &self.nodes[log_probs].value;
        if lv.shape.len() != 2 {
            return Err(Error::Shape(format!("nll_loss on shape {:?}", lv.shape)));
        }
        let (b, c) = (lv.shape[0], lv.shape[1]);
        if targets.len() != b {
            return Err(Error::Shape(format!("{} targets for batch {}", targets.len(), b)));
        }
        if b == 0 {
            return Err(Error::Shape("nll_loss on empty batch".into()));
        }
        let mut sum = E::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Data(format!("target {} >= class count {}", t, c)));
            }
            sum += lv.data[i * c + t];
        }
        let loss = -sum / E::from_usize(b).unwrap();
        Ok(self.push(Tensor::scalar(loss), Op::NllLoss(log_probs, targets.to_vec())))
    }

    /// Valid-padding stride-1 convolution over [B, C_in, H, 1] with kernel
    /// [C_out, C_in, h, 1] and bias [C_out] -> [B, C_out, H - h + 1, 1].
    pub fn conv2d_hx1(&mut self, input: VarId, kernel: VarId, bias: VarId) -> Result<VarId> {
        let (iv, kv, bv) = (
            &self.nodes[input].value,
            &self.nodes[kernel].value,
            &self.nodes[bias].value,
        );
        if iv.shape.len() != 4 || iv.shape[3] != 1 || kv.shape.len() != 4 || kv.shape[3] != 1 {
            return Err(Error::Shape(format!(
                "conv2d_hx1 needs [B,C,H,1] input and [O,C,h,1] kernel, got {:?} and {:?}",
                iv.shape, kv.shape
            )));
        }
        let (b, c_in, h) = (iv.shape[0], iv.shape[1], iv.shape[2]);
        let (c_out, kc, kh) = (kv.shape[0], kv.shape[1], kv.shape[2]);
        if kc != c_in {
            return Err(Error::Shape(format!("kernel channels {} vs input {}", kc, c_in)));
        }
        if kh > h {
            return Err(Error::Shape(format!("kernel height {} > input height {}", kh, h)));
        }
        if bv.shape != [c_out] {
            return Err(Error::Shape(format!("conv bias shape {:?}", bv.shape)));
        }
        let out_h = h - kh + 1;
        let mut out = vec![E::zero(); b * c_out * out_h];
        let (in_d, k_d, b_d) = (&iv.data, &kv.data, &bv.data);
        out.par_chunks_mut(c_out * out_h).enumerate().for_each(|(bi, sample)| {
            let in_s = &in_d[bi * c_in * h..(bi + 1) * c_in * h];
            for o in 0..c_out {
                for i in 0..out_h {
                    let mut acc = b_d[o];
                    for c in 0..c_in {
                        let k_row = &k_d[(o * c_in + c) * kh..(o * c_in + c + 1) * kh];
                        let in_row = &in_s[c * h + i..c * h + i + kh];
                        for (&kw, &xv) in k_row.iter().zip(in_row) {
                            acc += kw * xv;
                        }
                    }
                    sample[o * out_h + i] = acc;
                }
            }
        });
        let shape = vec![b, c_out, out_h, 1];
        Ok(self.push(Tensor { shape, data: out }, Op::Conv2dHx1(input, kernel, bias)))
    }

    /// Swap the middle two axes of a 3-D tensor: [a, b, c] -> [a, c, b].
    pub fn swap_axes_12(&mut self, x: VarId) -> Result<VarId> {
        let xv = &self.nodes[x].value;
        if xv.shape.len() != 3 {
            return Err(Error::Shape(format!("swap_axes_12 on shape {:?}", xv.shape)));
        }
        let (a, b, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let data = transpose_12(&xv.data, a, b, c);
        Ok(self.push(Tensor { shape: vec![a, c, b], data }, Op::SwapAxes12(x)))
    }

    /// View with a new shape (same number of elements).
    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let xv = &self.nodes[x].value;
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                xv.shape, shape
            )));
        }
        let data = xv.data.clone();
        Ok(self.push(Tensor { shape, data }, Op::Reshape(x)))
    }

    /// Scale each row of x: [B, d] by column `col` of w: [B, m]:
    /// out[b, i] = x[b, i] * w[b, col].
    pub fn row_scale(&mut self, x: VarId, w: VarId, col: usize) -> Result<VarId> {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        if xv.shape.len() != 2 || wv.shape.len() != 2 || xv.shape[0] != wv.shape[0] {
            return Err(Error::Shape(format!(
                "row_scale of {:?} by {:?}",
                xv.shape, wv.shape
            )));
        }
        if col >= wv.shape[1] {
            return Err(Error::Shape(format!("row_scale column {} out of {:?}", col, wv.shape)));
        }
        let d = xv.shape[1];
        let m = wv.shape[1];
        let mut data = xv.data.clone();
        for (bi, row) in data.chunks_mut(d).enumerate() {
            let s = wv.data[bi * m + col];
            for v in row.iter_mut() {
                *v = *v * s;
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::RowScale { x, w, col }))
    }

    /// Reverse-mode sweep from a scalar root. Gradients of every recorded
    /// value are (re)computed; read them with [`Tape::grad`].
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        for node in &mut self.nodes {
            node.grad.fill(E::zero());
        }
        self.nodes[root].grad[0] = E::one();
        for id in (0..=root).rev() {
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    let (ga, gb) = {
                        let av = &self.nodes[a].value;
                        let bv = &self.nodes[b].value;
                        let q = av.shape[av.shape.len() - 1];
                        let r = bv.shape[1];
                        let rows = av.numel() / q;
                        let mut ga = vec![E::zero(); av.numel()];
                        ga.par_chunks_mut(q).enumerate().for_each(|(i, ga_row)| {
                            let g_row = &g[i * r..(i + 1) * r];
                            for (k, gak) in ga_row.iter_mut().enumerate() {
                                let b_row = &bv.data[k * r..(k + 1) * r];
                                let mut acc = E::zero();
                                for (&gj, &bkj) in g_row.iter().zip(b_row) {
                                    acc += gj * bkj;
                                }
                                *gak = acc;
                            }
                        });
                        let mut gb = vec![E::zero(); bv.numel()];
                        gb.par_chunks_mut(r).enumerate().for_each(|(k, gb_row)| {
                            for i in 0..rows {
                                let aik = av.data[i * q + k];
                                let g_row = &g[i * r..(i + 1) * r];
                                for (o, &gj) in gb_row.iter_mut().zip(g_row) {
                                    *o += aik * gj;
                                }
                            }
                        });
                        (ga, gb)
                    };
                    accumulate(&mut self.nodes[a].grad, &ga);
                    accumulate(&mut self.nodes[b].grad, &gb);
                }
                Op::AddBias(x, bias) => {
                    let g = self.nodes[id].grad.clone();
                    let r = self.nodes[bias].value.numel();
                    accumulate(&mut self.nodes[x].grad, &g);
                    let gb = &mut self.nodes[bias].grad;
                    for row in g.chunks(r) {
                        for (o, &gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
                Op::Relu(x) => {
                    let g = self.nodes[id].grad.clone();
                    let mask: Vec<E> = self.nodes[x]
                        .value
                        .data
                        .iter()
                        .map(|&v| if v > E::zero() { E::one() } else { E::zero() })
                        .collect();
                    let gx = &mut self.nodes[x].grad;
                    for ((o, &gi), &m) in gx.iter_mut().zip(&g).zip(&mask) {
                        *o += gi * m;
                    }
                }
                Op::ConcatLastDim(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    let p = *self.nodes[a].value.shape.last().unwrap();
                    let q = *self.nodes[b].value.shape.last().unwrap();
                    let rows = self.nodes[id].value.numel() / (p + q);
                    {
                        let ga = &mut self.nodes[a].grad;
                        for i in 0..rows {
                            for j in 0..p {
                                ga[i * p + j] += g[i * (p + q) + j];
                            }
                        }
                    }
                    let gb = &mut self.nodes[b].grad;
                    for i in 0..rows {
                        for j in 0..q {
                            gb[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    let bd = self.nodes[b].value.data.clone();
                    let ad = self.nodes[a].value.data.clone();
                    {
                        let ga = &mut self.nodes[a].grad;
                        for ((o, &gi), &bv) in ga.iter_mut().zip(&g).zip(&bd) {
                            *o += gi * bv;
                        }
                    }
                    let gb = &mut self.nodes[b].grad;
                    for ((o, &gi), &av) in gb.iter_mut().zip(&g).zip(&ad) {
                        *o += gi * av;
                    }
                }
                Op::SoftmaxLastDim(x) => {
                    let g = self.nodes[id].grad.clone();
                    let s = self.nodes[id].value.data.clone();
                    let r = *self.nodes[id].value.shape.last().unwrap();
                    let gx = &mut self.nodes[x].grad;
                    for (row, (g_row, s_row)) in g.chunks(r).zip(s.chunks(r)).enumerate() {
                        let dot: E = g_row.iter().zip(s_row).map(|(&gi, &si)| gi * si).sum();
                        for j in 0..r {
                            gx[row * r + j] += s_row[j] * (g_row[j] - dot);
                        }
                    }
                }
                Op::LogSoftmaxLastDim(x) => {
                    let g = self.nodes[id].grad.clone();
                    let lp = self.nodes[id].value.data.clone();
                    let r = *self.nodes[id].value.shape.last().unwrap();
                    let gx = &mut self.nodes[x].grad;
                    for (row, (g_row, lp_row)) in g.chunks(r).zip(lp.chunks(r)).enumerate() {
                        let gsum: E = g_row.iter().cloned().sum();
                        for j in 0..r {
                            gx[row * r + j] += g_row[j] - lp_row[j].exp() * gsum;
                        }
                    }
                }
                Op::NllLoss(x, ref targets) => {
                    let g = self.nodes[id].grad[0];
                    let c = self.nodes[x].value.shape[1];
                    let scale = -g / E::from_usize(targets.len()).unwrap();
                    let gx = &mut self.nodes[x].grad;
                    for (i, &t) in targets.iter().enumerate() {
                        gx[i * c + t] += scale;
                    }
                }
                Op::Conv2dHx1(input, kernel, bias) => {
                    let g = self.nodes[id].grad.clone();
                    let (gi, gk, gb) = {
                        let iv = &self.nodes[input].value;
                        let kv = &self.nodes[kernel].value;
                        let (b, c_in, h) = (iv.shape[0], iv.shape[1], iv.shape[2]);
                        let (c_out, kh) = (kv.shape[0], kv.shape[2]);
                        let out_h = h - kh + 1;
                        let mut gi = vec![E::zero(); iv.numel()];
                        gi.par_chunks_mut(c_in * h).enumerate().for_each(|(bi, gi_s)| {
                            let g_s = &g[bi * c_out * out_h..(bi + 1) * c_out * out_h];
                            for o in 0..c_out {
                                for i in 0..out_h {
                                    let gv = g_s[o * out_h + i];
                                    for c in 0..c_in {
                                        let k_row =
                                            &kv.data[(o * c_in + c) * kh..(o * c_in + c + 1) * kh];
                                        for (t, &kw) in k_row.iter().enumerate() {
                                            gi_s[c * h + i + t] += gv * kw;
                                        }
                                    }
                                }
                            }
                        });
                        let mut gk = vec![E::zero(); kv.numel()];
                        gk.par_chunks_mut(c_in * kh).enumerate().for_each(|(o, gk_o)| {
                            for bi in 0..b {
                                let in_s = &iv.data[bi * c_in * h..(bi + 1) * c_in * h];
                                let g_s = &g[bi * c_out * out_h..(bi + 1) * c_out * out_h];
                                for i in 0..out_h {
                                    let gv = g_s[o * out_h + i];
                                    for c in 0..c_in {
                                        for t in 0..kh {
                                            gk_o[c * kh + t] += gv * in_s[c * h + i + t];
                                        }
                                    }
                                }
                            }
                        });
                        let mut gb = vec![E::zero(); c_out];
                        for bi in 0..b {
                            let g_s = &g[bi * c_out * out_h..(bi + 1) * c_out * out_h];
                            for o in 0..c_out {
                                for i in 0..out_h {
                                    gb[o] += g_s[o * out_h + i];
                                }
                            }
                        }
                        (gi, gk, gb)
                    };
                    accumulate(&mut self.nodes[input].grad, &gi);
                    accumulate(&mut self.nodes[kernel].grad, &gk);
                    accumulate(&mut self.nodes[bias].grad, &gb);
                }
                Op::SwapAxes12(x) => {
                    let g = self.nodes[id].grad.clone();
                    let sh = &self.nodes[id].value.shape;
                    let (a, c, b) = (sh[0], sh[1], sh[2]);
                    let gx = transpose_12(&g, a, c, b);
                    accumulate(&mut self.nodes[x].grad, &gx);
                }
                Op::Reshape(x) => {
                    let g = self.nodes[id].grad.clone();
                    accumulate(&mut self.nodes[x].grad, &g);
                }
                Op::RowScale { x, w, col } => {
                    let g = self.nodes[id].grad.clone();
                    let d = self.nodes[x].value.shape[1];
                    let m = self.nodes[w].value.shape[1];
                    let wd = self.nodes[w].value.data.clone();
                    let xd = self.nodes[x].value.data.clone();
                    {
                        let gx = &mut self.nodes[x].grad;
                        for (bi, g_row) in g.chunks(d).enumerate() {
                            let s = wd[bi * m + col];
                            for (j, &gi) in g_row.iter().enumerate() {
                                gx[bi * d + j] += gi * s;
                            }
                        }
                    }
                    let gw = &mut self.nodes[w].grad;
                    for (bi, g_row) in g.chunks(d).enumerate() {
                        let mut acc = E::zero();
                        for (j, &gi) in g_row.iter().enumerate() {
                            acc += gi * xd[bi * d + j];
                        }
                        gw[bi * m + col] += acc;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<E: Elem>(dst: &mut [E], src: &[E]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

fn transpose_12<E: Elem>(data: &[E], a: usize, b: usize, c: usize) -> Vec<E> {
    let mut out = vec![E::zero(); data.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                out[i * b * c + k * b + j] = data[i * b * c + j * c + k];
            }
        }
    }
    out
}

/// First/second-moment state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<E> {
    pub m: Vec<E>,
    pub v: Vec<E>,
}

impl<E: Elem> AdamState<E> {
    pub fn new(numel: usize) -> AdamState<E> {
        AdamState {
            m: vec![E::zero(); numel],
            v: vec![E::zero(); numel],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update with bias correction. Weight decay is decoupled:
/// the shrink happens before the adaptive step. A non-finite gradient
/// rejects the step without touching the parameters.
pub fn adamw_step<E: Elem>(
    param: &mut [E],
    grad: &[E],
    state: &mut AdamState<E>,
    cfg: &AdamWConfig,
    t: usize,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::Shape("adamw_step length mismatch".into()));
    }
    if t < 1 {
        return Err(Error::Config("adamw step count t must be >= 1".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient; step rejected".into()));
    }
    let e = |v: f64| E::from_f64(v).unwrap();
    let (lr, wd) = (e(cfg.lr), e(cfg.weight_decay));
    let (b1, b2, eps) = (e(cfg.beta1), e(cfg.beta2), e(cfg.eps));
    let bc1 = e(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = e(1.0 - cfg.beta2.powi(t as i32));
    for i in 0..param.len() {
        param[i] = param[i] * (E::one() - lr * wd);
        state.m[i] = b1 * state.m[i] + (E::one() - b1) * grad[i];
        state.v[i] = b2 * state.v[i] + (E::one() - b2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
