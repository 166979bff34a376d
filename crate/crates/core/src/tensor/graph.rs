//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and
//! whatever it needs for the backward pass. Leaves are either parameters
//! (`requires_grad = true`) or constants. Gradients are only propagated into
//! nodes that transitively depend on a parameter, so a frozen backbone costs
//! activation gradients but no weight gradients.

use super::matrix::{gemm, MatMut, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Query `i` sees keys `0..=i`; requires as many queries as keys.
    Causal,
    /// Every query sees every key.
    Full,
}

/// Geometry of a channels-last 3-D convolution. Input rows are indexed
/// `(t * height + y) * width + x`, columns are channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_t: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation_t: usize,
}

impl ConvGeom {
    /// A 1-D temporal convolution over a `frames × c_in` sequence with
    /// "same" zero padding.
    pub fn temporal(frames: usize, c_in: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            frames,
            height: 1,
            width: 1,
            c_in,
            kt: kernel,
            kh: 1,
            kw: 1,
            stride_h: 1,
            stride_w: 1,
            pad_t: dilation * (kernel - 1) / 2,
            pad_h: 0,
            pad_w: 0,
            dilation_t: dilation,
        }
    }

    pub fn out_frames(&self) -> usize {
        self.frames + 2 * self.pad_t - self.dilation_t * (self.kt - 1)
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad_h - self.kh) / self.stride_h + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad_w - self.kw) / self.stride_w + 1
    }

    pub fn out_rows(&self) -> usize {
        self.out_frames() * self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.kt * self.kh * self.kw * self.c_in
    }

    pub fn in_rows(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Calls `f(out_row, patch_col, in_row)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (of, oh, ow) = (self.out_frames(), self.out_height(), self.out_width());
        for t in 0..of {
            for y in 0..oh {
                for x in 0..ow {
                    let out_row = (t * oh + y) * ow + x;
                    for dt in 0..self.kt {
                        let it = (t + dt * self.dilation_t) as isize - self.pad_t as isize;
                        if it < 0 || it >= self.frames as isize {
                            continue;
                        }
                        for dy in 0..self.kh {
                            let iy = (y * self.stride_h + dy) as isize - self.pad_h as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            for dx in 0..self.kw {
                                let ix = (x * self.stride_w + dx) as isize - self.pad_w as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                let in_row = ((it as usize * self.height) + iy as usize)
                                    * self.width
                                    + ix as usize;
                                let patch = ((dt * self.kh + dy) * self.kw + dx) * self.c_in;
                                f(out_row, patch, in_row);
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SelectCols {
        x: Var,
        cols: Vec<usize>,
    },
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Tensor>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        denom: f64,
        probs: Tensor,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        patches: Tensor,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        frames: usize,
        height: usize,
        width: usize,
        kernel: usize,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.rows(), va.cols(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(x).cols(), "add_row width");
        let mut value = self.value(x).clone();
        let r = r.data().to_vec();
        for i in 0..value.rows() {
            for (a, b) in value.row_mut(i).iter_mut().zip(&r) {
                *a += b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(value, Op::AddRow(x, row), rg)
    }

    /// `x · w + b` with `b` a single row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Multiplies `x` by the `1 × 1` tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * sv).collect();
        let value = Tensor::new(vx.rows(), vx.cols(), data);
        let rg = self.rg(&[x, s]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(vx.rows(), vx.cols(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalisation with a learned gain and no bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Var {
        let vx = self.value(x);
        let vg = self.value(gain);
        assert_eq!((vg.rows(), vg.cols()), (1, vx.cols()), "layer_norm gain shape");
        let (n, c) = vx.shape();
        let mut xhat = Tensor::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut value = xhat.clone();
        for i in 0..n {
            for (o, g) in value.row_mut(i).iter_mut().zip(vg.data()) {
                *o *= g;
            }
        }
        let rg = self.rg(&[x, gain]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "concat_rows width");
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let value = Tensor::new(va.rows() + vb.rows(), va.cols(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::ConcatRows(a, b), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.rows(), "slice_rows out of range");
        let c = vx.cols();
        let value = Tensor::new(len, c, vx.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceRows { x, start }, rg)
    }

    /// Gathers the listed columns, in order.
    pub fn select_cols(&mut self, x: Var, cols: Vec<usize>) -> Var {
        let vx = self.value(x);
        let mut value = Tensor::zeros(vx.rows(), cols.len());
        for r in 0..vx.rows() {
            let src = vx.row(r);
            for (o, &c) in value.row_mut(r).iter_mut().zip(&cols) {
                *o = src[c];
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::SelectCols { x, cols }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols height");
        let (ca, cb) = (va.cols(), vb.cols());
        let mut value = Tensor::zeros(va.rows(), ca + cb);
        for r in 0..va.rows() {
            let row = value.row_mut(r);
            row[..ca].copy_from_slice(va.row(r));
            row[ca..].copy_from_slice(vb.row(r));
        }
        let rg = self.rg(&[a, b]);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    /// Multi-head scaled dot-product attention. `q` is `n × C`, `k` and `v`
    /// are `m × C`; heads split the `C` columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, c) = vq.shape();
        let m = vk.rows();
        assert_eq!(vk.cols(), c, "attention key width");
        assert_eq!(vv.shape(), (m, c), "attention value shape");
        assert!(heads > 0 && c % heads == 0, "width {c} not divisible by {heads} heads");
        if mask == AttnMask::Causal {
            assert_eq!(n, m, "causal attention needs as many queries as keys");
        }
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, c);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut s = Tensor::zeros(n, m);
            gemm(
                scale,
                MatRef::of(vq).col_block(h * dh, dh),
                MatRef::of(vk).col_block(h * dh, dh).t(),
                0.0,
                MatMut::of(&mut s),
            );
            for i in 0..n {
                let row = s.row_mut(i);
                let visible = match mask {
                    AttnMask::Causal => i + 1,
                    AttnMask::Full => m,
                };
                let max = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in &mut row[..visible] {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in &mut row[..visible] {
                    *v /= total;
                }
                for v in &mut row[visible..] {
                    *v = 0.0;
                }
            }
            gemm(
                1.0,
                MatRef::of(&s),
                MatRef::of(vv).col_block(h * dh, dh),
                0.0,
                MatMut::of(&mut out).col_block(h * dh, dh),
            );
            probs.push(s);
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let c = vt.cols();
        let mut value = Tensor::zeros(ids.len(), c);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < vt.rows(), "embedding id {id} out of range");
            value.row_mut(i).copy_from_slice(vt.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Sum of token negative log-likelihoods over masked rows, divided by
    /// `denom`. Returns a `1 × 1` node.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        denom: f64,
    ) -> Var {
        let vl = self.value(logits);
        let (n, k) = vl.shape();
        assert_eq!(targets.len(), n, "cross_entropy targets length");
        assert_eq!(mask.len(), n, "cross_entropy mask length");
        let mut probs = Tensor::zeros(n, k);
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = vl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[i]];
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / denom),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                denom,
                probs,
            },
            rg,
        )
    }

    /// Channels-last convolution: `x` is `geom.in_rows() × c_in`, `w` is
    /// `patch_len × c_out`, `b` is `1 × c_out`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), (geom.in_rows(), geom.c_in), "conv input shape");
        assert_eq!(self.value(w).rows(), geom.patch_len(), "conv weight rows");
        let mut patches = Tensor::zeros(geom.out_rows(), geom.patch_len());
        let pl = geom.patch_len();
        let c_in = geom.c_in;
        {
            let src = vx.data();
            let dst = patches.data_mut();
            geom.for_each_tap(|out_row, patch, in_row| {
                let d = out_row * pl + patch;
                dst[d..d + c_in].copy_from_slice(&src[in_row * c_in..(in_row + 1) * c_in]);
            });
        }
        let mut value = patches.matmul(self.value(w));
        let bias = self.value(b);
        assert_eq!(bias.shape(), (1, value.cols()), "conv bias shape");
        for r in 0..value.rows() {
            for (o, bb) in value.row_mut(r).iter_mut().zip(bias.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                patches,
            },
            rg,
        )
    }

    /// Per-frame depthwise `kernel × kernel` convolution with "same" zero
    /// padding. `w` is `kernel² × C`, `b` is `1 × C`.
    pub fn depthwise(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        frames: usize,
        height: usize,
        width: usize,
        kernel: usize,
    ) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let c = vx.cols();
        assert_eq!(vx.rows(), frames * height * width, "depthwise input rows");
        assert_eq!(vw.shape(), (kernel * kernel, c), "depthwise weight shape");
        let mut value = Tensor::zeros(vx.rows(), c);
        depthwise_taps(frames, height, width, kernel, |out_row, tap, in_row| {
            let (xi, wi) = (vx.row(in_row), vw.row(tap));
            for ((o, a), b) in value.row_mut(out_row).iter_mut().zip(xi).zip(wi) {
                *o += a * b;
            }
        });
        for r in 0..value.rows() {
            for (o, bb) in value.row_mut(r).iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(
            value,
            Op::Depthwise {
                x,
                w,
                b,
                frames,
                height,
                width,
                kernel,
            },
            rg,
        )
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let vx = self.value(x);
        assert!(group > 0 && vx.rows() % group == 0, "group_mean block size");
        let n = vx.rows() / group;
        let mut value = Tensor::zeros(n, vx.cols());
        for r in 0..vx.rows() {
            for (o, v) in value.row_mut(r / group).iter_mut().zip(vx.row(r)) {
                *o += v / group as f64;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::GroupMean { x, group }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Backpropagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    gemm(1.0, MatRef::of(g), MatRef::of(vb).t(), 0.0, MatMut::of(&mut da));
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(vb.rows(), vb.cols());
                    gemm(1.0, MatRef::of(va).t(), MatRef::of(g), 0.0, MatMut::of(&mut db));
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), d));
                }
                if needs(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(g.rows(), g.cols(), d));
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if needs(*row) {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::Scale(x, s) => {
                let sv = self.value(*s).item();
                if needs(*x) {
                    let d = g.data().iter().map(|v| v * sv).collect();
                    accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), d));
                }
                if needs(*s) {
                    let dot: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    accumulate(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, xv)| gv * gelu_grad(*xv))
                    .collect();
                accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
            } => {
                let vg = self.value(*gain);
                let (n, c) = xhat.shape();
                if needs(*gain) {
                    let mut dg = Tensor::zeros(1, c);
                    for r in 0..n {
                        for ((o, gv), xh) in dg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gv * xh;
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if needs(*x) {
                    let mut dx = Tensor::zeros(n, c);
                    for r in 0..n {
                        let dxhat: Vec<f64> =
                            g.row(r).iter().zip(vg.data()).map(|(a, b)| a * b).collect();
                        let xh = xhat.row(r);
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((o, d), xv) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                            *o = inv_std[r] * (d - mean_d - xv * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                let c = g.cols();
                if needs(*a) {
                    accumulate(grads, *a, Tensor::new(ra, c, g.data()[..ra * c].to_vec()));
                }
                if needs(*b) {
                    let rb = g.rows() - ra;
                    accumulate(grads, *b, Tensor::new(rb, c, g.data()[ra * c..].to_vec()));
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                let c = vx.cols();
                dx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                accumulate(grads, *x, dx);
            }
            Op::SelectCols { x, cols } => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let dr = dx.row_mut(r);
                    for (j, &c) in cols.iter().enumerate() {
                        dr[c] += gr[j];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = g.cols() - ca;
                let n = g.rows();
                if needs(*a) {
                    let mut da = Tensor::zeros(n, ca);
                    for r in 0..n {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(n, cb);
                    for r in 0..n {
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let mut dt = Tensor::zeros(vt.rows(), vt.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                denom,
                probs,
            } => {
                let up = g.item() / denom;
                let mut dl = Tensor::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    if !mask[i] {
                        continue;
                    }
                    for (o, p) in dl.row_mut(i).iter_mut().zip(probs.row(i)) {
                        *o = p * up;
                    }
                    let t = targets[i];
                    dl.row_mut(i)[t] -= up;
                }
                accumulate(grads, *logits, dl);
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                patches,
            } => {
                if needs(*w) {
                    let mut dw = Tensor::zeros(patches.cols(), g.cols());
                    gemm(1.0, MatRef::of(patches).t(), MatRef::of(g), 0.0, MatMut::of(&mut dw));
                    accumulate(grads, *w, dw);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
                if needs(*x) {
                    let mut dpatch = Tensor::zeros(patches.rows(), patches.cols());
                    gemm(
                        1.0,
                        MatRef::of(g),
                        MatRef::of(self.value(*w)).t(),
                        0.0,
                        MatMut::of(&mut dpatch),
                    );
                    let c_in = geom.c_in;
                    let pl = geom.patch_len();
                    let mut dx = Tensor::zeros(geom.in_rows(), c_in);
                    {
                        let dst = dx.data_mut();
                        let src = dpatch.data();
                        geom.for_each_tap(|out_row, patch, in_row| {
                            let s = out_row * pl + patch;
                            for c in 0..c_in {
                                dst[in_row * c_in + c] += src[s + c];
                            }
                        });
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Depthwise {
                x,
                w,
                b,
                frames,
                height,
                width,
                kernel,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let c = vx.cols();
                if needs(*x) || needs(*w) {
                    let mut dx = Tensor::zeros(vx.rows(), c);
                    let mut dw = Tensor::zeros(vw.rows(), c);
                    depthwise_taps(*frames, *height, *width, *kernel, |out_row, tap, in_row| {
                        let go = g.row(out_row);
                        let xi = vx.row(in_row);
                        for ch in 0..c {
                            dw.row_mut(tap)[ch] += go[ch] * xi[ch];
                        }
                        let wi = vw.row(tap);
                        let dxi = dx.row_mut(in_row);
                        for ch in 0..c {
                            dxi[ch] += go[ch] * wi[ch];
                        }
                    });
                    if needs(*x) {
                        accumulate(grads, *x, dx);
                    }
                    if needs(*w) {
                        accumulate(grads, *w, dw);
                    }
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(1, c);
                    for r in 0..g.rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::GroupMean { x, group } => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *o = v / *group as f64;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                accumulate(grads, *x, Tensor::filled(vx.rows(), vx.cols(), g.item()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Tensor],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let needs = |x: Var| self.nodes[x.0].requires_grad;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, c) = vq.shape();
        let m = vk.rows();
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(n, c);
        let mut dk = Tensor::zeros(m, c);
        let mut dv = Tensor::zeros(m, c);
        for (h, p) in probs.iter().enumerate() {
            let go = MatRef::of(g).col_block(h * dh, dh);
            if needs(v) {
                gemm(1.0, MatRef::of(p).t(), go, 0.0, MatMut::of(&mut dv).col_block(h * dh, dh));
            }
            if !needs(q) && !needs(k) {
                continue;
            }
            let mut ds = Tensor::zeros(n, m);
            gemm(
                1.0,
                go,
                MatRef::of(vv).col_block(h * dh, dh).t(),
                0.0,
                MatMut::of(&mut ds),
            );
            for i in 0..n {
                let pr = p.row(i);
                let dr = ds.row_mut(i);
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            if needs(q) {
                gemm(
                    1.0,
                    MatRef::of(&ds),
                    MatRef::of(vk).col_block(h * dh, dh),
                    0.0,
                    MatMut::of(&mut dq).col_block(h * dh, dh),
                );
            }
            if needs(k) {
                gemm(
                    1.0,
                    MatRef::of(&ds).t(),
                    MatRef::of(vq).col_block(h * dh, dh),
                    0.0,
                    MatMut::of(&mut dk).col_block(h * dh, dh),
                );
            }
        }
        if needs(q) {
            accumulate(grads, q, dq);
        }
        if needs(k) {
            accumulate(grads, k, dk);
        }
        if needs(v) {
            accumulate(grads, v, dv);
        }
    }
}

fn depthwise_taps(
    frames: usize,
    height: usize,
    width: usize,
    kernel: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let pad = (kernel / 2) as isize;
    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let out_row = (t * height + y) * width + x;
                for dy in 0..kernel {
                    let iy = y as isize + dy as isize - pad;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for dx in 0..kernel {
                        let ix = x as isize + dx as isize - pad;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let in_row = (t * height + iy as usize) * width + ix as usize;
                        f(out_row, dy * kernel + dx, in_row);
                    }
                }
            }
        }
    }
}
