//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! Every training step builds a fresh graph: leaves are created with
//! [`Graph::param`] / [`Graph::input`], ops are recorded eagerly with
//! their forward values, and [`Graph::backward`] walks the tape in
//! reverse. Shape mismatches inside the graph are programming errors
//! and panic; user-facing validation happens at module boundaries.

use crate::tensor::{gemm_slices, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// broadcast `v` (len C) over the rows of `x` (.., C)
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Matmul(NodeId, NodeId),
    BatchMatmul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        eps: f64,
    },
    Silu(NodeId),
    Reshape(NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SplitHeads {
        x: NodeId,
        heads: usize,
    },
    MergeHeads(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Upsample2x(NodeId),
    /// add `e` (N,C,H,W) into the first C channels of `x` (N,C2,H,W)
    AddChannels(NodeId, NodeId),
    Patchify {
        x: NodeId,
        p: usize,
    },
    Unpatchify {
        x: NodeId,
        p: usize,
    },
    MeanAll(NodeId),
    SumAll(NodeId),
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Trainable leaf: receives a gradient during backward.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y).unwrap();
        self.push(Op::Add(a, b), v, self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y).unwrap();
        self.push(Op::Sub(a, b), v, self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y).unwrap();
        self.push(Op::Mul(a, b), v, self.needs(a) || self.needs(b))
    }

    fn row_broadcast_check(&self, x: NodeId, v: NodeId) {
        let xs = self.value(x).shape();
        let vs = self.value(v).shape();
        assert_eq!(vs.len(), 1, "row operand must be rank-1, got {vs:?}");
        assert_eq!(
            *xs.last().unwrap(),
            vs[0],
            "row broadcast mismatch {xs:?} vs {vs:?}"
        );
    }

    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.row_broadcast_check(x, v);
        let c = self.value(v).len();
        let vv = self.value(v).data().to_vec();
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape().to_vec(), |i| xv.data()[i] + vv[i % c]);
        self.push(Op::AddRow(x, v), out, self.needs(x) || self.needs(v))
    }

    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.row_broadcast_check(x, v);
        let c = self.value(v).len();
        let vv = self.value(v).data().to_vec();
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape().to_vec(), |i| xv.data()[i] * vv[i % c]);
        self.push(Op::MulRow(x, v), out, self.needs(x) || self.needs(v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let k = T::from_f64(c);
        let v = self.value(x).map(|a| a * k);
        self.push(Op::Scale(x, c), v, self.needs(x))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let k = T::from_f64(c);
        let v = self.value(x).map(|a| a + k);
        self.push(Op::AddConst(x), v, self.needs(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b)).unwrap();
        self.push(Op::Matmul(a, b), v, self.needs(a) || self.needs(b))
    }

    /// (B,M,K) x (B,K,N) -> (B,M,N); trans_b treats b as (B,N,K).
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0]);
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            assert_eq!(sb[2], k);
            sb[1]
        } else {
            assert_eq!(sb[1], k);
            sb[2]
        };
        let mut out = vec![T::zero(); bsz * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            gemm_slices(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let v = Tensor::new(vec![bsz, m, n], out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::BatchMatmul { a, b, trans_b }, v, ng)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = crate::numerics::softmax_last_axis(self.value(x));
        self.push(Op::Softmax(x), v, self.needs(x))
    }

    /// Last-axis layer norm without learnable affine.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let v = crate::numerics::layer_norm(self.value(x), T::from_f64(eps)).unwrap();
        self.push(Op::LayerNorm { x, eps }, v, self.needs(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = crate::numerics::silu(self.value(x));
        self.push(Op::Silu(x), v, self.needs(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(x).clone().reshaped(shape).unwrap();
        self.push(Op::Reshape(x), v, self.needs(x))
    }

    /// Concatenate two 2D tensors along axis 0.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[1]);
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::new(vec![sa[0] + sb[0], sa[1]], data).unwrap();
        self.push(Op::ConcatRows(a, b), v, self.needs(a) || self.needs(b))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.value(x).shape();
        assert_eq!(s.len(), 2);
        assert!(start + len <= s[0]);
        let c = s[1];
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let v = Tensor::new(vec![len, c], data).unwrap();
        self.push(Op::SliceRows { x, start, len }, v, self.needs(x))
    }

    /// (L, d) -> (heads, L, d/heads)
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let s = self.value(x).shape();
        assert_eq!(s.len(), 2);
        let (l, d) = (s[0], s[1]);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            for i in 0..l {
                for j in 0..dh {
                    out[h * l * dh + i * dh + j] = xd[i * d + h * dh + j];
                }
            }
        }
        let v = Tensor::new(vec![heads, l, dh], out).unwrap();
        self.push(Op::SplitHeads { x, heads }, v, self.needs(x))
    }

    /// (heads, L, dh) -> (L, heads*dh)
    pub fn merge_heads(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).shape();
        assert_eq!(s.len(), 3);
        let (heads, l, dh) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); heads * l * dh];
        for h in 0..heads {
            for i in 0..l {
                for j in 0..dh {
                    out[i * heads * dh + h * dh + j] = xd[h * l * dh + i * dh + j];
                }
            }
        }
        let v = Tensor::new(vec![l, heads * dh], out).unwrap();
        self.push(Op::MergeHeads(x), v, self.needs(x))
    }

    /// Row lookup into a (V, d) table.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let s = self.value(table).shape();
        assert_eq!(s.len(), 2);
        let d = s[1];
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < s[0], "token id {} out of range {}", id, s[0]);
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let v = Tensor::new(vec![ids.len(), d], out).unwrap();
        let ng = self.needs(table);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
            ng,
        )
    }

    /// x (N,Cin,H,W) * w (Cout,Cin,kh,kw) + b (Cout) -> (N,Cout,Ho,Wo)
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[1], "conv channel mismatch");
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let patch = cin * kh * kw;
        let xd = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let mut col = vec![T::zero(); patch * ho * wo];
        for img in 0..n {
            im2col(
                &xd[img * cin * h * wd..(img + 1) * cin * h * wd],
                cin,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                &mut col,
            );
            let dst = &mut out[img * cout * ho * wo..(img + 1) * cout * ho * wo];
            gemm_slices(cout, patch, ho * wo, wv, false, &col, false, T::zero(), dst);
            for c in 0..cout {
                let bias = bv[c];
                for v in &mut dst[c * ho * wo..(c + 1) * ho * wo] {
                    *v = *v + bias;
                }
            }
        }
        let v = Tensor::new(vec![n, cout, ho, wo], out).unwrap();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv2d { x, w, b, stride, pad }, v, ng)
    }

    /// Nearest-neighbor 2x spatial upsample of (N,C,H,W).
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for nc in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    let v = xd[nc * h * w + i * w + j];
                    let base = nc * 4 * h * w;
                    out[base + (2 * i) * 2 * w + 2 * j] = v;
                    out[base + (2 * i) * 2 * w + 2 * j + 1] = v;
                    out[base + (2 * i + 1) * 2 * w + 2 * j] = v;
                    out[base + (2 * i + 1) * 2 * w + 2 * j + 1] = v;
                }
            }
        }
        let v = Tensor::new(vec![n, c, 2 * h, 2 * w], out).unwrap();
        self.push(Op::Upsample2x(x), v, self.needs(x))
    }

    /// Add `e` (N,C,H,W) into the first C channels of `x` (N,C2,H,W),
    /// C <= C2; the remaining channels pass through unchanged.
    pub fn add_channels(&mut self, x: NodeId, e: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let es = self.value(e).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(es.len(), 4);
        assert_eq!(xs[0], es[0]);
        assert!(es[1] <= xs[1], "channel overflow");
        assert_eq!(&xs[2..], &es[2..]);
        let (n, c2, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let c = es[1];
        let mut v = self.value(x).clone();
        let ed = self.value(e).data();
        for img in 0..n {
            for k in 0..c * h * w {
                let dst = img * c2 * h * w + k;
                v.data_mut()[dst] = v.data()[dst] + ed[img * c * h * w + k];
            }
        }
        let ng = self.needs(x) || self.needs(e);
        self.push(Op::AddChannels(x, e), v, ng)
    }

    /// (F,C,H,W) -> (F*(H/p)*(W/p), C*p*p), frame-major then raster order.
    pub fn patchify(&mut self, x: NodeId, p: usize) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let v = crate::numerics::patchify(self.value(x), p).unwrap();
        self.push(Op::Patchify { x, p }, v, self.needs(x))
    }

    /// Inverse of [`Graph::patchify`].
    pub fn unpatchify(
        &mut self,
        x: NodeId,
        p: usize,
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> NodeId {
        let v =
            crate::numerics::unpatchify(self.value(x), p, frames, channels, height, width).unwrap();
        let ng = self.needs(x);
        self.push(Op::Unpatchify { x, p }, v, ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(Op::MeanAll(x), v, self.needs(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), v, self.needs(x))
    }

    // ---- composites ----

    /// x (L, din) * w (din, dout) + b (dout)
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// mean((a-b)^2) over every element.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi = *gi + *di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate in
    /// a fixed (reverse-topological) order, so results are bit-stable.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(b), |gi, bi| gi * bi).unwrap();
                    let db = g.zip_map(self.value(a), |gi, ai| gi * ai).unwrap();
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::AddRow(x, v) => {
                    let c = self.value(v).len();
                    let mut dv = vec![T::zero(); c];
                    for (k, &gi) in g.data().iter().enumerate() {
                        dv[k % c] = dv[k % c] + gi;
                    }
                    self.accumulate(x, g);
                    self.accumulate(v, Tensor::new(vec![c], dv).unwrap());
                }
                Op::MulRow(x, v) => {
                    let c = self.value(v).len();
                    let vd = self.value(v).data().to_vec();
                    let xd = self.value(x).data().to_vec();
                    let mut dv = vec![T::zero(); c];
                    for (k, &gi) in g.data().iter().enumerate() {
                        dv[k % c] = dv[k % c] + gi * xd[k];
                    }
                    let dx = Tensor::from_fn(self.value(x).shape().to_vec(), |k| {
                        g.data()[k] * vd[k % c]
                    });
                    self.accumulate(x, dx);
                    self.accumulate(v, Tensor::new(vec![c], dv).unwrap());
                }
                Op::Scale(x, c) => {
                    let k = T::from_f64(c);
                    self.accumulate(x, g.map(|v| v * k));
                }
                Op::AddConst(x) => self.accumulate(x, g),
                Op::Matmul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let mut da_t = None;
                    let mut db_t = None;
                    if self.needs(a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm_slices(m, n, k, g.data(), false, bv.data(), true, T::zero(), &mut da);
                        da_t = Some(Tensor::new(vec![m, k], da).unwrap());
                    }
                    if self.needs(b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm_slices(k, m, n, av.data(), true, g.data(), false, T::zero(), &mut db);
                        db_t = Some(Tensor::new(vec![k, n], db).unwrap());
                    }
                    if let Some(t) = da_t {
                        self.accumulate(a, t);
                    }
                    if let Some(t) = db_t {
                        self.accumulate(b, t);
                    }
                }
                Op::BatchMatmul { a, b, trans_b } => {
                    let (av, bv) = (self.value(a).clone(), self.value(b).clone());
                    let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = g.shape()[2];
                    if self.needs(a) {
                        let mut da = vec![T::zero(); bsz * m * k];
                        for i in 0..bsz {
                            // dA = dC * B (trans_b) or dC * B^T
                            gemm_slices(
                                m,
                                n,
                                k,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                false,
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                !trans_b,
                                T::zero(),
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                        self.accumulate(a, Tensor::new(vec![bsz, m, k], da).unwrap());
                    }
                    if self.needs(b) {
                        let bshape = bv.shape().to_vec();
                        let per = bshape[1] * bshape[2];
                        let mut db = vec![T::zero(); bsz * per];
                        for i in 0..bsz {
                            if trans_b {
                                // B is (n, k); dB = dC^T * A
                                gemm_slices(
                                    n,
                                    m,
                                    k,
                                    &g.data()[i * m * n..(i + 1) * m * n],
                                    true,
                                    &av.data()[i * m * k..(i + 1) * m * k],
                                    false,
                                    T::zero(),
                                    &mut db[i * per..(i + 1) * per],
                                );
                            } else {
                                // B is (k, n); dB = A^T * dC
                                gemm_slices(
                                    k,
                                    m,
                                    n,
                                    &av.data()[i * m * k..(i + 1) * m * k],
                                    true,
                                    &g.data()[i * m * n..(i + 1) * m * n],
                                    false,
                                    T::zero(),
                                    &mut db[i * per..(i + 1) * per],
                                );
                            }
                        }
                        self.accumulate(b, Tensor::new(bshape, db).unwrap());
                    }
                }
                Op::Softmax(x) => {
                    let y = self.nodes[i].value.clone();
                    let c = *y.shape().last().unwrap();
                    let rows = y.len() / c;
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..rows {
                        let ys = &y.data()[r * c..(r + 1) * c];
                        let gs = &g.data()[r * c..(r + 1) * c];
                        let dot = ys
                            .iter()
                            .zip(gs)
                            .fold(T::zero(), |acc, (&yi, &gi)| acc + yi * gi);
                        for j in 0..c {
                            dx[r * c + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    self.accumulate(x, Tensor::new(y.shape().to_vec(), dx).unwrap());
                }
                Op::LayerNorm { x, eps } => {
                    let xv = self.value(x).clone();
                    let y = self.nodes[i].value.clone();
                    let c = *xv.shape().last().unwrap();
                    let rows = xv.len() / c;
                    let epsv = T::from_f64(eps);
                    let cn = T::from_usize(c);
                    let mut dx = vec![T::zero(); xv.len()];
                    for r in 0..rows {
                        let xs = &xv.data()[r * c..(r + 1) * c];
                        let ys = &y.data()[r * c..(r + 1) * c];
                        let gs = &g.data()[r * c..(r + 1) * c];
                        let mean = xs.iter().fold(T::zero(), |a, &v| a + v) / cn;
                        let var = xs
                            .iter()
                            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                            / cn;
                        let inv_std = T::one() / (var + epsv).sqrt();
                        let gmean = gs.iter().fold(T::zero(), |a, &v| a + v) / cn;
                        let gydot = gs
                            .iter()
                            .zip(ys)
                            .fold(T::zero(), |a, (&gi, &yi)| a + gi * yi)
                            / cn;
                        for j in 0..c {
                            dx[r * c + j] = inv_std * (gs[j] - gmean - ys[j] * gydot);
                        }
                    }
                    self.accumulate(x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                Op::Silu(x) => {
                    let dx = g
                        .zip_map(self.value(x), |gi, xi| {
                            let s = T::one() / (T::one() + (-xi).exp());
                            gi * s * (T::one() + xi * (T::one() - s))
                        })
                        .unwrap();
                    self.accumulate(x, dx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(x, g.clone().reshaped(shape).unwrap());
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(a).shape()[0];
                    let c = self.value(a).shape()[1];
                    let (ga, gb) = g.data().split_at(ra * c);
                    let rb = self.value(b).shape()[0];
                    self.accumulate(a, Tensor::new(vec![ra, c], ga.to_vec()).unwrap());
                    self.accumulate(b, Tensor::new(vec![rb, c], gb.to_vec()).unwrap());
                }
                Op::SliceRows { x, start, len } => {
                    let s = self.value(x).shape().to_vec();
                    let c = s[1];
                    let mut dx = vec![T::zero(); s[0] * c];
                    dx[start * c..(start + len) * c].copy_from_slice(g.data());
                    self.accumulate(x, Tensor::new(s, dx).unwrap());
                }
                Op::SplitHeads { x, heads } => {
                    let s = self.value(x).shape().to_vec();
                    let (l, d) = (s[0], s[1]);
                    let dh = d / heads;
                    let mut dx = vec![T::zero(); l * d];
                    for h in 0..heads {
                        for r in 0..l {
                            for j in 0..dh {
                                dx[r * d + h * dh + j] = g.data()[h * l * dh + r * dh + j];
                            }
                        }
                    }
                    self.accumulate(x, Tensor::new(s, dx).unwrap());
                }
                Op::MergeHeads(x) => {
                    let s = self.value(x).shape().to_vec();
                    let (heads, l, dh) = (s[0], s[1], s[2]);
                    let mut dx = vec![T::zero(); heads * l * dh];
                    for h in 0..heads {
                        for r in 0..l {
                            for j in 0..dh {
                                dx[h * l * dh + r * dh + j] = g.data()[r * heads * dh + h * dh + j];
                            }
                        }
                    }
                    self.accumulate(x, Tensor::new(s, dx).unwrap());
                }
                Op::Gather { table, ids } => {
                    let s = self.value(table).shape().to_vec();
                    let d = s[1];
                    let mut dt = vec![T::zero(); s[0] * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g.data()[row * d + j];
                        }
                    }
                    self.accumulate(table, Tensor::new(s, dt).unwrap());
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(&g, x, w, b, stride, pad);
                }
                Op::Upsample2x(x) => {
                    let s = self.value(x).shape().to_vec();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for r in 0..h {
                            for j in 0..w {
                                let base = nc * 4 * h * w;
                                let sum = g.data()[base + (2 * r) * 2 * w + 2 * j]
                                    + g.data()[base + (2 * r) * 2 * w + 2 * j + 1]
                                    + g.data()[base + (2 * r + 1) * 2 * w + 2 * j]
                                    + g.data()[base + (2 * r + 1) * 2 * w + 2 * j + 1];
                                dx[nc * h * w + r * w + j] = sum;
                            }
                        }
                    }
                    self.accumulate(x, Tensor::new(s, dx).unwrap());
                }
                Op::AddChannels(x, e) => {
                    let es = self.value(e).shape().to_vec();
                    let (n, c, h, w) = (es[0], es[1], es[2], es[3]);
                    let c2 = self.value(x).shape()[1];
                    let mut de = vec![T::zero(); n * c * h * w];
                    for img in 0..n {
                        for k in 0..c * h * w {
                            de[img * c * h * w + k] = g.data()[img * c2 * h * w + k];
                        }
                    }
                    self.accumulate(x, g);
                    self.accumulate(e, Tensor::new(es, de).unwrap());
                }
                Op::Patchify { x, p } => {
                    let s = self.value(x).shape().to_vec();
                    let dx = crate::numerics::unpatchify(&g, p, s[0], s[1], s[2], s[3]).unwrap();
                    self.accumulate(x, dx);
                }
                Op::Unpatchify { x, p } => {
                    let dx = crate::numerics::patchify(&g, p).unwrap();
                    self.accumulate(x, dx);
                }
                Op::MeanAll(x) => {
                    let n = self.value(x).len();
                    let v = g.item() / T::from_usize(n);
                    self.accumulate(x, Tensor::full(self.value(x).shape().to_vec(), v));
                }
                Op::SumAll(x) => {
                    let v = g.item();
                    self.accumulate(x, Tensor::full(self.value(x).shape().to_vec(), v));
                }
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        g: &Tensor<T>,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let patch = cin * kh * kw;
        let xd = self.value(x).data().to_vec();
        let wv = self.value(w).data().to_vec();
        let mut dw = vec![T::zero(); cout * patch];
        let mut db = vec![T::zero(); cout];
        let mut dx = vec![T::zero(); n * cin * h * wd];
        let mut col = vec![T::zero(); patch * ho * wo];
        let mut dcol = vec![T::zero(); patch * ho * wo];
        let needs_x = self.needs(x);
        for img in 0..n {
            let gslice = &g.data()[img * cout * ho * wo..(img + 1) * cout * ho * wo];
            im2col(
                &xd[img * cin * h * wd..(img + 1) * cin * h * wd],
                cin,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                &mut col,
            );
            // dW += dOut * col^T
            gemm_slices(cout, ho * wo, patch, gslice, false, &col, true, T::one(), &mut dw);
            for c in 0..cout {
                for &gi in &gslice[c * ho * wo..(c + 1) * ho * wo] {
                    db[c] = db[c] + gi;
                }
            }
            if needs_x {
                // dcol = W^T * dOut
                gemm_slices(
                    patch,
                    cout,
                    ho * wo,
                    &wv,
                    true,
                    gslice,
                    false,
                    T::zero(),
                    &mut dcol,
                );
                col2im(
                    &dcol,
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    &mut dx[img * cin * h * wd..(img + 1) * cin * h * wd],
                );
            }
        }
        if needs_x {
            self.accumulate(x, Tensor::new(xs, dx).unwrap());
        }
        self.accumulate(w, Tensor::new(ws, dw).unwrap());
        self.accumulate(b, Tensor::new(vec![cout], db).unwrap());
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut idx = 0;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        col[idx] = if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                            x[c * h * w + ii as usize * w + jj as usize]
                        } else {
                            T::zero()
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut idx = 0;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                            let t = c * h * w + ii as usize * w + jj as usize;
                            x[t] = x[t] + col[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of a scalar graph function against the
    /// recorded backward pass.
    fn check_grad(build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId, x0: Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let loss = build(&mut g, x);
        g.backward(loss);
        let analytic = g.grad(x).unwrap().clone();
        let eps = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let mut gp = Graph::new();
            let xp = gp.input(plus);
            let lp = build(&mut gp, xp);
            let mut gm = Graph::new();
            let xm = gm.input(minus);
            let lm = build(&mut gm, xm);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel < 1e-6,
                "coord {}: analytic {} vs numeric {} (rel {})",
                i,
                a,
                numeric,
                rel
            );
        }
    }

    fn arange(shape: Vec<usize>, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 7 + 3) % 11) as f64 * scale - 0.3)
    }

    #[test]
    fn grad_add_channels() {
        // gradient flows to both the wide stack and the added slab
        check_grad(
            |g, x| {
                let wide = g.reshape(x, vec![2, 3, 2, 2]);
                let e = g.silu(wide);
                let e = g.reshape(e, vec![2, 3, 2, 2]);
                // shrink e to one channel by slicing via patchify route:
                // instead, add a full-width slab (C == C2 case)
                let y = g.add_channels(wide, e);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            Tensor::from_fn(vec![24], |i| 0.17 * i as f64 - 1.9),
        );
        // narrow-slab forward/backward values
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(vec![1, 2, 1, 2], |i| i as f64));
        let e = g.param(Tensor::from_fn(vec![1, 1, 1, 2], |_| 10.0));
        let y = g.add_channels(x, e);
        assert_eq!(g.value(y).data(), &[10.0, 11.0, 2.0, 3.0]);
        let s = g.sum_all(y);
        g.backward(s);
        assert_eq!(g.grad(e).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_matmul_silu() {
        let w = arange(vec![4, 3], 0.21);
        check_grad(
            |g, x| {
                let w = g.input(w.clone());
                let y = g.matmul(x, w);
                let s = g.silu(y);
                g.mean_all(s)
            },
            arange(vec![2, 4], 0.17),
        );
    }

    #[test]
    fn grad_layer_norm_softmax() {
        check_grad(
            |g, x| {
                let ln = g.layer_norm(x, 1e-5);
                let sm = g.softmax(ln);
                let sq = g.mul(sm, sm);
                g.sum_all(sq)
            },
            arange(vec![3, 5], 0.4),
        );
    }

    #[test]
    fn grad_attention_path() {
        check_grad(
            |g, x| {
                let q = g.split_heads(x, 2);
                let scores = g.batch_matmul(q, q, true);
                let sc = g.scale(scores, 0.5);
                let probs = g.softmax(sc);
                let out = g.batch_matmul(probs, q, false);
                let m = g.merge_heads(out);
                let sq = g.mul(m, m);
                g.mean_all(sq)
            },
            arange(vec![3, 4], 0.3),
        );
    }

    #[test]
    fn grad_conv_upsample() {
        let w = arange(vec![2, 3, 3, 3], 0.1);
        let b = arange(vec![2], 0.05);
        check_grad(
            |g, x| {
                let w = g.input(w.clone());
                let b = g.input(b.clone());
                let y = g.conv2d(x, w, b, 2, 1);
                let u = g.upsample2x(y);
                let s = g.silu(u);
                g.mean_all(s)
            },
            arange(vec![1, 3, 4, 4], 0.2),
        );
    }

    #[test]
    fn grad_conv_weights() {
        let x0 = arange(vec![1, 2, 4, 4], 0.2);
        check_grad(
            |g, w| {
                let x = g.input(x0.clone());
                let b = g.input(Tensor::zeros(vec![3]));
                let y = g.conv2d(x, w, b, 1, 1);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            arange(vec![3, 2, 3, 3], 0.15),
        );
    }

    #[test]
    fn grad_gather_rows_concat() {
        check_grad(
            |g, t| {
                let e = g.gather(t, &[2, 0, 2]);
                let s = g.slice_rows(e, 1, 2);
                let c = g.concat_rows(e, s);
                let sq = g.mul(c, c);
                g.mean_all(sq)
            },
            arange(vec![4, 3], 0.25),
        );
    }

    #[test]
    fn grad_row_broadcast_and_patchify() {
        let v = arange(vec![4], 0.3);
        check_grad(
            |g, x| {
                let p = g.patchify(x, 2);
                let v1 = g.input(v.clone());
                let a = g.mul_row(p, v1);
                let b = g.add_row(a, v1);
                let u = g.unpatchify(b, 2, 2, 1, 2, 2);
                let sq = g.mul(u, u);
                g.mean_all(sq)
            },
            arange(vec![2, 1, 2, 2], 0.5),
        );
    }

    #[test]
    fn patchify_roundtrip_in_graph() {
        let x = arange(vec![2, 3, 4, 4], 0.1);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let p = g.patchify(xi, 2);
        assert_eq!(p.0 != xi.0, true);
        let u = g.unpatchify(p, 2, 2, 3, 4, 4);
        assert_eq!(g.value(u), &x);
    }
}
