//! Wengert-tape reverse-mode autodiff over [`Array4`] buffers.
//!
//! Values are computed eagerly; every op records its parents so that
//! [`Tape::backward`] can replay the graph in reverse. Node ids are SSA — an
//! op never overwrites an existing node — which makes the reverse sweep a
//! single ordered pass.

use super::array::Array4;
use super::linalg::{col2im_t_acc, conv_out_len, gemm_acc, im2col_t, transpose};
use super::sampling::{bilerp_zero_scatter, bilerp_zero_with_grad, resize_coord};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, k: f32 },
    Clamp01 { x: Var },
    Exp { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    SumAll { x: Var },
    SumChannels { x: Var },
    MulBcastC { a: Var, b: Var },
    ConcatC { parts: Vec<Var> },
    SliceC { x: Var, c0: usize },
    StackN { parts: Vec<Var> },
    SliceN { x: Var, i: usize },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, eps: f32, mean: Vec<f32>, var: Vec<f32>, inv: Vec<f32>, mode: BnMode },
    ChannelSoftmax { x: Var },
    Dense { x: Var, w: Var, b: Var },
    BilinearWarp { img: Var, trans: Var },
    CropWindow { map: Var, center: Var, size: usize },
    ExpectedLoc { mask: Var },
    Plant { x: Var, oh: usize, ow: usize, r0: i64, c0: i64 },
    Upsample { x: Var },
    Dilate3x3 { x: Var },
    Min { a: Var, b: Var },
    ColumnSelect { e: Var, actions: Vec<usize>, n_actions: usize },
}

struct Node {
    value: Array4,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array4 {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, a: Array4) -> Var {
        self.push(a, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient in [`Tape::backward`].
    pub fn trainable(&mut self, a: Array4) -> Var {
        self.push(a, Op::Leaf, true)
    }

    // ── Elementwise and reduction ops ────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Array4::from_vec(va.shape(), data).unwrap();
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Array4::from_vec(va.shape(), data).unwrap();
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Array4::from_vec(va.shape(), data).unwrap();
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul { a, b }, rg)
    }

    /// `k * x + c` elementwise.
    pub fn affine(&mut self, x: Var, k: f32, c: f32) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|v| k * v + c).collect();
        let out = Array4::from_vec(vx.shape(), data).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Affine { x, k }, rg)
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let out = Array4::from_vec(vx.shape(), data).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Clamp01 { x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|v| v.exp()).collect();
        let out = Array4::from_vec(vx.shape(), data).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Exp { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|v| v.max(0.0)).collect();
        let out = Array4::from_vec(vx.shape(), data).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Array4::from_vec(vx.shape(), data).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Full reduction to a `[1,1,1,1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let s: f32 = vx.data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Array4::scalar(s), Op::SumAll { x }, rg)
    }

    /// Sum over the channel axis: `[n,c,h,w] -> [n,1,h,w]`.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let [n, c, h, w] = vx.shape();
        let mut out = Array4::zeros([n, 1, h, w]);
        for ni in 0..n {
            for ci in 0..c {
                let src = vx.plane(ni, ci);
                let dst = out.plane_mut(ni, 0);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::SumChannels { x }, rg)
    }

    /// `a[n,c,h,w] * b[n,1,h,w]`, broadcasting `b` over channels.
    pub fn mul_bcast_c(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let [n, c, h, w] = va.shape();
        assert_eq!(vb.shape(), [n, 1, h, w], "broadcast operand must be [n,1,h,w]");
        let mut out = Array4::zeros([n, c, h, w]);
        for ni in 0..n {
            let bp = vb.plane(ni, 0).to_vec();
            for ci in 0..c {
                let src = va.plane(ni, ci);
                let dst = out.plane_mut(ni, ci);
                for ((d, s), m) in dst.iter_mut().zip(src).zip(&bp) {
                    *d = s * m;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MulBcastC { a, b }, rg)
    }

    pub fn concat_c(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [n, _, h, w] = self.nodes[parts[0].0].value.shape();
        let c_total: usize = parts.iter().map(|p| self.nodes[p.0].value.c()).sum();
        let mut out = Array4::zeros([n, c_total, h, w]);
        for ni in 0..n {
            let mut co = 0;
            for p in parts {
                let vp = &self.nodes[p.0].value;
                assert_eq!(vp.n(), n);
                assert_eq!((vp.h(), vp.w()), (h, w), "concat_c spatial mismatch");
                for ci in 0..vp.c() {
                    let src = vp.plane(ni, ci).to_vec();
                    out.plane_mut(ni, co + ci).copy_from_slice(&src);
                }
                co += vp.c();
            }
        }
        let rg = self.any_grad(parts);
        self.push(out, Op::ConcatC { parts: parts.to_vec() }, rg)
    }

    /// Channels `c0..c1`.
    pub fn slice_c(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let [n, c, h, w] = vx.shape();
        assert!(c0 < c1 && c1 <= c, "slice_c range {c0}..{c1} of {c}");
        let mut out = Array4::zeros([n, c1 - c0, h, w]);
        for ni in 0..n {
            for ci in c0..c1 {
                let src = vx.plane(ni, ci).to_vec();
                out.plane_mut(ni, ci - c0).copy_from_slice(&src);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::SliceC { x, c0 }, rg)
    }

    /// Concatenate along the batch axis.
    pub fn stack_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [_, c, h, w] = self.nodes[parts[0].0].value.shape();
        let n_total: usize = parts.iter().map(|p| self.nodes[p.0].value.n()).sum();
        let mut data = Vec::with_capacity(n_total * c * h * w);
        for p in parts {
            let vp = &self.nodes[p.0].value;
            assert_eq!((vp.c(), vp.h(), vp.w()), (c, h, w), "stack_n shape mismatch");
            data.extend_from_slice(vp.data());
        }
        let out = Array4::from_vec([n_total, c, h, w], data).unwrap();
        let rg = self.any_grad(parts);
        self.push(out, Op::StackN { parts: parts.to_vec() }, rg)
    }

    /// Same buffer, new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.len(), shape.iter().product::<usize>(), "reshape length mismatch");
        let out = Array4::from_vec(shape, vx.data().to_vec()).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Reshape { x }, rg)
    }

    /// Batch row `i` as a `[1,c,h,w]` view copy.
    pub fn slice_n(&mut self, x: Var, i: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let [n, c, h, w] = vx.shape();
        assert!(i < n);
        let chw = c * h * w;
        let data = vx.data()[i * chw..(i + 1) * chw].to_vec();
        let out = Array4::from_vec([1, c, h, w], data).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::SliceN { x, i }, rg)
    }

    // ── Neural-net ops ───────────────────────────────────────────────────

    /// 2-D convolution, NCHW. `w` is `[f, c, k, k]`, `b` is `[1, f, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let [n, c, h, wd] = vx.shape();
        let [f, wc, kh, kw] = vw.shape();
        if kh != kw {
            return Err(Error::Config(format!("only square kernels supported, got {kh}x{kw}")));
        }
        let k = kh;
        if wc != c {
            return Err(Error::Shape(format!("conv2d: input has {c} channels, kernel expects {wc}")));
        }
        if vb.shape() != [1, f, 1, 1] {
            return Err(Error::Shape(format!("conv2d: bias shape {:?} != [1,{f},1,1]", vb.shape())));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: {k}x{k} kernel does not fit padded {h}x{wd} input"
            )));
        }
        let oh = conv_out_len(h, k, stride, pad);
        let ow = conv_out_len(wd, k, stride, pad);
        let ckk = c * k * k;
        let mut out = Array4::zeros([n, f, oh, ow]);
        let mut cols_t = vec![0.0f32; ckk * oh * ow];
        for ni in 0..n {
            let xs = &vx.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
            im2col_t(&mut cols_t, xs, c, h, wd, k, stride, pad);
            let dst = &mut out.data_mut()[ni * f * oh * ow..(ni + 1) * f * oh * ow];
            gemm_acc(dst, vw.data(), &cols_t, f, ckk, oh * ow);
            for fi in 0..f {
                let bias = vb.data()[fi];
                for v in dst[fi * oh * ow..(fi + 1) * oh * ow].iter_mut() {
                    *v += bias;
                }
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// In [`BnMode::Train`] the batch statistics are used (and retrievable via
    /// [`Tape::bn_batch_stats`] so callers can maintain running estimates); in
    /// [`BnMode::Eval`] the provided running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        mode: BnMode,
        eps: f32,
    ) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let [n, c, h, w] = vx.shape();
        let (vg, vb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if vg.shape() != [1, c, 1, 1] || vb.shape() != [1, c, 1, 1] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma/beta must be [1,{c},1,1], got {:?}/{:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let cnt = (n * h * w) as f32;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ci in 0..c {
                    let mut s = 0.0f32;
                    for ni in 0..n {
                        s += vx.plane(ni, ci).iter().sum::<f32>();
                    }
                    mean[ci] = s / cnt;
                    let mut v = 0.0f32;
                    for ni in 0..n {
                        v += vx.plane(ni, ci).iter().map(|t| (t - mean[ci]) * (t - mean[ci])).sum::<f32>();
                    }
                    var[ci] = v / cnt;
                }
                (mean, var)
            }
            BnMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::Config("batch_norm eval mode requires running statistics".into())
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::Shape("batch_norm: running stats length mismatch".into()));
                }
                (rm.to_vec(), rv.to_vec())
            }
        };
        let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = Array4::zeros([n, c, h, w]);
        for ni in 0..n {
            for ci in 0..c {
                let (g, b) = (vg.data()[ci], vb.data()[ci]);
                let (m, iv) = (mean[ci], inv[ci]);
                let src = vx.plane(ni, ci).to_vec();
                let dst = out.plane_mut(ni, ci);
                for (d, s) in dst.iter_mut().zip(&src) {
                    *d = g * (s - m) * iv + b;
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, eps, mean, var, inv, mode }, rg))
    }

    /// Batch statistics saved by a train-mode [`Tape::batch_norm`] node.
    pub fn bn_batch_stats(&self, v: Var) -> Option<(&[f32], &[f32])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Softmax across the channel axis per pixel.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let [n, c, h, w] = vx.shape();
        if c < 2 {
            return Err(Error::Config("channel_softmax needs at least 2 channels".into()));
        }
        let mut out = Array4::zeros([n, c, h, w]);
        let hw = h * w;
        let src = vx.data();
        let dst = out.data_mut();
        for ni in 0..n {
            let base = ni * c * hw;
            for p in 0..hw {
                let mut mx = f32::NEG_INFINITY;
                for ci in 0..c {
                    mx = mx.max(src[base + ci * hw + p]);
                }
                let mut denom = 0.0f32;
                for ci in 0..c {
                    let e = (src[base + ci * hw + p] - mx).exp();
                    dst[base + ci * hw + p] = e;
                    denom += e;
                }
                let inv = 1.0 / denom;
                for ci in 0..c {
                    dst[base + ci * hw + p] *= inv;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, Op::ChannelSoftmax { x }, rg))
    }

    /// Fully connected layer: `x [n,kin,1,1]`, `w [kout,kin,1,1]`,
    /// `b [1,kout,1,1]` -> `[n,kout,1,1]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let [n, kin, xh, xw] = vx.shape();
        let [kout, wkin, _, _] = vw.shape();
        if xh != 1 || xw != 1 {
            return Err(Error::Shape(format!("dense input must be flat, got {:?}", vx.shape())));
        }
        if wkin != kin {
            return Err(Error::Shape(format!("dense: input width {kin} != weight width {wkin}")));
        }
        if vb.shape() != [1, kout, 1, 1] {
            return Err(Error::Shape("dense: bias shape mismatch".into()));
        }
        let mut wt = vec![0.0f32; kin * kout];
        transpose(&mut wt, vw.data(), kout, kin);
        let mut out = vec![0.0f32; n * kout];
        gemm_acc(&mut out, vx.data(), &wt, n, kin, kout);
        for ni in 0..n {
            for o in 0..kout {
                out[ni * kout + o] += vb.data()[o];
            }
        }
        let out = Array4::from_vec([n, kout, 1, 1], out).unwrap();
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Dense { x, w, b }, rg))
    }

    // ── Warping ops ──────────────────────────────────────────────────────

    /// Shift image content by a per-item translation `(d_row, d_col)`:
    /// `out(u, v) = img(u - d_row, v - d_col)`, zero outside.
    ///
    /// Differentiable w.r.t. both the image and the translation.
    pub fn bilinear_warp(&mut self, img: Var, trans: Var) -> Var {
        let (vi, vt) = (&self.nodes[img.0].value, &self.nodes[trans.0].value);
        let [n, c, h, w] = vi.shape();
        assert_eq!(vt.shape(), [n, 2, 1, 1], "translation must be [n,2,1,1]");
        let mut out = Array4::zeros([n, c, h, w]);
        for ni in 0..n {
            let dr = vt.at(ni, 0, 0, 0);
            let dc = vt.at(ni, 1, 0, 0);
            for ci in 0..c {
                let src = vi.plane(ni, ci).to_vec();
                let dst = out.plane_mut(ni, ci);
                for u in 0..h {
                    for v in 0..w {
                        let (val, _, _) = bilerp_zero_with_grad(
                            &src,
                            h,
                            w,
                            u as f32 - dr,
                            v as f32 - dc,
                        );
                        dst[u * w + v] = val;
                    }
                }
            }
        }
        let rg = self.any_grad(&[img, trans]);
        self.push(out, Op::BilinearWarp { img, trans }, rg)
    }

    /// Odd-sized window crop centered at a (possibly fractional) location.
    /// Out-of-bounds regions read zero. Differentiable w.r.t. the map and the
    /// center.
    pub fn crop_window(&mut self, map: Var, center: Var, size: usize) -> Result<Var> {
        if size % 2 == 0 {
            return Err(Error::Config(format!("crop_window size must be odd, got {size}")));
        }
        let (vm, vc) = (&self.nodes[map.0].value, &self.nodes[center.0].value);
        let [n, c, h, w] = vm.shape();
        if n != 1 {
            return Err(Error::Shape("crop_window expects a single-item map".into()));
        }
        if vc.shape() != [1, 2, 1, 1] {
            return Err(Error::Shape("crop_window center must be [1,2,1,1]".into()));
        }
        let off = (size as f32 - 1.0) / 2.0;
        let (cr, cc) = (vc.data()[0], vc.data()[1]);
        let mut out = Array4::zeros([1, c, size, size]);
        for ci in 0..c {
            let src = vm.plane(0, ci).to_vec();
            let dst = out.plane_mut(0, ci);
            for i in 0..size {
                for j in 0..size {
                    let y = cr - off + i as f32;
                    let x = cc - off + j as f32;
                    let (val, _, _) = bilerp_zero_with_grad(&src, h, w, y, x);
                    dst[i * size + j] = val;
                }
            }
        }
        let rg = self.any_grad(&[map, center]);
        Ok(self.push(out, Op::CropWindow { map, center, size }, rg))
    }

    /// Probability-weighted mean coordinate of each `[n,1,h,w]` mask:
    /// `[n,2,1,1]` of `(row, col)`.
    pub fn expected_loc(&mut self, mask: Var) -> Result<Var> {
        let vm = &self.nodes[mask.0].value;
        let [n, c, h, w] = vm.shape();
        if c != 1 {
            return Err(Error::Shape("expected_loc wants a single-channel mask".into()));
        }
        let mut out = Array4::zeros([n, 2, 1, 1]);
        for ni in 0..n {
            let p = vm.plane(ni, 0);
            let mass: f32 = p.iter().sum();
            if mass <= 1e-8 {
                return Err(Error::Numeric("expected_loc: zero-mass mask".into()));
            }
            let mut su = 0.0f32;
            let mut sv = 0.0f32;
            for u in 0..h {
                for v in 0..w {
                    let m = p[u * w + v];
                    su += u as f32 * m;
                    sv += v as f32 * m;
                }
            }
            out.set(ni, 0, 0, 0, su / mass);
            out.set(ni, 1, 0, 0, sv / mass);
        }
        let rg = self.nodes[mask.0].requires_grad;
        Ok(self.push(out, Op::ExpectedLoc { mask }, rg))
    }

    /// Place `x [n,c,bh,bw]` into an `[n,c,oh,ow]` zero canvas with its
    /// top-left corner at `(r0, c0)`; parts outside the canvas are dropped.
    pub fn plant(&mut self, x: Var, oh: usize, ow: usize, r0: i64, c0: i64) -> Var {
        let vx = &self.nodes[x.0].value;
        let [n, c, bh, bw] = vx.shape();
        let mut out = Array4::zeros([n, c, oh, ow]);
        for ni in 0..n {
            for ci in 0..c {
                let src = vx.plane(ni, ci).to_vec();
                let dst = out.plane_mut(ni, ci);
                for i in 0..bh {
                    let y = r0 + i as i64;
                    if y < 0 || y >= oh as i64 {
                        continue;
                    }
                    for j in 0..bw {
                        let x2 = c0 + j as i64;
                        if x2 < 0 || x2 >= ow as i64 {
                            continue;
                        }
                        dst[y as usize * ow + x2 as usize] = src[i * bw + j];
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Plant { x, oh, ow, r0, c0 }, rg)
    }

    /// Bilinear resize (edge-replicated) to `(oh, ow)`.
    pub fn upsample(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let [n, c, h, w] = vx.shape();
        let mut out = Array4::zeros([n, c, oh, ow]);
        for ni in 0..n {
            for ci in 0..c {
                let src = vx.plane(ni, ci).to_vec();
                let dst = out.plane_mut(ni, ci);
                for oy in 0..oh {
                    let (y0, y1, fy) = resize_coord(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1, fx) = resize_coord(ox, ow, w);
                        dst[oy * ow + ox] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                            + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Upsample { x }, rg)
    }

    /// 3x3 max dilation, stride 1.
    pub fn dilate3x3(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let [n, c, h, w] = vx.shape();
        let mut out = Array4::zeros([n, c, h, w]);
        for ni in 0..n {
            for ci in 0..c {
                let src = vx.plane(ni, ci).to_vec();
                let dst = out.plane_mut(ni, ci);
                for u in 0..h {
                    for v in 0..w {
                        let mut mx = f32::NEG_INFINITY;
                        for du in -1i64..=1 {
                            for dv in -1i64..=1 {
                                let (y, x2) = (u as i64 + du, v as i64 + dv);
                                if y >= 0 && y < h as i64 && x2 >= 0 && x2 < w as i64 {
                                    mx = mx.max(src[y as usize * w + x2 as usize]);
                                }
                            }
                        }
                        dst[u * w + v] = mx;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Dilate3x3 { x }, rg)
    }

    pub fn min_e(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "min shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x.min(*y)).collect();
        let out = Array4::from_vec(va.shape(), data).unwrap();
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Min { a, b }, rg)
    }

    /// Select the per-row action column of an effect matrix stored row-major
    /// as `[n, 2*n_actions, 1, 1]`: `out[n, r] = e[n, r*n_actions + action_n]`.
    pub fn column_select(&mut self, e: Var, actions: &[usize], n_actions: usize) -> Result<Var> {
        let ve = &self.nodes[e.0].value;
        let [n, k, _, _] = ve.shape();
        if k != 2 * n_actions {
            return Err(Error::Shape(format!("effect width {k} != 2*{n_actions}")));
        }
        if actions.len() != n {
            return Err(Error::Shape("one action index per batch row required".into()));
        }
        if let Some(bad) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::Config(format!("action index {bad} out of range")));
        }
        let mut out = Array4::zeros([n, 2, 1, 1]);
        for ni in 0..n {
            let a = actions[ni];
            out.set(ni, 0, 0, 0, ve.at(ni, a, 0, 0));
            out.set(ni, 1, 0, 0, ve.at(ni, n_actions + a, 0, 0));
        }
        let rg = self.nodes[e.0].requires_grad;
        Ok(self.push(out, Op::ColumnSelect { e, actions: actions.to_vec(), n_actions }, rg))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients; only
    /// nodes on a path to a trainable leaf receive one.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Numeric("backward: loss is not finite".into()));
        }
        let mut g: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                g[id] = None;
                continue;
            }
            let Some(go) = g[id].take() else { continue };
            self.backward_node(id, &go, &mut g);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[id].op, Op::Leaf) {
                g[id] = Some(go);
            }
        }
        Ok(Grads { g })
    }

    fn acc_into(&self, g: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = g[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&self, id: usize, go: &[f32], g: &mut [Option<Vec<f32>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.acc_into(g, *a, |d| {
                    for (x, y) in d.iter_mut().zip(go) {
                        *x += y;
                    }
                });
                self.acc_into(g, *b, |d| {
                    for (x, y) in d.iter_mut().zip(go) {
                        *x += y;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.acc_into(g, *a, |d| {
                    for (x, y) in d.iter_mut().zip(go) {
                        *x += y;
                    }
                });
                self.acc_into(g, *b, |d| {
                    for (x, y) in d.iter_mut().zip(go) {
                        *x -= y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.acc_into(g, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += go[i] * vb[i];
                    }
                });
                self.acc_into(g, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += go[i] * va[i];
                    }
                });
            }
            Op::Affine { x, k } => {
                let k = *k;
                self.acc_into(g, *x, |d| {
                    for (x2, y) in d.iter_mut().zip(go) {
                        *x2 += k * y;
                    }
                });
            }
            Op::Clamp01 { x } => {
                let vx = self.nodes[x.0].value.data();
                self.acc_into(g, *x, |d| {
                    for i in 0..d.len() {
                        if (0.0..=1.0).contains(&vx[i]) {
                            d[i] += go[i];
                        }
                    }
                });
            }
            Op::Exp { x } => {
                let vy = self.nodes[id].value.data();
                self.acc_into(g, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += go[i] * vy[i];
                    }
                });
            }
            Op::Relu { x } => {
                let vx = self.nodes[x.0].value.data();
                self.acc_into(g, *x, |d| {
                    for i in 0..d.len() {
                        if vx[i] > 0.0 {
                            d[i] += go[i];
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let vy = self.nodes[id].value.data();
                self.acc_into(g, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += go[i] * vy[i] * (1.0 - vy[i]);
                    }
                });
            }
            Op::SumAll { x } => {
                let gs = go[0];
                self.acc_into(g, *x, |d| {
                    for v in d.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::SumChannels { x } => {
                let [n, c, h, w] = self.nodes[x.0].value.shape();
                let hw = h * w;
                self.acc_into(g, *x, |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let gbase = ni * hw;
                            for p in 0..hw {
                                d[base + p] += go[gbase + p];
                            }
                        }
                    }
                });
            }
            Op::MulBcastC { a, b } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let [n, c, h, w] = va.shape();
                let hw = h * w;
                self.acc_into(g, *a, |d| {
                    for ni in 0..n {
                        let bp = vb.plane(ni, 0);
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                d[base + p] += go[base + p] * bp[p];
                            }
                        }
                    }
                });
                self.acc_into(g, *b, |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let ap = va.plane(ni, ci);
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                d[ni * hw + p] += go[base + p] * ap[p];
                            }
                        }
                    }
                });
            }
            Op::ConcatC { parts } => {
                let [n, c_total, h, w] = self.nodes[id].value.shape();
                let hw = h * w;
                let mut co = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.c();
                    let start = co;
                    self.acc_into(g, *p, |d| {
                        for ni in 0..n {
                            for ci in 0..pc {
                                let src = (ni * c_total + start + ci) * hw;
                                let dst = (ni * pc + ci) * hw;
                                for q in 0..hw {
                                    d[dst + q] += go[src + q];
                                }
                            }
                        }
                    });
                    co += pc;
                }
            }
            Op::SliceC { x, c0 } => {
                let [n, c, h, w] = self.nodes[x.0].value.shape();
                let oc = self.nodes[id].value.c();
                let hw = h * w;
                let c0 = *c0;
                self.acc_into(g, *x, |d| {
                    for ni in 0..n {
                        for ci in 0..oc {
                            let dst = (ni * c + c0 + ci) * hw;
                            let src = (ni * oc + ci) * hw;
                            for q in 0..hw {
                                d[dst + q] += go[src + q];
                            }
                        }
                    }
                });
            }
            Op::StackN { parts } => {
                let mut row = 0;
                for p in parts {
                    let vp = &self.nodes[p.0].value;
                    let chw = vp.c() * vp.h() * vp.w();
                    let pn = vp.n();
                    let start = row * chw;
                    self.acc_into(g, *p, |d| {
                        for i in 0..pn * chw {
                            d[i] += go[start + i];
                        }
                    });
                    row += pn;
                }
            }
            Op::Reshape { x } => {
                self.acc_into(g, *x, |d| {
                    for (a, b) in d.iter_mut().zip(go) {
                        *a += b;
                    }
                });
            }
            Op::SliceN { x, i } => {
                let vp = &self.nodes[x.0].value;
                let chw = vp.c() * vp.h() * vp.w();
                let start = i * chw;
                self.acc_into(g, *x, |d| {
                    for q in 0..chw {
                        d[start + q] += go[q];
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.backward_conv2d(id, *x, *w, *b, *stride, *pad, go, g);
            }
            Op::BatchNorm { x, gamma, beta, mean, inv, mode, .. } => {
                self.backward_batch_norm(id, *x, *gamma, *beta, mean, inv, *mode, go, g);
            }
            Op::ChannelSoftmax { x } => {
                let vy = &self.nodes[id].value;
                let [n, c, h, w] = vy.shape();
                let hw = h * w;
                let y = vy.data();
                self.acc_into(g, *x, |d| {
                    for ni in 0..n {
                        let base = ni * c * hw;
                        for p in 0..hw {
                            let mut dot = 0.0f32;
                            for ci in 0..c {
                                let i = base + ci * hw + p;
                                dot += go[i] * y[i];
                            }
                            for ci in 0..c {
                                let i = base + ci * hw + p;
                                d[i] += y[i] * (go[i] - dot);
                            }
                        }
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let [n, kin, _, _] = vx.shape();
                let kout = vw.n();
                self.acc_into(g, *x, |d| {
                    // dx[n,kin] = go[n,kout] * w[kout,kin]
                    gemm_acc(d, go, vw.data(), n, kout, kin);
                });
                self.acc_into(g, *w, |d| {
                    // dw[kout,kin] = go^T[kout,n] * x[n,kin]
                    let mut got = vec![0.0f32; n * kout];
                    transpose(&mut got, go, n, kout);
                    gemm_acc(d, &got, vx.data(), kout, n, kin);
                });
                self.acc_into(g, *b, |d| {
                    for ni in 0..n {
                        for o in 0..kout {
                            d[o] += go[ni * kout + o];
                        }
                    }
                });
            }
            Op::BilinearWarp { img, trans } => {
                let vi = &self.nodes[img.0].value;
                let vt = &self.nodes[trans.0].value;
                let [n, c, h, w] = vi.shape();
                self.acc_into(g, *img, |d| {
                    for ni in 0..n {
                        let dr = vt.at(ni, 0, 0, 0);
                        let dc = vt.at(ni, 1, 0, 0);
                        for ci in 0..c {
                            let hw = h * w;
                            let dp = &mut d[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            let gp = &go[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for u in 0..h {
                                for v in 0..w {
                                    let gv = gp[u * w + v];
                                    if gv != 0.0 {
                                        bilerp_zero_scatter(dp, h, w, u as f32 - dr, v as f32 - dc, gv);
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc_into(g, *trans, |d| {
                    for ni in 0..n {
                        let dr = vt.at(ni, 0, 0, 0);
                        let dc = vt.at(ni, 1, 0, 0);
                        let mut sr = 0.0f32;
                        let mut sc = 0.0f32;
                        for ci in 0..c {
                            let hw = h * w;
                            let sp = vi.plane(ni, ci);
                            let gp = &go[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for u in 0..h {
                                for v in 0..w {
                                    let gv = gp[u * w + v];
                                    if gv != 0.0 {
                                        let (_, dy, dx) = bilerp_zero_with_grad(
                                            sp,
                                            h,
                                            w,
                                            u as f32 - dr,
                                            v as f32 - dc,
                                        );
                                        // Sample coordinate is (u - dr), so the
                                        // translation grad flips sign.
                                        sr -= gv * dy;
                                        sc -= gv * dx;
                                    }
                                }
                            }
                        }
                        d[ni * 2] += sr;
                        d[ni * 2 + 1] += sc;
                    }
                });
            }
            Op::CropWindow { map, center, size } => {
                let vm = &self.nodes[map.0].value;
                let vc = &self.nodes[center.0].value;
                let [_, c, h, w] = vm.shape();
                let size = *size;
                let off = (size as f32 - 1.0) / 2.0;
                let (cr, cc) = (vc.data()[0], vc.data()[1]);
                self.acc_into(g, *map, |d| {
                    for ci in 0..c {
                        let hw = h * w;
                        let dp = &mut d[ci * hw..(ci + 1) * hw];
                        let gp = &go[ci * size * size..(ci + 1) * size * size];
                        for i in 0..size {
                            for j in 0..size {
                                let gv = gp[i * size + j];
                                if gv != 0.0 {
                                    let y = cr - off + i as f32;
                                    let x = cc - off + j as f32;
                                    bilerp_zero_scatter(dp, h, w, y, x, gv);
                                }
                            }
                        }
                    }
                });
                self.acc_into(g, *center, |d| {
                    let mut sr = 0.0f32;
                    let mut sc = 0.0f32;
                    for ci in 0..c {
                        let sp = vm.plane(0, ci);
                        let gp = &go[ci * size * size..(ci + 1) * size * size];
                        for i in 0..size {
                            for j in 0..size {
                                let gv = gp[i * size + j];
                                if gv != 0.0 {
                                    let y = cr - off + i as f32;
                                    let x = cc - off + j as f32;
                                    let (_, dy, dx) = bilerp_zero_with_grad(sp, h, w, y, x);
                                    sr += gv * dy;
                                    sc += gv * dx;
                                }
                            }
                        }
                    }
                    d[0] += sr;
                    d[1] += sc;
                });
            }
            Op::ExpectedLoc { mask } => {
                let vm = &self.nodes[mask.0].value;
                let vy = &self.nodes[id].value;
                let [n, _, h, w] = vm.shape();
                self.acc_into(g, *mask, |d| {
                    for ni in 0..n {
                        let p = vm.plane(ni, 0);
                        let mass: f32 = p.iter().sum();
                        let ubar = vy.at(ni, 0, 0, 0);
                        let vbar = vy.at(ni, 1, 0, 0);
                        let (gu, gv) = (go[ni * 2], go[ni * 2 + 1]);
                        let base = ni * h * w;
                        for u in 0..h {
                            for v in 0..w {
                                d[base + u * w + v] += (gu * (u as f32 - ubar)
                                    + gv * (v as f32 - vbar))
                                    / mass;
                            }
                        }
                    }
                });
            }
            Op::Plant { x, oh, ow, r0, c0 } => {
                let vx = &self.nodes[x.0].value;
                let [n, c, bh, bw] = vx.shape();
                let (oh, ow, r0, c0) = (*oh, *ow, *r0, *c0);
                self.acc_into(g, *x, |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let dbase = (ni * c + ci) * bh * bw;
                            let gbase = (ni * c + ci) * oh * ow;
                            for i in 0..bh {
                                let y = r0 + i as i64;
                                if y < 0 || y >= oh as i64 {
                                    continue;
                                }
                                for j in 0..bw {
                                    let x2 = c0 + j as i64;
                                    if x2 < 0 || x2 >= ow as i64 {
                                        continue;
                                    }
                                    d[dbase + i * bw + j] +=
                                        go[gbase + y as usize * ow + x2 as usize];
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { x } => {
                let vx = &self.nodes[x.0].value;
                let vy = &self.nodes[id].value;
                let [n, c, h, w] = vx.shape();
                let (oh, ow) = (vy.h(), vy.w());
                self.acc_into(g, *x, |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let dbase = (ni * c + ci) * h * w;
                            let gbase = (ni * c + ci) * oh * ow;
                            for oy in 0..oh {
                                let (y0, y1, fy) = resize_coord(oy, oh, h);
                                for ox in 0..ow {
                                    let (x0, x1, fx) = resize_coord(ox, ow, w);
                                    let gv = go[gbase + oy * ow + ox];
                                    d[dbase + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                    d[dbase + y0 * w + x1] += gv * (1.0 - fy) * fx;
                                    d[dbase + y1 * w + x0] += gv * fy * (1.0 - fx);
                                    d[dbase + y1 * w + x1] += gv * fy * fx;
                                }
                            }
                        }
                    }
                });
            }
            Op::Dilate3x3 { x } => {
                let vx = &self.nodes[x.0].value;
                let [n, c, h, w] = vx.shape();
                self.acc_into(g, *x, |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let src = vx.plane(ni, ci);
                            let base = (ni * c + ci) * h * w;
                            for u in 0..h {
                                for v in 0..w {
                                    let gv = go[base + u * w + v];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    // Route to the first-scanned argmax.
                                    let mut best = f32::NEG_INFINITY;
                                    let mut bi = 0usize;
                                    for du in -1i64..=1 {
                                        for dv in -1i64..=1 {
                                            let (y, x2) = (u as i64 + du, v as i64 + dv);
                                            if y >= 0 && y < h as i64 && x2 >= 0 && x2 < w as i64 {
                                                let idx = y as usize * w + x2 as usize;
                                                if src[idx] > best {
                                                    best = src[idx];
                                                    bi = idx;
                                                }
                                            }
                                        }
                                    }
                                    d[base + bi] += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Min { a, b } => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                self.acc_into(g, *a, |d| {
                    for i in 0..d.len() {
                        if va[i] <= vb[i] {
                            d[i] += go[i];
                        }
                    }
                });
                self.acc_into(g, *b, |d| {
                    for i in 0..d.len() {
                        if va[i] > vb[i] {
                            d[i] += go[i];
                        }
                    }
                });
            }
            Op::ColumnSelect { e, actions, n_actions } => {
                let n = self.nodes[id].value.n();
                let na = *n_actions;
                self.acc_into(g, *e, |d| {
                    for ni in 0..n {
                        let a = actions[ni];
                        d[ni * 2 * na + a] += go[ni * 2];
                        d[ni * 2 * na + na + a] += go[ni * 2 + 1];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &self,
        id: usize,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        go: &[f32],
        g: &mut [Option<Vec<f32>>],
    ) {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let [n, c, h, wd] = vx.shape();
        let [f, _, k, _] = vw.shape();
        let vy = &self.nodes[id].value;
        let (oh, ow) = (vy.h(), vy.w());
        let ckk = c * k * k;
        let mut cols_t = vec![0.0f32; ckk * oh * ow];
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;

        if need_w {
            // dwt[ckk, f] += sum_n cols_t_n[ckk, ohow] * go_n^T[ohow, f],
            // transposed once into the parameter layout at the end.
            let mut dwt = vec![0.0f32; ckk * f];
            let mut got = vec![0.0f32; oh * ow * f];
            for ni in 0..n {
                let xs = &vx.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
                im2col_t(&mut cols_t, xs, c, h, wd, k, stride, pad);
                let gn = &go[ni * f * oh * ow..(ni + 1) * f * oh * ow];
                transpose(&mut got, gn, f, oh * ow);
                gemm_acc(&mut dwt, &cols_t, &got, ckk, oh * ow, f);
            }
            self.acc_into(g, w, |d| {
                for fi in 0..f {
                    for j in 0..ckk {
                        d[fi * ckk + j] += dwt[j * f + fi];
                    }
                }
            });
        }
        self.acc_into(g, b, |d| {
            for ni in 0..n {
                for fi in 0..f {
                    let base = (ni * f + fi) * oh * ow;
                    d[fi] += go[base..base + oh * ow].iter().sum::<f32>();
                }
            }
        });
        if need_x {
            let mut wt = vec![0.0f32; ckk * f];
            transpose(&mut wt, vw.data(), f, ckk);
            let mut dcols_t = vec![0.0f32; ckk * oh * ow];
            self.acc_into(g, x, |d| {
                for ni in 0..n {
                    let gn = &go[ni * f * oh * ow..(ni + 1) * f * oh * ow];
                    dcols_t.fill(0.0);
                    gemm_acc(&mut dcols_t, &wt, gn, ckk, f, oh * ow);
                    let dxn = &mut d[ni * c * h * wd..(ni + 1) * c * h * wd];
                    col2im_t_acc(dxn, &dcols_t, c, h, wd, k, stride, pad);
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batch_norm(
        &self,
        id: usize,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        inv: &[f32],
        mode: BnMode,
        go: &[f32],
        g: &mut [Option<Vec<f32>>],
    ) {
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gamma.0].value;
        let [n, c, h, w] = vx.shape();
        let hw = h * w;
        let cnt = (n * hw) as f32;
        self.acc_into(g, beta, |d| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    d[ci] += go[base..base + hw].iter().sum::<f32>();
                }
            }
        });
        self.acc_into(g, gamma, |d| {
            for ci in 0..c {
                let mut s = 0.0f32;
                for ni in 0..n {
                    let xs = vx.plane(ni, ci);
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        s += go[base + p] * (xs[p] - mean[ci]) * inv[ci];
                    }
                }
                d[ci] += s;
            }
        });
        let _ = id;
        self.acc_into(g, x, |d| match mode {
            BnMode::Eval => {
                for ni in 0..n {
                    for ci in 0..c {
                        let kf = vg.data()[ci] * inv[ci];
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            d[base + p] += go[base + p] * kf;
                        }
                    }
                }
            }
            BnMode::Train => {
                for ci in 0..c {
                    // Sums over the normalization set for the coupled grads.
                    let gamma_c = vg.data()[ci];
                    let (m_c, inv_c) = (mean[ci], inv[ci]);
                    let mut sum_dxhat = 0.0f32;
                    let mut sum_dxhat_xhat = 0.0f32;
                    for ni in 0..n {
                        let xs = vx.plane(ni, ci);
                        let base = (ni * c + ci) * hw;
                        let gs = &go[base..base + hw];
                        for p in 0..hw {
                            let dxhat = gs[p] * gamma_c;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * (xs[p] - m_c) * inv_c;
                        }
                    }
                    let k1 = inv_c;
                    let k2 = inv_c / cnt * sum_dxhat;
                    let k3 = inv_c * inv_c / cnt * sum_dxhat_xhat;
                    for ni in 0..n {
                        let xs = vx.plane(ni, ci);
                        let base = (ni * c + ci) * hw;
                        let gs = &go[base..base + hw];
                        let ds = &mut d[base..base + hw];
                        for p in 0..hw {
                            ds[p] += k1 * gs[p] * gamma_c - k2 - (xs[p] - m_c) * k3;
                        }
                    }
                }
            }
        });
    }
}
