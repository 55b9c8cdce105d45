//! Independent float64 reference forwards used by the finite-difference
//! gradient oracle.
//!
//! These are deliberately written as direct loops (no im2col / GEMM sharing
//! with the tape implementation) so a gradient check compares two independent
//! computations, and in float64 so the central differences are not drowned by
//! float32 rounding.

/// Dense rank-4 float64 array mirroring [`super::Array4`].
#[derive(Clone, Debug)]
pub struct RefArray {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl RefArray {
    pub fn zeros(shape: [usize; 4]) -> Self {
        RefArray { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_f32(a: &super::Array4) -> Self {
        RefArray { shape: a.shape(), data: a.data().iter().map(|&v| v as f64).collect() }
    }

    pub fn to_f32(&self) -> super::Array4 {
        super::Array4::from_vec(self.shape, self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }
}

pub fn conv2d(x: &RefArray, w: &RefArray, b: &[f64], stride: usize, pad: usize) -> RefArray {
    let [n, c, h, wd] = x.shape;
    let [f, _, k, _] = w.shape;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = RefArray::zeros([n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= wd as i64 {
                                    continue;
                                }
                                acc += x.at(ni, ci, iy as usize, ix as usize)
                                    * w.at(fi, ci, ky, kx);
                            }
                        }
                    }
                    let i = out.idx(ni, fi, oy, ox);
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

pub fn batch_norm_train(x: &RefArray, gamma: &[f64], beta: &[f64], eps: f64) -> RefArray {
    let [n, c, h, w] = x.shape;
    let cnt = (n * h * w) as f64;
    let mut out = RefArray::zeros(x.shape);
    for ci in 0..c {
        let mut mean = 0.0;
        for ni in 0..n {
            mean += x.plane(ni, ci).iter().sum::<f64>();
        }
        mean /= cnt;
        let mut var = 0.0;
        for ni in 0..n {
            var += x.plane(ni, ci).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        var /= cnt;
        let inv = 1.0 / (var + eps).sqrt();
        for ni in 0..n {
            for p in 0..h * w {
                let i = (ni * c + ci) * h * w + p;
                out.data[i] = gamma[ci] * (x.data[i] - mean) * inv + beta[ci];
            }
        }
    }
    out
}

pub fn batch_norm_eval(x: &RefArray, gamma: &[f64], beta: &[f64], rm: &[f64], rv: &[f64], eps: f64) -> RefArray {
    let [n, c, h, w] = x.shape;
    let mut out = RefArray::zeros(x.shape);
    for ci in 0..c {
        let inv = 1.0 / (rv[ci] + eps).sqrt();
        for ni in 0..n {
            for p in 0..h * w {
                let i = (ni * c + ci) * h * w + p;
                out.data[i] = gamma[ci] * (x.data[i] - rm[ci]) * inv + beta[ci];
            }
        }
    }
    out
}

pub fn relu(x: &RefArray) -> RefArray {
    RefArray { shape: x.shape, data: x.data.iter().map(|v| v.max(0.0)).collect() }
}

pub fn sigmoid(x: &RefArray) -> RefArray {
    RefArray { shape: x.shape, data: x.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect() }
}

pub fn channel_softmax(x: &RefArray) -> RefArray {
    let [n, c, h, w] = x.shape;
    let mut out = RefArray::zeros(x.shape);
    for ni in 0..n {
        for p in 0..h * w {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(x.plane(ni, ci)[p]);
            }
            let mut denom = 0.0;
            for ci in 0..c {
                denom += (x.plane(ni, ci)[p] - mx).exp();
            }
            for ci in 0..c {
                let i = (ni * c + ci) * h * w + p;
                out.data[i] = (x.data[i] - mx).exp() / denom;
            }
        }
    }
    out
}

/// `x [n,kin,1,1] * w[kout,kin,1,1]^T + b`.
pub fn dense(x: &RefArray, w: &RefArray, b: &[f64]) -> RefArray {
    let [n, kin, _, _] = x.shape;
    let kout = w.shape[0];
    let mut out = RefArray::zeros([n, kout, 1, 1]);
    for ni in 0..n {
        for o in 0..kout {
            let mut acc = b[o];
            for i in 0..kin {
                acc += x.data[ni * kin + i] * w.data[o * kin + i];
            }
            out.data[ni * kout + o] = acc;
        }
    }
    out
}

fn bilerp(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let mut acc = 0.0;
    let taps = [
        (y0 as i64, x0 as i64, (1.0 - dy) * (1.0 - dx)),
        (y0 as i64, x0 as i64 + 1, (1.0 - dy) * dx),
        (y0 as i64 + 1, x0 as i64, dy * (1.0 - dx)),
        (y0 as i64 + 1, x0 as i64 + 1, dy * dx),
    ];
    for (yy, xx, wt) in taps {
        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
            acc += wt * plane[yy as usize * w + xx as usize];
        }
    }
    acc
}

/// Per-item translation warp matching the tape convention
/// `out(u, v) = img(u - dr, v - dc)`.
pub fn bilinear_warp(img: &RefArray, trans: &[(f64, f64)]) -> RefArray {
    let [n, c, h, w] = img.shape;
    let mut out = RefArray::zeros(img.shape);
    for ni in 0..n {
        let (dr, dc) = trans[ni];
        for ci in 0..c {
            let src = img.plane(ni, ci).to_vec();
            for u in 0..h {
                for v in 0..w {
                    let i = out.idx(ni, ci, u, v);
                    out.data[i] = bilerp(&src, h, w, u as f64 - dr, v as f64 - dc);
                }
            }
        }
    }
    out
}

pub fn crop_window(map: &RefArray, center: (f64, f64), size: usize) -> RefArray {
    let [_, c, h, w] = map.shape;
    let off = (size as f64 - 1.0) / 2.0;
    let mut out = RefArray::zeros([1, c, size, size]);
    for ci in 0..c {
        let src = map.plane(0, ci).to_vec();
        for i in 0..size {
            for j in 0..size {
                let y = center.0 - off + i as f64;
                let x = center.1 - off + j as f64;
                let o = out.idx(0, ci, i, j);
                out.data[o] = bilerp(&src, h, w, y, x);
            }
        }
    }
    out
}

pub fn upsample(x: &RefArray, oh: usize, ow: usize) -> RefArray {
    let [n, c, h, w] = x.shape;
    let coord = |dst: usize, dst_len: usize, src_len: usize| -> (usize, usize, f64) {
        let scale = src_len as f64 / dst_len as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(src_len - 1), s - lo as f64)
    };
    let mut out = RefArray::zeros([n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci).to_vec();
            for oy in 0..oh {
                let (y0, y1, fy) = coord(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = coord(ox, ow, w);
                    let i = out.idx(ni, ci, oy, ox);
                    out.data[i] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                        + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                }
            }
        }
    }
    out
}

pub fn expected_loc(mask: &RefArray) -> Vec<(f64, f64)> {
    let [n, _, h, w] = mask.shape;
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let p = mask.plane(ni, 0);
        let mass: f64 = p.iter().sum();
        let mut su = 0.0;
        let mut sv = 0.0;
        for u in 0..h {
            for v in 0..w {
                su += u as f64 * p[u * w + v];
                sv += v as f64 * p[u * w + v];
            }
        }
        out.push((su / mass, sv / mass));
    }
    out
}

pub fn concat_c(parts: &[&RefArray]) -> RefArray {
    let [n, _, h, w] = parts[0].shape;
    let c_total: usize = parts.iter().map(|p| p.shape[1]).sum();
    let mut out = RefArray::zeros([n, c_total, h, w]);
    for ni in 0..n {
        let mut co = 0;
        for p in parts {
            for ci in 0..p.shape[1] {
                let src = p.plane(ni, ci);
                let hw = h * w;
                let start = (ni * c_total + co + ci) * hw;
                out.data[start..start + hw].copy_from_slice(src);
            }
            co += p.shape[1];
        }
    }
    out
}
