//! Raw numeric kernels behind the differentiable ops.
//!
//! Every kernel here works on plain [`Tensor`]s; gradient bookkeeping lives
//! in [`crate::autograd`]. Convolution follows the im2col + GEMM scheme.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `op(a) * op(b)` for 2-D tensors, `op` being an optional transpose.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-D");
    assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D");
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension mismatch {:?} x {:?}", a.shape(), b.shape());
    let a_str = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let b_str = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        a_str,
        b.data(),
        b_str,
        T::zero(),
        out.data_mut(),
        (n as isize, 1),
    );
    out
}

/// Geometry of a square-kernel 2-D convolution over NCHW tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output positions `o` in `0..n_out` whose tap `o * stride + off - pad`
/// lands inside `0..n_in`.
fn valid_range(off: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    if n_in + pad <= off {
        return (0, 0);
    }
    let hi = ((n_in - 1 + pad - off) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, g.pad, s, g.h, oh);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(kj, g.pad, s, g.w, ow);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                dst[..ylo * ow].fill(T::zero());
                dst[yhi * ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * s + ki - g.pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    let first = iy * g.w + xlo * s + kj - g.pad;
                    if s == 1 {
                        line[xlo..xhi].copy_from_slice(&plane[first..first + (xhi - xlo)]);
                    } else {
                        for (v, &src) in line[xlo..xhi].iter_mut().zip(plane[first..].iter().step_by(s)) {
                            *v = src;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.in_c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, g.pad, s, g.h, oh);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(kj, g.pad, s, g.w, ow);
                if xlo == xhi {
                    continue;
                }
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in ylo..yhi {
                    let iy = oy * s + ki - g.pad;
                    let first = iy * g.w + xlo * s + kj - g.pad;
                    let line = &src[oy * ow + xlo..oy * ow + xhi];
                    if s == 1 {
                        for (d, &v) in plane[first..first + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in plane[first..].iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, g: &ConvGeom) -> usize {
    let s = x.shape();
    assert!(
        s.len() == 4 && s[1] == g.in_c && s[2] == g.h && s[3] == g.w,
        "conv input shape {:?} does not match geometry {:?}",
        s,
        g
    );
    s[0]
}

/// `y = conv(x, w)`: x `[N, C, H, W]`, w `[O, C, k, k]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n = check_input(x, g);
    let (oh, ow) = (g.out_h(), g.out_w());
    let rows = g.col_rows();
    let spatial = oh * ow;
    let mut out = Tensor::zeros(&[n, g.out_c, oh, ow]);
    let mut cols = vec![T::zero(); rows * spatial];
    let in_len = g.in_c * g.h * g.w;
    let out_len = g.out_c * spatial;
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            g.out_c,
            rows,
            spatial,
            T::one(),
            w.data(),
            (rows as isize, 1),
            src,
            (spatial as isize, 1),
            T::zero(),
            &mut out.data_mut()[b * out_len..(b + 1) * out_len],
            (spatial as isize, 1),
        );
    }
    out
}

/// Adjoint of [`conv2d`] in its input: `gx = conv^T(gy, w)`.
pub fn conv2d_input_grad<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n = gy.shape()[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let rows = g.col_rows();
    let spatial = oh * ow;
    let in_len = g.in_c * g.h * g.w;
    let out_len = g.out_c * spatial;
    let mut gx = Tensor::zeros(&[n, g.in_c, g.h, g.w]);
    let mut cols = vec![T::zero(); rows * spatial];
    for b in 0..n {
        let gyb = &gy.data()[b * out_len..(b + 1) * out_len];
        let dst = &mut gx.data_mut()[b * in_len..(b + 1) * in_len];
        let target: &mut [T] = if g.is_pointwise() { dst } else { &mut cols };
        T::gemm(
            rows,
            g.out_c,
            spatial,
            T::one(),
            w.data(),
            (1, rows as isize),
            gyb,
            (spatial as isize, 1),
            T::zero(),
            target,
            (spatial as isize, 1),
        );
        if !g.is_pointwise() {
            col2im(&cols, g, &mut gx.data_mut()[b * in_len..(b + 1) * in_len]);
        }
    }
    gx
}

/// Adjoint of [`conv2d`] in its weights: `gw = sum_n gy_n * cols(x_n)^T`.
pub fn conv2d_weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n = check_input(x, g);
    let (oh, ow) = (g.out_h(), g.out_w());
    let rows = g.col_rows();
    let spatial = oh * ow;
    let in_len = g.in_c * g.h * g.w;
    let out_len = g.out_c * spatial;
    let mut gw = Tensor::zeros(&[g.out_c, g.in_c, g.kernel, g.kernel]);
    let mut cols = vec![T::zero(); rows * spatial];
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            g.out_c,
            spatial,
            rows,
            T::one(),
            &gy.data()[b * out_len..(b + 1) * out_len],
            (spatial as isize, 1),
            src,
            (1, spatial as isize),
            T::one(),
            gw.data_mut(),
            (rows as isize, 1),
        );
    }
    gw
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let od = out.data_mut();
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

/// 2x2 block sum; the adjoint of [`upsample2`].
pub fn sum_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h2, w2) = (s[0], s[1], s[2], s[3]);
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "sum_pool2 needs even spatial size");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let od = out.data_mut();
    for p in 0..n * c {
        let src = &x.data()[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut od[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
            }
        }
    }
    out
}

/// Splits a shape `[N, C, rest..]` into (N, C, prod(rest)).
fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op needs at least 2 dims, got {:?}", shape);
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Broadcasts a per-channel vector `[C]` to `shape = [N, C, ..]`.
pub fn channel_broadcast<T: Scalar>(b: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let (n, c, s) = channel_dims(shape);
    assert_eq!(b.len(), c, "channel broadcast length mismatch");
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for i in 0..n {
        for ch in 0..c {
            od[(i * c + ch) * s..(i * c + ch + 1) * s].fill(b.data()[ch]);
        }
    }
    out
}

/// Sums `[N, C, ..]` down to `[C]`.
pub fn channel_sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, s) = channel_dims(x.shape());
    let mut out = Tensor::zeros(&[c]);
    for i in 0..n {
        for ch in 0..c {
            let part: T = x.data()[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum();
            out.data_mut()[ch] += part;
        }
    }
    out
}

/// Sums each leading-axis slice: `[L, ..] -> [L]`.
pub fn sum_trailing<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let lead = x.shape()[0];
    let inner = x.len() / lead.max(1);
    Tensor::from_fn(&[lead], |i| x.data()[i * inner..(i + 1) * inner].iter().copied().sum())
}

/// Adjoint of [`sum_trailing`]: repeats each of `[L]` over `shape[1..]`.
pub fn broadcast_trailing<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let lead = shape[0];
    assert_eq!(x.len(), lead, "broadcast_trailing length mismatch");
    let inner: usize = shape[1..].iter().product();
    Tensor::from_fn(shape, |i| x.data()[i / inner.max(1)])
}

pub fn gather<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    Tensor::from_fn(&[idx.len()], |i| x.data()[idx[i]])
}

pub fn scatter_add<T: Scalar>(g: &Tensor<T>, idx: &[usize], shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    for (i, &j) in idx.iter().enumerate() {
        out.data_mut()[j] += g.data()[i];
    }
    out
}

/// Box in continuous feature-map coordinates, `(y1, x1, y2, x2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureBox {
    pub batch: usize,
    pub y1: f64,
    pub x1: f64,
    pub y2: f64,
    pub x2: f64,
}

/// Precomputed bilinear sampling weights for fixed-size ROI pooling.
///
/// Feature cell `j` is centred at continuous coordinate `j + 0.5`; each of the
/// `P x P` output bins takes one bilinear sample at its centre. Samples that
/// fall outside the map are clamped to the border cells.
#[derive(Clone, Debug)]
pub struct RoiPlan<T> {
    pub rois: usize,
    pub pool: usize,
    pub channels: usize,
    pub input_shape: [usize; 4],
    /// Per (roi, bin): batch index and four (flat spatial index, weight) taps.
    taps: Vec<(usize, [(usize, T); 4])>,
}

impl<T: Scalar> RoiPlan<T> {
    pub fn new(input_shape: [usize; 4], boxes: &[FeatureBox], pool: usize) -> Self {
        assert!(pool >= 1, "pool size must be positive");
        let [n, c, h, w] = input_shape;
        let mut taps = Vec::with_capacity(boxes.len() * pool * pool);
        for b in boxes {
            assert!(b.batch < n, "roi batch index {} out of range {}", b.batch, n);
            let bin_h = (b.y2 - b.y1) / pool as f64;
            let bin_w = (b.x2 - b.x1) / pool as f64;
            for py in 0..pool {
                let y = b.y1 + (py as f64 + 0.5) * bin_h - 0.5;
                let (y0, y1, fy) = interp_axis(y, h);
                for px in 0..pool {
                    let x = b.x1 + (px as f64 + 0.5) * bin_w - 0.5;
                    let (x0, x1, fx) = interp_axis(x, w);
                    let t = [
                        (y0 * w + x0, T::lit((1.0 - fy) * (1.0 - fx))),
                        (y0 * w + x1, T::lit((1.0 - fy) * fx)),
                        (y1 * w + x0, T::lit(fy * (1.0 - fx))),
                        (y1 * w + x1, T::lit(fy * fx)),
                    ];
                    taps.push((b.batch, t));
                }
            }
        }
        Self {
            rois: boxes.len(),
            pool,
            channels: c,
            input_shape,
            taps,
        }
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.rois, self.channels, self.pool, self.pool]
    }

    /// `[N, C, H, W] -> [R, C, P, P]`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape(), &self.input_shape, "roi pooling input shape mismatch");
        let [_, c, h, w] = self.input_shape;
        let pp = self.pool * self.pool;
        let mut out = Tensor::zeros(&self.output_shape());
        let od = out.data_mut();
        for r in 0..self.rois {
            for bin in 0..pp {
                let (batch, t) = &self.taps[r * pp + bin];
                for ch in 0..c {
                    let plane = &x.data()[(batch * c + ch) * h * w..(batch * c + ch + 1) * h * w];
                    let v = t.iter().fold(T::zero(), |acc, &(i, wt)| acc + wt * plane[i]);
                    od[(r * c + ch) * pp + bin] = v;
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::forward`]: scatters `[R, C, P, P]` back onto the map.
    pub fn adjoint(&self, g: &Tensor<T>) -> Tensor<T> {
        assert_eq!(g.shape(), &self.output_shape(), "roi pooling grad shape mismatch");
        let [_, c, h, w] = self.input_shape;
        let pp = self.pool * self.pool;
        let mut out = Tensor::zeros(&self.input_shape);
        let od = out.data_mut();
        for r in 0..self.rois {
            for bin in 0..pp {
                let (batch, t) = &self.taps[r * pp + bin];
                for ch in 0..c {
                    let gv = g.data()[(r * c + ch) * pp + bin];
                    let base = (batch * c + ch) * h * w;
                    for &(i, wt) in t {
                        od[base + i] += wt * gv;
                    }
                }
            }
        }
        out
    }
}

fn interp_axis(pos: f64, size: usize) -> (usize, usize, f64) {
    let max = (size - 1) as f64;
    let p = pos.clamp(0.0, max);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(size - 1);
    (lo, hi, p - lo as f64)
}
