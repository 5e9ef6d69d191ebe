//! Spatial operators on `[N, C, H, W]` feature maps.

use super::{Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Zero padding on each side of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding2d {
    pub fn symmetric(ph: usize, pw: usize) -> Self {
        Self {
            top: ph,
            bottom: ph,
            left: pw,
            right: pw,
        }
    }

    /// "Same" padding for stride 1; even kernels put the extra row/column on
    /// the high side.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            top: (kh - 1) / 2,
            bottom: kh / 2,
            left: (kw - 1) / 2,
            right: kw / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: Padding2d,
}

impl ConvGeom {
    pub fn new(stride: (usize, usize), pad: Padding2d) -> Self {
        Self { stride, pad }
    }

    fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = h + self.pad.top + self.pad.bottom;
        let pw = w + self.pad.left + self.pad.right;
        if ph < kh || pw < kw || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err!("{what}: expected [N, C, H, W], got {shape:?}")),
    }
}

struct ConvShape {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self, geom: &ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && geom.stride == (1, 1) && geom.pad == Padding2d::default()
    }
}

fn im2col<T: Real>(x: &[T], s: &ConvShape, geom: &ConvGeom, cols: &mut [T]) {
    let (sh, sw) = geom.stride;
    let plane = s.oh * s.ow;
    for ci in 0..s.c {
        let xc = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let row = (ci * s.kh + i) * s.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..s.oh {
                    let iy = (oy * sh + i) as isize - geom.pad.top as isize;
                    let line = &mut dst[oy * s.ow..(oy + 1) * s.ow];
                    if iy < 0 || iy >= s.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + j) as isize - geom.pad.left as isize;
                        *v = if ix < 0 || ix >= s.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], s: &ConvShape, geom: &ConvGeom, dx: &mut [T]) {
    let (sh, sw) = geom.stride;
    let plane = s.oh * s.ow;
    for ci in 0..s.c {
        let dxc = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let row = (ci * s.kh + i) * s.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..s.oh {
                    let iy = (oy * sh + i) as isize - geom.pad.top as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let line = &src[oy * s.ow..(oy + 1) * s.ow];
                    let base = iy as usize * s.w;
                    for (ox, &g) in line.iter().enumerate() {
                        let ix = (ox * sw + j) as isize - geom.pad.left as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dxc[base + ix as usize] = dxc[base + ix as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

fn conv_shape<T: Real>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeom) -> Result<ConvShape> {
    let [n, c, h, w] = dims4(x.shape(), "conv2d input")?;
    let [co, kc, kh, kw] = dims4(k.shape(), "conv2d kernel")?;
    if kc != c {
        return Err(shape_err!(
            "conv2d: kernel {:?} expects {kc} input channels, input {:?} has {c}",
            k.shape(),
            x.shape()
        ));
    }
    let (oh, ow) = geom.output_size(h, w, kh, kw).ok_or_else(|| {
        shape_err!(
            "conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {:?}",
            geom.pad
        )
    })?;
    Ok(ConvShape {
        n,
        c,
        h,
        w,
        co,
        kh,
        kw,
        oh,
        ow,
    })
}

impl<T: Real> Graph<T> {
    /// 2-D cross-correlation (no kernel flip) with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let s = conv_shape(xv, wv, &geom)?;
        if let Some(b) = b {
            if self.value(b).shape() != [s.co] {
                return Err(shape_err!(
                    "conv2d: bias {:?} does not match {} output channels",
                    self.value(b).shape(),
                    s.co
                ));
            }
        }
        let plane = s.oh * s.ow;
        let mut out = vec![T::zero(); s.n * s.co * plane];
        let pointwise = s.is_pointwise(&geom);
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); s.patch() * plane]
        };
        for ni in 0..s.n {
            let xn = &xv.data()[ni * s.c * s.h * s.w..(ni + 1) * s.c * s.h * s.w];
            let cols_ref: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, &s, &geom, &mut cols);
                &cols
            };
            T::gemm(
                false,
                false,
                s.co,
                plane,
                s.patch(),
                wv.data(),
                cols_ref,
                &mut out[ni * s.co * plane..],
                false,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk_idx, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bias[chunk_idx % s.co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let out = Tensor::new(&[s.n, s.co, s.oh, s.ow], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv.shape(), "avg_pool2d")?;
        let (oh, ow) = pool_output(h, w, kernel, stride, "avg_pool2d")?;
        let (kh, kw) = kernel;
        let scale = T::one() / T::from_usize(kh * kw).unwrap();
        let d = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for i in 0..kh {
                        let row = base + (oy * stride.0 + i) * w + ox * stride.1;
                        for j in 0..kw {
                            acc = acc + d[row + j];
                        }
                    }
                    out.push(acc * scale);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool { x, kernel, stride }))
    }

    /// Max pooling; gradient goes to the first maximum in row-major order.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv.shape(), "max_pool2d")?;
        let (oh, ow) = pool_output(h, w, kernel, stride, "max_pool2d")?;
        let (kh, kw) = kernel;
        let d = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride.0 * w + ox * stride.1;
                    for i in 0..kh {
                        let row = base + (oy * stride.0 + i) * w + ox * stride.1;
                        for j in 0..kw {
                            if d[row + j] > d[best] {
                                best = row + j;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Bilinear resize to a larger `(out_h, out_w)` (align-corners off,
    /// source coordinates clamped to the input extent).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv.shape(), "bilinear_upsample")?;
        if out_h < h || out_w < w {
            return Err(Error::InvalidArgument(format!(
                "bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w} requested"
            )));
        }
        let ys = interp_table(h, out_h);
        let xs = interp_table(w, out_w);
        let d = xv.data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let out = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(out, Op::Upsample { x }))
    }
}

fn pool_output(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    what: &str,
) -> Result<(usize, usize)> {
    let (kh, kw) = kernel;
    if kh == 0 || kw == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "{what}: kernel {kernel:?} and stride {stride:?} must be positive"
        )));
    }
    if kh > h || kw > w {
        return Err(shape_err!("{what}: kernel {kh}x{kw} larger than input {h}x{w}"));
    }
    Ok(((h - kh) / stride.0 + 1, (w - kw) / stride.1 + 1))
}

/// For each output coordinate: (low source index, high source index, weight of high).
fn interp_table<T: Real>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::from_f64_lossy(src - lo as f64))
        })
        .collect()
}

pub(super) fn conv2d_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    gout: &Tensor<T>,
    sink: &mut impl FnMut(Var, Tensor<T>),
) {
    let (xv, wv) = (g.value(x), g.value(w));
    let s = conv_shape(xv, wv, geom).expect("shape validated in forward");
    let plane = s.oh * s.ow;
    let pointwise = s.is_pointwise(geom);
    let (need_x, need_w) = (g.needs(x), g.needs(w));
    let mut dx = need_x.then(|| Tensor::zeros(xv.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(wv.shape()));
    let mut cols = vec![T::zero(); if pointwise { 0 } else { s.patch() * plane }];
    let mut dcols = vec![T::zero(); if need_x && !pointwise { s.patch() * plane } else { 0 }];
    let image = s.c * s.h * s.w;
    for ni in 0..s.n {
        let go = &gout.data()[ni * s.co * plane..(ni + 1) * s.co * plane];
        if let Some(dw) = dw.as_mut() {
            let xn = &xv.data()[ni * image..(ni + 1) * image];
            let cols_ref: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, &s, geom, &mut cols);
                &cols
            };
            // dW += dOut · colsᵀ
            T::gemm(false, true, s.co, s.patch(), plane, go, cols_ref, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data_mut()[ni * image..(ni + 1) * image];
            if pointwise {
                T::gemm(true, false, s.patch(), plane, s.co, wv.data(), go, dxn, false);
            } else {
                // dcols = Wᵀ · dOut, scattered back onto the image.
                T::gemm(true, false, s.patch(), plane, s.co, wv.data(), go, &mut dcols, false);
                col2im(&dcols, &s, geom, dxn);
            }
        }
    }
    if let Some(dx) = dx {
        sink(x, dx);
    }
    if let Some(dw) = dw {
        sink(w, dw);
    }
    if let Some(b) = b.filter(|b| g.needs(*b)) {
        let mut db = vec![T::zero(); s.co];
        for (idx, chunk) in gout.data().chunks(plane).enumerate() {
            db[idx % s.co] = db[idx % s.co] + chunk.iter().copied().sum::<T>();
        }
        sink(b, Tensor::new(&[s.co], db).unwrap());
    }
}

pub(super) fn avg_pool_backward<T: Real>(
    in_shape: &[usize],
    kernel: (usize, usize),
    stride: (usize, usize),
    gout: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
    let (kh, kw) = kernel;
    let scale = T::one() / T::from_usize(kh * kw).unwrap();
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (plane, go) in gout.data().chunks(oh * ow).enumerate() {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = go[oy * ow + ox] * scale;
                for i in 0..kh {
                    let row = base + (oy * stride.0 + i) * w + ox * stride.1;
                    for j in 0..kw {
                        d[row + j] = d[row + j] + gv;
                    }
                }
            }
        }
    }
    dx
}

pub(super) fn upsample_backward<T: Real>(in_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
    let ys = interp_table::<T>(h, oh);
    let xs = interp_table::<T>(w, ow);
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (plane, go) in gout.data().chunks(oh * ow).enumerate() {
        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gv = go[oy * ow + ox];
                let top = gv * (T::one() - fy);
                let bot = gv * fy;
                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
            }
        }
    }
    dx
}
