//! Forward and backward kernels over raw tensors.
//!
//! Every kernel writes each output element from exactly one task with a fixed
//! summation order, so results are bit-identical whatever the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{Scalar, Shape, Tensor};

/// Output range `[lo, hi)` along an axis of length `len` for which
/// `i + offset` stays inside `[0, len)`.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

#[inline]
fn shifted(i: usize, offset: isize) -> usize {
    (i as isize + offset) as usize
}

fn check_conv(input: Shape, weight: Shape, bias: Shape) -> Result<()> {
    if weight.c() != input.c() {
        return Err(Error::ShapeMismatch {
            op: "conv3d (kernel input channels vs input)",
            left: weight,
            right: input,
        });
    }
    if weight.spatial().iter().any(|k| k % 2 == 0) {
        return Err(Error::InvalidShape {
            op: "conv3d",
            shape: weight,
            reason: "same-padding needs odd kernel extents".into(),
        });
    }
    if bias.numel() != weight.n() {
        return Err(Error::ShapeMismatch {
            op: "conv3d (bias vs kernel output channels)",
            left: bias,
            right: weight,
        });
    }
    Ok(())
}

/// Zero-padded, stride-1 3D cross-correlation. `weight` is laid out as
/// `(C_out, C_in, k_d, k_h, k_w)`; `bias` holds `C_out` values.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weight.shape());
    check_conv(is, ws, bias.shape())?;
    let [n_batch, c_in, d, h, w] = is.0;
    let [c_out, _, kd, kh, kw] = ws.0;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let os = Shape::new(n_batch, c_out, d, h, w);
    let mut out = Tensor::zeros(os);
    let (x, k, b) = (input.data(), weight.data(), bias.data());

    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, out_plane)| {
            let z = plane % d;
            let co = (plane / d) % c_out;
            let n = plane / (d * c_out);
            out_plane.fill(b[co]);
            for ci in 0..c_in {
                let in_chan = &x[(n * c_in + ci) * d * h * w..][..d * h * w];
                let k_chan = &k[(co * c_in + ci) * kd * kh * kw..][..kd * kh * kw];
                for dz in 0..kd {
                    let oz = dz as isize - pd;
                    let zi = z as isize + oz;
                    if zi < 0 || zi >= d as isize {
                        continue;
                    }
                    let in_slice = &in_chan[zi as usize * h * w..][..h * w];
                    for dy in 0..kh {
                        let oy = dy as isize - ph;
                        let (y0, y1) = valid_range(h, oy);
                        for dx in 0..kw {
                            let ox = dx as isize - pw;
                            let (x0, x1) = valid_range(w, ox);
                            let wt = k_chan[(dz * kh + dy) * kw + dx];
                            for y in y0..y1 {
                                let src = &in_slice[shifted(y, oy) * w..][..w];
                                let dst = &mut out_plane[y * w..][..w];
                                let src = &src[shifted(x0, ox)..shifted(x1, ox)];
                                for (o, &v) in dst[x0..x1].iter_mut().zip(src) {
                                    *o = *o + wt * v;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Lowered fast path: builds the patch matrix `(C_in·k³) × (D·H·W)` per batch
/// item and multiplies it by the flattened kernel.
pub fn conv3d_forward_lowered<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weight.shape());
    check_conv(is, ws, bias.shape())?;
    let [n_batch, c_in, d, h, w] = is.0;
    let [c_out, _, kd, kh, kw] = ws.0;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let taps = kd * kh * kw;
    let vox = d * h * w;
    let rows = c_in * taps;
    let mut out = Tensor::zeros(Shape::new(n_batch, c_out, d, h, w));

    for n in 0..n_batch {
        let mut patches = vec![T::zero(); rows * vox];
        patches
            .par_chunks_mut(vox)
            .enumerate()
            .for_each(|(row, patch)| {
                let ci = row / taps;
                let t = row % taps;
                let (dz, dy, dx) = (t / (kh * kw), (t / kw) % kh, t % kw);
                let (oz, oy, ox) = (dz as isize - pd, dy as isize - ph, dx as isize - pw);
                let chan = input.channel(n, ci);
                let (z0, z1) = valid_range(d, oz);
                let (y0, y1) = valid_range(h, oy);
                let (x0, x1) = valid_range(w, ox);
                for z in z0..z1 {
                    for y in y0..y1 {
                        let src = (shifted(z, oz) * h + shifted(y, oy)) * w;
                        let dst = (z * h + y) * w;
                        patch[dst + x0..dst + x1]
                            .copy_from_slice(&chan[src + shifted(x0, ox)..src + shifted(x1, ox)]);
                    }
                }
            });
        let k = weight.data();
        let b = bias.data();
        out.data_mut()[n * c_out * vox..(n + 1) * c_out * vox]
            .par_chunks_mut(vox)
            .enumerate()
            .for_each(|(co, dst)| {
                dst.fill(b[co]);
                for (r, patch) in patches.chunks(vox).enumerate() {
                    let wt = k[co * rows + r];
                    for (o, &p) in dst.iter_mut().zip(patch) {
                        *o = *o + wt * p;
                    }
                }
            });
    }
    Ok(out)
}

/// Gradient of [`conv3d_forward`] with respect to its input.
pub fn conv3d_backward_input<T: Scalar>(grad_out: &Tensor<T>, weight: &Tensor<T>) -> Tensor<T> {
    let [n_batch, c_out, d, h, w] = grad_out.shape().0;
    let [_, c_in, kd, kh, kw] = weight.shape().0;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut grad_in = Tensor::zeros(Shape::new(n_batch, c_in, d, h, w));
    let (g, k) = (grad_out.data(), weight.data());

    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, gin_plane)| {
            let z = plane % d;
            let ci = (plane / d) % c_in;
            let n = plane / (d * c_in);
            for co in 0..c_out {
                let g_chan = &g[(n * c_out + co) * d * h * w..][..d * h * w];
                let k_chan = &k[(co * c_in + ci) * kd * kh * kw..][..kd * kh * kw];
                for dz in 0..kd {
                    // Output voxel zo reads input zo + (dz - pd); invert it.
                    let oz = pd - dz as isize;
                    let zo = z as isize + oz;
                    if zo < 0 || zo >= d as isize {
                        continue;
                    }
                    let g_slice = &g_chan[zo as usize * h * w..][..h * w];
                    for dy in 0..kh {
                        let oy = ph - dy as isize;
                        let (y0, y1) = valid_range(h, oy);
                        for dx in 0..kw {
                            let ox = pw - dx as isize;
                            let (x0, x1) = valid_range(w, ox);
                            let wt = k_chan[(dz * kh + dy) * kw + dx];
                            for y in y0..y1 {
                                let src = &g_slice[shifted(y, oy) * w..][..w];
                                let src = &src[shifted(x0, ox)..shifted(x1, ox)];
                                let dst = &mut gin_plane[y * w..][..w];
                                for (o, &v) in dst[x0..x1].iter_mut().zip(src) {
                                    *o = *o + wt * v;
                                }
                            }
                        }
                    }
                }
            }
        });
    grad_in
}

/// Gradients of [`conv3d_forward`] with respect to kernel and bias.
pub fn conv3d_backward_params<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight_shape: Shape,
) -> (Tensor<T>, Tensor<T>) {
    let [n_batch, c_out, d, h, w] = grad_out.shape().0;
    let [_, c_in, kd, kh, kw] = weight_shape.0;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let taps = kd * kh * kw;
    let mut grad_w = Tensor::zeros(weight_shape);

    grad_w
        .data_mut()
        .par_iter_mut()
        .enumerate()
        .for_each(|(flat, gw)| {
            let t = flat % taps;
            let ci = (flat / taps) % c_in;
            let co = flat / (taps * c_in);
            let (dz, dy, dx) = (t / (kh * kw), (t / kw) % kh, t % kw);
            let (oz, oy, ox) = (dz as isize - pd, dy as isize - ph, dx as isize - pw);
            let (z0, z1) = valid_range(d, oz);
            let (y0, y1) = valid_range(h, oy);
            let (x0, x1) = valid_range(w, ox);
            let mut acc = T::zero();
            for n in 0..n_batch {
                let g_chan = grad_out.channel(n, co);
                let x_chan = input.channel(n, ci);
                for z in z0..z1 {
                    for y in y0..y1 {
                        let go = (z * h + y) * w;
                        let xi = (shifted(z, oz) * h + shifted(y, oy)) * w;
                        let gr = &g_chan[go + x0..go + x1];
                        let xr = &x_chan[xi + shifted(x0, ox)..xi + shifted(x1, ox)];
                        for (&a, &b) in gr.iter().zip(xr) {
                            acc = acc + a * b;
                        }
                    }
                }
            }
            *gw = acc;
        });

    let mut grad_b = Tensor::zeros(Shape::new(1, c_out, 1, 1, 1));
    for co in 0..c_out {
        let mut acc = T::zero();
        for n in 0..n_batch {
            for &v in grad_out.channel(n, co) {
                acc = acc + v;
            }
        }
        grad_b.data_mut()[co] = acc;
    }
    (grad_w, grad_b)
}

fn check_even(op: &'static str, shape: Shape) -> Result<()> {
    if shape.spatial().iter().any(|e| e % 2 != 0) {
        return Err(Error::InvalidShape {
            op,
            shape,
            reason: "spatial extents must be even".into(),
        });
    }
    Ok(())
}

/// 2×2×2 average pooling with stride 2. Each block is summed pairwise so a
/// block of equal values averages back to that value exactly.
pub fn avg_pool3d_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let is = input.shape();
    check_even("avg_pool3d", is)?;
    let [n, c, d, h, w] = is.0;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros(Shape::new(n, c, od, oh, ow));
    let eighth = T::from_f64(0.125);
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(nc, dst)| {
            let src = &x[nc * d * h * w..][..d * h * w];
            let at = |z: usize, y: usize, xx: usize| src[(z * h + y) * w + xx];
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let (z2, y2, x2) = (2 * z, 2 * y, 2 * xx);
                        let front = (at(z2, y2, x2) + at(z2, y2, x2 + 1))
                            + (at(z2, y2 + 1, x2) + at(z2, y2 + 1, x2 + 1));
                        let back = (at(z2 + 1, y2, x2) + at(z2 + 1, y2, x2 + 1))
                            + (at(z2 + 1, y2 + 1, x2) + at(z2 + 1, y2 + 1, x2 + 1));
                        dst[(z * oh + y) * ow + xx] = (front + back) * eighth;
                    }
                }
            }
        });
    Ok(out)
}

pub fn avg_pool3d_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, od, oh, ow] = grad_out.shape().0;
    let eighth = T::from_f64(0.125);
    Tensor::from_fn(Shape::new(n, c, 2 * od, 2 * oh, 2 * ow), |[b, ch, z, y, x]| {
        grad_out.get([b, ch, z / 2, y / 2, x / 2]) * eighth
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Trilinear,
}

pub fn upsample3d_forward<T: Scalar>(input: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let is = input.shape();
    let [n, c, d, h, w] = is.0;
    match mode {
        UpsampleMode::Nearest => Tensor::from_fn(
            Shape::new(n, c, 2 * d, 2 * h, 2 * w),
            |[b, ch, z, y, x]| input.get([b, ch, z / 2, y / 2, x / 2]),
        ),
        UpsampleMode::Trilinear => {
            // Separable passes: W, then H, then D.
            let outer = n * c;
            let data = linear_axis(input.data(), outer * d * h, w, 1);
            let data = linear_axis(&data, outer * d, h, 2 * w);
            let data = linear_axis(&data, outer, d, 4 * h * w);
            Tensor::new(Shape::new(n, c, 2 * d, 2 * h, 2 * w), data)
                .expect("upsampled buffer matches shape")
        }
    }
}

pub fn upsample3d_backward<T: Scalar>(grad_out: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let [n, c, d2, h2, w2] = grad_out.shape().0;
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let is = Shape::new(n, c, d, h, w);
    match mode {
        UpsampleMode::Nearest => {
            let g = grad_out;
            Tensor::from_fn(is, |[b, ch, z, y, x]| {
                let at = |dz: usize, dy: usize, dx: usize| {
                    g.get([b, ch, 2 * z + dz, 2 * y + dy, 2 * x + dx])
                };
                ((at(0, 0, 0) + at(0, 0, 1)) + (at(0, 1, 0) + at(0, 1, 1)))
                    + ((at(1, 0, 0) + at(1, 0, 1)) + (at(1, 1, 0) + at(1, 1, 1)))
            })
        }
        UpsampleMode::Trilinear => {
            let outer = n * c;
            let data = linear_axis_transpose(grad_out.data(), outer, d, 4 * h * w);
            let data = linear_axis_transpose(&data, outer * d, h, 2 * w);
            let data = linear_axis_transpose(&data, outer * d * h, w, 1);
            Tensor::new(is, data).expect("gradient buffer matches shape")
        }
    }
}

/// Doubles the middle axis of a `[outer, len, inner]` buffer with the fixed
/// half-pixel linear kernel (weights 3/4, 1/4, edges clamped).
fn linear_axis<T: Scalar>(src: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let (near, far) = (T::from_f64(0.75), T::from_f64(0.25));
    let mut dst = vec![T::zero(); outer * 2 * len * inner];
    dst.par_chunks_mut(2 * len * inner)
        .zip(src.par_chunks(len * inner))
        .for_each(|(out, inp)| {
            for i in 0..len {
                let prev = i.saturating_sub(1);
                let next = (i + 1).min(len - 1);
                let cur = &inp[i * inner..][..inner];
                let lo = &inp[prev * inner..][..inner];
                let hi = &inp[next * inner..][..inner];
                let (even, odd) = out[2 * i * inner..][..2 * inner].split_at_mut(inner);
                for j in 0..inner {
                    even[j] = near * cur[j] + far * lo[j];
                    odd[j] = near * cur[j] + far * hi[j];
                }
            }
        });
    dst
}

fn linear_axis_transpose<T: Scalar>(grad: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let (near, far) = (T::from_f64(0.75), T::from_f64(0.25));
    let mut dst = vec![T::zero(); outer * len * inner];
    dst.par_chunks_mut(len * inner)
        .zip(grad.par_chunks(2 * len * inner))
        .for_each(|(out, g)| {
            for i in 0..len {
                let prev = i.saturating_sub(1);
                let next = (i + 1).min(len - 1);
                for j in 0..inner {
                    let ge = g[2 * i * inner + j];
                    let go = g[(2 * i + 1) * inner + j];
                    out[i * inner + j] = out[i * inner + j] + near * (ge + go);
                    out[prev * inner + j] = out[prev * inner + j] + far * ge;
                    out[next * inner + j] = out[next * inner + j] + far * go;
                }
            }
        });
    dst
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() || sa.spatial() != sb.spatial() {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: sa,
            right: sb,
        });
    }
    let (ca, cb) = (sa.c(), sb.c());
    let plane = sa.plane();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n() {
        data.extend_from_slice(&a.data()[n * ca * plane..(n + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[n * cb * plane..(n + 1) * cb * plane]);
    }
    Tensor::new(sa.with_channels(ca + cb), data)
}

pub fn concat_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    ca: usize,
    cb: usize,
) -> (Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let plane = s.plane();
    let mut ga = Vec::with_capacity(s.n() * ca * plane);
    let mut gb = Vec::with_capacity(s.n() * cb * plane);
    for n in 0..s.n() {
        let base = n * (ca + cb) * plane;
        ga.extend_from_slice(&grad_out.data()[base..base + ca * plane]);
        gb.extend_from_slice(&grad_out.data()[base + ca * plane..base + (ca + cb) * plane]);
    }
    (
        Tensor::new(s.with_channels(ca), ga).expect("split matches"),
        Tensor::new(s.with_channels(cb), gb).expect("split matches"),
    )
}

/// Logistic function in the branch-stable form: the exponential is always
/// taken of a non-positive argument.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Per-voxel binary cross-entropy on a logit, `-[y ln σ(a) + (1-y) ln(1-σ(a))]`,
/// evaluated as `max(a,0) - a·y + ln(1 + e^{-|a|})`.
#[inline]
pub fn bce_with_logit<T: Scalar>(a: T, y: T) -> T {
    a.max(T::zero()) - a * y + (-a.abs()).exp().ln_1p()
}
