//! Forward and backward kernels for every operation the network uses.
//!
//! Kernels parallelize only across independent output planes. Each stored
//! value is produced by one thread with a fixed summation order, so results
//! are bitwise identical for any worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvParams, Tensor};

/// Accumulates `w * src` into `acc`, shifted by the kernel offset `(dy, dx)`
/// with zero padding outside the source plane.
#[inline]
fn shifted_axpy<T: Scalar>(acc: &mut [f64], src: &[T], h: usize, w: usize, dy: isize, dx: isize, weight: f64) {
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize);
    if x_hi <= x_lo as isize {
        return;
    }
    let x_hi = x_hi as usize;
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let dst = &mut acc[y * w + x_lo..y * w + x_hi];
        let s0 = (sy as usize * w) as isize + x_lo as isize + dx;
        let srow = &src[s0 as usize..s0 as usize + (x_hi - x_lo)];
        for (a, &s) in dst.iter_mut().zip(srow) {
            *a += weight * s.widen();
        }
    }
}

/// Dot product of `a` with `b` shifted by `(dy, dx)`, zero padded.
#[inline]
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize);
    if x_hi <= x_lo as isize {
        return 0.0;
    }
    let x_hi = x_hi as usize;
    let mut total = 0.0;
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let arow = &a[y * w + x_lo..y * w + x_hi];
        let s0 = (sy as usize * w) as isize + x_lo as isize + dx;
        let brow = &b[s0 as usize..s0 as usize + (x_hi - x_lo)];
        let mut row = 0.0;
        for (&p, &q) in arow.iter().zip(brow) {
            row += p.widen() * q.widen();
        }
        total += row;
    }
    total
}

fn check_conv_input<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<()> {
    if input.channels() != params.in_channels() {
        return Err(Error::Config(format!(
            "convolution expects {} input channels, got {}",
            params.in_channels(),
            input.channels()
        )));
    }
    Ok(())
}

/// Stride-1 convolution with zero "same" padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    check_conv_input(input, params)?;
    let (cin, h, w) = input.shape();
    let k = params.kernel();
    let r = (k / 2) as isize;
    let plane = h * w;
    let mut out = Tensor::zeros(params.out_channels(), h, w);
    out.data_mut().par_chunks_mut(plane).enumerate().for_each_init(
        || vec![0.0f64; plane],
        |acc, (oc, dst)| {
            acc.fill(params.bias()[oc].widen());
            for ic in 0..cin {
                let src = input.channel(ic);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = params.weight(oc, ic, ky, kx).widen();
                        shifted_axpy(acc, src, h, w, ky as isize - r, kx as isize - r, wv);
                    }
                }
            }
            for (d, &a) in dst.iter_mut().zip(acc.iter()) {
                *d = T::narrow(a);
            }
        },
    );
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and parameters.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>)> {
    check_conv_input(input, params)?;
    let (cin, h, w) = input.shape();
    if grad_out.shape() != (params.out_channels(), h, w) {
        return Err(Error::Shape(format!(
            "conv upstream gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            (params.out_channels(), h, w)
        )));
    }
    let k = params.kernel();
    let r = (k / 2) as isize;
    let plane = h * w;
    let cout = params.out_channels();

    // input gradient: transpose convolution, one input plane per task
    let mut grad_in = Tensor::zeros(cin, h, w);
    grad_in.data_mut().par_chunks_mut(plane).enumerate().for_each_init(
        || vec![0.0f64; plane],
        |acc, (ic, dst)| {
            acc.fill(0.0);
            for oc in 0..cout {
                let g = grad_out.channel(oc);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = params.weight(oc, ic, ky, kx).widen();
                        shifted_axpy(acc, g, h, w, r - ky as isize, r - kx as isize, wv);
                    }
                }
            }
            for (d, &a) in dst.iter_mut().zip(acc.iter()) {
                *d = T::narrow(a);
            }
        },
    );

    let mut grads = ConvParams::zeros_like(params);
    let per_oc = cin * k * k;
    let (gw, gb) = grads.split_mut();
    gw.par_chunks_mut(per_oc).zip(gb.par_iter_mut()).enumerate().for_each(|(oc, (wrow, b))| {
        let g = grad_out.channel(oc);
        *b = T::narrow(g.iter().map(|v| v.widen()).sum());
        for ic in 0..cin {
            let src = input.channel(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let d = shifted_dot(g, src, h, w, ky as isize - r, kx as isize - r);
                    wrow[(ic * k + ky) * k + kx] = T::narrow(d);
                }
            }
        }
    });
    Ok((grad_in, grads))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where the input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?}: spatial sizes differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(a.channels() + b.channels(), a.height(), a.width(), data)
}

/// Splits a concatenated gradient back into its two channel blocks.
pub fn concat_backward<T: Scalar>(grad_out: &Tensor<T>, a_channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((grad_out.slice_channels(0..a_channels)?, grad_out.slice_channels(a_channels..grad_out.channels())?))
}

pub fn add_elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!("cannot add {:?} and {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Source taps for one output coordinate of a linear resample.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    let max = (src_len - 1) as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            Tap { lo, hi, frac: s - lo as f64 }
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Per-channel bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, out_height: usize, out_width: usize) -> Result<Tensor<T>> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::Shape("resize target must be at least 1x1".into()));
    }
    let (c, h, w) = input.shape();
    let ty = taps(h, out_height);
    let tx = taps(w, out_width);
    let mut out = Tensor::zeros(c, out_height, out_width);
    out.data_mut().par_chunks_mut(out_height * out_width).enumerate().for_each(|(ch, dst)| {
        let src = input.channel(ch);
        for (oy, y) in ty.iter().enumerate() {
            let r0 = &src[y.lo * w..(y.lo + 1) * w];
            let r1 = &src[y.hi * w..(y.hi + 1) * w];
            for (ox, x) in tx.iter().enumerate() {
                let top = lerp(r0[x.lo].widen(), r0[x.hi].widen(), x.frac);
                let bottom = lerp(r1[x.lo].widen(), r1[x.hi].widen(), x.frac);
                dst[oy * out_width + ox] = T::narrow(lerp(top, bottom, y.frac));
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: scatters each output gradient onto its
/// four source taps.
pub fn resize_bilinear_backward<T: Scalar>(grad_out: &Tensor<T>, in_height: usize, in_width: usize) -> Tensor<T> {
    let (c, oh, ow) = grad_out.shape();
    let ty = taps(in_height, oh);
    let tx = taps(in_width, ow);
    let plane = in_height * in_width;
    let mut grad_in = Tensor::zeros(c, in_height, in_width);
    grad_in.data_mut().par_chunks_mut(plane).enumerate().for_each_init(
        || vec![0.0f64; plane],
        |acc, (ch, dst)| {
            acc.fill(0.0);
            let g = grad_out.channel(ch);
            for (oy, y) in ty.iter().enumerate() {
                for (ox, x) in tx.iter().enumerate() {
                    let gv = g[oy * ow + ox].widen();
                    let top = gv * (1.0 - y.frac);
                    let bottom = gv * y.frac;
                    acc[y.lo * in_width + x.lo] += top * (1.0 - x.frac);
                    acc[y.lo * in_width + x.hi] += top * x.frac;
                    acc[y.hi * in_width + x.lo] += bottom * (1.0 - x.frac);
                    acc[y.hi * in_width + x.hi] += bottom * x.frac;
                }
            }
            for (d, &a) in dst.iter_mut().zip(acc.iter()) {
                *d = T::narrow(a);
            }
        },
    );
    grad_in
}

/// Softmax across channels at every pixel, max-subtracted.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = input.shape();
    let plane = h * w;
    let src = input.data();
    let mut out = Tensor::zeros(c, h, w);
    let dst = out.data_mut();
    let mut exps = vec![0.0f64; c];
    for p in 0..plane {
        let max = (0..c).map(|ch| src[ch * plane + p].widen()).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (ch, e) in exps.iter_mut().enumerate() {
            *e = (src[ch * plane + p].widen() - max).exp();
            total += *e;
        }
        for (ch, e) in exps.iter().enumerate() {
            dst[ch * plane + p] = T::narrow(e / total);
        }
    }
    out
}

/// Backward of [`softmax_channels`] given its output `s`:
/// `dx = s * (g - <g, s>)` per pixel.
pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = output.shape();
    let plane = h * w;
    let s = output.data();
    let g = grad_out.data();
    let mut grad_in = Tensor::zeros(c, h, w);
    let dst = grad_in.data_mut();
    for p in 0..plane {
        let dot: f64 = (0..c).map(|ch| s[ch * plane + p].widen() * g[ch * plane + p].widen()).sum();
        for ch in 0..c {
            let i = ch * plane + p;
            dst[i] = T::narrow(s[i].widen() * (g[i].widen() - dot));
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(c: usize, h: usize, w: usize, v: &[f32]) -> Tensor<f32> {
        Tensor::new(c, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let input = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32 * 0.37 - 2.0);
        let out = conv2d(&input, &ConvParams::identity3x3(1)).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let input = Tensor::full(1, 3, 3, 1.0f32);
        let p = ConvParams::new(1, 1, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.at(0, 1, 1), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(0, y, x), 4.0);
        }
        assert_eq!(out.at(0, 0, 1), 6.0);
    }

    #[test]
    fn conv_channel_mismatch_is_config_error() {
        let input = Tensor::<f32>::zeros(2, 4, 4);
        let p = ConvParams::zeros(1, 3, 3).unwrap();
        assert!(matches!(conv2d(&input, &p), Err(Error::Config(_))));
    }

    #[test]
    fn relu_examples() {
        let x = t(1, 1, 3, &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = t(1, 1, 3, &[0.0, 1.5, 3.0]);
        assert_eq!(relu(&pos), pos);
        let g = relu_backward(&x, &Tensor::full(1, 1, 3, 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_layout_and_round_trip() {
        let a = Tensor::full(1, 2, 2, 1.0f32);
        let b = Tensor::full(1, 2, 2, 2.0f32);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.channels(), 2);
        assert!(ab.channel(0).iter().all(|&v| v == 1.0));
        assert!(ab.channel(1).iter().all(|&v| v == 2.0));
        assert_eq!(ab.slice_channels(0..1).unwrap(), a);

        let big = concat_channels(&Tensor::<f32>::zeros(20, 4, 4), &Tensor::zeros(20, 4, 4)).unwrap();
        assert_eq!(big.channels(), 40);

        assert!(matches!(concat_channels(&a, &Tensor::zeros(1, 2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_backward_splits_blocks() {
        let g = Tensor::from_fn(3, 2, 2, |c, y, x| (c * 4 + y * 2 + x) as f32);
        let (ga, gb) = concat_backward(&g, 1).unwrap();
        assert_eq!(ga, g.slice_channels(0..1).unwrap());
        assert_eq!(gb, g.slice_channels(1..3).unwrap());
    }

    #[test]
    fn add_examples() {
        let a = t(1, 1, 2, &[1.0, 2.0]);
        let b = t(1, 1, 2, &[3.0, 4.0]);
        assert_eq!(add_elementwise(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(add_elementwise(&a, &Tensor::zeros(1, 1, 2)).unwrap(), a);
        assert!(matches!(add_elementwise(&a, &Tensor::zeros(1, 2, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn resize_examples() {
        let x = t(1, 1, 2, &[0.0, 2.0]);
        assert_eq!(resize_bilinear(&x, 1, 4).unwrap().data(), &[0.0, 0.5, 1.5, 2.0]);

        let c = Tensor::full(3, 5, 7, 0.1f32);
        let r = resize_bilinear(&c, 11, 2).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.1));

        let v = Tensor::from_fn(2, 3, 5, |c, y, x| (c + y * x) as f32 * 0.3);
        assert_eq!(resize_bilinear(&v, 3, 5).unwrap(), v);
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::<f32>::zeros(5, 2, 2);
        assert!(softmax_channels(&z).data().iter().all(|&v| (v - 0.2).abs() < 1e-7));

        let z = Tensor::<f64>::new(2, 1, 1, vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax_channels(&z);
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);

        let big = Tensor::<f32>::new(2, 1, 1, vec![1000.0, 0.0]).unwrap();
        let s = softmax_channels(&big);
        assert_eq!(s.data(), &[1.0, 0.0]);
    }
}
