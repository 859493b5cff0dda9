//! Layer primitives on `[C, H, W]` tensors with their backward passes.

use super::tensor::{gemm, Mat, Real, Tensor};
use crate::{Error, Result};

fn kernel_of<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let (c, _, _) = input.chw()?;
    let (f, wc, k, k2) = match weight.shape()[..] {
        [f, wc, k, k2] => (f, wc, k, k2),
        _ => {
            return Err(Error::Shape(format!(
                "weights must be [F,C,k,k], got {:?}",
                weight.shape()
            )))
        }
    };
    if wc != c {
        return Err(Error::Shape(format!("weights expect {wc} channels, input has {c}")));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::Shape(format!("kernel must be square and odd, got {k}x{k2}")));
    }
    if bias.shape() != [f] {
        return Err(Error::Shape(format!("bias must be [{f}], got {:?}", bias.shape())));
    }
    Ok((f, k))
}

/// Unfold same-padded `k×k` neighbourhoods into a `[C·k·k, H·W]` matrix.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let n = h * w;
    let mut col = vec![T::zero(); c * k * k * n];
    for ch in 0..c {
        let plane = &x[ch * n..(ch + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ch * k + ky) * k + kx) * n..][..n];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let yy = y + ky;
                    if yy < p || yy - p >= h {
                        continue;
                    }
                    let src = (yy - p) * w;
                    let xs = x_lo + kx - p;
                    row[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[src + xs..src + xs + (x_hi - x_lo)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let n = h * w;
    let mut x = vec![T::zero(); c * n];
    for ch in 0..c {
        let plane = &mut x[ch * n..(ch + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * n..][..n];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let yy = y + ky;
                    if yy < p || yy - p >= h {
                        continue;
                    }
                    let dst = (yy - p) * w + x_lo + kx - p;
                    for (d, &s) in plane[dst..dst + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&row[y * w + x_lo..y * w + x_hi])
                    {
                        *d = *d + s;
                    }
                }
            }
        }
    }
    x
}

/// Same-padded (zero) cross-correlation; `weight` is `[F, C, k, k]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (f, k) = kernel_of(input, weight, bias)?;
    let (c, h, w) = input.chw()?;
    let n = h * w;
    let mut out = vec![T::zero(); f * n];
    for (fi, row) in out.chunks_mut(n.max(1)).enumerate() {
        row.fill(bias.data()[fi]);
    }
    let kk = c * k * k;
    let wmat = Mat::new(weight.data(), f, kk);
    if k == 1 {
        gemm(wmat, Mat::new(input.data(), c, n), T::one(), &mut out);
    } else {
        let col = im2col(input.data(), c, h, w, k);
        gemm(wmat, Mat::new(&col, kk, n), T::one(), &mut out);
    }
    Tensor::from_vec(&[f, h, w], out)
}

/// Accumulates weight and bias gradients into `grad_weight`/`grad_bias` and
/// returns the input gradient when `want_input` is set.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let (c, h, w) = input.chw()?;
    let (f, k) = match weight.shape()[..] {
        [f, _, k, _] => (f, k),
        _ => return Err(Error::Shape("weights must be rank 4".into())),
    };
    if grad_out.shape() != [f, h, w] {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match [{f},{h},{w}]",
            grad_out.shape()
        )));
    }
    let n = h * w;
    let kk = c * k * k;
    if grad_weight.len() != f * kk || grad_bias.len() != f {
        return Err(Error::Shape("gradient buffers have the wrong size".into()));
    }
    let g = grad_out.data();
    for (fi, gb) in grad_bias.iter_mut().enumerate() {
        *gb = g[fi * n..(fi + 1) * n].iter().fold(*gb, |a, &v| a + v);
    }
    let gmat = Mat::new(g, f, n);
    let owned;
    let col: &[T] = if k == 1 {
        input.data()
    } else {
        owned = im2col(input.data(), c, h, w, k);
        &owned
    };
    gemm(gmat, Mat::new(col, kk, n).t(), T::one(), grad_weight);
    if !want_input {
        return Ok(None);
    }
    let mut gcol = vec![T::zero(); kk * n];
    gemm(Mat::new(weight.data(), f, kk).t(), gmat, T::zero(), &mut gcol);
    let gin = if k == 1 { gcol } else { col2im(&gcol, c, h, w, k) };
    Tensor::from_vec(&[c, h, w], gin).map(Some)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling; also returns the flat input index of each maximum.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, idx))
}

pub fn maxpool2_backward<T: Real>(input_shape: &[usize], argmax: &[u32], grad: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad.data()) {
        gd[i as usize] = gd[i as usize] + v;
    }
    g
}

pub fn upsample_nearest2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let d = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &d[ch * h * w + (y / 2) * w..][..w];
            let dst = &mut out[ch * oh * ow + y * ow..][..ow];
            for (xx, v) in dst.iter_mut().enumerate() {
                *v = src[xx / 2];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Adjoint of nearest upsampling: sum over each 2×2 block.
pub fn upsample_nearest2_backward<T: Real>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = grad.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape("upsampled gradient must have even extents".into()));
    }
    block_reduce(grad, T::one())
}

/// 2×2 average pooling.
pub fn downsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("downsampling needs even extents, got {h}x{w}")));
    }
    block_reduce(x, T::of(0.25))
}

fn block_reduce<T: Real>(x: &Tensor<T>, k: T) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i = base + 2 * y * w + 2 * xx;
                out.push((d[i] + d[i + 1] + d[i + w] + d[i + w + 1]) * k);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Stack channels of `a` then `b`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, h, w) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (h, w) != (hb, wb) {
        return Err(Error::Shape(format!("cannot concat {h}x{w} with {hb}x{wb}")));
    }
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

/// Split a channel-stacked gradient back into its two parts.
pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.chw()?;
    if first > c {
        return Err(Error::Shape(format!("cannot split {first} of {c} channels")));
    }
    let cut = first * h * w;
    Ok((
        Tensor::from_vec(&[first, h, w], x.data()[..cut].to_vec())?,
        Tensor::from_vec(&[c - first, h, w], x.data()[cut..].to_vec())?,
    ))
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct zero-padded correlation.
    fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = x.chw().unwrap();
        let (f, k) = (wt.shape()[0], wt.shape()[2]);
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[f, h, w]);
        for fi in 0..f {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut s = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - p, xx + kx - p);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = wt.data()[((fi * c + ci) * k + ky as usize) * k + kx as usize];
                                s += wv * x.data()[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out.data_mut()[(fi * h + y as usize) * w + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = random(&[1, 5, 7], 1);
        let mut wt = Tensor::zeros(&[1, 1, 3, 3]);
        wt.data_mut()[4] = 1.0;
        let y = conv2d(&x, &wt, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let c = 0.3;
        let x = Tensor::full(&[1, 4, 4], c);
        let wt = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &wt, &Tensor::zeros(&[1])).unwrap();
        let at = |xx: usize, yy: usize| y.data()[yy * 4 + xx];
        assert_abs_diff_eq!(at(1, 1), 9.0 * c, epsilon = 1e-12);
        assert_abs_diff_eq!(at(2, 2), 9.0 * c, epsilon = 1e-12);
        assert_abs_diff_eq!(at(0, 0), 4.0 * c, epsilon = 1e-12);
        assert_abs_diff_eq!(at(3, 0), 4.0 * c, epsilon = 1e-12);
        assert_abs_diff_eq!(at(1, 0), 6.0 * c, epsilon = 1e-12);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = random(&[2, 4, 4], 1);
        let wt = random(&[3, 1, 3, 3], 2);
        assert!(matches!(conv2d(&x, &wt, &Tensor::zeros(&[3])), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_matches_direct_sum() {
        for (k, seed) in [(3, 4), (1, 5)] {
            let x = random(&[3, 6, 5], seed);
            let wt = random(&[4, 3, k, k], seed + 10);
            let b = random(&[4], seed + 20);
            let y = conv2d(&x, &wt, &b).unwrap();
            let o = conv_oracle(&x, &wt, &b);
            for (a, e) in y.data().iter().zip(o.data()) {
                assert_abs_diff_eq!(a, e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = random(&[2, 5, 4], 7);
        let wt = random(&[3, 2, 3, 3], 8);
        let b = random(&[3], 9);
        let gout = random(&[3, 5, 4], 10);
        // L = <gout, conv(x)>, linear in every argument.
        let loss = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv2d(x, wt, b).unwrap().data().iter().zip(gout.data()).map(|(a, g)| a * g).sum()
        };
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv2d_backward(&x, &wt, &gout, &mut gw, &mut gb, true).unwrap().unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (loss(&p, &wt, &b) - loss(&m, &wt, &b)) / (2.0 * h);
            assert_abs_diff_eq!(gx.data()[i], fd, epsilon = 1e-7);
        }
        for i in 0..wt.len() {
            let (mut p, mut m) = (wt.clone(), wt.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (loss(&x, &p, &b) - loss(&x, &m, &b)) / (2.0 * h);
            assert_abs_diff_eq!(gw[i], fd, epsilon = 1e-7);
        }
        for (i, g) in gb.iter().enumerate() {
            let s: f64 = gout.data()[i * 20..(i + 1) * 20].iter().sum();
            assert_abs_diff_eq!(*g, s, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_by_one_chain_rule_by_hand() {
        // y = w·x + b on a single pixel, L = 2y  =>  dL/dw = 2x, dL/db = 2, dL/dx = 2w.
        let x = Tensor::from_vec(&[1, 1, 1], vec![0.7]).unwrap();
        let wt = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, -1.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let gout = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let mut gw = vec![0.0; 9];
        let mut gb = vec![0.0];
        let gx = conv2d_backward(&x, &wt, &gout, &mut gw, &mut gb, true).unwrap().unwrap();
        assert_abs_diff_eq!(gw[4], 1.4, epsilon = 1e-15);
        assert!(gw.iter().enumerate().all(|(i, &g)| i == 4 || g == 0.0));
        assert_eq!(gb[0], 2.0);
        assert_abs_diff_eq!(gx.data()[0], -3.0, epsilon = 1e-15);
    }

    #[test]
    fn pooling_basics() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
        let c = Tensor::full(&[2, 4, 6], 0.25);
        assert!(maxpool2(&c).unwrap().0.data().iter().all(|&v| v == 0.25));
        assert!(matches!(maxpool2(&Tensor::<f64>::zeros(&[1, 3, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_gradient_routes_to_argmax() {
        let x = random(&[2, 4, 6], 3);
        let (_, idx) = maxpool2(&x).unwrap();
        let ones = Tensor::full(&[2, 2, 3], 1.0);
        let g = maxpool2_backward(x.shape(), &idx, &ones);
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let s = |t: &Tensor<f64>| maxpool2(t).unwrap().0.data().iter().sum::<f64>();
            let fd = (s(&p) - s(&m)) / (2.0 * h);
            assert_abs_diff_eq!(g.data()[i], fd, epsilon = 1e-8);
        }
        assert_eq!(g.data().iter().filter(|&&v| v == 1.0).count(), 12);
    }

    #[test]
    fn upsample_shapes_and_blocks() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![0.6]).unwrap();
        assert_eq!(upsample_nearest2(&x).unwrap().data(), &[0.6; 4]);
        let y = upsample_nearest2(&random(&[3, 2, 5], 1)).unwrap();
        assert_eq!(y.shape(), &[3, 4, 10]);
    }

    proptest! {
        #[test]
        fn downsample_inverts_upsample(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let x = random(&[c, h, w], seed);
            let back = downsample2(&upsample_nearest2(&x).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn upsample_adjoint(h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            // <up(x), g> == <x, up^T(g)>
            let x = random(&[2, h, w], seed);
            let g = random(&[2, 2 * h, 2 * w], seed ^ 1);
            let lhs: f64 = upsample_nearest2(&x).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(upsample_nearest2_backward(&g).unwrap().data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert_eq!(sigmoid_scalar(100.0f32), 1.0);
        assert!(sigmoid_scalar(-100.0f32) >= 0.0);
        assert!(sigmoid_scalar(-88.0f32).is_finite() && sigmoid_scalar(88.0f32).is_finite());
        assert_abs_diff_eq!(sigmoid_scalar(1.0f64), 0.731_058_578_6, epsilon = 1e-10);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = random(&[2, 3, 3], 1);
        let b = random(&[1, 3, 3], 2);
        let c = concat(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 3, 3]);
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}
