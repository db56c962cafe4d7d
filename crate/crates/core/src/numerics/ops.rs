use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Temperature softmax along the leading (class) axis.
///
/// A 1-D tensor is treated as a single distribution; a `C x ...` tensor gets
/// one distribution per trailing position. Max-subtracted, 64-bit internally.
pub fn softmax<S: Scalar>(logits: &Tensor<S>, temperature: f64) -> Result<Tensor<S>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let classes = logits.shape()[0];
    let plane = logits.len() / classes;
    let src = logits.data();
    let mut out = logits.clone();
    let dst = out.data_mut();
    let mut buf = vec![0.0f64; classes];
    for p in 0..plane {
        let mut max = f64::NEG_INFINITY;
        for (c, b) in buf.iter_mut().enumerate() {
            *b = src[c * plane + p].as_f64() / temperature;
            max = max.max(*b);
        }
        let mut sum = 0.0;
        for b in buf.iter_mut() {
            *b = (*b - max).exp();
            sum += *b;
        }
        for (c, b) in buf.iter().enumerate() {
            dst[c * plane + p] = S::of(b / sum);
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Sigmoid-weighted linear unit `x * sigmoid(x)`.
#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// `d silu / dx = s (1 + x (1 - s))`, `s = sigmoid(x)`.
#[inline]
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

pub fn silu_tensor<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(silu)
}

/// Unfolds a `C x H x W` plane stack into a `(C*9) x (H*W)` patch matrix for
/// a 3x3 kernel with zero padding 1.
pub fn im2col<S: Scalar>(input: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let hw = h * w;
    let mut cols = vec![S::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the planes.
pub fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let hw = h * w;
    let mut out = vec![S::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => add_into(&mut dst[..w - 1], &src[1..]),
                        1 => add_into(dst, src),
                        _ => add_into(&mut dst[1..], &src[..w - 1]),
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_conv<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<(usize, usize, usize, usize)> {
    let (cin, h, w) = input.chw()?;
    match kernels.shape() {
        [cout, kc, 3, 3] if *kc == cin => {
            if bias.shape() != [*cout] {
                return Err(Error::dim(format!(
                    "bias shape {:?} does not match {cout} output channels",
                    bias.shape()
                )));
            }
            Ok((*cout, cin, h, w))
        }
        s => Err(Error::dim(format!(
            "kernel shape {s:?} incompatible with {cin} input channels"
        ))),
    }
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
///
/// Returns the output together with the patch matrix, which
/// [`conv3x3_backward`] consumes.
pub fn conv3x3_forward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<S>)> {
    let (cout, cin, h, w) = check_conv(input, kernels, bias)?;
    let hw = h * w;
    let k = cin * 9;
    let cols = im2col(input.data(), cin, h, w);
    let mut out = vec![S::zero(); cout * hw];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    // SAFETY: kernels is cout x k row-major, cols is k x hw, out is cout x hw.
    unsafe {
        S::gemm(
            cout,
            k,
            hw,
            S::one(),
            kernels.data().as_ptr(),
            k as isize,
            1,
            cols.as_ptr(),
            hw as isize,
            1,
            S::one(),
            out.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    Ok((Tensor::new(&[cout, h, w], out)?, cols))
}

pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    Ok(conv3x3_forward(input, kernels, bias)?.0)
}

/// Backward pass of [`conv3x3_forward`]. Accumulates into `grad_kernels` and
/// `grad_bias`; returns the input gradient when `want_input_grad` is set.
pub fn conv3x3_backward<S: Scalar>(
    cols: &[S],
    kernels: &Tensor<S>,
    grad_out: &Tensor<S>,
    grad_kernels: &mut Tensor<S>,
    grad_bias: &mut Tensor<S>,
    want_input_grad: bool,
) -> Option<Tensor<S>> {
    let (cout, h, w) = grad_out.chw().expect("conv grad is C x H x W");
    let hw = h * w;
    let k = kernels.shape()[1] * 9;
    let cin = kernels.shape()[1];
    debug_assert_eq!(cols.len(), k * hw);
    let go = grad_out.data();
    for (o, gb) in grad_bias.data_mut().iter_mut().enumerate() {
        *gb += go[o * hw..(o + 1) * hw].iter().copied().sum::<S>();
    }
    // dW (cout x k) += dOut (cout x hw) * cols^T (hw x k)
    unsafe {
        S::gemm(
            cout,
            hw,
            k,
            S::one(),
            go.as_ptr(),
            hw as isize,
            1,
            cols.as_ptr(),
            1,
            hw as isize,
            S::one(),
            grad_kernels.data_mut().as_mut_ptr(),
            k as isize,
            1,
        );
    }
    if !want_input_grad {
        return None;
    }
    // dCols (k x hw) = W^T (k x cout) * dOut (cout x hw)
    let mut dcols = vec![S::zero(); k * hw];
    unsafe {
        S::gemm(
            k,
            cout,
            hw,
            S::one(),
            kernels.data().as_ptr(),
            1,
            k as isize,
            go.as_ptr(),
            hw as isize,
            1,
            S::zero(),
            dcols.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    Some(Tensor::new(&[cin, h, w], col2im(&dcols, cin, h, w)).expect("shape from kernels"))
}

/// 2x2 average pooling; spatial extents must be even.
pub fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("avg_pool2 needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::of(0.25);
    let src = x.data();
    let out = Tensor::from_fn(&[c, oh, ow], |i| {
        let ci = i / (oh * ow);
        let y = (i / ow) % oh;
        let xx = i % ow;
        let base = ci * h * w + 2 * y * w + 2 * xx;
        (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter
    });
    Ok(out)
}

pub fn avg_pool2_backward<S: Scalar>(grad: &Tensor<S>) -> Tensor<S> {
    let (c, oh, ow) = grad.chw().expect("pool grad is C x H x W");
    let (h, w) = (oh * 2, ow * 2);
    let g = grad.data();
    let quarter = S::of(0.25);
    Tensor::from_fn(&[c, h, w], |i| {
        let ci = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        g[ci * oh * ow + (y / 2) * ow + x / 2] * quarter
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (h * 2, w * 2);
    let src = x.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let ci = i / (oh * ow);
        let y = (i / ow) % oh;
        let xx = i % ow;
        src[ci * h * w + (y / 2) * w + xx / 2]
    }))
}

pub fn upsample2_backward<S: Scalar>(grad: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = grad.chw().expect("upsample grad is C x H x W");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let g = grad.data();
    let o = out.data_mut();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                o[ci * oh * ow + (y / 2) * ow + x / 2] += g[ci * h * w + y * w + x];
            }
        }
    }
    out
}

/// Bilinear resize of every channel (half-pixel centres, edge clamped).
pub fn resize_bilinear<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
    let (c, h, w) = x.chw()?;
    if oh == 0 || ow == 0 {
        return Err(Error::dim("resize target must be non-empty"));
    }
    let src = x.data();
    let sample = |ci: usize, y: usize, xx: usize| -> S {
        let fy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((xx as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |yy: usize, xq: usize| src[ci * h * w + yy * w + xq].as_f64();
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
        let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
        S::of(top * (1.0 - ty) + bot * ty)
    };
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        sample(i / (oh * ow), (i / ow) % oh, i % ow)
    }))
}

/// Per-pixel argmax over the leading class axis; ties go to the lowest index.
pub fn argmax_channels<S: Scalar>(x: &Tensor<S>) -> Result<Vec<usize>> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let d = x.data();
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for ci in 1..c {
                if d[ci * plane + p] > d[best * plane + p] {
                    best = ci;
                }
            }
            best
        })
        .collect())
}

/// One-hot `C x H x W` encoding of a class-index map.
pub fn one_hot<S: Scalar>(mask: &[usize], classes: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    if mask.len() != h * w {
        return Err(Error::dim(format!("mask has {} pixels, expected {}", mask.len(), h * w)));
    }
    let mut t = Tensor::zeros(&[classes, h, w]);
    for (p, &c) in mask.iter().enumerate() {
        if c >= classes {
            return Err(Error::invalid(format!("class {c} out of range 0..{classes}")));
        }
        t.data_mut()[c * h * w + p] = S::one();
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn naive_conv(input: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (cin, h, w) = input.chw().unwrap();
        let cout = k.shape()[0];
        let mut out = Tensor::zeros(&[cout, h, w]);
        for o in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((o * cin + c) * 3 + ky) * 3 + kx]
                                    * input.data()[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::<f64>::new(&[2], vec![0.0, 0.0]).unwrap(), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f64>::new(&[2], vec![2.0, 0.0]).unwrap(), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        let s = softmax(&Tensor::<f32>::new(&[2], vec![1000.0, 0.0]).unwrap(), 1.0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.all_finite());
        assert!(softmax(&s, 0.0).is_err());
        assert!(softmax(&s, -1.0).is_err());
    }

    #[test]
    fn softmax_sums_to_one_per_pixel() {
        let mut rng = Rng::new(4);
        let z = Tensor::<f32>::from_fn(&[5, 3, 4], |_| rng.uniform_range(-30.0, 30.0) as f32);
        for t in [0.1, 1.0, 2.0, 50.0] {
            let p = softmax(&z, t).unwrap();
            for px in 0..12 {
                let s: f64 = (0..5).map(|c| p.data()[c * 12 + px] as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::from_fn(&[2, 4, 5], |_| rng.normal() as f32);
        let mut k = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        k.data_mut()[4] = 1.0; // (0,0,1,1)
        k.data_mut()[3 * 9 + 4] = 1.0; // (1,1,1,1)
        let y = conv2d(&x, &k, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn padding_arithmetic() {
        let x = Tensor::<f32>::full(&[1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = Rng::new(9);
        let x = Tensor::<f64>::from_fn(&[3, 5, 6], |_| rng.normal());
        let k = Tensor::<f64>::from_fn(&[4, 3, 3, 3], |_| rng.normal());
        let b = Tensor::<f64>::from_fn(&[4], |_| rng.normal());
        let fast = conv2d(&x, &k, &b).unwrap();
        let slow = naive_conv(&x, &k, &b);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 3, 3]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> and dW matches finite differences.
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::from_fn(&[2, 4, 3], |_| rng.normal());
        let k = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |_| rng.normal());
        let b = Tensor::<f64>::from_fn(&[3], |_| rng.normal());
        let g = Tensor::<f64>::from_fn(&[3, 4, 3], |_| rng.normal());
        let (y, cols) = conv3x3_forward(&x, &k, &b).unwrap();
        let mut gk = Tensor::zeros(k.shape());
        let mut gb = Tensor::zeros(b.shape());
        let gx = conv3x3_backward(&cols, &k, &g, &mut gk, &mut gb, true).unwrap();
        let loss = |y: &Tensor<f64>| y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>();
        let base = loss(&y);
        let eps = 1e-6;
        for i in [0, 7, 20, x.len() - 1] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let num = (loss(&conv2d(&xp, &k, &b).unwrap()) - base) / eps;
            assert!((num - gx.data()[i]).abs() < 1e-4);
        }
        for i in [0, 13, k.len() - 1] {
            let mut kp = k.clone();
            kp.data_mut()[i] += eps;
            let num = (loss(&conv2d(&x, &kp, &b).unwrap()) - base) / eps;
            assert!((num - gk.data()[i]).abs() < 1e-4);
        }
        let total: f64 = g.data()[12..24].iter().sum();
        assert!((gb.data()[1] - total).abs() < 1e-9);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::from_fn(&[2, 4, 6], |_| rng.normal());
        let g = Tensor::<f64>::from_fn(&[2, 2, 3], |_| rng.normal());
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&avg_pool2(&x).unwrap(), &g);
        let rhs = dot(&x, &avg_pool2_backward(&g));
        assert!((lhs - rhs).abs() < 1e-12);
        let u = upsample2(&g).unwrap();
        assert_eq!(u.shape(), &[2, 4, 6]);
        let lhs = dot(&u, &x);
        let rhs = dot(&g, &upsample2_backward(&x));
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(avg_pool2(&Tensor::<f64>::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for &x in &[-4.0f64, -0.5, 0.0, 0.3, 2.5] {
            let num = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn bilinear_halves_constant_and_gradient() {
        let x = Tensor::<f32>::full(&[2, 8, 8], 0.25);
        let y = resize_bilinear(&x, 4, 4).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let ramp = Tensor::<f64>::from_fn(&[1, 4, 4], |i| (i % 4) as f64);
        let y = resize_bilinear(&ramp, 2, 2).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12 && (y.data()[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_and_one_hot_round_trip() {
        let z = Tensor::<f32>::zeros(&[3, 2, 2]);
        assert_eq!(argmax_channels(&z).unwrap(), vec![0; 4]);
        let mask = vec![2, 0, 1, 2];
        let oh: Tensor<f32> = one_hot(&mask, 3, 2, 2).unwrap();
        assert_eq!(argmax_channels(&oh).unwrap(), mask);
        assert!(one_hot::<f32>(&[3], 3, 1, 1).is_err());
    }
}
