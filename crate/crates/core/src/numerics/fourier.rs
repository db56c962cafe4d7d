use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Complex 2-D DFT coefficients `F(u, v)` stored as split real/imaginary
/// planes, row-major over `(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn at(&self, u: usize, v: usize) -> (f64, f64) {
        let i = u * self.width + v;
        (self.re[i], self.im[i])
    }

    /// Mean of `|F(u, v)|^2` over all bins.
    pub fn mean_power(&self) -> f64 {
        let total: f64 = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum();
        total / self.re.len() as f64
    }
}

fn plane_dims<S: Scalar>(field: &Tensor<S>) -> Result<(usize, usize)> {
    match field.shape() {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        s => Err(Error::dim(format!("2-D field expected, got shape {s:?}"))),
    }
}

/// Unnormalized forward 2-D DFT, `F(u,v) = sum_{h,w} x(h,w) e^{-i2pi(uh/H + vw/W)}`.
///
/// Accepts `H x W` or `1 x H x W` input.
pub fn dft2<S: Scalar>(field: &Tensor<S>) -> Result<Spectrum> {
    let (h, w) = plane_dims(field)?;
    let mut buf: Vec<Complex64> = field
        .data()
        .iter()
        .map(|v| Complex64::new(v.as_f64(), 0.0))
        .collect();
    transform_2d(&mut buf, h, w, false);
    Ok(Spectrum {
        height: h,
        width: w,
        re: buf.iter().map(|c| c.re).collect(),
        im: buf.iter().map(|c| c.im).collect(),
    })
}

/// Inverse of [`dft2`] (normalized by `1 / (H W)`); returns the real part.
pub fn idft2(spec: &Spectrum) -> Tensor<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut buf: Vec<Complex64> = spec
        .re
        .iter()
        .zip(&spec.im)
        .map(|(&r, &i)| Complex64::new(r, i))
        .collect();
    transform_2d(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    Tensor::new(&[h, w], buf.iter().map(|c| c.re * norm).collect())
        .expect("spectrum dims are positive")
}

fn transform_2d(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Mean spectral power `E_{u,v}[F F*]` of a 2-D field.
pub fn mean_power<S: Scalar>(field: &Tensor<S>) -> Result<f64> {
    Ok(dft2(field)?.mean_power())
}
