//! Polynomial expansion: per-pixel quadratic fit
//! f(x) ≈ xᵀAx + bᵀx + c over a Gaussian-weighted neighborhood.
//!
//! With a separable Gaussian applicability the normal equations decouple:
//! only the moments {1, x, y, x², y², xy} against the signal are needed,
//! each computable with separable correlations, and the Gram matrix has a
//! closed-form inverse in terms of the 1D kernel moments.

use crate::error::{Error, Result};
use crate::imgproc::Plane;

/// Per-pixel expansion coefficients. A = [[axx, axy/2], [axy/2, ayy]],
/// b = (bx, by) with x along columns and y along rows, c the local offset.
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub width: usize,
    pub height: usize,
    pub bx: Vec<f32>,
    pub by: Vec<f32>,
    pub axx: Vec<f32>,
    pub axy: Vec<f32>,
    pub ayy: Vec<f32>,
    pub c: Vec<f32>,
}

impl PolyExpansion {
    /// A at pixel index i as (a11, a12, a22) of the symmetric 2×2 matrix.
    #[inline]
    pub fn a_at(&self, i: usize) -> (f32, f32, f32) {
        (self.axx[i], 0.5 * self.axy[i], self.ayy[i])
    }

    /// Bilinear sample of all five motion-relevant coefficients.
    pub fn sample(&self, fx: f32, fy: f32) -> (f32, f32, f32, f32, f32) {
        let lerp = |buf: &[f32]| -> f32 {
            let x0 = fx.floor();
            let y0 = fy.floor();
            let ax = fx - x0;
            let ay = fy - y0;
            let gx = |x: isize, y: isize| -> f32 {
                let xi = x.clamp(0, self.width as isize - 1) as usize;
                let yi = y.clamp(0, self.height as isize - 1) as usize;
                buf[yi * self.width + xi]
            };
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = gx(x0, y0) + (gx(x0 + 1, y0) - gx(x0, y0)) * ax;
            let bot = gx(x0, y0 + 1) + (gx(x0 + 1, y0 + 1) - gx(x0, y0 + 1)) * ax;
            top + (bot - top) * ay
        };
        (lerp(&self.bx), lerp(&self.by), lerp(&self.axx), lerp(&self.axy), lerp(&self.ayy))
    }
}

/// Gaussian applicability and its first/second moment kernels, plus the
/// scalars needed to invert the Gram matrix.
struct Applicability {
    g: Vec<f32>,
    xg: Vec<f32>,
    xxg: Vec<f32>,
    s2: f64,
    inv_s2: f64,
    inv_s2sq: f64,
    inv_d: f64,
}

fn applicability(n: usize, sigma: f64) -> Applicability {
    let r = (n / 2) as isize;
    let mut g: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    for v in &mut g {
        *v /= sum;
    }
    let mut s2 = 0.0f64;
    let mut s4 = 0.0f64;
    for (i, &gv) in g.iter().enumerate() {
        let x = (i as isize - r) as f64;
        s2 += x * x * gv;
        s4 += x * x * x * x * gv;
    }
    let d = s4 - s2 * s2;
    Applicability {
        xg: g.iter().enumerate().map(|(i, &gv)| ((i as isize - r) as f64 * gv) as f32).collect(),
        xxg: g
            .iter()
            .enumerate()
            .map(|(i, &gv)| (((i as isize - r) * (i as isize - r)) as f64 * gv) as f32)
            .collect(),
        g: g.into_iter().map(|v| v as f32).collect(),
        s2,
        inv_s2: 1.0 / s2,
        inv_s2sq: 1.0 / (s2 * s2),
        inv_d: 1.0 / d,
    }
}

/// Computes the quadratic expansion of `frame` over a Gaussian-weighted
/// neighborhood of odd side `n` with standard deviation `sigma`.
pub fn polynomial_expansion(frame: &Plane, n: usize, sigma: f64) -> Result<PolyExpansion> {
    if n % 2 == 0 {
        return Err(Error::config(format!("expansion neighborhood must be odd, got {n}")));
    }
    if sigma <= 0.0 {
        return Err(Error::config("expansion sigma must be positive"));
    }
    let app = applicability(n, sigma);
    let (w, h) = (frame.w, frame.h);
    let r = (n / 2) as isize;

    // Vertical pass: for each pixel, moments of the column neighborhood.
    // t0 = Σ g·f, t1 = Σ (y·g)·f, t2 = Σ (y²·g)·f.
    let mut t0 = Plane::new(w, h);
    let mut t1 = Plane::new(w, h);
    let mut t2 = Plane::new(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut a0, mut a1, mut a2) = (0.0f32, 0.0f32, 0.0f32);
            for i in 0..app.g.len() {
                let v = frame.get(x, y + i as isize - r);
                a0 += app.g[i] * v;
                a1 += app.xg[i] * v;
                a2 += app.xxg[i] * v;
            }
            t0.set(x as usize, y as usize, a0);
            t1.set(x as usize, y as usize, a1);
            t2.set(x as usize, y as usize, a2);
        }
    }

    // Horizontal pass: combine into the six signal moments, then solve the
    // decoupled normal equations per pixel.
    let npx = w * h;
    let mut out = PolyExpansion {
        width: w,
        height: h,
        bx: vec![0.0; npx],
        by: vec![0.0; npx],
        axx: vec![0.0; npx],
        axy: vec![0.0; npx],
        ayy: vec![0.0; npx],
        c: vec![0.0; npx],
    };
    let s2 = app.s2 as f32;
    let inv_s2 = app.inv_s2 as f32;
    let inv_s2sq = app.inv_s2sq as f32;
    let inv_d = app.inv_d as f32;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut m00, mut m10, mut m01, mut m20, mut m02, mut m11) =
                (0.0f32, 0.0f32, 0.0f32, 0.0f32, 0.0f32, 0.0f32);
            for j in 0..app.g.len() {
                let xx = x + j as isize - r;
                let v0 = t0.get(xx, y);
                let v1 = t1.get(xx, y);
                let v2 = t2.get(xx, y);
                m00 += app.g[j] * v0;
                m10 += app.xg[j] * v0;
                m01 += app.g[j] * v1;
                m20 += app.xxg[j] * v0;
                m02 += app.g[j] * v2;
                m11 += app.xg[j] * v1;
            }
            let i = y as usize * w + x as usize;
            let axx = (m20 - s2 * m00) * inv_d;
            let ayy = (m02 - s2 * m00) * inv_d;
            out.bx[i] = m10 * inv_s2;
            out.by[i] = m01 * inv_s2;
            out.axx[i] = axx;
            out.ayy[i] = ayy;
            out.axy[i] = m11 * inv_s2sq;
            out.c[i] = m00 - s2 * (axx + ayy);
        }
    }
    Ok(out)
}
