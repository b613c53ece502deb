//! Coarse-to-fine dense displacement estimation from polynomial expansions.
//!
//! Each pyramid level refines the flow by relating the two frames' local
//! quadratic models: with A the averaged curvature and db the corrected
//! linear-term difference, the per-pixel constraint A d = db is aggregated
//! over a Gaussian window into normal equations G d = h and solved in
//! closed form. Sampling frame 2's expansion at the warped position makes
//! the solve return the total displacement, not an increment.

use super::poly::{polynomial_expansion, PolyExpansion};
use super::{FlowField, FlowParams};
use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, gaussian_kernel, resize_bilinear, separable_filter, Plane};

/// Dense flow from `frame1` to `frame2`: content at (x, y) in `frame1`
/// appears at (x + u, y + v) in `frame2`.
pub fn farneback_flow(frame1: &Plane, frame2: &Plane, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if frame1.w != frame2.w || frame1.h != frame2.h {
        return Err(Error::dim(format!(
            "flow frames differ: {}x{} vs {}x{}",
            frame1.w, frame1.h, frame2.w, frame2.h
        )));
    }
    if frame1.w.min(frame1.h) < params.poly_n {
        return Err(Error::dim(format!(
            "flow frames {}x{} smaller than expansion neighborhood {}",
            frame1.w, frame1.h, params.poly_n
        )));
    }

    // Pyramid sizes, finest first; levels whose smaller side would drop
    // below the expansion neighborhood are skipped.
    let mut sizes = vec![(frame1.w, frame1.h)];
    for l in 1..params.levels {
        let s = params.scale.powi(l as i32);
        let w = (frame1.w as f64 * s).round() as usize;
        let h = (frame1.h as f64 * s).round() as usize;
        if w.min(h) < params.poly_n {
            break;
        }
        sizes.push((w, h));
    }

    let win = gaussian_kernel(params.win_sigma, params.win_size);
    let mut prev: Option<(Plane, Plane)> = None;
    for li in (0..sizes.len()).rev() {
        let (w, h) = sizes[li];
        let s = params.scale.powi(li as i32);
        let i1 = level_image(frame1, w, h, s);
        let i2 = level_image(frame2, w, h, s);
        let e1 = polynomial_expansion(&i1, params.poly_n, params.poly_sigma)?;
        let e2 = polynomial_expansion(&i2, params.poly_n, params.poly_sigma)?;

        let (mut u, mut v) = match prev.take() {
            None => (Plane::new(w, h), Plane::new(w, h)),
            Some((pu, pv)) => {
                // Upsampled displacements scale with the size ratio.
                let fx = w as f32 / pu.w as f32;
                let fy = h as f32 / pu.h as f32;
                let mut ru = resize_bilinear(&pu, w, h);
                let mut rv = resize_bilinear(&pv, w, h);
                for x in ru.data_mut() {
                    *x *= fx;
                }
                for x in rv.data_mut() {
                    *x *= fy;
                }
                (ru, rv)
            }
        };
        for _ in 0..params.iters {
            update_flow(&e1, &e2, &mut u, &mut v, &win);
        }
        prev = Some((u, v));
    }
    let (u, v) = prev.expect("at least one pyramid level");
    FlowField::from_parts(frame1.w, frame1.h, u.data().to_vec(), v.data().to_vec())
}

/// Level image: the source smoothed against aliasing and resampled to the
/// level size. The finest level still gets a light blur so the expansion
/// is not dominated by pixel noise.
fn level_image(src: &Plane, w: usize, h: usize, cumulative_scale: f64) -> Plane {
    if w == src.w && h == src.h {
        return gaussian_blur(src, 0.8, 5);
    }
    let sigma = ((1.0 / cumulative_scale - 1.0) * 0.5).max(0.3);
    let size = (((sigma * 5.0).round() as usize) | 1).max(3);
    resize_bilinear(&gaussian_blur(src, sigma, size), w, h)
}

/// One refinement sweep: rebuild the per-pixel normal equations around the
/// current displacement, aggregate with the window kernel, re-solve.
fn update_flow(e1: &PolyExpansion, e2: &PolyExpansion, u: &mut Plane, v: &mut Plane, win: &[f32]) {
    let (w, h) = (e1.width, e1.height);
    let mut g11 = Plane::new(w, h);
    let mut g12 = Plane::new(w, h);
    let mut g22 = Plane::new(w, h);
    let mut h1 = Plane::new(w, h);
    let mut h2 = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let du = u.data()[i];
            let dv = v.data()[i];
            let fx = (x as f32 + du).clamp(-1.0, w as f32);
            let fy = (y as f32 + dv).clamp(-1.0, h as f32);
            let (b2x, b2y, a2xx, a2xy, a2yy) = e2.sample(fx, fy);
            let a11 = 0.5 * (e1.axx[i] + a2xx);
            let a12 = 0.25 * (e1.axy[i] + a2xy);
            let a22 = 0.5 * (e1.ayy[i] + a2yy);
            let db1 = a11 * du + a12 * dv - 0.5 * (b2x - e1.bx[i]);
            let db2 = a12 * du + a22 * dv - 0.5 * (b2y - e1.by[i]);
            g11.data_mut()[i] = a11 * a11 + a12 * a12;
            g12.data_mut()[i] = a12 * (a11 + a22);
            g22.data_mut()[i] = a12 * a12 + a22 * a22;
            h1.data_mut()[i] = a11 * db1 + a12 * db2;
            h2.data_mut()[i] = a12 * db1 + a22 * db2;
        }
    }
    let g11 = separable_filter(&g11, win);
    let g12 = separable_filter(&g12, win);
    let g22 = separable_filter(&g22, win);
    let h1 = separable_filter(&h1, win);
    let h2 = separable_filter(&h2, win);
    for i in 0..w * h {
        let a = g11.data()[i] as f64;
        let b = g12.data()[i] as f64;
        let c = g22.data()[i] as f64;
        let p = h1.data()[i] as f64;
        let q = h2.data()[i] as f64;
        let det = a * c - b * b;
        // Near-singular systems (textureless windows) keep the current
        // estimate instead of amplifying noise.
        if det.abs() < 1e-12 {
            continue;
        }
        let nu = ((c * p - b * q) / det) as f32;
        let nv = ((a * q - b * p) / det) as f32;
        if nu.is_finite() && nv.is_finite() && nu.abs() <= w as f32 && nv.abs() <= h as f32 {
            u.data_mut()[i] = nu;
            v.data_mut()[i] = nv;
        }
    }
}
