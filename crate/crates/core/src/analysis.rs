//! Evaluation metrics (MSE, MAE, SSIM) and the latent-perturbation
//! robustness protocol: perturb each latent dimension both ways, roll the
//! temporal head on the perturbed sequence, and score the influence of
//! every dimension on the steering output.

use crate::encoders::LATENT;
use crate::error::{Error, Result};
use crate::model::{encode_step, EncoderKind, ModelConfig};
use crate::params::{BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::temporal::rollout;
use crate::tensor::Tensor;
use crate::training::BatchSource;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
pub const ALP_SIGMA: f64 = 0.3;
/// Fraction of highest-error samples kept for the focused impact view.
pub const TOP_ERROR_FRAC: f64 = 0.10;

/// Mean squared error between equal-length vectors.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean absolute error between equal-length vectors.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::dim(format!(
            "need equal nonzero lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean and population standard deviation, for fold-table aggregates.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::data("aggregate over an empty slice"));
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    Ok((mean, var.max(0.0).sqrt()))
}

// ---------------------------------------------------------------------------
// SSIM.

fn gaussian_weights(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut w: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

struct SsimImage {
    channels: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

fn ssim_image<T: Scalar>(t: &Tensor<T>, l: f64, what: &str) -> Result<SsimImage> {
    let s = t.shape();
    let (channels, h, w) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::dim(format!("{what} wants [H,W] or [C,H,W], got {s:?}"))),
    };
    let data: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    if data.iter().any(|&v| !v.is_finite() || v < -1e-9 || v > l + 1e-9) {
        return Err(Error::data(format!("{what} has values outside [0,{l}]")));
    }
    Ok(SsimImage { channels, h, w, data })
}

/// Structural similarity over Gaussian-weighted local windows, averaged
/// across all fully-interior window centers and across channels. Returns a
/// value in [-1,1]; identical inputs give exactly 1.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, 1.0)
}

/// SSIM with an explicit window size and dynamic range.
pub fn ssim_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, window: usize, l: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "ssim wants equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::config(format!("ssim window must be odd, got {window}")));
    }
    if !(l > 0.0) {
        return Err(Error::config(format!("dynamic range must be positive, got {l}")));
    }
    let x = ssim_image(a, l, "first image")?;
    let y = ssim_image(b, l, "second image")?;
    if x.h < window || x.w < window {
        return Err(Error::dim(format!(
            "image {}x{} smaller than the {window}-pixel window",
            x.w, x.h
        )));
    }
    let weights = gaussian_weights(window, SSIM_SIGMA);
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);
    let half = window / 2;
    let (h, w) = (x.h, x.w);
    let plane = h * w;

    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..x.channels {
        let xp = &x.data[c * plane..(c + 1) * plane];
        let yp = &y.data[c * plane..(c + 1) * plane];
        for cy in half..h - half {
            for cx in half..w - half {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                for dy in 0..window {
                    let row = (cy + dy - half) * w + cx - half;
                    let wy = weights[dy];
                    for dx in 0..window {
                        let g = wy * weights[dx];
                        let xv = xp[row + dx];
                        let yv = yp[row + dx];
                        mx += g * xv;
                        my += g * yv;
                        // Grouped as g*(x*y) throughout: bitwise symmetric
                        // in x and y, and identical images give cov == vx.
                        mxx += g * (xv * xv);
                        myy += g * (yv * yv);
                        mxy += g * (xv * yv);
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                // Grouped as 2*(mx*my) so the result is bitwise symmetric.
                total += ((2.0 * (mx * my) + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Renders a normalized flow field [2,H,W] to a grayscale image [H,W] in
/// [0,1]: the direction picks a color-wheel hue, the magnitude blends it
/// into white, and the result is collapsed to luma. Zero flow maps to 1.
pub fn flow_to_gray<T: Scalar>(flow: &Tensor<T>) -> Result<Tensor<T>> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::dim(format!("flow_to_gray wants [2,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = flow.data();
    let mut out = Vec::with_capacity(plane);
    for i in 0..plane {
        let u = d[i].as_f64();
        let v = d[plane + i].as_f64();
        let m = (u * u + v * v).sqrt() / std::f64::consts::SQRT_2;
        let m = m.clamp(0.0, 1.0);
        let h = (v.atan2(u) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * 6.0;
        let (r, g, b) = hue_rgb(h.min(6.0 - 1e-12));
        // 1 - m*(…) form keeps zero flow at exactly 1.
        let luma = 1.0 - m * (0.299 * (1.0 - r) + 0.587 * (1.0 - g) + 0.114 * (1.0 - b));
        out.push(T::from_f64(luma.clamp(0.0, 1.0)));
    }
    Tensor::from_vec(&[s[1], s[2]], out)
}

/// Fully saturated color-wheel RGB for a hue in [0,6).
fn hue_rgb(h: f64) -> (f64, f64, f64) {
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    }
}

// ---------------------------------------------------------------------------
// Latent perturbation.

/// Basis perturbation of coordinate `j` in the last axis: z + sigma*e_j and
/// z - sigma*e_j. Rank-2 inputs are treated as a sequence of latent rows
/// and every row is perturbed.
pub fn alp_perturb<T: Scalar>(
    z: &Tensor<T>,
    j: usize,
    sigma: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = z.shape();
    let dim = *s.last().ok_or_else(|| Error::dim("alp_perturb wants a nonempty shape"))?;
    if j >= dim {
        return Err(Error::dim(format!("latent index {j} out of range for dimension {dim}")));
    }
    let step = T::from_f64(sigma);
    let mut plus = z.clone();
    let mut minus = z.clone();
    for (p, m) in plus
        .data_mut()
        .iter_mut()
        .zip(minus.data_mut())
        .skip(j)
        .step_by(dim)
    {
        *p = *p + step;
        *m = *m - step;
    }
    Ok((plus, minus))
}

/// Influence of one latent dimension on the prediction: the mean of the
/// three pairwise absolute differences among the positively perturbed,
/// negatively perturbed, and unperturbed outputs.
pub fn impact_score(y_plus: f64, y_minus: f64, y_base: f64) -> f64 {
    ((y_plus - y_base).abs() + (y_minus - y_base).abs() + (y_plus - y_minus).abs()) / 3.0
}

/// Linear-interpolation quantile of an ascending-sorted slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty() && (0.0..=1.0).contains(&p));
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box-plot summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveNum {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn five_number(xs: &[f64]) -> Result<FiveNum> {
    if xs.is_empty() {
        return Err(Error::data("five-number summary of an empty sample"));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    Ok(FiveNum {
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// Indices of the `frac` highest values, largest first, ties broken by
/// index. Always returns at least one index for a nonempty input.
pub fn top_fraction_indices(errors: &[f64], frac: f64) -> Vec<usize> {
    if errors.is_empty() {
        return Vec::new();
    }
    let k = ((errors.len() as f64 * frac) as usize).max(1);
    let mut idx: Vec<usize> = (0..errors.len()).collect();
    idx.sort_by(|&a, &b| {
        errors[b]
            .partial_cmp(&errors[a])
            .expect("non-finite error")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Per-dimension prediction error under perturbation.
#[derive(Debug, Clone, Copy)]
pub struct AlpRow {
    pub dim: usize,
    pub mse_plus: f64,
    pub mse_minus: f64,
}

/// Outcome of the full perturbation protocol over one evaluation fold.
/// Samples are individual predictions, indexed window-major by timestep.
#[derive(Debug)]
pub struct AlpReport {
    pub sigma: f64,
    pub mse_unperturbed: f64,
    /// One row per latent dimension, in dimension order.
    pub rows: Vec<AlpRow>,
    /// impacts[j][sample]: impact of dimension j on each prediction.
    pub impacts: Vec<Vec<f64>>,
    /// Samples in the top error decile, highest unperturbed error first.
    pub top_indices: Vec<usize>,
}

impl AlpReport {
    /// Impact values of dimension `j` restricted to the top-error subset.
    pub fn top_impacts(&self, j: usize) -> Vec<f64> {
        self.top_indices.iter().map(|&s| self.impacts[j][s]).collect()
    }
}

/// Runs the perturbation protocol: encode every window to its posterior
/// mean sequence, then for each latent dimension perturb the whole
/// sequence both ways and re-roll the temporal head.
pub fn alp_report<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    src: &dyn BatchSource<T>,
    sigma: f64,
) -> Result<AlpReport> {
    cfg.validate()?;
    if cfg.encoder != EncoderKind::Vae {
        return Err(Error::config(
            "latent perturbation needs a variational encoder checkpoint",
        ));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::config(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let n = src.num_windows();
    let s_len = src.seq_len();
    if n == 0 || s_len == 0 {
        return Err(Error::data("perturbation run over an empty fold"));
    }
    if src.modality_channels() != cfg.modality.channels() {
        return Err(Error::config(format!(
            "source carries {} modality channels, model wants {}",
            src.modality_channels(),
            cfg.modality.channels()
        )));
    }

    // Pass 1: posterior-mean sequences and labels for every window.
    let mut mus: Vec<Tensor<T>> = Vec::with_capacity(n);
    let mut labels: Vec<Vec<f64>> = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for ids in all.chunks(4) {
        let batch = src.batch(ids)?;
        let mut chunk_mu = vec![Vec::with_capacity(s_len * LATENT); ids.len()];
        let mut chunk_y = vec![Vec::with_capacity(s_len); ids.len()];
        for t in 0..s_len {
            let mut tape: Tape<T> = Tape::new();
            let bp = BoundParams::bind(&mut tape, params);
            let (feat, _) =
                encode_step(&mut tape, &bp, cfg, &batch.rgb[t], batch.modality.as_ref().map(|m| &m[t]), None)?;
            let mu = tape.value(feat);
            if !mu.all_finite() {
                return Err(Error::numeric("non-finite latent during perturbation run"));
            }
            let md = mu.data();
            let yd = batch.labels[t].data();
            for row in 0..ids.len() {
                chunk_mu[row].extend_from_slice(&md[row * LATENT..(row + 1) * LATENT]);
                chunk_y[row].push(yd[row].as_f64());
            }
        }
        for (mu_rows, y_rows) in chunk_mu.into_iter().zip(chunk_y) {
            mus.push(Tensor::from_vec(&[s_len, LATENT], mu_rows)?);
            labels.push(y_rows);
        }
    }

    // Pass 2: one shared tape per window carries the base rollout and all
    // 2*LATENT perturbed rollouts; only values are read.
    let samples = n * s_len;
    let mut base: Vec<f64> = Vec::with_capacity(samples);
    let mut impacts = vec![vec![0.0f64; samples]; LATENT];
    let mut sq_plus = vec![0.0f64; LATENT];
    let mut sq_minus = vec![0.0f64; LATENT];
    let mut sq_base = 0.0f64;
    for w in 0..n {
        let mut tape: Tape<T> = Tape::new();
        let bp = BoundParams::bind(&mut tape, params);
        let y0: Vec<f64> = rollout(&mut tape, &bp, cfg.head, &mus[w])?
            .iter()
            .map(|&v| tape.value(v).item().as_f64())
            .collect();
        for (t, &y) in y0.iter().enumerate() {
            let e = y - labels[w][t];
            sq_base += e * e;
            base.push(y);
        }
        for j in 0..LATENT {
            let (zp, zm) = alp_perturb(&mus[w], j, sigma)?;
            let yp: Vec<f64> = rollout(&mut tape, &bp, cfg.head, &zp)?
                .iter()
                .map(|&v| tape.value(v).item().as_f64())
                .collect();
            let ym: Vec<f64> = rollout(&mut tape, &bp, cfg.head, &zm)?
                .iter()
                .map(|&v| tape.value(v).item().as_f64())
                .collect();
            for t in 0..s_len {
                let ep = yp[t] - labels[w][t];
                let em = ym[t] - labels[w][t];
                sq_plus[j] += ep * ep;
                sq_minus[j] += em * em;
                impacts[j][w * s_len + t] = impact_score(yp[t], ym[t], y0[t]);
            }
        }
    }

    let mse_unperturbed = sq_base / samples as f64;
    let rows = (0..LATENT)
        .map(|j| AlpRow {
            dim: j,
            mse_plus: sq_plus[j] / samples as f64,
            mse_minus: sq_minus[j] / samples as f64,
        })
        .collect();
    let errors: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let e = y - labels[i / s_len][i % s_len];
            e * e
        })
        .collect();
    let top_indices = top_fraction_indices(&errors, TOP_ERROR_FRAC);
    Ok(AlpReport { sigma, mse_unperturbed, rows, impacts, top_indices })
}

/// CSV of per-dimension MSE under perturbation.
pub fn format_alp_mse_csv(report: &AlpReport) -> String {
    let mut out = String::from("dim,mse_plus,mse_minus,mse_unperturbed\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.dim, row.mse_plus, row.mse_minus, report.mse_unperturbed
        ));
    }
    out
}

/// CSV of per-dimension impact distributions, over all samples and over
/// the top error decile.
pub fn format_alp_impact_csv(report: &AlpReport) -> String {
    let mut out = String::from(
        "dim,mean,min,q1,median,q3,max,top_mean,top_min,top_q1,top_median,top_q3,top_max\n",
    );
    for j in 0..report.impacts.len() {
        let all = &report.impacts[j];
        let top = report.top_impacts(j);
        let (mean, _) = mean_std(all).expect("report holds at least one sample");
        let f = five_number(all).expect("report holds at least one sample");
        let (tmean, _) = mean_std(&top).expect("top subset is nonempty");
        let tf = five_number(&top).expect("top subset is nonempty");
        out.push_str(&format!(
            "{j},{mean},{},{},{},{},{},{tmean},{},{},{},{},{}\n",
            f.min, f.q1, f.median, f.q3, f.max, tf.min, tf.q1, tf.median, tf.q3, tf.max
        ));
    }
    out
}
