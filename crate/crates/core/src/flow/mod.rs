//! Dense two-frame optical flow (Farneback) and the `.flo` file format.

mod farneback;
mod flo;
mod poly;

pub use farneback::farneback_flow;
pub use flo::{read_flo, write_flo};
pub use poly::{polynomial_expansion, PolyExpansion};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel displacement field between two frames, in pixels. `u` is the
/// horizontal (column) component, `v` the vertical (row) component.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField { width, height, u: vec![0.0; width * height], v: vec![0.0; width * height] }
    }

    pub fn from_parts(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::dim(format!(
                "flow {width}x{height} wants {} values per channel, got {}/{}",
                width * height,
                u.len(),
                v.len()
            )));
        }
        Ok(FlowField { width, height, u, v })
    }

    pub fn all_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|v| v.is_finite())
    }

    /// Largest absolute component over both channels.
    pub fn max_abs(&self) -> f32 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// Pyramid and aggregation parameters for `farneback_flow`.
#[derive(Debug, Clone, Copy)]
pub struct FlowParams {
    /// Pyramid levels, >= 1 (1 = no pyramid).
    pub levels: usize,
    /// Per-level downscale factor in (0,1).
    pub scale: f64,
    /// Side of the Gaussian aggregation window (odd).
    pub win_size: usize,
    /// Sigma of the aggregation window.
    pub win_sigma: f64,
    /// Side of the polynomial-expansion neighborhood (odd).
    pub poly_n: usize,
    /// Sigma of the expansion applicability.
    pub poly_sigma: f64,
    /// Refinement iterations per level.
    pub iters: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            levels: 3,
            scale: 0.5,
            win_size: 11,
            win_sigma: 1.5,
            poly_n: 7,
            poly_sigma: 1.5,
            iters: 3,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("flow: levels must be >= 1"));
        }
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return Err(Error::config(format!("flow: scale must be in (0,1), got {}", self.scale)));
        }
        if self.win_size % 2 == 0 {
            return Err(Error::config(format!("flow: window size must be odd, got {}", self.win_size)));
        }
        if self.poly_n % 2 == 0 {
            return Err(Error::config(format!(
                "flow: expansion neighborhood must be odd, got {}",
                self.poly_n
            )));
        }
        if self.win_sigma <= 0.0 || self.poly_sigma <= 0.0 {
            return Err(Error::config("flow: sigmas must be positive"));
        }
        if self.iters < 1 {
            return Err(Error::config("flow: iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Scales flow into the model-input range: clamp(flow / divisor, -1, 1),
/// stacked as a 2-channel tensor [2, H, W] (u first).
pub fn normalize_flow<T: Scalar>(flow: &FlowField, divisor: f64) -> Result<Tensor<T>> {
    if divisor <= 0.0 {
        return Err(Error::config(format!("flow divisor must be positive, got {divisor}")));
    }
    let inv = 1.0 / divisor;
    let mut data = Vec::with_capacity(2 * flow.u.len());
    for &x in flow.u.iter().chain(&flow.v) {
        data.push(T::from_f64((x as f64 * inv).clamp(-1.0, 1.0)));
    }
    Tensor::from_vec(&[2, flow.height, flow.width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_zero_flow_is_zero() {
        let f = FlowField::zeros(4, 3);
        let t: Tensor<f32> = normalize_flow(&f, 20.0).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_divides_and_clamps() {
        let mut f = FlowField::zeros(1, 1);
        f.u[0] = 10.0;
        let t: Tensor<f32> = normalize_flow(&f, 20.0).unwrap();
        assert_eq!(t.data()[0], 0.5);

        f.u[0] = 100.0;
        f.v[0] = -70.0;
        let t: Tensor<f32> = normalize_flow(&f, 20.0).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], -1.0);
    }

    #[test]
    fn normalize_rejects_bad_divisor() {
        let f = FlowField::zeros(1, 1);
        assert!(normalize_flow::<f32>(&f, 0.0).is_err());
        assert!(normalize_flow::<f32>(&f, -3.0).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(FlowParams::default().validate().is_ok());
        assert!(FlowParams { levels: 0, ..Default::default() }.validate().is_err());
        assert!(FlowParams { scale: 1.0, ..Default::default() }.validate().is_err());
        assert!(FlowParams { win_size: 10, ..Default::default() }.validate().is_err());
        assert!(FlowParams { poly_n: 6, ..Default::default() }.validate().is_err());
    }
}
