//! Single-channel image plane with the sampling, filtering, and PNG I/O
//! primitives shared by the optical-flow and data modules.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale f32 image, row-major. Out-of-range access replicates the edge
/// pixel (replicate padding), which is the border convention used by all
/// correlation passes here.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub w: usize,
    pub h: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(w: usize, h: usize) -> Self {
        Plane { w, h, data: vec![0.0; w * h] }
    }

    pub fn from_vec(w: usize, h: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != w * h {
            return Err(Error::dim(format!("plane {w}x{h} wants {} values, got {}", w * h, data.len())));
        }
        Ok(Plane { w, h, data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: isize, y: isize) -> f32 {
        let xi = x.clamp(0, self.w as isize - 1) as usize;
        let yi = y.clamp(0, self.h as isize - 1) as usize;
        self.data[yi * self.w + xi]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }

    /// Bilinear sample with replicate borders.
    pub fn sample(&self, fx: f32, fy: f32) -> f32 {
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = fx - x0;
        let ay = fy - y0;
        let x0 = x0 as isize;
        let y0 = y0 as isize;
        let v00 = self.get(x0, y0);
        let v10 = self.get(x0 + 1, y0);
        let v01 = self.get(x0, y0 + 1);
        let v11 = self.get(x0 + 1, y0 + 1);
        let top = v00 + (v10 - v00) * ax;
        let bot = v01 + (v11 - v01) * ax;
        top + (bot - top) * ay
    }
}

/// Normalized Gaussian kernel of odd length `size`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f32> {
    assert!(size % 2 == 1, "gaussian kernel size must be odd, got {size}");
    assert!(sigma > 0.0, "gaussian sigma must be positive");
    let r = (size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable correlation with the same 1D kernel in x then y, replicate
/// borders. For symmetric kernels this equals convolution.
pub fn separable_filter(src: &Plane, kernel: &[f32]) -> Plane {
    separable_filter2(src, kernel, kernel)
}

/// Separable correlation with distinct horizontal and vertical kernels.
pub fn separable_filter2(src: &Plane, kx: &[f32], ky: &[f32]) -> Plane {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let (w, h) = (src.w, src.h);
    let mut tmp = Plane::new(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0f32;
            for (i, &kv) in kx.iter().enumerate() {
                acc += kv * src.get(x + i as isize - rx, y);
            }
            tmp.set(x as usize, y as usize, acc);
        }
    }
    let mut out = Plane::new(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0f32;
            for (i, &kv) in ky.iter().enumerate() {
                acc += kv * tmp.get(x, y + i as isize - ry);
            }
            out.set(x as usize, y as usize, acc);
        }
    }
    out
}

pub fn gaussian_blur(src: &Plane, sigma: f64, size: usize) -> Plane {
    separable_filter(src, &gaussian_kernel(sigma, size))
}

/// Bilinear resize. Sample positions map pixel centers to pixel centers.
pub fn resize_bilinear(src: &Plane, new_w: usize, new_h: usize) -> Plane {
    assert!(new_w > 0 && new_h > 0);
    let mut out = Plane::new(new_w, new_h);
    let sx = src.w as f32 / new_w as f32;
    let sy = src.h as f32 / new_h as f32;
    for y in 0..new_h {
        let fy = (y as f32 + 0.5) * sy - 0.5;
        for x in 0..new_w {
            let fx = (x as f32 + 0.5) * sx - 0.5;
            out.set(x, y, src.sample(fx, fy));
        }
    }
    out
}

/// Rec. 601 luma from interleaved 8-bit RGB, scaled to [0,1].
pub fn luma_from_rgb8(w: usize, h: usize, rgb: &[u8]) -> Result<Plane> {
    if rgb.len() != w * h * 3 {
        return Err(Error::dim(format!("rgb buffer {}x{} wants {} bytes, got {}", w, h, w * h * 3, rgb.len())));
    }
    let data = rgb
        .chunks_exact(3)
        .map(|p| {
            (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0
        })
        .collect();
    Plane::from_vec(w, h, data)
}

pub fn write_png_rgb8(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::dim(format!("rgb buffer wants {} bytes, got {}", w * h * 3, rgb.len())));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(format!("png header: {e}")))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::format(format!("png payload: {e}")))?;
    Ok(())
}

/// Reads an 8-bit PNG as interleaved RGB, expanding grayscale and dropping
/// alpha as needed.
pub fn read_png_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(format!("png {}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::format("png too large"))?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(format!("png {}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(format!("expected 8-bit png, got {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w * h;
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf[..n * 3].to_vec(),
        png::ColorType::Rgba => {
            let mut out = Vec::with_capacity(n * 3);
            for p in buf[..n * 4].chunks_exact(4) {
                out.extend_from_slice(&p[..3]);
            }
            out
        }
        png::ColorType::Grayscale => {
            let mut out = Vec::with_capacity(n * 3);
            for &v in &buf[..n] {
                out.extend_from_slice(&[v, v, v]);
            }
            out
        }
        other => return Err(Error::format(format!("unsupported png color type {other:?}"))),
    };
    Ok((w, h, rgb))
}

pub fn write_png_gray16(path: &Path, w: usize, h: usize, gray: &[u16]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::dim(format!("gray buffer wants {} values, got {}", w * h, gray.len())));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(format!("png header: {e}")))?;
    let mut bytes = Vec::with_capacity(gray.len() * 2);
    for &v in gray {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(format!("png payload: {e}")))?;
    Ok(())
}

/// Reads a single-channel PNG (8- or 16-bit) as [0,1] floats.
pub fn read_png_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(format!("png {}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::format("png too large"))?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(format!("png {}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(format!("expected grayscale png, got {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w * h;
    let data = match info.bit_depth {
        png::BitDepth::Eight => buf[..n].iter().map(|&v| v as f32 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..n * 2]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f32 / 65535.0)
            .collect(),
        other => return Err(Error::format(format!("unsupported gray bit depth {other:?}"))),
    };
    Ok((w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replicate_border_sampling() {
        let p = Plane::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.get(-5, 0), 1.0);
        assert_eq!(p.get(5, 0), 2.0);
        assert_eq!(p.get(0, 9), 3.0);
        assert_eq!(p.sample(-3.0, -3.0), 1.0);
    }

    #[test]
    fn bilinear_sample_interpolates() {
        let p = Plane::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        assert!((p.sample(0.5, 0.0) - 0.5).abs() < 1e-6);
        assert!((p.sample(0.25, 0.0) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        let k = gaussian_kernel(1.5, 11);
        let sum: f32 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for i in 0..5 {
            assert!((k[i] - k[10 - i]).abs() < 1e-7);
        }
        assert!(k[5] > k[4]);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let p = Plane::from_vec(8, 6, vec![0.7; 48]).unwrap();
        let b = gaussian_blur(&p, 1.5, 7);
        for &v in b.data() {
            assert!((v - 0.7).abs() < 1e-5);
        }
    }

    #[test]
    fn resize_preserves_constant_and_extents() {
        let p = Plane::from_vec(10, 4, vec![0.25; 40]).unwrap();
        let r = resize_bilinear(&p, 7, 9);
        assert_eq!((r.w, r.h), (7, 9));
        for &v in r.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn luma_weights_match_rec601() {
        let p = luma_from_rgb8(1, 1, &[255, 0, 0]).unwrap();
        assert!((p.at(0, 0) - 0.299).abs() < 1e-6);
        let p = luma_from_rgb8(1, 1, &[0, 255, 0]).unwrap();
        assert!((p.at(0, 0) - 0.587).abs() < 1e-6);
        let p = luma_from_rgb8(1, 1, &[0, 0, 255]).unwrap();
        assert!((p.at(0, 0) - 0.114).abs() < 1e-6);
    }

    #[test]
    fn png_rgb8_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let rgb: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        write_png_rgb8(&path, 5, 3, &rgb).unwrap();
        let (w, h, back) = read_png_rgb8(&path).unwrap();
        assert_eq!((w, h), (5, 3));
        assert_eq!(back, rgb);
    }

    #[test]
    fn png_gray16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.png");
        let gray: Vec<u16> = (0..6 * 4).map(|i| (i * 2749 % 65536) as u16).collect();
        write_png_gray16(&path, 6, 4, &gray).unwrap();
        let (w, h, data) = read_png_gray(&path).unwrap();
        assert_eq!((w, h), (6, 4));
        for (f, &u) in data.iter().zip(&gray) {
            assert!((f - u as f32 / 65535.0).abs() < 1e-7);
        }
    }
}
