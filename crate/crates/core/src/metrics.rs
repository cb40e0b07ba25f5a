//! PSNR and SSIM on the BT.601 luma channel.

use crate::data::Image;
use crate::error::{Error, Result};

/// Single-channel image in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("plane", format!("{} samples for {width}x{height}", data.len())));
        }
        Ok(Plane { width, height, data })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Removes `shave` pixels from every side.
    pub fn shave(&self, shave: usize) -> Result<Plane> {
        if 2 * shave >= self.width || 2 * shave >= self.height {
            return Err(Error::invalid(
                "shave",
                format!("border {shave} leaves nothing of {}x{}", self.width, self.height),
            ));
        }
        let (w, h) = (self.width - 2 * shave, self.height - 2 * shave);
        let data = (shave..shave + h)
            .flat_map(|y| (shave..shave + w).map(move |x| (x, y)))
            .map(|(x, y)| self.at(x, y))
            .collect();
        Plane::new(w, h, data)
    }
}

/// `Y = 16 + 65.481·R + 128.553·G + 24.966·B` for `R, G, B ∈ [0, 1]`.
pub fn luma(rgb: [f64; 3]) -> f64 {
    16.0 + 65.481 * rgb[0] + 128.553 * rgb[1] + 24.966 * rgb[2]
}

pub fn rgb_to_y(img: &Image) -> Plane {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| luma([p[0], p[1], p[2]].map(|v| f64::from(v) / 255.0)))
        .collect();
    Plane {
        width: img.width,
        height: img.height,
        data,
    }
}

fn check_dims(op: &'static str, a: &Plane, b: &Plane) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            op,
            "image",
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

/// `10·log10(255² / MSE)` after shaving; `+∞` for identical inputs.
pub fn psnr(a: &Plane, b: &Plane, shave: usize) -> Result<f64> {
    check_dims("psnr", a, b)?;
    let (a, b) = (a.shave(shave)?, b.shave(shave)?);
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 255.0;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(p: &Plane, taps: &[f64]) -> Plane {
    let k = taps.len();
    let (w, h) = (p.width - k + 1, p.height - k + 1);
    let mut horiz = vec![0.0; w * p.height];
    for y in 0..p.height {
        for x in 0..w {
            horiz[y * w + x] = taps.iter().enumerate().map(|(i, t)| t * p.at(x + i, y)).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps.iter().enumerate().map(|(i, t)| t * horiz[(y + i) * w + x]).sum();
        }
    }
    Plane {
        width: w,
        height: h,
        data: out,
    }
}

/// Mean SSIM over all valid 11x11 Gaussian windows.
pub fn ssim(a: &Plane, b: &Plane, shave: usize) -> Result<f64> {
    check_dims("ssim", a, b)?;
    let (a, b) = (a.shave(shave)?, b.shave(shave)?);
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("{}x{} after shaving is smaller than the window", a.width, a.height),
        ));
    }
    let taps = gaussian_window();
    let prod = |f: fn(f64, f64) -> f64| Plane {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    };
    let mu_a = filter_valid(&a, &taps);
    let mu_b = filter_valid(&b, &taps);
    let e_aa = filter_valid(&prod(|x, _| x * x), &taps);
    let e_bb = filter_valid(&prod(|_, y| y * y), &taps);
    let e_ab = filter_valid(&prod(|x, y| x * y), &taps);
    let (c1, c2) = ((K1 * L).powi(2), (K2 * L).powi(2));
    let n = mu_a.data.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let va = e_aa.data[i] - ma * ma;
            let vb = e_bb.data[i] - mb * mb;
            let cov = e_ab.data[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn psnr_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    psnr(&rgb_to_y(a), &rgb_to_y(b), shave)
}

pub fn ssim_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    ssim(&rgb_to_y(a), &rgb_to_y(b), shave)
}

/// `inf` for the identical-image sentinel, otherwise fixed 4 decimals.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> Plane {
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| 128.0 + 60.0 * ((x as f64 * 0.7).sin() * (y as f64 * 0.3).cos()))
            .collect();
        Plane::new(w, h, data).unwrap()
    }

    #[test]
    fn luma_reference_points() {
        assert!((luma([1.0, 1.0, 1.0]) - 235.0).abs() < 1e-12);
        assert_eq!(luma([0.0, 0.0, 0.0]), 16.0);
        assert!((luma([0.0, 1.0, 0.0]) - 144.553).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        let a = textured(20, 20);
        let b = Plane::new(20, 20, a.data.iter().map(|v| v + 1.0).collect()).unwrap();
        let expected = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b, 2).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 48.1308).abs() < 1e-4);
        assert_eq!(psnr(&a, &a, 0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_symmetric_and_monotone() {
        let a = textured(16, 16);
        let small = Plane::new(16, 16, a.data.iter().map(|v| v + 2.0).collect()).unwrap();
        let big = Plane::new(16, 16, a.data.iter().map(|v| v - 5.0).collect()).unwrap();
        assert_eq!(psnr(&a, &small, 0).unwrap(), psnr(&small, &a, 0).unwrap());
        assert!(psnr(&a, &small, 0).unwrap() > psnr(&a, &big, 0).unwrap());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = textured(32, 32);
        assert!((ssim(&a, &a, 0).unwrap() - 1.0).abs() < 1e-12);
        let inv = Plane::new(32, 32, a.data.iter().map(|v| 256.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv, 0).unwrap() < 0.0);
        assert!((ssim(&a, &inv, 0).unwrap() - ssim(&inv, &a, 0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(psnr(&textured(12, 12), &textured(12, 13), 0).is_err());
        assert!(ssim(&textured(12, 12), &textured(13, 12), 0).is_err());
        assert!(ssim(&textured(12, 12), &textured(12, 12), 1).is_err());
    }

    #[test]
    fn sentinel_formatting() {
        assert_eq!(format_db(f64::INFINITY), "inf");
        assert_eq!(format_db(48.130803), "48.1308");
    }
}
