//! Images, bicubic resampling, BI/BD degradation and training patches.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dihedral, Shape, Tensor};

/// 8-bit RGB raster, interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Planar RGB with samples nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    /// Three planes of `width * height` samples.
    pub data: Vec<f32>,
}

pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Image {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_float(&self) -> FloatImage {
        let plane = self.width * self.height;
        let mut data = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f32::from(px[c]) / 255.0;
            }
        }
        FloatImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Image(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Image::new(w, h, data)
    }

    /// Largest top-left crop whose dimensions are multiples of `r`.
    pub fn crop_to_multiple(&self, r: usize) -> Result<Image> {
        self.crop(0, 0, self.width / r * r, self.height / r * r)
    }
}

impl FloatImage {
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.plane_len()..(c + 1) * self.plane_len()]
    }

    /// Rounds to 8 bits, clamping to `[0, 255]`.
    pub fn to_image(&self) -> Image {
        let plane = self.plane_len();
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                data.push(quantize(self.data[c * plane + i]));
            }
        }
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// `(1, 3, h, w)` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(Shape::new(1, 3, self.height, self.width), self.data.clone()).expect("image dims")
    }

    /// Batch item `n` of a 3-channel tensor.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<FloatImage> {
        let s = t.shape();
        if s.c != 3 || n >= s.n {
            return Err(Error::Image(format!("cannot take RGB item {n} of {s}")));
        }
        Ok(FloatImage {
            width: s.w,
            height: s.h,
            data: t.item(n).into_data(),
        })
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<FloatImage> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Image(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for c in 0..3 {
            let plane = self.plane(c);
            for row in y..y + h {
                data.extend_from_slice(&plane[row * self.width + x..row * self.width + x + w]);
            }
        }
        Ok(FloatImage {
            width: w,
            height: h,
            data,
        })
    }

    pub fn transform(&self, d: Dihedral) -> FloatImage {
        FloatImage::from_tensor(&d.apply(&self.to_tensor()), 0).expect("rgb")
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::new(w as usize, h as usize, img.into_raw())
}

/// Writes PNG, or binary PPM when the extension is `.ppm`.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::Image("buffer size".into()))?;
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        buf.save_with_format(path, image::ImageFormat::Pnm)?;
    } else {
        buf.save_with_format(path, image::ImageFormat::Png)?;
    }
    Ok(())
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Image("buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        (1.5 * ax - 2.5) * ax * ax + 1.0
    } else if ax < 2.0 {
        ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0
    } else {
        0.0
    }
}

/// Source indices and normalized weights for each output sample along one
/// axis.
fn contributions(in_len: usize, out_len: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = out_len as f64 / in_len as f64;
    // widen the kernel when shrinking so it low-passes before sampling
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let taps = width.ceil() as isize + 2;
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let left = (u - width / 2.0).floor() as isize;
            let mut idx = Vec::with_capacity(taps as usize);
            let mut wts = Vec::with_capacity(taps as usize);
            for j in left..left + taps {
                let w = kscale * cubic(kscale * (u - j as f64));
                if w != 0.0 {
                    idx.push(j.clamp(0, in_len as isize - 1) as usize);
                    wts.push(w);
                }
            }
            let sum: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= sum);
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resampling (`a = −0.5`), antialiased when shrinking,
/// with clamped borders.
pub fn bicubic_resize(img: &FloatImage, out_w: usize, out_h: usize) -> Result<FloatImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("bicubic_resize", "target dimensions must be positive"));
    }
    let cols = contributions(img.width, out_w);
    let rows = contributions(img.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    let mut tmp = vec![0.0f64; img.height * out_w];
    for c in 0..3 {
        let src = img.plane(c);
        for y in 0..img.height {
            let line = &src[y * img.width..(y + 1) * img.width];
            for (x, (idx, wts)) in cols.iter().enumerate() {
                tmp[y * out_w + x] = idx.iter().zip(wts).map(|(&i, &w)| w * f64::from(line[i])).sum();
            }
        }
        for (idx, wts) in &rows {
            for x in 0..out_w {
                let v: f64 = idx.iter().zip(wts).map(|(&i, &w)| w * tmp[i * out_w + x]).sum();
                data.push(v as f32);
            }
        }
    }
    Ok(FloatImage {
        width: out_w,
        height: out_h,
        data,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    /// Bicubic downsampling.
    Bi,
    /// Gaussian blur followed by direct subsampling.
    Bd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub scale: usize,
}

pub const BD_KERNEL_SIZE: usize = 7;
pub const BD_SIGMA: f64 = 1.6;

impl DegradationSpec {
    pub fn bicubic(scale: usize) -> Self {
        DegradationSpec {
            kind: DegradationKind::Bi,
            scale,
        }
    }

    pub fn blur_down(scale: usize) -> Self {
        DegradationSpec {
            kind: DegradationKind::Bd,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::invalid("degrade", "scale must be positive"));
        }
        if self.kind == DegradationKind::Bd && self.scale != 3 {
            return Err(Error::invalid("degrade", "BD degradation is defined for x3 only"));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

pub fn bd_kernel() -> Vec<f64> {
    let taps = gaussian_taps(BD_KERNEL_SIZE, BD_SIGMA);
    taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).collect()
}

/// Mirror index for symmetric borders (`… b a | a b …`).
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn gaussian_blur(img: &FloatImage) -> FloatImage {
    let taps = gaussian_taps(BD_KERNEL_SIZE, BD_SIGMA);
    let half = (BD_KERNEL_SIZE / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut out = Vec::with_capacity(img.data.len());
    let mut tmp = vec![0.0f64; w * h];
    for c in 0..3 {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * f64::from(src[y * w + reflect(x as isize + k as isize - half, w)]))
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * tmp[reflect(y as isize + k as isize - half, h) * w + x])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    FloatImage {
        width: w,
        height: h,
        data: out,
    }
}

/// Produces the 8-bit LR counterpart of an HR image whose dimensions are
/// multiples of the scale.
pub fn degrade(hr: &Image, spec: &DegradationSpec) -> Result<Image> {
    spec.validate()?;
    let r = spec.scale;
    if hr.width % r != 0 || hr.height % r != 0 {
        return Err(Error::invalid(
            "degrade",
            format!("{}x{} is not a multiple of {r}; crop first", hr.width, hr.height),
        ));
    }
    let (lw, lh) = (hr.width / r, hr.height / r);
    let f = hr.to_float();
    let lr = match spec.kind {
        DegradationKind::Bi => bicubic_resize(&f, lw, lh)?,
        DegradationKind::Bd => {
            let blurred = gaussian_blur(&f);
            let mut data = Vec::with_capacity(lw * lh * 3);
            for c in 0..3 {
                let plane = blurred.plane(c);
                for y in 0..lh {
                    for x in 0..lw {
                        data.push(plane[r * y * hr.width + r * x]);
                    }
                }
            }
            FloatImage {
                width: lw,
                height: lh,
                data,
            }
        }
    };
    Ok(lr.to_image())
}

/// Bicubic upscaling baseline, quantized to 8 bits.
pub fn bicubic_upscale(lr: &Image, r: usize) -> Result<Image> {
    Ok(bicubic_resize(&lr.to_float(), lr.width * r, lr.height * r)?.to_image())
}

/// Aligned LR/HR training crops.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: FloatImage,
    pub hr: FloatImage,
    pub source: usize,
    pub lr_offset: (usize, usize),
    pub hr_offset: (usize, usize),
}

/// An HR image with its degraded counterpart, cropped to a multiple of the
/// scale.
#[derive(Clone, Debug)]
pub struct AlignedPair {
    pub lr: FloatImage,
    pub hr: FloatImage,
    pub scale: usize,
}

impl AlignedPair {
    pub fn from_hr(hr: &Image, spec: &DegradationSpec) -> Result<Self> {
        let hr = hr.crop_to_multiple(spec.scale)?;
        let lr = degrade(&hr, spec)?;
        Ok(AlignedPair {
            lr: lr.to_float(),
            hr: hr.to_float(),
            scale: spec.scale,
        })
    }

    pub fn crop(&self, source: usize, x: usize, y: usize, p: usize) -> Result<PatchPair> {
        let r = self.scale;
        Ok(PatchPair {
            lr: self.lr.crop(x, y, p, p)?,
            hr: self.hr.crop(r * x, r * y, r * p, r * p)?,
            source,
            lr_offset: (x, y),
            hr_offset: (r * x, r * y),
        })
    }

    /// Uniform random crop of an LR `p x p` patch and its HR counterpart.
    pub fn random_crop(&self, source: usize, p: usize, rng: &mut impl Rng) -> Result<PatchPair> {
        if self.lr.width < p || self.lr.height < p {
            return Err(Error::invalid(
                "sample_patches",
                format!(
                    "LR image {}x{} smaller than patch {p}",
                    self.lr.width, self.lr.height
                ),
            ));
        }
        let x = rng.gen_range(0..=self.lr.width - p);
        let y = rng.gen_range(0..=self.lr.height - p);
        self.crop(source, x, y, p)
    }
}

/// `count` random aligned patches of LR size `p` from one HR image.
pub fn sample_patches(
    hr: &Image,
    spec: &DegradationSpec,
    p: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    let r = spec.scale;
    if hr.width / r < p || hr.height / r < p {
        return Err(Error::invalid(
            "sample_patches",
            format!("{}x{} too small for {p}x{p} LR patches at x{r}", hr.width, hr.height),
        ));
    }
    let pair = AlignedPair::from_hr(hr, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| pair.random_crop(0, p, &mut rng)).collect()
}

/// Applies one of the eight flips/rotations, identically to LR and HR.
pub fn augment_with(pair: &PatchPair, rng: &mut impl Rng) -> PatchPair {
    let d = Dihedral::from_index(rng.gen_range(0..8));
    PatchPair {
        lr: pair.lr.transform(d),
        hr: pair.hr.transform(d),
        ..pair.clone()
    }
}

pub fn augment(pair: &PatchPair, seed: u64) -> PatchPair {
    augment_with(pair, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(w: usize, h: usize) -> FloatImage {
        let plane: Vec<f32> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (0.01 * x as f64 + 0.003 * y as f64) as f32))
            .collect();
        FloatImage {
            width: w,
            height: h,
            data: plane.iter().chain(&plane).chain(&plane).copied().collect(),
        }
    }

    #[test]
    fn cubic_kernel_interpolates() {
        assert_eq!(cubic(0.0), 1.0);
        for x in [1.0, -1.0, 2.0, -2.0, 2.5] {
            assert_eq!(cubic(x), 0.0);
        }
        // partition of unity at a half-sample offset
        let s: f64 = [-1.5, -0.5, 0.5, 1.5].iter().map(|&x| cubic(x)).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn same_size_resize_is_exact_copy() {
        let img = Image::new(5, 4, (0..60).map(|v| (v * 4) as u8).collect()).unwrap();
        let f = img.to_float();
        assert_eq!(bicubic_resize(&f, 5, 4).unwrap(), f);
    }

    #[test]
    fn constant_images_stay_constant() {
        let f = Image::filled(12, 9, [40, 128, 250]).to_float();
        for (w, h) in [(4, 3), (30, 17), (1, 1)] {
            let out = bicubic_resize(&f, w, h).unwrap().to_image();
            assert!(out.data.chunks(3).all(|p| p == [40, 128, 250]), "{w}x{h}");
        }
        let one = Image::filled(1, 1, [9, 8, 7]).to_float();
        let up = bicubic_resize(&one, 7, 5).unwrap().to_image();
        assert!(up.data.chunks(3).all(|p| p == [9, 8, 7]));
    }

    #[test]
    fn downscaled_ramp_stays_linear() {
        let img = ramp_image(48, 36);
        for r in [2usize, 3, 4] {
            let out = bicubic_resize(&img, 48 / r, 36 / r).unwrap();
            let plane = out.plane(0);
            // closed form: sample centre maps to (i + 0.5)·r − 0.5
            for y in 2..out.height - 2 {
                for x in 2..out.width - 2 {
                    let u = (x as f64 + 0.5) * r as f64 - 0.5;
                    let v = (y as f64 + 0.5) * r as f64 - 0.5;
                    let expect = 0.01 * u + 0.003 * v;
                    let got = f64::from(plane[y * out.width + x]);
                    assert!((got - expect).abs() < 1e-3, "r={r} ({x},{y}) {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn degrade_shapes_and_constants() {
        let hr = Image::filled(24, 18, [100, 50, 200]);
        let bi = degrade(&hr, &DegradationSpec::bicubic(3)).unwrap();
        assert_eq!((bi.width, bi.height), (8, 6));
        let bd = degrade(&hr, &DegradationSpec::blur_down(3)).unwrap();
        assert_eq!((bd.width, bd.height), (8, 6));
        assert!(bd.data.chunks(3).all(|p| p == [100, 50, 200]));
        assert!(degrade(&hr, &DegradationSpec::blur_down(2)).is_err());
        assert!(degrade(&Image::filled(10, 9, [0; 3]), &DegradationSpec::bicubic(3)).is_err());
    }

    #[test]
    fn bd_kernel_is_normalized() {
        let k = bd_kernel();
        assert_eq!(k.len(), 49);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k[24] > k[0]);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-3, 5), 2);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
    }

    #[test]
    fn patch_sampling_is_seeded_and_aligned() {
        let hr = Image::new(64, 56, (0..64 * 56 * 3).map(|v| (v * 7 % 251) as u8).collect()).unwrap();
        let spec = DegradationSpec::bicubic(4);
        let a = sample_patches(&hr, &spec, 8, 5, 11).unwrap();
        let b = sample_patches(&hr, &spec, 8, 5, 11).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert_eq!((p.hr.width, p.hr.height), (32, 32));
            assert_eq!(p.hr_offset, (4 * p.lr_offset.0, 4 * p.lr_offset.1));
        }
        assert!(sample_patches(&hr, &spec, 48, 1, 0).is_err());
    }

    #[test]
    fn float_image_tensor_round_trip() {
        let img = Image::new(3, 2, (0..18).map(|v| v as u8 * 10).collect()).unwrap();
        let f = img.to_float();
        assert_eq!(FloatImage::from_tensor(&f.to_tensor(), 0).unwrap(), f);
        assert_eq!(f.to_image(), img);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(0.5), 128);
    }

    #[test]
    fn image_io_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(4, 3, (0..36).map(|v| v as u8 * 7).collect()).unwrap();
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            write_image(&path, &img).unwrap();
            assert_eq!(read_image(&path).unwrap(), img);
        }
    }
}
