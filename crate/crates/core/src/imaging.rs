//! 8-bit raster images, binary masks, and the classical preprocessing ops.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-major, channel-interleaved 8-bit image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("empty image {width}×{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{width}×{height}×{channels} image needs {} bytes, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Single-channel mask whose pixels are exactly 0 or 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}×{height} mask needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::InvalidArgument(format!(
                "mask values must be 0 or 255, found {v}"
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let values = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| if f(x, y) { 255 } else { 0 })
            .collect();
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] == 255
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 255).count()
    }

    pub fn to_image(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels: self.values.clone(),
        }
    }

    /// 1×1×H×W tensor with 0.0 background and 1.0 foreground.
    pub fn to_target<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .values
            .iter()
            .map(|&v| if v == 255 { T::one() } else { T::zero() })
            .collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("mask extents are positive")
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<RasterImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        RasterImage::new(w, h, 3, img.into_rgb8().into_raw())
    } else {
        RasterImage::new(w, h, 1, img.into_luma8().into_raw())
    }
}

pub fn read_image(path: &Path) -> Result<RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.pixels, img.width as u32, img.height as u32, color)
        .map_err(|e| Error::Decode(e.to_string()))?;
    Ok(out)
}

pub fn write_png(img: &RasterImage, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// BT.601 luma; single-channel inputs are returned unchanged.
pub fn to_grayscale(img: &RasterImage) -> RasterImage {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    RasterImage {
        width: img.width,
        height: img.height,
        channels: 1,
        pixels,
    }
}

/// Source coordinate and weights for one output index under half-pixel
/// centre mapping.
fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

pub fn resize_bilinear(img: &RasterImage, out_w: usize, out_h: usize) -> Result<RasterImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize to {out_w}×{out_h}")));
    }
    if (out_w, out_h) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let ch = img.channels;
    let xs: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, img.width, out_w)).collect();
    let mut pixels = Vec::with_capacity(out_w * out_h * ch);
    for y in 0..out_h {
        let (y0, y1, fy) = bilinear_taps(y, img.height, out_h);
        for &(x0, x1, fx) in &xs {
            for c in 0..ch {
                let p = |x: usize, y: usize| img.get(x, y, c) as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage::new(out_w, out_h, ch, pixels)
}

/// Replicates a single-channel image into three channels; RGB passes through.
pub fn to_rgb(img: &RasterImage) -> RasterImage {
    if img.channels == 3 {
        return img.clone();
    }
    RasterImage {
        width: img.width,
        height: img.height,
        channels: 3,
        pixels: img.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
    }
}

/// Bilinear resize of a single float plane (same sampling as [`resize_bilinear`]).
pub fn resize_plane_bilinear(plane: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    assert_eq!(plane.len(), width * height, "plane size mismatch");
    let xs: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, width, out_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = bilinear_taps(y, height, out_h);
        for &(x0, x1, fx) in &xs {
            let p = |x: usize, y: usize| plane[y * width + x];
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Nearest-neighbour resize for masks (keeps values in {0, 255}).
pub fn resize_mask(mask: &BinaryMask, out_w: usize, out_h: usize) -> BinaryMask {
    if (out_w, out_h) == (mask.width, mask.height) {
        return mask.clone();
    }
    BinaryMask::from_fn(out_w, out_h, |x, y| {
        let sx = ((x as f64 + 0.5) * mask.width as f64 / out_w as f64) as usize;
        let sy = ((y as f64 + 0.5) * mask.height as f64 / out_h as f64) as usize;
        mask.is_set(sx.min(mask.width - 1), sy.min(mask.height - 1))
    })
}

/// `value / 255` into a planar 1×C×H×W tensor.
pub fn normalize01<T: Scalar>(img: &RasterImage) -> Tensor<T> {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut data = vec![T::zero(); w * h * ch];
    for (i, px) in img.pixels.chunks_exact(ch).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * w * h + i] = T::from_f64_lossy(v as f64 / 255.0);
        }
    }
    Tensor::new(&[1, ch, h, w], data).expect("image extents are positive")
}

/// Inverse of [`normalize01`]: `round(v·255)` clamped, back to interleaved bytes.
pub fn rescale255<T: Scalar>(t: &Tensor<T>) -> Result<RasterImage> {
    let (b, ch, h, w) = t.dims4("rescale255")?;
    if b != 1 || (ch != 1 && ch != 3) {
        return Err(Error::shape("rescale255", "1×C×H×W with C in {1, 3}", t.shape()));
    }
    let mut pixels = vec![0u8; w * h * ch];
    for c in 0..ch {
        for i in 0..w * h {
            let v = t.data()[c * w * h + i].as_f64();
            pixels[i * ch + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    RasterImage::new(w, h, ch, pixels)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur over float planes, clamp-to-edge borders.
pub fn gaussian_blur_plane(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wgt)| wgt * plane[y * width + clamp(x as isize + k as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wgt)| wgt * tmp[clamp(y as isize + k as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(img: &RasterImage, sigma: f64) -> Result<RasterImage> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut pixels = vec![0u8; img.pixels.len()];
    for c in 0..ch {
        let plane: Vec<f64> = img.pixels.iter().skip(c).step_by(ch).map(|&v| v as f64).collect();
        let blurred = gaussian_blur_plane(&plane, w, h, sigma);
        for (i, v) in blurred.into_iter().enumerate() {
            pixels[i * ch + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RasterImage::new(w, h, ch, pixels)
}

/// Local-mean threshold: a pixel is foreground iff it exceeds the mean of its
/// `block`×`block` neighbourhood (clamped borders) minus `offset_c`.
pub fn adaptive_threshold(img: &RasterImage, block: usize, offset_c: f64) -> Result<BinaryMask> {
    if img.channels != 1 {
        return Err(Error::InvalidArgument(
            "adaptive_threshold needs a 1-channel image".into(),
        ));
    }
    if block < 3 || block.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "threshold block must be odd and at least 3, got {block}"
        )));
    }
    let (w, h) = (img.width, img.height);
    let r = block / 2;
    // integral image over the edge-replicated frame [-r, w+r) × [-r, h+r)
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let mut integral = vec![0u64; (pw + 1) * (ph + 1)];
    for py in 0..ph {
        let sy = (py as isize - r as isize).clamp(0, h as isize - 1) as usize;
        let mut row = 0u64;
        for px in 0..pw {
            let sx = (px as isize - r as isize).clamp(0, w as isize - 1) as usize;
            row += img.pixels[sy * w + sx] as u64;
            integral[(py + 1) * (pw + 1) + px + 1] = integral[py * (pw + 1) + px + 1] + row;
        }
    }
    let n = (block * block) as f64;
    let values = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            // frame coordinates of the window are [x, x+block) × [y, y+block)
            let at = |px: usize, py: usize| integral[py * (pw + 1) + px];
            let sum = at(x + block, y + block) + at(x, y) - at(x, y + block) - at(x + block, y);
            let mean = sum as f64 / n;
            if img.pixels[y * w + x] as f64 > mean - offset_c {
                255
            } else {
                0
            }
        })
        .collect();
    BinaryMask::new(w, h, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Erode,
    Dilate,
    Open,
    Close,
}

fn morph_pass(mask: &BinaryMask, radius: usize, dilate: bool) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let r = radius as isize;
    let combine = |acc: u8, v: u8| if dilate { acc.max(v) } else { acc.min(v) };
    let start = if dilate { 0u8 } else { 255u8 };
    let sample = |buf: &[u8], x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            buf[y as usize * w + x as usize]
        }
    };
    let mut rows = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            rows[y as usize * w + x as usize] =
                (-r..=r).fold(start, |acc, d| combine(acc, sample(&mask.values, x + d, y)));
        }
    }
    let mut values = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            values[y as usize * w + x as usize] = (-r..=r).fold(start, |acc, d| combine(acc, sample(&rows, x, y + d)));
        }
    }
    BinaryMask {
        width: w,
        height: h,
        values,
    }
}

/// Binary morphology with a (2r+1)² square element; out-of-image pixels count
/// as background.
pub fn morph(mask: &BinaryMask, op: MorphOp, radius: usize) -> Result<BinaryMask> {
    if radius == 0 {
        return Err(Error::InvalidArgument("morphology radius must be positive".into()));
    }
    Ok(match op {
        MorphOp::Erode => morph_pass(mask, radius, false),
        MorphOp::Dilate => morph_pass(mask, radius, true),
        MorphOp::Open => morph_pass(&morph_pass(mask, radius, false), radius, true),
        MorphOp::Close => morph_pass(&morph_pass(mask, radius, true), radius, false),
    })
}

/// Keeps pixels under the mask and zeroes the rest in every channel.
pub fn apply_mask(original: &RasterImage, mask: &BinaryMask) -> Result<RasterImage> {
    if (original.width, original.height) != (mask.width, mask.height) {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            expected: format!("{}×{} mask", original.width, original.height),
            found: format!("{}×{}", mask.width, mask.height),
        });
    }
    let ch = original.channels;
    let mut out = original.clone();
    for (px, &m) in out.pixels.chunks_exact_mut(ch).zip(&mask.values) {
        if m == 0 {
            px.fill(0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> RasterImage {
        let px = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        RasterImage::new(w, h, 1, px).unwrap()
    }

    #[test]
    fn png_round_trip_and_truncation() {
        let img = RasterImage::new(2, 2, 3, vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]).unwrap();
        let bytes = encode_png(&img).unwrap();
        assert_eq!(decode_image(&bytes).unwrap(), img);
        assert!(matches!(decode_image(&bytes[..bytes.len() / 2]), Err(Error::Decode(_))));
        assert!(matches!(decode_image(b"not an image"), Err(Error::Decode(_))));
    }

    #[test]
    fn bmp_decodes_to_three_channels() {
        let img = RasterImage::new(3, 2, 3, (0..18).map(|v| v * 10).collect()).unwrap();
        let mut bmp = std::io::Cursor::new(Vec::new());
        image::RgbImage::from_raw(3, 2, img.pixels().to_vec())
            .unwrap()
            .write_to(&mut bmp, image::ImageFormat::Bmp)
            .unwrap();
        let back = decode_image(bmp.get_ref()).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back, img);
    }

    #[test]
    fn luma_values() {
        let img = RasterImage::new(3, 1, 3, vec![255, 255, 255, 255, 0, 0, 77, 77, 77]).unwrap();
        assert_eq!(to_grayscale(&img).pixels(), &[255, 76, 77]);
    }

    #[test]
    fn resize_cases() {
        let img = gray(5, 3, |x, y| (x * 40 + y) as u8);
        assert_eq!(resize_bilinear(&img, 5, 3).unwrap(), img);
        let flat = gray(7, 7, |_, _| 93);
        assert!(resize_bilinear(&flat, 128, 128)
            .unwrap()
            .pixels()
            .iter()
            .all(|&v| v == 93));
        let ramp = resize_bilinear(&gray(2, 1, |x, _| if x == 0 { 0 } else { 255 }), 4, 1).unwrap();
        // taps: -0.25→0, 0.25, 0.75, 1.25→1
        assert_eq!(ramp.pixels(), &[0, 64, 191, 255]);
        assert!(ramp.pixels().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn normalize_and_rescale() {
        let img = gray(256, 1, |x, _| x as u8);
        let t = normalize01::<f32>(&img);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[255], 1.0);
        assert!((t.data()[128] as f64 - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(rescale255(&t).unwrap(), img);
    }

    #[test]
    fn normalize_is_planar() {
        let img = RasterImage::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let t = normalize01::<f64>(&img);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        let bytes: Vec<u8> = t.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(bytes, vec![1, 4, 2, 5, 3, 6]);
        assert_eq!(rescale255(&t).unwrap(), img);
    }

    #[test]
    fn blur_properties() {
        let flat = gray(9, 9, |_, _| 180);
        assert_eq!(gaussian_blur(&flat, 1.5).unwrap(), flat);

        let impulse = gray(21, 21, |x, y| if (x, y) == (10, 10) { 255 } else { 0 });
        let b = gaussian_blur(&impulse, 1.0).unwrap();
        for d in 1..4 {
            assert_eq!(b.get(10 - d, 10, 0), b.get(10 + d, 10, 0));
            assert_eq!(b.get(10, 10 - d, 0), b.get(10, 10 + d, 0));
        }
        // conservation is checked before 8-bit rounding
        let plane: Vec<f64> = impulse.pixels().iter().map(|&v| v as f64).collect();
        let total: f64 = gaussian_blur_plane(&plane, 21, 21, 1.0).iter().sum();
        assert!((total - 255.0).abs() <= 0.005 * 255.0, "{total}");
        assert!(gaussian_blur(&flat, 0.0).is_err());
    }

    #[test]
    fn threshold_constant_images() {
        let flat = gray(6, 6, |_, _| 120);
        // value > mean - c: a positive offset admits the flat plateau
        assert!(adaptive_threshold(&flat, 3, 2.0)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 255));
        assert!(adaptive_threshold(&flat, 3, -2.0)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0));
        assert!(adaptive_threshold(&flat, 4, 0.0).is_err());
        assert!(adaptive_threshold(&flat, 1, 0.0).is_err());
    }

    #[test]
    fn morphology_basics() {
        let dot = BinaryMask::from_fn(5, 5, |x, y| (x, y) == (2, 2));
        let d = morph(&dot, MorphOp::Dilate, 1).unwrap();
        assert_eq!(d.count(), 9);
        assert!(d.is_set(1, 1) && d.is_set(3, 3) && !d.is_set(0, 2));
        assert_eq!(morph(&dot, MorphOp::Open, 1).unwrap().count(), 0);

        let full = BinaryMask::from_fn(4, 4, |_, _| true);
        // background outside the image erodes the border ring
        assert_eq!(morph(&full, MorphOp::Erode, 1).unwrap().count(), 4);
        assert!(morph(&full, MorphOp::Erode, 0).is_err());
    }

    #[test]
    fn masking() {
        let img = RasterImage::new(2, 2, 3, (1..=12).collect()).unwrap();
        let all = BinaryMask::from_fn(2, 2, |_, _| true);
        assert_eq!(apply_mask(&img, &all).unwrap(), img);
        let none = BinaryMask::from_fn(2, 2, |_, _| false);
        assert!(apply_mask(&img, &none).unwrap().pixels().iter().all(|&v| v == 0));
        let checker = BinaryMask::from_fn(2, 2, |x, y| (x + y) % 2 == 0);
        let out = apply_mask(&img, &checker).unwrap();
        assert_eq!(out.pixels(), &[1, 2, 3, 0, 0, 0, 0, 0, 0, 10, 11, 12]);
        assert!(apply_mask(&img, &BinaryMask::from_fn(3, 2, |_, _| true)).is_err());
    }

    #[test]
    fn mask_rejects_grey_values() {
        assert!(BinaryMask::new(2, 1, vec![0, 128]).is_err());
        assert!(BinaryMask::new(2, 1, vec![0, 255]).is_ok());
    }
}
