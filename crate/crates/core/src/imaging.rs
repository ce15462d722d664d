//! Frames, square crops with mean-color padding, and input normalization.

use image::RgbImage;

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Frame = RgbImage;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Smallest crop side in frame pixels.
pub const MIN_CROP_SIDE: f64 = 16.0;

/// Affine map between crop pixels and frame pixels:
/// `frame = origin + patch · scale`, per axis, in continuous coordinates
/// where pixel `i` covers `[i, i + 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub origin: [f64; 2],
    pub scale: [f64; 2],
    /// Crop `(height, width)` in pixels.
    pub size: (usize, usize),
}

impl CropTransform {
    pub fn patch_to_frame(&self, p: [f64; 2]) -> [f64; 2] {
        [self.origin[0] + p[0] * self.scale[0], self.origin[1] + p[1] * self.scale[1]]
    }

    pub fn frame_to_patch(&self, f: [f64; 2]) -> [f64; 2] {
        [(f[0] - self.origin[0]) / self.scale[0], (f[1] - self.origin[1]) / self.scale[1]]
    }

    /// Normalized crop box to frame pixels.
    pub fn box_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        let (h, w) = (self.size.0 as f64, self.size.1 as f64);
        let [x0, y0] = self.patch_to_frame([b.x0 * w, b.y0 * h]);
        let [x1, y1] = self.patch_to_frame([b.x1 * w, b.y1 * h]);
        BoundingBox::new(x0, y0, x1, y1)
    }

    /// Frame-pixel box to normalized crop coordinates.
    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let (h, w) = (self.size.0 as f64, self.size.1 as f64);
        let [x0, y0] = self.frame_to_patch([b.x0, b.y0]);
        let [x1, y1] = self.frame_to_patch([b.x1, b.y1]);
        BoundingBox::new(x0 / w, y0 / h, x1 / w, y1 / h)
    }
}

/// Per-channel mean of a frame in `[0, 255]`.
pub fn mean_color(frame: &Frame) -> [f32; 3] {
    let mut acc = [0f64; 3];
    for p in frame.pixels() {
        for c in 0..3 {
            acc[c] += p.0[c] as f64;
        }
    }
    let n = (frame.width() as f64 * frame.height() as f64).max(1.0);
    acc.map(|a| (a / n) as f32)
}

/// Side of the square region around `b` for a context `factor`.
pub fn crop_side(b: &BoundingBox, factor: f64) -> f64 {
    let s = factor * (b.width().max(0.0) * b.height().max(0.0)).sqrt();
    if s.is_finite() {
        s.max(MIN_CROP_SIDE)
    } else {
        MIN_CROP_SIDE
    }
}

/// Bilinear crop of the square of side `side` centred at `center`, resized
/// to `(h, w)`. Returns raw `[3, h, w]` values in `[0, 255]`; samples
/// outside the frame read the frame's mean color.
pub fn crop(frame: &Frame, center: [f64; 2], side: f64, size: (usize, usize)) -> Result<(Tensor<f32>, CropTransform)> {
    let (h, w) = size;
    if h == 0 || w == 0 || !(side > 0.0) || frame.width() == 0 || frame.height() == 0 {
        return Err(Error::config("crop needs a non-empty frame, output and region"));
    }
    let t = CropTransform {
        origin: [center[0] - 0.5 * side, center[1] - 0.5 * side],
        scale: [side / w as f64, side / h as f64],
        size,
    };
    let mean = mean_color(frame);
    let (fw, fh) = (frame.width() as i64, frame.height() as i64);
    let raw = frame.as_raw();
    let px = |x: i64, y: i64, c: usize| -> f32 {
        if x < 0 || y < 0 || x >= fw || y >= fh {
            mean[c]
        } else {
            raw[((y * fw + x) * 3) as usize + c] as f32
        }
    };
    let mut out = vec![0f32; 3 * h * w];
    for i in 0..h {
        let fy = t.origin[1] + (i as f64 + 0.5) * t.scale[1] - 0.5;
        let y0 = fy.floor();
        let wy = (fy - y0) as f32;
        for j in 0..w {
            let fx = t.origin[0] + (j as f64 + 0.5) * t.scale[0] - 0.5;
            let x0 = fx.floor();
            let wx = (fx - x0) as f32;
            let (xi, yi) = (x0 as i64, y0 as i64);
            for c in 0..3 {
                let top = px(xi, yi, c) * (1.0 - wx) + px(xi + 1, yi, c) * wx;
                let bot = px(xi, yi + 1, c) * (1.0 - wx) + px(xi + 1, yi + 1, c) * wx;
                out[c * h * w + i * w + j] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Ok((Tensor::new(&[3, h, w], out)?, t))
}

/// Crop around a pixel box with the given context factor.
pub fn crop_around(frame: &Frame, b: &BoundingBox, factor: f64, size: (usize, usize)) -> Result<(Tensor<f32>, CropTransform)> {
    crop(frame, b.center(), crop_side(b, factor), size)
}

/// Raw `[3, h, w]` values in `[0, 255]` to normalized network input.
pub fn normalize(raw: &Tensor<f32>) -> Tensor<f32> {
    let plane = raw.numel() / 3;
    let mut out = raw.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let c = k / plane;
        *v = (*v / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
    }
    out
}

pub fn flip_horizontal(raw: &Tensor<f32>) -> Tensor<f32> {
    let s = raw.shape();
    let w = s[2];
    let src = raw.data();
    Tensor::from_fn(s, |k| src[(k / w) * w + (w - 1 - k % w)])
}

/// Multiplies every value by `factor`, clamped to `[0, 255]`.
pub fn adjust_brightness(raw: &Tensor<f32>, factor: f32) -> Tensor<f32> {
    raw.map(|v| (v * factor).clamp(0.0, 255.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn ramp(w: u32, h: u32) -> Frame {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn unit_scale_crop_copies_pixels() {
        let f = ramp(400, 400);
        let b = BoundingBox::from_xywh(100.0, 120.0, 64.0, 64.0);
        let (patch, t) = crop_around(&f, &b, 5.0, (320, 320)).unwrap();
        assert_eq!(t.scale, [1.0, 1.0]);
        assert_eq!(t.origin, [-28.0, -8.0]);
        // patch (i, j) = frame (j − 28, i − 8) where in frame
        let d = patch.data();
        assert_eq!(d[50 * 320 + 40], 12.0);
        assert_eq!(d[320 * 320 + 50 * 320 + 40], 42.0);
    }

    #[test]
    fn template_region_size() {
        let b = BoundingBox::from_xywh(10.0, 10.0, 40.0, 40.0);
        assert_eq!(crop_side(&b, 2.0), 80.0);
        assert_eq!(crop_side(&BoundingBox::new(5.0, 5.0, 5.0, 5.0), 5.0), MIN_CROP_SIDE);
    }

    #[test]
    fn corner_box_is_mean_padded() {
        let f = RgbImage::from_pixel(50, 40, Rgb([10, 20, 30]));
        let b = BoundingBox::from_xywh(0.0, 0.0, 10.0, 10.0);
        let (patch, _) = crop_around(&f, &b, 5.0, (32, 32)).unwrap();
        assert_eq!(patch.shape(), &[3, 32, 32]);
        assert!((patch.data()[0] - 10.0).abs() < 1e-4);
        assert!((patch.data()[2 * 1024] - 30.0).abs() < 1e-4);
    }

    #[test]
    fn mapping_round_trips() {
        let f = ramp(200, 150);
        let b = BoundingBox::from_xywh(60.0, 40.0, 30.0, 22.0);
        let (_, t) = crop_around(&f, &b, 5.0, (64, 64)).unwrap();
        for p in [[0.0, 0.0], [61.3, 44.9], [199.0, 149.0]] {
            let q = t.patch_to_frame(t.frame_to_patch(p));
            assert!((q[0] - p[0]).abs() < 0.5 && (q[1] - p[1]).abs() < 0.5);
        }
        let back = t.box_to_frame(&t.box_to_patch(&b));
        assert!(back.to_array().iter().zip(b.to_array()).all(|(a, b)| (a - b).abs() < 1e-9));
        let c = t.box_to_patch(&b).center();
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flip_and_brightness() {
        let raw = Tensor::from_fn(&[3, 2, 3], |k| k as f32);
        let f = flip_horizontal(&raw);
        assert_eq!(&f.data()[..6], &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert!(flip_horizontal(&f).bit_eq(&raw));
        let b = adjust_brightness(&Tensor::full(&[3, 1, 1], 200.0), 1.5);
        assert_eq!(b.data(), &[255.0; 3]);
    }
}
