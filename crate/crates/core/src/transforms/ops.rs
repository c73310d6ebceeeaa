//! Pixel kernels. All arithmetic is in `f64` on `[0, 1]` (or `[0, 255]` for
//! geometric resampling) with a single rounding back to `u8`.

use super::JitterOp;
use crate::image::ImageBuffer;

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn build(width: u32, height: u32, pixels: Vec<u8>) -> ImageBuffer {
    ImageBuffer::new(width, height, pixels).expect("kernel preserves buffer size")
}

pub(super) fn flip_horizontal(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.pixels();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        let row = &src[y * w * 3..(y + 1) * w * 3];
        for px in row.chunks_exact(3).rev() {
            out.extend_from_slice(px);
        }
    }
    build(img.width(), img.height(), out)
}

pub(super) fn flip_vertical(img: &ImageBuffer) -> ImageBuffer {
    let stride = img.width() as usize * 3;
    let out: Vec<u8> = img
        .pixels()
        .chunks_exact(stride)
        .rev()
        .flatten()
        .copied()
        .collect();
    build(img.width(), img.height(), out)
}

/// Bilinear sample at a continuous pixel-center coordinate; neighbors outside
/// the frame contribute black.
fn sample_zero_fill(img: &ImageBuffer, sx: f64, sy: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = [0.0; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (x, y) = (x0 + dx, y0 + dy);
            let weight = wx * wy;
            if weight == 0.0 || x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            let px = img.pixel(x as u32, y as u32);
            for c in 0..3 {
                acc[c] += weight * px[c] as f64;
            }
        }
    }
    acc
}

/// Counter-clockwise rotation about the image center, canvas kept, corners
/// filled black.
pub(super) fn rotate(img: &ImageBuffer, degrees: f64) -> ImageBuffer {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let v = sample_zero_fill(img, sx, sy);
            out.extend(v.iter().map(|c| to_u8(*c)));
        }
    }
    build(w, h, out)
}

/// Crops `(x, y, cw, ch)` and resizes to `out_w × out_h` with bilinear
/// interpolation over half-pixel centers, edges clamped.
pub(super) fn resized_crop(
    img: &ImageBuffer,
    x: u32,
    y: u32,
    cw: u32,
    ch: u32,
    out_w: u32,
    out_h: u32,
) -> ImageBuffer {
    let scale_x = cw as f64 / out_w as f64;
    let scale_y = ch as f64 / out_h as f64;
    let axis = |o: u32, scale: f64, len: u32| -> (u32, u32, f64) {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as u32;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|o| axis(o, scale_x, cw)).collect();
    let mut out = Vec::with_capacity(out_w as usize * out_h as usize * 3);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, scale_y, ch);
        for &(x0, x1, fx) in &cols {
            let p00 = img.pixel(x + x0, y + y0);
            let p01 = img.pixel(x + x1, y + y0);
            let p10 = img.pixel(x + x0, y + y1);
            let p11 = img.pixel(x + x1, y + y1);
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                out.push(to_u8(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    build(out_w, out_h, out)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-0.5 * (x / sigma).powi(2)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|k| k / sum).collect()
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: i64, len: i64) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut m = i.rem_euclid(period);
    if m >= len {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflect padding.
pub(super) fn gaussian_blur(img: &ImageBuffer, size: usize, sigma: f64) -> ImageBuffer {
    let kernel = gaussian_kernel(size, sigma);
    let radius = (size / 2) as i64;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.pixels();
    let mut horiz = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as i64 + k as i64 - radius, w as i64);
                    acc += kv * src[(y * w + sx) * 3 + c] as f64;
                }
                horiz[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + k as i64 - radius, h as i64);
                    acc += kv * horiz[(sy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = to_u8(acc);
            }
        }
    }
    build(img.width(), img.height(), out)
}

fn luma(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn blend(a: f64, b: f64, ratio: f64) -> f64 {
    (ratio * a + (1.0 - ratio) * b).clamp(0.0, 1.0)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness/contrast/saturation blends and a hue rotation (in turns),
/// each clamped to `[0, 1]`, applied in `order`.
pub(super) fn color_jitter(
    img: &ImageBuffer,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
    order: &[JitterOp; 4],
) -> ImageBuffer {
    let mut buf: Vec<f64> = img.pixels().iter().map(|&v| v as f64 / 255.0).collect();
    for op in order {
        match op {
            JitterOp::Brightness => {
                for v in &mut buf {
                    *v = blend(*v, 0.0, brightness);
                }
            }
            JitterOp::Contrast => {
                let n = (buf.len() / 3) as f64;
                let mean = buf.chunks_exact(3).map(luma).sum::<f64>() / n;
                for v in &mut buf {
                    *v = blend(*v, mean, contrast);
                }
            }
            JitterOp::Saturation => {
                for px in buf.chunks_exact_mut(3) {
                    let gray = luma(px);
                    for v in px.iter_mut() {
                        *v = blend(*v, gray, saturation);
                    }
                }
            }
            JitterOp::Hue => {
                if hue == 0.0 {
                    continue;
                }
                for px in buf.chunks_exact_mut(3) {
                    let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let (r, g, b) = hsv_to_rgb(h + hue, s, v);
                    px[0] = r;
                    px[1] = g;
                    px[2] = b;
                }
            }
        }
    }
    let out = buf.iter().map(|v| to_u8(v * 255.0)).collect();
    build(img.width(), img.height(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(13, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..13 {
            assert!((k[i] - k[12 - i]).abs() < 1e-15);
        }
        assert!(k[6] > k[5]);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.4, 0.9), (1.0, 0.0, 0.0), (0.5, 0.5, 0.5), (0.1, 0.9, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn hue_half_turn_swaps_red_to_cyan() {
        let img = ImageBuffer::filled(2, 2, [255, 0, 0]);
        let order = [JitterOp::Hue, JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation];
        let out = color_jitter(&img, 1.0, 1.0, 1.0, 0.5, &order);
        assert_eq!(out.pixel(0, 0), [0, 255, 255]);
    }

    #[test]
    fn full_crop_same_size_is_identity() {
        let img = ImageBuffer::from_fn(6, 6, |x, y| [(x * 40) as u8, (y * 40) as u8, 7]);
        let out = resized_crop(&img, 0, 0, 6, 6, 6, 6);
        assert_eq!(out, img);
    }
}
