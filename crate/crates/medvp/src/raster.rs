//! Marker rasterization and alpha blending.
//!
//! Coverage is binary (no anti-aliasing) so rendered output is bit-exact
//! across platforms. Blending follows `out = alpha * ink + (1 - alpha) * in`
//! per channel with round-half-up integer math, applied only where the
//! marker layer has ink.

use crate::types::{PromptGeometry, VisualPrompt};
use anyhow::{ensure, Result};
use image::RgbImage;

/// Per-pixel RGB ink plus a binary coverage mask, same dimensions as the
/// target image. Pixels with `mask == false` carry no ink.
#[derive(Debug, Clone)]
pub struct PromptLayer {
    pub width: u32,
    pub height: u32,
    ink: Vec<[u8; 3]>,
    mask: Vec<bool>,
}

impl PromptLayer {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        PromptLayer {
            width,
            height,
            ink: vec![[0, 0, 0]; n],
            mask: vec![false; n],
        }
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn paint(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = self.index(x, y);
            self.ink[i] = rgb;
            self.mask[i] = true;
        }
    }

    pub fn is_covered(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.mask[self.index(x, y)]
    }

    pub fn ink_at(&self, x: u32, y: u32) -> [u8; 3] {
        self.ink[self.index(x, y)]
    }

    pub fn covered_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Covered pixel coordinates in row-major order.
    pub fn covered_pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| ((i as u32) % w, (i as u32) / w))
    }
}

/// Rasterize a prompt onto a blank layer of the given image dimensions.
///
/// Rectangle: the stroked border of the source box, thickness growing
/// inward. Ellipse: the stroked ellipse inscribed in the source box.
/// Scribble: a Catmull-Rom curve through the control points, stamped with
/// a disc of radius thickness/2 and clipped to the source box. Every
/// covered pixel lies inside the (half-open) source box.
pub fn rasterize(prompt: &VisualPrompt, width: u32, height: u32) -> Result<PromptLayer> {
    let b = &prompt.source_box;
    ensure!(
        b.x_max <= width && b.y_max <= height,
        "prompt box [{},{},{},{}] exceeds image {}x{}",
        b.x_min,
        b.y_min,
        b.x_max,
        b.y_max,
        width,
        height
    );
    let mut layer = PromptLayer::new(width, height);
    let rgb = prompt.color.rgb();
    let t = prompt.thickness.max(1) as i64;

    match &prompt.geometry {
        PromptGeometry::Rectangle {
            x_min,
            y_min,
            x_max,
            y_max,
        } => {
            let (x0, y0, x1, y1) = (
                i64::from(*x_min),
                i64::from(*y_min),
                i64::from(*x_max),
                i64::from(*y_max),
            );
            for y in y0..y1 {
                for x in x0..x1 {
                    let on_band = x < x0 + t || x >= x1 - t || y < y0 + t || y >= y1 - t;
                    if on_band {
                        layer.paint(x as u32, y as u32, rgb);
                    }
                }
            }
        }
        PromptGeometry::Ellipse {
            x_min,
            y_min,
            x_max,
            y_max,
        } => {
            let cx = (f64::from(*x_min) + f64::from(*x_max)) / 2.0;
            let cy = (f64::from(*y_min) + f64::from(*y_max)) / 2.0;
            let a = (f64::from(*x_max) - f64::from(*x_min)) / 2.0;
            let bb = (f64::from(*y_max) - f64::from(*y_min)) / 2.0;
            let (ia, ib) = (a - t as f64, bb - t as f64);
            let has_hole = ia > 0.0 && ib > 0.0;
            for y in *y_min..*y_max {
                for x in *x_min..*x_max {
                    let px = f64::from(x) + 0.5;
                    let py = f64::from(y) + 0.5;
                    let outer = ellipse_value(px, py, cx, cy, a, bb) <= 1.0;
                    if !outer {
                        continue;
                    }
                    let in_hole = has_hole && ellipse_value(px, py, cx, cy, ia, ib) <= 1.0;
                    if !in_hole {
                        layer.paint(x, y, rgb);
                    }
                }
            }
        }
        PromptGeometry::Scribble { points } => {
            let radius = f64::from(prompt.thickness.max(1)) / 2.0;
            for p in catmull_rom_samples(points) {
                stamp_disc(
                    &mut layer, p, radius, rgb, b.x_min, b.y_min, b.x_max, b.y_max,
                );
            }
        }
    }
    Ok(layer)
}

fn ellipse_value(px: f64, py: f64, cx: f64, cy: f64, a: f64, b: f64) -> f64 {
    let dx = (px - cx) / a;
    let dy = (py - cy) / b;
    dx * dx + dy * dy
}

/// Sample a uniform Catmull-Rom spline through the control points. The
/// curve is open; endpoints are duplicated as phantom neighbors.
fn catmull_rom_samples(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    if points.len() < 2 {
        return points.to_vec();
    }
    let get = |i: i64| -> [f64; 2] {
        let idx = i.clamp(0, points.len() as i64 - 1) as usize;
        points[idx]
    };
    let mut out = Vec::new();
    for seg in 0..points.len() as i64 - 1 {
        let (p0, p1, p2, p3) = (get(seg - 1), get(seg), get(seg + 1), get(seg + 2));
        let dist = ((p2[0] - p1[0]).powi(2) + (p2[1] - p1[1]).powi(2)).sqrt();
        let steps = (dist * 2.0).ceil().max(8.0) as usize;
        for s in 0..=steps {
            let u = s as f64 / steps as f64;
            out.push(catmull_rom_point(p0, p1, p2, p3, u));
        }
    }
    out
}

fn catmull_rom_point(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], p3: [f64; 2], u: f64) -> [f64; 2] {
    let mut q = [0.0; 2];
    for d in 0..2 {
        let (a, b, c, e) = (p0[d], p1[d], p2[d], p3[d]);
        q[d] = 0.5
            * (2.0 * b
                + (-a + c) * u
                + (2.0 * a - 5.0 * b + 4.0 * c - e) * u * u
                + (-a + 3.0 * b - 3.0 * c + e) * u * u * u);
    }
    q
}

/// Stamp a filled disc at `p`, covering the pixel containing `p` plus every
/// pixel whose center is within `radius`, clipped to the half-open box.
#[allow(clippy::too_many_arguments)]
fn stamp_disc(
    layer: &mut PromptLayer,
    p: [f64; 2],
    radius: f64,
    rgb: [u8; 3],
    bx0: u32,
    by0: u32,
    bx1: u32,
    by1: u32,
) {
    let in_box = |x: i64, y: i64| {
        x >= i64::from(bx0) && x < i64::from(bx1) && y >= i64::from(by0) && y < i64::from(by1)
    };
    let (hx, hy) = (p[0].floor() as i64, p[1].floor() as i64);
    if in_box(hx, hy) {
        layer.paint(hx as u32, hy as u32, rgb);
    }
    let x_lo = (p[0] - radius - 1.0).floor() as i64;
    let x_hi = (p[0] + radius + 1.0).ceil() as i64;
    let y_lo = (p[1] - radius - 1.0).floor() as i64;
    let y_hi = (p[1] + radius + 1.0).ceil() as i64;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            if !in_box(x, y) {
                continue;
            }
            let dx = x as f64 + 0.5 - p[0];
            let dy = y as f64 + 0.5 - p[1];
            if dx * dx + dy * dy <= radius * radius {
                layer.paint(x as u32, y as u32, rgb);
            }
        }
    }
}

/// Blend one channel with round-half-up integer output.
pub fn blend_channel(input: u8, ink: u8, alpha: f64) -> u8 {
    (alpha * f64::from(ink) + (1.0 - alpha) * f64::from(input) + 0.5).floor() as u8
}

/// Alpha-blend a marker layer over an image. Only pixels covered by the
/// layer change; everywhere else the output is bit-identical to the input.
pub fn alpha_blend(image: &RgbImage, layer: &PromptLayer, alpha: f64) -> Result<RgbImage> {
    ensure!(
        image.width() == layer.width && image.height() == layer.height,
        "image {}x{} and layer {}x{} dimensions differ",
        image.width(),
        image.height(),
        layer.width,
        layer.height
    );
    ensure!((0.0..=1.0).contains(&alpha), "alpha {alpha} outside [0,1]");
    let mut out = image.clone();
    for (x, y) in layer.covered_pixels() {
        let ink = layer.ink_at(x, y);
        let px = out.get_pixel_mut(x, y);
        for (channel, &ink_c) in px.0.iter_mut().zip(&ink) {
            *channel = blend_channel(*channel, ink_c, alpha);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BoundingBox, PaletteColor, Shape};
    use proptest::prelude::*;

    fn rect_prompt(x0: u32, y0: u32, x1: u32, y1: u32, thickness: u32) -> VisualPrompt {
        VisualPrompt {
            shape: Shape::Rectangle,
            color: PaletteColor::Red,
            alpha: 0.8,
            thickness,
            geometry: PromptGeometry::Rectangle {
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
            },
            source_box: BoundingBox::new(x0, y0, x1, y1, 0.9, "liver"),
        }
    }

    fn ellipse_prompt(x0: u32, y0: u32, x1: u32, y1: u32, thickness: u32) -> VisualPrompt {
        VisualPrompt {
            shape: Shape::Ellipse,
            color: PaletteColor::Blue,
            alpha: 0.8,
            thickness,
            geometry: PromptGeometry::Ellipse {
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
            },
            source_box: BoundingBox::new(x0, y0, x1, y1, 0.9, "liver"),
        }
    }

    // Hand-enumerated border of the 4x4 pixel block [0,4)x[0,4):
    // all 16 pixels minus the 2x2 interior -> 12 pixels.
    #[test]
    fn rectangle_thickness_one_covers_exact_border() {
        let layer = rasterize(&rect_prompt(0, 0, 4, 4, 1), 8, 8).unwrap();
        let mut expected = Vec::new();
        for y in 0..4u32 {
            for x in 0..4u32 {
                if x == 0 || x == 3 || y == 0 || y == 3 {
                    expected.push((x, y));
                }
            }
        }
        assert_eq!(expected.len(), 12);
        let covered: Vec<(u32, u32)> = layer.covered_pixels().collect();
        assert_eq!(covered, expected);
    }

    // Box placed so x_min + x_max == width (same for y): a layer flip maps
    // the box onto itself, so coverage must mirror exactly.
    #[test]
    fn ellipse_coverage_is_flip_symmetric_for_square_box() {
        let layer = rasterize(&ellipse_prompt(2, 2, 14, 14, 2), 16, 16).unwrap();
        assert!(layer.covered_count() > 0);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(layer.is_covered(x, y), layer.is_covered(15 - x, y));
                assert_eq!(layer.is_covered(x, y), layer.is_covered(x, 15 - y));
            }
        }
    }

    #[test]
    fn ellipse_stays_inside_box() {
        let layer = rasterize(&ellipse_prompt(3, 5, 13, 11, 3), 20, 20).unwrap();
        assert!(layer.covered_count() > 0);
        for (x, y) in layer.covered_pixels() {
            assert!((3..13).contains(&x) && (5..11).contains(&y));
        }
    }

    #[test]
    fn scribble_nonempty_and_contained() {
        let b = BoundingBox::new(4, 4, 28, 20, 0.9, "lung");
        let prompt = VisualPrompt {
            shape: Shape::Scribble,
            color: PaletteColor::Green,
            alpha: 0.7,
            thickness: 3,
            geometry: PromptGeometry::Scribble {
                points: vec![
                    [7.0, 10.0],
                    [11.5, 14.0],
                    [16.0, 8.0],
                    [20.5, 15.0],
                    [25.0, 11.0],
                ],
            },
            source_box: b,
        };
        let layer = rasterize(&prompt, 32, 32).unwrap();
        assert!(layer.covered_count() > 0);
        for (x, y) in layer.covered_pixels() {
            assert!((4..28).contains(&x) && (4..20).contains(&y));
        }
    }

    #[test]
    fn blend_midpoint_rounds_half_up() {
        assert_eq!(blend_channel(100, 200, 0.5), 150);
        // 0.5 * 100 + 0.5 * 101 = 100.5 -> 101 under round-half-up.
        assert_eq!(blend_channel(100, 101, 0.5), 101);
    }

    #[test]
    fn blend_alpha_endpoints_are_exact() {
        let mut img = RgbImage::new(4, 4);
        for (i, px) in img.pixels_mut().enumerate() {
            px.0 = [
                (i * 17 % 256) as u8,
                (i * 31 % 256) as u8,
                (i * 7 % 256) as u8,
            ];
        }
        let layer = rasterize(&rect_prompt(0, 0, 4, 4, 2), 4, 4).unwrap();
        let zero = alpha_blend(&img, &layer, 0.0).unwrap();
        assert_eq!(zero.as_raw(), img.as_raw());
        let one = alpha_blend(&img, &layer, 1.0).unwrap();
        for (x, y) in layer.covered_pixels() {
            assert_eq!(one.get_pixel(x, y).0, [255, 0, 0]);
        }
    }

    #[test]
    fn blend_untouched_outside_mask() {
        let img = RgbImage::from_pixel(8, 8, image::Rgb([9, 9, 9]));
        let layer = rasterize(&rect_prompt(2, 2, 6, 6, 1), 8, 8).unwrap();
        let out = alpha_blend(&img, &layer, 0.9).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if !layer.is_covered(x, y) {
                    assert_eq!(out.get_pixel(x, y).0, [9, 9, 9]);
                }
            }
        }
    }

    #[test]
    fn blend_dimension_mismatch_is_error() {
        let img = RgbImage::new(4, 4);
        let layer = PromptLayer::new(5, 4);
        assert!(alpha_blend(&img, &layer, 0.5).is_err());
    }

    proptest! {
        // Output channel always lies between input and ink, inclusive.
        #[test]
        fn blend_is_monotone_per_channel(
            input in 0u8..=255,
            ink in 0u8..=255,
            alpha_m in 0u32..=1000,
        ) {
            let alpha = f64::from(alpha_m) / 1000.0;
            let out = blend_channel(input, ink, alpha);
            let lo = input.min(ink);
            let hi = input.max(ink);
            prop_assert!(out >= lo && out <= hi);
        }

        // Round-half-up oracle computed independently per pixel.
        #[test]
        fn blend_matches_per_pixel_oracle(
            input in 0u8..=255,
            ink in 0u8..=255,
            alpha_m in 0u32..=1000,
        ) {
            let alpha = f64::from(alpha_m) / 1000.0;
            let expected = (alpha * f64::from(ink) + (1.0 - alpha) * f64::from(input) + 0.5).floor();
            prop_assert_eq!(f64::from(blend_channel(input, ink, alpha)), expected);
        }
    }
}
