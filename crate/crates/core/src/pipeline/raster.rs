//! RGB float images, PNG I/O, and the small rasterizer used by the scene
//! generator and the detection overlays.

use std::path::Path;

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Planar RGB image with values in `[0, 1]`, stored `3 x height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

pub type Rgb = [f32; 3];

impl Image {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            data[c * plane..(c + 1) * plane].fill(color[c]);
        }
        Image { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let (p, i) = (self.width * self.height, y * self.width + x);
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let (p, i) = (self.width * self.height, y * self.width + x);
        self.data[i] = c[0];
        self.data[p + i] = c[1];
        self.data[2 * p + i] = c[2];
    }

    /// Mixes `c` over the pixel with weight `alpha`.
    pub fn blend(&mut self, x: usize, y: usize, c: Rgb, alpha: f32) {
        let old = self.get(x, y);
        let mixed = [0, 1, 2].map(|k| old[k] + (c[k] - old[k]) * alpha);
        self.set(x, y, mixed);
    }

    /// Rounds every value to the nearest 8-bit level, so the in-memory image
    /// equals what a PNG round trip yields.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    /// Mirrors the image left to right.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb(self.get(x as usize, y as usize).map(to_u8))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(w, h, [0.0; 3]);
        for (x, y, p) in img.enumerate_pixels() {
            out.set(x as usize, y as usize, p.0.map(|v| v as f32 / 255.0));
        }
        Ok(out)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Shapes the scene generator draws, in class-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    /// Whether `(u, v)`, in box-relative units `[0, 1]^2`, is inside.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
            // apex at the top middle, base along the bottom edge
            Shape::Triangle => (0.0..=1.0).contains(&v) && (u - 0.5).abs() <= 0.5 * v,
            Shape::Diamond => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
        }
    }
}

/// Antialiased fill of `shape` inscribed in `b`, with `ss x ss` samples per
/// pixel.
pub fn fill_shape(img: &mut Image, shape: Shape, b: &BBox, color: Rgb, ss: usize) {
    let (w, h) = (b.width(), b.height());
    if w <= 0.0 || h <= 0.0 {
        return;
    }
    let x0 = b.x1.floor().max(0.0) as usize;
    let y0 = b.y1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil() as usize).min(img.width);
    let y1 = (b.y2.ceil() as usize).min(img.height);
    let inv = 1.0 / (ss * ss) as f32;
    for py in y0..y1 {
        for px in x0..x1 {
            let mut hits = 0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = px as f32 + (sx as f32 + 0.5) / ss as f32;
                    let y = py as f32 + (sy as f32 + 0.5) / ss as f32;
                    if shape.contains((x - b.x1) / w, (y - b.y1) / h) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                img.blend(px, py, color, hits as f32 * inv);
            }
        }
    }
}

fn fill_rect(img: &mut Image, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb) {
    for y in y0.max(0)..y1.min(img.height as i64) {
        for x in x0.max(0)..x1.min(img.width as i64) {
            img.set(x as usize, y as usize, color);
        }
    }
}

/// Box outline of the given thickness, clipped to the image.
pub fn draw_box(img: &mut Image, b: &BBox, color: Rgb, thickness: i64) {
    let (x1, y1) = (b.x1.round() as i64, b.y1.round() as i64);
    let (x2, y2) = (b.x2.round() as i64, b.y2.round() as i64);
    fill_rect(img, x1, y1, x2, y1 + thickness, color);
    fill_rect(img, x1, y2 - thickness, x2, y2, color);
    fill_rect(img, x1, y1, x1 + thickness, y2, color);
    fill_rect(img, x2 - thickness, y1, x2, y2, color);
}

/// 3x5 glyphs for `0-9` and `.`, one row per 3-bit number, MSB on the left.
const GLYPHS: [[u8; 5]; 11] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
    [0, 0, 0, 0, 2],
];

/// Draws digits and dots at `(x, y)` with each font pixel `scale` wide.
/// Other characters are skipped.
pub fn draw_text(img: &mut Image, x: i64, y: i64, text: &str, color: Rgb, scale: i64) {
    let mut cx = x;
    for ch in text.chars() {
        let glyph = match ch {
            '0'..='9' => GLYPHS[ch as usize - '0' as usize],
            '.' => GLYPHS[10],
            _ => continue,
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    let px = cx + col * scale;
                    let py = y + row as i64 * scale;
                    fill_rect(img, px, py, px + scale, py + scale, color);
                }
            }
        }
        cx += 4 * scale;
    }
}

/// Distinct overlay color per class.
pub fn class_color(class_id: usize) -> Rgb {
    const PALETTE: [Rgb; 6] = [
        [0.9, 0.1, 0.1],
        [0.1, 0.8, 0.1],
        [0.1, 0.3, 0.95],
        [0.95, 0.8, 0.1],
        [0.8, 0.1, 0.8],
        [0.1, 0.8, 0.8],
    ];
    PALETTE[class_id % PALETTE.len()]
}
