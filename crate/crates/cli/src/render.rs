//! Grayscale canvas with colored glimpse quadrilaterals and label glyphs.

use image::{Rgb, RgbImage};

pub const SCALE: u32 = 4;

/// 3x5 bitmaps, one row per `u8`, most significant of the low 3 bits first.
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 2, 2, 2],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];
const DASH: [u8; 5] = [0, 0, 7, 0, 0];

pub struct Overlay {
    pub img: RgbImage,
}

impl Overlay {
    pub fn new(canvas: &[u8], h: usize, w: usize) -> Self {
        let mut img = RgbImage::new(w as u32 * SCALE, h as u32 * SCALE);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let v = canvas[(y / SCALE) as usize * w + (x / SCALE) as usize];
            *px = Rgb([v, v, v]);
        }
        Overlay { img }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    /// Line between two points in canvas pixel units.
    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let s = SCALE as f64;
        let (x0, y0, x1, y1) = (a.0 * s, a.1 * s, b.0 * s, b.1 * s);
        let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        // clamp so far-off windows do not loop forever
        let n = n.min(20_000);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.put((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, c);
        }
    }

    /// Closed polygon; the right and bottom canvas border land on the last pixel.
    pub fn quad(&mut self, corners: &[(f64, f64); 4], c: Rgb<u8>) {
        let (w, h) = (self.img.width() as f64 / SCALE as f64, self.img.height() as f64 / SCALE as f64);
        let edge = 1.0 / SCALE as f64;
        let fit =
            |p: (f64, f64)| (if (p.0 - w).abs() < 1e-9 { w - edge } else { p.0 }, if (p.1 - h).abs() < 1e-9 { h - edge } else { p.1 });
        for i in 0..4 {
            self.line(fit(corners[i]), fit(corners[(i + 1) % 4]), c);
        }
    }

    /// A class index drawn as a digit at `(x, y)` output pixels; classes past
    /// 9 draw a dash.
    pub fn label(&mut self, class: usize, x: u32, y: u32, c: Rgb<u8>) {
        let glyph = DIGITS.get(class).unwrap_or(&DASH);
        let k = 3i64;
        for (r, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    for dy in 0..k {
                        for dx in 0..k {
                            self.put(x as i64 + col * k + dx, y as i64 + r as i64 * k + dy, c);
                        }
                    }
                }
            }
        }
    }
}

/// Blue at the first step shading to red at the last.
pub fn step_color(t: usize, steps: usize) -> Rgb<u8> {
    let f = if steps > 1 { t as f64 / (steps - 1) as f64 } else { 1.0 };
    Rgb([(60.0 + 195.0 * f) as u8, 80, (255.0 * (1.0 - f)) as u8])
}

pub const GT_COLOR: Rgb<u8> = Rgb([40, 220, 60]);
pub const LABEL_COLOR: Rgb<u8> = Rgb([255, 220, 0]);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_canvas_quad_traces_the_border() {
        let mut o = Overlay::new(&[0; 100], 10, 10);
        let c = Rgb([255, 0, 0]);
        o.quad(&[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)], c);
        let (w, h) = (o.img.width(), o.img.height());
        for i in 0..w {
            assert_eq!(*o.img.get_pixel(i, 0), c);
            assert_eq!(*o.img.get_pixel(i, h - 1), c);
        }
        for j in 0..h {
            assert_eq!(*o.img.get_pixel(0, j), c);
            assert_eq!(*o.img.get_pixel(w - 1, j), c);
        }
        assert_eq!(*o.img.get_pixel(w / 2, h / 2), Rgb([0, 0, 0]));
    }

    #[test]
    fn offscreen_lines_are_clipped() {
        let mut o = Overlay::new(&[9; 4], 2, 2);
        o.line((-1e9, -1e9), (1e9, 1e9), Rgb([1, 2, 3]));
        o.label(3, 1000, 1000, LABEL_COLOR);
        assert_eq!(*o.img.get_pixel(1, 3), Rgb([9, 9, 9]));
    }

    #[test]
    fn colors_run_blue_to_red() {
        assert!(step_color(0, 6).0[2] > step_color(0, 6).0[0]);
        assert!(step_color(5, 6).0[0] > step_color(5, 6).0[2]);
    }
}
