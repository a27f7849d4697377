//! Raster figures: box overlays on CT slices and AP-vs-step curves.

use image::{Rgb, RgbImage};
use lidnet::boxes::Rect;
use lidnet::phantom::Image;

pub const GROUND_TRUTH: Rgb<u8> = Rgb([230, 40, 40]);
pub const PROPOSAL: Rgb<u8> = Rgb([40, 220, 70]);
pub const DETECTION: Rgb<u8> = Rgb([60, 160, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const SERIES: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44]), Rgb([214, 39, 40])];

/// Nearest-neighbour upscale of an `[H, W]` image in `[0, 1]`.
pub fn grayscale(img: &Image, scale: u32) -> RgbImage {
    let s = img.shape();
    let (h, w) = (s[0] as u32, s[1] as u32);
    RgbImage::from_fn(w * scale, h * scale, |x, y| {
        let v = img.data()[(y / scale * w + x / scale) as usize];
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([g, g, g])
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Outline of `r` (image-pixel coordinates) at `scale`; `dash` of 0 draws solid.
pub fn rectangle(img: &mut RgbImage, r: &Rect, scale: u32, c: Rgb<u8>, dash: usize) {
    let s = scale as f64;
    let (x0, y0) = ((r.c1 * s).round() as i64, (r.r1 * s).round() as i64);
    let (x1, y1) = (((r.c2 * s).round() as i64 - 1).max(x0), ((r.r2 * s).round() as i64 - 1).max(y0));
    let on = |k: i64| dash == 0 || (k as usize / dash) % 2 == 0;
    for x in x0..=x1 {
        if on(x - x0) {
            put(img, x, y0, c);
            put(img, x, y1, c);
        }
    }
    for y in y0..=y1 {
        if on(y - y0) {
            put(img, x0, y, c);
            put(img, x1, y, c);
        }
    }
}

// 3x5 glyphs, one row per 3 bits, top row in the high bits
fn glyph(ch: char) -> Option<u16> {
    Some(match ch {
        '0' => 0b111_101_101_101_111,
        '1' => 0b010_110_010_010_111,
        '2' => 0b111_001_111_100_111,
        '3' => 0b111_001_111_001_111,
        '4' => 0b101_101_111_001_001,
        '5' => 0b111_100_111_001_111,
        '6' => 0b111_100_111_101_111,
        '7' => 0b111_001_001_001_001,
        '8' => 0b111_101_111_101_111,
        '9' => 0b111_101_111_001_111,
        '.' => 0b000_000_000_000_010,
        '-' => 0b000_000_111_000_000,
        _ => return None,
    })
}

/// Draws digits with their top-left corner at `(x, y)`, `px` pixels per dot.
pub fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, px: i64, c: Rgb<u8>) {
    for (k, ch) in s.chars().enumerate() {
        let Some(bits) = glyph(ch) else { continue };
        let gx = x + k as i64 * 4 * px;
        for row in 0..5 {
            for col in 0..3 {
                if bits >> (14 - (row * 3 + col)) & 1 == 1 {
                    for dy in 0..px {
                        for dx in 0..px {
                            put(img, gx + col as i64 * px + dx, y + row as i64 * px + dy, c);
                        }
                    }
                }
            }
        }
    }
}

/// Two-decimal label without the leading zero, e.g. `.87`.
pub fn short(v: f64) -> String {
    let s = format!("{:.2}", v.clamp(0.0, 1.0));
    s.strip_prefix('0').map(str::to_string).unwrap_or(s)
}

/// A labelled box: outline plus its value printed above the top-left corner.
pub fn labelled(img: &mut RgbImage, r: &Rect, scale: u32, c: Rgb<u8>, value: f64) {
    rectangle(img, r, scale, c, 0);
    let px = (scale as i64 / 2).max(1);
    let y = ((r.r1 * scale as f64).round() as i64 - 6 * px).max(0);
    text(img, (r.c1 * scale as f64).round() as i64, y, &short(value), px, c);
}

/// One curve per series over a shared step axis; y spans `[0, 1]`.
pub fn plot_curves(series: &[(String, Vec<(f64, f64)>)], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (40i64, 12i64, 12i64, 28i64);
    let (pw, ph) = (width as i64 - left - right, height as i64 - top - bottom);
    let x_max = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let to_px = |x: f64, y: f64| {
        (
            left + (x / x_max * pw as f64).round() as i64,
            top + ((1.0 - y.clamp(0.0, 1.0)) * ph as f64).round() as i64,
        )
    };
    for k in 0..=4 {
        let y = k as f64 / 4.0;
        let (_, py) = to_px(0.0, y);
        for x in left..=left + pw {
            put(&mut img, x, py, GRID);
        }
        text(&mut img, 4, py - 5, &format!("{y:.2}"), 2, AXIS);
    }
    for y in top..=top + ph {
        put(&mut img, left, y, AXIS);
    }
    for x in left..=left + pw {
        put(&mut img, x, top + ph, AXIS);
    }
    text(&mut img, left + pw - 4 * 2 * 6, top + ph + 8, &format!("{x_max:.0}"), 2, AXIS);
    for (i, (_, pts)) in series.iter().enumerate() {
        let c = SERIES[i % SERIES.len()];
        for w in pts.windows(2) {
            let (a, b) = (to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1));
            line(&mut img, a, b, c);
        }
        for p in pts {
            let (x, y) = to_px(p.0, p.1);
            for d in -1..=1 {
                put(&mut img, x + d, y, c);
                put(&mut img, x, y + d, c);
            }
        }
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        put(
            img,
            x0 + ((x1 - x0) as f64 * t).round() as i64,
            y0 + ((y1 - y0) as f64 * t).round() as i64,
            c,
        );
    }
}
