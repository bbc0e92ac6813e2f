//! Minimal PNG line charts for sanity-check curves: axes, grid, numeric
//! tick labels and one coloured polyline per series. Series names go in the
//! accompanying JSON, not the image.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const LEFT: i64 = 48;
const RIGHT: i64 = 16;
const TOP: i64 = 16;
const BOTTOM: i64 = 32;

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// 3×5 glyphs for digits, '.', '-'.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// Text with its top-left corner at (x, y), glyphs scaled ×2.
fn text(img: &mut RgbImage, s: &str, x: i64, y: i64) {
    for (i, ch) in s.chars().enumerate() {
        let Some(g) = glyph(ch) else { continue };
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    for d in 0..4 {
                        put(
                            img,
                            x + i as i64 * 8 + col * 2 + d % 2,
                            y + row as i64 * 2 + d / 2,
                            [0, 0, 0],
                        );
                    }
                }
            }
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3], thick: bool) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if thick {
            put(img, x + 1, y, c);
            put(img, x, y + 1, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn label(v: f64) -> String {
    if v.abs() >= 10.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders `series` to a PNG. `x_ticks` are the x positions to label;
/// the y range is padded around the data (or fixed by `y_range`).
pub fn line_chart(
    path: &Path,
    series: &[Series],
    x_ticks: &[f64],
    y_range: Option<(f64, f64)>,
) -> Result<()> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .collect();
    if pts.is_empty() || pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Shape("line chart needs finite points".into()));
    }
    let fold =
        |f: fn(f64, f64) -> f64, init: f64, it: &mut dyn Iterator<Item = f64>| it.fold(init, f);
    let xmin = fold(
        f64::min,
        f64::INFINITY,
        &mut pts.iter().map(|p| p.0).chain(x_ticks.iter().copied()),
    );
    let xmax = fold(
        f64::max,
        f64::NEG_INFINITY,
        &mut pts.iter().map(|p| p.0).chain(x_ticks.iter().copied()),
    );
    let (mut ymin, mut ymax) = y_range.unwrap_or_else(|| {
        let lo = fold(f64::min, f64::INFINITY, &mut pts.iter().map(|p| p.1));
        let hi = fold(f64::max, f64::NEG_INFINITY, &mut pts.iter().map(|p| p.1));
        let pad = ((hi - lo) * 0.1).max(1e-3);
        (lo - pad, hi + pad)
    });
    if ymax <= ymin {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let (pw, ph) = (WIDTH as i64 - LEFT - RIGHT, HEIGHT as i64 - TOP - BOTTOM);
    let px = |x: f64| LEFT + ((x - xmin) / xspan * pw as f64).round() as i64;
    let py = |y: f64| TOP + ph - ((y - ymin) / (ymax - ymin) * ph as f64).round() as i64;

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    for i in 0..=4 {
        let y = ymin + (ymax - ymin) * i as f64 / 4.0;
        line(
            &mut img,
            (LEFT, py(y)),
            (LEFT + pw, py(y)),
            [225, 225, 225],
            false,
        );
        text(&mut img, &label(y), 2, py(y) - 5);
    }
    for &x in x_ticks {
        line(
            &mut img,
            (px(x), TOP),
            (px(x), TOP + ph),
            [225, 225, 225],
            false,
        );
        let l = label(x);
        text(&mut img, &l, px(x) - 4 * l.len() as i64, TOP + ph + 8);
    }
    line(&mut img, (LEFT, TOP), (LEFT, TOP + ph), [0, 0, 0], false);
    line(
        &mut img,
        (LEFT, TOP + ph),
        (LEFT + pw, TOP + ph),
        [0, 0, 0],
        false,
    );
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for w in s.points.windows(2) {
            line(
                &mut img,
                (px(w[0].0), py(w[0].1)),
                (px(w[1].0), py(w[1].1)),
                c,
                true,
            );
        }
        for &(x, y) in &s.points {
            for d in -2..=2 {
                for e in -2..=2 {
                    put(&mut img, px(x) + d, py(y) + e, c);
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(img.save(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series_in_palette_colours() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let s = [
            Series {
                name: "a",
                points: vec![(0.0, 90.0), (0.5, 40.0), (0.9, 10.0)],
            },
            Series {
                name: "b",
                points: vec![(0.0, 90.0), (0.9, 85.0)],
            },
        ];
        line_chart(&p, &s, &[0.0, 0.5, 0.9], None).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        let has = |c: [u8; 3]| img.pixels().any(|px| px.0 == c);
        assert!(has(PALETTE[0]) && has(PALETTE[1]));
        assert!(line_chart(
            &p,
            &[Series {
                name: "x",
                points: vec![(0.0, f64::NAN)]
            }],
            &[],
            None
        )
        .is_err());
    }
}
