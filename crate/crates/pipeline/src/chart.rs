//! Deterministic line-chart rendering for the FID-vs-scale report.
//!
//! Everything is drawn by hand onto a raster (axes, Bresenham polylines,
//! square markers, and a 5x7 bitmap font), so chart PNGs are byte-identical
//! across runs and platforms with no font or plotting dependencies.

use tryon_core::raster::Raster;
use tryon_core::Scalar;

pub const CHART_W: usize = 640;
pub const CHART_H: usize = 480;

const PLOT_LEFT: usize = 70;
const PLOT_RIGHT: usize = 610;
const PLOT_TOP: usize = 50;
const PLOT_BOTTOM: usize = 420;

const BLACK: [f32; 3] = [0.0, 0.0, 0.0];
const GRID_GRAY: [f32; 3] = [0.85, 0.85, 0.85];

/// Distinguishable series colors, cycled when there are more series.
pub const SERIES_COLORS: [[f32; 3]; 6] = [
    [0.86, 0.20, 0.18],
    [0.15, 0.55, 0.82],
    [0.52, 0.60, 0.00],
    [0.71, 0.54, 0.00],
    [0.42, 0.44, 0.77],
    [0.16, 0.63, 0.60],
];

#[derive(Debug, Clone, PartialEq)]
pub struct ChartSeries {
    pub name: String,
    /// (x, y) points; drawn in ascending-x order.
    pub points: Vec<(f64, f64)>,
}

// 5x7 glyphs, one u8 per row, low 5 bits used, MSB on the left.
const fn glyph(ch: char) -> [u8; 7] {
    match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        _ => [0x00; 7],
    }
}

fn put_px(img: &mut Raster<Scalar>, x: i64, y: i64, color: [f32; 3]) {
    if x < 0 || y < 0 || x as usize >= img.width() || y as usize >= img.height() {
        return;
    }
    for c in 0..3 {
        img.set(c, y as usize, x as usize, color[c]);
    }
}

fn draw_line(img: &mut Raster<Scalar>, x0: i64, y0: i64, x1: i64, y1: i64, color: [f32; 3]) {
    let (mut x, mut y) = (x0, y0);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put_px(img, x, y, color);
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

fn draw_marker(img: &mut Raster<Scalar>, x: i64, y: i64, color: [f32; 3]) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put_px(img, x + dx, y + dy, color);
        }
    }
}

/// Uppercased 5x7 text; returns the width in pixels.
pub fn draw_text(img: &mut Raster<Scalar>, x: i64, y: i64, text: &str, color: [f32; 3]) -> i64 {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch.to_ascii_uppercase());
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..5 {
                if bits & (0x10 >> rx) != 0 {
                    put_px(img, cx + rx as i64, y + ry as i64, color);
                }
            }
        }
        cx += 6;
    }
    cx - x
}

fn text_width(text: &str) -> i64 {
    text.chars().count() as i64 * 6
}

/// Trims a tick value to at most two decimals, dropping trailing zeros.
fn fmt_tick(v: f64) -> String {
    let s = if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    };
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Renders series as polylines with markers over labeled axes and a legend.
/// Pure function of its arguments, so output rasters (and their PNGs) are
/// byte-identical for identical inputs.
pub fn render_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[ChartSeries],
) -> Raster<Scalar> {
    let mut img = Raster::filled(3, CHART_H, CHART_W, 1.0 as Scalar);

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let mut y_max = all.iter().fold(0.0f64, |hi, p| hi.max(p.1));
    if !x_min.is_finite() || !x_max.is_finite() {
        (x_min, x_max) = (0.0, 1.0);
    }
    if x_max - x_min < 1e-12 {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_max <= 0.0 {
        y_max = 1.0;
    }
    y_max *= 1.05;

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - x_min) / (x_max - x_min);
        let fy = (y / y_max).clamp(0.0, 1.0);
        (
            PLOT_LEFT as i64 + (fx * (PLOT_RIGHT - PLOT_LEFT) as f64).round() as i64,
            PLOT_BOTTOM as i64 - (fy * (PLOT_BOTTOM - PLOT_TOP) as f64).round() as i64,
        )
    };

    // Horizontal gridlines and y ticks.
    for t in 0..=4 {
        let v = y_max * t as f64 / 4.0;
        let (_, py) = to_px(x_min, v);
        if t > 0 {
            draw_line(&mut img, PLOT_LEFT as i64, py, PLOT_RIGHT as i64, py, GRID_GRAY);
        }
        let label = fmt_tick(v);
        draw_text(&mut img, PLOT_LEFT as i64 - text_width(&label) - 6, py - 3, &label, BLACK);
    }

    // X ticks at each distinct x value across the series.
    let mut xs: Vec<f64> = all.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    for &v in &xs {
        let (px, _) = to_px(v, 0.0);
        draw_line(&mut img, px, PLOT_BOTTOM as i64, px, PLOT_BOTTOM as i64 + 4, BLACK);
        let label = fmt_tick(v);
        draw_text(&mut img, px - text_width(&label) / 2, PLOT_BOTTOM as i64 + 8, &label, BLACK);
    }

    // Axes on top of the grid.
    draw_line(&mut img, PLOT_LEFT as i64, PLOT_TOP as i64, PLOT_LEFT as i64, PLOT_BOTTOM as i64, BLACK);
    draw_line(&mut img, PLOT_LEFT as i64, PLOT_BOTTOM as i64, PLOT_RIGHT as i64, PLOT_BOTTOM as i64, BLACK);

    let mid_x = (PLOT_LEFT + PLOT_RIGHT) as i64 / 2;
    draw_text(&mut img, mid_x - text_width(title) / 2, 18, title, BLACK);
    draw_text(&mut img, mid_x - text_width(x_label) / 2, PLOT_BOTTOM as i64 + 28, x_label, BLACK);
    draw_text(&mut img, 8, PLOT_TOP as i64 - 16, y_label, BLACK);

    for (i, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| f64::total_cmp(&a.0, &b.0));
        let px: Vec<(i64, i64)> = pts.iter().map(|&(x, y)| to_px(x, y)).collect();
        for w in px.windows(2) {
            draw_line(&mut img, w[0].0, w[0].1, w[1].0, w[1].1, color);
        }
        for &(x, y) in &px {
            draw_marker(&mut img, x, y, color);
        }
        // Legend entry in the top-right corner of the plot.
        let ly = PLOT_TOP as i64 + 10 + i as i64 * 14;
        let lx = PLOT_RIGHT as i64 - 150;
        draw_line(&mut img, lx, ly + 3, lx + 18, ly + 3, color);
        draw_marker(&mut img, lx + 9, ly + 3, color);
        draw_text(&mut img, lx + 24, ly, &s.name, BLACK);
    }

    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_series() -> Vec<ChartSeries> {
        vec![
            ChartSeries {
                name: "base".into(),
                points: vec![(0.5, 12.0), (0.7, 9.0), (1.0, 4.0)],
            },
            ChartSeries {
                name: "crop".into(),
                points: vec![(0.5, 6.0), (0.7, 5.0), (1.0, 3.5)],
            },
        ]
    }

    fn count_color(img: &Raster<Scalar>, color: [f32; 3]) -> usize {
        let (h, w) = (img.height(), img.width());
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                if (0..3).all(|c| (img.get(c, y, x) - color[c]).abs() < 1e-6) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_line_chart("FID VS SCALE", "SCALE", "FID", &demo_series());
        let b = render_line_chart("FID VS SCALE", "SCALE", "FID", &demo_series());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn every_series_leaves_its_color_on_the_canvas() {
        let img = render_line_chart("T", "X", "Y", &demo_series());
        assert!(count_color(&img, SERIES_COLORS[0]) > 50);
        assert!(count_color(&img, SERIES_COLORS[1]) > 50);
        assert!(count_color(&img, BLACK) > 100, "axes and text should be black");
    }

    #[test]
    fn higher_values_plot_higher_on_the_canvas() {
        let series = vec![ChartSeries { name: "s".into(), points: vec![(0.0, 1.0), (1.0, 10.0)] }];
        let img = render_line_chart("T", "X", "Y", &series);
        let color = SERIES_COLORS[0];
        let col_min_row = |x0: usize, x1: usize| -> usize {
            let mut min_row = usize::MAX;
            for y in 0..img.height() {
                for x in x0..x1 {
                    if (0..3).all(|c| (img.get(c, y, x) - color[c]).abs() < 1e-6) {
                        min_row = min_row.min(y);
                    }
                }
            }
            min_row
        };
        // The y=10 end (right side) must reach higher (smaller row index)
        // than the y=1 end (left side). Exclude the legend band.
        let left = col_min_row(PLOT_LEFT, PLOT_LEFT + 40);
        let right = col_min_row(PLOT_RIGHT - 40, PLOT_RIGHT);
        assert!(right < left, "right {right} should sit above left {left}");
    }

    #[test]
    fn empty_series_still_draws_axes() {
        let img = render_line_chart("EMPTY", "X", "Y", &[]);
        assert!(count_color(&img, BLACK) > 100);
    }

    #[test]
    fn text_changes_pixels() {
        let a = render_line_chart("AAAA", "X", "Y", &[]);
        let b = render_line_chart("BBBB", "X", "Y", &[]);
        assert_ne!(a.data(), b.data());
    }
}
