//! Minimal plot rendering straight into PNG buffers: score histograms, a
//! precision-recall curve, and sweep line plots for the studies. Emission
//! is best-effort everywhere; a failed plot logs to stderr and never fails
//! the command that asked for it. Labels are numeric only (a tiny built-in
//! digit font); series identities live in the JSON next to the plot.

use std::path::Path;

use image::{Rgb, RgbImage};
use imprint_core::detection::DetectionReport;

const W: u32 = 640;
const H: u32 = 420;
const MARGIN: u32 = 40;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// Series palette; sweep plots index into this in order.
const PALETTE: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
];

const HIST_BINS: usize = 32;

/// 3x5 glyphs for "0123456789-."; each row is 3 bits, MSB left.
const GLYPHS: [(char, [u8; 5]); 12] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
];

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if (0..img.width() as i64).contains(&x) && (0..img.height() as i64).contains(&y) {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
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

fn draw_dot(img: &mut RgbImage, (cx, cy): (i64, i64), color: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, cx + dx, cy + dy, color);
        }
    }
}

/// Draws `text` (digits, minus, dot) at 2x scale; returns the width used.
fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) -> i64 {
    let mut cx = x;
    for ch in text.chars() {
        if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if bits & (1 << (2 - rx)) != 0 {
                        for sy in 0..2 {
                            for sx in 0..2 {
                                put(
                                    img,
                                    cx + 2 * rx as i64 + sx,
                                    y + 2 * ry as i64 + sy,
                                    color,
                                );
                            }
                        }
                    }
                }
            }
        }
        cx += 8;
    }
    cx - x
}

fn format_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// Maps data coordinates to the pixel rectangle inside the margins.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let pad = |a: f64, b: f64| {
            if a == b {
                (a - 0.5, b + 0.5)
            } else {
                (a, b)
            }
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> i64 {
        let t = (x - self.x0) / (self.x1 - self.x0);
        (MARGIN as f64 + t * (W - 2 * MARGIN) as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let t = (y - self.y0) / (self.y1 - self.y0);
        ((H - MARGIN) as f64 - t * (H - 2 * MARGIN) as f64).round() as i64
    }
}

fn new_canvas() -> RgbImage {
    RgbImage::from_pixel(W, H, BACKGROUND)
}

/// Axis box plus numeric labels for both extents.
fn draw_frame(img: &mut RgbImage, f: &Frame) {
    let (left, right) = (MARGIN as i64, (W - MARGIN) as i64);
    let (top, bottom) = (MARGIN as i64, (H - MARGIN) as i64);
    for t in [0.25, 0.5, 0.75] {
        let y = f.py(f.y0 + t * (f.y1 - f.y0));
        draw_line(img, (left, y), (right, y), GRID);
    }
    draw_line(img, (left, bottom), (right, bottom), AXIS);
    draw_line(img, (left, top), (left, bottom), AXIS);
    draw_text(img, left, bottom + 6, &format_tick(f.x0), AXIS);
    let right_label = format_tick(f.x1);
    draw_text(
        img,
        right - 8 * right_label.chars().count() as i64,
        bottom + 6,
        &right_label,
        AXIS,
    );
    draw_text(img, 4, bottom - 10, &format_tick(f.y0), AXIS);
    draw_text(img, 4, top, &format_tick(f.y1), AXIS);
}

fn save(img: &RgbImage, path: &Path) -> Result<(), String> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| format!("{}: {e}", path.display()))
}

/// Mirrored score histogram: real counts grow up from the midline, fake
/// counts grow down.
pub fn score_histogram(path: &Path, reals: &[f64], fakes: &[f64]) -> Result<(), String> {
    if reals.is_empty() || fakes.is_empty() {
        return Err("histogram needs both classes".into());
    }
    let all = reals.iter().chain(fakes);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in all {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let bin_of = |v: f64| {
        (((v - lo) / (hi - lo) * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
    };
    let mut real_counts = [0usize; HIST_BINS];
    let mut fake_counts = [0usize; HIST_BINS];
    for &v in reals {
        real_counts[bin_of(v)] += 1;
    }
    for &v in fakes {
        fake_counts[bin_of(v)] += 1;
    }
    let peak = real_counts
        .iter()
        .chain(&fake_counts)
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    let mut img = new_canvas();
    let f = Frame::new(lo, hi, -1.0, 1.0);
    draw_frame(&mut img, &f);
    let mid = f.py(0.0);
    let (left, right) = (MARGIN as i64, (W - MARGIN) as i64);
    draw_line(&mut img, (left, mid), (right, mid), AXIS);
    for b in 0..HIST_BINS {
        let x_lo = f.px(lo + (hi - lo) * b as f64 / HIST_BINS as f64) + 1;
        let x_hi = f.px(lo + (hi - lo) * (b + 1) as f64 / HIST_BINS as f64) - 1;
        let up = f.py(real_counts[b] as f64 / peak);
        let down = f.py(-(fake_counts[b] as f64 / peak));
        for x in x_lo..=x_hi {
            if real_counts[b] > 0 {
                draw_line(&mut img, (x, mid - 1), (x, up), PALETTE[0]);
            }
            if fake_counts[b] > 0 {
                draw_line(&mut img, (x, mid + 1), (x, down), PALETTE[1]);
            }
        }
    }
    save(&img, path)
}

/// Precision-recall polyline swept over descending scores, reals positive.
pub fn pr_curve(path: &Path, scores: &[f64], labels: &[bool]) -> Result<(), String> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err("pr curve needs both classes".into());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        // Consume a whole tie group before emitting a point.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }

    let mut img = new_canvas();
    let f = Frame::new(0.0, 1.0, 0.0, 1.0);
    draw_frame(&mut img, &f);
    for pair in points.windows(2) {
        draw_line(
            &mut img,
            (f.px(pair[0].0), f.py(pair[0].1)),
            (f.px(pair[1].0), f.py(pair[1].1)),
            PALETTE[0],
        );
    }
    save(&img, path)
}

/// Multi-series sweep plot; one color per series in palette order, points
/// joined in x order.
pub fn line_plot(path: &Path, xs: &[f64], series: &[(&str, Vec<f64>)]) -> Result<(), String> {
    if xs.is_empty() || series.is_empty() {
        return Err("line plot needs data".into());
    }
    for (name, ys) in series {
        if ys.len() != xs.len() {
            return Err(format!("series {name} length mismatch"));
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, ys) in series {
        for &v in ys {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(1e-9);
    let f = Frame::new(
        xs[0],
        xs[xs.len() - 1],
        lo - 0.05 * span,
        hi + 0.05 * span,
    );
    let mut img = new_canvas();
    draw_frame(&mut img, &f);
    for (si, (_, ys)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for (w, pair) in xs.windows(2).enumerate() {
            draw_line(
                &mut img,
                (f.px(pair[0]), f.py(ys[w])),
                (f.px(pair[1]), f.py(ys[w + 1])),
                color,
            );
        }
        for (x, y) in xs.iter().zip(ys) {
            draw_dot(&mut img, (f.px(*x), f.py(*y)), color);
        }
        // Legend swatch: series index next to its color, top right.
        let lx = (W - MARGIN) as i64 - 30;
        let ly = MARGIN as i64 + 14 * si as i64;
        for dy in 0..8 {
            draw_line(&mut img, (lx, ly + dy), (lx + 8, ly + dy), color);
        }
        draw_text(&mut img, lx + 12, ly - 1, &si.to_string(), AXIS);
    }
    save(&img, path)
}

/// Standard per-report plots; failures are logged and swallowed.
pub fn emit_report_plots(out_dir: &Path, report: &DetectionReport) {
    let reals: Vec<f64> =
        report.rows.iter().filter(|r| r.label == 1).map(|r| r.score).collect();
    let fakes: Vec<f64> =
        report.rows.iter().filter(|r| r.label == 0).map(|r| r.score).collect();
    let scores: Vec<f64> = report.rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = report.rows.iter().map(|r| r.label == 1).collect();
    for (name, res) in [
        ("score_histogram.png", score_histogram(&out_dir.join("score_histogram.png"), &reals, &fakes)),
        ("pr_curve.png", pr_curve(&out_dir.join("pr_curve.png"), &scores, &labels)),
    ] {
        match res {
            Ok(()) => println!("wrote {}", out_dir.join(name).display()),
            Err(e) => eprintln!("plot {name} skipped: {e}"),
        }
    }
}
