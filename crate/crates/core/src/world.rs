//! Procedurally rendered image world for desk-scale experiments.
//!
//! Fourteen shape classes are rendered over six background motifs at 32x32
//! (any square size works). Ten classes are in-distribution; four are held
//! out as OOD. Every image records its background motif and accent color,
//! which double as the ground-truth contextual elements for prompt
//! extraction.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::sample_rng;

pub const IND_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "cross", "diamond", "chevron", "grid", "crescent",
    "star",
];

pub const OOD_CLASSES: [&str; 4] = ["helix", "hexagon", "ripple", "lattice"];

pub const BACKGROUNDS: [&str; 6] = ["plain", "stripes", "dots", "gradient", "speckle", "haze"];

pub const ACCENTS: [(&str, [f64; 3]); 6] = [
    ("teal", [0.18, 0.55, 0.55]),
    ("rose", [0.75, 0.35, 0.45]),
    ("sand", [0.75, 0.65, 0.40]),
    ("sky", [0.45, 0.60, 0.80]),
    ("moss", [0.40, 0.60, 0.30]),
    ("plum", [0.50, 0.30, 0.60]),
];

/// Foreground color per class; the strongest class signal in pixel space.
fn class_color(class: &str) -> [f64; 3] {
    match class {
        "disk" => [0.90, 0.15, 0.15],
        "square" => [0.15, 0.75, 0.20],
        "triangle" => [0.15, 0.25, 0.90],
        "ring" => [0.92, 0.80, 0.10],
        "cross" => [0.85, 0.20, 0.80],
        "diamond" => [0.10, 0.80, 0.80],
        "chevron" => [0.95, 0.55, 0.10],
        "grid" => [0.55, 0.10, 0.15],
        "crescent" => [0.75, 0.90, 0.25],
        "star" => [0.95, 0.90, 0.70],
        "helix" => [0.60, 0.40, 0.20],
        "hexagon" => [0.25, 0.45, 0.35],
        "ripple" => [0.35, 0.20, 0.55],
        "lattice" => [0.80, 0.50, 0.50],
        _ => [0.5, 0.5, 0.5],
    }
}

fn shape_mask(class: &str, x: f64, y: f64, r: f64) -> bool {
    let rho = (x * x + y * y).sqrt();
    match class {
        "disk" => rho < r,
        "square" => x.abs().max(y.abs()) < r * 0.85,
        "triangle" => {
            let t = (y + r) / (2.0 * r);
            y.abs() < r && t >= 0.0 && x.abs() < r * (1.0 - t)
        }
        "ring" => rho < r && rho > r * 0.55,
        "cross" => (x.abs() < r * 0.28 || y.abs() < r * 0.28) && x.abs().max(y.abs()) < r,
        "diamond" => x.abs() + y.abs() < r,
        "chevron" => (y - (x.abs() - r * 0.5)).abs() < r * 0.28 && x.abs() < r,
        "grid" => {
            let f = 2.2 / r;
            let fract = |v: f64| v - v.floor();
            rho < r && (fract(x * f) < 0.38 || fract(y * f) < 0.38)
        }
        "crescent" => rho < r && ((x - r * 0.4) * (x - r * 0.4) + y * y).sqrt() > r * 0.75,
        "star" => {
            let theta = y.atan2(x);
            rho < r * (0.50 + 0.50 * (5.0 * theta).cos().abs())
        }
        "helix" => {
            let theta = y.atan2(x);
            let mut hit = false;
            for k in 0..4 {
                let target = r * (theta + 2.0 * std::f64::consts::PI * k as f64)
                    / (6.0 * std::f64::consts::PI);
                if target >= 0.0 && (rho - target).abs() < r * 0.12 {
                    hit = true;
                }
            }
            hit && rho < r
        }
        "hexagon" => {
            let c30 = 3f64.sqrt() / 2.0;
            let a = x.abs();
            let b = (0.5 * x + c30 * y).abs();
            let c = (0.5 * x - c30 * y).abs();
            a.max(b).max(c) < r * 0.85
        }
        "ripple" => rho < r && (rho * 14.0 / r).sin() > 0.25,
        "lattice" => {
            let f = 1.6 / r;
            let fract = |v: f64| v - v.floor();
            x.abs().max(y.abs()) < r
                && (fract((x + y) * f) < 0.35 || fract((x - y) * f) < 0.35)
        }
        _ => false,
    }
}

fn background_pixel(
    motif: &str,
    accent: [f64; 3],
    base: [f64; 3],
    u: f64,
    v: f64,
    noise: f64,
) -> [f64; 3] {
    let mix = |a: [f64; 3], b: [f64; 3], t: f64| {
        [
            a[0] * (1.0 - t) + b[0] * t,
            a[1] * (1.0 - t) + b[1] * t,
            a[2] * (1.0 - t) + b[2] * t,
        ]
    };
    match motif {
        "plain" => base,
        "stripes" => {
            if (v * 6.0).floor() as i64 % 2 == 0 {
                mix(base, accent, 0.75)
            } else {
                base
            }
        }
        "dots" => {
            let cell = 0.18;
            let du = (u / cell).fract() - 0.5;
            let dv = (v / cell).fract() - 0.5;
            if (du * du + dv * dv).sqrt() < 0.22 {
                mix(base, accent, 0.9)
            } else {
                base
            }
        }
        "gradient" => mix(base, accent, 0.5 * (u + v)),
        "speckle" => mix(base, accent, if noise > 0.72 { 0.85 } else { 0.0 }),
        "haze" => {
            let d = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt() * 1.6;
            mix(base, accent, d.min(1.0))
        }
        _ => base,
    }
}

/// One rendered sample with its generative attributes.
#[derive(Debug, Clone)]
pub struct WorldImage {
    pub id: String,
    pub class: String,
    pub background: String,
    pub accent: String,
    pub pixels: Array3<f64>,
}

/// Render one image deterministically from its identity.
pub fn render(
    class: &str,
    background: &str,
    accent_name: &str,
    jitter_key: &str,
    seed: u64,
    size: usize,
) -> Array3<f64> {
    let mut rng = sample_rng(seed, "world-render", jitter_key);
    let accent = ACCENTS
        .iter()
        .find(|(n, _)| *n == accent_name)
        .map(|(_, c)| *c)
        .unwrap_or([0.5, 0.5, 0.5]);
    let base = [
        0.22 + rng.random_range(-0.03..0.03),
        0.22 + rng.random_range(-0.03..0.03),
        0.25 + rng.random_range(-0.03..0.03),
    ];
    let mut fg = class_color(class);
    for c in fg.iter_mut() {
        *c = (*c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
    }
    let cx = rng.random_range(-0.18..0.18);
    let cy = rng.random_range(-0.18..0.18);
    let r = rng.random_range(0.48..0.70);
    let pixel_noise = 0.02;

    let mut img = Array3::zeros((3, size, size));
    for py in 0..size {
        for px in 0..size {
            let u = (px as f64 + 0.5) / size as f64;
            let v = (py as f64 + 0.5) / size as f64;
            let x = 2.0 * u - 1.0 - cx;
            let y = 2.0 * v - 1.0 - cy;
            let speck: f64 = rng.random();
            let mut rgb = background_pixel(background, accent, base, u, v, speck);
            if !class.is_empty() && shape_mask(class, x, y, r) {
                rgb = fg;
            }
            for c in 0..3 {
                let n: f64 = rng.random_range(-pixel_noise..pixel_noise);
                img[[c, py, px]] = (rgb[c] + n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Render a background-only plate for one motif (no foreground object).
pub fn render_background(
    motif: &str,
    accent_name: &str,
    variant: usize,
    seed: u64,
    size: usize,
) -> Array3<f64> {
    render(
        "",
        motif,
        accent_name,
        &format!("bg-{motif}-{accent_name}-{variant}"),
        seed,
        size,
    )
}

/// Deterministic dataset: `per_class` images for each listed class, with
/// backgrounds and accents cycling through seeded draws.
pub fn make_dataset(classes: &[&str], per_class: usize, seed: u64, size: usize) -> Vec<WorldImage> {
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for class in classes {
        for i in 0..per_class {
            let id = format!("{class}_{i:04}");
            let mut rng = sample_rng(seed, "world-attrs", &id);
            let background = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())];
            let accent = ACCENTS[rng.random_range(0..ACCENTS.len())].0;
            let pixels = render(class, background, accent, &id, seed, size);
            out.push(WorldImage {
                id,
                class: class.to_string(),
                background: background.to_string(),
                accent: accent.to_string(),
                pixels,
            });
        }
    }
    out
}

/// Ground-truth contextual elements per image, as a stub-extractor fixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextFixture(pub std::collections::BTreeMap<String, Vec<String>>);

pub fn context_fixture(images: &[WorldImage]) -> ContextFixture {
    ContextFixture(
        images
            .iter()
            .map(|img| {
                (
                    img.id.clone(),
                    vec![img.background.clone(), img.accent.clone()],
                )
            })
            .collect(),
    )
}

/// JPEG-encoded byte size of an image; the complexity statistic used for
/// in-distribution subset selection.
pub fn jpeg_byte_size(pixels: &Array3<f64>) -> usize {
    let (_, h, w) = pixels.dim();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (pixels[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut buf = std::io::Cursor::new(Vec::new());
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, 85);
    image::ImageEncoder::write_image(
        encoder,
        rgb.as_raw(),
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .expect("in-memory jpeg encode");
    buf.into_inner().len()
}
