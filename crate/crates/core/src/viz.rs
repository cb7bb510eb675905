//! Static panels comparing the weak and strong branches on one image.

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::masking::{sample_naive_keep, sample_partition};
use crate::model::Model;
use crate::tensor::{Float, Tensor};
use crate::tokens::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemoOptions {
    pub k: usize,
    pub seed: u64,
    /// Drop tokens (zeroed patches) instead of K-way masking.
    pub naive: bool,
    pub naive_ratio: f64,
    /// Include the weak-branch uncertainty panel.
    pub uncertainty: bool,
    /// Nearest-neighbour upscaling of every panel.
    pub scale: u32,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self { k: 64, seed: 0, naive: false, naive_ratio: 0.5, uncertainty: false, scale: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct Panel {
    pub name: &'static str,
    pub image: RgbImage,
}

#[derive(Clone, Debug, Serialize)]
pub struct DemoSummary {
    pub k: usize,
    pub non_empty_subsets: usize,
    pub naive: bool,
    pub max_abs_diff: f64,
    /// `mean(strong) / mean(weak)` depth.
    pub mean_scale_ratio: f64,
}

/// Distinct colour per subset id; neighbouring ids get distant hues.
pub fn subset_color(k: usize, classes: usize) -> Rgb<u8> {
    let classes = classes.max(1);
    let mut step = (classes / 3).max(1);
    while gcd(step, classes) != 1 {
        step += 1;
    }
    let hue = ((k * step) % classes) as f64 / classes as f64 * 6.0;
    let (s, v) = (0.75, 0.95);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    Rgb([r, g, b].map(|u| ((u + m) * 255.0).round() as u8))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn gray(v: f64) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

fn map_panel(h: usize, w: usize, f: impl Fn(usize, usize) -> Rgb<u8>) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| f(y as usize, x as usize))
}

fn image_panel<F: Float>(img: &ImageTensor<F>) -> RgbImage {
    map_panel(img.height(), img.width(), |y, x| {
        Rgb([0, 1, 2].map(|c| (img.at(c, y, x).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Inverse-depth grayscale (near = bright) on a shared `[lo, hi]` range.
fn depth_panel<F: Float>(d: &Tensor<F>, lo: f64, hi: f64) -> RgbImage {
    let (h, w) = (d.shape()[0], d.shape()[1]);
    let (ilo, ihi) = (1.0 / hi, 1.0 / lo);
    map_panel(h, w, |y, x| {
        let inv = 1.0 / d[y * w + x].as_f64();
        gray(if ihi > ilo { (inv - ilo) / (ihi - ilo) } else { 0.0 })
    })
}

fn upscale(img: &RgbImage, s: u32) -> RgbImage {
    let s = s.max(1);
    RgbImage::from_fn(img.width() * s, img.height() * s, |x, y| *img.get_pixel(x / s, y / s))
}

/// Builds the panels for `image`: input, partition, weak depth, strong depth,
/// difference and optionally uncertainty.
pub fn mask_demo<F: Float>(model: &Model<F>, image: &ImageTensor<F>, opts: &DemoOptions) -> Result<(Vec<Panel>, DemoSummary)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = model.num_tokens();
    let (h, w) = (image.height(), image.width());
    let p = model.cfg.patch_size;
    let cols = model.grid.cols;
    let token_at = |y: usize, x: usize| (y / p) * cols + x / p;

    let weak = model.predict(image, None)?;
    let (strong, partition_panel, non_empty) = if opts.naive {
        let keep = sample_naive_keep(n, opts.naive_ratio, &mut rng);
        let dropped = ImageTensor::from_fn(h, w, |c, y, x| if keep[token_at(y, x)] { image.at(c, y, x) } else { F::zero() });
        let panel = map_panel(h, w, |y, x| if keep[token_at(y, x)] { subset_color(0, 1) } else { Rgb([0, 0, 0]) });
        (model.predict(&dropped, None)?, panel, 1)
    } else {
        let part = sample_partition(n, opts.k, &mut rng)?;
        let labels = part.labels();
        let panel = map_panel(h, w, |y, x| subset_color(labels[token_at(y, x)], part.k()));
        let non_empty = part.sizes().iter().filter(|&&s| s > 0).count();
        (model.predict(image, Some(&part))?, panel, non_empty)
    };
    let wd = &weak.prediction.depth;
    let sd = &strong.prediction.depth;
    let (lo, hi) = wd
        .data()
        .iter()
        .chain(sd.data())
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    let lo = lo.max(1e-6);
    let diff: Vec<f64> = wd.data().iter().zip(sd.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).collect();
    let max_abs_diff = diff.iter().copied().fold(0.0, f64::max);
    // Full white at 10% of the weak depth span.
    let diff_scale = (0.1 * (hi - lo)).max(1e-6);
    let mean = |t: &Tensor<F>| t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64;
    let mut panels = vec![
        Panel { name: "input", image: image_panel(image) },
        Panel { name: "partition", image: partition_panel },
        Panel { name: "weak_depth", image: depth_panel(wd, lo, hi) },
        Panel { name: "strong_depth", image: depth_panel(sd, lo, hi) },
        Panel { name: "difference", image: map_panel(h, w, |y, x| gray(diff[y * w + x] / diff_scale)) },
    ];
    if opts.uncertainty {
        let u: Vec<f64> = weak.prediction.log_uncertainty.data().iter().map(|s| s.as_f64().exp()).collect();
        let (ulo, uhi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = uhi - ulo;
        panels.push(Panel {
            name: "uncertainty",
            image: map_panel(h, w, |y, x| gray(if span > 0.0 { (u[y * w + x] - ulo) / span } else { 0.0 })),
        });
    }
    for panel in &mut panels {
        panel.image = upscale(&panel.image, opts.scale);
    }
    let summary = DemoSummary {
        k: if opts.naive { 0 } else { opts.k },
        non_empty_subsets: non_empty,
        naive: opts.naive,
        max_abs_diff,
        mean_scale_ratio: mean(sd) / mean(wd),
    };
    Ok((panels, summary))
}

/// Stacks panels vertically with a white 2-pixel gap.
pub fn compose(panels: &[Panel]) -> RgbImage {
    let gap = 2;
    let w = panels.iter().map(|p| p.image.width()).max().unwrap_or(0);
    let h = panels.iter().map(|p| p.image.height()).sum::<u32>() + gap * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut y0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, &p.image, 0, i64::from(y0));
        y0 += p.image.height() + gap;
    }
    out
}

/// Number of distinct colours in an image.
pub fn count_colors(img: &RgbImage) -> usize {
    let mut seen: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_colors_are_distinct() {
        for k in [1, 2, 7, 37, 64, 100] {
            let mut cs: Vec<[u8; 3]> = (0..k).map(|i| subset_color(i, k).0).collect();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(cs.len(), k, "K = {k}");
        }
    }

    #[test]
    fn compose_stacks_heights() {
        let a = Panel { name: "a", image: RgbImage::new(4, 3) };
        let b = Panel { name: "b", image: RgbImage::new(4, 5) };
        let out = compose(&[a, b]);
        assert_eq!((out.width(), out.height()), (4, 10));
    }
}
