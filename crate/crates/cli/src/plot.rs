//! PNG rendering: mask and CAM panels for one sample, and the
//! class-to-time attention chart.

use std::path::{Path, PathBuf};

use anyhow::Result;
use exact_core::affinity::extract_t2c_attention;
use exact_core::cam::{pseudo_mask, upsample_labels};
use exact_core::cbcam::cb_cam_normalized;
use exact_core::clues::PrototypeBank;
use exact_core::config::ExperimentConfig;
use exact_core::data::{present_classes, SitsSample};
use exact_core::params::ParamStore;
use exact_core::training::{cam_stack, infer};
use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, Axis};

const SCALE: u32 = 8;
const GAP: u32 = 4;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn class_color(c: u16) -> Rgb<u8> {
    const PALETTE: [[u8; 3]; 10] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
        [188, 189, 34],
        [23, 190, 207],
    ];
    if c == 0 {
        Rgb([0, 0, 0])
    } else {
        Rgb(PALETTE[(c as usize - 1) % PALETTE.len()])
    }
}

/// Dark blue to yellow through red.
fn heat(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let (r, g, b) = if v < 0.5 {
        let s = v / 0.5;
        (200.0 * s, 0.0, 120.0 * (1.0 - s) + 40.0)
    } else {
        let s = (v - 0.5) / 0.5;
        (200.0 + 55.0 * s, 230.0 * s, 40.0 * (1.0 - s))
    };
    Rgb([r as u8, g as u8, b as u8])
}

struct Canvas {
    img: RgbImage,
    cell_w: u32,
    cell_h: u32,
}

impl Canvas {
    fn new(cols: u32, rows: u32, h: usize, w: usize) -> Self {
        let cell_w = w as u32 * SCALE;
        let cell_h = h as u32 * SCALE;
        let img = RgbImage::from_pixel(
            cols * cell_w + (cols + 1) * GAP,
            rows * cell_h + (rows + 1) * GAP,
            WHITE,
        );
        Canvas { img, cell_w, cell_h }
    }

    fn draw(&mut self, col: u32, row: u32, cells: ArrayView2<Rgb<u8>>) {
        let x0 = GAP + col * (self.cell_w + GAP);
        let y0 = GAP + row * (self.cell_h + GAP);
        let sx = self.cell_w / cells.ncols() as u32;
        let sy = self.cell_h / cells.nrows() as u32;
        for y in 0..self.cell_h {
            for x in 0..self.cell_w {
                let c = cells[[(y / sy) as usize, (x / sx) as usize]];
                self.img.put_pixel(x0 + x, y0 + y, c);
            }
        }
    }
}

fn mask_cells(mask: &Array2<u16>) -> Array2<Rgb<u8>> {
    mask.mapv(class_color)
}

/// Time-averaged first three channels, each stretched to its own range.
fn composite(series: &ndarray::Array4<f32>) -> Array2<Rgb<u8>> {
    let (_, c, h, w) = series.dim();
    let mean = series.mean_axis(Axis(0)).unwrap();
    let mut out = Array2::from_elem((h, w), Rgb([0, 0, 0]));
    for ch in 0..c.min(3) {
        let band = mean.index_axis(Axis(0), ch);
        let lo = band.fold(f32::INFINITY, |a, &b| a.min(b));
        let hi = band.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for ((y, x), &v) in band.indexed_iter() {
            out[[y, x]].0[ch] = (255.0 * (v - lo) / span) as u8;
        }
    }
    out
}

/// Patch-level column `k` of a `[P, K]` map laid out on the patch grid.
fn grid_cells(cam: &Array2<f64>, k: usize, nh: usize, nw: usize) -> Array2<Rgb<u8>> {
    Array2::from_shape_fn((nh, nw), |(i, j)| heat(cam[[i * nw + j, k]]))
}

fn attention_chart(a_tilde: &Array2<f64>, present: &[usize]) -> RgbImage {
    let (t, _) = a_tilde.dim();
    let (width, height, margin) = (480u32, 240u32, 20u32);
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let axis = Rgb([0, 0, 0]);
    for x in margin..width - margin {
        img.put_pixel(x, height - margin, axis);
    }
    for y in margin..=height - margin {
        img.put_pixel(margin, y, axis);
    }
    let ymax = present
        .iter()
        .flat_map(|&k| a_tilde.column(k).to_vec())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let plot_w = (width - 2 * margin) as f64;
    let plot_h = (height - 2 * margin) as f64;
    let point = |ti: usize, v: f64| {
        let x = margin as f64 + plot_w * ti as f64 / (t.max(2) - 1) as f64;
        let y = (height - margin) as f64 - plot_h * v / ymax;
        (x, y)
    };
    for &k in present {
        let color = class_color(k as u16 + 1);
        for ti in 0..t.saturating_sub(1) {
            let (x0, y0) = point(ti, a_tilde[[ti, k]]);
            let (x1, y1) = point(ti + 1, a_tilde[[ti + 1, k]]);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                let x = (x0 + f * (x1 - x0)).round() as u32;
                let y = (y0 + f * (y1 - y0)).round() as u32;
                for dy in 0..2 {
                    if x < width && y + dy < height {
                        img.put_pixel(x, y + dy, color);
                    }
                }
            }
        }
    }
    img
}

/// Writes `panels_<id>.png` and `attention_<id>.png` into `out`.
pub fn render(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    bank: Option<&PrototypeBank>,
    sample: &SitsSample,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let m = &cfg.model;
    let (nh, nw) = m.grid();
    let inf = infer(cfg, params, sample)?;
    let stack = cam_stack(cfg, &inf, &sample.image_labels)?;
    let cb = match bank {
        Some(b) => Some(cb_cam_normalized(&inf.z_t_dense, b, &sample.image_labels, cfg.cam.cb_embedding)?),
        None => None,
    };
    // Zero-based columns of the present classes.
    let present: Vec<usize> = present_classes(&sample.image_labels).iter().map(|c| c - 1).collect();
    let to_mask = |cam: &Array2<f64>| -> Result<Array2<u16>> {
        let labels = pseudo_mask(cam, cfg.cam.theta_bg, &sample.image_labels)?;
        Ok(upsample_labels(&labels, nh, nw, m.patch_h, m.patch_w))
    };

    // Row 0: composite, ground truth, raw pseudo mask, CB pseudo mask.
    // One row per present class: raw CAM, CB-CAM.
    let rows = 1 + present.len() as u32;
    let mut canvas = Canvas::new(4, rows, m.h, m.w);
    canvas.draw(0, 0, composite(&sample.series).view());
    canvas.draw(1, 0, mask_cells(&sample.mask).view());
    canvas.draw(2, 0, mask_cells(&to_mask(&stack.cam_fused)?).view());
    if let Some(cb) = &cb {
        canvas.draw(3, 0, mask_cells(&to_mask(cb)?).view());
    }
    for (r, &k) in present.iter().enumerate() {
        let row = r as u32 + 1;
        canvas.draw(0, row, grid_cells(&stack.cam_fused, k, nh, nw).view());
        if let Some(cb) = &cb {
            canvas.draw(1, row, grid_cells(cb, k, nh, nw).view());
        }
    }
    std::fs::create_dir_all(out)?;
    let panels = out.join(format!("panels_{}.png", sample.sample_id));
    canvas.img.save(&panels)?;

    let attn = extract_t2c_attention(&inf.temporal_attention, m.k, cfg.affinity.layer)?;
    let chart = out.join(format!("attention_{}.png", sample.sample_id));
    attention_chart(&attn.a_tilde, &present).save(&chart)?;
    Ok(vec![panels, chart])
}
