//! Deterministic rasterization of scenes, for PNG emission and as the model's
//! input rasters.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use sovstg_core::features::ImageRaster;
use sovstg_core::geometry::BBox;

use crate::scene::{ObjectArchetype, Shape, SUBJECT_COLOR};

const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.10];

fn fill_shape(img: &mut ImageRaster, b: &BBox, color: [f64; 3], shape: Shape) {
    let res = img.height as f64;
    let (x1, y1, x2, y2) = b.corners();
    let px1 = ((x1 * res).floor().max(0.0)) as usize;
    let py1 = ((y1 * res).floor().max(0.0)) as usize;
    let px2 = ((x2 * res).ceil().min(res)) as usize;
    let py2 = ((y2 * res).ceil().min(res)) as usize;
    for py in py1..py2 {
        for px in px1..px2 {
            let fx = (px as f64 + 0.5) / res;
            let fy = (py as f64 + 0.5) / res;
            let inside = match shape {
                Shape::Square => fx >= x1 && fx < x2 && fy >= y1 && fy < y2,
                Shape::Circle => {
                    let nx = (fx - b.cx) / (b.w / 2.0);
                    let ny = (fy - b.cy) / (b.h / 2.0);
                    nx * nx + ny * ny <= 1.0
                }
            };
            if inside {
                img.set_pixel(py, px, color);
            }
        }
    }
}

fn fill_person(img: &mut ImageRaster, b: &BBox) {
    // head: circle in the top 30% of the box; body: narrower rectangle below
    let head = BBox::new(b.cx, b.cy - 0.35 * b.h, 0.45 * b.w, 0.3 * b.h);
    let body = BBox::new(b.cx, b.cy + 0.15 * b.h, 0.62 * b.w, 0.7 * b.h);
    fill_shape(img, &body, SUBJECT_COLOR, Shape::Square);
    fill_shape(img, &head, SUBJECT_COLOR, Shape::Circle);
}

/// Rasterize a scene at `res × res`: objects in annotation order, subject on
/// top.
pub fn rasterize(
    subject: &BBox,
    objects: &[(BBox, usize)],
    archetypes: &[ObjectArchetype],
    res: usize,
) -> ImageRaster {
    let mut img = ImageRaster::new(res, res);
    for y in 0..res {
        for x in 0..res {
            img.set_pixel(y, x, BACKGROUND);
        }
    }
    for (bbox, class) in objects {
        let a = &archetypes[*class];
        fill_shape(&mut img, bbox, a.color, a.shape);
    }
    fill_person(&mut img, subject);
    img
}

/// Write a raster as an 8-bit RGB PNG.
pub fn write_png(img: &ImageRaster, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("create {}", path.display()))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_image_data(&bytes)?;
    Ok(())
}
