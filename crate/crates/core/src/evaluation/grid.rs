//! Comparison grids: one row per content image, one column per style
//! exemplar, originals along the top row and left column.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use log::warn;

use crate::domain::ImageTensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridReport {
    pub width: u32,
    pub height: u32,
    pub warnings: Vec<String>,
}

fn blit(canvas: &mut RgbImage, img: &ImageTensor, tx: u32, ty: u32) {
    let r = img.resolution() as u32;
    let rgb = img.to_rgb8();
    for y in 0..r {
        for x in 0..r {
            let i = ((y * r + x) * 3) as usize;
            canvas.put_pixel(tx + x, ty + y, Rgb([rgb[i], rgb[i + 1], rgb[i + 2]]));
        }
    }
}

/// Magenta and black checkers: never confused with a real output.
pub fn placeholder_pixel(x: u32, y: u32) -> Rgb<u8> {
    if ((x / 4) + (y / 4)).is_multiple_of(2) {
        Rgb([255, 0, 255])
    } else {
        Rgb([0, 0, 0])
    }
}

fn fill_placeholder(canvas: &mut RgbImage, r: u32, tx: u32, ty: u32) {
    for y in 0..r {
        for x in 0..r {
            canvas.put_pixel(tx + x, ty + y, placeholder_pixel(x, y));
        }
    }
}

/// Writes a `(rows + 1) x (cols + 1)` tile composite. Missing images get a
/// placeholder tile and a warning.
pub fn emit_grid(
    path: &Path,
    resolution: usize,
    rows: &[(String, Option<&ImageTensor>)],
    cols: &[(String, Option<&ImageTensor>)],
    outputs: &BTreeMap<(usize, usize), ImageTensor>,
) -> Result<GridReport> {
    let r = resolution as u32;
    let (w, h) = ((cols.len() as u32 + 1) * r, (rows.len() as u32 + 1) * r);
    let mut canvas = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut warnings = Vec::new();
    let mut tile = |canvas: &mut RgbImage,
                    img: Option<&ImageTensor>,
                    tx: u32,
                    ty: u32,
                    what: String| match img {
        Some(i) if i.resolution() == resolution => blit(canvas, i, tx, ty),
        _ => {
            warn!("grid: {what} missing, placeholder drawn");
            warnings.push(format!("{what} missing"));
            fill_placeholder(canvas, r, tx, ty);
        }
    };
    for (j, (id, img)) in cols.iter().enumerate() {
        tile(
            &mut canvas,
            *img,
            (j as u32 + 1) * r,
            0,
            format!("style original {id}"),
        );
    }
    for (i, (id, img)) in rows.iter().enumerate() {
        let ty = (i as u32 + 1) * r;
        tile(&mut canvas, *img, 0, ty, format!("content original {id}"));
        for (j, (sid, _)) in cols.iter().enumerate() {
            tile(
                &mut canvas,
                outputs.get(&(i, j)),
                (j as u32 + 1) * r,
                ty,
                format!("output {id} x {sid}"),
            );
        }
    }
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    canvas.save(path)?;
    Ok(GridReport {
        width: w,
        height: h,
        warnings,
    })
}
