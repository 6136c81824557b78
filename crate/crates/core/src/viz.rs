//! PNG overlays of hard masks on the token grid, kept cells outlined.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{OcvtpError, Result};
use crate::objective::HardMasks;

/// Pixels per grid cell.
pub const CELL: u32 = 16;
const OUTLINE: u32 = 2;
const KEPT_OUTLINE: Rgb<u8> = Rgb([255, 255, 255]);
const PADDING: Rgb<u8> = Rgb([32, 32, 32]);

/// Square grid for `n` tokens; non-square counts need an explicit shape.
pub fn infer_grid(n: usize) -> Result<(usize, usize)> {
    let side = n.isqrt();
    if side * side != n || n == 0 {
        return Err(OcvtpError::config(
            "grid",
            format!("{n} tokens do not form a square grid; pass an explicit HxW"),
        ));
    }
    Ok((side, side))
}

/// Parses `"HxW"`.
pub fn parse_grid(text: &str) -> Result<(usize, usize)> {
    let bad = || OcvtpError::config("grid", format!("expected HxW, got {text:?}"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Distinct, evenly spread hue per slot.
pub fn slot_color(slot: usize) -> Rgb<u8> {
    let hue = (slot as f64 * 0.618_033_988_75).fract() * 6.0;
    let (s, v) = (0.65, 0.9);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |u: f64| ((u + m) * 255.0).round() as u8;
    Rgb([to8(r), to8(g), to8(b)])
}

/// Token `j` sits at row `j / w`, column `j % w`; cells past `n` stay dark.
pub fn render_masks(masks: &HardMasks, kept: &[usize], grid: (usize, usize)) -> Result<RgbImage> {
    let (h, w) = grid;
    let n = masks.n();
    if h * w < n {
        return Err(OcvtpError::config(
            "grid",
            format!("{h}x{w} grid cannot hold {n} tokens"),
        ));
    }
    if let Some(&j) = kept.iter().find(|&&j| j >= n) {
        return Err(OcvtpError::Bounds { index: j, len: n });
    }
    let mut is_kept = vec![false; n];
    kept.iter().for_each(|&j| is_kept[j] = true);
    let mut img = RgbImage::from_pixel(w as u32 * CELL, h as u32 * CELL, PADDING);
    for (j, &kept) in is_kept.iter().enumerate() {
        let (row, col) = ((j / w) as u32, (j % w) as u32);
        let fill = slot_color(masks.owner[j]);
        for dy in 0..CELL {
            for dx in 0..CELL {
                let edge = dx < OUTLINE || dy < OUTLINE || dx >= CELL - OUTLINE || dy >= CELL - OUTLINE;
                let px = if kept && edge { KEPT_OUTLINE } else { fill };
                img.put_pixel(col * CELL + dx, row * CELL + dy, px);
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => OcvtpError::storage(path, io),
        other => OcvtpError::Format(format!("{}: {other}", path.display())),
    })
}
