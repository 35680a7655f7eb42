use rayon::prelude::*;

use super::{project_sorted, ProjectedSplat, RenderOutput, TILE_SIZE};
use crate::camera::Camera;
use crate::error::Result;
use crate::gaussians::GaussianSet;
use crate::image::ImageTensor;

/// Screen tiles with the (front-to-back) positions of the splats overlapping each.
pub(super) struct TileGrid {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn build(splats: &[ProjectedSplat], width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (pos, s) in splats.iter().enumerate() {
            let Some((x0, x1, y0, y1)) = s.pixel_bounds(width, height) else {
                continue;
            };
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    lists[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        Self { tiles_x, tiles_y, lists }
    }

    /// Pixel rectangle `(x0, x1, y0, y1)` (exclusive ends) of tile `t`.
    pub fn rect(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(width), y0, (y0 + TILE_SIZE).min(height))
    }
}

struct TilePixels {
    rgb: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    count: Vec<u32>,
}

/// Tiled forward rasterization.
pub fn render(g: &GaussianSet, cam: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    let splats = project_sorted(g, cam)?;
    let (w, h) = (cam.width(), cam.height());
    let grid = TileGrid::build(&splats, w, h);
    let tiles: Vec<TilePixels> = (0..grid.tiles_x * grid.tiles_y)
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.rect(t, w, h);
            let list = &grid.lists[t];
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TilePixels {
                rgb: Vec::with_capacity(n),
                alpha: Vec::with_capacity(n),
                count: Vec::with_capacity(n),
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut rgb = [0.0; 3];
                    let mut trans = 1.0;
                    let mut count = 0;
                    for &pos in list {
                        let s = &splats[pos as usize];
                        let Some((a, _, _)) = s.alpha_at(x, y) else {
                            continue;
                        };
                        let weight = a * trans;
                        for c in 0..3 {
                            rgb[c] += s.color[c] * weight;
                        }
                        trans *= 1.0 - a;
                        count += 1;
                    }
                    for c in 0..3 {
                        rgb[c] += background[c] * trans;
                    }
                    out.rgb.push(rgb);
                    out.alpha.push(1.0 - trans);
                    out.count.push(count);
                }
            }
            out
        })
        .collect();

    let mut image = ImageTensor::zeros(1, 3, h, w);
    let mut alpha = ImageTensor::zeros(1, 1, h, w);
    let mut contributors = vec![0u32; w * h];
    for (t, tile) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = grid.rect(t, w, h);
        let mut i = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    image.set(0, c, y, x, tile.rgb[i][c]);
                }
                alpha.set(0, 0, y, x, tile.alpha[i]);
                contributors[y * w + x] = tile.count[i];
                i += 1;
            }
        }
    }
    Ok(RenderOutput {
        image,
        alpha,
        contributors,
    })
}

/// Per-pixel camera depth of the front-most splat whose opacity at that pixel
/// reaches `min_alpha`; 0 where no splat qualifies.
pub fn front_depth(g: &GaussianSet, cam: &Camera, min_alpha: f64) -> Result<ImageTensor> {
    let splats = project_sorted(g, cam)?;
    let (w, h) = (cam.width(), cam.height());
    let grid = TileGrid::build(&splats, w, h);
    let mut depth = ImageTensor::zeros(1, 1, h, w);
    for t in 0..grid.tiles_x * grid.tiles_y {
        let (x0, x1, y0, y1) = grid.rect(t, w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let hit = grid.lists[t].iter().map(|&p| &splats[p as usize]).find(|s| {
                    s.alpha_at(x, y).is_some_and(|(a, _, _)| a >= min_alpha)
                });
                if let Some(s) = hit {
                    depth.set(0, 0, y, x, s.depth);
                }
            }
        }
    }
    Ok(depth)
}
