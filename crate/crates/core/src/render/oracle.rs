use super::{project_sorted, RenderOutput};
use crate::camera::Camera;
use crate::error::Result;
use crate::gaussians::GaussianSet;
use crate::image::ImageTensor;

/// Reference rasterizer: every pixel visits every projected primitive in
/// global depth order. No tiles, no screen-space culling, single thread.
pub fn oracle_render(g: &GaussianSet, cam: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    let splats = project_sorted(g, cam)?;
    let (w, h) = (cam.width(), cam.height());
    let mut image = ImageTensor::zeros(1, 3, h, w);
    let mut alpha = ImageTensor::zeros(1, 1, h, w);
    let mut contributors = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0.0; 3];
            let mut trans = 1.0;
            for s in &splats {
                if let Some((a, _, _)) = s.alpha_at(x, y) {
                    let weight = a * trans;
                    for c in 0..3 {
                        rgb[c] += s.color[c] * weight;
                    }
                    trans *= 1.0 - a;
                    contributors[y * w + x] += 1;
                }
            }
            for c in 0..3 {
                image.set(0, c, y, x, rgb[c] + background[c] * trans);
            }
            alpha.set(0, 0, y, x, 1.0 - trans);
        }
    }
    Ok(RenderOutput {
        image,
        alpha,
        contributors,
    })
}
