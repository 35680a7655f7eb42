//! Photometric losses, foreground masks and PSNR.
//!
//! Squared errors are summed over color channels inside each pixel term and
//! normalized by the number of pixels (`V·H·W`), not by the element count.

use crate::camera::{project_points, Camera};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const PSNR_CAP_DB: f64 = 100.0;

/// Loss value with its gradient w.r.t. the rendered images.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: ImageTensor,
}

fn check_pair(op: &'static str, a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse_loss(rendered: &ImageTensor, gt: &ImageTensor) -> Result<LossOutput> {
    check_pair("mse_loss", rendered, gt)?;
    let (v, _, h, w) = rendered.shape();
    let pixels = (v * h * w).max(1) as f64;
    let mut value = 0.0;
    let mut grad = ImageTensor::zeros(v, rendered.channels(), h, w);
    for ((g, &r), &t) in grad.data_mut().iter_mut().zip(rendered.data()).zip(gt.data()) {
        let d = r - t;
        value += d * d;
        *g = 2.0 * d / pixels;
    }
    Ok(LossOutput {
        value: value / pixels,
        grad,
    })
}

/// Foreground pixels of each rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct FgMask {
    pub width: usize,
    pub height: usize,
    pub dilation: usize,
    /// One row-major `H×W` mask per view.
    pub views: Vec<Vec<bool>>,
}

impl FgMask {
    pub fn background(views: usize, height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            dilation: 0,
            views: vec![vec![false; width * height]; views],
        }
    }

    pub fn stack(parts: Vec<FgMask>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Ok(Self::background(0, 0, 0));
        };
        let (w, h, d) = (first.width, first.height, first.dilation);
        let mut views = Vec::new();
        for p in parts {
            if (p.width, p.height) != (w, h) {
                return Err(Error::dim("FgMask::stack", (h, w), (p.height, p.width)));
            }
            views.extend(p.views);
        }
        Ok(Self {
            width: w,
            height: h,
            dilation: d,
            views,
        })
    }

    pub fn count(&self) -> usize {
        self.views.iter().flatten().filter(|&&b| b).count()
    }
}

/// Pixels hit by projected points, dilated by a `(2r+1)²` square.
pub fn compute_fg_mask(points: &PointCloud, cam: &Camera, dilation: usize) -> Result<FgMask> {
    let corr = project_points(points, cam)?;
    let (w, h) = (cam.width(), cam.height());
    let mut mask = vec![false; w * h];
    for (pix, hit) in corr.per_pixel.iter().enumerate() {
        if hit.is_none() {
            continue;
        }
        let (x, y) = (pix % w, pix / w);
        for yy in y.saturating_sub(dilation)..=(y + dilation).min(h - 1) {
            for xx in x.saturating_sub(dilation)..=(x + dilation).min(w - 1) {
                mask[yy * w + xx] = true;
            }
        }
    }
    Ok(FgMask {
        width: w,
        height: h,
        dilation,
        views: vec![mask],
    })
}

/// `ω_fg · L(fg) + ω_bg · L(bg)`, each region normalized by its own pixel count.
pub fn weighted_object_loss(
    rendered: &ImageTensor,
    gt: &ImageTensor,
    mask: &FgMask,
    w_fg: f64,
    w_bg: f64,
) -> Result<LossOutput> {
    check_pair("weighted_object_loss", rendered, gt)?;
    let (v, c, h, w) = rendered.shape();
    if (mask.views.len(), mask.height, mask.width) != (v, h, w) {
        return Err(Error::dim(
            "weighted_object_loss mask",
            (v, h, w),
            (mask.views.len(), mask.height, mask.width),
        ));
    }
    let n_fg = mask.count();
    let n_bg = v * h * w - n_fg;
    let mut sums = [0.0, 0.0];
    let mut grad = ImageTensor::zeros(v, c, h, w);
    for vi in 0..v {
        for y in 0..h {
            for x in 0..w {
                let fg = mask.views[vi][y * w + x];
                let (weight, count) = if fg { (w_fg, n_fg) } else { (w_bg, n_bg) };
                for ch in 0..c {
                    let d = rendered.get(vi, ch, y, x) - gt.get(vi, ch, y, x);
                    sums[usize::from(!fg)] += d * d;
                    grad.set(vi, ch, y, x, weight * 2.0 * d / count as f64);
                }
            }
        }
    }
    let fg_term = if n_fg > 0 { sums[0] / n_fg as f64 } else { 0.0 };
    let bg_term = if n_bg > 0 { sums[1] / n_bg as f64 } else { 0.0 };
    Ok(LossOutput {
        value: w_fg * fg_term + w_bg * bg_term,
        grad,
    })
}

/// Peak signal-to-noise ratio over all elements, capped at [`PSNR_CAP_DB`].
pub fn psnr(rendered: &ImageTensor, gt: &ImageTensor, peak: f64) -> Result<f64> {
    check_pair("psnr", rendered, gt)?;
    let n = rendered.data().len().max(1) as f64;
    let mse: f64 = rendered
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}
