//! Differentiable Gaussian splatting.
//!
//! Each primitive is projected to a 2D mean and an EWA-approximated screen
//! covariance `Σ' = J W Σ Wᵀ Jᵀ + λ I`, then composited front to back:
//!
//! ```text
//! C(p) = Σ_i c_i α'_i T_i + bg · T_final,   T_i = Π_{j<i} (1 - α'_j)
//! α'_i = min(α_i · exp(-½ δᵀ Σ'⁻¹ δ), 0.99)
//! ```
//!
//! A primitive only touches pixels whose center lies inside its 3σ ellipse.
//! The tiled path ([`render`], [`render_backward`]) and the brute-force
//! [`oracle_render`] evaluate the same per-pixel expression in the same
//! order, so they agree to rounding.

mod backward;
mod forward;
mod oracle;

pub use backward::render_backward;
pub use forward::{front_depth, render};
pub use oracle::oracle_render;

use crate::camera::{dot3, mat3_vec, normalize3, sub3, Camera};
use crate::error::{Error, Result};
use crate::gaussians::{self, GaussianSet, RAW_WIDTH};
use crate::image::ImageTensor;

/// Screen-space dilation added to every projected covariance, in px².
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
/// Squared Mahalanobis radius of the per-splat cutoff (3σ).
pub const CUTOFF_SQ: f64 = 9.0;
/// Primitives with camera depth at or below this are not rendered.
pub const NEAR_PLANE: f64 = 0.01;
/// Primitives whose projected mean lies further than this many half-widths
/// (or half-heights) from the image center are not rendered. Without it a
/// primitive barely in front of the camera but far off-axis projects to a
/// huge ellipse covering the whole image.
pub const GUARD_BAND: f64 = 1.3;
pub const TILE_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// `1×3×H×W`, values in `[0, 1]`.
    pub image: ImageTensor,
    /// `1×1×H×W` accumulated opacity `1 - T_final`.
    pub alpha: ImageTensor,
    /// Row-major `H×W` count of splats that touched each pixel.
    pub contributors: Vec<u32>,
}

/// Per-primitive gradients in the 23-slot layout `(μ, s, q, α, S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads(pub Vec<[f64; RAW_WIDTH]>);

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self(vec![[0.0; RAW_WIDTH]; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn to_array(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.0.len(), RAW_WIDTH), |(i, j)| self.0[i][j])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

/// A primitive after projection, with the intermediates the backward pass reuses.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    pub index: usize,
    pub depth: f64,
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub conic: [[f64; 2]; 2],
    pub opacity: f64,
    /// Clamped color actually composited.
    pub color: [f64; 3],
    pub(crate) color_active: [bool; 3],
    pub(crate) cam_point: [f64; 3],
    pub(crate) jw: [[f64; 3]; 2],
    pub(crate) sigma: [[f64; 3]; 3],
    pub(crate) rot: [[f64; 3]; 3],
    pub(crate) quat_unit: [f64; 4],
    pub(crate) quat_norm: f64,
    pub(crate) view_dir: [f64; 3],
    pub(crate) view_dist: f64,
    pub(crate) basis: [f64; 4],
}

impl ProjectedSplat {
    /// Inclusive pixel bounds of the 3σ ellipse, clipped to the image; `None` if off-screen.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        // Pixel centers sit at integer + 0.5; the ellipse's axis-aligned extent is 3·sqrt(Σ'_ii).
        // A small pad keeps rounding at the ellipse extremes from dropping a pixel;
        // extra candidates are rejected by the exact test in `alpha_at`.
        let rx = (CUTOFF_SQ * self.cov2d[0][0]).sqrt() + 1e-6;
        let ry = (CUTOFF_SQ * self.cov2d[1][1]).sqrt() + 1e-6;
        let x0 = (self.mean2d[0] - rx - 0.5).ceil().max(0.0);
        let x1 = (self.mean2d[0] + rx - 0.5).floor().min(width as f64 - 1.0);
        let y0 = (self.mean2d[1] - ry - 0.5).ceil().max(0.0);
        let y1 = (self.mean2d[1] + ry - 0.5).floor().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }

    /// Opacity at pixel `(x, y)`; `None` outside the cutoff ellipse. The flag
    /// reports whether the 0.99 clamp was hit.
    #[inline]
    pub fn alpha_at(&self, x: usize, y: usize) -> Option<(f64, f64, bool)> {
        let dx = x as f64 + 0.5 - self.mean2d[0];
        let dy = y as f64 + 0.5 - self.mean2d[1];
        let c = &self.conic;
        let m2 = c[0][0] * dx * dx + 2.0 * c[0][1] * dx * dy + c[1][1] * dy * dy;
        if !(m2 <= CUTOFF_SQ) {
            return None;
        }
        let a = self.opacity * (-0.5 * m2).exp();
        if a > ALPHA_MAX {
            Some((ALPHA_MAX, m2, true))
        } else {
            Some((a, m2, false))
        }
    }
}

/// Projects primitive `k`; `None` when it lies at or behind the near plane
/// or its projected mean falls outside the [`GUARD_BAND`].
pub fn project_gaussian(g: &GaussianSet, k: usize, cam: &Camera) -> Option<ProjectedSplat> {
    let mean = g.means[k];
    let t = cam.world_to_camera(mean);
    if t[2] <= NEAR_PLANE {
        return None;
    }
    let kx = &cam.intrinsics;
    let (fx, fy) = (kx.fx, kx.fy);
    let (mx, my) = cam.project_camera_point(t);
    let (hw, hh) = (0.5 * kx.width as f64, 0.5 * kx.height as f64);
    if (mx - hw).abs() > GUARD_BAND * hw || (my - hh).abs() > GUARD_BAND * hh {
        return None;
    }
    let w = cam.world_to_camera_rotation();
    let j = [
        [fx / t[2], 0.0, -fx * t[0] / (t[2] * t[2])],
        [0.0, fy / t[2], -fy * t[1] / (t[2] * t[2])],
    ];
    let mut jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = (0..3).map(|i| j[r][i] * w[i][c]).sum();
        }
    }
    let (qu, qn) = gaussians::normalize_quaternion(g.rotations[k]).ok()?;
    let rot = gaussians::rotation_matrix(qu);
    let s = g.scales[k];
    let mut sigma = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            sigma[a][b] = (0..3).map(|i| rot[a][i] * rot[b][i] * s[i] * s[i]).sum();
        }
    }
    let mut tmp = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            tmp[r][c] = (0..3).map(|i| jw[r][i] * sigma[i][c]).sum();
        }
    }
    let mut cov2d = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            cov2d[r][c] = (0..3).map(|i| tmp[r][i] * jw[c][i]).sum();
        }
    }
    cov2d[0][0] += LOW_PASS;
    cov2d[1][1] += LOW_PASS;
    // Symmetrize so the conic is exactly symmetric.
    let off = 0.5 * (cov2d[0][1] + cov2d[1][0]);
    cov2d[0][1] = off;
    cov2d[1][0] = off;
    let det = cov2d[0][0] * cov2d[1][1] - off * off;
    if !(det > 0.0) {
        return None;
    }
    let conic = [
        [cov2d[1][1] / det, -off / det],
        [-off / det, cov2d[0][0] / det],
    ];

    let to_mean = sub3(mean, cam.center());
    let view_dist = dot3(to_mean, to_mean).sqrt();
    let view_dir = normalize3(to_mean).unwrap_or([0.0, 0.0, 1.0]);
    let basis = gaussians::sh_basis(view_dir);
    let raw = gaussians::sh_color(&g.sh[k], view_dir);
    let mut color = [0.0; 3];
    let mut color_active = [false; 3];
    for c in 0..3 {
        color[c] = raw[c].clamp(0.0, 1.0);
        color_active[c] = raw[c] > 0.0 && raw[c] < 1.0;
    }
    Some(ProjectedSplat {
        index: k,
        depth: t[2],
        mean2d: [mx, my],
        cov2d,
        conic,
        opacity: g.opacities[k],
        color,
        color_active,
        cam_point: t,
        jw,
        sigma,
        rot,
        quat_unit: qu,
        quat_norm: qn,
        view_dir,
        view_dist,
        basis,
    })
}

/// Projects every renderable primitive and sorts front to back (ties by index).
pub fn project_sorted(g: &GaussianSet, cam: &Camera) -> Result<Vec<ProjectedSplat>> {
    cam.validate()?;
    check_set(g)?;
    let mut splats: Vec<ProjectedSplat> = (0..g.len()).filter_map(|k| project_gaussian(g, k, cam)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(splats)
}

fn check_set(g: &GaussianSet) -> Result<()> {
    let n = g.len();
    if [g.scales.len(), g.rotations.len(), g.opacities.len(), g.sh.len()]
        .iter()
        .any(|&m| m != n)
    {
        return Err(Error::dim("render", n, "ragged GaussianSet"));
    }
    Ok(())
}

pub fn camera_space_mean(g: &GaussianSet, k: usize, cam: &Camera) -> [f64; 3] {
    let w = cam.world_to_camera_rotation();
    mat3_vec(&w, sub3(g.means[k], cam.center()))
}
