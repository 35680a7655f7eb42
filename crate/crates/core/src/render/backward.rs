use rayon::prelude::*;

use super::forward::TileGrid;
use super::{project_sorted, GaussianGrads, ProjectedSplat};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{self, GaussianSet, SH_C1};
use crate::image::ImageTensor;

/// Screen-space adjoints of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    /// `(A00, A01, A11)` with `A01` standing for both off-diagonal entries.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

struct Contribution {
    local: usize,
    alpha: f64,
    clamped: bool,
    trans: f64,
    dx: f64,
    dy: f64,
}

/// Analytic gradient of `L = ⟨grad_image, render(g, cam, background).image⟩`
/// with respect to every primitive parameter.
pub fn render_backward(
    g: &GaussianSet,
    cam: &Camera,
    background: [f64; 3],
    grad_image: &ImageTensor,
) -> Result<GaussianGrads> {
    let (w, h) = (cam.width(), cam.height());
    if grad_image.shape() != (1, 3, h, w) {
        return Err(Error::dim("render_backward", grad_image.shape(), (1, 3, h, w)));
    }
    grad_image.check_finite()?;
    let splats = project_sorted(g, cam)?;
    let grid = TileGrid::build(&splats, w, h);

    let per_tile: Vec<Vec<ScreenGrad>> = (0..grid.tiles_x * grid.tiles_y)
        .into_par_iter()
        .map(|t| tile_backward(t, &grid, &splats, background, grad_image, w, h))
        .collect();

    // Merge in fixed tile order for run-to-run determinism.
    let mut screen = vec![ScreenGrad::default(); splats.len()];
    for (t, grads) in per_tile.iter().enumerate() {
        for (local, sg) in grads.iter().enumerate() {
            screen[grid.lists[t][local] as usize].add(sg);
        }
    }

    let mut out = GaussianGrads::zeros(g.len());
    for (s, sg) in splats.iter().zip(&screen) {
        out.0[s.index] = chain_to_parameters(s, sg, g, cam);
    }
    Ok(out)
}

fn tile_backward(
    t: usize,
    grid: &TileGrid,
    splats: &[ProjectedSplat],
    background: [f64; 3],
    grad_image: &ImageTensor,
    w: usize,
    h: usize,
) -> Vec<ScreenGrad> {
    let list = &grid.lists[t];
    let mut acc = vec![ScreenGrad::default(); list.len()];
    let (x0, x1, y0, y1) = grid.rect(t, w, h);
    let mut contribs: Vec<Contribution> = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let gpix = [grad_image.get(0, 0, y, x), grad_image.get(0, 1, y, x), grad_image.get(0, 2, y, x)];
            if gpix == [0.0; 3] {
                continue;
            }
            contribs.clear();
            let mut trans = 1.0;
            for (local, &pos) in list.iter().enumerate() {
                let s = &splats[pos as usize];
                if let Some((a, _, clamped)) = s.alpha_at(x, y) {
                    contribs.push(Contribution {
                        local,
                        alpha: a,
                        clamped,
                        trans,
                        dx: x as f64 + 0.5 - s.mean2d[0],
                        dy: y as f64 + 0.5 - s.mean2d[1],
                    });
                    trans *= 1.0 - a;
                }
            }
            // Color accumulated behind the current splat, including the background.
            let mut behind = [background[0] * trans, background[1] * trans, background[2] * trans];
            for cb in contribs.iter().rev() {
                let s = &splats[list[cb.local] as usize];
                let sg = &mut acc[cb.local];
                let weight = cb.alpha * cb.trans;
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    sg.color[c] += gpix[c] * weight;
                    d_alpha += gpix[c] * (s.color[c] * cb.trans - behind[c] / (1.0 - cb.alpha));
                }
                for c in 0..3 {
                    behind[c] += s.color[c] * weight;
                }
                if cb.clamped {
                    continue;
                }
                // α' = α · exp(-½ m²)
                let falloff = cb.alpha / s.opacity;
                sg.opacity += d_alpha * falloff;
                let d_m2 = -0.5 * d_alpha * cb.alpha;
                let a = &s.conic;
                sg.conic[0] += d_m2 * cb.dx * cb.dx;
                sg.conic[1] += d_m2 * 2.0 * cb.dx * cb.dy;
                sg.conic[2] += d_m2 * cb.dy * cb.dy;
                sg.mean[0] += d_m2 * -2.0 * (a[0][0] * cb.dx + a[0][1] * cb.dy);
                sg.mean[1] += d_m2 * -2.0 * (a[0][1] * cb.dx + a[1][1] * cb.dy);
            }
        }
    }
    acc
}

fn mat2_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn chain_to_parameters(s: &ProjectedSplat, sg: &ScreenGrad, g: &GaussianSet, cam: &Camera) -> [f64; gaussians::RAW_WIDTH] {
    let mut out = [0.0; gaussians::RAW_WIDTH];
    let k = s.index;
    let (fx, fy) = (cam.intrinsics.fx, cam.intrinsics.fy);
    let t = s.cam_point;
    let (tz, tz2, tz3) = (t[2], t[2] * t[2], t[2] * t[2] * t[2]);

    // Conic A = Σ'⁻¹: dL/dΣ' = -A G A with G the full-matrix adjoint of A.
    let g_conic = [[sg.conic[0], 0.5 * sg.conic[1]], [0.5 * sg.conic[1], sg.conic[2]]];
    let tmp = mat2_mul(&s.conic, &g_conic);
    let g_cov = mat2_mul(&tmp, &s.conic).map(|r| r.map(|v| -v));

    // Σ' = T Σ Tᵀ + λI with T = J W: dL/dT = (G + Gᵀ) T Σ, dL/dΣ = Tᵀ G T.
    let jw = &s.jw;
    let sigma = &s.sigma;
    let gs = [
        [2.0 * g_cov[0][0], g_cov[0][1] + g_cov[1][0]],
        [g_cov[0][1] + g_cov[1][0], 2.0 * g_cov[1][1]],
    ];
    let mut t_sigma = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            t_sigma[r][c] = (0..3).map(|i| jw[r][i] * sigma[i][c]).sum();
        }
    }
    let mut d_t = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            d_t[r][c] = gs[r][0] * t_sigma[0][c] + gs[r][1] * t_sigma[1][c];
        }
    }
    let mut d_sigma = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            d_sigma[a][b] = (0..2).map(|r| (0..2).map(|q| jw[r][a] * g_cov[r][q] * jw[q][b]).sum::<f64>()).sum();
        }
    }

    // T = J W: dL/dJ = dT Wᵀ.
    let wmat = cam.world_to_camera_rotation();
    let mut d_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            d_j[r][c] = (0..3).map(|i| d_t[r][i] * wmat[c][i]).sum();
        }
    }
    let mut d_cam = [0.0; 3];
    d_cam[0] += d_j[0][2] * (-fx / tz2);
    d_cam[1] += d_j[1][2] * (-fy / tz2);
    d_cam[2] += d_j[0][0] * (-fx / tz2)
        + d_j[0][2] * (2.0 * fx * t[0] / tz3)
        + d_j[1][1] * (-fy / tz2)
        + d_j[1][2] * (2.0 * fy * t[1] / tz3);
    // Projected mean.
    d_cam[0] += sg.mean[0] * fx / tz;
    d_cam[1] += sg.mean[1] * fy / tz;
    d_cam[2] += -sg.mean[0] * fx * t[0] / tz2 - sg.mean[1] * fy * t[1] / tz2;

    // t = W (μ - c): dμ = Wᵀ dt.
    let mut d_mean = [0.0; 3];
    for i in 0..3 {
        d_mean[i] = (0..3).map(|r| wmat[r][i] * d_cam[r]).sum();
    }

    // Color through the clamp, the SH basis and the view direction.
    let sh = &g.sh[k];
    let mut d_dir = [0.0; 3];
    for c in 0..3 {
        if !s.color_active[c] {
            continue;
        }
        let dc = sg.color[c];
        for i in 0..4 {
            out[11 + c * 4 + i] = dc * s.basis[i];
        }
        d_dir[0] += dc * -SH_C1 * sh[c * 4 + 3];
        d_dir[1] += dc * -SH_C1 * sh[c * 4 + 1];
        d_dir[2] += dc * SH_C1 * sh[c * 4 + 2];
    }
    if s.view_dist > 1e-12 {
        let dir = s.view_dir;
        let proj = d_dir[0] * dir[0] + d_dir[1] * dir[1] + d_dir[2] * dir[2];
        for i in 0..3 {
            d_mean[i] += (d_dir[i] - dir[i] * proj) / s.view_dist;
        }
    }
    out[0..3].copy_from_slice(&d_mean);

    // Σ = M Mᵀ with M = R diag(s): dM = (G + Gᵀ) M.
    let scale = g.scales[k];
    let rot = &s.rot;
    let mut d_m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            d_m[r][c] = (0..3)
                .map(|i| (d_sigma[r][i] + d_sigma[i][r]) * rot[i][c] * scale[c])
                .sum();
        }
    }
    let mut d_rot = [[0.0; 3]; 3];
    for i in 0..3 {
        out[3 + i] = (0..3).map(|r| d_m[r][i] * rot[r][i]).sum();
        for r in 0..3 {
            d_rot[r][i] = d_m[r][i] * scale[i];
        }
    }
    let jac = gaussians::rotation_matrix_jacobian(s.quat_unit);
    let mut d_qu = [0.0; 4];
    for (i, dq) in d_qu.iter_mut().enumerate() {
        *dq = (0..3).map(|a| (0..3).map(|b| d_rot[a][b] * jac[i][a][b]).sum::<f64>()).sum();
    }
    let proj: f64 = (0..4).map(|i| d_qu[i] * s.quat_unit[i]).sum();
    for i in 0..4 {
        out[6 + i] = (d_qu[i] - s.quat_unit[i] * proj) / s.quat_norm;
    }
    out[10] = sg.opacity;
    out
}
