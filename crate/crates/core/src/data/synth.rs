use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, SceneSample};
use crate::camera::{Camera, Intrinsics};
use crate::cloud::PointCloud;
use crate::error::Result;
use crate::gaussians::{rotation_matrix, sh_from_rgb, GaussianSet};
use crate::image::ImageTensor;
use crate::io::quantize_8bit;
use crate::render::{oracle_render, project_sorted, render};

/// Minimum per-pixel opacity for a splat to define scene depth.
pub const DEPTH_MIN_ALPHA: f64 = 0.3;
/// Bound on the distance between a back-projected depth pixel and the
/// nearest ground-truth Gaussian mean at the default grid spacing.
pub const DEPTH_TOLERANCE: f64 = 0.15;

const WHITE: [f64; 3] = [1.0; 3];
const OBJECT_SALT: u64 = 0x6f62_6a65_6374;
const SCENE_SALT: u64 = 0x7363_656e_65;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSynthConfig {
    pub n_points: usize,
    pub n_views: usize,
    pub image_size: usize,
    pub n_gaussians: usize,
}

impl Default for ObjectSynthConfig {
    fn default() -> Self {
        Self {
            n_points: 1024,
            n_views: 36,
            image_size: 32,
            n_gaussians: 1500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSynthConfig {
    pub n_points: usize,
    pub n_views: usize,
    pub image_size: usize,
    /// Spacing of the ground-truth Gaussian grid on every surface.
    pub spacing: f64,
}

impl Default for SceneSynthConfig {
    fn default() -> Self {
        Self {
            n_points: 20_000,
            n_views: 64,
            image_size: 32,
            spacing: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Sphere { c: [f64; 3], r: f64 },
    Cuboid { c: [f64; 3], half: [f64; 3] },
    Ellipsoid { c: [f64; 3], radii: [f64; 3] },
}

impl Shape {
    fn class(&self) -> usize {
        match self {
            Shape::Sphere { .. } => 0,
            Shape::Cuboid { .. } => 1,
            Shape::Ellipsoid { .. } => 2,
        }
    }

    fn area(&self) -> f64 {
        match *self {
            Shape::Sphere { r, .. } => 4.0 * PI * r * r,
            Shape::Cuboid { half: [a, b, c], .. } => 8.0 * (a * b + b * c + c * a),
            Shape::Ellipsoid { radii: [a, b, c], .. } => {
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match *self {
            Shape::Sphere { c, r } => add(c, unit_vector(rng).map(|v| v * r)),
            Shape::Ellipsoid { c, radii } => {
                let d = unit_vector(rng);
                add(c, [d[0] * radii[0], d[1] * radii[1], d[2] * radii[2]])
            }
            Shape::Cuboid { c, half } => {
                let [a, b, cc] = half;
                let faces = [b * cc, b * cc, a * cc, a * cc, a * b, a * b];
                let axis_face = pick_weighted(rng, &faces);
                let axis = axis_face / 2;
                let sign = if axis_face.is_multiple_of(2) { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis { sign * half[k] } else { rng.gen_range(-half[k]..half[k]) };
                }
                add(c, p)
            }
        }
    }
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if t < w {
            return i;
        }
        t -= w;
    }
    weights.len() - 1
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0; 3].map(|_: u8| rng.gen_range(0.05..0.95))
}

fn ring_cameras(n: usize, size: usize, radius: f64, elevation_deg: f64, fov: f64) -> Result<Vec<Camera>> {
    let el = elevation_deg.to_radians();
    (0..n)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / n as f64;
            let eye = [radius * el.cos() * az.cos(), radius * el.sin(), radius * el.cos() * az.sin()];
            Camera::look_at(Intrinsics::from_fov(size, size, fov), eye, [0.0; 3], [0.0, 1.0, 0.0])
        })
        .collect()
}

/// Colored primitives viewed from an evenly spaced camera ring.
///
/// Point labels are the primitive kind (sphere, box, ellipsoid).
pub fn generate_object_sample(seed: u64, cfg: &ObjectSynthConfig) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ OBJECT_SALT);
    let n_shapes = rng.gen_range(2..=5);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let c = [0; 3].map(|_: u8| rng.gen_range(-0.35..0.35));
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Sphere {
                c,
                r: rng.gen_range(0.15..0.3),
            },
            1 => Shape::Cuboid {
                c,
                half: [0; 3].map(|_: u8| rng.gen_range(0.1..0.25)),
            },
            _ => Shape::Ellipsoid {
                c,
                radii: [0; 3].map(|_: u8| rng.gen_range(0.1..0.3)),
            },
        };
        shapes.push((shape, random_color(&mut rng)));
    }
    let areas: Vec<f64> = shapes.iter().map(|(s, _)| s.area()).collect();

    let mut gt = GaussianSet::default();
    for _ in 0..cfg.n_gaussians {
        let (shape, color) = &shapes[pick_weighted(&mut rng, &areas)];
        gt.push(shape.sample(&mut rng), [0.035; 3], [1.0, 0.0, 0.0, 0.0], 0.95, sh_from_rgb(*color));
    }

    let mut positions = Vec::with_capacity(cfg.n_points);
    let mut colors = Vec::with_capacity(cfg.n_points);
    let mut labels = Vec::with_capacity(cfg.n_points);
    for _ in 0..cfg.n_points {
        let (shape, color) = &shapes[pick_weighted(&mut rng, &areas)];
        positions.push(shape.sample(&mut rng));
        colors.push(*color);
        labels.push(shape.class());
    }

    let cameras = ring_cameras(cfg.n_views, cfg.image_size, 2.5, 25.0, 40.0)?;
    let mut views = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        views.push(oracle_render(&gt, cam, WHITE)?.image);
    }
    let mut images = ImageTensor::stack(&views)?;
    quantize_8bit(&mut images);
    Ok(SceneSample {
        mode: Mode::Object,
        seed,
        points: PointCloud::new(positions),
        colors,
        labels,
        num_classes: 3,
        cameras,
        images,
        depths: None,
        gt,
        background: WHITE,
    })
}

/// Axis-aligned rectangle `{p : p[axis] = offset}` spanning `lo..hi` in the other two axes.
#[derive(Debug, Clone, Copy)]
struct Panel {
    axis: usize,
    offset: f64,
    lo: [f64; 2],
    hi: [f64; 2],
    class: usize,
    color: [f64; 3],
    pattern: Pattern,
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Solid,
    Checker([f64; 3]),
    Stripes([f64; 3]),
}

impl Panel {
    fn others(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    fn point(&self, s: f64, t: f64) -> [f64; 3] {
        let [a, b] = self.others();
        let mut p = [0.0; 3];
        p[self.axis] = self.offset;
        p[a] = s;
        p[b] = t;
        p
    }

    fn color_at(&self, p: [f64; 3]) -> [f64; 3] {
        match self.pattern {
            Pattern::Solid => self.color,
            Pattern::Checker(other) => {
                let [a, b] = self.others();
                let parity = ((p[a] / 0.5).floor() as i64 + (p[b] / 0.5).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    self.color
                } else {
                    other
                }
            }
            Pattern::Stripes(other) => {
                if (p[1] / 0.4).floor() as i64 % 2 == 0 {
                    self.color
                } else {
                    other
                }
            }
        }
    }
}

const ROOM_HALF: f64 = 2.0;
const ROOM_HEIGHT: f64 = 2.5;

fn room_panels(rng: &mut ChaCha8Rng) -> Vec<Panel> {
    let (h, r) = (ROOM_HALF, ROOM_HEIGHT);
    let mut panels = vec![Panel {
        axis: 1,
        offset: 0.0,
        lo: [-h, -h],
        hi: [h, h],
        class: 0,
        color: random_color(rng),
        pattern: Pattern::Checker(random_color(rng)),
    }];
    for (axis, offset) in [(0, -h), (0, h), (2, -h), (2, h)] {
        let lo = if axis == 0 { [0.0, -h] } else { [-h, 0.0] };
        let hi = if axis == 0 { [r, h] } else { [h, r] };
        panels.push(Panel {
            axis,
            offset,
            lo,
            hi,
            class: 1,
            color: random_color(rng),
            pattern: Pattern::Stripes(random_color(rng)),
        });
    }
    for _ in 0..rng.gen_range(2..=4) {
        let c = [rng.gen_range(-1.3..1.3), rng.gen_range(-1.3..1.3)];
        let half = [rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5)];
        let top = rng.gen_range(0.3..0.9);
        let color = random_color(rng);
        let furniture = |axis, offset, lo, hi| Panel {
            axis,
            offset,
            lo,
            hi,
            class: 2,
            color,
            pattern: Pattern::Solid,
        };
        let (x0, x1, z0, z1) = (c[0] - half[0], c[0] + half[0], c[1] - half[1], c[1] + half[1]);
        panels.push(furniture(1, top, [x0, z0], [x1, z1]));
        panels.push(furniture(0, x0, [0.0, z0], [top, z1]));
        panels.push(furniture(0, x1, [0.0, z0], [top, z1]));
        panels.push(furniture(2, z0, [x0, 0.0], [x1, top]));
        panels.push(furniture(2, z1, [x0, 0.0], [x1, top]));
    }
    panels
}

/// Depth of the front-most splat reaching [`DEPTH_MIN_ALPHA`], taken where the
/// pixel ray meets the splat's flat plane (through its mean, normal along its
/// thinnest axis). Falls back to the mean depth when that point lies outside
/// the splat's 3σ extent, which happens at grazing incidence.
/// Values are rounded to `f32` as stored on disk; 0 marks empty pixels.
fn surface_depth(g: &GaussianSet, cam: &Camera) -> Result<ImageTensor> {
    let (w, h) = (cam.width(), cam.height());
    let mut depth = ImageTensor::zeros(1, 1, h, w);
    let mut done = vec![false; w * h];
    let origin = cam.center();
    for s in project_sorted(g, cam)? {
        let Some((x0, x1, y0, y1)) = s.pixel_bounds(w, h) else {
            continue;
        };
        let k = s.index;
        let thin = (0..3)
            .min_by(|&a, &b| g.scales[k][a].total_cmp(&g.scales[k][b]))
            .expect("three axes");
        let r = rotation_matrix(g.rotations[k]);
        let normal = [r[0][thin], r[1][thin], r[2][thin]];
        let mu = g.means[k];
        let reach = 3.0 * g.scales[k].iter().copied().fold(0.0, f64::max);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if done[y * w + x] || !s.alpha_at(x, y).is_some_and(|(a, _, _)| a >= DEPTH_MIN_ALPHA) {
                    continue;
                }
                let far = cam.camera_to_world(cam.unproject(x as f64 + 0.5, y as f64 + 0.5, 1.0));
                let dir = [far[0] - origin[0], far[1] - origin[1], far[2] - origin[2]];
                let nd: f64 = (0..3).map(|i| normal[i] * dir[i]).sum();
                let nm: f64 = (0..3).map(|i| normal[i] * (mu[i] - origin[i])).sum();
                let t = nm / nd;
                let off: f64 = (0..3).map(|i| (origin[i] + t * dir[i] - mu[i]).powi(2)).sum::<f64>().sqrt();
                let d = if t > 0.0 && off <= reach { t } else { s.depth };
                depth.set(0, 0, y, x, d as f32 as f64);
                done[y * w + x] = true;
            }
        }
    }
    Ok(depth)
}

/// A walkthrough of a room with a floor, four walls and box furniture.
///
/// Ground truth is a grid of flat Gaussians on every surface; depth comes
/// from the front-most splat's plane.
pub fn generate_scene_sample(seed: u64, cfg: &SceneSynthConfig) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SCENE_SALT);
    let panels = room_panels(&mut rng);

    let mut gt = GaussianSet::default();
    for panel in &panels {
        let [a, b] = panel.others();
        let na = ((panel.hi[0] - panel.lo[0]) / cfg.spacing).round().max(1.0) as usize;
        let nb = ((panel.hi[1] - panel.lo[1]) / cfg.spacing).round().max(1.0) as usize;
        let (da, db) = ((panel.hi[0] - panel.lo[0]) / na as f64, (panel.hi[1] - panel.lo[1]) / nb as f64);
        let mut scale = [0.0; 3];
        scale[panel.axis] = 0.01;
        scale[a] = 0.6 * da;
        scale[b] = 0.6 * db;
        for i in 0..na {
            for j in 0..nb {
                let p = panel.point(panel.lo[0] + (i as f64 + 0.5) * da, panel.lo[1] + (j as f64 + 0.5) * db);
                gt.push(p, scale, [1.0, 0.0, 0.0, 0.0], 0.95, sh_from_rgb(panel.color_at(p)));
            }
        }
    }

    let areas: Vec<f64> = panels.iter().map(Panel::area).collect();
    let mut positions = Vec::with_capacity(cfg.n_points);
    let mut colors = Vec::with_capacity(cfg.n_points);
    let mut labels = Vec::with_capacity(cfg.n_points);
    for _ in 0..cfg.n_points {
        let panel = &panels[pick_weighted(&mut rng, &areas)];
        let s = rng.gen_range(panel.lo[0]..panel.hi[0]);
        let t = rng.gen_range(panel.lo[1]..panel.hi[1]);
        let p = panel.point(s, t);
        positions.push(p);
        colors.push(panel.color_at(p));
        labels.push(panel.class);
    }

    let mut cameras = Vec::with_capacity(cfg.n_views);
    for t in 0..cfg.n_views {
        let theta = 2.0 * PI * t as f64 / cfg.n_views as f64;
        let eye = [1.0 * theta.cos(), 1.3, 1.0 * theta.sin()];
        let target = [1.9 * (theta + 1.2).cos(), 0.6, 1.9 * (theta + 1.2).sin()];
        cameras.push(Camera::look_at(
            Intrinsics::from_fov(cfg.image_size, cfg.image_size, 70.0),
            eye,
            target,
            [0.0, 1.0, 0.0],
        )?);
    }
    let mut views = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        views.push(render(&gt, cam, WHITE)?.image);
        depths.push(surface_depth(&gt, cam)?);
    }
    let mut images = ImageTensor::stack(&views)?;
    quantize_8bit(&mut images);
    Ok(SceneSample {
        mode: Mode::Scene,
        seed,
        points: PointCloud::new(positions),
        colors,
        labels,
        num_classes: 3,
        cameras,
        images,
        depths: Some(ImageTensor::stack(&depths)?),
        gt,
        background: WHITE,
    })
}
