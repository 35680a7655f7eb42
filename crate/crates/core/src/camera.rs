//! Pinhole camera geometry.
//!
//! Cameras follow the computer-vision convention: +x right, +y down, +z
//! forward. Extrinsics are stored as a column-vector camera-to-world rigid
//! transform, so a camera-space point `p_c` maps to world space as
//! `R p_c + t`. Row-vector matrices (`[p, 1] · M`) are accepted through
//! [`Extrinsics::from_row_vector`], which transposes at the boundary.
//!
//! Pixel `(u, v)` covers `[u, u+1) × [v, v+1)` in continuous image
//! coordinates; `u` is the column (from the x axis) and `v` the row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Camera-space depth at or below which a point counts as behind the camera.
pub const EPS_DEPTH: f64 = 1e-6;

const RIGID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square-pixel intrinsics with the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.width >= 1
            && self.height >= 1
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidCamera(format!("bad intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtrinsicsConvention {
    CameraToWorld,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    /// Row-major 4×4, column-vector convention.
    pub matrix: [[f64; 4]; 4],
    pub convention: ExtrinsicsConvention,
}

impl Extrinsics {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self::camera_to_world(m)
    }

    pub fn camera_to_world(matrix: [[f64; 4]; 4]) -> Self {
        Self {
            matrix,
            convention: ExtrinsicsConvention::CameraToWorld,
        }
    }

    /// Builds from a rotation (columns are camera axes in world space) and a camera center.
    pub fn from_rotation_center(rotation: [[f64; 3]; 3], center: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&rotation[r]);
            m[r][3] = center[r];
        }
        m[3][3] = 1.0;
        Self::camera_to_world(m)
    }

    /// Accepts a camera-to-world matrix written for row vectors (`[p, 1] · M`).
    pub fn from_row_vector(matrix: [[f64; 4]; 4]) -> Self {
        let mut t = [[0.0; 4]; 4];
        for (r, row) in matrix.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                t[c][r] = x;
            }
        }
        Self::camera_to_world(t)
    }

    pub fn from_row_major(values: &[f64; 16]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&values[r * 4..r * 4 + 4]);
        }
        Self::camera_to_world(m)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            out[r * 4..r * 4 + 4].copy_from_slice(&self.matrix[r]);
        }
        out
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        if m.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCamera("non-finite extrinsics".into()));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidCamera(format!(
                "last extrinsics row must be (0,0,0,1), got {:?}",
                m[3]
            )));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > RIGID_TOL {
                    return Err(Error::InvalidCamera(format!(
                        "rotation block is not orthonormal (RᵀR[{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        let det = det3(&r);
        if (det - 1.0).abs() > RIGID_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(())
    }
}

pub(crate) fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, extrinsics: Extrinsics) -> Result<Self> {
        let cam = Self {
            intrinsics,
            extrinsics,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` only needs to be non-parallel
    /// to the viewing direction.
    pub fn look_at(intrinsics: Intrinsics, eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let forward = normalize3(sub3(target, eye))
            .ok_or_else(|| Error::InvalidCamera("eye coincides with target".into()))?;
        let right = normalize3(cross3(forward, up))
            .ok_or_else(|| Error::InvalidCamera("up is parallel to the view direction".into()))?;
        // Image y points down, so the camera's down axis is forward × right.
        let down = cross3(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::new(intrinsics, Extrinsics::from_rotation_center(rotation, eye))
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.extrinsics.validate()
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn center(&self) -> [f64; 3] {
        self.extrinsics.center()
    }

    /// World-to-camera rotation (transpose of the stored camera-to-world block).
    pub fn world_to_camera_rotation(&self) -> [[f64; 3]; 3] {
        let r = self.extrinsics.rotation();
        [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ]
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let w = self.world_to_camera_rotation();
        let d = sub3(p, self.center());
        mat3_vec(&w, d)
    }

    pub fn camera_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.extrinsics.rotation();
        add3(mat3_vec(&r, p), self.center())
    }

    /// Continuous pixel coordinates of a camera-space point (no bounds check).
    pub fn project_camera_point(&self, pc: [f64; 3]) -> (f64, f64) {
        let k = &self.intrinsics;
        (pc[0] * k.fx / pc[2] + k.cx, pc[1] * k.fy / pc[2] + k.cy)
    }

    /// Camera-space point seen through continuous pixel `(x, y)` at depth `d`.
    pub fn unproject(&self, x: f64, y: f64, d: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        [(x - k.cx) / k.fx * d, (y - k.cy) / k.fy * d, d]
    }

    /// Applies a world-space rigid transform (column-vector 4×4) to the pose.
    pub fn transformed(&self, rigid: &[[f64; 4]; 4]) -> Result<Self> {
        let m = mat4_mul(rigid, &self.extrinsics.matrix);
        Camera::new(self.intrinsics, Extrinsics::camera_to_world(m))
    }
}

/// Floor quantization of a continuous pixel coordinate.
pub fn quantize(x: f64) -> i64 {
    x.floor() as i64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelHit {
    /// Column index.
    pub u: usize,
    /// Row index.
    pub v: usize,
    /// Camera-space depth, always `> EPS_DEPTH`.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelCorrespondence {
    pub width: usize,
    pub height: usize,
    pub per_point: Vec<Option<PixelHit>>,
    /// Row-major `height × width`; the minimum-depth point landing in each pixel.
    pub per_pixel: Vec<Option<usize>>,
}

impl PixelCorrespondence {
    pub fn surface_point(&self, u: usize, v: usize) -> Option<usize> {
        self.per_pixel[v * self.width + u]
    }

    /// Points that are the visible surface of some pixel, with their pixel.
    pub fn surface_points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.per_pixel
            .iter()
            .enumerate()
            .filter_map(|(pix, p)| p.map(|i| (i, pix)))
    }
}

/// Projects points into `cam`, quantizes to pixels, and keeps the nearest
/// point per pixel (ties go to the lowest point index).
pub fn project_points(points: &PointCloud, cam: &Camera) -> Result<PixelCorrespondence> {
    points.check_finite()?;
    cam.validate()?;
    let (w, h) = (cam.width(), cam.height());
    let mut per_point = Vec::with_capacity(points.len());
    let mut per_pixel: Vec<Option<usize>> = vec![None; w * h];
    for (i, &p) in points.positions.iter().enumerate() {
        let pc = cam.world_to_camera(p);
        let d = pc[2];
        if d <= EPS_DEPTH {
            per_point.push(None);
            continue;
        }
        let (x, y) = cam.project_camera_point(pc);
        let (u, v) = (quantize(x), quantize(y));
        if u < 0 || v < 0 || u >= w as i64 || v >= h as i64 {
            per_point.push(None);
            continue;
        }
        let (u, v) = (u as usize, v as usize);
        per_point.push(Some(PixelHit { u, v, depth: d }));
        let slot = &mut per_pixel[v * w + u];
        match *slot {
            Some(j) => {
                let dj = per_point[j].expect("stored surface point has a hit").depth;
                if d < dj {
                    *slot = Some(i);
                }
            }
            None => *slot = Some(i),
        }
    }
    Ok(PixelCorrespondence {
        width: w,
        height: h,
        per_point,
        per_pixel,
    })
}

/// Lifts every pixel with depth above [`EPS_DEPTH`] to a world point through
/// its pixel center. Output order is row-major over surviving pixels; the
/// returned index list gives each point's flat pixel index.
pub fn backproject_depth_indexed(depth: &ImageTensor, cam: &Camera) -> Result<(PointCloud, Vec<usize>)> {
    cam.validate()?;
    let (v, c, h, w) = depth.shape();
    if v != 1 || c != 1 || h != cam.height() || w != cam.width() {
        return Err(Error::dim(
            "backproject_depth",
            depth.shape(),
            (1, 1, cam.height(), cam.width()),
        ));
    }
    let mut positions = Vec::new();
    let mut pixels = Vec::new();
    for (idx, &d) in depth.data().iter().enumerate() {
        if !d.is_finite() || d < 0.0 {
            return Err(Error::RejectedInput(format!(
                "depth must be finite and non-negative, got {d} at pixel {idx}"
            )));
        }
        if d <= EPS_DEPTH {
            continue;
        }
        let (row, col) = (idx / w, idx % w);
        let pc = cam.unproject(col as f64 + 0.5, row as f64 + 0.5, d);
        positions.push(cam.camera_to_world(pc));
        pixels.push(idx);
    }
    Ok((PointCloud::new(positions), pixels))
}

pub fn backproject_depth(depth: &ImageTensor, cam: &Camera) -> Result<PointCloud> {
    backproject_depth_indexed(depth, cam).map(|(pc, _)| pc)
}

/// On-disk camera description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub camera_to_world: Vec<f64>,
}

impl From<&Camera> for CameraFile {
    fn from(cam: &Camera) -> Self {
        let k = cam.intrinsics;
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            camera_to_world: cam.extrinsics.to_row_major().to_vec(),
        }
    }
}

impl TryFrom<&CameraFile> for Camera {
    type Error = Error;

    fn try_from(f: &CameraFile) -> Result<Self> {
        let values: [f64; 16] = f.camera_to_world.as_slice().try_into().map_err(|_| {
            Error::InvalidCamera(format!(
                "camera_to_world needs 16 values, got {}",
                f.camera_to_world.len()
            ))
        })?;
        Camera::new(
            Intrinsics {
                fx: f.fx,
                fy: f.fy,
                cx: f.cx,
                cy: f.cy,
                width: f.width,
                height: f.height,
            },
            Extrinsics::from_row_major(&values),
        )
    }
}

pub fn save_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    let files: Vec<CameraFile> = cams.iter().map(CameraFile::from).collect();
    let text = serde_json::to_string_pretty(&files).expect("camera serialization");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let files: Vec<CameraFile> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    files.iter().map(Camera::try_from).collect()
}

#[inline]
pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize3(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot3(a, a).sqrt();
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[inline]
pub(crate) fn mat3_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub(crate) fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}
