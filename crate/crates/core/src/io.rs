//! Image, point cloud, Gaussian and depth file formats.

use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::gaussians::{GaussianSet, SH_COEFFS};
use crate::image::ImageTensor;

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level, as stored in image files.
pub fn quantize_8bit(img: &mut ImageTensor) {
    for v in img.data_mut() {
        *v = f64::from(to_u8(*v)) / 255.0;
    }
}

fn rgb_bytes(img: &ImageTensor, op: &'static str) -> Result<Vec<u8>> {
    let (v, c, h, w) = img.shape();
    if v != 1 || c != 3 {
        return Err(Error::dim(op, (1, 3, h, w), img.shape()));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_u8(img.get(0, ch, y, x)));
            }
        }
    }
    Ok(out)
}

/// Binary 8-bit PPM of a `1×3×H×W` image; values are clamped to `[0, 1]`.
pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend(rgb_bytes(img, "write_ppm")?);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PPM header field `{s}`")));
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(Error::format(path, "only 8-bit binary PPM (P6) is supported"));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| Error::format(path, "truncated PPM pixel data"))?;
    let mut img = ImageTensor::zeros(1, 3, h, w);
    for (i, &b) in body.iter().enumerate() {
        let (p, ch) = (i / 3, i % 3);
        img.set(0, ch, p / w, p % w, f64::from(b) / 255.0);
    }
    Ok(img)
}

pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let data = rgb_bytes(img, "write_png")?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Per-point attributes stored alongside positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointAttributes {
    pub colors: Vec<[f64; 3]>,
    pub labels: Vec<usize>,
}

fn ascii_ply(path: &Path, header: &str, body: &str) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(body.as_bytes()))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// ASCII PLY with `x y z red green blue label`.
pub fn write_points_ply(path: &Path, cloud: &PointCloud, attrs: &PointAttributes) -> Result<()> {
    let n = cloud.len();
    if attrs.colors.len() != n || attrs.labels.len() != n {
        return Err(Error::dim("write_points_ply", n, (attrs.colors.len(), attrs.labels.len())));
    }
    let header = format!(
        "ply\nformat ascii 1.0\nelement vertex {n}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nproperty int label\nend_header\n"
    );
    let mut body = String::new();
    for ((p, c), l) in cloud.positions.iter().zip(&attrs.colors).zip(&attrs.labels) {
        let _ = writeln!(body, "{} {} {} {} {} {} {l}", p[0], p[1], p[2], to_u8(c[0]), to_u8(c[1]), to_u8(c[2]));
    }
    ascii_ply(path, &header, &body)
}

fn ply_body(path: &Path, expected_props: &[&str]) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (header, body) = text
        .split_once("end_header\n")
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let mut count = None;
    let mut props = Vec::new();
    for line in header.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["element", "vertex", n] => count = n.parse::<usize>().ok(),
            ["property", _, name] => props.push(*name),
            ["format", fmt, _] if *fmt != "ascii" => return Err(Error::format(path, "only ASCII PLY is supported")),
            _ => {}
        }
    }
    if props != expected_props {
        return Err(Error::format(path, format!("unexpected vertex properties {props:?}")));
    }
    let n = count.ok_or_else(|| Error::format(path, "missing vertex count"))?;
    let rows: Vec<Vec<f64>> = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::parse::<f64>).collect::<std::result::Result<Vec<_>, _>>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if rows.len() != n || rows.iter().any(|r| r.len() != props.len()) {
        return Err(Error::format(path, format!("expected {n} rows of {} values", props.len())));
    }
    Ok(rows)
}

pub fn read_points_ply(path: &Path) -> Result<(PointCloud, PointAttributes)> {
    let rows = ply_body(path, &["x", "y", "z", "red", "green", "blue", "label"])?;
    let mut positions = Vec::with_capacity(rows.len());
    let mut attrs = PointAttributes::default();
    for r in rows {
        positions.push([r[0], r[1], r[2]]);
        attrs.colors.push([r[3] / 255.0, r[4] / 255.0, r[5] / 255.0]);
        attrs.labels.push(r[6] as usize);
    }
    Ok((PointCloud::new(positions), attrs))
}

const GAUSSIAN_PROPS: [&str; 23] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "sh_0", "sh_1",
    "sh_2", "sh_3", "sh_4", "sh_5", "sh_6", "sh_7", "sh_8", "sh_9", "sh_10", "sh_11",
];

/// ASCII PLY of activated Gaussian parameters in shortest round-trip decimal form.
pub fn write_gaussians_ply(path: &Path, g: &GaussianSet) -> Result<()> {
    let mut header = format!("ply\nformat ascii 1.0\nelement vertex {}\n", g.len());
    for p in GAUSSIAN_PROPS {
        let _ = writeln!(header, "property double {p}");
    }
    header.push_str("end_header\n");
    let mut body = String::new();
    for k in 0..g.len() {
        let vals = g.means[k]
            .iter()
            .chain(&g.scales[k])
            .chain(&g.rotations[k])
            .chain(std::iter::once(&g.opacities[k]))
            .chain(&g.sh[k]);
        let line: Vec<String> = vals.map(|v| v.to_string()).collect();
        body.push_str(&line.join(" "));
        body.push('\n');
    }
    ascii_ply(path, &header, &body)
}

pub fn read_gaussians_ply(path: &Path) -> Result<GaussianSet> {
    let rows = ply_body(path, &GAUSSIAN_PROPS)?;
    let mut g = GaussianSet::default();
    for r in rows {
        let mut sh = [0.0; SH_COEFFS];
        sh.copy_from_slice(&r[11..23]);
        g.push([r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8], r[9]], r[10], sh);
    }
    g.validate()?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub width: usize,
    pub height: usize,
    pub dtype: String,
    pub byte_order: String,
    /// Camera-space `z`; `0` marks pixels without depth.
    pub units: String,
}

/// Raw little-endian `f32` depth map with a JSON sidecar next to it.
pub fn write_depth(path: &Path, depth: &ImageTensor) -> Result<()> {
    let (v, c, h, w) = depth.shape();
    if v != 1 || c != 1 {
        return Err(Error::dim("write_depth", (1, 1, h, w), depth.shape()));
    }
    let bytes: Vec<u8> = depth.data().iter().flat_map(|d| (*d as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = DepthSidecar {
        width: w,
        height: h,
        dtype: "f32".into(),
        byte_order: "little".into(),
        units: "camera_z".into(),
    };
    let side_path = path.with_extension("json");
    std::fs::write(&side_path, serde_json::to_string_pretty(&side).expect("sidecar serialization"))
        .map_err(|e| Error::io(&side_path, e))
}

pub fn read_depth(path: &Path) -> Result<ImageTensor> {
    let side_path = path.with_extension("json");
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: DepthSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side_path, e.to_string()))?;
    if side.dtype != "f32" || side.byte_order != "little" {
        return Err(Error::format(&side_path, "only little-endian f32 depth is supported"));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side.width * side.height * 4 {
        return Err(Error::format(path, "depth size does not match its sidecar"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ImageTensor::from_vec(1, 1, side.height, side.width, data)
}
