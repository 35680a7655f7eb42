use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Mode, SceneSample};
use crate::camera::{load_cameras, save_cameras};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::{
    read_depth, read_gaussians_ply, read_points_ply, read_ppm, write_depth, write_gaussians_ply, write_ppm,
    write_points_ply, PointAttributes,
};

pub const GENERATOR_VERSION: u32 = 1;
const INDEX_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub generator_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub n_points: usize,
    pub n_views: usize,
    pub n_gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub has_depth: bool,
    pub background: [f64; 3],
}

/// Root index listing sample directories in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub generator_version: u32,
    pub mode: Mode,
    pub samples: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_sample(dir: &Path, s: &SceneSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let attrs = PointAttributes {
        colors: s.colors.clone(),
        labels: s.labels.clone(),
    };
    write_points_ply(&dir.join("points.ply"), &s.points, &attrs)?;
    write_gaussians_ply(&dir.join("gt_gaussians.ply"), &s.gt)?;
    save_cameras(&dir.join("cameras.json"), &s.cameras)?;
    for i in 0..s.num_views() {
        write_ppm(&dir.join(format!("img_{i:04}.ppm")), &s.images.view(i))?;
        if let Some(d) = s.depth_at(i) {
            write_depth(&dir.join(format!("depth_{i:04}.bin")), &d)?;
        }
    }
    let (height, width) = s.image_size();
    let manifest = SampleManifest {
        generator_version: GENERATOR_VERSION,
        mode: s.mode,
        seed: s.seed,
        n_points: s.points.len(),
        n_views: s.num_views(),
        n_gaussians: s.gt.len(),
        width,
        height,
        num_classes: s.num_classes,
        has_depth: s.depths.is_some(),
        background: s.background,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_sample(dir: &Path) -> Result<SceneSample> {
    let m: SampleManifest = read_json(&dir.join("manifest.json"))?;
    let (points, attrs) = read_points_ply(&dir.join("points.ply"))?;
    let gt = read_gaussians_ply(&dir.join("gt_gaussians.ply"))?;
    let cameras = load_cameras(&dir.join("cameras.json"))?;
    if cameras.len() != m.n_views || points.len() != m.n_points {
        return Err(Error::format(dir, "sample files disagree with manifest.json"));
    }
    let mut views = Vec::with_capacity(m.n_views);
    let mut depths = Vec::new();
    for i in 0..m.n_views {
        let img = read_ppm(&dir.join(format!("img_{i:04}.ppm")))?;
        if (img.height(), img.width()) != (m.height, m.width) {
            return Err(Error::format(dir, format!("image {i} has the wrong size")));
        }
        views.push(img);
        if m.has_depth {
            depths.push(read_depth(&dir.join(format!("depth_{i:04}.bin")))?);
        }
    }
    Ok(SceneSample {
        mode: m.mode,
        seed: m.seed,
        points,
        colors: attrs.colors,
        labels: attrs.labels,
        num_classes: m.num_classes,
        cameras,
        images: ImageTensor::stack(&views)?,
        depths: if m.has_depth { Some(ImageTensor::stack(&depths)?) } else { None },
        gt,
        background: m.background,
    })
}

fn sample_dir(root: &Path, i: usize) -> (String, PathBuf) {
    let name = format!("sample_{i:04}");
    let path = root.join(&name);
    (name, path)
}

/// Writes samples under `root`. An existing non-empty `root` is refused unless `force`.
pub fn save_dataset(root: &Path, samples: &[SceneSample], force: bool) -> Result<()> {
    let occupied = root.exists() && std::fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
    if occupied {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                root.display()
            )));
        }
        std::fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mode = samples.first().map_or(Mode::Object, |s| s.mode);
    let mut names = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (name, path) = sample_dir(root, i);
        save_sample(&path, s)?;
        names.push(name);
    }
    write_json(
        &root.join(INDEX_FILE),
        &DatasetIndex {
            generator_version: GENERATOR_VERSION,
            mode,
            samples: names,
        },
    )
}

pub fn load_dataset(root: &Path) -> Result<(DatasetIndex, Vec<SceneSample>)> {
    let index: DatasetIndex = read_json(&root.join(INDEX_FILE))?;
    let samples = index
        .samples
        .iter()
        .map(|name| load_sample(&root.join(name)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(s) = samples.iter().find(|s| s.mode != index.mode) {
        return Err(Error::format(root, format!("sample seed {} has mode {:?}, index says {:?}", s.seed, s.mode, index.mode)));
    }
    Ok((index, samples))
}
