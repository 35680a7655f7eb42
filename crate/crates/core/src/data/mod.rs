//! Synthetic samples, view selection and the on-disk dataset layout.

mod store;
mod synth;
mod views;

pub use store::{load_dataset, load_sample, save_dataset, save_sample, DatasetIndex, SampleManifest, GENERATOR_VERSION};
pub use synth::{generate_object_sample, generate_scene_sample, ObjectSynthConfig, SceneSynthConfig, DEPTH_MIN_ALPHA, DEPTH_TOLERANCE};
pub use views::{select_views, ViewConfig, ViewSplit};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::cloud::PointCloud;
use crate::gaussians::GaussianSet;
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Object,
    Scene,
}

/// One synthetic training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub mode: Mode,
    pub seed: u64,
    pub points: PointCloud,
    /// Ground-truth color per point, for diagnostics only.
    pub colors: Vec<[f64; 3]>,
    /// Generator primitive class per point.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Camera stream; the index is the stream time.
    pub cameras: Vec<Camera>,
    /// `M×3×H×W`, 8-bit quantized.
    pub images: ImageTensor,
    /// `M×1×H×W` camera-space depth (scene mode only).
    pub depths: Option<ImageTensor>,
    pub gt: GaussianSet,
    pub background: [f64; 3],
}

impl SceneSample {
    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.images.height(), self.images.width())
    }

    /// Images at the given stream indices, stacked.
    pub fn images_at(&self, idx: &[usize]) -> ImageTensor {
        let views: Vec<ImageTensor> = idx.iter().map(|&i| self.images.view(i)).collect();
        ImageTensor::stack(&views).expect("views share a shape")
    }

    pub fn depth_at(&self, i: usize) -> Option<ImageTensor> {
        self.depths.as_ref().map(|d| d.view(i))
    }

    /// Copy whose colour channel `c` is the original channel `order[c]`, in
    /// images, point colours, ground-truth SH and background alike.
    pub fn with_channel_order(&self, order: [usize; 3]) -> Self {
        let mut out = self.clone();
        let (m, _, h, w) = self.images.shape();
        for v in 0..m {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        out.images.set(v, c, y, x, self.images.get(v, order[c], y, x));
                    }
                }
            }
        }
        for (dst, src) in out.colors.iter_mut().zip(&self.colors) {
            *dst = order.map(|c| src[c]);
        }
        for (dst, src) in out.gt.sh.iter_mut().zip(&self.gt.sh) {
            for c in 0..3 {
                dst[c * 4..c * 4 + 4].copy_from_slice(&src[order[c] * 4..order[c] * 4 + 4]);
            }
        }
        out.background = order.map(|c| self.background[c]);
        out
    }
}
