//! Frozen 2D feature extractor and the learnable per-pixel adaptation block.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mlp, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Channels produced by [`ExtractorKind::RawRgb`]: RGB plus normalized pixel coordinates.
pub const RAW_RGB_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    RawRgb,
    RandomConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenExtractorConfig {
    pub kind: ExtractorKind,
    pub channels: usize,
    pub seed: u64,
}

impl Default for FrozenExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::RawRgb,
            channels: RAW_RGB_CHANNELS,
            seed: 0,
        }
    }
}

impl FrozenExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ExtractorKind::RawRgb if self.channels != RAW_RGB_CHANNELS => Err(Error::Config(format!(
                "raw_rgb extractor has {RAW_RGB_CHANNELS} channels, config says {}",
                self.channels
            ))),
            ExtractorKind::RandomConv if self.channels == 0 => {
                Err(Error::Config("random_conv extractor needs at least one channel".into()))
            }
            _ => Ok(()),
        }
    }
}

/// 3×3 convolution, zero padded, stride 1; `dense` is `[o][i][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
struct Conv3 {
    dense: Vec<f64>,
    bias: Vec<f64>,
    c_in: usize,
    c_out: usize,
}

impl Conv3 {
    fn random(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0 / (9 * c_in) as f64).sqrt();
        let dense = (0..c_out * c_in * 9).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..c_out).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self {
            dense,
            bias,
            c_in,
            c_out,
        }
    }

    fn apply_tanh(&self, x: &ImageTensor) -> ImageTensor {
        let (v, _, h, w) = x.shape();
        let mut out = ImageTensor::zeros(v, self.c_out, h, w);
        for vi in 0..v {
            for o in 0..self.c_out {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = self.bias[o];
                        for i in 0..self.c_in {
                            let k = &self.dense[(o * self.c_in + i) * 9..][..9];
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += k[ky * 3 + kx] * x.get(vi, i, sy as usize, sx as usize);
                                }
                            }
                        }
                        out.set(vi, o, y, xx, acc.tanh());
                    }
                }
            }
        }
        out
    }
}

/// Immutable image feature extractor. Weights are fixed at construction and
/// never enter a [`ParameterStore`], so no gradient can reach them.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenExtractor {
    config: FrozenExtractorConfig,
    convs: Vec<Conv3>,
}

impl FrozenExtractor {
    pub fn new(config: FrozenExtractorConfig) -> Result<Self> {
        config.validate()?;
        let convs = match config.kind {
            ExtractorKind::RawRgb => Vec::new(),
            ExtractorKind::RandomConv => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let first = Conv3::random(3, config.channels, &mut rng);
                let second = Conv3::random(config.channels, config.channels, &mut rng);
                vec![first, second]
            }
        };
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> &FrozenExtractorConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Bit pattern of every weight, for immutability checks.
    pub fn weight_bits(&self) -> Vec<u64> {
        self.convs
            .iter()
            .flat_map(|c| c.dense.iter().chain(&c.bias).map(|v| v.to_bits()))
            .collect()
    }

    /// `V×3×H×W` images in `[0, 1]` to `V×C_2D×H×W` features.
    pub fn extract(&self, images: &ImageTensor) -> Result<ImageTensor> {
        let (v, c, h, w) = images.shape();
        if c != 3 {
            return Err(Error::dim("extract", (v, 3, h, w), images.shape()));
        }
        if let Some(bad) = images.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::RejectedInput(format!("pixel value {bad} outside [0, 1]")));
        }
        match self.config.kind {
            ExtractorKind::RawRgb => {
                let mut out = ImageTensor::zeros(v, RAW_RGB_CHANNELS, h, w);
                for vi in 0..v {
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..3 {
                                out.set(vi, ch, y, x, images.get(vi, ch, y, x));
                            }
                            out.set(vi, 3, y, x, (x as f64 + 0.5) / w as f64);
                            out.set(vi, 4, y, x, (y as f64 + 0.5) / h as f64);
                        }
                    }
                }
                Ok(out)
            }
            ExtractorKind::RandomConv => {
                let mut x = images.clone();
                for conv in &self.convs {
                    x = conv.apply_tanh(&x);
                }
                Ok(x)
            }
        }
    }
}

/// Flattens `V×C×H×W` into `(V·H·W)×C` rows, view-major then row-major pixels.
pub fn image_to_rows(img: &ImageTensor) -> Array2<f64> {
    let (v, c, h, w) = img.shape();
    Array2::from_shape_fn((v * h * w, c), |(r, ch)| {
        let (vi, p) = (r / (h * w), r % (h * w));
        img.get(vi, ch, p / w, p % w)
    })
}

/// Inverse of [`image_to_rows`].
pub fn rows_to_image(rows: &Array2<f64>, views: usize, height: usize, width: usize) -> Result<ImageTensor> {
    if rows.nrows() != views * height * width {
        return Err(Error::dim("rows_to_image", (views * height * width, rows.ncols()), rows.dim()));
    }
    let c = rows.ncols();
    let mut img = ImageTensor::zeros(views, c, height, width);
    for (r, row) in rows.outer_iter().enumerate() {
        let (vi, p) = (r / (height * width), r % (height * width));
        for ch in 0..c {
            img.set(vi, ch, p / width, p % width, row[ch]);
        }
    }
    Ok(img)
}

/// Per-pixel MLP `C_2D → hidden → C_adapt` with a zero-initialized last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptBlock {
    pub mlp: Mlp,
    pub in_width: usize,
    pub out_width: usize,
}

impl AdaptBlock {
    pub fn new(store: &mut ParameterStore, in_width: usize, hidden: usize, out_width: usize, rng: &mut impl Rng) -> Result<Self> {
        let mlp = Mlp::new(store, "adapt", &[in_width, hidden, out_width], true, rng)?;
        Ok(Self {
            mlp,
            in_width,
            out_width,
        })
    }

    /// Adapts feature rows as produced by [`image_to_rows`].
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, rows: Var) -> Result<Var> {
        let (n, c) = g.shape(rows);
        if c != self.in_width {
            return Err(Error::dim("adapt", (n, self.in_width), (n, c)));
        }
        self.mlp.forward(g, store, rows)
    }

    /// Inference-only convenience over a whole feature image.
    pub fn apply(&self, store: &ParameterStore, feats: &ImageTensor) -> Result<ImageTensor> {
        let (v, _, h, w) = feats.shape();
        let mut g = Graph::inference();
        let x = g.input(image_to_rows(feats));
        let y = self.forward(&mut g, store, x)?;
        rows_to_image(g.value(y), v, h, w)
    }
}

/// JSON sidecar for precomputed features stored as raw little-endian `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    /// `[V, C, H, W]`.
    pub shape: [usize; 4],
    pub seed: u64,
    pub kind: String,
}

pub fn save_features(path: &Path, feats: &ImageTensor, sidecar: &FeatureSidecar) -> Result<()> {
    let (v, c, h, w) = feats.shape();
    if sidecar.shape != [v, c, h, w] {
        return Err(Error::dim("save_features", sidecar.shape, [v, c, h, w]));
    }
    let bytes: Vec<u8> = feats.data().iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = path.with_extension("json");
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serialization");
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_features(path: &Path) -> Result<(ImageTensor, FeatureSidecar)> {
    let side = path.with_extension("json");
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: FeatureSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let [v, c, h, w] = sidecar.shape;
    if bytes.len() != v * c * h * w * 4 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", v * c * h * w * 4, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((ImageTensor::from_vec(v, c, h, w, data)?, sidecar))
}
