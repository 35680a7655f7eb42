//! The full predictor: frozen image branch, adaptation, backbone with fusion,
//! and the per-point Gaussian head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mlp, ParameterStore, Var};
use crate::backbone::{Backbone, FusionPlacement};
use crate::camera::{backproject_depth_indexed, project_points, Camera};
use crate::cloud::PointCloud;
use crate::config::RunConfig;
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::fusion::{correspondence_groups, scene_point_fusion_graph, MergedPointSet};
use crate::gaussians::RAW_WIDTH;
use crate::image::ImageTensor;
use crate::image_branch::{image_to_rows, AdaptBlock, FrozenExtractor};

/// Everything the predictor sees for one sample.
#[derive(Debug, Clone)]
pub struct ModelInput<'a> {
    pub points: &'a PointCloud,
    /// `V×3×H×W` reference images.
    pub ref_images: ImageTensor,
    pub ref_cameras: Vec<Camera>,
    /// `V×1×H×W` reference depths, needed by point fusion.
    pub ref_depths: Option<ImageTensor>,
}

impl<'a> ModelInput<'a> {
    pub fn from_sample(sample: &'a SceneSample, reference: &[usize]) -> Result<Self> {
        if let Some(&bad) = reference.iter().find(|&&i| i >= sample.num_views()) {
            return Err(Error::Selection(format!("reference view {bad} out of range")));
        }
        let ref_depths = match &sample.depths {
            Some(_) => {
                let parts: Vec<_> = reference.iter().filter_map(|&i| sample.depth_at(i)).collect();
                Some(ImageTensor::stack(&parts)?)
            }
            None => None,
        };
        Ok(Self {
            points: &sample.points,
            ref_images: sample.images_at(reference),
            ref_cameras: reference.iter().map(|&i| sample.cameras[i]).collect(),
            ref_depths,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `N'×23` raw head output.
    pub raw: Var,
    /// `N'×C_3D` backbone features.
    pub features: Var,
    /// Anchor positions of the `N'` primitives.
    pub base: PointCloud,
    /// Output row holding each input point.
    pub point_rows: Vec<usize>,
    pub merged: Option<MergedPointSet>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub placement: FusionPlacement,
    voxel: f64,
    extractor: FrozenExtractor,
    adapt: Option<AdaptBlock>,
    backbone: Backbone,
    head: Mlp,
}

impl Model {
    /// Registers all parameters in `store`, seeded from `cfg.seed`.
    pub fn new(store: &mut ParameterStore, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let placement = cfg.backbone.placement;
        let extractor = FrozenExtractor::new(cfg.model.extractor)?;
        let adapt_width = match placement {
            FusionPlacement::EncoderFirst => cfg.backbone.encoder_widths[0],
            _ => cfg.backbone.feature_width,
        };
        let adapt = if placement == FusionPlacement::None {
            None
        } else {
            Some(AdaptBlock::new(store, extractor.channels(), cfg.model.adapt_hidden, adapt_width, &mut rng)?)
        };
        let backbone = Backbone::new(store, cfg.backbone.clone(), None, adapt_width, &mut rng)?;
        let head = Mlp::new(
            store,
            "head",
            &[backbone.feature_width(), cfg.model.head_hidden, RAW_WIDTH],
            true,
            &mut rng,
        )?;
        Ok(Self {
            placement,
            voxel: cfg.fusion.voxel,
            extractor,
            adapt,
            backbone,
            head,
        })
    }

    pub fn extractor(&self) -> &FrozenExtractor {
        &self.extractor
    }

    /// Adapted per-pixel features, `(V·H·W)×C_adapt` rows.
    fn adapted_rows(&self, g: &mut Graph, store: &ParameterStore, input: &ModelInput) -> Result<Var> {
        let adapt = self.adapt.as_ref().expect("fusion placements build an adapt block");
        if input.ref_cameras.len() != input.ref_images.views() {
            return Err(Error::dim("model reference views", input.ref_images.views(), input.ref_cameras.len()));
        }
        let feats = self.extractor.extract(&input.ref_images)?;
        let rows = g.input(image_to_rows(&feats));
        adapt.forward(g, store, rows)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, input: &ModelInput) -> Result<ForwardOutput> {
        let n = input.points.len();
        input.points.check_finite()?;
        let pos = g.input(input.points.position_matrix());
        let (features, base, point_rows, merged) = match self.placement {
            FusionPlacement::None => {
                let lat = self.backbone.encode(g, store, pos)?;
                let f = self.backbone.decode(g, store, &lat, None)?;
                (f, input.points.clone(), (0..n).collect(), None)
            }
            FusionPlacement::EncoderFirst => {
                let depths = input.ref_depths.as_ref().ok_or_else(|| {
                    Error::Config("point fusion needs reference depth maps; the dataset has none".into())
                })?;
                let pixels = self.adapted_rows(g, store, input)?;
                let hw = input.ref_images.height() * input.ref_images.width();
                let mut pos2d = Vec::new();
                let mut rows = Vec::new();
                for (v, cam) in input.ref_cameras.iter().enumerate() {
                    let (pc, pix) = backproject_depth_indexed(&depths.view(v), cam)?;
                    pos2d.extend(pc.positions);
                    rows.extend(pix.into_iter().map(|p| vec![v * hw + p]));
                }
                let f2d = g.gather_mean(pixels, rows)?;
                let stage1 = self.backbone.encode_stage1(g, store, pos)?;
                let (fused, set) =
                    scene_point_fusion_graph(g, &pos2d, f2d, &input.points.positions, stage1, self.voxel)?;
                let mut point_rows = vec![0; n];
                for (row, group) in set.groups.iter().enumerate() {
                    for &m in group {
                        if m >= pos2d.len() {
                            point_rows[m - pos2d.len()] = row;
                        }
                    }
                }
                let lat = self.backbone.encode_from(g, store, fused)?;
                let f = self.backbone.decode(g, store, &lat, None)?;
                (f, PointCloud::new(set.positions.clone()), point_rows, Some(set))
            }
            _ => {
                let pixels = self.adapted_rows(g, store, input)?;
                let corrs = input
                    .ref_cameras
                    .iter()
                    .map(|c| project_points(input.points, c))
                    .collect::<Result<Vec<_>>>()?;
                let f2d = g.gather_mean(pixels, correspondence_groups(&corrs)?)?;
                let lat = self.backbone.encode(g, store, pos)?;
                let f = self.backbone.decode(g, store, &lat, Some(f2d))?;
                (f, input.points.clone(), (0..n).collect(), None)
            }
        };
        let raw = self.head.forward(g, store, features)?;
        Ok(ForwardOutput {
            raw,
            features,
            base,
            point_rows,
            merged,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_object_sample, generate_scene_sample, Mode, ObjectSynthConfig, SceneSynthConfig};

    fn small(mut cfg: RunConfig) -> RunConfig {
        cfg.backbone.encoder_widths = vec![8, 16];
        cfg.backbone.decoder_widths = vec![16, 8];
        cfg.backbone.feature_width = 8;
        cfg.model.adapt_hidden = 8;
        cfg.model.head_hidden = 8;
        cfg
    }

    #[test]
    fn object_forward_shapes_for_every_decoder_placement() {
        let s = generate_object_sample(
            1,
            &ObjectSynthConfig {
                n_points: 64,
                n_views: 6,
                n_gaussians: 200,
                image_size: 16,
            },
        )
        .unwrap();
        for placement in [
            FusionPlacement::None,
            FusionPlacement::DecoderLast,
            FusionPlacement::DecoderMid,
            FusionPlacement::DecoderAll,
        ] {
            let mut cfg = small(RunConfig::object_defaults());
            cfg.backbone.placement = placement;
            let mut store = ParameterStore::new();
            let m = Model::new(&mut store, &cfg).unwrap();
            let input = ModelInput::from_sample(&s, &[0]).unwrap();
            let mut g = Graph::new();
            let out = m.forward(&mut g, &store, &input).unwrap();
            assert_eq!(g.shape(out.raw), (64, RAW_WIDTH));
            assert!(g.value(out.raw).iter().all(|&x| x == 0.0), "zero head");
            assert_eq!(out.base, s.points);
        }
    }

    #[test]
    fn scene_point_fusion_maps_every_input_point() {
        let s = generate_scene_sample(
            0,
            &SceneSynthConfig {
                n_points: 200,
                n_views: 16,
                image_size: 8,
                spacing: 0.25,
            },
        )
        .unwrap();
        assert_eq!(s.mode, Mode::Scene);
        let mut cfg = small(RunConfig::scene_defaults());
        cfg.views.v_ref = 2;
        cfg.views.bins = 2;
        let mut store = ParameterStore::new();
        let m = Model::new(&mut store, &cfg).unwrap();
        let input = ModelInput::from_sample(&s, &[0, 8]).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &store, &input).unwrap();
        let set = out.merged.unwrap();
        assert_eq!(g.shape(out.raw).0, set.len());
        assert_eq!(out.base.len(), set.len());
        let n2d = set.groups.iter().map(Vec::len).sum::<usize>() - s.points.len();
        for (i, &row) in out.point_rows.iter().enumerate() {
            assert!(set.groups[row].contains(&(n2d + i)));
        }
        let no_depth = SceneSample { depths: None, ..s.clone() };
        let input = ModelInput::from_sample(&no_depth, &[0]).unwrap();
        assert!(matches!(m.forward(&mut Graph::new(), &store, &input), Err(Error::Config(_))));
    }
}
