//! Object-level feature fusion and scene-level point fusion.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mlp, ParameterStore, Var};
use crate::camera::PixelCorrespondence;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::image_branch::image_to_rows;

pub const DEFAULT_VOXEL: f64 = 0.04;

/// Rows of the `(V·H·W)×C` pixel-feature matrix that each point reads.
///
/// Only the surface point of a pixel reads it. `corrs[v]` belongs to view
/// `v`; a point that is the surface in several views averages those views'
/// features and a point that is the surface in none gets an empty group (zeros).
pub fn correspondence_groups(corrs: &[PixelCorrespondence]) -> Result<Vec<Vec<usize>>> {
    let Some(first) = corrs.first() else {
        return Ok(Vec::new());
    };
    let n = first.per_point.len();
    let mut groups = vec![Vec::new(); n];
    let mut offset = 0;
    for c in corrs {
        if c.per_point.len() != n {
            return Err(Error::dim("correspondence_groups", n, c.per_point.len()));
        }
        for (i, pix) in c.surface_points() {
            groups[i].push(offset + pix);
        }
        offset += c.width * c.height;
    }
    Ok(groups)
}

/// Per-point features gathered from `V×C×H×W` feature maps, one correspondence per view.
pub fn gather_point_features(corrs: &[PixelCorrespondence], feats: &ImageTensor) -> Result<Array2<f64>> {
    let (v, c, h, w) = feats.shape();
    if corrs.len() != v || corrs.iter().any(|k| (k.width, k.height) != (w, h)) {
        let got: Vec<_> = corrs.iter().map(|k| (k.height, k.width)).collect();
        return Err(Error::dim("gather_point_features", (v, h, w), got));
    }
    let groups = correspondence_groups(corrs)?;
    let mut g = Graph::inference();
    let rows = g.input(image_to_rows(feats));
    let out = g.gather_mean(rows, groups)?;
    let out = g.value(out).clone();
    debug_assert_eq!(out.ncols(), c);
    Ok(out)
}

/// `MLP(concat(f3d, f2d))` mapping back to `out_width` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFusion {
    pub mlp: Mlp,
    pub width_3d: usize,
    pub width_2d: usize,
}

impl ObjectFusion {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        width_3d: usize,
        width_2d: usize,
        out_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp = Mlp::new(store, name, &[width_3d + width_2d, out_width, out_width], false, rng)?;
        Ok(Self {
            mlp,
            width_3d,
            width_2d,
        })
    }

    pub fn out_width(&self) -> usize {
        self.mlp.out_width()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, f3d: Var, f2d: Var) -> Result<Var> {
        let (a, b) = (g.shape(f3d), g.shape(f2d));
        if a.1 != self.width_3d || b.1 != self.width_2d {
            return Err(Error::dim("object_feature_fusion", (self.width_3d, self.width_2d), (a.1, b.1)));
        }
        let cat = g.concat_channels(&[f3d, f2d])?;
        self.mlp.forward(g, store, cat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    From3d,
    From2d,
    Merged,
}

/// Voxel-merged union of image pseudo-points and backbone points.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedPointSet {
    pub positions: Vec<[f64; 3]>,
    pub features: Array2<f64>,
    pub provenance: Vec<Provenance>,
    /// Member rows of each output point in the concatenation `[p2d; p3d]`.
    pub groups: Vec<Vec<usize>>,
}

impl MergedPointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn voxel_key(p: [f64; 3], voxel: f64) -> [i64; 3] {
    p.map(|x| (x / voxel).floor() as i64)
}

/// Points grouped by voxel; groups ordered by voxel key, members by index.
pub fn voxel_groups(positions: &[[f64; 3]], voxel: f64) -> Result<Vec<Vec<usize>>> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::Config(format!("voxel edge must be positive, got {voxel}")));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, &p) in positions.iter().enumerate() {
        cells.entry(voxel_key(p, voxel)).or_default().push(i);
    }
    Ok(cells.into_values().collect())
}

/// Mean position of each group.
pub fn group_positions(positions: &[[f64; 3]], groups: &[Vec<usize>]) -> Vec<[f64; 3]> {
    groups
        .iter()
        .map(|g| {
            let mut m = [0.0; 3];
            for &i in g {
                for k in 0..3 {
                    m[k] += positions[i][k];
                }
            }
            m.map(|s| s / g.len() as f64)
        })
        .collect()
}

fn provenance(group: &[usize], n2d: usize) -> Provenance {
    let has2d = group.iter().any(|&i| i < n2d);
    let has3d = group.iter().any(|&i| i >= n2d);
    match (has2d, has3d) {
        (true, true) => Provenance::Merged,
        (true, false) => Provenance::From2d,
        _ => Provenance::From3d,
    }
}

/// Concatenates both clouds, then keeps one mean point and mean feature per occupied voxel.
pub fn scene_point_fusion(p2d: &PointCloud, p3d: &PointCloud, voxel: f64) -> Result<MergedPointSet> {
    let f2 = p2d
        .features
        .as_ref()
        .ok_or_else(|| Error::Config("scene_point_fusion: 2D points carry no features".into()))?;
    let f3 = p3d
        .features
        .as_ref()
        .ok_or_else(|| Error::Config("scene_point_fusion: 3D points carry no features".into()))?;
    if f2.ncols() != f3.ncols() {
        return Err(Error::dim("scene_point_fusion", f2.dim(), f3.dim()));
    }
    let mut g = Graph::inference();
    let a = g.input(f2.clone());
    let b = g.input(f3.clone());
    let (_, set) = scene_point_fusion_graph(&mut g, &p2d.positions, a, &p3d.positions, b, voxel)?;
    Ok(set)
}

/// Tape-recorded counterpart: merges feature rows `f2d` and `f3d` whose
/// positions are `pos2d` and `pos3d`. Returns merged features and positions.
pub fn scene_point_fusion_graph(
    g: &mut Graph,
    pos2d: &[[f64; 3]],
    f2d: Var,
    pos3d: &[[f64; 3]],
    f3d: Var,
    voxel: f64,
) -> Result<(Var, MergedPointSet)> {
    if g.shape(f2d).0 != pos2d.len() || g.shape(f3d).0 != pos3d.len() {
        return Err(Error::dim(
            "scene_point_fusion rows",
            (pos2d.len(), pos3d.len()),
            (g.shape(f2d).0, g.shape(f3d).0),
        ));
    }
    let mut positions = pos2d.to_vec();
    positions.extend_from_slice(pos3d);
    let groups = voxel_groups(&positions, voxel)?;
    let cat = g.concat_rows(&[f2d, f3d])?;
    let merged = g.gather_mean(cat, groups.clone())?;
    let set = MergedPointSet {
        positions: group_positions(&positions, &groups),
        features: g.value(merged).clone(),
        provenance: groups.iter().map(|grp| provenance(grp, pos2d.len())).collect(),
        groups,
    };
    Ok((merged, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project_points, Camera, Extrinsics, Intrinsics};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn cam(w: usize, h: usize) -> Camera {
        Camera::new(Intrinsics::from_fov(w, h, 60.0), Extrinsics::identity()).unwrap()
    }

    fn random_feats(rng: &mut ChaCha8Rng, v: usize, c: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_vec(v, c, h, w, (0..v * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn no_correspondence_gives_zeros() {
        let c = cam(8, 6);
        let pts = PointCloud::new(vec![[0.0, 0.0, -1.0], [5.0, 0.0, 1.0]]);
        let corr = project_points(&pts, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = gather_point_features(&[corr], &random_feats(&mut rng, 1, 4, 6, 8)).unwrap();
        assert_eq!(f, Array2::<f64>::zeros((2, 4)));
    }

    #[test]
    fn principal_ray_point_reads_center_pixel() {
        let c = cam(8, 6);
        let corr = project_points(&PointCloud::new(vec![[0.0, 0.0, 2.0]]), &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = random_feats(&mut rng, 1, 3, 6, 8);
        let f = gather_point_features(&[corr], &feats).unwrap();
        for ch in 0..3 {
            assert_eq!(f[[0, ch]], feats.get(0, ch, 3, 4));
        }
    }

    #[test]
    fn gather_matches_naive_lookup_and_averages_views() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = PointCloud::new(
                (0..40)
                    .map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(0.5..3.0)])
                    .collect(),
            );
            let cams = [
                cam(10, 8),
                Camera::look_at(Intrinsics::from_fov(10, 8, 60.0), [0.5, 0.0, -0.5], [0.0, 0.0, 2.0], [0.0, -1.0, 0.0]).unwrap(),
            ];
            let corrs: Vec<_> = cams.iter().map(|c| project_points(&pts, c).unwrap()).collect();
            let feats = random_feats(&mut rng, 2, 3, 8, 10);
            let got = gather_point_features(&corrs, &feats).unwrap();
            for i in 0..pts.len() {
                for ch in 0..3 {
                    let vals: Vec<f64> = corrs
                        .iter()
                        .enumerate()
                        .filter_map(|(v, c)| c.per_point[i].map(|h| (v, c, h)))
                        .filter(|(_, c, h)| c.per_pixel[h.v * c.width + h.u] == Some(i))
                        .map(|(v, _, h)| feats.get(v, ch, h.v, h.u))
                        .collect();
                    let want = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
                    assert!((got[[i, ch]] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn object_fusion_closed_form_and_width() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fusion = ObjectFusion::new(&mut store, "fuse", 4, 3, 6, &mut rng).unwrap();
        let f3 = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let mut g = Graph::inference();
        let a = g.input(f3.clone());
        let b = g.input(Array2::zeros((5, 3)));
        let out = fusion.forward(&mut g, &store, a, b).unwrap();
        assert_eq!(g.shape(out), (5, 6));
        let mut h = Graph::inference();
        let mut cat = Array2::zeros((5, 7));
        cat.slice_mut(ndarray::s![.., ..4]).assign(&f3);
        let x = h.input(cat);
        let want = fusion.mlp.forward(&mut h, &store, x).unwrap();
        assert_eq!(g.value(out), h.value(want));
        let c = g.input(Array2::zeros((4, 3)));
        assert!(matches!(fusion.forward(&mut g, &store, a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn object_fusion_gradients_reach_both_branches() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fusion = ObjectFusion::new(&mut store, "fuse", 3, 2, 4, &mut rng).unwrap();
        let f3 = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let f2 = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let eval = |a: &Array2<f64>, b: &Array2<f64>| {
            let mut g = Graph::inference();
            let x = g.input(a.clone());
            let y = g.input(b.clone());
            let o = fusion.forward(&mut g, &store, x, y).unwrap();
            (g.value(o) * &w).sum()
        };
        let mut g = Graph::new();
        let x = g.input(f3.clone());
        let y = g.input(f2.clone());
        let o = fusion.forward(&mut g, &store, x, y).unwrap();
        let grads = g.backward(&[(o, w.clone())]).unwrap();
        for (k, base) in [&f3, &f2].into_iter().enumerate() {
            let analytic = grads.wrt(if k == 0 { x } else { y }).unwrap();
            assert!(analytic.iter().any(|v| v.abs() > 1e-8));
            for idx in 0..base.len() {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let mut p = base.clone();
                p[[r, c]] += 1e-6;
                let mut m = base.clone();
                m[[r, c]] -= 1e-6;
                let fd = if k == 0 {
                    (eval(&p, &f2) - eval(&m, &f2)) / 2e-6
                } else {
                    (eval(&f3, &p) - eval(&f3, &m)) / 2e-6
                };
                assert!((fd - analytic[[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    fn cloud_with_features(rng: &mut ChaCha8Rng, n: usize, c: usize, extent: f64) -> PointCloud {
        let pos = (0..n).map(|_| [0; 3].map(|_: i32| rng.gen_range(-extent..extent))).collect();
        let f = Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0));
        PointCloud::with_features(pos, f).unwrap()
    }

    #[test]
    fn tiny_voxel_keeps_every_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = cloud_with_features(&mut rng, 10, 3, 1.0);
        let b = cloud_with_features(&mut rng, 7, 3, 1.0);
        let m = scene_point_fusion(&a, &b, 1e-6).unwrap();
        assert_eq!(m.len(), 17);
        let mut got: Vec<Vec<u64>> = m.features.outer_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = a
            .features
            .as_ref()
            .unwrap()
            .outer_iter()
            .chain(b.features.as_ref().unwrap().outer_iter())
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn coincident_points_average() {
        let a = PointCloud::with_features(vec![[0.01, 0.01, 0.01]], ndarray::arr2(&[[1.0, 4.0]])).unwrap();
        let b = PointCloud::with_features(vec![[0.01, 0.01, 0.01]], ndarray::arr2(&[[3.0, 0.0]])).unwrap();
        let m = scene_point_fusion(&a, &b, 0.04).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.features, ndarray::arr2(&[[2.0, 2.0]]));
        assert_eq!(m.provenance, vec![Provenance::Merged]);
        assert!(scene_point_fusion(&a, &b, 0.0).is_err());
    }

    #[test]
    fn fusion_matches_hash_grid_oracle_and_is_permutation_invariant() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (na, nb) = (rng.gen_range(0..40), rng.gen_range(1..40));
            let a = cloud_with_features(&mut rng, na, 2, 0.3);
            let b = cloud_with_features(&mut rng, nb, 2, 0.3);
            let m = scene_point_fusion(&a, &b, 0.1).unwrap();
            let mut cells: HashMap<[i64; 3], (usize, [f64; 3], [f64; 2])> = HashMap::new();
            for (cl, fe) in [(&a, a.features.as_ref().unwrap()), (&b, b.features.as_ref().unwrap())] {
                for (i, p) in cl.positions.iter().enumerate() {
                    let key = [0, 1, 2].map(|k| (p[k] / 0.1).floor() as i64);
                    let e = cells.entry(key).or_insert((0, [0.0; 3], [0.0; 2]));
                    e.0 += 1;
                    (0..3).for_each(|k| e.1[k] += p[k]);
                    (0..2).for_each(|k| e.2[k] += fe[[i, k]]);
                }
            }
            assert_eq!(m.len(), cells.len());
            assert!(m.len() <= a.len() + b.len());
            let mut want: Vec<[f64; 5]> = cells
                .values()
                .map(|(n, p, f)| {
                    let n = *n as f64;
                    [p[0] / n, p[1] / n, p[2] / n, f[0] / n, f[1] / n]
                })
                .collect();
            let mut got: Vec<[f64; 5]> = (0..m.len())
                .map(|i| {
                    let p = m.positions[i];
                    [p[0], p[1], p[2], m.features[[i, 0]], m.features[[i, 1]]]
                })
                .collect();
            let key = |x: &[f64; 5]| x.map(|v| (v * 1e9).round() as i64);
            want.sort_by_key(key);
            got.sort_by_key(key);
            for (g, w) in got.iter().zip(&want) {
                for k in 0..5 {
                    assert!((g[k] - w[k]).abs() < 1e-12);
                }
            }

            let perm: Vec<usize> = (0..b.len()).rev().collect();
            let b2 = PointCloud::with_features(
                perm.iter().map(|&i| b.positions[i]).collect(),
                b.features.as_ref().unwrap().select(ndarray::Axis(0), &perm),
            )
            .unwrap();
            let m2 = scene_point_fusion(&a, &b2, 0.1).unwrap();
            assert_eq!(m2.len(), m.len());
            for i in 0..m.len() {
                for k in 0..3 {
                    assert!((m.positions[i][k] - m2.positions[i][k]).abs() < 1e-12);
                }
            }
        }
    }
}
