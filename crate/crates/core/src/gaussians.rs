//! Gaussian primitives: decoding predictor outputs, covariance factors and
//! degree-1 spherical-harmonics color.

use ndarray::Array2;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Raw predictor values per point.
pub const RAW_WIDTH: usize = 23;
pub const SH_COEFFS: usize = 12;

pub const OFFSET: std::ops::Range<usize> = 0..3;
pub const OPACITY: usize = 3;
pub const LOG_SCALE: std::ops::Range<usize> = 4..7;
pub const ROTATION: std::ops::Range<usize> = 7..11;
pub const SH: std::ops::Range<usize> = 11..23;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Opacity logits are clamped to this magnitude so α stays strictly inside (0, 1).
const LOGIT_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RawGaussianParams(Array2<f64>);

impl RawGaussianParams {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() != RAW_WIDTH {
            return Err(Error::dim("RawGaussianParams", values.dim(), ("N", RAW_WIDTH)));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::RejectedInput("non-finite raw Gaussian parameter".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Array2::zeros((n, RAW_WIDTH)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

/// Activation constants for [`decode_gaussians`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// Maximum displacement of a primitive from its source point.
    pub offset_bound: f64,
    /// Scale produced by a zero log-scale output.
    pub scale_unit: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            offset_bound: 0.05,
            scale_unit: 0.03,
            scale_min: 1e-4,
            scale_max: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.offset_bound >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_unit
            && self.scale_unit <= self.scale_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent decode constants {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    /// Channel-major: `[c * 4 + basis]`, basis order `(DC, y, z, x)`.
    pub sh: Vec<[f64; SH_COEFFS]>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, mean: [f64; 3], scale: [f64; 3], rotation: [f64; 4], opacity: f64, sh: [f64; SH_COEFFS]) {
        self.means.push(mean);
        self.scales.push(scale);
        self.rotations.push(rotation);
        self.opacities.push(opacity);
        self.sh.push(sh);
    }

    pub fn extend(&mut self, other: &GaussianSet) {
        self.means.extend_from_slice(&other.means);
        self.scales.extend_from_slice(&other.scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacities.extend_from_slice(&other.opacities);
        self.sh.extend_from_slice(&other.sh);
    }

    /// Checks the structural invariants (unit rotations, positive scales, open-interval opacity).
    pub fn validate(&self) -> Result<()> {
        let n = self.means.len();
        if [self.scales.len(), self.rotations.len(), self.opacities.len(), self.sh.len()]
            .iter()
            .any(|&m| m != n)
        {
            return Err(Error::dim("GaussianSet", n, "ragged attribute arrays"));
        }
        for k in 0..n {
            let q = self.rotations[k];
            let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            let finite = self.means[k].iter().chain(&self.scales[k]).chain(&q).chain(&self.sh[k]).all(|x| x.is_finite());
            if !finite
                || (norm - 1.0).abs() > 1e-9
                || self.scales[k].iter().any(|&s| s <= 0.0)
                || !(self.opacities[k] > 0.0 && self.opacities[k] < 1.0)
            {
                return Err(Error::RejectedInput(format!("Gaussian {k} violates invariants")));
            }
        }
        Ok(())
    }

    /// Flattens primitive `k` in the 23-slot gradient layout (μ, s, q, α, S).
    pub fn slots(&self, k: usize) -> [f64; RAW_WIDTH] {
        let mut out = [0.0; RAW_WIDTH];
        out[0..3].copy_from_slice(&self.means[k]);
        out[3..6].copy_from_slice(&self.scales[k]);
        out[6..10].copy_from_slice(&self.rotations[k]);
        out[10] = self.opacities[k];
        out[11..23].copy_from_slice(&self.sh[k]);
        out
    }

    pub fn set_slot(&mut self, k: usize, slot: usize, value: f64) {
        match slot {
            0..=2 => self.means[k][slot] = value,
            3..=5 => self.scales[k][slot - 3] = value,
            6..=9 => self.rotations[k][slot - 6] = value,
            10 => self.opacities[k] = value,
            11..=22 => self.sh[k][slot - 11] = value,
            _ => panic!("slot {slot} out of range"),
        }
    }
}

/// Names of the 23 gradient slots, grouped by parameter block.
pub const SLOT_BLOCKS: [(&str, std::ops::Range<usize>); 5] = [
    ("mean", 0..3),
    ("scale", 3..6),
    ("rotation", 6..10),
    ("opacity", 10..11),
    ("sh", 11..23),
];

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps raw predictor rows onto valid primitives anchored at `base_points`.
pub fn decode_gaussians(raw: &RawGaussianParams, base_points: &PointCloud, cfg: &DecodeConfig) -> Result<GaussianSet> {
    let values = raw.values();
    if values.nrows() != base_points.len() {
        return Err(Error::dim("decode_gaussians", values.dim(), base_points.len()));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::RejectedInput("non-finite raw Gaussian parameter".into()));
    }
    let (ln_min, ln_max, ln_unit) = (cfg.scale_min.ln(), cfg.scale_max.ln(), cfg.scale_unit.ln());
    let mut out = GaussianSet::default();
    for (k, row) in values.outer_iter().enumerate() {
        let base = base_points.positions[k];
        let mean = [
            base[0] + row[0].tanh() * cfg.offset_bound,
            base[1] + row[1].tanh() * cfg.offset_bound,
            base[2] + row[2].tanh() * cfg.offset_bound,
        ];
        let opacity = sigmoid(row[OPACITY].clamp(-LOGIT_LIMIT, LOGIT_LIMIT));
        let mut scale = [0.0; 3];
        for (i, s) in scale.iter_mut().enumerate() {
            *s = (row[LOG_SCALE.start + i] + ln_unit).clamp(ln_min, ln_max).exp();
        }
        let (q, _) = biased_unit_quaternion([row[7], row[8], row[9], row[10]]);
        let mut sh = [0.0; SH_COEFFS];
        for (i, c) in sh.iter_mut().enumerate() {
            *c = row[SH.start + i];
        }
        out.push(mean, scale, q, opacity, sh);
    }
    Ok(out)
}

/// Normalizes `raw + (1,0,0,0)`; returns the pre-normalization norm (0 when
/// the biased vector vanishes and identity is substituted).
fn biased_unit_quaternion(raw: [f64; 4]) -> ([f64; 4], f64) {
    let r = [raw[0] + 1.0, raw[1], raw[2], raw[3]];
    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return ([1.0, 0.0, 0.0, 0.0], 0.0);
    }
    ([r[0] / n, r[1] / n, r[2] / n, r[3] / n], n)
}

/// Chains gradients w.r.t. decoded primitives (23-slot layout, see
/// [`GaussianSet::slots`]) back to the raw predictor rows.
pub fn decode_backward(raw: &RawGaussianParams, grads: &Array2<f64>, cfg: &DecodeConfig) -> Result<Array2<f64>> {
    let values = raw.values();
    if grads.dim() != values.dim() {
        return Err(Error::dim("decode_backward", values.dim(), grads.dim()));
    }
    let (ln_min, ln_max, ln_unit) = (cfg.scale_min.ln(), cfg.scale_max.ln(), cfg.scale_unit.ln());
    let mut out = Array2::zeros(values.dim());
    for k in 0..values.nrows() {
        let row = values.row(k);
        let g = grads.row(k);
        for i in 0..3 {
            let t = row[i].tanh();
            out[[k, i]] = g[i] * cfg.offset_bound * (1.0 - t * t);
        }
        for i in 0..3 {
            let z = row[LOG_SCALE.start + i] + ln_unit;
            if z > ln_min && z < ln_max {
                out[[k, LOG_SCALE.start + i]] = g[3 + i] * z.exp();
            }
        }
        let (q, n) = biased_unit_quaternion([row[7], row[8], row[9], row[10]]);
        if n > 0.0 {
            let gq = [g[6], g[7], g[8], g[9]];
            let proj: f64 = (0..4).map(|i| q[i] * gq[i]).sum();
            for i in 0..4 {
                out[[k, ROTATION.start + i]] = (gq[i] - q[i] * proj) / n;
            }
        }
        let logit = row[OPACITY];
        if logit.abs() < LOGIT_LIMIT {
            let a = sigmoid(logit);
            out[[k, OPACITY]] = g[10] * a * (1.0 - a);
        }
        for i in 0..SH_COEFFS {
            out[[k, SH.start + i]] = g[11 + i];
        }
    }
    Ok(out)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `∂R/∂q_i` for each quaternion component, evaluated at `q` (unnormalized formula).
pub fn rotation_matrix_jacobian(q: [f64; 4]) -> [[[f64; 3]; 3]; 4] {
    let [w, x, y, z] = q;
    let t = 2.0;
    [
        [[0.0, -t * z, t * y], [t * z, 0.0, -t * x], [-t * y, t * x, 0.0]],
        [[0.0, t * y, t * z], [t * y, -2.0 * t * x, -t * w], [t * z, t * w, -2.0 * t * x]],
        [[-2.0 * t * y, t * x, t * w], [t * x, 0.0, t * z], [-t * w, t * z, -2.0 * t * y]],
        [[-2.0 * t * z, -t * w, t * x], [t * w, -2.0 * t * z, t * y], [t * x, t * y, 0.0]],
    ]
}

pub fn normalize_quaternion(q: [f64; 4]) -> Result<([f64; 4], f64)> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::InvalidRotation(format!("cannot normalize quaternion {q:?}")));
    }
    Ok(([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n))
}

/// `Σ = R S Sᵀ Rᵀ`; the quaternion is normalized first.
pub fn covariance(scale: [f64; 3], q: [f64; 4]) -> Result<[[f64; 3]; 3]> {
    let (q, _) = normalize_quaternion(q)?;
    let r = rotation_matrix(q);
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sigma[i][j] = (0..3).map(|k| r[i][k] * r[j][k] * scale[k] * scale[k]).sum();
        }
    }
    Ok(sigma)
}

/// The four real SH basis values `(DC, y, z, x)` including normalization and sign.
#[inline]
pub fn sh_basis(dir: [f64; 3]) -> [f64; 4] {
    [SH_C0, -SH_C1 * dir[1], SH_C1 * dir[2], -SH_C1 * dir[0]]
}

/// Unclamped view-dependent RGB for a unit viewing direction.
pub fn sh_color(sh: &[f64; SH_COEFFS], dir: [f64; 3]) -> [f64; 3] {
    let b = sh_basis(dir);
    let mut rgb = [0.5; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out += (0..4).map(|i| b[i] * sh[c * 4 + i]).sum::<f64>();
    }
    rgb
}

/// SH coefficients reproducing a constant RGB color from every direction.
pub fn sh_from_rgb(rgb: [f64; 3]) -> [f64; SH_COEFFS] {
    let mut sh = [0.0; SH_COEFFS];
    for c in 0..3 {
        sh[c * 4] = (rgb[c] - 0.5) / SH_C0;
    }
    sh
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_row_decodes_to_fixed_point() {
        let cfg = DecodeConfig::default();
        let base = PointCloud::new(vec![[0.3, -0.2, 1.5]]);
        let g = decode_gaussians(&RawGaussianParams::zeros(1), &base, &cfg).unwrap();
        assert_eq!(g.means[0], [0.3, -0.2, 1.5]);
        assert_eq!(g.opacities[0], 0.5);
        for s in g.scales[0] {
            assert!(close(s, cfg.scale_unit, 1e-15));
        }
        assert_eq!(g.rotations[0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.sh[0], [0.0; SH_COEFFS]);
    }

    #[test]
    fn raw_width_must_be_23() {
        let err = RawGaussianParams::new(Array2::zeros((4, 22))).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn non_finite_raw_is_rejected() {
        let mut a = Array2::zeros((1, RAW_WIDTH));
        a[[0, 5]] = f64::INFINITY;
        assert!(matches!(RawGaussianParams::new(a).unwrap_err(), Error::RejectedInput(_)));
    }

    #[test]
    fn row_count_must_match_base() {
        let base = PointCloud::new(vec![[0.0; 3]; 2]);
        let err = decode_gaussians(&RawGaussianParams::zeros(3), &base, &DecodeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn random_rows_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1000;
        let raw = Array2::from_shape_fn((n, RAW_WIDTH), |_| rng.gen_range(-40.0..40.0));
        let base = PointCloud::new((0..n).map(|i| [i as f64, 0.0, 1.0]).collect());
        let g = decode_gaussians(&RawGaussianParams::new(raw).unwrap(), &base, &DecodeConfig::default()).unwrap();
        g.validate().unwrap();
        assert_eq!(g.len(), n);
    }

    #[test]
    fn cancelled_quaternion_falls_back_to_identity() {
        let mut raw = Array2::zeros((1, RAW_WIDTH));
        raw[[0, ROTATION.start]] = -1.0;
        let g = decode_gaussians(
            &RawGaussianParams::new(raw).unwrap(),
            &PointCloud::new(vec![[0.0; 3]]),
            &DecodeConfig::default(),
        )
        .unwrap();
        assert_eq!(g.rotations[0], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn decode_backward_matches_finite_differences() {
        let cfg = DecodeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let raw = Array2::from_shape_fn((n, RAW_WIDTH), |_| rng.gen_range(-1.5..1.5));
        let upstream = Array2::from_shape_fn((n, RAW_WIDTH), |_| rng.gen_range(-1.0..1.0));
        let base = PointCloud::new((0..n).map(|i| [i as f64 * 0.1, 0.2, -0.3]).collect());
        let objective = |r: &Array2<f64>| -> f64 {
            let g = decode_gaussians(&RawGaussianParams::new(r.clone()).unwrap(), &base, &cfg).unwrap();
            (0..n)
                .map(|k| g.slots(k).iter().zip(upstream.row(k)).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let analytic = decode_backward(&RawGaussianParams::new(raw.clone()).unwrap(), &upstream, &cfg).unwrap();
        let h = 1e-6;
        for k in 0..n {
            for j in 0..RAW_WIDTH {
                let mut p = raw.clone();
                p[[k, j]] += h;
                let mut m = raw.clone();
                m[[k, j]] -= h;
                let fd = (objective(&p) - objective(&m)) / (2.0 * h);
                let a = analytic[[k, j]];
                assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "slot {j} row {k}: fd {fd} analytic {a}");
            }
        }
    }

    #[test]
    fn identity_rotation_gives_diagonal_covariance() {
        let s = covariance([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, [[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 9.0]]);
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let h = std::f64::consts::FRAC_PI_4;
        let s = covariance([1.0, 2.0, 1.0], [h.cos(), 0.0, 0.0, h.sin()]).unwrap();
        let expected = [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!(close(s[i][j], expected[i][j], 1e-12), "{s:?}");
            }
        }
    }

    #[test]
    fn zero_quaternion_is_invalid() {
        assert!(matches!(
            covariance([1.0; 3], [0.0; 4]).unwrap_err(),
            Error::InvalidRotation(_)
        ));
    }

    #[test]
    fn covariance_is_sign_invariant_and_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let s = [rng.gen_range(0.01..3.0), rng.gen_range(0.01..3.0), rng.gen_range(0.01..3.0)];
            let q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let sigma = covariance(s, q).unwrap();
            let flipped = covariance(s, [-q[0], -q[1], -q[2], -q[3]]).unwrap();
            let m = nalgebra::Matrix3::from_fn(|i, j| sigma[i][j]);
            for i in 0..3 {
                for j in 0..3 {
                    assert!(close(sigma[i][j], sigma[j][i], 1e-12));
                    assert!(close(sigma[i][j], flipped[i][j], 1e-12));
                }
            }
            let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut sq: Vec<f64> = s.iter().map(|x| x * x).collect();
            sq.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&sq) {
                assert!(close(*a, *b, 1e-9), "{eig:?} vs {sq:?}");
            }
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let q = [0.3, -0.5, 0.7, 0.2];
        let jac = rotation_matrix_jacobian(q);
        let h = 1e-6;
        for i in 0..4 {
            let mut p = q;
            p[i] += h;
            let mut m = q;
            m[i] -= h;
            let (rp, rm) = (rotation_matrix(p), rotation_matrix(m));
            for a in 0..3 {
                for b in 0..3 {
                    let fd = (rp[a][b] - rm[a][b]) / (2.0 * h);
                    assert!(close(fd, jac[i][a][b], 1e-8), "q{i} [{a}][{b}]");
                }
            }
        }
    }

    #[test]
    fn dc_only_sh_is_view_independent() {
        let mut sh = [0.0; SH_COEFFS];
        assert_eq!(sh_color(&sh, [0.0, 0.0, 1.0]), [0.5; 3]);
        sh[0] = 0.7;
        sh[4] = -0.2;
        let a = sh_color(&sh, [0.0, 0.0, 1.0]);
        let b = sh_color(&sh, [0.6, 0.0, 0.8]);
        assert_eq!(a, b);
    }

    #[test]
    fn sh_matches_independent_basis_oracle() {
        // Real SH up to l=1 written as Y_1^{-1} = sqrt(3/4π) y, Y_1^0 = sqrt(3/4π) z, Y_1^1 = sqrt(3/4π) x
        // with the splatting sign convention (-, +, -) on the degree-1 terms.
        let y00 = 0.5 / std::f64::consts::PI.sqrt();
        let y1 = (3.0 / (4.0 * std::f64::consts::PI)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let mut sh = [0.0; SH_COEFFS];
            sh.iter_mut().for_each(|c| *c = rng.gen_range(-2.0..2.0));
            let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let d = [v[0] / n, v[1] / n, v[2] / n];
            let got = sh_color(&sh, d);
            for c in 0..3 {
                let want = 0.5 + y00 * sh[c * 4] - y1 * d[1] * sh[c * 4 + 1] + y1 * d[2] * sh[c * 4 + 2]
                    - y1 * d[0] * sh[c * 4 + 3];
                assert!(close(got[c], want, 1e-12));
            }
        }
    }

    #[test]
    fn sh_is_linear_in_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = [0.0; SH_COEFFS];
        let mut b = [0.0; SH_COEFFS];
        a.iter_mut().chain(b.iter_mut()).for_each(|c| *c = rng.gen_range(-1.0..1.0));
        let d = [0.0, 0.6, 0.8];
        let sum: [f64; SH_COEFFS] = std::array::from_fn(|i| a[i] + 2.0 * b[i]);
        let (ca, cb, cs) = (sh_color(&a, d), sh_color(&b, d), sh_color(&sum, d));
        for c in 0..3 {
            // sh_color carries a +0.5 offset, so linearity holds for the shifted value.
            assert!(close(cs[c] - 0.5, (ca[c] - 0.5) + 2.0 * (cb[c] - 0.5), 1e-12));
        }
    }

    #[test]
    fn sh_from_rgb_round_trips() {
        let rgb = [0.1, 0.8, 0.45];
        let c = sh_color(&sh_from_rgb(rgb), [1.0, 0.0, 0.0]);
        for i in 0..3 {
            assert!(close(c[i], rgb[i], 1e-14));
        }
    }
}
