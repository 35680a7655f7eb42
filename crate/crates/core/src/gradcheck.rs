//! Finite-difference verification of the analytic gradients: the splatting
//! backward pass, the primitive decoder and composite tape graphs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Linear, ParameterStore};
use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::gaussians::{decode_backward, decode_gaussians, DecodeConfig, GaussianSet, RawGaussianParams, RAW_WIDTH, SLOT_BLOCKS};
use crate::image::ImageTensor;
use crate::render::{project_sorted, render, render_backward};
use crate::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub n_gaussians: usize,
    pub image_size: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub seed: u64,
    /// Draws allowed per accepted instance before giving up.
    pub max_attempts: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            n_gaussians: 8,
            image_size: 16,
            step: 1e-5,
            rel_tol: 1e-3,
            abs_tol: 1e-7,
            seed: 0,
            max_attempts: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block: String,
    pub checked: usize,
    pub failed: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl BlockStats {
    fn new(block: &str) -> Self {
        Self {
            block: block.to_string(),
            checked: 0,
            failed: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, cfg: &GradcheckConfig) -> bool {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        let ok = abs <= cfg.abs_tol || rel <= cfg.rel_tol;
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if scale > cfg.abs_tol {
            self.max_rel_err = self.max_rel_err.max(rel);
        }
        if !ok {
            self.failed += 1;
        }
        ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub suite: String,
    pub instance: usize,
    pub item: usize,
    pub slot: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub suite: String,
    pub instances: usize,
    /// Draws discarded because a perturbation crossed a non-differentiable boundary.
    pub rejected: usize,
    pub blocks: Vec<BlockStats>,
    pub worst: Vec<Mismatch>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.failed == 0) && self.instances > 0
    }
}

/// Random splatting instance: primitives around the origin seen by a random look-at camera.
pub fn random_instance(rng: &mut impl Rng, n: usize, size: usize) -> Result<(GaussianSet, Camera, ImageTensor, [f64; 3])> {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let elev = rng.gen_range(-0.6..0.6f64);
    let dist = rng.gen_range(2.5..4.0);
    let eye = [dist * elev.cos() * theta.cos(), dist * elev.sin(), dist * elev.cos() * theta.sin()];
    let target = [0; 3].map(|_: u8| rng.gen_range(-0.1..0.1));
    let cam = Camera::look_at(Intrinsics::from_fov(size, size, 50.0), eye, target, [0.0, 1.0, 0.0])?;
    let mut g = GaussianSet::default();
    for _ in 0..n {
        let mean = [0; 3].map(|_: u8| rng.gen_range(-0.6..0.6));
        let scale = [0; 3].map(|_: u8| rng.gen_range(0.06..0.3));
        let q = [0; 4].map(|_: u8| rng.gen_range(-1.0..1.0));
        let opacity = rng.gen_range(0.2..0.9);
        let mut sh = [0.0; 12];
        for (i, c) in sh.iter_mut().enumerate() {
            *c = if i % 4 == 0 { rng.gen_range(-0.6..0.6) } else { rng.gen_range(-0.3..0.3) };
        }
        g.push(mean, scale, q, opacity, sh);
    }
    let upstream = ImageTensor::from_vec(1, 3, size, size, (0..3 * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let bg = [0; 3].map(|_: u8| rng.gen_range(0.0..1.0));
    Ok((g, cam, upstream, bg))
}

/// Discrete structure of a render: depth order, colour clamp states and the
/// ordered contributors (with opacity clamp flag) of every pixel.
fn structure(g: &GaussianSet, cam: &Camera) -> Result<Vec<u64>> {
    let splats = project_sorted(g, cam)?;
    let mut sig = Vec::new();
    for s in &splats {
        let mut bits = (s.index as u64) << 3;
        for (c, &active) in s.color_active.iter().enumerate() {
            bits |= u64::from(active) << c;
        }
        sig.push(bits);
    }
    for y in 0..cam.height() {
        for x in 0..cam.width() {
            sig.push(u64::MAX);
            for s in &splats {
                if let Some((_, _, clamped)) = s.alpha_at(x, y) {
                    sig.push(((s.index as u64) << 1) | u64::from(clamped));
                }
            }
        }
    }
    Ok(sig)
}

fn objective(g: &GaussianSet, cam: &Camera, bg: [f64; 3], upstream: &ImageTensor) -> Result<f64> {
    let img = render(g, cam, bg)?.image;
    Ok(img.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
}

fn block_of(slot: usize) -> usize {
    SLOT_BLOCKS.iter().position(|(_, r)| r.contains(&slot)).expect("slot in a block")
}

/// Checks every one of the 23 slots of every primitive against central differences.
pub fn renderer_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut blocks: Vec<BlockStats> = SLOT_BLOCKS.iter().map(|(n, _)| BlockStats::new(n)).collect();
    let mut worst = Vec::new();
    let mut rejected = 0;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < cfg.instances {
        attempts += 1;
        if attempts > cfg.instances * cfg.max_attempts {
            return Err(Error::Numeric(format!("only {accepted} differentiable instances after {attempts} draws")));
        }
        let (g, cam, upstream, bg) = random_instance(&mut rng, cfg.n_gaussians, cfg.image_size)?;
        let base_sig = structure(&g, &cam)?;
        if project_sorted(&g, &cam)?.is_empty() {
            rejected += 1;
            continue;
        }
        let analytic = render_backward(&g, &cam, bg, &upstream)?;
        let mut numeric = vec![[0.0; RAW_WIDTH]; g.len()];
        let mut smooth = true;
        'outer: for k in 0..g.len() {
            let x0 = g.slots(k);
            for slot in 0..RAW_WIDTH {
                let mut plus = g.clone();
                plus.set_slot(k, slot, x0[slot] + cfg.step);
                let mut minus = g.clone();
                minus.set_slot(k, slot, x0[slot] - cfg.step);
                if structure(&plus, &cam)? != base_sig || structure(&minus, &cam)? != base_sig {
                    smooth = false;
                    break 'outer;
                }
                numeric[k][slot] =
                    (objective(&plus, &cam, bg, &upstream)? - objective(&minus, &cam, bg, &upstream)?) / (2.0 * cfg.step);
            }
        }
        if !smooth {
            rejected += 1;
            continue;
        }
        for k in 0..g.len() {
            for slot in 0..RAW_WIDTH {
                let (a, n) = (analytic.0[k][slot], numeric[k][slot]);
                if !blocks[block_of(slot)].record(a, n, cfg) && worst.len() < 10 {
                    worst.push(Mismatch {
                        suite: "renderer".into(),
                        instance: accepted,
                        item: k,
                        slot,
                        analytic: a,
                        numeric: n,
                    });
                }
            }
        }
        accepted += 1;
    }
    Ok(GradcheckReport {
        suite: "renderer".into(),
        instances: accepted,
        rejected,
        blocks,
        worst,
    })
}

/// Checks the primitive decoder's chain rule on random raw rows.
pub fn decode_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDEC0DE);
    let dcfg = DecodeConfig::default();
    let mut stats = BlockStats::new("raw");
    let mut worst = Vec::new();
    for inst in 0..cfg.instances {
        let n = cfg.n_gaussians;
        let raw = Array2::from_shape_fn((n, RAW_WIDTH), |_| rng.gen_range(-1.5..1.5));
        let base = PointCloud::new((0..n).map(|_| [0; 3].map(|_: u8| rng.gen_range(-1.0..1.0))).collect());
        let up = Array2::from_shape_fn((n, RAW_WIDTH), |_| rng.gen_range(-1.0..1.0));
        let f = |r: &Array2<f64>| -> Result<f64> {
            let d = decode_gaussians(&RawGaussianParams::new(r.clone())?, &base, &dcfg)?;
            Ok((0..n).map(|k| d.slots(k).iter().zip(up.row(k)).map(|(a, b)| a * b).sum::<f64>()).sum())
        };
        let grad = decode_backward(&RawGaussianParams::new(raw.clone())?, &up, &dcfg)?;
        for k in 0..n {
            for j in 0..RAW_WIDTH {
                let (mut p, mut m) = (raw.clone(), raw.clone());
                p[[k, j]] += cfg.step;
                m[[k, j]] -= cfg.step;
                let num = (f(&p)? - f(&m)?) / (2.0 * cfg.step);
                if !stats.record(grad[[k, j]], num, cfg) && worst.len() < 10 {
                    worst.push(Mismatch {
                        suite: "decode".into(),
                        instance: inst,
                        item: k,
                        slot: j,
                        analytic: grad[[k, j]],
                        numeric: num,
                    });
                }
            }
        }
    }
    Ok(GradcheckReport {
        suite: "decode".into(),
        instances: cfg.instances,
        rejected: 0,
        blocks: vec![stats],
        worst,
    })
}

/// Composite loss plus the sign pattern of the ReLU inputs (draws next to a kink are rejected).
fn composite(store: &ParameterStore, layers: &[Linear; 3], x: &Array2<f64>, groups: &[Vec<usize>], labels: &[usize]) -> Result<(f64, Vec<bool>, Graph, crate::autodiff::Var)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let h = layers[0].forward(&mut g, store, xv)?;
    let h = g.normalize_rows(h)?;
    let pattern = g.value(h).iter().map(|&v| v > 0.0).collect();
    let h = g.relu(h);
    let pooled = g.mean_pool_rows(h)?;
    let n = g.shape(h).0;
    let ctx = g.broadcast_rows(pooled, n)?;
    let cat = g.concat_channels(&[h, ctx])?;
    let h2 = layers[1].forward(&mut g, store, cat)?;
    let h2 = g.tanh(h2);
    let grouped = g.gather_mean(h2, groups.to_vec())?;
    let both = g.concat_rows(&[grouped, h2])?;
    let logits = layers[2].forward(&mut g, store, both)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    Ok((g.value(loss)[[0, 0]], pattern, g, loss))
}

/// Checks parameter gradients of a composite graph using every tape op the
/// model relies on.
pub fn tape_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A9E);
    let mut stats = BlockStats::new("params");
    let mut worst = Vec::new();
    let mut rejected = 0;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < cfg.instances {
        attempts += 1;
        if attempts > cfg.instances * cfg.max_attempts {
            return Err(Error::Numeric("tape gradcheck kept hitting ReLU kinks".into()));
        }
        let mut store = ParameterStore::new();
        let layers = [
            Linear::new(&mut store, "a", 3, 6, false, &mut rng)?,
            Linear::new(&mut store, "b", 12, 5, false, &mut rng)?,
            Linear::new(&mut store, "c", 5, 4, false, &mut rng)?,
        ];
        for p in store.iter_mut() {
            p.value.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        }
        let n = 7;
        let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let groups = vec![vec![0, 2], vec![], vec![1, 3, 6], vec![5]];
        let labels: Vec<usize> = (0..groups.len() + n).map(|_| rng.gen_range(0..4)).collect();
        let (_, pattern, g, loss) = composite(&store, &layers, &x, &groups, &labels)?;
        let grads = g.backward(&[(loss, Array2::ones((1, 1)))])?.parameter_grads(&g);
        let mut numeric = Vec::new();
        let mut smooth = true;
        for (id, _) in &grads {
            let shape = store.get(*id).value.dim();
            let mut num = Array2::zeros(shape);
            for idx in ndarray::indices(shape) {
                let mut s = store.clone();
                s.get_mut(*id).value[idx] += cfg.step;
                let (lp, pp, _, _) = composite(&s, &layers, &x, &groups, &labels)?;
                s.get_mut(*id).value[idx] -= 2.0 * cfg.step;
                let (lm, pm, _, _) = composite(&s, &layers, &x, &groups, &labels)?;
                if pp != pattern || pm != pattern {
                    smooth = false;
                }
                num[idx] = (lp - lm) / (2.0 * cfg.step);
            }
            numeric.push(num);
        }
        if !smooth {
            rejected += 1;
            continue;
        }
        for ((id, a), n) in grads.iter().zip(&numeric) {
            for (i, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
                if !stats.record(av, nv, cfg) && worst.len() < 10 {
                    worst.push(Mismatch {
                        suite: format!("tape:{}", store.get(*id).name),
                        instance: accepted,
                        item: i,
                        slot: 0,
                        analytic: av,
                        numeric: nv,
                    });
                }
            }
        }
        accepted += 1;
    }
    Ok(GradcheckReport {
        suite: "tape".into(),
        instances: accepted,
        rejected,
        blocks: vec![stats],
        worst,
    })
}
