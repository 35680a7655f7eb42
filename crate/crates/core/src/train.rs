//! Forward/backward through decode, splatting and the photometric loss, and
//! the optimizer loop around it.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, adam_step, Graph, NonFinitePolicy, ParamId, ParameterStore};
use crate::config::RunConfig;
use crate::data::{select_views, Mode, SceneSample, ViewSplit};
use crate::error::{Error, Result};
use crate::gaussians::{decode_backward, decode_gaussians, GaussianSet, RawGaussianParams};
use crate::image::ImageTensor;
use crate::loss::{compute_fg_mask, mse_loss, psnr, weighted_object_loss, FgMask};
use crate::model::{Model, ModelInput};
use crate::render::{render, render_backward, GaussianGrads};

/// Loss, image quality and (when requested) parameter gradients for one sample.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub loss: f64,
    pub psnr: f64,
    /// PSNR of each render view.
    pub view_psnr: Vec<f64>,
    pub n_gaussians: usize,
    pub rendered: ImageTensor,
    pub grads: Vec<(ParamId, Array2<f64>)>,
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub psnr: f64,
    pub lr: f64,
    pub n_gaussians: usize,
}

/// Predicted primitives for a sample seen through `reference`.
pub fn predict(model: &Model, store: &ParameterStore, cfg: &RunConfig, sample: &SceneSample, reference: &[usize]) -> Result<GaussianSet> {
    let input = ModelInput::from_sample(sample, reference)?;
    let mut g = Graph::inference();
    let out = model.forward(&mut g, store, &input)?;
    let raw = RawGaussianParams::new(g.value(out.raw).clone())?;
    decode_gaussians(&raw, &out.base, &cfg.model.decode)
}

/// Runs the whole pipeline for one sample and split.
pub fn run_sample(
    model: &Model,
    store: &ParameterStore,
    cfg: &RunConfig,
    sample: &SceneSample,
    split: &ViewSplit,
    with_grads: bool,
) -> Result<SampleOutcome> {
    let input = ModelInput::from_sample(sample, &split.reference)?;
    let mut g = if with_grads { Graph::new() } else { Graph::inference() };
    let out = model.forward(&mut g, store, &input)?;
    let raw = RawGaussianParams::new(g.value(out.raw).clone())?;
    let gaussians = decode_gaussians(&raw, &out.base, &cfg.model.decode)?;
    let bg = cfg.loss.background;
    let cams: Vec<_> = split.render.iter().map(|&i| &sample.cameras[i]).collect();
    let views = cams
        .iter()
        .map(|c| render(&gaussians, c, bg).map(|r| r.image))
        .collect::<Result<Vec<_>>>()?;
    let rendered = ImageTensor::stack(&views)?;
    let gt = sample.images_at(&split.render);
    let loss = match cfg.mode {
        Mode::Object => {
            let masks = cams
                .iter()
                .map(|c| compute_fg_mask(&sample.points, c, cfg.loss.fg_dilation))
                .collect::<Result<Vec<_>>>()?;
            weighted_object_loss(&rendered, &gt, &FgMask::stack(masks)?, cfg.loss.w_fg, cfg.loss.w_bg)?
        }
        Mode::Scene => mse_loss(&rendered, &gt)?,
    };
    let view_psnr = (0..views.len())
        .map(|v| psnr(&views[v], &gt.view(v), 1.0))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Vec::new();
    if with_grads && loss.value.is_finite() {
        let mut total = GaussianGrads::zeros(gaussians.len());
        for (v, cam) in cams.iter().enumerate() {
            total.add_assign(&render_backward(&gaussians, cam, bg, &loss.grad.view(v))?);
        }
        let raw_grad = decode_backward(&raw, &total.to_array(), &cfg.model.decode)?;
        grads = g.backward(&[(out.raw, raw_grad)])?.parameter_grads(&g);
    }
    Ok(SampleOutcome {
        loss: loss.value,
        psnr: psnr(&rendered, &gt, 1.0)?,
        view_psnr,
        n_gaussians: gaussians.len(),
        rendered,
        grads,
    })
}

/// Independent stream for `(seed, a, b)`.
fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^ (x >> 33)
}

/// Fixed split used for evaluation, probing and rendering.
pub fn eval_split(cfg: &RunConfig, sample: &SceneSample) -> Result<ViewSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(sample.seed, u64::MAX, 0));
    select_views(sample.num_views(), cfg.mode, &cfg.views, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_seed: u64,
    pub view: usize,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_loss: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParameterStore,
    pub step: u64,
    /// Epoch of the current step; drives the learning-rate schedule.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let mut store = ParameterStore::new();
        let model = Model::new(&mut store, &config)?;
        Ok(Self {
            config,
            model,
            store,
            step: 0,
            epoch: 0,
        })
    }

    /// Rebuilds the model from the configuration stored in a checkpoint.
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = load_checkpoint(dir)?;
        let config: RunConfig = serde_json::from_value(manifest.model)
            .map_err(|e| Error::format(dir, format!("checkpoint configuration: {e}")))?;
        let mut t = Self::new(config)?;
        t.store.load_values(&tensors)?;
        t.step = manifest.step;
        Ok(t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.config).expect("config serializes");
        save_checkpoint(dir, &self.store, self.step, self.lr(), self.config.optimizer.adam(), cfg)?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.config.optimizer.batch_size)
    }

    fn epoch_of(&self, n_samples: usize) -> usize {
        (self.step / self.steps_per_epoch(n_samples.max(1)) as u64) as usize
    }

    /// Learning rate for the current epoch.
    pub fn lr(&self) -> f64 {
        let o = &self.config.optimizer;
        o.schedule.lr(o.lr, self.epoch)
    }

    pub fn split_for(&self, sample: &SceneSample, slot: usize) -> Result<ViewSplit> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, self.step, slot as u64));
        select_views(sample.num_views(), self.config.mode, &self.config.views, &mut rng)
    }

    /// One optimizer step on the mean loss of `batch`.
    pub fn train_batch(&mut self, batch: &[&SceneSample], lr: f64, epoch: usize) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::RejectedInput("empty batch".into()));
        }
        let splits = batch
            .iter()
            .enumerate()
            .map(|(i, s)| self.split_for(s, i))
            .collect::<Result<Vec<_>>>()?;
        let shuffled: Vec<SceneSample> = if self.config.augment.channel_shuffle {
            batch
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut order = [0, 1, 2];
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, self.step, i as u64 | 1 << 32)));
                    s.with_channel_order(order)
                })
                .collect()
        } else {
            Vec::new()
        };
        let batch: Vec<&SceneSample> = if shuffled.is_empty() { batch.to_vec() } else { shuffled.iter().collect() };
        let (model, store, cfg) = (&self.model, &self.store, &self.config);
        let outcomes = batch
            .par_iter()
            .zip(&splits)
            .map(|(s, split)| run_sample(model, store, cfg, s, split, true))
            .collect::<Result<Vec<_>>>()?;
        let n = batch.len() as f64;
        let loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / n;
        let metrics = StepMetrics {
            step: self.step,
            epoch,
            loss,
            psnr: outcomes.iter().map(|o| o.psnr).sum::<f64>() / n,
            lr,
            n_gaussians: outcomes.iter().map(|o| o.n_gaussians).sum(),
        };
        if !loss.is_finite() {
            let seeds: Vec<u64> = batch.iter().map(|s| s.seed).collect();
            let msg = format!(
                "non-finite loss at step {} (lr {lr}, sample seeds {seeds:?}, per-sample losses {:?})",
                self.step,
                outcomes.iter().map(|o| o.loss).collect::<Vec<_>>()
            );
            return match cfg.optimizer.non_finite {
                NonFinitePolicy::Fail => Err(Error::Numeric(msg)),
                NonFinitePolicy::Skip => {
                    self.step += 1;
                    Ok(metrics)
                }
            };
        }
        self.store.zero_grad();
        for o in &outcomes {
            for (id, g) in &o.grads {
                self.store.accumulate_grad(*id, g)?;
            }
        }
        self.store.scale_grads(1.0 / n);
        adam_step(&mut self.store, lr, &self.config.optimizer.adam())
            .map_err(|e| Error::Numeric(format!("{e} at step {}", self.step)))?;
        self.step += 1;
        Ok(metrics)
    }

    /// Trains for the configured epochs (or `max_steps`). `on_step` sees every
    /// step; checkpoints go to `checkpoint_dir` every `checkpoint_every` steps
    /// and at the end.
    pub fn fit(
        &mut self,
        data: &[SceneSample],
        mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::RejectedInput("no training samples".into()));
        }
        for s in data {
            if s.mode != self.config.mode {
                return Err(Error::Config(format!(
                    "dataset sample seed {} is {:?}, configuration is {:?}",
                    s.seed, s.mode, self.config.mode
                )));
            }
            if s.background != self.config.loss.background {
                return Err(Error::Config(format!(
                    "dataset background {:?} differs from loss.background {:?}",
                    s.background, self.config.loss.background
                )));
            }
        }
        let o = self.config.optimizer;
        let per_epoch = self.steps_per_epoch(data.len());
        let total = (o.epochs * per_epoch) as u64;
        let total = o.max_steps.map_or(total, |m| m.min(total));
        let mut order: Vec<usize> = (0..data.len()).collect();
        while self.step < total {
            let epoch = self.epoch_of(data.len());
            self.epoch = epoch;
            let within = (self.step % per_epoch as u64) as usize;
            if within == 0 || self.step == 0 {
                order = (0..data.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, epoch as u64, 1)));
            }
            let lo = within * o.batch_size;
            let batch: Vec<&SceneSample> = order[lo..(lo + o.batch_size).min(data.len())]
                .iter()
                .map(|&i| &data[i])
                .collect();
            let m = self.train_batch(&batch, self.lr(), epoch)?;
            on_step(&m)?;
            if let Some(dir) = checkpoint_dir {
                if self.step.is_multiple_of(o.checkpoint_every) {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save(dir)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, data: &[SceneSample]) -> Result<EvalReport> {
        let mut rows = Vec::new();
        let mut loss = 0.0;
        for s in data {
            let split = eval_split(&self.config, s)?;
            let out = run_sample(&self.model, &self.store, &self.config, s, &split, false)?;
            loss += out.loss;
            for (&view, &p) in split.render.iter().zip(&out.view_psnr) {
                rows.push(EvalRow {
                    sample_seed: s.seed,
                    view,
                    psnr: p,
                });
            }
        }
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len().max(1) as f64;
        Ok(EvalReport {
            rows,
            mean_psnr,
            mean_loss: loss / data.len().max(1) as f64,
        })
    }
}
