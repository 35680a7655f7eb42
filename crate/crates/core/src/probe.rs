//! Linear probe on frozen per-point features: a pretrained model against a
//! freshly initialized one of the same shape.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, Graph, Linear, ParameterStore};
use crate::config::RunConfig;
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::train::{eval_split, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pretrained_acc: f64,
    pub random_acc: f64,
    pub delta: f64,
    pub num_classes: usize,
    pub train_points: usize,
    pub test_points: usize,
}

/// Backbone features of every input point, `N×C_3D`.
pub fn point_features(model: &Model, store: &ParameterStore, cfg: &RunConfig, sample: &SceneSample) -> Result<Array2<f64>> {
    let split = eval_split(cfg, sample)?;
    let input = ModelInput::from_sample(sample, &split.reference)?;
    let mut g = Graph::inference();
    let out = model.forward(&mut g, store, &input)?;
    Ok(g.value(out.features).select(Axis(0), &out.point_rows))
}

fn stacked(model: &Model, store: &ParameterStore, cfg: &RunConfig, samples: &[SceneSample]) -> Result<(Array2<f64>, Vec<usize>)> {
    let parts = samples
        .iter()
        .map(|s| point_features(model, store, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::RejectedInput(e.to_string()))?;
    let y = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    Ok((x, y))
}

/// Trains a softmax classifier on standardized training features and returns test accuracy.
pub fn linear_probe(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() || train_x.ncols() != test_x.ncols() {
        return Err(Error::dim("linear_probe", train_x.dim(), test_x.dim()));
    }
    if test_y.is_empty() || train_y.is_empty() {
        return Err(Error::RejectedInput("probe needs training and test points".into()));
    }
    let mean = train_x.mean_axis(Axis(0)).expect("non-empty");
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
    let norm = |x: &Array2<f64>| (x - &mean) / &std;
    let (tx, vx) = (norm(train_x), norm(test_x));
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layer = Linear::new(&mut store, "probe", tx.ncols(), num_classes, false, &mut rng)?;
    let adam = AdamConfig::default();
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let x = g.input(tx.clone());
        let logits = layer.forward(&mut g, &store, x)?;
        let loss = g.softmax_cross_entropy(logits, train_y)?;
        let grads = g.backward(&[(loss, Array2::ones((1, 1)))])?.parameter_grads(&g);
        store.zero_grad();
        for (id, gr) in &grads {
            store.accumulate_grad(*id, gr)?;
        }
        adam_step(&mut store, cfg.lr, &adam)?;
    }
    let mut g = Graph::inference();
    let x = g.input(vx);
    let logits = layer.forward(&mut g, &store, x)?;
    let correct = g
        .value(logits)
        .outer_iter()
        .zip(test_y)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i);
            best == Some(y)
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

/// Probes `pretrained` and a freshly initialized model built from the same
/// configuration. The first half of `samples` trains the classifier, the
/// second half is the test split.
pub fn probe(pretrained: &Trainer, samples: &[SceneSample], cfg: &ProbeConfig) -> Result<ProbeReport> {
    if samples.len() < 2 {
        return Err(Error::RejectedInput("probe needs at least two samples".into()));
    }
    let num_classes = samples.iter().map(|s| s.num_classes).max().unwrap_or(0);
    let (train, test) = samples.split_at(samples.len() / 2);
    let fresh = Trainer::new(pretrained.config.clone())?;
    let mut acc = [0.0; 2];
    let mut sizes = (0, 0);
    for (slot, t) in [pretrained, &fresh].into_iter().enumerate() {
        let (tx, ty) = stacked(&t.model, &t.store, &t.config, train)?;
        let (vx, vy) = stacked(&t.model, &t.store, &t.config, test)?;
        sizes = (ty.len(), vy.len());
        acc[slot] = linear_probe(&tx, &ty, &vx, &vy, num_classes, cfg)?;
    }
    Ok(ProbeReport {
        pretrained_acc: acc[0],
        random_acc: acc[1],
        delta: acc[0] - acc[1],
        num_classes,
        train_points: sizes.0,
        test_points: sizes.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_features_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut make = |n: usize| {
            let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let x = Array2::from_shape_fn((n, 4), |(i, j)| {
                let centre = if j == y[i] { 3.0 } else { 0.0 };
                centre + rng.gen_range(-0.5..0.5)
            });
            (x, y)
        };
        let (tx, ty) = make(90);
        let (vx, vy) = make(30);
        let acc = linear_probe(&tx, &ty, &vx, &vy, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }
}
