//! Synthetic temporal-order task: two fixed event vectors appear once each
//! at distinct random times among noise-only frames; the label says which
//! came first. A projector, mean-pooled over queries and read out by an
//! affine map, is trained with momentum gradient descent on logistic loss.
//!
//! Under a full mask the pooled representation is a function of the multiset
//! of frames only, so the two labels cannot be told apart.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{FrameMask, MaskRule};
use crate::numkernel::Matrix;
use crate::projector::{forward_cached, forward_video, init_params, FrameEmbeddings, ProjectorConfig, ProjectorParams};
use crate::rng::{gaussian, substream};

use super::backward::backward_from_cache;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrderDatasetSpec {
    pub n_examples: usize,
    pub n_frames: usize,
    pub tokens_per_frame: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for OrderDatasetSpec {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            n_frames: 8,
            tokens_per_frame: 1,
            channels: 16,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OrderExample {
    pub frames: FrameEmbeddings,
    /// `true` when event A precedes event B.
    pub a_first: bool,
    pub pos_a: usize,
    pub pos_b: usize,
}

#[derive(Clone, Debug)]
pub struct OrderDataset {
    pub spec: OrderDatasetSpec,
    pub event_a: Vec<f64>,
    pub event_b: Vec<f64>,
    pub examples: Vec<OrderExample>,
    /// Indices into `examples`, 80% / 20%.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_order_dataset(spec: &OrderDatasetSpec) -> Result<OrderDataset> {
    if spec.n_frames < 2 || spec.tokens_per_frame == 0 || spec.channels == 0 || spec.n_examples < 5 {
        return Err(Error::invalid("order task needs >= 2 frames, >= 5 examples and positive dims"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid("noise must be finite and non-negative"));
    }
    let mut rng = substream(spec.seed, "order-events");
    let event_a: Vec<f64> = (0..spec.channels).map(|_| gaussian(&mut rng, 1.0)).collect();
    let event_b: Vec<f64> = (0..spec.channels).map(|_| gaussian(&mut rng, 1.0)).collect();

    let mut rng = substream(spec.seed, "order-examples");
    let (t, l, c) = (spec.n_frames, spec.tokens_per_frame, spec.channels);
    let mut examples = Vec::with_capacity(spec.n_examples);
    for e in 0..spec.n_examples {
        let a_first = e % 2 == 0;
        let first = rng.random_range(0..t - 1);
        let second = rng.random_range(first + 1..t);
        let (pos_a, pos_b) = if a_first { (first, second) } else { (second, first) };
        let tokens = Matrix::from_fn(t * l, c, |r, ch| {
            let frame = r / l;
            let base = if frame == pos_a {
                event_a[ch]
            } else if frame == pos_b {
                event_b[ch]
            } else {
                0.0
            };
            base + gaussian(&mut rng, spec.noise)
        });
        examples.push(OrderExample {
            frames: FrameEmbeddings::from_tokens(l, tokens)?,
            a_first,
            pos_a,
            pos_b,
        });
    }

    let mut order: Vec<usize> = (0..spec.n_examples).collect();
    order.shuffle(&mut substream(spec.seed, "order-split"));
    let n_train = spec.n_examples * 4 / 5;
    let test = order.split_off(n_train);
    Ok(OrderDataset {
        spec: spec.clone(),
        event_a,
        event_b,
        examples,
        train: order,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Examples per update; `0` means full batch.
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

/// Projector followed by mean pooling over queries and an affine readout.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderProbe {
    pub params: ProjectorParams<f64>,
    pub mask: FrameMask,
    pub readout: Vec<f64>,
    pub bias: f64,
}

impl OrderProbe {
    pub fn new(config: &ProjectorConfig, n_frames: usize) -> Result<Self> {
        let params = init_params(config)?;
        let mask = config.mask_rule.build(config.n_queries, n_frames)?;
        let mut rng = substream(config.seed, "order-readout");
        let std = 1.0 / (config.model_dim as f64).sqrt();
        let readout = (0..config.model_dim).map(|_| gaussian(&mut rng, std)).collect();
        Ok(Self {
            params,
            mask,
            readout,
            bias: 0.0,
        })
    }

    fn pooled_logit(&self, y: &Matrix) -> f64 {
        let n = y.rows() as f64;
        let mut z = self.bias;
        for r in 0..y.rows() {
            for (&v, &w) in y.row(r).iter().zip(&self.readout) {
                z += v * w / n;
            }
        }
        z
    }

    pub fn logit(&self, frames: &FrameEmbeddings) -> Result<f64> {
        let y = forward_video(&self.params, frames, &self.mask)?;
        Ok(self.pooled_logit(&y))
    }

    pub fn accuracy(&self, data: &OrderDataset, idx: &[usize]) -> Result<f64> {
        let correct = idx
            .par_iter()
            .map(|&i| {
                let ex = &data.examples[i];
                self.logit(&ex.frames).map(|z| ((z > 0.0) == ex.a_first) as usize)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / idx.len() as f64)
    }
}

struct ProbeGrad {
    params: ProjectorParams<f64>,
    readout: Vec<f64>,
    bias: f64,
    loss: f64,
}

impl ProbeGrad {
    fn zeros(probe: &OrderProbe) -> Self {
        Self {
            params: ProjectorParams::zeros(&probe.params.config),
            readout: vec![0.0; probe.readout.len()],
            bias: 0.0,
            loss: 0.0,
        }
    }

    fn add(&mut self, other: &ProbeGrad) {
        self.params.axpy(1.0, &other.params);
        for (a, b) in self.readout.iter_mut().zip(&other.readout) {
            *a += b;
        }
        self.bias += other.bias;
        self.loss += other.loss;
    }
}

/// `log(1 + exp(-s z))` for target sign `s`, computed without overflow.
fn logistic_loss(z: f64, positive: bool) -> f64 {
    let m = if positive { -z } else { z };
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn example_grad(probe: &OrderProbe, ex: &OrderExample) -> Result<ProbeGrad> {
    let (y, cache) = forward_cached(&probe.params, &ex.frames, &probe.mask)?;
    let z = probe.pooled_logit(&y);
    let target = if ex.a_first { 1.0 } else { 0.0 };
    let dz = sigmoid(z) - target;
    let n = y.rows() as f64;
    let mut readout = vec![0.0; y.cols()];
    for r in 0..y.rows() {
        for (g, &v) in readout.iter_mut().zip(y.row(r)) {
            *g += dz * v / n;
        }
    }
    let upstream = Matrix::from_fn(y.rows(), y.cols(), |_, c| dz * probe.readout[c] / n);
    let (params, _) = backward_from_cache(&probe.params, &cache, &upstream)?;
    Ok(ProbeGrad {
        params,
        readout,
        bias: dz,
        loss: logistic_loss(z, ex.a_first),
    })
}

const CHUNK: usize = 32;

/// Summed gradient over `idx`. Chunks are reduced in a fixed order so the
/// result does not depend on thread scheduling.
fn batch_grad(probe: &OrderProbe, data: &OrderDataset, idx: &[usize]) -> Result<ProbeGrad> {
    let partials = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ProbeGrad::zeros(probe);
            for &i in chunk {
                acc.add(&example_grad(probe, &data.examples[i])?);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ProbeGrad::zeros(probe);
    for p in &partials {
        total.add(p);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mask_rule: MaskRule,
    pub use_tpe: bool,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Excluded from data files; reported with run metadata.
    #[serde(skip)]
    pub wall_time_ms: u128,
}

/// Trains an [`OrderProbe`] built from `config` (its `mask_rule` is
/// overridden by `mask_rule`). Returns the report and the trained probe.
pub fn train_order_probe(
    config: &ProjectorConfig,
    data: &OrderDataset,
    mask_rule: MaskRule,
    opts: &TrainOptions,
) -> Result<(TrainReport, OrderProbe)> {
    let start = Instant::now();
    let cfg = ProjectorConfig {
        mask_rule,
        input_dim: data.spec.channels,
        ..config.clone()
    };
    if !(opts.lr > 0.0 && opts.lr.is_finite()) || !(0.0..1.0).contains(&opts.momentum) {
        return Err(Error::invalid("lr must be positive and momentum in [0, 1)"));
    }
    let mut probe = OrderProbe::new(&cfg, data.spec.n_frames)?;
    let mut vel = ProbeGrad::zeros(&probe);
    let batch = if opts.batch_size == 0 {
        data.train.len()
    } else {
        opts.batch_size.min(data.train.len())
    };
    let mut shuffle_rng = substream(cfg.seed, "order-batches");
    let mut train_idx = data.train.clone();
    let mut loss_curve = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        if batch < data.train.len() {
            train_idx.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(batch) {
            let g = batch_grad(&probe, data, chunk)?;
            epoch_loss += g.loss;
            let inv = 1.0 / chunk.len() as f64;
            // v <- mu v + g / |B| ; theta <- theta - lr v
            vel.params.sections_mut().into_iter().zip(g.params.sections()).for_each(|((_, v), (_, gs))| {
                for (vi, &gi) in v.data_mut().iter_mut().zip(gs.data()) {
                    *vi = opts.momentum * *vi + gi * inv;
                }
            });
            for (vi, &gi) in vel.readout.iter_mut().zip(&g.readout) {
                *vi = opts.momentum * *vi + gi * inv;
            }
            vel.bias = opts.momentum * vel.bias + g.bias * inv;

            probe.params.axpy(-opts.lr, &vel.params);
            for (w, &v) in probe.readout.iter_mut().zip(&vel.readout) {
                *w -= opts.lr * v;
            }
            probe.bias -= opts.lr * vel.bias;
        }
        let mean_loss = epoch_loss / train_idx.len() as f64;
        if !mean_loss.is_finite() || probe.params.sq_norm().is_nan() {
            return Err(Error::Diverged {
                epoch,
                loss: mean_loss,
            });
        }
        loss_curve.push(mean_loss);
    }

    let report = TrainReport {
        mask_rule,
        use_tpe: cfg.use_tpe,
        seed: cfg.seed,
        epochs: opts.epochs,
        lr: opts.lr,
        momentum: opts.momentum,
        train_accuracy: probe.accuracy(data, &data.train)?,
        test_accuracy: probe.accuracy(data, &data.test)?,
        loss_curve,
        wall_time_ms: start.elapsed().as_millis(),
    };
    Ok((report, probe))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_balanced_with_one_event_each() {
        let spec = OrderDatasetSpec {
            n_examples: 101,
            noise: 0.0,
            ..OrderDatasetSpec::default()
        };
        let d = make_order_dataset(&spec).unwrap();
        let pos = d.examples.iter().filter(|e| e.a_first).count();
        assert!((pos as i64 - (101 - pos) as i64).abs() <= 1);
        for e in &d.examples {
            assert_ne!(e.pos_a, e.pos_b);
            assert_eq!(e.a_first, e.pos_a < e.pos_b);
            let count = |v: &[f64]| (0..8).filter(|&j| e.frames.frame(j).row(0) == v).count();
            assert_eq!(count(&d.event_a), 1);
            assert_eq!(count(&d.event_b), 1);
        }
        assert_eq!(d.train.len(), 80);
        assert_eq!(d.test.len(), 21);
        let mut all: Vec<usize> = d.train.iter().chain(&d.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn logistic_loss_is_stable() {
        assert!((logistic_loss(0.0, true) - 2f64.ln()).abs() < 1e-15);
        assert!(logistic_loss(800.0, false).is_finite());
        assert!(logistic_loss(-800.0, false) < 1e-300);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn probe_gradient_matches_difference() {
        let spec = OrderDatasetSpec {
            n_examples: 6,
            n_frames: 4,
            channels: 5,
            ..OrderDatasetSpec::default()
        };
        let data = make_order_dataset(&spec).unwrap();
        let cfg = ProjectorConfig {
            n_queries: 4,
            model_dim: 8,
            input_dim: 5,
            n_heads: 2,
            seed: 3,
            ..ProjectorConfig::default()
        };
        let probe = OrderProbe::new(&cfg, 4).unwrap();
        let ex = &data.examples[1];
        let g = example_grad(&probe, ex).unwrap();
        let loss_at = |p: &OrderProbe| logistic_loss(p.logit(&ex.frames).unwrap(), ex.a_first);
        let h = 1e-6;
        for c in 0..8 {
            let mut plus = probe.clone();
            plus.readout[c] += h;
            let mut minus = probe.clone();
            minus.readout[c] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            assert!((fd - g.readout[c]).abs() < 1e-7);
        }
        let mut plus = probe.clone();
        plus.params.out_proj[(2, 5)] += h;
        let mut minus = probe.clone();
        minus.params.out_proj[(2, 5)] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        assert!((fd - g.params.out_proj[(2, 5)]).abs() < 1e-7);
    }
}
