use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::layers::{argmax_classes, softmax_cross_entropy};
use super::model::{backward, forward, Gradients, ModelParams};
use super::optim::{sgd_step, OptimizerState, ScheduleEvent, SgdConfig, StopReason};
use crate::error::{Error, Result};
use crate::grid::{FeatureMap, LabelGrid, Rng};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::pooling::{pool, HotspotStats, PoolConfig};
use crate::synthdata::SceneSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_max: usize,
    pub batch_size: usize,
    /// Random horizontal and vertical flips of every training sample.
    pub augment_flips: bool,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs_max: 30,
            batch_size: 4,
            augment_flips: true,
            sgd: SgdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub val_pixel_accuracy: f64,
    /// Validation hotspot percentage per G-pooling layer.
    pub hotspot_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    /// Set by callers that know which arm built the architecture.
    pub arm: Option<String>,
    pub parameter_count: usize,
    pub gpool_layers: Vec<usize>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub final_learning_rate: f64,
    pub train_pixel_accuracy: Option<f64>,
    pub final_train: Option<EvalReport>,
    pub final_val: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: ModelParams,
}

/// Loss, scores and hotspot rates of a model on a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub report: EvalReport,
    pub hotspot_rates: Vec<f64>,
}

fn check_samples(arch: &Architecture, samples: &[SceneSample], what: &'static str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty(what));
    }
    for s in samples {
        if s.image.shape() != arch.input_shape() {
            return Err(Error::GeometryMismatch(format!(
                "sample image {:?} does not match architecture input {:?}",
                s.image.shape(),
                arch.input_shape()
            )));
        }
        if s.labels.num_classes() != arch.num_classes() {
            return Err(Error::GeometryMismatch(format!(
                "sample has {} classes, architecture {}",
                s.labels.num_classes(),
                arch.num_classes()
            )));
        }
    }
    Ok(())
}

/// `None` for the gradients when the loss is not finite.
fn sample_gradients(params: &ModelParams, arch: &Architecture, s: &SceneSample) -> Result<(f64, Option<Gradients>)> {
    let (logits, cache) = forward(params, arch, &s.image)?;
    let (c, h, w) = logits.shape();
    let (loss, grad, _) = softmax_cross_entropy(logits.data(), c, s.labels.labels());
    if !loss.is_finite() {
        return Ok((loss, None));
    }
    let grad = FeatureMap::from_vec(c, h, w, grad)?;
    Ok((loss, Some(backward(params, arch, &cache, &grad)?)))
}

/// Mean loss and mean gradient over `batch`.
///
/// Samples run in parallel; the reduction walks them in batch order so the
/// sum is the same for any worker count.
pub fn batch_gradients(
    params: &ModelParams,
    arch: &Architecture,
    batch: &[SceneSample],
) -> Result<(f64, Option<Gradients>)> {
    let per_sample: Vec<Result<(f64, Option<Gradients>)>> =
        batch.par_iter().map(|s| sample_gradients(params, arch, s)).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    let mut finite = true;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        match g {
            Some(g) => total.add_scaled(&g, scale),
            None => finite = false,
        }
    }
    Ok((loss * scale, finite.then_some(total)))
}

/// Hotspot and total window counts, one pair per G-pooling layer.
type LayerHits = Vec<(usize, usize)>;

pub fn predict(params: &ModelParams, arch: &Architecture, image: &FeatureMap) -> Result<LabelGrid> {
    let (logits, _) = forward(params, arch, image)?;
    let (c, h, w) = logits.shape();
    LabelGrid::new(h, w, c, argmax_classes(logits.data(), c))
}

pub fn evaluate(params: &ModelParams, arch: &Architecture, samples: &[SceneSample]) -> Result<Evaluation> {
    check_samples(arch, samples, "evaluation needs at least one sample")?;
    let gpool = arch.gpool_layers();
    let k = arch.num_classes();
    let per_sample: Vec<Result<(f64, ConfusionMatrix, LayerHits)>> = samples
        .par_iter()
        .map(|s| {
            let (logits, cache) = forward(params, arch, &s.image)?;
            let (loss, _, _) = softmax_cross_entropy(logits.data(), k, s.labels.labels());
            let mut cm = ConfusionMatrix::new(k)?;
            cm.accumulate_labels(&argmax_classes(logits.data(), k), s.labels.labels())?;
            let hits = gpool
                .iter()
                .map(|&l| {
                    let flags = cache.pool_result(l).expect("gpool layer cached").hotspot_flags();
                    (flags.iter().filter(|&&f| f).count(), flags.len())
                })
                .collect();
            Ok((loss, cm, hits))
        })
        .collect();
    let mut confusion = ConfusionMatrix::new(k)?;
    let mut loss = 0.0;
    let mut counts = vec![(0usize, 0usize); gpool.len()];
    for r in per_sample {
        let (l, cm, hits) = r?;
        loss += l;
        confusion.merge(&cm)?;
        for (acc, (h, t)) in counts.iter_mut().zip(hits) {
            acc.0 += h;
            acc.1 += t;
        }
    }
    let report = confusion.finalize()?;
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        confusion,
        report,
        hotspot_rates: counts.iter().map(|&(h, t)| 100.0 * h as f64 / t as f64).collect(),
    })
}

/// Re-pools the inputs of every G-pooling layer at each threshold.
///
/// Features come from one forward pass at the architecture's own
/// thresholds, so every threshold is scored on identical feature maps.
pub fn hotspot_sweep(
    params: &ModelParams,
    arch: &Architecture,
    samples: &[SceneSample],
    thresholds: &[f64],
) -> Result<Vec<HotspotStats>> {
    check_samples(arch, samples, "hotspot sweep needs at least one sample")?;
    let gpool = arch.gpool_layers();
    if gpool.is_empty() {
        return Err(Error::InvalidArgument("architecture has no G-pooling layers".into()));
    }
    // hits[t][layer]
    let per_sample: Vec<Result<Vec<LayerHits>>> = samples
        .par_iter()
        .map(|s| {
            let (_, cache) = forward(params, arch, &s.image)?;
            thresholds
                .iter()
                .map(|&t| {
                    gpool
                        .iter()
                        .map(|&l| {
                            let base = cache.pool_result(l).expect("gpool layer cached").config();
                            let input = cache.pool_input(l).expect("gpool layer cached");
                            let r = pool(input, &PoolConfig { threshold: t, ..*base })?;
                            let flags = r.hotspot_flags();
                            Ok((flags.iter().filter(|&&f| f).count(), flags.len()))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut counts = vec![vec![(0usize, 0usize); gpool.len()]; thresholds.len()];
    for r in per_sample {
        for (acc_t, hits_t) in counts.iter_mut().zip(r?) {
            for (acc, (h, n)) in acc_t.iter_mut().zip(hits_t) {
                acc.0 += h;
                acc.1 += n;
            }
        }
    }
    Ok(thresholds
        .iter()
        .zip(counts)
        .map(|(&threshold, layers)| {
            let hits: usize = layers.iter().map(|l| l.0).sum();
            let total: usize = layers.iter().map(|l| l.1).sum();
            HotspotStats {
                threshold,
                per_layer_rate: layers.iter().map(|&(h, n)| 100.0 * h as f64 / n as f64).collect(),
                overall_rate: 100.0 * hits as f64 / total as f64,
            }
        })
        .collect())
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
}

/// Mini-batch SGD with the validation plateau schedule.
///
/// Initialization draws from stream 0 of `config.seed`, shuffling and flips
/// from stream 1. A non-finite loss or gradient ends training with
/// [`StopReason::Diverged`] and the report collected so far.
pub fn train(
    arch: &Architecture,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    check_samples(arch, train_set, "training set is empty")?;
    check_samples(arch, val_set, "validation set is empty")?;
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if !(config.sgd.learning_rate > 0.0 && config.sgd.learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate {} must be positive",
            config.sgd.learning_rate
        )));
    }
    let mut params = ModelParams::init(arch, &mut Rng::with_stream(config.seed, 0));
    let mut rng = Rng::with_stream(config.seed, 1);
    let mut state = OptimizerState::new(config.sgd, &params);
    let mut epochs = Vec::new();
    let stop_reason = 'epochs: loop {
        if epochs.len() >= config.epochs_max {
            break StopReason::EpochLimit;
        }
        if state.below_floor() {
            break StopReason::LrFloor;
        }
        let learning_rate = state.learning_rate;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<SceneSample> = chunk
                .iter()
                .map(|&i| {
                    if config.augment_flips {
                        let (h, v) = (rng.bernoulli(), rng.bernoulli());
                        train_set[i].flipped(h, v)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let grads = match batch_gradients(&params, arch, &batch) {
                Ok((loss, Some(g))) if loss.is_finite() => {
                    loss_sum += loss;
                    g
                }
                Ok(_) => break 'epochs StopReason::Diverged,
                Err(e) if is_divergence(&e) => break 'epochs StopReason::Diverged,
                Err(e) => return Err(e),
            };
            match sgd_step(&mut params, &grads, &mut state) {
                Ok(()) => {}
                Err(e) if is_divergence(&e) => break 'epochs StopReason::Diverged,
                Err(e) => return Err(e),
            }
            batches += 1;
        }
        let val = match evaluate(&params, arch, val_set) {
            Ok(v) if v.loss.is_finite() => v,
            Ok(_) => break StopReason::Diverged,
            Err(e) if is_divergence(&e) => break StopReason::Diverged,
            Err(e) => return Err(e),
        };
        epochs.push(EpochRecord {
            epoch: epochs.len(),
            learning_rate,
            train_loss: loss_sum / batches as f64,
            val_loss: val.loss,
            val_miou: val.report.miou,
            val_pixel_accuracy: val.report.pixel_accuracy,
            hotspot_rates: val.hotspot_rates,
        });
        if let ScheduleEvent::Stop(reason) = state.observe_validation(val.loss) {
            break reason;
        }
    };
    let final_train = evaluate(&params, arch, train_set).ok().map(|e| e.report);
    let final_val = evaluate(&params, arch, val_set).ok().map(|e| e.report);
    let report = TrainReport {
        seed: config.seed,
        arm: None,
        parameter_count: arch.parameter_count(),
        gpool_layers: arch.gpool_layers(),
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        config: *config,
        epochs,
        stop_reason,
        final_learning_rate: state.learning_rate,
        train_pixel_accuracy: final_train.as_ref().map(|r| r.pixel_accuracy),
        final_train,
        final_val,
    };
    Ok(TrainOutcome { report, params })
}
