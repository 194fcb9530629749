//! Training objective and loop.
//!
//! The objective per mini-batch is
//! `reconstruction + β·KL + γ·Σ_k lsr(z[:, k], attribute_k)`, where the
//! latent-space regularisation term for dim `k` is the mean over the `N×N`
//! pairwise-difference matrices of `(tanh(Δz) − sgn(Δattribute))²`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{attributes, MetricalWeightProfile, ATTRIBUTE_COUNT};
use crate::model::{argmax, GaussianPosterior, ModelConfig, ModelError, ModelParams, Weights, LATENT_DIM};
use crate::scalar::{c, Scalar};
use crate::score::{Measure, SLOTS};
use crate::tensor::{Tape, Tensor, TensorError, Var, TANH_LIMIT};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("latent regularisation needs at least 2 items per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("epoch callback failed: {0}")]
    Callback(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<crate::score::ScoreError> for TrainError {
    fn from(e: crate::score::ScoreError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// β, the KL weight reached after warm-up.
    pub kl_weight: f64,
    /// Fraction of all steps over which β ramps linearly from 0.
    pub kl_warmup_fraction: f64,
    /// γ, the weight of each latent-regularisation term.
    pub lsr_weight: f64,
    pub lsr_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 30,
            batch_size: 32,
            kl_weight: 1e-3,
            kl_warmup_fraction: 0.2,
            lsr_weight: 1.0,
            lsr_enabled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.lsr_enabled && self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        if self.kl_weight < 0.0 || self.lsr_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return bad("kl_warmup_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Loss components of one batch (or their mean over an epoch).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub lsr: [f64; ATTRIBUTE_COUNT],
    pub total: f64,
}

/// Weights applied when assembling the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub kl: f64,
    pub lsr: f64,
    pub lsr_enabled: bool,
}

/// Mean cross-entropy over slots and batch items; `logits` holds one `[batch, vocab]` var per slot.
pub fn reconstruction_loss_var<'t, T: Scalar>(
    logits: &[Var<'t, T>],
    targets: &[[usize; SLOTS]],
) -> Result<Var<'t, T>, TensorError> {
    if logits.len() != SLOTS {
        return Err(TensorError::ShapeMismatch { op: "reconstruction_loss", lhs: vec![logits.len()], rhs: vec![SLOTS] });
    }
    let mut total: Option<Var<'t, T>> = None;
    for (slot, l) in logits.iter().enumerate() {
        let picked = l.log_softmax().pick(targets.iter().map(|row| row[slot]).collect())?.sum();
        total = Some(match total {
            Some(t) => t.add(picked)?,
            None => picked,
        });
    }
    let n = (targets.len() * SLOTS) as f64;
    Ok(total.expect("24 slots").scale(c(-1.0 / n)))
}

/// Mean over the batch of `½ Σ_d (mu² + exp(lv) − 1 − lv)`.
pub fn kl_loss_var<'t, T: Scalar>(mu: Var<'t, T>, log_variance: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    let batch = mu.shape()[0] as f64;
    let per = mu.square().add(log_variance.exp())?.sub(log_variance)?.add_scalar(-T::one());
    Ok(per.sum().scale(c(0.5 / batch)))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean of `(tanh(Δdim) − sgn(Δattr))²` over all ordered pairs; `dim_values` is `[batch, 1]`.
pub fn lsr_loss_var<'t, T: Scalar>(dim_values: Var<'t, T>, attr_values: &[f64]) -> Result<Var<'t, T>, TrainError> {
    let n = attr_values.len();
    if n < 2 {
        return Err(TrainError::BatchTooSmall(n));
    }
    let signs: Vec<T> = attr_values
        .iter()
        .flat_map(|a| attr_values.iter().map(move |b| c::<T>(sign(a - b))))
        .collect();
    let target = dim_values.tape().leaf(Tensor::matrix(n, n, signs)?);
    Ok(dim_values.pairwise_diff()?.tanh().sub(target)?.square().mean())
}

/// Mean cross-entropy of `[24, vocab]` logits against target ids.
pub fn reconstruction_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize; SLOTS]) -> Result<T, TensorError> {
    let (rows, _) = logits.dims2().ok_or_else(|| TensorError::ShapeMismatch {
        op: "reconstruction_loss",
        lhs: logits.shape().to_vec(),
        rhs: vec![SLOTS],
    })?;
    if rows != SLOTS {
        return Err(TensorError::ShapeMismatch { op: "reconstruction_loss", lhs: logits.shape().to_vec(), rhs: vec![SLOTS] });
    }
    let tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = l.log_softmax().pick(targets.to_vec())?.mean().scale(-T::one());
    Ok(loss.item().expect("scalar"))
}

/// `KL(q ‖ N(0, I))` for one posterior.
pub fn kl_loss<T: Scalar>(q: &GaussianPosterior<T>) -> T {
    let half = c::<T>(0.5);
    q.mu
        .iter()
        .zip(&q.log_variance)
        .map(|(m, lv)| half * (*m * *m + lv.exp() - T::one() - *lv))
        .sum()
}

/// Latent regularisation loss for one dim against one attribute over a batch.
pub fn lsr_loss<T: Scalar>(dim_values: &[T], attr_values: &[f64]) -> Result<T, TrainError> {
    if dim_values.len() != attr_values.len() {
        return Err(TrainError::Tensor(TensorError::ShapeMismatch {
            op: "lsr_loss",
            lhs: vec![dim_values.len()],
            rhs: vec![attr_values.len()],
        }));
    }
    if dim_values.len() < 2 {
        return Err(TrainError::BatchTooSmall(dim_values.len()));
    }
    // Summing the sorted terms makes the result independent of batch order.
    let n = dim_values.len();
    let limit = c::<T>(TANH_LIMIT);
    let mut terms = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let th = (dim_values[i] - dim_values[j]).tanh().max(-limit).min(limit);
            let t = th - c::<T>(sign(attr_values[i] - attr_values[j]));
            terms.push(t * t);
        }
    }
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(terms.into_iter().fold(T::zero(), |acc, t| acc + t) / c::<T>((n * n) as f64))
}

/// Result of one forward pass of the training objective.
pub struct Objective<'t, T> {
    pub total: Var<'t, T>,
    pub breakdown: LossBreakdown,
    /// Teacher-forced argmax agreement with the targets.
    pub token_accuracy: f64,
}

/// Builds the full objective for a batch on `w`'s tape.
///
/// `noise` is the `[batch, 256]` standard-normal draw of the reparameterisation.
pub fn batch_objective<'t, T: Scalar>(
    params: &ModelParams<T>,
    w: &Weights<Var<'t, T>>,
    ids: &[[usize; SLOTS]],
    attrs: &[[f64; ATTRIBUTE_COUNT]],
    noise: &Tensor<T>,
    weights: ObjectiveWeights,
) -> Result<Objective<'t, T>, TrainError> {
    let tape = w.embedding.tape();
    let (mu, log_variance) = params.encode_vars(w, ids)?;
    let eps = tape.leaf(noise.clone());
    let z = log_variance.scale(c(0.5)).exp().mul(eps)?.add(mu)?;
    let logits = params.decode_teacher_forced_vars(w, z, ids)?;

    let reconstruction = reconstruction_loss_var(&logits, ids)?;
    let kl = kl_loss_var(mu, log_variance)?;
    let mut total = reconstruction.add(kl.scale(c(weights.kl)))?;
    let mut lsr = [0.0; ATTRIBUTE_COUNT];
    if weights.lsr_enabled {
        for (k, slot) in lsr.iter_mut().enumerate() {
            let column: Vec<f64> = attrs.iter().map(|a| a[k]).collect();
            let term = lsr_loss_var(z.slice_cols(k, 1)?, &column)?;
            *slot = term.item().expect("scalar").to_f64_exact();
            total = total.add(term.scale(c(weights.lsr)))?;
        }
    }

    let mut correct = 0usize;
    for (slot, l) in logits.iter().enumerate() {
        l.with_value(|t| {
            correct += ids.iter().enumerate().filter(|(b, row)| argmax(t.row(*b)) == row[slot]).count();
        });
    }

    let breakdown = LossBreakdown {
        reconstruction: reconstruction.item().expect("scalar").to_f64_exact(),
        kl: kl.item().expect("scalar").to_f64_exact(),
        lsr,
        total: total.item().expect("scalar").to_f64_exact(),
    };
    Ok(Objective { total, breakdown, token_accuracy: correct as f64 / (ids.len() * SLOTS) as f64 })
}

/// Gradients of the objective for every parameter, plus the loss breakdown.
pub fn objective_gradients<T: Scalar>(
    params: &ModelParams<T>,
    ids: &[[usize; SLOTS]],
    attrs: &[[f64; ATTRIBUTE_COUNT]],
    noise: &Tensor<T>,
    weights: ObjectiveWeights,
) -> Result<(LossBreakdown, f64, Weights<Tensor<T>>), TrainError> {
    let tape = Tape::new();
    let w = params.bind(&tape);
    let obj = batch_objective(params, &w, ids, attrs, noise, weights)?;
    let grads = tape.backward(obj.total)?;
    Ok((obj.breakdown, obj.token_accuracy, w.map(|v| grads.wrt(*v))))
}

/// First and second moment estimates for Adam, one tensor per parameter leaf in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.weights.leaves().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &Weights<Tensor<T>>, config: &TrainConfig) {
        self.step += 1;
        let b1 = config.adam_beta1;
        let b2 = config.adam_beta2;
        let lr = c::<T>(config.learning_rate);
        let eps = c::<T>(config.adam_epsilon);
        let c1 = c::<T>(1.0 - b1.powi(self.step as i32));
        let c2 = c::<T>(1.0 - b2.powi(self.step as i32));
        let (b1, b2) = (c::<T>(b1), c::<T>(b2));
        let one = T::one();

        let grads = grads.leaves();
        let mut moments = self.first.iter_mut().zip(self.second.iter_mut()).zip(grads);
        params.weights.for_each_mut(|p| {
            let ((m, v), g) = moments.next().expect("one moment per leaf");
            for (((p, m), v), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Per-epoch training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub losses: LossBreakdown,
    /// Teacher-forced token accuracy averaged over the epoch's batches.
    pub token_accuracy: f64,
    pub kl_weight: f64,
    pub elapsed_ms: u64,
}

/// Everything needed to continue training: parameters, optimiser state and history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(model_config: ModelConfig) -> Result<Self, TrainError> {
        let params = ModelParams::init(model_config)?;
        let adam = AdamState::new(&params);
        Ok(Self { params, adam, epochs_done: 0, history: Vec::new() })
    }
}

/// Attribute vectors of every measure, computed once.
pub fn attribute_table(corpus: &[Measure], profile: &MetricalWeightProfile) -> Vec<[f64; ATTRIBUTE_COUNT]> {
    corpus.iter().map(|m| attributes(m, profile).as_array()).collect()
}

/// Batch index lists for one epoch. A trailing single item joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn noise<T: Scalar>(rows: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..rows * LATENT_DIM).map(|_| c::<T>(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::matrix(rows, LATENT_DIM, data).expect("noise shape")
}

/// Runs the remaining epochs of `state`, calling `on_epoch` after each.
///
/// Each epoch draws its shuffling and noise from a stream derived from
/// `(seed, epoch)`, so resuming from a saved state reproduces an uninterrupted run.
pub fn train_from<T: Scalar>(
    state: &mut TrainState<T>,
    corpus: &[Measure],
    profile: &MetricalWeightProfile,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState<T>, &EpochRecord) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let vocab = *state.params.vocabulary();
    let ids: Vec<[usize; SLOTS]> = corpus.iter().map(|m| m.to_ids(&vocab)).collect::<Result<_, _>>()?;
    let attrs = attribute_table(corpus, profile);
    let steps_per_epoch = epoch_batches(corpus.len(), config.batch_size, &mut epoch_rng(config.seed, 0)).len();
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let warmup_steps = config.kl_warmup_fraction * total_steps as f64;

    while state.epochs_done < config.epochs {
        let epoch = state.epochs_done;
        let started = Instant::now();
        let mut rng = epoch_rng(config.seed, epoch);
        let batches = epoch_batches(corpus.len(), config.batch_size, &mut rng);
        let mut sum = LossBreakdown::default();
        let mut accuracy = 0.0;
        let mut kl_weight = config.kl_weight;
        for (i, batch) in batches.iter().enumerate() {
            let step = epoch * steps_per_epoch + i;
            kl_weight = if warmup_steps > 0.0 {
                config.kl_weight * (step as f64 / warmup_steps).min(1.0)
            } else {
                config.kl_weight
            };
            let weights = ObjectiveWeights {
                kl: kl_weight,
                lsr: config.lsr_weight,
                lsr_enabled: config.lsr_enabled && batch.len() >= 2,
            };
            let batch_ids: Vec<[usize; SLOTS]> = batch.iter().map(|&j| ids[j]).collect();
            let batch_attrs: Vec<[f64; ATTRIBUTE_COUNT]> = batch.iter().map(|&j| attrs[j]).collect();
            let eps = noise::<T>(batch.len(), &mut rng);
            let (losses, acc, grads) =
                objective_gradients(&state.params, &batch_ids, &batch_attrs, &eps, weights)?;
            if !losses.total.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, step });
            }
            state.adam.update(&mut state.params, &grads, config);
            sum.reconstruction += losses.reconstruction;
            sum.kl += losses.kl;
            for k in 0..ATTRIBUTE_COUNT {
                sum.lsr[k] += losses.lsr[k];
            }
            sum.total += losses.total;
            accuracy += acc;
        }
        let n = batches.len() as f64;
        let losses = LossBreakdown {
            reconstruction: sum.reconstruction / n,
            kl: sum.kl / n,
            lsr: sum.lsr.map(|v| v / n),
            total: sum.total / n,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: batches.len(),
            losses,
            token_accuracy: accuracy / n,
            kl_weight,
            elapsed_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {}: total {:.4} rec {:.4} kl {:.3} lsr {:?} acc {:.3}",
            record.epoch,
            losses.total,
            losses.reconstruction,
            losses.kl,
            losses.lsr,
            record.token_accuracy
        );
        state.epochs_done += 1;
        state.history.push(record.clone());
        on_epoch(state, &record)?;
    }
    Ok(())
}

/// Trains a fresh model on `corpus`.
pub fn train<T: Scalar>(
    corpus: &[Measure],
    model_config: &ModelConfig,
    profile: &MetricalWeightProfile,
    config: &TrainConfig,
) -> Result<TrainState<T>, TrainError> {
    let mut state = TrainState::fresh(model_config.clone())?;
    train_from(&mut state, corpus, profile, config, |_, _| Ok(()))?;
    Ok(state)
}

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
    /// Fraction of checked coordinates with relative error below 1e-3.
    pub fraction_within: f64,
    pub step: f64,
}

/// Relative error with an absolute floor so that near-zero gradients compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Absolute floor of the relative-error denominator.
pub const GRADCHECK_FLOOR: f64 = 1e-6;
/// Finite-difference step.
pub const GRADCHECK_STEP: f64 = 1e-4;

/// Checks the full objective's gradients on a random `fraction` of parameter
/// coordinates (at least `min_coords`). Noise and sampling are fixed by `seed`.
pub fn gradient_check(
    params: &ModelParams<f64>,
    batch: &[Measure],
    profile: &MetricalWeightProfile,
    weights: ObjectiveWeights,
    fraction: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    let vocab = *params.vocabulary();
    let ids: Vec<[usize; SLOTS]> = batch.iter().map(|m| m.to_ids(&vocab)).collect::<Result<_, _>>()?;
    let attrs = attribute_table(batch, profile);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = noise::<f64>(batch.len(), &mut rng);
    let (_, _, grads) = objective_gradients(params, &ids, &attrs, &eps, weights)?;

    let sizes: Vec<usize> = params.weights.leaves().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let wanted = ((total as f64 * fraction).ceil() as usize).max(min_coords).min(total);
    let mut coords: Vec<usize> = (0..total).collect();
    coords.shuffle(&mut rng);
    coords.truncate(wanted);
    coords.sort_unstable();

    let locate = |flat: usize| {
        let mut rem = flat;
        for (leaf, size) in sizes.iter().enumerate() {
            if rem < *size {
                return (leaf, rem);
            }
            rem -= size;
        }
        unreachable!("coordinate within parameter count")
    };
    let eval = |p: &ModelParams<f64>| -> Result<f64, TrainError> {
        let tape = Tape::new();
        let w = p.bind(&tape);
        Ok(batch_objective(p, &w, &ids, &attrs, &eps, weights)?.breakdown.total)
    };
    let grad_leaves = grads.leaves();

    let mut max_err: f64 = 0.0;
    let mut sum_err = 0.0;
    let mut within = 0usize;
    for &flat in &coords {
        let (leaf, index) = locate(flat);
        let mut perturbed = params.clone();
        let set = |p: &mut ModelParams<f64>, delta: f64| {
            let mut k = 0;
            p.weights.for_each_mut(|t| {
                if k == leaf {
                    t.data_mut()[index] += delta;
                }
                k += 1;
            });
        };
        set(&mut perturbed, GRADCHECK_STEP);
        let plus = eval(&perturbed)?;
        set(&mut perturbed, -2.0 * GRADCHECK_STEP);
        let minus = eval(&perturbed)?;
        let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
        let analytic = grad_leaves[leaf].data()[index];
        let err = relative_error(analytic, numeric);
        max_err = max_err.max(err);
        sum_err += err;
        if err < 1e-3 {
            within += 1;
        }
    }
    Ok(GradCheckReport {
        checked: coords.len(),
        max_relative_error: max_err,
        mean_relative_error: sum_err / coords.len() as f64,
        fraction_within: within as f64 / coords.len() as f64,
        step: GRADCHECK_STEP,
    })
}
