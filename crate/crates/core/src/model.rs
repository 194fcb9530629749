//! The measure VAE.
//!
//! Encoder: token embedding, forward and backward GRUs over the 24 slots, and
//! linear maps from the concatenated final states to the Gaussian posterior.
//! Decoder: a beat-level GRU runs 4 steps from a latent-initialised state; each
//! beat state seeds a 6-step tick-level GRU whose states project to token logits.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{c, Scalar};
use crate::score::{Measure, ScoreError, Vocabulary, BEATS, SLOTS, TICKS_PER_BEAT};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Latent size; dims `0..REGULARISED_DIMS` carry the attributes.
pub const LATENT_DIM: usize = 256;
pub const REGULARISED_DIMS: usize = 4;
/// Floor applied to log-variances when sampling outside the training graph.
pub const MIN_LOG_VARIANCE: f64 = -30.0;

const INFERENCE_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("latent vector contains non-finite values")]
    NonFiniteLatent,
    #[error("latent vector must have {LATENT_DIM} values, got {0}")]
    LatentLength(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocabulary: Vocabulary,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub beat_hidden: usize,
    pub tick_hidden: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocabulary: Vocabulary::default(),
            embed_dim: 10,
            encoder_hidden: 64,
            beat_hidden: 64,
            tick_hidden: 64,
            latent_dim: LATENT_DIM,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Same layout with every hidden size set to `hidden`.
    pub fn with_hidden(hidden: usize) -> Self {
        Self { encoder_hidden: hidden, beat_hidden: hidden, tick_hidden: hidden, ..Self::default() }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.size()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        Vocabulary::new(self.vocabulary.pitch_lo(), self.vocabulary.pitch_hi())?;
        if self.latent_dim != LATENT_DIM {
            return Err(ModelError::InvalidConfig(format!("latent_dim must be {LATENT_DIM}")));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("beat_hidden", self.beat_hidden),
            ("tick_hidden", self.tick_hidden),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Affine map `x · weight + bias`; `weight` is `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

/// GRU cell with fused gate weights (reset, update, candidate), each `[_, 3·hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<P> {
    pub w_input: P,
    pub w_hidden: P,
    pub b_input: P,
    pub b_hidden: P,
}

/// Every trainable tensor of the model, generic over the leaf representation so
/// the same layout serves stored weights, tape variables and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<P> {
    pub embedding: P,
    pub encoder_forward: Gru<P>,
    pub encoder_backward: Gru<P>,
    pub to_mu: Linear<P>,
    pub to_log_variance: Linear<P>,
    pub beat_init: Linear<P>,
    pub beat: Gru<P>,
    pub tick_init: Linear<P>,
    pub tick: Gru<P>,
    pub output: Linear<P>,
}

impl<P> Linear<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q, prefix: &str) -> Linear<Q> {
        Linear { weight: f(&format!("{prefix}.weight"), &self.weight), bias: f(&format!("{prefix}.bias"), &self.bias) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn for_each_mut(&mut self, f: &mut impl FnMut(&mut P)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<P> Gru<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q, prefix: &str) -> Gru<Q> {
        Gru {
            w_input: f(&format!("{prefix}.w_input"), &self.w_input),
            w_hidden: f(&format!("{prefix}.w_hidden"), &self.w_hidden),
            b_input: f(&format!("{prefix}.b_input"), &self.b_input),
            b_hidden: f(&format!("{prefix}.b_hidden"), &self.b_hidden),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.w_input"), &self.w_input);
        f(format!("{prefix}.w_hidden"), &self.w_hidden);
        f(format!("{prefix}.b_input"), &self.b_input);
        f(format!("{prefix}.b_hidden"), &self.b_hidden);
    }

    fn for_each_mut(&mut self, f: &mut impl FnMut(&mut P)) {
        f(&mut self.w_input);
        f(&mut self.w_hidden);
        f(&mut self.b_input);
        f(&mut self.b_hidden);
    }
}

impl<P> Weights<P> {
    /// Maps every leaf in a fixed order, passing its dotted name.
    pub fn map_named<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> Weights<Q> {
        Weights {
            embedding: f("embedding", &self.embedding),
            encoder_forward: self.encoder_forward.map(&mut f, "encoder_forward"),
            encoder_backward: self.encoder_backward.map(&mut f, "encoder_backward"),
            to_mu: self.to_mu.map(&mut f, "to_mu"),
            to_log_variance: self.to_log_variance.map(&mut f, "to_log_variance"),
            beat_init: self.beat_init.map(&mut f, "beat_init"),
            beat: self.beat.map(&mut f, "beat"),
            tick_init: self.tick_init.map(&mut f, "tick_init"),
            tick: self.tick.map(&mut f, "tick"),
            output: self.output.map(&mut f, "output"),
        }
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Weights<Q> {
        self.map_named(|_, p| f(p))
    }

    /// Visits every leaf with its dotted name, in the canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a P)) {
        f("embedding".into(), &self.embedding);
        self.encoder_forward.visit("encoder_forward", &mut f);
        self.encoder_backward.visit("encoder_backward", &mut f);
        self.to_mu.visit("to_mu", &mut f);
        self.to_log_variance.visit("to_log_variance", &mut f);
        self.beat_init.visit("beat_init", &mut f);
        self.beat.visit("beat", &mut f);
        self.tick_init.visit("tick_init", &mut f);
        self.tick.visit("tick", &mut f);
        self.output.visit("output", &mut f);
    }

    /// Leaves with their names, in the canonical order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit(|n, p| out.push((n, p)));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut P)) {
        f(&mut self.embedding);
        self.encoder_forward.for_each_mut(&mut f);
        self.encoder_backward.for_each_mut(&mut f);
        self.to_mu.for_each_mut(&mut f);
        self.to_log_variance.for_each_mut(&mut f);
        self.beat_init.for_each_mut(&mut f);
        self.beat.for_each_mut(&mut f);
        self.tick_init.for_each_mut(&mut f);
        self.tick.for_each_mut(&mut f);
        self.output.for_each_mut(&mut f);
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }
}

/// The 256-dim latent code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector<T>(Vec<T>);

impl<T: Scalar> LatentVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, ModelError> {
        if values.len() != LATENT_DIM {
            return Err(ModelError::LatentLength(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteLatent);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    /// The regularised dims (rhythmic complexity, note range, note density, interval jump).
    pub fn regularised(&self) -> [T; REGULARISED_DIMS] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }

    /// Copy with dims `0..4` replaced.
    pub fn with_regularised(&self, dims: [T; REGULARISED_DIMS]) -> Self {
        let mut v = self.0.clone();
        v[..REGULARISED_DIMS].copy_from_slice(&dims);
        Self(v)
    }
}

/// Diagonal Gaussian posterior `q(z | x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior<T> {
    pub mu: Vec<T>,
    pub log_variance: Vec<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn mean(&self) -> Result<LatentVector<T>, ModelError> {
        LatentVector::new(self.mu.clone())
    }

    pub fn variance(&self) -> Vec<T> {
        self.log_variance.iter().map(|v| v.exp()).collect()
    }
}

/// Reparameterised draw `mu + exp(log_variance / 2) ⊙ ε`, with the log-variance
/// floored at [`MIN_LOG_VARIANCE`].
pub fn sample_latent<T: Scalar, R: Rng + ?Sized>(q: &GaussianPosterior<T>, rng: &mut R) -> LatentVector<T> {
    let floor = c::<T>(MIN_LOG_VARIANCE);
    let half = c::<T>(0.5);
    let values = q
        .mu
        .iter()
        .zip(&q.log_variance)
        .map(|(m, lv)| {
            let eps: f64 = StandardNormal.sample(rng);
            *m + (lv.max(floor) * half).exp() * c::<T>(eps)
        })
        .collect();
    LatentVector(values)
}

pub enum DecodeMode<'a> {
    Argmax,
    /// Each tick step is conditioned on the previous target token.
    TeacherForced(&'a [usize; SLOTS]),
}

/// Decoder output for one latent vector.
#[derive(Debug, Clone)]
pub struct Decoded<T> {
    /// `[24, vocab]` logits.
    pub logits: Tensor<T>,
    /// The argmax measure (argmax mode only).
    pub measure: Option<Measure>,
}

/// Trained (or freshly initialised) parameters with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<T>>,
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| c::<T>(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn init_linear<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear<Tensor<T>> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Linear { weight: uniform(&[fan_in, fan_out], bound, rng), bias: uniform(&[fan_out], bound, rng) }
}

fn init_gru<T: Scalar>(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Gru<Tensor<T>> {
    let bound = 1.0 / (hidden as f64).sqrt();
    Gru {
        w_input: uniform(&[input, 3 * hidden], bound, rng),
        w_hidden: uniform(&[hidden, 3 * hidden], bound, rng),
        b_input: uniform(&[3 * hidden], bound, rng),
        b_hidden: uniform(&[3 * hidden], bound, rng),
    }
}

/// Tape-bound weights.
pub type BoundWeights<'t, T> = Weights<Var<'t, T>>;

fn linear<'t, T: Scalar>(l: &Linear<Var<'t, T>>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    x.matmul(l.weight)?.add_row(l.bias)
}

fn gru_step<'t, T: Scalar>(
    g: &Gru<Var<'t, T>>,
    x: Var<'t, T>,
    h: Var<'t, T>,
    hidden: usize,
) -> Result<Var<'t, T>, TensorError> {
    let gx = x.matmul(g.w_input)?.add_row(g.b_input)?;
    let gh = h.matmul(g.w_hidden)?.add_row(g.b_hidden)?;
    let reset = gx.slice_cols(0, hidden)?.add(gh.slice_cols(0, hidden)?)?.sigmoid();
    let update = gx.slice_cols(hidden, hidden)?.add(gh.slice_cols(hidden, hidden)?)?.sigmoid();
    let candidate = gx
        .slice_cols(2 * hidden, hidden)?
        .add(reset.mul(gh.slice_cols(2 * hidden, hidden)?)?)?
        .tanh();
    // h' = (1 − u)·n + u·h
    candidate.add(update.mul(h.sub(candidate)?)?)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let v = config.vocab_size();
        let e = config.embed_dim;
        let he = config.encoder_hidden;
        let hb = config.beat_hidden;
        let ht = config.tick_hidden;
        let weights = Weights {
            embedding: uniform(&[v, e], 1.0, &mut rng),
            encoder_forward: init_gru(e, he, &mut rng),
            encoder_backward: init_gru(e, he, &mut rng),
            to_mu: init_linear(2 * he, LATENT_DIM, &mut rng),
            to_log_variance: init_linear(2 * he, LATENT_DIM, &mut rng),
            beat_init: init_linear(LATENT_DIM, hb, &mut rng),
            beat: init_gru(LATENT_DIM, hb, &mut rng),
            tick_init: init_linear(hb, ht, &mut rng),
            tick: init_gru(e + hb, ht, &mut rng),
            output: init_linear(ht, v, &mut rng),
        };
        Ok(Self { config, weights })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.config.vocabulary
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.leaves().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundWeights<'t, T> {
        self.weights.map(|t| tape.leaf(t.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.weights.leaves().iter().all(|t| t.is_finite())
    }

    fn check_ids(&self, ids: &[[usize; SLOTS]]) -> Result<(), ModelError> {
        let size = self.config.vocab_size();
        for row in ids {
            if let Some(&id) = row.iter().find(|id| **id >= size) {
                return Err(ModelError::IdOutOfRange { id, size });
            }
        }
        Ok(())
    }

    /// Posterior mean and log-variance, each `[batch, 256]`.
    pub fn encode_vars<'t>(
        &self,
        w: &BoundWeights<'t, T>,
        ids: &[[usize; SLOTS]],
    ) -> Result<(Var<'t, T>, Var<'t, T>), ModelError> {
        self.check_ids(ids)?;
        let tape = w.embedding.tape();
        let batch = ids.len();
        let he = self.config.encoder_hidden;
        let embedded: Vec<Var<'t, T>> = (0..SLOTS)
            .map(|t| w.embedding.gather(ids.iter().map(|row| row[t]).collect()))
            .collect::<Result<_, _>>()?;
        let mut fwd = tape.leaf(Tensor::zeros(&[batch, he]));
        for x in &embedded {
            fwd = gru_step(&w.encoder_forward, *x, fwd, he)?;
        }
        let mut bwd = tape.leaf(Tensor::zeros(&[batch, he]));
        for x in embedded.iter().rev() {
            bwd = gru_step(&w.encoder_backward, *x, bwd, he)?;
        }
        let summary = Var::concat(&[fwd, bwd])?;
        let mu = linear(&w.to_mu, summary)?;
        let log_variance = linear(&w.to_log_variance, summary)?;
        Ok((mu, log_variance))
    }

    /// Runs the decoder hierarchy; `next_input` picks the token id fed to slot
    /// `s + 1` given the logits of slot `s`. Returns per-slot `[batch, vocab]` logits.
    fn decode_vars_with<'t>(
        &self,
        w: &BoundWeights<'t, T>,
        z: Var<'t, T>,
        mut next_input: impl FnMut(usize, &Tensor<T>) -> Vec<usize>,
    ) -> Result<Vec<Var<'t, T>>, ModelError> {
        let tape = z.tape();
        let batch = z.shape()[0];
        let hb = self.config.beat_hidden;
        let ht = self.config.tick_hidden;
        let start = tape.leaf(Tensor::zeros(&[batch, self.config.embed_dim]));
        let mut logits = Vec::with_capacity(SLOTS);
        let mut prev: Option<Vec<usize>> = None;
        let mut beat_state = linear(&w.beat_init, z)?.tanh();
        for beat in 0..BEATS {
            beat_state = gru_step(&w.beat, z, beat_state, hb)?;
            let mut tick_state = linear(&w.tick_init, beat_state)?.tanh();
            for tick in 0..TICKS_PER_BEAT {
                let slot = beat * TICKS_PER_BEAT + tick;
                let prev_embedding = match prev.take() {
                    Some(ids) => w.embedding.gather(ids)?,
                    None => start,
                };
                let input = Var::concat(&[prev_embedding, beat_state])?;
                tick_state = gru_step(&w.tick, input, tick_state, ht)?;
                let out = linear(&w.output, tick_state)?;
                if slot + 1 < SLOTS {
                    prev = Some(out.with_value(|t| next_input(slot, t)));
                }
                logits.push(out);
            }
        }
        Ok(logits)
    }

    /// Teacher-forced decoder pass over a batch of latents `[batch, 256]`.
    pub fn decode_teacher_forced_vars<'t>(
        &self,
        w: &BoundWeights<'t, T>,
        z: Var<'t, T>,
        targets: &[[usize; SLOTS]],
    ) -> Result<Vec<Var<'t, T>>, ModelError> {
        self.check_ids(targets)?;
        self.decode_vars_with(w, z, |slot, _| targets.iter().map(|row| row[slot]).collect())
    }

    /// Greedy decoder pass. Returns per-slot logits and the chosen ids, with a
    /// leading continuation repaired to a rest.
    pub fn decode_argmax_vars<'t>(
        &self,
        w: &BoundWeights<'t, T>,
        z: Var<'t, T>,
    ) -> Result<(Vec<Var<'t, T>>, Vec<[usize; SLOTS]>), ModelError> {
        let batch = z.shape()[0];
        let vocab = self.config.vocabulary;
        let mut chosen = vec![[0usize; SLOTS]; batch];
        let mut pick = |slot: usize, logits: &Tensor<T>| -> Vec<usize> {
            (0..batch)
                .map(|b| {
                    let mut id = argmax(logits.row(b));
                    if slot == 0 && id == vocab.continue_id() {
                        id = vocab.rest_id();
                    }
                    chosen[b][slot] = id;
                    id
                })
                .collect()
        };
        let logits = self.decode_vars_with(w, z, &mut pick)?;
        // the last slot never feeds a successor, so pick it here
        logits[SLOTS - 1].with_value(|t| pick(SLOTS - 1, t));
        Ok((logits, chosen))
    }

    pub fn encode_batch(&self, ids: &[[usize; SLOTS]]) -> Result<Vec<GaussianPosterior<T>>, ModelError> {
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(INFERENCE_BATCH) {
            let tape = Tape::new();
            let w = self.bind(&tape);
            let (mu, lv) = self.encode_vars(&w, chunk)?;
            let (mu, lv) = (mu.value(), lv.value());
            for b in 0..chunk.len() {
                out.push(GaussianPosterior { mu: mu.row(b).to_vec(), log_variance: lv.row(b).to_vec() });
            }
        }
        Ok(out)
    }

    pub fn encode(&self, ids: &[usize; SLOTS]) -> Result<GaussianPosterior<T>, ModelError> {
        Ok(self.encode_batch(std::slice::from_ref(ids))?.remove(0))
    }

    /// Posterior mean of a measure.
    pub fn encode_measure(&self, measure: &Measure) -> Result<LatentVector<T>, ModelError> {
        self.encode(&measure.to_ids(self.vocabulary())?)?.mean()
    }

    /// Posterior means of many measures.
    pub fn encode_means(&self, measures: &[Measure]) -> Result<Vec<LatentVector<T>>, ModelError> {
        let ids = measures.iter().map(|m| m.to_ids(self.vocabulary())).collect::<Result<Vec<_>, _>>()?;
        self.encode_batch(&ids)?.into_iter().map(|q| q.mean()).collect()
    }

    fn latent_batch(latents: &[LatentVector<T>]) -> Result<Tensor<T>, ModelError> {
        let mut data = Vec::with_capacity(latents.len() * LATENT_DIM);
        for z in latents {
            if z.0.len() != LATENT_DIM {
                return Err(ModelError::LatentLength(z.0.len()));
            }
            if z.0.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteLatent);
            }
            data.extend_from_slice(&z.0);
        }
        Ok(Tensor::matrix(latents.len(), LATENT_DIM, data)?)
    }

    fn stack_logits(logits: &[Var<'_, T>], b: usize) -> Tensor<T> {
        let vocab = logits[0].with_value(|t| t.last_dim());
        let mut data = Vec::with_capacity(SLOTS * vocab);
        for l in logits {
            l.with_value(|t| data.extend_from_slice(t.row(b)));
        }
        Tensor::matrix(SLOTS, vocab, data).expect("logit shape")
    }

    pub fn decode(&self, z: &LatentVector<T>, mode: DecodeMode<'_>) -> Result<Decoded<T>, ModelError> {
        let tape = Tape::new();
        let w = self.bind(&tape);
        let zv = tape.leaf(Self::latent_batch(std::slice::from_ref(z))?);
        match mode {
            DecodeMode::Argmax => {
                let (logits, ids) = self.decode_argmax_vars(&w, zv)?;
                Ok(Decoded {
                    logits: Self::stack_logits(&logits, 0),
                    measure: Some(Measure::from_ids(&ids[0], self.vocabulary())?),
                })
            }
            DecodeMode::TeacherForced(targets) => {
                let logits = self.decode_teacher_forced_vars(&w, zv, std::slice::from_ref(targets))?;
                Ok(Decoded { logits: Self::stack_logits(&logits, 0), measure: None })
            }
        }
    }

    /// Greedy decoding of many latents.
    pub fn decode_argmax_batch(&self, latents: &[LatentVector<T>]) -> Result<Vec<Measure>, ModelError> {
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(INFERENCE_BATCH) {
            let tape = Tape::new();
            let w = self.bind(&tape);
            let z = tape.leaf(Self::latent_batch(chunk)?);
            let (_, ids) = self.decode_argmax_vars(&w, z)?;
            for row in ids {
                out.push(Measure::from_ids(&row, self.vocabulary())?);
            }
        }
        Ok(out)
    }

    /// Greedy reconstructions from posterior means.
    pub fn reconstruct(&self, measures: &[Measure]) -> Result<Vec<Measure>, ModelError> {
        let means = self.encode_means(measures)?;
        self.decode_argmax_batch(&means)
    }

    /// Mean per-token agreement between inputs and their greedy reconstructions.
    pub fn reconstruction_accuracy(&self, dataset: &[Measure]) -> Result<f64, ModelError> {
        if dataset.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let decoded = self.reconstruct(dataset)?;
        let matches: usize = dataset
            .iter()
            .zip(&decoded)
            .map(|(a, b)| a.tokens().iter().zip(b.tokens()).filter(|(x, y)| x == y).count())
            .sum();
        Ok(matches as f64 / (dataset.len() * SLOTS) as f64)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { config: self.config.clone(), weights: self.weights.map(Tensor::cast) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::Token;

    fn small() -> ModelParams<f64> {
        ModelParams::init(ModelConfig { seed: 5, ..ModelConfig::with_hidden(8) }).unwrap()
    }

    fn measure(text: &str) -> Measure {
        text.parse().unwrap()
    }

    fn scale() -> Measure {
        measure("C4 _ _ D4 _ _ E4 _ _ F4 _ _ G4 _ _ A4 _ _ B4 _ _ C5 _ _")
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { latent_dim: 16, ..ModelConfig::default() };
        assert!(matches!(ModelParams::<f64>::init(bad), Err(ModelError::InvalidConfig(_))));
        let bad = ModelConfig { embed_dim: 0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_ordered() {
        let p = small();
        let names: Vec<String> = p.weights.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 27);
        assert_eq!(names[0], "embedding");
        assert_eq!(names[1], "encoder_forward.w_input");
        assert_eq!(names.last().unwrap(), "output.bias");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let p = small();
        let ids = scale().to_ids(p.vocabulary()).unwrap();
        let a = p.encode(&ids).unwrap();
        let b = p.encode(&ids).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mu.len(), LATENT_DIM);
        assert_eq!(a.log_variance.len(), LATENT_DIM);
        let other = p.encode(&Measure::rests().to_ids(p.vocabulary()).unwrap()).unwrap();
        assert!(a.mu.iter().zip(&other.mu).any(|(x, y)| x != y));
    }

    #[test]
    fn encode_rejects_bad_ids() {
        let p = small();
        let mut ids = [0usize; SLOTS];
        ids[3] = 999;
        assert!(matches!(p.encode(&ids), Err(ModelError::IdOutOfRange { id: 999, .. })));
    }

    #[test]
    fn batched_and_single_encoding_agree() {
        let p = small();
        let ms = [scale(), Measure::rests(), measure("E4 G4 _ C5 R _ _ _ D4 _ _ _ R R R R A3 _ _ _ _ _ _ _")];
        let batch = p.encode_means(&ms).unwrap();
        for (m, z) in ms.iter().zip(&batch) {
            let single = p.encode_measure(m).unwrap();
            for (a, b) in single.values().iter().zip(z.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_limits_and_reproducibility() {
        let q = GaussianPosterior { mu: vec![0.7; LATENT_DIM], log_variance: vec![-1e6; LATENT_DIM] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_latent(&q, &mut rng);
        assert!(z.values().iter().all(|v: &f64| (v - 0.7).abs() < 1e-3));

        let q = GaussianPosterior { mu: vec![0.0; LATENT_DIM], log_variance: vec![0.0; LATENT_DIM] };
        let a = sample_latent(&q, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_latent(&q, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_converges_to_mu() {
        let mu: Vec<f64> = (0..LATENT_DIM).map(|i| (i as f64 * 0.37).sin()).collect();
        let lv: Vec<f64> = (0..LATENT_DIM).map(|i| (i as f64 * 0.11).cos() - 0.5).collect();
        let q = GaussianPosterior { mu: mu.clone(), log_variance: lv.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let mut sums = vec![0.0; LATENT_DIM];
        for _ in 0..n {
            for (s, v) in sums.iter_mut().zip(sample_latent(&q, &mut rng).values()) {
                *s += v;
            }
        }
        let mut outside = 0;
        for d in 0..LATENT_DIM {
            let sigma = (lv[d] / 2.0).exp();
            if (sums[d] / n as f64 - mu[d]).abs() > 3.0 * sigma / (n as f64).sqrt() {
                outside += 1;
            }
        }
        // 3σ band: ~0.27% of 256 coordinates expected outside
        assert!(outside <= 3, "{outside} coordinates outside 3σ");
    }

    #[test]
    fn decode_shapes_determinism_and_validity() {
        let p = small();
        let z = p.encode_measure(&scale()).unwrap();
        let a = p.decode(&z, DecodeMode::Argmax).unwrap();
        let b = p.decode(&z, DecodeMode::Argmax).unwrap();
        assert_eq!(a.logits.shape(), &[SLOTS, p.config.vocab_size()]);
        assert_eq!(a.measure, b.measure);
        assert_ne!(a.measure.unwrap().tokens()[0], Token::Continue);
        let ids = scale().to_ids(p.vocabulary()).unwrap();
        let tf = p.decode(&z, DecodeMode::TeacherForced(&ids)).unwrap();
        assert_eq!(tf.logits.shape(), &[SLOTS, p.config.vocab_size()]);
        assert!(tf.measure.is_none());
        // slot 0 sees only the start input in both modes
        assert_eq!(tf.logits.row(0), a.logits.row(0));
    }

    #[test]
    fn decode_rejects_non_finite_latent() {
        let p = small();
        let mut v = vec![0.0; LATENT_DIM];
        v[10] = f64::NAN;
        assert!(matches!(LatentVector::new(v), Err(ModelError::NonFiniteLatent)));
        assert!(matches!(LatentVector::<f64>::new(vec![0.0; 3]), Err(ModelError::LatentLength(3))));
        let z = LatentVector(vec![f64::INFINITY; LATENT_DIM]);
        assert!(matches!(p.decode(&z, DecodeMode::Argmax), Err(ModelError::NonFiniteLatent)));
    }

    #[test]
    fn batch_decode_matches_single() {
        let p = small();
        let zs = p.encode_means(&[scale(), Measure::rests()]).unwrap();
        let batch = p.decode_argmax_batch(&zs).unwrap();
        for (z, m) in zs.iter().zip(&batch) {
            assert_eq!(p.decode(z, DecodeMode::Argmax).unwrap().measure.as_ref(), Some(m));
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }

    #[test]
    fn empty_dataset_accuracy_errors() {
        assert!(matches!(small().reconstruction_accuracy(&[]), Err(ModelError::EmptyDataset)));
    }

    #[test]
    fn f32_model_runs() {
        let p: ModelParams<f32> = small().cast();
        let z = p.encode_measure(&scale()).unwrap();
        let d = p.decode(&z, DecodeMode::Argmax).unwrap();
        assert!(d.logits.is_finite());
    }
}
