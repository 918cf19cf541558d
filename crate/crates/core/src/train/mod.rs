//! Two-path alternating optimization: per step the content critic updates
//! on its least-squares loss, the image critic on its hinge loss (fakes
//! detached), then generator and encoders update jointly on the combined
//! objective against the refreshed critics. Adam throughout, 1:1 ratio.

mod adam;
pub mod checkpoint;

pub use adam::Adam;

use crate::autodiff::Tape;
use crate::data::{augment, AugmentPolicy, DataSource};
use crate::error::{ensure_contract, Error, Result};
use crate::latent::{sample_mismatched_domain, DomainDictionary};
use crate::nets::{Networks, ShapeTrace};
use crate::objectives::{
    forward_two_paths, gen_terms, loss_content_adv, loss_image_adv_critic, AdvSide,
    BatchData, GenBounds, LossBreakdown, LossWeights,
};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Optimizer and loss configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub scales: usize,
    pub n_s: usize,
    pub n_d: usize,
    pub image_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            batch_size: 1,
            max_iters: 0,
            seed: 0,
            scales: 2,
            n_s: 8,
            n_d: 2,
            image_size: 256,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_contract!(self.lr > 0.0, "lr must be positive");
        ensure_contract!(
            0.0 <= self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0,
            "need 0 <= beta1 < beta2 < 1"
        );
        self.weights.validate()?;
        ensure_contract!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure_contract!(
            self.image_size % 16 == 0,
            "image_size must be divisible by 16"
        );
        ensure_contract!(self.n_s > 0 && self.n_d > 0, "n_s and n_d must be positive");
        ensure_contract!(self.scales >= 1, "need at least one critic scale");
        Ok(())
    }

    /// Fields that must agree between a checkpoint and a resuming config.
    pub fn structural_conflict(&self, other: &TrainingConfig) -> Option<String> {
        let fields = [
            ("n_s", self.n_s, other.n_s),
            ("n_d", self.n_d, other.n_d),
            ("scales", self.scales, other.scales),
            ("image_size", self.image_size, other.image_size),
        ];
        fields
            .iter()
            .find(|(_, a, b)| a != b)
            .map(|(name, a, b)| format!("{name} mismatch: checkpoint {a}, requested {b}"))
    }
}

/// Mutable training state: networks, per-group optimizers, iteration
/// counter, RNG. Single-writer: one step at a time.
#[derive(Debug)]
pub struct TrainState {
    pub nets: Networks<f32>,
    pub dict: DomainDictionary,
    pub config: TrainingConfig,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub opt_ec: Adam,
    pub opt_es: Adam,
    pub opt_g: Adam,
    pub opt_dc: Adam,
    pub opt_dx: Adam,
}

impl TrainState {
    pub fn new(config: TrainingConfig, dict: DomainDictionary) -> Result<Self> {
        config.validate()?;
        if dict.label_dim() != config.n_d {
            return Err(Error::ConfigConflict(format!(
                "domain dictionary dimension {} != configured n_d {}",
                dict.label_dim(),
                config.n_d
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let nets = Networks::<f32>::new(config.n_s, config.n_d, config.scales, &mut rng);
        let adam = |ps: &crate::nets::ParamSet<f32>| {
            Adam::new(ps, config.lr, config.beta1, config.beta2)
        };
        Ok(TrainState {
            opt_ec: adam(&nets.content_encoder.params),
            opt_es: adam(&nets.style_encoder.params),
            opt_g: adam(&nets.generator.params),
            opt_dc: adam(&nets.content_critic.params),
            opt_dx: adam(&nets.image_critic.params),
            nets,
            dict,
            config,
            iteration: 0,
            rng,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    pub losses: LossBreakdown,
    pub wall_ms: f64,
}

pub fn log_header() -> String {
    let mut cols = vec!["iter".to_string()];
    cols.extend(LossBreakdown::KEYS.iter().map(|s| s.to_string()));
    cols.push("wall_ms".into());
    cols.join("\t")
}

pub fn log_line(r: &LossRecord) -> String {
    let mut cols = vec![r.iter.to_string()];
    cols.extend(r.losses.values().iter().map(|v| format!("{v:.9e}")));
    cols.push(format!("{:.3}", r.wall_ms));
    cols.join("\t")
}

/// Assemble one batch: images, true and mismatched domain rows, frozen
/// reparameterization noise and prior styles.
pub fn make_batch(
    dataset: &dyn DataSource,
    indices: &[usize],
    config: &TrainingConfig,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<BatchData<f32>> {
    let b = indices.len();
    let s = config.image_size;
    let mut images = Array4::<f32>::zeros((b, 3, s, s));
    let mut labels = Vec::with_capacity(b);
    for (row, &idx) in indices.iter().enumerate() {
        let sample = dataset.get(idx)?;
        let sample = augment(&sample, rng, policy);
        let (c, h, w) = sample.image.dim();
        ensure_contract!(
            c == 3 && h == s && w == s,
            "sample {idx} has shape {c}x{h}x{w}, expected 3x{s}x{s}"
        );
        images
            .index_axis_mut(ndarray::Axis(0), row)
            .assign(&sample.image);
        labels.push(sample.domain);
    }
    let dict = dataset.dict();
    let n_d = dict.label_dim();
    let mut d_true = Array2::<f32>::zeros((b, n_d));
    let mut d_mis = Array2::<f32>::zeros((b, n_d));
    for (row, label) in labels.iter().enumerate() {
        for (j, &v) in label.d.iter().enumerate() {
            d_true[[row, j]] = v;
        }
        let mis = sample_mismatched_domain(label, dict, &labels, rng)?;
        for (j, &v) in mis.d.iter().enumerate() {
            d_mis[[row, j]] = v;
        }
    }
    let normal = |rng: &mut ChaCha8Rng| -> f32 { StandardNormal.sample(rng) };
    let eps = Array2::from_shape_fn((b, config.n_s), |_| normal(rng));
    let s_rand = Array2::from_shape_fn((b, config.n_s), |_| normal(rng));
    Ok(BatchData {
        images,
        d_true,
        d_mis,
        eps,
        s_rand,
    })
}

fn non_finite(iteration: u64, phase: &str, partial: &LossBreakdown) -> Error {
    Error::NonFiniteLoss {
        iteration,
        detail: format!(
            "{phase}: {}",
            serde_json::to_string(partial).unwrap_or_else(|_| "<unserializable>".into())
        ),
    }
}

/// One optimization step over a prepared batch. Order: content critic,
/// image critic (fakes detached), then generator/encoders jointly against
/// the updated critics. Aborts with a diagnostic record on non-finite loss.
pub fn train_step(state: &mut TrainState, data: &BatchData<f32>) -> Result<LossBreakdown> {
    let w = state.config.weights;
    let mut off = ShapeTrace::off();
    let mut tape = Tape::<f32>::new();

    let gen_bounds = GenBounds {
        ec: state.nets.content_encoder.params.bind(&mut tape),
        es: state.nets.style_encoder.params.bind(&mut tape),
        g: state.nets.generator.params.bind(&mut tape),
    };
    let fwd = forward_two_paths(&mut tape, &state.nets, &gen_bounds, data);

    let mut partial = LossBreakdown {
        kl: 0.0,
        rec: 0.0,
        content_adv: 0.0,
        latent_reg_s: 0.0,
        latent_reg_c: 0.0,
        image_adv: 0.0,
        gen_total: 0.0,
        critic_content_total: 0.0,
        critic_image_total: 0.0,
    };

    // (1) content critic on detached content, least-squares objective.
    let dc_bd = state.nets.content_critic.params.bind(&mut tape);
    let c_det = tape.detach(fwd.content);
    let sc_true =
        state
            .nets
            .content_critic
            .forward(&mut tape, &dc_bd, c_det, fwd.d_true, &mut off);
    let sc_mis =
        state
            .nets
            .content_critic
            .forward(&mut tape, &dc_bd, c_det, fwd.d_mis, &mut off);
    let dc_loss = loss_content_adv(&mut tape, sc_true, sc_mis, AdvSide::Critic);
    partial.critic_content_total = tape.scalar_value(dc_loss) as f64;
    if !partial.critic_content_total.is_finite() {
        return Err(non_finite(state.iteration, "content critic", &partial));
    }
    tape.backward(dc_loss);
    let grads = state.nets.content_critic.params.grads(&tape, &dc_bd);
    state
        .opt_dc
        .step(&mut state.nets.content_critic.params, &grads);

    // (2) image critic on real pairs and detached fakes, hinge objective.
    let dx_bd = state.nets.image_critic.params.bind(&mut tape);
    let x_fake_det = tape.detach(fwd.x_fake);
    let sx_real_true =
        state
            .nets
            .image_critic
            .forward(&mut tape, &dx_bd, fwd.x_real, fwd.d_true, &mut off);
    let sx_real_mis =
        state
            .nets
            .image_critic
            .forward(&mut tape, &dx_bd, fwd.x_real, fwd.d_mis, &mut off);
    let sx_fake =
        state
            .nets
            .image_critic
            .forward(&mut tape, &dx_bd, x_fake_det, fwd.d_mis, &mut off);
    let dx_loss =
        loss_image_adv_critic(&mut tape, &sx_real_true, &sx_real_mis, &sx_fake);
    partial.critic_image_total = tape.scalar_value(dx_loss) as f64;
    if !partial.critic_image_total.is_finite() {
        return Err(non_finite(state.iteration, "image critic", &partial));
    }
    tape.backward(dx_loss);
    let grads = state.nets.image_critic.params.grads(&tape, &dx_bd);
    state
        .opt_dx
        .step(&mut state.nets.image_critic.params, &grads);

    // (3) generator and encoders against the refreshed critics. Critic
    // parameters are frozen leaves: scores still backpropagate into the
    // generator path, but no critic gradient is formed.
    let dc2 = state.nets.content_critic.params.bind_frozen(&mut tape);
    let dx2 = state.nets.image_critic.params.bind_frozen(&mut tape);
    let g_dc_true =
        state
            .nets
            .content_critic
            .forward(&mut tape, &dc2, fwd.content, fwd.d_true, &mut off);
    let g_dc_mis =
        state
            .nets
            .content_critic
            .forward(&mut tape, &dc2, fwd.content, fwd.d_mis, &mut off);
    let g_dx_fake =
        state
            .nets
            .image_critic
            .forward(&mut tape, &dx2, fwd.x_fake, fwd.d_mis, &mut off);
    let terms = gen_terms(&mut tape, &fwd, g_dc_true, g_dc_mis, &g_dx_fake, &w);

    let breakdown = LossBreakdown {
        kl: tape.scalar_value(terms.kl) as f64,
        rec: tape.scalar_value(terms.rec) as f64,
        content_adv: tape.scalar_value(terms.content_adv) as f64,
        latent_reg_s: tape.scalar_value(terms.latent_reg_s) as f64,
        latent_reg_c: tape.scalar_value(terms.latent_reg_c) as f64,
        image_adv: tape.scalar_value(terms.image_adv) as f64,
        gen_total: tape.scalar_value(terms.total) as f64,
        critic_content_total: partial.critic_content_total,
        critic_image_total: partial.critic_image_total,
    };
    if !breakdown.is_finite() {
        return Err(non_finite(state.iteration, "generator", &breakdown));
    }
    tape.backward(terms.total);
    let g_ec = state.nets.content_encoder.params.grads(&tape, &gen_bounds.ec);
    let g_es = state.nets.style_encoder.params.grads(&tape, &gen_bounds.es);
    let g_g = state.nets.generator.params.grads(&tape, &gen_bounds.g);
    state
        .opt_ec
        .step(&mut state.nets.content_encoder.params, &g_ec);
    state
        .opt_es
        .step(&mut state.nets.style_encoder.params, &g_es);
    state.opt_g.step(&mut state.nets.generator.params, &g_g);

    state.iteration += 1;
    Ok(breakdown)
}

/// Per-run knobs that are not part of the persisted configuration.
pub struct TrainOptions<'a> {
    pub augment: AugmentPolicy,
    /// Invoke `callback` when `iteration % callback_every == 0` (0 = never).
    pub callback_every: u64,
    pub callback: Option<Box<dyn FnMut(&TrainState) -> Result<()> + 'a>>,
    /// Invoked after every step with the loss record.
    pub on_record: Option<Box<dyn FnMut(&LossRecord) + 'a>>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            augment: AugmentPolicy::off(),
            callback_every: 0,
            callback: None,
            on_record: None,
        }
    }
}

/// Run `config.max_iters` steps from a fresh state.
pub fn train_loop(
    dataset: &dyn DataSource,
    config: &TrainingConfig,
    opts: &mut TrainOptions,
) -> Result<TrainState> {
    let mut state = TrainState::new(config.clone(), dataset.dict().clone())?;
    train_loop_from(&mut state, dataset, opts)?;
    Ok(state)
}

/// Continue an existing state (fresh or loaded from a checkpoint) until its
/// configured iteration budget is exhausted.
pub fn train_loop_from(
    state: &mut TrainState,
    dataset: &dyn DataSource,
    opts: &mut TrainOptions,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if dataset.len() < state.config.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} samples, smaller than batch_size {}",
            dataset.len(),
            state.config.batch_size
        )));
    }
    if dataset.dict().label_dim() != state.config.n_d {
        return Err(Error::ConfigConflict(format!(
            "dataset label dimension {} != configured n_d {}",
            dataset.dict().label_dim(),
            state.config.n_d
        )));
    }
    let b = state.config.batch_size;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    while state.iteration < state.config.max_iters {
        if cursor + b > order.len() {
            order.shuffle(&mut state.rng);
            cursor = 0;
        }
        let indices = order[cursor..cursor + b].to_vec();
        cursor += b;
        let data = make_batch(dataset, &indices, &state.config, &opts.augment, &mut state.rng)?;
        let t0 = std::time::Instant::now();
        let losses = train_step(state, &data)?;
        let record = LossRecord {
            iter: state.iteration,
            losses,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(f) = opts.on_record.as_mut() {
            f(&record);
        }
        if opts.callback_every > 0 && state.iteration % opts.callback_every == 0 {
            if let Some(cb) = opts.callback.as_mut() {
                cb(state)?;
            }
        }
    }
    Ok(())
}

