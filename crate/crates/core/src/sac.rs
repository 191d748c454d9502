//! Pixel Soft Actor-Critic: shared convolutional encoder, twin Q-critics,
//! tanh-squashed Gaussian policy, learned temperature, polyak targets, and
//! three regularizer modes (none, augmented-Q averaging, Q-distribution
//! equalization between anchor and augmented images).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::augment::Augmenter;
use crate::replay::{Batch, ReplayError};
use crate::tensor::nn::{hard_update, polyak_update};
use crate::tensor::tape::Grads;
use crate::tensor::{
    Adam, AdamConfig, Conv2dLayer, Element, LayerNorm, LayerParams, Linear, ParamMode, Tape,
    Tensor, TensorError,
};

const LOG_STD_MIN: f64 = -10.0;
const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error)]
pub enum SacError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("Q-distribution equalization needs batch_size >= 2, got {0}")]
    BatchTooSmall(usize),
    #[error("augmentation failed: {0}")]
    Augment(#[from] crate::augment::AugmentError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    None,
    DrqAvg,
    Rqdia,
}

#[derive(Clone, Debug)]
pub struct SacConfig {
    pub gamma: f64,
    pub critic_tau: f64,
    pub encoder_tau: f64,
    pub critic_target_update_freq: u64,
    pub lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub init_temperature: f64,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub num_filters: usize,
    pub regularizer: Regularizer,
    pub rqdia_weight: f64,
    /// Evaluate the equalization loss on a uniformly drawn subset of the
    /// batch actions instead of all of them. `None` uses the full batch.
    pub rqdia_action_subset: Option<usize>,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            critic_tau: 0.01,
            encoder_tau: 0.05,
            critic_target_update_freq: 2,
            lr: 1e-3,
            alpha_lr: 1e-4,
            batch_size: 128,
            init_temperature: 0.1,
            hidden_dim: 1024,
            latent_dim: 50,
            num_filters: 32,
            regularizer: Regularizer::None,
            rqdia_weight: 1.0,
            rqdia_action_subset: None,
        }
    }
}

// ---------------------------------------------------------------- encoder --

/// Four 3x3 conv layers (stride 2, then three stride 1), flatten, linear
/// projection to the latent, layer norm, tanh.
#[derive(Clone)]
pub struct PixelEncoder<E: Element> {
    convs: Vec<Conv2dLayer<E>>,
    fc: Linear<E>,
    ln: LayerNorm<E>,
    flat_dim: usize,
    pub latent_dim: usize,
}

impl<E: Element> PixelEncoder<E> {
    pub fn new(
        name: &str,
        in_channels: usize,
        frame_size: usize,
        num_filters: usize,
        latent_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let relu_gain = 2f64.sqrt();
        let mut convs = Vec::new();
        convs.push(Conv2dLayer::new(
            &format!("{name}.conv0"),
            in_channels,
            num_filters,
            3,
            2,
            0,
            relu_gain,
            rng,
        ));
        for i in 1..4 {
            convs.push(Conv2dLayer::new(
                &format!("{name}.conv{i}"),
                num_filters,
                num_filters,
                3,
                1,
                0,
                relu_gain,
                rng,
            ));
        }
        let mut side = crate::tensor::kernels::conv_out_size(frame_size, 3, 2, 0).ok_or(
            TensorError::BadShape {
                op: "encoder",
                shape: vec![frame_size],
                reason: "frame too small for the conv stack".into(),
            },
        )?;
        for _ in 1..4 {
            side = crate::tensor::kernels::conv_out_size(side, 3, 1, 0).ok_or(
                TensorError::BadShape {
                    op: "encoder",
                    shape: vec![side],
                    reason: "frame too small for the conv stack".into(),
                },
            )?;
        }
        let flat_dim = num_filters * side * side;
        let fc = Linear::new(&format!("{name}.fc"), flat_dim, latent_dim, 1.0, rng);
        let ln = LayerNorm::new(&format!("{name}.ln"), latent_dim);
        Ok(PixelEncoder {
            convs,
            fc,
            ln,
            flat_dim,
            latent_dim,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        obs: &Tensor<E>,
        mode: ParamMode,
    ) -> Result<Tensor<E>, TensorError> {
        let batch = obs.shape()[0];
        let mut h = obs.clone();
        for conv in &self.convs {
            let y = conv.forward(tape, &h, mode)?;
            h = tape.relu(&y);
        }
        let flat = h.reshape(&[batch, self.flat_dim]);
        let z = self.fc.forward(tape, &flat, mode)?;
        let n = self.ln.forward(tape, &z, mode)?;
        Ok(tape.tanh(&n))
    }

    pub fn params(&self) -> Vec<&LayerParams<E>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend(c.params());
        }
        out.extend(self.fc.params());
        out.extend(self.ln.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<E>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend(c.params_mut());
        }
        out.extend(self.fc.params_mut());
        out.extend(self.ln.params_mut());
        out
    }

    /// Conv-layer parameters only; used to assert the actor never reaches
    /// them.
    pub fn conv_params(&self) -> Vec<&LayerParams<E>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }
}

// ----------------------------------------------------------------- critic --

/// One Q head: 3-layer MLP on (latent, action) -> scalar.
#[derive(Clone)]
pub struct QHead<E: Element> {
    l1: Linear<E>,
    l2: Linear<E>,
    l3: Linear<E>,
}

impl<E: Element> QHead<E> {
    fn new(
        name: &str,
        latent_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        QHead {
            l1: Linear::new(&format!("{name}.l1"), latent_dim + action_dim, hidden, 1.0, rng),
            l2: Linear::new(&format!("{name}.l2"), hidden, hidden, 1.0, rng),
            l3: Linear::new(&format!("{name}.l3"), hidden, 1, 1.0, rng),
        }
    }

    /// latent [B, L], action [B, A] -> q [B]
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        latent: &Tensor<E>,
        action: &Tensor<E>,
        mode: ParamMode,
    ) -> Result<Tensor<E>, TensorError> {
        let x = tape.concat_cols(latent, action)?;
        let h1 = self.l1.forward(tape, &x, mode)?;
        let a1 = tape.relu(&h1);
        let h2 = self.l2.forward(tape, &a1, mode)?;
        let a2 = tape.relu(&h2);
        let q = self.l3.forward(tape, &a2, mode)?;
        let b = q.shape()[0];
        Ok(q.reshape(&[b]))
    }

    fn params(&self) -> Vec<&LayerParams<E>> {
        let mut out = self.l1.params();
        out.extend(self.l2.params());
        out.extend(self.l3.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams<E>> {
        let mut out = self.l1.params_mut();
        out.extend(self.l2.params_mut());
        out.extend(self.l3.params_mut());
        out
    }
}

#[derive(Clone)]
pub struct TwinCritic<E: Element> {
    pub q1: QHead<E>,
    pub q2: QHead<E>,
}

impl<E: Element> TwinCritic<E> {
    fn new(
        name: &str,
        latent_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        TwinCritic {
            q1: QHead::new(&format!("{name}.q1"), latent_dim, action_dim, hidden, rng),
            q2: QHead::new(&format!("{name}.q2"), latent_dim, action_dim, hidden, rng),
        }
    }

    /// min over the twin heads, gradient to the smaller (ties: first).
    pub fn min_q(
        &self,
        tape: &mut Tape<E>,
        latent: &Tensor<E>,
        action: &Tensor<E>,
        mode: ParamMode,
    ) -> Result<Tensor<E>, TensorError> {
        let q1 = self.q1.forward(tape, latent, action, mode)?;
        let q2 = self.q2.forward(tape, latent, action, mode)?;
        tape.min_elementwise(&q1, &q2)
    }

    pub fn params(&self) -> Vec<&LayerParams<E>> {
        let mut out = self.q1.params();
        out.extend(self.q2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<E>> {
        let mut out = self.q1.params_mut();
        out.extend(self.q2.params_mut());
        out
    }
}

// ----------------------------------------------------------------- policy --

/// 3-layer MLP emitting (mean, log-std) per action dim; log-std clamped to
/// [-10, 2].
#[derive(Clone)]
pub struct GaussianPolicy<E: Element> {
    l1: Linear<E>,
    l2: Linear<E>,
    l3: Linear<E>,
    pub action_dim: usize,
}

impl<E: Element> GaussianPolicy<E> {
    fn new(
        name: &str,
        latent_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        GaussianPolicy {
            l1: Linear::new(&format!("{name}.l1"), latent_dim, hidden, 1.0, rng),
            l2: Linear::new(&format!("{name}.l2"), hidden, hidden, 1.0, rng),
            l3: Linear::new(&format!("{name}.l3"), hidden, 2 * action_dim, 1.0, rng),
            action_dim,
        }
    }

    /// latent [B, L] -> (mu [B, A], log_std [B, A] clamped)
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        latent: &Tensor<E>,
        mode: ParamMode,
    ) -> Result<(Tensor<E>, Tensor<E>), TensorError> {
        let h1 = self.l1.forward(tape, latent, mode)?;
        let a1 = tape.relu(&h1);
        let h2 = self.l2.forward(tape, &a1, mode)?;
        let a2 = tape.relu(&h2);
        let out = self.l3.forward(tape, &a2, mode)?;
        let b = out.shape()[0];
        let zeros = vec![0usize; b];
        let ones = vec![1usize; b];
        let mu = tape.gather_chunks(&out, &zeros, self.action_dim)?;
        let raw = tape.gather_chunks(&out, &ones, self.action_dim)?;
        let log_std = tape.clamp(&raw, E::of_f64(LOG_STD_MIN), E::of_f64(LOG_STD_MAX));
        Ok((mu, log_std))
    }

    pub fn params(&self) -> Vec<&LayerParams<E>> {
        let mut out = self.l1.params();
        out.extend(self.l2.params());
        out.extend(self.l3.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<E>> {
        let mut out = self.l1.params_mut();
        out.extend(self.l2.params_mut());
        out.extend(self.l3.params_mut());
        out
    }
}

/// Reparameterized tanh-Gaussian sample with its log-density.
///
/// a = tanh(mu + std * z); the density carries the change-of-variables
/// correction sum log(1 - tanh^2(u)), evaluated in the softplus form that
/// stays finite for large |u|.
pub fn squashed_sample<E: Element>(
    tape: &mut Tape<E>,
    mu: &Tensor<E>,
    log_std: &Tensor<E>,
    z: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>), TensorError> {
    let std = tape.exp(log_std);
    let noise = tape.mul(&std, z)?;
    let u = tape.add(mu, &noise)?;
    let action = tape.tanh(&u);

    // Gaussian log-density at u: -z^2/2 - log_std - ln(2 pi)/2, summed over
    // action dims.
    let zsq = tape.square(z);
    let neg_half_zsq = tape.mul_scalar(&zsq, E::of_f64(-0.5));
    let shifted = tape.add_scalar(&neg_half_zsq, E::of_f64(-HALF_LN_2PI));
    let per_dim = tape.sub(&shifted, log_std)?;
    let gauss = tape.sum_last(&per_dim)?;

    // log(1 - tanh^2(u)) = 2 (ln 2 - u - softplus(-2u))
    let m2u = tape.mul_scalar(&u, E::of_f64(-2.0));
    let sp = tape.softplus(&m2u);
    let u_plus_sp = tape.add(&u, &sp)?;
    let neg2 = tape.mul_scalar(&u_plus_sp, E::of_f64(-2.0));
    let corr_per_dim = tape.add_scalar(&neg2, E::of_f64(2.0 * std::f64::consts::LN_2));
    let corr = tape.sum_last(&corr_per_dim)?;

    let log_prob = tape.sub(&gauss, &corr)?;
    Ok((action, log_prob))
}

// ------------------------------------------------------------------ agent --

/// A replay batch converted to the agent's element type.
pub struct SacBatch<E: Element> {
    pub states: Tensor<E>,
    pub actions: Tensor<E>,
    pub rewards: Vec<E>,
    pub next_states: Tensor<E>,
    pub dones: Vec<bool>,
}

impl SacBatch<f32> {
    pub fn from_replay(batch: &Batch<Vec<f32>>) -> Self {
        let b = batch.actions.len();
        let d = batch.actions.first().map(|a| a.len()).unwrap_or(0);
        let mut actions = vec![0f32; b * d];
        for (i, a) in batch.actions.iter().enumerate() {
            actions[i * d..(i + 1) * d].copy_from_slice(a);
        }
        SacBatch {
            states: batch.states.detach(),
            actions: Tensor::new(actions, &[b, d]),
            rewards: batch.rewards.clone(),
            next_states: batch.next_states.detach(),
            dones: batch.dones.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SacMetrics {
    pub critic_loss: f64,
    pub rqdia_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub mean_q: f64,
}

#[derive(Clone)]
pub struct SacAgent<E: Element> {
    pub config: SacConfig,
    pub encoder: PixelEncoder<E>,
    pub encoder_target: PixelEncoder<E>,
    pub critic: TwinCritic<E>,
    pub critic_target: TwinCritic<E>,
    pub actor: GaussianPolicy<E>,
    pub log_alpha: LayerParams<E>,
    pub target_entropy: f64,
    critic_opt: Adam<E>,
    actor_opt: Adam<E>,
    alpha_opt: Adam<E>,
    pub update_count: u64,
    pub action_dim: usize,
}

impl<E: Element> SacAgent<E> {
    pub fn new(
        config: SacConfig,
        in_channels: usize,
        frame_size: usize,
        action_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, SacError> {
        if config.batch_size < 2 {
            return Err(SacError::BatchTooSmall(config.batch_size));
        }
        let encoder = PixelEncoder::new(
            "encoder",
            in_channels,
            frame_size,
            config.num_filters,
            config.latent_dim,
            rng,
        )?;
        let critic = TwinCritic::new(
            "critic",
            config.latent_dim,
            action_dim,
            config.hidden_dim,
            rng,
        );
        let actor = GaussianPolicy::new(
            "actor",
            config.latent_dim,
            action_dim,
            config.hidden_dim,
            rng,
        );
        // Targets start as exact copies of the online networks.
        let mut encoder_target = PixelEncoder::new(
            "encoder_target",
            in_channels,
            frame_size,
            config.num_filters,
            config.latent_dim,
            rng,
        )?;
        let mut critic_target = TwinCritic::new(
            "critic_target",
            config.latent_dim,
            action_dim,
            config.hidden_dim,
            rng,
        );
        hard_update(&encoder.params(), &mut encoder_target.params_mut());
        hard_update(&critic.params(), &mut critic_target.params_mut());

        let log_alpha = LayerParams::new(
            "log_alpha",
            Tensor::scalar(E::of_f64(config.init_temperature.ln())),
        );
        let critic_opt = Adam::new(AdamConfig::with_lr(config.lr));
        let actor_opt = Adam::new(AdamConfig::with_lr(config.lr));
        let alpha_opt = Adam::new(AdamConfig::with_lr(config.alpha_lr));
        Ok(SacAgent {
            target_entropy: -(action_dim as f64),
            config,
            encoder,
            encoder_target,
            critic,
            critic_target,
            actor,
            log_alpha,
            critic_opt,
            actor_opt,
            alpha_opt,
            update_count: 0,
            action_dim,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.value.item().as_f64().exp()
    }

    /// Gaussian noise tensor [b, action_dim] from the given stream.
    pub fn draw_noise(&self, b: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
        let data: Vec<E> = (0..b * self.action_dim)
            .map(|_| E::of_f64(StandardNormal.sample(rng)))
            .collect();
        Tensor::new(data, &[b, self.action_dim])
    }

    /// Bellman backup y = r + gamma (1-d) (min_i Q_target_i(s', a') -
    /// alpha log pi(a'|s')), computed without gradients. Terminal masking
    /// multiplies by exact zero, so y == r bitwise when d = 1.
    pub fn compute_target(
        &self,
        batch: &SacBatch<E>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<E>, SacError> {
        let b = batch.dones.len();
        let mut tape = Tape::inference();
        let latent = self
            .encoder_target
            .forward(&mut tape, &batch.next_states, ParamMode::Frozen)?;
        let (mu, log_std) = self.actor.forward(&mut tape, &latent, ParamMode::Frozen)?;
        let z = self.draw_noise(b, rng);
        let (next_action, log_prob) = squashed_sample(&mut tape, &mu, &log_std, &z)?;
        let q1 = self
            .critic_target
            .q1
            .forward(&mut tape, &latent, &next_action, ParamMode::Frozen)?;
        let q2 = self
            .critic_target
            .q2
            .forward(&mut tape, &latent, &next_action, ParamMode::Frozen)?;
        let gamma = E::of_f64(self.config.gamma);
        let alpha = E::of_f64(self.alpha());
        let mut y = Vec::with_capacity(b);
        for i in 0..b {
            let qmin = if q1.data()[i] <= q2.data()[i] {
                q1.data()[i]
            } else {
                q2.data()[i]
            };
            let not_done = if batch.dones[i] { E::zero() } else { E::one() };
            let backup = gamma * not_done * (qmin - alpha * log_prob.data()[i]);
            y.push(batch.rewards[i] + backup);
        }
        Ok(y)
    }

    /// Critic regression loss on the given latent: mean over the batch of
    /// the summed squared errors of both heads. Also returns mean min-Q for
    /// metrics.
    pub fn critic_loss_on(
        &self,
        tape: &mut Tape<E>,
        latent: &Tensor<E>,
        actions: &Tensor<E>,
        y: &[E],
    ) -> Result<(Tensor<E>, f64), SacError> {
        let yt = Tensor::new(y.to_vec(), &[y.len()]);
        let q1 = self
            .critic
            .q1
            .forward(tape, latent, actions, ParamMode::Trainable)?;
        let q2 = self
            .critic
            .q2
            .forward(tape, latent, actions, ParamMode::Trainable)?;
        let d1 = tape.sub(&q1, &yt)?;
        let d2 = tape.sub(&q2, &yt)?;
        let s1 = tape.square(&d1);
        let s2 = tape.square(&d2);
        let total = tape.add(&s1, &s2)?;
        let loss = tape.mean_all(&total);
        let mean_q = q1
            .data()
            .iter()
            .zip(q2.data())
            .map(|(&a, &b)| a.min(b).as_f64())
            .sum::<f64>()
            / y.len() as f64;
        Ok((loss, mean_q))
    }

    /// Equalization loss between anchor and augmented latents over the batch
    /// actions (optionally a subset): mean over (state, action) pairs of
    /// (min Q(s, a_i) - min Q(aug(s), a_i))^2. Gradients flow through both
    /// branches.
    pub fn rqdia_loss_on(
        &self,
        tape: &mut Tape<E>,
        latent_anchor: &Tensor<E>,
        latent_aug: &Tensor<E>,
        actions: &Tensor<E>,
        subset: Option<&[usize]>,
    ) -> Result<Tensor<E>, SacError> {
        let b = latent_anchor.shape()[0];
        if b < 2 {
            return Err(SacError::BatchTooSmall(b));
        }
        let d = actions.shape()[1];
        let idx: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..b).collect(),
        };
        let s = idx.len();
        // Action block repeated for every state: row j*s + t holds a_idx[t].
        let mut tiled = vec![E::zero(); b * s * d];
        for j in 0..b {
            for (t, &ai) in idx.iter().enumerate() {
                let src = &actions.data()[ai * d..(ai + 1) * d];
                tiled[(j * s + t) * d..(j * s + t + 1) * d].copy_from_slice(src);
            }
        }
        let tiled = Tensor::new(tiled, &[b * s, d]);
        let rep_anchor = tape.repeat_rows(latent_anchor, s)?;
        let rep_aug = tape.repeat_rows(latent_aug, s)?;
        let qa = self
            .critic
            .min_q(tape, &rep_anchor, &tiled, ParamMode::Trainable)?;
        let qb = self
            .critic
            .min_q(tape, &rep_aug, &tiled, ParamMode::Trainable)?;
        let diff = tape.sub(&qa, &qb)?;
        let sq = tape.square(&diff);
        Ok(tape.mean_all(&sq))
    }

    /// Policy and temperature losses on a detached latent. The critic is
    /// evaluated frozen so no gradient reaches it or the encoder.
    pub fn actor_and_alpha_loss(
        &self,
        tape: &mut Tape<E>,
        latent_detached: &Tensor<E>,
        z: &Tensor<E>,
    ) -> Result<(Tensor<E>, Vec<E>), SacError> {
        let (mu, log_std) = self
            .actor
            .forward(tape, latent_detached, ParamMode::Trainable)?;
        let (action, log_prob) = squashed_sample(tape, &mu, &log_std, z)?;
        let qmin = self
            .critic
            .min_q(tape, latent_detached, &action, ParamMode::Frozen)?;
        let alpha = E::of_f64(self.alpha());
        let weighted = tape.mul_scalar(&log_prob, alpha);
        let gap = tape.sub(&weighted, &qmin)?;
        let loss = tape.mean_all(&gap);
        Ok((loss, log_prob.data().to_vec()))
    }

    fn store_grads_for(params: &mut [&mut LayerParams<E>], grads: &Grads<E>) {
        for p in params.iter_mut() {
            p.store_grad(grads);
        }
    }

    /// Polyak-average online parameters into the targets, on schedule.
    pub fn maybe_update_targets(&mut self) -> Result<(), SacError> {
        if self.update_count % self.config.critic_target_update_freq != 0 {
            return Ok(());
        }
        let rho_c = E::of_f64(1.0 - self.config.critic_tau);
        let rho_e = E::of_f64(1.0 - self.config.encoder_tau);
        polyak_update(
            &self.critic.params(),
            &mut self.critic_target.params_mut(),
            rho_c,
        )?;
        polyak_update(
            &self.encoder.params(),
            &mut self.encoder_target.params_mut(),
            rho_e,
        )?;
        Ok(())
    }

    /// Every named parameter (online, target, temperature) for checkpoints.
    pub fn named_params(&self) -> Vec<&LayerParams<E>> {
        let mut out = self.encoder.params();
        out.extend(self.critic.params());
        out.extend(self.actor.params());
        out.extend(self.encoder_target.params());
        out.extend(self.critic_target.params());
        out.push(&self.log_alpha);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut LayerParams<E>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.critic.params_mut());
        out.extend(self.actor.params_mut());
        out.extend(self.encoder_target.params_mut());
        out.extend(self.critic_target.params_mut());
        out.push(&mut self.log_alpha);
        out
    }

    pub fn optimizer_states(&self) -> Vec<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        vec![
            self.critic_opt.state(),
            self.actor_opt.state(),
            self.alpha_opt.state(),
        ]
    }

    pub fn restore_optimizers(&mut self, mut states: Vec<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>) {
        assert_eq!(states.len(), 3, "expected critic/actor/alpha states");
        let (sc, mc, vc) = states.remove(0);
        self.critic_opt.restore(sc, mc, vc);
        let (sa, ma, va) = states.remove(0);
        self.actor_opt.restore(sa, ma, va);
        let (st, mt, vt) = states.remove(0);
        self.alpha_opt.restore(st, mt, vt);
    }
}

impl SacAgent<f32> {
    /// Select an action for environment interaction. Train mode samples from
    /// the squashed Gaussian; eval mode returns tanh(mu).
    pub fn act(
        &self,
        obs: &Tensor<f32>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f32>, SacError> {
        let shape = obs.shape().to_vec();
        let batched = obs.reshape(&[1, shape[0], shape[1], shape[2]]);
        let mut tape = Tape::inference();
        let latent = self
            .encoder
            .forward(&mut tape, &batched, ParamMode::Frozen)?;
        let (mu, log_std) = self.actor.forward(&mut tape, &latent, ParamMode::Frozen)?;
        if train {
            let z = self.draw_noise(1, rng);
            let (action, _) = squashed_sample(&mut tape, &mu, &log_std, &z)?;
            Ok(action.data().to_vec())
        } else {
            Ok(mu.data().iter().map(|v| v.tanh()).collect())
        }
    }

    /// One full update in algorithm order: targets, critic (+ equalization
    /// term in the same optimizer step), actor, temperature, then polyak on
    /// schedule.
    pub fn train_step(
        &mut self,
        batch: &Batch<Vec<f32>>,
        augmenter: &mut Augmenter,
        policy_rng: &mut ChaCha8Rng,
    ) -> Result<SacMetrics, SacError> {
        let sb = SacBatch::from_replay(batch);
        let b = sb.dones.len();
        if b < 2 {
            return Err(SacError::BatchTooSmall(b));
        }

        // 1. Bellman targets, no gradients.
        let y = self.compute_target(&sb, policy_rng)?;

        // 2. Critic + regularizer in one fused optimizer step.
        let mut tape = Tape::new();
        let latent = self
            .encoder
            .forward(&mut tape, &sb.states, ParamMode::Trainable)?;
        let (critic_loss, mean_q) = self.critic_loss_on(&mut tape, &latent, &sb.actions, &y)?;
        let critic_loss_value = critic_loss.item() as f64;
        let mut rqdia_value = 0f64;
        let total = match self.config.regularizer {
            Regularizer::None => critic_loss,
            Regularizer::DrqAvg => {
                let aug = augmenter.apply_batch(&sb.states)?;
                let latent_aug = self.encoder.forward(&mut tape, &aug, ParamMode::Trainable)?;
                let (aug_loss, _) = self.critic_loss_on(&mut tape, &latent_aug, &sb.actions, &y)?;
                let sum = tape.add(&critic_loss, &aug_loss)?;
                tape.mul_scalar(&sum, 0.5)
            }
            Regularizer::Rqdia => {
                let aug = augmenter.apply_batch(&sb.states)?;
                let latent_aug = self.encoder.forward(&mut tape, &aug, ParamMode::Trainable)?;
                let subset = self.draw_action_subset(b, &mut augmenter.rng);
                let rq = self.rqdia_loss_on(
                    &mut tape,
                    &latent,
                    &latent_aug,
                    &sb.actions,
                    subset.as_deref(),
                )?;
                rqdia_value = rq.item() as f64;
                let weighted = tape.mul_scalar(&rq, self.config.rqdia_weight as f32);
                tape.add(&critic_loss, &weighted)?
            }
        };
        let grads = tape.backward(&total)?;
        {
            let SacAgent {
                encoder,
                critic,
                critic_opt,
                ..
            } = self;
            let mut group = encoder.params_mut();
            group.extend(critic.params_mut());
            Self::store_grads_for(&mut group, &grads);
            critic_opt.step(&mut group)?;
        }

        // 3. Actor on the detached latent; critic frozen.
        let latent_detached = latent.detach();
        let mut tape_a = Tape::new();
        let z = self.draw_noise(b, policy_rng);
        let (actor_loss, log_probs) =
            self.actor_and_alpha_loss(&mut tape_a, &latent_detached, &z)?;
        let actor_loss_value = actor_loss.item() as f64;
        let grads_a = tape_a.backward(&actor_loss)?;
        let mut actor_group = self.actor.params_mut();
        Self::store_grads_for(&mut actor_group, &grads_a);
        self.actor_opt.step(&mut actor_group)?;

        // 4. Temperature: gradient of -log_alpha * mean(log_pi +
        // target_entropy) with the policy term detached.
        let c = log_probs
            .iter()
            .map(|&v| v as f64 + self.target_entropy)
            .sum::<f64>()
            / b as f64;
        let mut tape_t = Tape::new();
        let la = self.log_alpha.on(&mut tape_t, ParamMode::Trainable);
        let alpha_loss = tape_t.mul_scalar(&la, -c as f32);
        let grads_t = tape_t.backward(&alpha_loss)?;
        self.log_alpha.store_grad(&grads_t);
        self.alpha_opt.step(&mut [&mut self.log_alpha])?;

        // 5. Target networks on schedule.
        self.update_count += 1;
        self.maybe_update_targets()?;

        Ok(SacMetrics {
            critic_loss: critic_loss_value,
            rqdia_loss: rqdia_value,
            actor_loss: actor_loss_value,
            alpha: self.alpha(),
            mean_q,
        })
    }

    fn draw_action_subset(&self, b: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
        let s = self.config.rqdia_action_subset?;
        if s == 0 || s >= b {
            return None;
        }
        // Partial Fisher-Yates: first s entries of a shuffled index range.
        let mut idx: Vec<usize> = (0..b).collect();
        for i in 0..s {
            let j = rng.gen_range(i..b);
            idx.swap(i, j);
        }
        idx.truncate(s);
        Some(idx)
    }
}
