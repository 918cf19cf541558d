//! Loss terms of the disentanglement path and the translation path, and the
//! combined two-path graph used by training, evaluation and gradient checks.
//!
//! The content critic trains with the least-squares objective; the image
//! critic with the hinge objective, keeping the 1/2 weights on the
//! mismatched-real and fake terms. The encoder side of the content
//! adversary flips the labels instead of reversing gradients.

use crate::autodiff::{Elem, Tape, Tx};
use crate::nets::{Bound, Networks, ShapeTrace};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

/// Loss weights; all non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_rec: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kl: 0.01,
            lambda_rec: 10.0,
            lambda_reg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        crate::error::ensure_contract!(
            self.lambda_kl >= 0.0 && self.lambda_rec >= 0.0 && self.lambda_reg >= 0.0,
            "loss weights must be non-negative"
        );
        Ok(())
    }
}

/// Which side of an adversarial objective is being optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvSide {
    Critic,
    Encoder,
}

/// Mean absolute difference of two same-shape tensors.
pub fn l1_mean<E: Elem>(tape: &mut Tape<E>, a: Tx, b: Tx) -> Tx {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean_all(d)
}

/// Batch-mean KL to the standard normal prior from `mu`/`logvar` rows
/// (`[B, n_s]` each): `0.5 * mean_b sum_i (mu^2 + e^lv - 1 - lv)`.
pub fn kl_term<E: Elem>(tape: &mut Tape<E>, mu: Tx, logvar: Tx) -> Tx {
    let n_s = tape.shape(mu)[1];
    let m2 = tape.square(mu);
    let ev = tape.exp(logvar);
    let s = tape.add(m2, ev);
    let s = tape.add_scalar(s, E::from_f64(-1.0));
    let s = tape.sub(s, logvar);
    let m = tape.mean_all(s);
    tape.scale(m, E::from_f64(0.5 * n_s as f64))
}

/// cVAE loss: `lambda_kl * KL + lambda_rec * meanL1(x_rec - x)`.
/// Returns `(total, weighted_kl, weighted_rec)`.
pub fn loss_cvae<E: Elem>(
    tape: &mut Tape<E>,
    x: Tx,
    x_rec: Tx,
    mu: Tx,
    logvar: Tx,
    w: &LossWeights,
) -> (Tx, Tx, Tx) {
    let kl = kl_term(tape, mu, logvar);
    let kl = tape.scale(kl, E::from_f64(w.lambda_kl));
    let rec = l1_mean(tape, x_rec, x);
    let rec = tape.scale(rec, E::from_f64(w.lambda_rec));
    (tape.add(kl, rec), kl, rec)
}

/// Least-squares adversarial loss in content space.
///
/// Critic side: `mean((s_true - 1)^2) + mean(s_mis^2)`.
/// Encoder side (label flip): `mean(s_true^2) + mean((s_mis - 1)^2)`.
pub fn loss_content_adv<E: Elem>(
    tape: &mut Tape<E>,
    scores_true: Tx,
    scores_mis: Tx,
    side: AdvSide,
) -> Tx {
    let one = E::from_f64(1.0);
    let (to_one, to_zero) = match side {
        AdvSide::Critic => (scores_true, scores_mis),
        AdvSide::Encoder => (scores_mis, scores_true),
    };
    let a = tape.add_scalar(to_one, -one);
    let a = tape.square(a);
    let a = tape.mean_all(a);
    let b = tape.square(to_zero);
    let b = tape.mean_all(b);
    tape.add(a, b)
}

/// Latent regression: `lambda_reg * (meanL1(s_rec - s) + meanL1(c_rec - c))`.
/// Returns `(total, weighted_s_term, weighted_c_term)`. The caller is
/// responsible for detaching the targets.
pub fn loss_latent_regression<E: Elem>(
    tape: &mut Tape<E>,
    s: Tx,
    s_rec: Tx,
    c: Tx,
    c_rec: Tx,
    lambda_reg: f64,
) -> (Tx, Tx, Tx) {
    let s_term = l1_mean(tape, s_rec, s);
    let s_term = tape.scale(s_term, E::from_f64(lambda_reg));
    let c_term = l1_mean(tape, c_rec, c);
    let c_term = tape.scale(c_term, E::from_f64(lambda_reg));
    (tape.add(s_term, c_term), s_term, c_term)
}

fn hinge_mean<E: Elem>(tape: &mut Tape<E>, maps: &[Tx], sign_plus: bool) -> Tx {
    // mean over scales of mean(max(0, 1 -/+ s)) per scale
    let per_scale: Vec<Tx> = maps
        .iter()
        .map(|&m| {
            let t = if sign_plus {
                tape.add_scalar(m, E::from_f64(1.0))
            } else {
                tape.rsub_scalar(m, E::from_f64(1.0))
            };
            let t = tape.relu(t);
            tape.mean_all(t)
        })
        .collect();
    tape.scalar_mean(&per_scale)
}

/// Hinge critic loss over per-scale score maps:
/// `mean(max(0, 1 - s_real_true)) + 1/2 mean(max(0, 1 + s_real_mis))
///  + 1/2 mean(max(0, 1 + s_fake))`, each term averaged over scales.
pub fn loss_image_adv_critic<E: Elem>(
    tape: &mut Tape<E>,
    real_true: &[Tx],
    real_mis: &[Tx],
    fake: &[Tx],
) -> Tx {
    let half = E::from_f64(0.5);
    let t1 = hinge_mean(tape, real_true, false);
    let t2 = hinge_mean(tape, real_mis, true);
    let t2 = tape.scale(t2, half);
    let t3 = hinge_mean(tape, fake, true);
    let t3 = tape.scale(t3, half);
    let s = tape.add(t1, t2);
    tape.add(s, t3)
}

/// Hinge generator loss: `-mean(s_fake)`, averaged over scales.
pub fn loss_image_adv_gen<E: Elem>(tape: &mut Tape<E>, fake: &[Tx]) -> Tx {
    let per_scale: Vec<Tx> = fake.iter().map(|&m| tape.mean_all(m)).collect();
    let m = tape.scalar_mean(&per_scale);
    tape.neg(m)
}

/// One training batch (already encoded as arrays) plus the frozen noise
/// draws: reparameterization noise and the prior styles of the
/// translation path.
#[derive(Debug, Clone)]
pub struct BatchData<E: Elem> {
    pub images: Array4<E>,
    pub d_true: Array2<E>,
    pub d_mis: Array2<E>,
    pub eps: Array2<E>,
    pub s_rand: Array2<E>,
}

/// Bindings of the three generator-side networks on one tape.
pub struct GenBounds {
    pub ec: Bound,
    pub es: Bound,
    pub g: Bound,
}

/// Tape handles produced by the shared two-path forward pass.
pub struct TwoPathForward {
    pub x_real: Tx,
    pub d_true: Tx,
    pub d_mis: Tx,
    pub content: Tx,
    pub mu: Tx,
    pub logvar: Tx,
    pub s_enc: Tx,
    pub s_rand: Tx,
    pub x_rec: Tx,
    pub x_fake: Tx,
    pub s_rec_mu: Tx,
    pub c_rec: Tx,
}

/// Run encoders and generator for both paths on one tape.
///
/// Disentanglement path: encode, reparameterize with `eps`, reconstruct
/// under the true domain. Translation path: decode the same content with a
/// prior style under a mismatched domain, then re-encode the fake for the
/// latent regression.
pub fn forward_two_paths<E: Elem>(
    tape: &mut Tape<E>,
    nets: &Networks<E>,
    bounds: &GenBounds,
    data: &BatchData<E>,
) -> TwoPathForward {
    let x_real = tape.constant(data.images.clone().into_dyn());
    let d_true = tape.constant(data.d_true.clone().into_dyn());
    let d_mis = tape.constant(data.d_mis.clone().into_dyn());
    let eps = tape.constant(data.eps.clone().into_dyn());
    let s_rand = tape.constant(data.s_rand.clone().into_dyn());

    let mut off = ShapeTrace::off();
    let content = nets
        .content_encoder
        .forward(tape, &bounds.ec, x_real, &mut off);
    let (mu, logvar) = nets
        .style_encoder
        .forward(tape, &bounds.es, x_real, &mut off);

    // s = mu + exp(0.5 * logvar) * eps
    let half_lv = tape.scale(logvar, E::from_f64(0.5));
    let std = tape.exp(half_lv);
    let scaled = tape.mul(std, eps);
    let s_enc = tape.add(mu, scaled);

    let cond_rec = tape.concat_cols(s_enc, d_true);
    let x_rec = nets
        .generator
        .forward(tape, &bounds.g, content, cond_rec, &mut off);

    let cond_fake = tape.concat_cols(s_rand, d_mis);
    let x_fake = nets
        .generator
        .forward(tape, &bounds.g, content, cond_fake, &mut off);

    let (s_rec_mu, _) = nets
        .style_encoder
        .forward(tape, &bounds.es, x_fake, &mut off);
    let c_rec = nets
        .content_encoder
        .forward(tape, &bounds.ec, x_fake, &mut off);

    TwoPathForward {
        x_real,
        d_true,
        d_mis,
        content,
        mu,
        logvar,
        s_enc,
        s_rand,
        x_rec,
        x_fake,
        s_rec_mu,
        c_rec,
    }
}

/// Weighted generator-side loss terms (tape handles).
pub struct GenTerms {
    pub kl: Tx,
    pub rec: Tx,
    pub content_adv: Tx,
    pub latent_reg_s: Tx,
    pub latent_reg_c: Tx,
    pub image_adv: Tx,
    pub total: Tx,
}

/// Assemble the generator-side objective from the two-path forward and the
/// critic scores computed on live (non-detached) inputs.
pub fn gen_terms<E: Elem>(
    tape: &mut Tape<E>,
    fwd: &TwoPathForward,
    dc_true: Tx,
    dc_mis: Tx,
    dx_fake: &[Tx],
    w: &LossWeights,
) -> GenTerms {
    let kl = kl_term(tape, fwd.mu, fwd.logvar);
    let kl = tape.scale(kl, E::from_f64(w.lambda_kl));
    let rec = l1_mean(tape, fwd.x_rec, fwd.x_real);
    let rec = tape.scale(rec, E::from_f64(w.lambda_rec));
    let content_adv = loss_content_adv(tape, dc_true, dc_mis, AdvSide::Encoder);
    let c_target = tape.detach(fwd.content);
    let (_, latent_reg_s, latent_reg_c) = loss_latent_regression(
        tape,
        fwd.s_rand,
        fwd.s_rec_mu,
        c_target,
        fwd.c_rec,
        w.lambda_reg,
    );
    let image_adv = loss_image_adv_gen(tape, dx_fake);

    let mut total = tape.add(kl, rec);
    total = tape.add(total, content_adv);
    total = tape.add(total, latent_reg_s);
    total = tape.add(total, latent_reg_c);
    total = tape.add(total, image_adv);
    GenTerms {
        kl,
        rec,
        content_adv,
        latent_reg_s,
        latent_reg_c,
        image_adv,
        total,
    }
}

/// Flat per-iteration numeric record of every loss term. `kl`, `rec`,
/// `latent_reg_*` carry their lambda weights so the generator total is the
/// exact sum of the six component fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub rec: f64,
    pub content_adv: f64,
    pub latent_reg_s: f64,
    pub latent_reg_c: f64,
    pub image_adv: f64,
    pub gen_total: f64,
    pub critic_content_total: f64,
    pub critic_image_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.kl,
            self.rec,
            self.content_adv,
            self.latent_reg_s,
            self.latent_reg_c,
            self.image_adv,
            self.gen_total,
            self.critic_content_total,
            self.critic_image_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub const KEYS: [&'static str; 9] = [
        "kl",
        "rec",
        "content_adv",
        "latent_reg_s",
        "latent_reg_c",
        "image_adv",
        "gen_total",
        "critic_content_total",
        "critic_image_total",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.kl,
            self.rec,
            self.content_adv,
            self.latent_reg_s,
            self.latent_reg_c,
            self.image_adv,
            self.gen_total,
            self.critic_content_total,
            self.critic_image_total,
        ]
    }
}

/// Evaluate every loss of both paths for one batch without updating any
/// parameters. Critic scores on the generator side use the same (current)
/// critic weights as the critic losses.
pub fn total_losses<E: Elem>(
    nets: &Networks<E>,
    data: &BatchData<E>,
    w: &LossWeights,
) -> LossBreakdown {
    let mut tape = Tape::<E>::new();
    let bounds = GenBounds {
        ec: nets.content_encoder.params.bind_frozen(&mut tape),
        es: nets.style_encoder.params.bind_frozen(&mut tape),
        g: nets.generator.params.bind_frozen(&mut tape),
    };
    let fwd = forward_two_paths(&mut tape, nets, &bounds, data);
    let mut off = ShapeTrace::off();

    // Critic losses on detached inputs.
    let dc_bd = nets.content_critic.params.bind_frozen(&mut tape);
    let dx_bd = nets.image_critic.params.bind_frozen(&mut tape);
    let c_det = tape.detach(fwd.content);
    let x_fake_det = tape.detach(fwd.x_fake);
    let dcs_true = nets
        .content_critic
        .forward(&mut tape, &dc_bd, c_det, fwd.d_true, &mut off);
    let dcs_mis = nets
        .content_critic
        .forward(&mut tape, &dc_bd, c_det, fwd.d_mis, &mut off);
    let critic_content = loss_content_adv(&mut tape, dcs_true, dcs_mis, AdvSide::Critic);
    let dxs_real_true =
        nets.image_critic
            .forward(&mut tape, &dx_bd, fwd.x_real, fwd.d_true, &mut off);
    let dxs_real_mis =
        nets.image_critic
            .forward(&mut tape, &dx_bd, fwd.x_real, fwd.d_mis, &mut off);
    let dxs_fake =
        nets.image_critic
            .forward(&mut tape, &dx_bd, x_fake_det, fwd.d_mis, &mut off);
    let critic_image =
        loss_image_adv_critic(&mut tape, &dxs_real_true, &dxs_real_mis, &dxs_fake);

    // Generator-side scores on live inputs.
    let gdc_true = nets
        .content_critic
        .forward(&mut tape, &dc_bd, fwd.content, fwd.d_true, &mut off);
    let gdc_mis = nets
        .content_critic
        .forward(&mut tape, &dc_bd, fwd.content, fwd.d_mis, &mut off);
    let gdx_fake =
        nets.image_critic
            .forward(&mut tape, &dx_bd, fwd.x_fake, fwd.d_mis, &mut off);
    let terms = gen_terms(&mut tape, &fwd, gdc_true, gdc_mis, &gdx_fake, w);

    LossBreakdown {
        kl: tape.scalar_value(terms.kl).to_f64(),
        rec: tape.scalar_value(terms.rec).to_f64(),
        content_adv: tape.scalar_value(terms.content_adv).to_f64(),
        latent_reg_s: tape.scalar_value(terms.latent_reg_s).to_f64(),
        latent_reg_c: tape.scalar_value(terms.latent_reg_c).to_f64(),
        image_adv: tape.scalar_value(terms.image_adv).to_f64(),
        gen_total: tape.scalar_value(terms.total).to_f64(),
        critic_content_total: tape.scalar_value(critic_content).to_f64(),
        critic_image_total: tape.scalar_value(critic_image).to_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn scores<E: Elem>(tape: &mut Tape<E>, shape: &[usize], v: f64) -> Tx {
        tape.constant(ArrayD::from_elem(IxDyn(shape), E::from_f64(v)))
    }

    #[test]
    fn cvae_zero_at_perfect_reconstruction_and_prior() {
        let mut tape = Tape::<f64>::new();
        let x = scores(&mut tape, &[1, 3, 4, 4], 0.3);
        let mu = scores(&mut tape, &[1, 4], 0.0);
        let lv = scores(&mut tape, &[1, 4], 0.0);
        let (total, _, _) = loss_cvae(&mut tape, x, x, mu, lv, &LossWeights::default());
        assert_eq!(tape.scalar_value(total), 0.0);
    }

    #[test]
    fn cvae_unit_l1_with_weight_ten() {
        let mut tape = Tape::<f64>::new();
        let x = scores(&mut tape, &[1, 3, 4, 4], 0.0);
        let xr = scores(&mut tape, &[1, 3, 4, 4], 1.0);
        let mu = scores(&mut tape, &[1, 4], 0.0);
        let lv = scores(&mut tape, &[1, 4], 0.0);
        let (total, _, _) = loss_cvae(&mut tape, x, xr, mu, lv, &LossWeights::default());
        assert!((tape.scalar_value(total) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cvae_kl_component() {
        // lambda_kl = 0.01, KL((mu=1, logvar=0)) = 0.5 -> 0.005
        let mut tape = Tape::<f64>::new();
        let x = scores(&mut tape, &[1, 3, 2, 2], 0.5);
        let mu = scores(&mut tape, &[1, 1], 1.0);
        let lv = scores(&mut tape, &[1, 1], 0.0);
        let (total, kl, _) = loss_cvae(&mut tape, x, x, mu, lv, &LossWeights::default());
        assert!((tape.scalar_value(kl) - 0.005).abs() < 1e-12);
        assert!((tape.scalar_value(total) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn content_adv_optimum_and_worst_case() {
        let mut tape = Tape::<f64>::new();
        let st = scores(&mut tape, &[1, 1, 2, 2], 1.0);
        let sm = scores(&mut tape, &[1, 1, 2, 2], 0.0);
        let critic = loss_content_adv(&mut tape, st, sm, AdvSide::Critic);
        assert_eq!(tape.scalar_value(critic), 0.0);
        let enc = loss_content_adv(&mut tape, st, sm, AdvSide::Encoder);
        assert_eq!(tape.scalar_value(enc), 2.0);
    }

    #[test]
    fn content_adv_half_scores() {
        let mut tape = Tape::<f64>::new();
        let st = scores(&mut tape, &[1, 1, 3, 3], 0.5);
        let sm = scores(&mut tape, &[1, 1, 3, 3], 0.5);
        let critic = loss_content_adv(&mut tape, st, sm, AdvSide::Critic);
        assert!((tape.scalar_value(critic) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn latent_regression_values() {
        let mut tape = Tape::<f64>::new();
        let s = scores(&mut tape, &[1, 8], 0.0);
        let s_rec = scores(&mut tape, &[1, 8], 1.0);
        let c = scores(&mut tape, &[1, 4, 2, 2], 0.7);
        let (total, _, _) = loss_latent_regression(&mut tape, s, s_rec, c, c, 1.0);
        assert!((tape.scalar_value(total) - 1.0).abs() < 1e-12);

        let s_half = scores(&mut tape, &[1, 8], 0.5);
        let c_half = scores(&mut tape, &[1, 4, 2, 2], 0.2);
        let (total, _, _) = loss_latent_regression(&mut tape, s, s_half, c, c_half, 1.0);
        assert!((tape.scalar_value(total) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_critic_margins_satisfied() {
        let mut tape = Tape::<f64>::new();
        let rt = vec![scores(&mut tape, &[1, 1, 2, 2], 2.0)];
        let rm = vec![scores(&mut tape, &[1, 1, 2, 2], -2.0)];
        let fk = vec![scores(&mut tape, &[1, 1, 2, 2], -2.0)];
        let l = loss_image_adv_critic(&mut tape, &rt, &rm, &fk);
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn hinge_critic_all_zero_scores() {
        let mut tape = Tape::<f64>::new();
        let rt = vec![scores(&mut tape, &[1, 1, 2, 2], 0.0)];
        let rm = vec![scores(&mut tape, &[1, 1, 2, 2], 0.0)];
        let fk = vec![scores(&mut tape, &[1, 1, 2, 2], 0.0)];
        let l = loss_image_adv_critic(&mut tape, &rt, &rm, &fk);
        assert!((tape.scalar_value(l) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_critic_partial_margin() {
        let mut tape = Tape::<f64>::new();
        let rt = vec![scores(&mut tape, &[1, 1, 2, 2], 0.5)];
        let rm = vec![scores(&mut tape, &[1, 1, 2, 2], -1.0)];
        let fk = vec![scores(&mut tape, &[1, 1, 2, 2], -1.0)];
        let l = loss_image_adv_critic(&mut tape, &rt, &rm, &fk);
        assert!((tape.scalar_value(l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gen_hinge_values() {
        let mut tape = Tape::<f64>::new();
        let z = vec![scores(&mut tape, &[1, 1, 2, 2], 0.0)];
        let lz = loss_image_adv_gen(&mut tape, &z);
        assert_eq!(tape.scalar_value(lz), 0.0);
        let th = vec![scores(&mut tape, &[1, 1, 2, 2], 3.0)];
        let lt = loss_image_adv_gen(&mut tape, &th);
        assert_eq!(tape.scalar_value(lt), -3.0);
        let a = scores(&mut tape, &[1, 1, 2, 2], 1.0);
        let b = scores(&mut tape, &[1, 1, 4, 4], 2.0);
        let l = loss_image_adv_gen(&mut tape, &[a, b]);
        assert!((tape.scalar_value(l) + 1.5).abs() < 1e-12);
    }

    #[test]
    fn kl_term_matches_closed_form() {
        use crate::latent::{kl_standard_normal, StyleDistribution};
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.3, -1.2, 0.5]).unwrap(),
        );
        let lv = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.1, -0.4, 0.0]).unwrap(),
        );
        let k = kl_term(&mut tape, mu, lv);
        let reference = kl_standard_normal(
            &StyleDistribution::new(vec![0.3, -1.2, 0.5], vec![0.1, -0.4, 0.0]).unwrap(),
        );
        assert!((tape.scalar_value(k) - reference).abs() < 1e-6);
    }
}
