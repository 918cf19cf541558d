//! Layer-by-layer shape contracts for all five networks, and a programmatic
//! audit that traces a real forward pass against them.

use super::{Networks, ShapeTrace};
use crate::autodiff::Tape;
use crate::error::{ensure_contract, Result};
use crate::latent::CONTENT_CHANNELS;
use ndarray::{ArrayD, IxDyn};

/// Expected per-layer output shapes for the content encoder at `h x w`.
pub fn content_encoder_shapes(h: usize, w: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("stem0".into(), vec![64, h, w]),
        ("stem1".into(), vec![128, h / 2, w / 2]),
        ("stem2".into(), vec![256, h / 4, w / 4]),
        ("rb0".into(), vec![256, h / 4, w / 4]),
        ("rb1".into(), vec![256, h / 4, w / 4]),
        ("rb2".into(), vec![256, h / 4, w / 4]),
        ("rb3".into(), vec![256, h / 4, w / 4]),
    ]
}

/// Expected per-layer output shapes for the style encoder.
pub fn style_encoder_shapes(h: usize, w: usize, n_s: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("stem".into(), vec![64, h / 2, w / 2]),
        ("down0".into(), vec![128, h / 4, w / 4]),
        ("down1".into(), vec![256, h / 8, w / 8]),
        ("down2".into(), vec![256, h / 16, w / 16]),
        ("gap".into(), vec![256]),
        ("mu".into(), vec![n_s]),
        ("logvar".into(), vec![n_s]),
    ]
}

/// Expected per-layer output shapes for the generator decoding an
/// `[256, h/4, w/4]` content map back to `h x w`.
pub fn generator_shapes(h: usize, w: usize) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<(String, Vec<usize>)> = (0..6)
        .map(|i| (format!("rb{i}"), vec![256, h / 4, w / 4]))
        .collect();
    v.push(("up1".into(), vec![128, h / 2, w / 2]));
    v.push(("up2".into(), vec![64, h, w]));
    v.push(("out".into(), vec![3, h, w]));
    v
}

/// Expected shapes for one image-critic scale consuming `h x w` input.
pub fn critic_scale_shapes(prefix: &str, h: usize, w: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}stem"), vec![64, h / 2, w / 2]),
        (format!("{prefix}down0"), vec![128, h / 4, w / 4]),
        (format!("{prefix}down1"), vec![256, h / 8, w / 8]),
        (format!("{prefix}out"), vec![1, h / 8, w / 8]),
    ]
}

/// Expected shapes for the multi-scale image critic.
pub fn image_critic_shapes(h: usize, w: usize, scales: usize) -> Vec<(String, Vec<usize>)> {
    (0..scales)
        .flat_map(|i| critic_scale_shapes(&format!("scale{i}."), h >> i, w >> i))
        .collect()
}

/// Expected shapes for the content critic over an `[256, hc, wc]` map.
pub fn content_critic_shapes(hc: usize, wc: usize) -> Vec<(String, Vec<usize>)> {
    critic_scale_shapes("", hc, wc)
}

/// One audited network: name plus expected/actual shape rows.
#[derive(Debug)]
pub struct AuditReport {
    pub network: String,
    pub rows: Vec<(String, Vec<usize>, Vec<usize>)>,
    pub mismatches: usize,
}

fn compare(
    network: &str,
    expected: &[(String, Vec<usize>)],
    actual: &[(String, Vec<usize>)],
) -> AuditReport {
    let mut rows = Vec::new();
    let mut mismatches = 0;
    let n = expected.len().max(actual.len());
    for i in 0..n {
        let (en, ev) = expected
            .get(i)
            .cloned()
            .unwrap_or_else(|| ("<missing>".into(), vec![]));
        let (an, av) = actual
            .get(i)
            .cloned()
            .unwrap_or_else(|| ("<missing>".into(), vec![]));
        if en != an || ev != av {
            mismatches += 1;
        }
        rows.push((format!("{en}/{an}"), ev, av));
    }
    AuditReport {
        network: network.to_string(),
        rows,
        mismatches,
    }
}

/// Trace every network on a real forward pass at `h x w` input and compare
/// with the table shapes. Returns one report per network.
pub fn audit_networks(nets: &Networks<f32>, h: usize, w: usize) -> Result<Vec<AuditReport>> {
    ensure_contract!(
        h % 16 == 0 && w % 16 == 0,
        "audit input must be divisible by 16"
    );
    let mut reports = Vec::new();
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, h, w])));
    let d = tape.constant(ArrayD::zeros(IxDyn(&[1, nets.n_d])));
    let cond = tape.constant(ArrayD::zeros(IxDyn(&[1, nets.n_s + nets.n_d])));

    let mut trace = ShapeTrace::on();
    let bd = nets.content_encoder.params.bind_frozen(&mut tape);
    let content = nets.content_encoder.forward(&mut tape, &bd, x, &mut trace);
    reports.push(compare(
        "content_encoder",
        &content_encoder_shapes(h, w),
        &trace.entries,
    ));

    let mut trace = ShapeTrace::on();
    let bd = nets.style_encoder.params.bind_frozen(&mut tape);
    nets.style_encoder.forward(&mut tape, &bd, x, &mut trace);
    reports.push(compare(
        "style_encoder",
        &style_encoder_shapes(h, w, nets.n_s),
        &trace.entries,
    ));

    let mut trace = ShapeTrace::on();
    let bd = nets.generator.params.bind_frozen(&mut tape);
    nets.generator
        .forward(&mut tape, &bd, content, cond, &mut trace);
    reports.push(compare("generator", &generator_shapes(h, w), &trace.entries));

    let mut trace = ShapeTrace::on();
    let bd = nets.content_critic.params.bind_frozen(&mut tape);
    nets.content_critic
        .forward(&mut tape, &bd, content, d, &mut trace);
    reports.push(compare(
        "content_critic",
        &content_critic_shapes(h / 4, w / 4),
        &trace.entries,
    ));

    let mut trace = ShapeTrace::on();
    let bd = nets.image_critic.params.bind_frozen(&mut tape);
    nets.image_critic.forward(&mut tape, &bd, x, d, &mut trace);
    reports.push(compare(
        "image_critic",
        &image_critic_shapes(h, w, nets.image_critic.num_scales()),
        &trace.entries,
    ));

    // The content code type invariant must hold as well.
    ensure_contract!(
        tape.shape(content)[1] == CONTENT_CHANNELS,
        "content map channel invariant broken"
    );
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tables_at_256() {
        // Hard-coded rows from the architecture tables at 256x256.
        let ec = content_encoder_shapes(256, 256);
        assert_eq!(ec[0].1, vec![64, 256, 256]);
        assert_eq!(ec[1].1, vec![128, 128, 128]);
        assert_eq!(ec[2].1, vec![256, 64, 64]);
        assert_eq!(ec[6].1, vec![256, 64, 64]);

        let es = style_encoder_shapes(256, 256, 8);
        assert_eq!(es[0].1, vec![64, 128, 128]);
        assert_eq!(es[1].1, vec![128, 64, 64]);
        assert_eq!(es[2].1, vec![256, 32, 32]);
        assert_eq!(es[3].1, vec![256, 16, 16]);
        assert_eq!(es[4].1, vec![256]);
        assert_eq!(es[5].1, vec![8]);

        let g = generator_shapes(256, 256);
        assert_eq!(g[0].1, vec![256, 64, 64]);
        assert_eq!(g[6].1, vec![128, 128, 128]);
        assert_eq!(g[7].1, vec![64, 256, 256]);
        assert_eq!(g[8].1, vec![3, 256, 256]);

        // Image critic at two scales: maps (1,32,32) and (1,16,16).
        let dx = image_critic_shapes(256, 256, 2);
        assert_eq!(dx[3].1, vec![1, 32, 32]);
        assert_eq!(dx[7].1, vec![1, 16, 16]);

        // Content critic on the 64x64 content map: score map (1,8,8).
        let dc = content_critic_shapes(64, 64);
        assert_eq!(dc[3].1, vec![1, 8, 8]);
    }

    #[test]
    fn audit_small_input_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nets = Networks::<f32>::new(8, 2, 2, &mut rng);
        let reports = audit_networks(&nets, 64, 64).unwrap();
        for r in &reports {
            assert_eq!(r.mismatches, 0, "{}: {:?}", r.network, r.rows);
        }
    }
}
