//! The three disentangled representations — content, style, domain — and
//! the sampling / regularization math defined on them.

use crate::error::{contract, ensure_contract, Error, Result};
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::Write as _;

/// Channel count of every content code.
pub const CONTENT_CHANNELS: usize = 256;

/// Spatial feature map carrying domain-free structure. Layout is
/// `[256, h/4, w/4]` for an `h x w` input.
#[derive(Debug, Clone)]
pub struct ContentCode {
    data: Array3<f32>,
}

impl ContentCode {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, _, _) = data.dim();
        ensure_contract!(
            c == CONTENT_CHANNELS,
            "content code must have {CONTENT_CHANNELS} channels, got {c}"
        );
        ensure_contract!(
            data.iter().all(|v| v.is_finite()),
            "content code contains non-finite entries"
        );
        Ok(ContentCode { data })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    /// `(channels, height, width)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Diagonal Gaussian over style space: `mu` and `logvar`, both length `n_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleDistribution {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
}

impl StyleDistribution {
    pub fn new(mu: Vec<f32>, logvar: Vec<f32>) -> Result<Self> {
        ensure_contract!(!mu.is_empty(), "style distribution must have n_s > 0");
        ensure_contract!(
            mu.len() == logvar.len(),
            "mu and logvar lengths differ: {} vs {}",
            mu.len(),
            logvar.len()
        );
        ensure_contract!(
            mu.iter().chain(logvar.iter()).all(|v| v.is_finite()),
            "style distribution contains non-finite entries"
        );
        Ok(StyleDistribution { mu, logvar })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// A sampled style vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode(pub Vec<f32>);

impl StyleCode {
    pub fn new(s: Vec<f32>) -> Result<Self> {
        ensure_contract!(
            s.iter().all(|v| v.is_finite()),
            "style code contains non-finite entries"
        );
        Ok(StyleCode(s))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DomainKind {
    DiscreteOneHot,
    Continuous,
}

/// Discrete one-hot or continuous vector identifying a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLabel {
    pub d: Vec<f32>,
    pub kind: DomainKind,
}

impl DomainLabel {
    pub fn one_hot(index: usize, n: usize) -> Result<Self> {
        ensure_contract!(index < n, "one-hot index {index} out of range {n}");
        let mut d = vec![0.0; n];
        d[index] = 1.0;
        Ok(DomainLabel {
            d,
            kind: DomainKind::DiscreteOneHot,
        })
    }

    pub fn continuous(d: Vec<f32>) -> Result<Self> {
        ensure_contract!(
            d.iter().all(|v| v.is_finite()),
            "continuous domain label contains non-finite entries"
        );
        Ok(DomainLabel {
            d,
            kind: DomainKind::Continuous,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DomainKind::DiscreteOneHot => {
                let ones = self.d.iter().filter(|&&v| v == 1.0).count();
                let zeros = self.d.iter().filter(|&&v| v == 0.0).count();
                ensure_contract!(
                    ones == 1 && ones + zeros == self.d.len(),
                    "one-hot label must have exactly one 1 and zeros elsewhere"
                );
            }
            DomainKind::Continuous => {
                ensure_contract!(
                    self.d.iter().all(|v| v.is_finite()),
                    "continuous label contains non-finite entries"
                );
            }
        }
        Ok(())
    }

    /// Index of the hot entry; only meaningful for discrete labels.
    pub fn index(&self) -> Option<usize> {
        match self.kind {
            DomainKind::DiscreteOneHot => self.d.iter().position(|&v| v == 1.0),
            DomainKind::Continuous => None,
        }
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }
}

/// `s[i] = mu[i] + exp(0.5 * logvar[i]) * noise[i]`.
pub fn reparameterize(dist: &StyleDistribution, noise: &[f32]) -> Result<StyleCode> {
    ensure_contract!(
        noise.len() == dist.len(),
        "noise length {} does not match n_s {}",
        noise.len(),
        dist.len()
    );
    let s = dist
        .mu
        .iter()
        .zip(&dist.logvar)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    StyleCode::new(s)
}

/// Draw a style from the standard normal prior.
pub fn sample_prior<R: Rng>(n_s: usize, rng: &mut R) -> Result<StyleCode> {
    ensure_contract!(n_s > 0, "n_s must be positive, got {n_s}");
    let s = (0..n_s)
        .map(|_| StandardNormal.sample(rng))
        .collect::<Vec<f32>>();
    StyleCode::new(s)
}

/// Closed-form KL divergence to N(0, I):
/// `0.5 * sum_i(mu_i^2 + exp(logvar_i) - 1 - logvar_i)`.
///
/// Accumulated in f64; always non-negative.
pub fn kl_standard_normal(dist: &StyleDistribution) -> f64 {
    dist.mu
        .iter()
        .zip(&dist.logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum::<f64>()
        .max(0.0)
}

/// Deterministic mapping from domain names to labels — a plain dictionary,
/// serialized as one `name<TAB>value` line per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDictionary {
    names: Vec<String>,
    vectors: Vec<Vec<f32>>,
    kind: DomainKind,
}

impl DomainDictionary {
    /// Discrete dictionary over the given names, one-hot in listed order.
    pub fn discrete(names: Vec<String>) -> Result<Self> {
        ensure_contract!(!names.is_empty(), "domain dictionary must not be empty");
        let n = names.len();
        let vectors = (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                v
            })
            .collect();
        Ok(DomainDictionary {
            names,
            vectors,
            kind: DomainKind::DiscreteOneHot,
        })
    }

    /// Continuous dictionary: names paired with opaque vectors.
    pub fn continuous(entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        ensure_contract!(!entries.is_empty(), "domain dictionary must not be empty");
        let dim = entries[0].1.len();
        ensure_contract!(dim > 0, "continuous labels must be non-empty");
        ensure_contract!(
            entries.iter().all(|(_, v)| v.len() == dim),
            "all continuous labels must share one dimension"
        );
        let (names, vectors) = entries.into_iter().unzip();
        Ok(DomainDictionary {
            names,
            vectors,
            kind: DomainKind::Continuous,
        })
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Label dimensionality `n_d`.
    pub fn label_dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Deterministic lookup; repeated calls return identical labels.
    pub fn lookup(&self, key: &str) -> Result<DomainLabel> {
        match self.names.iter().position(|n| n == key) {
            Some(i) => self.label_at(i),
            None => Err(Error::UnknownDomain {
                key: key.to_string(),
                known: self.names.clone(),
            }),
        }
    }

    pub fn label_at(&self, index: usize) -> Result<DomainLabel> {
        ensure_contract!(index < self.len(), "domain index {index} out of range");
        Ok(DomainLabel {
            d: self.vectors[index].clone(),
            kind: self.kind,
        })
    }

    /// Index of the domain whose vector equals `label`.
    pub fn index_of(&self, label: &DomainLabel) -> Option<usize> {
        self.vectors.iter().position(|v| v == &label.d)
    }

    /// Serialize as `name<TAB>index` (discrete) or `name<TAB>v0 v1 ...`
    /// (continuous) lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, name) in self.names.iter().enumerate() {
            match self.kind {
                DomainKind::DiscreteOneHot => {
                    let _ = writeln!(out, "{name}\t{i}");
                }
                DomainKind::Continuous => {
                    let vec = self.vectors[i]
                        .iter()
                        .map(|v| format!("{v}"))
                        .collect::<Vec<_>>()
                        .join(" ");
                    let _ = writeln!(out, "{name}\t{vec}");
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut raw: Vec<Vec<f32>> = Vec::new();
        let mut discrete = true;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("domain dictionary line {} lacks a tab", lineno + 1))
            })?;
            let vals: Vec<f32> = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<f32>().map_err(|_| {
                        Error::Config(format!(
                            "domain dictionary line {}: bad number {t:?}",
                            lineno + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != 1 || vals[0].fract() != 0.0 {
                discrete = false;
            }
            names.push(name.to_string());
            raw.push(vals);
        }
        ensure_contract!(!names.is_empty(), "domain dictionary is empty");
        if discrete {
            // Values are indices; verify they are 0..n in order.
            for (i, v) in raw.iter().enumerate() {
                if v[0] as usize != i {
                    return DomainDictionary::continuous(
                        names.into_iter().zip(raw).collect(),
                    );
                }
            }
            DomainDictionary::discrete(names)
        } else {
            DomainDictionary::continuous(names.into_iter().zip(raw).collect())
        }
    }
}

/// Draw a domain label different from `true_label`.
///
/// Discrete: uniform over the other `N - 1` labels of the dictionary.
/// Continuous: uniform over the distinct other labels in `batch_labels`.
pub fn sample_mismatched_domain<R: Rng>(
    true_label: &DomainLabel,
    dict: &DomainDictionary,
    batch_labels: &[DomainLabel],
    rng: &mut R,
) -> Result<DomainLabel> {
    match true_label.kind {
        DomainKind::DiscreteOneHot => {
            let n = dict.len();
            ensure_contract!(
                n >= 2,
                "mismatch sampling needs at least 2 domains, got {n}"
            );
            let true_idx = dict
                .index_of(true_label)
                .ok_or_else(|| contract("true label not present in dictionary"))?;
            let mut pick = rng.random_range(0..n - 1);
            if pick >= true_idx {
                pick += 1;
            }
            dict.label_at(pick)
        }
        DomainKind::Continuous => {
            let others: Vec<&DomainLabel> = batch_labels
                .iter()
                .filter(|l| l.d != true_label.d)
                .collect();
            ensure_contract!(
                !others.is_empty(),
                "no distinct in-batch labels for continuous mismatch sampling"
            );
            let pick = rng.random_range(0..others.len());
            Ok(others[pick].clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reparameterize_identity_case() {
        let d = StyleDistribution::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
        let eps = [0.3, -1.2, 0.0, 2.5];
        let s = reparameterize(&d, &eps).unwrap();
        assert_eq!(s.0, eps.to_vec());
    }

    #[test]
    fn reparameterize_zero_noise_returns_mu() {
        let d = StyleDistribution::new(vec![1.0, 2.0], vec![0.0, 0.0]).unwrap();
        let s = reparameterize(&d, &[0.0, 0.0]).unwrap();
        assert_eq!(s.0, vec![1.0, 2.0]);
    }

    #[test]
    fn reparameterize_scales_by_exp_half_logvar() {
        // exp(0.5 * ln 4) = 2
        let n = 3;
        let d = StyleDistribution::new(vec![0.0; n], vec![4.0f32.ln(); n]).unwrap();
        let s = reparameterize(&d, &vec![1.0; n]).unwrap();
        for v in s.0 {
            assert!((v - 2.0).abs() < 1e-5, "expected 2.0, got {v}");
        }
    }

    #[test]
    fn reparameterize_dimension_mismatch_errors() {
        let d = StyleDistribution::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert!(reparameterize(&d, &[0.0; 3]).is_err());
    }

    #[test]
    fn sample_prior_shape_and_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_prior(8, &mut rng).unwrap();
        assert_eq!(s.len(), 8);
        assert!(sample_prior(0, &mut rng).is_err());
    }

    #[test]
    fn kl_zero_at_prior() {
        let d = StyleDistribution::new(vec![0.0; 5], vec![0.0; 5]).unwrap();
        assert_eq!(kl_standard_normal(&d), 0.0);
    }

    #[test]
    fn kl_closed_form_values() {
        let d = StyleDistribution::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_standard_normal(&d) - 0.5).abs() < 1e-9);
        let d = StyleDistribution::new(vec![0.0], vec![2.0f32.ln()]).unwrap();
        let expected = 0.5 * (2.0 - 1.0 - (2.0f64).ln());
        assert!((kl_standard_normal(&d) - expected).abs() < 1e-6);
    }

    #[test]
    fn domain_lookup_one_hot() {
        let dict =
            DomainDictionary::discrete(vec!["summer".into(), "winter".into()]).unwrap();
        assert_eq!(dict.lookup("summer").unwrap().d, vec![1.0, 0.0]);
        assert_eq!(dict.lookup("winter").unwrap().d, vec![0.0, 1.0]);
        let err = dict.lookup("autumn").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("summer") && msg.contains("winter"), "{msg}");
    }

    #[test]
    fn domain_dictionary_text_round_trip() {
        let dict =
            DomainDictionary::discrete(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let text = dict.to_text();
        let back = DomainDictionary::from_text(&text).unwrap();
        assert_eq!(dict, back);

        let cont = DomainDictionary::continuous(vec![
            ("x".into(), vec![0.25, -1.5]),
            ("y".into(), vec![0.5, 2.0]),
        ])
        .unwrap();
        let back = DomainDictionary::from_text(&cont.to_text()).unwrap();
        assert_eq!(cont, back);
    }

    #[test]
    fn mismatch_only_alternative() {
        let dict =
            DomainDictionary::discrete(vec!["summer".into(), "winter".into()]).unwrap();
        let truth = dict.lookup("summer").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..32 {
            let m = sample_mismatched_domain(&truth, &dict, &[], &mut rng).unwrap();
            assert_eq!(m.d, vec![0.0, 1.0]);
        }
    }

    #[test]
    fn mismatch_single_domain_errors() {
        let dict = DomainDictionary::discrete(vec!["only".into()]).unwrap();
        let truth = dict.lookup("only").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_mismatched_domain(&truth, &dict, &[], &mut rng).is_err());
    }

    #[test]
    fn mismatch_continuous_membership() {
        let labels: Vec<DomainLabel> = (0..4)
            .map(|i| DomainLabel::continuous(vec![i as f32, 1.0]).unwrap())
            .collect();
        let dict = DomainDictionary::continuous(
            (0..4).map(|i| (format!("d{i}"), vec![i as f32, 1.0])).collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..64 {
            let m =
                sample_mismatched_domain(&labels[0], &dict, &labels, &mut rng).unwrap();
            assert_ne!(m.d, labels[0].d);
            assert!(labels.iter().any(|l| l.d == m.d));
        }
    }

    #[test]
    fn content_code_channel_invariant() {
        let ok = Array3::<f32>::zeros((CONTENT_CHANNELS, 4, 4));
        assert!(ContentCode::new(ok).is_ok());
        let bad = Array3::<f32>::zeros((128, 4, 4));
        assert!(ContentCode::new(bad).is_err());
    }
}
