//! Pairwise preference-alignment losses over log-probability bundles.
//!
//! Every loss is a function of four log-probabilities (policy and reference,
//! chosen and rejected) plus, for the softmax variant, extra negatives.
//! Gradients are taken with respect to the policy log-probabilities only;
//! the reference terms are constants.
//!
//! With `m = β(lp_w − ref_w) − β(lp_l − ref_l)`:
//!
//! | kind   | loss |
//! |--------|------|
//! | DPO    | `−ln σ(m)` |
//! | IPO    | `(m/β − 1/(2τ))²` |
//! | cDPO   | `−(1−ε) ln σ(m) − ε ln σ(−m)` |
//! | rDPO   | `[−(1−ε) ln σ(m) + ε ln σ(−m)] / (1−2ε)` |
//! | RPO    | `−ln σ(m) − α exp(lp_w)/|y_w|` |
//! | CPO    | `−ln σ(β lp_w − β lp_l) − λ lp_w` |
//! | SimPO  | `−ln σ(β lp_w/|y_w| − β lp_l/|y_l| − γ)` |
//! | S-DPO  | `−ln σ(−ln Σ_j exp(−m_j))` over all negatives `j` |
//! | RosePO | cDPO with the per-pair flip rate `ε_φ` |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    Dpo,
    Ipo,
    CDpo,
    RDpo,
    Rpo,
    Cpo,
    SimPo,
    SDpo,
    RosePo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 9] = [
        ObjectiveKind::Dpo,
        ObjectiveKind::Ipo,
        ObjectiveKind::CDpo,
        ObjectiveKind::RDpo,
        ObjectiveKind::Rpo,
        ObjectiveKind::Cpo,
        ObjectiveKind::SimPo,
        ObjectiveKind::SDpo,
        ObjectiveKind::RosePo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Dpo => "dpo",
            ObjectiveKind::Ipo => "ipo",
            ObjectiveKind::CDpo => "cdpo",
            ObjectiveKind::RDpo => "rdpo",
            ObjectiveKind::Rpo => "rpo",
            ObjectiveKind::Cpo => "cpo",
            ObjectiveKind::SimPo => "simpo",
            ObjectiveKind::SDpo => "sdpo",
            ObjectiveKind::RosePo => "rosepo",
        }
    }

    /// Whether the loss reads the reference model at all.
    pub fn uses_reference(self) -> bool {
        !matches!(self, ObjectiveKind::Cpo | ObjectiveKind::SimPo)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}`")))
    }
}

/// The search grid for β.
pub const BETA_GRID: [f64; 5] = [0.1, 0.2, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    /// Fixed flip rate for cDPO and rDPO.
    pub epsilon: f64,
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Total negatives per pair for S-DPO (the rejected item plus extras).
    pub n_negatives: usize,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveConfig {
            kind,
            beta: 1.0,
            epsilon: 0.2,
            tau: 0.1,
            alpha: 0.2,
            lambda: 1.0,
            gamma: 1.0,
            n_negatives: 3,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        match self.kind {
            ObjectiveKind::CDpo | ObjectiveKind::RDpo if !(0.0..0.5).contains(&self.epsilon) => {
                bad(format!("epsilon must lie in [0, 0.5), got {}", self.epsilon))
            }
            ObjectiveKind::Ipo if self.tau <= 0.0 => bad(format!("tau must be > 0, got {}", self.tau)),
            ObjectiveKind::Rpo if self.alpha < 0.0 => bad(format!("alpha must be ≥ 0, got {}", self.alpha)),
            ObjectiveKind::Cpo if self.lambda < 0.0 => {
                bad(format!("lambda must be ≥ 0, got {}", self.lambda))
            }
            ObjectiveKind::SimPo if self.gamma < 0.0 => {
                bad(format!("gamma must be ≥ 0, got {}", self.gamma))
            }
            ObjectiveKind::SDpo if self.n_negatives < 1 => bad("n_negatives must be ≥ 1".into()),
            _ => Ok(()),
        }
    }
}

/// Policy and reference log-probabilities for one preference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbBundle {
    pub lp_w: f64,
    pub lp_l: f64,
    pub ref_lp_w: f64,
    pub ref_lp_l: f64,
    pub len_w: usize,
    pub len_l: usize,
    /// `(lp, ref_lp)` for negatives beyond the rejected item (S-DPO).
    pub extra_negatives: Vec<(f64, f64)>,
}

impl LogProbBundle {
    pub fn new(lp_w: f64, lp_l: f64, ref_lp_w: f64, ref_lp_l: f64) -> Self {
        LogProbBundle {
            lp_w,
            lp_l,
            ref_lp_w,
            ref_lp_l,
            len_w: 1,
            len_l: 1,
            extra_negatives: Vec::new(),
        }
    }

    /// Chosen and rejected exchanged.
    pub fn swapped(&self) -> Self {
        LogProbBundle {
            lp_w: self.lp_l,
            lp_l: self.lp_w,
            ref_lp_w: self.ref_lp_l,
            ref_lp_l: self.ref_lp_w,
            len_w: self.len_l,
            len_l: self.len_w,
            extra_negatives: self.extra_negatives.clone(),
        }
    }
}

/// Partial derivatives of a loss with respect to the policy log-probs.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrad {
    pub d_lp_w: f64,
    pub d_lp_l: f64,
    /// One entry per extra negative in the bundle; zero unless S-DPO uses it.
    pub d_extra: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x) = −softplus(−x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `β(lp_w − ref_w) − β(lp_l − ref_l)`.
pub fn margin(bundle: &LogProbBundle, beta: f64) -> f64 {
    beta * (bundle.lp_w - bundle.ref_lp_w) - beta * (bundle.lp_l - bundle.ref_lp_l)
}

fn smoothing_epsilon(config: &ObjectiveConfig, pair_epsilon: Option<f64>) -> Result<f64> {
    match config.kind {
        ObjectiveKind::RosePo => {
            let eps = pair_epsilon
                .ok_or_else(|| Error::Config("RosePO needs a per-pair epsilon".into()))?;
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::Config(format!("pair epsilon {eps} outside [0, 1]")));
            }
            Ok(eps)
        }
        ObjectiveKind::RDpo if config.epsilon >= 0.5 => Err(Error::Config(format!(
            "rDPO needs epsilon < 0.5, got {}",
            config.epsilon
        ))),
        _ => Ok(config.epsilon),
    }
}

/// Margins against every negative, rejected item first.
fn sdpo_margins(config: &ObjectiveConfig, b: &LogProbBundle) -> Result<Vec<f64>> {
    let want = config.n_negatives.saturating_sub(1);
    if b.extra_negatives.len() < want {
        return Err(Error::Config(format!(
            "S-DPO with {} negatives needs {want} extra negatives, bundle has {}",
            config.n_negatives,
            b.extra_negatives.len()
        )));
    }
    let dw = b.lp_w - b.ref_lp_w;
    let mut m = vec![config.beta * (dw - (b.lp_l - b.ref_lp_l))];
    m.extend(
        b.extra_negatives[..want]
            .iter()
            .map(|&(lp, r)| config.beta * (dw - (lp - r))),
    );
    Ok(m)
}

/// Loss value and its gradient in one pass.
pub fn loss_and_grad(
    config: &ObjectiveConfig,
    b: &LogProbBundle,
    pair_epsilon: Option<f64>,
) -> Result<(f64, BundleGrad)> {
    let beta = config.beta;
    let grad = |d_lp_w: f64, d_lp_l: f64| BundleGrad {
        d_lp_w,
        d_lp_l,
        d_extra: vec![0.0; b.extra_negatives.len()],
    };
    let out = match config.kind {
        ObjectiveKind::Dpo => {
            let m = margin(b, beta);
            let g = -sigmoid(-m);
            (softplus(-m), grad(g * beta, -g * beta))
        }
        ObjectiveKind::Ipo => {
            let r = (b.lp_w - b.ref_lp_w) - (b.lp_l - b.ref_lp_l) - 1.0 / (2.0 * config.tau);
            (r * r, grad(2.0 * r, -2.0 * r))
        }
        ObjectiveKind::CDpo | ObjectiveKind::RosePo => {
            let eps = smoothing_epsilon(config, pair_epsilon)?;
            let m = margin(b, beta);
            let loss = (1.0 - eps) * softplus(-m) + eps * softplus(m);
            let g = -(1.0 - eps) * sigmoid(-m) + eps * sigmoid(m);
            (loss, grad(g * beta, -g * beta))
        }
        ObjectiveKind::RDpo => {
            let eps = smoothing_epsilon(config, pair_epsilon)?;
            let m = margin(b, beta);
            let denom = 1.0 - 2.0 * eps;
            let loss = ((1.0 - eps) * softplus(-m) - eps * softplus(m)) / denom;
            let g = (-(1.0 - eps) * sigmoid(-m) - eps * sigmoid(m)) / denom;
            (loss, grad(g * beta, -g * beta))
        }
        ObjectiveKind::Rpo => {
            let m = margin(b, beta);
            let g = -sigmoid(-m);
            let nll = config.alpha * b.lp_w.exp() / b.len_w as f64;
            (softplus(-m) - nll, grad(g * beta - nll, -g * beta))
        }
        ObjectiveKind::Cpo => {
            let m = beta * b.lp_w - beta * b.lp_l;
            let g = -sigmoid(-m);
            (
                softplus(-m) - config.lambda * b.lp_w,
                grad(g * beta - config.lambda, -g * beta),
            )
        }
        ObjectiveKind::SimPo => {
            let x = beta * b.lp_w / b.len_w as f64 - beta * b.lp_l / b.len_l as f64 - config.gamma;
            let g = -sigmoid(-x);
            (softplus(-x), grad(g * beta / b.len_w as f64, -g * beta / b.len_l as f64))
        }
        ObjectiveKind::SDpo => {
            let m = sdpo_margins(config, b)?;
            let neg: Vec<f64> = m.iter().map(|x| -x).collect();
            let s = crate::policy::logsumexp(&neg);
            // dL/dS = σ(S); dS/dm_j = −w_j with w = softmax(−m).
            let ds = sigmoid(s);
            let w: Vec<f64> = neg.iter().map(|x| (x - s).exp()).collect();
            let d_lp_w = -ds * beta * w.iter().sum::<f64>();
            let d_neg: Vec<f64> = w.iter().map(|wj| ds * wj * beta).collect();
            let mut d_extra = d_neg[1..].to_vec();
            d_extra.resize(b.extra_negatives.len(), 0.0);
            (
                softplus(s),
                BundleGrad {
                    d_lp_w,
                    d_lp_l: d_neg[0],
                    d_extra,
                },
            )
        }
    };
    Ok(out)
}

pub fn loss(config: &ObjectiveConfig, bundle: &LogProbBundle, pair_epsilon: Option<f64>) -> Result<f64> {
    loss_and_grad(config, bundle, pair_epsilon).map(|(l, _)| l)
}

pub fn loss_grad(
    config: &ObjectiveConfig,
    bundle: &LogProbBundle,
    pair_epsilon: Option<f64>,
) -> Result<BundleGrad> {
    loss_and_grad(config, bundle, pair_epsilon).map(|(_, g)| g)
}

/// The margin minimising RosePO/cDPO at flip rate `eps`: `ln((1−ε)/ε)`.
pub fn smoothed_optimal_margin(eps: f64) -> f64 {
    ((1.0 - eps) / eps).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(kind: ObjectiveKind) -> ObjectiveConfig {
        ObjectiveConfig::new(kind)
    }

    fn bundle_with_margin(m: f64) -> LogProbBundle {
        LogProbBundle::new(-1.0 + m, -1.0, -1.0, -1.0)
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&LogProbBundle::new(-2.0, -3.0, -2.0, -3.0), 0.7), 0.0);
        assert_eq!(margin(&LogProbBundle::new(-1.0, -3.0, -2.0, -3.0), 1.0), 1.0);
        let b = LogProbBundle::new(-1.3, -2.1, -1.7, -1.9);
        assert!((margin(&b, 2.0) - 2.0 * margin(&b, 1.0)).abs() < 1e-15);
        assert!((margin(&b.swapped(), 1.0) + margin(&b, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        let ln2 = 2f64.ln();
        let zero = bundle_with_margin(0.0);
        assert!((loss(&cfg(ObjectiveKind::Dpo), &zero, None).unwrap() - ln2).abs() < 1e-15);
        let mut c = cfg(ObjectiveKind::CDpo);
        for eps in [0.0, 0.1, 0.3, 0.49] {
            c.epsilon = eps;
            assert!((loss(&c, &zero, None).unwrap() - ln2).abs() < 1e-15);
        }
        let one = bundle_with_margin(1.0);
        let dpo1 = loss(&cfg(ObjectiveKind::Dpo), &one, None).unwrap();
        assert!((dpo1 - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert!((dpo1 - 0.3133).abs() < 1e-4);
        let rose = loss(&cfg(ObjectiveKind::RosePo), &one, Some(0.0)).unwrap();
        assert_eq!(rose, dpo1);
    }

    #[test]
    fn grad_examples() {
        let g = loss_grad(&cfg(ObjectiveKind::Dpo), &bundle_with_margin(0.0), None).unwrap();
        assert_eq!(g.d_lp_w, -0.5);
        assert_eq!(g.d_lp_l, 0.5);
        let g = loss_grad(&cfg(ObjectiveKind::RosePo), &bundle_with_margin(0.0), Some(0.5)).unwrap();
        assert_eq!(g.d_lp_w, 0.0);
    }

    #[test]
    fn config_errors() {
        let mut c = cfg(ObjectiveKind::RDpo);
        c.epsilon = 0.5;
        assert!(loss(&c, &bundle_with_margin(0.3), None).is_err());
        assert!(c.validate().is_err());
        let c = cfg(ObjectiveKind::SDpo);
        assert!(loss(&c, &bundle_with_margin(0.3), None).is_err());
        assert!(loss(&cfg(ObjectiveKind::RosePo), &bundle_with_margin(0.3), None).is_err());
        assert!(ObjectiveConfig::new(ObjectiveKind::Dpo).with_beta(0.0).validate().is_err());
        assert_eq!("S-DPO".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::SDpo);
        assert_eq!("rosepo".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::RosePo);
        assert!("kto".parse::<ObjectiveKind>().is_err());
    }

    #[test]
    fn sdpo_single_negative_is_dpo() {
        let mut c = cfg(ObjectiveKind::SDpo);
        c.n_negatives = 1;
        for m in [-3.0, -0.2, 0.0, 0.4, 5.0] {
            let b = bundle_with_margin(m);
            let s = loss(&c, &b, None).unwrap();
            let d = loss(&cfg(ObjectiveKind::Dpo), &b, None).unwrap();
            assert!((s - d).abs() < 1e-12, "{s} vs {d}");
        }
    }

    #[test]
    fn losses_stay_finite_for_extreme_margins() {
        for kind in ObjectiveKind::ALL {
            let mut b = LogProbBundle::new(-1e-3, -800.0, -700.0, -1e-3);
            b.extra_negatives = vec![(-900.0, -1.0), (-1.0, -900.0)];
            let l = loss(&cfg(kind), &b, Some(0.2)).unwrap();
            assert!(l.is_finite(), "{kind}: {l}");
            let l = loss(&cfg(kind), &b.swapped(), Some(0.2)).unwrap();
            assert!(l.is_finite(), "{kind}: {l}");
        }
    }

    fn arb_bundle() -> impl Strategy<Value = LogProbBundle> {
        (
            -8.0f64..-1e-3,
            -8.0f64..-1e-3,
            -8.0f64..-1e-3,
            -8.0f64..-1e-3,
            proptest::collection::vec((-8.0f64..-1e-3, -8.0f64..-1e-3), 2),
        )
            .prop_map(|(a, b, c, d, extra)| {
                let mut x = LogProbBundle::new(a, b, c, d);
                x.extra_negatives = extra;
                x
            })
    }

    /// Golden-section search for the minimiser of a unimodal function.
    fn argmin(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - r * (hi - lo);
            let b = lo + r * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        (lo + hi) / 2.0
    }

    proptest! {
        // The smoothed losses are minimised at a finite margin, so strict
        // decrease holds below that point; DPO and rDPO decrease everywhere.
        #[test]
        fn smoothed_losses_decrease_in_margin(m in -20.0f64..20.0, dm in 1e-3f64..5.0, eps in 0.0f64..0.49) {
            for kind in [ObjectiveKind::Dpo, ObjectiveKind::CDpo, ObjectiveKind::RDpo, ObjectiveKind::RosePo] {
                let mut c = cfg(kind);
                c.epsilon = eps;
                let (lo_m, hi_m) = match kind {
                    ObjectiveKind::CDpo | ObjectiveKind::RosePo if eps > 0.0 => {
                        let top = smoothed_optimal_margin(eps);
                        let hi_m = m.min(top);
                        (hi_m - dm, hi_m)
                    }
                    _ => (m, m + dm),
                };
                let lo = loss(&c, &bundle_with_margin(lo_m), Some(eps)).unwrap();
                let hi = loss(&c, &bundle_with_margin(hi_m), Some(eps)).unwrap();
                prop_assert!(hi < lo, "{} not decreasing: {} -> {}", kind, lo, hi);
            }
        }

        #[test]
        fn reduction_identities(b in arb_bundle(), eps in 0.0f64..0.49, beta in 0.05f64..3.0) {
            let mut c = cfg(ObjectiveKind::CDpo).with_beta(beta);
            c.epsilon = eps;
            let rose = cfg(ObjectiveKind::RosePo).with_beta(beta);
            let a = loss(&rose, &b, Some(eps)).unwrap();
            prop_assert!((a - loss(&c, &b, None).unwrap()).abs() < 1e-12);
            c.epsilon = 0.0;
            let dpo = loss(&cfg(ObjectiveKind::Dpo).with_beta(beta), &b, None).unwrap();
            prop_assert!((loss(&c, &b, None).unwrap() - dpo).abs() < 1e-12);
            prop_assert!((loss(&rose, &b, Some(0.0)).unwrap() - dpo).abs() < 1e-12);
            let mut s = cfg(ObjectiveKind::SDpo).with_beta(beta);
            s.n_negatives = 1;
            prop_assert!((loss(&s, &b, None).unwrap() - dpo).abs() < 1e-12);
        }

        #[test]
        fn gradients_match_finite_differences(b in arb_bundle(), eps in 0.01f64..0.45, beta in 0.1f64..2.0) {
            let h = 1e-6;
            for kind in ObjectiveKind::ALL {
                let mut c = cfg(kind).with_beta(beta);
                c.epsilon = eps;
                let f = |x: &LogProbBundle| loss(&c, x, Some(eps)).unwrap();
                let g = loss_grad(&c, &b, Some(eps)).unwrap();
                let probe = |edit: &dyn Fn(&mut LogProbBundle, f64)| {
                    let mut up = b.clone();
                    edit(&mut up, h);
                    let mut down = b.clone();
                    edit(&mut down, -h);
                    (f(&up) - f(&down)) / (2.0 * h)
                };
                let fw = probe(&|x, d| x.lp_w += d);
                let fl = probe(&|x, d| x.lp_l += d);
                prop_assert!((g.d_lp_w - fw).abs() < 1e-6, "{} d_lp_w {} vs {}", kind, g.d_lp_w, fw);
                prop_assert!((g.d_lp_l - fl).abs() < 1e-6, "{} d_lp_l {} vs {}", kind, g.d_lp_l, fl);
                for j in 0..b.extra_negatives.len() {
                    let fe = probe(&|x, d| x.extra_negatives[j].0 += d);
                    prop_assert!((g.d_extra[j] - fe).abs() < 1e-6, "{} extra {} {} vs {}", kind, j, g.d_extra[j], fe);
                }
                // Reference terms are constants.
                prop_assert_eq!(g.d_extra.len(), b.extra_negatives.len());
            }
        }

        #[test]
        fn rosepo_minimiser_matches_closed_form(eps in 0.02f64..0.98, beta in 0.2f64..2.0) {
            let c = cfg(ObjectiveKind::RosePo).with_beta(beta);
            let f = |m: f64| loss(&c, &bundle_with_margin(m / beta), Some(eps)).unwrap();
            let m_star = argmin(f, -30.0, 30.0);
            prop_assert!((m_star - smoothed_optimal_margin(eps)).abs() < 1e-5, "{} vs {}", m_star, smoothed_optimal_margin(eps));
            prop_assert!((sigmoid(m_star) - (1.0 - eps)).abs() < 1e-6);
        }

        #[test]
        fn rosepo_label_flip_symmetry(lw in -6.0f64..0.0, ll in -6.0f64..0.0, rw in -6.0f64..0.0, rl in -6.0f64..0.0, eps in 0.0f64..1.0) {
            let b = LogProbBundle::new(lw, ll, rw, rl);
            let c = cfg(ObjectiveKind::RosePo);
            let a = loss(&c, &b, Some(eps)).unwrap();
            let s = loss(&c, &b.swapped(), Some(1.0 - eps)).unwrap();
            prop_assert!((a - s).abs() < 1e-12);
        }
    }
}
