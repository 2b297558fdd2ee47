//! Training objectives: focal classification loss, the symmetric
//! stop-gradient KL divergence, and the two consistency regularizers.
//!
//! Reductions: focal and KL terms are means over `B·N`; the feature
//! consistency term sums squared differences per instance and averages
//! over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before
/// any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalConfig {
    pub alpha_t: f64,
    pub gamma_prime: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha_t: 0.25,
            gamma_prime: 2.0,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_t > 0.0 && self.alpha_t < 1.0) {
            return Err(Error::config("focal: alpha_t must lie in (0,1)"));
        }
        if !(self.gamma_prime >= 0.0) {
            return Err(Error::config("focal: gamma_prime must be >= 0"));
        }
        Ok(())
    }
}

fn clamp_probs<T: Scalar>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    g.clamp(p, T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP))
}

/// `1 - x`.
fn complement<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.neg(x)?;
    g.add_scalar(n, T::one())
}

/// Mean focal loss of `probs` against binary `labels` (both `[B,N]`).
pub fn focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &Tensor<T>,
    cfg: &FocalConfig,
) -> Result<Var> {
    cfg.validate()?;
    if g.shape(probs) != labels.shape() {
        return Err(Error::shape(format!(
            "focal: probs {:?} vs labels {:?}",
            g.shape(probs),
            labels.shape()
        )));
    }
    if labels
        .data()
        .iter()
        .any(|&l| l != T::zero() && l != T::one())
    {
        return Err(Error::Domain {
            op: "focal_loss",
            msg: "labels must be 0 or 1".into(),
        });
    }
    let alpha = T::lit(cfg.alpha_t);
    let alpha_t = labels.map(|l| {
        if l == T::one() {
            alpha
        } else {
            T::one() - alpha
        }
    });
    let neg_labels = labels.map(|l| T::one() - l);

    let p = clamp_probs(g, probs)?;
    let q = complement(g, p)?;
    let lv = g.constant(labels.clone());
    let nlv = g.constant(neg_labels);
    let a = g.mul(lv, p)?;
    let b = g.mul(nlv, q)?;
    let pt = g.add(a, b)?;
    let one_minus_pt = complement(g, pt)?;
    let modulator = g.pow(one_minus_pt, T::lit(cfg.gamma_prime))?;
    let log_pt = g.log(pt)?;
    let av = g.constant(alpha_t);
    let weighted = g.mul(av, modulator)?;
    let per_elem = g.mul(weighted, log_pt)?;
    let m = g.mean_all(per_elem)?;
    g.neg(m)
}

/// `KL(target ‖ pred)` between Bernoulli distributions, elementwise, with
/// `target` already detached.
fn bernoulli_kl<T: Scalar>(g: &mut Graph<T>, target: Var, pred: Var) -> Result<Var> {
    let t_c = complement(g, target)?;
    let p_c = complement(g, pred)?;
    let log_t = g.log(target)?;
    let log_p = g.log(pred)?;
    let log_tc = g.log(t_c)?;
    let log_pc = g.log(p_c)?;
    let d1 = g.sub(log_t, log_p)?;
    let d0 = g.sub(log_tc, log_pc)?;
    let a = g.mul(target, d1)?;
    let b = g.mul(t_c, d0)?;
    g.add(a, b)
}

/// `½·[KL(p1* ‖ p2) + KL(p2* ‖ p1)]` per Bernoulli coordinate, averaged
/// over `B·N`. Starred operands are stop-gradient, so `p2` receives
/// adjoints only from the first term and `p1` only from the second.
pub fn kld_sym<T: Scalar>(g: &mut Graph<T>, p1: Var, p2: Var) -> Result<Var> {
    if g.shape(p1) != g.shape(p2) {
        return Err(Error::shape(format!(
            "kld_sym: {:?} vs {:?}",
            g.shape(p1),
            g.shape(p2)
        )));
    }
    let a = clamp_probs(g, p1)?;
    let b = clamp_probs(g, p2)?;
    let a_star = g.detach(a);
    let b_star = g.detach(b);
    let k1 = bernoulli_kl(g, a_star, b)?;
    let k2 = bernoulli_kl(g, b_star, a)?;
    let s = g.add(k1, k2)?;
    let m = g.mean_all(s)?;
    g.mul_scalar(m, T::lit(0.5))
}

/// Predictive-distribution regularizer between stylized and clean
/// probabilities.
pub fn pdr_loss<T: Scalar>(g: &mut Graph<T>, p_s: Var, p: Var) -> Result<Var> {
    kld_sym(g, p_s, p)
}

/// How the squared feature differences of `L_ccr` are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcrReduction {
    /// Sum per instance, mean over the batch.
    #[default]
    InstanceSum,
    /// Mean over every element.
    ElementMean,
}

/// `‖F_s − F‖²_F` per instance, averaged over the leading (batch) axis.
pub fn content_consistency<T: Scalar>(g: &mut Graph<T>, f_s: Var, f: Var) -> Result<Var> {
    content_consistency_with(g, f_s, f, CcrReduction::InstanceSum)
}

pub fn content_consistency_with<T: Scalar>(
    g: &mut Graph<T>,
    f_s: Var,
    f: Var,
    reduction: CcrReduction,
) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if g.shape(f_s) != shape.as_slice() || shape.is_empty() {
        return Err(Error::shape(format!(
            "content_consistency: {:?} vs {:?}",
            g.shape(f_s),
            shape
        )));
    }
    let d = g.sub(f_s, f)?;
    let d2 = g.square(d)?;
    let s = g.sum_all(d2)?;
    let count = match reduction {
        CcrReduction::InstanceSum => shape[0],
        CcrReduction::ElementMean => shape.iter().product(),
    };
    g.mul_scalar(s, T::one() / T::lit(count as f64))
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_ccr: f64,
    pub l_pdr: f64,
    pub l_cons: f64,
    pub l_total: f64,
    pub l_phi: f64,
}

impl LossBundle {
    pub fn combine(l_cls: f64, l_ccr: f64, l_pdr: f64, l_phi: f64) -> Result<Self> {
        if ![l_cls, l_ccr, l_pdr, l_phi].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("loss bundle input".into()));
        }
        let l_cons = (l_ccr + l_pdr) / 2.0;
        Ok(Self {
            l_cls,
            l_ccr,
            l_pdr,
            l_cons,
            l_total: l_cls + l_cons,
            l_phi,
        })
    }

    /// Adds `other` into `self` field by field.
    pub fn accumulate(&mut self, other: &Self) {
        self.l_cls += other.l_cls;
        self.l_ccr += other.l_ccr;
        self.l_pdr += other.l_pdr;
        self.l_cons += other.l_cons;
        self.l_total += other.l_total;
        self.l_phi += other.l_phi;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            l_cls: self.l_cls * s,
            l_ccr: self.l_ccr * s,
            l_pdr: self.l_pdr * s,
            l_cons: self.l_cons * s,
            l_total: self.l_total * s,
            l_phi: self.l_phi * s,
        }
    }
}

/// Recorded `L_cons = (L_ccr + L_pdr) / 2` and `L_total = L_cls + L_cons`.
/// Absent terms count as zero.
pub fn combine_graph<T: Scalar>(
    g: &mut Graph<T>,
    l_cls: Var,
    l_ccr: Option<Var>,
    l_pdr: Option<Var>,
) -> Result<Var> {
    let half = T::lit(0.5);
    let cons = match (l_ccr, l_pdr) {
        (Some(a), Some(b)) => {
            let s = g.add(a, b)?;
            Some(g.mul_scalar(s, half)?)
        }
        (Some(a), None) | (None, Some(a)) => Some(g.mul_scalar(a, half)?),
        (None, None) => None,
    };
    match cons {
        Some(c) => g.add(l_cls, c),
        None => Ok(l_cls),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn focal_examples() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 1], &[0.5]));
        let l = focal_loss(&mut g, p, &t(&[1, 1], &[1.0]), &FocalConfig::default()).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 0.043321698784996576, epsilon = 1e-15);

        let p = g.constant(t(&[1, 1], &[1.0 - 1e-9]));
        let l = focal_loss(&mut g, p, &t(&[1, 1], &[1.0]), &FocalConfig::default()).unwrap();
        assert!(g.value(l).item() < 1e-12);

        let p = g.constant(t(&[1, 2], &[0.3, 0.6]));
        assert!(focal_loss(&mut g, p, &t(&[1, 2], &[0.5, 1.0]), &FocalConfig::default()).is_err());
        assert!(focal_loss(&mut g, p, &t(&[2, 1], &[0.0, 1.0]), &FocalConfig::default()).is_err());
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let probs = [0.1, 0.35, 0.8, 0.97, 0.5, 0.02];
        let labels = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let cfg = FocalConfig {
            alpha_t: 0.5,
            gamma_prime: 0.0,
        };
        let mut g = Graph::new();
        let p = g.constant(t(&[2, 3], &probs));
        let l = focal_loss(&mut g, p, &t(&[2, 3], &labels), &cfg).unwrap();
        let bce: f64 = probs
            .iter()
            .zip(labels)
            .map(|(&p, l)| -(l * p.ln() + (1.0 - l) * (1.0 - p).ln()))
            .sum::<f64>()
            / 6.0;
        assert_abs_diff_eq!(g.value(l).item(), 0.5 * bce, epsilon = 1e-12);
    }

    #[test]
    fn kld_examples() {
        let mut g = Graph::new();
        let a = g.param(&t(&[1, 2], &[0.75, 0.75]));
        let b = g.param(&t(&[1, 2], &[0.5, 0.5]));
        let k = kld_sym(&mut g, a, b).unwrap();
        // ½·(KL(0.75‖0.5) + KL(0.5‖0.75)) = ½·(0.1308120359 + 0.1438410362)
        assert_abs_diff_eq!(g.value(k).item(), 0.1373265360835137, epsilon = 1e-12);
        let k2 = kld_sym(&mut g, b, a).unwrap();
        assert_abs_diff_eq!(g.value(k2).item(), g.value(k).item(), epsilon = 1e-15);

        let mut g = Graph::new();
        let a = g.param(&t(&[2, 2], &[0.2, 0.4, 0.6, 0.9]));
        let b = g.param(&t(&[2, 2], &[0.2, 0.4, 0.6, 0.9]));
        let k = kld_sym(&mut g, a, b).unwrap();
        assert_eq!(g.value(k).item(), 0.0);
        g.backward(k).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|v| v.abs() < 1e-15));
        assert!(g.grad(b).unwrap().iter().all(|v| v.abs() < 1e-15));

        let c = g.constant(t(&[4], &[0.5; 4]));
        assert!(kld_sym(&mut g, a, c).is_err());
    }

    #[test]
    fn pdr_delegates() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.1, 0.2, 0.3, 0.7, 0.8, 0.9]));
        let b = g.constant(t(&[2, 3], &[0.3, 0.3, 0.3, 0.6, 0.6, 0.2]));
        let p = pdr_loss(&mut g, a, b).unwrap();
        let k = kld_sym(&mut g, a, b).unwrap();
        assert_eq!(g.value(p).item(), g.value(k).item());
    }

    #[test]
    fn content_consistency_examples() {
        let mut g = Graph::new();
        let f = g.constant(t(&[1, 2, 2, 2], &[0.5; 8]));
        let z = content_consistency(&mut g, f, f).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        let fs = g.constant(t(&[1, 2, 2, 2], &[1.5; 8]));
        let e = content_consistency(&mut g, fs, f).unwrap();
        assert_eq!(g.value(e).item(), 8.0);
        let fs3 = g.mul_scalar(fs, 3.0).unwrap();
        let f3 = g.mul_scalar(f, 3.0).unwrap();
        let l3 = content_consistency(&mut g, fs3, f3).unwrap();
        assert_abs_diff_eq!(g.value(l3).item(), 72.0, epsilon = 1e-12);
        let other = g.constant(t(&[2, 2], &[0.0; 4]));
        assert!(content_consistency(&mut g, other, f).is_err());
    }

    #[test]
    fn combine_examples() {
        let b = LossBundle::combine(1.0, 2.0, 4.0, 0.0).unwrap();
        assert_eq!(b.l_cons, 3.0);
        assert_eq!(b.l_total, 4.0);
        assert_eq!(
            LossBundle::combine(0.0, 0.0, 0.0, 0.0).unwrap(),
            LossBundle::default()
        );
        let s = LossBundle::combine(0.3, 0.7, 0.7, 1.0).unwrap();
        assert_eq!(s.l_cons, 0.7);
        assert!(LossBundle::combine(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }
}
