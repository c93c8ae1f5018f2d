//! The weighted three-head detection loss and the consistency term.
//!
//! Consistency is `KL(p || q)` where `p` comes from the landmark-free pass
//! and `q` from the lip-aware pass. In training `q` is detached, so the
//! lip-aware branch receives no gradient from this term.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::FramePredictions;
use crate::error::{Error, Result};
use crate::model::Heads;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-8;
const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_av: f64,
    pub lambda_a: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_av: 1.0,
            lambda_a: 0.4,
            lambda_v: 0.4,
            lambda_c: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_av, self.lambda_a, self.lambda_v, self.lambda_c];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Weighted total and the three unweighted mean cross-entropies.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AsdLoss {
    pub total: f64,
    pub l_v: f64,
    pub l_a: f64,
    pub l_av: f64,
}

fn check_rows(rows: &[[f64; 2]], t: usize) -> Result<()> {
    if rows.len() != t {
        return Err(Error::Shape(format!("{} prediction rows for {t} labels", rows.len())));
    }
    if let Some(r) = rows.iter().find(|r| (r[0] + r[1] - 1.0).abs() > ROW_TOLERANCE) {
        return Err(Error::Numerical(format!("prediction row {r:?} does not sum to 1")));
    }
    Ok(())
}

fn cross_entropy(rows: &[[f64; 2]], labels: &[bool]) -> f64 {
    let sum: f64 = rows
        .iter()
        .zip(labels)
        .map(|(r, &l)| -r[usize::from(l)].max(LOG_FLOOR).ln())
        .sum();
    sum / labels.len() as f64
}

pub fn asd_loss(preds: &FramePredictions, labels: &[bool], cfg: &LossConfig) -> Result<AsdLoss> {
    let t = labels.len();
    if t == 0 {
        return Err(Error::Shape("no frames".into()));
    }
    for head in [&preds.probs_av, &preds.probs_v, &preds.probs_a] {
        check_rows(head, t)?;
    }
    let l_v = cross_entropy(&preds.probs_v, labels);
    let l_a = cross_entropy(&preds.probs_a, labels);
    let l_av = cross_entropy(&preds.probs_av, labels);
    Ok(AsdLoss {
        total: cfg.lambda_v * l_v + cfg.lambda_a * l_a + cfg.lambda_av * l_av,
        l_v,
        l_a,
        l_av,
    })
}

/// Mean over frames of `sum_j p_j ln(p_j / q_j)`, both logs floored.
pub fn consistency_loss(p: &[[f64; 2]], q: &[[f64; 2]]) -> f64 {
    assert_eq!(p.len(), q.len(), "consistency inputs differ in length");
    if p.is_empty() {
        return 0.0;
    }
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(pr, qr)| {
            (0..2)
                .map(|j| pr[j] * (pr[j].max(LOG_FLOOR).ln() - qr[j].max(LOG_FLOOR).ln()))
                .sum::<f64>()
        })
        .sum();
    sum / p.len() as f64
}

pub fn total_loss(asd: f64, consistency: Option<f64>, cfg: &LossConfig) -> f64 {
    asd + consistency.map_or(0.0, |c| cfg.lambda_c * c)
}

/// One-hot `[T, 2]` label mask.
fn one_hot<S: Scalar>(labels: &[bool]) -> Tensor<S> {
    let data = labels
        .iter()
        .flat_map(|&l| if l { [S::zero(), S::one()] } else { [S::one(), S::zero()] })
        .collect();
    Tensor::from_vec(&[labels.len(), 2], data)
}

/// Summed (not averaged) per-frame cross-entropy of `probs: [T, 2]`.
pub fn cross_entropy_sum<S: Scalar>(g: &mut Graph<S>, probs: Var, labels: &[bool]) -> Var {
    let mask = g.constant(one_hot(labels));
    let logp = g.log_floor(probs, LOG_FLOOR);
    let picked = g.mul(logp, mask);
    let s = g.sum_all(picked);
    g.scale(s, -S::one())
}

/// Graph nodes of the summed detection loss and its terms.
#[derive(Debug, Clone, Copy)]
pub struct AsdLossNodes {
    pub total: Var,
    pub l_v: Var,
    pub l_a: Var,
    pub l_av: Var,
}

pub fn asd_loss_graph<S: Scalar>(g: &mut Graph<S>, heads: Heads, labels: &[bool], cfg: &LossConfig) -> AsdLossNodes {
    let l_v = cross_entropy_sum(g, heads.v, labels);
    let l_a = cross_entropy_sum(g, heads.a, labels);
    let l_av = cross_entropy_sum(g, heads.av, labels);
    let wv = g.scale(l_v, S::from_f64_lossy(cfg.lambda_v));
    let wa = g.scale(l_a, S::from_f64_lossy(cfg.lambda_a));
    let wav = g.scale(l_av, S::from_f64_lossy(cfg.lambda_av));
    let s = g.add(wv, wa);
    let total = g.add(s, wav);
    AsdLossNodes { total, l_v, l_a, l_av }
}

/// Summed per-frame `KL(p || q)`; `q` is detached here, so no gradient
/// reaches whatever produced it.
pub fn consistency_graph<S: Scalar>(g: &mut Graph<S>, p: Var, q: Var) -> Var {
    let q = g.detach(q);
    let logp = g.log_floor(p, LOG_FLOOR);
    let logq = g.log_floor(q, LOG_FLOOR);
    let diff = g.sub(logp, logq);
    let terms = g.mul(p, diff);
    g.sum_all(terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_predictions_give_weighted_ln2() {
        let rows = vec![[0.5, 0.5]; 4];
        let preds = FramePredictions {
            probs_av: rows.clone(),
            probs_v: rows.clone(),
            probs_a: rows,
        };
        let l = asd_loss(&preds, &[true, false, true, true], &LossConfig::default()).unwrap();
        assert!((l.total - 1.8 * 2f64.ln()).abs() < 1e-12);
        assert!((l.l_av - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let preds = FramePredictions {
            probs_av: vec![[0.0, 1.0], [1.0, 0.0]],
            probs_v: vec![[0.0, 1.0], [1.0, 0.0]],
            probs_a: vec![[0.0, 1.0], [1.0, 0.0]],
        };
        assert_eq!(asd_loss(&preds, &[true, false], &LossConfig::default()).unwrap().total, 0.0);
    }

    #[test]
    fn rows_must_be_distributions() {
        let preds = FramePredictions {
            probs_av: vec![[0.5, 0.6]],
            probs_v: vec![[0.5, 0.5]],
            probs_a: vec![[0.5, 0.5]],
        };
        assert!(asd_loss(&preds, &[true], &LossConfig::default()).is_err());
    }

    #[test]
    fn kl_hand_values() {
        assert!((consistency_loss(&[[1.0, 0.0]], &[[0.5, 0.5]]) - 2f64.ln()).abs() < 1e-12);
        let expect = 0.8 * (4.0f64 / 3.0).ln() + 0.2 * 0.5f64.ln();
        assert!((consistency_loss(&[[0.8, 0.2]], &[[0.6, 0.4]]) - expect).abs() < 1e-12);
        assert_eq!(consistency_loss(&[[0.3, 0.7]], &[[0.3, 0.7]]), 0.0);
    }

    #[test]
    fn total_combines_terms() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, Some(0.5), &cfg), 1.5);
        assert_eq!(total_loss(1.0, None, &cfg), 1.0);
        let off = LossConfig { lambda_c: 0.0, ..cfg };
        assert_eq!(total_loss(1.0, Some(123.0), &off), 1.0);
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::from_vec(&[2, 2], vec![0.8, 0.2, 0.3, 0.7]));
        let q = g.input(Tensor::from_vec(&[2, 2], vec![0.6, 0.4, 0.5, 0.5]));
        let kl = consistency_graph(&mut g, p, q);
        let expect = consistency_loss(&[[0.8, 0.2], [0.3, 0.7]], &[[0.6, 0.4], [0.5, 0.5]]) * 2.0;
        assert!((g.value(kl).data()[0] - expect).abs() < 1e-12);
        let grads = g.backward(kl);
        assert!(grads.of(p).is_some());
        assert!(grads.of(q).is_none());

        let ce = cross_entropy_sum(&mut g, p, &[true, false]);
        assert!((g.value(ce).data()[0] + 0.2f64.ln() + 0.3f64.ln()).abs() < 1e-12);
    }
}
