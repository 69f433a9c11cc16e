//! Ranking losses, the contrastive objectives and the joint multi-task loss.
//!
//! The joint loss is
//!
//! ```text
//! L = L_disc + α₁·L_shared + α₂·L_intra + α₃·L_dance − ρ · Σ_(a,b)∈P mean_i c(φ_i^a, φ_i^b)
//! c(φ^a, φ^b) = ‖R(φ^a) ⊙ ψ(R(φ^b))‖²
//! ```
//!
//! where `R` is the gradient-reversal node. Gradient signs of the
//! decorrelation term under plain descent on `L`:
//!
//! | parameters            | effect of the `−ρ·c` term        |
//! |-----------------------|----------------------------------|
//! | ψ                     | ascends `c` (learns to correlate)|
//! | heads, encoder (via R)| descends `c` (decorrelate)       |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DivaError, Result};
use crate::mining::{sampling_weight_with_grad, Triplet};
use crate::model::{BoundMlp, BoundModel, TaskKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    /// `[d_ap − d_an + γ]_+`
    Triplet,
    /// `[γ + d_ap − β]_+ + [γ + β − d_an]_+` with learnable β.
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrastive {
    /// Negative logits scaled by inverse-density weights.
    Dance,
    /// Plain noise-contrastive estimation.
    Nce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_shared: f64,
    pub alpha_intra: f64,
    pub alpha_dance: f64,
    /// Decorrelation weight, identical for every pair.
    pub rho_dec: f64,
    /// Margin γ.
    pub margin: f64,
    /// Temperature τ.
    pub temperature: f64,
    /// Weight cap λ.
    pub lambda: f64,
    pub base_loss: BaseLoss,
    pub contrastive: Contrastive,
    /// Include the positive pair in the softmax denominator.
    pub nce_include_positive: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_shared: 0.15,
            alpha_intra: 0.15,
            alpha_dance: 0.15,
            rho_dec: 300.0,
            margin: 0.2,
            temperature: 0.1,
            lambda: 1.0,
            base_loss: BaseLoss::Margin,
            contrastive: Contrastive::Dance,
            nce_include_positive: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let alphas = [self.alpha_shared, self.alpha_intra, self.alpha_dance];
        if alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(DivaError::config("task weights α must be >= 0"));
        }
        if !(self.rho_dec >= 0.0) {
            return Err(DivaError::config("rho_dec must be >= 0"));
        }
        if !(self.margin >= 0.0) {
            return Err(DivaError::config("margin γ must be >= 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(DivaError::config("temperature τ must be > 0"));
        }
        if !(self.lambda > 0.0) {
            return Err(DivaError::config("cutoff λ must be > 0"));
        }
        Ok(())
    }

    pub fn task_weight(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Disc => 1.0,
            TaskKind::Shared => self.alpha_shared,
            TaskKind::Intra => self.alpha_intra,
            TaskKind::Dance => self.alpha_dance,
        }
    }
}

pub fn triplet_hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

pub fn margin_pair_loss(d_ap: f64, d_an: f64, beta: f64, margin: f64) -> f64 {
    (margin + d_ap - beta).max(0.0) + (margin + beta - d_an).max(0.0)
}

/// Anchor–positive and anchor–negative distances of `triplets` as `[T, 1]`
/// columns.
pub fn triplet_distances(tape: &mut Tape, emb: Var, triplets: &[Triplet]) -> Result<(Var, Var)> {
    let a: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let p: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let n: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let ea = tape.gather_rows(emb, &a)?;
    let ep = tape.gather_rows(emb, &p)?;
    let en = tape.gather_rows(emb, &n)?;
    let dap = tape.sub(ea, ep)?;
    let dap = tape.row_sum_sq(dap);
    let dap = tape.sqrt(dap);
    let dan = tape.sub(ea, en)?;
    let dan = tape.row_sum_sq(dan);
    let dan = tape.sqrt(dan);
    Ok((dap, dan))
}

/// Mean base loss over `triplets`; `None` when the list is empty.
///
/// `beta` is required for [`BaseLoss::Margin`].
pub fn task_loss(
    tape: &mut Tape,
    triplets: &[Triplet],
    emb: Var,
    base: BaseLoss,
    margin: f64,
    beta: Option<Var>,
) -> Result<Option<Var>> {
    if triplets.is_empty() {
        return Ok(None);
    }
    let (dap, dan) = triplet_distances(tape, emb, triplets)?;
    let per = match base {
        BaseLoss::Triplet => {
            let gap = tape.sub(dap, dan)?;
            let gap = tape.add_scalar(gap, margin);
            tape.relu(gap)
        }
        BaseLoss::Margin => {
            let beta = beta.ok_or_else(|| DivaError::Contract("margin loss needs a β parameter".into()))?;
            // [γ + d_ap − β]_+
            let neg_beta = tape.scale(beta, -1.0);
            let pos = tape.add_broadcast(dap, neg_beta)?;
            let pos = tape.add_scalar(pos, margin);
            let pos = tape.relu(pos);
            // [γ + β − d_an]_+
            let neg = tape.scale(dan, -1.0);
            let neg = tape.add_broadcast(neg, beta)?;
            let neg = tape.add_scalar(neg, margin);
            let neg = tape.relu(neg);
            tape.add(pos, neg)?
        }
    };
    Ok(Some(tape.mean(per)))
}

/// How queue negatives are weighted inside the exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NegativeWeighting {
    /// Weight exactly 1, still applied multiplicatively.
    Unit,
    /// `min(λ, 1/q(d))` on the unit sphere of dimension `D`.
    InverseDensity { lambda: f64 },
}

fn check_contrastive_inputs(tape: &Tape, anchors: Var, positives: Var, negatives: Var, tau: f64) -> Result<()> {
    let (a, p, n) = (tape.value(anchors), tape.value(positives), tape.value(negatives));
    if n.rows() == 0 || n.is_empty() {
        return Err(DivaError::Contract("contrastive loss needs at least one negative".into()));
    }
    if a.cols() != p.cols() || a.cols() != n.cols() || a.rows() != p.rows() {
        return Err(DivaError::dim(format!(
            "anchors {:?}, positives {:?}, negatives {:?}",
            a.shape(),
            p.shape(),
            n.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(DivaError::Domain("temperature must be > 0".into()));
    }
    Ok(())
}

fn softmax_nll(tape: &mut Tape, pos_logit: Var, neg_logits: Var, include_positive: bool) -> Result<Var> {
    let denom_in = if include_positive { tape.concat_cols(pos_logit, neg_logits)? } else { neg_logits };
    let lse = tape.log_sum_exp_rows(denom_in);
    let per = tape.sub(lse, pos_logit)?;
    Ok(tape.mean(per))
}

/// `mean_a −log[exp(φ_a·φ̃_a/τ) / Σ exp(φ_a·φ_n/τ)]`, the denominator
/// optionally including the positive term.
pub fn nce_loss(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    negatives: Var,
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    check_contrastive_inputs(tape, anchors, positives, negatives, tau)?;
    let pos = tape.row_dot(anchors, positives)?;
    let pos = tape.scale(pos, 1.0 / tau);
    let sims = tape.matmul_t(anchors, negatives)?;
    let neg = tape.scale(sims, 1.0 / tau);
    softmax_nll(tape, pos, neg, include_positive)
}

/// NCE with every negative logit multiplied by `w(d_an)`; the positive
/// logit is left unscaled. Assumes unit-norm anchors and negatives, so
/// `d_an = √(2 − 2·φ_a·φ_n)`.
pub fn dance_loss(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    negatives: Var,
    tau: f64,
    include_positive: bool,
    weighting: NegativeWeighting,
) -> Result<Var> {
    check_contrastive_inputs(tape, anchors, positives, negatives, tau)?;
    let dim = tape.value(anchors).cols();
    let pos = tape.row_dot(anchors, positives)?;
    let pos = tape.scale(pos, 1.0 / tau);
    let sims = tape.matmul_t(anchors, negatives)?;
    let w = match weighting {
        NegativeWeighting::Unit => tape.pointwise(sims, |_| (1.0, 0.0)),
        NegativeWeighting::InverseDensity { lambda } => {
            if dim < 2 {
                return Err(DivaError::Domain("inverse-density weights need D >= 2".into()));
            }
            let d2 = tape.scale(sims, -2.0);
            let d2 = tape.add_scalar(d2, 2.0);
            let d2 = tape.relu(d2);
            let d = tape.sqrt(d2);
            tape.pointwise(d, |v| sampling_weight_with_grad(v.min(2.0), dim, lambda))
        }
    };
    let weighted = tape.mul(w, sims)?;
    let neg = tape.scale(weighted, 1.0 / tau);
    softmax_nll(tape, pos, neg, include_positive)
}

/// `c(φ^a, φ^b) = ‖φ^a ⊙ ψ(φ^b)‖²` per sample, as an `[B, 1]` column, with
/// both embedding branches passed through gradient reversal.
///
/// The output `m` of ψ is rescaled to `m / √(‖m‖² + ε)` with
/// [`PSI_NORM_EPS`], which keeps `c` in `[0, 1]`; without it ψ could raise
/// `c` without bound by scaling up.
pub fn decorrelation_score(tape: &mut Tape, phi_a: Var, phi_b: Var, psi: &BoundMlp) -> Result<Var> {
    let (va, vb) = (tape.value(phi_a), tape.value(phi_b));
    if !va.same_shape(vb) {
        return Err(DivaError::dim(format!("decorrelation of {:?} and {:?}", va.shape(), vb.shape())));
    }
    let ra = tape.gradient_reversal(phi_a);
    let rb = tape.gradient_reversal(phi_b);
    let mapped = psi.forward(tape, rb)?;
    let mapped = soft_normalize_rows(tape, mapped)?;
    let prod = tape.mul(ra, mapped)?;
    Ok(tape.row_sum_sq(prod))
}

/// Smoothing term of the ψ output normalization.
pub const PSI_NORM_EPS: f64 = 1e-12;

fn soft_normalize_rows(tape: &mut Tape, m: Var) -> Result<Var> {
    let sq = tape.row_sum_sq(m);
    let inv = tape.pointwise(sq, |v| {
        let r = 1.0 / (v + PSI_NORM_EPS).sqrt();
        (r, -0.5 * r * r * r)
    });
    tape.scale_rows(m, inv)
}

/// Plain evaluation of `‖a ⊙ m‖²` for an already mapped `m = ψ(φ^b)`.
pub fn decorrelation_value(a: &[f64], mapped_b: &[f64]) -> f64 {
    a.iter().zip(mapped_b).map(|(x, y)| (x * y) * (x * y)).sum()
}

/// Everything one joint-loss evaluation consumes.
#[derive(Debug, Clone)]
pub struct JointInputs {
    /// Batch features `[B×F]`.
    pub x: Tensor,
    /// Augmented views of `x`, used as contrastive positives.
    pub x_aug: Tensor,
    pub triplets: BTreeMap<TaskKind, Vec<Triplet>>,
    /// Queue snapshot `[C×D]`; constant on the tape.
    pub negatives: Tensor,
}

/// Scalar value of every term of the joint loss. Absent tasks are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub disc: Option<f64>,
    pub shared: Option<f64>,
    pub intra: Option<f64>,
    pub dance: Option<f64>,
    /// Batch-mean decorrelation score per pair (before weighting).
    pub decorrelation: Vec<((TaskKind, TaskKind), f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn task(&self, kind: TaskKind) -> Option<f64> {
        match kind {
            TaskKind::Disc => self.disc,
            TaskKind::Shared => self.shared,
            TaskKind::Intra => self.intra,
            TaskKind::Dance => self.dance,
        }
    }

    fn set(&mut self, kind: TaskKind, v: f64) {
        let slot = match kind {
            TaskKind::Disc => &mut self.disc,
            TaskKind::Shared => &mut self.shared,
            TaskKind::Intra => &mut self.intra,
            TaskKind::Dance => &mut self.dance,
        };
        *slot = Some(v);
    }

    pub fn c_sum(&self) -> f64 {
        self.decorrelation.iter().map(|(_, c)| c).sum()
    }
}

pub struct JointLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the joint loss of every active task on `tape`.
pub fn joint_loss(
    tape: &mut Tape,
    model: &BoundModel,
    inputs: &JointInputs,
    weights: &LossWeights,
    pairs: &[(TaskKind, TaskKind)],
) -> Result<JointLoss> {
    let x = tape.constant(inputs.x.clone());
    let emb = model.embed_all(tape, x)?;
    joint_loss_from(tape, model, &emb, inputs, weights, pairs)
}

/// [`joint_loss`] on batch embeddings already recorded on `tape`.
pub fn joint_loss_from(
    tape: &mut Tape,
    model: &BoundModel,
    emb: &BTreeMap<TaskKind, Var>,
    inputs: &JointInputs,
    weights: &LossWeights,
    pairs: &[(TaskKind, TaskKind)],
) -> Result<JointLoss> {
    let mut breakdown = LossBreakdown::default();
    let mut terms: Vec<Var> = Vec::new();

    for (&kind, &e) in emb {
        let term = if kind.is_ranking() {
            let triplets = inputs.triplets.get(&kind).map(Vec::as_slice).unwrap_or(&[]);
            let beta = model.betas.get(&kind).copied();
            task_loss(tape, triplets, e, weights.base_loss, weights.margin, beta)?
        } else {
            let xa = tape.constant(inputs.x_aug.clone());
            let positives = model.embed_one(tape, xa, TaskKind::Dance)?;
            let negatives = tape.constant(inputs.negatives.clone());
            let l = match weights.contrastive {
                Contrastive::Nce => {
                    nce_loss(tape, e, positives, negatives, weights.temperature, weights.nce_include_positive)?
                }
                Contrastive::Dance => dance_loss(
                    tape,
                    e,
                    positives,
                    negatives,
                    weights.temperature,
                    weights.nce_include_positive,
                    NegativeWeighting::InverseDensity { lambda: weights.lambda },
                )?,
            };
            Some(l)
        };
        if let Some(t) = term {
            breakdown.set(kind, tape.value(t).item());
            let w = weights.task_weight(kind);
            terms.push(if w == 1.0 { t } else { tape.scale(t, w) });
        }
    }

    for &(a, b) in pairs {
        let (Some(&ea), Some(&eb)) = (emb.get(&a), emb.get(&b)) else { continue };
        let psi = model
            .decorrelator((a, b))
            .ok_or_else(|| DivaError::config(format!("no decorrelation map for ({a},{b})")))?;
        let c = decorrelation_score(tape, ea, eb, psi)?;
        let c = tape.mean(c);
        breakdown.decorrelation.push(((a, b), tape.value(c).item()));
        terms.push(tape.scale(c, -weights.rho_dec));
    }

    let mut total = match terms.first() {
        Some(&t) => t,
        None => {
            let z = tape.constant(Tensor::scalar(0.0));
            tape.sum(z)
        }
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t)?;
    }
    breakdown.total = tape.value(total).item();
    Ok(JointLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::model::{Linear, Mlp};

    #[test]
    fn triplet_hinge_examples() {
        assert!((triplet_hinge(0.8, 0.9, 0.2) - 0.1).abs() < 1e-12);
        assert_eq!(triplet_hinge(0.2, 0.9, 0.2), 0.0);
        assert_eq!(triplet_hinge(0.7, 0.7, 0.0), 0.0);
    }

    #[test]
    fn margin_loss_examples() {
        assert!((margin_pair_loss(1.3, 1.3, 1.2, 0.2) - 0.4).abs() < 1e-12);
        assert_eq!(margin_pair_loss(1.0, 1.5, 1.2, 0.2), 0.0);
        assert_eq!(margin_pair_loss(1.0, 1.4, 1.2, 0.2), 0.0);
    }

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        Tensor::from_rows(&normed).unwrap()
    }

    #[test]
    fn task_loss_is_mean_of_hand_hinges() {
        let emb = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.3, 0.4],
            vec![1.0, 0.0],
            vec![0.0, 0.6],
            vec![0.0, 1.2],
        ])
        .unwrap();
        let t = |a, p, n| Triplet { anchor: a, positive: p, negative: n, kind: TaskKind::Disc };
        let ts = vec![t(0, 1, 2), t(0, 3, 1), t(1, 2, 4)];
        let hand = [
            triplet_hinge(0.5, 1.0, 0.2),
            triplet_hinge(0.6, 0.5, 0.2),
            triplet_hinge((0.49f64 + 0.16).sqrt(), (0.09f64 + 0.64).sqrt(), 0.2),
        ];
        let mut tape = Tape::new();
        let e = tape.constant(emb);
        let l = task_loss(&mut tape, &ts, e, BaseLoss::Triplet, 0.2, None).unwrap().unwrap();
        let expect = hand.iter().sum::<f64>() / 3.0;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        let single = task_loss(&mut tape, &ts[..1], e, BaseLoss::Triplet, 0.2, None).unwrap().unwrap();
        assert!((tape.value(single).item() - hand[0]).abs() < 1e-12);
        let doubled: Vec<Triplet> = ts.iter().chain(ts.iter()).copied().collect();
        let d = task_loss(&mut tape, &doubled, e, BaseLoss::Triplet, 0.2, None).unwrap().unwrap();
        assert!((tape.value(d).item() - expect).abs() < 1e-12);
        assert!(task_loss(&mut tape, &[], e, BaseLoss::Triplet, 0.2, None).unwrap().is_none());
    }

    #[test]
    fn nce_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let n = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let l = nce_loss(&mut tape, a, p, n, 1.0, true).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(l).item() - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((tape.value(l).item() - 0.3133).abs() < 1e-4);

        // all dots equal → log(K+1)
        let k = 5;
        let negs = tape.constant(Tensor::from_rows(&vec![vec![1.0, 0.0]; k]).unwrap());
        let l = nce_loss(&mut tape, a, p, negs, 0.1, true).unwrap();
        assert!((tape.value(l).item() - ((k + 1) as f64).ln()).abs() < 1e-12);

        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(nce_loss(&mut tape, a, p, empty, 1.0, true).is_err());
        assert!(LossWeights::default().temperature == 0.1);
    }

    #[test]
    fn dance_with_unit_weights_is_nce_bitwise() {
        let anchors = unit_rows(&[vec![0.3, -1.0, 0.2], vec![1.0, 0.5, -0.1]]);
        let pos = unit_rows(&[vec![0.4, -0.9, 0.1], vec![0.9, 0.6, 0.0]]);
        let negs = unit_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0], vec![-1.0, 0.2, 0.3]]);
        for include in [true, false] {
            let mut tape = Tape::new();
            let (a, p, n) = (tape.constant(anchors.clone()), tape.constant(pos.clone()), tape.constant(negs.clone()));
            let nce = nce_loss(&mut tape, a, p, n, 0.1, include).unwrap();
            let dance = dance_loss(&mut tape, a, p, n, 0.1, include, NegativeWeighting::Unit).unwrap();
            assert_eq!(tape.value(nce).item().to_bits(), tape.value(dance).item().to_bits());
        }
    }

    #[test]
    fn dance_small_lambda_limit() {
        // λ → 0⁺: negative logits vanish, loss → −log(p / (p + K)) at τ = 1.
        let anchors = unit_rows(&[vec![1.0, 0.2, 0.0]]);
        let pos = unit_rows(&[vec![0.8, 0.3, 0.1]]);
        let negs = unit_rows(&[vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 0.5], vec![0.2, 0.2, 1.0]]);
        let mut tape = Tape::new();
        let (a, p, n) = (tape.constant(anchors.clone()), tape.constant(pos.clone()), tape.constant(negs));
        let l = dance_loss(&mut tape, a, p, n, 1.0, true, NegativeWeighting::InverseDensity { lambda: 1e-12 }).unwrap();
        let pterm = crate::tensor::dot(anchors.row(0), pos.row(0)).exp();
        let expect = -(pterm / (pterm + 3.0)).ln();
        assert!((tape.value(l).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn decorrelation_examples() {
        assert!((decorrelation_value(&[1.0, 0.0], &[0.5, 2.0]) - 0.25).abs() < 1e-15);

        let mut tape = Tape::new();
        let mut const_psi = Mlp { layers: vec![Linear::zeros(2, 2), Linear::zeros(2, 2)] };
        const_psi.layers[1].bias = Tensor::vector(vec![3.0, 0.0]);
        let psi = bind_mlp(&mut tape, &const_psi);
        let a = tape.constant(unit_rows(&[vec![0.0, 1.0]]));
        let b = tape.constant(unit_rows(&[vec![0.0, 1.0]]));
        let c = decorrelation_score(&mut tape, a, b, &psi).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
    }

    fn bind_mlp(tape: &mut Tape, m: &Mlp) -> BoundMlp {
        let layers = m
            .layers
            .iter()
            .map(|l| crate::model::BoundLinear { weight: tape.param(l.weight.clone()), bias: tape.param(l.bias.clone()) })
            .collect();
        BoundMlp { layers }
    }

    #[test]
    fn reversal_negates_embedding_gradients_only() {
        let psi = Mlp {
            layers: vec![
                Linear { weight: Tensor::matrix(2, 2, vec![0.7, -0.2, 0.4, 0.9]).unwrap(), bias: Tensor::vector(vec![0.1, 0.3]) },
                Linear { weight: Tensor::matrix(2, 2, vec![1.1, 0.5, -0.3, 0.8]).unwrap(), bias: Tensor::vector(vec![0.2, -0.1]) },
            ],
        };
        let a0 = unit_rows(&[vec![0.6, 0.8], vec![-0.3, 0.9]]);
        let b0 = unit_rows(&[vec![0.5, 0.5], vec![0.9, -0.2]]);

        let mut tape = Tape::new();
        let p = bind_mlp(&mut tape, &psi);
        let a = tape.param(a0.clone());
        let b = tape.param(b0.clone());
        let c = decorrelation_score(&mut tape, a, b, &p).unwrap();
        let l = tape.sum(c);
        let g = tape.backward(l).unwrap();

        let mut plain = Tape::new();
        let pp = bind_mlp(&mut plain, &psi);
        let pa = plain.param(a0);
        let pb = plain.param(b0);
        let mapped = pp.forward(&mut plain, pb).unwrap();
        let mapped = soft_normalize_rows(&mut plain, mapped).unwrap();
        let prod = plain.mul(pa, mapped).unwrap();
        let c2 = plain.row_sum_sq(prod);
        let l2 = plain.sum(c2);
        let g2 = plain.backward(l2).unwrap();

        for (x, y) in [(a, pa), (b, pb)] {
            let r = g.get(x).unwrap().data();
            let s = g2.get(y).unwrap().data();
            for (u, v) in r.iter().zip(s) {
                assert!((u + v).abs() < 1e-14);
            }
        }
        let w_rev = g.get(p.layers[0].weight).unwrap().data();
        let w_plain = g2.get(pp.layers[0].weight).unwrap().data();
        for (u, v) in w_rev.iter().zip(w_plain) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn dance_gradients_match_differences() {
        let anchors = unit_rows(&[vec![0.3, -1.0, 0.2, 0.5], vec![1.0, 0.5, -0.1, 0.2]]);
        let pos = unit_rows(&[vec![0.4, -0.9, 0.1, 0.4], vec![0.9, 0.6, 0.0, -0.3]]);
        let negs = unit_rows(&[
            vec![1.0, 0.0, 0.0, 0.1],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![-1.0, 0.2, 0.3, 0.4],
            vec![0.3, 0.3, -0.6, 0.2],
        ]);
        let f = |t: &mut Tape, p: &[Var]| {
            let a = t.l2_normalize(p[0])?;
            let b = t.l2_normalize(p[1])?;
            let n = t.constant(negs.clone());
            dance_loss(t, a, b, n, 0.1, true, NegativeWeighting::InverseDensity { lambda: 1.0 })
        };
        let r = finite_diff_check(f, &[anchors, pos], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
