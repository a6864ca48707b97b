//! Objective terms.
//!
//! Supervised segmentation with worst-case augmentation selection, dual-view
//! KL consistency against the teacher, boundary-regression MSE for the
//! classmates, task-level KL between segmentation and transformed boundary
//! predictions, the consistency-weight ramp, and the single-step total.
//!
//! Reductions are means over batch and pixels; only the explicit sums over
//! classmates stay sums, so the consistency weight keeps its meaning across
//! resolutions and classmate counts.

use crate::error::{Error, Result};
use crate::nn::{NormMode, SegModel};
use crate::scalar::Scalar;
use crate::tensor::ops::{bce_elem, bce_with_logits};
use crate::tensor::{no_grad, Tensor};
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Softening temperature of the dual-view consistency.
    pub temperature: f64,
    /// Final consistency weight γ.
    pub gamma_max: f64,
    /// Ramp length in epochs.
    pub rampup_epochs: u32,
    /// Heaviside scale δ.
    pub delta: f64,
    /// Candidates drawn per source domain in the worst-case search.
    pub omega: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            gamma_max: 200.0,
            rampup_epochs: 5,
            delta: 20.0,
            omega: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.gamma_max < 0.0 {
            return Err(Error::config("gamma_max must be nonnegative"));
        }
        if self.delta <= 0.0 {
            return Err(Error::config("delta must be positive"));
        }
        if self.omega < 1 {
            return Err(Error::config("omega must be at least 1"));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
pub fn bce_seg<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    bce_with_logits(logits, target)
}

fn spatial_count<T: Scalar>(t: &Tensor<T>) -> T {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4);
    T::cast((s[0] * s[2] * s[3]) as f64)
}

/// Per-pixel `KL(softmax_c(p_logits) ‖ softmax_c(q_logits))` averaged over
/// batch and pixels; channel sums stay sums.
fn kl_channels<T: Scalar>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Tensor<T> {
    let ls_p = p_logits.log_softmax_channels();
    let p = p_logits.softmax_channels();
    let ls_q = q_logits.log_softmax_channels();
    let per_elem = p.mul(&ls_p.sub(&ls_q));
    per_elem
        .sum_all()
        .mul_scalar(T::one() / spatial_count(p_logits))
}

/// Dual-view consistency term: the teacher side is treated as a constant so
/// gradients only reach the student.
pub fn kl_consistency<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    temperature: T,
) -> Tensor<T> {
    assert_eq!(
        student_logits.shape(),
        teacher_logits.shape(),
        "kl_consistency: shape mismatch"
    );
    let inv_t = T::one() / temperature;
    let s = student_logits.mul_scalar(inv_t);
    let t = teacher_logits.detach().mul_scalar(inv_t);
    kl_channels(&s, &t)
}

/// Both dual-view directions, unweighted (the trainer applies γ).
pub fn ec_loss<T: Scalar>(
    student_weak: &Tensor<T>,
    student_strong: &Tensor<T>,
    teacher_weak: &Tensor<T>,
    teacher_strong: &Tensor<T>,
    temperature: T,
) -> Tensor<T> {
    let w2s = kl_consistency(student_weak, teacher_strong, temperature);
    let s2w = kl_consistency(student_strong, teacher_weak, temperature);
    w2s.add(&s2w)
}

/// Sum over classmates of the mean squared error against the boundary target.
pub fn boundary_mse<T: Scalar>(classmate_preds: &[Tensor<T>], target: &Tensor<T>) -> Tensor<T> {
    assert!(!classmate_preds.is_empty(), "boundary_mse needs >= 1 classmate");
    let mut total: Option<Tensor<T>> = None;
    for pred in classmate_preds {
        assert_eq!(pred.shape(), target.shape(), "boundary_mse: shape mismatch");
        let diff = target.sub(pred);
        let term = diff.mul(&diff).mean_all();
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    total.unwrap()
}

/// Task-level consistency: KL between the student's channel softmax and the
/// channel softmax of each Heaviside-transformed boundary prediction. No
/// temperature; gradients flow into both sides.
pub fn ic_consistency<T: Scalar>(
    student_logits: &Tensor<T>,
    classmate_preds: &[Tensor<T>],
    delta: T,
) -> Tensor<T> {
    assert!(!classmate_preds.is_empty(), "ic_consistency needs >= 1 classmate");
    let mut total: Option<Tensor<T>> = None;
    for pred in classmate_preds {
        let transformed = pred.heaviside(delta);
        let term = kl_channels(student_logits, &transformed);
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    total.unwrap()
}

/// Same-task ablation arm: KL between student and classmate segmentation
/// softmaxes, gradients into both sides.
pub fn same_task_consistency<T: Scalar>(
    student_logits: &Tensor<T>,
    classmate_logits: &[Tensor<T>],
) -> Tensor<T> {
    assert!(!classmate_logits.is_empty());
    let mut total: Option<Tensor<T>> = None;
    for logits in classmate_logits {
        let term = kl_channels(student_logits, logits);
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    total.unwrap()
}

/// Consistency weight at `epoch`: `γ_max · exp(-5·(1 - min(e, e_r)/e_r)²)`,
/// the standard mean-teacher ramp; constant `γ_max` once the ramp ends.
pub fn rampup_gamma(epoch: u32, cfg: &LossConfig) -> f64 {
    if cfg.rampup_epochs == 0 {
        return cfg.gamma_max;
    }
    let r = (epoch.min(cfg.rampup_epochs) as f64) / (cfg.rampup_epochs as f64);
    cfg.gamma_max * (-5.0 * (1.0 - r) * (1.0 - r)).exp()
}

/// Single-step objective: `(L_seg + γ(L_w2s + L_s2w)) + (L_b + γ·L_ic)`,
/// used by the accumulated-update mode.
pub fn total_loss<T: Scalar>(
    l_seg: &Tensor<T>,
    ec: Option<&Tensor<T>>,
    l_b: Option<&Tensor<T>>,
    ic: Option<&Tensor<T>>,
    gamma: T,
) -> Tensor<T> {
    let mut total = match ec {
        Some(e) => l_seg.add(&e.mul_scalar(gamma)),
        None => l_seg.clone(),
    };
    if let Some(b) = l_b {
        total = total.add(b);
    }
    if let Some(i) = ic {
        total = total.add(&i.mul_scalar(gamma));
    }
    total
}

// ---------------------------------------------------------------------------
// worst-case augmentation selection
// ---------------------------------------------------------------------------

/// Result of the worst-case supervised loss.
pub struct DomainUpOutcome<T: Scalar> {
    /// `L_seg = L_seg^w + L_seg^s` with a live graph.
    pub loss: Tensor<T>,
    pub loss_weak: T,
    pub loss_strong: T,
    /// Winning candidate index per batch item.
    pub winners: Vec<usize>,
    /// Frozen-statistics BCE of every candidate, per batch item.
    pub scores: Vec<Vec<T>>,
}

/// Per-image mean BCE of each candidate under frozen statistics.
///
/// Candidates are scored with a gradient-free eval-mode forward, so a
/// candidate's score does not depend on which batch it was scored in: an
/// audit recomputing scores image by image reproduces these values exactly.
pub fn score_candidates<T: Scalar>(
    model: &SegModel<T>,
    candidates: &[Vec<Array3<T>>],
    targets: &Tensor<T>,
) -> Result<Vec<Vec<T>>> {
    for (i, cands) in candidates.iter().enumerate() {
        if cands.is_empty() {
            return Err(Error::invalid_input(format!(
                "sample {i} has an empty candidate list"
            )));
        }
    }
    let total: usize = candidates.iter().map(|c| c.len()).sum();
    let (c, h, w) = candidates[0][0].dim();
    let mut batch = Array4::<T>::zeros((total, c, h, w));
    let mut owner: Vec<usize> = Vec::with_capacity(total);
    let mut row_idx = 0usize;
    for (i, cands) in candidates.iter().enumerate() {
        for cand in cands {
            batch.index_axis_mut(Axis(0), row_idx).assign(cand);
            owner.push(i);
            row_idx += 1;
        }
    }
    let x = Tensor::from_array(batch, false);
    let logits = no_grad(|| {
        let z = model.encode(&x, NormMode::Eval)?;
        Ok::<_, Error>(model.decode_student(&z, NormMode::Eval))
    })?;
    let ld = logits.data();
    let ls = ld.as_slice().expect("standard layout");
    let t4d = targets.data();
    let ts = t4d.as_slice().expect("standard layout");
    let cc = targets.shape()[1];
    let per_image = cc * h * w;

    let mut scores: Vec<Vec<T>> = candidates.iter().map(|c| Vec::with_capacity(c.len())).collect();
    for (r, &i) in owner.iter().enumerate() {
        let lbase = r * per_image;
        let tbase = i * per_image;
        let mut sum = T::zero();
        for k in 0..per_image {
            sum += bce_elem(ls[lbase + k], ts[tbase + k]);
        }
        scores[i].push(sum / T::cast(per_image as f64));
    }
    Ok(scores)
}

/// Per-sample argmax, ties broken by the lowest index.
pub fn select_winners<T: Scalar>(scores: &[Vec<T>]) -> Vec<usize> {
    scores
        .iter()
        .map(|row| {
            let mut best = 0usize;
            for (r, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = r;
                }
            }
            best
        })
        .collect()
}

/// Build `L_seg` from already-selected winners: gradients flow only through
/// the weak forward and the winning candidates' forward.
pub fn domainup_with_winners<T: Scalar>(
    model: &SegModel<T>,
    weak_batch: &Tensor<T>,
    candidates: &[Vec<Array3<T>>],
    winners: &[usize],
    targets: &Tensor<T>,
) -> Result<(Tensor<T>, T, T)> {
    let b = weak_batch.shape()[0];
    let (c, h, w) = candidates[0][0].dim();
    let mut strong = Array4::<T>::zeros((b, c, h, w));
    for (i, &win) in winners.iter().enumerate() {
        strong
            .index_axis_mut(Axis(0), i)
            .assign(&candidates[i][win]);
    }
    let strong_batch = Tensor::from_array(strong, false);

    let (weak_logits, _) = model.forward_student(weak_batch, NormMode::Train)?;
    let loss_weak = bce_seg(&weak_logits, targets);
    let (strong_logits, _) = model.forward_student(&strong_batch, NormMode::Train)?;
    let loss_strong = bce_seg(&strong_logits, targets);
    let lw = loss_weak.item();
    let ls = loss_strong.item();
    Ok((loss_strong.add(&loss_weak), lw, ls))
}

/// Worst-case supervised segmentation loss.
///
/// Every candidate is scored under frozen statistics; the per-sample argmax
/// (ties to the lowest index) forms the strong batch. Scores are a function
/// of the model state at call time — audits must recompute them before the
/// training forwards move the running statistics.
pub fn domainup_seg_loss<T: Scalar>(
    model: &SegModel<T>,
    weak_batch: &Tensor<T>,
    candidates: &[Vec<Array3<T>>],
    targets: &Tensor<T>,
) -> Result<DomainUpOutcome<T>> {
    let b = weak_batch.shape()[0];
    if candidates.len() != b {
        return Err(Error::shape(format!(
            "batch size {b} vs {} candidate lists",
            candidates.len()
        )));
    }
    let scores = score_candidates(model, candidates, targets)?;
    let winners = select_winners(&scores);
    let (loss, loss_weak, loss_strong) =
        domainup_with_winners(model, weak_batch, candidates, &winners, targets)?;
    Ok(DomainUpOutcome {
        loss,
        loss_weak,
        loss_strong,
        winners,
        scores,
    })
}
