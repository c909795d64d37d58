//! Joint loss assembly: inverse-of-number-of-samples class weighting,
//! subgroup indexing, and the combined accuracy + disparity objective.

use crate::cohort::{Attribute, SensitiveAttributes};
use crate::error::Result;
use crate::tape::{ClassWeights, NodeId, SubgroupRows, Tape};
use crate::tensor::Tensor2;

/// Per-task class weights w_c = N / (2 n_c); classes with no samples get
/// weight zero. Returns the weights plus the indices of degenerate tasks.
pub fn ins_class_weights(targets: &Tensor2) -> (ClassWeights, Vec<usize>) {
    let (n, tasks) = targets.shape();
    let mut pos = vec![0.0; tasks];
    let mut neg = vec![0.0; tasks];
    let mut degenerate = Vec::new();
    for t in 0..tasks {
        let n_pos = (0..n).filter(|&i| targets.get(i, t) == 1.0).count();
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            degenerate.push(t);
        }
        pos[t] = if n_pos > 0 { n as f64 / (2.0 * n_pos as f64) } else { 0.0 };
        neg[t] = if n_neg > 0 { n as f64 / (2.0 * n_neg as f64) } else { 0.0 };
    }
    (ClassWeights { pos, neg }, degenerate)
}

/// Group sample rows by subgroup for each sensitive attribute, in canonical
/// subgroup order. Subgroups absent from the batch yield empty lists (the
/// disparity surrogate skips them).
pub fn subgroup_rows(attrs: &[SensitiveAttributes]) -> SubgroupRows {
    Attribute::ALL
        .iter()
        .map(|attr| {
            attr.subgroups()
                .iter()
                .map(|sub| {
                    attrs
                        .iter()
                        .enumerate()
                        .filter(|(_, a)| a.subgroup(*attr) == *sub)
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Component values of one total-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: NodeId,
    pub total_value: f64,
    pub bce: f64,
    pub eddi: f64,
    pub gate_l1: f64,
}

/// Total objective: weighted BCE plus `lambda` times the differentiable
/// disparity surrogate on the predicted probabilities, plus `l1_alpha` times
/// the mean gate activation. Zero-coefficient terms are skipped, so with
/// lambda = 0 and l1_alpha = 0 the node is exactly the BCE node.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    logits: NodeId,
    gate_activation: Option<NodeId>,
    targets: &Tensor2,
    attrs: &[SensitiveAttributes],
    weights: &ClassWeights,
    lambda: f64,
    l1_alpha: f64,
) -> Result<LossParts> {
    let bce = tape.weighted_bce(logits, targets, weights)?;
    let mut total = bce;
    let mut eddi_value = 0.0;
    if lambda > 0.0 {
        let probs = tape.sigmoid(logits);
        let groups = subgroup_rows(attrs);
        let eddi = tape.soft_eddi(probs, targets, &groups)?;
        eddi_value = tape.scalar(eddi);
        let scaled = tape.scale(eddi, lambda);
        total = tape.add(total, scaled)?;
    }
    let mut gate_l1 = 0.0;
    if l1_alpha > 0.0 {
        if let Some(act) = gate_activation {
            let mean_act = tape.mean_all(act);
            gate_l1 = tape.scalar(mean_act);
            let scaled = tape.scale(mean_act, l1_alpha);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(LossParts {
        total,
        total_value: tape.scalar(total),
        bce: tape.scalar(bce),
        eddi: eddi_value,
        gate_l1,
    })
}
