//! Memory attention: knowledge-gap and factor-gap regularizers weighted by
//! soft attention over past tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{KnowledgeBase, TaskFactors};
use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MamConfig {
    /// Weight of the knowledge-gap term.
    #[serde(default = "default_lambda")]
    pub lambda_l: f64,
    /// Treat attention scores as constants when differentiating.
    #[serde(default = "default_true")]
    pub detach_attention: bool,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for MamConfig {
    fn default() -> Self {
        MamConfig {
            lambda_l: default_lambda(),
            detach_attention: true,
        }
    }
}

impl MamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l >= 0.0 && self.lambda_l.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_l must be finite and non-negative, got {}",
                self.lambda_l
            )));
        }
        Ok(())
    }
}

/// Per-past-task weights for the deconvolution and contraction gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores {
    pub deconv: Vec<f64>,
    pub contraction: Vec<f64>,
}

/// Current task's `K` and `C` on a graph, one entry per layer.
#[derive(Clone, Debug)]
pub struct FactorNodes {
    pub deconv: Vec<NodeId>,
    pub contraction: Vec<NodeId>,
}

/// Layer-summed gaps between the current task and one archived task.
#[derive(Clone, Copy, Debug)]
pub struct GapNodes {
    pub deconv: NodeId,
    pub contraction: NodeId,
}

fn sum_nodes(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let mut it = terms.iter().copied();
    let first = it
        .next()
        .ok_or_else(|| Error::dim("sum_nodes", "no terms"))?;
    it.try_fold(first, |acc, t| g.add(acc, t))
}

/// `sum_l ||L_prev - L||^2`; only the live tensors receive gradients.
pub fn knowledge_gap_loss(g: &mut Graph, live: &[NodeId], snapshot: &[Tensor]) -> Result<NodeId> {
    if live.len() != snapshot.len() {
        return Err(Error::dim(
            "knowledge_gap_loss",
            format!(
                "{} live layers vs {} snapshot layers",
                live.len(),
                snapshot.len()
            ),
        ));
    }
    let mut terms = Vec::with_capacity(live.len());
    for (&l, prev) in live.iter().zip(snapshot) {
        let p = g.constant(prev.clone());
        terms.push(g.sq_l2_diff(p, l)?);
    }
    sum_nodes(g, &terms)
}

/// Plain-value version of [`knowledge_gap_loss`].
pub fn knowledge_gap(kb: &KnowledgeBase) -> Result<f64> {
    kb.layers()
        .iter()
        .zip(kb.snapshot())
        .map(|(l, p)| ops::sq_l2_diff(p, l))
        .sum()
}

/// `(sum_l ||K_i - K_t||^2, sum_l ||C_i - C_t||^2)` for every archived task.
pub fn factor_gap_losses(
    g: &mut Graph,
    current: &FactorNodes,
    archive: &[&TaskFactors],
) -> Result<Vec<GapNodes>> {
    let mut out = Vec::with_capacity(archive.len());
    for past in archive {
        if past.layers.len() != current.deconv.len() {
            return Err(Error::dim(
                "factor_gap_losses",
                format!(
                    "archived task {} has {} layers, current has {}",
                    past.task_id,
                    past.layers.len(),
                    current.deconv.len()
                ),
            ));
        }
        let mut k_terms = Vec::new();
        let mut c_terms = Vec::new();
        for (lf, (&k, &c)) in past
            .layers
            .iter()
            .zip(current.deconv.iter().zip(&current.contraction))
        {
            let pk = g.constant(lf.deconv.clone());
            k_terms.push(g.sq_l2_diff(pk, k)?);
            let pc = g.constant(lf.contraction.clone());
            c_terms.push(g.sq_l2_diff(pc, c)?);
        }
        out.push(GapNodes {
            deconv: sum_nodes(g, &k_terms)?,
            contraction: sum_nodes(g, &c_terms)?,
        });
    }
    Ok(out)
}

/// Softmax over each gap list, divided by the number of factorized layers.
pub fn attention_scores(
    deconv_gaps: &[f64],
    contraction_gaps: &[f64],
    l_max: usize,
) -> Result<AttentionScores> {
    if deconv_gaps.is_empty() || deconv_gaps.len() != contraction_gaps.len() {
        return Err(Error::dim(
            "attention_scores",
            format!(
                "need matching non-empty gap lists, got {} and {}",
                deconv_gaps.len(),
                contraction_gaps.len()
            ),
        ));
    }
    if l_max == 0 {
        return Err(Error::Config("l_max must be positive".into()));
    }
    let inv = 1.0 / l_max as f64;
    let weigh = |gaps: &[f64]| -> Result<Vec<f64>> {
        Ok(ops::softmax(gaps)?.into_iter().map(|p| p * inv).collect())
    };
    Ok(AttentionScores {
        deconv: weigh(deconv_gaps)?,
        contraction: weigh(contraction_gaps)?,
    })
}

/// Total objective and the attention scores used to build it.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: NodeId,
    pub scores: Option<AttentionScores>,
}

/// `L_c` alone when the archive is empty; otherwise
/// `L_c + lambda*L_L + sum_i a_K_i*L_K_i + sum_i a_C_i*L_C_i`.
pub fn total_loss(
    g: &mut Graph,
    lc: NodeId,
    kb: &KnowledgeBase,
    live: &[NodeId],
    current: &FactorNodes,
    archive: &[&TaskFactors],
    cfg: &MamConfig,
) -> Result<TotalLoss> {
    if archive.is_empty() {
        return Ok(TotalLoss {
            total: lc,
            scores: None,
        });
    }
    let l_max = current.deconv.len();
    let knowledge = knowledge_gap_loss(g, live, kb.snapshot())?;
    let knowledge = g.scale(knowledge, cfg.lambda_l);
    let gaps = factor_gap_losses(g, current, archive)?;
    let k_vals: Vec<f64> = gaps.iter().map(|gp| g.value(gp.deconv).item()).collect();
    let c_vals: Vec<f64> = gaps
        .iter()
        .map(|gp| g.value(gp.contraction).item())
        .collect();
    let scores = attention_scores(&k_vals, &c_vals, l_max)?;

    let mut terms = vec![lc, knowledge];
    if cfg.detach_attention {
        for (gp, (&wk, &wc)) in gaps
            .iter()
            .zip(scores.deconv.iter().zip(&scores.contraction))
        {
            terms.push(g.scale(gp.deconv, wk));
            terms.push(g.scale(gp.contraction, wc));
        }
    } else {
        let ks: Vec<NodeId> = gaps.iter().map(|gp| gp.deconv).collect();
        let cs: Vec<NodeId> = gaps.iter().map(|gp| gp.contraction).collect();
        for list in [ks, cs] {
            terms.push(attended_sum(g, &list, l_max)?);
        }
    }
    Ok(TotalLoss {
        total: sum_nodes(g, &terms)?,
        scores: Some(scores),
    })
}

/// `sum_i softmax(gaps)_i * gaps_i / l_max`, differentiated through the softmax.
fn attended_sum(g: &mut Graph, gaps: &[NodeId], l_max: usize) -> Result<NodeId> {
    let n = gaps.len();
    let v = g.stack(gaps)?;
    let row = g.reshape(v, &[1, n])?;
    let p = g.softmax_rows(row)?;
    let p = g.reshape(p, &[n])?;
    let weighted = g.mul(p, v)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, 1.0 / l_max as f64))
}
