//! Stage-2 loss over a batch of conversations: cross-entropy on the fused
//! classifier plus weighted audio and video distillation terms.

use serde::{Deserialize, Serialize};

use super::{FusionNet, FusionNodes, SequenceBatch};
use crate::autodiff::{Graph, NodeId};
use crate::distill::{
    check_coefficients, cross_entropy_node, feature_loss_node, soft_label_loss_node,
};
use crate::error::Result;
use crate::nn::RunMode;
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Weights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

/// Loss nodes of one batch. Distillation terms are `None` when the network
/// has no audio/video streams or the batch has fewer than two utterances.
#[derive(Clone, Debug)]
pub struct Stage2Terms {
    pub total: NodeId,
    pub ce: NodeId,
    /// `(L_s, L_f)` for audio and video.
    pub kd_audio: Option<(NodeId, NodeId)>,
    pub kd_video: Option<(NodeId, NodeId)>,
    pub outputs: Vec<FusionNodes>,
    /// Real-position logits of the whole batch, in batch order.
    pub logits: NodeId,
    pub labels: Vec<usize>,
}

/// Builds `L_CE + α·(L_s^a + L_f^a) + β·(L_s^v + L_f^v)` on `g`.
///
/// The distillation terms are always built (for logging) but a term joins
/// the total only when its coefficient is positive, so zero coefficients give
/// exactly the cross-entropy graph.
pub fn stage2_objective<T: Scalar, N: FusionNet>(
    g: &mut Graph<'_, T>,
    net: &N,
    batch: &[SequenceBatch<T>],
    w: &Stage2Weights,
    mode: &mut RunMode<'_>,
) -> Result<Stage2Terms> {
    check_coefficients(w.alpha, w.beta)?;
    build(g, net, batch, Some(w), mode)
}

/// Cross-entropy alone; no distillation node is ever created.
pub fn ce_only_objective<T: Scalar, N: FusionNet>(
    g: &mut Graph<'_, T>,
    net: &N,
    batch: &[SequenceBatch<T>],
    mode: &mut RunMode<'_>,
) -> Result<Stage2Terms> {
    build(g, net, batch, None, mode)
}

fn build<T: Scalar, N: FusionNet>(
    g: &mut Graph<'_, T>,
    net: &N,
    batch: &[SequenceBatch<T>],
    weights: Option<&Stage2Weights>,
    mode: &mut RunMode<'_>,
) -> Result<Stage2Terms> {
    let mut outputs = Vec::with_capacity(batch.len());
    let mut logit_rows = Vec::new();
    let mut stream_rows: [Vec<NodeId>; 3] = Default::default();
    let mut aux_rows: [Vec<NodeId>; 3] = Default::default();
    let mut labels = Vec::new();
    for seq in batch {
        let out = net.forward_sequence(g, seq, mode)?;
        let real = seq.real_positions();
        labels.extend(real.iter().map(|&i| seq.labels[i]));
        logit_rows.push(g.select_rows(out.logits, &real)?);
        if let (Some(streams), Some(aux)) = (out.streams, out.aux_logits) {
            for m in 0..3 {
                stream_rows[m].push(g.select_rows(streams[m], &real)?);
                aux_rows[m].push(g.select_rows(aux[m], &real)?);
            }
        }
        outputs.push(out);
    }
    let cat = |g: &mut Graph<'_, T>, parts: &[NodeId]| -> Result<NodeId> {
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(parts)
        }
    };
    let logits = cat(g, &logit_rows)?;
    let ce = cross_entropy_node(g, logits, &labels)?;
    let has_kd = aux_rows[0].len() == batch.len() && !batch.is_empty() && labels.len() >= 2;
    let (kd_audio, kd_video) = match weights {
        Some(w) if has_kd => {
            let t_feat = cat(g, &stream_rows[0])?;
            let t_logit = cat(g, &aux_rows[0])?;
            let mut kd = |m: usize| -> Result<(NodeId, NodeId)> {
                let s_feat = cat(g, &stream_rows[m])?;
                let s_logit = cat(g, &aux_rows[m])?;
                let ls = soft_label_loss_node(g, t_logit, s_logit, w.tau)?;
                let lf = feature_loss_node(g, t_feat, s_feat, w.tau)?;
                Ok((ls, lf))
            };
            (Some(kd(1)?), Some(kd(2)?))
        }
        _ => (None, None),
    };
    let mut total = ce;
    let (alpha, beta) = weights.map_or((0.0, 0.0), |w| (w.alpha, w.beta));
    for (coef, term) in [(alpha, kd_audio), (beta, kd_video)] {
        if let (true, Some((ls, lf))) = (coef > 0.0, term) {
            let kd = g.add(ls, lf)?;
            let kd = g.scale(kd, lit(coef));
            total = g.add(total, kd)?;
        }
    }
    Ok(Stage2Terms {
        total,
        ce,
        kd_audio,
        kd_video,
        outputs,
        logits,
        labels,
    })
}
