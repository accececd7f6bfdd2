//! The four-term joint training loss: normalized classification and
//! regression sums for the proposal head plus the same pair for the ROI
//! head. Classification is softmax cross-entropy; regression is smooth-L1
//! over positive samples only, and an empty regression list contributes 0.

use crate::tensor::ops as tops;
use crate::tensor::{DiffGraph, Tensor, Var};
use crate::{Error, Result};

/// Every term of the joint loss for one image, in plain data form.
#[derive(Debug, Clone, Default)]
pub struct LossBatch {
    /// (objectness logits, label) per sampled anchor.
    pub rpn_cls: Vec<([f64; 2], usize)>,
    /// (predicted deltas, target deltas) per positive anchor.
    pub rpn_reg: Vec<([f64; 4], [f64; 4])>,
    /// (class logits, label) per sampled ROI.
    pub roi_cls: Vec<([f64; 2], usize)>,
    /// (predicted deltas, target deltas) per positive ROI.
    pub roi_reg: Vec<([f64; 4], [f64; 4])>,
}

fn mean_xent(terms: &[([f64; 2], usize)]) -> Result<f64> {
    let n = terms.len();
    let mut logits = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (l, y) in terms {
        logits.extend_from_slice(l);
        labels.push(*y);
    }
    let t = Tensor::new(vec![n, 2], logits)?;
    let (losses, _) = tops::softmax_xent_rows(&t, &labels)?;
    Ok(losses.iter().sum::<f64>() / n as f64)
}

fn mean_smooth_l1(terms: &[([f64; 4], [f64; 4])]) -> Result<f64> {
    if terms.is_empty() {
        return Ok(0.0);
    }
    let n = terms.len();
    let mut pred = Vec::with_capacity(4 * n);
    let mut target = Vec::with_capacity(4 * n);
    for (p, t) in terms {
        pred.extend_from_slice(p);
        target.extend_from_slice(t);
    }
    let p = Tensor::new(vec![n, 4], pred)?;
    let t = Tensor::new(vec![n, 4], target)?;
    Ok(tops::smooth_l1_rows(&p, &t)?.iter().sum::<f64>() / n as f64)
}

/// Evaluate the joint loss:
/// `L = (1/N_c) sum L_c + (1/N_r) sum L_r + (1/N_c') sum L_c + (1/N_r') sum L_r`.
pub fn joint_loss(batch: &LossBatch) -> Result<f64> {
    if batch.rpn_cls.is_empty() || batch.roi_cls.is_empty() {
        return Err(Error::InvalidArgument(
            "joint loss requires non-empty classification terms for both heads".into(),
        ));
    }
    Ok(mean_xent(&batch.rpn_cls)?
        + mean_smooth_l1(&batch.rpn_reg)?
        + mean_xent(&batch.roi_cls)?
        + mean_smooth_l1(&batch.roi_reg)?)
}

/// A regression term pair living on a graph: `[N,4]` predictions plus their
/// constant targets.
pub struct RegTerms {
    pub pred: Var,
    pub target: Tensor,
}

/// Assemble the joint loss as a graph node so it can be differentiated.
/// `rpn_cls` / `roi_cls` are `[N,2]` logit rows with one label each;
/// regression terms may be absent when an image has no positives.
pub fn joint_loss_on_graph(
    graph: &mut DiffGraph,
    rpn_cls: Var,
    rpn_labels: Vec<usize>,
    rpn_reg: Option<RegTerms>,
    roi_cls: Var,
    roi_labels: Vec<usize>,
    roi_reg: Option<RegTerms>,
) -> Result<Var> {
    if rpn_labels.is_empty() || roi_labels.is_empty() {
        return Err(Error::InvalidArgument(
            "joint loss requires non-empty classification terms for both heads".into(),
        ));
    }
    let mut terms = Vec::with_capacity(4);
    let n_c = rpn_labels.len() as f64;
    let l = graph.softmax_xent_rows(rpn_cls, rpn_labels)?;
    let l = graph.sum_all(l)?;
    terms.push(graph.scale(l, 1.0 / n_c)?);
    if let Some(reg) = rpn_reg {
        let n_r = reg.target.shape()[0] as f64;
        let l = graph.smooth_l1_rows(reg.pred, reg.target)?;
        let l = graph.sum_all(l)?;
        terms.push(graph.scale(l, 1.0 / n_r)?);
    }
    let n_c2 = roi_labels.len() as f64;
    let l = graph.softmax_xent_rows(roi_cls, roi_labels)?;
    let l = graph.sum_all(l)?;
    terms.push(graph.scale(l, 1.0 / n_c2)?);
    if let Some(reg) = roi_reg {
        let n_r2 = reg.target.shape()[0] as f64;
        let l = graph.smooth_l1_rows(reg.pred, reg.target)?;
        let l = graph.sum_all(l)?;
        terms.push(graph.scale(l, 1.0 / n_r2)?);
    }
    graph.add_list(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_vanish() {
        let batch = LossBatch {
            rpn_cls: vec![([0.0, 50.0], 1), ([50.0, 0.0], 0)],
            rpn_reg: vec![([0.1, -0.2, 0.3, 0.0], [0.1, -0.2, 0.3, 0.0])],
            roi_cls: vec![([50.0, 0.0], 0)],
            roi_reg: vec![],
        };
        assert!(joint_loss(&batch).unwrap() < 1e-8);
    }

    #[test]
    fn single_uniform_rpn_term_gives_ln2() {
        let batch = LossBatch {
            rpn_cls: vec![([0.3, 0.3], 0)],
            rpn_reg: vec![],
            roi_cls: vec![([10.0, -40.0], 0)], // effectively zero
            roi_reg: vec![],
        };
        let l = joint_loss(&batch).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-10, "loss {l}");
    }

    #[test]
    fn empty_classification_terms_are_rejected() {
        let batch = LossBatch {
            rpn_cls: vec![],
            roi_cls: vec![([0.0, 1.0], 1)],
            ..LossBatch::default()
        };
        assert!(joint_loss(&batch).is_err());
    }

    fn random_batch(rng: &mut ChaCha8Rng, with_reg: bool) -> LossBatch {
        let mut b = LossBatch::default();
        for _ in 0..rng.gen_range(1..8) {
            b.rpn_cls
                .push(([rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)], rng.gen_range(0..2)));
        }
        for _ in 0..rng.gen_range(1..5) {
            b.roi_cls
                .push(([rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)], rng.gen_range(0..2)));
        }
        if with_reg {
            for _ in 0..rng.gen_range(1..5) {
                b.rpn_reg.push((
                    std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
                    std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
                ));
            }
            for _ in 0..rng.gen_range(1..4) {
                b.roi_reg.push((
                    std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
                    std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
                ));
            }
        }
        b
    }

    #[test]
    fn equals_sum_of_independent_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for round in 0..50 {
            let b = random_batch(&mut rng, round % 2 == 0);
            let want = mean_xent(&b.rpn_cls).unwrap()
                + mean_smooth_l1(&b.rpn_reg).unwrap()
                + mean_xent(&b.roi_cls).unwrap()
                + mean_smooth_l1(&b.roi_reg).unwrap();
            let got = joint_loss(&b).unwrap();
            assert!((got - want).abs() < 1e-12);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn duplicating_cls_terms_preserves_normalized_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let b = random_batch(&mut rng, false);
            let mut doubled = b.clone();
            doubled.rpn_cls.extend(b.rpn_cls.iter().cloned());
            doubled.roi_cls.extend(b.roi_cls.iter().cloned());
            let l1 = joint_loss(&b).unwrap();
            let l2 = joint_loss(&doubled).unwrap();
            assert!((l1 - l2).abs() < 1e-10, "{l1} vs {l2}");
        }
    }

    #[test]
    fn graph_assembly_matches_plain_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for round in 0..20 {
            let b = random_batch(&mut rng, round % 3 != 0);
            let mut g = DiffGraph::training();
            let rpn_logits: Vec<f64> = b.rpn_cls.iter().flat_map(|(l, _)| *l).collect();
            let rpn_cls = g.constant(Tensor::new(vec![b.rpn_cls.len(), 2], rpn_logits).unwrap());
            let roi_logits: Vec<f64> = b.roi_cls.iter().flat_map(|(l, _)| *l).collect();
            let roi_cls = g.constant(Tensor::new(vec![b.roi_cls.len(), 2], roi_logits).unwrap());
            let mk_reg = |g: &mut DiffGraph, terms: &[([f64; 4], [f64; 4])]| {
                if terms.is_empty() {
                    return None;
                }
                let pred: Vec<f64> = terms.iter().flat_map(|(p, _)| *p).collect();
                let tgt: Vec<f64> = terms.iter().flat_map(|(_, t)| *t).collect();
                Some(RegTerms {
                    pred: g.constant(Tensor::new(vec![terms.len(), 4], pred).unwrap()),
                    target: Tensor::new(vec![terms.len(), 4], tgt).unwrap(),
                })
            };
            let rpn_reg = mk_reg(&mut g, &b.rpn_reg);
            let roi_reg = mk_reg(&mut g, &b.roi_reg);
            let loss = joint_loss_on_graph(
                &mut g,
                rpn_cls,
                b.rpn_cls.iter().map(|(_, y)| *y).collect(),
                rpn_reg,
                roi_cls,
                b.roi_cls.iter().map(|(_, y)| *y).collect(),
                roi_reg,
            )
            .unwrap();
            let want = joint_loss(&b).unwrap();
            assert!((g.value(loss).item() - want).abs() < 1e-12);
        }
    }
}
