//! Segmentation evaluation: Overall IoU (cumulative intersection over
//! cumulative union, not a mean of per-sample IoUs), Prec@X with strict
//! inequality, and length-bucketed IoU.

use std::collections::BTreeMap;

use crate::tensor::{invalid_arg, Result, TensorError};

pub const PREC_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Sigmoid output → binary mask; ties at exactly 0.5 go to foreground so an
/// untrained all-0.5 model behaves deterministically.
pub fn threshold_mask(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p >= 0.5).collect()
}

/// Per-sample intersection and union pixel counts.
pub fn mask_iu(pred: &[bool], gt: &[bool]) -> (u64, u64) {
    let mut i = 0;
    let mut u = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        if p && g {
            i += 1;
        }
        if p || g {
            u += 1;
        }
    }
    (i, u)
}

/// Per-sample IoU; the empty-vs-empty pair counts as a perfect match.
pub fn sample_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (i, u) = mask_iu(pred, gt);
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Σ|pred∩gt| / Σ|pred∪gt| over all samples.
pub fn overall_iou(pairs: &[(Vec<bool>, Vec<bool>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid_arg("overall_iou", "empty sample list"));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (pred, gt) in pairs {
        if pred.len() != gt.len() {
            return Err(TensorError::ShapeMismatch {
                op: "overall_iou",
                lhs: vec![pred.len()],
                rhs: vec![gt.len()],
            });
        }
        let (i, u) = mask_iu(pred, gt);
        inter += i;
        union += u;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Fraction of samples whose IoU strictly exceeds the threshold.
pub fn prec_at(ious: &[f64], x: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v > x).count() as f64 / ious.len() as f64
}

/// Cumulative IoU per expression-length bucket. `bucket_edges` are ascending
/// upper bounds (inclusive); lengths above the last edge fall into a final
/// open bucket. Empty buckets are absent from the result.
pub fn bucket_by_length(
    lengths: &[usize],
    pairs: &[(Vec<bool>, Vec<bool>)],
    bucket_edges: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if lengths.len() != pairs.len() {
        return Err(invalid_arg(
            "bucket_by_length",
            format!("{} lengths vs {} samples", lengths.len(), pairs.len()),
        ));
    }
    if bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid_arg("bucket_by_length", "bucket edges must ascend"));
    }
    let bucket_of = |len: usize| {
        bucket_edges
            .iter()
            .position(|&e| len <= e)
            .unwrap_or(bucket_edges.len())
    };
    type Group = Vec<(Vec<bool>, Vec<bool>)>;
    let mut grouped: BTreeMap<usize, Group> = BTreeMap::new();
    for (len, pair) in lengths.iter().zip(pairs) {
        grouped.entry(bucket_of(*len)).or_default().push(pair.clone());
    }
    grouped
        .into_iter()
        .map(|(b, ps)| Ok((b, overall_iou(&ps)?)))
        .collect()
}

/// Everything `eval` reports, in deterministic iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall_iou: f64,
    /// threshold (×100, to stay ordered and hashable) → precision
    pub prec_at: BTreeMap<u32, f64>,
    /// bucket index → cumulative IoU
    pub length_buckets: BTreeMap<usize, f64>,
}

pub fn evaluate(
    pairs: &[(Vec<bool>, Vec<bool>)],
    lengths: &[usize],
    bucket_edges: &[usize],
) -> Result<EvalReport> {
    let ious: Vec<f64> = pairs.iter().map(|(p, g)| sample_iou(p, g)).collect();
    Ok(EvalReport {
        overall_iou: overall_iou(pairs)?,
        prec_at: PREC_THRESHOLDS
            .iter()
            .map(|&x| ((x * 100.0).round() as u32, prec_at(&ious, x)))
            .collect(),
        length_buckets: bucket_by_length(lengths, pairs, bucket_edges)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b != 0).collect()
    }

    #[test]
    fn perfect_and_disjoint_predictions() {
        let gt = mask(&[1, 1, 0, 0]);
        assert_eq!(overall_iou(&[(gt.clone(), gt.clone())]).unwrap(), 1.0);
        let pred = mask(&[0, 0, 1, 1]);
        assert_eq!(overall_iou(&[(pred, gt)]).unwrap(), 0.0);
    }

    #[test]
    fn cumulative_definition_differs_from_mean() {
        // (I,U) = (3,4) and (1,8): cumulative 4/12, mean would be 0.4375
        let a = (mask(&[1, 1, 1, 1]), mask(&[1, 1, 1, 0]));
        assert_eq!(mask_iu(&a.0, &a.1), (3, 4));
        let b = (
            mask(&[1, 1, 1, 0, 0, 0, 0, 0, 0]),
            mask(&[1, 0, 0, 1, 1, 1, 1, 1, 0]),
        );
        assert_eq!(mask_iu(&b.0, &b.1), (1, 8));
        let got = overall_iou(&[a.clone(), b.clone()]).unwrap();
        assert!((got - 4.0 / 12.0).abs() <= 1e-15);
        let mean = (sample_iou(&a.0, &a.1) + sample_iou(&b.0, &b.1)) / 2.0;
        assert!((mean - 0.4375).abs() <= 1e-15);
        assert!((got - mean).abs() > 0.1);
    }

    #[test]
    fn reorder_invariance() {
        let a = (mask(&[1, 1, 0]), mask(&[1, 0, 0]));
        let b = (mask(&[0, 1, 1]), mask(&[0, 1, 0]));
        let c = (mask(&[1, 0, 1]), mask(&[1, 0, 1]));
        let x = overall_iou(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = overall_iou(&[c, a, b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn prec_strict_inequality() {
        assert_eq!(prec_at(&[0.55], 0.5), 1.0);
        assert_eq!(prec_at(&[0.55], 0.6), 0.0);
        // exactly at the threshold does not count ("exceeds")
        assert_eq!(prec_at(&[0.5], 0.5), 0.0);
        assert_eq!(prec_at(&[1.0, 1.0], 0.9), 1.0);
        let ious = [0.45, 0.65, 0.95];
        assert!((prec_at(&ious, 0.5) - 2.0 / 3.0).abs() <= 1e-15);
        assert!((prec_at(&ious, 0.9) - 1.0 / 3.0).abs() <= 1e-15);
    }

    #[test]
    fn single_bucket_equals_overall() {
        let pairs = vec![
            (mask(&[1, 1, 0, 0]), mask(&[1, 0, 0, 0])),
            (mask(&[0, 1, 1, 0]), mask(&[0, 1, 1, 1])),
        ];
        let lengths = vec![2, 5];
        let buckets = bucket_by_length(&lengths, &pairs, &[100]).unwrap();
        assert_eq!(buckets.len(), 1);
        assert_eq!(buckets[&0], overall_iou(&pairs).unwrap());
    }

    #[test]
    fn empty_buckets_are_absent() {
        let pairs = vec![(mask(&[1]), mask(&[1])), (mask(&[1]), mask(&[0]))];
        let lengths = vec![1, 9];
        // edges 2,5: lengths 1 → bucket 0, 9 → open bucket 2; bucket 1 empty
        let buckets = bucket_by_length(&lengths, &pairs, &[2, 5]).unwrap();
        assert_eq!(buckets.keys().copied().collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn hand_grouped_buckets() {
        let pairs = vec![
            (mask(&[1, 1]), mask(&[1, 0])), // (1,2)
            (mask(&[1, 0]), mask(&[1, 0])), // (1,1)
            (mask(&[1, 1]), mask(&[0, 1])), // (1,2)
            (mask(&[0, 1]), mask(&[1, 1])), // (1,2)
        ];
        let lengths = vec![1, 2, 4, 5];
        let buckets = bucket_by_length(&lengths, &pairs, &[3]).unwrap();
        // bucket 0: samples 0,1 → (1+1)/(2+1); bucket 1: samples 2,3 → 2/4
        assert!((buckets[&0] - 2.0 / 3.0).abs() <= 1e-15);
        assert!((buckets[&1] - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn untrained_half_maps_threshold_to_full_foreground() {
        let probs = vec![0.5; 6];
        assert!(threshold_mask(&probs).iter().all(|&b| b));
    }

    proptest! {
        #[test]
        fn prec_at_is_non_increasing(ious in proptest::collection::vec(0.0f64..1.0, 1..40)) {
            let vals: Vec<f64> = PREC_THRESHOLDS.iter().map(|&x| prec_at(&ious, x)).collect();
            for w in vals.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn overall_iou_bounded(
            bits in proptest::collection::vec((0u8..2, 0u8..2), 1..60)
        ) {
            let pred: Vec<bool> = bits.iter().map(|&(p, _)| p != 0).collect();
            let gt: Vec<bool> = bits.iter().map(|&(_, g)| g != 0).collect();
            let v = overall_iou(&[(pred, gt)]).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
