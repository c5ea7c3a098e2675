//! Loss functions: classifier cross-entropy, soft-margin triplet with
//! batch-hard mining, temperature-softmax distillation, the X-triplet on
//! fused features, and the weighted total objective.

use crate::autodiff::{Tape, Value};
use crate::error::{CoreError, Result};
use crate::params::ClassifierParams;
use crate::real::Real;
use crate::tensor::TensorBase;

/// One mined triplet. Distances are squared Euclidean, computed in f64 on
/// detached feature values; mining is a discrete choice and carries no
/// gradient of its own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletSelection {
    pub anchor_idx: usize,
    pub pos_idx: usize,
    pub neg_idx: usize,
    pub d_ap: f64,
    pub d_an: f64,
}

/// Scalar record of one step's loss terms. `l_ins = l_id + l_tri`,
/// `l_interx = l_xid + l_xtri`, and the total is the weighted sum; all
/// arithmetic here is f64, independent of the tape's scalar type.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_tri: f64,
    pub l_ins: f64,
    pub l_intrax: f64,
    pub l_xid: f64,
    pub l_xtri: f64,
    pub l_interx: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn assemble(
        l_id: f64,
        l_tri: f64,
        l_intrax: f64,
        l_xid: f64,
        l_xtri: f64,
        lambda1: f64,
        lambda2: f64,
    ) -> Self {
        let l_ins = l_id + l_tri;
        let l_interx = l_xid + l_xtri;
        LossBreakdown {
            l_id,
            l_tri,
            l_ins,
            l_intrax,
            l_xid,
            l_xtri,
            l_interx,
            l_total: l_ins + lambda1 * l_intrax + lambda2 * l_interx,
        }
    }

    /// The weighted-sum identity the total must satisfy.
    pub fn total_consistent(&self, lambda1: f64, lambda2: f64, tol: f64) -> bool {
        let rhs = self.l_ins + lambda1 * self.l_intrax + lambda2 * self.l_interx;
        (self.l_total - rhs).abs() <= tol
    }
}

/// Mean cross-entropy of a linear classifier over batch features `[B, D]`.
pub fn id_loss<T: Real>(
    tape: &mut Tape<T>,
    features: Value,
    labels: &[usize],
    classifier: &ClassifierParams<Value>,
    smoothing: f64,
) -> Result<Value> {
    let logits = tape.matmul(features, classifier.w)?;
    let logits = tape.add_row(logits, classifier.b)?;
    tape.cross_entropy_mean(logits, labels, smoothing)
}

/// Batch-hard mining: per anchor, the same-identity instance at maximum
/// squared distance and the different-identity instance at minimum squared
/// distance, ties broken toward the lowest batch index.
pub fn batch_hard_mine<T: Real>(
    features: &TensorBase<T>,
    labels: &[usize],
) -> Result<Vec<TripletSelection>> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(CoreError::Batch(format!(
            "features {:?} do not match {} labels",
            features.shape(),
            labels.len()
        )));
    }
    let b = labels.len();
    let dist = |i: usize, j: usize| -> f64 {
        features.row(i)
            .iter()
            .zip(features.row(j))
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum()
    };
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for o in 0..b {
            let d = dist(a, o);
            if labels[o] == labels[a] {
                if o != a && hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((o, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((o, d));
            }
        }
        let (pos_idx, d_ap) = hardest_pos.ok_or_else(|| {
            CoreError::Batch(format!(
                "anchor {a} (identity {}) is its identity's only instance",
                labels[a]
            ))
        })?;
        let (neg_idx, d_an) = hardest_neg.ok_or_else(|| {
            CoreError::Batch("batch contains a single identity".into())
        })?;
        out.push(TripletSelection { anchor_idx: a, pos_idx, neg_idx, d_ap, d_an });
    }
    Ok(out)
}

/// Soft-margin triplet, `log(1 + exp(d_ap - d_an))` on squared Euclidean
/// distances of unnormalized features; the softplus keeps easy triplets
/// from underflowing and hard ones from overflowing.
pub fn triplet_loss<T: Real>(
    tape: &mut Tape<T>,
    f_a: Value,
    f_p: Value,
    f_n: Value,
) -> Result<Value> {
    let d_ap = tape.sq_euclidean(f_a, f_p)?;
    let d_an = tape.sq_euclidean(f_a, f_n)?;
    let diff = tape.sub(d_ap, d_an)?;
    Ok(tape.softplus(diff))
}

/// The fused-feature triplet: the InterX feature as anchor, pulled toward
/// the hard positive's instance feature and away from the hard negative's.
pub fn xtriplet_loss<T: Real>(
    tape: &mut Tape<T>,
    f_interx: Value,
    f_pos: Value,
    f_neg: Value,
) -> Result<Value> {
    triplet_loss(tape, f_interx, f_pos, f_neg)
}

/// Scales a feature row to unit L2 norm (optional preprocessing for the
/// triplet distances).
pub fn l2_normalize<T: Real>(tape: &mut Tape<T>, f: Value) -> Result<Value> {
    let sq = tape.mul(f, f)?;
    let total = tape.sum(sq);
    let safe = tape.add_scalar(total, T::from_f64(1e-12));
    let log = tape.log(safe);
    let half = tape.mul_scalar(log, T::from_f64(-0.5));
    let inv_norm = tape.exp(half);
    tape.scale_by_node(f, inv_norm)
}

/// Temperature softmax `exp(f/tau) / sum exp(f/tau)` in f64, max-subtracted.
/// Teacher targets are produced here once and then treated as constants.
pub fn softmax_distribution(f: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(CoreError::Config(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    if f.is_empty() {
        return Err(CoreError::Config("softmax over an empty feature".into()));
    }
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / denom).collect())
}

/// Distillation cross-entropy `-sum P(teacher) log P(student)`, both sides
/// at temperature `tau`. The teacher distribution enters as a constant, so
/// gradient reaches only the student feature.
pub fn intrax_loss<T: Real>(
    tape: &mut Tape<T>,
    teacher_probs: &[f64],
    f_ins: Value,
    tau: f64,
) -> Result<Value> {
    if tau <= 0.0 {
        return Err(CoreError::Config(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    let shape = tape.shape(f_ins).to_vec();
    if shape.len() != 2 || shape[0] != 1 || shape[1] != teacher_probs.len() {
        return Err(CoreError::ShapeMismatch {
            op: "intrax_loss",
            lhs: shape,
            rhs: vec![1, teacher_probs.len()],
        });
    }
    let scaled = tape.mul_scalar(f_ins, T::from_f64(1.0 / tau));
    let log_p = tape.log_softmax(scaled, 1)?;
    let probs: Vec<T> = teacher_probs.iter().map(|&p| T::from_f64(p)).collect();
    let w = tape.constant(&TensorBase::from_vec(vec![1, teacher_probs.len()], probs)?);
    let weighted = tape.mul(log_p, w)?;
    let total = tape.sum(weighted);
    Ok(tape.mul_scalar(total, T::from_f64(-1.0)))
}

/// Weighted total `l_ins + lambda1 * l_intrax + lambda2 * l_interx` on the
/// tape. Ablated terms are passed as `None` and contribute nothing, not
/// even a zero-gradient path.
pub fn assemble_total<T: Real>(
    tape: &mut Tape<T>,
    l_ins: Value,
    l_intrax: Option<Value>,
    l_interx: Option<Value>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Value> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(CoreError::Config(format!(
            "loss weights must be non-negative, got lambda1={lambda1} lambda2={lambda2}"
        )));
    }
    let mut total = l_ins;
    if let Some(l) = l_intrax {
        let scaled = tape.mul_scalar(l, T::from_f64(lambda1));
        total = tape.add(total, scaled)?;
    }
    if let Some(l) = l_interx {
        let scaled = tape.mul_scalar(l, T::from_f64(lambda2));
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ClassifierParams;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn feature_const(tape: &mut Tape<f32>, data: &[f32]) -> Value {
        tape.constant(&Tensor::from_vec(vec![1, data.len()], data.to_vec()).unwrap())
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut tape = Tape::<f32>::new();
        let features = tape.constant(&Tensor::zeros(vec![4, 5]));
        let classifier = ClassifierParams {
            w: tape.constant(&Tensor::zeros(vec![5, 3])),
            b: tape.constant(&Tensor::zeros(vec![3])),
        };
        let loss = id_loss(&mut tape, features, &[0, 1, 2, 0], &classifier, 0.0).unwrap();
        assert!((tape.item(loss) as f64 - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let run = |margin: f32| {
            let mut tape = Tape::<f32>::new();
            let mut data = vec![0.0; 2 * 3];
            data[0] = margin;
            data[1 * 3 + 2] = margin;
            let features = tape.constant(&Tensor::from_vec(vec![2, 3], data).unwrap());
            let classifier = ClassifierParams {
                w: tape.constant(&Tensor::eye(3)),
                b: tape.constant(&Tensor::zeros(vec![3])),
            };
            let loss = id_loss(&mut tape, features, &[0, 2], &classifier, 0.0).unwrap();
            tape.item(loss)
        };
        let (mild, sharp) = (run(10.0), run(20.0));
        assert!(sharp < mild);
        assert!(sharp < 1e-6, "{sharp}");
    }

    #[test]
    fn id_loss_matches_f64_oracle() {
        let mut rng = Rng::seed_from_u64(40);
        let data: Vec<f32> = (0..4 * 3).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let labels = [2usize, 0, 1, 1];

        let mut expect = 0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = data[r * 3..(r + 1) * 3].iter().map(|&v| v as f64).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expect += lse - row[label];
        }
        expect /= labels.len() as f64;

        let mut tape = Tape::<f32>::new();
        let features = tape.constant(&Tensor::from_vec(vec![4, 3], data).unwrap());
        let classifier = ClassifierParams {
            w: tape.constant(&Tensor::eye(3)),
            b: tape.constant(&Tensor::zeros(vec![3])),
        };
        let loss = id_loss(&mut tape, features, &labels, &classifier, 0.0).unwrap();
        assert!((tape.item(loss) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn id_loss_rejects_out_of_range_labels() {
        let mut tape = Tape::<f32>::new();
        let features = tape.constant(&Tensor::zeros(vec![2, 3]));
        let classifier = ClassifierParams {
            w: tape.constant(&Tensor::eye(3)),
            b: tape.constant(&Tensor::zeros(vec![3])),
        };
        assert!(id_loss(&mut tape, features, &[0, 3], &classifier, 0.0).is_err());
    }

    #[test]
    fn mining_matches_hand_positions() {
        let features = Tensor::from_vec(vec![4, 1], vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        let sel = batch_hard_mine(&features, &[0, 0, 1, 1]).unwrap();
        assert_eq!(
            sel[0],
            TripletSelection { anchor_idx: 0, pos_idx: 1, neg_idx: 2, d_ap: 1.0, d_an: 100.0 }
        );
        assert_eq!(
            sel[3],
            TripletSelection { anchor_idx: 3, pos_idx: 2, neg_idx: 1, d_ap: 1.0, d_an: 100.0 }
        );
    }

    #[test]
    fn mining_ties_choose_lowest_index() {
        let features = Tensor::ones(vec![4, 2]);
        let sel = batch_hard_mine(&features, &[0, 0, 1, 1]).unwrap();
        let picks: Vec<(usize, usize)> = sel.iter().map(|s| (s.pos_idx, s.neg_idx)).collect();
        assert_eq!(picks, vec![(1, 2), (0, 2), (3, 0), (2, 0)]);
        assert!(sel.iter().all(|s| s.d_ap == 0.0 && s.d_an == 0.0));
    }

    #[test]
    fn mining_matches_brute_force() {
        let mut rng = Rng::seed_from_u64(41);
        let labels = [3usize, 1, 3, 0, 1, 0, 3, 1];
        for _ in 0..25 {
            let data: Vec<f32> = (0..8 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let features = Tensor::from_vec(vec![8, 4], data.clone()).unwrap();
            let sel = batch_hard_mine(&features, &labels).unwrap();

            let dist = |i: usize, j: usize| -> f64 {
                (0..4)
                    .map(|c| (data[i * 4 + c] as f64 - data[j * 4 + c] as f64).powi(2))
                    .sum()
            };
            for a in 0..8 {
                let (mut pos, mut neg) = (None::<(usize, f64)>, None::<(usize, f64)>);
                for o in 0..8 {
                    let d = dist(a, o);
                    if labels[o] == labels[a] && o != a && pos.map_or(true, |(_, b)| d > b) {
                        pos = Some((o, d));
                    }
                    if labels[o] != labels[a] && neg.map_or(true, |(_, b)| d < b) {
                        neg = Some((o, d));
                    }
                }
                let (pi, pd) = pos.unwrap();
                let (ni, nd) = neg.unwrap();
                assert_eq!((sel[a].pos_idx, sel[a].neg_idx), (pi, ni));
                assert_eq!((sel[a].d_ap, sel[a].d_an), (pd, nd));
            }
        }
    }

    #[test]
    fn mining_rejects_degenerate_batches() {
        let features = Tensor::ones(vec![3, 2]);
        assert!(batch_hard_mine(&features, &[0, 0, 1]).is_err());
        let features = Tensor::ones(vec![2, 2]);
        assert!(batch_hard_mine(&features, &[5, 5]).is_err());
        assert!(batch_hard_mine(&features, &[5]).is_err());
    }

    #[test]
    fn balanced_triplet_is_ln_two() {
        let mut tape = Tape::<f32>::new();
        let f_a = feature_const(&mut tape, &[0.0, 0.0]);
        let f_p = feature_const(&mut tape, &[1.0, 2.0]);
        let f_n = feature_const(&mut tape, &[2.0, 1.0]);
        let loss = triplet_loss(&mut tape, f_a, f_p, f_n).unwrap();
        assert!((tape.item(loss) as f64 - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn easy_triplet_underflows_to_zero_without_panic() {
        let mut tape = Tape::<f32>::new();
        let f_a = feature_const(&mut tape, &[0.0]);
        let f_p = feature_const(&mut tape, &[0.0]);
        let f_n = feature_const(&mut tape, &[10.0]);
        let loss = triplet_loss(&mut tape, f_a, f_p, f_n).unwrap();
        let v = tape.item(loss);
        assert!(v.is_finite() && v >= 0.0 && v < 1e-6, "{v}");
    }

    #[test]
    fn triplet_matches_formula_oracle() {
        let mut tape = Tape::<f32>::new();
        let f_a = feature_const(&mut tape, &[0.0]);
        let f_p = feature_const(&mut tape, &[1.0]);
        let f_n = feature_const(&mut tape, &[2.0]);
        let loss = triplet_loss(&mut tape, f_a, f_p, f_n).unwrap();
        let expect = (1f64 + (-3f64).exp()).ln();
        assert!((tape.item(loss) as f64 - expect).abs() < 1e-7);

        let xloss = xtriplet_loss(&mut tape, f_a, f_p, f_n).unwrap();
        assert_eq!(tape.item(loss).to_bits(), tape.item(xloss).to_bits());
    }

    #[test]
    fn l2_normalize_gives_unit_norm_and_keeps_direction() {
        let mut rng = Rng::seed_from_u64(42);
        let data: Vec<f32> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut tape = Tape::<f32>::new();
        let f = feature_const(&mut tape, &data);
        let unit = l2_normalize(&mut tape, f).unwrap();
        let out = tape.data(unit);
        let norm: f64 = out.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let expect_norm: f64 = data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        for (o, e) in out.iter().zip(&data) {
            assert!((*o as f64 - *e as f64 / expect_norm).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_distribution_constant_input_is_uniform() {
        let p = softmax_distribution(&[0.7; 5], 0.05).unwrap();
        for v in p {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_distribution_sharpens_at_low_temperature() {
        let p = softmax_distribution(&[0.1, 0.9, 0.3], 0.01).unwrap();
        assert!(p[1] > 0.999);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_distribution_matches_direct_formula() {
        let p = softmax_distribution(&[1.0, 2.0], 0.05).unwrap();
        let e = (-20f64).exp();
        assert!((p[0] - e / (1.0 + e)).abs() < 1e-9);
        assert!((p[1] - 1.0 / (1.0 + e)).abs() < 1e-9);
    }

    #[test]
    fn softmax_distribution_rejects_bad_temperature() {
        assert!(softmax_distribution(&[1.0], 0.0).is_err());
        assert!(softmax_distribution(&[1.0], -0.5).is_err());
        assert!(softmax_distribution(&[], 0.05).is_err());
    }

    #[test]
    fn self_distillation_equals_entropy_and_is_the_minimum() {
        let mut rng = Rng::seed_from_u64(43);
        let tau = 0.05;
        for _ in 0..50 {
            let f: Vec<f64> = (0..8).map(|_| rng.uniform(-0.5, 0.5) as f64).collect();
            let teacher = softmax_distribution(&f, tau).unwrap();
            let entropy: f64 = teacher.iter().map(|&p| -p * p.ln()).sum();

            let mut tape = Tape::<f64>::new();
            let fv = tape.constant(&TensorBase::from_vec(vec![1, 8], f.clone()).unwrap());
            let loss = intrax_loss(&mut tape, &teacher, fv, tau).unwrap();
            assert!((tape.item(loss) - entropy).abs() < 1e-9);

            let g: Vec<f64> = (0..8).map(|_| rng.uniform(-0.5, 0.5) as f64).collect();
            let gv = tape.constant(&TensorBase::from_vec(vec![1, 8], g).unwrap());
            let other = intrax_loss(&mut tape, &teacher, gv, tau).unwrap();
            assert!(tape.item(other) >= entropy - 1e-12, "Gibbs violated");
        }
    }

    #[test]
    fn uniform_teacher_and_student_give_ln_d() {
        let mut tape = Tape::<f32>::new();
        let f = feature_const(&mut tape, &[0.3; 4]);
        let loss = intrax_loss(&mut tape, &[0.25; 4], f, 0.05).unwrap();
        assert!((tape.item(loss) as f64 - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn intrax_loss_matches_f64_oracle() {
        let mut rng = Rng::seed_from_u64(44);
        let tau = 0.05;
        let ft: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0) as f64).collect();
        let fs: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0) as f64).collect();
        let teacher = softmax_distribution(&ft, tau).unwrap();

        let scaled: Vec<f64> = fs.iter().map(|v| v / tau).collect();
        let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let expect: f64 = teacher
            .iter()
            .zip(&scaled)
            .map(|(&p, &s)| -p * (s - lse))
            .sum();

        let mut tape = Tape::<f64>::new();
        let fv = tape.constant(&TensorBase::from_vec(vec![1, 8], fs).unwrap());
        let loss = intrax_loss(&mut tape, &teacher, fv, tau).unwrap();
        assert!((tape.item(loss) - expect).abs() < 1e-7);
    }

    #[test]
    fn intrax_loss_validates_inputs() {
        let mut tape = Tape::<f32>::new();
        let f = feature_const(&mut tape, &[1.0, 2.0]);
        assert!(intrax_loss(&mut tape, &[0.5, 0.5], f, 0.0).is_err());
        assert!(intrax_loss(&mut tape, &[0.5, 0.25, 0.25], f, 0.05).is_err());
    }

    #[test]
    fn total_weights_terms_per_the_objective() {
        let mut tape = Tape::<f32>::new();
        let l_ins = tape.constant_scalar(2.0);
        let l_intrax = tape.constant_scalar(3.0);
        let l_interx = tape.constant_scalar(4.0);
        let total =
            assemble_total(&mut tape, l_ins, Some(l_intrax), Some(l_interx), 5.0, 0.4).unwrap();
        assert!((tape.item(total) - 18.6).abs() < 1e-5);

        let bare = assemble_total(&mut tape, l_ins, None, None, 0.0, 0.0).unwrap();
        assert_eq!(tape.item(bare).to_bits(), 2f32.to_bits());

        assert!(assemble_total(&mut tape, l_ins, None, None, -1.0, 0.0).is_err());
    }

    #[test]
    fn breakdown_identity_holds() {
        let b = LossBreakdown::assemble(1.5, 0.7, 2.0, 0.9, 0.6, 20.0, 0.4);
        assert!((b.l_ins - 2.2).abs() < 1e-12);
        assert!((b.l_interx - 1.5).abs() < 1e-12);
        assert!(b.total_consistent(20.0, 0.4, 1e-6));
        assert!(!b.total_consistent(5.0, 0.4, 1e-6));
    }
}
