//! The full training objective: a base triplet loss, the composite triplet
//! and reconstruction losses, a regularisation loss, plus batch-level
//! negative sampling. Anchors, positives, and negatives are rows of one
//! forward pass; a shared negative index per anchor row feeds every triplet
//! term of a step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ForwardOutputs, ModelError};
use crate::numerics::{NumericsError, Real, Tape, Var};

/// Loss-term switches for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossMask {
    pub l_t: bool,
    pub l_rec: bool,
    pub l_ct: bool,
    pub l_w: bool,
    pub l_r: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self {
            l_t: true,
            l_rec: true,
            l_ct: true,
            l_w: true,
            l_r: true,
        }
    }
}

impl LossMask {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.l_t || self.l_rec || self.l_ct || self.l_w || self.l_r) {
            return Err("loss mask disables every term".into());
        }
        Ok(())
    }

    /// Composite-loss-only configuration (`l_rec + l_ct + l_w`).
    pub fn composite_only() -> Self {
        Self {
            l_t: false,
            l_rec: true,
            l_ct: true,
            l_w: true,
            l_r: false,
        }
    }

    pub fn without(self, term: &str) -> Self {
        let mut m = self;
        match term {
            "l_t" => m.l_t = false,
            "l_rec" => m.l_rec = false,
            "l_ct" => m.l_ct = false,
            "l_w" => m.l_w = false,
            "l_r" => m.l_r = false,
            other => panic!("unknown loss term {other}"),
        }
        m
    }
}

/// One negative row index per batch row, or `None` when the row's class is
/// the only class in the batch (such rows sit out the triplet terms).
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSamples {
    pub negative: Vec<Option<usize>>,
}

impl NegativeSamples {
    /// Anchor/negative index lists over the rows that found a negative.
    pub fn pairs(&self) -> TripletPairs {
        let mut anchors = Vec::new();
        let mut negatives = Vec::new();
        for (row, neg) in self.negative.iter().enumerate() {
            if let Some(n) = neg {
                anchors.push(row);
                negatives.push(*n);
            }
        }
        TripletPairs { anchors, negatives }
    }
}

/// Row index lists into the current batch: `anchors[i]` is a valid anchor
/// (and positive) row, `negatives[i]` its sampled negative.
#[derive(Clone, Debug, Default)]
pub struct TripletPairs {
    pub anchors: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripletPairs {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Draws, for each row, a uniform choice among rows of a different class.
pub fn sample_negatives(labels: &[u32], rng: &mut ChaCha8Rng) -> NegativeSamples {
    let negative = labels
        .iter()
        .map(|own| {
            let candidates: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| *l != own)
                .map(|(i, _)| i)
                .collect();
            if candidates.is_empty() {
                None
            } else {
                Some(candidates[rng.random_range(0..candidates.len())])
            }
        })
        .collect();
    NegativeSamples { negative }
}

/// Triplet hinge `mean(max(0, |a - p| - |a - n| + margin))` over rows.
pub fn triplet<S: Real>(
    tape: &mut Tape<S>,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: f64,
) -> Result<Var, NumericsError> {
    let dp = tape.l2_row(anchor, positive)?;
    let dn = tape.l2_row(anchor, negative)?;
    let gap = tape.sub(dp, dn)?;
    let shifted = tape.affine(gap, 1.0, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean_all(hinge)
}

fn gathered_term<S: Real>(
    tape: &mut Tape<S>,
    anchor: Var,
    positive: Var,
    negative_source: Var,
    pairs: &TripletPairs,
    margin: f64,
) -> Result<Var, NumericsError> {
    let a = tape.gather_rows(anchor, &pairs.anchors)?;
    let p = tape.gather_rows(positive, &pairs.anchors)?;
    let n = tape.gather_rows(negative_source, &pairs.negatives)?;
    triplet(tape, a, p, n, margin)
}

fn sum_terms<S: Real>(tape: &mut Tape<S>, terms: &[Var]) -> Result<Option<Var>, NumericsError> {
    let mut iter = terms.iter().copied();
    let first = match iter.next() {
        Some(v) => v,
        None => return Ok(None),
    };
    let mut acc = first;
    for t in iter {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(acc))
}

/// Base triplet loss aligning each branch with the projected label
/// embedding, in both anchor directions.
pub fn loss_base_triplet<S: Real>(
    tape: &mut Tape<S>,
    out: &ForwardOutputs,
    pairs: &TripletPairs,
    margin: f64,
) -> Result<Option<Var>, NumericsError> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::new();
    if let Some(theta_a) = out.theta_a {
        terms.push(gathered_term(tape, theta_a, out.theta_w, theta_a, pairs, margin)?);
        terms.push(gathered_term(tape, out.theta_w, theta_a, out.theta_w, pairs, margin)?);
    }
    if let Some(theta_v) = out.theta_v {
        terms.push(gathered_term(tape, theta_v, out.theta_w, theta_v, pairs, margin)?);
        terms.push(gathered_term(tape, out.theta_w, theta_v, out.theta_w, pairs, margin)?);
    }
    sum_terms(tape, &terms)
}

/// Reconstruction loss: every decoded embedding must recover the label
/// embedding `w` of its row.
pub fn loss_reconstruction<S: Real>(
    tape: &mut Tape<S>,
    out: &ForwardOutputs,
    w: Var,
) -> Result<Var, NumericsError> {
    let mut acc = tape.mse(out.rho_w, w)?;
    if let Some(rho_a) = out.rho_a {
        let t = tape.mse(rho_a, w)?;
        acc = tape.add(acc, t)?;
    }
    if let Some(rho_v) = out.rho_v {
        let t = tape.mse(rho_v, w)?;
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Composite triplet loss over the decoded embeddings.
pub fn loss_composite_triplet<S: Real>(
    tape: &mut Tape<S>,
    out: &ForwardOutputs,
    pairs: &TripletPairs,
    margin: f64,
) -> Result<Option<Var>, NumericsError> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::new();
    if let Some(rho_a) = out.rho_a {
        terms.push(gathered_term(tape, out.rho_w, rho_a, rho_a, pairs, margin)?);
    }
    if let Some(rho_v) = out.rho_v {
        terms.push(gathered_term(tape, out.rho_w, rho_v, rho_v, pairs, margin)?);
    }
    sum_terms(tape, &terms)
}

/// Word-anchored triplet loss comparing branch embeddings with the label
/// projection, both directions summed.
pub fn loss_w<S: Real>(
    tape: &mut Tape<S>,
    out: &ForwardOutputs,
    pairs: &TripletPairs,
    margin: f64,
) -> Result<Option<Var>, NumericsError> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::new();
    if let Some(theta_a) = out.theta_a {
        terms.push(gathered_term(tape, out.theta_w, theta_a, theta_a, pairs, margin)?);
        terms.push(gathered_term(tape, theta_a, out.theta_w, out.theta_w, pairs, margin)?);
    }
    if let Some(theta_v) = out.theta_v {
        terms.push(gathered_term(tape, out.theta_w, theta_v, theta_v, pairs, margin)?);
        terms.push(gathered_term(tape, theta_v, out.theta_w, out.theta_w, pairs, margin)?);
    }
    sum_terms(tape, &terms)
}

/// Regularisation: unimodal information is preserved by the reconstruction
/// heads and branch embeddings stay close to the label projection.
pub fn loss_regularisation<S: Real>(
    tape: &mut Tape<S>,
    out: &ForwardOutputs,
) -> Result<Var, NumericsError> {
    let mut terms = Vec::new();
    if let (Some(rec_v), Some(phi_v)) = (out.phi_rec_v, out.phi_v) {
        terms.push(tape.mse(rec_v, phi_v)?);
    }
    if let (Some(rec_a), Some(phi_a)) = (out.phi_rec_a, out.phi_a) {
        terms.push(tape.mse(rec_a, phi_a)?);
    }
    if let Some(theta_v) = out.theta_v {
        terms.push(tape.mse(theta_v, out.theta_w)?);
    }
    if let Some(theta_a) = out.theta_a {
        terms.push(tape.mse(theta_a, out.theta_w)?);
    }
    match sum_terms(tape, &terms)? {
        Some(v) => Ok(v),
        None => {
            let zero = crate::numerics::TensorData::scalar(S::zero());
            Ok(tape.constant(zero))
        }
    }
}

/// Scalar values of the individual terms and the total (disabled or
/// pair-less terms report exactly zero).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_t: f32,
    pub l_rec: f32,
    pub l_ct: f32,
    pub l_w: f32,
    pub l_r: f32,
    pub total: f32,
}

/// Tape handles of the enabled terms plus the total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_t: Option<Var>,
    pub l_rec: Option<Var>,
    pub l_ct: Option<Var>,
    pub l_w: Option<Var>,
    pub l_r: Option<Var>,
    pub total: Var,
}

fn scalar_of<S: Real>(tape: &Tape<S>, v: Option<Var>) -> f32 {
    v.map(|v| num_traits::ToPrimitive::to_f32(&tape.value(v).data()[0]).unwrap())
        .unwrap_or(0.0)
}

/// Builds the masked total `l = l_t + (l_rec + l_ct + l_w) + l_r` on the
/// tape. Disabled terms contribute exactly zero and leave no graph edges.
pub fn loss_total<S: Real>(
    tape: &mut Tape<S>,
    out: &ForwardOutputs,
    w: Var,
    pairs: &TripletPairs,
    mask: &LossMask,
    margin: f64,
) -> Result<(LossVars, LossBreakdown), ModelError> {
    mask.validate()
        .map_err(|reason| ModelError::InvalidConfig { reason })?;
    let l_t = if mask.l_t {
        loss_base_triplet(tape, out, pairs, margin)?
    } else {
        None
    };
    let l_rec = if mask.l_rec {
        Some(loss_reconstruction(tape, out, w)?)
    } else {
        None
    };
    let l_ct = if mask.l_ct {
        loss_composite_triplet(tape, out, pairs, margin)?
    } else {
        None
    };
    let l_w = if mask.l_w {
        loss_w(tape, out, pairs, margin)?
    } else {
        None
    };
    let l_r = if mask.l_r {
        Some(loss_regularisation(tape, out)?)
    } else {
        None
    };

    let enabled: Vec<Var> = [l_t, l_rec, l_ct, l_w, l_r].into_iter().flatten().collect();
    let total = match sum_terms(tape, &enabled)? {
        Some(v) => v,
        None => tape.constant(crate::numerics::TensorData::scalar(S::zero())),
    };
    let breakdown = LossBreakdown {
        l_t: scalar_of(tape, l_t),
        l_rec: scalar_of(tape, l_rec),
        l_ct: scalar_of(tape, l_ct),
        l_w: scalar_of(tape, l_w),
        l_r: scalar_of(tape, l_r),
        total: scalar_of(tape, Some(total)),
    };
    Ok((
        LossVars {
            l_t,
            l_rec,
            l_ct,
            l_w,
            l_r,
            total,
        },
        breakdown,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::stream;
    use crate::numerics::TensorData;

    fn t64(rows: usize, cols: usize, data: &[f64]) -> TensorData<f64> {
        TensorData::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn triplet_equals_margin_when_positive_equals_negative() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(2, 2, &[0.0, 0.0, 1.0, 1.0]));
        let p = tape.constant(t64(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let l = triplet(&mut tape, a, p, p, 1.0).unwrap();
        assert!((tape.value(l).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_zero_when_hinge_satisfied() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(1, 1, &[0.0]));
        let p = tape.constant(t64(1, 1, &[1.0]));
        let n = tape.constant(t64(1, 1, &[3.0]));
        let l = triplet(&mut tape, a, p, n, 1.0).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn triplet_scalar_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(1, 1, &[0.0]));
        let p = tape.constant(t64(1, 1, &[1.0]));
        let n = tape.constant(t64(1, 1, &[1.5]));
        let l = triplet(&mut tape, a, p, n, 1.0).unwrap();
        assert!((tape.value(l).data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn forced_negatives_on_two_row_batch() {
        let mut rng = stream(1, 1, 0, 0);
        let neg = sample_negatives(&[0, 1], &mut rng);
        assert_eq!(neg.negative, vec![Some(1), Some(0)]);
    }

    #[test]
    fn single_class_batch_flags_every_row() {
        let mut rng = stream(1, 1, 0, 0);
        let neg = sample_negatives(&[0, 0, 0], &mut rng);
        assert_eq!(neg.negative, vec![None, None, None]);
        assert!(neg.pairs().is_empty());
    }

    #[test]
    fn negative_sampling_is_uniform_over_candidates() {
        // Frequency within 5% of uniform and a chi-squared fit at p > 0.01.
        let labels = [0u32, 0, 1, 1];
        let draws = 10_000usize;
        let mut counts = vec![[0usize; 4]; 4];
        for d in 0..draws {
            let mut rng = stream(42, 7, d as u64, 0);
            let neg = sample_negatives(&labels, &mut rng);
            for (row, n) in neg.negative.iter().enumerate() {
                counts[row][n.unwrap()] += 1;
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            let candidates: Vec<usize> = (0..4).filter(|&j| labels[j] != label).collect();
            let expected = draws as f64 / candidates.len() as f64;
            let mut chi2 = 0.0;
            for &cand in &candidates {
                let got = counts[row][cand] as f64;
                assert!(
                    (got / expected - 1.0).abs() <= 0.05,
                    "row {row} candidate {cand}: {got} vs {expected}"
                );
                chi2 += (got - expected).powi(2) / expected;
            }
            for j in 0..4 {
                if !candidates.contains(&j) {
                    assert_eq!(counts[row][j], 0, "same-class negative drawn");
                }
            }
            // dof = 1 at two candidates; critical value at p = 0.01 is 6.635.
            assert!(chi2 < 6.635, "row {row}: chi2 {chi2}");
        }
    }

    /// Degenerate fixture: both branch embeddings of every row coincide with
    /// the label projection, and negatives coincide too.
    fn identical_outputs(tape: &mut Tape<f64>, batch: usize, dim: usize) -> ForwardOutputs {
        let fill = |tape: &mut Tape<f64>| {
            tape.constant(TensorData::matrix(batch, dim, vec![0.5; batch * dim]).unwrap())
        };
        let theta_a = fill(tape);
        let theta_v = fill(tape);
        let theta_w = fill(tape);
        let rho = fill(tape);
        ForwardOutputs {
            phi_a: Some(fill(tape)),
            phi_v: Some(fill(tape)),
            phi_att_a: None,
            phi_att_v: None,
            theta_a: Some(theta_a),
            theta_v: Some(theta_v),
            theta_w,
            rho_a: Some(rho),
            rho_v: Some(rho),
            rho_w: rho,
            phi_rec_a: Some(fill(tape)),
            phi_rec_v: Some(fill(tape)),
        }
    }

    #[test]
    fn degenerate_identical_embeddings_hit_margin_sums() {
        let mut tape = Tape::<f64>::new();
        let out = identical_outputs(&mut tape, 3, 4);
        let pairs = TripletPairs {
            anchors: vec![0, 1, 2],
            negatives: vec![1, 2, 0],
        };
        let mu = 1.0;
        let lt = loss_base_triplet(&mut tape, &out, &pairs, mu).unwrap().unwrap();
        assert!((tape.value(lt).data()[0] - 4.0 * mu).abs() < 1e-12);
        let lct = loss_composite_triplet(&mut tape, &out, &pairs, mu).unwrap().unwrap();
        assert!((tape.value(lct).data()[0] - 2.0 * mu).abs() < 1e-12);
        let lw = loss_w(&mut tape, &out, &pairs, mu).unwrap().unwrap();
        assert!((tape.value(lw).data()[0] - 4.0 * mu).abs() < 1e-12);
    }

    #[test]
    fn triplet_terms_vanish_when_negatives_clear_the_margin() {
        // Anchors sit exactly on their label projection; negatives are more
        // than the margin away in every role.
        let mut tape = Tape::<f64>::new();
        let close = tape.constant(t64(2, 2, &[0.0, 0.0, 10.0, 10.0]));
        let out = ForwardOutputs {
            phi_a: Some(close),
            phi_v: Some(close),
            phi_att_a: None,
            phi_att_v: None,
            theta_a: Some(close),
            theta_v: Some(close),
            theta_w: close,
            rho_a: Some(close),
            rho_v: Some(close),
            rho_w: close,
            phi_rec_a: Some(close),
            phi_rec_v: Some(close),
        };
        let pairs = TripletPairs {
            anchors: vec![0, 1],
            negatives: vec![1, 0],
        };
        for value in [
            loss_base_triplet(&mut tape, &out, &pairs, 1.0).unwrap().unwrap(),
            loss_composite_triplet(&mut tape, &out, &pairs, 1.0).unwrap().unwrap(),
            loss_w(&mut tape, &out, &pairs, 1.0).unwrap().unwrap(),
        ] {
            assert_eq!(tape.value(value).data()[0], 0.0);
        }
    }

    #[test]
    fn reconstruction_identities() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(t64(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let w_plus_one = tape.constant(t64(2, 3, &[1.1, 1.2, 1.3, 1.4, 1.5, 1.6]));
        let base = identical_outputs(&mut tape, 2, 3);
        let perfect = ForwardOutputs {
            rho_a: Some(w),
            rho_v: Some(w),
            rho_w: w,
            ..base.clone()
        };
        let l = loss_reconstruction(&mut tape, &perfect, w).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        let off = ForwardOutputs {
            rho_a: Some(w_plus_one),
            rho_v: Some(w),
            rho_w: w,
            ..base
        };
        let l = loss_reconstruction(&mut tape, &off, w).unwrap();
        assert!((tape.value(l).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_matches_three_mse_calls() {
        let mut rng = stream(5, 1, 0, 0);
        let mut data = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let d_w = data(12);
        let d_a = data(12);
        let d_v = data(12);
        let d_dw = data(12);
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(t64(3, 4, &d_w));
        let rho_a = tape.constant(t64(3, 4, &d_a));
        let rho_v = tape.constant(t64(3, 4, &d_v));
        let rho_w = tape.constant(t64(3, 4, &d_dw));
        let out = ForwardOutputs {
            rho_a: Some(rho_a),
            rho_v: Some(rho_v),
            rho_w,
            ..identical_outputs(&mut tape, 3, 4)
        };
        let l = loss_reconstruction(&mut tape, &out, w).unwrap();
        let ma = tape.mse(rho_a, w).unwrap();
        let mv = tape.mse(rho_v, w).unwrap();
        let mw = tape.mse(rho_w, w).unwrap();
        let expect =
            tape.value(ma).data()[0] + tape.value(mv).data()[0] + tape.value(mw).data()[0];
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn regularisation_identities() {
        let mut tape = Tape::<f64>::new();
        let base = identical_outputs(&mut tape, 2, 3);
        let l = loss_regularisation(&mut tape, &base).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        let shifted = tape.constant(t64(2, 3, &[1.5; 6]));
        let off = ForwardOutputs {
            theta_v: Some(shifted),
            ..base
        };
        let l = loss_regularisation(&mut tape, &off).unwrap();
        assert!((tape.value(l).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_equals_sum_of_terms_and_masks_cut_terms() {
        let mut rng = stream(9, 2, 0, 0);
        let mut data = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let rows: Vec<Vec<f64>> = (0..10).map(|_| data(12)).collect();
        let mut tape = Tape::<f64>::new();
        let mk = |tape: &mut Tape<f64>, d: &[f64]| tape.constant(t64(4, 3, d));
        let w = mk(&mut tape, &rows[0]);
        let out = ForwardOutputs {
            phi_a: Some(mk(&mut tape, &rows[1])),
            phi_v: Some(mk(&mut tape, &rows[2])),
            phi_att_a: None,
            phi_att_v: None,
            theta_a: Some(mk(&mut tape, &rows[3])),
            theta_v: Some(mk(&mut tape, &rows[4])),
            theta_w: mk(&mut tape, &rows[5]),
            rho_a: Some(mk(&mut tape, &rows[6])),
            rho_v: Some(mk(&mut tape, &rows[7])),
            rho_w: mk(&mut tape, &rows[8]),
            phi_rec_a: Some(mk(&mut tape, &rows[9])),
            phi_rec_v: Some(mk(&mut tape, &rows[1])),
        };
        let pairs = TripletPairs {
            anchors: vec![0, 1, 2, 3],
            negatives: vec![2, 3, 0, 1],
        };
        let (_, all) = loss_total(&mut tape, &out, w, &pairs, &LossMask::default(), 1.0).unwrap();
        let sum = all.l_t + all.l_rec + all.l_ct + all.l_w + all.l_r;
        assert!((all.total - sum).abs() < 1e-6);
        assert!(all.total > 0.0);

        for term in ["l_t", "l_rec", "l_ct", "l_w", "l_r"] {
            let mask = LossMask::default().without(term);
            let (_, masked) = loss_total(&mut tape, &out, w, &pairs, &mask, 1.0).unwrap();
            let standalone = match term {
                "l_t" => all.l_t,
                "l_rec" => all.l_rec,
                "l_ct" => all.l_ct,
                "l_w" => all.l_w,
                _ => all.l_r,
            };
            assert!(
                (masked.total - (all.total - standalone)).abs() < 1e-6,
                "term {term}"
            );
            let gone = match term {
                "l_t" => masked.l_t,
                "l_rec" => masked.l_rec,
                "l_ct" => masked.l_ct,
                "l_w" => masked.l_w,
                _ => masked.l_r,
            };
            assert_eq!(gone, 0.0);
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mask = LossMask {
            l_t: false,
            l_rec: false,
            l_ct: false,
            l_w: false,
            l_r: false,
        };
        assert!(mask.validate().is_err());
    }

    #[test]
    fn losses_are_permutation_equivariant() {
        let mut rng = stream(13, 4, 0, 0);
        let mut data = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let raw: Vec<Vec<f64>> = (0..9).map(|_| data(15)).collect();
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |d: &[f64]| -> Vec<f64> {
            perm.iter().flat_map(|&r| d[r * 3..(r + 1) * 3].to_vec()).collect()
        };
        let build = |tape: &mut Tape<f64>, rows: &[Vec<f64>]| -> (ForwardOutputs, Var) {
            let mk = |tape: &mut Tape<f64>, d: &[f64]| tape.constant(t64(5, 3, d));
            let w = mk(tape, &rows[0]);
            let out = ForwardOutputs {
                phi_a: Some(mk(tape, &rows[1])),
                phi_v: Some(mk(tape, &rows[2])),
                phi_att_a: None,
                phi_att_v: None,
                theta_a: Some(mk(tape, &rows[3])),
                theta_v: Some(mk(tape, &rows[4])),
                theta_w: mk(tape, &rows[5]),
                rho_a: Some(mk(tape, &rows[6])),
                rho_v: Some(mk(tape, &rows[7])),
                rho_w: mk(tape, &rows[8]),
                phi_rec_a: Some(mk(tape, &rows[1])),
                phi_rec_v: Some(mk(tape, &rows[2])),
            };
            (out, w)
        };
        let pairs = TripletPairs {
            anchors: vec![0, 1, 2, 3, 4],
            negatives: vec![2, 3, 4, 0, 1],
        };
        let mut tape = Tape::<f64>::new();
        let (out, w) = build(&mut tape, &raw);
        let (_, base) = loss_total(&mut tape, &out, w, &pairs, &LossMask::default(), 1.0).unwrap();

        // Shuffle rows and re-index the sampled negatives consistently.
        let permuted: Vec<Vec<f64>> = raw.iter().map(|d| permute(d)).collect();
        let mut inverse = [0usize; 5];
        for (new_row, &old_row) in perm.iter().enumerate() {
            inverse[old_row] = new_row;
        }
        let shuffled_pairs = TripletPairs {
            anchors: (0..5).collect(),
            negatives: perm.iter().map(|&old| inverse[pairs.negatives[old]]).collect(),
        };
        let mut tape2 = Tape::<f64>::new();
        let (out2, w2) = build(&mut tape2, &permuted);
        let (_, shuffled) =
            loss_total(&mut tape2, &out2, w2, &shuffled_pairs, &LossMask::default(), 1.0).unwrap();
        for (a, b) in [
            (base.l_t, shuffled.l_t),
            (base.l_rec, shuffled.l_rec),
            (base.l_ct, shuffled.l_ct),
            (base.l_w, shuffled.l_w),
            (base.l_r, shuffled.l_r),
            (base.total, shuffled.total),
        ] {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
