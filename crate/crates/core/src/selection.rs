//! Two-stage token selection.
//!
//! Stage 1 scores every masked position by the product of its prediction
//! confidence and a Gaussian-weighted density of known neighbours, then keeps
//! the top `k`. Stage 2 runs attention rollout over the layers of the last
//! forward pass and keeps the smallest high-influence prefix of the
//! remaining positions whose normalized mass exceeds `p`.
//!
//! Ties are always broken towards the lowest position index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Tolerance on incoming attention rows.
pub const ATTENTION_ROW_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertaintyParams {
    pub sigma: f64,
    pub k: usize,
}

impl CertaintyParams {
    pub fn new(sigma: f64, k: usize) -> Result<Self> {
        let params = Self { sigma, k };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for CertaintyParams {
    fn default() -> Self {
        Self { sigma: 10.0, k: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutParams {
    pub p: f64,
}

impl RolloutParams {
    pub fn new(p: f64) -> Result<Self> {
        let params = Self { p };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("p must lie in (0, 1], got {}", self.p)));
        }
        Ok(())
    }
}

impl Default for RolloutParams {
    fn default() -> Self {
        Self { p: 0.1 }
    }
}

/// Everything the rollout produced for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutState {
    /// Per layer: attention rows for queried positions, one-hot rows elsewhere.
    pub expanded: Vec<Matrix<f64>>,
    /// Per layer: row-normalized `expanded + I`.
    pub transition: Vec<Matrix<f64>>,
    /// Product of all transitions, last layer on the left.
    pub cumulative: Matrix<f64>,
    /// Column sums of `cumulative`.
    pub influence: Vec<f64>,
}

/// What the selector decided for the next step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub m_star: Vec<usize>,
    pub u: Vec<usize>,
    /// `(position, D(i) * s_i)` for every masked position that was scored.
    pub prior_scores: Vec<(usize, f64)>,
    pub influence_used: Option<Vec<f64>>,
    /// Positions recomputed regardless of scores.
    pub forced: Vec<usize>,
}

impl SelectionOutcome {
    /// Union of every selected position, sorted.
    pub fn query_set(&self) -> Vec<usize> {
        let mut q: Vec<usize> = self
            .m_star
            .iter()
            .chain(&self.u)
            .chain(&self.forced)
            .copied()
            .collect();
        q.sort_unstable();
        q.dedup();
        q
    }
}

/// `exp(-d² / (2σ²))`.
pub fn gaussian_weight(distance: usize, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
    }
    Ok(gaussian(distance as f64, sigma))
}

fn gaussian(distance: f64, sigma: f64) -> f64 {
    (-(distance * distance) / (2.0 * sigma * sigma)).exp()
}

/// Certainty density of every masked position: the Gaussian-weighted count
/// of known (unmasked) positions around it. Output is aligned with `masked`.
pub fn certainty_density(masked: &[usize], len: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
    }
    let mut is_masked = vec![false; len];
    for &i in masked {
        if i >= len {
            return Err(Error::Input(format!("masked position {i} outside length {len}")));
        }
        is_masked[i] = true;
    }
    let known: Vec<usize> = (0..len).filter(|&j| !is_masked[j]).collect();
    Ok(masked
        .iter()
        .map(|&i| {
            known
                .iter()
                .map(|&j| gaussian(i.abs_diff(j) as f64, sigma))
                .sum()
        })
        .collect())
}

/// Orders positions by descending score, lowest position first among ties.
pub fn rank_descending(positions: &[usize], scores: &[f64]) -> Vec<usize> {
    debug_assert_eq!(positions.len(), scores.len());
    let mut idx: Vec<usize> = (0..positions.len()).collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => positions[a].cmp(&positions[b]),
        o => o,
    });
    idx.into_iter().map(|i| positions[i]).collect()
}

/// Top-`k` masked positions by `D(i) * s_i`. Returns the sorted selection
/// and the prior score of every masked position.
pub fn select_masked_topk(
    masked: &[usize],
    density: &[f64],
    confidence: &[f64],
    k: usize,
) -> Result<(Vec<usize>, Vec<(usize, f64)>)> {
    if density.len() != masked.len() || confidence.len() != masked.len() {
        return Err(Error::Input(
            "density and confidence must be aligned with the masked set".into(),
        ));
    }
    let scores: Vec<f64> = density.iter().zip(confidence).map(|(d, s)| d * s).collect();
    let mut chosen: Vec<usize> = rank_descending(masked, &scores).into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok((chosen, masked.iter().copied().zip(scores).collect()))
}

/// Attention rollout over per-layer head-averaged attention rows.
///
/// `avg_attn[l]` holds one row per entry of `query_positions`. Rows of
/// unqueried positions are one-hot, which makes their transition rows
/// one-hot too, so only queried rows of the cumulative product change from
/// layer to layer.
pub fn attention_rollout(
    avg_attn: &[Matrix<f64>],
    query_positions: &[usize],
    len: usize,
) -> Result<RolloutState> {
    if let Some(&p) = query_positions.iter().find(|&&p| p >= len) {
        return Err(Error::Input(format!("query position {p} outside length {len}")));
    }
    let mut expanded = Vec::with_capacity(avg_attn.len());
    let mut transition = Vec::with_capacity(avg_attn.len());
    let mut cumulative = Matrix::<f64>::identity(len);

    for (layer, attn) in avg_attn.iter().enumerate() {
        if attn.shape() != (query_positions.len(), len) {
            return Err(Error::Input(format!(
                "attention at layer {layer} has shape {:?}, expected ({}, {len})",
                attn.shape(),
                query_positions.len()
            )));
        }
        let mut e = Matrix::<f64>::identity(len);
        for (r, &pos) in query_positions.iter().enumerate() {
            let row = attn.row(r);
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ATTENTION_ROW_TOL || row.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Input(format!(
                    "attention row {r} (position {pos}) at layer {layer} is not stochastic (sum {total})"
                )));
            }
            e.row_mut(pos).copy_from_slice(row);
        }

        let mut w = e.clone();
        for i in 0..len {
            w[(i, i)] += 1.0;
            let row = w.row_mut(i);
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }

        let previous = cumulative.clone();
        for &i in query_positions {
            let out = cumulative.row_mut(i);
            out.iter_mut().for_each(|x| *x = 0.0);
            for (j, &wij) in w.row(i).iter().enumerate() {
                if wij == 0.0 {
                    continue;
                }
                for (o, &c) in out.iter_mut().zip(previous.row(j)) {
                    *o += wij * c;
                }
            }
        }

        expanded.push(e);
        transition.push(w);
    }

    let mut state = RolloutState {
        expanded,
        transition,
        cumulative,
        influence: Vec::new(),
    };
    state.influence = influence_scores(&state);
    Ok(state)
}

/// Column sums of the final cumulative rollout matrix.
pub fn influence_scores(rollout: &RolloutState) -> Vec<f64> {
    column_sums(&rollout.cumulative)
}

pub fn column_sums(m: &Matrix<f64>) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (s, &x) in sums.iter_mut().zip(m.row(i)) {
            *s += x;
        }
    }
    sums
}

/// Smallest highest-influence subset of `candidates` whose normalized mass
/// strictly exceeds `p`. With `p = 1` every candidate is returned.
pub fn select_remaining(influence: &[f64], candidates: &[usize], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Input(format!("p must lie in (0, 1], got {p}")));
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(&c) = candidates.iter().find(|&&c| c >= influence.len()) {
        return Err(Error::Input(format!("candidate {c} has no influence score")));
    }
    let masses: Vec<f64> = candidates.iter().map(|&c| influence[c]).collect();
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Input(format!("candidate influence total {total} is not positive")));
    }
    if p >= 1.0 {
        return Ok(candidates.to_vec());
    }
    let mut chosen = Vec::new();
    let mut cumulative = 0.0;
    for pos in rank_descending(candidates, &masses) {
        chosen.push(pos);
        cumulative += influence[pos] / total;
        if cumulative > p {
            break;
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_closed_forms() {
        assert_eq!(gaussian_weight(0, 3.0).unwrap(), 1.0);
        assert!((gaussian_weight(10, 10.0).unwrap() - (-0.5f64).exp()).abs() < 1e-12);
        assert!((gaussian_weight(10, 10.0).unwrap() - 0.606531).abs() < 1e-6);
        // d = σ·sqrt(2 ln 2) gives exactly one half.
        let sigma = 4.0 / (2.0 * 2f64.ln()).sqrt();
        assert!((gaussian_weight(4, sigma).unwrap() - 0.5).abs() < 1e-9);
        assert!(gaussian_weight(1, 0.0).is_err());
        assert!(gaussian_weight(1, -2.0).is_err());
    }

    #[test]
    fn density_with_nothing_known_is_zero() {
        let d = certainty_density(&[0, 1, 2, 3], 4, 10.0).unwrap();
        assert_eq!(d, vec![0.0; 4]);
    }

    #[test]
    fn density_hand_values() {
        let d = certainty_density(&[1, 2], 3, 10.0).unwrap();
        assert!((d[0] - (-1.0f64 / 200.0).exp()).abs() < 1e-12);
        assert!((d[1] - (-4.0f64 / 200.0).exp()).abs() < 1e-12);
        assert!((d[0] - 0.995012).abs() < 1e-6);
        assert!((d[1] - 0.980199).abs() < 1e-6);
    }

    #[test]
    fn density_wide_sigma_limit() {
        let masked = [2, 5, 6, 9];
        let d = certainty_density(&masked, 12, 1e9).unwrap();
        for x in &d {
            assert!((x - 8.0).abs() < 1e-6);
        }
    }

    #[test]
    fn topk_hand_example() {
        let (m, scores) = select_masked_topk(&[4, 7], &[0.9, 0.5], &[0.5, 0.8], 1).unwrap();
        assert_eq!(m, vec![4]);
        assert!((scores[0].1 - 0.45).abs() < 1e-12);
        assert!((scores[1].1 - 0.40).abs() < 1e-12);
    }

    #[test]
    fn topk_budget_exceeds_supply() {
        let (m, _) = select_masked_topk(&[3, 8, 9], &[1.0, 0.2, 0.3], &[0.1, 0.5, 0.4], 10).unwrap();
        assert_eq!(m, vec![3, 8, 9]);
        let (m, _) = select_masked_topk(&[], &[], &[], 4).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn topk_ties_prefer_low_positions() {
        let (m, _) = select_masked_topk(&[3, 5, 9], &[1.0; 3], &[0.5; 3], 2).unwrap();
        assert_eq!(m, vec![3, 5]);
    }

    #[test]
    fn rollout_uniform_two_by_two() {
        let a = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let r = attention_rollout(&[a], &[0, 1], 2).unwrap();
        assert_eq!(r.transition[0], Matrix::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]]));
        assert_eq!(r.influence, vec![1.0, 1.0]);
    }

    #[test]
    fn rollout_partial_query() {
        let a = Matrix::from_rows(&[vec![0.2, 0.8]]);
        let r = attention_rollout(&[a], &[0], 2).unwrap();
        assert_eq!(r.expanded[0], Matrix::from_rows(&[vec![0.2, 0.8], vec![0.0, 1.0]]));
        let w = &r.transition[0];
        assert!((w[(0, 0)] - 0.6).abs() < 1e-15 && (w[(0, 1)] - 0.4).abs() < 1e-15);
        assert_eq!(w.row(1), &[0.0, 1.0]);
        assert!((r.influence[0] - 0.6).abs() < 1e-15);
        assert!((r.influence[1] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn rollout_identity_attention_is_fixed_point() {
        let eye = Matrix::<f64>::identity(5);
        let r = attention_rollout(&[eye.clone(), eye.clone(), eye], &[0, 1, 2, 3, 4], 5).unwrap();
        assert_eq!(r.cumulative, Matrix::identity(5));
        assert_eq!(r.influence, vec![1.0; 5]);
    }

    #[test]
    fn rollout_rejects_non_stochastic_rows() {
        let a = Matrix::from_rows(&[vec![0.2, 0.7]]);
        match attention_rollout(&[a], &[1], 2) {
            Err(Error::Input(msg)) => assert!(msg.contains("layer 0") && msg.contains("row 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn influence_hand_values() {
        let state = RolloutState {
            expanded: vec![],
            transition: vec![],
            cumulative: Matrix::from_rows(&[vec![0.6, 0.4], vec![0.0, 1.0]]),
            influence: vec![],
        };
        assert_eq!(influence_scores(&state), vec![0.6, 1.4]);
        let eye = RolloutState { cumulative: Matrix::identity(4), ..state };
        assert_eq!(influence_scores(&eye), vec![1.0; 4]);
    }

    #[test]
    fn remaining_hand_example() {
        assert_eq!(select_remaining(&[0.6, 1.4], &[0, 1], 0.1).unwrap(), vec![1]);
    }

    #[test]
    fn remaining_full_threshold_takes_everything() {
        let c = [0.5, 2.0, 1.0, 0.5];
        assert_eq!(select_remaining(&c, &[0, 2, 3], 1.0).unwrap(), vec![0, 2, 3]);
    }

    #[test]
    fn remaining_uniform_mass() {
        let c = vec![1.0; 10];
        let cands: Vec<usize> = (0..10).collect();
        let u = select_remaining(&c, &cands, 0.25).unwrap();
        assert_eq!(u, vec![0, 1, 2]);
    }

    #[test]
    fn remaining_edge_cases() {
        assert!(select_remaining(&[1.0], &[], 0.5).unwrap().is_empty());
        assert!(select_remaining(&[0.0, 0.0], &[0, 1], 0.5).is_err());
        assert!(select_remaining(&[1.0], &[0], 0.0).is_err());
    }

    fn stochastic_rows(rows: usize, cols: usize, raw: &[f64]) -> Matrix<f64> {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let slice = &raw[r * cols..(r + 1) * cols];
            let total: f64 = slice.iter().sum();
            for c in 0..cols {
                m[(r, c)] = slice[c] / total;
            }
        }
        m
    }

    proptest! {
        #[test]
        fn rollout_rows_stay_stochastic(
            len in 2usize..10,
            layers in 1usize..4,
            mask in proptest::collection::vec(any::<bool>(), 10),
            raw in proptest::collection::vec(0.01f64..1.0, 4 * 100),
        ) {
            let q: Vec<usize> = (0..len).filter(|&i| mask[i] || i == 0).collect();
            let attn: Vec<Matrix<f64>> = (0..layers)
                .map(|l| stochastic_rows(q.len(), len, &raw[l * 100..l * 100 + q.len() * len]))
                .collect();
            let r = attention_rollout(&attn, &q, len).unwrap();
            for w in &r.transition {
                for i in 0..len {
                    prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert!(w.row(i).iter().all(|&x| x >= 0.0));
                }
            }
            for i in 0..len {
                prop_assert!((r.cumulative.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-8);
            }
            prop_assert!((r.influence.iter().sum::<f64>() - len as f64).abs() < 1e-6);
            prop_assert!(r.influence.iter().all(|&c| c > 0.0));
        }

        #[test]
        fn wide_sigma_keeps_confidence_order(
            len in 4usize..40,
            known_mask in proptest::collection::vec(any::<bool>(), 40),
            perm_seed in proptest::collection::vec(0u32..1_000_000, 40),
            k in 1usize..10,
        ) {
            let masked: Vec<usize> = (0..len).filter(|&i| !known_mask[i]).collect();
            prop_assume!(!masked.is_empty() && masked.len() < len);
            // Distinct confidences on a coarse grid; the tie rule is not
            // exercised here because D·s separates equal s values by D.
            let mut conf: Vec<f64> = Vec::new();
            for (n, &i) in masked.iter().enumerate() {
                let v = (perm_seed[i] as f64 * 1000.0 + n as f64) / 1e9;
                conf.push(0.001 + v);
            }
            let dens = certainty_density(&masked, len, 1e6).unwrap();
            let prior: Vec<f64> = dens.iter().zip(&conf).map(|(d, s)| d * s).collect();
            prop_assert_eq!(rank_descending(&masked, &prior), rank_descending(&masked, &conf));
            let (a, _) = select_masked_topk(&masked, &dens, &conf, k).unwrap();
            let (b, _) = select_masked_topk(&masked, &vec![1.0; masked.len()], &conf, k).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn unmasking_never_lowers_density(
            len in 2usize..30,
            mask in proptest::collection::vec(any::<bool>(), 30),
            pick in 0usize..30,
            sigma in 0.5f64..20.0,
        ) {
            let masked: Vec<usize> = (0..len).filter(|&i| mask[i]).collect();
            prop_assume!(masked.len() >= 2);
            let removed = masked[pick % masked.len()];
            let after: Vec<usize> = masked.iter().copied().filter(|&i| i != removed).collect();
            let d0 = certainty_density(&masked, len, sigma).unwrap();
            let d1 = certainty_density(&after, len, sigma).unwrap();
            for (n, &i) in after.iter().enumerate() {
                let before = d0[masked.iter().position(|&m| m == i).unwrap()];
                prop_assert!(d1[n] >= before);
            }
        }

        #[test]
        fn frontier_is_strictly_preferred(
            prefix in 1usize..12,
            tail in 1usize..20,
            sigma in 1.0f64..30.0,
        ) {
            let len = prefix + tail;
            let masked: Vec<usize> = (prefix..len).collect();
            let d = certainty_density(&masked, len, sigma).unwrap();
            for w in d.windows(2) {
                prop_assert!(w[0] > w[1]);
            }
            let (m, _) = select_masked_topk(&masked, &d, &vec![0.5; masked.len()], 1).unwrap();
            prop_assert_eq!(m, vec![prefix]);
        }

        #[test]
        fn uniform_mass_respects_budget(n in 1usize..60, p in 0.01f64..0.99) {
            let c = vec![1.0; n];
            let cands: Vec<usize> = (0..n).collect();
            let u = select_remaining(&c, &cands, p).unwrap();
            prop_assert!(u.len() <= (p * n as f64).ceil() as usize + 1);
            let mass = u.len() as f64 / n as f64;
            prop_assert!(mass > p || u.len() == n);
            // Only an exactly integral p·n needs the extra position.
            let pn = p * n as f64;
            if (pn - pn.round()).abs() > 1e-9 {
                prop_assert!(u.len() <= pn.ceil() as usize);
            }
        }
    }
}
