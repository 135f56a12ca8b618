//! Ranks, weighted Borda scores, top-k selection and Plackett-Luce tools.
//!
//! Ranks are 1-based and higher means more important. A [`Permutation`]
//! lists items from most to least important, so the item at stage `t`
//! (0-based) has rank `m - t`.

use itertools::Itertools;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::StatsKind;

/// Two GLASS scores closer than this (relative to their magnitude) count as
/// tied. Scores are convex combinations of integer ranks, so exact ties in
/// real arithmetic can differ by a few ulps in floating point.
pub const SCORE_TIE_TOLERANCE: f64 = 1e-9;

/// How equal raw scores are turned into distinct ranks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Among equal scores the lower neuron index gets the lower rank. At
    /// selection time, boundary ties go to the higher local rank, then the
    /// lower index.
    #[default]
    LowerIndexRanksLower,
    /// Mirror image: the lower index gets the higher rank, and selection
    /// prefers the higher index on a full tie.
    LowerIndexRanksHigher,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankVector {
    pub ranks: Vec<usize>,
    pub tie_policy: TiePolicy,
    pub source_kind: Option<StatsKind>,
}

impl RankVector {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn with_source(mut self, kind: StatsKind) -> Self {
        self.source_kind = Some(kind);
        self
    }

    /// Wrap raw ranks, checking that they form a permutation of `1..=m`.
    pub fn from_ranks(ranks: Vec<usize>, tie_policy: TiePolicy) -> Result<Self> {
        check_rank_permutation(&ranks)?;
        Ok(RankVector { ranks, tie_policy, source_kind: None })
    }
}

fn check_rank_permutation(ranks: &[usize]) -> Result<()> {
    let m = ranks.len();
    let mut seen = vec![false; m];
    for &r in ranks {
        if r == 0 || r > m || std::mem::replace(&mut seen[r - 1], true) {
            return Err(Error::validation(format!("ranks are not a permutation of 1..={m}")));
        }
    }
    Ok(())
}

/// Rank scores so that a larger score gets a larger rank.
pub fn rank_scores(scores: &[f64], tie_policy: TiePolicy) -> Result<RankVector> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::validation(format!("score {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_index = match tie_policy {
            TiePolicy::LowerIndexRanksLower => a.cmp(&b),
            TiePolicy::LowerIndexRanksHigher => b.cmp(&a),
        };
        scores[a].total_cmp(&scores[b]).then(by_index)
    });
    let mut ranks = vec![0; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    Ok(RankVector { ranks, tie_policy, source_kind: None })
}

/// Weighted Borda score `λ R^l + (1 - λ) R^g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlassScore {
    pub scores: Vec<f64>,
    pub lambda: f64,
    pub local_source: Option<String>,
    pub global_source: Option<String>,
    /// Local ranks, kept for boundary tie-breaking.
    pub local_ranks: Vec<usize>,
}

pub fn glass_score(r_local: &RankVector, r_global: &RankVector, lambda: f64) -> Result<GlassScore> {
    check_lambda(lambda)?;
    if r_local.len() != r_global.len() {
        return Err(Error::validation(format!(
            "rank vectors differ in length: {} vs {}",
            r_local.len(),
            r_global.len()
        )));
    }
    let scores = r_local
        .ranks
        .iter()
        .zip(&r_global.ranks)
        .map(|(&rl, &rg)| lambda * rl as f64 + (1.0 - lambda) * rg as f64)
        .collect();
    Ok(GlassScore {
        scores,
        lambda,
        local_source: None,
        global_source: None,
        local_ranks: r_local.ranks.clone(),
    })
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::validation(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

fn scores_tie(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCORE_TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Items in descending score order, grouped into runs of tied scores. Each
/// group is ordered by the tie-break rule.
fn tie_groups(score: &GlassScore, tie_policy: TiePolicy) -> Vec<Vec<usize>> {
    let s = &score.scores;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores_tie(s[*g.last().unwrap()], s[i]) => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    for g in &mut groups {
        g.sort_by(|&a, &b| {
            let by_index = match tie_policy {
                TiePolicy::LowerIndexRanksLower => a.cmp(&b),
                TiePolicy::LowerIndexRanksHigher => b.cmp(&a),
            };
            score.local_ranks[b].cmp(&score.local_ranks[a]).then(by_index)
        });
    }
    groups
}

/// The `k` highest-scoring indices, sorted ascending.
pub fn select_top_k(score: &GlassScore, k: usize, tie_policy: TiePolicy) -> Result<Vec<usize>> {
    let m = score.scores.len();
    if k == 0 || k > m {
        return Err(Error::validation(format!("k must lie in [1, {m}], got {k}")));
    }
    if score.local_ranks.len() != m {
        return Err(Error::validation("score and local ranks differ in length"));
    }
    let mut picked: Vec<usize> = tie_groups(score, tie_policy).into_iter().flatten().take(k).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Every ordering consistent with descending scores, enumerating all
/// arrangements inside each tied group. Meant for small `m`.
pub fn descending_orderings(score: &GlassScore) -> Vec<Permutation> {
    let groups = tie_groups(score, TiePolicy::default());
    let per_group: Vec<Vec<Vec<usize>>> =
        groups.iter().map(|g| g.iter().copied().permutations(g.len()).collect()).collect();
    let mut out: Vec<Permutation> = per_group
        .into_iter()
        .multi_cartesian_product()
        .map(|parts| Permutation { pi: parts.concat() })
        .collect();
    if out.is_empty() {
        out.push(Permutation { pi: Vec::new() });
    }
    out.sort();
    out
}

/// An ordering of `m` items, most important first.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Permutation {
    pub pi: Vec<usize>,
}

impl Permutation {
    pub fn new(pi: Vec<usize>) -> Result<Self> {
        let m = pi.len();
        let mut seen = vec![false; m];
        for &i in &pi {
            if i >= m || std::mem::replace(&mut seen[i], true) {
                return Err(Error::validation(format!("not a permutation of 0..{m}")));
            }
        }
        Ok(Permutation { pi })
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Item `i` gets rank `m - t` where `t` is its 0-based stage.
    pub fn to_ranks(&self) -> Vec<usize> {
        let m = self.pi.len();
        let mut ranks = vec![0; m];
        for (t, &i) in self.pi.iter().enumerate() {
            ranks[i] = m - t;
        }
        ranks
    }

    pub fn from_ranks(ranks: &RankVector) -> Self {
        let m = ranks.len();
        let mut pi = vec![0; m];
        for (i, &r) in ranks.ranks.iter().enumerate() {
            pi[m - r] = i;
        }
        Permutation { pi }
    }
}

fn check_mu(pi: &Permutation, mu: &[f64]) -> Result<()> {
    if mu.len() != pi.len() {
        return Err(Error::validation(format!(
            "utilities have length {}, permutation has {}",
            mu.len(),
            pi.len()
        )));
    }
    if mu.iter().any(|u| !u.is_finite()) {
        return Err(Error::validation("utilities must be finite"));
    }
    Ok(())
}

/// Plackett-Luce log-probability of `pi` under utilities `mu`.
pub fn pl_log_likelihood(pi: &Permutation, mu: &[f64]) -> Result<f64> {
    check_mu(pi, mu)?;
    // Suffix logsumexp built from the back: lse_t = log(exp(mu_t) + exp(lse_{t+1})).
    let mut lse = f64::NEG_INFINITY;
    let mut total = 0.0;
    for &i in pi.pi.iter().rev() {
        let u = mu[i];
        let hi = lse.max(u);
        lse = hi + ((lse - hi).exp() + (u - hi).exp()).ln();
        total += u - lse;
    }
    Ok(total)
}

/// `(constant, linear)` with `constant = -Σ_t log n_t` and
/// `linear = Σ_i R_i μ_i`, `R_i` being the rank of item `i` in `pi`.
pub fn pl_linearized_ll(pi: &Permutation, mu: &[f64]) -> Result<(f64, f64)> {
    check_mu(pi, mu)?;
    let m = pi.len();
    let constant = -(1..=m).map(|n| (n as f64).ln()).sum::<f64>();
    let linear = pi.to_ranks().iter().zip(mu).map(|(&r, &u)| r as f64 * u).sum();
    Ok((constant, linear))
}

pub fn joint_ll(pi_local: &Permutation, pi_global: &Permutation, mu: &[f64], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let l = pl_log_likelihood(pi_local, mu)?;
    let g = pl_log_likelihood(pi_global, mu)?;
    Ok(lambda * l + (1.0 - lambda) * g)
}

pub const BRUTE_FORCE_MAX_M: usize = 8;

/// Exhaustive maximizers of the linearized joint log-likelihood.
///
/// Each candidate ordering `σ` assigns utilities `μ_i = rank of i in σ`;
/// the objective is `λ (C + Σ R^l_i μ_i) + (1 - λ) (C + Σ R^g_i μ_i)`.
/// Returns every `σ` within floating tolerance of the maximum, sorted.
pub fn brute_force_ml_ranking(r_local: &RankVector, r_global: &RankVector, lambda: f64) -> Result<Vec<Permutation>> {
    check_lambda(lambda)?;
    let m = r_local.len();
    if m > BRUTE_FORCE_MAX_M {
        return Err(Error::validation(format!(
            "brute force is limited to m <= {BRUTE_FORCE_MAX_M}, got {m}"
        )));
    }
    if r_global.len() != m {
        return Err(Error::validation("rank vectors differ in length"));
    }
    check_rank_permutation(&r_local.ranks)?;
    check_rank_permutation(&r_global.ranks)?;
    let pi_l = Permutation::from_ranks(r_local);
    let pi_g = Permutation::from_ranks(r_global);
    let mut scored = Vec::new();
    for sigma in (0..m).permutations(m) {
        let sigma = Permutation { pi: sigma };
        let mu: Vec<f64> = sigma.to_ranks().into_iter().map(|r| r as f64).collect();
        let (cl, ll) = pl_linearized_ll(&pi_l, &mu)?;
        let (cg, lg) = pl_linearized_ll(&pi_g, &mu)?;
        scored.push((lambda * (cl + ll) + (1.0 - lambda) * (cg + lg), sigma));
    }
    let best = scored.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let tol = SCORE_TIE_TOLERANCE * best.abs().max(1.0);
    let mut out: Vec<Permutation> =
        scored.into_iter().filter(|(v, _)| best - v <= tol).map(|(_, p)| p).collect();
    if m == 0 {
        out = vec![Permutation { pi: Vec::new() }];
    }
    out.sort();
    Ok(out)
}

/// Sample an ordering by perturbing each utility with Gumbel(0, 1) noise and
/// sorting descending.
pub fn gumbel_rank_sample<R: Rng + ?Sized>(mu: &[f64], rng: &mut R) -> Result<Permutation> {
    if mu.iter().any(|u| !u.is_finite()) {
        return Err(Error::validation("utilities must be finite"));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel is valid");
    let u: Vec<f64> = mu.iter().map(|&m| m + gumbel.sample(rng)).collect();
    let mut pi: Vec<usize> = (0..mu.len()).collect();
    pi.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
    Ok(Permutation { pi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rv(r: &[usize]) -> RankVector {
        RankVector::from_ranks(r.to_vec(), TiePolicy::default()).unwrap()
    }

    #[test]
    fn ranks_follow_scores() {
        assert_eq!(rank_scores(&[0.3, 0.9, 0.1], TiePolicy::default()).unwrap().ranks, vec![2, 3, 1]);
        assert_eq!(rank_scores(&[0.5, 0.5], TiePolicy::default()).unwrap().ranks, vec![1, 2]);
        assert_eq!(rank_scores(&[0.5, 0.5], TiePolicy::LowerIndexRanksHigher).unwrap().ranks, vec![2, 1]);
        assert!(rank_scores(&[0.1, f64::NAN], TiePolicy::default()).is_err());
    }

    #[test]
    fn glass_arithmetic_and_endpoints() {
        let (l, g) = (rv(&[3, 1, 2]), rv(&[1, 3, 2]));
        assert_eq!(glass_score(&l, &g, 0.5).unwrap().scores, vec![2.0, 2.0, 2.0]);
        assert_eq!(glass_score(&l, &g, 1.0).unwrap().scores, vec![3.0, 1.0, 2.0]);
        assert_eq!(glass_score(&l, &g, 0.0).unwrap().scores, vec![1.0, 3.0, 2.0]);
        assert!(glass_score(&l, &g, 1.5).is_err());
        assert!(glass_score(&l, &rv(&[1, 2]), 0.5).is_err());
    }

    #[test]
    fn boundary_tie_prefers_local_rank() {
        let s = glass_score(&rv(&[3, 1, 2]), &rv(&[1, 3, 2]), 0.5).unwrap();
        assert_eq!(select_top_k(&s, 2, TiePolicy::default()).unwrap(), vec![0, 2]);
        assert_eq!(select_top_k(&s, 3, TiePolicy::default()).unwrap(), vec![0, 1, 2]);
        assert!(select_top_k(&s, 0, TiePolicy::default()).is_err());
        assert!(select_top_k(&s, 4, TiePolicy::default()).is_err());
    }

    #[test]
    fn pl_small_cases() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let v = pl_log_likelihood(&p, &[0.0; 3]).unwrap();
        assert!((v - (1.0f64 / 6.0).ln()).abs() < 1e-15);
        let p = Permutation::new(vec![0, 1]).unwrap();
        let v = pl_log_likelihood(&p, &[2f64.ln(), 0.0]).unwrap();
        assert!((v - (2.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn pl_sums_to_one_at_m4() {
        let mu = [0.7, -1.3, 2.1, 0.05];
        let total: f64 = (0..4)
            .permutations(4)
            .map(|pi| pl_log_likelihood(&Permutation { pi }, &mu).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() <= 1e-12, "{total}");
    }

    #[test]
    fn linearization_constant() {
        let p = Permutation::new(vec![1, 0]).unwrap();
        let (c, lin) = pl_linearized_ll(&p, &[0.0, 0.0]).unwrap();
        assert_eq!(c, -(2f64.ln()));
        assert_eq!(lin, 0.0);
        let p = Permutation::new(vec![3, 1, 0, 2]).unwrap();
        let (c, _) = pl_linearized_ll(&p, &[0.0; 4]).unwrap();
        assert_eq!(c, pl_log_likelihood(&p, &[0.0; 4]).unwrap());
        let (_, lin) = pl_linearized_ll(&p, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(lin, 2.0);
    }

    #[test]
    fn joint_ll_reductions() {
        let a = Permutation::new(vec![0, 2, 1]).unwrap();
        let b = Permutation::new(vec![1, 0, 2]).unwrap();
        let mu = [0.4, -0.2, 1.1];
        let la = pl_log_likelihood(&a, &mu).unwrap();
        let lb = pl_log_likelihood(&b, &mu).unwrap();
        assert_eq!(joint_ll(&a, &a, &mu, 0.3).unwrap(), 0.3 * la + 0.7 * la);
        assert_eq!(joint_ll(&a, &b, &mu, 1.0).unwrap(), la);
        assert!((joint_ll(&a, &b, &mu, 0.5).unwrap() - 0.5 * (la + lb)).abs() < 1e-15);
    }

    #[test]
    fn brute_force_small() {
        // untied: GLASS = (2.3, 1.0, 2.7) at λ = 0.3
        let l = rv(&[3, 1, 2]);
        let g = rv(&[2, 1, 3]);
        let got = brute_force_ml_ranking(&l, &g, 0.3).unwrap();
        assert_eq!(got, vec![Permutation { pi: vec![2, 0, 1] }]);
        assert_eq!(brute_force_ml_ranking(&l, &l, 0.3).unwrap(), vec![Permutation::from_ranks(&l)]);
        // fully tied
        let tied = brute_force_ml_ranking(&rv(&[3, 1, 2]), &rv(&[1, 3, 2]), 0.5).unwrap();
        assert_eq!(tied.len(), 6);
        assert!(brute_force_ml_ranking(&rv(&(1..=9).collect::<Vec<_>>()), &rv(&(1..=9).collect::<Vec<_>>()), 0.5).is_err());
    }

    #[test]
    fn gumbel_dominant_item_wins() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mu = [0.0, 20.0, 0.0, 0.0];
        let wins = (0..10_000).filter(|_| gumbel_rank_sample(&mu, &mut rng).unwrap().pi[0] == 1).count();
        assert!(wins as f64 / 1e4 >= 0.999);
    }

    proptest! {
        #[test]
        fn ranks_are_permutations(scores in prop::collection::vec(-5i32..5, 1..30)) {
            let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
            let r = rank_scores(&s, TiePolicy::default()).unwrap();
            prop_assert!(check_rank_permutation(&r.ranks).is_ok());
            let p = Permutation::from_ranks(&r);
            prop_assert!(Permutation::new(p.pi.clone()).is_ok());
            prop_assert_eq!(p.to_ranks(), r.ranks);
        }

        #[test]
        fn monotone_transform_keeps_ranks(scores in prop::collection::vec(-10.0f64..10.0, 1..30)) {
            let t: Vec<f64> = scores.iter().map(|x| (x * 0.5).exp() + 3.0).collect();
            prop_assert_eq!(
                rank_scores(&scores, TiePolicy::default()).unwrap(),
                rank_scores(&t, TiePolicy::default()).unwrap()
            );
        }

        #[test]
        fn top_k_matches_full_sort(
            local in prop::collection::vec(0u8..6, 2..20),
            global in prop::collection::vec(0u8..6, 2..20),
            lam in 0usize..5,
            k_frac in 0.0f64..1.0,
        ) {
            let m = local.len().min(global.len());
            let lf: Vec<f64> = local[..m].iter().map(|&x| x as f64).collect();
            let gf: Vec<f64> = global[..m].iter().map(|&x| x as f64).collect();
            let lambda = [0.0, 0.25, 0.5, 0.75, 1.0][lam];
            let rl = rank_scores(&lf, TiePolicy::default()).unwrap();
            let rg = rank_scores(&gf, TiePolicy::default()).unwrap();
            let s = glass_score(&rl, &rg, lambda).unwrap();
            let k = 1 + ((m - 1) as f64 * k_frac) as usize;
            // reference: exact rational key 4*score, integer comparisons only
            let key = |i: usize| ((lambda * 4.0) as usize * rl.ranks[i] + ((1.0 - lambda) * 4.0) as usize * rg.ranks[i], rl.ranks[i]);
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| key(b).cmp(&key(a)).then(a.cmp(&b)));
            let mut want = order[..k].to_vec();
            want.sort_unstable();
            prop_assert_eq!(select_top_k(&s, k, TiePolicy::default()).unwrap(), want);
        }
    }
}
