//! Tabular alpha-vector machinery over explicit models.
//!
//! The optimal value function of a finite-horizon POMDP is piecewise linear
//! and convex: the max over a finite set of per-state value vectors. This
//! module implements exact point-based Bellman backups on such sets, the QMDP
//! upper bound, the blind-policy lower bound, and a brute-force expectimax
//! oracle used to verify everything else.

use crate::model::{Belief, ExplicitPomdp};
use ndarray::Array1;
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

/// Componentwise tolerance for duplicate-vector detection.
const DUP_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("alpha set is empty")]
    EmptySet,
    #[error("expectimax enumeration exceeded the node budget of {0}")]
    BudgetExceeded(usize),
}

/// A per-state value vector together with the action it recommends.
#[derive(Clone, Debug)]
pub struct AlphaVector {
    pub values: Array1<f64>,
    pub action: usize,
}

impl AlphaVector {
    pub fn dot(&self, b: &Belief) -> f64 {
        self.values.dot(b.probs())
    }
}

/// A finite set of alpha-vectors; the represented value function is
/// `V(b) = max_alpha b . alpha`.
#[derive(Clone, Debug, Default)]
pub struct AlphaSet {
    pub vectors: Vec<AlphaVector>,
}

impl AlphaSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Max of `b . alpha` with the maximizing vector; ties break toward the
    /// lowest index.
    pub fn value(&self, b: &Belief) -> Result<(f64, &AlphaVector), ExactError> {
        let mut best: Option<(f64, usize)> = None;
        for (i, alpha) in self.vectors.iter().enumerate() {
            let v = alpha.dot(b);
            match best {
                Some((bv, _)) if v <= bv => {}
                _ => best = Some((v, i)),
            }
        }
        best.map(|(v, i)| (v, &self.vectors[i]))
            .ok_or(ExactError::EmptySet)
    }

    fn contains_duplicate(&self, values: &Array1<f64>) -> bool {
        self.vectors.iter().any(|alpha| {
            alpha
                .values
                .iter()
                .zip(values.iter())
                .all(|(a, b)| (a - b).abs() <= DUP_TOL)
        })
    }

    /// Plain text export: one `action <name>: v0 v1 ...` row per vector.
    pub fn export_text(&self, model: &ExplicitPomdp) -> String {
        let mut out = String::new();
        for alpha in &self.vectors {
            let _ = write!(out, "action {}:", model.actions[alpha.action]);
            for v in alpha.values.iter() {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

/// One exact point-based Bellman backup at belief `b`.
///
/// For each action and observation, picks the current vector maximizing the
/// (unnormalized) posterior value, assembles the action vectors, and keeps
/// the best one at `b`. Returns the input set extended with that vector, or
/// unchanged when it duplicates an existing one. Observations that are
/// unreachable from `b` contribute through the lowest-index vector, which is
/// a valid (arbitrary) completion because any fixed choice keeps the result
/// a lower bound.
pub fn backup(model: &ExplicitPomdp, gamma_set: &AlphaSet, b: &Belief) -> AlphaSet {
    let alpha = backup_vector(model, gamma_set, b);
    let mut out = gamma_set.clone();
    if !out.contains_duplicate(&alpha.values) {
        out.vectors.push(alpha);
    }
    out
}

/// The raw backed-up vector at `b`, without set bookkeeping.
fn backup_vector(model: &ExplicitPomdp, gamma_set: &AlphaSet, b: &Belief) -> AlphaVector {
    assert!(!gamma_set.is_empty(), "backup requires a seeded alpha set");
    let (s_n, a_n, o_n) = (
        model.n_states(),
        model.n_actions(),
        model.n_observations(),
    );
    let mut best_alpha: Option<(f64, Array1<f64>, usize)> = None;
    for a in 0..a_n {
        // alpha_{a,o}: maximizer of the unnormalized posterior weights; the
        // scaling by Pr(o|b,a) does not change the argmax.
        let mut g = Array1::<f64>::zeros(s_n);
        for o in 0..o_n {
            let w = model.posterior_weights(b, a, o);
            let mut pick = 0usize;
            let mut pick_v = f64::NEG_INFINITY;
            for (i, alpha) in gamma_set.vectors.iter().enumerate() {
                let v = alpha.values.dot(&w);
                if v > pick_v {
                    pick_v = v;
                    pick = i;
                }
            }
            let chosen = &gamma_set.vectors[pick].values;
            // g(s') accumulates O(o|a,s') * alpha_{a,o}(s') over o.
            for sj in 0..s_n {
                g[sj] += model.observation[[a, sj, o]] * chosen[sj];
            }
        }
        let mut alpha_a = Array1::<f64>::zeros(s_n);
        for si in 0..s_n {
            let mut future = 0.0;
            for sj in 0..s_n {
                future += model.transition[[si, a, sj]] * g[sj];
            }
            alpha_a[si] = model.reward[[si, a]] + model.discount * future;
        }
        let v = alpha_a.dot(b.probs());
        match &best_alpha {
            Some((bv, _, _)) if v <= *bv => {}
            _ => best_alpha = Some((v, alpha_a, a)),
        }
    }
    let (_, values, action) = best_alpha.expect("at least one action");
    AlphaVector { values, action }
}

/// Per-action blind-policy vectors: the fixed point of repeating one action
/// forever. A standard valid lower bound used to seed backups.
pub fn blind_alpha_set(model: &ExplicitPomdp) -> AlphaSet {
    let (s_n, a_n) = (model.n_states(), model.n_actions());
    let mut set = AlphaSet::default();
    for a in 0..a_n {
        let mut alpha = Array1::<f64>::zeros(s_n);
        loop {
            let mut next = Array1::<f64>::zeros(s_n);
            for si in 0..s_n {
                let mut future = 0.0;
                for sj in 0..s_n {
                    future += model.transition[[si, a, sj]] * alpha[sj];
                }
                next[si] = model.reward[[si, a]] + model.discount * future;
            }
            let residual = next
                .iter()
                .zip(alpha.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            alpha = next;
            if residual <= 1e-13 {
                break;
            }
        }
        if !set.contains_duplicate(&alpha) {
            set.vectors.push(AlphaVector { values: alpha, action: a });
        }
    }
    set
}

/// Point-based value iteration: each sweep replaces the set with the backups
/// of every belief in `beliefs` (deduplicated), so the set stays at most
/// `beliefs.len()` vectors. Stops once the value change at every belief drops
/// to `epsilon` or after `max_iters` sweeps. Seeded with the blind-policy
/// vectors, every vector produced is the exact value of some policy tree, so
/// values at the backed-up beliefs rise monotonically toward the optimum
/// restricted to this belief set.
pub fn pbvi_solve(
    model: &ExplicitPomdp,
    beliefs: &[Belief],
    epsilon: f64,
    max_iters: usize,
) -> AlphaSet {
    assert!(!beliefs.is_empty(), "pbvi_solve needs at least one belief");
    let mut set = blind_alpha_set(model);
    let mut values: Vec<f64> = beliefs
        .iter()
        .map(|b| set.value(b).expect("seeded set").0)
        .collect();
    for _ in 0..max_iters {
        let mut next = AlphaSet::default();
        for b in beliefs {
            let alpha = backup_vector(model, &set, b);
            if !next.contains_duplicate(&alpha.values) {
                next.vectors.push(alpha);
            }
        }
        set = next;
        let new_values: Vec<f64> = beliefs
            .iter()
            .map(|b| set.value(b).expect("seeded set").0)
            .collect();
        let delta = new_values
            .iter()
            .zip(values.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        values = new_values;
        if delta <= epsilon {
            break;
        }
    }
    set
}

/// QMDP: Q-function of the fully observable MDP, value-iterated to a Bellman
/// residual of at most `epsilon`. `UB(b) = max_a sum_s b(s) Q(s,a)` is an
/// upper bound on the POMDP value.
pub fn qmdp_bounds(model: &ExplicitPomdp, epsilon: f64) -> ndarray::Array2<f64> {
    let (s_n, a_n) = (model.n_states(), model.n_actions());
    let mut q = ndarray::Array2::<f64>::zeros((s_n, a_n));
    loop {
        let v: Vec<f64> = (0..s_n)
            .map(|s| (0..a_n).map(|a| q[[s, a]]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut residual = 0.0f64;
        for s in 0..s_n {
            for a in 0..a_n {
                let mut future = 0.0;
                for sj in 0..s_n {
                    future += model.transition[[s, a, sj]] * v[sj];
                }
                let next = model.reward[[s, a]] + model.discount * future;
                residual = residual.max((next - q[[s, a]]).abs());
                q[[s, a]] = next;
            }
        }
        if residual <= epsilon {
            break;
        }
    }
    q
}

/// Belief-space QMDP upper bound from a Q table.
pub fn qmdp_belief_bound(q: &ndarray::Array2<f64>, b: &Belief) -> f64 {
    let a_n = q.dim().1;
    (0..a_n)
        .map(|a| {
            b.probs()
                .iter()
                .enumerate()
                .map(|(s, &mass)| mass * q[[s, a]])
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Exact finite-horizon optimal value at `b` by full enumeration of the
/// Bellman recursion. Memoized on (quantized belief, depth); `node_budget`
/// caps the number of distinct subproblems evaluated.
pub struct ExpectimaxOracle<'m> {
    model: &'m ExplicitPomdp,
    memo: HashMap<(Vec<i64>, u32), f64>,
    node_budget: usize,
    nodes: usize,
}

impl<'m> ExpectimaxOracle<'m> {
    pub fn new(model: &'m ExplicitPomdp, node_budget: usize) -> Self {
        ExpectimaxOracle {
            model,
            memo: HashMap::new(),
            node_budget,
            nodes: 0,
        }
    }

    fn key(b: &Belief, depth: u32) -> (Vec<i64>, u32) {
        // Quantize at 1e-12 so beliefs reached along different but
        // mathematically equivalent paths share a memo entry. The value
        // perturbation this introduces is orders below every tolerance used
        // against the oracle.
        let q = b
            .probs()
            .iter()
            .map(|p| (p * 1e12).round() as i64)
            .collect();
        (q, depth)
    }

    pub fn value(&mut self, b: &Belief, depth: u32) -> Result<f64, ExactError> {
        if depth == 0 {
            return Ok(0.0);
        }
        let key = Self::key(b, depth);
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        self.nodes += 1;
        if self.nodes > self.node_budget {
            return Err(ExactError::BudgetExceeded(self.node_budget));
        }
        let mut best = f64::NEG_INFINITY;
        for a in 0..self.model.n_actions() {
            let mut q = self.model.belief_reward(b, a);
            for o in 0..self.model.n_observations() {
                let p = self.model.obs_probability(b, a, o);
                if p <= 0.0 {
                    continue;
                }
                let post = self
                    .model
                    .belief_update(b, a, o)
                    .expect("positive-probability observation");
                q += self.model.discount * p * self.value(&post, depth - 1)?;
            }
            best = best.max(q);
        }
        self.memo.insert(key, best);
        Ok(best)
    }
}

/// Convenience wrapper over [`ExpectimaxOracle`] with a 20M-node budget.
pub fn expectimax_oracle(
    model: &ExplicitPomdp,
    b: &Belief,
    depth: u32,
) -> Result<f64, ExactError> {
    ExpectimaxOracle::new(model, 20_000_000).value(b, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::tiger::tiger_model;
    use crate::rng::{Phase, RngFactory};
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn tiger_belief_points() -> Vec<Belief> {
        // Uniform plus the listen-posterior ladder out to near-certainty.
        let m = tiger_model();
        let mut beliefs = vec![Belief::uniform(2)];
        let mut frontier = vec![Belief::uniform(2)];
        for _ in 0..12 {
            let mut next = Vec::new();
            for b in &frontier {
                for o in 0..2 {
                    let post = m.belief_update(b, 0, o).unwrap();
                    next.push(post);
                }
            }
            for b in &next {
                if !beliefs
                    .iter()
                    .any(|x| (x.probs()[0] - b.probs()[0]).abs() < 1e-9)
                {
                    beliefs.push(b.clone());
                }
            }
            frontier = next;
        }
        beliefs
    }

    #[test]
    fn value_picks_lowest_index_on_ties() {
        let set = AlphaSet {
            vectors: vec![
                AlphaVector {
                    values: Array1::from_vec(vec![1.0, 0.0]),
                    action: 0,
                },
                AlphaVector {
                    values: Array1::from_vec(vec![0.0, 1.0]),
                    action: 1,
                },
            ],
        };
        let (v, alpha) = set.value(&Belief::uniform(2)).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert_eq!(alpha.action, 0);
    }

    #[test]
    fn empty_set_errors() {
        let set = AlphaSet::default();
        assert!(matches!(
            set.value(&Belief::uniform(2)),
            Err(ExactError::EmptySet)
        ));
    }

    #[test]
    fn blind_values_for_tiger() {
        // Always-listen is worth -1/(1-gamma) = -20 in both states. Always
        // opening one door alternates +10/-100 on a uniformly resampled
        // tiger: alpha = r_a + gamma * (-45)/(1-gamma) elsewhere; fixed point
        // gives -955 behind the door and -845 on the safe side.
        let m = tiger_model();
        let set = blind_alpha_set(&m);
        let listen = set.vectors.iter().find(|a| a.action == 0).unwrap();
        assert!((listen.values[0] + 20.0).abs() < 1e-9);
        assert!((listen.values[1] + 20.0).abs() < 1e-9);
        let open_l = set.vectors.iter().find(|a| a.action == 1).unwrap();
        assert!((open_l.values[0] + 955.0).abs() < 1e-6);
        assert!((open_l.values[1] + 845.0).abs() < 1e-6);
    }

    #[test]
    fn backup_at_uniform_prefers_listen() {
        // From the blind seed, the one-step backup at uniform picks listen
        // and re-derives the blind listen vector (-1 + 0.95 * -20 = -20), so
        // deduplication leaves the set unchanged.
        let m = tiger_model();
        let seed = blind_alpha_set(&m);
        let out = backup(&m, &seed, &Belief::uniform(2));
        assert_eq!(out.len(), seed.len());
        let (v, alpha) = out.value(&Belief::uniform(2)).unwrap();
        assert_eq!(alpha.action, 0);
        assert!((v + 20.0).abs() < 1e-9);
    }

    #[test]
    fn backup_at_near_certainty_opens_the_safe_door() {
        // At b = (0.999, 0.001) opening the right door with a blind listen
        // continuation is worth 0.999*10 + 0.001*(-100) - 0.95*20 = -9.11,
        // beating listen's -20; a genuinely new vector is appended.
        let m = tiger_model();
        let seed = blind_alpha_set(&m);
        let b = Belief::from_slice(&[0.999, 0.001]).unwrap();
        let out = backup(&m, &seed, &b);
        assert_eq!(out.len(), seed.len() + 1);
        let added = out.vectors.last().unwrap();
        assert_eq!(added.action, 2);
        assert!((added.values[0] + 9.0).abs() < 1e-9);
        assert!((added.values[1] + 119.0).abs() < 1e-9);
    }

    #[test]
    fn single_action_backup_ignores_belief() {
        let mut rng = RngFactory::new(5).stream(Phase::Test, 0, 0);
        let s_n = 3;
        let mut transition = Array3::zeros((s_n, 1, s_n));
        for si in 0..s_n {
            let row: Vec<f64> = (0..s_n).map(|_| rng.random::<f64>() + 0.1).collect();
            let sum: f64 = row.iter().sum();
            for (sj, v) in row.iter().enumerate() {
                transition[[si, 0, sj]] = v / sum;
            }
        }
        let mut observation = Array3::zeros((1, s_n, 2));
        for sj in 0..s_n {
            observation[[0, sj, 0]] = 0.5;
            observation[[0, sj, 1]] = 0.5;
        }
        let mut reward = Array2::zeros((s_n, 1));
        for si in 0..s_n {
            reward[[si, 0]] = rng.random_range(-1.0..1.0);
        }
        let m = ExplicitPomdp {
            name: "single".into(),
            states: vec!["x".into(), "y".into(), "z".into()],
            actions: vec!["a".into()],
            observations: vec!["o0".into(), "o1".into()],
            transition,
            observation,
            reward,
            discount: 0.9,
            initial_belief: Belief::uniform(3),
        };
        m.validate().unwrap();
        let seed = blind_alpha_set(&m);
        let b1 = backup(&m, &seed, &Belief::from_slice(&[0.8, 0.1, 0.1]).unwrap());
        let b2 = backup(&m, &seed, &Belief::from_slice(&[0.1, 0.1, 0.8]).unwrap());
        let v1 = &b1.vectors.last().unwrap().values;
        let v2 = &b2.vectors.last().unwrap().values;
        for i in 0..s_n {
            assert!((v1[i] - v2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backup_at_converged_point_is_stable() {
        let m = tiger_model();
        let beliefs = tiger_belief_points();
        let set = pbvi_solve(&m, &beliefs, 1e-10, 5000);
        assert!(set.len() <= beliefs.len(), "sweep replacement bounds the set");
        let (v, alpha) = set.value(&Belief::uniform(2)).unwrap();
        assert_eq!(alpha.action, 0, "listen is optimal at uniform");
        let again = backup(&m, &set, &Belief::uniform(2));
        let (v2, alpha2) = again.value(&Belief::uniform(2)).unwrap();
        assert!((v2 - v).abs() < 1e-8, "converged value moved: {v} -> {v2}");
        assert_eq!(alpha2.action, 0);
    }

    #[test]
    fn qmdp_values_for_tiger() {
        // Fully observable tiger: open the right door every step for
        // V = 10/(1-gamma) = 200; Q(uniform-mix, listen) = -1 + 190 = 189.
        let m = tiger_model();
        let q = qmdp_bounds(&m, 1e-10);
        assert!((q[[0, 2]] - 200.0).abs() < 1e-6);
        assert!((q[[1, 1]] - 200.0).abs() < 1e-6);
        assert!((q[[0, 0]] - 189.0).abs() < 1e-6);
        let ub = qmdp_belief_bound(&q, &Belief::uniform(2));
        assert!((ub - 189.0).abs() < 1e-6);
    }

    #[test]
    fn single_action_constant_reward_q_is_geometric() {
        let m = ExplicitPomdp {
            name: "const".into(),
            states: vec!["s".into()],
            actions: vec!["a".into()],
            observations: vec!["o".into()],
            transition: Array3::from_elem((1, 1, 1), 1.0),
            observation: Array3::from_elem((1, 1, 1), 1.0),
            reward: Array2::from_elem((1, 1), 2.0),
            discount: 0.9,
            initial_belief: Belief::uniform(1),
        };
        let q = qmdp_bounds(&m, 1e-9);
        assert!((q[[0, 0]] - 20.0).abs() < 1e-6);
        let set = pbvi_solve(&m, &[Belief::uniform(1)], 1e-12, 10);
        let (v, _) = set.value(&Belief::uniform(1)).unwrap();
        assert!((v - 20.0).abs() < 1e-9);
    }

    #[test]
    fn expectimax_depths_zero_and_one() {
        let m = tiger_model();
        let b = Belief::uniform(2);
        assert_eq!(expectimax_oracle(&m, &b, 0).unwrap(), 0.0);
        let v1 = expectimax_oracle(&m, &b, 1).unwrap();
        assert!((v1 + 1.0).abs() < 1e-12, "depth-1 value is listen's -1");
    }

    #[test]
    fn expectimax_horizon_sequence() {
        // Early horizons pay for information: v1 = -1 (one listen), v2 =
        // -1.95 (two listens). The sequence is not monotone; horizon parity
        // produces a dip at depth 4 before the climb toward the
        // infinite-horizon value settles in.
        let m = tiger_model();
        let b = Belief::uniform(2);
        let mut oracle = ExpectimaxOracle::new(&m, 20_000_000);
        let vals: Vec<f64> = (0..=20).map(|d| oracle.value(&b, d).unwrap()).collect();
        assert_eq!(vals[0], 0.0);
        assert!((vals[1] + 1.0).abs() < 1e-12);
        assert!((vals[2] + 1.95).abs() < 1e-12);
        assert!(vals[4] < vals[3], "parity dip at depth 4: {vals:?}");
        for d in 5..vals.len() {
            assert!(
                vals[d] >= vals[d - 1] - 1e-12,
                "sequence must rise from depth 5 on: {vals:?}"
            );
        }
        assert!(vals[20] > 10.0, "20-step tiger value: {}", vals[20]);
    }

    #[test]
    fn expectimax_budget_exceeded() {
        let m = tiger_model();
        let mut oracle = ExpectimaxOracle::new(&m, 10);
        let err = oracle.value(&Belief::uniform(2), 12).unwrap_err();
        assert!(matches!(err, ExactError::BudgetExceeded(10)));
    }

    #[test]
    fn pbvi_matches_deep_expectimax_within_005() {
        let m = tiger_model();
        let beliefs = tiger_belief_points();
        let set = pbvi_solve(&m, &beliefs, 1e-9, 3000);
        let (v, _) = set.value(&Belief::uniform(2)).unwrap();
        let mut oracle = ExpectimaxOracle::new(&m, 50_000_000);
        let deep = oracle.value(&Belief::uniform(2), 170).unwrap();
        assert!(
            (v - deep).abs() < 0.05,
            "pbvi {v} vs depth-170 expectimax {deep}"
        );
    }

    #[test]
    fn pbvi_single_sweep_when_epsilon_infinite() {
        let m = tiger_model();
        let set = pbvi_solve(&m, &[Belief::uniform(2)], f64::INFINITY, 100);
        // An infinite tolerance stops after the first sweep, which replaces
        // the seed with one vector per belief point.
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn sandwich_and_monotonicity_during_pbvi() {
        let m = tiger_model();
        let q = qmdp_bounds(&m, 1e-10);
        let beliefs = tiger_belief_points();
        let mut set = blind_alpha_set(&m);
        let mut prev: Vec<f64> = beliefs
            .iter()
            .map(|b| set.value(b).unwrap().0)
            .collect();
        for _ in 0..120 {
            for (i, b) in beliefs.iter().enumerate() {
                set = backup(&m, &set, b);
                let (v, _) = set.value(b).unwrap();
                assert!(v >= prev[i] - 1e-10, "value decreased at backed-up belief");
                let ub = qmdp_belief_bound(&q, b);
                assert!(v <= ub + 1e-6, "value {v} above QMDP bound {ub}");
                prev[i] = v;
            }
        }
    }

    #[test]
    fn qmdp_dominates_solved_value_on_random_beliefs() {
        let m = tiger_model();
        let q = qmdp_bounds(&m, 1e-10);
        let set = pbvi_solve(&m, &tiger_belief_points(), 1e-9, 2000);
        let mut rng = RngFactory::new(11).stream(Phase::Test, 2, 0);
        for _ in 0..1000 {
            let p: f64 = rng.random();
            let b = Belief::from_slice(&[p, 1.0 - p]).unwrap();
            let (v, _) = set.value(&b).unwrap();
            assert!(qmdp_belief_bound(&q, &b) >= v - 1e-9);
        }
    }

    #[test]
    fn pwlc_convexity_on_solved_set() {
        let m = tiger_model();
        let set = pbvi_solve(&m, &tiger_belief_points(), 1e-9, 2000);
        let mut rng = RngFactory::new(13).stream(Phase::Test, 3, 0);
        for _ in 0..1000 {
            let p1: f64 = rng.random();
            let p2: f64 = rng.random();
            let lam: f64 = rng.random();
            let b1 = Belief::from_slice(&[p1, 1.0 - p1]).unwrap();
            let b2 = Belief::from_slice(&[p2, 1.0 - p2]).unwrap();
            let mix = Belief::from_slice(&[
                lam * p1 + (1.0 - lam) * p2,
                lam * (1.0 - p1) + (1.0 - lam) * (1.0 - p2),
            ])
            .unwrap();
            let v_mix = set.value(&mix).unwrap().0;
            let v1 = set.value(&b1).unwrap().0;
            let v2 = set.value(&b2).unwrap().0;
            assert!(v_mix <= lam * v1 + (1.0 - lam) * v2 + 1e-10);
        }
    }
}
