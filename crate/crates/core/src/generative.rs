//! Black-box simulator interface for large or continuous domains.
//!
//! The sampling solver only needs a generative model: draw an initial state,
//! simulate one step, vectorize states for the value networks, and expose a
//! few structural facts. Explicit models can be wrapped so both solver paths
//! run against the same domain.

use crate::exact;
use crate::model::ExplicitPomdp;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Result of one simulated step.
#[derive(Clone, Debug)]
pub struct Step<S> {
    pub state: S,
    pub observation: usize,
    pub reward: f64,
}

/// A simulatable POMDP with a finite (possibly quantized) observation set.
///
/// Terminal states are absorbing: stepping one yields the same state and
/// reward 0. `state_key` must be injective so particle multisets can be
/// canonicalized and predictions cached exactly.
pub trait GenerativeDomain: Send + Sync {
    type State: Clone + Send + Sync + 'static;

    /// Stable identifier, including instance parameters (used in policy
    /// headers and run manifests).
    fn domain_id(&self) -> &str;
    fn action_count(&self) -> usize;
    fn observation_count(&self) -> usize;
    fn discount(&self) -> f64;

    fn action_name(&self, a: usize) -> String {
        format!("a{a}")
    }

    fn observation_name(&self, o: usize) -> String {
        format!("o{o}")
    }

    /// Episode truncation horizon for rollouts and evaluation.
    fn max_episode_steps(&self) -> usize {
        200
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Self::State;
    fn step(&self, s: &Self::State, a: usize, rng: &mut ChaCha8Rng) -> Step<Self::State>;
    fn is_terminal(&self, s: &Self::State) -> bool;

    /// Length of the vectorized state fed to value networks.
    fn state_dim(&self) -> usize;
    fn vectorize_into(&self, s: &Self::State, out: &mut [f64]);

    /// Injective encoding of a state; equal keys mean equal states.
    fn state_key(&self, s: &Self::State) -> u128;

    /// (min, max) over all one-step rewards.
    fn reward_bounds(&self) -> (f64, f64);

    /// (min, max) over all discounted returns. The default scales the reward
    /// bounds by the geometric series; domains override with tighter bounds.
    fn return_bounds(&self) -> (f64, f64) {
        let (lo, hi) = self.reward_bounds();
        let f = 1.0 / (1.0 - self.discount());
        (lo.min(0.0) * f, hi.max(0.0) * f)
    }

    /// Writes an upper bound on the fully-observable-MDP Q-values of `s`
    /// into `out` (one entry per action) and returns true, or returns false
    /// when the domain offers no such bound. Bounds must dominate the true
    /// MDP Q-function so belief upper bounds stay valid.
    fn mdp_upper_q(&self, _s: &Self::State, _out: &mut [f64]) -> bool {
        false
    }

    /// Exact particle allocation for the initial belief, for domains that
    /// know their initial distribution in closed form. `None` falls back
    /// to i.i.d. sampling. Returned counts must sum to `nb`.
    fn initial_counts(&self, _nb: u32) -> Option<Vec<(Self::State, u32)>> {
        None
    }

    /// Hidden-layer widths for this domain's value networks.
    fn default_hidden_layers(&self) -> Vec<usize> {
        vec![32, 16]
    }

    /// Convenience: vectorize a batch of states into a fresh matrix.
    fn vectorize_batch(&self, states: &[&Self::State]) -> Array2<f64> {
        let d = self.state_dim();
        let mut x = Array2::zeros((states.len(), d));
        for (i, s) in states.iter().enumerate() {
            self.vectorize_into(s, x.row_mut(i).as_slice_mut().expect("row is contiguous"));
        }
        x
    }
}

/// An explicit model viewed as a generative domain. States are indices,
/// vectorized one-hot; the exact QMDP table backs `mdp_upper_q`.
pub struct ExplicitAsGenerative {
    model: ExplicitPomdp,
    qmdp: ndarray::Array2<f64>,
    id: String,
}

impl ExplicitAsGenerative {
    pub fn new(model: ExplicitPomdp) -> Self {
        let qmdp = exact::qmdp_bounds(&model, 1e-9);
        let id = model.name.clone();
        ExplicitAsGenerative { model, qmdp, id }
    }

    pub fn model(&self) -> &ExplicitPomdp {
        &self.model
    }

    fn sample_row(cum_src: impl Iterator<Item = f64>, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in cum_src.enumerate() {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        // Rounding can leave acc slightly below 1; fall back to the last index.
        last
    }
}

impl GenerativeDomain for ExplicitAsGenerative {
    type State = usize;

    fn domain_id(&self) -> &str {
        &self.id
    }

    fn action_count(&self) -> usize {
        self.model.n_actions()
    }

    fn observation_count(&self) -> usize {
        self.model.n_observations()
    }

    fn discount(&self) -> f64 {
        self.model.discount
    }

    fn action_name(&self, a: usize) -> String {
        self.model.actions[a].clone()
    }

    fn observation_name(&self, o: usize) -> String {
        self.model.observations[o].clone()
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        Self::sample_row(self.model.initial_belief.probs().iter().copied(), u)
    }

    fn initial_counts(&self, nb: u32) -> Option<Vec<(usize, u32)>> {
        // Largest-remainder allocation; fractional ties break on state index.
        let probs = self.model.initial_belief.probs();
        let mut alloc: Vec<(usize, u32, f64)> = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, &p)| {
                let exact = p * nb as f64;
                (s, exact.floor() as u32, exact - exact.floor())
            })
            .collect();
        let assigned: u32 = alloc.iter().map(|&(_, c, _)| c).sum();
        let mut order: Vec<usize> = (0..alloc.len()).collect();
        order.sort_by(|&i, &j| {
            alloc[j].2
                .partial_cmp(&alloc[i].2)
                .expect("remainders are finite")
                .then(alloc[i].0.cmp(&alloc[j].0))
        });
        for k in 0..(nb - assigned) as usize {
            alloc[order[k % order.len()]].1 += 1;
        }
        Some(
            alloc
                .into_iter()
                .filter(|&(_, c, _)| c > 0)
                .map(|(s, c, _)| (s, c))
                .collect(),
        )
    }

    fn step(&self, s: &usize, a: usize, rng: &mut ChaCha8Rng) -> Step<usize> {
        let reward = self.model.reward[[*s, a]];
        let u: f64 = rng.random();
        let s2 = Self::sample_row(
            (0..self.model.n_states()).map(|j| self.model.transition[[*s, a, j]]),
            u,
        );
        let u: f64 = rng.random();
        let o = Self::sample_row(
            (0..self.model.n_observations()).map(|j| self.model.observation[[a, s2, j]]),
            u,
        );
        Step {
            state: s2,
            observation: o,
            reward,
        }
    }

    fn is_terminal(&self, _s: &usize) -> bool {
        false
    }

    fn state_dim(&self) -> usize {
        self.model.n_states()
    }

    fn vectorize_into(&self, s: &usize, out: &mut [f64]) {
        out.fill(0.0);
        out[*s] = 1.0;
    }

    fn state_key(&self, s: &usize) -> u128 {
        *s as u128
    }

    fn reward_bounds(&self) -> (f64, f64) {
        let lo = self.model.reward.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self
            .model
            .reward
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    fn mdp_upper_q(&self, s: &usize, out: &mut [f64]) -> bool {
        for a in 0..self.model.n_actions() {
            out[a] = self.qmdp[[*s, a]];
        }
        true
    }
}
