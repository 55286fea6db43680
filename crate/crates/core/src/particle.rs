//! Particle representations of beliefs over generative domains.
//!
//! A `ParticleBelief` stores its sample multiset deduplicated: unique states
//! with integer counts, sorted by `state_key`. Domains with few reachable
//! states (or few states reachable at a given depth) thereby cost far less
//! memory and prediction work than the raw particle count suggests, and the
//! canonical order gives every belief a stable content id.

use crate::generative::GenerativeDomain;
use crate::rng::StableHasher;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParticleError {
    /// Rejection filtering accepted almost nothing: the observation is
    /// (near-)impossible under the predicted belief.
    #[error("observation {observation} under action {action} starved the particle filter")]
    ObservationStarvation { action: usize, observation: usize },
}

#[derive(Clone, Debug)]
pub struct ParticleBelief<S> {
    uniq: Vec<S>,
    counts: Vec<u32>,
    cum: Vec<u32>,
    total: u32,
    depth: u32,
    id: u64,
}

impl<S: Clone> ParticleBelief<S> {
    /// Builds the canonical deduplicated form of `states`.
    pub fn from_states<D>(domain: &D, states: Vec<S>, depth: u32) -> Self
    where
        D: GenerativeDomain<State = S> + ?Sized,
    {
        assert!(!states.is_empty(), "a belief needs at least one particle");
        let mut keyed: Vec<(u128, S)> = states
            .into_iter()
            .map(|s| (domain.state_key(&s), s))
            .collect();
        keyed.sort_unstable_by_key(|(k, _)| *k);
        let mut uniq = Vec::new();
        let mut counts: Vec<u32> = Vec::new();
        let mut keys: Vec<u128> = Vec::new();
        for (key, state) in keyed {
            if keys.last() == Some(&key) {
                *counts.last_mut().unwrap() += 1;
            } else {
                keys.push(key);
                counts.push(1);
                uniq.push(state);
            }
        }
        let mut hasher = StableHasher::new();
        hasher.write_u64(counts.iter().map(|&c| c as u64).sum());
        for (key, count) in keys.iter().zip(&counts) {
            hasher.write_u128(*key);
            hasher.write_u64(*count as u64);
        }
        let mut cum = Vec::with_capacity(counts.len());
        let mut running = 0u32;
        for &c in &counts {
            running += c;
            cum.push(running);
        }
        ParticleBelief {
            uniq,
            counts,
            cum,
            total: running,
            depth,
            id: hasher.finish(),
        }
    }

    /// Total particle count, with multiplicity.
    pub fn len(&self) -> usize {
        self.total as usize
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Number of distinct states.
    pub fn unique_len(&self) -> usize {
        self.uniq.len()
    }

    pub fn unique_states(&self) -> &[S] {
        &self.uniq
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Content id over the (state key, count) multiset; independent of
    /// insertion order and of depth.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Draws one particle uniformly (counts respected).
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> &S {
        let u = rng.random_range(0..self.total);
        let idx = self.cum.partition_point(|&c| c <= u);
        &self.uniq[idx]
    }

    /// Pairs of (unique state, count) in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (&S, u32)> {
        self.uniq.iter().zip(self.counts.iter().copied())
    }

    /// Count-weighted mean of `f` over the belief.
    pub fn weighted_mean(&self, mut f: impl FnMut(&S) -> f64) -> f64 {
        let mut acc = 0.0;
        for (s, c) in self.iter() {
            acc += c as f64 * f(s);
        }
        acc / self.total as f64
    }
}

/// Rejection-samples `n` particles from the posterior after taking `action`
/// in `belief` and seeing `observation`: draw a particle, step it, keep the
/// successor when the simulated observation matches. Acceptance is checked
/// after a large attempt budget so a possible but rare observation still
/// fills, while a (near-)impossible one errs instead of spinning.
pub fn particle_filter<D: GenerativeDomain + ?Sized>(
    domain: &D,
    belief: &ParticleBelief<D::State>,
    action: usize,
    observation: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleBelief<D::State>, ParticleError> {
    const CHECK_AT: u64 = 1_000_000;
    const MIN_RATE: f64 = 1e-4;
    let mut accepted = Vec::with_capacity(n);
    let mut attempts = 0u64;
    while accepted.len() < n {
        let s = belief.sample(rng);
        let step = domain.step(s, action, rng);
        attempts += 1;
        if step.observation == observation {
            accepted.push(step.state);
        }
        if attempts == CHECK_AT && (accepted.len() as f64) < MIN_RATE * attempts as f64 {
            return Err(ParticleError::ObservationStarvation {
                action,
                observation,
            });
        }
    }
    Ok(ParticleBelief::from_states(
        domain,
        accepted,
        belief.depth + 1,
    ))
}

/// Like `particle_filter`, but bounds total simulation work. When the
/// attempt budget runs out with a usable partial sample the partial belief
/// is returned; with almost nothing accepted the branch starves. Planner
/// expansion uses this so one rare observation cannot stall a backup.
pub(crate) fn particle_filter_capped<D: GenerativeDomain + ?Sized>(
    domain: &D,
    belief: &ParticleBelief<D::State>,
    action: usize,
    observation: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleBelief<D::State>, ParticleError> {
    const MIN_KEEP: usize = 64;
    let budget = (20 * n as u64).max(1_000_000);
    let mut accepted = Vec::with_capacity(n);
    let mut attempts = 0u64;
    while accepted.len() < n && attempts < budget {
        let s = belief.sample(rng);
        let step = domain.step(s, action, rng);
        attempts += 1;
        if step.observation == observation {
            accepted.push(step.state);
        }
    }
    if accepted.len() >= MIN_KEEP {
        Ok(ParticleBelief::from_states(
            domain,
            accepted,
            belief.depth + 1,
        ))
    } else {
        Err(ParticleError::ObservationStarvation {
            action,
            observation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::tiger_generative;
    use crate::domains::tiger::LISTEN;
    use crate::generative::{ExplicitAsGenerative, GenerativeDomain};
    use crate::model::{Belief, ExplicitPomdp};
    use crate::rng::{Phase, RngFactory};
    use ndarray::{Array2, Array3};

    fn uniform_tiger(n: usize) -> (ExplicitAsGenerative, ParticleBelief<usize>) {
        let d = tiger_generative();
        let mut rng = RngFactory::new(11).stream(Phase::Test, 0, 0);
        let states: Vec<usize> = (0..n).map(|_| d.sample_initial(&mut rng)).collect();
        let b = ParticleBelief::from_states(&d, states, 0);
        (d, b)
    }

    #[test]
    fn dedup_and_canonical_order() {
        let d = tiger_generative();
        let b = ParticleBelief::from_states(&d, vec![1, 0, 1, 1, 0], 0);
        assert_eq!(b.len(), 5);
        assert_eq!(b.unique_len(), 2);
        assert_eq!(b.unique_states(), &[0, 1]);
        assert_eq!(b.counts(), &[2, 3]);
        let b2 = ParticleBelief::from_states(&d, vec![0, 1, 1, 0, 1], 3);
        assert_eq!(b.id(), b2.id());
        let b3 = ParticleBelief::from_states(&d, vec![0, 1, 1, 0, 0], 0);
        assert_ne!(b.id(), b3.id());
    }

    #[test]
    fn sampling_respects_counts() {
        let d = tiger_generative();
        let b = ParticleBelief::from_states(&d, vec![0, 1, 1, 1], 0);
        let mut rng = RngFactory::new(12).stream(Phase::Test, 1, 0);
        let mut ones = 0usize;
        let n = 100_000;
        for _ in 0..n {
            if *b.sample(&mut rng) == 1 {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn weighted_mean_matches_hand_value() {
        let d = tiger_generative();
        let b = ParticleBelief::from_states(&d, vec![0, 0, 0, 1], 0);
        let m = b.weighted_mean(|s| if *s == 0 { 4.0 } else { 8.0 });
        assert!((m - 5.0).abs() < 1e-12);
    }

    #[test]
    fn filter_tracks_exact_posterior() {
        let (d, b) = uniform_tiger(20_000);
        let model = crate::domains::tiger_model();
        let exact = model
            .belief_update(&Belief::uniform(2), LISTEN, 0)
            .unwrap();
        let mut rng = RngFactory::new(13).stream(Phase::Filter, 1, 0);
        let post = particle_filter(&d, &b, LISTEN, 0, 20_000, &mut rng).unwrap();
        let mut freq = [0.0f64; 2];
        for (s, c) in post.iter() {
            freq[*s] = c as f64 / post.len() as f64;
        }
        assert!((freq[0] - exact.probs()[0]).abs() < 0.02);
        assert!((freq[1] - exact.probs()[1]).abs() < 0.02);
        assert_eq!(post.depth(), 1);
    }

    #[test]
    fn repeated_filtering_sharpens_belief() {
        let (d, mut b) = uniform_tiger(5_000);
        let factory = RngFactory::new(14);
        for i in 0..6 {
            let mut rng = factory.stream(Phase::Filter, 2, i);
            b = particle_filter(&d, &b, LISTEN, 0, 5_000, &mut rng).unwrap();
        }
        let left = b
            .iter()
            .find(|(s, _)| **s == 0)
            .map(|(_, c)| c as f64 / b.len() as f64)
            .unwrap_or(0.0);
        assert!(left > 0.98, "left mass {left}");
    }

    fn rare_obs_model(p: f64) -> ExplicitPomdp {
        // One state, identity transition, observation 1 with probability p.
        ExplicitPomdp {
            name: "rare-obs".into(),
            states: vec!["s".into()],
            actions: vec!["a".into()],
            observations: vec!["o0".into(), "o1".into()],
            transition: Array3::from_shape_fn((1, 1, 1), |_| 1.0),
            observation: Array3::from_shape_vec((1, 1, 2), vec![1.0 - p, p]).unwrap(),
            reward: Array2::zeros((1, 1)),
            discount: 0.9,
            initial_belief: Belief::point(0, 1),
        }
    }

    #[test]
    fn capped_filter_accepts_partial_fill_on_rare_observation() {
        let model = rare_obs_model(1e-3);
        model.validate().unwrap();
        let d = ExplicitAsGenerative::new(model);
        let b = ParticleBelief::from_states(&d, vec![0usize; 64], 0);
        let mut rng = RngFactory::new(16).stream(Phase::Filter, 4, 0);
        let post = particle_filter_capped(&d, &b, 0, 1, 100_000, &mut rng).unwrap();
        // Budget 2M attempts at rate 1e-3 yields roughly 2000 particles.
        assert!(post.len() >= 64, "partial fill too small: {}", post.len());
        assert!(post.len() < 100_000, "rare branch should not fill fully");
    }

    #[test]
    fn capped_filter_starves_on_impossible_observation() {
        let model = rare_obs_model(0.0);
        model.validate().unwrap();
        let d = ExplicitAsGenerative::new(model);
        let b = ParticleBelief::from_states(&d, vec![0usize; 64], 0);
        let mut rng = RngFactory::new(17).stream(Phase::Filter, 5, 0);
        let err = particle_filter_capped(&d, &b, 0, 1, 1000, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            ParticleError::ObservationStarvation {
                action: 0,
                observation: 1
            }
        ));
    }

    #[test]
    fn impossible_observation_starves() {
        // One state, identity transition, observation always 0.
        let model = ExplicitPomdp {
            name: "det-obs".into(),
            states: vec!["s".into()],
            actions: vec!["a".into()],
            observations: vec!["o0".into(), "o1".into()],
            transition: Array3::from_shape_fn((1, 1, 1), |_| 1.0),
            observation: Array3::from_shape_vec((1, 1, 2), vec![1.0, 0.0]).unwrap(),
            reward: Array2::zeros((1, 1)),
            discount: 0.9,
            initial_belief: Belief::point(0, 1),
        };
        model.validate().unwrap();
        let d = ExplicitAsGenerative::new(model);
        let b = ParticleBelief::from_states(&d, vec![0usize; 64], 0);
        let mut rng = RngFactory::new(15).stream(Phase::Filter, 3, 0);
        let err = particle_filter(&d, &b, 0, 1, 64, &mut rng).unwrap_err();
        match err {
            ParticleError::ObservationStarvation {
                action,
                observation,
            } => {
                assert_eq!(action, 0);
                assert_eq!(observation, 1);
            }
        }
    }
}
