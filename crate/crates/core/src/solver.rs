//! Value iteration over a growing finite-network controller.
//!
//! The solver keeps a belief graph rooted at the initial belief. Nodes carry
//! upper bounds seeded from an MDP heuristic and lower bounds from the
//! controller. Sampled beliefs of the same posterior never repeat exactly, so
//! a belief reached along a new path merges into an existing node when both
//! share a support and sit within an L1 tolerance scaled to sampling noise;
//! recurring beliefs (a door reset, a localized position) thereby form cycles
//! and their bounds tighten by fixed-point iteration rather than tree
//! unrolling.
//! Each outer iteration descends from the root along upper-bound actions and
//! excess-uncertainty observations, then runs one sampled Bellman backup per
//! collected belief from the deepest up. A backup proposes a controller node
//! (best action plus best successor node per observation); unique proposals
//! get a freshly trained value network and join the controller.

use crate::controller::{
    fnc_to_fsc, fnc_value, node_is_unique, rollout_from, Fnc, FncNode, FncPolicy, Fsc, FscNode,
    PredictionCache,
};
use crate::generative::GenerativeDomain;
use crate::nn::{train, Mlp, NnError, TrainConfig, Trained};
use crate::particle::{particle_filter_capped, ParticleBelief};
use crate::policy_io::PolicyFile;
use crate::rng::{Phase, RngFactory, StableHasher};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::time::Instant;
use thiserror::Error;

/// Rollouts per action when bounding a belief by the best single-action
/// policy; only needed before the controller has any nodes.
const BLIND_ROLLOUTS: usize = 128;

/// Beliefs with more distinct states than this keep no distribution
/// signature and are never merge candidates.
const SIGNATURE_MAX: usize = 512;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("every observation branch at the root starved; nothing to plan on")]
    RootStarvation,
    #[error(transparent)]
    Train(#[from] NnError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Particles per belief.
    pub nb_particle: usize,
    /// Simulations per sampled state when building training targets.
    pub nb_sim: usize,
    /// Distinct states sampled to stand in for the state space.
    pub nb_sample: usize,
    /// Root gap target; `None` means 1% of the domain's return range.
    pub epsilon: Option<f64>,
    /// Maximum collection depth.
    pub max_depth: u32,
    pub time_budget_secs: Option<f64>,
    pub max_backups: Option<usize>,
    pub seed: u64,
    /// Hidden layer widths for node networks; `None` takes the domain
    /// default.
    pub net_hidden: Option<Vec<usize>>,
    /// Materialized-belief cap; beyond it the graph sheds particle storage
    /// and rebuilds beliefs on demand from their creation edges.
    pub belief_cache_cap: usize,
    /// L1 distance under which two same-support beliefs share a graph node.
    /// `None` scales with sampling noise as 2 / sqrt(nb_particle); 0 turns
    /// merging off. A missed merge only duplicates a node, while an overly
    /// eager one biases the bounds, so the default stays near the noise
    /// floor.
    pub merge_l1: Option<f64>,
    pub train: TrainConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            nb_particle: 10_000,
            nb_sim: 100,
            nb_sample: 1024,
            epsilon: None,
            max_depth: 30,
            time_budget_secs: None,
            max_backups: None,
            seed: 0,
            net_hidden: None,
            belief_cache_cap: 256,
            merge_l1: None,
            train: TrainConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive: [(&str, usize); 4] = [
            ("nb_particle", self.nb_particle),
            ("nb_sim", self.nb_sim),
            ("nb_sample", self.nb_sample),
            ("belief_cache_cap", self.belief_cache_cap),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SolverError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                return Err(SolverError::InvalidConfig(format!(
                    "epsilon must be positive, got {eps}"
                )));
            }
        }
        if let Some(t) = self.time_budget_secs {
            if t < 0.0 {
                return Err(SolverError::InvalidConfig(format!(
                    "time budget must be nonnegative, got {t}"
                )));
            }
        }
        if let Some(d) = self.merge_l1 {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(SolverError::InvalidConfig(format!(
                    "merge_l1 must be a nonnegative finite number, got {d}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    TimeBudgetExceeded,
    MaxBackupsReached,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::TimeBudgetExceeded => "budget exceeded",
            SolveStatus::MaxBackupsReached => "backup cap reached",
        })
    }
}

/// One bound-trace row, recorded after each backup.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub backup: usize,
    pub wall_seconds: f64,
    pub upper: f64,
    pub lower: f64,
    pub controller_size: usize,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub fnc: Fnc,
    /// Best start node at the initial belief (0 for the fallback policy).
    pub start: usize,
    /// Export-ready policy; a single-node blind policy when no backup ran.
    pub policy: PolicyFile,
    pub trace: Vec<TraceRow>,
    pub status: SolveStatus,
    pub upper: f64,
    pub lower: f64,
    pub backups: usize,
    pub wall_seconds: f64,
}

/// The candidate node a backup proposes: best action, best successor node
/// per observation, and the per-action value estimates behind the choice.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub action: usize,
    pub edges: Vec<usize>,
    pub action_values: Vec<f64>,
}

/// Cached one-action lookahead at a node: empirical observation
/// frequencies, mean immediate reward, and the child per observation
/// (`None` when the branch had zero frequency or starved).
struct Expansion {
    obs_freq: Vec<f64>,
    reward_mean: f64,
    children: Vec<Option<usize>>,
}

struct GraphNode<S> {
    /// Particle storage; `None` after shedding, rebuilt on demand.
    belief: Option<ParticleBelief<S>>,
    belief_id: u64,
    /// Creation edge (parent node, action, observation); `None` at the root.
    /// Reaching an existing belief again does not rewrite it, so creation
    /// edges always lead back to the root without cycles.
    parent: Option<(usize, usize, usize)>,
    upper: f64,
    lower: f64,
    /// Per-action upper-bound Q at this belief, frozen at creation.
    qmdp_q: Vec<f64>,
    /// Canonical (state key, frequency) pairs for merge lookups; absent on
    /// beliefs with more than `SIGNATURE_MAX` distinct states.
    signature: Option<Vec<(u128, f64)>>,
    /// Times the descent followed this node; ages its selection score so
    /// low-frequency branches are not starved by dominant siblings.
    visits: u64,
    expansions: HashMap<usize, Expansion>,
}

struct SamplePool<S> {
    states: Vec<S>,
    x: Array2<f64>,
}

pub struct NviSolver<'d, D: GenerativeDomain> {
    domain: &'d D,
    cfg: SolverConfig,
    epsilon: f64,
    factory: RngFactory,
    graph: Vec<GraphNode<D::State>>,
    by_belief: HashMap<u64, usize>,
    /// Nodes bucketed by a hash of their support, for merge lookups.
    by_support: HashMap<u64, Vec<usize>>,
    merge_l1: f64,
    fnc: Fnc,
    cache: PredictionCache,
    pool: Option<SamplePool<D::State>>,
    /// Per controller node: mean prediction over the sample pool; the edge
    /// fallback for observations a backup never sampled.
    pool_means: Vec<f64>,
    blind_action: usize,
    backups: usize,
    /// Highest root value claim that passed a rollout audit.
    audited: f64,
    trace: Vec<TraceRow>,
    started: Instant,
}

fn support_hash(signature: &[(u128, f64)]) -> u64 {
    let mut hasher = StableHasher::new();
    hasher.write_u64(signature.len() as u64);
    for &(key, _) in signature {
        hasher.write_u128(key);
    }
    hasher.finish()
}

fn blind_rollout<D: GenerativeDomain + ?Sized>(
    domain: &D,
    s0: &D::State,
    a: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut s = s0.clone();
    let mut ret = 0.0;
    let mut disc = 1.0;
    for _ in 0..domain.max_episode_steps() {
        if domain.is_terminal(&s) {
            break;
        }
        let step = domain.step(&s, a, rng);
        ret += disc * step.reward;
        disc *= domain.discount();
        s = step.state;
    }
    ret
}

impl<'d, D: GenerativeDomain> NviSolver<'d, D> {
    pub fn new(domain: &'d D, cfg: SolverConfig) -> Result<Self, SolverError> {
        cfg.validate()?;
        let epsilon = cfg.epsilon.unwrap_or_else(|| {
            let (lo, hi) = domain.return_bounds();
            0.01 * (hi - lo)
        });
        let factory = RngFactory::new(cfg.seed);
        let merge_l1 = cfg
            .merge_l1
            .unwrap_or_else(|| 2.0 / (cfg.nb_particle as f64).sqrt());
        let mut solver = NviSolver {
            domain,
            cfg,
            epsilon,
            factory,
            graph: Vec::new(),
            by_belief: HashMap::new(),
            by_support: HashMap::new(),
            merge_l1,
            fnc: Fnc::default(),
            cache: PredictionCache::new(),
            pool: None,
            pool_means: Vec::new(),
            blind_action: 0,
            backups: 0,
            audited: f64::NEG_INFINITY,
            trace: Vec::new(),
            started: Instant::now(),
        };
        // An exact allocation when the domain offers one: the root recurs
        // through every reset edge, so a frozen sampling offset there would
        // bias the whole bound system rather than average out.
        let states: Vec<D::State> = match domain.initial_counts(solver.cfg.nb_particle as u32) {
            Some(counts) => counts
                .into_iter()
                .flat_map(|(s, c)| std::iter::repeat_n(s, c as usize))
                .collect(),
            None => {
                let mut rng = solver.factory.stream(Phase::Init, 0, 0);
                (0..solver.cfg.nb_particle)
                    .map(|_| domain.sample_initial(&mut rng))
                    .collect()
            }
        };
        let root_belief = ParticleBelief::from_states(domain, states, 0);
        let root = solver.create_node(root_belief, None);
        debug_assert_eq!(root, 0);
        Ok(solver)
    }

    pub fn fnc(&self) -> &Fnc {
        &self.fnc
    }

    pub fn backups(&self) -> usize {
        self.backups
    }

    /// (lower, upper) at the root.
    pub fn root_bounds(&self) -> (f64, f64) {
        (self.graph[0].lower, self.graph[0].upper)
    }

    pub fn node_bounds(&self, node: usize) -> (f64, f64) {
        (self.graph[node].lower, self.graph[node].upper)
    }

    /// The edge a node was first created through.
    pub fn creation_edge(&self, node: usize) -> Option<(usize, usize, usize)> {
        self.graph[node].parent
    }

    pub fn node_belief(&mut self, node: usize) -> &ParticleBelief<D::State> {
        self.materialize(node);
        self.graph[node].belief.as_ref().expect("just materialized")
    }

    fn root_gap(&self) -> f64 {
        self.graph[0].upper - self.graph[0].lower
    }

    fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn over_budget(&self) -> bool {
        self.cfg
            .time_budget_secs
            .is_some_and(|t| self.elapsed() >= t)
    }

    /// Adds a graph node for a fresh belief: freezes its per-action
    /// upper-bound Q, seeds the bounds, and indexes it by belief id.
    fn create_node(&mut self, belief: ParticleBelief<D::State>, parent: Option<(usize, usize, usize)>) -> usize {
        let aa = self.domain.action_count();
        let v_max = self.domain.return_bounds().1;
        let mut qmdp_q = vec![0.0; aa];
        let mut weight = 0.0;
        let mut buf = vec![0.0; aa];
        let mut have_estimate = true;
        for (s, c) in belief.iter() {
            if self.domain.is_terminal(s) {
                continue;
            }
            if !self.domain.mdp_upper_q(s, &mut buf) {
                have_estimate = false;
                break;
            }
            for a in 0..aa {
                qmdp_q[a] += c as f64 * buf[a];
            }
            weight += c as f64;
        }
        if !have_estimate {
            qmdp_q = vec![v_max; aa];
        } else if weight > 0.0 {
            for q in qmdp_q.iter_mut() {
                *q /= belief.len() as f64;
            }
        }
        let upper = qmdp_q.iter().fold(f64::NEG_INFINITY, |m, &q| m.max(q));
        let lower = if self.fnc.is_empty() {
            let (blind, blind_action) = self.blind_bound(&belief);
            if parent.is_none() {
                self.blind_action = blind_action;
            }
            blind.min(upper)
        } else {
            fnc_value(self.domain, &self.fnc, &belief, &mut self.cache)
                .0
                .min(upper)
        };
        let id = belief.id();
        let idx = self.graph.len();
        let signature = self.signature_of(&belief);
        self.graph.push(GraphNode {
            belief: Some(belief),
            belief_id: id,
            parent,
            upper,
            lower,
            qmdp_q,
            signature,
            visits: 0,
            expansions: HashMap::new(),
        });
        self.by_belief.insert(id, idx);
        if let Some(sig) = &self.graph[idx].signature {
            let bucket = support_hash(sig);
            self.by_support.entry(bucket).or_default().push(idx);
        }
        idx
    }

    fn signature_of(&self, belief: &ParticleBelief<D::State>) -> Option<Vec<(u128, f64)>> {
        if belief.unique_len() > SIGNATURE_MAX {
            return None;
        }
        let total = belief.len() as f64;
        Some(
            belief
                .iter()
                .map(|(s, c)| (self.domain.state_key(s), c as f64 / total))
                .collect(),
        )
    }

    /// Finds an existing node whose belief matches `belief` up to sampling
    /// noise: identical support and L1 distance at most `merge_l1`. The
    /// earliest-created match wins, keeping lookups order-deterministic.
    fn find_merge(&self, belief: &ParticleBelief<D::State>) -> Option<usize> {
        if self.merge_l1 <= 0.0 {
            return None;
        }
        let sig = self.signature_of(belief)?;
        let bucket = self.by_support.get(&support_hash(&sig))?;
        'candidates: for &idx in bucket {
            let other = self.graph[idx].signature.as_ref().expect("bucketed nodes keep signatures");
            if other.len() != sig.len() {
                continue;
            }
            let mut l1 = 0.0;
            for (&(k, f), &(ko, fo)) in sig.iter().zip(other) {
                if k != ko {
                    continue 'candidates;
                }
                l1 += (f - fo).abs();
                if l1 > self.merge_l1 {
                    continue 'candidates;
                }
            }
            return Some(idx);
        }
        None
    }

    /// Best single-action value of a belief by Monte Carlo, with the action
    /// achieving it.
    fn blind_bound(&self, belief: &ParticleBelief<D::State>) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for a in 0..self.domain.action_count() {
            let mut rng = self.factory.stream(Phase::BlindBound, belief.id(), a as u64);
            let mut acc = 0.0;
            for _ in 0..BLIND_ROLLOUTS {
                let s = belief.sample(&mut rng);
                acc += blind_rollout(self.domain, s, a, &mut rng);
            }
            let mean = acc / BLIND_ROLLOUTS as f64;
            if mean > best.0 {
                best = (mean, a);
            }
        }
        best
    }

    /// Rebuilds a shed belief by replaying the filter draws of its creation
    /// edge (materializing ancestors first as needed).
    fn materialize(&mut self, node: usize) {
        if self.graph[node].belief.is_some() {
            return;
        }
        let mut chain = vec![node];
        let mut cur = node;
        loop {
            let (p, _, _) = self.graph[cur]
                .parent
                .expect("a shed node has a creation edge");
            if self.graph[p].belief.is_some() {
                break;
            }
            chain.push(p);
            cur = p;
        }
        let oo = self.domain.observation_count();
        for &n in chain.iter().rev() {
            let (p, a, o) = self.graph[n].parent.expect("checked above");
            let parent_id = self.graph[p].belief_id;
            let mut rng = self
                .factory
                .stream(Phase::Filter, parent_id, (a * oo + o) as u64);
            let rebuilt = {
                let pb = self.graph[p].belief.as_ref().expect("materialized in order");
                particle_filter_capped(self.domain, pb, a, o, self.cfg.nb_particle, &mut rng)
                    .expect("reconstruction repeats the original accepted draws")
            };
            debug_assert_eq!(rebuilt.id(), self.graph[n].belief_id);
            self.graph[n].belief = Some(rebuilt);
        }
    }

    /// Drops particle storage once too many beliefs are materialized. The
    /// root always stays; everything else is rebuilt on demand.
    fn shed_beliefs(&mut self) {
        let materialized = self.graph[1..]
            .iter()
            .filter(|n| n.belief.is_some())
            .count();
        if materialized > self.cfg.belief_cache_cap {
            for n in &mut self.graph[1..] {
                n.belief = None;
            }
        }
    }

    /// Upper-bound Q of one action at a node: the one-step empirical
    /// Bellman value over expanded children, the frozen heuristic otherwise.
    /// Branches that starved fall back to the global return bound.
    fn q_upper(&self, node: usize, a: usize) -> f64 {
        match self.graph[node].expansions.get(&a) {
            None => self.graph[node].qmdp_q[a],
            Some(exp) => {
                let v_max = self.domain.return_bounds().1;
                let mut future = 0.0;
                for (o, &freq) in exp.obs_freq.iter().enumerate() {
                    if freq == 0.0 {
                        continue;
                    }
                    let v = match exp.children[o] {
                        Some(c) => self.graph[c].upper,
                        None => v_max,
                    };
                    future += freq * v;
                }
                exp.reward_mean + self.domain.discount() * future
            }
        }
    }

    fn best_ub_action(&self, node: usize) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for a in 0..self.domain.action_count() {
            let q = self.q_upper(node, a);
            if q > best.0 {
                best = (q, a);
            }
        }
        best.1
    }

    /// One local Bellman tightening of a node's upper bound.
    fn update_upper(&mut self, node: usize) {
        let mut best = f64::NEG_INFINITY;
        for a in 0..self.domain.action_count() {
            best = best.max(self.q_upper(node, a));
        }
        let n = &mut self.graph[node];
        n.upper = n.upper.min(best);
        n.lower = n.lower.min(n.upper);
    }

    /// Bellman passes over the whole graph, newest nodes first. Merged
    /// beliefs make the bound system cyclic, so local path updates alone
    /// contract it one lap per sweep; whole-graph passes are cheap and pull
    /// the fixed point through the cycles far faster.
    fn relax_upper(&mut self) {
        for _ in 0..2 {
            for i in (0..self.graph.len()).rev() {
                self.update_upper(i);
            }
        }
    }

    /// Ratchets a node's lower bound from the current controller, clamped
    /// into the sandwich.
    fn refresh_lower(&mut self, node: usize) {
        if self.fnc.is_empty() {
            return;
        }
        self.materialize(node);
        let b = self.graph[node].belief.as_ref().expect("materialized");
        let (v, _) = fnc_value(self.domain, &self.fnc, b, &mut self.cache);
        let n = &mut self.graph[node];
        n.lower = n.lower.max(v.min(n.upper));
    }

    /// Simulates one action from every particle of a node's belief,
    /// recording observation frequencies, mean reward, and one filtered
    /// child belief per observed observation. Cached per (node, action).
    fn ensure_expanded(&mut self, node: usize, a: usize) {
        if self.graph[node].expansions.contains_key(&a) {
            return;
        }
        self.materialize(node);
        let domain = self.domain;
        let oo = domain.observation_count();
        let nb = self.cfg.nb_particle;
        let belief_id = self.graph[node].belief_id;
        let mut counts = vec![0u64; oo];
        let mut reward_sum = 0.0;
        {
            let b = self.graph[node].belief.as_ref().expect("materialized");
            let mut rng = self.factory.stream(Phase::Expand, belief_id, a as u64);
            for _ in 0..nb {
                let s = b.sample(&mut rng);
                let step = domain.step(s, a, &mut rng);
                counts[step.observation] += 1;
                reward_sum += step.reward;
            }
        }
        let mut children: Vec<Option<usize>> = vec![None; oo];
        for o in 0..oo {
            if counts[o] == 0 {
                continue;
            }
            let mut rng = self
                .factory
                .stream(Phase::Filter, belief_id, (a * oo + o) as u64);
            let filtered = {
                let b = self.graph[node].belief.as_ref().expect("materialized");
                particle_filter_capped(domain, b, a, o, nb, &mut rng)
            };
            let child = match filtered {
                Err(_) => None,
                Ok(cb) => Some(match self.by_belief.get(&cb.id()) {
                    Some(&idx) => idx,
                    None => match self.find_merge(&cb) {
                        Some(idx) => idx,
                        None => self.create_node(cb, Some((node, a, o))),
                    },
                }),
            };
            children[o] = child;
        }
        let obs_freq = counts.iter().map(|&c| c as f64 / nb as f64).collect();
        self.graph[node].expansions.insert(
            a,
            Expansion {
                obs_freq,
                reward_mean: reward_sum / nb as f64,
                children,
            },
        );
    }

    /// Descends from the root along upper-bound actions, expanding as it
    /// goes, and returns the visited node path (root excluded). Merged
    /// beliefs make the graph cyclic, so the descent never follows a node
    /// already on the path; it stops early once every child is visited.
    /// Empty when the root gap is already closed or the depth cap is zero.
    pub fn collect_beliefs(&mut self) -> Result<Vec<usize>, SolverError> {
        let mut path = Vec::new();
        if self.root_gap() <= self.epsilon {
            return Ok(path);
        }
        let gamma = self.domain.discount();
        let mut visited = std::collections::HashSet::from([0usize]);
        let mut node = 0usize;
        for d in 0..self.cfg.max_depth {
            let a = self.best_ub_action(node);
            self.ensure_expanded(node, a);
            let children: Vec<(usize, usize, f64)> = {
                let exp = &self.graph[node].expansions[&a];
                (0..exp.obs_freq.len())
                    .filter_map(|o| exp.children[o].map(|c| (o, c, exp.obs_freq[o])))
                    .collect()
            };
            if children.is_empty() {
                if d == 0 {
                    return Err(SolverError::RootStarvation);
                }
                break;
            }
            for &(_, c, _) in &children {
                self.refresh_lower(c);
            }
            let widen = self.epsilon * gamma.powi(-(d as i32 + 1));
            let mut best: Option<(f64, usize)> = None;
            for &(_, c, freq) in &children {
                if visited.contains(&c) {
                    continue;
                }
                let raw = freq * (self.graph[c].upper - self.graph[c].lower - widen);
                // Aging: dividing positive scores by the follow count keeps a
                // dominant sibling from starving a rare branch forever.
                let score = if raw > 0.0 {
                    raw / (1.0 + self.graph[c].visits as f64)
                } else {
                    raw
                };
                if best.is_none_or(|(bs, _)| score > bs) {
                    best = Some((score, c));
                }
            }
            let Some((_, next)) = best else {
                break;
            };
            node = next;
            self.graph[node].visits += 1;
            visited.insert(node);
            path.push(node);
        }
        Ok(path)
    }

    /// Builds and memoizes the shared state sample: distinct non-terminal
    /// states reached by random-action trajectories of uniformly drawn
    /// depths in [0, max_depth].
    fn ensure_pool(&mut self) {
        if self.pool.is_some() {
            return;
        }
        let domain = self.domain;
        let aa = domain.action_count();
        let target = self.cfg.nb_sample;
        let mut rng = self.factory.stream(Phase::PoolBuild, 0, 0);
        let mut seen = std::collections::HashSet::new();
        let mut states = Vec::new();
        let cap = (50 * target).max(10_000);
        let mut attempts = 0usize;
        'sampling: while states.len() < target && attempts < cap {
            attempts += 1;
            let depth = rng.random_range(0..=self.cfg.max_depth);
            let mut s = domain.sample_initial(&mut rng);
            for _ in 0..depth {
                if domain.is_terminal(&s) {
                    continue 'sampling;
                }
                let a = rng.random_range(0..aa);
                s = domain.step(&s, a, &mut rng).state;
            }
            if domain.is_terminal(&s) {
                continue;
            }
            if seen.insert(domain.state_key(&s)) {
                states.push(s);
            }
        }
        assert!(!states.is_empty(), "no non-terminal state reachable");
        let refs: Vec<&D::State> = states.iter().collect();
        let x = domain.vectorize_batch(&refs);
        self.pool = Some(SamplePool { states, x });
    }

    /// The node whose network predicts best on the sample pool on average;
    /// edge target for observations the backup never sampled.
    fn pool_mean_argmax(&mut self) -> usize {
        self.ensure_pool();
        let x = &self.pool.as_ref().expect("just built").x;
        for n in self.pool_means.len()..self.fnc.len() {
            let preds = self.fnc.nodes[n].net.predict_batch(x.view());
            self.pool_means.push(preds.mean().expect("pool nonempty"));
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for (n, &m) in self.pool_means.iter().enumerate() {
            if m > best.0 {
                best = (m, n);
            }
        }
        best.1
    }

    /// The simulation phase of a sampled Bellman backup: scores every
    /// action from one simulation per particle, values successors with the
    /// current node networks, and assembles the candidate node. `trial`
    /// varies the simulation draws between repeated backups at one belief.
    pub fn propose(&mut self, b: &ParticleBelief<D::State>, trial: u64) -> Candidate {
        let domain = self.domain;
        let aa = domain.action_count();
        let oo = domain.observation_count();
        let nn = self.fnc.len();
        let gamma = domain.discount();
        let mut action_values = vec![0.0; aa];
        let mut per_action_edges: Vec<Vec<Option<usize>>> = Vec::with_capacity(aa);
        for a in 0..aa {
            let mut rng = self
                .factory
                .stream(Phase::BackupSim, b.id(), trial * aa as u64 + a as u64);
            let mut reward_sum = 0.0;
            let mut succ: Vec<BTreeMap<u128, (D::State, u32)>> = vec![BTreeMap::new(); oo];
            let mut obs_seen = vec![false; oo];
            for (s, c) in b.iter() {
                for _ in 0..c {
                    let step = domain.step(s, a, &mut rng);
                    reward_sum += step.reward;
                    obs_seen[step.observation] = true;
                    if !domain.is_terminal(&step.state) {
                        let key = domain.state_key(&step.state);
                        succ[step.observation]
                            .entry(key)
                            .and_modify(|(_, c)| *c += 1)
                            .or_insert((step.state, 1));
                    }
                }
            }
            let mut future = 0.0;
            let mut edges: Vec<Option<usize>> = vec![None; oo];
            for o in 0..oo {
                if !obs_seen[o] {
                    continue;
                }
                let multiset: Vec<(u128, &D::State, u32)> = succ[o]
                    .iter()
                    .map(|(&k, (s, c))| (k, s, *c))
                    .collect();
                let mut best = (f64::NEG_INFINITY, 0);
                for n in 0..nn {
                    let v = self
                        .cache
                        .weighted_sum(domain, &self.fnc, n, &multiset);
                    if v > best.0 {
                        best = (v, n);
                    }
                }
                if nn > 0 {
                    future += best.0;
                    edges[o] = Some(best.1);
                }
            }
            action_values[a] = (reward_sum + gamma * future) / b.len() as f64;
            per_action_edges.push(edges);
        }
        let mut action = 0;
        for a in 1..aa {
            if action_values[a] > action_values[action] {
                action = a;
            }
        }
        let fallback = if nn == 0 { 0 } else { self.pool_mean_argmax() };
        let edges = per_action_edges[action]
            .iter()
            .map(|e| e.unwrap_or(fallback))
            .collect();
        Candidate {
            action,
            edges,
            action_values,
        }
    }

    /// Supervised targets for a candidate node over the shared sample pool:
    /// mean discounted single-action rollouts while the controller is
    /// empty, one-step bootstrapped values through the candidate's edges
    /// otherwise.
    fn gen_data(&mut self, cand: &Candidate, node_idx: usize) -> (Array2<f64>, Array1<f64>) {
        self.ensure_pool();
        let domain = self.domain;
        let gamma = domain.discount();
        let nb_sim = self.cfg.nb_sim;
        let mut rng = self.factory.stream(Phase::GenData, node_idx as u64, 0);
        let n = self.pool.as_ref().expect("just built").states.len();
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            if self.fnc.is_empty() {
                let s = &self.pool.as_ref().expect("built").states[i];
                for _ in 0..nb_sim {
                    acc += blind_rollout(domain, s, cand.action, &mut rng);
                }
            } else {
                for _ in 0..nb_sim {
                    let step = {
                        let s = &self.pool.as_ref().expect("built").states[i];
                        domain.step(s, cand.action, &mut rng)
                    };
                    let v = if domain.is_terminal(&step.state) {
                        0.0
                    } else {
                        self.cache.state_value(
                            domain,
                            &self.fnc,
                            cand.edges[step.observation],
                            &step.state,
                        )
                    };
                    acc += step.reward + gamma * v;
                }
            }
            y[i] = acc / nb_sim as f64;
        }
        (self.pool.as_ref().expect("built").x.clone(), y)
    }

    /// One sampled Bellman backup at a belief. Returns whether the
    /// candidate was unique and joined the controller.
    pub fn neural_backup(&mut self, b: &ParticleBelief<D::State>) -> Result<bool, SolverError> {
        let cand = self.propose(b, self.backups as u64);
        if !node_is_unique(&self.fnc, cand.action, &cand.edges) {
            return Ok(false);
        }
        let node_idx = self.fnc.len();
        let (x, y) = self.gen_data(&cand, node_idx);
        let net = self.fit_net(x.view(), &y, node_idx, 0)?;
        self.fnc.nodes.push(FncNode {
            action: cand.action,
            edges: cand.edges,
            net,
        });
        // Bootstrap targets inherit whatever the edge networks claim, so
        // the finished fit is held against rollouts of the controller
        // itself and retrained on those returns when it contradicts them.
        self.ground_node(node_idx, self.cfg.nb_sim.clamp(256, 2000), false, 4)?;
        Ok(true)
    }

    /// Trains a value net on (x, y), retrying from fresh inits until the
    /// fit is acceptable next to the target variance. A net stuck near the
    /// target mean scores an MSE close to the variance itself; appending
    /// one would block its (action, edges) signature for good, so the best
    /// of up to four attempts wins.
    fn fit_net(
        &self,
        x: ArrayView2<f64>,
        y: &Array1<f64>,
        node_idx: usize,
        attempt_base: u64,
    ) -> Result<Mlp, SolverError> {
        let hidden = self
            .cfg
            .net_hidden
            .clone()
            .unwrap_or_else(|| self.domain.default_hidden_layers());
        let y_mean = y.mean().unwrap_or(0.0);
        let y_var = y.mapv(|v| (v - y_mean).powi(2)).mean().unwrap_or(0.0);
        let acceptable = (0.05 * y_var).max(self.cfg.train.stop_mse);
        let mut train_cfg = self.cfg.train.clone();
        let mut best: Option<Trained> = None;
        let mut last_err = None;
        for attempt in 0..4u64 {
            let mut rng = self
                .factory
                .stream(Phase::Train, node_idx as u64, attempt_base + attempt);
            match train(x, y, &hidden, &train_cfg, &mut rng) {
                Ok(t) => {
                    let done = t.mse <= acceptable;
                    if best.as_ref().is_none_or(|b| t.mse < b.mse) {
                        best = Some(t);
                    }
                    if done {
                        break;
                    }
                }
                Err(e @ NnError::NonFiniteLoss { .. }) => {
                    train_cfg.learning_rate /= 10.0;
                    last_err = Some(e);
                }
                Err(e) => return Err(e.into()),
            }
        }
        match best {
            Some(t) => Ok(t.net),
            None => Err(last_err.expect("no result implies an error").into()),
        }
    }

    /// Per pool state: mean and standard error of the discounted return of
    /// actually running the controller from `node`, `nb` episodes each.
    fn rollout_stats(&self, node: usize, nb: usize) -> Vec<(f64, f64)> {
        let domain = self.domain;
        let pool = self.pool.as_ref().expect("pool built before validation");
        let policy = FncPolicy {
            fnc: &self.fnc,
            start: node,
        };
        pool.states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = self.factory.stream(Phase::Validate, node as u64, i as u64);
                let mut sum = 0.0;
                let mut sq = 0.0;
                for _ in 0..nb {
                    let r = rollout_from(domain, &policy, node, s, &mut rng);
                    sum += r;
                    sq += r * r;
                }
                let mean = sum / nb as f64;
                let var = (sq / nb as f64 - mean * mean).max(0.0);
                (mean, (var / nb as f64).sqrt())
            })
            .collect()
    }

    /// Checks a node's network against controller rollouts at the pool
    /// states and retrains it on the rollout returns when the two disagree
    /// beyond sampling noise. Rollouts cannot inherit an upstream network's
    /// lie, so grounded fits stop value errors from compounding through the
    /// bootstrap ladder. Returns whether a retrain happened.
    fn ground_node(
        &mut self,
        idx: usize,
        nb: usize,
        one_sided: bool,
        attempt_base: u64,
    ) -> Result<bool, SolverError> {
        let stats = self.rollout_stats(idx, nb);
        let pool = self.pool.as_ref().expect("pool built before validation");
        let preds = self.fnc.nodes[idx].net.predict_batch(pool.x.view());
        let lying = stats.iter().zip(preds.iter()).any(|(&(m, se), &p)| {
            let gap = if one_sided { p - m } else { (p - m).abs() };
            gap > 3.0 * se + 0.1
        });
        if !lying {
            return Ok(false);
        }
        let y: Array1<f64> = stats.iter().map(|&(m, _)| m).collect();
        let net = self.fit_net(pool.x.view(), &y, idx, attempt_base)?;
        self.fnc.nodes[idx].net = net;
        self.cache = PredictionCache::new();
        if idx < self.pool_means.len() {
            let x = &self.pool.as_ref().expect("built").x;
            let preds = self.fnc.nodes[idx].net.predict_batch(x.view());
            self.pool_means[idx] = preds.mean().expect("pool nonempty");
        }
        Ok(true)
    }

    /// Weighted mean and standard error of running the controller from
    /// `node` at states drawn from the root belief.
    fn root_realized(&mut self, node: usize) -> (f64, f64) {
        self.materialize(0);
        let b = self.graph[0].belief.as_ref().expect("materialized");
        let reps: Vec<(D::State, f64)> = if b.unique_len() <= 64 {
            let total = b.len() as f64;
            b.iter().map(|(s, c)| (s.clone(), c as f64 / total)).collect()
        } else {
            let mut rng = self.factory.stream(Phase::Validate, node as u64, u64::MAX);
            (0..64).map(|_| (b.sample(&mut rng).clone(), 1.0 / 64.0)).collect()
        };
        let nb = ((2 * self.cfg.nb_sim).clamp(2000, 8000) / reps.len()).max(128);
        let domain = self.domain;
        let policy = FncPolicy {
            fnc: &self.fnc,
            start: node,
        };
        let mut mean = 0.0;
        let mut var = 0.0;
        for (i, (s, w)) in reps.iter().enumerate() {
            let mut rng = self
                .factory
                .stream(Phase::Validate, node as u64, (1 << 32) + i as u64);
            let mut sum = 0.0;
            let mut sq = 0.0;
            for _ in 0..nb {
                let r = rollout_from(domain, &policy, node, s, &mut rng);
                sum += r;
                sq += r * r;
            }
            let m = sum / nb as f64;
            let v = (sq / nb as f64 - m * m).max(0.0);
            mean += w * m;
            var += w * w * v / nb as f64;
        }
        (mean, var.sqrt())
    }

    /// The defensible root lower-bound claim. Whenever fnc_value reaches a
    /// new high, the winning node is audited against rollouts from the
    /// initial belief; a node whose networks promise more than the
    /// controller delivers is retrained on rollout returns. A claim that
    /// survives retraining unrepentant is capped at the measured value.
    fn audited_root_claim(&mut self) -> Result<f64, SolverError> {
        self.materialize(0);
        let b = self.graph[0].belief.as_ref().expect("materialized").clone();
        let (mut claim, mut node) = fnc_value(self.domain, &self.fnc, &b, &mut self.cache);
        if claim <= self.audited + 0.05 {
            return Ok(claim);
        }
        for round in 0..3u64 {
            let (realized, se) = self.root_realized(node);
            let gate = realized + (3.0 * se).max(0.15);
            if claim <= gate {
                self.audited = claim;
                return Ok(claim);
            }
            if round == 2 {
                return Ok(gate);
            }
            self.ground_node(node, 2000, true, 8 + round * 4)?;
            let (c, n) = fnc_value(self.domain, &self.fnc, &b, &mut self.cache);
            claim = c;
            node = n;
            if claim <= self.audited + 0.05 {
                return Ok(claim);
            }
        }
        unreachable!("the audit loop returns by round 2")
    }

    /// Recomputes the root lower bound from the audited controller claim.
    /// Not ratcheted: a retrain may honestly lower the claim.
    fn refresh_root(&mut self) -> Result<(), SolverError> {
        if self.fnc.is_empty() {
            return Ok(());
        }
        let v = self.audited_root_claim()?;
        let n = &mut self.graph[0];
        n.lower = v.min(n.upper);
        Ok(())
    }

    fn fallback_policy(&self) -> PolicyFile {
        let domain = self.domain;
        let fsc = Fsc {
            domain_id: domain.domain_id().to_string(),
            discount: domain.discount(),
            action_names: (0..domain.action_count())
                .map(|a| domain.action_name(a))
                .collect(),
            observation_names: (0..domain.observation_count())
                .map(|o| domain.observation_name(o))
                .collect(),
            start: 0,
            nodes: vec![FscNode {
                action: self.blind_action,
                edges: vec![0; domain.observation_count()],
            }],
        };
        PolicyFile { fsc, nets: None }
    }

    fn push_trace_row(&mut self) {
        self.trace.push(TraceRow {
            backup: self.backups,
            wall_seconds: self.elapsed(),
            upper: self.graph[0].upper,
            lower: self.graph[0].lower,
            controller_size: self.fnc.len(),
        });
    }

    /// The outer loop: collect a trajectory, back up its beliefs from the
    /// deepest, tighten bounds along the way, until the root gap closes or
    /// a budget runs out.
    pub fn run(mut self) -> Result<SolveResult, SolverError> {
        if self.cfg.max_depth == 0 {
            return Err(SolverError::InvalidConfig(
                "max_depth must be at least 1 to make progress".into(),
            ));
        }
        let status = 'outer: loop {
            if self.over_budget() {
                break SolveStatus::TimeBudgetExceeded;
            }
            if self.root_gap() <= self.epsilon {
                break SolveStatus::Converged;
            }
            if self.cfg.max_backups.is_some_and(|m| self.backups >= m) {
                break SolveStatus::MaxBackupsReached;
            }
            let path = self.collect_beliefs()?;
            // Deepest first, the root closing every sweep: merged reset
            // edges land on existing nodes, so the root belief recurs only
            // here rather than anywhere along the path.
            for i in (0..=path.len()).rev() {
                let node = if i == 0 { 0 } else { path[i - 1] };
                let b = {
                    self.materialize(node);
                    self.graph[node].belief.as_ref().expect("materialized").clone()
                };
                self.neural_backup(&b)?;
                self.backups += 1;
                self.relax_upper();
                if node != 0 {
                    self.refresh_lower(node);
                }
                self.refresh_root()?;
                self.push_trace_row();
                if self.over_budget() {
                    break 'outer SolveStatus::TimeBudgetExceeded;
                }
                if self.root_gap() <= self.epsilon {
                    break 'outer SolveStatus::Converged;
                }
                if self.cfg.max_backups.is_some_and(|m| self.backups >= m) {
                    break 'outer SolveStatus::MaxBackupsReached;
                }
            }
            self.shed_beliefs();
        };
        let (start, policy) = if self.fnc.is_empty() {
            (0, self.fallback_policy())
        } else {
            let root_b = {
                self.materialize(0);
                self.graph[0].belief.as_ref().expect("root materialized").clone()
            };
            let (_, start) = fnc_value(self.domain, &self.fnc, &root_b, &mut self.cache);
            let fsc = fnc_to_fsc(self.domain, &self.fnc, start);
            let nets = Some(self.fnc.nodes.iter().map(|n| n.net.clone()).collect());
            (start, PolicyFile { fsc, nets })
        };
        Ok(SolveResult {
            start,
            policy,
            status,
            upper: self.graph[0].upper,
            lower: self.graph[0].lower,
            backups: self.backups,
            wall_seconds: self.elapsed(),
            trace: std::mem::take(&mut self.trace),
            fnc: std::mem::take(&mut self.fnc),
        })
    }
}

/// Plans a controller for the domain; the one-call entry point.
pub fn solve<D: GenerativeDomain>(
    domain: &D,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    NviSolver::new(domain, cfg.clone())?.run()
}
