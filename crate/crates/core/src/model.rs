//! Explicit tabular POMDP models and exact belief arithmetic.
//!
//! An [`ExplicitPomdp`] stores dense transition, observation, and reward
//! tables. It is the reference path: small enough to verify by hand and to
//! drive brute-force oracles, and convertible into a black-box simulator so
//! the sampling solver can be cross-checked against exact results.

use ndarray::{Array1, Array2, Array3};
use serde::Deserialize;
use thiserror::Error;

/// Probability mass that counts as zero when normalizing a belief update.
const ZERO_MASS: f64 = 0.0;

/// Tolerance for stochasticity checks on model tables.
const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("observation {observation} has zero probability under action {action}")]
    ZeroProbabilityObservation { action: usize, observation: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("failed to read model file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse model file {path}: {message}")]
    Parse { path: String, message: String },
}

/// A probability distribution over the states of an explicit model.
#[derive(Clone, Debug, PartialEq)]
pub struct Belief(Array1<f64>);

impl Belief {
    /// Validates non-negativity and unit mass (within 1e-9, to tolerate
    /// accumulated rounding in caller arithmetic).
    pub fn new(probs: Array1<f64>) -> Result<Self, ModelError> {
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(ModelError::InvalidModel(
                "belief entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidModel(format!(
                "belief mass {sum} is not 1"
            )));
        }
        Ok(Belief(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Belief(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn point(state: usize, n: usize) -> Self {
        let mut v = Array1::zeros(n);
        v[state] = 1.0;
        Belief(v)
    }

    pub fn from_slice(probs: &[f64]) -> Result<Self, ModelError> {
        Self::new(Array1::from_vec(probs.to_vec()))
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Dense finite POMDP: `transition[s][a][s']`, `observation[a][s'][o]`,
/// `reward[s][a]`, a discount in (0,1), and an initial belief.
#[derive(Clone, Debug)]
pub struct ExplicitPomdp {
    pub name: String,
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub observations: Vec<String>,
    pub transition: Array3<f64>,
    pub observation: Array3<f64>,
    pub reward: Array2<f64>,
    pub discount: f64,
    pub initial_belief: Belief,
}

impl ExplicitPomdp {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    /// Checks table shapes, stochasticity, reward finiteness, and discount.
    pub fn validate(&self) -> Result<(), ModelError> {
        let (s, a, o) = (self.n_states(), self.n_actions(), self.n_observations());
        if s == 0 || a == 0 || o == 0 {
            return Err(ModelError::InvalidModel(
                "states, actions, and observations must be nonempty".into(),
            ));
        }
        if self.transition.dim() != (s, a, s) {
            return Err(ModelError::InvalidModel(format!(
                "transition table has shape {:?}, expected ({s}, {a}, {s})",
                self.transition.dim()
            )));
        }
        if self.observation.dim() != (a, s, o) {
            return Err(ModelError::InvalidModel(format!(
                "observation table has shape {:?}, expected ({a}, {s}, {o})",
                self.observation.dim()
            )));
        }
        if self.reward.dim() != (s, a) {
            return Err(ModelError::InvalidModel(format!(
                "reward table has shape {:?}, expected ({s}, {a})",
                self.reward.dim()
            )));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(ModelError::InvalidModel(format!(
                "discount {} outside (0, 1)",
                self.discount
            )));
        }
        for si in 0..s {
            for ai in 0..a {
                let row = self.transition.slice(ndarray::s![si, ai, ..]);
                if row.iter().any(|p| *p < 0.0) {
                    return Err(ModelError::InvalidModel(format!(
                        "negative transition probability at state {si}, action {ai}"
                    )));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(ModelError::InvalidModel(format!(
                        "transition row (s={si}, a={ai}) sums to {sum}"
                    )));
                }
            }
        }
        for ai in 0..a {
            for sj in 0..s {
                let row = self.observation.slice(ndarray::s![ai, sj, ..]);
                if row.iter().any(|p| *p < 0.0) {
                    return Err(ModelError::InvalidModel(format!(
                        "negative observation probability at action {ai}, state {sj}"
                    )));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(ModelError::InvalidModel(format!(
                        "observation row (a={ai}, s'={sj}) sums to {sum}"
                    )));
                }
            }
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(ModelError::InvalidModel("non-finite reward entry".into()));
        }
        if self.initial_belief.len() != s {
            return Err(ModelError::InvalidModel(
                "initial belief length differs from state count".into(),
            ));
        }
        Ok(())
    }

    /// One-step predicted (pre-observation) state distribution after `a`.
    fn predicted(&self, b: &Belief, a: usize) -> Array1<f64> {
        let s = self.n_states();
        let mut pred = Array1::zeros(s);
        for (si, &mass) in b.probs().iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for sj in 0..s {
                pred[sj] += mass * self.transition[[si, a, sj]];
            }
        }
        pred
    }

    /// Unnormalized posterior weights `O(o|a,s') * sum_s T(s'|s,a) b(s)`.
    pub(crate) fn posterior_weights(&self, b: &Belief, a: usize, o: usize) -> Array1<f64> {
        let mut w = self.predicted(b, a);
        for sj in 0..self.n_states() {
            w[sj] *= self.observation[[a, sj, o]];
        }
        w
    }

    /// Bayes update of `b` after taking `a` and observing `o`.
    pub fn belief_update(&self, b: &Belief, a: usize, o: usize) -> Result<Belief, ModelError> {
        let mut w = self.posterior_weights(b, a, o);
        let norm: f64 = w.sum();
        if norm <= ZERO_MASS {
            return Err(ModelError::ZeroProbabilityObservation {
                action: a,
                observation: o,
            });
        }
        w.mapv_inplace(|x| x / norm);
        Ok(Belief(w))
    }

    /// Probability of observing `o` after taking `a` from belief `b`.
    pub fn obs_probability(&self, b: &Belief, a: usize, o: usize) -> f64 {
        self.posterior_weights(b, a, o).sum()
    }

    /// Expected immediate reward of `a` from belief `b`.
    pub fn belief_reward(&self, b: &Belief, a: usize) -> f64 {
        b.probs()
            .iter()
            .enumerate()
            .map(|(si, &mass)| mass * self.reward[[si, a]])
            .sum()
    }
}

/// On-disk schema (TOML) for explicit models. Tables are written per action:
/// `transition[a]` is a row-major `|S| x |S|` matrix, `observation[a]` is
/// `|S| x |O|`, and `reward` is `|S| x |A|`.
#[derive(Debug, Deserialize)]
struct ModelFile {
    name: String,
    discount: f64,
    states: Vec<String>,
    actions: Vec<String>,
    observations: Vec<String>,
    start: Vec<f64>,
    transition: Vec<Vec<Vec<f64>>>,
    observation: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
}

/// Loads an explicit model from the documented TOML schema and validates it.
pub fn load_model(path: &std::path::Path) -> Result<ExplicitPomdp, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_model(&text).map_err(|message| ModelError::Parse {
        path: path.display().to_string(),
        message,
    })
}

/// Parses the TOML schema from a string; see [`load_model`].
pub fn parse_model(text: &str) -> Result<ExplicitPomdp, String> {
    let raw: ModelFile = toml::from_str(text).map_err(|e| e.to_string())?;
    let (s, a, o) = (raw.states.len(), raw.actions.len(), raw.observations.len());
    if raw.transition.len() != a || raw.observation.len() != a {
        return Err("one transition and one observation matrix per action required".into());
    }
    let mut transition = Array3::zeros((s, a, s));
    for (ai, mat) in raw.transition.iter().enumerate() {
        if mat.len() != s || mat.iter().any(|row| row.len() != s) {
            return Err(format!("transition matrix {ai} is not {s} x {s}"));
        }
        for (si, row) in mat.iter().enumerate() {
            for (sj, &p) in row.iter().enumerate() {
                transition[[si, ai, sj]] = p;
            }
        }
    }
    let mut observation = Array3::zeros((a, s, o));
    for (ai, mat) in raw.observation.iter().enumerate() {
        if mat.len() != s || mat.iter().any(|row| row.len() != o) {
            return Err(format!("observation matrix {ai} is not {s} x {o}"));
        }
        for (sj, row) in mat.iter().enumerate() {
            for (oi, &p) in row.iter().enumerate() {
                observation[[ai, sj, oi]] = p;
            }
        }
    }
    if raw.reward.len() != s || raw.reward.iter().any(|row| row.len() != a) {
        return Err(format!("reward table is not {s} x {a}"));
    }
    let mut reward = Array2::zeros((s, a));
    for (si, row) in raw.reward.iter().enumerate() {
        for (ai, &r) in row.iter().enumerate() {
            reward[[si, ai]] = r;
        }
    }
    let initial_belief =
        Belief::from_slice(&raw.start).map_err(|e| format!("start belief: {e}"))?;
    let model = ExplicitPomdp {
        name: raw.name,
        states: raw.states,
        actions: raw.actions,
        observations: raw.observations,
        transition,
        observation,
        reward,
        discount: raw.discount,
        initial_belief,
    };
    model.validate().map_err(|e| e.to_string())?;
    Ok(model)
}
