//! Light Dark: a 1-D localization problem.
//!
//! The agent starts near x = 2, sees its position through noise that shrinks
//! toward zero at the light location x = 10, and must stop inside the goal
//! region |x| < 1 for +100 (stopping elsewhere costs 100 and also ends the
//! episode). Moves shift the position by 1 and are free. Raw observations
//! are continuous; a k-means quantizer fitted at construction from
//! random-policy observations maps them to a finite observation set.

use crate::domains::kmeans::{kmeans_discretize, Quantizer};
use crate::generative::{GenerativeDomain, Step};
use crate::rng::{Phase, RngFactory};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const A_LEFT: usize = 0;
pub const A_RIGHT: usize = 1;
pub const A_STOP: usize = 2;

const LIGHT_X: f64 = 10.0;
const GOAL_RADIUS: f64 = 1.0;
const CORRECT_REWARD: f64 = 100.0;
const INCORRECT_PENALTY: f64 = -100.0;
const INIT_MEAN: f64 = 2.0;
const INIT_STD: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightDarkState {
    pub x: f64,
    pub terminal: bool,
}

pub struct LightDark {
    quantizer: Quantizer,
    id: String,
    discount: f64,
}

/// Observation noise scale at position `x`; minimal at the light.
pub fn obs_sigma(x: f64) -> f64 {
    (x - LIGHT_X).abs() / 2.0f64.sqrt() + 0.01
}

/// Standard instance: 20 observation clusters fitted from 1e5 random-policy
/// observations drawn under `seed`.
pub fn lightdark(seed: u64) -> LightDark {
    LightDark::with_params(seed, 20, 100_000)
}

impl LightDark {
    /// `k` observation clusters fitted from `corpus` random-policy
    /// observations. The quantizer is frozen afterwards; every stochastic
    /// choice here derives from `seed`, so equal parameters give equal
    /// domains.
    pub fn with_params(seed: u64, k: usize, corpus: usize) -> Self {
        let factory = RngFactory::new(seed);
        let mut rng = factory.stream(Phase::Discretize, k as u64, corpus as u64);
        let mut obs = Vec::with_capacity(corpus);
        let init = Normal::new(INIT_MEAN, INIT_STD).unwrap();
        'outer: loop {
            // One random-policy episode; raw (pre-quantization) observations.
            let mut x = init.sample(&mut rng);
            loop {
                let a = rng.random_range(0..3);
                match a {
                    A_LEFT => x -= 1.0,
                    A_RIGHT => x += 1.0,
                    _ => {}
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                obs.push(x + obs_sigma(x) * noise);
                if obs.len() == corpus {
                    break 'outer;
                }
                if a == A_STOP {
                    break;
                }
            }
        }
        let data = Array2::from_shape_vec((corpus, 1), obs).expect("corpus shape");
        let mut fit_rng = factory.stream(Phase::Discretize, k as u64, 1);
        let quantizer =
            kmeans_discretize(data.view(), k, &mut fit_rng).expect("nonempty corpus");
        let id = if k == 20 && corpus == 100_000 {
            format!("lightdark:seed={seed}")
        } else {
            format!("lightdark:seed={seed},k={k},corpus={corpus}")
        };
        LightDark {
            quantizer,
            id,
            discount: 0.95,
        }
    }

    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }

    fn observe(&self, x: f64, rng: &mut ChaCha8Rng) -> usize {
        let noise: f64 = StandardNormal.sample(rng);
        self.quantizer.quantize(&[x + obs_sigma(x) * noise])
    }

    /// Moves needed to enter the goal region from `x` under full
    /// observability.
    fn steps_to_goal(x: f64) -> i32 {
        let d = x.abs();
        if d < GOAL_RADIUS {
            0
        } else {
            (d - GOAL_RADIUS).floor() as i32 + 1
        }
    }

    /// Exact value of the fully observable MDP: walk to the goal region and
    /// stop.
    fn mdp_value(&self, s: &LightDarkState) -> f64 {
        if s.terminal {
            return 0.0;
        }
        self.discount.powi(Self::steps_to_goal(s.x)) * CORRECT_REWARD
    }
}

impl GenerativeDomain for LightDark {
    type State = LightDarkState;

    fn domain_id(&self) -> &str {
        &self.id
    }

    fn action_count(&self) -> usize {
        3
    }

    fn observation_count(&self) -> usize {
        self.quantizer.k()
    }

    fn discount(&self) -> f64 {
        self.discount
    }

    fn action_name(&self, a: usize) -> String {
        match a {
            A_LEFT => "left".into(),
            A_RIGHT => "right".into(),
            _ => "stop".into(),
        }
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> LightDarkState {
        let x = Normal::new(INIT_MEAN, INIT_STD).unwrap().sample(rng);
        LightDarkState { x, terminal: false }
    }

    fn step(&self, s: &LightDarkState, a: usize, rng: &mut ChaCha8Rng) -> Step<LightDarkState> {
        if s.terminal {
            return Step {
                state: *s,
                observation: self.observe(s.x, rng),
                reward: 0.0,
            };
        }
        let (state, reward) = match a {
            A_LEFT => (
                LightDarkState {
                    x: s.x - 1.0,
                    terminal: false,
                },
                0.0,
            ),
            A_RIGHT => (
                LightDarkState {
                    x: s.x + 1.0,
                    terminal: false,
                },
                0.0,
            ),
            _ => (
                LightDarkState {
                    x: s.x,
                    terminal: true,
                },
                if s.x.abs() < GOAL_RADIUS {
                    CORRECT_REWARD
                } else {
                    INCORRECT_PENALTY
                },
            ),
        };
        let observation = self.observe(state.x, rng);
        Step {
            state,
            observation,
            reward,
        }
    }

    fn is_terminal(&self, s: &LightDarkState) -> bool {
        s.terminal
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn vectorize_into(&self, s: &LightDarkState, out: &mut [f64]) {
        out[0] = s.x;
    }

    fn state_key(&self, s: &LightDarkState) -> u128 {
        (s.x.to_bits() as u128) | ((s.terminal as u128) << 64)
    }

    fn reward_bounds(&self) -> (f64, f64) {
        (INCORRECT_PENALTY, CORRECT_REWARD)
    }

    fn return_bounds(&self) -> (f64, f64) {
        // Reward only occurs once, at the terminal stop.
        (INCORRECT_PENALTY, CORRECT_REWARD)
    }

    fn mdp_upper_q(&self, s: &LightDarkState, out: &mut [f64]) -> bool {
        if s.terminal {
            out.fill(0.0);
            return true;
        }
        out[A_LEFT] = self.discount
            * self.mdp_value(&LightDarkState {
                x: s.x - 1.0,
                terminal: false,
            });
        out[A_RIGHT] = self.discount
            * self.mdp_value(&LightDarkState {
                x: s.x + 1.0,
                terminal: false,
            });
        out[A_STOP] = if s.x.abs() < GOAL_RADIUS {
            CORRECT_REWARD
        } else {
            INCORRECT_PENALTY
        };
        true
    }

    fn default_hidden_layers(&self) -> Vec<usize> {
        vec![128, 64, 32]
    }
}
