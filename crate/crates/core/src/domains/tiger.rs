//! The classic tiger problem, used as an exactly solvable verification
//! domain rather than a benchmark.
//!
//! Two states (tiger behind the left or right door), three actions. Listening
//! costs 1 and reports the tiger's side correctly with probability 0.85;
//! opening the correct (empty) door pays +10, the wrong one -100, and either
//! way the game restarts with the tiger placed uniformly.

use crate::generative::ExplicitAsGenerative;
use crate::model::{Belief, ExplicitPomdp};
use ndarray::{Array2, Array3};

pub const LISTEN: usize = 0;
pub const OPEN_LEFT: usize = 1;
pub const OPEN_RIGHT: usize = 2;

/// Canonical tiger model: listen accuracy 0.85, rewards -1/+10/-100,
/// discount 0.95.
pub fn tiger_model() -> ExplicitPomdp {
    let states = vec!["tiger-left".to_string(), "tiger-right".to_string()];
    let actions = vec![
        "listen".to_string(),
        "open-left".to_string(),
        "open-right".to_string(),
    ];
    let observations = vec!["hear-left".to_string(), "hear-right".to_string()];

    let mut transition = Array3::zeros((2, 3, 2));
    for s in 0..2 {
        // Listening leaves the tiger in place; opening restarts uniformly.
        transition[[s, LISTEN, s]] = 1.0;
        for s2 in 0..2 {
            transition[[s, OPEN_LEFT, s2]] = 0.5;
            transition[[s, OPEN_RIGHT, s2]] = 0.5;
        }
    }

    let mut observation = Array3::zeros((3, 2, 2));
    // Listening reports the true side with probability 0.85. Observations
    // after opening carry no information.
    observation[[LISTEN, 0, 0]] = 0.85;
    observation[[LISTEN, 0, 1]] = 0.15;
    observation[[LISTEN, 1, 0]] = 0.15;
    observation[[LISTEN, 1, 1]] = 0.85;
    for a in [OPEN_LEFT, OPEN_RIGHT] {
        for s2 in 0..2 {
            observation[[a, s2, 0]] = 0.5;
            observation[[a, s2, 1]] = 0.5;
        }
    }

    let mut reward = Array2::zeros((2, 3));
    reward[[0, LISTEN]] = -1.0;
    reward[[1, LISTEN]] = -1.0;
    reward[[0, OPEN_LEFT]] = -100.0;
    reward[[0, OPEN_RIGHT]] = 10.0;
    reward[[1, OPEN_LEFT]] = 10.0;
    reward[[1, OPEN_RIGHT]] = -100.0;

    let model = ExplicitPomdp {
        name: "tiger".into(),
        states,
        actions,
        observations,
        transition,
        observation,
        reward,
        discount: 0.95,
        initial_belief: Belief::uniform(2),
    };
    model.validate().expect("tiger model is well-formed");
    model
}

/// Tiger wrapped as a black-box simulator, so the sampling solver can be
/// cross-checked against the exact path.
pub fn tiger_generative() -> ExplicitAsGenerative {
    ExplicitAsGenerative::new(tiger_model())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_is_valid() {
        tiger_model().validate().unwrap();
    }

    #[test]
    fn reward_structure() {
        let m = tiger_model();
        assert_eq!(m.reward[[0, OPEN_LEFT]], -100.0);
        assert_eq!(m.reward[[0, OPEN_RIGHT]], 10.0);
        assert_eq!(m.reward[[1, LISTEN]], -1.0);
    }
}
