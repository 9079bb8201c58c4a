use crate::error::{Error, Result};

/// Adam optimiser state for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`.
    pub fn new(parameter_count: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam descent step. On a non-finite gradient the
/// parameters and state are left untouched.
pub fn adam_step(parameters: &mut [f64], gradients: &[f64], state: &mut AdamState) -> Result<()> {
    let n = parameters.len();
    if gradients.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::shape(format!(
            "adam: {n} parameters, {} gradients, {} moments",
            gradients.len(),
            state.first_moment.len()
        )));
    }
    if let Some(i) = gradients.iter().position(|g| !g.is_finite()) {
        return Err(Error::Poisoned(format!("gradient {i} is not finite")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..n {
        let g = gradients[i];
        let m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        let v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        parameters[i] -= state.learning_rate * (m / c1) / ((v / c2).sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2, 0.1);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2, 0.01);
        for _ in 0..100 {
            adam_step(&mut p, &[3.0, -0.5], &mut s).unwrap();
        }
        assert!(p[0] < -0.5 && p[1] > 0.5);
    }

    #[test]
    fn first_step_hand_computed() {
        // m_hat = g, v_hat = g^2 after one step, so the move is
        // -lr * g / (|g| + eps) = -0.1 / (1 + 1e-8).
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 0.1);
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_poisons_without_mutation() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1, 0.1);
        let before = s.clone();
        assert!(matches!(adam_step(&mut p, &[f64::NAN], &mut s), Err(Error::Poisoned(_))));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s, before);
    }
}
