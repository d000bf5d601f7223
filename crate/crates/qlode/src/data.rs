//! Observation container: per-state measurement times and values.

use crate::error::{Error, Result};

/// Noisy observations of a subset of the state functions. States without
/// measurements simply hold empty vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    times: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self { times: vec![Vec::new(); dim], values: vec![Vec::new(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.times.len()
    }

    /// Adds one observation of state `state` (0-based).
    pub fn push(&mut self, state: usize, t: f64, y: f64) -> Result<()> {
        if state >= self.times.len() {
            return Err(Error::Domain(format!(
                "state index {} out of range for dimension {}",
                state + 1,
                self.times.len()
            )));
        }
        if !t.is_finite() || !y.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite observation (t = {t}, y = {y}) for state {}",
                state + 1
            )));
        }
        self.times[state].push(t);
        self.values[state].push(y);
        Ok(())
    }

    pub fn times(&self, state: usize) -> &[f64] {
        &self.times[state]
    }

    pub fn values(&self, state: usize) -> &[f64] {
        &self.values[state]
    }

    pub fn n_obs(&self, state: usize) -> usize {
        self.times[state].len()
    }

    /// Total observation count across all states.
    pub fn n_total(&self) -> usize {
        self.times.iter().map(Vec::len).sum()
    }

    /// States that carry at least one observation (0-based, ascending).
    pub fn observed_states(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&j| !self.times[j].is_empty()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_and_count() {
        let mut ds = Dataset::new(2);
        ds.push(0, 0.1, 1.0).unwrap();
        ds.push(0, 0.2, 1.1).unwrap();
        ds.push(1, 0.5, -0.3).unwrap();
        assert_eq!(ds.n_total(), 3);
        assert_eq!(ds.n_obs(0), 2);
        assert_eq!(ds.observed_states(), vec![0, 1]);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut ds = Dataset::new(1);
        assert!(ds.push(1, 0.0, 0.0).is_err());
        assert!(ds.push(0, f64::NAN, 0.0).is_err());
    }
}
