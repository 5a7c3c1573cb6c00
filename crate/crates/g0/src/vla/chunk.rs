//! Action chunks and flow-matching interpolants.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::tensor::normal_sample;

/// H x D matrix of normalized actions starting at time `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub horizon: usize,
    pub action_dim: usize,
    /// Row-major over time, entries in [-1, 1].
    pub data: Vec<f32>,
    pub start: f32,
}

impl ActionChunk {
    pub fn new(horizon: usize, action_dim: usize, data: Vec<f32>, start: f32) -> Result<ActionChunk> {
        if data.len() != horizon * action_dim {
            return Err(Error::contract(format!(
                "chunk data has {} entries, expected {}",
                data.len(),
                horizon * action_dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("chunk entries must be finite"));
        }
        Ok(ActionChunk {
            horizon,
            action_dim,
            data,
            start,
        })
    }

    pub fn zeros(horizon: usize, action_dim: usize) -> ActionChunk {
        ActionChunk {
            horizon,
            action_dim,
            data: vec![0.0; horizon * action_dim],
            start: 0.0,
        }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn clamp_unit(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    pub fn rmse(&self, other: &ActionChunk) -> f64 {
        let mse: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.data.len() as f64;
        mse.sqrt()
    }
}

/// One flow-matching draw: time tau, standard-normal noise, and the linear
/// interpolant tau * A + (1 - tau) * noise.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub tau: f64,
    pub noise: Vec<f32>,
    pub interpolated: Vec<f32>,
}

impl FlowSample {
    pub fn draw(chunk: &[f32], rng: &mut ChaCha8Rng) -> FlowSample {
        use rand::Rng;
        let tau: f64 = rng.gen_range(0.0..1.0);
        FlowSample::at(chunk, tau, rng)
    }

    pub fn at(chunk: &[f32], tau: f64, rng: &mut ChaCha8Rng) -> FlowSample {
        let noise: Vec<f32> = (0..chunk.len())
            .map(|_| normal_sample(rng) as f32)
            .collect();
        let interpolated = interpolate(chunk, &noise, tau);
        FlowSample {
            tau,
            noise,
            interpolated,
        }
    }

    /// Target velocity field for the linear interpolant: A - noise.
    pub fn target(&self, chunk: &[f32]) -> Vec<f32> {
        chunk
            .iter()
            .zip(&self.noise)
            .map(|(a, e)| a - e)
            .collect()
    }
}

pub fn interpolate(chunk: &[f32], noise: &[f32], tau: f64) -> Vec<f32> {
    chunk
        .iter()
        .zip(noise)
        .map(|(a, e)| (tau * *a as f64 + (1.0 - tau) * *e as f64) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn interpolant_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let chunk: Vec<f32> = (0..32).map(|i| (i as f32 / 16.0) - 1.0).collect();
        let s0 = FlowSample::at(&chunk, 0.0, &mut rng);
        assert_eq!(s0.interpolated, s0.noise);
        let s1 = FlowSample::at(&chunk, 1.0, &mut rng);
        for (a, b) in s1.interpolated.iter().zip(&chunk) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn chunk_shape_is_checked() {
        assert!(ActionChunk::new(4, 3, vec![0.0; 11], 0.0).is_err());
        assert!(ActionChunk::new(4, 3, vec![0.0; 12], 0.0).is_ok());
    }
}
