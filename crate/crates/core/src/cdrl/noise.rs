use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Ornstein-Uhlenbeck process with unit time step and zero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    state: Vec<f64>,
}

impl OuNoise {
    pub fn new(dim: usize, theta: f64, sigma: f64) -> Self {
        OuNoise { theta, sigma, state: vec![0.0; dim] }
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        for x in &mut self.state {
            let z: f64 = StandardNormal.sample(rng);
            *x += -self.theta * *x + self.sigma * z;
        }
        self.state.clone()
    }
}

/// Linear schedule from `start` at episode 0 to `end` at the last episode.
pub fn annealed(start: f64, end: f64, episode: usize, episodes: usize) -> f64 {
    if episodes <= 1 {
        return start;
    }
    let t = (episode as f64 / (episodes - 1) as f64).min(1.0);
    start + (end - start) * t
}
