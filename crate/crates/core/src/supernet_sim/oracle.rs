use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch_space::{Path, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub seed: u64,
    /// Std of the per-path frozen noise, in loss units (the noise-free loss spans [0, 1]).
    pub sigma: f64,
    /// Upper bound of the pairwise depth interaction weights.
    pub interaction: f64,
    /// Scale of the width utility steps relative to the narrowest width (utility 1).
    pub width_gain: f64,
    /// Scale of the expand utility steps relative to the smallest expand (utility 1).
    pub expand_gain: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { seed: 0, sigma: 0.005, interaction: 0.3, width_gain: 0.3, expand_gain: 1.0 }
    }
}

/// Analytic stand-in for "validation loss of a path".
///
/// Per active layer the utility is `c[b][l] · uw[b][w] · ue[b][e]` with
/// strictly increasing width/expand tables; block pairs add
/// `γ[b][b'] · frac_b · frac_b'` on their active-layer fractions. The summed
/// utility is mapped affinely so the all-min path has loss 1 and the all-max
/// path loss 0, then frozen Gaussian noise keyed by the path is added.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracle {
    config: OracleConfig,
    space: SearchSpace,
    scale: Vec<Vec<f64>>,
    width_util: Vec<Vec<f64>>,
    expand_util: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    u_min: f64,
    u_max: f64,
}

/// `1, 1 + gain·s1, 1 + gain·(s1 + s2), ...` with steps `s ~ U(0.2, 1)`.
fn increasing<R: Rng>(n: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let mut acc = 1.0;
    (0..n)
        .map(|i| {
            if i > 0 {
                acc += gain * rng.random_range(0.2..1.0);
            }
            acc
        })
        .collect()
}

impl SyntheticOracle {
    pub fn new(space: &SearchSpace, config: OracleConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = space.num_blocks();
        let scale = space
            .blocks
            .iter()
            .map(|b| (0..b.max_layers()).map(|_| rng.random_range(0.5..1.5)).collect())
            .collect();
        let width_util = space.blocks.iter().map(|b| increasing(b.width_choices.len(), config.width_gain, &mut rng)).collect();
        let expand_util = space.blocks.iter().map(|b| increasing(b.expand_choices.len(), config.expand_gain, &mut rng)).collect();
        let gamma = (0..n)
            .map(|i| (0..n).map(|j| if j > i { rng.random_range(0.0..=config.interaction.max(0.0)) } else { 0.0 }).collect())
            .collect();
        let mut o = SyntheticOracle { config, space: space.clone(), scale, width_util, expand_util, gamma, u_min: 0.0, u_max: 1.0 };
        o.u_min = o.utility(&space.min_path());
        o.u_max = o.utility(&space.max_path());
        o
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    /// Summed utility, before normalization and noise. `path` must be valid.
    pub fn utility(&self, path: &Path) -> f64 {
        let idx = self.space.path_indices(path).expect("valid path");
        let mut u = 0.0;
        let mut frac = Vec::with_capacity(idx.len());
        for (b, bi) in idx.iter().enumerate() {
            for (l, &e) in bi.expands.iter().enumerate() {
                u += self.scale[b][l] * self.width_util[b][bi.width] * self.expand_util[b][e];
            }
            frac.push(bi.expands.len() as f64 / self.space.blocks[b].max_layers() as f64);
        }
        for i in 0..frac.len() {
            for j in i + 1..frac.len() {
                u += self.gamma[i][j] * frac[i] * frac[j];
            }
        }
        u
    }

    /// Noise-free loss in [0, 1]; 0.5 when every path has the same utility.
    pub fn clean_loss(&self, path: &Path) -> f64 {
        let span = self.u_max - self.u_min;
        if span <= 0.0 {
            return 0.5;
        }
        1.0 - (self.utility(path) - self.u_min) / span
    }

    /// Standard normal draw fixed by (seed, canonical path JSON).
    pub fn noise(&self, path: &Path) -> f64 {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(path.to_canonical_json().as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed).sample(StandardNormal)
    }

    pub fn eval(&self, path: &Path) -> f64 {
        let clean = self.clean_loss(path);
        if self.config.sigma == 0.0 {
            clean
        } else {
            clean + self.config.sigma * self.noise(path)
        }
    }
}
