use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be positive".into()));
        }
        if !t_end.is_finite() || t_end <= 0.0 {
            return Err(Error::InvalidGrid(format!(
                "horizon must be finite and positive, got {t_end}"
            )));
        }
        Ok(Self { t_end, n_steps })
    }

    pub fn t_start(&self) -> f64 {
        0.0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Time of grid point `n`. The last point is exactly `T`.
    pub fn time(&self, n: usize) -> f64 {
        if n == self.n_steps {
            self.t_end
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|n| self.time(n)).collect()
    }

    /// Index of the grid point equal to `t` (within half a step).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let n = x.round();
        if !(0.0..=self.n_steps as f64).contains(&n) || (x - n).abs() > 1e-9 * x.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "time {t} is not a point of the grid (T={}, n_steps={})",
                self.t_end, self.n_steps
            )));
        }
        Ok(n as usize)
    }

    pub fn coarsened(&self) -> Result<Self> {
        if self.n_steps % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen an odd number of steps ({})",
                self.n_steps
            )));
        }
        Self::new(self.t_end, self.n_steps / 2)
    }
}

/// Counter-based seed derivation: a SplitMix64 finaliser over
/// `(master, index)`, so per-path streams do not depend on execution order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Brownian increments `dB^k_n` for `k = 0..m`, stored row-major by step.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianBundle {
    grid: TimeGrid,
    m: usize,
    increments: Vec<f64>,
    seed: u64,
}

impl BrownianBundle {
    /// Draw `m` independent components. Component `k` uses its own ChaCha
    /// stream, so adding a component never changes the existing columns.
    pub fn generate(grid: TimeGrid, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument(
                "a Brownian bundle needs at least one component; use BrownianBundle::deterministic".into(),
            ));
        }
        let n = grid.n_steps();
        let sd = grid.dt().sqrt();
        let mut increments = vec![0.0; n * m];
        for k in 0..m {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            for step in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                increments[step * m + k] = sd * z;
            }
        }
        Ok(Self {
            grid,
            m,
            increments,
            seed,
        })
    }

    /// Bundle with no stochastic components.
    pub fn deterministic(grid: TimeGrid) -> Self {
        Self {
            grid,
            m: 0,
            increments: Vec::new(),
            seed: 0,
        }
    }

    /// Build from explicit increments laid out `[n_steps x m]` row-major.
    pub fn from_increments(grid: TimeGrid, m: usize, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.n_steps() * m {
            return Err(Error::Dimension {
                context: "Brownian increments".into(),
                expected: grid.n_steps() * m,
                found: increments.len(),
            });
        }
        Ok(Self {
            grid,
            m,
            increments,
            seed: 0,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn dw(&self, step: usize, k: usize) -> f64 {
        self.increments[step * self.m + k]
    }

    /// All component increments at one step.
    pub fn step(&self, step: usize) -> &[f64] {
        &self.increments[step * self.m..(step + 1) * self.m]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `B^k` at every grid point.
    pub fn path(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.n_points());
        let mut b = 0.0;
        out.push(b);
        for n in 0..self.grid.n_steps() {
            b += self.dw(n, k);
            out.push(b);
        }
        out
    }

    /// Terminal values `B^k_T`.
    pub fn terminal(&self) -> Vec<f64> {
        (0..self.m)
            .map(|k| (0..self.grid.n_steps()).map(|n| self.dw(n, k)).sum())
            .collect()
    }

    /// Same Brownian path on a grid with half as many steps.
    pub fn coarsen(&self) -> Result<Self> {
        let grid = self.grid.coarsened()?;
        let mut increments = vec![0.0; grid.n_steps() * self.m];
        for n in 0..grid.n_steps() {
            for k in 0..self.m {
                increments[n * self.m + k] = self.dw(2 * n, k) + self.dw(2 * n + 1, k);
            }
        }
        Ok(Self {
            grid,
            m: self.m,
            increments,
            seed: self.seed,
        })
    }

    /// Keep only the listed components, in the given order.
    pub fn select(&self, components: &[usize]) -> Result<Self> {
        for &k in components {
            if k >= self.m {
                return Err(Error::InvalidArgument(format!(
                    "component {k} out of range (m = {})",
                    self.m
                )));
            }
        }
        let m = components.len();
        let mut increments = vec![0.0; self.grid.n_steps() * m];
        for n in 0..self.grid.n_steps() {
            for (j, &k) in components.iter().enumerate() {
                increments[n * m + j] = self.dw(n, k);
            }
        }
        Ok(Self {
            grid: self.grid,
            m,
            increments,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_rejects_bad_input() {
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
        assert!(TimeGrid::new(f64::INFINITY, 10).is_err());
        assert!(TimeGrid::new(-1.0, 10).is_err());
    }

    #[test]
    fn grid_index_lookup() {
        let g = TimeGrid::new(2.0, 200).unwrap();
        assert_eq!(g.index_of(1.0).unwrap(), 100);
        assert_eq!(g.index_of(2.0).unwrap(), 200);
        assert!(g.index_of(1.005).is_err());
        assert!(g.index_of(3.0).is_err());
    }

    #[test]
    fn bundles_are_reproducible_and_streams_independent_of_m() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let a = BrownianBundle::generate(g, 3, 7).unwrap();
        let b = BrownianBundle::generate(g, 3, 7).unwrap();
        assert_eq!(a, b);
        let c = BrownianBundle::generate(g, 1, 7).unwrap();
        for n in 0..64 {
            assert_eq!(a.dw(n, 0), c.dw(n, 0));
        }
        let d = BrownianBundle::generate(g, 3, 8).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn coarsen_preserves_endpoint() {
        let g = TimeGrid::new(1.0, 128).unwrap();
        let a = BrownianBundle::generate(g, 2, 11).unwrap();
        let c = a.coarsen().unwrap();
        assert_eq!(c.grid().n_steps(), 64);
        for (x, y) in a.terminal().iter().zip(c.terminal()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(BrownianBundle::generate(TimeGrid::new(1.0, 3).unwrap(), 1, 0)
            .unwrap()
            .coarsen()
            .is_err());
    }

    #[test]
    fn coarsened_increment_variance_is_doubled() {
        let g = TimeGrid::new(1.0, 2000).unwrap();
        let b = BrownianBundle::generate(g, 1, 3).unwrap().coarsen().unwrap();
        let n = b.grid().n_steps() as f64;
        let var: f64 = b.increments().iter().map(|x| x * x).sum::<f64>() / n;
        let expected = 2.0 * g.dt();
        // variance of the sample second moment is 2 expected^2 / n
        let se = (2.0f64).sqrt() * expected / n.sqrt();
        assert!((var - expected).abs() < 5.0 * se, "{var} vs {expected}");
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..10_000 {
            assert!(seen.insert(derive_seed(42, i)));
        }
        assert_ne!(derive_seed(1, 0), derive_seed(0, 1));
    }

    proptest! {
        #[test]
        fn grid_points_strictly_increasing(t in 1e-3f64..100.0, n in 1usize..500) {
            let g = TimeGrid::new(t, n).unwrap();
            prop_assert!(g.dt() > 0.0);
            prop_assert_eq!(g.time(0), 0.0);
            prop_assert_eq!(g.time(n), t);
            let ts = g.times();
            for w in ts.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
        }

        #[test]
        fn generation_is_a_pure_function(seed in any::<u64>(), m in 1usize..4) {
            let g = TimeGrid::new(0.5, 16).unwrap();
            let a = BrownianBundle::generate(g, m, seed).unwrap();
            let b = BrownianBundle::generate(g, m, seed).unwrap();
            prop_assert_eq!(a.increments(), b.increments());
            prop_assert!(a.increments().iter().all(|x| x.is_finite()));
        }
    }
}
