//! Coarse-then-fine search over `(μ, ν)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

/// Grid values in hundredths, so every point is an exact `k / 100`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub mu_coarse: Vec<u32>,
    pub mu_fine: Vec<u32>,
    pub nu: Vec<u32>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            mu_coarse: (40..=70).step_by(10).collect(),
            mu_fine: (50..=60).collect(),
            nu: (5..=15).collect(),
        }
    }
}

fn hundredths(k: u32) -> f64 {
    k as f64 / 100.0
}

impl GridSpec {
    /// Coarse points first, then fine points not already visited.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut mus: Vec<u32> = Vec::new();
        for &m in self.mu_coarse.iter().chain(&self.mu_fine) {
            if !mus.contains(&m) {
                mus.push(m);
            }
        }
        let mut nus = self.nu.clone();
        nus.dedup();
        mus.iter()
            .flat_map(|&m| nus.iter().map(move |&n| (hundredths(m), hundredths(n))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mu: f64,
    pub nu: f64,
    /// `None` when the objective failed at this point.
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_mu: f64,
    pub best_nu: f64,
    pub best_objective: f64,
    pub table: Vec<GridPoint>,
    pub missing: usize,
}

/// Minimises `objective` over the grid. Failed or non-finite points are
/// recorded as missing; ties go to the lexicographically smallest `(μ, ν)`.
pub fn grid_search<F>(spec: &GridSpec, objective: F, mode: ExecMode) -> Result<GridResult>
where
    F: Fn(f64, f64) -> Result<f64> + Sync + Send,
{
    let pts = spec.points();
    if pts.is_empty() {
        return Err(Error::Empty("grid"));
    }
    let table: Vec<GridPoint> = par::map_indices(mode, pts.len(), |i| {
        let (mu, nu) = pts[i];
        let objective = objective(mu, nu).ok().filter(|v| v.is_finite());
        GridPoint { mu, nu, objective }
    });
    let missing = table.iter().filter(|p| p.objective.is_none()).count();
    let best = table
        .iter()
        .filter_map(|p| p.objective.map(|o| (o, p.mu, p.nu)))
        .min_by(|a, b| a.partial_cmp(b).expect("finite"))
        .ok_or_else(|| Error::InvalidArgument("objective failed at every grid point".into()))?;
    Ok(GridResult {
        best_mu: best.1,
        best_nu: best.2,
        best_objective: best.0,
        table,
        missing,
    })
}
