//! Expert phase optimizer standing in for converged RL policies, plus an
//! exhaustive quantized oracle used to validate it.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{achievable_rate, effective_channel, wrap_phases, EnvConfig, C64};
use crate::error::{D2tError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Initial step length on the normalized objective.
    pub step_size: f64,
    /// Relative improvement below which ascent stops.
    pub tolerance: f64,
    pub oracle_levels: usize,
    /// Number of pre-training environments.
    pub num_envs: usize,
    pub episodes_per_env: usize,
    pub fewshot_episodes: usize,
    pub fewshot_iters: usize,
    pub fewshot_restarts: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            restarts: 8,
            max_iters: 200,
            step_size: 1.0,
            tolerance: 1e-10,
            oracle_levels: 16,
            num_envs: 3,
            episodes_per_env: 64,
            fewshot_episodes: 16,
            fewshot_iters: 10,
            fewshot_restarts: 1,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.fewshot_restarts == 0 {
            return Err(D2tError::Config("restarts must be >= 1".into()));
        }
        if self.oracle_levels < 2 {
            return Err(D2tError::Config(
                "oracle quantization levels must be >= 2".into(),
            ));
        }
        if self.num_envs == 0 {
            return Err(D2tError::Config("need at least one environment".into()));
        }
        Ok(())
    }

    /// The deliberately weak expert used for few-shot data.
    pub fn suboptimal(&self) -> ExpertConfig {
        ExpertConfig {
            restarts: self.fewshot_restarts,
            max_iters: self.fewshot_iters,
            ..self.clone()
        }
    }
}

/// Trace of one optimizer run.
#[derive(Clone, Debug)]
pub struct PhaseSolution {
    pub phases: Vec<f64>,
    /// `‖φᵀH‖²` of the returned phases.
    pub gain: f64,
    /// Objective after every accepted step, per restart.
    pub trace: Vec<Vec<f64>>,
    pub accepted_steps: usize,
}

/// `g(φ)` and `∂g/∂φ_n = -2 Im(e^{jφ_n} Σ_m conj(v_m) H[n,m])`, `v = φᵀH`.
fn objective_and_grad(phases: &[f64], h: &[C64], m: usize) -> (f64, Vec<f64>) {
    let v = effective_channel(phases, h, m);
    let g = v.iter().map(C64::norm_sqr).sum();
    let grad = phases
        .iter()
        .enumerate()
        .map(|(n, &p)| {
            let s: C64 = (0..m).map(|j| v[j].conj() * h[n * m + j]).sum();
            -2.0 * (C64::from_polar(1.0, p) * s).im
        })
        .collect();
    (g, grad)
}

fn objective(phases: &[f64], h: &[C64], m: usize) -> f64 {
    effective_channel(phases, h, m)
        .iter()
        .map(C64::norm_sqr)
        .sum()
}

/// Rotates so the first element is 0 and wraps into `[-π, π)`; the objective
/// is invariant under a common phase, so this picks one representative.
pub fn canonicalize(phases: &mut [f64]) {
    if let Some(&p0) = phases.first() {
        phases.iter_mut().for_each(|p| *p -= p0);
    }
    wrap_phases(phases);
}

/// Gradient ascent on the element angles with Armijo backtracking and random
/// restarts; returns the best canonicalized phases found.
pub fn optimize_phases<R: Rng + ?Sized>(
    h: &[C64],
    n: usize,
    m: usize,
    cfg: &ExpertConfig,
    rng: &mut R,
) -> Result<PhaseSolution> {
    if h.len() != n * m {
        return Err(D2tError::Shape(format!(
            "H has {} entries, expected {}",
            h.len(),
            n * m
        )));
    }
    let scale: f64 = h.iter().map(C64::norm_sqr).sum();
    if !(scale > 0.0) {
        return Err(D2tError::DegenerateChannel);
    }
    // Work on g / ‖H‖_F² so step sizes do not depend on path loss.
    let hn: Vec<C64> = h.iter().map(|x| x / scale.sqrt()).collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut trace = Vec::with_capacity(cfg.restarts);
    let mut accepted = 0;
    for _ in 0..cfg.restarts.max(1) {
        let mut phi: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
        let (mut g, mut grad) = objective_and_grad(&phi, &hn, m);
        let mut run = vec![g];
        let mut step = cfg.step_size;
        for _ in 0..cfg.max_iters {
            let gn2: f64 = grad.iter().map(|x| x * x).sum();
            if gn2 <= f64::EPSILON * g.max(1e-300) {
                break;
            }
            let mut t = step;
            let mut moved = None;
            for _ in 0..40 {
                let cand: Vec<f64> = phi.iter().zip(&grad).map(|(p, d)| p + t * d).collect();
                let gc = objective(&cand, &hn, m);
                if gc >= g + 1e-4 * t * gn2 {
                    moved = Some((cand, gc));
                    break;
                }
                t *= 0.5;
            }
            let Some((cand, gc)) = moved else { break };
            let improvement = (gc - g) / g.max(1e-300);
            phi = cand;
            let (g2, grad2) = objective_and_grad(&phi, &hn, m);
            g = g2;
            grad = grad2;
            run.push(g);
            accepted += 1;
            step = (t * 2.0).min(cfg.step_size * 64.0);
            if improvement < cfg.tolerance {
                break;
            }
        }
        trace.push(run);
        if best.as_ref().is_none_or(|(bg, _)| g > *bg) {
            best = Some((g, phi));
        }
    }
    let (gbest, mut phases) = best.expect("at least one restart");
    canonicalize(&mut phases);
    Ok(PhaseSolution {
        phases,
        gain: gbest * scale,
        trace,
        accepted_steps: accepted,
    })
}

/// Result of the exhaustive search.
#[derive(Clone, Debug)]
pub struct OracleResult {
    pub phases: Vec<f64>,
    pub rate: f64,
    pub evaluations: usize,
}

/// Evaluates all `Q^N` phase vectors on the grid `2πq/Q` and returns the
/// first maximizer.
pub fn exhaustive_phase_oracle(h: &[C64], cfg: &EnvConfig, levels: usize) -> Result<OracleResult> {
    let n = cfg.n;
    let space = (levels as f64).powi(n as i32);
    if space > 1e7 {
        return Err(D2tError::OracleTooLarge(space));
    }
    let grid: Vec<f64> = (0..levels)
        .map(|q| 2.0 * PI * q as f64 / levels as f64)
        .collect();
    let mut digits = vec![0usize; n];
    let mut phases = vec![0.0; n];
    let mut best = OracleResult {
        phases: phases.clone(),
        rate: f64::NEG_INFINITY,
        evaluations: 0,
    };
    loop {
        for (p, d) in phases.iter_mut().zip(&digits) {
            *p = grid[*d];
        }
        let r = achievable_rate(&phases, h, cfg);
        best.evaluations += 1;
        if r > best.rate {
            best.rate = r;
            best.phases.copy_from_slice(&phases);
        }
        // odometer increment, last digit fastest
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < levels {
                break;
            }
            digits[i] = 0;
        }
    }
}
