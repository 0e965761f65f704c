//! Least-squares misfit, its adjoint-state gradient and the multi-frequency
//! nonlinear conjugate-gradient reconstruction loop.

use num_complex::Complex64;

use crate::attenuation::ComplexFrequency;
use crate::data::{DataSet, FrequencyData};
use crate::error::{Error, Result};
use crate::medium::{MediumGrid, Parametrization};
use crate::solver::{forward_map, Acquisition, BoundarySpec, FactorizedSystem, ForwardResult, ReceiverOperator};

/// `½ Σ |sim − obs|²` over sources and receivers.
pub fn misfit(sim: &FrequencyData, obs: &FrequencyData) -> Result<f64> {
    if !sim.congruent(obs) {
        return Err(Error::domain(
            "misfit of data with different frequency, sources or receivers",
        ));
    }
    Ok(0.5 * sim.values.iter().zip(&obs.values).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>())
}

/// Gradient with respect to the two fields of a parametrization.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.first.iter().chain(&self.second).map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Adjoint fields `μ_s = A⁻ᴴ Rᵀ r_s`, one per source.
fn adjoint_fields(
    system: &FactorizedSystem,
    residuals: &FrequencyData,
    receivers: &ReceiverOperator,
) -> Result<Vec<Vec<Complex64>>> {
    let rhs: Vec<Vec<Complex64>> = (0..residuals.n_sources())
        .map(|s| receivers.spread(residuals.trace(s)))
        .collect();
    system.solve_adjoint(&rhs)
}

fn check_contract(
    system: &FactorizedSystem,
    fields: &[Vec<Complex64>],
    residuals: &FrequencyData,
    receivers: &ReceiverOperator,
    medium: &MediumGrid,
) -> Result<()> {
    let sys = system.system();
    if residuals.omega != sys.omega() {
        return Err(Error::Contract("residuals and system are at different frequencies".into()));
    }
    if sys.medium() != medium {
        return Err(Error::Contract("system was assembled for a different medium".into()));
    }
    if fields.len() != residuals.n_sources()
        || fields.iter().any(|f| f.len() != medium.len())
        || receivers.n_receivers() != residuals.n_receivers
    {
        return Err(Error::Contract("fields, residuals and receivers are not congruent".into()));
    }
    Ok(())
}

/// `(∂J/∂κ₀, ∂J/∂ρ)` per node, where `J = ½ Σ_s |R p_s − d_s|²` and
/// `residuals = R p − d`.
///
/// Uses `∂J/∂m = −Re Σ_s μ_sᴴ (∂A/∂m) p_s` with the analytic derivatives of
/// the assembled stencil. Sources are reduced in ascending id order, so the
/// result does not depend on the acquisition order.
pub fn kappa_rho_gradient(
    system: &FactorizedSystem,
    fields: &[Vec<Complex64>],
    residuals: &FrequencyData,
    receivers: &ReceiverOperator,
    medium: &MediumGrid,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_contract(system, fields, residuals, receivers, medium)?;
    let adjoint = adjoint_fields(system, residuals, receivers)?;
    let sys = system.system();
    let n = medium.len();
    let (nx, nz, dx, dz) = (medium.nx(), medium.nz(), medium.dx(), medium.dz());
    let omega = sys.omega();
    let w = omega.value();
    let iw = Complex64::i() * w;
    let rho = medium.rho();
    let kd = sys.kappa_dagger();
    let vol = sys.volume();
    let lr = sys.robin_length();

    // ∂A_nn/∂κ† and ∂A_nn/∂ρ from the mass and Robin terms
    let mut diag_kappa = vec![Complex64::new(0.0, 0.0); n];
    let mut diag_rho = vec![Complex64::new(0.0, 0.0); n];
    for p in 0..n {
        let mut dk = -w * w * vol[p] / (kd[p] * kd[p]);
        let mut dr = Complex64::new(0.0, 0.0);
        if lr[p] > 0.0 {
            let z = kd[p] * rho[p];
            let d = iw * lr[p] * (-0.5) / (z * z.sqrt());
            dk += d * rho[p];
            dr += d * kd[p];
        }
        diag_kappa[p] = dk * medium.spec_at(p).modulus_derivative(medium.kappa0()[p], omega);
        diag_rho[p] = dr;
    }

    let mut g_kappa = vec![0.0; n];
    let mut g_rho = vec![0.0; n];
    let mut order: Vec<usize> = (0..fields.len()).collect();
    order.sort_by_key(|&s| residuals.source_ids[s]);
    for (p_s, mu_s) in order.iter().map(|&s| (&fields[s], &adjoint[s])) {
        for node in 0..n {
            let pair = mu_s[node].conj() * p_s[node];
            g_kappa[node] -= (diag_kappa[node] * pair).re;
            g_rho[node] -= (diag_rho[node] * pair).re;
        }
        // face terms: ∂b/∂ρ_n · [−(μ̄_n − μ̄_q)(p_n − p_q)]
        let mut face = |a: usize, b: usize, length: f64, h: f64| {
            let s = rho[a] + rho[b];
            let db = -2.0 * length / h / (s * s);
            let term = -(db * ((mu_s[a] - mu_s[b]).conj() * (p_s[a] - p_s[b]))).re;
            g_rho[a] -= term;
            g_rho[b] -= term;
        };
        for ix in 0..nx {
            let wx = if ix == 0 || ix == nx - 1 { 0.5 } else { 1.0 };
            for iz in 0..nz {
                let wz = if iz == 0 || iz == nz - 1 { 0.5 } else { 1.0 };
                let a = medium.index(ix, iz);
                if ix + 1 < nx {
                    face(a, medium.index(ix + 1, iz), dz * wz, dx);
                }
                if iz + 1 < nz {
                    face(a, medium.index(ix, iz + 1), dx * wx, dz);
                }
            }
        }
    }
    Ok((g_kappa, g_rho))
}

/// Adjoint gradient mapped to `param`, evaluated at the fields of `medium`.
pub fn adjoint_gradient(
    system: &FactorizedSystem,
    fields: &[Vec<Complex64>],
    residuals: &FrequencyData,
    receivers: &ReceiverOperator,
    medium: &MediumGrid,
    param: Parametrization,
) -> Result<Gradient> {
    let (gk, gr) = kappa_rho_gradient(system, fields, residuals, receivers, medium)?;
    let mut first = Vec::with_capacity(gk.len());
    let mut second = Vec::with_capacity(gk.len());
    for p in 0..gk.len() {
        let (a, b) = param.from_kappa_rho(medium.kappa0()[p], medium.rho()[p]);
        let (ga, gb) = param.pull_back_gradient(a, b, gk[p], gr[p]);
        first.push(ga);
        second.push(gb);
    }
    Ok(Gradient { first, second })
}

/// `∂J/∂c` for the attenuation coefficient at `index` of every node, holding
/// `κ₀` and `ρ` fixed. Not used by [`invert`]; the coefficient fields stay at
/// their initial values during reconstruction.
pub fn coefficient_gradient(
    system: &FactorizedSystem,
    fields: &[Vec<Complex64>],
    residuals: &FrequencyData,
    receivers: &ReceiverOperator,
    medium: &MediumGrid,
    index: usize,
) -> Result<Vec<f64>> {
    check_contract(system, fields, residuals, receivers, medium)?;
    let adjoint = adjoint_fields(system, residuals, receivers)?;
    let sys = system.system();
    let omega = sys.omega();
    let w = omega.value();
    let (kd, vol, lr, rho) = (sys.kappa_dagger(), sys.volume(), sys.robin_length(), medium.rho());
    let mut g = vec![0.0; medium.len()];
    for (p, gp) in g.iter_mut().enumerate() {
        let mut dk = -w * w * vol[p] / (kd[p] * kd[p]);
        if lr[p] > 0.0 {
            let z = kd[p] * rho[p];
            dk += Complex64::i() * w * lr[p] * (-0.5) * rho[p] / (z * z.sqrt());
        }
        let dc = medium
            .spec_at(p)
            .coefficient_derivative(medium.kappa0()[p], omega, index)?;
        let s = dk * dc;
        *gp = -fields
            .iter()
            .zip(&adjoint)
            .map(|(ps, mu)| (s * mu[p].conj() * ps[p]).re)
            .sum::<f64>();
    }
    Ok(g)
}

/// Outer loop over `ω_R` ascending, inner loop over `ω_I` descending.
pub fn frequency_schedule(omega_r_list: &[f64], omega_i_list: &[f64]) -> Result<Vec<ComplexFrequency>> {
    if omega_r_list.is_empty() || omega_i_list.is_empty() {
        return Err(Error::domain("frequency lists must be nonempty"));
    }
    if omega_r_list.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::domain("omega_r list must be strictly ascending"));
    }
    if omega_i_list.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::domain("omega_i list must be strictly descending"));
    }
    omega_r_list
        .iter()
        .flat_map(|&wr| omega_i_list.iter().map(move |&wi| ComplexFrequency::new(wr, wi)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearch {
    /// Largest relative change of any inverted node value on the first trial
    /// step of a frequency block.
    pub initial_relative_step: f64,
    /// Upper bound on the relative change of any node in one step.
    pub max_relative_step: f64,
    pub backtrack: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            initial_relative_step: 0.01,
            max_relative_step: 0.05,
            backtrack: 0.5,
            armijo: 1e-4,
            max_backtracks: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionConfig {
    /// Ascending, rad/s.
    pub omega_r_list: Vec<f64>,
    /// Descending, 1/s.
    pub omega_i_list: Vec<f64>,
    pub iters_per_frequency: usize,
    pub parametrization: Parametrization,
    /// Which of the two parametrization fields are updated.
    pub invert_fields: [bool; 2],
    pub line_search: LineSearch,
    /// Physical bounds `(lo, hi)` of the two fields.
    pub bounds: [(f64, f64); 2],
    /// Source amplitude used for the simulated data.
    pub amplitude: Complex64,
    /// A block stops once `J ≤ misfit_rtol · ½Σ|obs|²`.
    pub misfit_rtol: f64,
    /// Consecutive rejected iterations that end a block.
    pub max_failures: usize,
}

impl InversionConfig {
    /// Speed-only inversion in the speed/density parametrization with
    /// `c₀ ∈ [1300, 1800]` m/s.
    pub fn speed_only(omega_r_list: Vec<f64>, omega_i_list: Vec<f64>, iters: usize) -> Self {
        Self {
            omega_r_list,
            omega_i_list,
            iters_per_frequency: iters,
            parametrization: Parametrization::SpeedRho,
            invert_fields: [true, false],
            line_search: LineSearch::default(),
            bounds: [(1300.0, 1800.0), (1.0, 1e5)],
            amplitude: Complex64::new(1.0, 0.0),
            misfit_rtol: 1e-20,
            max_failures: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iters_per_frequency == 0 {
            return Err(Error::domain("iters_per_frequency must be at least 1"));
        }
        if !self.invert_fields.iter().any(|&b| b) {
            return Err(Error::domain("at least one field must be inverted"));
        }
        for (lo, hi) in self.bounds {
            if !(lo > 0.0 && lo < hi) {
                return Err(Error::domain(format!("invalid bounds ({lo}, {hi})")));
            }
        }
        let ls = &self.line_search;
        if !(ls.initial_relative_step > 0.0
            && ls.max_relative_step > 0.0
            && ls.backtrack > 0.0
            && ls.backtrack < 1.0
            && ls.armijo > 0.0
            && ls.armijo < 1.0)
        {
            return Err(Error::domain("invalid line-search parameters"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// Running iteration number over the whole run, from 1.
    pub iteration: usize,
    pub block: usize,
    pub omega: ComplexFrequency,
    /// Misfit after the iteration (before it, if rejected).
    pub misfit: f64,
    /// Accepted step length in normalized units, 0 if rejected.
    pub step: f64,
    /// Gradient norm in normalized units at the start of the iteration.
    pub grad_norm: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSummary {
    pub omega: ComplexFrequency,
    pub initial_misfit: f64,
    pub final_misfit: f64,
    /// Why the block ended before its iteration budget, if it did.
    pub early_stop: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InversionHistory {
    pub records: Vec<IterationRecord>,
    pub blocks: Vec<BlockSummary>,
}

/// Optimization state in normalized variables `x / x_ref`.
struct Model<'a> {
    base: &'a MediumGrid,
    param: Parametrization,
    reference: [f64; 2],
    bounds: [(f64, f64); 2],
    mask: [bool; 2],
}

impl Model<'_> {
    fn encode(&self, m: &MediumGrid) -> [Vec<f64>; 2] {
        let mut a = Vec::with_capacity(m.len());
        let mut b = Vec::with_capacity(m.len());
        for p in 0..m.len() {
            let (x, y) = self.param.from_kappa_rho(m.kappa0()[p], m.rho()[p]);
            a.push(x / self.reference[0]);
            b.push(y / self.reference[1]);
        }
        [a, b]
    }

    fn decode(&self, x: &[Vec<f64>; 2]) -> Result<MediumGrid> {
        let (k, r): (Vec<f64>, Vec<f64>) = x[0]
            .iter()
            .zip(&x[1])
            .map(|(a, b)| self.param.to_kappa_rho(a * self.reference[0], b * self.reference[1]))
            .unzip();
        self.base.with_fields(k, r)
    }

    fn clamp(&self, x: &mut [Vec<f64>; 2]) {
        for f in 0..2 {
            let lo = self.bounds[f].0 / self.reference[f];
            let hi = self.bounds[f].1 / self.reference[f];
            for v in &mut x[f] {
                *v = v.clamp(lo, hi);
            }
        }
    }

    fn scaled_gradient(&self, g: Gradient) -> [Vec<f64>; 2] {
        let scale = |v: Vec<f64>, f: usize| -> Vec<f64> {
            if self.mask[f] {
                v.into_iter().map(|x| x * self.reference[f]).collect()
            } else {
                vec![0.0; v.len()]
            }
        };
        [scale(g.first, 0), scale(g.second, 1)]
    }
}

fn dot(a: &[Vec<f64>; 2], b: &[Vec<f64>; 2]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y)).map(|(p, q)| p * q).sum()
}

fn max_abs(a: &[Vec<f64>; 2]) -> f64 {
    a.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

/// Puts `obs` in acquisition source order.
fn align(obs: &FrequencyData, ids: &[u32], n_receivers: usize) -> Result<FrequencyData> {
    if obs.n_receivers != n_receivers {
        return Err(Error::domain(format!(
            "observed data has {} receivers, acquisition has {n_receivers}",
            obs.n_receivers
        )));
    }
    let mut values = Vec::with_capacity(ids.len() * n_receivers);
    for &id in ids {
        let s = obs
            .source_index(id)
            .ok_or_else(|| Error::domain(format!("observed data lacks source {id}")))?;
        values.extend_from_slice(obs.trace(s));
    }
    FrequencyData::new(obs.omega, ids.to_vec(), n_receivers, values)
}

fn find_block(obs: &DataSet, omega: ComplexFrequency) -> Option<&FrequencyData> {
    obs.block(omega).or_else(|| {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        obs.blocks
            .iter()
            .find(|b| close(b.omega.omega_r(), omega.omega_r()) && close(b.omega.omega_i(), omega.omega_i()))
    })
}

struct Evaluation {
    medium: MediumGrid,
    forward: ForwardResult,
    residual: FrequencyData,
    misfit: f64,
}

fn evaluate(
    medium: MediumGrid,
    omega: ComplexFrequency,
    acq: &Acquisition,
    bcs: BoundarySpec,
    obs: &FrequencyData,
    amplitude: Complex64,
) -> Result<Evaluation> {
    let forward = forward_map(&medium, omega, acq, bcs, amplitude)?;
    let mut residual = forward.data.residual(&FrequencyData { omega, ..obs.clone() })?;
    residual.omega = omega;
    let misfit = 0.5 * residual.energy();
    Ok(Evaluation {
        medium,
        forward,
        residual,
        misfit,
    })
}

/// Multi-frequency reconstruction: for each scheduled frequency, a block of
/// Polak–Ribière+ conjugate-gradient iterations with backtracking Armijo line
/// search, starting from the previous block's result.
pub fn invert(
    config: &InversionConfig,
    obs: &DataSet,
    initial: &MediumGrid,
    acq: &Acquisition,
    bcs: BoundarySpec,
) -> Result<(MediumGrid, InversionHistory)> {
    config.validate()?;
    let schedule = frequency_schedule(&config.omega_r_list, &config.omega_i_list)?;
    let ids = acq.source_ids();
    let n_rec = acq.receivers.len();
    let observed: Vec<FrequencyData> = schedule
        .iter()
        .map(|&w| {
            let block = find_block(obs, w).ok_or_else(|| {
                Error::domain(format!(
                    "no observed data at omega = ({}, {})",
                    w.omega_r(),
                    w.omega_i()
                ))
            })?;
            align(block, &ids, n_rec)
        })
        .collect::<Result<_>>()?;

    let param = config.parametrization;
    let mean = |f: usize| -> f64 {
        let s: f64 = (0..initial.len())
            .map(|p| {
                let v = param.from_kappa_rho(initial.kappa0()[p], initial.rho()[p]);
                if f == 0 { v.0 } else { v.1 }
            })
            .sum();
        s / initial.len() as f64
    };
    let model = Model {
        base: initial,
        param,
        reference: [mean(0), mean(1)],
        bounds: config.bounds,
        mask: config.invert_fields,
    };
    let ls = config.line_search;

    let mut history = InversionHistory::default();
    let mut current = initial.clone();
    let mut iteration = 0;

    for (block, (&omega, obs_w)) in schedule.iter().zip(&observed).enumerate() {
        let data_scale = 0.5 * obs_w.energy();
        let mut eval = evaluate(current.clone(), omega, acq, bcs, obs_w, config.amplitude)?;
        let initial_misfit = eval.misfit;
        let mut x = model.encode(&eval.medium);
        let mut g = model.scaled_gradient(adjoint_gradient(
            &eval.forward.system,
            &eval.forward.fields,
            &eval.residual,
            &eval.forward.receivers,
            &eval.medium,
            param,
        )?);
        let mut d: [Vec<f64>; 2] = [g[0].iter().map(|v| -v).collect(), g[1].iter().map(|v| -v).collect()];
        let mut prev_step: Option<(f64, f64)> = None; // (α, gᵀd) of the last accepted step
        let mut failures = 0;
        let mut early_stop = None;

        for _ in 0..config.iters_per_frequency {
            let gnorm = dot(&g, &g).sqrt();
            if eval.misfit <= config.misfit_rtol * data_scale || gnorm == 0.0 {
                early_stop = Some(format!("converged: misfit {:.3e}, gradient norm {gnorm:.3e}", eval.misfit));
                break;
            }
            iteration += 1;
            let slope = dot(&g, &d);
            let dmax = max_abs(&d);
            let cap = ls.max_relative_step / dmax;
            let mut alpha = match prev_step {
                Some((a, s)) if failures == 0 => a * s / slope,
                _ => ls.initial_relative_step / dmax,
            }
            .min(cap);

            let mut accepted = None;
            for _ in 0..=ls.max_backtracks {
                let mut trial = [
                    x[0].iter().zip(&d[0]).map(|(a, b)| a + alpha * b).collect(),
                    x[1].iter().zip(&d[1]).map(|(a, b)| a + alpha * b).collect(),
                ];
                model.clamp(&mut trial);
                let actual: [Vec<f64>; 2] = [
                    trial[0].iter().zip(&x[0]).map(|(a, b)| a - b).collect(),
                    trial[1].iter().zip(&x[1]).map(|(a, b)| a - b).collect(),
                ];
                let decrease = dot(&g, &actual);
                let cand = model
                    .decode(&trial)
                    .and_then(|m| evaluate(m, omega, acq, bcs, obs_w, config.amplitude));
                match cand {
                    Ok(c) if decrease < 0.0 && c.misfit <= eval.misfit + ls.armijo * decrease => {
                        accepted = Some((c, trial, alpha));
                        break;
                    }
                    Ok(c) if decrease < 0.0 => {
                        // safeguarded quadratic interpolation of J along the step
                        let denom = 2.0 * (c.misfit - eval.misfit - decrease);
                        let q = if denom > 0.0 { -decrease * alpha / denom } else { 0.0 };
                        alpha = q.clamp(0.1 * alpha, ls.backtrack * alpha);
                    }
                    // failed solves and clamped non-descent steps both shrink
                    Ok(_) | Err(Error::Factorization(_)) | Err(Error::Assembly { .. }) => alpha *= ls.backtrack,
                    Err(e) => return Err(e),
                }
            }

            match accepted {
                Some((c, trial, a)) => {
                    let g_new = model.scaled_gradient(adjoint_gradient(
                        &c.forward.system,
                        &c.forward.fields,
                        &c.residual,
                        &c.forward.receivers,
                        &c.medium,
                        param,
                    )?);
                    let gg = dot(&g, &g);
                    let beta = if gg > 0.0 {
                        let num: f64 = g_new
                            .iter()
                            .zip(&g)
                            .flat_map(|(n, o)| n.iter().zip(o))
                            .map(|(n, o)| n * (n - o))
                            .sum();
                        (num / gg).max(0.0)
                    } else {
                        0.0
                    };
                    prev_step = Some((a, slope));
                    for f in 0..2 {
                        for (dv, gv) in d[f].iter_mut().zip(&g_new[f]) {
                            *dv = -gv + beta * *dv;
                        }
                    }
                    if dot(&g_new, &d) >= 0.0 {
                        for f in 0..2 {
                            for (dv, gv) in d[f].iter_mut().zip(&g_new[f]) {
                                *dv = -gv;
                            }
                        }
                        prev_step = None;
                    }
                    history.records.push(IterationRecord {
                        iteration,
                        block,
                        omega,
                        misfit: c.misfit,
                        step: a,
                        grad_norm: gnorm,
                        accepted: true,
                    });
                    x = trial;
                    g = g_new;
                    eval = c;
                    failures = 0;
                }
                None => {
                    history.records.push(IterationRecord {
                        iteration,
                        block,
                        omega,
                        misfit: eval.misfit,
                        step: 0.0,
                        grad_norm: gnorm,
                        accepted: false,
                    });
                    failures += 1;
                    if failures >= config.max_failures {
                        early_stop = Some(format!(
                            "line search failed {failures} times in a row at misfit {:.6e}",
                            eval.misfit
                        ));
                        break;
                    }
                    for f in 0..2 {
                        for (dv, gv) in d[f].iter_mut().zip(&g[f]) {
                            *dv = -gv;
                        }
                    }
                    prev_step = None;
                }
            }
        }
        history.blocks.push(BlockSummary {
            omega,
            initial_misfit,
            final_misfit: eval.misfit,
            early_stop,
        });
        current = eval.medium;
    }
    Ok((current, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attenuation::AttenuationSpec;
    use crate::ModelKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn block(values: Vec<Complex64>, n_src: usize) -> FrequencyData {
        let n_rec = values.len() / n_src;
        FrequencyData::new(ComplexFrequency::from_hz(1e5, 0.0).unwrap(), (0..n_src as u32).collect(), n_rec, values)
            .unwrap()
    }

    #[test]
    fn misfit_examples() {
        let a = block(vec![Complex64::new(3.0, 4.0)], 1);
        let z = block(vec![Complex64::new(0.0, 0.0)], 1);
        assert_eq!(misfit(&a, &a).unwrap(), 0.0);
        assert_eq!(misfit(&a, &z).unwrap(), 12.5);
        let other = block(vec![Complex64::new(0.0, 0.0); 2], 2);
        assert!(misfit(&a, &other).is_err());
    }

    proptest! {
        #[test]
        fn misfit_matches_double_loop(seed in 0u64..500, n_src in 1usize..5, n_rec in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gen = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s: Vec<Complex64> = (0..n_src * n_rec).map(|_| gen()).collect();
            let o: Vec<Complex64> = (0..n_src * n_rec).map(|_| gen()).collect();
            let (sim, obs) = (block(s.clone(), n_src), block(o.clone(), n_src));
            let mut naive = 0.0;
            for i in 0..n_src {
                for r in 0..n_rec {
                    let d = s[i * n_rec + r] - o[i * n_rec + r];
                    naive += 0.5 * (d.re * d.re + d.im * d.im);
                }
            }
            let j = misfit(&sim, &obs).unwrap();
            prop_assert!((j - naive).abs() <= 1e-12 * naive.max(1e-300));
        }
    }

    #[test]
    fn schedule_orders() {
        let khz = |v: &[f64]| v.iter().map(|f| 2.0 * PI * f * 1e3).collect::<Vec<_>>();
        let s = frequency_schedule(&khz(&[100.0, 200.0, 300.0]), &[1e4, 5e3]).unwrap();
        let got: Vec<(f64, f64)> = s.iter().map(|w| ((w.freq_hz() / 1e3).round(), w.omega_i())).collect();
        assert_eq!(
            got,
            [(100.0, 1e4), (100.0, 5e3), (200.0, 1e4), (200.0, 5e3), (300.0, 1e4), (300.0, 5e3)]
        );
        let plain = frequency_schedule(&khz(&[100.0, 200.0]), &[0.0]).unwrap();
        assert_eq!(plain.len(), 2);
        assert!(plain[0].omega_r() < plain[1].omega_r());
        assert_eq!(frequency_schedule(&[1.0], &[0.0]).unwrap().len(), 1);
        assert!(frequency_schedule(&[], &[0.0]).is_err());
        assert!(frequency_schedule(&[2.0, 1.0], &[0.0]).is_err());
    }

    fn small_case(kind: ModelKind, seed: u64) -> (MediumGrid, MediumGrid, Acquisition) {
        let n = 16;
        let h = 3e-4;
        let spec = match kind {
            ModelKind::KelvinVoigt => AttenuationSpec::KelvinVoigt { tau_eps: 4.5e-9 },
            _ => AttenuationSpec::KolskyFutterman { eta_q: 118.0 },
        };
        let background = MediumGrid::uniform(n, n, h, h, 2.25e9, 1000.0, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = background.kappa0().iter().map(|k| k * rng.random_range(0.95..1.05)).collect();
        let r = background.rho().iter().map(|r| r * rng.random_range(0.95..1.05)).collect();
        let truth = background.with_fields(k, r).unwrap();
        let w = background.width();
        let acq = Acquisition::ring(0.5 * w, 0.5 * w, 0.35 * w, 3, 10).unwrap();
        (background, truth, acq)
    }

    fn j_at(m: &MediumGrid, omega: ComplexFrequency, acq: &Acquisition, bcs: BoundarySpec, obs: &FrequencyData) -> f64 {
        let f = forward_map(m, omega, acq, bcs, Complex64::new(1.0, 0.0)).unwrap();
        misfit(&f.data, obs).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (_, truth, acq) = small_case(ModelKind::KolskyFutterman, 1);
        let omega = ComplexFrequency::from_hz(3e5, 0.0).unwrap();
        let f = forward_map(&truth, omega, &acq, BoundarySpec::absorbing(), Complex64::new(1.0, 0.0)).unwrap();
        let res = f.data.residual(&f.data).unwrap();
        let g = adjoint_gradient(&f.system, &f.fields, &res, &f.receivers, &truth, Parametrization::KappaRho).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (bcs, wi) in [(BoundarySpec::absorbing(), 0.0), (BoundarySpec::wall(), 1e4)] {
            let (bg, truth, acq) = small_case(ModelKind::KelvinVoigt, 2);
            let omega = ComplexFrequency::from_hz(3e5, wi).unwrap();
            let obs = forward_map(&truth, omega, &acq, bcs, Complex64::new(1.0, 0.0)).unwrap().data;
            let f = forward_map(&bg, omega, &acq, bcs, Complex64::new(1.0, 0.0)).unwrap();
            let res = f.data.residual(&obs).unwrap();
            for param in Parametrization::ALL {
                let g = adjoint_gradient(&f.system, &f.fields, &res, &f.receivers, &bg, param).unwrap();
                for &node in &[0usize, 17, 100, 255] {
                    for field in 0..2 {
                        let (a, b) = param.from_kappa_rho(bg.kappa0()[node], bg.rho()[node]);
                        let h = 1e-4 * if field == 0 { a } else { b };
                        let shifted = |s: f64| {
                            let (mut k, mut r) = (bg.kappa0().to_vec(), bg.rho().to_vec());
                            let (na, nb) = if field == 0 { (a + s, b) } else { (a, b + s) };
                            let (kk, rr) = param.to_kappa_rho(na, nb);
                            k[node] = kk;
                            r[node] = rr;
                            bg.with_fields(k, r).unwrap()
                        };
                        let fd = (j_at(&shifted(h), omega, &acq, bcs, &obs) - j_at(&shifted(-h), omega, &acq, bcs, &obs))
                            / (2.0 * h);
                        let ad = if field == 0 { g.first[node] } else { g.second[node] };
                        assert!((ad - fd).abs() <= 1e-5 * fd.abs().max(1e-30), "{param:?} node {node} field {field}: {ad} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn chain_rule_identity() {
        let (bg, truth, acq) = small_case(ModelKind::KolskyFutterman, 3);
        let omega = ComplexFrequency::from_hz(2e5, 1e4).unwrap();
        let bcs = BoundarySpec::absorbing();
        let obs = forward_map(&truth, omega, &acq, bcs, Complex64::new(1.0, 0.0)).unwrap().data;
        let f = forward_map(&bg, omega, &acq, bcs, Complex64::new(1.0, 0.0)).unwrap();
        let res = f.data.residual(&obs).unwrap();
        let gk = adjoint_gradient(&f.system, &f.fields, &res, &f.receivers, &bg, Parametrization::KappaRho).unwrap();
        let gi = adjoint_gradient(&f.system, &f.fields, &res, &f.receivers, &bg, Parametrization::ImpedanceSpeed).unwrap();
        for p in 0..bg.len() {
            let (i, c) = Parametrization::ImpedanceSpeed.from_kappa_rho(bg.kappa0()[p], bg.rho()[p]);
            // Jᵀ of (I, c) ↦ (κ₀, ρ) = (Ic, I/c)
            let gi_ref = gk.first[p] * c + gk.second[p] / c;
            let gc_ref = gk.first[p] * i - gk.second[p] * i / (c * c);
            assert!((gi.first[p] - gi_ref).abs() <= 1e-10 * gi_ref.abs().max(1e-300));
            assert!((gi.second[p] - gc_ref).abs() <= 1e-10 * gc_ref.abs().max(1e-300));
        }
    }

    #[test]
    fn source_order_does_not_change_gradient() {
        let (bg, truth, acq) = small_case(ModelKind::KolskyFutterman, 4);
        let omega = ComplexFrequency::from_hz(3e5, 0.0).unwrap();
        let bcs = BoundarySpec::absorbing();
        let grad = |acq: &Acquisition| {
            let obs = forward_map(&truth, omega, acq, bcs, Complex64::new(1.0, 0.0)).unwrap().data;
            let f = forward_map(&bg, omega, acq, bcs, Complex64::new(1.0, 0.0)).unwrap();
            let res = f.data.residual(&obs).unwrap();
            adjoint_gradient(&f.system, &f.fields, &res, &f.receivers, &bg, Parametrization::KappaRho).unwrap()
        };
        let mut reversed = acq.clone();
        reversed.sources.reverse();
        let (a, b) = (grad(&acq), grad(&reversed));
        for (x, y) in a.first.iter().zip(&b.first).chain(a.second.iter().zip(&b.second)) {
            assert!((x - y).abs() <= 1e-14 * x.abs().max(1e-300) + 1e-300, "{x} vs {y}");
        }
    }

    #[test]
    fn contract_violations_are_reported() {
        let (bg, truth, acq) = small_case(ModelKind::KolskyFutterman, 5);
        let omega = ComplexFrequency::from_hz(3e5, 0.0).unwrap();
        let f = forward_map(&bg, omega, &acq, BoundarySpec::absorbing(), Complex64::new(1.0, 0.0)).unwrap();
        let res = f.data.residual(&f.data).unwrap();
        let wrong = adjoint_gradient(&f.system, &f.fields, &res, &f.receivers, &truth, Parametrization::KappaRho);
        assert!(matches!(wrong, Err(Error::Contract(_))));
        let mut shifted = res.clone();
        shifted.omega = ComplexFrequency::from_hz(2e5, 0.0).unwrap();
        let wrong = adjoint_gradient(&f.system, &f.fields, &shifted, &f.receivers, &bg, Parametrization::KappaRho);
        assert!(matches!(wrong, Err(Error::Contract(_))));
    }

    #[test]
    fn coefficient_gradient_matches_finite_differences() {
        let (bg, truth, acq) = small_case(ModelKind::KelvinVoigt, 6);
        let omega = ComplexFrequency::from_hz(3e5, 0.0).unwrap();
        let bcs = BoundarySpec::absorbing();
        let obs = forward_map(&truth, omega, &acq, bcs, Complex64::new(1.0, 0.0)).unwrap().data;
        let f = forward_map(&bg, omega, &acq, bcs, Complex64::new(1.0, 0.0)).unwrap();
        let res = f.data.residual(&obs).unwrap();
        let g = coefficient_gradient(&f.system, &f.fields, &res, &f.receivers, &bg, 0).unwrap();
        let node = 120;
        let tau = bg.coefficient_fields()[0][node];
        let h = 1e-3 * tau;
        let with = |s: f64| {
            let mut c = bg.coefficient_fields().to_vec();
            c[0][node] = tau + s;
            bg.with_attenuation(ModelKind::KelvinVoigt, c).unwrap()
        };
        let fd = (j_at(&with(h), omega, &acq, bcs, &obs) - j_at(&with(-h), omega, &acq, bcs, &obs)) / (2.0 * h);
        assert!((g[node] - fd).abs() <= 1e-5 * fd.abs(), "{} vs {fd}", g[node]);
    }

    #[test]
    fn truth_start_stays_put() {
        let (_, truth, acq) = small_case(ModelKind::KolskyFutterman, 7);
        let bcs = BoundarySpec::absorbing();
        let omegas = [2.0 * PI * 2e5, 2.0 * PI * 3e5];
        let blocks = omegas
            .iter()
            .map(|&w| {
                let omega = ComplexFrequency::new(w, 0.0).unwrap();
                forward_map(&truth, omega, &acq, bcs, Complex64::new(1.0, 0.0)).unwrap().data
            })
            .collect();
        let obs = DataSet::new(blocks);
        let config = InversionConfig::speed_only(omegas.to_vec(), vec![0.0], 3);
        let (rec, hist) = invert(&config, &obs, &truth, &acq, bcs).unwrap();
        assert_eq!(rec, truth);
        assert!(hist.records.iter().all(|r| !r.accepted || r.misfit <= 1e-12));
        for b in &hist.blocks {
            assert!(b.initial_misfit <= 1e-20 * 0.5 * obs.blocks[0].energy());
        }
    }

    #[test]
    fn accepted_misfits_never_increase() {
        let (bg, truth, acq) = small_case(ModelKind::KolskyFutterman, 8);
        let bcs = BoundarySpec::absorbing();
        let omegas = vec![2.0 * PI * 2e5, 2.0 * PI * 4e5];
        let blocks = omegas
            .iter()
            .map(|&w| {
                let omega = ComplexFrequency::new(w, 0.0).unwrap();
                forward_map(&truth, omega, &acq, bcs, Complex64::new(1.0, 0.0)).unwrap().data
            })
            .collect();
        let obs = DataSet::new(blocks);
        let mut config = InversionConfig::speed_only(omegas, vec![0.0], 5);
        config.parametrization = Parametrization::KappaRho;
        config.invert_fields = [true, true];
        config.bounds = [(1e9, 4e9), (500.0, 2000.0)];
        let (_, hist) = invert(&config, &obs, &bg, &acq, bcs).unwrap();
        for b in 0..hist.blocks.len() {
            let mut last = hist.blocks[b].initial_misfit;
            for r in hist.records.iter().filter(|r| r.block == b && r.accepted) {
                assert!(r.misfit <= last);
                last = r.misfit;
            }
            assert!(hist.blocks[b].final_misfit < hist.blocks[b].initial_misfit);
        }
    }
}
