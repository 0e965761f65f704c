//! Finite-volume discretization of the complex-frequency Helmholtz problem
//!
//! ```text
//! ∇·(ρ⁻¹∇p) + (ω²/κ†) p = iω g
//! ```
//!
//! on a node grid, its sparse LU factorization and the forward map.
//!
//! Each node owns the control volume of half-spacing around it, halved on
//! boundary sides. The five-point stencil couples neighbours through the
//! harmonic mean of `ρ⁻¹` at the shared face, so the assembled matrix is
//! complex symmetric. Absorbing sides add the Robin flux
//! `ρ⁻¹ ∂p/∂n = iω p/(ρc†)` and wall sides add nothing (zero normal flux).

mod green;

pub use green::{analytic_green_2d, hankel1_0, HANKEL_CROSSOVER};

use faer::linalg::solvers::{Solve, SolveCore};
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, Par};
use num_complex::Complex64;

use crate::attenuation::{complex_wave_speed, validate_attenuation, ComplexFrequency};
use crate::data::FrequencyData;
use crate::error::{Error, Result};
use crate::medium::MediumGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryCondition {
    /// First-order radiation condition `∂p/∂n = (iω/c†) p`.
    Absorbing,
    /// Rigid wall, `∂p/∂n = 0`.
    Wall,
}

/// Condition on each side. `left`/`right` are `x = 0`/`x = max`,
/// `top`/`bottom` are `z = 0`/`z = max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundarySpec {
    pub left: BoundaryCondition,
    pub right: BoundaryCondition,
    pub top: BoundaryCondition,
    pub bottom: BoundaryCondition,
}

impl BoundarySpec {
    pub const fn all(bc: BoundaryCondition) -> Self {
        Self {
            left: bc,
            right: bc,
            top: bc,
            bottom: bc,
        }
    }

    pub const fn absorbing() -> Self {
        Self::all(BoundaryCondition::Absorbing)
    }

    pub const fn wall() -> Self {
        Self::all(BoundaryCondition::Wall)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Excitation {
    Point { x: f64, z: f64 },
    /// Points fired together into one right-hand side.
    Array(Vec<(f64, f64)>),
}

impl Excitation {
    pub fn points(&self) -> Vec<(f64, f64)> {
        match self {
            Excitation::Point { x, z } => vec![(*x, *z)],
            Excitation::Array(p) => p.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub id: u32,
    pub excitation: Excitation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Acquisition {
    pub sources: Vec<Source>,
    pub receivers: Vec<(f64, f64)>,
}

impl Acquisition {
    pub fn new(sources: Vec<Source>, receivers: Vec<(f64, f64)>) -> Result<Self> {
        if sources.is_empty() || receivers.is_empty() {
            return Err(Error::domain("acquisition needs at least one source and one receiver"));
        }
        for (i, s) in sources.iter().enumerate() {
            if sources[..i].iter().any(|t| t.id == s.id) {
                return Err(Error::domain(format!("duplicate source id {}", s.id)));
            }
            if s.excitation.points().is_empty() {
                return Err(Error::domain(format!("source {} has no points", s.id)));
            }
        }
        Ok(Self { sources, receivers })
    }

    /// Point sources and receivers evenly spaced on a circle; source `k` has
    /// id `k` and sits at angle `2πk/n_sources`.
    pub fn ring(cx: f64, cz: f64, radius: f64, n_sources: usize, n_receivers: usize) -> Result<Self> {
        let at = |k: usize, n: usize, phase: f64| {
            let a = 2.0 * std::f64::consts::PI * (k as f64 + phase) / n as f64;
            (cx + radius * a.cos(), cz + radius * a.sin())
        };
        let sources = (0..n_sources)
            .map(|k| {
                let (x, z) = at(k, n_sources, 0.0);
                Source {
                    id: k as u32,
                    excitation: Excitation::Point { x, z },
                }
            })
            .collect();
        let receivers = (0..n_receivers).map(|k| at(k, n_receivers, 0.5)).collect();
        Self::new(sources, receivers)
    }

    pub fn source_ids(&self) -> Vec<u32> {
        self.sources.iter().map(|s| s.id).collect()
    }

    fn check_inside(&self, grid: &MediumGrid) -> Result<()> {
        let (w, h) = (grid.width(), grid.height());
        let tol = 1e-9 * w.max(h);
        let inside = |&(x, z): &(f64, f64)| x >= -tol && x <= w + tol && z >= -tol && z <= h + tol;
        let all_points = self
            .sources
            .iter()
            .flat_map(|s| s.excitation.points())
            .chain(self.receivers.iter().copied());
        for p in all_points {
            if !inside(&p) {
                return Err(Error::domain(format!(
                    "position ({}, {}) lies outside the {w} x {h} domain",
                    p.0, p.1
                )));
            }
        }
        Ok(())
    }
}

/// Bilinear sampling weights of each receiver.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceiverOperator {
    taps: Vec<[(usize, f64); 4]>,
    n_nodes: usize,
}

impl ReceiverOperator {
    pub fn new(grid: &MediumGrid, receivers: &[(f64, f64)]) -> Self {
        let cell = |pos: f64, h: f64, n: usize| {
            let u = (pos / h).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n - 2);
            (i, u - i as f64)
        };
        let taps = receivers
            .iter()
            .map(|&(x, z)| {
                let (ix, tx) = cell(x, grid.dx(), grid.nx());
                let (iz, tz) = cell(z, grid.dz(), grid.nz());
                [
                    (grid.index(ix, iz), (1.0 - tx) * (1.0 - tz)),
                    (grid.index(ix + 1, iz), tx * (1.0 - tz)),
                    (grid.index(ix, iz + 1), (1.0 - tx) * tz),
                    (grid.index(ix + 1, iz + 1), tx * tz),
                ]
            })
            .collect();
        Self {
            taps,
            n_nodes: grid.len(),
        }
    }

    pub fn n_receivers(&self) -> usize {
        self.taps.len()
    }

    /// `R p`.
    pub fn sample(&self, field: &[Complex64]) -> Vec<Complex64> {
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(n, w)| field[n] * w).sum())
            .collect()
    }

    /// `Rᵀ r`.
    pub fn spread(&self, values: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n_nodes];
        for (t, &v) in self.taps.iter().zip(values) {
            for &(n, w) in t {
                out[n] += v * w;
            }
        }
        out
    }
}

/// Assembled operator at one frequency, with the per-node quantities the
/// adjoint gradient needs.
#[derive(Clone, Debug)]
pub struct HelmholtzSystem {
    medium: MediumGrid,
    omega: ComplexFrequency,
    bcs: BoundarySpec,
    matrix: SparseColMat<usize, Complex64>,
    kappa_dagger: Vec<Complex64>,
    volume: Vec<f64>,
    robin_length: Vec<f64>,
}

fn edge_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n - 1 {
        0.5
    } else {
        1.0
    }
}

/// Assembles the five-point operator. Fails with the offending node when the
/// complex wave speed breaks the attenuation validity conditions.
pub fn assemble_system(
    medium: &MediumGrid,
    omega: ComplexFrequency,
    bcs: BoundarySpec,
) -> Result<HelmholtzSystem> {
    let (nx, nz, dx, dz) = (medium.nx(), medium.nz(), medium.dx(), medium.dz());
    let n = medium.len();
    let w = omega.value();
    let iw = Complex64::i() * w;
    let w2 = w * w;
    let rho = medium.rho();

    let mut kappa_dagger = Vec::with_capacity(n);
    for node in 0..n {
        let kd = crate::attenuation::evaluate_bulk_modulus(
            &medium.spec_at(node),
            medium.kappa0()[node],
            omega,
        )?;
        let c = complex_wave_speed(kd, rho[node])?;
        validate_attenuation(c, omega).map_err(|violation| Error::Assembly {
            node,
            ix: node / nz,
            iz: node % nz,
            violation,
        })?;
        kappa_dagger.push(kd);
    }

    let mut volume = vec![0.0; n];
    let mut robin_length = vec![0.0; n];
    let mut diag = vec![Complex64::new(0.0, 0.0); n];
    let mut triplets = Vec::with_capacity(5 * n);
    let absorbing = |bc: BoundaryCondition| bc == BoundaryCondition::Absorbing;

    for ix in 0..nx {
        let wx = edge_weight(ix, nx);
        for iz in 0..nz {
            let wz = edge_weight(iz, nz);
            let p = medium.index(ix, iz);
            volume[p] = dx * dz * wx * wz;

            let mut couple = |q: usize, length: f64, h: f64, diag: &mut [Complex64]| {
                let b = 2.0 / (rho[p] + rho[q]) * length / h;
                triplets.push(Triplet::new(p, q, Complex64::new(b, 0.0)));
                diag[p] -= b;
            };
            if ix > 0 {
                couple(medium.index(ix - 1, iz), dz * wz, dx, &mut diag);
            }
            if ix + 1 < nx {
                couple(medium.index(ix + 1, iz), dz * wz, dx, &mut diag);
            }
            if iz > 0 {
                couple(medium.index(ix, iz - 1), dx * wx, dz, &mut diag);
            }
            if iz + 1 < nz {
                couple(medium.index(ix, iz + 1), dx * wx, dz, &mut diag);
            }

            let mut lr = 0.0;
            if ix == 0 && absorbing(bcs.left) {
                lr += dz * wz;
            }
            if ix == nx - 1 && absorbing(bcs.right) {
                lr += dz * wz;
            }
            if iz == 0 && absorbing(bcs.top) {
                lr += dx * wx;
            }
            if iz == nz - 1 && absorbing(bcs.bottom) {
                lr += dx * wx;
            }
            robin_length[p] = lr;

            let kd = kappa_dagger[p];
            diag[p] += volume[p] * w2 / kd;
            if lr > 0.0 {
                // 1/(ρc†) = (κ†ρ)^(-1/2)
                diag[p] += iw * lr / (kd * rho[p]).sqrt();
            }
        }
    }
    triplets.extend(diag.iter().enumerate().map(|(p, &d)| Triplet::new(p, p, d)));
    let matrix = SparseColMat::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| Error::Factorization(format!("sparse assembly: {e:?}")))?;

    Ok(HelmholtzSystem {
        medium: medium.clone(),
        omega,
        bcs,
        matrix,
        kappa_dagger,
        volume,
        robin_length,
    })
}

impl HelmholtzSystem {
    pub fn order(&self) -> usize {
        self.medium.len()
    }
    pub fn omega(&self) -> ComplexFrequency {
        self.omega
    }
    pub fn boundaries(&self) -> BoundarySpec {
        self.bcs
    }
    pub fn medium(&self) -> &MediumGrid {
        &self.medium
    }
    pub fn matrix(&self) -> &SparseColMat<usize, Complex64> {
        &self.matrix
    }
    pub fn kappa_dagger(&self) -> &[Complex64] {
        &self.kappa_dagger
    }
    pub fn volume(&self) -> &[f64] {
        &self.volume
    }
    pub fn robin_length(&self) -> &[f64] {
        &self.robin_length
    }

    /// Dense copy of the entry at `(row, col)`, zero if not stored.
    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        let m = self.matrix.as_ref();
        let rows = m.row_idx_of_col_raw(col);
        let vals = m.val_of_col(col);
        rows.iter()
            .zip(vals)
            .filter(|(r, _)| **r == row)
            .map(|(_, v)| *v)
            .sum()
    }

    /// `A x`.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let m = self.matrix.as_ref();
        let mut y = vec![Complex64::new(0.0, 0.0); self.order()];
        for (col, &xc) in x.iter().enumerate() {
            for (r, v) in m.row_idx_of_col_raw(col).iter().zip(m.val_of_col(col)) {
                y[*r] += v * xc;
            }
        }
        y
    }

    /// Right-hand side of one source: `V·iω·amplitude/(dx·dz)` at the node
    /// nearest to each of its points.
    pub fn source_rhs(&self, source: &Source, amplitude: Complex64) -> Vec<Complex64> {
        let g = &self.medium;
        let mut rhs = vec![Complex64::new(0.0, 0.0); self.order()];
        let scale = Complex64::i() * self.omega.value() * amplitude / (g.dx() * g.dz());
        for (x, z) in source.excitation.points() {
            let ix = ((x / g.dx()).round().max(0.0) as usize).min(g.nx() - 1);
            let iz = ((z / g.dz()).round().max(0.0) as usize).min(g.nz() - 1);
            let p = g.index(ix, iz);
            rhs[p] += scale * self.volume[p];
        }
        rhs
    }
}

/// Caps the worker threads used by factorizations and solves. `None` or `0`
/// uses every available core, `1` runs sequentially.
pub fn set_thread_limit(threads: Option<usize>) {
    let par = match threads.unwrap_or(0) {
        1 => Par::Seq,
        n => Par::rayon(n),
    };
    faer::set_global_parallelism(par);
}

/// Sparse LU of an assembled system, reused for every right-hand side.
pub struct FactorizedSystem {
    system: HelmholtzSystem,
    lu: Lu<usize, Complex64>,
}

impl std::fmt::Debug for FactorizedSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FactorizedSystem")
            .field("order", &self.system.order())
            .field("omega", &self.system.omega)
            .finish()
    }
}

/// Factorizes with a fill-reducing column ordering. A pivot breakdown, or a
/// factorization that cannot reproduce a probe solve, is reported as an error.
pub fn factorize(system: HelmholtzSystem) -> Result<FactorizedSystem> {
    let lu = system
        .matrix
        .sp_lu()
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let fact = FactorizedSystem { system, lu };
    let n = fact.system.order();
    let probe: Vec<Complex64> = (0..n)
        .map(|k| Complex64::new(1.0, (k % 7) as f64 / 7.0))
        .collect();
    let x = fact.solve_many(std::slice::from_ref(&probe), Conj::No)?;
    let ax = fact.system.apply(&x[0]);
    let res: f64 = ax.iter().zip(&probe).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    let norm: f64 = probe.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    if !(res <= 1e-6 * norm) {
        return Err(Error::Factorization(format!(
            "numerically singular operator: probe residual {:.3e}",
            res / norm
        )));
    }
    Ok(fact)
}

impl FactorizedSystem {
    pub fn system(&self) -> &HelmholtzSystem {
        &self.system
    }

    pub fn into_system(self) -> HelmholtzSystem {
        self.system
    }

    fn solve_many(&self, rhs: &[Vec<Complex64>], adjoint: Conj) -> Result<Vec<Vec<Complex64>>> {
        let n = self.system.order();
        if let Some(bad) = rhs.iter().find(|r| r.len() != n) {
            return Err(Error::Contract(format!(
                "right-hand side of length {} for a system of order {n}",
                bad.len()
            )));
        }
        if rhs.is_empty() {
            return Ok(vec![]);
        }
        let mut b = Mat::<Complex64>::from_fn(n, rhs.len(), |i, j| rhs[j][i]);
        match adjoint {
            Conj::No => self.lu.solve_in_place_with_conj(Conj::No, b.as_mut()),
            Conj::Yes => self.lu.solve_transpose_in_place_with_conj(Conj::Yes, b.as_mut()),
        }
        let out: Vec<Vec<Complex64>> = (0..rhs.len())
            .map(|j| (0..n).map(|i| b[(i, j)]).collect())
            .collect();
        if out.iter().flatten().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Factorization("solve produced non-finite values".into()));
        }
        Ok(out)
    }

    /// `A x = b` for each right-hand side.
    pub fn solve(&self, rhs: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>> {
        self.solve_many(rhs, Conj::No)
    }

    /// `Aᴴ x = b` for each right-hand side.
    pub fn solve_adjoint(&self, rhs: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>> {
        self.solve_many(rhs, Conj::Yes)
    }

    /// Convenience single solve through the generic solver trait.
    pub fn solve_one(&self, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
        let b = Mat::<Complex64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        let x = self.lu.solve(&b);
        Ok((0..rhs.len()).map(|i| x[(i, 0)]).collect())
    }
}

/// Receiver data, full fields and the factorization of one forward run.
#[derive(Debug)]
pub struct ForwardResult {
    pub data: FrequencyData,
    /// One field per source, in acquisition order.
    pub fields: Vec<Vec<Complex64>>,
    pub system: FactorizedSystem,
    pub receivers: ReceiverOperator,
}

/// One assembly and factorization, then one solve per source.
pub fn forward_map(
    medium: &MediumGrid,
    omega: ComplexFrequency,
    acq: &Acquisition,
    bcs: BoundarySpec,
    amplitude: Complex64,
) -> Result<ForwardResult> {
    acq.check_inside(medium)?;
    let system = factorize(assemble_system(medium, omega, bcs)?)?;
    let rhs: Vec<Vec<Complex64>> = acq
        .sources
        .iter()
        .map(|s| system.system().source_rhs(s, amplitude))
        .collect();
    let fields = system.solve(&rhs)?;
    let receivers = ReceiverOperator::new(medium, &acq.receivers);
    let values = fields.iter().flat_map(|p| receivers.sample(p)).collect();
    let data = FrequencyData::new(omega, acq.source_ids(), acq.receivers.len(), values)?;
    Ok(ForwardResult {
        data,
        fields,
        system,
        receivers,
    })
}
