//! Gridded material parameters, synthetic phantoms, parametrization changes
//! and reconstruction scoring.
//!
//! Nodes sit at `x = ix·dx`, `z = iz·dz` and are stored with `z` varying
//! fastest: node `ix·nz + iz`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attenuation::{
    calibrate_to_quality, complex_wave_speed, evaluate_bulk_modulus, validate_attenuation,
    AttenuationSpec, ComplexFrequency, FixedCoefficients, ModelKind,
};
use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 8] = b"VAGRID01";

#[derive(Clone, Debug, PartialEq)]
pub struct MediumGrid {
    nx: usize,
    nz: usize,
    dx: f64,
    dz: f64,
    kappa0: Vec<f64>,
    rho: Vec<f64>,
    kind: ModelKind,
    /// One node array per coefficient, in `AttenuationSpec::coefficients` order.
    coeffs: Vec<Vec<f64>>,
}

impl MediumGrid {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        nx: usize,
        nz: usize,
        dx: f64,
        dz: f64,
        kappa0: Vec<f64>,
        rho: Vec<f64>,
        kind: ModelKind,
        coeffs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if nx < 3 || nz < 3 {
            return Err(Error::domain(format!("grid needs at least 3x3 nodes, got {nx}x{nz}")));
        }
        if !(dx > 0.0 && dz > 0.0 && dx.is_finite() && dz.is_finite()) {
            return Err(Error::domain(format!("spacings must be positive, got {dx}, {dz}")));
        }
        let n = nx * nz;
        if kappa0.len() != n || rho.len() != n || coeffs.iter().any(|c| c.len() != n) {
            return Err(Error::domain("field length does not match nx*nz"));
        }
        let expected = kind.coefficient_names().len();
        if kind != ModelKind::Generalized && coeffs.len() != expected {
            return Err(Error::domain(format!(
                "{kind} needs {expected} coefficient fields, got {}",
                coeffs.len()
            )));
        }
        if kind == ModelKind::Generalized && !coeffs.len().is_multiple_of(2) {
            return Err(Error::domain("generalized model needs omega/b field pairs"));
        }
        let grid = Self {
            nx,
            nz,
            dx,
            dz,
            kappa0,
            rho,
            kind,
            coeffs,
        };
        grid.check_nodes()?;
        Ok(grid)
    }

    /// Every node carries the same material.
    pub fn uniform(
        nx: usize,
        nz: usize,
        dx: f64,
        dz: f64,
        kappa0: f64,
        rho: f64,
        spec: &AttenuationSpec,
    ) -> Result<Self> {
        let n = nx * nz;
        let coeffs = spec.coefficients().into_iter().map(|c| vec![c; n]).collect();
        Self::new(nx, nz, dx, dz, vec![kappa0; n], vec![rho; n], spec.kind(), coeffs)
    }

    fn check_nodes(&self) -> Result<()> {
        for node in 0..self.len() {
            let (k, r) = (self.kappa0[node], self.rho[node]);
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::domain(format!("kappa0 = {k} at node {node}")));
            }
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::domain(format!("rho = {r} at node {node}")));
            }
            self.spec_at(node).validate()?;
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nz(&self) -> usize {
        self.nz
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn dz(&self) -> f64 {
        self.dz
    }
    pub fn len(&self) -> usize {
        self.nx * self.nz
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn width(&self) -> f64 {
        (self.nx - 1) as f64 * self.dx
    }
    pub fn height(&self) -> f64 {
        (self.nz - 1) as f64 * self.dz
    }
    pub fn index(&self, ix: usize, iz: usize) -> usize {
        ix * self.nz + iz
    }
    pub fn position(&self, node: usize) -> (f64, f64) {
        ((node / self.nz) as f64 * self.dx, (node % self.nz) as f64 * self.dz)
    }
    pub fn kappa0(&self) -> &[f64] {
        &self.kappa0
    }
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }
    pub fn kind(&self) -> ModelKind {
        self.kind
    }
    pub fn coefficient_fields(&self) -> &[Vec<f64>] {
        &self.coeffs
    }

    /// Field names in storage order: `kappa0`, `rho`, then coefficients.
    pub fn field_names(&self) -> Vec<String> {
        let mut names = vec!["kappa0".to_string(), "rho".to_string()];
        names.extend(coefficient_field_names(self.kind, self.coeffs.len()));
        names
    }

    pub fn spec_at(&self, node: usize) -> AttenuationSpec {
        let c: Vec<f64> = self.coeffs.iter().map(|f| f[node]).collect();
        AttenuationSpec::from_coefficients(self.kind, &c)
            .expect("coefficient count checked at construction")
    }

    /// `c₀ = sqrt(κ₀/ρ)` per node.
    pub fn speed(&self) -> Vec<f64> {
        self.kappa0
            .iter()
            .zip(&self.rho)
            .map(|(k, r)| (k / r).sqrt())
            .collect()
    }

    /// Same attenuation, new `κ₀` and `ρ`.
    pub fn with_fields(&self, kappa0: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        Self::new(
            self.nx,
            self.nz,
            self.dx,
            self.dz,
            kappa0,
            rho,
            self.kind,
            self.coeffs.clone(),
        )
    }

    /// Same `κ₀` and `ρ`, new attenuation law and coefficients.
    pub fn with_attenuation(&self, kind: ModelKind, coeffs: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(
            self.nx,
            self.nz,
            self.dx,
            self.dz,
            self.kappa0.clone(),
            self.rho.clone(),
            kind,
            coeffs,
        )
    }

    /// Writes the VAGRID01 representation.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let names = self.field_names();
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.nx as u32).to_le_bytes())?;
        w.write_all(&(self.nz as u32).to_le_bytes())?;
        w.write_all(&self.dx.to_le_bytes())?;
        w.write_all(&self.dz.to_le_bytes())?;
        w.write_all(&[self.kind.tag()])?;
        w.write_all(&(names.len() as u32).to_le_bytes())?;
        for name in &names {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        let fields = [&self.kappa0, &self.rho].into_iter().chain(self.coeffs.iter());
        for field in fields {
            for v in field {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parses a VAGRID01 stream, validating the header and every node.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("missing VAGRID01 magic".into()));
        }
        let nx = read_u32(&mut r)? as usize;
        let nz = read_u32(&mut r)? as usize;
        let dx = read_f64(&mut r)?;
        let dz = read_f64(&mut r)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let kind = ModelKind::from_tag(tag[0])
            .ok_or_else(|| Error::Format(format!("unknown model tag {}", tag[0])))?;
        let count = read_u32(&mut r)? as usize;
        if !(2..=1024).contains(&count) {
            return Err(Error::Format(format!("implausible field count {count}")));
        }
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > 256 {
                return Err(Error::Format(format!("field name of length {len}")));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let name = String::from_utf8(buf)
                .ok()
                .filter(|s| s.is_ascii())
                .ok_or_else(|| Error::Format("non-ASCII field name".into()))?;
            names.push(name);
        }
        let mut expected = vec!["kappa0".to_string(), "rho".to_string()];
        expected.extend(coefficient_field_names(kind, count - 2));
        if names != expected {
            return Err(Error::Format(format!(
                "field names {names:?} do not match {kind} layout {expected:?}"
            )));
        }
        let n = nx
            .checked_mul(nz)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| Error::Format(format!("implausible grid size {nx}x{nz}")))?;
        let mut fields = Vec::with_capacity(count);
        let mut buf = vec![0u8; 8 * n];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            fields.push(
                buf.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect::<Vec<_>>(),
            );
        }
        let mut fields = fields.into_iter();
        let kappa0 = fields.next().unwrap();
        let rho = fields.next().unwrap();
        Self::new(nx, nz, dx, dz, kappa0, rho, kind, fields.collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn coefficient_field_names(kind: ModelKind, count: usize) -> Vec<String> {
    if kind == ModelKind::Generalized {
        (0..count)
            .map(|k| {
                let l = k / 2 + 1;
                if k % 2 == 0 {
                    format!("omega_l{l}")
                } else {
                    format!("b_l{l}")
                }
            })
            .collect()
    } else {
        kind.coefficient_names().iter().map(|s| s.to_string()).collect()
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Pair of fields used as optimization variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Parametrization {
    /// Bulk modulus and density.
    KappaRho,
    /// Impedance `I₀ = sqrt(κ₀ρ)` and density.
    ImpedanceRho,
    /// Speed `c₀ = sqrt(κ₀/ρ)` and density.
    SpeedRho,
    /// Impedance and speed.
    ImpedanceSpeed,
}

impl Parametrization {
    pub const ALL: [Parametrization; 4] = [
        Parametrization::KappaRho,
        Parametrization::ImpedanceRho,
        Parametrization::SpeedRho,
        Parametrization::ImpedanceSpeed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Parametrization::KappaRho => "kappa-rho",
            Parametrization::ImpedanceRho => "impedance-rho",
            Parametrization::SpeedRho => "speed-rho",
            Parametrization::ImpedanceSpeed => "impedance-speed",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let name = name.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Names of the first and second field.
    pub fn field_names(self) -> [&'static str; 2] {
        match self {
            Parametrization::KappaRho => ["kappa0", "rho"],
            Parametrization::ImpedanceRho => ["impedance", "rho"],
            Parametrization::SpeedRho => ["speed", "rho"],
            Parametrization::ImpedanceSpeed => ["impedance", "speed"],
        }
    }

    /// `(κ₀, ρ)` to this parametrization at one node.
    pub fn from_kappa_rho(self, kappa0: f64, rho: f64) -> (f64, f64) {
        match self {
            Parametrization::KappaRho => (kappa0, rho),
            Parametrization::ImpedanceRho => ((kappa0 * rho).sqrt(), rho),
            Parametrization::SpeedRho => ((kappa0 / rho).sqrt(), rho),
            Parametrization::ImpedanceSpeed => ((kappa0 * rho).sqrt(), (kappa0 / rho).sqrt()),
        }
    }

    /// This parametrization back to `(κ₀, ρ)` at one node.
    pub fn to_kappa_rho(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Parametrization::KappaRho => (a, b),
            Parametrization::ImpedanceRho => (a * a / b, b),
            Parametrization::SpeedRho => (b * a * a, b),
            Parametrization::ImpedanceSpeed => (a * b, a / b),
        }
    }

    /// Maps `(∂J/∂κ₀, ∂J/∂ρ)` at `(a, b)` to `(∂J/∂a, ∂J/∂b)` through the
    /// Jacobian of [`Parametrization::to_kappa_rho`].
    pub fn pull_back_gradient(self, a: f64, b: f64, g_kappa: f64, g_rho: f64) -> (f64, f64) {
        match self {
            Parametrization::KappaRho => (g_kappa, g_rho),
            // κ = I²/ρ
            Parametrization::ImpedanceRho => (
                g_kappa * 2.0 * a / b,
                g_rho - g_kappa * a * a / (b * b),
            ),
            // κ = ρc²
            Parametrization::SpeedRho => (g_kappa * 2.0 * b * a, g_rho + g_kappa * a * a),
            // κ = Ic, ρ = I/c
            Parametrization::ImpedanceSpeed => (
                g_kappa * b + g_rho / b,
                g_kappa * a - g_rho * a / (b * b),
            ),
        }
    }
}

/// Converts node arrays between parametrizations through `(κ₀, ρ)`.
pub fn reparametrize(
    a: &[f64],
    b: &[f64],
    from: Parametrization,
    to: Parametrization,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("field lengths differ: {} vs {}", a.len(), b.len())));
    }
    if let Some(node) = (0..a.len()).find(|&i| !(a[i] > 0.0 && b[i] > 0.0)) {
        return Err(Error::domain(format!(
            "nonpositive value at node {node}: ({}, {})",
            a[node], b[node]
        )));
    }
    if from == to {
        return Ok((a.to_vec(), b.to_vec()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (k, r) = from.to_kappa_rho(x, y);
            to.from_kappa_rho(k, r)
        })
        .unzip())
}

/// `sqrt(Σ ((c_true − c_rec)/c_true)²)` over nodes.
pub fn relative_model_error(c_true: &[f64], c_rec: &[f64]) -> Result<f64> {
    if c_true.len() != c_rec.len() {
        return Err(Error::domain(format!(
            "model sizes differ: {} vs {}",
            c_true.len(),
            c_rec.len()
        )));
    }
    if let Some(i) = c_true.iter().position(|&c| !(c > 0.0)) {
        return Err(Error::domain(format!("reference speed {} at node {i}", c_true[i])));
    }
    Ok(c_true
        .iter()
        .zip(c_rec)
        .map(|(t, r)| ((t - r) / t).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// [`relative_model_error`] divided by `sqrt(N)`.
pub fn relative_model_error_rms(c_true: &[f64], c_rec: &[f64]) -> Result<f64> {
    Ok(relative_model_error(c_true, c_rec)? / (c_true.len().max(1) as f64).sqrt())
}

/// Closed interval a tissue value is drawn from; `lo == hi` fixes it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
    fn valid(&self) -> bool {
        self.lo > 0.0 && self.lo <= self.hi && self.hi.is_finite()
    }
}

/// Wave speed, density and Q at the reference frequency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tissue {
    pub c0: Interval,
    pub rho: Interval,
    pub q: Interval,
}

impl Tissue {
    pub const fn fixed(c0: f64, rho: f64, q: f64) -> Self {
        Self {
            c0: Interval::fixed(c0),
            rho: Interval::fixed(rho),
            q: Interval::fixed(q),
        }
    }

    pub const WATER: Tissue = Tissue::fixed(1490.0, 1000.0, 800.0);
    pub const INCLUSION: Tissue = Tissue::fixed(1550.0, 1050.0, 350.0);
    pub const SKIN: Tissue = Tissue {
        c0: Interval::new(1590.0, 1610.0),
        rho: Interval::new(1100.0, 1120.0),
        q: Interval::new(100.0, 120.0),
    };
    pub const BLOOD: Tissue = Tissue {
        c0: Interval::new(1565.0, 1575.0),
        rho: Interval::new(1090.0, 1110.0),
        q: Interval::new(290.0, 310.0),
    };
    pub const FAT: Tissue = Tissue {
        c0: Interval::new(1440.0, 1460.0),
        rho: Interval::new(920.0, 940.0),
        q: Interval::new(410.0, 430.0),
    };
    pub const GLANDULAR: Tissue = Tissue {
        c0: Interval::new(1490.0, 1520.0),
        rho: Interval::new(1030.0, 1050.0),
        q: Interval::new(280.0, 300.0),
    };

    fn valid(&self) -> bool {
        self.c0.valid() && self.rho.valid() && self.q.valid()
    }
}

/// Region of the domain covered by a layer. Coordinates in metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Region {
    /// Horizontal band `z_min ≤ z ≤ z_max`.
    Band { z_min: f64, z_max: f64 },
    Ellipse { cx: f64, cz: f64, ax: f64, az: f64 },
    Annulus { cx: f64, cz: f64, r_in: f64, r_out: f64 },
}

impl Region {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        match *self {
            Region::Band { z_min, z_max } => z >= z_min && z <= z_max,
            Region::Ellipse { cx, cz, ax, az } => {
                ((x - cx) / ax).powi(2) + ((z - cz) / az).powi(2) <= 1.0
            }
            Region::Annulus { cx, cz, r_in, r_out } => {
                let r = (x - cx).hypot(z - cz);
                r >= r_in && r <= r_out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub region: Region,
    pub tissue: Tissue,
}

/// Elliptic inclusion with fixed values, painted over every layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inclusion {
    pub cx: f64,
    pub cz: f64,
    pub ax: f64,
    pub az: f64,
    pub tissue: Tissue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub nx: usize,
    pub nz: usize,
    /// Domain extent in x and z, m.
    pub width: f64,
    pub height: f64,
    pub background: Tissue,
    /// Painted in order, so later layers win where regions overlap.
    pub layers: Vec<Layer>,
    pub inclusion: Option<Inclusion>,
    /// Fraction of each interval's width spanned by the per-node draw;
    /// 0 puts every node at the interval midpoint, 1 uses the whole interval.
    pub perturbation: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Uniform water-filled square.
    pub fn water(n: usize, size: f64) -> Self {
        Self {
            nx: n,
            nz: n,
            width: size,
            height: size,
            background: Tissue::WATER,
            layers: vec![],
            inclusion: None,
            perturbation: 0.0,
            seed: 0,
        }
    }

    /// Circular breast-like section in water: skin ring, fat, glandular
    /// tissue, two vessels and an off-centre inclusion.
    pub fn breast(n: usize, size: f64, seed: u64) -> Self {
        let (c, r) = (0.5 * size, 0.42 * size);
        let layer = |name: &str, region, tissue| Layer {
            name: name.into(),
            region,
            tissue,
        };
        Self {
            nx: n,
            nz: n,
            width: size,
            height: size,
            background: Tissue::WATER,
            layers: vec![
                layer(
                    "skin",
                    Region::Ellipse { cx: c, cz: c, ax: r, az: r },
                    Tissue::SKIN,
                ),
                layer(
                    "fat",
                    Region::Ellipse { cx: c, cz: c, ax: 0.95 * r, az: 0.95 * r },
                    Tissue::FAT,
                ),
                layer(
                    "glandular",
                    Region::Ellipse { cx: c, cz: 1.05 * c, ax: 0.6 * r, az: 0.5 * r },
                    Tissue::GLANDULAR,
                ),
                layer(
                    "blood",
                    Region::Annulus { cx: 0.8 * c, cz: 0.75 * c, r_in: 0.0, r_out: 0.05 * r },
                    Tissue::BLOOD,
                ),
                layer(
                    "blood",
                    Region::Annulus { cx: 1.25 * c, cz: 1.2 * c, r_in: 0.0, r_out: 0.04 * r },
                    Tissue::BLOOD,
                ),
            ],
            inclusion: Some(Inclusion {
                cx: 1.15 * c,
                cz: 0.85 * c,
                ax: 0.12 * r,
                az: 0.09 * r,
                tissue: Tissue::INCLUSION,
            }),
            perturbation: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.nx < 3 || self.nz < 3 {
            return Err(Error::domain("phantom needs at least 3x3 nodes"));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::domain("phantom extent must be positive"));
        }
        if !(0.0..=1.0).contains(&self.perturbation) {
            return Err(Error::domain("perturbation must lie in [0, 1]"));
        }
        if !self.background.valid() || self.layers.iter().any(|l| !l.tissue.valid()) {
            return Err(Error::domain("tissue intervals must be positive and ordered"));
        }
        if let Some(inc) = &self.inclusion {
            let inside = inc.ax > 0.0
                && inc.az > 0.0
                && inc.cx - inc.ax >= 0.0
                && inc.cx + inc.ax <= self.width
                && inc.cz - inc.az >= 0.0
                && inc.cz + inc.az <= self.height;
            if !inside || !inc.tissue.valid() {
                return Err(Error::domain("inclusion must be a valid ellipse inside the domain"));
            }
        }
        Ok(())
    }

    /// Tissue painted at `(x, z)` and a label for reporting.
    pub fn tissue_at(&self, x: f64, z: f64) -> (&str, &Tissue) {
        if let Some(inc) = &self.inclusion {
            let region = Region::Ellipse {
                cx: inc.cx,
                cz: inc.cz,
                ax: inc.ax,
                az: inc.az,
            };
            if region.contains(x, z) {
                return ("inclusion", &inc.tissue);
            }
        }
        self.layers
            .iter()
            .rev()
            .find(|l| l.region.contains(x, z))
            .map(|l| (l.name.as_str(), &l.tissue))
            .unwrap_or(("background", &self.background))
    }
}

/// Realized phantom: the grid plus per-node target Q values.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub grid: MediumGrid,
    pub q: Vec<f64>,
    pub labels: Vec<String>,
}

/// Paints the phantom and calibrates each node's attenuation so that its
/// quality factor at `omega_ref` matches the drawn Q.
pub fn build_phantom(spec: &PhantomSpec, kind: ModelKind, omega_ref: ComplexFrequency) -> Result<Phantom> {
    build_phantom_with(spec, kind, omega_ref, &FixedCoefficients::reference(kind))
}

pub fn build_phantom_with(
    spec: &PhantomSpec,
    kind: ModelKind,
    omega_ref: ComplexFrequency,
    fixed: &FixedCoefficients,
) -> Result<Phantom> {
    spec.validate()?;
    let (nx, nz) = (spec.nx, spec.nz);
    let dx = spec.width / (nx - 1) as f64;
    let dz = spec.height / (nz - 1) as f64;
    let n = nx * nz;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |iv: &Interval| {
        // always consume one draw so the stream does not depend on the values
        let u: f64 = rng.random::<f64>() - 0.5;
        iv.mid() + spec.perturbation * u * (iv.hi - iv.lo)
    };

    let mut kappa0 = Vec::with_capacity(n);
    let mut rho = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for ix in 0..nx {
        for iz in 0..nz {
            let (label, t) = spec.tissue_at(ix as f64 * dx, iz as f64 * dz);
            let (c, r, qq) = (draw(&t.c0), draw(&t.rho), draw(&t.q));
            kappa0.push(r * c * c);
            rho.push(r);
            q.push(qq);
            labels.push(label.to_string());
        }
    }

    // Calibration is per distinct (κ₀, Q) pair; uniform regions hit the cache.
    let mut cache: Vec<((u64, u64), Vec<f64>)> = Vec::new();
    let ncoef = match kind {
        ModelKind::Generalized => {
            return Err(Error::domain("phantoms cannot be calibrated with the generalized model"))
        }
        k => k.coefficient_names().len(),
    };
    let mut coeffs = vec![Vec::with_capacity(n); ncoef];
    for node in 0..n {
        let key = (kappa0[node].to_bits(), q[node].to_bits());
        let c = match cache.iter().find(|(k, _)| *k == key) {
            Some((_, c)) => c.clone(),
            None => {
                let c = if kind == ModelKind::NoAttenuation {
                    vec![]
                } else {
                    calibrate_to_quality(kind, kappa0[node], q[node], omega_ref, fixed)?.coefficients()
                };
                if cache.len() < 64 {
                    cache.push((key, c.clone()));
                }
                c
            }
        };
        for (field, v) in coeffs.iter_mut().zip(c) {
            field.push(v);
        }
    }
    let grid = MediumGrid::new(nx, nz, dx, dz, kappa0, rho, kind, coeffs)?;
    for node in 0..n {
        let kd = evaluate_bulk_modulus(&grid.spec_at(node), grid.kappa0[node], omega_ref)?;
        let c = complex_wave_speed(kd, grid.rho[node])?;
        validate_attenuation(c, omega_ref).map_err(|violation| {
            let (ix, iz) = (node / nz, node % nz);
            Error::Assembly { node, ix, iz, violation }
        })?;
    }
    Ok(Phantom { grid, q, labels })
}
