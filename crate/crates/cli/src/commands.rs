use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use viscotomo::attenuation::{
    calibrate_to_quality, dispersion_table, quality_factor, reference_calibration, AttenuationSpec,
    FixedCoefficients,
};
use viscotomo::inversion::{frequency_schedule, invert as run_inversion, InversionConfig, InversionHistory};
use viscotomo::medium::{
    build_phantom, relative_model_error, relative_model_error_rms, Inclusion, Interval, Layer, PhantomSpec, Region,
    Tissue,
};
use viscotomo::signal::add_white_noise;
use viscotomo::solver::{forward_map, Acquisition, BoundaryCondition, BoundarySpec, Excitation, Source};
use viscotomo::{Complex64, ComplexFrequency, DataSet, Error, MediumGrid, ModelKind, Parametrization};

use crate::config::{Config, ConfigError, Section};

/// Command failure, carrying its process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Calibration(String),
    Solver(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Calibration(_) => 3,
            Failure::Solver(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration: {m}"),
            Failure::Calibration(m) => write!(f, "calibration: {m}"),
            Failure::Solver(m) => write!(f, "solver: {m}"),
            Failure::Io(m) => write!(f, "i/o: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Calibration { .. } => Failure::Calibration(msg),
            Error::Assembly { .. } | Error::Factorization(_) | Error::Validity(_) => Failure::Solver(msg),
            Error::Io(_) => Failure::Io(msg),
            Error::Constraint { .. } | Error::Domain(_) | Error::Contract(_) | Error::Format(_) => {
                Failure::Config(msg)
            }
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// Command-line flags that take precedence over the config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub snr_db: Option<f64>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never sees a partial artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| Failure::Io(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| config_err(format!("output path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io)
}

fn save_grid(path: &Path, grid: &MediumGrid) -> Result<()> {
    let mut bytes = Vec::new();
    grid.write_to(&mut bytes)?;
    write_atomic(path, &bytes)
}

fn save_data(path: &Path, data: &DataSet) -> Result<()> {
    let mut bytes = Vec::new();
    data.write_csv(&mut bytes)?;
    write_atomic(path, &bytes)
}

fn load_grid(path: &Path) -> Result<MediumGrid> {
    MediumGrid::load(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<DataSet> {
    DataSet::load_csv(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// `--out` if given, else `[output] path`.
fn output_path(cfg: &Config, ov: &Overrides) -> Result<PathBuf> {
    if let Some(p) = &ov.out {
        if let Some(s) = cfg.section("output")? {
            s.string("path");
        }
        return Ok(p.clone());
    }
    let s = cfg
        .section("output")?
        .ok_or_else(|| config_err("no output path: give --out or [output] path"))?;
    Ok(cfg.path(&s.require_string("path")?))
}

/// Shortest decimal that reads naturally in a summary line.
fn short(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.1}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

fn model_kind(name: &str) -> Result<ModelKind> {
    ModelKind::from_name(name).ok_or_else(|| {
        let names: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        config_err(format!("unknown attenuation model {name:?}; expected one of {}", names.join(", ")))
    })
}

fn hz(freq: f64) -> Result<ComplexFrequency> {
    ComplexFrequency::from_hz(freq, 0.0).map_err(|_| config_err(format!("invalid frequency {freq} Hz")))
}

/// `nodes` or `nx`/`nz`, and `size` or `width`/`height`.
fn geometry(s: &Section) -> Result<(usize, usize, f64, f64)> {
    let nodes: Option<usize> = s.get("nodes")?;
    let size: Option<f64> = s.get("size")?;
    let pick = |v: Option<usize>, key: &str| -> Result<usize> {
        match (s.get::<usize>(key)?, v) {
            (Some(n), _) | (None, Some(n)) => Ok(n),
            (None, None) => Err(config_err(format!("[{}] needs `nodes` or `{key}`", s.name))),
        }
    };
    let pick_f = |v: Option<f64>, key: &str| -> Result<f64> {
        match (s.get::<f64>(key)?, v) {
            (Some(n), _) | (None, Some(n)) => Ok(n),
            (None, None) => Err(config_err(format!("[{}] needs `size` or `{key}`", s.name))),
        }
    };
    Ok((pick(nodes, "nx")?, pick(nodes, "nz")?, pick_f(size, "width")?, pick_f(size, "height")?))
}

fn interval(s: &Section, key: &str, default: Option<Interval>) -> Result<Interval> {
    match (s.range(key)?, default) {
        (Some((lo, hi)), _) => Ok(Interval::new(lo, hi)),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(config_err(format!("[{}] needs `{key}`", s.name))),
    }
}

fn tissue(s: &Section, default: Option<Tissue>) -> Result<Tissue> {
    Ok(Tissue {
        c0: interval(s, "c0", default.map(|t| t.c0))?,
        rho: interval(s, "rho", default.map(|t| t.rho))?,
        q: interval(s, "q", default.map(|t| t.q))?,
    })
}

fn phantom_spec(cfg: &Config, seed: Option<u64>) -> Result<(PhantomSpec, ModelKind, ComplexFrequency)> {
    let s = cfg.require("phantom")?;
    let (nx, nz, width, height) = geometry(s)?;
    let preset = s.string("preset").unwrap_or_else(|| "breast".into());
    let seed = match seed {
        Some(v) => {
            s.string("seed");
            v
        }
        None => s.get_or("seed", 0u64)?,
    };
    let mut spec = match preset.as_str() {
        "breast" => {
            if nx != nz || width != height {
                return Err(config_err("the breast preset needs a square domain"));
            }
            PhantomSpec::breast(nx, width, seed)
        }
        "water" => PhantomSpec {
            nx,
            nz,
            width,
            height,
            seed,
            ..PhantomSpec::water(nx, width)
        },
        other => return Err(config_err(format!("unknown phantom preset {other:?} (breast or water)"))),
    };
    if let Some(p) = s.get("perturbation")? {
        spec.perturbation = p;
    }
    let kind = model_kind(&s.string("model").unwrap_or_else(|| "kolsky-futterman".into()))?;
    let omega_ref = hz(s.get_or("reference_hz", 300e3)?)?;

    if let Some(b) = cfg.section("background")? {
        spec.background = tissue(b, Some(spec.background))?;
    }
    for l in cfg.all("layer") {
        let name = l.require_string("name")?;
        let shape = l.require_string("shape")?;
        let region = match shape.as_str() {
            "band" => Region::Band {
                z_min: l.require("z_min")?,
                z_max: l.require("z_max")?,
            },
            "ellipse" => Region::Ellipse {
                cx: l.require("cx")?,
                cz: l.require("cz")?,
                ax: l.require("ax")?,
                az: l.require("az")?,
            },
            "annulus" => Region::Annulus {
                cx: l.require("cx")?,
                cz: l.require("cz")?,
                r_in: l.get_or("r_in", 0.0)?,
                r_out: l.require("r_out")?,
            },
            other => return Err(config_err(format!("unknown layer shape {other:?} (band, ellipse, annulus)"))),
        };
        spec.layers.push(Layer {
            name,
            region,
            tissue: tissue(l, None)?,
        });
    }
    if let Some(i) = cfg.section("inclusion")? {
        if !i.get_or("enabled", true)? {
            spec.inclusion = None;
        } else {
            let base = spec.inclusion;
            let get = |key: &str, d: Option<f64>| -> Result<f64> {
                match (i.get::<f64>(key)?, d) {
                    (Some(v), _) | (None, Some(v)) => Ok(v),
                    (None, None) => Err(config_err(format!("[inclusion] needs `{key}`"))),
                }
            };
            spec.inclusion = Some(Inclusion {
                cx: get("cx", base.map(|b| b.cx))?,
                cz: get("cz", base.map(|b| b.cz))?,
                ax: get("ax", base.map(|b| b.ax))?,
                az: get("az", base.map(|b| b.az))?,
                tissue: tissue(i, Some(base.map_or(Tissue::INCLUSION, |b| b.tissue)))?,
            });
        }
    }
    Ok((spec, kind, omega_ref))
}

pub fn phantom(cfg: &Config, ov: &Overrides) -> Result<()> {
    let (spec, kind, omega_ref) = phantom_spec(cfg, ov.seed)?;
    let out = output_path(cfg, ov)?;
    cfg.finish(&["phantom", "background", "layer", "inclusion", "output"])?;

    let phantom = build_phantom(&spec, kind, omega_ref).map_err(|e| match e {
        Error::Calibration { .. } | Error::Assembly { .. } | Error::Validity(_) | Error::Constraint { .. } => {
            Failure::Calibration(e.to_string())
        }
        e => e.into(),
    })?;
    let grid = &phantom.grid;
    save_grid(&out, grid)?;

    // region name -> (nodes, Σc0, Σρ, ΣQ) in first-appearance order
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (usize, f64, f64, f64)> = BTreeMap::new();
    let speed = grid.speed();
    for (node, label) in phantom.labels.iter().enumerate() {
        let q = quality_factor(&grid.spec_at(node), grid.kappa0()[node], omega_ref)?;
        let e = sums.entry(label.clone()).or_insert_with(|| {
            order.push(label.clone());
            (0, 0.0, 0.0, 0.0)
        });
        e.0 += 1;
        e.1 += speed[node];
        e.2 += grid.rho()[node];
        e.3 += q;
    }
    println!(
        "phantom {}x{} nodes, {} attenuation, Q at {} kHz, wrote {}",
        grid.nx(),
        grid.nz(),
        kind.name(),
        short(omega_ref.freq_hz() / 1e3),
        out.display()
    );
    for label in &order {
        let (n, c, r, q) = sums[label];
        let m = n as f64;
        println!("{label}: nodes={n} c0={} rho={} Q={}", short(c / m), short(r / m), short(q / m));
    }
    Ok(())
}

fn acquisition(cfg: &Config, grid: &MediumGrid) -> Result<Acquisition> {
    let s = cfg.require("acquisition")?;
    let layout = s.string("layout").unwrap_or_else(|| "ring".into());
    let acq = match layout.as_str() {
        "ring" => {
            let cx = s.get_or("center_x", 0.5 * grid.width())?;
            let cz = s.get_or("center_z", 0.5 * grid.height())?;
            let radius: f64 = s.require("radius")?;
            let n_src: usize = s.require("sources")?;
            let n_rec: usize = s.require("receivers")?;
            Acquisition::ring(cx, cz, radius, n_src, n_rec)?
        }
        "points" => {
            let pairs = |key: &str| -> Result<Vec<(f64, f64)>> {
                let text = s.require_string(key)?;
                text.split(';')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| {
                        let (x, z) = p
                            .split_once(' ')
                            .map(|(a, b)| (a.trim().parse::<f64>(), b.trim().parse::<f64>()))
                            .ok_or_else(|| config_err(format!("`{key}`: expected `x z` pairs separated by `;`")))?;
                        match (x, z) {
                            (Ok(x), Ok(z)) => Ok((x, z)),
                            _ => Err(config_err(format!("`{key}`: cannot parse {p:?}"))),
                        }
                    })
                    .collect()
            };
            let sources = pairs("source_points")?
                .into_iter()
                .enumerate()
                .map(|(k, (x, z))| Source {
                    id: k as u32,
                    excitation: Excitation::Point { x, z },
                })
                .collect();
            Acquisition::new(sources, pairs("receiver_points")?)?
        }
        other => return Err(config_err(format!("unknown acquisition layout {other:?} (ring or points)"))),
    };
    Ok(acq)
}

fn amplitude(cfg: &Config) -> Result<Complex64> {
    let s = cfg.require("acquisition")?;
    Ok(Complex64::new(s.get_or("amplitude", 1.0)?, s.get_or("amplitude_imag", 0.0)?))
}

/// Ascending `omega_r` list (rad/s) and descending `omega_i` list (1/s).
fn frequencies(cfg: &Config) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = cfg.require("frequencies")?;
    let hz: Vec<f64> = s
        .list("hz")?
        .ok_or_else(|| config_err("[frequencies] needs `hz`"))?;
    let damping: Vec<f64> = s.list("damping")?.unwrap_or_default();
    let damping = if damping.is_empty() { vec![0.0] } else { damping };
    let omega_r: Vec<f64> = hz.iter().map(|f| 2.0 * PI * f).collect();
    frequency_schedule(&omega_r, &damping).map_err(|e| config_err(format!("[frequencies]: {e}")))?;
    Ok((omega_r, damping))
}

fn boundaries(cfg: &Config) -> Result<BoundarySpec> {
    let parse = |v: String| match v.as_str() {
        "absorbing" => Ok(BoundaryCondition::Absorbing),
        "wall" => Ok(BoundaryCondition::Wall),
        other => Err(config_err(format!("unknown boundary condition {other:?} (absorbing or wall)"))),
    };
    let Some(s) = cfg.section("boundary")? else {
        return Ok(BoundarySpec::absorbing());
    };
    let all = match s.string("all") {
        Some(v) => parse(v)?,
        None => BoundaryCondition::Absorbing,
    };
    let side = |key: &str| -> Result<BoundaryCondition> { s.string(key).map_or(Ok(all), parse) };
    Ok(BoundarySpec {
        left: side("left")?,
        right: side("right")?,
        top: side("top")?,
        bottom: side("bottom")?,
    })
}

pub fn forward(cfg: &Config, ov: &Overrides) -> Result<()> {
    let grid_path = cfg.existing(&cfg.require("medium")?.require_string("grid")?)?;
    let grid = load_grid(&grid_path)?;
    let acq = acquisition(cfg, &grid)?;
    let amp = amplitude(cfg)?;
    let (omega_r, omega_i) = frequencies(cfg)?;
    let bcs = boundaries(cfg)?;
    let out = output_path(cfg, ov)?;
    cfg.finish(&["medium", "acquisition", "frequencies", "boundary", "output"])?;

    let schedule = frequency_schedule(&omega_r, &omega_i)?;
    let mut blocks = Vec::with_capacity(schedule.len());
    for w in schedule {
        blocks.push(forward_map(&grid, w, &acq, bcs, amp)?.data);
    }
    let data = DataSet::new(blocks);
    save_data(&out, &data)?;
    println!(
        "forward: {} sources x {} receivers x {} frequencies = {} rows, wrote {}",
        acq.sources.len(),
        acq.receivers.len(),
        data.blocks.len(),
        data.n_values(),
        out.display()
    );
    Ok(())
}

pub fn noise(cfg: &Config, ov: &Overrides) -> Result<()> {
    let s = cfg.require("noise")?;
    let input = cfg.existing(&s.require_string("input")?)?;
    let snr: f64 = match ov.snr_db {
        Some(v) => {
            s.string("snr_db");
            v
        }
        None => s.require("snr_db")?,
    };
    let seed: u64 = match ov.seed {
        Some(v) => {
            s.string("seed");
            v
        }
        None => s.get_or("seed", 0)?,
    };
    let out = output_path(cfg, ov)?;
    cfg.finish(&["noise", "output"])?;

    let clean = load_data(&input)?;
    let noisy = add_white_noise(&clean, snr, seed)?;
    save_data(&out, &noisy)?;
    println!("noise: {} values at {snr} dB (seed {seed}), wrote {}", noisy.n_values(), out.display());
    Ok(())
}

/// Bounds used when the config gives none, by physical field.
fn default_bounds(field: &str) -> (f64, f64) {
    match field {
        "speed" => (1300.0, 1800.0),
        "rho" => (1.0, 1e5),
        "kappa0" => (1e8, 1e11),
        _ => (1e5, 1e8),
    }
}

fn initial_model(cfg: &Config) -> Result<MediumGrid> {
    let s = cfg.require("initial")?;
    if let Some(path) = s.string("grid") {
        return load_grid(&cfg.existing(&path)?);
    }
    let (nx, nz, width, height) = geometry(s)?;
    if nx < 2 || nz < 2 {
        return Err(config_err("[initial] needs at least 2 nodes per axis"));
    }
    let c0: f64 = s.require("c0")?;
    let rho: f64 = s.require("rho")?;
    let kind = model_kind(&s.string("model").unwrap_or_else(|| "no-attenuation".into()))?;
    let kappa0 = rho * c0 * c0;
    let spec = match kind {
        ModelKind::NoAttenuation => AttenuationSpec::NoAttenuation,
        ModelKind::Generalized => return Err(config_err("[initial] cannot calibrate the generalized model")),
        k => {
            let q: f64 = s.require("q")?;
            let omega_ref = hz(s.get_or("reference_hz", 300e3)?)?;
            calibrate_to_quality(k, kappa0, q, omega_ref, &FixedCoefficients::reference(k))?
        }
    };
    let dx = width / (nx - 1) as f64;
    let dz = height / (nz - 1) as f64;
    Ok(MediumGrid::uniform(nx, nz, dx, dz, kappa0, rho, &spec)?)
}

fn inversion_config(cfg: &Config, omega_r: Vec<f64>, omega_i: Vec<f64>) -> Result<InversionConfig> {
    let s = cfg.require("inversion")?;
    let iters: usize = s.require("iterations")?;
    let mut c = InversionConfig::speed_only(omega_r, omega_i, iters);
    if let Some(name) = s.string("parametrization") {
        c.parametrization = Parametrization::from_name(&name).ok_or_else(|| {
            config_err(format!(
                "unknown parametrization {name:?} (kappa-rho, impedance-rho, speed-rho, impedance-speed)"
            ))
        })?;
    }
    let names = c.parametrization.field_names();
    c.invert_fields = match s.string("invert").as_deref() {
        None | Some("first") => [true, false],
        Some("second") => [false, true],
        Some("both") => [true, true],
        Some(other) => return Err(config_err(format!("`invert = {other}`: expected first, second or both"))),
    };
    for (k, key) in ["first_bounds", "second_bounds"].iter().enumerate() {
        c.bounds[k] = s.range(key)?.unwrap_or_else(|| default_bounds(names[k]));
    }
    let ls = &mut c.line_search;
    ls.initial_relative_step = s.get_or("initial_step", ls.initial_relative_step)?;
    ls.max_relative_step = s.get_or("max_step", ls.max_relative_step)?;
    ls.backtrack = s.get_or("backtrack", ls.backtrack)?;
    ls.armijo = s.get_or("armijo", ls.armijo)?;
    ls.max_backtracks = s.get_or("max_backtracks", ls.max_backtracks)?;
    c.max_failures = s.get_or("max_failures", c.max_failures)?;
    c.misfit_rtol = s.get_or("misfit_rtol", c.misfit_rtol)?;
    Ok(c)
}

fn history_csv(h: &InversionHistory) -> String {
    let mut out = String::from("iteration,omega_r,omega_i,misfit,step,grad_norm,accepted\n");
    for r in &h.records {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
            r.iteration,
            r.omega.omega_r(),
            r.omega.omega_i(),
            r.misfit,
            r.step,
            r.grad_norm,
            r.accepted
        ));
    }
    out
}

pub fn invert(cfg: &Config, ov: &Overrides) -> Result<()> {
    let data_path = cfg.existing(&cfg.require("data")?.require_string("path")?)?;
    let initial = initial_model(cfg)?;
    let acq = acquisition(cfg, &initial)?;
    let amp = amplitude(cfg)?;
    let (omega_r, omega_i) = frequencies(cfg)?;
    let bcs = boundaries(cfg)?;
    let mut config = inversion_config(cfg, omega_r, omega_i)?;
    config.amplitude = amp;
    let out = output_path(cfg, ov)?;
    let history_path = match cfg.section("output")?.and_then(|s| s.string("history")) {
        Some(p) => cfg.path(&p),
        None => {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".history.csv");
            out.with_file_name(name)
        }
    };
    let truth = match &ov.truth {
        Some(p) if !p.is_file() => return Err(config_err(format!("truth grid {} does not exist", p.display()))),
        Some(p) => Some(load_grid(p)?),
        None => None,
    };
    cfg.finish(&["data", "initial", "acquisition", "frequencies", "boundary", "inversion", "output"])?;

    let obs = load_data(&data_path)?;
    let (rec, history) = run_inversion(&config, &obs, &initial, &acq, bcs)?;
    save_grid(&out, &rec)?;
    write_atomic(&history_path, history_csv(&history).as_bytes())?;

    for (k, b) in history.blocks.iter().enumerate() {
        let reduction = if b.initial_misfit > 0.0 { 1.0 - b.final_misfit / b.initial_misfit } else { 0.0 };
        println!(
            "block {k}: {} kHz, omega_i {}: misfit {:.6e} -> {:.6e} ({:.1}% reduction)",
            short(b.omega.freq_hz() / 1e3),
            b.omega.omega_i(),
            b.initial_misfit,
            b.final_misfit,
            100.0 * reduction
        );
        if let Some(why) = &b.early_stop {
            eprintln!("note: block {k} stopped early: {why}");
        }
    }
    println!("wrote {} and {}", out.display(), history_path.display());
    if let Some(t) = truth {
        if t.len() != rec.len() {
            return Err(config_err("truth grid and reconstruction have different sizes"));
        }
        let e0 = relative_model_error(&t.speed(), &initial.speed())?;
        let e = relative_model_error(&t.speed(), &rec.speed())?;
        println!("relative_model_error initial={e0:.6e} final={e:.6e}");
    }
    Ok(())
}

pub fn dispersion(cfg: &Config, ov: &Overrides) -> Result<()> {
    let (f_min, f_max, step, kappa0, rho): (f64, f64, f64, f64, f64) = match cfg.section("dispersion")? {
        Some(s) => (
            s.get_or("f_min_hz", 50e3)?,
            s.get_or("f_max_hz", 800e3)?,
            s.get_or("f_step_hz", 1e3)?,
            s.get_or("kappa0", 2.25e9)?,
            s.get_or("rho", 1000.0)?,
        ),
        None => (50e3, 800e3, 1e3, 2.25e9, 1000.0),
    };
    if !(f_min > 0.0 && f_max >= f_min && step > 0.0) {
        return Err(config_err("dispersion sweep needs 0 < f_min_hz <= f_max_hz and f_step_hz > 0"));
    }
    let mut models: Vec<AttenuationSpec> = Vec::new();
    for m in cfg.all("model") {
        let kind = model_kind(&m.require_string("name")?)?;
        let names = kind.coefficient_names();
        let spec = if m.has("q") {
            let q: f64 = m.require("q")?;
            let omega_ref = hz(m.get_or("reference_hz", 300e3)?)?;
            calibrate_to_quality(kind, kappa0, q, omega_ref, &FixedCoefficients::reference(kind))?
        } else if kind == ModelKind::Generalized {
            let w: Vec<f64> = m.list("omega_l")?.unwrap_or_default();
            let b: Vec<f64> = m.list("b_l")?.unwrap_or_default();
            if w.len() != b.len() {
                return Err(config_err("generalized model needs equally long `omega_l` and `b_l` lists"));
            }
            let flat: Vec<f64> = w.iter().zip(&b).flat_map(|(w, b)| [*w, *b]).collect();
            AttenuationSpec::from_coefficients(kind, &flat)?
        } else {
            let c = names
                .iter()
                .map(|n| m.require::<f64>(n))
                .collect::<std::result::Result<Vec<f64>, _>>()?;
            AttenuationSpec::from_coefficients(kind, &c)?
        };
        models.push(spec);
    }
    if models.is_empty() {
        models = ModelKind::ATTENUATING.iter().map(|&k| reference_calibration(k)).collect();
    }
    let out = output_path(cfg, ov)?;
    cfg.finish(&["dispersion", "model", "output"])?;

    let n = ((f_max - f_min) / step + 1e-9).floor() as usize + 1;
    let freqs: Vec<f64> = (0..n).map(|k| f_min + step * k as f64).collect();
    let mut text = String::from("model,freq_hz,Q\n");
    for spec in &models {
        let rows = dispersion_table(spec, kappa0, rho, &freqs).map_err(|e| match e {
            Error::Calibration { .. } => Failure::Calibration(e.to_string()),
            Error::Validity(_) | Error::Constraint { .. } | Error::Domain(_) => Failure::Calibration(format!(
                "{}: {e}",
                spec.kind().name()
            )),
            e => e.into(),
        })?;
        for r in rows {
            text.push_str(&format!("{},{},{:.16e}\n", spec.kind().name(), r.freq_hz, r.q));
        }
    }
    write_atomic(&out, text.as_bytes())?;
    println!("dispersion: {} models x {n} frequencies, wrote {}", models.len(), out.display());
    Ok(())
}

pub fn error(cfg: &Config, ov: &Overrides) -> Result<()> {
    let s = cfg.require("error")?;
    let truth = match &ov.truth {
        Some(p) => {
            s.string("truth");
            if !p.is_file() {
                return Err(config_err(format!("truth grid {} does not exist", p.display())));
            }
            p.clone()
        }
        None => cfg.existing(&s.require_string("truth")?)?,
    };
    let rec = cfg.existing(&s.require_string("reconstruction")?)?;
    let out = match (&ov.out, cfg.section("output")?) {
        (None, None) => None,
        _ => Some(output_path(cfg, ov)?),
    };
    cfg.finish(&["error", "output"])?;

    let (t, r) = (load_grid(&truth)?, load_grid(&rec)?);
    if t.nx() != r.nx() || t.nz() != r.nz() {
        return Err(config_err(format!(
            "grid shapes differ: {}x{} vs {}x{}",
            t.nx(),
            t.nz(),
            r.nx(),
            r.nz()
        )));
    }
    let e = relative_model_error(&t.speed(), &r.speed())?;
    let rms = relative_model_error_rms(&t.speed(), &r.speed())?;
    println!("relative_model_error={e:.6e} rms={rms:.6e}");
    if let Some(out) = out {
        let text = format!("metric,value\nrelative_model_error,{e:.16e}\nrelative_model_error_rms,{rms:.16e}\n");
        write_atomic(&out, text.as_bytes())?;
    }
    Ok(())
}
