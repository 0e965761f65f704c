//! Complex receiver data per frequency and its CSV form.
//!
//! The CSV header is `source_id,receiver_id,omega_r,omega_i,p_real,p_imag`.
//! Floats are written with 17 significant digits so every `f64` survives a
//! write/read cycle unchanged.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::attenuation::ComplexFrequency;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "source_id,receiver_id,omega_r,omega_i,p_real,p_imag";

/// Receiver values for every source at one frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyData {
    pub omega: ComplexFrequency,
    pub source_ids: Vec<u32>,
    pub n_receivers: usize,
    /// Source-major: value for source `s`, receiver `r` is at `s·n_receivers + r`.
    pub values: Vec<Complex64>,
}

impl FrequencyData {
    pub fn new(
        omega: ComplexFrequency,
        source_ids: Vec<u32>,
        n_receivers: usize,
        values: Vec<Complex64>,
    ) -> Result<Self> {
        if values.len() != source_ids.len() * n_receivers {
            return Err(Error::domain(format!(
                "{} values for {} sources x {n_receivers} receivers",
                values.len(),
                source_ids.len()
            )));
        }
        Ok(Self {
            omega,
            source_ids,
            n_receivers,
            values,
        })
    }

    pub fn zeros(omega: ComplexFrequency, source_ids: Vec<u32>, n_receivers: usize) -> Self {
        let n = source_ids.len() * n_receivers;
        Self {
            omega,
            source_ids,
            n_receivers,
            values: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn n_sources(&self) -> usize {
        self.source_ids.len()
    }

    /// Receiver values of the `s`-th source (by position, not id).
    pub fn trace(&self, s: usize) -> &[Complex64] {
        &self.values[s * self.n_receivers..(s + 1) * self.n_receivers]
    }

    pub fn trace_mut(&mut self, s: usize) -> &mut [Complex64] {
        let n = self.n_receivers;
        &mut self.values[s * n..(s + 1) * n]
    }

    /// Position of the source with this id.
    pub fn source_index(&self, id: u32) -> Option<usize> {
        self.source_ids.iter().position(|&s| s == id)
    }

    /// True when both blocks share frequency, source ids and receiver count.
    pub fn congruent(&self, other: &FrequencyData) -> bool {
        self.omega == other.omega
            && self.source_ids == other.source_ids
            && self.n_receivers == other.n_receivers
    }

    /// `self − other`, element-wise.
    pub fn residual(&self, other: &FrequencyData) -> Result<FrequencyData> {
        if !self.congruent(other) {
            return Err(Error::domain("residual of data blocks with different index sets"));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(FrequencyData {
            values,
            ..self.clone()
        })
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Data blocks in acquisition order, one per frequency.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSet {
    pub blocks: Vec<FrequencyData>,
}

impl DataSet {
    pub fn new(blocks: Vec<FrequencyData>) -> Self {
        Self { blocks }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(|b| b.values.is_empty())
    }

    pub fn n_values(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    /// Block at exactly this frequency.
    pub fn block(&self, omega: ComplexFrequency) -> Option<&FrequencyData> {
        self.blocks.iter().find(|b| b.omega == omega)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut line = String::with_capacity(128);
        writeln!(w, "{CSV_HEADER}")?;
        for b in &self.blocks {
            for (s, &id) in b.source_ids.iter().enumerate() {
                for (r, v) in b.trace(s).iter().enumerate() {
                    line.clear();
                    write!(
                        line,
                        "{id},{r},{:.16e},{:.16e},{:.16e},{:.16e}",
                        b.omega.omega_r(),
                        b.omega.omega_i(),
                        v.re,
                        v.im
                    )
                    .expect("writing to a String");
                    writeln!(w, "{line}")?;
                }
            }
        }
        Ok(())
    }

    /// Parses CSV rows back into blocks. Rows may come in any order, but every
    /// frequency must cover the same rectangular (source, receiver) set.
    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        struct Pending {
            omega: ComplexFrequency,
            rows: Vec<(u32, usize, Complex64)>,
        }
        let mut pending: Vec<Pending> = Vec::new();
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty data file".into()))??;
        if header.trim() != CSV_HEADER {
            return Err(Error::Format(format!("unexpected header {header:?}")));
        }
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 2));
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 6 {
                return Err(bad("expected 6 columns"));
            }
            let sid: u32 = cols[0].parse().map_err(|_| bad("bad source_id"))?;
            let rid: usize = cols[1].parse().map_err(|_| bad("bad receiver_id"))?;
            let mut f = [0.0; 4];
            for (k, slot) in f.iter_mut().enumerate() {
                *slot = cols[k + 2].parse().map_err(|_| bad("bad number"))?;
            }
            let omega = ComplexFrequency::new(f[0], f[1]).map_err(|_| bad("invalid frequency"))?;
            let value = Complex64::new(f[2], f[3]);
            match pending.iter_mut().find(|p| p.omega == omega) {
                Some(p) => p.rows.push((sid, rid, value)),
                None => pending.push(Pending {
                    omega,
                    rows: vec![(sid, rid, value)],
                }),
            }
        }
        let mut blocks = Vec::with_capacity(pending.len());
        for p in pending {
            let mut source_ids: Vec<u32> = Vec::new();
            for &(s, _, _) in &p.rows {
                if !source_ids.contains(&s) {
                    source_ids.push(s);
                }
            }
            let n_receivers = p.rows.iter().map(|&(_, r, _)| r + 1).max().unwrap_or(0);
            let n = source_ids.len() * n_receivers;
            if p.rows.len() != n {
                return Err(Error::Format(format!(
                    "frequency ({}, {}) has {} rows, expected {} sources x {n_receivers} receivers",
                    p.omega.omega_r(),
                    p.omega.omega_i(),
                    p.rows.len(),
                    source_ids.len()
                )));
            }
            let mut values = vec![None; n];
            for (s, r, v) in p.rows {
                let si = source_ids.iter().position(|&x| x == s).unwrap();
                let slot = &mut values[si * n_receivers + r];
                if slot.is_some() {
                    return Err(Error::Format(format!("duplicate row for source {s}, receiver {r}")));
                }
                *slot = Some(v);
            }
            let values = values.into_iter().map(|v| v.unwrap()).collect();
            blocks.push(FrequencyData {
                omega: p.omega,
                source_ids,
                n_receivers,
                values,
            });
        }
        Ok(Self { blocks })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_csv(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}
