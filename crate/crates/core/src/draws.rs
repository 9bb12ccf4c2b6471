//! Posterior draws of unit-level treatment effects.
//!
//! Draws are stored row-major: row `s` holds `τ(X_1), …, τ(X_N)` for draw `s`.
//! On disk they use a small binary matrix container (`*.bin`) with a JSON
//! sidecar carrying hyperparameter traces and run metadata.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BRAIDSM1";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HyperDraw {
    pub sigma: f64,
    pub sigma_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DrawsMeta {
    pub model: String,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    /// Multiplier converting the sampler's units to the stored units.
    pub scale: f64,
}

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}×{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, v) in m.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.rows as f64);
        m
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(self.rows as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.cols as u64).to_le_bytes()).map_err(io)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Malformed(format!("{} is not a draws matrix file", path.display())));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(io)?;
        let rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(io)?;
        let cols = u64::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut word).map_err(io)?;
            data.push(f64::from_le_bytes(word));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::Malformed(format!("{} has trailing bytes", path.display())));
        }
        Matrix::new(rows, cols, data)
    }
}

/// Named coefficient draws (one row per retained iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDraws {
    pub names: Vec<String>,
    pub values: Matrix,
}

impl CoefficientDraws {
    pub fn means(&self) -> Vec<f64> {
        self.values.column_means()
    }
}

/// `S` posterior draws of `τ(X_i)` for `N` units.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    tau: Matrix,
    ate: Vec<f64>,
    hyper: Vec<HyperDraw>,
    coefficients: Option<CoefficientDraws>,
    meta: DrawsMeta,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    n_draws: usize,
    n_units: usize,
    meta: DrawsMeta,
    hyper: Vec<HyperDraw>,
    coefficient_names: Option<Vec<String>>,
}

impl PosteriorDraws {
    pub fn new(tau: Matrix, hyper: Vec<HyperDraw>, meta: DrawsMeta) -> Result<Self> {
        if tau.rows < 2 {
            return Err(Error::invalid("at least 2 posterior draws are required"));
        }
        if tau.cols == 0 {
            return Err(Error::invalid("posterior draws cover no units"));
        }
        if tau.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("posterior draws contain non-finite values"));
        }
        if !hyper.is_empty() && hyper.len() != tau.rows {
            return Err(Error::invalid("hyperparameter trace length mismatch"));
        }
        let ate = (0..tau.rows)
            .map(|s| tau.row(s).iter().sum::<f64>() / tau.cols as f64)
            .collect();
        Ok(PosteriorDraws {
            tau,
            ate,
            hyper,
            coefficients: None,
            meta,
        })
    }

    /// Convenience constructor from per-draw rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged draw rows"));
        }
        let tau = Matrix::new(rows.len(), cols, rows.concat())?;
        Self::new(tau, Vec::new(), DrawsMeta {
            scale: 1.0,
            ..DrawsMeta::default()
        })
    }

    pub fn with_coefficients(mut self, coefficients: CoefficientDraws) -> Result<Self> {
        if coefficients.values.rows != self.n_draws() {
            return Err(Error::invalid("coefficient draws length mismatch"));
        }
        self.coefficients = Some(coefficients);
        Ok(self)
    }

    pub fn n_draws(&self) -> usize {
        self.tau.rows
    }

    pub fn n_units(&self) -> usize {
        self.tau.cols
    }

    pub fn tau(&self) -> &Matrix {
        &self.tau
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        self.tau.row(s)
    }

    /// `τ(𝒳)` per draw: the row means of the draw matrix.
    pub fn ate(&self) -> &[f64] {
        &self.ate
    }

    pub fn hyper(&self) -> &[HyperDraw] {
        &self.hyper
    }

    pub fn coefficients(&self) -> Option<&CoefficientDraws> {
        self.coefficients.as_ref()
    }

    pub fn meta(&self) -> &DrawsMeta {
        &self.meta
    }

    /// Posterior mean `τ̂(X_i)` for every unit.
    pub fn posterior_mean(&self) -> Vec<f64> {
        self.tau.column_means()
    }

    /// Draw `s` of unit `i`.
    #[inline]
    pub fn get(&self, s: usize, i: usize) -> f64 {
        self.tau.get(s, i)
    }

    /// Multiply effects (and noise scales) by `c`, e.g. to return to outcome units.
    pub fn rescale(&self, c: f64) -> Self {
        let tau = Matrix {
            data: self.tau.data.iter().map(|v| v * c).collect(),
            ..self.tau.clone()
        };
        PosteriorDraws {
            ate: self.ate.iter().map(|v| v * c).collect(),
            hyper: self
                .hyper
                .iter()
                .map(|h| HyperDraw {
                    sigma: h.sigma * c.abs(),
                    sigma_tau: h.sigma_tau * c.abs(),
                })
                .collect(),
            coefficients: self.coefficients.clone(),
            meta: DrawsMeta {
                scale: self.meta.scale * c,
                ..self.meta.clone()
            },
            tau,
        }
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf, PathBuf) {
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        (with(".bin"), with(".json"), with(".coef.bin"))
    }

    /// Write `<stem>.bin`, `<stem>.json` and, when present, `<stem>.coef.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bin, json, coef) = Self::paths(stem);
        self.tau.write_binary(&bin)?;
        if let Some(c) = &self.coefficients {
            c.values.write_binary(&coef)?;
        }
        let sidecar = Sidecar {
            n_draws: self.n_draws(),
            n_units: self.n_units(),
            meta: self.meta.clone(),
            hyper: self.hyper.clone(),
            coefficient_names: self.coefficients.as_ref().map(|c| c.names.clone()),
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Malformed(e.to_string()))?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (bin, json, coef) = Self::paths(stem);
        let tau = Matrix::read_binary(&bin)?;
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Malformed(e.to_string()))?;
        if sidecar.n_draws != tau.rows || sidecar.n_units != tau.cols {
            return Err(Error::Malformed("draws sidecar does not match matrix shape".into()));
        }
        let draws = PosteriorDraws::new(tau, sidecar.hyper, sidecar.meta)?;
        match sidecar.coefficient_names {
            Some(names) => {
                let values = Matrix::read_binary(&coef)?;
                if values.cols != names.len() {
                    return Err(Error::Malformed("coefficient names do not match matrix".into()));
                }
                draws.with_coefficients(CoefficientDraws { names, values })
            }
            None => Ok(draws),
        }
    }

    /// Delimited text export: one row per draw with `ate`, hyperparameters and
    /// every unit's effect.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed(e.to_string()))?;
        let mut header = vec!["draw".to_string(), "ate".into(), "sigma".into(), "sigma_tau".into()];
        header.extend((1..=self.n_units()).map(|i| format!("tau_{i}")));
        let err = |e: csv::Error| Error::Malformed(e.to_string());
        w.write_record(&header).map_err(err)?;
        for s in 0..self.n_draws() {
            let h = self.hyper.get(s).copied().unwrap_or_default();
            let mut rec = vec![s.to_string(), self.ate[s].to_string(), h.sigma.to_string(), h.sigma_tau.to_string()];
            rec.extend(self.row(s).iter().map(f64::to_string));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
