//! JSON-lines draw files.
//!
//! The first line is a [`DrawFileHeader`]. Every following line is one
//! [`DrawRecord`] with fields in the order `chain, iteration, beta, sigma2,
//! g_lower, b`: `g_lower` holds the lower triangle of `G` row by row
//! (`G₀₀, G₁₀, G₁₁, G₂₀, ...`) and `b` concatenates the random effects of
//! all subjects in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::PosteriorDraw;

pub const DRAW_FORMAT: &str = "projclust-draws";
pub const DRAW_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawFileHeader {
    pub format: String,
    pub version: u32,
    pub field_order: Vec<String>,
    pub g_layout: String,
    pub b_layout: String,
    pub p: usize,
    pub q: usize,
    pub subjects: Vec<String>,
}

impl DrawFileHeader {
    pub fn new(p: usize, q: usize, subjects: Vec<String>) -> Self {
        Self {
            format: DRAW_FORMAT.into(),
            version: DRAW_FORMAT_VERSION,
            field_order: ["chain", "iteration", "beta", "sigma2", "g_lower", "b"]
                .map(String::from)
                .to_vec(),
            g_layout: "lower triangle, row-major".into(),
            b_layout: "subject-major concatenation in header subject order".into(),
            p,
            q,
            subjects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub chain: usize,
    pub iteration: usize,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub g_lower: Vec<f64>,
    pub b: Vec<f64>,
}

impl DrawRecord {
    pub fn from_draw(d: &PosteriorDraw) -> Self {
        let q = d.g.nrows();
        let mut g_lower = Vec::with_capacity(q * (q + 1) / 2);
        for i in 0..q {
            for j in 0..=i {
                g_lower.push(d.g[(i, j)]);
            }
        }
        Self {
            chain: d.chain,
            iteration: d.iteration,
            beta: d.beta.iter().copied().collect(),
            sigma2: d.sigma2,
            g_lower,
            b: d.b.iter().flat_map(|v| v.iter().copied()).collect(),
        }
    }

    pub fn into_draw(self, header: &DrawFileHeader) -> Result<PosteriorDraw> {
        let (p, q, n) = (header.p, header.q, header.subjects.len());
        if self.beta.len() != p || self.g_lower.len() != q * (q + 1) / 2 || self.b.len() != n * q {
            return Err(Error::validation("draw record does not match the file header"));
        }
        let mut g = DMatrix::zeros(q, q);
        let mut k = 0;
        for i in 0..q {
            for j in 0..=i {
                g[(i, j)] = self.g_lower[k];
                g[(j, i)] = self.g_lower[k];
                k += 1;
            }
        }
        Ok(PosteriorDraw {
            chain: self.chain,
            iteration: self.iteration,
            beta: DVector::from_vec(self.beta),
            sigma2: self.sigma2,
            g,
            b: self.b.chunks(q.max(1)).take(n).map(DVector::from_column_slice).collect(),
        })
    }
}

pub fn write_draws(path: impl AsRef<Path>, header: &DrawFileHeader, draws: &[PosteriorDraw]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for d in draws {
        serde_json::to_writer(&mut w, &DrawRecord::from_draw(d))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws(path: impl AsRef<Path>) -> Result<(DrawFileHeader, Vec<PosteriorDraw>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| Error::validation("draw file is empty"))??;
    let header: DrawFileHeader = serde_json::from_str(&first)?;
    if header.format != DRAW_FORMAT || header.version != DRAW_FORMAT_VERSION {
        return Err(Error::validation(format!(
            "unsupported draw file format {} v{}",
            header.format, header.version
        )));
    }
    let mut draws = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DrawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k as u64 + 2,
            message: e.to_string(),
        })?;
        draws.push(rec.into_draw(&header)?);
    }
    Ok((header, draws))
}
