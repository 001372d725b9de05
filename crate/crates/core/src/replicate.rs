//! Mixed predictive replicates.
//!
//! A replicate of subject `i` keeps the shared effects `b_iA` and redraws the
//! rest from the conditional prior `N(G_ABᵀ G_A⁻¹ b_iA, G_B − G_ABᵀ G_A⁻¹ G_AB)`.
//! Integrating the redrawn part out gives a Gaussian predictive density whose
//! mean is linear in `b_iA` through the loading `M_i = Z_iA + Z_iB G_ABᵀ G_A⁻¹`
//! and whose covariance does not depend on `b_iA`. The KL divergence between
//! two such densities is therefore `½ δᵀ Q_i⁻¹ δ` with
//! `Q_i⁻¹ = M_iᵀ (Z_iB S Z_iBᵀ + σ² I)⁻¹ M_i`, `S` the Schur complement.

use nalgebra::{DMatrix, DVector};

use crate::data::{SharedSet, SubjectDesign};
use crate::error::{Error, Result};
use crate::linalg::{self, select, select_columns, select_entries};
use crate::sampler::PosteriorDraw;

/// `G` split into shared (`A`) and integrated-out (`B`) blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GPartition {
    pub shared: Vec<usize>,
    pub rest: Vec<usize>,
    pub g_a: DMatrix<f64>,
    pub g_ab: DMatrix<f64>,
    pub g_b: DMatrix<f64>,
    /// `G_B − G_ABᵀ G_A⁻¹ G_AB`, `|B| × |B|`.
    pub schur: DMatrix<f64>,
    /// `G_ABᵀ G_A⁻¹`, `|B| × |A|`.
    pub gain: DMatrix<f64>,
}

impl GPartition {
    pub fn q(&self) -> usize {
        self.shared.len() + self.rest.len()
    }

    /// Undoes the A/B permutation.
    pub fn reassemble(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut g = DMatrix::zeros(q, q);
        for (a, &i) in self.shared.iter().enumerate() {
            for (a2, &j) in self.shared.iter().enumerate() {
                g[(i, j)] = self.g_a[(a, a2)];
            }
            for (b, &j) in self.rest.iter().enumerate() {
                g[(i, j)] = self.g_ab[(a, b)];
                g[(j, i)] = self.g_ab[(a, b)];
            }
        }
        for (b, &i) in self.rest.iter().enumerate() {
            for (b2, &j) in self.rest.iter().enumerate() {
                g[(i, j)] = self.g_b[(b, b2)];
            }
        }
        g
    }

    /// Mean loading `M = Z_A + Z_B · gain` of a random-effect design.
    pub fn loading(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let z_a = select_columns(z, &self.shared);
        let z_b = select_columns(z, &self.rest);
        z_a + z_b * &self.gain
    }
}

pub fn partition_g(g: &DMatrix<f64>, shared: &SharedSet) -> Result<GPartition> {
    let q = g.nrows();
    if g.ncols() != q {
        return Err(Error::validation("G must be square"));
    }
    shared.check(q)?;
    let a = shared.indices().to_vec();
    let b = shared.complement(q);
    let g_a = select(g, &a, &a);
    let g_ab = select(g, &a, &b);
    let g_b = select(g, &b, &b);
    let chol = linalg::cholesky(&g_a, "shared block of G")?;
    // G_A⁻¹ G_AB, |A| × |B|
    let solved = chol.solve(&g_ab);
    let gain = solved.transpose();
    let mut schur = &g_b - g_ab.transpose() * &solved;
    linalg::symmetrize(&mut schur);
    Ok(GPartition {
        shared: a,
        rest: b,
        g_a,
        g_ab,
        g_b,
        schur,
        gain,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Distribution of the redrawn effects `r_iB | b_iA`.
pub fn conditional_prior(gp: &GPartition, b_a: &DVector<f64>) -> Result<Gaussian> {
    if b_a.len() != gp.shared.len() {
        return Err(Error::validation(format!(
            "shared effect has length {}, expected {}",
            b_a.len(),
            gp.shared.len()
        )));
    }
    Ok(Gaussian {
        mean: &gp.gain * b_a,
        cov: gp.schur.clone(),
    })
}

fn shared_effect(draw: &PosteriorDraw, gp: &GPartition, i: usize) -> Result<DVector<f64>> {
    let b = draw
        .b
        .get(i)
        .ok_or_else(|| Error::validation(format!("subject index {i} out of range")))?;
    if b.len() != gp.q() {
        return Err(Error::validation("random effect length does not match G"));
    }
    Ok(select_entries(b, &gp.shared))
}

fn check_design(design: &SubjectDesign, draw: &PosteriorDraw, gp: &GPartition) -> Result<()> {
    if design.z.ncols() != gp.q() || design.x.ncols() != draw.beta.len() {
        return Err(Error::validation("design columns do not match the draw"));
    }
    Ok(())
}

/// `X β + M b_iA`.
pub fn replicate_mean(design: &SubjectDesign, draw: &PosteriorDraw, gp: &GPartition, i: usize) -> Result<DVector<f64>> {
    check_design(design, draw, gp)?;
    let b_a = shared_effect(draw, gp, i)?;
    Ok(&design.x * &draw.beta + gp.loading(&design.z) * b_a)
}

/// `Z_B S Z_Bᵀ + σ² I`.
pub fn replicate_covariance(z: &DMatrix<f64>, sigma2: f64, gp: &GPartition) -> DMatrix<f64> {
    let z_b = select_columns(z, &gp.rest);
    let mut cov = &z_b * &gp.schur * z_b.transpose();
    for r in 0..cov.nrows() {
        cov[(r, r)] += sigma2;
    }
    linalg::symmetrize(&mut cov);
    cov
}

/// Predictive density of subject `i`'s replicate given `b_iA` and θ.
pub fn replicate_predictive(design: &SubjectDesign, draw: &PosteriorDraw, gp: &GPartition, i: usize) -> Result<Gaussian> {
    Ok(Gaussian {
        mean: replicate_mean(design, draw, gp, i)?,
        cov: replicate_covariance(&design.z, draw.sigma2, gp),
    })
}

/// Per-subject projection metric `Q_i⁻¹ = M_iᵀ C_i⁻¹ M_i`, computed as `WᵀW`
/// with `W = L⁻¹ M_i` and `C_i = L Lᵀ`.
pub fn projection_metric(design: &SubjectDesign, draw: &PosteriorDraw, gp: &GPartition) -> Result<DMatrix<f64>> {
    check_design(design, draw, gp)?;
    let cov = replicate_covariance(&design.z, draw.sigma2, gp);
    let chol = linalg::cholesky(&cov, "replicate covariance")?;
    let m = gp.loading(&design.z);
    let w = chol
        .l()
        .solve_lower_triangular(&m)
        .ok_or_else(|| Error::numerical("replicate covariance: singular triangular factor"))?;
    let mut qinv = w.transpose() * w;
    linalg::symmetrize(&mut qinv);
    Ok(qinv)
}

/// Relative tolerance below which a negative quadratic form is rounding noise.
const KL_NEGATIVE_TOL: f64 = 1e-12;

/// `½ (d − b)ᵀ Q (d − b)`, the KL divergence between two replicate densities
/// that differ only in their shared effect.
pub fn kl_term(b_a: &DVector<f64>, d: &DVector<f64>, qinv: &DMatrix<f64>) -> Result<f64> {
    if b_a.len() != d.len() || qinv.nrows() != d.len() || qinv.ncols() != d.len() {
        return Err(Error::validation("kl_term: dimension mismatch"));
    }
    let delta = d - b_a;
    let value = 0.5 * linalg::quad_form(qinv, &delta);
    if value >= 0.0 {
        return Ok(value);
    }
    let mut scale = 0.0;
    for j in 0..delta.len() {
        for k in 0..delta.len() {
            scale += (qinv[(j, k)] * delta[j] * delta[k]).abs();
        }
    }
    if value >= -KL_NEGATIVE_TOL * scale.max(1.0) {
        Ok(0.0)
    } else {
        Err(Error::numerical(format!("KL term {value:e} is negative; metric is not positive semi-definite")))
    }
}

/// Shared effects and projection metrics of every subject for one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionInputs {
    pub b_a: Vec<DVector<f64>>,
    pub qinv: Vec<DMatrix<f64>>,
}

impl ProjectionInputs {
    pub fn n(&self) -> usize {
        self.b_a.len()
    }

    pub fn from_draw(designs: &[SubjectDesign], draw: &PosteriorDraw, shared: &SharedSet) -> Result<Self> {
        if designs.len() != draw.b.len() {
            return Err(Error::validation(format!(
                "{} designs for a draw with {} subjects",
                designs.len(),
                draw.b.len()
            )));
        }
        let gp = partition_g(&draw.g, shared)?;
        let mut b_a = Vec::with_capacity(designs.len());
        let mut qinv = Vec::with_capacity(designs.len());
        for (i, design) in designs.iter().enumerate() {
            b_a.push(shared_effect(draw, &gp, i)?);
            qinv.push(projection_metric(design, draw, &gp)?);
        }
        Ok(Self { b_a, qinv })
    }
}
