//! Blocked Gibbs sampler for the Gaussian linear mixed model
//!
//! ```text
//! y_i = X_i β + Z_i b_i + ε_i,   b_i ~ N(0, G),   ε_i ~ N(0, σ² I)
//! β ~ N(0, τ² I),   σ² ~ InvGamma(a₀, b₀),   G ~ InvWishart(ν₀, S₀)
//! ```
//!
//! One sweep updates, in order, β | rest, every b_i | rest, σ² | rest and
//! G | rest, each from its exact conditional. Subject-level draws use RNG
//! substreams keyed by `(seed, chain, subject id)` and all pooled sums run in
//! subject-id order, so the output does not depend on the row order of the
//! dataset.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, ModelSpec, SubjectDesign};
use crate::error::{Error, Result};
use crate::linalg;
use crate::replicate::{self, partition_g};
use crate::rng::{labelled_substream, substream};

/// Prior on the random-effect covariance `G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GPrior {
    /// `G ~ InvWishart(df, scale · I)`; `df` defaults to `q + 2`.
    InverseWishart {
        #[serde(default)]
        df: Option<f64>,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Independent `G_jj ~ InvGamma(shape, rate)` with zero off-diagonals.
    DiagonalInvGamma { shape: f64, rate: f64 },
}

fn one() -> f64 {
    1.0
}

impl Default for GPrior {
    fn default() -> Self {
        GPrior::InverseWishart {
            df: None,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    /// Prior variance τ² of each fixed effect.
    pub beta_var: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    pub g_prior: GPrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            beta_var: 100.0,
            sigma2_shape: 0.01,
            sigma2_rate: 0.01,
            g_prior: GPrior::default(),
        }
    }
}

impl PriorSpec {
    pub fn validate(&self, q: usize) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.beta_var) {
            return Err(Error::validation("beta_var must be positive"));
        }
        if !pos(self.sigma2_shape) || !pos(self.sigma2_rate) {
            return Err(Error::validation("sigma2 prior shape and rate must be positive"));
        }
        match &self.g_prior {
            GPrior::InverseWishart { df, scale } => {
                let df = df.unwrap_or(q as f64 + 2.0);
                if !(df > q as f64 - 1.0) {
                    return Err(Error::validation(format!(
                        "inverse-Wishart df {df} must exceed q - 1 = {}",
                        q as f64 - 1.0
                    )));
                }
                if !pos(*scale) {
                    return Err(Error::validation("inverse-Wishart scale must be positive"));
                }
            }
            GPrior::DiagonalInvGamma { shape, rate } => {
                if !pos(*shape) || !pos(*rate) {
                    return Err(Error::validation("diagonal G prior shape and rate must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_iter: 2000,
            burn_in: 1000,
            thin: 1,
            seed: 1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::validation("n_chains must be at least 1"));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::validation("burn_in must be smaller than n_iter"));
        }
        if self.thin == 0 {
            return Err(Error::validation("thin must be at least 1"));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in).div_ceil(self.thin)
    }
}

/// One posterior sample of `(β, σ², G, b_1..b_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub chain: usize,
    pub iteration: usize,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub g: DMatrix<f64>,
    /// Random effects in dataset subject order.
    pub b: Vec<DVector<f64>>,
}

/// Designs and responses of a fitted dataset.
#[derive(Debug, Clone)]
pub struct LmmProblem {
    ids: Vec<String>,
    designs: Vec<SubjectDesign>,
    y: Vec<DVector<f64>>,
    /// Subject indices sorted by id; pooled sums follow this order.
    canonical: Vec<usize>,
    xtx: DMatrix<f64>,
    p: usize,
    q: usize,
}

impl LmmProblem {
    pub fn new(ids: Vec<String>, designs: Vec<SubjectDesign>, y: Vec<DVector<f64>>) -> Result<Self> {
        if designs.is_empty() || designs.len() != ids.len() || designs.len() != y.len() {
            return Err(Error::validation("need one id, design and response per subject"));
        }
        let p = designs[0].x.ncols();
        let q = designs[0].z.ncols();
        if q == 0 {
            return Err(Error::validation("model needs at least one random-effect column"));
        }
        for (d, yi) in designs.iter().zip(&y) {
            if d.x.ncols() != p || d.z.ncols() != q || d.x.nrows() != yi.len() || d.z.nrows() != yi.len() {
                return Err(Error::validation("inconsistent design dimensions"));
            }
        }
        let mut canonical: Vec<usize> = (0..ids.len()).collect();
        canonical.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        if canonical.windows(2).any(|w| ids[w[0]] == ids[w[1]]) {
            return Err(Error::validation("subject ids must be unique"));
        }
        let mut xtx = DMatrix::zeros(p, p);
        for &i in &canonical {
            xtx += designs[i].x.transpose() * &designs[i].x;
        }
        Ok(Self {
            ids,
            designs,
            y,
            canonical,
            xtx,
            p,
            q,
        })
    }

    pub fn from_dataset(ds: &LongitudinalDataset, spec: &ModelSpec) -> Result<Self> {
        let designs = spec.designs(ds)?;
        let ids = ds.subjects.iter().map(|s| s.id.clone()).collect();
        let y = ds.subjects.iter().map(|s| DVector::from_column_slice(&s.y)).collect();
        Self::new(ids, designs, y)
    }

    pub fn n_subjects(&self) -> usize {
        self.ids.len()
    }

    pub fn n_observations(&self) -> usize {
        self.y.iter().map(|v| v.len()).sum()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn designs(&self) -> &[SubjectDesign] {
        &self.designs
    }

    pub fn response(&self, i: usize) -> &DVector<f64> {
        &self.y[i]
    }

    /// Replaces the response of subject `i` (same length).
    pub fn set_response(&mut self, i: usize, y: DVector<f64>) {
        assert_eq!(y.len(), self.y[i].len(), "response length changed");
        self.y[i] = y;
    }
}

/// Current values of all unknowns in a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub g: DMatrix<f64>,
    pub b: Vec<DVector<f64>>,
}

impl GibbsState {
    /// β = 0, σ² = 1, G = I, b_i = 0.
    pub fn initial(problem: &LmmProblem) -> Self {
        Self {
            beta: DVector::zeros(problem.p),
            sigma2: 1.0,
            g: DMatrix::identity(problem.q, problem.q),
            b: vec![DVector::zeros(problem.q); problem.n_subjects()],
        }
    }
}

fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draws `N(P⁻¹ h, P⁻¹)` given the precision `P` and `h`.
fn sample_from_precision<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    h: &DVector<f64>,
    what: &str,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = linalg::cholesky(precision, what)?;
    let mean = chol.solve(h);
    let z = standard_normal_vector(h.len(), rng);
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::numerical(format!("{what}: singular triangular factor")))?;
    Ok(mean + noise)
}

fn inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::numerical(format!("gamma({shape}, {rate}): {e}")))?;
    let x: f64 = g.sample(rng);
    let v = 1.0 / x;
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::numerical(format!("inverse-gamma draw {v} is not a positive finite number")));
    }
    Ok(v)
}

/// Draws `G ~ InvWishart(df, scale)` via the Bartlett decomposition of the
/// matching Wishart on `scale⁻¹`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(df: f64, scale: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let q = scale.nrows();
    if !(df > q as f64 - 1.0) {
        return Err(Error::validation(format!("inverse-Wishart df {df} must exceed {}", q as f64 - 1.0)));
    }
    let l = linalg::cholesky(scale, "inverse-Wishart scale")?.l();
    let mut a = DMatrix::zeros(q, q);
    for j in 0..q {
        let chi2 = Gamma::new((df - j as f64) / 2.0, 2.0)
            .map_err(|e| Error::numerical(format!("chi-square: {e}")))?
            .sample(rng);
        a[(j, j)] = f64::sqrt(chi2);
        for i in (j + 1)..q {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // G = (L A⁻ᵀ)(L A⁻ᵀ)ᵀ; with M = L A⁻ᵀ we solve A Mᵀ = Lᵀ.
    let mt = a
        .solve_lower_triangular(&l.transpose())
        .ok_or_else(|| Error::numerical("inverse-Wishart: singular Bartlett factor"))?;
    let m = mt.transpose();
    let mut g = &m * m.transpose();
    linalg::symmetrize(&mut g);
    Ok(g)
}

/// β | rest.
pub fn draw_beta<R: Rng + ?Sized>(problem: &LmmProblem, priors: &PriorSpec, state: &mut GibbsState, rng: &mut R) -> Result<()> {
    let inv_s2 = 1.0 / state.sigma2;
    let mut precision = &problem.xtx * inv_s2;
    for j in 0..problem.p {
        precision[(j, j)] += 1.0 / priors.beta_var;
    }
    let mut h = DVector::zeros(problem.p);
    for &i in &problem.canonical {
        let d = &problem.designs[i];
        let r = &problem.y[i] - &d.z * &state.b[i];
        h += d.x.transpose() * r;
    }
    h *= inv_s2;
    state.beta = sample_from_precision(&precision, &h, "fixed-effect precision", rng)?;
    Ok(())
}

/// b_i | rest for one subject.
///
/// Works in the whitened coordinates `b_i = L_G u_i`, whose conditional
/// precision is `I + σ⁻² (Z_i L_G)ᵀ Z_i L_G`; this avoids forming `G⁻¹`.
pub fn draw_subject_effect<R: Rng + ?Sized>(
    problem: &LmmProblem,
    state: &GibbsState,
    g_factor: &DMatrix<f64>,
    i: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let d = &problem.designs[i];
    let inv_s2 = 1.0 / state.sigma2;
    let zl = &d.z * g_factor;
    let mut precision = zl.transpose() * &zl * inv_s2;
    for j in 0..problem.q {
        precision[(j, j)] += 1.0;
    }
    let r = &problem.y[i] - &d.x * &state.beta;
    let h = zl.transpose() * r * inv_s2;
    let u = sample_from_precision(&precision, &h, "random-effect precision", rng)?;
    Ok(g_factor * u)
}

/// Every b_i | rest, subject `i` drawing from `rngs[i]`.
pub fn draw_effects<R: Rng>(problem: &LmmProblem, state: &mut GibbsState, rngs: &mut [R]) -> Result<()> {
    let g_factor = linalg::cholesky(&state.g, "random-effect covariance")?.l();
    for (i, rng) in rngs.iter_mut().enumerate() {
        state.b[i] = draw_subject_effect(problem, state, &g_factor, i, rng)?;
    }
    Ok(())
}

/// σ² | rest.
pub fn draw_sigma2<R: Rng + ?Sized>(problem: &LmmProblem, priors: &PriorSpec, state: &mut GibbsState, rng: &mut R) -> Result<()> {
    let mut ss = 0.0;
    for &i in &problem.canonical {
        let d = &problem.designs[i];
        let r = &problem.y[i] - &d.x * &state.beta - &d.z * &state.b[i];
        ss += r.norm_squared();
    }
    let shape = priors.sigma2_shape + problem.n_observations() as f64 / 2.0;
    let rate = priors.sigma2_rate + 0.5 * ss;
    state.sigma2 = inv_gamma(shape, rate, rng)?;
    Ok(())
}

/// G | rest.
pub fn draw_g<R: Rng + ?Sized>(problem: &LmmProblem, priors: &PriorSpec, state: &mut GibbsState, rng: &mut R) -> Result<()> {
    let q = problem.q;
    let n = problem.n_subjects() as f64;
    match &priors.g_prior {
        GPrior::InverseWishart { df, scale } => {
            let df0 = df.unwrap_or(q as f64 + 2.0);
            let mut s = DMatrix::identity(q, q) * *scale;
            for &i in &problem.canonical {
                s += &state.b[i] * state.b[i].transpose();
            }
            linalg::symmetrize(&mut s);
            state.g = sample_inverse_wishart(df0 + n, &s, rng)?;
        }
        GPrior::DiagonalInvGamma { shape, rate } => {
            let mut g = DMatrix::zeros(q, q);
            for j in 0..q {
                let ss: f64 = problem.canonical.iter().map(|&i| state.b[i][j].powi(2)).sum();
                g[(j, j)] = inv_gamma(shape + n / 2.0, rate + 0.5 * ss, rng)?;
            }
            state.g = g;
        }
    }
    Ok(())
}

/// One chain of the blocked Gibbs sampler with its RNG substreams.
pub struct GibbsSampler {
    problem: LmmProblem,
    priors: PriorSpec,
    global: ChaCha8Rng,
    subject_rngs: Vec<ChaCha8Rng>,
}

impl GibbsSampler {
    pub fn new(problem: LmmProblem, priors: PriorSpec, seed: u64, chain: usize) -> Result<Self> {
        priors.validate(problem.q)?;
        let global = substream(seed, "gibbs-global", &[chain as u64]);
        let subject_rngs = problem
            .ids
            .iter()
            .map(|id| labelled_substream(seed, "gibbs-subject", &[chain as u64], id))
            .collect();
        Ok(Self {
            problem,
            priors,
            global,
            subject_rngs,
        })
    }

    pub fn problem(&self) -> &LmmProblem {
        &self.problem
    }

    pub fn problem_mut(&mut self) -> &mut LmmProblem {
        &mut self.problem
    }

    /// One full sweep: β, then all b_i, then σ², then G.
    pub fn sweep(&mut self, state: &mut GibbsState) -> Result<()> {
        draw_beta(&self.problem, &self.priors, state, &mut self.global)?;
        draw_effects(&self.problem, state, &mut self.subject_rngs)?;
        draw_sigma2(&self.problem, &self.priors, state, &mut self.global)?;
        draw_g(&self.problem, &self.priors, state, &mut self.global)?;
        Ok(())
    }
}

fn run_chain(problem: &LmmProblem, priors: &PriorSpec, cfg: &McmcConfig, chain: usize) -> Result<Vec<PosteriorDraw>> {
    let mut sampler = GibbsSampler::new(problem.clone(), priors.clone(), cfg.seed, chain)?;
    let mut state = GibbsState::initial(problem);
    let mut out = Vec::with_capacity(cfg.draws_per_chain());
    for it in 0..cfg.n_iter {
        sampler.sweep(&mut state)?;
        if it >= cfg.burn_in && (it - cfg.burn_in).is_multiple_of(cfg.thin) {
            out.push(PosteriorDraw {
                chain,
                iteration: it,
                beta: state.beta.clone(),
                sigma2: state.sigma2,
                g: state.g.clone(),
                b: state.b.clone(),
            });
        }
    }
    log::debug!("chain {chain}: kept {} draws", out.len());
    Ok(out)
}

/// Fits the model to prepared designs. Chains run in parallel; the output is
/// chain-major and independent of the thread count.
pub fn gibbs_fit_problem(problem: &LmmProblem, priors: &PriorSpec, cfg: &McmcConfig) -> Result<Vec<PosteriorDraw>> {
    cfg.validate()?;
    priors.validate(problem.q)?;
    let chains: Vec<Result<Vec<PosteriorDraw>>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(problem, priors, cfg, c))
        .collect();
    let mut draws = Vec::with_capacity(cfg.n_chains * cfg.draws_per_chain());
    for chain in chains {
        draws.extend(chain?);
    }
    Ok(draws)
}

pub fn gibbs_fit(ds: &LongitudinalDataset, spec: &ModelSpec, cfg: &McmcConfig) -> Result<Vec<PosteriorDraw>> {
    let problem = LmmProblem::from_dataset(ds, spec)?;
    gibbs_fit_problem(&problem, &spec.priors, cfg)
}

/// Mean of subject `i`'s mixed predictive replicate on a time grid:
/// `X β + Z_A b_iA + Z_B G_ABᵀ G_A⁻¹ b_iA`.
///
/// Covariate columns of `X`, if any, are taken as zero on the grid.
pub fn fitted_mean_replicate(draw: &PosteriorDraw, spec: &ModelSpec, i: usize, times: &[f64]) -> Result<DVector<f64>> {
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::validation(format!("time {t} outside [0, 1]")));
    }
    if i >= draw.b.len() {
        return Err(Error::validation(format!("subject index {i} out of range")));
    }
    let n_cov = draw
        .beta
        .len()
        .checked_sub(spec.fixed.ncols())
        .ok_or_else(|| Error::validation("draw has fewer fixed effects than the model"))?;
    let design = spec.design_at(times, None, n_cov)?;
    let gp = partition_g(&draw.g, &spec.shared)?;
    replicate::replicate_mean(&design, draw, &gp, i)
}

/// Split-R̂ of a scalar across chains (each chain halved).
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::new();
    for c in chains {
        let h = c.len() / 2;
        if h < 2 {
            return f64::NAN;
        }
        halves.push(&c[..h]);
        halves.push(&c[c.len() - h..]);
    }
    let m = halves.len() as f64;
    let n = halves[0].len().min(halves.iter().map(|h| h.len()).min().unwrap_or(0)) as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (h.len() as f64 - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Posterior means and split-R̂ values for β and σ².
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_draws: usize,
    pub beta_mean: Vec<f64>,
    pub beta_rhat: Vec<f64>,
    pub sigma2_mean: f64,
    pub sigma2_rhat: f64,
    pub g_diag_mean: Vec<f64>,
    pub g_diag_rhat: Vec<f64>,
}

pub fn diagnostics(draws: &[PosteriorDraw]) -> FitDiagnostics {
    let n_chains = draws.iter().map(|d| d.chain + 1).max().unwrap_or(0);
    let by_chain = |f: &dyn Fn(&PosteriorDraw) -> f64| -> Vec<Vec<f64>> {
        let mut chains = vec![Vec::new(); n_chains];
        for d in draws {
            chains[d.chain].push(f(d));
        }
        chains
    };
    let mean = |f: &dyn Fn(&PosteriorDraw) -> f64| draws.iter().map(f).sum::<f64>() / draws.len().max(1) as f64;
    let p = draws.first().map_or(0, |d| d.beta.len());
    let q = draws.first().map_or(0, |d| d.g.nrows());
    FitDiagnostics {
        n_draws: draws.len(),
        beta_mean: (0..p).map(|j| mean(&|d| d.beta[j])).collect(),
        beta_rhat: (0..p).map(|j| split_rhat(&by_chain(&|d| d.beta[j]))).collect(),
        sigma2_mean: mean(&|d| d.sigma2),
        sigma2_rhat: split_rhat(&by_chain(&|d| d.sigma2)),
        g_diag_mean: (0..q).map(|j| mean(&|d| d.g[(j, j)])).collect(),
        g_diag_rhat: (0..q).map(|j| split_rhat(&by_chain(&|d| d.g[(j, j)]))).collect(),
    }
}
