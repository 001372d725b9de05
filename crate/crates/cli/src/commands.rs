//! The pipeline commands. Each one is a pure function of the config, its
//! input files and the seed; every output is written in full before the
//! config echo.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use projclust::data::{self, LongitudinalDataset, ModelSpec, ScaleTransform, SubjectDesign, SubjectRecord};
use projclust::draws::{read_draws, write_draws, DrawFileHeader};
use projclust::evaluation::{coincidence, index_report, ThresholdSummary};
use projclust::projection::{project_cluster, ProjectionOptions};
use projclust::replicate::ProjectionInputs;
use projclust::sampler::{diagnostics, gibbs_fit, FitDiagnostics, PosteriorDraw};
use projclust::selection::{self, choose_k_bootstrap, choose_k_kl, kl_curve, spread_indices};
use projclust::synthgen::generate_example1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SelectionConfig};
use crate::error::CliError;

/// Output directory with the overwrite guard applied.
struct OutDir {
    dir: PathBuf,
    command: &'static str,
}

impl OutDir {
    fn prepare(cfg: &RunConfig, command: &'static str, files: &[&str], force: bool) -> Result<Self, CliError> {
        let dir = cfg.output_dir()?.to_path_buf();
        let echo = echo_name(command);
        if !force {
            if let Some(f) = files.iter().chain([&echo.as_str()]).find(|f| dir.join(f).exists()) {
                return Err(CliError::Validation(format!(
                    "{} already exists; pass --force to overwrite",
                    dir.join(f).display()
                )));
            }
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
        Ok(Self { dir, command })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| CliError::Io(format!("writing {}: {e}", p.display())))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }

    fn finish(self, cfg: &RunConfig) -> Result<(), CliError> {
        let (text, hash) = cfg.echo()?;
        self.write(&echo_name(self.command), &format!("# sha256 = \"{hash}\"\n{text}"))?;
        log::info!("{}: outputs in {} (config sha256 {hash})", self.command, self.dir.display());
        Ok(())
    }
}

fn echo_name(command: &str) -> String {
    format!("config.{command}.toml")
}

fn load_dataset(path: &Path) -> Result<LongitudinalDataset, CliError> {
    data::load_csv(path).map_err(|e| CliError::from(e).context(&format!("loading {}", path.display())))
}

fn model_spec(cfg: &RunConfig) -> Result<ModelSpec, CliError> {
    let q = cfg.model.random.ncols();
    let shared = cfg.model.shared.resolve(q).map_err(|e| e.context("model.shared"))?;
    let mut spec = ModelSpec::new(cfg.model.fixed, cfg.model.random, shared)?;
    spec.priors = cfg.model.priors.clone();
    spec.priors.validate(q)?;
    Ok(spec)
}

fn subject_ids(ds: &LongitudinalDataset) -> Vec<String> {
    ds.subjects.iter().map(|s| s.id.clone()).collect()
}

pub fn simulate(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let synth = cfg.synth_config();
    synth.validate()?;
    let out = OutDir::prepare(cfg, "simulate", &["data.csv", "labels.csv"], force)?;
    let (ds, labels) = generate_example1(&synth)?;
    data::write_csv(&ds, out.path("data.csv"))?;
    let mut s = String::from("subject,label\n");
    for (subj, l) in ds.subjects.iter().zip(&labels) {
        writeln!(s, "{},{l}", subj.id).unwrap();
    }
    out.write("labels.csv", &s)?;
    out.finish(cfg)
}

#[derive(Serialize)]
struct FitSummary {
    n_subjects: usize,
    n_observations: usize,
    p: usize,
    q: usize,
    shared: Vec<usize>,
    n_chains: usize,
    n_draws: usize,
    scale: ScaleTransform,
    diagnostics: FitDiagnostics,
}

pub fn fit(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    cfg.check_k_or_selection()?;
    let spec = model_spec(cfg)?;
    let mcmc = cfg.mcmc_config();
    mcmc.validate()?;
    let raw = load_dataset(cfg.input_path()?)?;
    let out = OutDir::prepare(cfg, "fit", &["draws.jsonl", "fit_summary.json"], force)?;
    let (ds, scale) = data::standardize(&raw)?;
    let draws = gibbs_fit(&ds, &spec, &mcmc)?;
    let p = spec.p(ds.n_covariates());
    let header = DrawFileHeader::new(p, spec.q(), subject_ids(&ds));
    write_draws(out.path("draws.jsonl"), &header, &draws)?;

    let diag = diagnostics(&draws);
    let worst = diag
        .beta_rhat
        .iter()
        .chain(&diag.g_diag_rhat)
        .chain([&diag.sigma2_rhat])
        .copied()
        .fold(f64::NAN, f64::max);
    log::info!("fit: {} draws, sigma2 mean {:.4}, largest split-Rhat {worst:.3}", draws.len(), diag.sigma2_mean);
    if worst > 1.1 {
        log::warn!("fit: split-Rhat {worst:.3} exceeds 1.1; consider more iterations");
    }
    out.write_json(
        "fit_summary.json",
        &FitSummary {
            n_subjects: ds.n_subjects(),
            n_observations: ds.n_observations(),
            p,
            q: spec.q(),
            shared: spec.shared.indices().to_vec(),
            n_chains: mcmc.n_chains,
            n_draws: draws.len(),
            scale,
            diagnostics: diag,
        },
    )?;
    out.finish(cfg)
}

/// Standardized dataset, model and draws for the commands downstream of `fit`.
struct Fitted {
    ds: LongitudinalDataset,
    spec: ModelSpec,
    designs: Vec<SubjectDesign>,
    draws: Vec<PosteriorDraw>,
}

fn load_fitted(cfg: &RunConfig) -> Result<Fitted, CliError> {
    let spec = model_spec(cfg)?;
    let raw = load_dataset(cfg.input_path()?)?;
    let (ds, _) = data::standardize(&raw)?;
    let path = cfg.artifact(&cfg.draws, "draws.jsonl")?;
    if !path.exists() {
        return Err(CliError::Io(format!("draw file {} not found; run `fit` first", path.display())));
    }
    let (header, draws) = read_draws(&path).map_err(|e| CliError::from(e).context(&format!("reading {}", path.display())))?;
    if header.subjects != subject_ids(&ds) {
        return Err(CliError::Validation("draw file subjects do not match the input dataset".into()));
    }
    if header.q != spec.q() || header.p != spec.p(ds.n_covariates()) {
        return Err(CliError::Validation(format!(
            "draw file has p = {}, q = {}; the model has p = {}, q = {}",
            header.p,
            header.q,
            spec.p(ds.n_covariates()),
            spec.q()
        )));
    }
    if draws.is_empty() {
        return Err(CliError::Validation("draw file holds no draws".into()));
    }
    let designs = spec.designs(&ds)?;
    Ok(Fitted { ds, spec, designs, draws })
}

fn projection_options(cfg: &RunConfig) -> ProjectionOptions {
    ProjectionOptions {
        max_iter: cfg.cluster.max_iter,
        n_restarts: cfg.cluster.n_restarts,
        seed: cfg.seed,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionRecord {
    draw_index: usize,
    #[serde(rename = "K")]
    k: usize,
    /// 1-based cluster labels in dataset subject order.
    labels: Vec<usize>,
    objective: f64,
    converged: bool,
}

#[derive(Serialize)]
struct CoincidenceSummary {
    k: usize,
    n_draws: usize,
    n_subjects: usize,
    weak_band: [f64; 2],
    solid_threshold: f64,
    #[serde(flatten)]
    counts: ThresholdSummary,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct KSelected {
    #[serde(skip_serializing_if = "Option::is_none")]
    kl: Option<KlChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<BootstrapReport>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KlChoice {
    epsilon: f64,
    n_draws: usize,
    k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BootstrapReport {
    reps: usize,
    n_draws: usize,
    k: usize,
    degenerate: bool,
}

fn resolve_k(cfg: &RunConfig) -> Result<usize, CliError> {
    if let Some(k) = cfg.k {
        return Ok(k);
    }
    let path = cfg.output_dir()?.join("k_selected.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("reading {} (run `select-k` first or pass --k): {e}", path.display())))?;
    let report: KSelected = serde_json::from_str(&text)?;
    let sel = cfg.selection.as_ref();
    let wants_kl = sel.is_some_and(|s| s.kl.is_some());
    match (&report.kl, &report.bootstrap) {
        (Some(kl), _) if wants_kl => Ok(kl.k),
        (_, Some(b)) => Ok(b.k),
        (Some(kl), None) => Ok(kl.k),
        (None, None) => Err(CliError::Validation(format!("{} reports no K", path.display()))),
    }
}

pub fn cluster(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    cfg.check_k_or_selection()?;
    let fitted = load_fitted(cfg)?;
    let k = resolve_k(cfg)?;
    let n = fitted.ds.n_subjects();
    if k == 0 || k > n {
        return Err(CliError::Validation(format!("K = {k} must lie in 1..={n}")));
    }
    let n_use = cfg.cluster.n_draws.unwrap_or(fitted.draws.len());
    let chosen = spread_indices(fitted.draws.len(), n_use)?;
    let out = OutDir::prepare(
        cfg,
        "cluster",
        &["partitions.jsonl", "coincidence.csv", "coincidence_summary.json"],
        force,
    )?;
    let opts = projection_options(cfg);
    let parts: Vec<PartitionRecord> = chosen
        .par_iter()
        .map(|&s| {
            let inp = ProjectionInputs::from_draw(&fitted.designs, &fitted.draws[s], &fitted.spec.shared)?;
            let p = project_cluster(&inp, k, None, &opts.for_draw(s))?;
            Ok(PartitionRecord {
                draw_index: s,
                k: p.k(),
                labels: p.labels.iter().map(|&l| l + 1).collect(),
                objective: p.objective,
                converged: p.converged,
            })
        })
        .collect::<Result<_, CliError>>()?;

    let mut lines = String::new();
    for r in &parts {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    out.write("partitions.jsonl", &lines)?;

    let labels: Vec<&[usize]> = parts.iter().map(|r| r.labels.as_slice()).collect();
    let cm = coincidence(&labels)?;
    let ids = subject_ids(&fitted.ds);
    let mut csv = String::from("subject");
    for id in &ids {
        write!(csv, ",{id}").unwrap();
    }
    csv.push('\n');
    for (id, row) in ids.iter().zip(cm.rows()) {
        csv.push_str(id);
        for v in row {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    out.write("coincidence.csv", &csv)?;
    out.write_json(
        "coincidence_summary.json",
        &CoincidenceSummary {
            k,
            n_draws: parts.len(),
            n_subjects: n,
            weak_band: [0.5, 0.8],
            solid_threshold: 0.8,
            counts: cm.threshold_summary(),
        },
    )?;
    out.finish(cfg)
}

pub fn select_k(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let sel: SelectionConfig = cfg
        .selection
        .clone()
        .filter(|s| s.kl.is_some() || s.bootstrap.is_some())
        .ok_or_else(|| CliError::Validation("select-k needs a `selection` method in the config".into()))?;
    cfg.check_k_or_selection()?;
    let fitted = load_fitted(cfg)?;
    let n = fitted.ds.n_subjects();
    let mut files = vec!["k_selected.json"];
    if sel.kl.is_some() {
        files.push("kl_curve.csv");
    }
    if sel.bootstrap.is_some() {
        files.push("instability_curve.csv");
    }
    let out = OutDir::prepare(cfg, "select-k", &files, force)?;
    let mut report = KSelected::default();

    if let Some(kl) = &sel.kl {
        let n_use = kl.n_draws.min(fitted.draws.len());
        let idx = spread_indices(fitted.draws.len(), n_use)?;
        let inputs: Vec<ProjectionInputs> = idx
            .par_iter()
            .map(|&s| ProjectionInputs::from_draw(&fitted.designs, &fitted.draws[s], &fitted.spec.shared))
            .collect::<projclust::Result<_>>()?;
        let curve = kl_curve(&inputs, kl.k_max.min(n), &projection_options(cfg))?;
        let k = choose_k_kl(&curve, kl.epsilon)?;
        let kl1 = curve.values[0];
        let mut csv = String::from("K,kl,ratio\n");
        for (k, v) in curve.ks.iter().zip(&curve.values) {
            writeln!(csv, "{k},{v},{}", v / kl1).unwrap();
        }
        out.write("kl_curve.csv", &csv)?;
        report.kl = Some(KlChoice {
            epsilon: kl.epsilon,
            n_draws: n_use,
            k,
        });
    }

    if let Some(b) = &sel.bootstrap {
        let n_use = b.n_draws.min(fitted.draws.len());
        let idx = spread_indices(fitted.draws.len(), n_use)?;
        let refs: Vec<&PosteriorDraw> = idx.iter().map(|&s| &fitted.draws[s]).collect();
        let times = fitted.ds.union_times();
        let means = selection::fitted_mean_matrix(&refs, &fitted.spec, &times)?;
        let curve = selection::instability_curve(&means, b.k_max, b.reps, cfg.seed)?;
        let choice = choose_k_bootstrap(&curve)?;
        let mut csv = String::from("K,instability\n");
        for (k, v) in curve.ks.iter().zip(&curve.values) {
            writeln!(csv, "{k},{v}").unwrap();
        }
        out.write("instability_curve.csv", &csv)?;
        report.bootstrap = Some(BootstrapReport {
            reps: b.reps,
            n_draws: n_use,
            k: choice.k,
            degenerate: choice.degenerate,
        });
    }

    out.write_json("k_selected.json", &report)?;
    out.finish(cfg)
}

fn read_labels(path: &Path) -> Result<HashMap<String, usize>, CliError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::from(projclust::Error::from(e)).context(&format!("reading {}", path.display())))?;
    let mut map = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::from(projclust::Error::from(e)))?;
        let bad = || CliError::Validation(format!("{} row {}: expected subject,label", path.display(), row + 2));
        if rec.len() != 2 {
            return Err(bad());
        }
        let label: usize = rec[1].trim().parse().map_err(|_| bad())?;
        if map.insert(rec[0].trim().to_owned(), label).is_some() {
            return Err(CliError::Validation(format!("{}: duplicate subject {:?}", path.display(), &rec[0])));
        }
    }
    Ok(map)
}

pub fn evaluate(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let ds = load_dataset(cfg.input_path()?)?;
    let labels_path = cfg
        .labels
        .as_deref()
        .ok_or_else(|| CliError::Validation("evaluate needs `labels` in the config".into()))?;
    let truth_map = read_labels(labels_path)?;
    let truth = ds
        .subjects
        .iter()
        .map(|s| {
            truth_map
                .get(&s.id)
                .copied()
                .ok_or_else(|| CliError::Validation(format!("no reference label for subject {:?}", s.id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let path = cfg.artifact(&cfg.partitions, "partitions.jsonl")?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let mut parts = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: PartitionRecord = serde_json::from_str(line)?;
        if r.labels.len() != truth.len() {
            return Err(CliError::Validation(format!(
                "partition of draw {} has {} labels; the dataset has {} subjects",
                r.draw_index,
                r.labels.len(),
                truth.len()
            )));
        }
        parts.push(r.labels);
    }
    let out = OutDir::prepare(cfg, "evaluate", &["evaluation.json"], force)?;
    let report = index_report(&parts, &truth)?;
    out.write_json("evaluation.json", &report)?;
    out.finish(cfg)
}

pub fn spectrum(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let ds = load_dataset(cfg.input_path()?)?;
    let n_freq = cfg.spectrum.n_freq;
    if n_freq == 0 {
        return Err(CliError::Validation("spectrum.n_freq must be at least 1".into()));
    }
    let out = OutDir::prepare(cfg, "spectrum", &["spectrum.csv"], force)?;
    let freqs: Vec<f64> = (0..n_freq).map(|k| k as f64 / n_freq as f64).collect();
    let subjects = ds
        .subjects
        .par_iter()
        .map(|s| {
            let ps = data::power_spectrum(&s.y, n_freq, cfg.spectrum.h)
                .map_err(|e| CliError::from(e).context(&format!("subject {:?}", s.id)))?;
            Ok(SubjectRecord::new(s.id.clone(), freqs.clone(), ps))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let spec_ds = LongitudinalDataset::new(subjects, Vec::new())?;
    data::write_csv(&spec_ds, out.path("spectrum.csv"))?;
    out.finish(cfg)
}
