//! Pipeline stages. Each stage reads its inputs from the workspace, writes
//! its outputs there, and can run on its own.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use gradient_atoms::coherence::rank_atoms;
use gradient_atoms::dictionary::fit;
use gradient_atoms::ekfac::{build_basis, project};
use gradient_atoms::steering::{build_eval_suite, run_sweep, task_share};
use gradient_atoms::toy::{
    generate_corpus, gradient_set, read_corpus, token_samples, train, write_corpus, TrainReport,
};
use gradient_atoms::{
    BehaviorDetector, CodeMatrix, CoherenceSummary, DictConfig, Dictionary, EkfacBasis,
    GradientSet, KfacStats, LambdaMode, ProjectedGradients, ProjectionConfig, SteerResult,
    SteeringVector, SyntheticDoc, Task, ToyModelParams,
};
use log::{info, warn};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::import::ImportRecord;

/// File names inside a workspace.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.path("corpus.tsv")
    }
    pub fn params(&self) -> PathBuf {
        self.path("params.json")
    }
    pub fn train_report(&self) -> PathBuf {
        self.path("train_report.json")
    }
    pub fn gradients(&self) -> PathBuf {
        self.path("gradients.gat")
    }
    pub fn kfac_stats(&self) -> PathBuf {
        self.path("kfac_stats.gat")
    }
    pub fn basis(&self) -> PathBuf {
        self.path("basis.gat")
    }
    pub fn projected(&self) -> PathBuf {
        self.path("projected.gat")
    }
    pub fn dictionary(&self) -> PathBuf {
        self.path("dictionary.gat")
    }
    pub fn codes(&self) -> PathBuf {
        self.path("codes.gat")
    }
    pub fn fit_report(&self) -> PathBuf {
        self.path("fit_report.json")
    }
    pub fn coherence(&self) -> PathBuf {
        self.path("coherence.json")
    }
    pub fn imports(&self) -> PathBuf {
        self.path("imports.json")
    }
    pub fn steer_dir(&self) -> PathBuf {
        self.path("steer")
    }
    pub fn steer_vector(&self, task: Task) -> PathBuf {
        self.steer_dir().join(format!("{task}_vector.gat"))
    }
    pub fn steer_result(&self, task: Task) -> PathBuf {
        self.steer_dir().join(format!("{task}.json"))
    }
    pub fn sweep_dir(&self) -> PathBuf {
        self.path("sweep")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.path("report")
    }

    /// Fails with the path when the workspace directory is missing.
    pub fn require(&self) -> Result<()> {
        if !self.root.is_dir() {
            bail!("workspace {} does not exist", self.root.display());
        }
        Ok(())
    }

    /// Creates the workspace directory itself, but not its parents, so a
    /// mistyped location fails instead of silently growing a new tree.
    pub fn create(&self) -> Result<()> {
        if self.root.is_dir() {
            return Ok(());
        }
        fs::create_dir(&self.root)
            .with_context(|| format!("creating workspace {}", self.root.display()))
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().with_context(|| format!("stage {stage} failed"))?;
    info!("{stage}: done in {:.2?}", start.elapsed());
    Ok(out)
}

pub fn gen_corpus(cfg: &PipelineConfig) -> Result<Vec<SyntheticDoc>> {
    let ws = Workspace::new(cfg.workspace());
    ws.create()?;
    let docs = generate_corpus(cfg.seed, cfg.corpus.per_task_count);
    write_corpus(&ws.corpus(), &docs)?;
    info!("corpus: {} documents", docs.len());
    Ok(docs)
}

pub fn load_corpus(ws: &Workspace) -> Result<Vec<SyntheticDoc>> {
    Ok(read_corpus(&ws.corpus())?)
}

pub fn load_params(ws: &Workspace) -> Result<ToyModelParams> {
    read_json(&ws.params())
}

pub fn train_model(cfg: &PipelineConfig) -> Result<TrainReport> {
    let ws = Workspace::new(cfg.workspace());
    let docs = load_corpus(&ws)?;
    let (params, report) = train(&docs, &cfg.train)?;
    info!(
        "train: loss {:.4} -> {:.4} (ratio {:.3})",
        report.initial_loss,
        report.final_loss,
        report.final_loss / report.initial_loss
    );
    write_json(&ws.params(), &params)?;
    write_json(&ws.train_report(), &report)?;
    Ok(report)
}

pub fn grads(cfg: &PipelineConfig) -> Result<GradientSet> {
    let ws = Workspace::new(cfg.workspace());
    let docs = load_corpus(&ws)?;
    let params = load_params(&ws)?;
    let gs = gradient_set(&params, &docs)?;
    gs.write(&ws.gradients())?;
    info!("grads: {} x {}", gs.n_docs(), gs.registry.d);
    Ok(gs)
}

/// Builds the eigenbasis. Toy runs refit eigenvalues on per-token samples;
/// imported statistics carry no samples, so they use factor-product
/// eigenvalues.
pub fn ekfac(cfg: &PipelineConfig) -> Result<EkfacBasis> {
    let ws = Workspace::new(cfg.workspace());
    let imported = ImportRecord::load(&ws)?;
    let basis = if imported.kfac_stats.is_some() {
        let stats = KfacStats::read(&ws.kfac_stats())?;
        let mut pcfg = cfg.projection.clone();
        if pcfg.lambda_mode == LambdaMode::Ekfac {
            warn!("ekfac: imported statistics have no token samples, using KFAC eigenvalues");
            pcfg.lambda_mode = LambdaMode::Kfac;
        }
        build_basis(&stats, None, &pcfg)?
    } else {
        let docs = load_corpus(&ws)?;
        let params = load_params(&ws)?;
        let samples = token_samples(&params, &docs)?;
        let stats = KfacStats::from_samples(params.registry(), &samples)?;
        stats.write(&ws.kfac_stats())?;
        build_basis(&stats, Some(&samples), &cfg.projection)?
    };
    basis.write(&ws.basis())?;
    Ok(basis)
}

/// The projection config as it applies to a stored basis.
fn projection_for(cfg: &PipelineConfig, basis: &EkfacBasis) -> ProjectionConfig {
    ProjectionConfig {
        lambda_mode: basis.lambda_mode,
        ..cfg.projection.clone()
    }
}

pub fn project_stage(cfg: &PipelineConfig) -> Result<ProjectedGradients> {
    let ws = Workspace::new(cfg.workspace());
    let gs = GradientSet::read(&ws.gradients())?;
    let basis = EkfacBasis::read(&ws.basis())?;
    let proj = project(&gs, &basis, &projection_for(cfg, &basis), true)?;
    proj.write(&ws.projected())?;
    Ok(proj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub atoms: usize,
    pub penalty: f64,
    pub epoch_errors: Vec<f64>,
    pub reseeded: usize,
    pub density: f64,
    pub median_active_docs: f64,
}

pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn write_fit(
    dict_path: &Path,
    codes_path: &Path,
    dcfg: &DictConfig,
    proj: &ProjectedGradients,
) -> Result<(Dictionary, CodeMatrix, FitReport)> {
    let result = fit(proj.values.view(), dcfg)?;
    let header = |h: gradient_atoms::TensorFileHeader| {
        h.with_attr("penalty", dcfg.penalty)
            .with_attr("seed", dcfg.seed)
            .with_attr("basis_fingerprint", proj.basis_fingerprint.clone())
    };
    result
        .dictionary
        .write(dict_path, header(result.dictionary.header()))?;
    result.codes.write(
        codes_path,
        header(result.codes.header()).with_doc_ids(proj.doc_ids.clone()),
    )?;
    let report = FitReport {
        atoms: dcfg.atoms,
        penalty: dcfg.penalty,
        reseeded: result.reseeded,
        density: result.codes.density(),
        median_active_docs: median(&result.codes.active_counts()),
        epoch_errors: result.epoch_errors,
    };
    Ok((result.dictionary, result.codes, report))
}

pub fn fit_dict(cfg: &PipelineConfig) -> Result<FitReport> {
    let ws = Workspace::new(cfg.workspace());
    let proj = ProjectedGradients::read(&ws.projected())?;
    let (_, _, report) = write_fit(&ws.dictionary(), &ws.codes(), &cfg.dict, &proj)?;
    info!(
        "fit-dict: density {:.4}, median active docs {}",
        report.density, report.median_active_docs
    );
    write_json(&ws.fit_report(), &report)?;
    Ok(report)
}

/// Task of each gradient row, when the rows come from the toy corpus.
fn doc_tasks(ws: &Workspace, gs: &GradientSet) -> Result<Option<Vec<Task>>> {
    if !ws.corpus().exists() || ImportRecord::load(ws)?.gradients.is_some() {
        return Ok(None);
    }
    let docs = load_corpus(ws)?;
    if docs.len() != gs.n_docs() || docs.iter().zip(&gs.doc_ids).any(|(d, id)| &d.doc_id != id) {
        return Ok(None);
    }
    Ok(Some(docs.iter().map(|d| d.task).collect()))
}

pub fn coherence(cfg: &PipelineConfig) -> Result<CoherenceSummary> {
    let ws = Workspace::new(cfg.workspace());
    let gs = GradientSet::read(&ws.gradients())?;
    let (codes, _) = CodeMatrix::read(&ws.codes())?;
    let mut summary = rank_atoms(&codes, &gs, &cfg.coherence)?;
    if let Some(tasks) = doc_tasks(&ws, &gs)? {
        for r in &mut summary.reports {
            let top: Vec<Task> = r.top_docs.iter().map(|d| tasks[d.doc_index]).collect();
            r.label = dominant_task(&top).map(|(t, share)| format!("{t} {:.0}%", share * 100.0));
        }
    }
    info!(
        "coherence: {} atoms above 0.5, {} above 0.1",
        summary.above_0_5, summary.above_0_1
    );
    write_json(&ws.coherence(), &summary)?;
    write_text(&ws.path("coherence.csv"), &summary.to_csv())?;
    Ok(summary)
}

/// Most frequent task and its share; ties go to the earlier task.
pub fn dominant_task(tasks: &[Task]) -> Option<(Task, f64)> {
    Task::ALL
        .into_iter()
        .map(|t| (t, task_share(tasks, t)))
        .filter(|&(_, s)| s > 0.0)
        .fold(None, |best: Option<(Task, f64)>, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomChoice {
    pub atom: usize,
    pub purity: f64,
    pub coherence: Option<f64>,
    /// Whether the purity threshold was met; otherwise this is the purest atom.
    pub meets_purity: bool,
}

/// The most coherent atom whose top documents are at least `min_purity`
/// from `task`, or failing that the purest atom.
pub fn select_atom(
    summary: &CoherenceSummary,
    tasks: &[Task],
    task: Task,
    min_purity: f64,
) -> Option<AtomChoice> {
    let scored: Vec<AtomChoice> = summary
        .reports
        .iter()
        .filter(|r| !r.top_docs.is_empty())
        .map(|r| {
            let top: Vec<Task> = r.top_docs.iter().map(|d| tasks[d.doc_index]).collect();
            let purity = task_share(&top, task);
            AtomChoice {
                atom: r.atom_id,
                purity,
                coherence: r.coherence,
                meets_purity: purity >= min_purity,
            }
        })
        .collect();
    scored.iter().copied().find(|c| c.meets_purity).or_else(|| {
        scored
            .iter()
            .copied()
            .fold(None, |best: Option<AtomChoice>, c| match best {
                Some(b) if b.purity >= c.purity => Some(b),
                _ => Some(c),
            })
    })
}

/// Writes the parameter-space vector of one atom.
pub fn unproject_atom(cfg: &PipelineConfig, atom: usize, out: &Path) -> Result<SteeringVector> {
    let ws = Workspace::new(cfg.workspace());
    let basis = EkfacBasis::read(&ws.basis())?;
    let (dict, _) = Dictionary::read(&ws.dictionary())?;
    let v = SteeringVector::from_atom(&dict, atom, &basis, &projection_for(cfg, &basis))?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    v.write(out, &basis.registry)?;
    info!("unproject: atom {atom}, norm {:.4}", v.norm());
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerRecord {
    pub task: Task,
    pub choice: AtomChoice,
    pub vector_norm: f64,
    pub suite_seed: u64,
    pub result: SteerResult,
}

fn suite_seed(cfg: &PipelineConfig, task: Task) -> u64 {
    let idx = Task::ALL.iter().position(|&t| t == task).unwrap_or(0) as u64;
    cfg.seed.wrapping_mul(1000).wrapping_add(100 + idx)
}

/// Steers one task, either along `atom` or along the atom chosen by
/// [`select_atom`].
pub fn steer_task(cfg: &PipelineConfig, task: Task, atom: Option<usize>) -> Result<SteerRecord> {
    let ws = Workspace::new(cfg.workspace());
    let summary: CoherenceSummary = read_json(&ws.coherence())?;
    let gs = GradientSet::read(&ws.gradients())?;
    let tasks = doc_tasks(&ws, &gs)?
        .ok_or_else(|| anyhow!("steering needs the toy corpus and model in the workspace"))?;
    let choice = match atom {
        Some(a) => {
            let report = summary
                .reports
                .iter()
                .find(|r| r.atom_id == a)
                .ok_or_else(|| anyhow!("atom {a} not in the coherence report"))?;
            let top: Vec<Task> = report.top_docs.iter().map(|d| tasks[d.doc_index]).collect();
            let purity = task_share(&top, task);
            AtomChoice {
                atom: a,
                purity,
                coherence: report.coherence,
                meets_purity: purity >= cfg.steer.min_purity,
            }
        }
        None => select_atom(&summary, &tasks, task, cfg.steer.min_purity)
            .ok_or_else(|| anyhow!("no atom has any activating documents"))?,
    };
    if !choice.meets_purity {
        warn!(
            "steer {task}: no atom reaches purity {}, using atom {} at {:.2}",
            cfg.steer.min_purity, choice.atom, choice.purity
        );
    }
    let params = load_params(&ws)?;
    let v = unproject_atom(cfg, choice.atom, &ws.steer_vector(task))?;
    let seed = suite_seed(cfg, task);
    let suite = build_eval_suite(task, seed, cfg.steer.suite_count)?;
    let result = run_sweep(
        &params,
        &v,
        &cfg.steer.sweep,
        &suite,
        &BehaviorDetector::for_task(task),
    )?;
    info!(
        "steer {task}: atom {}, baseline {:.2}, best up {:?}, best down {:?}",
        choice.atom,
        result.baseline.rate,
        result.best_up.map(|b| b.rate),
        result.best_down.map(|b| b.rate)
    );
    let record = SteerRecord {
        task,
        choice,
        vector_norm: v.norm(),
        suite_seed: seed,
        result,
    };
    write_json(&ws.steer_result(task), &record)?;
    write_text(
        &ws.steer_dir().join(format!("{task}_plot.csv")),
        &record.result.plot_data_csv(),
    )?;
    Ok(record)
}

pub fn steer(cfg: &PipelineConfig) -> Result<Vec<SteerRecord>> {
    cfg.steer
        .tasks
        .iter()
        .map(|&task| steer_task(cfg, task, None))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub penalty: f64,
    pub median_docs_per_atom: f64,
    pub atoms_coh_gt_0_5: usize,
    pub atoms_coh_gt_0_1: usize,
    pub codes_file: String,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("penalty,median_docs_per_atom,atoms_coh_gt_0_5,atoms_coh_gt_0_1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.penalty, r.median_docs_per_atom, r.atoms_coh_gt_0_5, r.atoms_coh_gt_0_1
        ));
    }
    out
}

/// Refits the dictionary at each penalty and scores it, keeping every
/// codes file so the table can be recomputed from disk.
pub fn sweep_penalty(cfg: &PipelineConfig, penalties: &[f64]) -> Result<Vec<SweepRow>> {
    if penalties.is_empty() {
        bail!("no penalties given");
    }
    let ws = Workspace::new(cfg.workspace());
    let proj = ProjectedGradients::read(&ws.projected())?;
    let gs = GradientSet::read(&ws.gradients())?;
    let mut rows = Vec::with_capacity(penalties.len());
    for (i, &penalty) in penalties.iter().enumerate() {
        let dcfg = DictConfig {
            penalty,
            ..cfg.dict.clone()
        };
        let name = format!("penalty_{i}");
        let dir = ws.sweep_dir();
        fs::create_dir_all(&dir)?;
        let codes_path = dir.join(format!("{name}_codes.gat"));
        let (_, codes, report) = write_fit(
            &dir.join(format!("{name}_dictionary.gat")),
            &codes_path,
            &dcfg,
            &proj,
        )?;
        let summary = rank_atoms(&codes, &gs, &cfg.coherence)?;
        info!(
            "sweep: penalty {penalty}: median {} docs/atom, {} > 0.5, {} > 0.1",
            report.median_active_docs, summary.above_0_5, summary.above_0_1
        );
        rows.push(SweepRow {
            penalty,
            median_docs_per_atom: report.median_active_docs,
            atoms_coh_gt_0_5: summary.above_0_5,
            atoms_coh_gt_0_1: summary.above_0_1,
            codes_file: format!("sweep/{name}_codes.gat"),
        });
    }
    write_json(&ws.sweep_dir().join("penalty_sweep.json"), &rows)?;
    write_text(&ws.sweep_dir().join("penalty_sweep.csv"), &sweep_csv(&rows))?;
    Ok(rows)
}

/// Every stage in order, then the report bundle.
pub fn run_all(cfg: &PipelineConfig) -> Result<crate::report::Summary> {
    cfg.validate()?;
    let ws = Workspace::new(cfg.workspace());
    ws.create()?;
    // A toy run owns the whole workspace, so earlier imports no longer apply.
    ImportRecord::clear(&ws)?;
    write_json(&ws.config(), cfg)?;
    timed("gen-corpus", || gen_corpus(cfg))?;
    timed("train", || train_model(cfg))?;
    timed("grads", || grads(cfg))?;
    timed("ekfac", || ekfac(cfg))?;
    timed("project", || project_stage(cfg))?;
    timed("fit-dict", || fit_dict(cfg))?;
    timed("coherence", || coherence(cfg))?;
    timed("steer", || steer(cfg))?;
    timed("report", || crate::report::report(cfg))
}
