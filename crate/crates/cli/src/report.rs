//! The final report bundle: JSON summary, CSV tables and plot data, all
//! rebuilt from workspace artifacts.

use std::collections::BTreeMap;

use anyhow::Result;
use gradient_atoms::steering::{report_csv, report_text, SteeringRow};
use gradient_atoms::toy::{forward_generate, TrainReport};
use gradient_atoms::{CodeMatrix, CoherenceSummary, GradientSet, Task};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::import::ImportRecord;
use crate::pipeline::{
    load_corpus, load_params, median, read_json, write_json, write_text, AtomChoice, SteerRecord,
    Workspace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    /// Share of corpus prompts answered exactly, per task.
    pub exact_match: BTreeMap<Task, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSummary {
    pub rank: usize,
    pub atom_id: usize,
    pub coherence: Option<f64>,
    pub active_docs: usize,
    /// Task counts among the top activating documents.
    pub top_doc_tasks: BTreeMap<Task, usize>,
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub task: Task,
    pub choice: AtomChoice,
    pub vector_norm: f64,
    pub baseline: f64,
    pub best_up: Option<f64>,
    pub best_down: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub training: Option<TrainingSummary>,
    pub atoms_above_0_5: usize,
    pub atoms_above_0_1: usize,
    pub median_active_docs: f64,
    pub code_density: f64,
    pub atoms: Vec<AtomSummary>,
    pub steering: Vec<SteeringSummary>,
}

fn behavior_name(task: Task) -> &'static str {
    match task {
        Task::Echo => "Echo",
        Task::Reverse => "Reverse",
        Task::Refuse => "Refusal",
        Task::List => "List",
    }
}

fn training_summary(ws: &Workspace) -> Result<Option<TrainingSummary>> {
    if !ws.train_report().exists() || ImportRecord::load(ws)?.gradients.is_some() {
        return Ok(None);
    }
    let report: TrainReport = read_json(&ws.train_report())?;
    let params = load_params(ws)?;
    let docs = load_corpus(ws)?;
    let mut exact_match = BTreeMap::new();
    for task in Task::ALL {
        let sub: Vec<_> = docs.iter().filter(|d| d.task == task).collect();
        if sub.is_empty() {
            continue;
        }
        let hits = sub
            .iter()
            .filter(|d| forward_generate(&params, &d.prompt, d.response.len() + 2) == d.response)
            .count();
        exact_match.insert(task, hits as f64 / sub.len() as f64);
    }
    Ok(Some(TrainingSummary {
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        loss_ratio: report.final_loss / report.initial_loss,
        exact_match,
    }))
}

/// Rebuilds the report bundle under `report/` from whatever stages have
/// run. Steering tables are included for every steering result on disk.
pub fn report(cfg: &PipelineConfig) -> Result<Summary> {
    let ws = Workspace::new(cfg.workspace());
    ws.require()?;
    let coherence: CoherenceSummary = read_json(&ws.coherence())?;
    let (codes, _) = CodeMatrix::read(&ws.codes())?;
    let training = training_summary(&ws)?;
    let tasks: Option<Vec<Task>> = if training.is_some() {
        let gs = GradientSet::read(&ws.gradients())?;
        let docs = load_corpus(&ws)?;
        (docs.len() == gs.n_docs()).then(|| docs.iter().map(|d| d.task).collect())
    } else {
        None
    };

    let atoms: Vec<AtomSummary> = coherence
        .reports
        .iter()
        .enumerate()
        .map(|(rank, r)| {
            let mut top_doc_tasks = BTreeMap::new();
            let mut purity = None;
            if let Some(tasks) = &tasks {
                for d in &r.top_docs {
                    *top_doc_tasks.entry(tasks[d.doc_index]).or_insert(0) += 1;
                }
                purity = top_doc_tasks
                    .values()
                    .max()
                    .map(|&m| m as f64 / r.top_docs.len() as f64);
            }
            AtomSummary {
                rank: rank + 1,
                atom_id: r.atom_id,
                coherence: r.coherence,
                active_docs: r.active_docs,
                top_doc_tasks,
                purity,
            }
        })
        .collect();

    let mut records = Vec::new();
    for task in Task::ALL {
        let path = ws.steer_result(task);
        if path.exists() {
            records.push(read_json::<SteerRecord>(&path)?);
        }
    }
    let rows: Vec<SteeringRow> = records
        .iter()
        .map(|r| SteeringRow {
            atom: r.choice.atom,
            behavior: behavior_name(r.task).to_string(),
            coherence: r.choice.coherence,
            result: r.result.clone(),
        })
        .collect();
    let steering = records
        .iter()
        .map(|r| SteeringSummary {
            task: r.task,
            choice: r.choice,
            vector_norm: r.vector_norm,
            baseline: r.result.baseline.rate,
            best_up: r.result.best_up.map(|b| b.rate),
            best_down: r.result.best_down.map(|b| b.rate),
        })
        .collect();

    let summary = Summary {
        training,
        atoms_above_0_5: coherence.above_0_5,
        atoms_above_0_1: coherence.above_0_1,
        median_active_docs: median(&codes.active_counts()),
        code_density: codes.density(),
        atoms,
        steering,
    };

    let dir = ws.report_dir();
    write_json(&dir.join("summary.json"), &summary)?;
    write_text(&dir.join("atoms.csv"), &atoms_csv(&summary.atoms))?;
    write_text(&dir.join("steering.csv"), &report_csv(&rows))?;
    write_text(&dir.join("steering.txt"), &report_text(&rows))?;
    for r in &records {
        write_text(
            &dir.join(format!("steering_{}_plot.csv", r.task)),
            &r.result.plot_data_csv(),
        )?;
    }
    if ws.train_report().exists() {
        let report: TrainReport = read_json(&ws.train_report())?;
        let mut curve = String::from("step,loss\n");
        for (i, l) in report.curve.iter().enumerate() {
            curve.push_str(&format!("{},{l}\n", i + 1));
        }
        write_text(&dir.join("train_curve.csv"), &curve)?;
    }
    let mut hist = String::from("atom_id,active_docs\n");
    for (j, n) in codes.active_counts().iter().enumerate() {
        hist.push_str(&format!("{j},{n}\n"));
    }
    write_text(&dir.join("atom_activity.csv"), &hist)?;
    Ok(summary)
}

fn atoms_csv(atoms: &[AtomSummary]) -> String {
    let mut out = String::from("rank,atom_id,coherence,active_docs,dominant_task,purity\n");
    for a in atoms {
        let dominant = a
            .top_doc_tasks
            .iter()
            .fold(None, |best: Option<(Task, usize)>, (&t, &n)| match best {
                Some(b) if b.1 >= n => Some(b),
                _ => Some((t, n)),
            })
            .map(|(t, _)| t.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            a.rank,
            a.atom_id,
            a.coherence.map(|c| format!("{c:.6}")).unwrap_or_default(),
            a.active_docs,
            dominant,
            a.purity.map(|p| format!("{p:.3}")).unwrap_or_default()
        ));
    }
    out
}
