use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use gradient_atoms::Task;

use crate::config::PipelineConfig;
use crate::{import, pipeline, report};

#[derive(Debug, Parser)]
#[command(
    name = "gatoms",
    version,
    about = "Sparse gradient atoms on a toy model"
)]
pub struct Cli {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed (corpus and evaluation suites).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Workspace directory; overrides `paths.workspace`.
    #[arg(long, global = true)]
    pub workspace: Option<PathBuf>,
    /// Dot-path override such as `dict.penalty=0.2`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Every stage from corpus to report.
    RunAll,
    /// Generate the synthetic four-task corpus.
    GenCorpus,
    /// Train the toy model on the corpus.
    Train,
    /// Per-document gradients of the trained model.
    Grads,
    /// Curvature statistics and the eigenbasis.
    Ekfac,
    /// Project and precondition the gradients, then unit-normalize them.
    Project,
    /// Learn the sparse dictionary and codes.
    FitDict,
    /// Score and rank atoms by the coherence of their top documents.
    Coherence,
    /// Map one atom back to parameter space.
    Unproject {
        #[arg(long)]
        atom: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Steering sweeps, for the configured tasks or one task.
    Steer {
        #[arg(long)]
        task: Option<Task>,
        /// Steer along this atom instead of the automatically chosen one.
        #[arg(long, requires = "task")]
        atom: Option<usize>,
    },
    /// Refit and score the dictionary at several penalties.
    SweepPenalty {
        #[arg(long, value_delimiter = ',')]
        penalties: Option<Vec<f64>>,
    },
    /// Validate an external gradients or KFAC statistics file and adopt it.
    Import { path: PathBuf },
    /// Rebuild the report bundle from the workspace.
    Report,
}

impl Cli {
    pub fn resolve_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(ws) = &self.workspace {
            cfg.paths.workspace = ws.clone();
        }
        let cfg = cfg.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one parsed command, printing a short human-readable result.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::RunAll => {
            let summary = pipeline::run_all(&cfg)?;
            println!(
                "{} atoms above 0.5 coherence, {} above 0.1; report in {}",
                summary.atoms_above_0_5,
                summary.atoms_above_0_1,
                cfg.workspace().join("report").display()
            );
        }
        Command::GenCorpus => {
            let docs = pipeline::gen_corpus(&cfg)?;
            println!("{} documents", docs.len());
        }
        Command::Train => {
            let r = pipeline::train_model(&cfg)?;
            println!("loss {:.4} -> {:.4}", r.initial_loss, r.final_loss);
        }
        Command::Grads => {
            let gs = pipeline::grads(&cfg)?;
            println!("{} gradients of dimension {}", gs.n_docs(), gs.registry.d);
        }
        Command::Ekfac => {
            let basis = pipeline::ekfac(&cfg)?;
            println!("basis with k_total = {}", basis.k_total());
        }
        Command::Project => {
            let p = pipeline::project_stage(&cfg)?;
            println!("projected {} x {}", p.values.nrows(), p.values.ncols());
        }
        Command::FitDict => {
            let r = pipeline::fit_dict(&cfg)?;
            println!(
                "{} atoms, density {:.4}, median active docs {}",
                r.atoms, r.density, r.median_active_docs
            );
        }
        Command::Coherence => {
            let s = pipeline::coherence(&cfg)?;
            print!("{}", s.to_csv());
        }
        Command::Unproject { atom, out } => {
            let out = out
                .clone()
                .unwrap_or_else(|| cfg.workspace().join(format!("atom_{atom}_vector.gat")));
            let v = pipeline::unproject_atom(&cfg, *atom, &out)?;
            println!("{} (norm {:.6})", out.display(), v.norm());
        }
        Command::Steer { task, atom } => {
            let records = match task {
                Some(t) => vec![pipeline::steer_task(&cfg, *t, *atom)?],
                None => pipeline::steer(&cfg)?,
            };
            for r in records {
                print!(
                    "{}: atom {}\n{}",
                    r.task,
                    r.choice.atom,
                    r.result.plot_data_csv()
                );
            }
        }
        Command::SweepPenalty { penalties } => {
            let penalties = penalties
                .clone()
                .unwrap_or_else(|| cfg.sweep.penalties.clone());
            let rows = pipeline::sweep_penalty(&cfg, &penalties)?;
            print!("{}", pipeline::sweep_csv(&rows));
        }
        Command::Import { path } => {
            let r = import::import(&cfg, path)?;
            println!(
                "imported {} ({} {})",
                r.kind,
                r.count,
                if r.kind == gradient_atoms::PayloadKind::Gradients {
                    "documents"
                } else {
                    "tokens"
                }
            );
            for m in &r.registry.modules {
                println!(
                    "  {} {}x{} at offset {}",
                    m.name, m.out_dim, m.in_dim, m.offset
                );
            }
            println!("  d = {}", r.registry.d);
        }
        Command::Report => {
            report::report(&cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.workspace().join("report/steering.txt"))?
            );
        }
    }
    Ok(())
}
