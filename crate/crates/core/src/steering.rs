//! Weight-space steering with unprojected atoms.
//!
//! An atom is mapped back to parameter space, added to the model weights at
//! several scales in both signs, and a behavior detector is scored over an
//! evaluation suite for every perturbed model and the clean baseline.

use std::fmt;
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::ekfac::{unproject, EkfacBasis, PreconditioningMode, ProjectionConfig};
use crate::error::{Error, Result};
use crate::store::{GradientSet, ModuleRegistry, PayloadKind, TensorBundle};
use crate::toy::{apply_steering, forward_generate, payload, Task, Token, ToyModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub const BOTH: [Sign; 2] = [Sign::Plus, Sign::Minus];

    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Plus => "+",
            Sign::Minus => "-",
        })
    }
}

/// A full parameter-space direction derived from one atom.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub values: Array1<f64>,
    pub registry_fingerprint: String,
    pub source_atom: usize,
    pub preconditioning_mode: PreconditioningMode,
}

impl SteeringVector {
    /// Unprojects atom `atom` of `dict` through `basis`.
    pub fn from_atom(
        dict: &Dictionary,
        atom: usize,
        basis: &EkfacBasis,
        cfg: &ProjectionConfig,
    ) -> Result<Self> {
        if atom >= dict.n_atoms() {
            return Err(Error::Config(format!(
                "atom {} out of range (K = {})",
                atom,
                dict.n_atoms()
            )));
        }
        let values = unproject(dict.atom(atom), basis, cfg)?;
        let v = SteeringVector {
            values,
            registry_fingerprint: basis.registry.fingerprint(),
            source_atom: atom,
            preconditioning_mode: cfg.unproject_preconditioning,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(registry: &ModuleRegistry) -> Self {
        SteeringVector {
            values: Array1::zeros(registry.d),
            registry_fingerprint: registry.fingerprint(),
            source_atom: 0,
            preconditioning_mode: PreconditioningMode::Invert,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("steering vector entry {i}")));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }

    /// Stored as a one-row gradient file, since it lives in parameter space.
    pub fn write(&self, path: &Path, registry: &ModuleRegistry) -> Result<()> {
        if registry.fingerprint() != self.registry_fingerprint {
            return Err(Error::Registry("steering vector registry mismatch".into()));
        }
        let gs = GradientSet::new(
            registry.clone(),
            self.values.clone().insert_axis(ndarray::Axis(0)),
            vec![format!("atom-{}", self.source_atom)],
        )?;
        let mode = match self.preconditioning_mode {
            PreconditioningMode::Invert => "invert",
            PreconditioningMode::Keep => "keep",
        };
        let header = gs
            .header()
            .with_attr("source_atom", self.source_atom as u64)
            .with_attr("preconditioning_mode", mode);
        gs.write_with(path, header)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bundle = TensorBundle::read_kind(path, PayloadKind::Gradients)?;
        let gs = GradientSet::from_bundle(&bundle)?;
        if gs.n_docs() != 1 {
            return Err(Error::Shape(format!(
                "steering file holds {} rows, expected 1",
                gs.n_docs()
            )));
        }
        let preconditioning_mode = match bundle.header.attr_str("preconditioning_mode")? {
            "invert" => PreconditioningMode::Invert,
            "keep" => PreconditioningMode::Keep,
            other => {
                return Err(Error::Parse(format!(
                    "unknown preconditioning mode {other:?}"
                )))
            }
        };
        Ok(SteeringVector {
            values: gs.values.row(0).to_owned(),
            registry_fingerprint: gs.registry.fingerprint(),
            source_atom: bundle.header.attr_usize("source_atom")?,
            preconditioning_mode,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteerConfig {
    /// Strictly increasing positive perturbation scales.
    pub scales: Vec<f64>,
    /// Generation cap per prompt.
    pub max_len: usize,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            scales: vec![0.5, 1.0, 2.0, 5.0, 10.0],
            max_len: 8,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("steering scales must be positive".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "steering scales must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// What a detector looks at: a toy-model generation (with its prompt) or
/// free text from an external model.
#[derive(Debug, Clone, Copy)]
pub enum Observation<'a> {
    Tokens {
        prompt: &'a [Token],
        output: &'a [Token],
    },
    Text(&'a str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorRule {
    /// First generated token is one of `tokens`.
    FirstTokenInSet { tokens: Vec<Token> },
    /// `token` occurs at least `min_count` times.
    ContainsMinCount { token: Token, min_count: usize },
    /// Output starts with `prefix`.
    ExactPrefix { prefix: Vec<Token> },
    /// Output equals the prompt's data symbols (optionally reversed) then `E`.
    PayloadMatch { reversed: bool },
    /// At least `min_lines` lines match `pattern`; with `first_line_only`
    /// only the first line is tested.
    LinePattern {
        pattern: String,
        min_lines: usize,
        first_line_only: bool,
    },
}

#[derive(Debug, Clone)]
pub struct BehaviorDetector {
    pub name: String,
    pub rule: DetectorRule,
    regex: Option<Regex>,
}

impl BehaviorDetector {
    pub fn new(name: impl Into<String>, rule: DetectorRule) -> Result<Self> {
        let regex = match &rule {
            DetectorRule::LinePattern { pattern, .. } => Some(
                Regex::new(pattern)
                    .map_err(|e| Error::Config(format!("bad detector regex: {e}")))?,
            ),
            _ => None,
        };
        Ok(BehaviorDetector {
            name: name.into(),
            rule,
            regex,
        })
    }

    fn token_rule(name: &str, rule: DetectorRule) -> Self {
        BehaviorDetector::new(name, rule).expect("token rules need no compilation")
    }

    fn line_rule(name: &str, pattern: &str, min_lines: usize, first_line_only: bool) -> Self {
        BehaviorDetector::new(
            name,
            DetectorRule::LinePattern {
                pattern: pattern.to_string(),
                min_lines,
                first_line_only,
            },
        )
        .expect("built-in patterns compile")
    }

    /// First output token is `R`.
    pub fn refusal() -> Self {
        Self::token_rule(
            "refusal",
            DetectorRule::FirstTokenInSet {
                tokens: vec![Token::R],
            },
        )
    }

    /// At least two `L` tokens.
    pub fn list() -> Self {
        Self::token_rule(
            "list",
            DetectorRule::ContainsMinCount {
                token: Token::L,
                min_count: 2,
            },
        )
    }

    pub fn echo_match() -> Self {
        Self::token_rule("echo", DetectorRule::PayloadMatch { reversed: false })
    }

    pub fn reverse_match() -> Self {
        Self::token_rule("reverse", DetectorRule::PayloadMatch { reversed: true })
    }

    /// Toy detector for the behavior a task teaches.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Echo => Self::echo_match(),
            Task::Reverse => Self::reverse_match(),
            Task::Refuse => Self::refusal(),
            Task::List => Self::list(),
        }
    }

    pub fn text_yes_no() -> Self {
        Self::line_rule("yes_no", r"^\s*(Yes|No|True|False)\b", 1, true)
    }

    pub fn text_code() -> Self {
        Self::line_rule("code", r"```", 1, false)
    }

    pub fn text_refusal() -> Self {
        Self::line_rule(
            "refusal",
            r"(?i)(please provide|could you (please )?(provide|clarify|specify)|can you (please )?(provide|clarify|specify)|what (would you like|do you mean)|i need more (information|details|context))",
            1,
            false,
        )
    }

    pub fn text_bullets() -> Self {
        Self::line_rule("bullets", r"^\s*[-*•]", 2, false)
    }

    pub fn text_numbered() -> Self {
        Self::line_rule("numbered", r"^\s*\d+[.)]", 2, false)
    }

    pub fn detect(&self, obs: Observation<'_>) -> bool {
        match (&self.rule, obs) {
            (DetectorRule::FirstTokenInSet { tokens }, Observation::Tokens { output, .. }) => {
                output.first().is_some_and(|t| tokens.contains(t))
            }
            (
                DetectorRule::ContainsMinCount { token, min_count },
                Observation::Tokens { output, .. },
            ) => output.iter().filter(|t| *t == token).count() >= *min_count,
            (DetectorRule::ExactPrefix { prefix }, Observation::Tokens { output, .. }) => {
                output.starts_with(prefix)
            }
            (DetectorRule::PayloadMatch { reversed }, Observation::Tokens { prompt, output }) => {
                let mut expected = payload(prompt);
                if *reversed {
                    expected.reverse();
                }
                expected.push(Token::E);
                output == expected.as_slice()
            }
            (
                DetectorRule::LinePattern {
                    min_lines,
                    first_line_only,
                    ..
                },
                Observation::Text(text),
            ) => {
                let re = self.regex.as_ref().expect("line rules carry a regex");
                let hits = if *first_line_only {
                    text.lines().take(1).filter(|l| re.is_match(l)).count()
                } else {
                    text.lines().filter(|l| re.is_match(l)).count()
                };
                hits >= *min_lines
            }
            _ => false,
        }
    }
}

/// `detector` applied to `obs`.
pub fn detect(detector: &BehaviorDetector, obs: Observation<'_>) -> bool {
    detector.detect(obs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub tokens: Vec<Token>,
    pub task: Task,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub target: Task,
    pub prompts: Vec<EvalPrompt>,
}

/// `round(0.6 * count)` prompts of the target task, the rest drawn uniformly
/// from the other tasks.
pub fn build_eval_suite(task: Task, seed: u64, count: usize) -> Result<EvalSuite> {
    if count < 10 {
        return Err(Error::Config(format!(
            "evaluation suites need at least 10 prompts, got {count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_target = (0.6 * count as f64).round() as usize;
    let others: Vec<Task> = Task::ALL.into_iter().filter(|&t| t != task).collect();
    let prompts = (0..count)
        .map(|i| {
            let is_target = i < n_target;
            let t = if is_target {
                task
            } else {
                others[rng.random_range(0..others.len())]
            };
            EvalPrompt {
                tokens: t.sample_prompt(&mut rng),
                task: t,
                is_target,
            }
        })
        .collect();
    Ok(EvalSuite {
        target: task,
        prompts,
    })
}

/// Detection rates over a suite: pooled and per category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub rate: f64,
    pub target_rate: f64,
    pub neutral_rate: f64,
}

fn evaluate(
    params: &ToyModelParams,
    suite: &EvalSuite,
    detector: &BehaviorDetector,
    max_len: usize,
) -> Rates {
    let (mut hits, mut t_hits, mut t_total, mut n_hits, mut n_total) = (0, 0, 0, 0, 0);
    for p in &suite.prompts {
        let output = forward_generate(params, &p.tokens, max_len);
        let hit = detector.detect(Observation::Tokens {
            prompt: &p.tokens,
            output: &output,
        });
        hits += hit as usize;
        if p.is_target {
            t_total += 1;
            t_hits += hit as usize;
        } else {
            n_total += 1;
            n_hits += hit as usize;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Rates {
        rate: frac(hits, suite.prompts.len()),
        target_rate: frac(t_hits, t_total),
        neutral_rate: frac(n_hits, n_total),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerCell {
    pub scale: f64,
    pub sign: Sign,
    /// `None` when the perturbed parameters are not finite.
    pub rates: Option<Rates>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub scale: f64,
    pub sign: Sign,
    pub rate: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerResult {
    pub detector: String,
    pub source_atom: usize,
    pub baseline: Rates,
    /// Scales ascending, `+` before `-` at each scale.
    pub cells: Vec<SteerCell>,
    pub best_up: Option<BestCell>,
    pub best_down: Option<BestCell>,
}

impl SteerResult {
    pub fn baseline_rate(&self) -> f64 {
        self.baseline.rate
    }

    /// Baseline followed by every cell: `2 * |scales| + 1` entries.
    pub fn rate_table(&self) -> Vec<(Option<(f64, Sign)>, Option<f64>)> {
        std::iter::once((None, Some(self.baseline.rate)))
            .chain(
                self.cells
                    .iter()
                    .map(|c| (Some((c.scale, c.sign)), c.rates.map(|r| r.rate))),
            )
            .collect()
    }

    /// The sign whose best cell raises the detector rate most.
    pub fn toward_sign(&self) -> Option<Sign> {
        self.best_up.map(|b| b.sign)
    }

    /// `scale,sign,rate,target_rate,neutral_rate`, baseline as scale 0.
    pub fn plot_data_csv(&self) -> String {
        let mut out = String::from("scale,sign,rate,target_rate,neutral_rate\n");
        let b = self.baseline;
        out.push_str(&format!(
            "0,baseline,{:.6},{:.6},{:.6}\n",
            b.rate, b.target_rate, b.neutral_rate
        ));
        for c in &self.cells {
            match c.rates {
                Some(r) => out.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6}\n",
                    c.scale, c.sign, r.rate, r.target_rate, r.neutral_rate
                )),
                None => out.push_str(&format!("{},{},,,\n", c.scale, c.sign)),
            }
        }
        out
    }
}

fn extreme(cells: &[SteerCell], baseline: f64, up: bool) -> Option<BestCell> {
    let mut best: Option<BestCell> = None;
    for c in cells {
        let Some(r) = c.rates else { continue };
        let better = match best {
            None => true,
            Some(b) if up => r.rate > b.rate,
            Some(b) => r.rate < b.rate,
        };
        if better {
            best = Some(BestCell {
                scale: c.scale,
                sign: c.sign,
                rate: r.rate,
                delta: r.rate - baseline,
            });
        }
    }
    best
}

/// Baseline plus every `(scale, sign)` perturbation of `params` along `v`.
pub fn run_sweep(
    params: &ToyModelParams,
    v: &SteeringVector,
    cfg: &SteerConfig,
    suite: &EvalSuite,
    detector: &BehaviorDetector,
) -> Result<SteerResult> {
    cfg.validate()?;
    if v.registry_fingerprint != params.registry().fingerprint() {
        return Err(Error::Registry(
            "steering vector was built for a different module registry".into(),
        ));
    }
    let baseline = evaluate(params, suite, detector, cfg.max_len);
    let grid: Vec<(f64, Sign)> = cfg
        .scales
        .iter()
        .flat_map(|&s| Sign::BOTH.into_iter().map(move |sign| (s, sign)))
        .collect();
    let cells = grid
        .into_par_iter()
        .map(|(scale, sign)| {
            let steered = apply_steering(params, v, scale, sign)?;
            let rates = steered
                .is_finite()
                .then(|| evaluate(&steered, suite, detector, cfg.max_len));
            Ok(SteerCell { scale, sign, rates })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SteerResult {
        detector: detector.name.clone(),
        source_atom: v.source_atom,
        best_up: extreme(&cells, baseline.rate, true),
        best_down: extreme(&cells, baseline.rate, false),
        baseline,
        cells,
    })
}

/// One line of the steering table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringRow {
    pub atom: usize,
    pub behavior: String,
    pub coherence: Option<f64>,
    pub result: SteerResult,
}

fn pct(rate: f64) -> String {
    format!("{}%", (rate * 100.0).round() as i64)
}

fn pp(delta: f64) -> String {
    let v = (delta * 100.0).round() as i64;
    if v > 0 {
        format!("+{v}pp")
    } else {
        format!("{v}pp")
    }
}

pub const TABLE_COLUMNS: [&str; 8] = [
    "Atom",
    "Behavior",
    "Coherence",
    "Base",
    "Best↑",
    "Δ↑",
    "Best↓",
    "Δ↓",
];

/// Table cells, one row per result, formatted as percentages and
/// percentage-point deltas.
pub fn report_table(rows: &[SteeringRow]) -> Vec<[String; 8]> {
    rows.iter()
        .map(|r| {
            let fmt_best = |b: Option<BestCell>| match b {
                Some(b) => (pct(b.rate), pp(b.delta)),
                None => ("n/a".into(), "n/a".into()),
            };
            let (up, dup) = fmt_best(r.result.best_up);
            let (down, ddown) = fmt_best(r.result.best_down);
            [
                format!("#{}", r.atom),
                r.behavior.clone(),
                r.coherence
                    .map(|c| format!("{c:.3}"))
                    .unwrap_or_else(|| "n/a".into()),
                pct(r.result.baseline.rate),
                up,
                dup,
                down,
                ddown,
            ]
        })
        .collect()
}

pub fn report_csv(rows: &[SteeringRow]) -> String {
    let mut out = TABLE_COLUMNS.join(",");
    out.push('\n');
    for cells in report_table(rows) {
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Column-aligned plain-text rendering of [`report_table`].
pub fn report_text(rows: &[SteeringRow]) -> String {
    let body = report_table(rows);
    let mut widths: Vec<usize> = TABLE_COLUMNS.iter().map(|c| c.chars().count()).collect();
    for cells in &body {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = line(TABLE_COLUMNS.to_vec());
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .join("-+-"),
    );
    out.push('\n');
    for cells in &body {
        out.push_str(&line(cells.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Fraction of an atom's top documents that belong to `task`.
pub fn task_share(top_doc_tasks: &[Task], task: Task) -> f64 {
    if top_doc_tasks.is_empty() {
        return 0.0;
    }
    top_doc_tasks.iter().filter(|&&t| t == task).count() as f64 / top_doc_tasks.len() as f64
}
