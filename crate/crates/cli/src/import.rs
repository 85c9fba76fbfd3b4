//! Ingestion of externally produced gradient and curvature files.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use gradient_atoms::store::TensorBundle;
use gradient_atoms::{Error, GradientSet, KfacStats, ModuleRegistry, PayloadKind};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::pipeline::{read_json, write_json, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportedFile {
    pub source: String,
    pub registry_fingerprint: String,
}

/// Which workspace inputs came from outside the toy pipeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportRecord {
    pub gradients: Option<ImportedFile>,
    pub kfac_stats: Option<ImportedFile>,
}

impl ImportRecord {
    pub fn load(ws: &Workspace) -> Result<Self> {
        let path = ws.imports();
        if path.exists() {
            read_json(&path)
        } else {
            Ok(ImportRecord::default())
        }
    }

    pub fn clear(ws: &Workspace) -> Result<()> {
        let path = ws.imports();
        if path.exists() {
            fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportReport {
    pub kind: PayloadKind,
    pub registry: ModuleRegistry,
    /// Document rows for gradients, tokens for statistics.
    pub count: usize,
    pub warnings: Vec<String>,
}

/// Validates `path` and copies it verbatim into the workspace as the
/// gradients or KFAC statistics input.
///
/// Gradients must declare `reduction = "sum"`; a missing declaration is
/// accepted with a warning. Both files must agree on the module registry
/// when the other one was imported earlier.
pub fn import(cfg: &PipelineConfig, path: &Path) -> Result<ImportReport> {
    let ws = Workspace::new(cfg.workspace());
    ws.create()?;
    let bundle = TensorBundle::read(path)?;
    let mut warnings = Vec::new();
    let (kind, registry, count) = match bundle.header.payload_kind {
        PayloadKind::Gradients => {
            match bundle
                .header
                .attrs
                .get("reduction")
                .and_then(|v| v.as_str())
            {
                Some("sum") => {}
                Some(other) => {
                    return Err(Error::Config(format!(
                    "gradients were reduced with {other:?}; the pipeline expects per-document sums"
                ))
                    .into())
                }
                None => warnings.push(
                    "gradient file does not declare its token reduction; assuming sum".to_string(),
                ),
            }
            let gs = GradientSet::from_bundle(&bundle)?;
            (PayloadKind::Gradients, gs.registry, gs.values.nrows())
        }
        PayloadKind::KfacStats => {
            let stats = KfacStats::from_bundle(&bundle)?;
            (PayloadKind::KfacStats, stats.registry, stats.token_count)
        }
        other => {
            return Err(Error::Kind {
                expected: "gradients or kfac_stats".into(),
                found: other.to_string(),
            }
            .into())
        }
    };
    let mut record = ImportRecord::load(&ws)?;
    let entry = ImportedFile {
        source: path.display().to_string(),
        registry_fingerprint: registry.fingerprint(),
    };
    let other = match kind {
        PayloadKind::Gradients => record.kfac_stats.as_ref(),
        _ => record.gradients.as_ref(),
    };
    if let Some(o) = other {
        if o.registry_fingerprint != entry.registry_fingerprint {
            return Err(Error::Registry(format!(
                "{} does not share the module registry of the earlier import {}",
                path.display(),
                o.source
            ))
            .into());
        }
    }
    let dest = match kind {
        PayloadKind::Gradients => ws.gradients(),
        _ => ws.kfac_stats(),
    };
    fs::copy(path, &dest)
        .with_context(|| format!("copying {} to {}", path.display(), dest.display()))?;
    match kind {
        PayloadKind::Gradients => record.gradients = Some(entry),
        _ => record.kfac_stats = Some(entry),
    }
    write_json(&ws.imports(), &record)?;
    for w in &warnings {
        warn!("import: {w}");
    }
    Ok(ImportReport {
        kind,
        registry,
        count,
        warnings,
    })
}
