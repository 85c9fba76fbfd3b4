//! Kronecker-factored curvature in its eigenbasis (EKFAC), and the
//! projection/preconditioning of gradients into that basis.
//!
//! For a linear module with input `a` and pre-activation gradient `δ`, KFAC
//! approximates the Fisher block by `S ⊗ A` with `A = E[a aᵀ]` and
//! `S = E[δ δᵀ]`. With `A = Q_A Λ_A Q_Aᵀ` and `S = Q_S Λ_S Q_Sᵀ`, a gradient
//! matrix `G` (out × in) rotates to `G̃ = Q_Sᵀ G Q_A`. KFAC assigns component
//! `(i, j)` the variance `Λ_S[i] Λ_A[j]`; EKFAC refits it as
//! `E[(Q_Sᵀ δ)_i² (Q_Aᵀ a)_j²]` over the same tokens.
//!
//! Projection keeps the top-`k` components per module (by eigenvalue) and
//! divides by `sqrt(λ + ε)`. Unprojection is the pseudo-inverse of that map.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{
    encode, push_matrix, write_tensor_file, GradientSet, ModuleRegistry, PayloadKind, TensorBundle,
    TensorFileHeader,
};

/// Tolerance on `‖QᵀQ − I‖_max` for a valid basis.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

/// Module inputs and pre-activation gradients observed at one token,
/// indexed by module in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSample {
    pub inputs: Vec<Array1<f64>>,
    pub grads: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleStats {
    /// `in × in` second moment of module inputs.
    pub a: Array2<f64>,
    /// `out × out` second moment of pre-activation gradients.
    pub s: Array2<f64>,
}

/// Raw token-averaged KFAC statistics, as collected from a model or imported.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacStats {
    pub registry: ModuleRegistry,
    pub modules: Vec<ModuleStats>,
    pub token_count: usize,
}

impl KfacStats {
    /// Means of `a aᵀ` and `δ δᵀ`, summed in sample order.
    pub fn from_samples(registry: ModuleRegistry, samples: &[TokenSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("no token samples for KFAC statistics".into()));
        }
        let mut modules: Vec<ModuleStats> = registry
            .modules
            .iter()
            .map(|m| ModuleStats {
                a: Array2::zeros((m.in_dim, m.in_dim)),
                s: Array2::zeros((m.out_dim, m.out_dim)),
            })
            .collect();
        for sample in samples {
            check_sample(&registry, sample)?;
            for (m, stats) in modules.iter_mut().enumerate() {
                add_outer(&mut stats.a, sample.inputs[m].view());
                add_outer(&mut stats.s, sample.grads[m].view());
            }
        }
        let n = samples.len() as f64;
        for stats in &mut modules {
            stats.a /= n;
            stats.s /= n;
        }
        Ok(KfacStats {
            registry,
            modules,
            token_count: samples.len(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut header = TensorFileHeader::new(PayloadKind::KfacStats)
            .with_registry(self.registry.clone())
            .with_attr("token_count", self.token_count as u64);
        let mut payload = Vec::new();
        for (spec, stats) in self.registry.modules.iter().zip(&self.modules) {
            header = header
                .with_tensor(format!("{}.A", spec.name), vec![spec.in_dim, spec.in_dim])
                .with_tensor(format!("{}.S", spec.name), vec![spec.out_dim, spec.out_dim]);
            push_matrix(&mut payload, stats.a.view());
            push_matrix(&mut payload, stats.s.view());
        }
        write_tensor_file(path, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bundle = TensorBundle::read_kind(path, PayloadKind::KfacStats)?;
        Self::from_bundle(&bundle)
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        bundle.header.expect_kind(PayloadKind::KfacStats)?;
        let registry = bundle.header.require_registry()?.clone();
        registry.validate()?;
        let token_count = bundle.header.attr_usize("token_count")?;
        let mut modules = Vec::new();
        for spec in &registry.modules {
            let a = bundle.matrix(&format!("{}.A", spec.name))?;
            let s = bundle.matrix(&format!("{}.S", spec.name))?;
            if a.dim() != (spec.in_dim, spec.in_dim) || s.dim() != (spec.out_dim, spec.out_dim) {
                return Err(Error::Layout(format!(
                    "factor shapes for module {:?} do not match registry",
                    spec.name
                )));
            }
            modules.push(ModuleStats { a, s });
        }
        Ok(KfacStats {
            registry,
            modules,
            token_count,
        })
    }
}

fn check_sample(registry: &ModuleRegistry, sample: &TokenSample) -> Result<()> {
    if sample.inputs.len() != registry.len() || sample.grads.len() != registry.len() {
        return Err(Error::Shape(format!(
            "token sample covers {} modules, registry has {}",
            sample.inputs.len(),
            registry.len()
        )));
    }
    for (m, spec) in registry.modules.iter().enumerate() {
        if sample.inputs[m].len() != spec.in_dim || sample.grads[m].len() != spec.out_dim {
            return Err(Error::Shape(format!(
                "token sample for module {:?} has dims ({}, {}), expected ({}, {})",
                spec.name,
                sample.grads[m].len(),
                sample.inputs[m].len(),
                spec.out_dim,
                spec.in_dim
            )));
        }
    }
    Ok(())
}

fn add_outer(acc: &mut Array2<f64>, v: ArrayView1<'_, f64>) {
    for (i, &vi) in v.iter().enumerate() {
        if vi != 0.0 {
            acc.row_mut(i).scaled_add(vi, &v);
        }
    }
}

/// Symmetrized, validated KFAC factors.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacFactors {
    pub registry: ModuleRegistry,
    pub modules: Vec<ModuleStats>,
    pub token_count: usize,
}

fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    (m + &m.t()) * 0.5
}

pub fn estimate_factors(stats: &KfacStats) -> Result<KfacFactors> {
    if stats.token_count < 1 {
        return Err(Error::Empty("KFAC statistics from zero tokens".into()));
    }
    let mut modules = Vec::with_capacity(stats.modules.len());
    for (spec, m) in stats.registry.modules.iter().zip(&stats.modules) {
        if m.a.iter().chain(m.s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "KFAC factor of module {:?}",
                spec.name
            )));
        }
        modules.push(ModuleStats {
            a: symmetrize(&m.a),
            s: symmetrize(&m.s),
        });
    }
    Ok(KfacFactors {
        registry: stats.registry.clone(),
        modules,
        token_count: stats.token_count,
    })
}

/// Symmetric eigendecomposition with eigenvalues sorted descending and each
/// eigenvector's largest-magnitude entry made positive.
pub fn symmetric_eigen(m: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Shape(format!(
            "matrix is {}x{}, not square",
            n,
            m.ncols()
        )));
    }
    let max_asym = m
        .iter()
        .zip(m.t().iter())
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if max_asym > SYMMETRY_TOL * scale {
        return Err(Error::Eigen(format!(
            "matrix is not symmetric ({max_asym:e})"
        )));
    }
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let eig = SymmetricEigen::try_new(dm, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut q = Array2::zeros((n, n));
    let mut values = Array1::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 0..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let flip = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            q[[i, dst]] = flip * col[i];
        }
    }
    if q.iter().chain(values.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite eigen output".into()));
    }
    Ok((q, values))
}

/// Eigendecomposition of one module's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleEigen {
    pub q_a: Array2<f64>,
    pub eig_a: Array1<f64>,
    pub q_s: Array2<f64>,
    pub eig_s: Array1<f64>,
    /// `eig_s[i] * eig_a[j]` at flat index `i * in + j`.
    pub kfac_lambda: Array1<f64>,
}

pub fn eigendecompose(factors: &KfacFactors) -> Result<Vec<ModuleEigen>> {
    factors
        .registry
        .modules
        .iter()
        .zip(&factors.modules)
        .map(|(spec, m)| {
            let (q_a, eig_a) = symmetric_eigen(&m.a)?;
            let (q_s, eig_s) = symmetric_eigen(&m.s)?;
            for (which, vals) in [("A", &eig_a), ("S", &eig_s)] {
                let top = vals.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
                if let Some(&low) = vals.iter().find(|&&v| v < -PSD_TOL * top) {
                    return Err(Error::Eigen(format!(
                        "factor {which} of module {:?} is not PSD (eigenvalue {low:e})",
                        spec.name
                    )));
                }
            }
            let eig_a = eig_a.mapv(|v| v.max(0.0));
            let eig_s = eig_s.mapv(|v| v.max(0.0));
            let kfac_lambda = eig_s
                .iter()
                .flat_map(|&si| eig_a.iter().map(move |&aj| si * aj))
                .collect();
            Ok(ModuleEigen {
                q_a,
                eig_a,
                q_s,
                eig_s,
                kfac_lambda,
            })
        })
        .collect()
}

/// EKFAC eigenvalue refit: mean over tokens of the squared rotated per-token
/// gradient `(Q_Sᵀ δ)(Q_Aᵀ a)ᵀ`, flattened row-major.
pub fn ekfac_correct_eigenvalues(
    registry: &ModuleRegistry,
    eigen: &[ModuleEigen],
    samples: &[TokenSample],
) -> Result<Vec<Array1<f64>>> {
    if eigen.len() != registry.len() {
        return Err(Error::Shape(format!(
            "{} module bases for {} registry modules",
            eigen.len(),
            registry.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Empty("no token samples for EKFAC refit".into()));
    }
    let mut sums: Vec<Array2<f64>> = registry
        .modules
        .iter()
        .map(|m| Array2::zeros((m.out_dim, m.in_dim)))
        .collect();
    for sample in samples {
        check_sample(registry, sample)?;
        for (m, e) in eigen.iter().enumerate() {
            let ra = e.q_a.t().dot(&sample.inputs[m]).mapv(|v| v * v);
            let rs = e.q_s.t().dot(&sample.grads[m]).mapv(|v| v * v);
            let acc = &mut sums[m];
            for (i, &si) in rs.iter().enumerate() {
                acc.row_mut(i).scaled_add(si, &ra);
            }
        }
    }
    let n = samples.len() as f64;
    Ok(sums
        .into_iter()
        .map(|s| s.into_iter().map(|v| v / n).collect())
        .collect())
}

/// Indices of the `k` largest entries, descending; ties by ascending index.
pub fn select_topk(lambda: ArrayView1<'_, f64>, k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > lambda.len() {
        return Err(Error::Config(format!(
            "k = {} out of range 1..={}",
            k,
            lambda.len()
        )));
    }
    let mut idx: Vec<usize> = (0..lambda.len()).collect();
    idx.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Refit per-component variances in the eigenbasis.
    #[default]
    Ekfac,
    /// Products of factor eigenvalues.
    Kfac,
}

/// Whether unprojection multiplies back by `sqrt(λ + ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditioningMode {
    #[default]
    Invert,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    /// Eigencomponents kept per module.
    pub k: usize,
    pub epsilon: f64,
    pub lambda_mode: LambdaMode,
    pub unproject_preconditioning: PreconditioningMode,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            k: 16,
            epsilon: 1e-8,
            lambda_mode: LambdaMode::Ekfac,
            unproject_preconditioning: PreconditioningMode::Invert,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self, registry: &ModuleRegistry) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        for m in &registry.modules {
            if self.k < 1 || self.k > m.numel() {
                return Err(Error::Config(format!(
                    "k = {} out of range for module {:?} with {} components",
                    self.k,
                    m.name,
                    m.numel()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleBasis {
    pub q_a: Array2<f64>,
    pub q_s: Array2<f64>,
    /// Nonnegative variance per rotated component, row-major `(out, in)`.
    pub lambda: Array1<f64>,
    /// `k` flat indices into `lambda`, by descending value.
    pub topk: Vec<usize>,
}

/// Per-module eigenbasis with eigenvalues and retained components.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfacBasis {
    pub registry: ModuleRegistry,
    pub modules: Vec<ModuleBasis>,
    pub k: usize,
    pub lambda_mode: LambdaMode,
}

impl EkfacBasis {
    /// Assembles a basis from eigenvectors and the chosen eigenvalues.
    /// Negative eigenvalues are clamped to zero.
    pub fn new(
        registry: ModuleRegistry,
        eigen: &[ModuleEigen],
        lambdas: Vec<Array1<f64>>,
        k: usize,
        lambda_mode: LambdaMode,
    ) -> Result<Self> {
        if eigen.len() != registry.len() || lambdas.len() != registry.len() {
            return Err(Error::Shape("basis parts do not cover every module".into()));
        }
        let mut modules = Vec::with_capacity(registry.len());
        for ((spec, e), lambda) in registry.modules.iter().zip(eigen).zip(lambdas) {
            if lambda.len() != spec.numel() {
                return Err(Error::Shape(format!(
                    "lambda for module {:?} has {} entries, expected {}",
                    spec.name,
                    lambda.len(),
                    spec.numel()
                )));
            }
            let lambda = lambda.mapv(|v| v.max(0.0));
            let topk = select_topk(lambda.view(), k)?;
            modules.push(ModuleBasis {
                q_a: e.q_a.clone(),
                q_s: e.q_s.clone(),
                lambda,
                topk,
            });
        }
        let basis = EkfacBasis {
            registry,
            modules,
            k,
            lambda_mode,
        };
        basis.validate()?;
        Ok(basis)
    }

    pub fn k_total(&self) -> usize {
        self.k * self.registry.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.registry.validate()?;
        for (spec, m) in self.registry.modules.iter().zip(&self.modules) {
            if m.q_a.dim() != (spec.in_dim, spec.in_dim)
                || m.q_s.dim() != (spec.out_dim, spec.out_dim)
            {
                return Err(Error::Layout(format!(
                    "eigenvector shapes for module {:?} do not match registry",
                    spec.name
                )));
            }
            for (which, q) in [("Q_A", &m.q_a), ("Q_S", &m.q_s)] {
                let err = orthogonality_error(q.view());
                if !(err < ORTHOGONALITY_TOL) {
                    return Err(Error::Eigen(format!(
                        "{which} of module {:?} is not orthogonal (error {err:e})",
                        spec.name
                    )));
                }
            }
            if m.lambda.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "eigenvalues of module {:?} must be finite and nonnegative",
                    spec.name
                )));
            }
            if m.topk.len() != self.k || m.topk.iter().any(|&i| i >= m.lambda.len()) {
                return Err(Error::Layout(format!(
                    "top-k indices of module {:?} are inconsistent with k = {}",
                    spec.name, self.k
                )));
            }
        }
        Ok(())
    }

    fn to_file(&self) -> (TensorFileHeader, Vec<f64>) {
        let mode = match self.lambda_mode {
            LambdaMode::Ekfac => "ekfac",
            LambdaMode::Kfac => "kfac",
        };
        let mut header = TensorFileHeader::new(PayloadKind::Basis)
            .with_registry(self.registry.clone())
            .with_attr("k", self.k as u64)
            .with_attr("lambda_mode", mode);
        let mut payload = Vec::new();
        for (spec, m) in self.registry.modules.iter().zip(&self.modules) {
            let n = &spec.name;
            header = header
                .with_tensor(format!("{n}.q_a"), vec![spec.in_dim, spec.in_dim])
                .with_tensor(format!("{n}.q_s"), vec![spec.out_dim, spec.out_dim])
                .with_tensor(format!("{n}.lambda"), vec![spec.numel()])
                .with_tensor(format!("{n}.topk"), vec![self.k]);
            push_matrix(&mut payload, m.q_a.view());
            push_matrix(&mut payload, m.q_s.view());
            payload.extend(m.lambda.iter().copied());
            payload.extend(m.topk.iter().map(|&i| i as f64));
        }
        (header, payload)
    }

    /// SHA-256 of the serialized basis, hex encoded.
    pub fn fingerprint(&self) -> String {
        let (header, payload) = self.to_file();
        let bytes = encode(&header, &payload).expect("basis encodes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (header, payload) = self.to_file();
        write_tensor_file(path, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bundle = TensorBundle::read_kind(path, PayloadKind::Basis)?;
        let h = &bundle.header;
        let registry = h.require_registry()?.clone();
        let k = h.attr_usize("k")?;
        let lambda_mode = match h.attr_str("lambda_mode")? {
            "ekfac" => LambdaMode::Ekfac,
            "kfac" => LambdaMode::Kfac,
            other => return Err(Error::Parse(format!("unknown lambda_mode {other:?}"))),
        };
        let mut modules = Vec::new();
        for spec in &registry.modules {
            let n = &spec.name;
            let topk = bundle
                .vector(&format!("{n}.topk"))?
                .into_iter()
                .map(|v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Parse(format!("bad top-k index {v}")))
                    }
                })
                .collect::<Result<_>>()?;
            modules.push(ModuleBasis {
                q_a: bundle.matrix(&format!("{n}.q_a"))?,
                q_s: bundle.matrix(&format!("{n}.q_s"))?,
                lambda: Array1::from(bundle.vector(&format!("{n}.lambda"))?),
                topk,
            });
        }
        let basis = EkfacBasis {
            registry,
            modules,
            k,
            lambda_mode,
        };
        basis.validate()?;
        Ok(basis)
    }
}

/// `‖QᵀQ − I‖_max`.
pub fn orthogonality_error(q: ArrayView2<'_, f64>) -> f64 {
    let g = q.t().dot(&q);
    g.indexed_iter().fold(0.0f64, |acc, ((i, j), &v)| {
        let target = if i == j { 1.0 } else { 0.0 };
        acc.max((v - target).abs())
    })
}

/// Builds the basis end to end: symmetrize, eigendecompose, optionally refit
/// eigenvalues on `samples`, select top-k.
///
/// EKFAC mode without samples is an error; use [`LambdaMode::Kfac`] when only
/// factor statistics are available.
pub fn build_basis(
    stats: &KfacStats,
    samples: Option<&[TokenSample]>,
    cfg: &ProjectionConfig,
) -> Result<EkfacBasis> {
    cfg.validate(&stats.registry)?;
    let factors = estimate_factors(stats)?;
    let eigen = eigendecompose(&factors)?;
    let lambdas = match (cfg.lambda_mode, samples) {
        (LambdaMode::Ekfac, Some(samples)) => {
            ekfac_correct_eigenvalues(&factors.registry, &eigen, samples)?
        }
        (LambdaMode::Ekfac, None) => {
            return Err(Error::Config(
                "EKFAC eigenvalues need per-token samples; use lambda_mode = kfac".into(),
            ))
        }
        (LambdaMode::Kfac, _) => eigen.iter().map(|e| e.kfac_lambda.clone()).collect(),
    };
    EkfacBasis::new(
        factors.registry.clone(),
        &eigen,
        lambdas,
        cfg.k,
        cfg.lambda_mode,
    )
}

/// Projected, preconditioned gradients (`N × k_total`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGradients {
    pub values: Array2<f64>,
    pub normalized: bool,
    pub basis_fingerprint: String,
    pub doc_ids: Vec<String>,
}

impl ProjectedGradients {
    pub fn write(&self, path: &Path) -> Result<()> {
        let header = TensorFileHeader::new(PayloadKind::Projected)
            .with_tensor("projected", vec![self.values.nrows(), self.values.ncols()])
            .with_doc_ids(self.doc_ids.clone())
            .with_attr("normalized", self.normalized)
            .with_attr("basis_fingerprint", self.basis_fingerprint.clone());
        let mut payload = Vec::with_capacity(self.values.len());
        push_matrix(&mut payload, self.values.view());
        write_tensor_file(path, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bundle = TensorBundle::read_kind(path, PayloadKind::Projected)?;
        let h = &bundle.header;
        Ok(ProjectedGradients {
            values: bundle.matrix("projected")?,
            normalized: h
                .attr("normalized")?
                .as_bool()
                .ok_or_else(|| Error::Parse("normalized is not a boolean".into()))?,
            basis_fingerprint: h.attr_str("basis_fingerprint")?.to_string(),
            doc_ids: h
                .doc_ids
                .clone()
                .ok_or_else(|| Error::Parse("projected file has no doc_ids".into()))?,
        })
    }
}

fn sqrt_damped(lambda: f64, epsilon: f64) -> f64 {
    (lambda.max(0.0) + epsilon).sqrt()
}

/// Projects one flat gradient: rotate, gather top-k, precondition.
pub fn project_row(
    basis: &EkfacBasis,
    cfg: &ProjectionConfig,
    g: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    if g.len() != basis.registry.d {
        return Err(Error::Registry(format!(
            "gradient has length {} but basis registry has d = {}",
            g.len(),
            basis.registry.d
        )));
    }
    let mut out = Array1::zeros(basis.k_total());
    for (m, (spec, mb)) in basis
        .registry
        .modules
        .iter()
        .zip(&basis.modules)
        .enumerate()
    {
        let block = g
            .slice(s![spec.range()])
            .into_shape_with_order((spec.out_dim, spec.in_dim))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let rotated = mb.q_s.t().dot(&block).dot(&mb.q_a);
        let flat = rotated
            .as_slice()
            .expect("freshly computed product is contiguous");
        for (c, &idx) in mb.topk.iter().enumerate() {
            out[m * basis.k + c] = flat[idx] / sqrt_damped(mb.lambda[idx], cfg.epsilon);
        }
    }
    Ok(out)
}

fn check_config(basis: &EkfacBasis, cfg: &ProjectionConfig) -> Result<()> {
    cfg.validate(&basis.registry)?;
    if cfg.k != basis.k {
        return Err(Error::Config(format!(
            "projection k = {} but basis was built with k = {}",
            cfg.k, basis.k
        )));
    }
    Ok(())
}

/// Scales each nonzero row to unit L2 norm in place.
pub(crate) fn normalize_rows_in_place(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

pub fn project(
    gs: &GradientSet,
    basis: &EkfacBasis,
    cfg: &ProjectionConfig,
    normalize: bool,
) -> Result<ProjectedGradients> {
    check_config(basis, cfg)?;
    if gs.registry != basis.registry {
        return Err(Error::Registry(
            "gradient set and basis have different module registries".into(),
        ));
    }
    let rows: Vec<Array1<f64>> = gs
        .values
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|g| project_row(basis, cfg, g))
        .collect::<Result<_>>()?;
    let mut values = Array2::zeros((gs.n_docs(), basis.k_total()));
    for (mut dst, row) in values.axis_iter_mut(Axis(0)).zip(&rows) {
        dst.assign(row);
    }
    if normalize {
        normalize_rows_in_place(&mut values);
    }
    Ok(ProjectedGradients {
        values,
        normalized: normalize,
        basis_fingerprint: basis.fingerprint(),
        doc_ids: gs.doc_ids.clone(),
    })
}

/// Maps a `k_total` coefficient vector back to a length-`d` parameter-space
/// vector: scatter, undo preconditioning (unless `Keep`), un-rotate.
pub fn unproject(
    z: ArrayView1<'_, f64>,
    basis: &EkfacBasis,
    cfg: &ProjectionConfig,
) -> Result<Array1<f64>> {
    check_config(basis, cfg)?;
    if z.len() != basis.k_total() {
        return Err(Error::Shape(format!(
            "coefficient vector has length {}, expected k_total = {}",
            z.len(),
            basis.k_total()
        )));
    }
    let mut out = Array1::zeros(basis.registry.d);
    for (m, (spec, mb)) in basis
        .registry
        .modules
        .iter()
        .zip(&basis.modules)
        .enumerate()
    {
        let mut rotated = Array2::<f64>::zeros((spec.out_dim, spec.in_dim));
        {
            let flat = rotated.as_slice_mut().unwrap();
            for (c, &idx) in mb.topk.iter().enumerate() {
                let coef = z[m * basis.k + c];
                flat[idx] = match cfg.unproject_preconditioning {
                    PreconditioningMode::Invert => coef * sqrt_damped(mb.lambda[idx], cfg.epsilon),
                    PreconditioningMode::Keep => coef,
                };
            }
        }
        let block = mb.q_s.dot(&rotated).dot(&mb.q_a.t());
        out.slice_mut(s![spec.range()])
            .assign(&Array1::from_iter(block.iter().copied()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single_module_basis(
        q_a: Array2<f64>,
        q_s: Array2<f64>,
        lambda: Array1<f64>,
        k: usize,
    ) -> EkfacBasis {
        let registry = ModuleRegistry::from_shapes([("m", q_s.nrows(), q_a.nrows())]).unwrap();
        let eigen = ModuleEigen {
            eig_a: Array1::zeros(q_a.nrows()),
            eig_s: Array1::zeros(q_s.nrows()),
            kfac_lambda: Array1::zeros(lambda.len()),
            q_a,
            q_s,
        };
        EkfacBasis::new(registry, &[eigen], vec![lambda], k, LambdaMode::Ekfac).unwrap()
    }

    fn cfg(k: usize, epsilon: f64) -> ProjectionConfig {
        ProjectionConfig {
            k,
            epsilon,
            ..ProjectionConfig::default()
        }
    }

    #[test]
    fn topk_examples() {
        assert_eq!(
            select_topk(array![3.0, 1.0, 2.0].view(), 2).unwrap(),
            vec![0, 2]
        );
        assert_eq!(
            select_topk(array![5.0, 5.0, 1.0].view(), 2).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            select_topk(array![1.0, 4.0, 2.0, 4.0].view(), 4).unwrap(),
            vec![1, 3, 2, 0]
        );
        assert!(select_topk(array![1.0].view(), 0).is_err());
        assert!(select_topk(array![1.0].view(), 2).is_err());
    }

    #[test]
    fn kfac_lambda_is_product_of_factor_eigenvalues() {
        let registry = ModuleRegistry::from_shapes([("m", 1, 2)]).unwrap();
        let factors = KfacFactors {
            registry,
            modules: vec![ModuleStats {
                a: array![[4.0, 0.0], [0.0, 1.0]],
                s: array![[9.0]],
            }],
            token_count: 1,
        };
        let eigen = eigendecompose(&factors).unwrap();
        assert_eq!(eigen[0].kfac_lambda, array![36.0, 9.0]);
    }

    #[test]
    fn estimate_factors_symmetrizes_exactly() {
        let registry = ModuleRegistry::from_shapes([("m", 2, 2)]).unwrap();
        let stats = KfacStats {
            registry,
            modules: vec![ModuleStats {
                a: array![[1.0, 0.3], [0.1, 2.0]],
                s: array![[1.0, 0.0], [0.5, 1.0]],
            }],
            token_count: 3,
        };
        let f = estimate_factors(&stats).unwrap();
        for m in &f.modules {
            assert_eq!(&m.a - &m.a.t(), Array2::<f64>::zeros((2, 2)));
            assert_eq!(&m.s - &m.s.t(), Array2::<f64>::zeros((2, 2)));
        }
        assert_eq!(f.modules[0].a[[0, 1]], 0.2);
    }

    #[test]
    fn estimate_factors_rejects_non_finite() {
        let registry = ModuleRegistry::from_shapes([("m", 1, 1)]).unwrap();
        let stats = KfacStats {
            registry,
            modules: vec![ModuleStats {
                a: array![[f64::INFINITY]],
                s: array![[1.0]],
            }],
            token_count: 1,
        };
        assert!(matches!(estimate_factors(&stats), Err(Error::NonFinite(_))));
    }

    #[test]
    fn single_token_all_ones_refit() {
        // Identity bases and a ones/ones token give a rotated outer product
        // of all ones.
        let registry = ModuleRegistry::from_shapes([("m", 2, 3)]).unwrap();
        let eigen = ModuleEigen {
            q_a: Array2::eye(3),
            eig_a: Array1::ones(3),
            q_s: Array2::eye(2),
            eig_s: Array1::ones(2),
            kfac_lambda: Array1::ones(6),
        };
        let sample = TokenSample {
            inputs: vec![Array1::ones(3)],
            grads: vec![Array1::ones(2)],
        };
        let lambda = ekfac_correct_eigenvalues(&registry, &[eigen], &[sample]).unwrap();
        assert_eq!(lambda[0], Array1::<f64>::ones(6));
    }

    #[test]
    fn identity_basis_projection_is_identity() {
        let basis = single_module_basis(Array2::eye(3), Array2::eye(2), Array1::ones(6), 6);
        let c = ProjectionConfig {
            k: 6,
            epsilon: f64::MIN_POSITIVE,
            ..ProjectionConfig::default()
        };
        let g = array![1.0, -2.0, 3.0, 0.5, 0.25, -4.0];
        // Top-k of an all-equal lambda is the identity permutation.
        let p = project_row(&basis, &c, g.view()).unwrap();
        for (a, b) in p.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let u = unproject(g.view(), &basis, &c).unwrap();
        for (a, b) in u.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_module_preconditioning() {
        let basis = single_module_basis(array![[1.0]], array![[1.0]], array![3.0], 1);
        let p = project_row(&basis, &cfg(1, 1.0), array![4.0].view()).unwrap();
        assert_eq!(p[0], 2.0);
    }

    #[test]
    fn keep_mode_skips_rescaling() {
        let basis = single_module_basis(array![[1.0]], array![[1.0]], array![3.0], 1);
        let mut c = cfg(1, 1.0);
        c.unproject_preconditioning = PreconditioningMode::Keep;
        assert_eq!(unproject(array![2.0].view(), &basis, &c).unwrap()[0], 2.0);
        c.unproject_preconditioning = PreconditioningMode::Invert;
        assert_eq!(unproject(array![2.0].view(), &basis, &c).unwrap()[0], 4.0);
    }

    #[test]
    fn length_and_k_mismatches_rejected() {
        let basis = single_module_basis(Array2::eye(2), Array2::eye(1), array![2.0, 1.0], 1);
        assert!(matches!(
            unproject(array![1.0, 2.0].view(), &basis, &cfg(1, 1e-8)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            unproject(array![1.0, 2.0].view(), &basis, &cfg(2, 1e-8)),
            Err(Error::Config(_))
        ));
        assert!(project_row(&basis, &cfg(1, 1e-8), array![1.0].view()).is_err());
    }

    #[test]
    fn eigen_reconstruction_and_sorting() {
        let m = array![[2.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 1.0]];
        let (q, vals) = symmetric_eigen(&m).unwrap();
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        let recon = q.dot(&Array2::from_diag(&vals)).dot(&q.t());
        let err = (&recon - &m).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-8);
        assert!(orthogonality_error(q.view()) < 1e-8);
    }

    #[test]
    fn identity_factor_projector() {
        let (q, vals) = symmetric_eigen(&Array2::eye(4)).unwrap();
        assert_eq!(vals, Array1::<f64>::ones(4));
        let p = q.dot(&q.t());
        assert!((&p - &Array2::<f64>::eye(4))
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn asymmetric_matrix_rejected_by_eigensolver() {
        assert!(matches!(
            symmetric_eigen(&array![[1.0, 2.0], [0.0, 1.0]]),
            Err(Error::Eigen(_))
        ));
    }

    #[test]
    fn basis_file_round_trip_and_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let theta = std::f64::consts::FRAC_PI_4;
        let rot = array![[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
        let basis = single_module_basis(rot, Array2::eye(2), array![4.0, 1.0, 3.0, 2.0], 3);
        let path = dir.path().join("basis.gatoms");
        basis.write(&path).unwrap();
        let back = EkfacBasis::read(&path).unwrap();
        assert_eq!(back, basis);
        assert_eq!(back.fingerprint(), basis.fingerprint());
        assert_eq!(back.modules[0].topk, vec![0, 2, 3]);
    }

    #[test]
    fn ekfac_without_samples_is_config_error() {
        let registry = ModuleRegistry::from_shapes([("m", 1, 1)]).unwrap();
        let stats = KfacStats {
            registry,
            modules: vec![ModuleStats {
                a: array![[1.0]],
                s: array![[1.0]],
            }],
            token_count: 1,
        };
        assert!(matches!(
            build_basis(&stats, None, &cfg(1, 1e-8)),
            Err(Error::Config(_))
        ));
        let mut c = cfg(1, 1e-8);
        c.lambda_mode = LambdaMode::Kfac;
        assert_eq!(
            build_basis(&stats, None, &c).unwrap().modules[0].lambda[0],
            1.0
        );
    }
}
