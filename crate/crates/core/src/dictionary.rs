//! Mini-batch sparse dictionary learning.
//!
//! Rows `x` of the projected gradient matrix are approximated as `Dᵀα` with
//! unit-norm atoms (rows of `D`) and sparse codes `α`. Coding solves the
//! lasso `min ½‖x − Dᵀα‖² + penalty·‖α‖₁` by cyclic coordinate descent;
//! atoms are refit by block coordinate descent on decayed sufficient
//! statistics, as in online dictionary learning.

use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{push_matrix, write_tensor_file, PayloadKind, TensorBundle, TensorFileHeader};

/// Diagonal of the code Gram accumulator below which an atom counts as unused.
const DEAD_ATOM_USAGE: f64 = 1e-12;

/// Relative rounding floor of a coordinate update. A unit-norm row and a
/// unit-norm atom can correlate at `1 + ε`, which would otherwise leave a
/// one-ulp code at penalty 1.
const ROUNDING_SLACK: f64 = 8.0 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictConfig {
    /// Number of atoms `K`.
    pub atoms: usize,
    pub penalty: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub coding_iters: usize,
    pub coding_tol: f64,
    /// Per-batch decay of the sufficient statistics.
    pub decay: f64,
}

impl Default for DictConfig {
    fn default() -> Self {
        DictConfig {
            atoms: 32,
            penalty: 0.1,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            coding_iters: 50,
            coding_tol: 1e-6,
            decay: 0.5,
        }
    }
}

impl DictConfig {
    /// Preset for real-model gradient sets: 500 atoms at penalty 0.1.
    pub fn large_scale() -> Self {
        DictConfig {
            atoms: 500,
            ..DictConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms < 1 {
            return Err(Error::Config("atoms must be at least 1".into()));
        }
        if !(self.penalty >= 0.0) || !self.penalty.is_finite() {
            return Err(Error::Config(
                "penalty must be finite and nonnegative".into(),
            ));
        }
        if self.batch_size < 1 || self.coding_iters < 1 {
            return Err(Error::Config(
                "batch_size and coding_iters must be positive".into(),
            ));
        }
        if !(self.coding_tol > 0.0) {
            return Err(Error::Config("coding_tol must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `K × p` matrix of atoms, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub atoms: Array2<f64>,
}

impl Dictionary {
    pub fn new(atoms: Array2<f64>) -> Self {
        Dictionary { atoms }
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn dim(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atom(&self, j: usize) -> ArrayView1<'_, f64> {
        self.atoms.row(j)
    }

    pub fn header(&self) -> TensorFileHeader {
        TensorFileHeader::new(PayloadKind::Dictionary)
            .with_tensor("atoms", vec![self.atoms.nrows(), self.atoms.ncols()])
    }

    pub fn write(&self, path: &Path, header: TensorFileHeader) -> Result<()> {
        let mut payload = Vec::with_capacity(self.atoms.len());
        push_matrix(&mut payload, self.atoms.view());
        write_tensor_file(path, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<(Self, TensorFileHeader)> {
        let bundle = TensorBundle::read_kind(path, PayloadKind::Dictionary)?;
        let atoms = bundle.matrix("atoms")?;
        Ok((Dictionary { atoms }, bundle.header))
    }
}

/// Sparse `N × K` code matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CodeMatrix {
    /// Keeps exactly the nonzero entries of `dense`.
    pub fn from_dense(dense: ArrayView2<'_, f64>) -> Self {
        let mut row_offsets = Vec::with_capacity(dense.nrows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for row in dense.outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            row_offsets.push(indices.len());
        }
        CodeMatrix {
            n_rows: dense.nrows(),
            n_cols: dense.ncols(),
            row_offsets,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Nonzero entries of column `j` as `(row, value)`, by ascending row.
    pub fn column(&self, j: usize) -> Vec<(usize, f64)> {
        (0..self.n_rows)
            .filter_map(|i| self.row(i).find(|&(c, _)| c == j).map(|(_, v)| (i, v)))
            .collect()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn density(&self) -> f64 {
        let total = self.n_rows * self.n_cols;
        if total == 0 {
            0.0
        } else {
            self.nnz() as f64 / total as f64
        }
    }

    /// Number of rows with a nonzero coefficient, per column.
    pub fn active_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_cols];
        for &j in &self.indices {
            counts[j] += 1;
        }
        counts
    }

    pub fn header(&self) -> TensorFileHeader {
        TensorFileHeader::new(PayloadKind::Codes)
            .with_tensor("row_offsets", vec![self.row_offsets.len()])
            .with_tensor("indices", vec![self.indices.len()])
            .with_tensor("values", vec![self.values.len()])
            .with_attr("n_rows", self.n_rows as u64)
            .with_attr("n_cols", self.n_cols as u64)
    }

    pub fn write(&self, path: &Path, header: TensorFileHeader) -> Result<()> {
        let payload: Vec<f64> = self
            .row_offsets
            .iter()
            .chain(&self.indices)
            .map(|&v| v as f64)
            .chain(self.values.iter().copied())
            .collect();
        write_tensor_file(path, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<(Self, TensorFileHeader)> {
        let bundle = TensorBundle::read_kind(path, PayloadKind::Codes)?;
        let to_index = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse(format!("bad index value {v}")))
            }
        };
        let h = &bundle.header;
        let codes = CodeMatrix {
            n_rows: h.attr_usize("n_rows")?,
            n_cols: h.attr_usize("n_cols")?,
            row_offsets: bundle
                .vector("row_offsets")?
                .into_iter()
                .map(to_index)
                .collect::<Result<_>>()?,
            indices: bundle
                .vector("indices")?
                .into_iter()
                .map(to_index)
                .collect::<Result<_>>()?,
            values: bundle.vector("values")?,
        };
        codes.validate()?;
        Ok((codes, bundle.header))
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_offsets.len() != self.n_rows + 1
            || self.row_offsets.first() != Some(&0)
            || self.row_offsets.last() != Some(&self.indices.len())
            || self.row_offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Layout("code row offsets are inconsistent".into()));
        }
        if self.indices.len() != self.values.len() || self.indices.iter().any(|&j| j >= self.n_cols)
        {
            return Err(Error::Layout("code indices are inconsistent".into()));
        }
        if self.values.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::Layout(
                "stored codes must be finite and nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// Scales each nonzero row to unit L2 norm; zero rows stay zero.
pub fn normalize_rows(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if let Some(((i, j), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("row {i} column {j}")));
    }
    let mut out = x.to_owned();
    crate::ekfac::normalize_rows_in_place(&mut out);
    Ok(out)
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Lasso for one row given the atom Gram matrix `D Dᵀ` and correlations
/// `D x`. Atoms are visited in ascending order each sweep.
fn encode_row(
    gram: &Array2<f64>,
    corr: ArrayView1<'_, f64>,
    penalty: f64,
    iters: usize,
    tol: f64,
) -> Array1<f64> {
    let k = corr.len();
    let mut alpha = Array1::<f64>::zeros(k);
    // gram · alpha, kept current as coordinates move.
    let mut g_alpha = Array1::<f64>::zeros(k);
    for _ in 0..iters {
        let mut max_change = 0.0f64;
        for j in 0..k {
            let gjj = gram[[j, j]];
            if gjj <= 0.0 {
                continue;
            }
            let rho = corr[j] - g_alpha[j] + gjj * alpha[j];
            let mut shrunk = soft_threshold(rho, penalty);
            if shrunk.abs() <= ROUNDING_SLACK * rho.abs() {
                shrunk = 0.0;
            }
            let new = shrunk / gjj;
            let delta = new - alpha[j];
            if delta != 0.0 {
                g_alpha.scaled_add(delta, &gram.column(j));
                alpha[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < tol {
            break;
        }
    }
    alpha
}

fn check_dims(x: ArrayView2<'_, f64>, dict: &Dictionary) -> Result<()> {
    if x.ncols() != dict.dim() {
        return Err(Error::Shape(format!(
            "data has {} columns but atoms have {}",
            x.ncols(),
            dict.dim()
        )));
    }
    Ok(())
}

/// Dense codes (`N × K`) for every row of `x`.
pub fn sparse_encode_dense(
    x: ArrayView2<'_, f64>,
    dict: &Dictionary,
    penalty: f64,
    iters: usize,
    tol: f64,
) -> Result<Array2<f64>> {
    check_dims(x, dict)?;
    let gram = dict.atoms.dot(&dict.atoms.t());
    let corr = x.dot(&dict.atoms.t());
    let rows: Vec<Array1<f64>> = corr
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|c| encode_row(&gram, c, penalty, iters, tol))
        .collect();
    let mut out = Array2::zeros((x.nrows(), dict.n_atoms()));
    for (mut dst, row) in out.axis_iter_mut(Axis(0)).zip(&rows) {
        dst.assign(row);
    }
    Ok(out)
}

pub fn sparse_encode(
    x: ArrayView2<'_, f64>,
    dict: &Dictionary,
    penalty: f64,
    iters: usize,
    tol: f64,
) -> Result<CodeMatrix> {
    let dense = sparse_encode_dense(x, dict, penalty, iters, tol)?;
    Ok(CodeMatrix::from_dense(dense.view()))
}

/// Mean over rows of `‖x_i − Σ_j α_ij d_j‖²`.
pub fn reconstruction_error(
    x: ArrayView2<'_, f64>,
    dict: &Dictionary,
    codes: &CodeMatrix,
) -> Result<f64> {
    check_dims(x, dict)?;
    if codes.n_rows != x.nrows() || codes.n_cols != dict.n_atoms() {
        return Err(Error::Shape(format!(
            "codes are {}x{}, expected {}x{}",
            codes.n_rows,
            codes.n_cols,
            x.nrows(),
            dict.n_atoms()
        )));
    }
    if x.nrows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, xi) in x.outer_iter().enumerate() {
        let mut r = xi.to_owned();
        for (j, v) in codes.row(i) {
            r.scaled_add(-v, &dict.atoms.row(j));
        }
        total += r.dot(&r);
    }
    Ok(total / x.nrows() as f64)
}

/// Dictionary state for online updates: atoms plus decayed code Gram
/// (`K × K`) and code–data cross (`K × p`) accumulators.
#[derive(Debug, Clone)]
pub struct DictionaryLearner {
    pub dictionary: Dictionary,
    gram: Array2<f64>,
    cross: Array2<f64>,
    decay: f64,
    rng: ChaCha8Rng,
    reseeded: usize,
}

impl DictionaryLearner {
    pub fn new(dictionary: Dictionary, decay: f64, seed: u64) -> Self {
        let (k, p) = dictionary.atoms.dim();
        DictionaryLearner {
            dictionary,
            gram: Array2::zeros((k, k)),
            cross: Array2::zeros((k, p)),
            decay,
            rng: ChaCha8Rng::seed_from_u64(seed),
            reseeded: 0,
        }
    }

    pub fn reseeded(&self) -> usize {
        self.reseeded
    }

    /// Folds a batch into the statistics, then refits every atom once.
    /// Unused atoms are replaced by a random nonzero batch row.
    pub fn update(&mut self, batch: ArrayView2<'_, f64>, codes: ArrayView2<'_, f64>) -> Result<()> {
        let (k, p) = self.dictionary.atoms.dim();
        if batch.ncols() != p || codes.ncols() != k || codes.nrows() != batch.nrows() {
            return Err(Error::Shape(format!(
                "batch {:?} and codes {:?} do not fit a {}x{} dictionary",
                batch.dim(),
                codes.dim(),
                k,
                p
            )));
        }
        self.gram *= self.decay;
        self.gram += &codes.t().dot(&codes);
        self.cross *= self.decay;
        self.cross += &codes.t().dot(&batch);

        for j in 0..k {
            let ajj = self.gram[[j, j]];
            if ajj <= DEAD_ATOM_USAGE {
                self.reseed(j, batch);
                continue;
            }
            let mut u = self.cross.row(j).to_owned();
            u -= &self.gram.row(j).dot(&self.dictionary.atoms);
            u /= ajj;
            u += &self.dictionary.atoms.row(j);
            let norm = u.dot(&u).sqrt();
            if norm > 0.0 && norm.is_finite() {
                self.dictionary.atoms.row_mut(j).assign(&(u / norm));
            } else {
                self.reseed(j, batch);
            }
        }
        Ok(())
    }

    fn reseed(&mut self, j: usize, batch: ArrayView2<'_, f64>) {
        let nonzero: Vec<usize> = (0..batch.nrows())
            .filter(|&i| batch.row(i).iter().any(|&v| v != 0.0))
            .collect();
        let Some(&i) = nonzero.choose(&mut self.rng) else {
            return;
        };
        let row = batch.row(i);
        let norm = row.dot(&row).sqrt();
        self.dictionary.atoms.row_mut(j).assign(&(&row / norm));
        self.reseeded += 1;
    }
}

/// One atom refit from fresh statistics.
pub fn dictionary_update(
    dict: &Dictionary,
    batch: ArrayView2<'_, f64>,
    codes: ArrayView2<'_, f64>,
    seed: u64,
) -> Result<Dictionary> {
    let mut learner = DictionaryLearner::new(dict.clone(), 1.0, seed);
    learner.update(batch, codes)?;
    Ok(learner.dictionary)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub dictionary: Dictionary,
    pub codes: CodeMatrix,
    /// Reconstruction error after each epoch.
    pub epoch_errors: Vec<f64>,
    pub reseeded: usize,
}

/// Atoms drawn from `K` distinct random nonzero rows; Gaussian directions if
/// there are not enough.
pub fn init_from_data(x: ArrayView2<'_, f64>, atoms: usize, seed: u64) -> Dictionary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.nrows())
        .filter(|&i| x.row(i).iter().any(|&v| v != 0.0))
        .collect();
    order.shuffle(&mut rng);
    let mut out = Array2::zeros((atoms, x.ncols()));
    for j in 0..atoms {
        let row: Array1<f64> = match order.get(j) {
            Some(&i) => x.row(i).to_owned(),
            None => (0..x.ncols()).map(|_| rng.sample(StandardNormal)).collect(),
        };
        let norm = row.dot(&row).sqrt();
        out.row_mut(j).assign(&(row / norm));
    }
    Dictionary::new(out)
}

pub fn fit(x: ArrayView2<'_, f64>, cfg: &DictConfig) -> Result<FitResult> {
    cfg.validate()?;
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Empty("dictionary learning input".into()));
    }
    if cfg.atoms > x.nrows() {
        warn!(
            "{} atoms requested for {} rows; surplus atoms start from random directions",
            cfg.atoms,
            x.nrows()
        );
    }
    let init = init_from_data(x, cfg.atoms, cfg.seed);
    fit_with_init(x, cfg, init)
}

/// [`fit`] from a caller-supplied starting dictionary.
pub fn fit_with_init(
    x: ArrayView2<'_, f64>,
    cfg: &DictConfig,
    init: Dictionary,
) -> Result<FitResult> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::Empty("dictionary learning input".into()));
    }
    if init.n_atoms() != cfg.atoms {
        return Err(Error::Shape(format!(
            "initial dictionary has {} atoms, config asks for {}",
            init.n_atoms(),
            cfg.atoms
        )));
    }
    check_dims(x, &init)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut learner = DictionaryLearner::new(init, cfg.decay, cfg.seed.wrapping_add(0xdead));
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut epoch_errors = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = x.select(Axis(0), chunk);
            let codes = sparse_encode_dense(
                batch.view(),
                &learner.dictionary,
                cfg.penalty,
                cfg.coding_iters,
                cfg.coding_tol,
            )?;
            learner.update(batch.view(), codes.view())?;
        }
        let codes = sparse_encode(
            x,
            &learner.dictionary,
            cfg.penalty,
            cfg.coding_iters,
            cfg.coding_tol,
        )?;
        epoch_errors.push(reconstruction_error(x, &learner.dictionary, &codes)?);
    }
    let codes = sparse_encode(
        x,
        &learner.dictionary,
        cfg.penalty,
        cfg.coding_iters,
        cfg.coding_tol,
    )?;
    Ok(FitResult {
        reseeded: learner.reseeded(),
        dictionary: learner.dictionary,
        codes,
        epoch_errors,
    })
}

/// Half squared Frobenius residual `½‖X − C·D‖²`.
pub fn batch_objective(
    x: ArrayView2<'_, f64>,
    codes: ArrayView2<'_, f64>,
    dict: &Dictionary,
) -> f64 {
    let r = &x - &codes.dot(&dict.atoms);
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}
