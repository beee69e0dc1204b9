//! Attribute axes: least-squares fitting of per-attribute directions from
//! labeled latent data, orthonormalization of a base set, and continual
//! extension of new directions against that base without refitting it.

use crate::linalg::{
    self, cosine_similarity, gram_schmidt, residual_perp, solve_ols, LinalgError, Matrix, Vector,
    DEFAULT_DEPENDENCE_TOL,
};
use crate::toyworld::ToyWorldSpec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AxisError {
    #[error("unknown attribute '{0}'")]
    UnknownAttribute(String),
    #[error("attribute name '{0}' is invalid (allowed: [A-Za-z0-9_.-], non-empty)")]
    InvalidName(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("attribute '{0}' is degenerate: labels carry no variation")]
    DegenerateAttribute(String),
    #[error("axis '{0}' already exists in the bank")]
    DuplicateAxis(String),
    #[error("base axis '{name}' (position {index}) is linearly dependent on the ones before it")]
    DependentBase { name: String, index: usize },
    #[error("attribute '{0}' is inseparable: its direction lies in the span of the base axes")]
    InseparableAttribute(String),
    #[error("invalid extension weights: {0}")]
    InvalidWeights(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Allowed characters keep attribute names safe for CSV headers and reports.
pub fn validate_attr_name(name: &str) -> Result<(), AxisError> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'));
    if ok {
        Ok(())
    } else {
        Err(AxisError::InvalidName(name.to_string()))
    }
}

/// Latent vectors paired with per-attribute scalar labels.
///
/// Every sample carries a value for each declared attribute; label storage
/// is positional, aligned with `attr_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset {
    dim: usize,
    attr_names: Vec<String>,
    latents: Vec<Vector>,
    labels: Vec<Vec<f64>>,
}

impl LatentDataset {
    pub fn new(
        attr_names: Vec<String>,
        latents: Vec<Vector>,
        labels: Vec<Vec<f64>>,
    ) -> Result<Self, AxisError> {
        if latents.is_empty() {
            return Err(AxisError::TooFewSamples { got: 0, need: 1 });
        }
        for name in &attr_names {
            validate_attr_name(name)?;
        }
        for i in 1..attr_names.len() {
            if attr_names[..i].contains(&attr_names[i]) {
                return Err(AxisError::DuplicateAxis(attr_names[i].clone()));
            }
        }
        let dim = latents[0].dim();
        for (i, z) in latents.iter().enumerate() {
            if z.dim() != dim {
                return Err(AxisError::DimMismatch(format!(
                    "sample {i} has dim {}, expected {dim}",
                    z.dim()
                )));
            }
        }
        if labels.len() != latents.len() {
            return Err(AxisError::DimMismatch(format!(
                "{} label rows for {} samples",
                labels.len(),
                latents.len()
            )));
        }
        for (i, row) in labels.iter().enumerate() {
            if row.len() != attr_names.len() {
                return Err(AxisError::DimMismatch(format!(
                    "sample {i} has {} labels, expected {}",
                    row.len(),
                    attr_names.len()
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(AxisError::DimMismatch(format!(
                    "sample {i} label '{}' is not finite",
                    attr_names[j]
                )));
            }
        }
        Ok(Self {
            dim,
            attr_names,
            latents,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn attr_names(&self) -> &[String] {
        &self.attr_names
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attr_names.iter().position(|n| n == name)
    }

    pub fn latent(&self, i: usize) -> &Vector {
        &self.latents[i]
    }

    pub fn latents(&self) -> &[Vector] {
        &self.latents
    }

    pub fn label(&self, sample: usize, attr: usize) -> f64 {
        self.labels[sample][attr]
    }

    pub fn label_row(&self, sample: usize) -> &[f64] {
        &self.labels[sample]
    }

    pub fn label_column(&self, attr: usize) -> Vector {
        Vector::from_raw(self.labels.iter().map(|row| row[attr]).collect())
    }
}

/// A fitted attribute direction with its regression diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeAxis {
    pub name: String,
    /// Unit vector: the normalized per-dimension regression weights.
    pub direction: Vector,
    /// Intercept of the fit.
    pub bias: f64,
    pub rss: f64,
    pub r_squared: f64,
    pub n_samples: usize,
    /// Set when the design matrix lacked full column rank; the fit is kept.
    pub rank_deficient: bool,
}

/// How an extension direction was derived from its raw fitted direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtensionMode {
    /// Projection of the fitted direction onto the orthogonal complement of
    /// the whole base span. Decoupled from every base axis.
    Residual,
    /// Weighted superposition of per-axis perpendicular components. Kept for
    /// comparison; not orthogonal to the base when more than one axis exists.
    PerSubvector,
}

impl ExtensionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtensionMode::Residual => "residual",
            ExtensionMode::PerSubvector => "per-subvector",
        }
    }
}

/// A continually-added attribute direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionRecord {
    pub name: String,
    /// Raw fitted unit direction of the new attribute.
    pub d_in: Vector,
    /// Derived unit direction actually used for editing.
    pub d_out: Vector,
    pub mode: ExtensionMode,
    /// Per-base-axis weights; empty in residual mode.
    pub weights: Vec<f64>,
}

/// Which direction variant of an axis to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisSource {
    /// Orthonormalized base directions / extension `d_out`. The default.
    Decoupled,
    /// Raw fitted directions / extension `d_in`. For comparisons only.
    Raw,
}

/// Ordered store of fitted base axes, their orthonormalized directions,
/// and extension records. Immutable; extension returns an updated copy.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisBank {
    dim: usize,
    base: Vec<AttributeAxis>,
    base_ortho: Vec<Vector>,
    extensions: Vec<ExtensionRecord>,
}

impl AxisBank {
    /// Assembles a bank from parts, re-verifying the structural invariants.
    /// Used by deserialization; `build_bank` is the normal entry point.
    pub fn from_parts(
        dim: usize,
        base: Vec<AttributeAxis>,
        base_ortho: Vec<Vector>,
        extensions: Vec<ExtensionRecord>,
    ) -> Result<Self, AxisError> {
        if base.is_empty() {
            return Err(AxisError::TooFewSamples { got: 0, need: 1 });
        }
        if base.len() != base_ortho.len() {
            return Err(AxisError::DimMismatch(format!(
                "{} base axes but {} orthonormalized directions",
                base.len(),
                base_ortho.len()
            )));
        }
        for ax in &base {
            validate_attr_name(&ax.name)?;
            if ax.direction.dim() != dim {
                return Err(AxisError::DimMismatch(format!(
                    "axis '{}' has dim {}, bank dim {dim}",
                    ax.name,
                    ax.direction.dim()
                )));
            }
            if (ax.direction.norm() - 1.0).abs() > 1e-10 {
                return Err(AxisError::DimMismatch(format!(
                    "axis '{}' direction is not unit norm",
                    ax.name
                )));
            }
        }
        linalg::check_orthonormal(&base_ortho, 1e-10)?;
        for e in &extensions {
            validate_attr_name(&e.name)?;
            if e.d_in.dim() != dim || e.d_out.dim() != dim {
                return Err(AxisError::DimMismatch(format!(
                    "extension '{}' dimension mismatch",
                    e.name
                )));
            }
            if (e.d_out.norm() - 1.0).abs() > 1e-10 || (e.d_in.norm() - 1.0).abs() > 1e-10 {
                return Err(AxisError::DimMismatch(format!(
                    "extension '{}' directions are not unit norm",
                    e.name
                )));
            }
            match e.mode {
                ExtensionMode::Residual => {
                    for (i, eb) in base_ortho.iter().enumerate() {
                        if eb.dot(&e.d_out).abs() > 1e-10 {
                            return Err(AxisError::DimMismatch(format!(
                                "extension '{}' is not orthogonal to base axis {i}",
                                e.name
                            )));
                        }
                    }
                }
                ExtensionMode::PerSubvector => {
                    let s: f64 = e.weights.iter().sum();
                    if e.weights.len() != base.len() || (s - 1.0).abs() > 1e-12 {
                        return Err(AxisError::InvalidWeights(format!(
                            "extension '{}': {} weights summing to {s}",
                            e.name,
                            e.weights.len()
                        )));
                    }
                }
            }
        }
        let bank = Self {
            dim,
            base,
            base_ortho,
            extensions,
        };
        let names: Vec<&str> = bank.axis_names().collect();
        for i in 1..names.len() {
            if names[..i].contains(&names[i]) {
                return Err(AxisError::DuplicateAxis(names[i].to_string()));
            }
        }
        Ok(bank)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> &[AttributeAxis] {
        &self.base
    }

    pub fn base_ortho(&self) -> &[Vector] {
        &self.base_ortho
    }

    pub fn extensions(&self) -> &[ExtensionRecord] {
        &self.extensions
    }

    /// Base names followed by extension names, in insertion order.
    pub fn axis_names(&self) -> impl Iterator<Item = &str> {
        self.base
            .iter()
            .map(|a| a.name.as_str())
            .chain(self.extensions.iter().map(|e| e.name.as_str()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.axis_names().any(|n| n == name)
    }

    pub fn direction(&self, name: &str, source: AxisSource) -> Option<&Vector> {
        if let Some(i) = self.base.iter().position(|a| a.name == name) {
            return Some(match source {
                AxisSource::Decoupled => &self.base_ortho[i],
                AxisSource::Raw => &self.base[i].direction,
            });
        }
        self.extensions.iter().find(|e| e.name == name).map(|e| match source {
            AxisSource::Decoupled => &e.d_out,
            AxisSource::Raw => &e.d_in,
        })
    }

    /// Gram matrix of the orthonormalized base directions.
    pub fn base_gram(&self) -> Matrix {
        let k = self.base_ortho.len();
        let mut g = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                g.set(i, j, self.base_ortho[i].dot(&self.base_ortho[j]));
            }
        }
        g
    }
}

/// Fits one attribute direction by least squares with an intercept.
///
/// The direction is the normalized weight vector; the intercept, residual
/// sum of squares, and R^2 are recorded as diagnostics.
pub fn fit_axis(ds: &LatentDataset, attribute: &str) -> Result<AttributeAxis, AxisError> {
    let idx = ds
        .attr_index(attribute)
        .ok_or_else(|| AxisError::UnknownAttribute(attribute.to_string()))?;
    if ds.len() < 2 {
        return Err(AxisError::TooFewSamples {
            got: ds.len(),
            need: 2,
        });
    }
    let y = ds.label_column(idx);
    let mean = y.as_slice().iter().sum::<f64>() / y.dim() as f64;
    let tss: f64 = y.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum();
    if tss == 0.0 {
        return Err(AxisError::DegenerateAttribute(attribute.to_string()));
    }

    let x = Matrix::from_rows(ds.latents())?;
    let sol = solve_ols(&x, &y, true)?;
    let raw = Vector::new(sol.weights.as_slice()[1..].to_vec())?;
    let norm = raw.norm();
    if norm == 0.0 {
        return Err(AxisError::DegenerateAttribute(attribute.to_string()));
    }
    let r_squared = (1.0 - sol.residual_sum_squares / tss).clamp(0.0, 1.0);
    Ok(AttributeAxis {
        name: attribute.to_string(),
        direction: raw.div_scalar(norm),
        bias: sol.weights[0],
        rss: sol.residual_sum_squares,
        r_squared,
        n_samples: ds.len(),
        rank_deficient: sol.rank_deficient,
    })
}

/// Fits the named base attributes in order and orthonormalizes their
/// directions.
pub fn build_bank(ds: &LatentDataset, base_names: &[String]) -> Result<AxisBank, AxisError> {
    if base_names.is_empty() {
        return Err(AxisError::TooFewSamples { got: 0, need: 1 });
    }
    for i in 1..base_names.len() {
        if base_names[..i].contains(&base_names[i]) {
            return Err(AxisError::DuplicateAxis(base_names[i].clone()));
        }
    }
    let base: Vec<AttributeAxis> = base_names
        .iter()
        .map(|n| fit_axis(ds, n))
        .collect::<Result<_, _>>()?;
    let dirs: Vec<Vector> = base.iter().map(|a| a.direction.clone()).collect();
    let base_ortho = gram_schmidt(&dirs, DEFAULT_DEPENDENCE_TOL).map_err(|e| match e {
        LinalgError::LinearDependence { index, .. } => AxisError::DependentBase {
            name: base_names[index].clone(),
            index,
        },
        other => AxisError::Linalg(other),
    })?;
    Ok(AxisBank {
        dim: ds.dim(),
        base,
        base_ortho,
        extensions: Vec::new(),
    })
}

/// Adds a new attribute direction to the bank without refitting the base.
///
/// Residual mode projects the fitted direction onto the orthogonal
/// complement of the base span. Per-subvector mode superposes per-axis
/// perpendicular components with the given weights (uniform by default)
/// and is provided for comparison.
pub fn extend_axis(
    bank: &AxisBank,
    ds: &LatentDataset,
    new_name: &str,
    mode: ExtensionMode,
    weights: Option<&[f64]>,
) -> Result<AxisBank, AxisError> {
    if bank.contains(new_name) {
        return Err(AxisError::DuplicateAxis(new_name.to_string()));
    }
    if ds.dim() != bank.dim() {
        return Err(AxisError::DimMismatch(format!(
            "dataset dim {} vs bank dim {}",
            ds.dim(),
            bank.dim()
        )));
    }
    let d_in = fit_axis(ds, new_name)?.direction;

    let (d_out, stored_weights) = match mode {
        ExtensionMode::Residual => {
            if weights.is_some() {
                return Err(AxisError::InvalidWeights(
                    "residual mode takes no weights".into(),
                ));
            }
            let r = residual_perp(&d_in, bank.base_ortho())?;
            let norm = r.norm();
            if norm < DEFAULT_DEPENDENCE_TOL {
                return Err(AxisError::InseparableAttribute(new_name.to_string()));
            }
            (r.div_scalar(norm), Vec::new())
        }
        ExtensionMode::PerSubvector => {
            let k = bank.base_ortho().len();
            let w: Vec<f64> = match weights {
                Some(w) => w.to_vec(),
                None => vec![1.0 / k as f64; k],
            };
            if w.len() != k {
                return Err(AxisError::InvalidWeights(format!(
                    "{} weights for {k} base axes",
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(AxisError::InvalidWeights("non-finite weight".into()));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(AxisError::InvalidWeights(format!(
                    "weights sum to {sum}, expected 1"
                )));
            }
            let mut acc = Vector::zeros(bank.dim());
            for (wi, e) in w.iter().zip(bank.base_ortho()) {
                // w_i * (d_in - (e_i^T d_in) e_i)
                let perp = d_in.axpy(-e.dot(&d_in), e);
                acc = acc.axpy(*wi, &perp);
            }
            let norm = acc.norm();
            if norm < DEFAULT_DEPENDENCE_TOL {
                return Err(AxisError::InseparableAttribute(new_name.to_string()));
            }
            (acc.div_scalar(norm), w)
        }
    };

    let mut out = bank.clone();
    out.extensions.push(ExtensionRecord {
        name: new_name.to_string(),
        d_in,
        d_out,
        mode,
        weights: stored_weights,
    });
    Ok(out)
}

/// Cross-leakage of bank directions against the world's true directions:
/// entry (j, m) is `a_j . d_m`, the change of true attribute j per unit
/// edit along bank direction m. Columns follow `axis_names()` order.
pub fn leakage_matrix(
    bank: &AxisBank,
    world: &ToyWorldSpec,
    source: AxisSource,
) -> Result<Matrix, AxisError> {
    if world.p() != bank.dim() {
        return Err(AxisError::DimMismatch(format!(
            "world dim {} vs bank dim {}",
            world.p(),
            bank.dim()
        )));
    }
    let names: Vec<String> = bank.axis_names().map(str::to_string).collect();
    let k_true = world.k();
    let mut m = Matrix::zeros(k_true, names.len());
    for (col, name) in names.iter().enumerate() {
        let d = bank
            .direction(name, source)
            .expect("axis_names yields resolvable names");
        for row in 0..k_true {
            m.set(row, col, world.true_dir(row).dot(d));
        }
    }
    Ok(m)
}

/// |cosine| between a fitted axis and a reference direction; evaluation aid.
pub fn axis_alignment(axis: &AttributeAxis, reference: &Vector) -> Result<f64, AxisError> {
    Ok(cosine_similarity(&axis.direction, reference)?.abs())
}
