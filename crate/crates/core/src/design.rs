//! Stacks the paired-outcome model into linear-mixed-model form.
//!
//! Rows `0..N` hold outcome 1 and rows `N..2N` outcome 2, each in dataset
//! order (subject-major, time-sorted). Fixed columns are ordered outcome 1
//! then outcome 2; within an outcome the parametric terms come first,
//! followed by the unpenalized columns of each surface. Penalized columns
//! follow the same outcome-major, surface-minor order.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LongitudinalDataset, SubjectSpan};
use crate::tps::{build_basis, BasisError, Parameterization, SurfaceBasis};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("fixed-effect matrix for outcome {outcome} is rank deficient (column `{column}`)")]
    RankDeficientX { outcome: usize, column: String },
    #[error("model expects {spec} groups, dataset has {data}")]
    GroupMismatch { spec: usize, data: usize },
    #[error("unknown parametric covariate `{0}`")]
    UnknownCovariate(String),
    #[error("per-surface basis sizes: expected {expected} entries, found {found}")]
    BasisSizeCount { expected: usize, found: usize },
    #[error("null/full specification pair requires a group-specific model")]
    InvalidSpecPair,
    #[error(transparent)]
    Basis(#[from] BasisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMode {
    /// One surface per group and outcome, each absorbing its group intercept.
    GroupSpecific,
    /// One centered surface per outcome plus explicit group intercepts.
    SharedCenteredWithGroupIntercepts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorStructure {
    #[default]
    Independent,
    /// Continuous-time AR(1) on the observation time within subject.
    Car1OnTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Ml,
    #[default]
    Reml,
}

/// Intercepts of the shared-surface model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullIntercepts {
    /// One free intercept per group and outcome.
    #[default]
    PerGroup,
    /// A single intercept per outcome.
    Common,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    /// Knots per surface.
    pub k: usize,
    /// Optional per-surface override, in surface order (outcome-major).
    pub per_surface_k: Option<Vec<usize>>,
    /// When false, all spline columns enter as fixed effects.
    pub penalized: bool,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            k: 30,
            per_surface_k: None,
            penalized: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub surface_mode: SurfaceMode,
    pub num_groups: usize,
    #[serde(default)]
    pub parametric_terms: Vec<String>,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub error_structure: ErrorStructure,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default)]
    pub null_intercepts: NullIntercepts,
}

impl ModelSpec {
    pub fn group_specific(num_groups: usize) -> Self {
        Self {
            surface_mode: SurfaceMode::GroupSpecific,
            num_groups,
            parametric_terms: Vec::new(),
            basis: BasisConfig::default(),
            error_structure: ErrorStructure::Independent,
            criterion: Criterion::Reml,
            null_intercepts: NullIntercepts::PerGroup,
        }
    }

    pub fn shared(num_groups: usize) -> Self {
        Self {
            surface_mode: SurfaceMode::SharedCenteredWithGroupIntercepts,
            ..Self::group_specific(num_groups)
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.basis.k = k;
        self
    }

    pub fn with_criterion(mut self, criterion: Criterion) -> Self {
        self.criterion = criterion;
        self
    }

    pub fn with_errors(mut self, errors: ErrorStructure) -> Self {
        self.error_structure = errors;
        self
    }

    pub fn with_parametric(mut self, names: &[&str]) -> Self {
        self.parametric_terms = names.iter().map(|s| s.to_string()).collect();
        self
    }

    /// `(outcome, group)` of every surface in column order; `group` is
    /// `None` for a shared surface.
    pub fn surfaces(&self) -> Vec<(usize, Option<usize>)> {
        let mut out = Vec::new();
        for outcome in 0..2 {
            match self.surface_mode {
                SurfaceMode::GroupSpecific => {
                    out.extend((1..=self.num_groups).map(|g| (outcome, Some(g))))
                }
                SurfaceMode::SharedCenteredWithGroupIntercepts => out.push((outcome, None)),
            }
        }
        out
    }

    fn surface_k(&self) -> Result<Vec<usize>, DesignError> {
        let n = self.surfaces().len();
        match &self.basis.per_surface_k {
            Some(ks) if ks.len() != n => Err(DesignError::BasisSizeCount {
                expected: n,
                found: ks.len(),
            }),
            Some(ks) => Ok(ks.clone()),
            None => Ok(vec![self.basis.k; n]),
        }
    }
}

/// Splits a group-specific model into the nested pair `(null, full)`. The
/// null keeps K, error structure and parametric terms, and replaces the
/// group surfaces by one centered surface per outcome with free group
/// intercepts. With per-surface sizes, each shared surface takes the
/// largest size among that outcome's group surfaces.
pub fn null_and_full_specs(spec: &ModelSpec) -> Result<(ModelSpec, ModelSpec), DesignError> {
    if spec.surface_mode != SurfaceMode::GroupSpecific {
        return Err(DesignError::InvalidSpecPair);
    }
    let mut null = spec.clone();
    null.surface_mode = SurfaceMode::SharedCenteredWithGroupIntercepts;
    null.basis.per_surface_k = spec.basis.per_surface_k.as_ref().map(|ks| {
        let per = spec.num_groups;
        (0..2)
            .map(|o| *ks[o * per..(o + 1) * per].iter().max().unwrap_or(&spec.basis.k))
            .collect()
    });
    Ok((null, spec.clone()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub outcome: usize,
    pub group: Option<usize>,
    pub basis: Arc<SurfaceBasis>,
    pub parameterization: Parameterization,
    /// Global fixed-column indices of the surface's unpenalized columns, in
    /// basis column order (excluding group intercepts of shared surfaces).
    pub fixed_cols: Vec<usize>,
    /// Global penalized-column range; empty for unpenalized surfaces.
    pub penalized_cols: Range<usize>,
    /// Shared surfaces: the fixed column of each group's intercept.
    pub intercept_cols: Vec<usize>,
}

impl SmoothTerm {
    pub fn is_penalized(&self) -> bool {
        !self.penalized_cols.is_empty()
    }

    pub fn null_dim(&self) -> usize {
        self.basis.null_dim()
    }

    pub fn basis_dim(&self) -> usize {
        self.basis.basis_dim()
    }

    /// Intercept column for `group`, if the surface carries one separately.
    pub fn intercept_for(&self, group: usize) -> Option<usize> {
        match self.intercept_cols.len() {
            0 => None,
            1 => Some(self.intercept_cols[0]),
            _ => self.intercept_cols.get(group - 1).copied(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeBlock {
    /// N x p_l unpenalized columns.
    pub fixed: DMatrix<f64>,
    /// N x q_l penalized columns.
    pub penalized: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct AssembledDesign {
    pub spec: ModelSpec,
    /// Stacked responses `(y1', y2')'`.
    pub y: DVector<f64>,
    pub subjects: Vec<SubjectSpan>,
    pub subject_ids: Vec<String>,
    pub times: Vec<f64>,
    pub blocks: [OutcomeBlock; 2],
    pub smooths: Vec<SmoothTerm>,
    pub fixed_names: Vec<String>,
    /// Covariate pairs of the rows (shared by both outcomes).
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMeta {
    pub subject: usize,
    pub time: f64,
    pub outcome: usize,
}

impl AssembledDesign {
    /// Number of paired observations N.
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn fixed_dim(&self, outcome: usize) -> usize {
        self.blocks[outcome].fixed.ncols()
    }

    pub fn penalized_dim(&self, outcome: usize) -> usize {
        self.blocks[outcome].penalized.ncols()
    }

    pub fn num_fixed(&self) -> usize {
        self.fixed_dim(0) + self.fixed_dim(1)
    }

    pub fn num_penalized(&self) -> usize {
        self.penalized_dim(0) + self.penalized_dim(1)
    }

    pub fn fixed_offset(&self, outcome: usize) -> usize {
        if outcome == 0 {
            0
        } else {
            self.fixed_dim(0)
        }
    }

    pub fn penalized_offset(&self, outcome: usize) -> usize {
        if outcome == 0 {
            0
        } else {
            self.penalized_dim(0)
        }
    }

    /// Penalized surfaces in smoothing-parameter order.
    pub fn penalized_smooths(&self) -> impl Iterator<Item = &SmoothTerm> {
        self.smooths.iter().filter(|s| s.is_penalized())
    }

    pub fn num_smoothing_params(&self) -> usize {
        self.penalized_smooths().count()
    }

    pub fn row_meta(&self, row: usize) -> RowMeta {
        let n = self.n_obs();
        let (outcome, r) = if row < n { (0, row) } else { (1, row - n) };
        let subject = self
            .subjects
            .iter()
            .position(|s| s.rows().contains(&r))
            .expect("row within dataset");
        RowMeta {
            subject,
            time: self.times[r],
            outcome,
        }
    }

    /// Dense block-diagonal X (2N x p).
    pub fn fixed_matrix(&self) -> DMatrix<f64> {
        block_diag(&self.blocks[0].fixed, &self.blocks[1].fixed)
    }

    /// Dense block-diagonal penalized spline matrix (2N x q).
    pub fn spline_matrix(&self) -> DMatrix<f64> {
        block_diag(&self.blocks[0].penalized, &self.blocks[1].penalized)
    }

    /// Dense subject-effect indicator matrix (2N x 2m); column `i` is
    /// outcome 1 of subject `i`, column `m + i` outcome 2.
    pub fn subject_matrix(&self) -> DMatrix<f64> {
        let n = self.n_obs();
        let m = self.num_subjects();
        let mut z = DMatrix::zeros(2 * n, 2 * m);
        for (i, s) in self.subjects.iter().enumerate() {
            for r in s.rows() {
                z[(r, i)] = 1.0;
                z[(n + r, m + i)] = 1.0;
            }
        }
        z
    }

    /// Copy with a different stacked response vector.
    pub fn with_response(&self, y: DVector<f64>) -> Self {
        assert_eq!(y.len(), self.y.len());
        let mut out = self.clone();
        out.y = y;
        out
    }
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), a.ncols()), b.shape()).copy_from(b);
    out
}

/// Builds X, the penalized spline columns and the bookkeeping that ties
/// columns to surfaces and smoothing parameters.
pub fn assemble(ds: &LongitudinalDataset, spec: &ModelSpec) -> Result<AssembledDesign, DesignError> {
    if spec.num_groups != ds.num_groups() {
        return Err(DesignError::GroupMismatch {
            spec: spec.num_groups,
            data: ds.num_groups(),
        });
    }
    let par_idx = spec
        .parametric_terms
        .iter()
        .map(|name| {
            ds.parametric_index(name)
                .ok_or_else(|| DesignError::UnknownCovariate(name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let surfaces = spec.surfaces();
    let ks = spec.surface_k()?;
    let points = ds.covariate_points();
    let n = ds.len();
    let obs = ds.observations();
    let param = if spec.basis.penalized {
        Parameterization::IdentityPenalty
    } else {
        Parameterization::Constrained
    };

    // Knots come from the pooled covariates; smaller bases reuse the
    // leading knots of the largest one.
    let kmax = *ks.iter().max().unwrap_or(&spec.basis.k);
    let full = build_basis(&points, kmax)?;
    let mut by_k: BTreeMap<usize, (Arc<SurfaceBasis>, DMatrix<f64>)> = BTreeMap::new();
    for &k in &ks {
        if by_k.contains_key(&k) {
            continue;
        }
        let mut basis = if k == kmax { full.clone() } else { full.truncated(k)? };
        if spec.surface_mode == SurfaceMode::SharedCenteredWithGroupIntercepts {
            basis = basis.center_constraint(&points);
        }
        let values = basis.eval(&points, param);
        by_k.insert(k, (Arc::new(basis), values));
    }

    let mut fixed_cols: [Vec<DVector<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut pen_cols: [Vec<DVector<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut names: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    let mut pending: Vec<(usize, Option<usize>, Arc<SurfaceBasis>, Vec<usize>, Range<usize>, Vec<usize>)> =
        Vec::new();

    for outcome in 0..2 {
        let tag = format!("y{}", outcome + 1);
        for (j, name) in spec.parametric_terms.iter().enumerate() {
            fixed_cols[outcome].push(DVector::from_iterator(
                n,
                obs.iter().map(|o| o.parametric[par_idx[j]]),
            ));
            names[outcome].push(format!("{tag}:{name}"));
        }
        for (s, &(o, group)) in surfaces.iter().enumerate() {
            if o != outcome {
                continue;
            }
            let (basis, values) = &by_k[&ks[s]];
            let in_group = |row: usize| group.is_none_or(|g| obs[row].group == g);
            let label = match group {
                Some(g) => format!("{tag}:g{g}"),
                None => format!("{tag}:shared"),
            };
            let mut intercepts = Vec::new();
            if group.is_none() {
                let levels = match spec.null_intercepts {
                    NullIntercepts::PerGroup => spec.num_groups,
                    NullIntercepts::Common => 1,
                };
                for g in 1..=levels {
                    intercepts.push(fixed_cols[outcome].len());
                    fixed_cols[outcome].push(DVector::from_iterator(
                        n,
                        obs.iter().map(|o| {
                            if levels == 1 || o.group == g {
                                1.0
                            } else {
                                0.0
                            }
                        }),
                    ));
                    names[outcome].push(if levels == 1 {
                        format!("{tag}:(Intercept)")
                    } else {
                        format!("{tag}:g{g}:(Intercept)")
                    });
                }
            }
            let nd = basis.null_dim();
            let column = |j: usize| {
                DVector::from_iterator(
                    n,
                    (0..n).map(|r| if in_group(r) { values[(r, j)] } else { 0.0 }),
                )
            };
            let null_names: &[&str] = if nd == 3 { &["(Intercept)", "w", "h"] } else { &["w", "h"] };
            let mut own_fixed = Vec::new();
            for (j, nm) in null_names.iter().enumerate() {
                own_fixed.push(fixed_cols[outcome].len());
                fixed_cols[outcome].push(column(j));
                names[outcome].push(format!("{label}:{nm}"));
            }
            let start = pen_cols[outcome].len();
            for j in nd..basis.basis_dim() {
                if spec.basis.penalized {
                    pen_cols[outcome].push(column(j));
                } else {
                    own_fixed.push(fixed_cols[outcome].len());
                    fixed_cols[outcome].push(column(j));
                    names[outcome].push(format!("{label}:s{}", j - nd + 1));
                }
            }
            let end = pen_cols[outcome].len();
            pending.push((outcome, group, basis.clone(), own_fixed, start..end, intercepts));
        }
    }

    let to_matrix = |cols: &[DVector<f64>]| {
        if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(cols)
        }
    };
    let blocks = [
        OutcomeBlock {
            fixed: to_matrix(&fixed_cols[0]),
            penalized: to_matrix(&pen_cols[0]),
        },
        OutcomeBlock {
            fixed: to_matrix(&fixed_cols[1]),
            penalized: to_matrix(&pen_cols[1]),
        },
    ];
    for (outcome, block) in blocks.iter().enumerate() {
        check_rank(&block.fixed, outcome, &names[outcome])?;
    }
    let p0 = blocks[0].fixed.ncols();
    let q0 = blocks[0].penalized.ncols();
    let smooths = pending
        .into_iter()
        .map(|(outcome, group, basis, own, pen, intercepts)| {
            let (fo, po) = if outcome == 0 { (0, 0) } else { (p0, q0) };
            SmoothTerm {
                outcome,
                group,
                basis,
                parameterization: param,
                fixed_cols: own.into_iter().map(|c| c + fo).collect(),
                penalized_cols: pen.start + po..pen.end + po,
                intercept_cols: intercepts.into_iter().map(|c| c + fo).collect(),
            }
        })
        .collect();

    let y = DVector::from_iterator(
        2 * n,
        obs.iter().map(|o| o.y1).chain(obs.iter().map(|o| o.y2)),
    );
    let [n0, n1] = names;
    Ok(AssembledDesign {
        spec: spec.clone(),
        y,
        subjects: ds.subjects().to_vec(),
        subject_ids: ds
            .subjects()
            .iter()
            .map(|s| obs[s.start].subject_id.clone())
            .collect(),
        times: obs.iter().map(|o| o.time).collect(),
        blocks,
        smooths,
        fixed_names: n0.into_iter().chain(n1).collect(),
        points,
    })
}

fn check_rank(x: &DMatrix<f64>, outcome: usize, names: &[String]) -> Result<(), DesignError> {
    if x.ncols() == 0 {
        return Ok(());
    }
    let mut scaled = x.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(DesignError::RankDeficientX {
                outcome: outcome + 1,
                column: names[j].clone(),
            });
        }
        col /= norm;
    }
    if x.ncols() > x.nrows() {
        return Err(DesignError::RankDeficientX {
            outcome: outcome + 1,
            column: names[x.nrows()].clone(),
        });
    }
    // Cholesky of the Gram matrix of unit columns; a tiny pivot flags the
    // first column that is (nearly) in the span of the previous ones.
    let gram = scaled.tr_mul(&scaled);
    let p = gram.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut d = gram[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 1e-11 {
            return Err(DesignError::RankDeficientX {
                outcome: outcome + 1,
                column: names[j].clone(),
            });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..p {
            let mut v = gram[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(())
}
