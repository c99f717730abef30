//! Fitting from curves, tuning by modified BIC over a lattice, and k-fold
//! cross-validation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{CurveSample, TimeGrid};
use crate::design::{build_designs, Bases, DesignSet, ProjectionMode};
use crate::em::{FitOptions, FitReport};
use crate::error::{FmeError, Result};
use crate::fme::{fit_fme, FmeModel};
use crate::fme_lasso::{fit_fme_lasso, LassoPenalty};
use crate::ifme::{fit_ifme, reconstruct_networks, DerivativeSpec, IfmeModel};
use crate::metrics::{corr, predict_response, rpe, sse, MixturePredictor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    Fme,
    FmeLasso,
    Ifme,
}

impl FromStr for FitKind {
    type Err = FmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fme" => Ok(Self::Fme),
            "fme-lasso" | "fme_lasso" | "lasso" => Ok(Self::FmeLasso),
            "ifme" => Ok(Self::Ifme),
            other => Err(FmeError::InvalidInput(format!("unknown model kind `{other}`"))),
        }
    }
}

impl fmt::Display for FitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fme => "fme",
            Self::FmeLasso => "fme-lasso",
            Self::Ifme => "ifme",
        })
    }
}

/// Everything needed to fit one model to a set of curves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: FitKind,
    pub k: usize,
    pub lambda: f64,
    pub chi: f64,
    pub spec: DerivativeSpec,
    /// `(r, p, q)` basis dimensions.
    pub dims: [usize; 3],
    pub degree: usize,
    pub projection: ProjectionMode,
    pub fit: FitOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: FitKind::Fme,
            k: 3,
            lambda: 0.0,
            chi: 0.0,
            spec: DerivativeSpec::default(),
            dims: [10, 10, 10],
            degree: 3,
            projection: ProjectionMode::default(),
            fit: FitOptions::default(),
        }
    }
}

impl ModelConfig {
    pub fn bases(&self) -> Result<Bases> {
        let [r, p, q] = self.dims;
        Bases::with_dims(r, p, q, self.degree)
    }

    pub fn penalty(&self) -> Result<LassoPenalty> {
        LassoPenalty::new(self.lambda, self.chi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(FmeError::InvalidInput("K must be at least 1".into()));
        }
        if self.kind != FitKind::Fme {
            self.penalty()?;
        }
        if self.kind == FitKind::Ifme {
            self.spec.validate()?;
        }
        Ok(())
    }
}

/// A fitted model of any of the three kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FittedModel {
    Fme { model: FmeModel },
    FmeLasso { model: FmeModel, penalty: LassoPenalty },
    Ifme { model: IfmeModel, penalty: LassoPenalty },
}

impl FittedModel {
    pub fn kind(&self) -> FitKind {
        match self {
            Self::Fme { .. } => FitKind::Fme,
            Self::FmeLasso { .. } => FitKind::FmeLasso,
            Self::Ifme { .. } => FitKind::Ifme,
        }
    }

    pub fn bases(&self) -> Option<&Bases> {
        match self {
            Self::Fme { model } | Self::FmeLasso { model, .. } => model.bases.as_ref(),
            Self::Ifme { model, .. } => model.bases.as_ref(),
        }
    }

    pub fn df(&self) -> usize {
        match self {
            Self::Fme { model } | Self::FmeLasso { model, .. } => model.df(),
            Self::Ifme { model, .. } => model.df(),
        }
    }

    fn predictor(&self) -> &dyn MixturePredictor {
        match self {
            Self::Fme { model } | Self::FmeLasso { model, .. } => model,
            Self::Ifme { model, .. } => model,
        }
    }

    /// Gating (`K - 1` rows) and expert (`K` rows) coefficient functions on `grid`.
    pub fn reconstruct(&self, grid: &TimeGrid) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match self {
            Self::Fme { model } | Self::FmeLasso { model, .. } => {
                let bases = model
                    .bases
                    .as_ref()
                    .ok_or_else(|| FmeError::InvalidInput("model carries no bases".into()))?;
                let ep = bases.p.evaluation_matrix(grid)?;
                let eq = bases.q.evaluation_matrix(grid)?;
                let beta = DMatrix::from_fn(model.k, grid.len(), |k, j| {
                    model.experts[k].eta.iter().enumerate().map(|(l, c)| ep[(j, l)] * c).sum()
                });
                let gates = model.gating.n_gates();
                let alpha = DMatrix::from_fn(gates, grid.len(), |k, j| {
                    model.gating.slopes(k).iter().enumerate().map(|(l, c)| eq[(j, l)] * c).sum()
                });
                Ok((alpha, beta))
            }
            Self::Ifme { model, .. } => reconstruct_networks(model, grid),
        }
    }
}

impl MixturePredictor for FittedModel {
    fn n_components(&self) -> usize {
        self.predictor().n_components()
    }

    fn components(&self, designs: &DesignSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.predictor().components(designs)
    }

    fn log_joint(&self, designs: &DesignSet, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.predictor().log_joint(designs, y)
    }
}

/// Responses of the curves; every curve must carry one.
pub fn responses(curves: &[CurveSample]) -> Result<DVector<f64>> {
    let y: Option<Vec<f64>> = curves.iter().map(|c| c.response).collect();
    y.map(DVector::from_vec)
        .ok_or_else(|| FmeError::InvalidInput("every curve needs a response to fit".into()))
}

/// Fits `cfg` to prebuilt designs; `bases` must be the bases of `designs`.
pub fn fit_designs(
    cfg: &ModelConfig,
    designs: &DesignSet,
    bases: &Bases,
    y: &DVector<f64>,
) -> Result<(FittedModel, FitReport)> {
    cfg.validate()?;
    match cfg.kind {
        FitKind::Fme => {
            let (mut model, rep) = fit_fme(designs, y, cfg.k, &cfg.fit)?;
            model.bases = Some(bases.clone());
            Ok((FittedModel::Fme { model }, rep))
        }
        FitKind::FmeLasso => {
            let penalty = cfg.penalty()?;
            let (mut model, rep) = fit_fme_lasso(designs, y, cfg.k, penalty, &cfg.fit)?;
            model.bases = Some(bases.clone());
            Ok((FittedModel::FmeLasso { model, penalty }, rep))
        }
        FitKind::Ifme => {
            let penalty = cfg.penalty()?;
            let (model, rep) = fit_ifme(designs, bases, y, cfg.k, penalty, cfg.spec, &cfg.fit)?;
            Ok((FittedModel::Ifme { model, penalty }, rep))
        }
    }
}

/// Builds designs for `curves` and fits `cfg`.
pub fn fit_model(cfg: &ModelConfig, curves: &[CurveSample]) -> Result<(FittedModel, FitReport)> {
    let bases = cfg.bases()?;
    let designs = build_designs(curves, &bases, cfg.projection)?;
    fit_designs(cfg, &designs, &bases, &responses(curves)?)
}

/// Designs of `curves` under the bases of a fitted model.
pub fn designs_for(model: &FittedModel, curves: &[CurveSample], mode: ProjectionMode) -> Result<DesignSet> {
    let bases = model
        .bases()
        .ok_or_else(|| FmeError::InvalidInput("model carries no bases".into()))?;
    build_designs(curves, bases, mode)
}

/// Candidate values per tuning parameter; empty axes take the value of the
/// base configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionGrid {
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
    pub chi: Vec<f64>,
    pub rho: Vec<f64>,
    pub varrho: Vec<f64>,
    pub d1: Vec<usize>,
    pub d2: Vec<usize>,
    pub dims: Vec<[usize; 3]>,
}

fn axis<T: Copy>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

impl SelectionGrid {
    /// Lattice points for `base.kind`; axes the kind ignores are collapsed.
    pub fn points(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        let penalized = base.kind != FitKind::Fme;
        let ifme = base.kind == FitKind::Ifme;
        let pick = |on: bool, v: Vec<f64>, b: f64| if on { v } else { vec![b] };
        let lambdas = pick(penalized, axis(&self.lambda, base.lambda), base.lambda);
        let chis = pick(penalized, axis(&self.chi, base.chi), base.chi);
        let rhos = pick(ifme, axis(&self.rho, base.spec.rho), base.spec.rho);
        let varrhos = pick(ifme, axis(&self.varrho, base.spec.varrho), base.spec.varrho);
        let (d1s, d2s) = if ifme {
            (axis(&self.d1, base.spec.d1), axis(&self.d2, base.spec.d2))
        } else {
            (vec![base.spec.d1], vec![base.spec.d2])
        };
        let mut out = Vec::new();
        for &dims in &axis(&self.dims, base.dims) {
            for &k in &axis(&self.k, base.k) {
                for &lambda in &lambdas {
                    for &chi in &chis {
                        for &rho in &rhos {
                            for &varrho in &varrhos {
                                for &d1 in &d1s {
                                    for &d2 in &d2s {
                                        out.push(ModelConfig {
                                            k,
                                            lambda,
                                            chi,
                                            dims,
                                            spec: DerivativeSpec { d1, d2, rho, varrho, ..base.spec },
                                            ..*base
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One lattice point of a selection run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub config: ModelConfig,
    pub mbic: Option<f64>,
    pub bic: Option<f64>,
    pub loglik: Option<f64>,
    pub objective: Option<f64>,
    pub df: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub chosen: ModelConfig,
    pub model: FittedModel,
    pub report: FitReport,
    /// Index of the chosen row in `table`.
    pub best: usize,
    pub table: Vec<SelectionRow>,
}

/// Index of the largest mBIC; ties go to smaller df, then smaller K, then
/// the earlier lattice point.
pub fn rank_best(rows: &[SelectionRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        let (Some(m), Some(df)) = (row.mbic, row.df) else {
            continue;
        };
        if !m.is_finite() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (bm, bdf, bk) = (rows[b].mbic.unwrap(), rows[b].df.unwrap(), rows[b].config.k);
                m > bm || (m == bm && (df < bdf || (df == bdf && row.config.k < bk)))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Fits every lattice point to `curves` and keeps the one with the largest
/// modified BIC.
pub fn grid_search(curves: &[CurveSample], grid: &SelectionGrid, base: &ModelConfig) -> Result<Selection> {
    let points = grid.points(base);
    if points.is_empty() {
        return Err(FmeError::Selection("empty grid".into()));
    }
    let y = responses(curves)?;
    let mut designs: HashMap<[usize; 3], (Bases, DesignSet)> = HashMap::new();
    for p in &points {
        if !designs.contains_key(&p.dims) {
            let bases = p.bases()?;
            let d = build_designs(curves, &bases, p.projection)?;
            designs.insert(p.dims, (bases, d));
        }
    }
    let fits: Vec<Result<(FittedModel, FitReport)>> = points
        .par_iter()
        .map(|p| {
            let (bases, d) = &designs[&p.dims];
            fit_designs(p, d, bases, &y)
        })
        .collect();
    let mut table = Vec::with_capacity(points.len());
    let mut kept = Vec::with_capacity(points.len());
    for (p, fit) in points.iter().zip(fits) {
        match fit {
            Ok((model, rep)) => {
                table.push(SelectionRow {
                    config: *p,
                    mbic: Some(rep.mbic),
                    bic: Some(rep.bic),
                    loglik: Some(rep.loglik),
                    objective: Some(rep.objective),
                    df: Some(rep.df),
                    error: None,
                });
                kept.push(Some((model, rep)));
            }
            Err(e) if e.is_numerical() || matches!(e, FmeError::Identifiability(_)) => {
                log::warn!("lattice point K = {}, lambda = {}, chi = {} failed: {e}", p.k, p.lambda, p.chi);
                table.push(SelectionRow {
                    config: *p,
                    mbic: None,
                    bic: None,
                    loglik: None,
                    objective: None,
                    df: None,
                    error: Some(e.to_string()),
                });
                kept.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let best = rank_best(&table).ok_or_else(|| FmeError::Selection("every lattice point failed".into()))?;
    let (model, report) = kept.swap_remove(best).expect("ranked row has a fit");
    Ok(Selection {
        chosen: points[best],
        model,
        report,
        best,
        table,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvMetric {
    Rpe,
    Sse,
    Corr,
}

impl CvMetric {
    pub fn eval(self, y: &[f64], yhat: &[f64]) -> Result<f64> {
        match self {
            Self::Rpe => rpe(y, yhat),
            Self::Sse => sse(y, yhat),
            Self::Corr => corr(y, yhat),
        }
    }
}

impl FromStr for CvMetric {
    type Err = FmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rpe" => Ok(Self::Rpe),
            "sse" => Ok(Self::Sse),
            "corr" => Ok(Self::Corr),
            other => Err(FmeError::InvalidInput(format!("unknown metric `{other}`"))),
        }
    }
}

/// Shuffled partition of `0..n` into `folds` nearly equal parts.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || n < folds {
        return Err(FmeError::InvalidInput(format!(
            "need 2 <= folds <= n, got {folds} folds for n = {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in idx.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub metric: CvMetric,
    /// Mean of the per-fold metric over the folds where it is defined.
    pub mean: Option<f64>,
    /// Metric of all out-of-fold predictions pooled together; for
    /// leave-one-out with RPE this is the CVRPE.
    pub pooled: Option<f64>,
    pub per_fold: Vec<Option<f64>>,
    pub failed_folds: usize,
    /// Out-of-fold predictions, `NaN` where the fold failed.
    pub predictions: Vec<f64>,
}

/// k-fold cross-validation of `cfg` with marginal predictions; `folds = n`
/// gives leave-one-out.
pub fn kfold_cv(
    cfg: &ModelConfig,
    curves: &[CurveSample],
    folds: usize,
    metric: CvMetric,
    seed: u64,
) -> Result<CvResult> {
    let n = curves.len();
    let parts = fold_partition(n, folds, seed)?;
    let bases = cfg.bases()?;
    let designs = build_designs(curves, &bases, cfg.projection)?;
    let y = responses(curves)?;
    let outcomes: Vec<Result<Vec<f64>>> = parts
        .par_iter()
        .map(|test| {
            let mut in_test = vec![false; n];
            for &i in test {
                in_test[i] = true;
            }
            let train: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
            let ytr = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
            let (model, _) = fit_designs(cfg, &designs.subset(&train), &bases, &ytr)?;
            Ok(predict_response(&model, &designs.subset(test))?.iter().copied().collect())
        })
        .collect();
    let mut predictions = vec![f64::NAN; n];
    let mut per_fold = Vec::with_capacity(folds);
    let mut failed = 0;
    for (test, out) in parts.iter().zip(outcomes) {
        match out {
            Ok(yhat) => {
                for (&i, v) in test.iter().zip(&yhat) {
                    predictions[i] = *v;
                }
                let yt: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                per_fold.push(metric.eval(&yt, &yhat).ok());
            }
            Err(e) if e.is_numerical() => {
                log::warn!("fold failed: {e}");
                failed += 1;
                per_fold.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if failed == folds {
        return Err(FmeError::Selection("every fold failed".into()));
    }
    let defined: Vec<f64> = per_fold.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let ok: Vec<usize> = (0..n).filter(|&i| predictions[i].is_finite()).collect();
    let ys: Vec<f64> = ok.iter().map(|&i| y[i]).collect();
    let ps: Vec<f64> = ok.iter().map(|&i| predictions[i]).collect();
    Ok(CvResult {
        metric,
        mean,
        pooled: metric.eval(&ys, &ps).ok(),
        per_fold,
        failed_folds: failed,
        predictions,
    })
}
