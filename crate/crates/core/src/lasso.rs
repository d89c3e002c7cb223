//! L1-penalized least squares by cyclic coordinate descent.
//!
//! Minimizes `(1/2n)||y - b0 - X beta||^2 + lambda * ||beta||_1` with an
//! unpenalized intercept. Columns are standardized internally (mean zero,
//! unit population SD) and coefficients are reported back on the original
//! scale. Updates run on the standardized Gram matrix, so sweep cost is
//! independent of the number of rows after the one-time Gram build.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// A fitted penalized regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub intercept: f64,
    /// Coefficients on the original covariate scale.
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    /// Coordinate-descent sweeps used.
    pub sweeps: usize,
}

impl LassoFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept
            + row
                .iter()
                .zip(&self.coefficients)
                .map(|(x, b)| x * b)
                .sum::<f64>()
    }
}

/// Solver controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitControl {
    /// Convergence: maximum absolute coefficient change per sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FitControl {
    fn default() -> Self {
        FitControl {
            tol: 1e-7,
            max_sweeps: 100_000,
        }
    }
}

/// Cross-validation controls for lambda selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub k_folds: usize,
    /// Points on the geometric path from `lambda_max` down.
    pub n_path: usize,
    /// Smallest path value as a fraction of `lambda_max`.
    pub min_lambda_ratio: f64,
    pub control: FitControl,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k_folds: 10,
            n_path: 50,
            min_lambda_ratio: 1e-3,
            control: FitControl {
                tol: 1e-4,
                max_sweeps: 50_000,
            },
        }
    }
}

/// Column statistics plus the standardized Gram system.
struct Standardized {
    means: Vec<f64>,
    /// Population SDs; zero marks a constant column (coefficient pinned to 0).
    sds: Vec<f64>,
    y_mean: f64,
    /// `X~' X~ / n` on the standardized scale; unit diagonal.
    gram: Array2<f64>,
    /// `X~' (y - y_mean) / n`.
    xty: Vec<f64>,
}

impl Standardized {
    fn build(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> Result<Standardized> {
        let n = x.nrows();
        let p = x.ncols();
        if n == 0 {
            return Err(Error::Empty("design matrix"));
        }
        if y.len() != n {
            return Err(Error::Dimension {
                context: "response length",
                expected: n,
                actual: y.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression inputs"));
        }
        let nf = n as f64;
        let y_mean = y.sum() / nf;

        let mut means = Vec::with_capacity(p);
        let mut sds = Vec::with_capacity(p);
        let mut std_x = Array2::<f64>::zeros((n, p));
        for j in 0..p {
            let col = x.column(j);
            let mean = col.sum() / nf;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let sd = var.sqrt();
            means.push(mean);
            if sd > 1e-12 {
                sds.push(sd);
                for (slot, v) in std_x.column_mut(j).iter_mut().zip(col) {
                    *slot = (v - mean) / sd;
                }
            } else {
                sds.push(0.0);
            }
        }

        let mut gram = std_x.t().dot(&std_x);
        gram.mapv_inplace(|v| v / nf);
        let mut xty = vec![0.0; p];
        for j in 0..p {
            if sds[j] == 0.0 {
                // Keep the diagonal unit so updates are well defined; the
                // zero row/column pins the coefficient at zero.
                gram[(j, j)] = 1.0;
                continue;
            }
            xty[j] = std_x
                .column(j)
                .iter()
                .zip(y)
                .map(|(xv, yv)| xv * (yv - y_mean))
                .sum::<f64>()
                / nf;
        }
        Ok(Standardized {
            means,
            sds,
            y_mean,
            gram,
            xty,
        })
    }

    fn lambda_max(&self) -> f64 {
        self.xty.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()))
    }

    fn destandardize(&self, beta_std: &[f64], lambda: f64, sweeps: usize) -> LassoFit {
        let coefficients: Vec<f64> = beta_std
            .iter()
            .zip(&self.sds)
            .map(|(b, sd)| if *sd > 0.0 { b / sd } else { 0.0 })
            .collect();
        let intercept = self.y_mean
            - coefficients
                .iter()
                .zip(&self.means)
                .map(|(b, m)| b * m)
                .sum::<f64>();
        LassoFit {
            intercept,
            coefficients,
            lambda,
            sweeps,
        }
    }
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Per-coordinate penalty multipliers; `None` penalizes every column
/// equally. A zero entry leaves that column unpenalized.
fn per_coord_lambda(lambda: f64, factors: Option<&[f64]>, j: usize) -> f64 {
    match factors {
        Some(w) => lambda * w[j],
        None => lambda,
    }
}

/// Cyclic coordinate descent on the standardized system. `beta` is the warm
/// start and receives the solution; `grad_cache` holds `gram * beta`.
fn cd_solve(
    std: &Standardized,
    lambda: f64,
    factors: Option<&[f64]>,
    control: &FitControl,
    beta: &mut [f64],
    grad_cache: &mut [f64],
) -> Result<usize> {
    let p = beta.len();
    debug_assert_eq!(grad_cache.len(), p);

    #[cfg(debug_assertions)]
    let mut prev_objective = f64::INFINITY;

    let mut last_delta = f64::INFINITY;
    for sweep in 1..=control.max_sweeps {
        let mut max_delta = 0.0_f64;
        for j in 0..p {
            let old = beta[j];
            let z = std.xty[j] - grad_cache[j] + old;
            let new = soft_threshold(z, per_coord_lambda(lambda, factors, j));
            if new != old {
                let delta = new - old;
                let row = std.gram.row(j);
                for (g, gij) in grad_cache.iter_mut().zip(row) {
                    *g += delta * gij;
                }
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }

        #[cfg(debug_assertions)]
        {
            // Each coordinate step minimizes the objective exactly, so the
            // sweep objective is non-increasing up to rounding.
            let penalty: f64 = beta
                .iter()
                .enumerate()
                .map(|(j, b)| per_coord_lambda(lambda, factors, j) * b.abs())
                .sum();
            let objective = 0.5
                * beta
                    .iter()
                    .zip(grad_cache.iter())
                    .map(|(b, g)| b * g)
                    .sum::<f64>()
                - std.xty.iter().zip(beta.iter()).map(|(c, b)| c * b).sum::<f64>()
                + penalty;
            debug_assert!(
                objective <= prev_objective + 1e-10 * (1.0 + prev_objective.abs()),
                "objective increased across sweep {sweep}: {prev_objective} -> {objective}"
            );
            prev_objective = objective;
        }

        if max_delta < control.tol {
            return Ok(sweep);
        }
        last_delta = max_delta;
    }
    Err(Error::NonConvergence {
        sweeps: control.max_sweeps,
        last_delta,
        lambda,
    })
}

/// Fits the penalized regression at a single `lambda`.
pub fn lasso_fit(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambda: f64,
    tol: f64,
) -> Result<LassoFit> {
    lasso_fit_with(
        x,
        y,
        lambda,
        &FitControl {
            tol,
            ..FitControl::default()
        },
    )
}

/// As [`lasso_fit`] with explicit solver controls.
pub fn lasso_fit_with(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambda: f64,
    control: &FitControl,
) -> Result<LassoFit> {
    lasso_fit_factors(x, y, lambda, None, control)
}

/// Weighted L1 fit: the penalty on column `j` is `lambda * factors[j]`, so a
/// zero factor leaves that column unpenalized (the usual way to shield
/// treatment-encoding terms from shrinkage while the covariate terms are
/// selected).
pub fn lasso_fit_factors(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambda: f64,
    factors: Option<&[f64]>,
    control: &FitControl,
) -> Result<LassoFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda {lambda} must be finite and >= 0")));
    }
    if !(control.tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    if let Some(w) = factors {
        if w.len() != x.ncols() {
            return Err(Error::Dimension {
                context: "penalty factors",
                expected: x.ncols(),
                actual: w.len(),
            });
        }
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("penalty factors must be nonnegative".into()));
        }
    }
    let std = Standardized::build(x, y)?;
    let p = x.ncols();
    let mut beta = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let sweeps = cd_solve(&std, lambda, factors, control, &mut beta, &mut grad)?;
    Ok(std.destandardize(&beta, lambda, sweeps))
}

/// Smallest penalty that zeroes every coefficient.
pub fn lambda_max(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    Ok(Standardized::build(x, y)?.lambda_max())
}

/// Selects the penalty by K-fold cross-validation over a geometric path.
///
/// Returns the path value minimizing pooled held-out squared error; ties go
/// to the sparser (larger) lambda. A zero-variance response short-circuits to
/// `lambda_max`.
pub fn select_lambda<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    rng: &mut R,
) -> Result<f64> {
    select_lambda_with(x, y, &CvConfig::default(), rng)
}

pub fn select_lambda_with<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    config: &CvConfig,
    rng: &mut R,
) -> Result<f64> {
    select_lambda_factors(x, y, None, config, rng)
}

/// As [`select_lambda_with`] with per-column penalty factors (zero factors
/// mark unpenalized columns; they stay in every fit along the path).
pub fn select_lambda_factors<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    factors: Option<&[f64]>,
    config: &CvConfig,
    rng: &mut R,
) -> Result<f64> {
    let n = x.nrows();
    if n < 20 {
        return Err(Error::Config(format!(
            "cross-validation needs at least 20 rows, got {n}"
        )));
    }
    if config.k_folds < 2 || config.k_folds > n {
        return Err(Error::Config(format!(
            "k_folds {} must lie in 2..={n}",
            config.k_folds
        )));
    }
    if config.n_path < 2 {
        return Err(Error::Config("lambda path needs at least 2 points".into()));
    }

    let full = Standardized::build(x, y)?;
    let lam_max = match factors {
        None => full.lambda_max(),
        Some(w) => full
            .xty
            .iter()
            .zip(w)
            .filter(|(_, w)| **w > 0.0)
            .map(|(c, w)| c.abs() / w)
            .fold(0.0_f64, f64::max),
    };
    let y_var = y.iter().map(|v| (v - full.y_mean) * (v - full.y_mean)).sum::<f64>()
        / n as f64;
    if y_var <= 1e-24 || lam_max <= 0.0 {
        return Ok(lam_max);
    }

    // Under-determined training folds make the smallest path penalties
    // ill-posed; floor the path at 1% of lambda_max in that regime.
    let min_train = n - n.div_ceil(config.k_folds);
    let floor_ratio = if min_train < x.ncols() {
        config.min_lambda_ratio.max(1e-2)
    } else {
        config.min_lambda_ratio
    };
    let path: Vec<f64> = (0..config.n_path)
        .map(|i| {
            let t = i as f64 / (config.n_path - 1) as f64;
            lam_max * floor_ratio.powf(t)
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let p = x.ncols();
    let mut pooled_sse = vec![0.0_f64; path.len()];
    for fold in 0..config.k_folds {
        let lo = fold * n / config.k_folds;
        let hi = (fold + 1) * n / config.k_folds;
        let test_idx = &order[lo..hi];
        let train_idx: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();

        let train_x = select_rows(x, &train_idx);
        let train_y = Array1::from_iter(train_idx.iter().map(|i| y[*i]));
        let std = Standardized::build(train_x.view(), train_y.view())?;

        let mut beta = vec![0.0; p];
        let mut grad = vec![0.0; p];
        for (li, &lambda) in path.iter().enumerate() {
            cd_solve(&std, lambda, factors, &config.control, &mut beta, &mut grad)?;
            let fit = std.destandardize(&beta, lambda, 0);
            for &i in test_idx {
                let pred = fit.predict_row(x.row(i).as_slice().expect("contiguous row"));
                let err = y[i] - pred;
                pooled_sse[li] += err * err;
            }
        }
    }

    let best = pooled_sse
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
        .expect("non-empty path");
    Ok(path[best])
}

fn select_rows(x: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}
