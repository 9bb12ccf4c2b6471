//! Bayesian linear model with separately shrunk prognostic and
//! effect-modifying coefficients:
//!
//! ```text
//! Y_i = b0μ + x_iᵀβμ + A_i (b0τ + x_iᵀβτ) + ε_i,   ε_i ~ N(0, σ²)
//! βμ ~ N(0, σμ² I),  βτ ~ N(0, στ² I),  στ ~ Exp(scale = s_τ)
//! ```
//!
//! Intercepts get a proper but effectively flat normal prior. Sampling is a
//! blocked Gibbs sampler: all coefficients jointly from their multivariate
//! normal full conditional, σ² from its inverse-gamma full conditional and στ
//! by slice sampling on `log στ`.
//!
//! The kernel works on an arbitrary pair of prognostic / modifier feature
//! matrices, so the rule-ensemble model reuses it unchanged.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, Dataset};
use crate::draws::{CoefficientDraws, DrawsMeta, HyperDraw, Matrix, PosteriorDraws};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Prior on the modifier-coefficient scale στ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePrior {
    /// στ held at this value.
    Fixed(f64),
    /// στ ~ Exp(scale).
    Exponential { scale: f64 },
}

impl ScalePrior {
    /// `E(στ²)` under this prior.
    pub fn second_moment(&self) -> f64 {
        match *self {
            ScalePrior::Fixed(v) => v * v,
            ScalePrior::Exponential { scale } => 2.0 * scale * scale,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            ScalePrior::Fixed(v) => v,
            ScalePrior::Exponential { scale } => {
                let u: f64 = rng.random();
                -scale * (1.0 - u).ln()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ScalePrior::Fixed(v) if v > 0.0 && v.is_finite() => Ok(()),
            ScalePrior::Exponential { scale } if scale > 0.0 && scale.is_finite() => Ok(()),
            _ => Err(Error::invalid(format!("scale prior {self:?} must be strictly positive"))),
        }
    }
}

/// Prior on the noise variance σ².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePrior {
    /// σ² held at this value.
    Fixed(f64),
    InverseGamma { shape: f64, rate: f64 },
}

impl NoisePrior {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            NoisePrior::Fixed(v) => v,
            NoisePrior::InverseGamma { shape, rate } => {
                1.0 / Gamma::new(shape, 1.0 / rate).expect("validated").sample(rng)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            NoisePrior::Fixed(v) if v > 0.0 && v.is_finite() => Ok(()),
            NoisePrior::InverseGamma { shape, rate } if shape > 0.0 && rate > 0.0 => Ok(()),
            _ => Err(Error::invalid(format!("noise prior {self:?} must be strictly positive"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgePrior {
    /// Prior sd of the prognostic slopes.
    pub sigma_mu: f64,
    pub sigma_tau: ScalePrior,
    pub noise: NoisePrior,
    /// Prior sd of the two intercepts (large = effectively flat).
    pub intercept_sd: f64,
}

impl Default for RidgePrior {
    fn default() -> Self {
        RidgePrior {
            sigma_mu: 1.0,
            sigma_tau: ScalePrior::Exponential { scale: 1.0 },
            noise: NoisePrior::InverseGamma { shape: 1.0, rate: 1.0 },
            intercept_sd: 1e6,
        }
    }
}

impl RidgePrior {
    /// Flat-but-proper linear regression: every slope ~ N(0, 100²).
    pub fn flat_linear() -> Self {
        RidgePrior {
            sigma_mu: 100.0,
            sigma_tau: ScalePrior::Fixed(100.0),
            ..RidgePrior::default()
        }
    }

    pub fn with_s_tau(self, s_tau: f64) -> Self {
        RidgePrior {
            sigma_tau: ScalePrior::Exponential { scale: s_tau },
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_mu > 0.0 && self.intercept_sd > 0.0) {
            return Err(Error::invalid("prior scales must be strictly positive"));
        }
        self.sigma_tau.validate()?;
        self.noise.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub n_draws: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_draws: 2000,
            n_burn: 1000,
            thin: 1,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws < 2 {
            return Err(Error::invalid("n_draws must be at least 2"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        Ok(())
    }
}

/// Feature matrices for the two coefficient blocks.
pub trait FeatureMap {
    fn prognostic(&self, d: &Dataset) -> Result<DMatrix<f64>>;
    fn modifier(&self, d: &Dataset) -> Result<DMatrix<f64>>;
    fn prognostic_names(&self) -> Vec<String>;
    fn modifier_names(&self) -> Vec<String>;
}

/// Covariates used linearly: continuous columns as-is, categorical columns as
/// centered dummies for every level but the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFeatures {
    features: Vec<(usize, Option<usize>)>,
    centers: Vec<f64>,
    names: Vec<String>,
}

impl LinearFeatures {
    pub fn from_dataset(d: &Dataset) -> Self {
        let mut features = Vec::new();
        let mut centers = Vec::new();
        let mut names = Vec::new();
        for (j, col) in d.columns().iter().enumerate() {
            match col.kind {
                ColumnKind::Continuous => {
                    features.push((j, None));
                    centers.push(0.0);
                    names.push(col.name.clone());
                }
                ColumnKind::Categorical { levels } => {
                    for l in 1..levels {
                        let frac = d.x().column(j).iter().filter(|&&v| v as usize == l).count() as f64
                            / d.n() as f64;
                        features.push((j, Some(l)));
                        centers.push(frac);
                        names.push(format!("{}={}", col.name, col.label(l)));
                    }
                }
            }
        }
        LinearFeatures {
            features,
            centers,
            names,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn matrix(&self, d: &Dataset) -> Result<DMatrix<f64>> {
        if let Some(&(j, _)) = self.features.iter().find(|(j, _)| *j >= d.p()) {
            return Err(Error::invalid(format!("feature column {j} missing from data")));
        }
        Ok(DMatrix::from_fn(d.n(), self.features.len(), |i, f| {
            let (j, level) = self.features[f];
            let v = d.x()[(i, j)];
            match level {
                None => v,
                Some(l) => f64::from(v as usize == l) - self.centers[f],
            }
        }))
    }
}

impl FeatureMap for LinearFeatures {
    fn prognostic(&self, d: &Dataset) -> Result<DMatrix<f64>> {
        self.matrix(d)
    }
    fn modifier(&self, d: &Dataset) -> Result<DMatrix<f64>> {
        self.matrix(d)
    }
    fn prognostic_names(&self) -> Vec<String> {
        self.names.clone()
    }
    fn modifier_names(&self) -> Vec<String> {
        self.names.clone()
    }
}

/// Treatment column of the design: `A_i`, or `A_i − e(X_i)` in observational mode.
pub fn treatment_design(d: &Dataset, observational: bool) -> Vec<f64> {
    d.treatment()
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let a = f64::from(a);
            if observational {
                a - d.propensity(i)
            } else {
                a
            }
        })
        .collect()
}

/// Inputs of the Gibbs kernel.
pub struct EffectsDesign<'a> {
    pub y: &'a [f64],
    pub treat: &'a [f64],
    pub prognostic: &'a DMatrix<f64>,
    pub modifier: &'a DMatrix<f64>,
    pub prognostic_names: Vec<String>,
    pub modifier_names: Vec<String>,
}

fn slice_sample_log_scale(current: f64, sum_sq: f64, k: usize, scale: f64, rng: &mut Rng) -> f64 {
    // log density of u = log στ: Exp(scale) prior × N(0, στ² I_k) likelihood × Jacobian.
    let log_target = |u: f64| -(k as f64) * u - 0.5 * sum_sq * (-2.0 * u).exp() - u.exp() / scale + u;
    let width = 1.0;
    let max_steps = 64;
    let u0 = current.ln();
    let level = log_target(u0) + (1.0 - rng.random::<f64>()).ln();
    let mut lo = u0 - width * rng.random::<f64>();
    let mut hi = lo + width;
    let mut j = (max_steps as f64 * rng.random::<f64>()) as usize;
    let mut kk = max_steps - 1 - j;
    while j > 0 && log_target(lo) > level {
        lo -= width;
        j -= 1;
    }
    while kk > 0 && log_target(hi) > level {
        hi += width;
        kk -= 1;
    }
    loop {
        let u = lo + (hi - lo) * rng.random::<f64>();
        if log_target(u) > level {
            return u.exp();
        }
        if u < u0 {
            lo = u;
        } else {
            hi = u;
        }
        if hi - lo < 1e-14 {
            return current;
        }
    }
}

/// Run the blocked Gibbs sampler on `design`. Each retained `τ` row is
/// `b0τ + modifier · βτ`.
pub fn sample_effects(design: &EffectsDesign, prior: &RidgePrior, mcmc: &McmcConfig, model: &str) -> Result<PosteriorDraws> {
    prior.validate()?;
    mcmc.validate()?;
    let n = design.y.len();
    let (kmu, ktau) = (design.prognostic.ncols(), design.modifier.ncols());
    if design.treat.len() != n || design.prognostic.nrows() != n || design.modifier.nrows() != n {
        return Err(Error::invalid("design blocks disagree on the number of rows"));
    }
    let p = 2 + kmu + ktau;
    let tau0 = 1 + kmu;
    let mut z = DMatrix::zeros(n, p);
    for i in 0..n {
        z[(i, 0)] = 1.0;
        for j in 0..kmu {
            z[(i, 1 + j)] = design.prognostic[(i, j)];
        }
        z[(i, tau0)] = design.treat[i];
        for j in 0..ktau {
            z[(i, tau0 + 1 + j)] = design.treat[i] * design.modifier[(i, j)];
        }
    }
    let y = DVector::from_column_slice(design.y);
    let ztz = z.transpose() * &z;
    let zty = z.transpose() * &y;

    let mut rng = Rng::seed_from_u64(mcmc.seed);
    let mut sigma2 = match prior.noise {
        NoisePrior::Fixed(v) => v,
        NoisePrior::InverseGamma { .. } => {
            let mean = design.y.iter().sum::<f64>() / n as f64;
            let var = design.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 {
                var
            } else {
                1.0
            }
        }
    };
    let mut sigma_tau = match prior.sigma_tau {
        ScalePrior::Fixed(v) => v,
        ScalePrior::Exponential { scale } => scale,
    };
    let prior_prec_intercept = prior.intercept_sd.powi(-2);
    let prior_prec_mu = prior.sigma_mu.powi(-2);

    let total = mcmc.n_burn + mcmc.n_draws * mcmc.thin;
    let mut tau_rows = Vec::with_capacity(mcmc.n_draws * n);
    let mut coef_rows = Vec::with_capacity(mcmc.n_draws * p);
    let mut hyper = Vec::with_capacity(mcmc.n_draws);

    let mut q = DMatrix::zeros(p, p);
    for iter in 0..total {
        // β | σ², στ
        let prec_tau = sigma_tau.powi(-2);
        let inv_s2 = 1.0 / sigma2;
        q.copy_from(&ztz);
        q *= inv_s2;
        for j in 0..p {
            q[(j, j)] += if j == 0 || j == tau0 {
                prior_prec_intercept
            } else if j < tau0 {
                prior_prec_mu
            } else {
                prec_tau
            };
        }
        let chol = Cholesky::new(q.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("posterior precision of coefficients".into()))?;
        let mean = chol.solve(&(&zty * inv_s2));
        let noise = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lt = chol.l().transpose();
        let offset = lt
            .solve_upper_triangular(&noise)
            .ok_or_else(|| Error::NotPositiveDefinite("triangular solve".into()))?;
        let beta = mean + offset;

        // σ² | β
        if let NoisePrior::InverseGamma { shape, rate } = prior.noise {
            let fitted = &z * &beta;
            let rss: f64 = design.y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            let g = Gamma::new(shape + 0.5 * n as f64, 1.0 / (rate + 0.5 * rss))
                .map_err(|e| Error::invalid(e.to_string()))?;
            sigma2 = 1.0 / g.sample(&mut rng);
        }

        // στ | βτ
        if let ScalePrior::Exponential { scale } = prior.sigma_tau {
            let ss: f64 = (0..ktau).map(|j| beta[tau0 + 1 + j].powi(2)).sum();
            sigma_tau = slice_sample_log_scale(sigma_tau, ss, ktau, scale, &mut rng);
        }

        if iter >= mcmc.n_burn && (iter - mcmc.n_burn) % mcmc.thin == 0 {
            let beta_tau = beta.rows(tau0 + 1, ktau);
            let het = design.modifier * beta_tau;
            tau_rows.extend(het.iter().map(|h| beta[tau0] + h));
            coef_rows.extend(beta.iter().copied());
            hyper.push(HyperDraw {
                sigma: sigma2.sqrt(),
                sigma_tau,
            });
        }
    }

    let mut names = Vec::with_capacity(p);
    names.push("mu_intercept".to_string());
    names.extend(design.prognostic_names.iter().map(|s| format!("mu:{s}")));
    names.push("tau_intercept".to_string());
    names.extend(design.modifier_names.iter().map(|s| format!("tau:{s}")));
    if names.len() != p {
        names = (0..p).map(|j| format!("b{j}")).collect();
    }

    let draws = PosteriorDraws::new(
        Matrix::new(mcmc.n_draws, n, tau_rows)?,
        hyper,
        DrawsMeta {
            model: model.to_string(),
            n_burn: mcmc.n_burn,
            thin: mcmc.thin,
            seed: mcmc.seed,
            scale: 1.0,
        },
    )?;
    draws.with_coefficients(CoefficientDraws {
        names,
        values: Matrix::new(mcmc.n_draws, p, coef_rows)?,
    })
}

/// Fit the linear heterogeneous-effects model to a (standardized) data set.
pub fn fit_ridge(d: &Dataset, prior: &RidgePrior, mcmc: &McmcConfig, observational: bool) -> Result<PosteriorDraws> {
    d.require_both_arms()?;
    let features = LinearFeatures::from_dataset(d);
    let x = features.matrix(d)?;
    let treat = treatment_design(d, observational);
    let design = EffectsDesign {
        y: d.y(),
        treat: &treat,
        prognostic: &x,
        modifier: &x,
        prognostic_names: features.names.clone(),
        modifier_names: features.names.clone(),
    };
    sample_effects(&design, prior, mcmc, "ridge")
}

/// Posterior-mean predictions `(μ̂₀(x), μ̂₁(x))` on `d` from a fit whose
/// coefficient draws were produced with `features`.
pub fn predict_arms(draws: &PosteriorDraws, features: &dyn FeatureMap, d: &Dataset, observational: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let coef = draws
        .coefficients()
        .ok_or_else(|| Error::invalid("draws carry no coefficient trace"))?;
    let beta = coef.means();
    let prog = features.prognostic(d)?;
    let modif = features.modifier(d)?;
    let (kmu, ktau) = (prog.ncols(), modif.ncols());
    if beta.len() != 2 + kmu + ktau {
        return Err(Error::invalid("feature map does not match coefficient layout"));
    }
    let tau0 = 1 + kmu;
    let mut mu0 = Vec::with_capacity(d.n());
    let mut mu1 = Vec::with_capacity(d.n());
    for i in 0..d.n() {
        let base = beta[0] + (0..kmu).map(|j| prog[(i, j)] * beta[1 + j]).sum::<f64>();
        let tau = beta[tau0] + (0..ktau).map(|j| modif[(i, j)] * beta[tau0 + 1 + j]).sum::<f64>();
        let e = if observational { d.propensity(i) } else { 0.0 };
        mu0.push(base - e * tau);
        mu1.push(base + (1.0 - e) * tau);
    }
    Ok((mu0, mu1))
}

/// Prior mean of the linear-model heterogeneity `H² = βτᵀ R βτ`, i.e.
/// `E(στ²) · tr(R)` for a correlation matrix `R`.
pub fn prior_heterogeneity_mean_linear(sigma_tau: &ScalePrior, corr: &DMatrix<f64>) -> Result<f64> {
    sigma_tau.validate()?;
    if !corr.is_square() || corr.nrows() == 0 {
        return Err(Error::invalid("correlation matrix must be square and nonempty"));
    }
    let p = corr.nrows();
    for i in 0..p {
        if (corr[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "correlation matrix diagonal entry {i} is {} (expected 1)",
                corr[(i, i)]
            )));
        }
        for j in 0..i {
            if (corr[(i, j)] - corr[(j, i)]).abs() > 1e-12 {
                return Err(Error::invalid("correlation matrix is not symmetric"));
            }
        }
    }
    Ok(sigma_tau.second_moment() * corr.trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Covariate, Propensity};

    fn toy(y: Vec<f64>, x: &[f64], p: usize) -> Dataset {
        let n = y.len();
        Dataset::new(
            y,
            (0..n).map(|i| (i % 2) as u8).collect(),
            DMatrix::from_row_slice(n, p, x),
            (0..p).map(|j| Covariate::continuous(format!("x{j}"))).collect(),
            Propensity::Constant(0.5),
        )
        .unwrap()
    }

    #[test]
    fn linear_heterogeneity_mean() {
        let r = DMatrix::identity(3, 3);
        let v = prior_heterogeneity_mean_linear(&ScalePrior::Exponential { scale: 1.0 }, &r).unwrap();
        assert_eq!(v, 6.0);
        let r = DMatrix::identity(5, 5);
        assert_eq!(prior_heterogeneity_mean_linear(&ScalePrior::Fixed(1.0), &r).unwrap(), 5.0);
        let mut bad = DMatrix::identity(2, 2);
        bad[(1, 1)] = 2.0;
        assert!(prior_heterogeneity_mean_linear(&ScalePrior::Fixed(1.0), &bad).is_err());
    }

    #[test]
    fn halving_scale_quarters_heterogeneity() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let a = prior_heterogeneity_mean_linear(&ScalePrior::Exponential { scale: 0.8 }, &r).unwrap();
        let b = prior_heterogeneity_mean_linear(&ScalePrior::Exponential { scale: 0.4 }, &r).unwrap();
        assert!((a / b - 4.0).abs() < 1e-12);
        // s_τ ∝ P^{-1/2} keeps the prior heterogeneity fixed as P grows.
        let h: Vec<f64> = [1usize, 4, 16]
            .iter()
            .map(|&p| {
                let s = 1.0 / (p as f64).sqrt();
                prior_heterogeneity_mean_linear(&ScalePrior::Exponential { scale: s }, &DMatrix::identity(p, p)).unwrap()
            })
            .collect();
        assert!(h.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn one_armed_data_is_rejected() {
        let d = Dataset::new(
            vec![1.0, 2.0],
            vec![1, 1],
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            vec![Covariate::continuous("x")],
            Propensity::Constant(0.5),
        )
        .unwrap();
        let err = fit_ridge(&d, &RidgePrior::default(), &McmcConfig::default(), false).unwrap_err();
        assert!(matches!(err, Error::OneArmed));
    }

    #[test]
    fn determinism_and_row_means() {
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let y: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = toy(y, &x, 2);
        let mcmc = McmcConfig {
            n_draws: 50,
            n_burn: 20,
            thin: 2,
            seed: 42,
        };
        let a = fit_ridge(&d, &RidgePrior::default(), &mcmc, false).unwrap();
        let b = fit_ridge(&d, &RidgePrior::default(), &mcmc, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_draws(), 50);
        for s in 0..a.n_draws() {
            let m = a.row(s).iter().sum::<f64>() / a.n_units() as f64;
            assert!((m - a.ate()[s]).abs() < 1e-12);
        }
        assert!(a.hyper().iter().all(|h| h.sigma > 0.0 && h.sigma_tau > 0.0));
    }

    #[test]
    fn null_outcomes_give_null_effects() {
        let x: Vec<f64> = (0..60).map(|i| ((i * 13) % 17) as f64 / 8.0 - 1.0).collect();
        let d = toy(vec![0.0; 30], &x, 2);
        let mcmc = McmcConfig {
            n_draws: 2000,
            n_burn: 200,
            thin: 1,
            seed: 3,
        };
        let draws = fit_ridge(&d, &RidgePrior::default(), &mcmc, false).unwrap();
        let ate = draws.ate();
        let mean = ate.iter().sum::<f64>() / ate.len() as f64;
        let sd = (ate.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ate.len() as f64).sqrt();
        // Gibbs draws are autocorrelated; allow a generous effective-size discount.
        assert!(mean.abs() < 3.0 * sd / (ate.len() as f64 / 10.0).sqrt(), "mean {mean} sd {sd}");
    }

    #[test]
    fn observational_design_uses_residualized_treatment() {
        let d = toy(vec![1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 2.0, 3.0], 1);
        assert_eq!(treatment_design(&d, true), vec![-0.5, 0.5, -0.5, 0.5]);
        assert_eq!(treatment_design(&d, false), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn slice_sampler_targets_exponential_prior_without_data() {
        // With no modifier coefficients στ's full conditional is its prior.
        let mut rng = Rng::seed_from_u64(9);
        let mut v = 1.0;
        let mut sum = 0.0;
        let n = 20000;
        for _ in 0..n {
            v = slice_sample_log_scale(v, 0.0, 0, 0.5, &mut rng);
            sum += v;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.03, "mean {mean}");
    }
}
