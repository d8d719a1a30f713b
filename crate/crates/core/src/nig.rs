//! Closed-form Normal-Inverse-Gamma mathematics.
//!
//! The head predicts `NIG(γ, ν, α, β)` over (μ, σ²). Integrating out μ and σ²
//! gives a Student-t predictive with `2α` degrees of freedom, location `γ` and
//! scale `√(β(1+ν)/(να))`; that marginal is what the loss and the prediction
//! intervals use. Variance *reporting* follows the product split
//! `β/(ν(α−1)) = β/(α−1) · 1/ν` (aleatoric times epistemic scaling).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::special::{ln_gamma, student_t_quantile};

/// Default weight of the evidence regularizer.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Floor added to ν and β (and to α − 1) after the head activation.
pub const EVIDENCE_FLOOR: f64 = 1e-6;

/// Affine map between years CE and the unitless regression target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YearScale {
    pub origin: f64,
    pub span: f64,
}

impl Default for YearScale {
    fn default() -> Self {
        YearScale {
            origin: 800.0,
            span: 1100.0,
        }
    }
}

impl YearScale {
    pub fn normalize(&self, year: f64) -> f64 {
        (year - self.origin) / self.span
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.span + self.origin
    }

    /// Converts a standard deviation (not a position) to years.
    pub fn std_to_years(&self, std: f64) -> f64 {
        std * self.span
    }
}

/// Parameters of one NIG prior. Construct through [`NigParams::new`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub gamma: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(gamma: f64, nu: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = NigParams {
            gamma,
            nu,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma.is_finite()
            && self.nu.is_finite()
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.nu > 0.0
            && self.alpha > 1.0
            && self.beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(
                "NigParams",
                format!(
                    "need finite γ, ν > 0, α > 1, β > 0; got ({}, {}, {}, {})",
                    self.gamma, self.nu, self.alpha, self.beta
                ),
            ))
        }
    }

    /// Degrees of freedom of the Student-t predictive.
    pub fn predictive_dof(&self) -> f64 {
        2.0 * self.alpha
    }

    /// Scale of the Student-t predictive, `√(β(1+ν)/(να))`.
    pub fn predictive_scale(&self) -> f64 {
        (self.beta * (1.0 + self.nu) / (self.nu * self.alpha)).sqrt()
    }
}

/// Variance split of one prediction, in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// E[σ²] = β/(α−1)
    pub aleatoric_var: f64,
    /// β/(ν(α−1))
    pub total_var: f64,
    /// 1/ν
    pub epistemic_scale: f64,
}

pub fn decompose(p: &NigParams) -> Result<Decomposition> {
    if !(p.alpha > 1.0) {
        return Err(Error::domain(
            "decompose",
            format!("variance undefined for α ≤ 1 (α = {})", p.alpha),
        ));
    }
    if !(p.nu > 0.0 && p.beta > 0.0) {
        return Err(Error::domain("decompose", "ν and β must be positive"));
    }
    let aleatoric_var = p.beta / (p.alpha - 1.0);
    let epistemic_scale = 1.0 / p.nu;
    Ok(Decomposition {
        aleatoric_var,
        total_var: aleatoric_var * epistemic_scale,
        epistemic_scale,
    })
}

/// Full per-prediction uncertainty report in both unit systems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub mean: f64,
    pub aleatoric_var: f64,
    pub total_var: f64,
    pub epistemic_scale: f64,
    pub mean_years: f64,
    pub std_years: f64,
    pub aleatoric_std_years: f64,
    pub confidence: f64,
    pub interval_years: (f64, f64),
}

impl UncertaintySummary {
    pub fn new(p: &NigParams, scale: &YearScale, confidence: f64) -> Result<Self> {
        let d = decompose(p)?;
        let (lo, hi) = predictive_interval(p, confidence)?;
        Ok(UncertaintySummary {
            mean: p.gamma,
            aleatoric_var: d.aleatoric_var,
            total_var: d.total_var,
            epistemic_scale: d.epistemic_scale,
            mean_years: scale.denormalize(p.gamma),
            std_years: scale.std_to_years(d.total_var.sqrt()),
            aleatoric_std_years: scale.std_to_years(d.aleatoric_var.sqrt()),
            confidence,
            interval_years: (scale.denormalize(lo), scale.denormalize(hi)),
        })
    }
}

/// Negative log of the Student-t marginal of `y` under the NIG prior.
pub fn nig_nll(p: &NigParams, y: f64) -> f64 {
    let omega = 2.0 * p.beta * (1.0 + p.nu);
    let r = y - p.gamma;
    0.5 * (PI / p.nu).ln() - p.alpha * omega.ln()
        + (p.alpha + 0.5) * (r * r * p.nu + omega).ln()
        + ln_gamma(p.alpha)
        - ln_gamma(p.alpha + 0.5)
}

/// `λ·|y − γ|·(2ν + α)`
pub fn evidence_regularizer(p: &NigParams, y: f64, lambda: f64) -> f64 {
    lambda * (y - p.gamma).abs() * (2.0 * p.nu + p.alpha)
}

pub fn evidential_loss(p: &NigParams, y: f64, lambda: f64) -> f64 {
    nig_nll(p, y) + evidence_regularizer(p, y, lambda)
}

/// Central interval of the Student-t predictive at `confidence`.
pub fn predictive_interval(p: &NigParams, confidence: f64) -> Result<(f64, f64)> {
    let half = predictive_half_width(p, confidence)?;
    Ok((p.gamma - half, p.gamma + half))
}

pub fn predictive_half_width(p: &NigParams, confidence: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&confidence) {
        return Err(Error::domain(
            "predictive_interval",
            format!("confidence must lie in [0, 1), got {confidence}"),
        ));
    }
    if confidence == 0.0 {
        return Ok(0.0);
    }
    let tq = student_t_quantile(p.predictive_dof(), 0.5 * (1.0 + confidence))?;
    Ok(tq * p.predictive_scale())
}

/// NIG parameters as n×1 columns on a tape.
#[derive(Clone, Copy, Debug)]
pub struct NigNodes {
    pub gamma: NodeId,
    pub nu: NodeId,
    pub alpha: NodeId,
    pub beta: NodeId,
}

/// Per-row NLL (n×1) for targets `y` (n×1).
pub fn nig_nll_node(tape: &mut Tape, p: &NigNodes, y: NodeId) -> Result<NodeId> {
    let two = tape.scalar(2.0);
    let one = tape.scalar(1.0);
    let half = tape.scalar(0.5);
    let ln_pi = tape.scalar(PI.ln());

    let one_plus_nu = tape.add(one, p.nu)?;
    let two_beta = tape.mul(two, p.beta)?;
    let omega = tape.mul(two_beta, one_plus_nu)?;

    let log_nu = tape.log(p.nu)?;
    let t1 = tape.sub(ln_pi, log_nu)?;
    let t1 = tape.mul(half, t1)?;

    let log_omega = tape.log(omega)?;
    let t2 = tape.mul(p.alpha, log_omega)?;

    let r = tape.sub(y, p.gamma)?;
    let r2 = tape.mul(r, r)?;
    let r2nu = tape.mul(r2, p.nu)?;
    let inner = tape.add(r2nu, omega)?;
    let log_inner = tape.log(inner)?;
    let a_half = tape.add(p.alpha, half)?;
    let t3 = tape.mul(a_half, log_inner)?;

    let lg_a = tape.lgamma(p.alpha)?;
    let lg_ah = tape.lgamma(a_half)?;

    let s = tape.sub(t1, t2)?;
    let s = tape.add(s, t3)?;
    let s = tape.add(s, lg_a)?;
    tape.sub(s, lg_ah)
}

/// Per-row evidence regularizer (n×1).
pub fn evidence_regularizer_node(tape: &mut Tape, p: &NigNodes, y: NodeId, lambda: f64) -> Result<NodeId> {
    let r = tape.sub(y, p.gamma)?;
    let abs_r = tape.abs(r);
    let two = tape.scalar(2.0);
    let two_nu = tape.mul(two, p.nu)?;
    let evidence = tape.add(two_nu, p.alpha)?;
    let lam = tape.scalar(lambda);
    let scaled = tape.mul(lam, abs_r)?;
    tape.mul(scaled, evidence)
}

/// Mean evidential loss over the rows, as a scalar node.
pub fn evidential_loss_node(tape: &mut Tape, p: &NigNodes, y: NodeId, lambda: f64) -> Result<NodeId> {
    let rows = tape.shape(y).0;
    let nll = nig_nll_node(tape, p, y)?;
    let total = if lambda == 0.0 {
        nll
    } else {
        let reg = evidence_regularizer_node(tape, p, y, lambda)?;
        tape.add(nll, reg)?
    };
    let s = tape.sum(total);
    let inv = tape.scalar(1.0 / rows.max(1) as f64);
    tape.mul(s, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tensor};
    use crate::rng::rng_from;
    use rand::Rng;

    fn p(gamma: f64, nu: f64, alpha: f64, beta: f64) -> NigParams {
        NigParams::new(gamma, nu, alpha, beta).unwrap()
    }

    /// −log ∫∫ N(y | μ, 1/τ) · N(μ | γ, 1/(ντ)) · Gamma(τ | α, rate β) dμ dτ,
    /// by the trapezoid rule in (μ, log τ). The Gamma normalizer is itself
    /// integrated numerically so no log-gamma enters the oracle.
    pub(crate) fn quadrature_nll(p: &NigParams, y: f64) -> f64 {
        let (g, nu, a, b) = (p.gamma, p.nu, p.alpha, p.beta);
        // In s = ln τ the Gamma kernel (with Jacobian) is exp(a·s − b·eˢ).
        let centre = (a / b).ln();
        let s_lo = centre - 45.0 / a - 3.0;
        let s_hi = ((a + 60.0 + 12.0 * a.sqrt()) / b).ln();
        let ns = 4000;
        let ds = (s_hi - s_lo) / ns as f64;
        let log_kernel = |s: f64| a * s - b * s.exp();
        let peak = log_kernel(centre);
        let mut norm = 0.0;
        let mut total = 0.0;
        for i in 0..=ns {
            let w = if i == 0 || i == ns { 0.5 } else { 1.0 };
            let s = s_lo + i as f64 * ds;
            let tau = s.exp();
            let kernel = (log_kernel(s) - peak).exp();
            norm += w * kernel;
            // μ-integrand is a Gaussian with precision τ(1+ν) around this mean.
            let mean = (y + nu * g) / (1.0 + nu);
            let width = 12.0 / (tau * (1.0 + nu)).sqrt();
            let nm = 400;
            let dm = 2.0 * width / nm as f64;
            let mut inner = 0.0;
            for j in 0..=nm {
                let wm = if j == 0 || j == nm { 0.5 } else { 1.0 };
                let mu = mean - width + j as f64 * dm;
                let lik = (-(y - mu).powi(2) * tau / 2.0).exp() * (tau / (2.0 * PI)).sqrt();
                let prior = (-(mu - g).powi(2) * nu * tau / 2.0).exp() * (nu * tau / (2.0 * PI)).sqrt();
                inner += wm * lik * prior;
            }
            total += w * kernel * inner * dm;
        }
        -(total / norm).ln()
    }

    #[test]
    fn normalize_examples() {
        let s = YearScale::default();
        assert_eq!(s.normalize(800.0), 0.0);
        assert_eq!(s.normalize(1900.0), 1.0);
        assert_eq!(s.normalize(1350.0), 0.5);
        assert_eq!(s.denormalize(0.5), 1350.0);
    }

    #[test]
    fn decompose_examples() {
        let d = decompose(&p(0.0, 2.0, 3.0, 4.0)).unwrap();
        assert_eq!((d.aleatoric_var, d.total_var, d.epistemic_scale), (2.0, 1.0, 0.5));
        let d = decompose(&p(0.0, 1.0, 2.0, 1.0)).unwrap();
        assert_eq!((d.aleatoric_var, d.total_var), (1.0, 1.0));
        let base = decompose(&p(0.0, 1.5, 3.0, 0.7)).unwrap();
        let more = decompose(&p(0.0, 15.0, 3.0, 0.7)).unwrap();
        assert_eq!(base.aleatoric_var, more.aleatoric_var);
        assert!((base.total_var / more.total_var - 10.0).abs() < 1e-12);
    }

    #[test]
    fn decompose_rejects_alpha_at_most_one() {
        let raw = NigParams {
            gamma: 0.0,
            nu: 1.0,
            alpha: 1.0,
            beta: 1.0,
        };
        assert!(decompose(&raw).is_err());
        assert!(NigParams::new(0.0, 1.0, 0.9, 1.0).is_err());
        assert!(NigParams::new(0.0, 0.0, 2.0, 1.0).is_err());
        assert!(NigParams::new(0.0, 1.0, 2.0, -1.0).is_err());
    }

    #[test]
    fn nll_matches_quadrature_examples() {
        for (params, y) in [(p(0.5, 1.0, 2.0, 1.0), 0.5), (p(0.5, 1.0, 1.5, 0.5), 0.9)] {
            let exact = nig_nll(&params, y);
            let oracle = quadrature_nll(&params, y);
            assert!((exact - oracle).abs() < 1e-6, "{params:?} y={y}: {exact} vs {oracle}");
        }
    }

    #[test]
    fn nll_minimized_at_gamma() {
        let params = p(0.3, 2.0, 3.0, 0.4);
        let at = nig_nll(&params, 0.3);
        for dy in [-0.5, -0.01, 1e-4, 0.2] {
            assert!(nig_nll(&params, 0.3 + dy) > at);
        }
    }

    #[test]
    fn regularizer_examples() {
        let params = p(0.5, 1.0, 2.0, 1.0);
        assert!((evidence_regularizer(&params, 0.7, 0.1) - 0.08).abs() < 1e-15);
        assert_eq!(evidence_regularizer(&params, 0.5, 0.1), 0.0);
        let doubled = p(0.5, 2.0, 2.0, 1.0);
        let inc = evidence_regularizer(&doubled, 0.7, 0.1) - evidence_regularizer(&params, 0.7, 0.1);
        assert!((inc - 0.1 * 0.2 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        let params = p(0.5, 1.0, 2.0, 1.0);
        assert_eq!(evidential_loss(&params, 0.3, 0.0), nig_nll(&params, 0.3));
        let expected = quadrature_nll(&params, 0.3) + 0.1 * 0.2 * 4.0;
        assert!((evidential_loss(&params, 0.3, 0.1) - expected).abs() < 1e-6);
    }

    fn loss_from_vector(tape: &mut Tape, x: NodeId, y: f64, lambda: f64) -> Result<NodeId> {
        let nodes = NigNodes {
            gamma: tape.column(x, 0)?,
            nu: tape.column(x, 1)?,
            alpha: tape.column(x, 2)?,
            beta: tape.column(x, 3)?,
        };
        let yn = tape.scalar(y);
        evidential_loss_node(tape, &nodes, yn, lambda)
    }

    #[test]
    fn tape_loss_matches_closed_form() {
        let params = p(0.5, 1.2, 2.0, 0.8);
        let mut t = Tape::new(0);
        let x = t.constant(Tensor::row_vector(vec![0.5, 1.2, 2.0, 0.8]));
        let l = loss_from_vector(&mut t, x, 0.3, 0.1).unwrap();
        let v = t.value(l).item().unwrap();
        assert!((v - evidential_loss(&params, 0.3, 0.1)).abs() < 1e-13);
    }

    #[test]
    fn nll_gradcheck_example_point() {
        let point = Tensor::row_vector(vec![0.5, 1.2, 2.0, 0.8]);
        let err = gradcheck(|t, x| loss_from_vector(t, x, 0.3, 0.0), &point, 1e-6).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn loss_gradcheck_random_points() {
        let mut rng = rng_from(17);
        for _ in 0..10 {
            let point = Tensor::row_vector(vec![
                rng.random_range(-0.5..1.5),
                rng.random_range(0.05..5.0),
                rng.random_range(1.05..6.0),
                rng.random_range(0.01..3.0),
            ]);
            let y = rng.random_range(0.0..1.0);
            let err = gradcheck(|t, x| loss_from_vector(t, x, y, 0.1), &point, 1e-6).unwrap();
            assert!(err < 1e-4, "err {err} at {point:?}");
        }
    }

    #[test]
    fn interval_examples() {
        let params = p(0.4, 2.0, 3.0, 0.5);
        assert_eq!(predictive_interval(&params, 0.0).unwrap(), (0.4, 0.4));
        let (lo, hi) = predictive_interval(&params, 0.9).unwrap();
        assert!(((lo + hi) / 2.0 - 0.4).abs() < 1e-15);
        assert!(predictive_interval(&params, 1.0).is_err());
    }

    #[test]
    fn interval_gaussian_limit() {
        // α → ∞ with β/α fixed: Student-t → normal with the same scale.
        let alpha = 1e6;
        let params = p(0.0, 3.0, alpha, 0.25 * alpha);
        let half = predictive_half_width(&params, 0.9).unwrap();
        let z = 1.644_853_626_951_472_2;
        let expect = z * params.predictive_scale();
        assert!((half / expect - 1.0).abs() < 1e-3);
    }

    #[test]
    fn interval_width_monotone() {
        let base = predictive_half_width(&p(0.0, 2.0, 3.0, 0.5), 0.9).unwrap();
        assert!(predictive_half_width(&p(0.0, 2.0, 3.0, 0.8), 0.9).unwrap() > base);
        assert!(predictive_half_width(&p(0.0, 4.0, 3.0, 0.5), 0.9).unwrap() < base);
    }

    #[test]
    fn summary_identity_and_symmetry() {
        let s = UncertaintySummary::new(&p(0.5, 2.0, 3.0, 4.0), &YearScale::default(), 0.9).unwrap();
        assert_eq!(s.total_var, s.aleatoric_var * s.epistemic_scale);
        assert_eq!(s.mean_years, 1350.0);
        let (lo, hi) = s.interval_years;
        assert!(((lo + hi) / 2.0 - s.mean_years).abs() < 1e-9);
        assert!((s.std_years - 1100.0).abs() < 1e-9);
    }
}
