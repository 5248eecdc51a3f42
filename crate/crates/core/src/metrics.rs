//! Reconstruction quality: relative error, PSNR and a global SSIM.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::prior::SpaceTimeField;
use crate::Real;

/// Anything exposing an `I × J` value matrix.
pub trait FieldValues<T: Real> {
    fn field(&self) -> &DMatrix<T>;
}

impl<T: Real> FieldValues<T> for DMatrix<T> {
    fn field(&self) -> &DMatrix<T> {
        self
    }
}

impl<T: Real> FieldValues<T> for SpaceTimeField<T> {
    fn field(&self) -> &DMatrix<T> {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormVariant {
    #[default]
    Frobenius,
    /// `max_i Σ_j |u_ij|`: largest absolute sum over time at any site.
    Infty1,
}

pub fn norm<T: Real>(u: &DMatrix<T>, variant: NormVariant) -> f64 {
    match variant {
        NormVariant::Frobenius => u.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt(),
        NormVariant::Infty1 => u
            .row_iter()
            .map(|r| r.iter().map(|v| v.as_f64().abs()).sum::<f64>())
            .fold(0.0, f64::max),
    }
}

fn same_shape<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<()> {
    check_dim("estimate rows", b.nrows(), a.nrows())?;
    check_dim("estimate cols", b.ncols(), a.ncols())
}

/// `‖u* - u†‖ / ‖u†‖`.
pub fn rle<T: Real>(estimate: &impl FieldValues<T>, truth: &impl FieldValues<T>, variant: NormVariant) -> Result<f64> {
    let (e, t) = (estimate.field(), truth.field());
    same_shape(e, t)?;
    let denom = norm(t, variant);
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("truth has zero norm".into()));
    }
    Ok(norm(&(e - t), variant) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    /// Decibels; `f64::MAX` when `infinite`.
    pub db: f64,
    /// Set when estimate and truth coincide.
    pub infinite: bool,
}

/// `10 log₁₀(‖u†‖_∞² / ‖u* - u†‖₂²)`.
pub fn psnr<T: Real>(estimate: &impl FieldValues<T>, truth: &impl FieldValues<T>) -> Result<Psnr> {
    let (e, t) = (estimate.field(), truth.field());
    same_shape(e, t)?;
    let err2: f64 = e.iter().zip(t.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    if err2 == 0.0 {
        return Ok(Psnr { db: f64::MAX, infinite: true });
    }
    let peak = t.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::UndefinedMetric("truth is identically zero".into()));
    }
    Ok(Psnr { db: 10.0 * (peak * peak / err2).log10(), infinite: false })
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Structural similarity over a single window covering all entries.
///
/// `dynamic_range` defaults to `max(u†) - min(u†)`, or to `max|u†|` (then 1)
/// when the truth is constant. Variances use the `n - 1` normalization.
pub fn ssim<T: Real>(estimate: &impl FieldValues<T>, truth: &impl FieldValues<T>, dynamic_range: Option<f64>) -> Result<f64> {
    let (e, t) = (estimate.field(), truth.field());
    same_shape(e, t)?;
    let range = match dynamic_range {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => return Err(Error::InvalidArgument(format!("dynamic range must be positive, got {r}"))),
        None => default_range(t),
    };
    let n = e.len() as f64;
    let mean = |m: &DMatrix<T>| m.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mx, my) = (mean(e), mean(t));
    let dof = (n - 1.0).max(1.0);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in e.iter().zip(t.iter()) {
        let (da, db) = (a.as_f64() - mx, b.as_f64() - my);
        vx += da * da;
        vy += db * db;
        cxy += da * db;
    }
    let (vx, vy, cxy) = (vx / dof, vy / dof, cxy / dof);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    Ok((2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
}

fn default_range<T: Real>(t: &DMatrix<T>) -> f64 {
    let (lo, hi) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v.as_f64()), hi.max(v.as_f64()))
    });
    if hi > lo {
        hi - lo
    } else if hi.abs() > 0.0 {
        hi.abs()
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub rle: f64,
    pub psnr: Psnr,
    pub ssim: f64,
    pub log_likelihood: f64,
    pub norm_variant: NormVariant,
}

impl MetricReport {
    pub fn evaluate<T: Real>(
        estimate: &impl FieldValues<T>,
        truth: &impl FieldValues<T>,
        variant: NormVariant,
        log_likelihood: f64,
    ) -> Result<Self> {
        Ok(Self {
            rle: rle(estimate, truth, variant)?,
            psnr: psnr(estimate, truth)?,
            ssim: ssim(estimate, truth, None)?,
            log_likelihood,
            norm_variant: variant,
        })
    }
}
