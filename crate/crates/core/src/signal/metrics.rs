use super::{dot, energy, TimeSignal};
use crate::error::{Error, Result};

/// Metrics are clamped to `[-METRIC_CAP_DB, METRIC_CAP_DB]`; the bounds stand
/// in for an exact match (+inf) and an orthogonal or silent estimate (-inf).
pub const METRIC_CAP_DB: f64 = 300.0;

fn ratio_db(signal_energy: f64, error_energy: f64) -> f64 {
    let db = 10.0 * (signal_energy / error_energy).log10();
    if db.is_nan() {
        -METRIC_CAP_DB
    } else {
        db.clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
    }
}

fn check_pair(estimate: &TimeSignal, reference: &TimeSignal, what: &'static str) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    if reference.energy() == 0.0 {
        return Err(Error::Undefined(what));
    }
    Ok(())
}

/// Scale-invariant SNR in dB: the reference is first rescaled by the
/// least-squares gain `<e, r> / ||r||^2`.
pub fn si_snr(estimate: &TimeSignal, reference: &TimeSignal) -> Result<f64> {
    check_pair(estimate, reference, "SI-SNR")?;
    let e = estimate.samples();
    let r = reference.samples();
    let alpha = dot(e, r) / energy(r);
    let target_energy = alpha * alpha * energy(r);
    let error_energy: f64 = e.iter().zip(r).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    Ok(ratio_db(target_energy, error_energy))
}

/// Plain SNR `10 log10(||r||^2 / ||r - e||^2)` in dB.
pub fn snr(estimate: &TimeSignal, reference: &TimeSignal) -> Result<f64> {
    check_pair(estimate, reference, "SNR")?;
    let error_energy: f64 = estimate
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| (r - e).powi(2))
        .sum();
    Ok(ratio_db(reference.energy(), error_energy))
}
