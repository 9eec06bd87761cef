use super::{DspError, Waveform};

fn mu(bits: u32) -> Result<f64, DspError> {
    if !(1..=24).contains(&bits) {
        return Err(DspError::InvalidConfig(format!("bits must be in 1..=24, got {bits}")));
    }
    Ok(((1u64 << bits) - 1) as f64)
}

/// Companded value in `[-1, 1]`.
pub(crate) fn compand(x: f64, mu: f64) -> f64 {
    x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p()
}

pub(crate) fn expand(c: f64, mu: f64) -> f64 {
    c.signum() * ((1.0 + mu).powf(c.abs()) - 1.0) / mu
}

/// μ-law levels in `0..2^bits` with `μ = 2^bits − 1`; rounding is half-up.
pub fn mu_law(w: &Waveform, bits: u32) -> Result<Vec<u32>, DspError> {
    let mu = mu(bits)?;
    w.samples()
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if !(-1.0..=1.0).contains(&value) {
                return Err(DspError::SampleOutOfRange { index, value });
            }
            Ok(((compand(value, mu) + 1.0) / 2.0 * mu + 0.5).floor() as u32)
        })
        .collect()
}

/// Map each level back to the sample at its companded centre.
pub fn mu_law_inverse(levels: &[u32], bits: u32, sample_rate: u32) -> Result<Waveform, DspError> {
    let mu = mu(bits)?;
    let samples = levels
        .iter()
        .enumerate()
        .map(|(index, &level)| {
            if level as f64 > mu {
                return Err(DspError::LevelOutOfRange { index, level });
            }
            Ok(expand(2.0 * level as f64 / mu - 1.0, mu))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Waveform::new(samples, sample_rate)
}
