use super::FederationError;
use crate::skeleton::check_ratio;

/// Linear capability-to-ratio rule: `r_i = clamp(c_i / c_max, r_min, 1)`.
pub fn set_ratios(capabilities: &[f64], r_min: f64) -> Result<Vec<f64>, FederationError> {
    check_ratio(r_min)?;
    if capabilities.is_empty() {
        return Err(FederationError::EmptyCapabilities);
    }
    if let Some((index, &value)) = capabilities
        .iter()
        .enumerate()
        .find(|(_, c)| !(c.is_finite() && **c > 0.0))
    {
        return Err(FederationError::Capability { index, value });
    }
    let c_max = capabilities.iter().copied().fold(f64::MIN, f64::max);
    Ok(capabilities
        .iter()
        .map(|c| (c / c_max).clamp(r_min, 1.0))
        .collect())
}

/// `n` capabilities evenly spaced from `low` to 1, slowest first. A single
/// client gets capability 1.
pub fn equidistant_capabilities(n: usize, low: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..n)
            .map(|i| 1.0 - (1.0 - low) * (n - 1 - i) as f64 / (n - 1) as f64)
            .collect(),
    }
}
