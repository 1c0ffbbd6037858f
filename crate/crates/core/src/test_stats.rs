//! Statistical checks shared by the unit tests.

/// Standardized deviation of the number of one bits from half.
pub fn monobit_z(bytes: &[u8]) -> f64 {
    let n = bytes.len() as f64 * 8.0;
    let ones: u64 = bytes.iter().map(|b| b.count_ones() as u64).sum();
    (ones as f64 - n / 2.0) / (n / 4.0).sqrt()
}

/// Pearson statistic against the uniform distribution, with its degrees of
/// freedom.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    (stat, counts.len() as f64 - 1.0)
}

/// Upper critical value of the chi-square distribution (Wilson–Hilferty).
pub fn chi_square_critical(df: f64, alpha: f64) -> f64 {
    let z = match alpha {
        a if (a - 0.01).abs() < 1e-12 => 2.326_347_874,
        a if (a - 0.05).abs() < 1e-12 => 1.644_853_627,
        a => panic!("no normal quantile tabulated for alpha={a}"),
    };
    let c = 2.0 / (9.0 * df);
    df * (1.0 - c + z * c.sqrt()).powi(3)
}
