use super::DiagnosticsError;

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, DiagnosticsError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(DiagnosticsError::Length(xs.len(), ys.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // Spread below round-off of the mean counts as constant.
    let floor = |m: f64| (f64::EPSILON * m.abs() * 16.0).powi(2) * n;
    if sxx <= floor(mx) {
        return Err(DiagnosticsError::DegenerateVariance("xs"));
    }
    if syy <= floor(my) {
        return Err(DiagnosticsError::DegenerateVariance("ys"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
