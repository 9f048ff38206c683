use super::TrainError;

fn check(pred: &[f64], target: &[f64], min_len: usize) -> Result<(), TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::Shape(format!(
            "{} predictions against {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < min_len {
        return Err(TrainError::Precondition(format!(
            "metric needs at least {min_len} pairs, got {}",
            pred.len()
        )));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Lin's concordance correlation with population moments; 0 when the
/// denominator vanishes.
pub fn ccc_metric(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    check(pred, target, 2)?;
    let n = pred.len() as f64;
    let (mp, my) = (mean(pred), mean(target));
    let var_p = pred.iter().map(|p| (p - mp) * (p - mp)).sum::<f64>() / n;
    let var_y = target.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
    let cov = pred.iter().zip(target).map(|(p, y)| (p - mp) * (y - my)).sum::<f64>() / n;
    let den = var_p + var_y + (mp - my) * (mp - my);
    Ok(if den == 0.0 { 0.0 } else { 2.0 * cov / den })
}

pub fn mae_metric(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    check(pred, target, 1)?;
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}
