use crate::numkit::{DiffTensor, Tape, Tensor};

use super::FusionError;

/// `1 - CCC(pred, target)` with population moments, differentiable through
/// `predictions` (`[B, 1]`). A zero denominator (both sides constant and
/// equal) yields the constant 1.
pub fn ccc_loss(tape: &mut Tape, predictions: DiffTensor, targets: &[f64]) -> Result<DiffTensor, FusionError> {
    let (n, cols) = tape.value(predictions)?.dims()?;
    if cols != 1 || n != targets.len() {
        return Err(FusionError::Shape(format!(
            "{n}x{cols} predictions against {} targets",
            targets.len()
        )));
    }
    if n < 2 {
        return Err(FusionError::Precondition(format!("CCC needs at least 2 samples, got {n}")));
    }
    let y = tape.constant(Tensor::matrix(n, 1, targets.to_vec())?)?;
    let mp = tape.mean_all(predictions)?;
    let my = tape.mean_all(y)?;
    let dp = tape.sub(predictions, mp)?;
    let dy = tape.sub(y, my)?;
    let sq_p = tape.mul(dp, dp)?;
    let var_p = tape.mean_all(sq_p)?;
    let sq_y = tape.mul(dy, dy)?;
    let var_y = tape.mean_all(sq_y)?;
    let cross = tape.mul(dp, dy)?;
    let cov = tape.mean_all(cross)?;
    let gap = tape.sub(mp, my)?;
    let gap_sq = tape.mul(gap, gap)?;
    let den = tape.add(var_p, var_y)?;
    let den = tape.add(den, gap_sq)?;
    if tape.item(den)? == 0.0 {
        return Ok(tape.scalar(1.0)?);
    }
    let ratio = tape.div(cov, den)?;
    let ccc = tape.scale(ratio, 2.0)?;
    let one = tape.scalar(1.0)?;
    Ok(tape.sub(one, ccc)?)
}
