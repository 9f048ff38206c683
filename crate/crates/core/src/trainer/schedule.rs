use super::{TrainConfig, TrainError};

/// `x` as `mantissa * 10^exponent` using its shortest round-trip decimal
/// form, e.g. `6e-4 -> (6, -4)`.
fn decimal(x: f64) -> Option<(i128, i32)> {
    let s = format!("{x:e}");
    let (mant, exp) = s.split_once('e')?;
    let mut exp: i32 = exp.parse().ok()?;
    let digits = match mant.split_once('.') {
        Some((int, frac)) => {
            exp -= frac.len() as i32;
            format!("{int}{frac}")
        }
        None => mant.to_owned(),
    };
    Some((digits.parse().ok()?, exp))
}

/// `base * factor^n * extra`, evaluated exactly in decimal and rounded to
/// f64 once. Falls back to float arithmetic if the mantissa overflows.
fn decimal_product(base: f64, factor: f64, n: u32, extra: f64) -> f64 {
    let exact = (|| {
        let (mut m, mut e) = decimal(base)?;
        let (fm, fe) = decimal(factor)?;
        for _ in 0..n {
            m = m.checked_mul(fm)?;
            e += fe;
        }
        let (xm, xe) = decimal(extra)?;
        m = m.checked_mul(xm)?;
        e += xe;
        format!("{m}e{e}").parse::<f64>().ok()
    })();
    exact.unwrap_or_else(|| base * factor.powi(n as i32) * extra)
}

/// `(lr_main, lr_text_encoder)` for `epoch`: the base rate decayed once per
/// `decay_every` epochs, with the text encoder at `multiplier` times that.
/// Both are the decimal products rounded once, so 6e-4 decayed by 0.1 is
/// exactly the double nearest 6e-5.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> Result<(f64, f64), TrainError> {
    if epoch >= config.epochs {
        return Err(TrainError::Precondition(format!(
            "epoch {epoch} is outside 0..{}",
            config.epochs
        )));
    }
    let n = (epoch / config.decay_every) as u32;
    let main = decimal_product(config.base_lr, config.lr_decay, n, 1.0);
    let text = decimal_product(config.base_lr, config.lr_decay, n, config.text_encoder_lr_multiplier);
    Ok((main, text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_parts() {
        assert_eq!(decimal(6e-4), Some((6, -4)));
        assert_eq!(decimal(0.1), Some((1, -1)));
        assert_eq!(decimal(1.5), Some((15, -1)));
        assert_eq!(decimal(250.0), Some((25, 1)));
    }

    #[test]
    fn product_matches_float_when_exact() {
        assert_eq!(decimal_product(0.5, 0.5, 3, 1.0), 0.0625);
        assert_eq!(decimal_product(3.0, 2.0, 4, 0.5), 24.0);
    }
}
