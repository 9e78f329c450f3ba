use crate::error::{Error, Result};

/// Polynomial decay: `base_lr · (1 − iter/max_iter)^pow`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, pow: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::HyperParam {
            name: "max_iter",
            reason: "must be positive".into(),
        });
    }
    if iter > max_iter {
        return Err(Error::IterationOutOfRange { iter, max_iter });
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(pow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints() {
        assert_eq!(poly_lr(2.5e-4, 0, 35_000, 0.9).unwrap(), 2.5e-4);
        assert_eq!(poly_lr(2.5e-4, 35_000, 35_000, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn midpoint_against_series_reference() {
        // 0.5^0.9 = exp(-0.9 ln 2), with the exponential summed as a series.
        let x = -0.9 * std::f64::consts::LN_2;
        let mut term = 1.0;
        let mut reference = 1.0;
        for k in 1..40 {
            term *= x / k as f64;
            reference += term;
        }
        assert!((reference - 0.535_886_731_27).abs() < 1e-10);
        let lr = poly_lr(2.5e-4, 17_500, 35_000, 0.9).unwrap();
        assert!((lr - 2.5e-4 * reference).abs() < 1e-14);
    }

    #[test]
    fn past_the_end_is_an_error() {
        assert!(matches!(
            poly_lr(1.0, 11, 10, 0.9),
            Err(Error::IterationOutOfRange {
                iter: 11,
                max_iter: 10
            })
        ));
    }

    proptest! {
        #[test]
        fn non_increasing(max_iter in 1usize..5000, a in 0usize..5000, b in 0usize..5000, pow in 0.01f64..4.0) {
            let (lo, hi) = (a.min(b).min(max_iter), a.max(b).min(max_iter));
            prop_assert!(poly_lr(1.0, hi, max_iter, pow).unwrap() <= poly_lr(1.0, lo, max_iter, pow).unwrap());
        }
    }
}
