use crate::error::{Error, Result};

/// Population mean and standard deviation.
pub fn mean_popstd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores with the population standard deviation. A group whose spread is
/// below `eps_std` yields all zeros.
pub fn group_normalize(values: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Contract("cannot normalize an empty group".into()));
    }
    let (mean, std) = mean_popstd(values);
    if !(std >= eps_std) {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_two_three() {
        let z = group_normalize(&[1.0, 2.0, 3.0], 1e-6).unwrap();
        let oracle = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z[0] + oracle).abs() < 1e-15);
        assert_eq!(z[1], 0.0);
        assert!((z[2] - oracle).abs() < 1e-15);
        assert!((oracle - 1.224_744_871_391_589).abs() < 1e-12);
    }

    #[test]
    fn constant_group_is_zero() {
        assert_eq!(group_normalize(&[5.0; 3], 1e-6).unwrap(), vec![0.0; 3]);
        assert_eq!(group_normalize(&[2.0], 1e-6).unwrap(), vec![0.0]);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(group_normalize(&[], 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn normalized_moments(values in prop::collection::vec(-1e3f64..1e3, 2..16)) {
            let z = group_normalize(&values, 1e-6).unwrap();
            let (_, std) = mean_popstd(&values);
            if std >= 1e-6 {
                let (m, s) = mean_popstd(&z);
                prop_assert!(m.abs() < 1e-12);
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(z.iter().all(|&v| v == 0.0));
            }
        }

        #[test]
        fn positive_scaling_invariant(values in prop::collection::vec(-10f64..10.0, 2..16), c in 1e-3f64..1e3) {
            let a = group_normalize(&values, 1e-6).unwrap();
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            let b = group_normalize(&scaled, 1e-6 * c).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10 * x.abs().max(1.0));
            }
        }
    }
}
