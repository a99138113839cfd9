//! Small numeric helpers shared across modules.

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of an iterator of reals.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

/// Element-wise compensated accumulator for dense vectors.
#[derive(Debug, Clone)]
pub struct VectorAccumulator {
    sum: Vec<f64>,
    compensation: Vec<f64>,
}

impl VectorAccumulator {
    pub fn zeros(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            compensation: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    #[inline]
    pub fn add_at(&mut self, index: usize, x: f64) {
        let s = self.sum[index];
        let t = s + x;
        if s.abs() >= x.abs() {
            self.compensation[index] += (s - t) + x;
        } else {
            self.compensation[index] += (x - t) + s;
        }
        self.sum[index] = t;
    }

    pub fn add_scaled(&mut self, values: &[f64], scale: f64) {
        debug_assert_eq!(values.len(), self.sum.len());
        for (i, v) in values.iter().enumerate() {
            if *v != 0.0 {
                self.add_at(i, scale * v);
            }
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.sum
            .into_iter()
            .zip(self.compensation)
            .map(|(s, c)| s + c)
            .collect()
    }
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    // scaled to avoid overflow on large gradients
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 || !max.is_finite() {
        return max;
    }
    let s: f64 = v.iter().map(|x| (x / max) * (x / max)).sum();
    max * s.sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Log-sum-exp of a slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Stable log-sigmoid.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Relative error with an absolute floor, as used by the gradient checks.
pub fn relative_error(actual: f64, expected: f64, floor: f64) -> f64 {
    (actual - expected).abs() / expected.abs().max(floor)
}

/// Formats a real with 9 significant digits in plain decimal notation.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    let rounded: f64 = format!("{:.8e}", x).parse().unwrap_or(x);
    let exponent = rounded.abs().log10().floor() as i32;
    let decimals = (8 - exponent).max(0) as usize;
    format!("{:.*}", decimals, rounded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut values = vec![1e16];
        values.extend(std::iter::repeat_n(1.0, 1000));
        values.push(-1e16);
        assert_eq!(compensated_sum(values.iter().copied()), 1000.0);
    }

    #[test]
    fn vector_accumulator_matches_scalar() {
        let mut acc = VectorAccumulator::zeros(2);
        acc.add_scaled(&[1e16, 1.0], 1.0);
        acc.add_scaled(&[1.0, 2.0], 1.0);
        acc.add_scaled(&[-1e16, 0.0], 1.0);
        assert_eq!(acc.into_vec(), vec![1.0, 3.0]);
    }

    #[test]
    fn norm_of_three_four() {
        assert!((l2_norm(&[3.0, 4.0]) - 5.0).abs() < 1e-15);
        assert_eq!(l2_norm(&[]), 0.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5_f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(800.0)).abs() < 1e-300);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(-0.123456789123), "-0.123456789");
        assert_eq!(format_sig9(123.456), "123.456000");
        assert_eq!(format_sig9(9.9999999999), "10.0000000");
    }
}
