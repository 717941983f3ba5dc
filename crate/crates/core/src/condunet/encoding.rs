//! Sinusoidal positional encodings for the conditioning cue.
//!
//! The bump position labels are continuous, so the network receives them
//! through fixed sinusoidal encodings rather than a trainable embedding
//! table: nearby positions get nearby codes.

use candle_core::{DType, Device, Tensor};

use crate::bumpdata::BumpLabel;
use crate::error::{Error, Result};

/// A conditioning vector: `[encode(t) | encode(mu_x) | encode(mu_y)]`,
/// three equal-length sinusoidal encodings concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector {
    values: Vec<f64>,
}

impl ConditioningVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Encode a scalar into `k` dims: pair `i` holds `sin(v / w_i), cos(v / w_i)`
/// with `w_i = 10000^(2i/k)`.
pub fn encode_position(value: f64, k: usize) -> Result<Vec<f64>> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::InvalidConfig(format!("encoding dim must be even and >= 2, got {k}")));
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..k / 2 {
        let omega = 10000f64.powf(2.0 * i as f64 / k as f64);
        out.push((value / omega).sin());
        out.push((value / omega).cos());
    }
    Ok(out)
}

/// Build the full conditioning vector for one (timestep, label) pair.
pub fn build_condition(t: usize, label: &BumpLabel, k: usize) -> Result<ConditioningVector> {
    let mut values = encode_position(t as f64, k)?;
    values.extend(encode_position(label.mu_x, k)?);
    values.extend(encode_position(label.mu_y, k)?);
    Ok(ConditioningVector { values })
}

/// Batch of conditioning vectors as a `(B, 3k)` tensor.
pub fn condition_batch(
    ts: &[usize],
    labels: &[BumpLabel],
    k: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if ts.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "timesteps ({}) and labels ({}) must be batch-aligned",
            ts.len(),
            labels.len()
        )));
    }
    let mut flat = Vec::with_capacity(ts.len() * 3 * k);
    for (&t, label) in ts.iter().zip(labels) {
        flat.extend(build_condition(t, label, k)?.values);
    }
    let tensor = Tensor::from_vec(flat, (ts.len(), 3 * k), device)?.to_dtype(dtype)?;
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_value_encodes_to_unit_pairs() {
        for k in [2, 8, 32] {
            let enc = encode_position(0.0, k).unwrap();
            for pair in enc.chunks(2) {
                assert_eq!(pair[0], 0.0);
                assert_eq!(pair[1], 1.0);
            }
        }
    }

    #[test]
    fn first_pair_is_periodic_in_two_pi() {
        let k = 8;
        let v = 3.7;
        let a = encode_position(v, k).unwrap();
        let b = encode_position(v + 2.0 * std::f64::consts::PI, k).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9);
        assert!((a[1] - b[1]).abs() < 1e-9);
    }

    #[test]
    fn encoding_is_continuous() {
        let k = 16;
        let v = 12.34;
        let base = encode_position(v, k).unwrap();
        let mut prev = f64::INFINITY;
        for delta in [1e-1, 1e-3, 1e-5] {
            let shifted = encode_position(v + delta, k).unwrap();
            let dist: f64 = base
                .iter()
                .zip(&shifted)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist < prev);
            prev = dist;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn odd_k_is_rejected() {
        assert!(encode_position(1.0, 3).is_err());
        assert!(encode_position(1.0, 0).is_err());
    }

    #[test]
    fn condition_concatenates_three_encodings() {
        let k = 8;
        let label = BumpLabel::symmetric(0.0, 0.0, 1.0);
        let c = build_condition(0, &label, k).unwrap();
        assert_eq!(c.len(), 3 * k);
        for third in c.values().chunks(k) {
            for pair in third.chunks(2) {
                assert_eq!(pair[0], 0.0);
            }
        }
    }

    #[test]
    fn distinct_labels_give_distinct_conditions() {
        let k = 16;
        let t = 5;
        let a = build_condition(t, &BumpLabel::symmetric(4.0, 9.0, 1.0), k).unwrap();
        let b = build_condition(t, &BumpLabel::symmetric(4.5, 9.0, 1.0), k).unwrap();
        assert_eq!(a.values()[..k], b.values()[..k]);
        assert_ne!(a.values()[k..], b.values()[k..]);
    }

    #[test]
    fn grid_labels_encode_injectively() {
        // Every label on the default unit grid gets a distinct code.
        let k = 16;
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for y in 1..=32 {
            for x in 1..=32 {
                let c = build_condition(0, &BumpLabel::symmetric(x as f64, y as f64, 1.0), k).unwrap();
                let bits: Vec<u64> = c.values().iter().map(|v| v.to_bits()).collect();
                assert!(!seen.contains(&bits), "collision at ({x},{y})");
                seen.push(bits);
            }
        }
    }
}
