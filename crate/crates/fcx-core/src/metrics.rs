//! Physical-unit RMSE between standardized predictions and ground truth.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::field::NormStats;
use crate::real::Real;

/// Per-channel RMSE of a `(B, C, H, W)` pair. Both arrays are un-standardized
/// with `stats` (`z·std + mean`) before differencing, so the result is in
/// physical units. Accumulation runs in `f64` regardless of `F`.
pub fn rmse<F: Real>(
    pred: &[F],
    truth: &[F],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    stats: &NormStats,
) -> Result<Vec<f64>, CoreError> {
    let n = batch * channels * h * w;
    if pred.len() != n || truth.len() != n {
        return Err(CoreError::ShapeMismatch("rmse arrays do not match (B,C,H,W)".to_string()));
    }
    if batch == 0 {
        return Err(CoreError::InvalidConfig("rmse needs at least one sample".to_string()));
    }
    stats.validate(channels)?;
    let plane = h * w;
    let mut acc = vec![0.0f64; channels];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * plane;
            let (m, s) = (stats.mean[c], stats.std[c]);
            for k in base..base + plane {
                let p = pred[k].as_f64() * s + m;
                let t = truth[k].as_f64() * s + m;
                let d = p - t;
                acc[c] += d * d;
            }
        }
    }
    let denom = (batch * plane) as f64;
    Ok(acc.into_iter().map(|a| libm::sqrt(a / denom)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn stats(c: usize) -> NormStats {
        NormStats {
            mean: (0..c).map(|i| i as f64 - 0.5).collect(),
            std: (0..c).map(|i| 1.0 + i as f64).collect(),
        }
    }

    #[test]
    fn equal_arrays_score_zero() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|k| (k as f64).cos()).collect();
        let r = rmse(&x, &x, 2, 3, 4, 4, &stats(3)).unwrap();
        assert_eq!(r, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_offset_scales_by_std() {
        let (b, c, h, w) = (2usize, 3usize, 4usize, 5usize);
        let st = stats(c);
        let mut rng = RngStream::new(1, 5);
        let truth: Vec<f64> = (0..b * c * h * w).map(|_| rng.normal()).collect();
        let mut pred = truth.clone();
        // Add a standardized offset to channel 1 only.
        let delta = 0.3;
        for bb in 0..b {
            let base = (bb * c + 1) * h * w;
            for k in base..base + h * w {
                pred[k] += delta;
            }
        }
        let r = rmse(&pred, &truth, b, c, h, w, &st).unwrap();
        assert!(r[0].abs() < 1e-12);
        assert!((r[1] - delta * st.std[1]).abs() < 1e-12, "got {}", r[1]);
        assert!(r[2].abs() < 1e-12);
    }

    #[test]
    fn hand_arithmetic_case() {
        // 1x2 grid, std 2, mean 0: errors of 1 in standardized units are 2
        // physical units each, so the RMSE is exactly 2.
        let st = NormStats { mean: vec![0.0], std: vec![2.0] };
        let r = rmse(&[0.0f64, 0.0], &[1.0, 1.0], 1, 1, 1, 2, &st).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_shape_and_channel_mismatch() {
        let x = [0.0f64; 8];
        assert!(rmse(&x, &x[..4], 1, 2, 2, 2, &stats(2)).is_err());
        assert!(rmse(&x, &x, 1, 2, 2, 2, &stats(3)).is_err());
        assert!(rmse(&x[..0], &x[..0], 0, 2, 2, 2, &stats(2)).is_err());
    }

    proptest! {
        #[test]
        fn invariant_under_joint_spatial_permutation(seed in 0u64..200) {
            let (b, c, h, w) = (1usize, 2usize, 3usize, 4usize);
            let mut rng = RngStream::new(seed, 5);
            let truth: Vec<f64> = (0..b * c * h * w).map(|_| rng.normal()).collect();
            let pred: Vec<f64> = truth.iter().map(|x| x + 0.1 * rng.normal()).collect();
            // Reverse every channel plane in both arrays.
            let permute = |v: &[f64]| -> Vec<f64> {
                let mut out = v.to_vec();
                for cc in 0..c {
                    out[cc * h * w..(cc + 1) * h * w].reverse();
                }
                out
            };
            let base = rmse(&pred, &truth, b, c, h, w, &stats(c)).unwrap();
            let perm = rmse(&permute(&pred), &permute(&truth), b, c, h, w, &stats(c)).unwrap();
            for i in 0..c {
                prop_assert!((base[i] - perm[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn doubling_std_doubles_rmse(seed in 0u64..200) {
            let (b, c, h, w) = (2usize, 2usize, 3usize, 3usize);
            let mut rng = RngStream::new(seed, 6);
            let truth: Vec<f64> = (0..b * c * h * w).map(|_| rng.normal()).collect();
            let pred: Vec<f64> = truth.iter().map(|x| x + rng.normal()).collect();
            let st = stats(c);
            let st2 = NormStats {
                mean: st.mean.clone(),
                std: st.std.iter().map(|s| 2.0 * s).collect(),
            };
            let a = rmse(&pred, &truth, b, c, h, w, &st).unwrap();
            let d = rmse(&pred, &truth, b, c, h, w, &st2).unwrap();
            for i in 0..c {
                prop_assert!((d[i] - 2.0 * a[i]).abs() <= 1e-12 * a[i].max(1.0));
            }
        }
    }
}
