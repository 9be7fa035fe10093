//! Hand-designed time-series augmentations for the SimCLR baseline.
//!
//! All operators take a `[N, W, C]` batch and an explicit random stream, so
//! results are a pure function of `(input, parameters, stream state)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_JITTER_SIGMA: f64 = 0.05;
pub const DEFAULT_SCALE_SIGMA: f64 = 0.1;
pub const DEFAULT_NUM_SEGMENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationKind {
    Original,
    Jitter,
    Scale,
    Permute,
}

impl AugmentationKind {
    pub fn code(self) -> char {
        match self {
            AugmentationKind::Original => 'O',
            AugmentationKind::Jitter => 'J',
            AugmentationKind::Scale => 'S',
            AugmentationKind::Permute => 'P',
        }
    }

    pub fn from_code(code: char) -> Result<Self> {
        match code.to_ascii_uppercase() {
            'O' => Ok(AugmentationKind::Original),
            'J' => Ok(AugmentationKind::Jitter),
            'S' => Ok(AugmentationKind::Scale),
            'P' => Ok(AugmentationKind::Permute),
            other => Err(Error::invalid(format!(
                "unknown augmentation code {other:?} (expected O, J, S or P)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationOp {
    pub kind: AugmentationKind,
    /// Noise std for jitter, factor std for scale.
    pub sigma: f64,
    pub num_segments: usize,
}

impl AugmentationOp {
    /// The operator with default parameters.
    pub fn new(kind: AugmentationKind) -> Self {
        let sigma = match kind {
            AugmentationKind::Jitter => DEFAULT_JITTER_SIGMA,
            AugmentationKind::Scale => DEFAULT_SCALE_SIGMA,
            _ => 0.0,
        };
        Self {
            kind,
            sigma,
            num_segments: DEFAULT_NUM_SEGMENTS,
        }
    }

    pub fn original() -> Self {
        Self::new(AugmentationKind::Original)
    }

    pub fn jitter(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::new(AugmentationKind::Jitter)
        }
    }

    pub fn scale(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::new(AugmentationKind::Scale)
        }
    }

    pub fn permute(num_segments: usize) -> Self {
        Self {
            num_segments,
            ..Self::new(AugmentationKind::Permute)
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, batch: &Array3<f64>, rng: &mut R) -> Result<Array3<f64>> {
        match self.kind {
            AugmentationKind::Original => Ok(batch.clone()),
            AugmentationKind::Jitter => jitter(batch, self.sigma, rng),
            AugmentationKind::Scale => scale(batch, self.sigma, rng),
            AugmentationKind::Permute => permute(batch, self.num_segments, rng),
        }
    }
}

/// Two operators named by a two-letter code such as `"SP"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPair {
    pub first: AugmentationOp,
    pub second: AugmentationOp,
}

impl AugmentationPair {
    pub fn new(first: AugmentationOp, second: AugmentationOp) -> Self {
        Self { first, second }
    }
}

impl FromStr for AugmentationPair {
    type Err = Error;

    fn from_str(code: &str) -> Result<Self> {
        let chars: Vec<char> = code.trim().chars().filter(|c| *c != ',').collect();
        let [a, b] = chars[..] else {
            return Err(Error::invalid(format!(
                "augmentation pair must be two letters like \"SP\", got {code:?}"
            )));
        };
        Ok(Self::new(
            AugmentationOp::new(AugmentationKind::from_code(a)?),
            AugmentationOp::new(AugmentationKind::from_code(b)?),
        ))
    }
}

impl fmt::Display for AugmentationPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.first.kind.code(), self.second.kind.code())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")))
    }
}

/// Adds i.i.d. `Normal(0, sigma^2)` noise to every element.
pub fn jitter<R: Rng + ?Sized>(batch: &Array3<f64>, sigma: f64, rng: &mut R) -> Result<Array3<f64>> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let noise = Normal::new(0.0, sigma).expect("checked sigma");
    Ok(batch.mapv(|v| v + noise.sample(rng)))
}

/// Multiplies each (sample, channel) series by one factor drawn from
/// `Normal(1, sigma^2)`.
pub fn scale<R: Rng + ?Sized>(batch: &Array3<f64>, sigma: f64, rng: &mut R) -> Result<Array3<f64>> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let dist = Normal::new(1.0, sigma).expect("checked sigma");
    let (n, _, c) = batch.dim();
    let mut out = batch.clone();
    for i in 0..n {
        for ch in 0..c {
            let factor = dist.sample(rng);
            out.slice_mut(s![i, .., ch]).mapv_inplace(|v| v * factor);
        }
    }
    Ok(out)
}

/// Lengths of `num_segments` contiguous near-equal segments covering `len`
/// steps; the remainder goes to the leading segments.
pub fn segment_lengths(len: usize, num_segments: usize) -> Result<Vec<usize>> {
    if num_segments == 0 || num_segments > len {
        return Err(Error::invalid(format!(
            "num_segments must lie in 1..={len}, got {num_segments}"
        )));
    }
    let base = len / num_segments;
    let extra = len % num_segments;
    Ok((0..num_segments)
        .map(|i| base + usize::from(i < extra))
        .collect())
}

/// Rearranges the segments of every sample: output segment `j` is input
/// segment `orders[i][j]` of sample `i`, across all channels.
pub fn reorder_segments(
    batch: &Array3<f64>,
    num_segments: usize,
    orders: &[Vec<usize>],
) -> Result<Array3<f64>> {
    let (n, w, _) = batch.dim();
    let lengths = segment_lengths(w, num_segments)?;
    if orders.len() != n {
        return Err(Error::invalid(format!("{} orders for {n} samples", orders.len())));
    }
    let starts: Vec<usize> = lengths
        .iter()
        .scan(0, |acc, &l| {
            let s = *acc;
            *acc += l;
            Some(s)
        })
        .collect();
    let mut out = batch.clone();
    for (i, order) in orders.iter().enumerate() {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..num_segments).collect::<Vec<_>>() {
            return Err(Error::invalid(format!(
                "order {order:?} is not a permutation of 0..{num_segments}"
            )));
        }
        let src = batch.index_axis(Axis(0), i);
        let mut dst = out.index_axis_mut(Axis(0), i);
        let mut t = 0;
        for &seg in order {
            let (start, len) = (starts[seg], lengths[seg]);
            dst.slice_mut(s![t..t + len, ..])
                .assign(&src.slice(s![start..start + len, ..]));
            t += len;
        }
    }
    Ok(out)
}

/// Cuts each sample's time axis into `num_segments` pieces and shuffles
/// them, with one permutation shared by all channels of a sample.
pub fn permute<R: Rng + ?Sized>(
    batch: &Array3<f64>,
    num_segments: usize,
    rng: &mut R,
) -> Result<Array3<f64>> {
    let (n, w, _) = batch.dim();
    segment_lengths(w, num_segments)?;
    let orders: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut order: Vec<usize> = (0..num_segments).collect();
            order.shuffle(rng);
            order
        })
        .collect();
    reorder_segments(batch, num_segments, &orders)
}

/// Two independently augmented views of the same batch.
pub fn make_views<R: Rng + ?Sized>(
    batch: &Array3<f64>,
    op_a: &AugmentationOp,
    op_b: &AugmentationOp,
    rng: &mut R,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let a = op_a.apply(batch, rng)?;
    let b = op_b.apply(batch, rng)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_batch(n: usize, w: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_fn((n, w, c), |(i, t, ch)| (i * 1000 + t * 10 + ch) as f64 + 1.0)
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = ramp_batch(2, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(jitter(&x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(scale(&x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn negative_sigma_rejected() {
        let x = ramp_batch(1, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(jitter(&x, -0.1, &mut rng).is_err());
        assert!(scale(&x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn jitter_noise_statistics() {
        // 10 * 100 * 100 = 1e5 draws
        let x = Array3::<f64>::zeros((10, 100, 100));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = jitter(&x, 0.1, &mut rng).unwrap();
        let n = out.len() as f64;
        let mean = out.sum() / n;
        let std = (out.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((std - 0.1).abs() < 0.01, "std {std}");
    }

    #[test]
    fn scale_uses_one_factor_per_channel() {
        let x = ramp_batch(3, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = scale(&x, 0.5, &mut rng).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let f0 = out[[i, 0, c]] / x[[i, 0, c]];
                for t in 1..16 {
                    assert!((out[[i, t, c]] / x[[i, t, c]] - f0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scale_factor_mean_near_one() {
        // 100 samples x 100 channels = 1e4 factors
        let x = Array3::<f64>::ones((100, 2, 100));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = scale(&x, 0.1, &mut rng).unwrap();
        let mean = out.slice(s![.., 0, ..]).mean().unwrap();
        assert!((mean - 1.0).abs() < 0.01, "mean factor {mean}");
    }

    #[test]
    fn single_segment_permute_is_identity() {
        let x = ramp_batch(2, 9, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(permute(&x, 1, &mut rng).unwrap(), x);
    }

    #[test]
    fn forced_quarter_permutation_on_ramp() {
        let x = Array3::from_shape_fn((1, 8, 1), |(_, t, _)| t as f64);
        let out = reorder_segments(&x, 4, &[vec![2, 0, 3, 1]]).unwrap();
        let got: Vec<f64> = out.iter().copied().collect();
        assert_eq!(got, vec![4.0, 5.0, 0.0, 1.0, 6.0, 7.0, 2.0, 3.0]);
    }

    #[test]
    fn remainder_goes_to_leading_segments() {
        assert_eq!(segment_lengths(10, 4).unwrap(), vec![3, 3, 2, 2]);
        assert!(segment_lengths(8, 9).is_err());
        assert!(segment_lengths(8, 0).is_err());
    }

    #[test]
    fn too_many_segments_is_an_error() {
        let x = ramp_batch(1, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(permute(&x, 5, &mut rng).is_err());
    }

    #[test]
    fn view_pairs() {
        let x = ramp_batch(2, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = make_views(&x, &AugmentationOp::original(), &AugmentationOp::original(), &mut rng)
            .unwrap();
        assert_eq!((&a, &b), (&x, &x));
        let (a, b) =
            make_views(&x, &AugmentationOp::original(), &AugmentationOp::jitter(0.0), &mut rng).unwrap();
        assert_eq!((&a, &b), (&x, &x));

        let pair: AugmentationPair = "SP".parse().unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_views(&x, &pair.first, &pair.second, &mut rng).unwrap()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn pair_codes() {
        for code in ["OJ", "OP", "OS", "PJ", "SJ", "SP"] {
            let pair: AugmentationPair = code.parse().unwrap();
            assert_eq!(pair.to_string(), code);
        }
        let pair: AugmentationPair = "S,P".parse().unwrap();
        assert_eq!(pair.first.kind, AugmentationKind::Scale);
        assert!("SPJ".parse::<AugmentationPair>().is_err());
        assert!("SX".parse::<AugmentationPair>().is_err());
    }

    proptest! {
        #[test]
        fn permute_preserves_channel_multisets(
            seed in any::<u64>(),
            w in 4usize..40,
            segs in 1usize..4,
        ) {
            let x = ramp_batch(3, w, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = permute(&x, segs, &mut rng).unwrap();
            prop_assert_eq!(out.dim(), x.dim());
            for i in 0..3 {
                for c in 0..2 {
                    let mut a: Vec<f64> = x.slice(s![i, .., c]).to_vec();
                    let mut b: Vec<f64> = out.slice(s![i, .., c]).to_vec();
                    a.sort_by(f64::total_cmp);
                    b.sort_by(f64::total_cmp);
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn operators_preserve_shape(seed in any::<u64>(), sigma in 0.0f64..2.0) {
            let x = ramp_batch(2, 12, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(jitter(&x, sigma, &mut rng).unwrap().dim(), x.dim());
            prop_assert_eq!(scale(&x, sigma, &mut rng).unwrap().dim(), x.dim());
        }
    }
}
