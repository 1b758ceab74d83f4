//! Mapping candidate reward scores to gradient weights.

use std::cmp::Ordering;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightScheme {
    /// Weight 1 on one uniformly chosen candidate.
    Random,
    Softmax { temperature: f64 },
    WinnerTakesAll,
    TwoWinners,
    /// 0.9 on the best candidate, −0.1 on the worst.
    BestMinusWorst,
    /// 0.9 on each of the two best candidates, −0.1 on each of the two worst.
    #[default]
    Top2MinusBottom2,
}

impl WeightScheme {
    pub fn softmax() -> Self {
        WeightScheme::Softmax { temperature: 1.0 }
    }

    pub fn min_candidates(&self) -> usize {
        match self {
            WeightScheme::TwoWinners | WeightScheme::BestMinusWorst => 2,
            WeightScheme::Top2MinusBottom2 => 4,
            _ => 1,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let WeightScheme::Softmax { temperature } = self {
            if !(*temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "softmax temperature must be positive, got {temperature}"
                )));
            }
        }
        if n < self.min_candidates() {
            return Err(Error::TooFewCandidates {
                scheme: self.to_string(),
                needed: self.min_candidates(),
                got: n,
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightScheme::Random => f.write_str("random"),
            WeightScheme::Softmax { temperature } if *temperature == 1.0 => f.write_str("softmax"),
            WeightScheme::Softmax { temperature } => write!(f, "softmax:{temperature}"),
            WeightScheme::WinnerTakesAll => f.write_str("winner-takes-all"),
            WeightScheme::TwoWinners => f.write_str("two-winners"),
            WeightScheme::BestMinusWorst => f.write_str("best-minus-worst"),
            WeightScheme::Top2MinusBottom2 => f.write_str("top2-minus-bottom2"),
        }
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    /// Accepts the names printed by `Display`; `softmax:<temperature>` sets the temperature.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        if let Some(temp) = s.strip_prefix("softmax:") {
            let temperature = temp
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad softmax temperature `{temp}`")))?;
            let scheme = WeightScheme::Softmax { temperature };
            scheme.validate(1).map_err(|e| Error::Config(e.to_string()))?;
            return Ok(scheme);
        }
        match s.as_str() {
            "random" => Ok(WeightScheme::Random),
            "softmax" => Ok(WeightScheme::softmax()),
            "winner-takes-all" | "wta" => Ok(WeightScheme::WinnerTakesAll),
            "two-winners" => Ok(WeightScheme::TwoWinners),
            "best-minus-worst" => Ok(WeightScheme::BestMinusWorst),
            "top2-minus-bottom2" => Ok(WeightScheme::Top2MinusBottom2),
            other => Err(Error::Config(format!("unknown weighting scheme `{other}`"))),
        }
    }
}

/// Candidate indices from highest to lowest score; equal scores keep index order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Lowest-scoring indices not in `exclude`, lowest index first among ties.
fn lowest(scores: &[f64], count: usize, exclude: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    idx.truncate(count);
    idx
}

/// Weights for one candidate set. Only [`WeightScheme::Random`] with more than one candidate
/// consumes randomness.
pub fn weights_from_scores(
    scores: &[f64],
    scheme: &WeightScheme,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no candidate scores".into()));
    }
    scheme.validate(n)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("candidate scores".into()));
    }
    let mut w = vec![0.0; n];
    match *scheme {
        WeightScheme::Random => {
            let pick = if n == 1 { 0 } else { rng.random_range(0..n) };
            w[pick] = 1.0;
        }
        WeightScheme::Softmax { temperature } => {
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| ((s - m) / temperature).exp()).collect();
            // summing in sorted order makes the normaliser independent of candidate order
            let mut sorted = exps.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            let z: f64 = sorted.iter().sum();
            for (wi, e) in w.iter_mut().zip(&exps) {
                *wi = e / z;
            }
        }
        WeightScheme::WinnerTakesAll => {
            w[descending(scores)[0]] = 1.0;
        }
        WeightScheme::TwoWinners => {
            for &i in &descending(scores)[..2] {
                w[i] = 1.0;
            }
        }
        WeightScheme::BestMinusWorst => {
            let best = descending(scores)[0];
            w[best] = 0.9;
            w[lowest(scores, 1, &[best])[0]] = -0.1;
        }
        WeightScheme::Top2MinusBottom2 => {
            let top = descending(scores)[..2].to_vec();
            for &i in &top {
                w[i] = 0.9;
            }
            for i in lowest(scores, 2, &top) {
                w[i] = -0.1;
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(scores: &[f64], scheme: WeightScheme) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        weights_from_scores(scores, &scheme, &mut rng).unwrap()
    }

    #[test]
    fn documented_examples() {
        let third = 1.0 / 3.0;
        assert_eq!(weights(&[0.0; 3], WeightScheme::softmax()), vec![third; 3]);
        assert_eq!(weights(&[0.2, 0.9, 0.5], WeightScheme::WinnerTakesAll), vec![0.0, 1.0, 0.0]);
        assert_eq!(
            weights(&[4.0, 1.0, 3.0, 2.0], WeightScheme::Top2MinusBottom2),
            vec![0.9, -0.1, 0.9, -0.1]
        );
        assert_eq!(weights(&[0.3], WeightScheme::WinnerTakesAll), vec![1.0]);
        assert_eq!(weights(&[0.3], WeightScheme::Random), vec![1.0]);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        assert_eq!(weights(&[1.0, 1.0, 1.0], WeightScheme::WinnerTakesAll), vec![1.0, 0.0, 0.0]);
        assert_eq!(weights(&[1.0, 1.0, 1.0], WeightScheme::TwoWinners), vec![1.0, 1.0, 0.0]);
        assert_eq!(
            weights(&[2.0; 4], WeightScheme::Top2MinusBottom2),
            vec![0.9, 0.9, -0.1, -0.1]
        );
        assert_eq!(weights(&[5.0, 5.0], WeightScheme::BestMinusWorst), vec![0.9, -0.1]);
        assert_eq!(weights(&[1.0, 0.0, 0.0], WeightScheme::BestMinusWorst), vec![0.9, -0.1, 0.0]);
    }

    #[test]
    fn too_few_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (scheme, n) in [
            (WeightScheme::TwoWinners, 1),
            (WeightScheme::BestMinusWorst, 1),
            (WeightScheme::Top2MinusBottom2, 3),
        ] {
            assert!(matches!(
                weights_from_scores(&vec![0.0; n], &scheme, &mut rng),
                Err(Error::TooFewCandidates { .. })
            ));
        }
        assert!(weights_from_scores(&[], &WeightScheme::Random, &mut rng).is_err());
        assert!(weights_from_scores(&[f64::NAN], &WeightScheme::Random, &mut rng).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for s in [
            WeightScheme::Random,
            WeightScheme::softmax(),
            WeightScheme::Softmax { temperature: 0.25 },
            WeightScheme::WinnerTakesAll,
            WeightScheme::TwoWinners,
            WeightScheme::BestMinusWorst,
            WeightScheme::Top2MinusBottom2,
        ] {
            assert_eq!(s.to_string().parse::<WeightScheme>().unwrap(), s);
        }
        assert!("softmax:-1".parse::<WeightScheme>().is_err());
        assert!("best".parse::<WeightScheme>().is_err());
    }

    #[test]
    fn random_picks_every_index_eventually() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [false; 5];
        for _ in 0..200 {
            let w = weights_from_scores(&[0.0; 5], &WeightScheme::Random, &mut rng).unwrap();
            assert_eq!(w.iter().sum::<f64>(), 1.0);
            seen[w.iter().position(|&x| x == 1.0).unwrap()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, 4..16)
    }

    proptest! {
        #[test]
        fn softmax_normalised_and_equivariant(scores in scores_strategy(), temp in 0.05f64..10.0, rot in 0usize..16) {
            let scheme = WeightScheme::Softmax { temperature: temp };
            let w = weights(&scores, scheme);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (x, s) in w.iter().zip(&scores) {
                // positive unless exp underflows
                prop_assert!(*x > 0.0 || (m - s) / temp > 700.0);
            }
            let k = rot % scores.len();
            let mut rotated = scores.clone();
            rotated.rotate_left(k);
            let mut expected = w.clone();
            expected.rotate_left(k);
            prop_assert_eq!(weights(&rotated, scheme), expected);
        }

        #[test]
        fn winner_invariant_under_monotone_maps(scores in scores_strategy(), a in 0.01f64..5.0, b in -5.0f64..5.0) {
            let base = weights(&scores, WeightScheme::WinnerTakesAll);
            let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let cubic: Vec<f64> = scores.iter().map(|s| s.powi(3) + s).collect();
            let expo: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp()).collect();
            prop_assert_eq!(&weights(&affine, WeightScheme::WinnerTakesAll), &base);
            prop_assert_eq!(&weights(&cubic, WeightScheme::WinnerTakesAll), &base);
            prop_assert_eq!(&weights(&expo, WeightScheme::WinnerTakesAll), &base);
        }

        #[test]
        fn fixed_weight_multisets(scores in scores_strategy()) {
            let bmw = weights(&scores, WeightScheme::BestMinusWorst);
            prop_assert_eq!(bmw.iter().filter(|&&x| x == 0.9).count(), 1);
            prop_assert_eq!(bmw.iter().filter(|&&x| x == -0.1).count(), 1);
            prop_assert_eq!(bmw.iter().filter(|&&x| x == 0.0).count(), scores.len() - 2);
            prop_assert!((bmw.iter().sum::<f64>() - 0.8).abs() < 1e-15);
            let t2 = weights(&scores, WeightScheme::Top2MinusBottom2);
            prop_assert_eq!(t2.iter().filter(|&&x| x == 0.9).count(), 2);
            prop_assert_eq!(t2.iter().filter(|&&x| x == -0.1).count(), 2);
            let tw = weights(&scores, WeightScheme::TwoWinners);
            prop_assert_eq!(tw.iter().sum::<f64>(), 2.0);
        }
    }
}
