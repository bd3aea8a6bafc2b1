//! Gaussian class clusters in multi-scale feature space.
//!
//! Each class owns one fixed mean pattern per scale, drawn elementwise from
//! `N(0, separation²)`. Samples add unit Gaussian noise to their class mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{validate_dims, FeatureMap, FeatureSample, ScaleDims};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: u32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dims: Vec<ScaleDims>,
    pub separation: f64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Contract(format!(
                "separation must be positive and finite, got {}",
                self.separation
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::contract("need at least one class"));
        }
        validate_dims(&self.dims)
    }

    fn class_means(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
        (0..self.num_classes)
            .map(|_| {
                self.dims
                    .iter()
                    .map(|d| {
                        (0..d.len())
                            .map(|_| {
                                self.separation * {
                                    let z: f64 = StandardNormal.sample(rng);
                                    z
                                }
                            })
                            .collect::<Vec<f64>>()
                    })
                    .collect()
            })
            .collect()
    }

    fn draw(&self, means: &[Vec<Vec<f64>>], per_class: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureSample> {
        let mut out = Vec::with_capacity(per_class * means.len());
        for (label, class_mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                let scales = self
                    .dims
                    .iter()
                    .zip(class_mean)
                    .map(|(&d, mean)| {
                        let data = mean
                            .iter()
                            .map(|m| {
                                m + {
                                    let z: f64 = StandardNormal.sample(rng);
                                    z
                                }
                            })
                            .collect();
                        FeatureMap::new(d, data).expect("dims validated")
                    })
                    .collect();
                out.push(FeatureSample {
                    scales,
                    label: label as u32,
                });
            }
        }
        out
    }
}

/// Train and test splits sharing the same class means. Deterministic in
/// `seed`; samples are ordered by class.
pub fn gen_synthetic_splits(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<FeatureSample>, Vec<FeatureSample>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = spec.class_means(&mut rng);
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(2);
    Ok((
        spec.draw(&means, spec.train_per_class, &mut train_rng),
        spec.draw(&means, spec.test_per_class, &mut test_rng),
    ))
}

/// A single split of `samples_per_class` samples per class.
pub fn gen_synthetic(
    num_classes: u32,
    samples_per_class: usize,
    dims: &[ScaleDims],
    separation: f64,
    seed: u64,
) -> Result<Vec<FeatureSample>> {
    let spec = SyntheticSpec {
        num_classes,
        train_per_class: samples_per_class,
        test_per_class: 0,
        dims: dims.to_vec(),
        separation,
    };
    gen_synthetic_splits(&spec, seed).map(|(train, _)| train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Vec<ScaleDims> {
        vec![ScaleDims::new(3, 4, 4), ScaleDims::new(2, 2, 2)]
    }

    fn flat(s: &FeatureSample) -> Vec<f64> {
        s.scales.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn empirical_means(samples: &[FeatureSample], k: usize) -> Vec<Vec<f64>> {
        let len = flat(&samples[0]).len();
        let mut sums = vec![vec![0.0; len]; k];
        let mut counts = vec![0usize; k];
        for s in samples {
            let l = s.label as usize;
            counts[l] += 1;
            sums[l].iter_mut().zip(flat(s)).for_each(|(a, v)| *a += v);
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
            .collect()
    }

    #[test]
    fn balanced_label_histogram() {
        let samples = gen_synthetic(5, 20, &dims(), 1.0, 3).unwrap();
        assert_eq!(samples.len(), 100);
        for c in 0..5 {
            assert_eq!(samples.iter().filter(|s| s.label == c).count(), 20);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_synthetic(3, 4, &dims(), 1.0, 11).unwrap();
        let b = gen_synthetic(3, 4, &dims(), 1.0, 11).unwrap();
        let c = gen_synthetic(3, 4, &dims(), 1.0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn nearest_mean_is_perfect_at_huge_separation() {
        let spec = SyntheticSpec {
            num_classes: 6,
            train_per_class: 10,
            test_per_class: 10,
            dims: dims(),
            separation: 1e3,
        };
        let (train, test) = gen_synthetic_splits(&spec, 5).unwrap();
        let means = empirical_means(&train, 6);
        for s in &test {
            let x = flat(s);
            let pred = (0..6)
                .min_by(|&a, &b| dist(&x, &means[a]).total_cmp(&dist(&x, &means[b])))
                .unwrap();
            assert_eq!(pred as u32, s.label);
        }
    }

    #[test]
    fn mean_distance_scales_linearly_with_separation() {
        let base = 4.0;
        for seed in 0..5 {
            let d = |sep: f64| {
                let s = gen_synthetic(2, 400, &dims(), sep, seed).unwrap();
                let m = empirical_means(&s, 2);
                dist(&m[0], &m[1])
            };
            let d1 = d(base);
            for factor in [2.0, 4.0] {
                let ratio = d(base * factor) / d1;
                assert!(
                    (ratio / factor - 1.0).abs() < 0.1,
                    "seed {seed} factor {factor} ratio {ratio}"
                );
            }
        }
    }

    #[test]
    fn non_positive_separation_is_rejected() {
        assert!(gen_synthetic(2, 2, &dims(), 0.0, 0).is_err());
        assert!(gen_synthetic(2, 2, &dims(), -1.0, 0).is_err());
    }
}
