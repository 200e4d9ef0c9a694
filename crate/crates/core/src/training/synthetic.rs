//! Planted-biomarker cohorts drawn from a latent-factor model.
//!
//! Every ROI mixes a few shared latent factors plus private noise. In class-1
//! subjects the planted ROIs also share one extra signal scaled by
//! `effect_size`, which raises their mutual connectivity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::connectome::{ConnectomeConfig, TimeSeries};
use crate::error::{Error, Result};
use crate::popgraph::Demographics;
use crate::training::cohort::{Cohort, SubjectRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCohortSpec {
    pub n_subjects: usize,
    pub n_rois: usize,
    pub n_planted_rois: usize,
    pub effect_size: f64,
    pub n_timepoints: usize,
    pub n_factors: usize,
    /// Standard deviation of the factor loadings.
    pub loading_scale: f64,
    pub n_sites: u32,
    pub male_fraction: f64,
    pub right_handed_fraction: f64,
    pub age_range: (f64, f64),
    /// Probability that a subject's sex code simply copies its label.
    pub sex_label_coupling: f64,
    /// Probability that a subject's site is drawn from its label's half of the sites.
    pub site_label_coupling: f64,
    pub seed: u64,
}

impl Default for SyntheticCohortSpec {
    fn default() -> Self {
        Self {
            n_subjects: 120,
            n_rois: 90,
            n_planted_rois: 10,
            effect_size: 1.5,
            n_timepoints: 120,
            n_factors: 5,
            loading_scale: 0.4,
            n_sites: 4,
            male_fraction: 0.5,
            right_handed_fraction: 0.85,
            age_range: (8.0, 30.0),
            sex_label_coupling: 0.0,
            site_label_coupling: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticCohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_planted_rois >= self.n_rois {
            return Err(Error::invalid(format!(
                "planted ROIs ({}) must be fewer than ROIs ({})",
                self.n_planted_rois, self.n_rois
            )));
        }
        if self.n_rois < 2 || self.n_timepoints < 3 {
            return Err(Error::invalid("need at least 2 ROIs and 3 time points"));
        }
        if self.n_subjects < 2 || self.n_subjects % 2 != 0 {
            return Err(Error::invalid(format!(
                "n_subjects must be even and at least 2, got {}",
                self.n_subjects
            )));
        }
        if !(self.effect_size >= 0.0 && self.effect_size.is_finite()) {
            return Err(Error::invalid("effect_size must be finite and nonnegative"));
        }
        let probs = [
            self.male_fraction,
            self.right_handed_fraction,
            self.sex_label_coupling,
            self.site_label_coupling,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("fractions and couplings must lie in [0, 1]"));
        }
        if self.n_sites == 0 || !(self.age_range.0 > 0.0 && self.age_range.1 >= self.age_range.0) {
            return Err(Error::invalid("need at least one site and a positive age range"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub records: Vec<SubjectRecord>,
    pub series: Vec<TimeSeries>,
    /// Sorted indices of the planted ROIs.
    pub planted: Vec<usize>,
}

impl SyntheticCohort {
    pub fn build(&self, config: &ConnectomeConfig) -> Result<Cohort> {
        Cohort::from_timeseries(&self.records, &self.series, config)
    }

    /// Permutes labels across subjects, keeping class counts.
    pub fn shuffle_labels(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4521);
        let mut labels: Vec<usize> = self.records.iter().map(|r| r.label).collect();
        labels.shuffle(&mut rng);
        for (r, y) in self.records.iter_mut().zip(labels) {
            r.label = y;
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_synthetic_cohort(spec: &SyntheticCohortSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n_rois, t_len, n_f) = (spec.n_rois, spec.n_timepoints, spec.n_factors);

    let loadings = Tensor::from_fn(n_rois, n_f, |_, _| spec.loading_scale * normal(&mut rng));
    let mut planted: Vec<usize> = (0..n_rois).collect();
    planted.shuffle(&mut rng);
    planted.truncate(spec.n_planted_rois);
    planted.sort_unstable();
    let mut is_planted = vec![false; n_rois];
    for &p in &planted {
        is_planted[p] = true;
    }

    let mut labels: Vec<usize> = (0..spec.n_subjects).map(|i| usize::from(i >= spec.n_subjects / 2)).collect();
    labels.shuffle(&mut rng);

    let mut records = Vec::with_capacity(spec.n_subjects);
    let mut series = Vec::with_capacity(spec.n_subjects);
    for (i, &label) in labels.iter().enumerate() {
        let id = format!("sub-{:04}", i + 1);
        let factors = Tensor::from_fn(n_f, t_len, |_, _| normal(&mut rng));
        let shared: Vec<f64> = (0..t_len).map(|_| normal(&mut rng)).collect();
        let mut data = loadings.matmul(&factors)?;
        for r in 0..n_rois {
            let row = data.row_mut(r);
            for (t, v) in row.iter_mut().enumerate() {
                *v += normal(&mut rng);
                if label == 1 && is_planted[r] {
                    *v += spec.effect_size * shared[t];
                }
            }
        }
        let sex = if rng.random::<f64>() < spec.sex_label_coupling {
            label as u32
        } else {
            u32::from(rng.random::<f64>() >= spec.male_fraction)
        };
        let site = if spec.n_sites >= 2 && rng.random::<f64>() < spec.site_label_coupling {
            let half = spec.n_sites / 2;
            if label == 0 {
                rng.random_range(0..half)
            } else {
                rng.random_range(half..spec.n_sites)
            }
        } else {
            rng.random_range(0..spec.n_sites)
        };
        let (lo, hi) = spec.age_range;
        let age = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let handedness = u32::from(rng.random::<f64>() >= spec.right_handed_fraction);
        records.push(SubjectRecord {
            subject_id: id.clone(),
            label,
            demographics: Demographics {
                site: Some(site),
                sex: Some(sex),
                // one decimal keeps CSV/JSON round trips exact
                age: Some((age * 10.0).round() / 10.0),
                handedness: Some(handedness),
            },
        });
        series.push(TimeSeries::new(id, data)?);
    }
    Ok(SyntheticCohort {
        records,
        series,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::{fisher_z, pearson_fc};

    fn planted_gap(spec: &SyntheticCohortSpec) -> f64 {
        let c = generate_synthetic_cohort(spec).unwrap();
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for (r, ts) in c.records.iter().zip(&c.series) {
            let z = fisher_z(&pearson_fc(ts).unwrap(), 1e-5).unwrap();
            for (a, &p) in c.planted.iter().enumerate() {
                for &q in &c.planted[a + 1..] {
                    sums[r.label] += z.values().get(p, q);
                    counts[r.label] += 1;
                }
            }
        }
        sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64
    }

    #[test]
    fn same_seed_same_cohort() {
        let spec = SyntheticCohortSpec {
            n_subjects: 10,
            n_rois: 12,
            n_planted_rois: 3,
            ..SyntheticCohortSpec::default()
        };
        assert_eq!(generate_synthetic_cohort(&spec).unwrap(), generate_synthetic_cohort(&spec).unwrap());
    }

    #[test]
    fn planted_edges_separate_groups() {
        let spec = SyntheticCohortSpec {
            n_subjects: 40,
            ..SyntheticCohortSpec::default()
        };
        assert!(planted_gap(&spec) > 0.3);
    }

    #[test]
    fn zero_effect_gives_no_gap() {
        let spec = SyntheticCohortSpec {
            n_subjects: 200,
            effect_size: 0.0,
            seed: 3,
            ..SyntheticCohortSpec::default()
        };
        assert!(planted_gap(&spec).abs() < 0.05);
    }

    #[test]
    fn labels_are_balanced_and_planted_list_valid() {
        let c = generate_synthetic_cohort(&SyntheticCohortSpec::default()).unwrap();
        assert_eq!(c.records.iter().filter(|r| r.label == 1).count(), 60);
        assert_eq!(c.planted.len(), 10);
        assert!(c.planted.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn too_many_planted_rois_is_rejected() {
        let spec = SyntheticCohortSpec {
            n_planted_rois: 100,
            ..SyntheticCohortSpec::default()
        };
        assert!(generate_synthetic_cohort(&spec).is_err());
    }
}
