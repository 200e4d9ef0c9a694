//! Heterogeneous population graph: one adjacency per demographic relation,
//! each gating a Gaussian biomarker-similarity kernel.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Site,
    Sex,
    Age,
    Hand,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Site, Relation::Sex, Relation::Age, Relation::Hand];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Site => "site",
            Relation::Sex => "sex",
            Relation::Age => "age",
            Relation::Hand => "hand",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-subject demographics; `None` marks a missing field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub site: Option<u32>,
    pub sex: Option<u32>,
    pub age: Option<f64>,
    pub handedness: Option<u32>,
}

impl Demographics {
    pub fn validate(&self) -> Result<()> {
        if let Some(age) = self.age {
            if !(age > 0.0 && age.is_finite()) {
                return Err(Error::invalid(format!("age must be positive, got {age}")));
            }
        }
        Ok(())
    }

    fn categorical(&self, relation: Relation) -> Option<u32> {
        match relation {
            Relation::Site => self.site,
            Relation::Sex => self.sex,
            Relation::Hand => self.handedness,
            Relation::Age => None,
        }
    }

    pub fn has(&self, relation: Relation) -> bool {
        match relation {
            Relation::Age => self.age.is_some(),
            r => self.categorical(r).is_some(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatibilityConfig {
    /// Age window in years; pairs further apart get no edge.
    pub tau_age: f64,
    /// Age kernel bandwidth in years.
    pub sigma_age: f64,
}

impl Default for CompatibilityConfig {
    fn default() -> Self {
        Self {
            tau_age: 2.0,
            sigma_age: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            DistanceMetric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    (1.0 - dot / (na * nb)).max(0.0)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopGraphConfig {
    pub compatibility: CompatibilityConfig,
    /// Fixed similarity bandwidth; `None` uses the median pairwise distance.
    pub sigma_sim: Option<f64>,
    pub metric: DistanceMetric,
}

impl Default for PopGraphConfig {
    fn default() -> Self {
        Self {
            compatibility: CompatibilityConfig::default(),
            sigma_sim: None,
            metric: DistanceMetric::Euclidean,
        }
    }
}

impl PopGraphConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.compatibility;
        if !(c.tau_age > 0.0 && c.sigma_age > 0.0) {
            return Err(Error::invalid("tau_age and sigma_age must be positive"));
        }
        if let Some(s) = self.sigma_sim {
            if !(s > 0.0) {
                return Err(Error::invalid(format!("sigma_sim must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Compatibility of two subjects under one relation, in `[0, 1]`.
///
/// Categorical relations score 1 on equality and 0 otherwise; age scores
/// `exp(−Δ²/(2σ²))` inside the `τ` window and 0 outside it.
pub fn demographic_compatibility(
    a: &Demographics,
    b: &Demographics,
    relation: Relation,
    config: &CompatibilityConfig,
) -> Result<f64> {
    match relation {
        Relation::Age => {
            let (x, y) = a
                .age
                .zip(b.age)
                .ok_or(Error::MissingDemographic(relation.name()))?;
            let delta = (x - y).abs();
            Ok(if delta <= config.tau_age {
                (-delta * delta / (2.0 * config.sigma_age * config.sigma_age)).exp()
            } else {
                0.0
            })
        }
        r => {
            let (x, y) = a
                .categorical(r)
                .zip(b.categorical(r))
                .ok_or(Error::MissingDemographic(r.name()))?;
            Ok(if x == y { 1.0 } else { 0.0 })
        }
    }
}

/// `exp(−ρ(t_i, t_j)² / (2σ²))`.
pub fn biomarker_similarity(a: &[f64], b: &[f64], sigma_sim: f64, metric: DistanceMetric) -> f64 {
    let rho = metric.distance(a, b);
    (-rho * rho / (2.0 * sigma_sim * sigma_sim)).exp()
}

/// Median of pairwise distances between biomarker rows; 1 if degenerate.
pub fn median_bandwidth(reps: &Tensor, metric: DistanceMetric) -> f64 {
    let n = reps.rows();
    let mut d: Vec<f64> = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(metric.distance(reps.row(i), reps.row(j)));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// The four relation adjacencies over one subject ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaPathGraphSet {
    /// Indexed by [`Relation::index`].
    pub adjacencies: Vec<Tensor>,
    pub sigma_sim: f64,
    pub metric: DistanceMetric,
    /// Relations whose adjacency came out all zero.
    pub warnings: Vec<String>,
}

impl MetaPathGraphSet {
    pub fn adjacency(&self, r: Relation) -> &Tensor {
        &self.adjacencies[r.index()]
    }

    pub fn node_count(&self) -> usize {
        self.adjacencies.first().map_or(0, Tensor::rows)
    }
}

/// `A_k[i,j] = Sim(t_i, t_j) · C_k(d_i, d_j)` off the diagonal, 0 on it.
/// Pairs missing the relation's field contribute 0.
pub fn build_metapath_graphs(
    reps: &Tensor,
    demos: &[Demographics],
    config: &PopGraphConfig,
) -> Result<MetaPathGraphSet> {
    config.validate()?;
    let n = reps.rows();
    if demos.len() != n {
        return Err(Error::invalid(format!(
            "{n} biomarker rows but {} demographic records",
            demos.len()
        )));
    }
    let sigma_sim = config
        .sigma_sim
        .unwrap_or_else(|| median_bandwidth(reps, config.metric));
    let mut sim = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = biomarker_similarity(reps.row(i), reps.row(j), sigma_sim, config.metric);
            sim.set(i, j, s);
            sim.set(j, i, s);
        }
    }
    let mut adjacencies = Vec::with_capacity(4);
    let mut warnings = Vec::new();
    for r in Relation::ALL {
        let mut a = Tensor::zeros(n, n);
        for i in 0..n {
            if !demos[i].has(r) {
                continue;
            }
            for j in (i + 1)..n {
                if !demos[j].has(r) {
                    continue;
                }
                let c = demographic_compatibility(&demos[i], &demos[j], r, &config.compatibility)?;
                let w = sim.get(i, j) * c;
                a.set(i, j, w);
                a.set(j, i, w);
            }
        }
        if a.data().iter().all(|&v| v == 0.0) {
            warnings.push(format!("relation `{}` has no edges", r.name()));
        }
        adjacencies.push(a);
    }
    Ok(MetaPathGraphSet {
        adjacencies,
        sigma_sim,
        metric: config.metric,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(site: u32, sex: u32, age: f64, hand: u32) -> Demographics {
        Demographics {
            site: Some(site),
            sex: Some(sex),
            age: Some(age),
            handedness: Some(hand),
        }
    }

    #[test]
    fn compatibility_branches() {
        let cfg = CompatibilityConfig::default();
        let a = demo(1, 0, 10.0, 0);
        let b = demo(1, 1, 13.0, 0);
        assert_eq!(demographic_compatibility(&a, &b, Relation::Site, &cfg).unwrap(), 1.0);
        assert_eq!(demographic_compatibility(&a, &b, Relation::Sex, &cfg).unwrap(), 0.0);
        assert_eq!(demographic_compatibility(&a, &b, Relation::Age, &cfg).unwrap(), 0.0);
        assert_eq!(demographic_compatibility(&a, &a, Relation::Age, &cfg).unwrap(), 1.0);
        let c = demo(1, 1, 11.0, 0);
        let v = demographic_compatibility(&a, &c, Relation::Age, &cfg).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn missing_field_is_reported() {
        let cfg = CompatibilityConfig::default();
        let mut a = demo(1, 0, 10.0, 0);
        a.handedness = None;
        let b = demo(1, 0, 10.0, 0);
        assert!(matches!(
            demographic_compatibility(&a, &b, Relation::Hand, &cfg),
            Err(Error::MissingDemographic("hand"))
        ));
    }

    #[test]
    fn similarity_kernel_values() {
        let t = [0.3, -1.0];
        assert_eq!(biomarker_similarity(&t, &t, 0.7, DistanceMetric::Euclidean), 1.0);
        let u = [0.3 + 0.6, -1.0 + 0.8]; // distance 1
        let s = biomarker_similarity(&t, &u, 1.0, DistanceMetric::Euclidean);
        assert!((s - 0.606_530_659_712_633_4).abs() < 1e-12);
        assert_eq!(s, biomarker_similarity(&u, &t, 1.0, DistanceMetric::Euclidean));
    }

    #[test]
    fn two_subject_fixtures() {
        let reps = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let demos = [demo(0, 1, 20.0, 0), demo(1, 1, 40.0, 1)];
        let g = build_metapath_graphs(&reps, &demos, &PopGraphConfig::default()).unwrap();
        assert_eq!(g.adjacency(Relation::Site), &Tensor::zeros(2, 2));
        assert_eq!(g.adjacency(Relation::Sex).get(0, 1), 1.0);
        assert_eq!(g.warnings.len(), 3);
    }

    #[test]
    fn missing_pairs_contribute_nothing() {
        let reps = Tensor::from_rows(&[vec![0.0], vec![0.1], vec![0.2]]).unwrap();
        let mut d0 = demo(0, 0, 20.0, 0);
        d0.site = None;
        let demos = [d0, demo(0, 0, 20.0, 0), demo(0, 0, 20.0, 0)];
        let g = build_metapath_graphs(&reps, &demos, &PopGraphConfig::default()).unwrap();
        let site = g.adjacency(Relation::Site);
        assert_eq!(site.get(0, 1), 0.0);
        assert!(site.get(1, 2) > 0.0);
    }

    #[test]
    fn median_bandwidth_of_three_points() {
        // distances 1, 2, 3 → median 2
        let reps = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(median_bandwidth(&reps, DistanceMetric::Euclidean), 2.0);
    }

    #[test]
    fn cosine_distance() {
        let m = DistanceMetric::Cosine;
        assert!(m.distance(&[1.0, 0.0], &[2.0, 0.0]).abs() < 1e-15);
        assert!((m.distance(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn four_subject_brute_force() {
        let reps = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 2.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let demos = [
            demo(0, 0, 20.0, 0),
            demo(0, 1, 21.5, 0),
            demo(1, 0, 20.5, 1),
            Demographics {
                site: Some(0),
                sex: Some(0),
                age: Some(25.0),
                handedness: None,
            },
        ];
        let cfg = PopGraphConfig {
            sigma_sim: Some(1.3),
            ..PopGraphConfig::default()
        };
        let g = build_metapath_graphs(&reps, &demos, &cfg).unwrap();
        let field = |d: &Demographics, k: usize| -> Option<f64> {
            match k {
                0 => d.site.map(f64::from),
                1 => d.sex.map(f64::from),
                2 => d.age,
                _ => d.handedness.map(f64::from),
            }
        };
        for (k, r) in Relation::ALL.iter().enumerate() {
            for i in 0..4 {
                for j in 0..4 {
                    let expect = match (i != j, field(&demos[i], k), field(&demos[j], k)) {
                        (true, Some(x), Some(y)) => {
                            let dx = reps.get(i, 0) - reps.get(j, 0);
                            let dy = reps.get(i, 1) - reps.get(j, 1);
                            let sim = (-(dx * dx + dy * dy) / (2.0 * 1.3 * 1.3)).exp();
                            let c = if k == 2 {
                                let d = (x - y).abs();
                                if d <= 2.0 { (-d * d / 2.0).exp() } else { 0.0 }
                            } else if x == y {
                                1.0
                            } else {
                                0.0
                            };
                            sim * c
                        }
                        _ => 0.0,
                    };
                    assert!((g.adjacency(*r).get(i, j) - expect).abs() < 1e-12, "{r:?} {i} {j}");
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cohort() -> impl Strategy<Value = (Tensor, Vec<Demographics>)> {
            (2usize..7).prop_flat_map(|n| {
                let reps = proptest::collection::vec(-2.0f64..2.0, n * 3);
                let demo = (
                    proptest::option::weighted(0.9, 0u32..3),
                    proptest::option::weighted(0.9, 0u32..2),
                    proptest::option::weighted(0.9, 10.0f64..16.0),
                    proptest::option::weighted(0.9, 0u32..2),
                )
                    .prop_map(|(site, sex, age, handedness)| Demographics {
                        site,
                        sex,
                        age,
                        handedness,
                    });
                (
                    reps.prop_map(move |v| Tensor::from_vec(n, 3, v).unwrap()),
                    proptest::collection::vec(demo, n),
                )
            })
        }

        proptest! {
            #[test]
            fn symmetric_zero_diagonal_unit_range((reps, demos) in cohort()) {
                let g = build_metapath_graphs(&reps, &demos, &PopGraphConfig::default()).unwrap();
                let n = reps.rows();
                for a in &g.adjacencies {
                    for i in 0..n {
                        prop_assert_eq!(a.get(i, i), 0.0);
                        for j in 0..n {
                            prop_assert_eq!(a.get(i, j), a.get(j, i));
                            prop_assert!((0.0..=1.0).contains(&a.get(i, j)));
                        }
                    }
                }
            }

            #[test]
            fn demographic_gating_is_absolute((reps, demos) in cohort()) {
                let cfg = PopGraphConfig::default();
                let g = build_metapath_graphs(&reps, &demos, &cfg).unwrap();
                for r in Relation::ALL {
                    for i in 0..reps.rows() {
                        for j in 0..reps.rows() {
                            if g.adjacency(r).get(i, j) > 0.0 {
                                let c = demographic_compatibility(&demos[i], &demos[j], r, &cfg.compatibility).unwrap();
                                prop_assert!(c > 0.0);
                            }
                        }
                    }
                }
            }

            #[test]
            fn reordering_permutes_consistently((reps, demos) in cohort(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let n = reps.rows();
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let reps_p = reps.select_rows(&perm);
                let demos_p: Vec<Demographics> = perm.iter().map(|&i| demos[i].clone()).collect();
                let cfg = PopGraphConfig::default();
                let g = build_metapath_graphs(&reps, &demos, &cfg).unwrap();
                let gp = build_metapath_graphs(&reps_p, &demos_p, &cfg).unwrap();
                prop_assert!((g.sigma_sim - gp.sigma_sim).abs() < 1e-12);
                for r in Relation::ALL {
                    for i in 0..n {
                        for j in 0..n {
                            let d = gp.adjacency(r).get(i, j) - g.adjacency(r).get(perm[i], perm[j]);
                            prop_assert!(d.abs() < 1e-12);
                        }
                    }
                }
            }

            #[test]
            fn farther_biomarkers_never_raise_weight(
                (reps, demos) in cohort(),
                shift in 0.0f64..3.0,
            ) {
                // fixed bandwidth so moving one subject cannot rescale the kernel
                let cfg = PopGraphConfig { sigma_sim: Some(1.0), ..PopGraphConfig::default() };
                let g = build_metapath_graphs(&reps, &demos, &cfg).unwrap();
                let mut moved = reps.clone();
                let dir: Vec<f64> = (0..3).map(|c| reps.get(0, c) - reps.get(1, c)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for (c, v) in dir.iter().enumerate() {
                    moved.set(0, c, reps.get(0, c) + shift * v / norm);
                }
                let gm = build_metapath_graphs(&moved, &demos, &cfg).unwrap();
                for r in Relation::ALL {
                    prop_assert!(gm.adjacency(r).get(0, 1) <= g.adjacency(r).get(0, 1) + 1e-15);
                }
            }
        }
    }
}
