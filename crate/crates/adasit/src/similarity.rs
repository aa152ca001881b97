//! Task similarity in model space.
//!
//! Every task's adapted parameters, minus the shared initialization they were
//! adapted from, form a delta vector: the direction the task pulled the
//! model. Two tasks are similar when the cosine of the angle between their
//! deltas exceeds a threshold. Ablation strategies replace the rule: k
//! nearest neighbors by the same cosine, a static feature (positive rate)
//! threshold, or no grouping at all.
//!
//! Zero deltas (a task whose parameters equal the initialization) make the
//! cosine undefined; such tasks are isolated: their neighborhood is the
//! singleton self-set and they join no cosine neighborhood, keeping the
//! cosine relation symmetric.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParamVector;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("parameter layout mismatch between tasks")]
    LayoutMismatch,
    #[error("invalid similarity config: {0}")]
    InvalidConfig(String),
    #[error("knn requires 1 <= k <= task count, got k={k} for {tasks} tasks")]
    KOutOfRange { k: usize, tasks: usize },
    #[error("no tasks")]
    NoTasks,
    #[error("model-space export failed: {0}")]
    Export(#[from] std::io::Error),
}

/// Which strategy produces neighborhoods, with its parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase", deny_unknown_fields)]
pub enum SimilarityConfig {
    /// Cosine threshold in model space; the full method.
    Cosine { eta: f64 },
    /// k nearest neighbors by the same cosine; may be asymmetric.
    Knn { k: usize },
    /// Positive-rate difference at most `tolerance`; parameter-free.
    Static { tolerance: f64 },
    /// Singleton neighborhoods; the no-similarity baseline.
    Identity,
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<(), SimilarityError> {
        match self {
            SimilarityConfig::Cosine { eta } => {
                if !(*eta > -1.0 && *eta <= 1.0) {
                    return Err(SimilarityError::InvalidConfig(format!(
                        "cosine threshold must be in (-1, 1], got {eta}"
                    )));
                }
            }
            SimilarityConfig::Knn { k } => {
                if *k == 0 {
                    return Err(SimilarityError::InvalidConfig(
                        "k must be at least 1".into(),
                    ));
                }
            }
            SimilarityConfig::Static { tolerance } => {
                if !(*tolerance >= 0.0) {
                    return Err(SimilarityError::InvalidConfig(format!(
                        "static tolerance must be non-negative, got {tolerance}"
                    )));
                }
            }
            SimilarityConfig::Identity => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityConfig::Cosine { .. } => "cosine",
            SimilarityConfig::Knn { .. } => "knn",
            SimilarityConfig::Static { .. } => "static",
            SimilarityConfig::Identity => "identity",
        }
    }
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig::Cosine { eta: 0.7 }
    }
}

/// Per-task neighbor sets produced by one strategy at one epoch. Every set
/// contains the task itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodAssignment {
    pub epoch: usize,
    pub strategy: String,
    pub neighbors: BTreeMap<String, BTreeSet<String>>,
}

impl NeighborhoodAssignment {
    fn new(epoch: usize, strategy: &str) -> Self {
        NeighborhoodAssignment {
            epoch,
            strategy: strategy.to_string(),
            neighbors: BTreeMap::new(),
        }
    }

    pub fn neighbors_of(&self, task_id: &str) -> Option<&BTreeSet<String>> {
        self.neighbors.get(task_id)
    }

    pub fn mean_size(&self) -> f64 {
        if self.neighbors.is_empty() {
            return 0.0;
        }
        let total: usize = self.neighbors.values().map(|s| s.len()).sum();
        total as f64 / self.neighbors.len() as f64
    }
}

/// Cosine of the angle between two adaptation deltas relative to the shared
/// initialization: `cos(θᵢ − θ, θⱼ − θ)`. Returns 0 when either delta has
/// zero norm.
pub fn cos_delta(
    theta_i: &ParamVector,
    theta_j: &ParamVector,
    theta: &ParamVector,
) -> Result<f64, SimilarityError> {
    if !theta_i.same_layout(theta) || !theta_j.same_layout(theta) {
        return Err(SimilarityError::LayoutMismatch);
    }
    let di = theta_i.sub(theta);
    let dj = theta_j.sub(theta);
    let ni = di.l2_norm();
    let nj = dj.l2_norm();
    if ni == 0.0 || nj == 0.0 {
        return Ok(0.0);
    }
    Ok(di.dot(&dj) / (ni * nj))
}

/// Deltas and norms precomputed once for the pairwise strategies. Order
/// follows the input map (sorted by task id).
struct DeltaSet {
    ids: Vec<String>,
    deltas: Vec<ParamVector>,
    norms: Vec<f64>,
}

fn delta_set(
    thetas: &BTreeMap<String, ParamVector>,
    theta: &ParamVector,
) -> Result<DeltaSet, SimilarityError> {
    if thetas.is_empty() {
        return Err(SimilarityError::NoTasks);
    }
    let mut ids = Vec::with_capacity(thetas.len());
    let mut deltas = Vec::with_capacity(thetas.len());
    let mut norms = Vec::with_capacity(thetas.len());
    for (id, theta_i) in thetas {
        if !theta_i.same_layout(theta) {
            return Err(SimilarityError::LayoutMismatch);
        }
        let delta = theta_i.sub(theta);
        norms.push(delta.l2_norm());
        deltas.push(delta);
        ids.push(id.clone());
    }
    Ok(DeltaSet { ids, deltas, norms })
}

impl DeltaSet {
    fn cos(&self, i: usize, j: usize) -> f64 {
        if self.norms[i] == 0.0 || self.norms[j] == 0.0 {
            return 0.0;
        }
        self.deltas[i].dot(&self.deltas[j]) / (self.norms[i] * self.norms[j])
    }
}

/// Threshold rule: `j ∈ N(i)` iff `cos(δᵢ, δⱼ) > eta`, plus unconditional
/// self-inclusion. Zero-delta tasks are isolated. Symmetric by construction.
pub fn neighborhood_cosine(
    thetas: &BTreeMap<String, ParamVector>,
    theta: &ParamVector,
    eta: f64,
    epoch: usize,
) -> Result<NeighborhoodAssignment, SimilarityError> {
    SimilarityConfig::Cosine { eta }.validate()?;
    let set = delta_set(thetas, theta)?;
    let n = set.ids.len();
    let mut assignment = NeighborhoodAssignment::new(epoch, "cosine");
    for id in &set.ids {
        assignment
            .neighbors
            .insert(id.clone(), BTreeSet::from([id.clone()]));
    }
    for i in 0..n {
        if set.norms[i] == 0.0 {
            continue;
        }
        for j in i + 1..n {
            if set.norms[j] == 0.0 {
                continue;
            }
            if set.cos(i, j) > eta {
                assignment
                    .neighbors
                    .get_mut(&set.ids[i])
                    .unwrap()
                    .insert(set.ids[j].clone());
                assignment
                    .neighbors
                    .get_mut(&set.ids[j])
                    .unwrap()
                    .insert(set.ids[i].clone());
            }
        }
    }
    Ok(assignment)
}

/// Rank rule: self plus the `k` other tasks with the largest cosine, ties
/// broken toward the smaller task id. Not symmetric in general.
pub fn neighborhood_knn(
    thetas: &BTreeMap<String, ParamVector>,
    theta: &ParamVector,
    k: usize,
    epoch: usize,
) -> Result<NeighborhoodAssignment, SimilarityError> {
    let set = delta_set(thetas, theta)?;
    let n = set.ids.len();
    if k == 0 || k > n {
        return Err(SimilarityError::KOutOfRange { k, tasks: n });
    }
    let mut assignment = NeighborhoodAssignment::new(epoch, "knn");
    for i in 0..n {
        let mut members = BTreeSet::from([set.ids[i].clone()]);
        if set.norms[i] > 0.0 {
            let mut ranked: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, set.cos(i, j)))
                .collect();
            // Descending cosine; ids are already in ascending order, so a
            // stable sort keeps the smaller id first among ties.
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            for &(j, _) in ranked.iter().take(k) {
                members.insert(set.ids[j].clone());
            }
        }
        assignment.neighbors.insert(set.ids[i].clone(), members);
    }
    Ok(assignment)
}

/// Static-feature rule: tasks are similar when their positive rates differ
/// by at most `tolerance`. Independent of any parameters, so it is available
/// before training starts.
pub fn neighborhood_static(
    rates: &[(String, f64)],
    tolerance: f64,
    epoch: usize,
) -> Result<NeighborhoodAssignment, SimilarityError> {
    SimilarityConfig::Static { tolerance }.validate()?;
    if rates.is_empty() {
        return Err(SimilarityError::NoTasks);
    }
    let mut assignment = NeighborhoodAssignment::new(epoch, "static");
    for (id_i, rate_i) in rates {
        let members: BTreeSet<String> = rates
            .iter()
            .filter(|(id_j, rate_j)| id_j == id_i || (rate_i - rate_j).abs() <= tolerance)
            .map(|(id_j, _)| id_j.clone())
            .collect();
        assignment.neighbors.insert(id_i.clone(), members);
    }
    Ok(assignment)
}

/// Singleton neighborhoods: adaptation sees only the task's own samples.
pub fn neighborhood_identity(task_ids: &[String], epoch: usize) -> NeighborhoodAssignment {
    let mut assignment = NeighborhoodAssignment::new(epoch, "identity");
    for id in task_ids {
        assignment
            .neighbors
            .insert(id.clone(), BTreeSet::from([id.clone()]));
    }
    assignment
}

/// Dispatches on the configured strategy. Parameter-based strategies fall
/// back to identity neighborhoods while no adapted parameters exist yet
/// (the first epoch): per-task parameters are only comparable after the
/// first end-of-epoch adaptation.
pub fn assign(
    config: &SimilarityConfig,
    rates: &[(String, f64)],
    task_params: Option<&BTreeMap<String, ParamVector>>,
    theta: &ParamVector,
    epoch: usize,
) -> Result<NeighborhoodAssignment, SimilarityError> {
    config.validate()?;
    let ids: Vec<String> = rates.iter().map(|(id, _)| id.clone()).collect();
    match config {
        SimilarityConfig::Identity => Ok(neighborhood_identity(&ids, epoch)),
        SimilarityConfig::Static { tolerance } => neighborhood_static(rates, *tolerance, epoch),
        SimilarityConfig::Cosine { eta } => match task_params {
            Some(thetas) if !thetas.is_empty() => neighborhood_cosine(thetas, theta, *eta, epoch),
            _ => Ok(neighborhood_identity(&ids, epoch)),
        },
        SimilarityConfig::Knn { k } => match task_params {
            Some(thetas) if !thetas.is_empty() => neighborhood_knn(thetas, theta, *k, epoch),
            _ => Ok(neighborhood_identity(&ids, epoch)),
        },
    }
}

/// One line of the model-space export.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpaceRecord {
    pub task_id: String,
    pub positive_rate: f64,
    /// True when the task's delta has zero norm (never adapted away from
    /// the initialization).
    pub isolated: bool,
    pub neighbors: Vec<String>,
    pub delta: Vec<f64>,
}

/// Writes one JSON record per task: its delta vector, positive rate, and
/// neighbor list. Intended for external projection (t-SNE and the like);
/// no reduction happens here.
pub fn export_model_space(
    out: &mut dyn Write,
    thetas: &BTreeMap<String, ParamVector>,
    theta: &ParamVector,
    assignment: &NeighborhoodAssignment,
    rates: &[(String, f64)],
) -> Result<usize, SimilarityError> {
    let rate_of: BTreeMap<&str, f64> = rates.iter().map(|(id, r)| (id.as_str(), *r)).collect();
    let mut written = 0;
    for (task_id, theta_i) in thetas {
        if !theta_i.same_layout(theta) {
            return Err(SimilarityError::LayoutMismatch);
        }
        let delta = theta_i.sub(theta);
        let record = ModelSpaceRecord {
            task_id: task_id.clone(),
            positive_rate: rate_of.get(task_id.as_str()).copied().unwrap_or(f64::NAN),
            isolated: delta.l2_norm() == 0.0,
            neighbors: assignment
                .neighbors_of(task_id)
                .map(|s| s.iter().cloned().collect())
                .unwrap_or_default(),
            delta: delta.values().to_vec(),
        };
        serde_json::to_writer(&mut *out, &record).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
        written += 1;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layout;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn vector(values: &[f64]) -> ParamVector {
        ParamVector::from_values(Layout::flat(values.len()), values.to_vec()).unwrap()
    }

    /// Tasks defined directly by their deltas (theta = 0).
    fn tasks_from_deltas(deltas: &[(&str, &[f64])]) -> (BTreeMap<String, ParamVector>, ParamVector) {
        let dim = deltas[0].1.len();
        let theta = vector(&vec![0.0; dim]);
        let map = deltas
            .iter()
            .map(|(id, d)| (id.to_string(), vector(d)))
            .collect();
        (map, theta)
    }

    #[test]
    fn cos_delta_closed_forms() {
        let theta = vector(&[0.0, 0.0]);
        let a = vector(&[1.0, 0.0]);
        let b = vector(&[0.0, 1.0]);
        let c = vector(&[1.0, 1.0]);
        assert_abs_diff_eq!(cos_delta(&a, &a, &theta).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cos_delta(&a, &b, &theta).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            cos_delta(&a, &c, &theta).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        // Zero delta pairs to 0 with anything.
        assert_eq!(cos_delta(&theta, &a, &theta).unwrap(), 0.0);

        let mismatched = vector(&[1.0, 0.0, 0.0]);
        assert!(cos_delta(&a, &mismatched, &theta).is_err());
    }

    #[test]
    fn cosine_neighborhood_hand_case() {
        // cos(A,B) = 1/sqrt(1.25) ~= 0.894 > 0.7; cos(A,C) = 0; cos(B,C) =
        // 0.5/(sqrt(1.25)*1) ~= 0.447 < 0.7.
        let (thetas, theta) = tasks_from_deltas(&[
            ("A", &[1.0, 0.0]),
            ("B", &[1.0, 0.5]),
            ("C", &[0.0, 1.0]),
        ]);
        let assignment = neighborhood_cosine(&thetas, &theta, 0.7, 1).unwrap();
        let expect = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(assignment.neighbors["A"], expect(&["A", "B"]));
        assert_eq!(assignment.neighbors["B"], expect(&["A", "B"]));
        assert_eq!(assignment.neighbors["C"], expect(&["C"]));
    }

    #[test]
    fn cosine_threshold_limits() {
        let (thetas, theta) = tasks_from_deltas(&[
            ("A", &[1.0, 0.0]),
            ("B", &[1.0, 0.0]),
            ("C", &[1.0, 0.0]),
        ]);
        // eta = 1: cos > 1 impossible, all singletons.
        let assignment = neighborhood_cosine(&thetas, &theta, 1.0, 0).unwrap();
        assert!(assignment.neighbors.values().all(|s| s.len() == 1));

        // Identical nonzero deltas below threshold: full set everywhere.
        let assignment = neighborhood_cosine(&thetas, &theta, 0.7, 0).unwrap();
        assert!(assignment.neighbors.values().all(|s| s.len() == 3));
    }

    #[test]
    fn zero_delta_tasks_are_isolated_even_with_negative_eta() {
        let (thetas, theta) =
            tasks_from_deltas(&[("A", &[1.0, 0.0]), ("Z", &[0.0, 0.0])]);
        let assignment = neighborhood_cosine(&thetas, &theta, -0.5, 0).unwrap();
        assert_eq!(assignment.neighbors["Z"].len(), 1);
        assert_eq!(assignment.neighbors["A"].len(), 1);
    }

    #[test]
    fn knn_hand_case_and_bounds() {
        let (thetas, theta) = tasks_from_deltas(&[
            ("A", &[1.0, 0.0]),
            ("B", &[0.9, 0.1]),
            ("C", &[-1.0, 0.0]),
        ]);
        let assignment = neighborhood_knn(&thetas, &theta, 1, 0).unwrap();
        let expect = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(assignment.neighbors["A"], expect(&["A", "B"]));

        // k = task count covers everything.
        let assignment = neighborhood_knn(&thetas, &theta, 3, 0).unwrap();
        assert!(assignment.neighbors.values().all(|s| s.len() == 3));

        assert!(matches!(
            neighborhood_knn(&thetas, &theta, 4, 0),
            Err(SimilarityError::KOutOfRange { .. })
        ));
    }

    #[test]
    fn knn_breaks_ties_toward_smaller_id() {
        // B and C are equidistant from A; k = 1 must pick B.
        let (thetas, theta) = tasks_from_deltas(&[
            ("A", &[1.0, 0.0]),
            ("B", &[0.0, 1.0]),
            ("C", &[0.0, 1.0]),
        ]);
        let assignment = neighborhood_knn(&thetas, &theta, 1, 0).unwrap();
        assert!(assignment.neighbors["A"].contains("B"));
        assert!(!assignment.neighbors["A"].contains("C"));
    }

    #[test]
    fn static_thresholds() {
        let rates = vec![
            ("a".to_string(), 0.05),
            ("b".to_string(), 0.06),
            ("c".to_string(), 0.30),
        ];
        let assignment = neighborhood_static(&rates, 0.02, 0).unwrap();
        assert_eq!(assignment.neighbors["a"].len(), 2);
        assert_eq!(assignment.neighbors["b"].len(), 2);
        assert_eq!(assignment.neighbors["c"].len(), 1);

        let grouped = neighborhood_static(&rates, 0.0, 0).unwrap();
        assert!(grouped.neighbors.values().all(|s| s.len() == 1));

        let all = neighborhood_static(&rates, 1.0, 0).unwrap();
        assert!(all.neighbors.values().all(|s| s.len() == 3));
    }

    #[test]
    fn identity_is_singletons() {
        let ids = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        let assignment = neighborhood_identity(&ids, 2);
        assert_eq!(assignment.neighbors.len(), 3);
        assert!(assignment.neighbors.values().all(|s| s.len() == 1));
        assert_abs_diff_eq!(assignment.mean_size(), 1.0, epsilon = 1e-15);

        let one = neighborhood_identity(&["solo".to_string()], 0);
        assert_eq!(one.neighbors["solo"].len(), 1);
    }

    #[test]
    fn assign_falls_back_to_identity_without_parameters() {
        let rates = vec![("a".to_string(), 0.1), ("b".to_string(), 0.1)];
        let theta = vector(&[0.0]);
        let config = SimilarityConfig::Cosine { eta: 0.7 };
        let assignment = assign(&config, &rates, None, &theta, 0).unwrap();
        assert_eq!(assignment.strategy, "identity");

        // Static works without parameters.
        let config = SimilarityConfig::Static { tolerance: 0.5 };
        let assignment = assign(&config, &rates, None, &theta, 0).unwrap();
        assert_eq!(assignment.strategy, "static");
        assert_eq!(assignment.neighbors["a"].len(), 2);
    }

    fn random_delta_tasks(
        rng: &mut impl Rng,
        n: usize,
        dim: usize,
    ) -> (BTreeMap<String, ParamVector>, ParamVector) {
        let theta = vector(&(0..dim).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        let mut map = BTreeMap::new();
        for i in 0..n {
            let mut v = theta.clone();
            for x in v.values_mut() {
                *x += rng.random::<f64>() * 2.0 - 1.0;
            }
            map.insert(format!("t{i:02}"), v);
        }
        (map, theta)
    }

    #[test]
    fn properties_hold_on_random_sets() {
        let mut rng = crate::seed::rng_from(0x51a);
        for _ in 0..25 {
            let (thetas, theta) = random_delta_tasks(&mut rng, 6, 5);
            let ids: Vec<&String> = thetas.keys().collect();

            // Exact symmetry of the pairwise cosine.
            for i in &ids {
                for j in &ids {
                    let a = cos_delta(&thetas[*i], &thetas[*j], &theta).unwrap();
                    let b = cos_delta(&thetas[*j], &thetas[*i], &theta).unwrap();
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }

            // Scaling one delta by a positive constant leaves cosines and
            // hence neighborhoods unchanged.
            let assignment = neighborhood_cosine(&thetas, &theta, 0.3, 0).unwrap();
            let mut scaled = thetas.clone();
            let first = scaled.values_mut().next().unwrap();
            let delta = first.sub(&theta);
            *first = theta.clone();
            first.axpy(3.5, &delta);
            let rescaled = neighborhood_cosine(&scaled, &theta, 0.3, 0).unwrap();
            assert_eq!(assignment.neighbors, rescaled.neighbors);

            // Monotonicity in the threshold.
            let loose = neighborhood_cosine(&thetas, &theta, 0.1, 0).unwrap();
            let tight = neighborhood_cosine(&thetas, &theta, 0.6, 0).unwrap();
            for id in &ids {
                assert!(tight.neighbors[*id].is_subset(&loose.neighbors[*id]));
                assert!(loose.neighbors[*id].contains(*id));
            }
        }
    }

    #[test]
    fn export_writes_one_record_per_task() {
        let (thetas, theta) =
            tasks_from_deltas(&[("A", &[1.0, 0.0]), ("Z", &[0.0, 0.0])]);
        let assignment = neighborhood_cosine(&thetas, &theta, 0.5, 3).unwrap();
        let rates = vec![("A".to_string(), 0.2), ("Z".to_string(), 0.4)];
        let mut buf = Vec::new();
        let written =
            export_model_space(&mut buf, &thetas, &theta, &assignment, &rates).unwrap();
        assert_eq!(written, 2);
        let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().trim().lines().collect();
        assert_eq!(lines.len(), 2);
        let first: ModelSpaceRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.task_id, "A");
        assert!(!first.isolated);
        let second: ModelSpaceRecord = serde_json::from_str(lines[1]).unwrap();
        assert!(second.isolated);
        assert_eq!(second.delta, vec![0.0, 0.0]);
    }
}
