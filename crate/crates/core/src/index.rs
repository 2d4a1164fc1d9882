//! Hierarchical k-means tree over curation features.
//!
//! The first `n - 1` levels split their members into `k_i` clusters on
//! feature `f_i`; the last level is a flat table of `f_n` features.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{euclidean, FeatureKind, FeatureSet};
use crate::{Error, Result};

pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective after each assignment step.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if target < d {
                        pick = Some(i);
                        break;
                    }
                    target -= d;
                }
            }
            // rounding can run off the end; fall back to the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Give every empty cluster the point farthest from its current center,
/// taken from clusters that can spare one.
fn reseed_empty(points: &[Vec<f64>], centers: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centers.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignments[i]] > 1 {
                let d = sq_dist(p, &centers[assignments[i]]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let i = far.expect("n >= k guarantees a donor cluster");
        centers[empty] = points[i].clone();
        assignments[i] = empty;
    }
}

fn inertia(points: &[Vec<f64>], centers: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centers[a])).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given seed;
/// ties go to the lower cluster index.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::TooFewPoints { n: points.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    reseed_empty(points, &mut centers, &mut assignments);
    let mut trace = vec![inertia(points, &centers, &assignments)];
    let mut converged = false;
    for _ in 0..max_iter {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        reseed_empty(points, &mut centers, &mut next);
        trace.push(inertia(points, &centers, &next));
        let unchanged = next == assignments;
        assignments = next;
        if unchanged {
            converged = true;
            break;
        }
    }
    Ok(KMeans {
        centers,
        assignments,
        inertia: trace,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub feature_order: Vec<FeatureKind>,
    pub branch_factors: Vec<usize>,
    pub kmeans_seed: u64,
    pub kmeans_max_iter: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            feature_order: vec![FeatureKind::Pose, FeatureKind::Lighting, FeatureKind::Expression],
            branch_factors: vec![9, 3],
            kmeans_seed: 0,
            kmeans_max_iter: 100,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_order.is_empty() || self.branch_factors.len() + 1 != self.feature_order.len() {
            return Err(Error::InvalidInput(
                "branch_factors must have one entry per non-leaf level".into(),
            ));
        }
        if self.branch_factors.contains(&0) {
            return Err(Error::InvalidInput("branch factors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafEntry {
    pub source_id: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub level: usize,
    /// Feature space of `center`; `None` at the root.
    pub kind: Option<FeatureKind>,
    pub center: Vec<f64>,
    pub children: Vec<ClusterNode>,
    /// Only populated on leaves.
    pub members: Vec<LeafEntry>,
}

impl ClusterNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Number of nodes at `level` below (and including) this node.
    pub fn count_at_level(&self, level: usize) -> usize {
        if self.level == level {
            1
        } else {
            self.children.iter().map(|c| c.count_at_level(level)).sum()
        }
    }

    pub fn leaves(&self) -> Vec<&ClusterNode> {
        if self.is_leaf() {
            vec![self]
        } else {
            self.children.iter().flat_map(|c| c.leaves()).collect()
        }
    }

    pub fn all_members(&self) -> Vec<&LeafEntry> {
        self.leaves().into_iter().flat_map(|l| l.members.iter()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterIndex {
    pub version: u32,
    pub config: IndexConfig,
    pub root: ClusterNode,
}

/// Build the cluster tree. Each k-means call is seeded from the config seed
/// and the node's position in build order.
pub fn build_index(images: &[FeatureSet], config: &IndexConfig) -> Result<ClusterIndex> {
    config.validate()?;
    let members: Vec<usize> = (0..images.len()).collect();
    let mut counter = 0u64;
    let root = build_node(images, config, &members, 0, None, Vec::new(), &mut counter)?;
    Ok(ClusterIndex {
        version: INDEX_VERSION,
        config: config.clone(),
        root,
    })
}

fn build_node(
    images: &[FeatureSet],
    config: &IndexConfig,
    members: &[usize],
    level: usize,
    kind: Option<FeatureKind>,
    center: Vec<f64>,
    counter: &mut u64,
) -> Result<ClusterNode> {
    let depth = config.feature_order.len();
    if level == depth - 1 {
        let leaf_kind = config.feature_order[depth - 1];
        return Ok(ClusterNode {
            level,
            kind,
            center,
            children: Vec::new(),
            members: members
                .iter()
                .map(|&i| LeafEntry {
                    source_id: images[i].source_id.clone(),
                    feature: images[i].get(leaf_kind).to_vec(),
                })
                .collect(),
        });
    }
    let split_kind = config.feature_order[level];
    let points: Vec<Vec<f64>> = members.iter().map(|&i| images[i].get(split_kind).to_vec()).collect();
    let seed = config.kmeans_seed.wrapping_add(counter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    *counter += 1;
    let km = kmeans(&points, config.branch_factors[level], seed, config.kmeans_max_iter)?;
    let mut children = Vec::with_capacity(km.centers.len());
    for (j, c) in km.centers.into_iter().enumerate() {
        let sub: Vec<usize> = members
            .iter()
            .zip(&km.assignments)
            .filter(|(_, &a)| a == j)
            .map(|(&m, _)| m)
            .collect();
        children.push(build_node(images, config, &sub, level + 1, Some(split_kind), c, counter)?);
    }
    Ok(ClusterNode {
        level,
        kind,
        center,
        children,
        members: Vec::new(),
    })
}

impl ClusterIndex {
    /// `query_features[i]` is the query in feature space `feature_order[i]`;
    /// `match_counts[i]` is how many nearest candidates to keep at level `i`.
    pub fn query(&self, query_features: &[Vec<f64>], match_counts: &[usize]) -> Result<Vec<String>> {
        let depth = self.config.feature_order.len();
        if query_features.len() != depth || match_counts.len() != depth {
            return Err(Error::DimensionMismatch {
                expected: depth,
                got: query_features.len().min(match_counts.len()),
            });
        }
        let mut out = Vec::new();
        query_node(&self.root, query_features, match_counts, &mut out);
        Ok(out)
    }

    pub fn query_features_of(&self, features: &FeatureSet) -> Vec<Vec<f64>> {
        self.config.feature_order.iter().map(|&k| features.get(k).to_vec()).collect()
    }
}

fn query_node(node: &ClusterNode, q: &[Vec<f64>], counts: &[usize], out: &mut Vec<String>) {
    if node.is_leaf() {
        let last = q.len() - 1;
        let mut ranked: Vec<(f64, &str)> = node
            .members
            .iter()
            .map(|m| (euclidean(&m.feature, &q[last]), m.source_id.as_str()))
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1)));
        out.extend(ranked.into_iter().take(counts[last]).map(|(_, id)| id.to_string()));
        return;
    }
    let level = node.level;
    let mut ranked: Vec<(f64, usize)> = node
        .children
        .iter()
        .enumerate()
        .map(|(i, c)| (euclidean(&c.center, &q[level]), i))
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    for (_, i) in ranked.into_iter().take(counts[level]) {
        query_node(&node.children[i], q, counts, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let km = kmeans(&pts, 1, 7, 10).unwrap();
        assert_eq!(km.centers, vec![vec![2.0, 1.0]]);
        assert!(km.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn too_few_points() {
        let err = kmeans(&[vec![0.0]], 2, 0, 10);
        assert!(matches!(err, Err(Error::TooFewPoints { n: 1, k: 2 })));
    }

    #[test]
    fn duplicates_still_fill_every_cluster() {
        let pts = vec![vec![1.0, 1.0]; 6];
        let km = kmeans(&pts, 3, 1, 10).unwrap();
        for j in 0..3 {
            assert!(km.assignments.contains(&j));
        }
    }

    #[test]
    fn separated_blobs() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let e = (i as f64 * 0.618).fract() * 0.1;
            pts.push(vec![e, 0.05 - e]);
            pts.push(vec![10.0 + e, 10.0 - e]);
        }
        let km = kmeans(&pts, 2, 3, 50).unwrap();
        for pair in km.assignments.chunks(2) {
            assert_ne!(pair[0], pair[1]);
        }
        let first = km.assignments[0];
        assert!(km.assignments.iter().step_by(2).all(|&a| a == first));
    }

    #[test]
    fn single_image_chain() {
        let img = FeatureSet {
            source_id: "only".into(),
            pose: vec![0.0, 0.0],
            lighting: vec![0.5; 36],
            expression: vec![0.1; 4],
        };
        let config = IndexConfig {
            branch_factors: vec![1, 1],
            ..Default::default()
        };
        let index = build_index(&[img.clone()], &config).unwrap();
        assert_eq!(index.root.count_at_level(1), 1);
        assert_eq!(index.root.count_at_level(2), 1);
        let ids = index.query(&index.query_features_of(&img), &[1, 1, 1]).unwrap();
        assert_eq!(ids, vec!["only".to_string()]);
    }

    #[test]
    fn bad_branch_factor_count() {
        let config = IndexConfig {
            branch_factors: vec![3],
            ..Default::default()
        };
        assert!(build_index(&[], &config).is_err());
    }
}
