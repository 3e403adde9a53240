//! COCO17 skeleton topology, spatial-configuration adjacency subsets and
//! body-part partition masks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose_io::NUM_JOINTS;
use crate::tensor::Tensor;

/// Undirected COCO17 skeleton edges.
pub const EDGES: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

/// Spanning tree rooted at the nose; the root maps to itself.
pub const PARENT: [usize; NUM_JOINTS] = [0, 0, 0, 1, 2, 0, 0, 5, 6, 7, 8, 5, 6, 11, 12, 13, 14];

/// Canonical T-pose (arms horizontal, image coordinates, neck at origin) used
/// to order neighbors by distance to the skeleton barycenter.
pub const CANONICAL_POSE: [[f64; 2]; NUM_JOINTS] = [
    [0.0, -0.25],
    [0.05, -0.3],
    [-0.05, -0.3],
    [0.1, -0.27],
    [-0.1, -0.27],
    [0.2, 0.0],
    [-0.2, 0.0],
    [0.5, 0.0],
    [-0.5, 0.0],
    [0.8, 0.0],
    [-0.8, 0.0],
    [0.12, 0.6],
    [-0.12, 0.6],
    [0.12, 1.05],
    [-0.12, 1.05],
    [0.12, 1.5],
    [-0.12, 1.5],
];

/// Number of spatial-configuration subsets.
pub const NUM_SUBSETS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    pub edges: Vec<(usize, usize)>,
    pub parent: [usize; NUM_JOINTS],
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::coco17()
    }
}

impl SkeletonTopology {
    pub fn coco17() -> Self {
        Self {
            edges: EDGES.to_vec(),
            parent: PARENT,
        }
    }

    /// Symmetric 0/1 adjacency without self loops.
    pub fn adjacency(&self) -> [[bool; NUM_JOINTS]; NUM_JOINTS] {
        let mut a = [[false; NUM_JOINTS]; NUM_JOINTS];
        for &(i, j) in &self.edges {
            a[i][j] = true;
            a[j][i] = true;
        }
        a
    }

    pub fn is_connected(&self) -> bool {
        let a = self.adjacency();
        let mut seen = [false; NUM_JOINTS];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for w in 0..NUM_JOINTS {
                if a[v][w] && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Distance of every joint of [`CANONICAL_POSE`] to its barycenter.
pub fn barycenter_distances() -> [f64; NUM_JOINTS] {
    let n = NUM_JOINTS as f64;
    let cx = CANONICAL_POSE.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = CANONICAL_POSE.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut d = [0.0; NUM_JOINTS];
    for (o, p) in d.iter_mut().zip(&CANONICAL_POSE) {
        *o = (p[0] - cx).hypot(p[1] - cy);
    }
    d
}

/// The three spatial-configuration subsets, indexed `[neighbor][center]`.
///
/// Subset 0 holds self loops, subset 1 neighbors no farther from the
/// barycenter than the center joint, subset 2 neighbors farther away.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencySubsets {
    pub raw: Vec<Tensor>,
    pub normalized: Vec<Tensor>,
}

pub fn build_adjacency_subsets(topology: &SkeletonTopology) -> AdjacencySubsets {
    let dist = barycenter_distances();
    let adj = topology.adjacency();
    let mut raw = vec![Tensor::zeros(&[NUM_JOINTS, NUM_JOINTS]); NUM_SUBSETS];
    for center in 0..NUM_JOINTS {
        raw[0].set(&[center, center], 1.0);
        for neighbor in 0..NUM_JOINTS {
            if !adj[neighbor][center] {
                continue;
            }
            let k = if dist[neighbor] <= dist[center] { 1 } else { 2 };
            raw[k].set(&[neighbor, center], 1.0);
        }
    }
    let normalized = raw.iter().map(column_normalize).collect();
    AdjacencySubsets { raw, normalized }
}

/// Divide every column by its sum; all-zero columns stay zero.
pub fn column_normalize(m: &Tensor) -> Tensor {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = m.clone();
    for c in 0..cols {
        let s: f64 = (0..rows).map(|r| m.at(&[r, c])).sum();
        if s != 0.0 {
            for r in 0..rows {
                out.set(&[r, c], m.at(&[r, c]) / s);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Parts5,
    UpperLower,
    ThreeGroups,
    LeftRight,
    Global,
}

impl SchemeName {
    pub const ALL: [SchemeName; 5] = [
        SchemeName::Parts5,
        SchemeName::UpperLower,
        SchemeName::ThreeGroups,
        SchemeName::LeftRight,
        SchemeName::Global,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeName::Parts5 => "parts5",
            SchemeName::UpperLower => "upper_lower",
            SchemeName::ThreeGroups => "three_groups",
            SchemeName::LeftRight => "left_right",
            SchemeName::Global => "global",
        }
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SchemeName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown partition scheme {s:?}")))
    }
}

const HEAD: [usize; 5] = [0, 1, 2, 3, 4];
const LEFT_ARM: [usize; 3] = [5, 7, 9];
const RIGHT_ARM: [usize; 3] = [6, 8, 10];
const LEFT_LEG: [usize; 3] = [11, 13, 15];
const RIGHT_LEG: [usize; 3] = [12, 14, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub name: SchemeName,
    pub groups: Vec<Vec<usize>>,
}

impl PartitionScheme {
    pub fn new(name: SchemeName, groups: Vec<Vec<usize>>) -> Result<Self> {
        let s = Self { name, groups };
        s.validate()?;
        Ok(s)
    }

    pub fn default_for(name: SchemeName) -> Self {
        let cat = |parts: &[&[usize]]| parts.iter().flat_map(|p| p.iter().copied()).collect();
        let groups: Vec<Vec<usize>> = match name {
            SchemeName::Parts5 => vec![
                HEAD.to_vec(),
                LEFT_ARM.to_vec(),
                RIGHT_ARM.to_vec(),
                LEFT_LEG.to_vec(),
                RIGHT_LEG.to_vec(),
            ],
            SchemeName::UpperLower => vec![cat(&[&HEAD, &LEFT_ARM, &RIGHT_ARM]), cat(&[&LEFT_LEG, &RIGHT_LEG])],
            SchemeName::ThreeGroups => vec![
                HEAD.to_vec(),
                cat(&[&LEFT_ARM, &RIGHT_ARM]),
                cat(&[&LEFT_LEG, &RIGHT_LEG]),
            ],
            SchemeName::LeftRight => vec![
                HEAD.to_vec(),
                cat(&[&LEFT_ARM, &LEFT_LEG]),
                cat(&[&RIGHT_ARM, &RIGHT_LEG]),
            ],
            SchemeName::Global => vec![(0..NUM_JOINTS).collect()],
        };
        Self { name, groups }
    }

    /// Groups must be non-empty, pairwise disjoint and cover all 17 joints.
    pub fn validate(&self) -> Result<()> {
        let mut owner = [None; NUM_JOINTS];
        for (g, group) in self.groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Partition(format!("{}: group {g} is empty", self.name)));
            }
            for &j in group {
                if j >= NUM_JOINTS {
                    return Err(Error::Partition(format!("{}: joint {j} out of range", self.name)));
                }
                if let Some(prev) = owner[j] {
                    return Err(Error::Partition(format!(
                        "{}: joint {j} in groups {prev} and {g}",
                        self.name
                    )));
                }
                owner[j] = Some(g);
            }
        }
        if let Some(j) = owner.iter().position(Option::is_none) {
            return Err(Error::Partition(format!("{}: joint {j} not covered", self.name)));
        }
        Ok(())
    }

    pub fn group_of(&self) -> [usize; NUM_JOINTS] {
        let mut owner = [0; NUM_JOINTS];
        for (g, group) in self.groups.iter().enumerate() {
            for &j in group {
                owner[j] = g;
            }
        }
        owner
    }
}

/// 0/1 mask that is 1 exactly where two joints share a group.
pub fn build_partition_mask(scheme: &PartitionScheme) -> Result<Tensor> {
    scheme.validate()?;
    let owner = scheme.group_of();
    let mut m = Tensor::zeros(&[NUM_JOINTS, NUM_JOINTS]);
    for i in 0..NUM_JOINTS {
        for j in 0..NUM_JOINTS {
            if owner[i] == owner[j] {
                m.set(&[i, j], 1.0);
            }
        }
    }
    Ok(m)
}

/// Fully built graph: topology, adjacency subsets and every scheme's mask.
#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    pub topology: SkeletonTopology,
    pub subsets: AdjacencySubsets,
    pub schemes: BTreeMap<SchemeName, PartitionScheme>,
    pub masks: BTreeMap<SchemeName, Tensor>,
}

impl SkeletonGraph {
    /// Build with the default schemes, replacing any named in `overrides`.
    pub fn new(overrides: &BTreeMap<SchemeName, Vec<Vec<usize>>>) -> Result<Self> {
        let topology = SkeletonTopology::coco17();
        let subsets = build_adjacency_subsets(&topology);
        let mut schemes = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for name in SchemeName::ALL {
            let scheme = match overrides.get(&name) {
                Some(groups) => PartitionScheme::new(name, groups.clone())?,
                None => PartitionScheme::default_for(name),
            };
            masks.insert(name, build_partition_mask(&scheme)?);
            schemes.insert(name, scheme);
        }
        Ok(Self {
            topology,
            subsets,
            schemes,
            masks,
        })
    }

    pub fn mask(&self, name: SchemeName) -> &Tensor {
        &self.masks[&name]
    }

    /// Body parts used for pooling: the parts5 groups followed by the whole body.
    pub fn pooling_parts(&self) -> Vec<Vec<usize>> {
        let mut parts = self.schemes[&SchemeName::Parts5].groups.clone();
        parts.push((0..NUM_JOINTS).collect());
        parts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_is_symmetric_and_connected() {
        let t = SkeletonTopology::coco17();
        let a = t.adjacency();
        for i in 0..NUM_JOINTS {
            assert!(!a[i][i]);
            for j in 0..NUM_JOINTS {
                assert_eq!(a[i][j], a[j][i]);
            }
        }
        assert!(t.is_connected());
    }

    #[test]
    fn parent_map_is_a_tree_rooted_at_nose() {
        // shoulders hang off the nose directly, which is not a drawn edge
        let a = SkeletonTopology::coco17().adjacency();
        for (j, &p) in PARENT.iter().enumerate().skip(1) {
            assert!(a[j][p] || p == 0, "parent edge {j}->{p}");
            assert_ne!(p, j);
            let mut v = j;
            for _ in 0..NUM_JOINTS {
                v = PARENT[v];
            }
            assert_eq!(v, 0);
        }
    }

    #[test]
    fn first_subset_is_identity() {
        let s = build_adjacency_subsets(&SkeletonTopology::coco17());
        assert_eq!(s.raw[0], Tensor::eye(NUM_JOINTS));
        assert_eq!(s.normalized[0], Tensor::eye(NUM_JOINTS));
    }

    #[test]
    fn subsets_partition_identity_plus_skeleton() {
        let t = SkeletonTopology::coco17();
        let s = build_adjacency_subsets(&t);
        let a = t.adjacency();
        for i in 0..NUM_JOINTS {
            for j in 0..NUM_JOINTS {
                let total: f64 = s.raw.iter().map(|m| m.at(&[i, j])).sum();
                let expected = if i == j || a[i][j] { 1.0 } else { 0.0 };
                assert_eq!(total, expected, "({i},{j})");
                for m in &s.raw {
                    assert!(m.at(&[i, j]) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn elbow_wrist_subset_assignment() {
        let d = barycenter_distances();
        // wrist lies farther out than elbow on the canonical pose
        assert!(d[9] > d[7]);
        let s = build_adjacency_subsets(&SkeletonTopology::coco17());
        // centered on the elbow, the wrist is a far neighbor
        assert_eq!(s.raw[2].at(&[9, 7]), 1.0);
        assert_eq!(s.raw[1].at(&[9, 7]), 0.0);
        // centered on the wrist, the elbow is a near neighbor
        assert_eq!(s.raw[1].at(&[7, 9]), 1.0);
        assert_eq!(s.raw[2].at(&[7, 9]), 0.0);
    }

    #[test]
    fn normalized_columns_sum_to_one_or_zero() {
        let s = build_adjacency_subsets(&SkeletonTopology::coco17());
        for m in &s.normalized {
            for c in 0..NUM_JOINTS {
                let sum: f64 = (0..NUM_JOINTS).map(|r| m.at(&[r, c])).sum();
                assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mask_examples() {
        let p5 = build_partition_mask(&PartitionScheme::default_for(SchemeName::Parts5)).unwrap();
        assert_eq!(p5.at(&[5, 7]), 1.0);
        assert_eq!(p5.at(&[5, 16]), 0.0);
        let g = build_partition_mask(&PartitionScheme::default_for(SchemeName::Global)).unwrap();
        assert_eq!(g.sum(), 289.0);
        let lr = build_partition_mask(&PartitionScheme::default_for(SchemeName::LeftRight)).unwrap();
        assert_eq!(lr.at(&[7, 13]), 1.0);
    }

    #[test]
    fn masks_are_equivalence_relations() {
        for name in SchemeName::ALL {
            let m = build_partition_mask(&PartitionScheme::default_for(name)).unwrap();
            let r = |i: usize, j: usize| m.at(&[i, j]) == 1.0;
            for i in 0..NUM_JOINTS {
                assert!(r(i, i));
                for j in 0..NUM_JOINTS {
                    assert_eq!(r(i, j), r(j, i));
                    for k in 0..NUM_JOINTS {
                        if r(i, j) && r(j, k) {
                            assert!(r(i, k), "{name}: ({i},{j},{k})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mask_invariant_under_within_group_permutation() {
        for name in SchemeName::ALL {
            let scheme = PartitionScheme::default_for(name);
            let m = build_partition_mask(&scheme).unwrap();
            // reverse the members of every group
            let mut perm: [usize; NUM_JOINTS] = std::array::from_fn(|i| i);
            for g in &scheme.groups {
                for (a, b) in g.iter().zip(g.iter().rev()) {
                    perm[*a] = *b;
                }
            }
            for i in 0..NUM_JOINTS {
                for j in 0..NUM_JOINTS {
                    assert_eq!(m.at(&[perm[i], perm[j]]), m.at(&[i, j]));
                }
            }
        }
    }

    #[test]
    fn invalid_partitions_rejected() {
        let overlap = PartitionScheme {
            name: SchemeName::Parts5,
            groups: vec![(0..10).collect(), (9..17).collect()],
        };
        assert!(build_partition_mask(&overlap).is_err());
        let gap = PartitionScheme {
            name: SchemeName::Parts5,
            groups: vec![(0..16).collect()],
        };
        assert!(build_partition_mask(&gap).is_err());
    }

    #[test]
    fn overrides_replace_default_groups() {
        let mut o = BTreeMap::new();
        o.insert(SchemeName::UpperLower, vec![(0..11).collect(), (11..17).collect()]);
        let g = SkeletonGraph::new(&o).unwrap();
        assert_eq!(g.mask(SchemeName::UpperLower).at(&[10, 11]), 0.0);
        assert_eq!(g.pooling_parts().len(), 6);
    }
}
