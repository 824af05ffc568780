//! Global merge tree, tree cuts, silhouette scoring and the monotone
//! layer-wise depth search.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::DistanceMatrix;

/// One agglomeration step. Leaves are nodes `0..n`; merge `s` creates node `n + s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub id: usize,
}

/// Average-linkage (UPGMA) merge tree over `n` leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTree {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

impl MergeTree {
    pub fn len(&self) -> usize {
        self.leaves
    }

    pub fn is_empty(&self) -> bool {
        self.leaves == 0
    }

    /// Sorted leaf sets of every node id, leaves first.
    pub fn node_members(&self) -> Vec<Vec<usize>> {
        let mut members: Vec<Vec<usize>> = (0..self.leaves).map(|i| vec![i]).collect();
        for m in &self.merges {
            let mut joined = members[m.left].clone();
            joined.extend_from_slice(&members[m.right]);
            joined.sort_unstable();
            members.push(joined);
        }
        members
    }
}

/// Clients grouped into `count` nonempty clusters. Cluster ids are
/// contiguous and ordered by each cluster's smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    count: usize,
    assignment: Vec<usize>,
}

impl Partition {
    /// Canonicalizes arbitrary labels into the ordered-id form.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap: Vec<(usize, usize)> = Vec::new();
        let mut assignment = Vec::with_capacity(labels.len());
        for &label in labels {
            let id = match remap.iter().find(|(l, _)| *l == label) {
                Some(&(_, id)) => id,
                None => {
                    remap.push((label, remap.len()));
                    remap.len() - 1
                }
            };
            assignment.push(id);
        }
        Partition {
            count: remap.len(),
            assignment,
        }
    }

    pub fn single(n: usize) -> Self {
        Partition::from_labels(&vec![0; n])
    }

    pub fn singletons(n: usize) -> Self {
        Partition::from_labels(&(0..n).collect::<Vec<_>>())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, client: usize) -> usize {
        self.assignment[client]
    }

    /// Members of each cluster in ascending client order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (client, &c) in self.assignment.iter().enumerate() {
            out[c].push(client);
        }
        out
    }

    /// True when every cluster of `self` lies inside one cluster of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        self.len() == coarser.len()
            && self.clusters().iter().all(|members| {
                let parent = coarser.cluster_of(members[0]);
                members.iter().all(|&m| coarser.cluster_of(m) == parent)
            })
    }
}

/// Per-layer cluster counts with the partitions they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSchedule {
    pub counts: Vec<usize>,
    pub partitions: Vec<Partition>,
    pub scores: Vec<f64>,
}

impl DepthSchedule {
    pub fn depth(&self) -> usize {
        self.counts.len()
    }

    /// 1-based index of the first layer with more than one cluster.
    pub fn first_split_layer(&self) -> Option<usize> {
        self.counts.iter().position(|&c| c > 1).map(|l| l + 1)
    }

    /// Checks monotone counts, layer-to-layer refinement and that every
    /// partition is a cut of `tree`.
    pub fn validate(&self, tree: &MergeTree) -> Result<()> {
        if self.partitions.len() != self.counts.len() || self.scores.len() != self.counts.len() {
            return Err(Error::InvalidArgument("schedule vectors differ in length".into()));
        }
        let mut prev_count = 1;
        let mut prev = Partition::single(tree.len());
        for (l, (&c, p)) in self.counts.iter().zip(&self.partitions).enumerate() {
            let layer = l + 1;
            if c < prev_count || c > tree.len() {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer}: count {c} breaks monotonicity"
                )));
            }
            if p.count() != c {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer}: partition has {} clusters",
                    p.count()
                )));
            }
            if *p != cut(tree, c)? {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer}: partition is not a cut of the tree"
                )));
            }
            if !p.refines(&prev) {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer}: partition does not refine layer {l}"
                )));
            }
            prev_count = c;
            prev = p.clone();
        }
        Ok(())
    }
}

/// UPGMA agglomeration on `d`. Ties on linkage go to the pair whose
/// (smaller min-member, larger min-member) key is lexicographically smallest.
pub fn build_merge_tree(d: &DistanceMatrix) -> Result<MergeTree> {
    let n = d.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "merge tree needs at least 2 leaves, got {n}"
        )));
    }
    // Clusters live in the slot of their smallest member.
    let mut sums: Vec<f64> = (0..n * n).map(|k| d.get(k / n, k % n)).collect();
    let mut sizes = vec![1usize; n];
    let mut node = (0..n).collect::<Vec<_>>();
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n - 1);

    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in (0..n).filter(|&a| active[a]) {
            for b in (a + 1..n).filter(|&b| active[b]) {
                let link = sums[a * n + b] / (sizes[a] * sizes[b]) as f64;
                if best.is_none_or(|(h, _, _)| link < h) {
                    best = Some((link, a, b));
                }
            }
        }
        let (height, a, b) = best.expect("at least two active clusters remain");
        for x in (0..n).filter(|&x| active[x] && x != a && x != b) {
            let s = sums[a * n + x] + sums[b * n + x];
            sums[a * n + x] = s;
            sums[x * n + a] = s;
        }
        let id = n + step;
        merges.push(Merge {
            left: node[a],
            right: node[b],
            height,
            id,
        });
        sizes[a] += sizes[b];
        node[a] = id;
        active[b] = false;
    }
    Ok(MergeTree { leaves: n, merges })
}

/// The partition left after undoing the last `c − 1` merges.
pub fn cut(tree: &MergeTree, c: usize) -> Result<Partition> {
    let n = tree.len();
    if c < 1 || c > n {
        return Err(Error::InvalidArgument(format!("cut size {c} outside [1, {n}]")));
    }
    let mut labels: Vec<usize> = (0..n).collect();
    let members = tree.node_members();
    for m in &tree.merges[..n - c] {
        let target = labels[members[m.left][0]];
        for &leaf in &members[m.right] {
            labels[leaf] = target;
        }
        for &leaf in &members[m.left] {
            labels[leaf] = target;
        }
    }
    Ok(Partition::from_labels(&labels))
}

/// Mean silhouette of `p` under `d`; singleton clusters contribute 0.
pub fn silhouette(d: &DistanceMatrix, p: &Partition) -> Result<f64> {
    let n = d.len();
    if p.len() != n {
        return Err(Error::dim("partition size vs distance matrix", n, p.len()));
    }
    if p.count() < 2 {
        return Err(Error::InvalidArgument(
            "silhouette is undefined for a single cluster".into(),
        ));
    }
    let clusters = p.clusters();
    let mut total = 0.0;
    for i in 0..n {
        let own = p.cluster_of(i);
        if clusters[own].len() == 1 {
            continue;
        }
        let mean_to = |members: &[usize]| {
            let sum: f64 = members.iter().filter(|&&j| j != i).map(|&j| d.get(i, j)).sum();
            let count = members.iter().filter(|&&j| j != i).count();
            sum / count as f64
        };
        let a = mean_to(&clusters[own]);
        let b = clusters
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != own)
            .map(|(_, members)| mean_to(members))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// `φ(c) = τ` for `c = 1`, otherwise the silhouette of `cut(tree, c)`.
pub fn score(c: usize, d: &DistanceMatrix, tree: &MergeTree, tau: f64) -> Result<f64> {
    if c == 1 {
        if tree.len() != d.len() {
            return Err(Error::dim("tree leaves vs distance matrix", d.len(), tree.len()));
        }
        return Ok(tau);
    }
    silhouette(d, &cut(tree, c)?)
}

/// Candidate counts `c_prev ..= min(n, c_prev + k − 1)`; never empty.
pub fn search_space(c_prev: usize, k: usize, n: usize) -> RangeInclusive<usize> {
    assert!(k >= 1, "search window must be at least 1");
    assert!((1..=n).contains(&c_prev), "previous count outside [1, n]");
    c_prev..=n.min(c_prev + k - 1)
}

/// Argmax of `φ` over `candidates`, keeping the smallest `c` on ties.
fn best_count(
    candidates: RangeInclusive<usize>,
    d: &DistanceMatrix,
    tree: &MergeTree,
    tau: f64,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for c in candidates {
        let s = score(c, d, tree, tau)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    Ok(best.expect("search space is nonempty"))
}

/// Layer-by-layer argmax of `φ` over the monotone search window, every
/// partition cut from the one global tree.
pub fn compute_depth_schedule(
    tree: &MergeTree,
    layer_distances: &[DistanceMatrix],
    tau: f64,
    k: usize,
) -> Result<DepthSchedule> {
    if layer_distances.is_empty() {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("search window K must be >= 1".into()));
    }
    let n = tree.len();
    let mut schedule = DepthSchedule {
        counts: Vec::new(),
        partitions: Vec::new(),
        scores: Vec::new(),
    };
    let mut prev = 1;
    for d in layer_distances {
        if d.len() != n {
            return Err(Error::dim("layer distance size vs tree leaves", n, d.len()));
        }
        let (c, s) = best_count(search_space(prev, k, n), d, tree, tau)?;
        schedule.counts.push(c);
        schedule.partitions.push(cut(tree, c)?);
        schedule.scores.push(s);
        prev = c;
    }
    Ok(schedule)
}

/// The same count `c` (clamped to `[1, n]`) at every layer.
pub fn fixed_schedule(
    tree: &MergeTree,
    layer_distances: &[DistanceMatrix],
    tau: f64,
    c: usize,
) -> Result<DepthSchedule> {
    let c = c.clamp(1, tree.len());
    let partition = cut(tree, c)?;
    let scores = layer_distances
        .iter()
        .map(|d| score(c, d, tree, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthSchedule {
        counts: vec![c; layer_distances.len()],
        partitions: vec![partition; layer_distances.len()],
        scores,
    })
}

/// Ablation without a shared skeleton: each layer gets its own tree from
/// `D^(l)` and picks `c ∈ [1, min(n, k)]` with no monotonicity constraint.
pub fn independent_schedule(layer_distances: &[DistanceMatrix], tau: f64, k: usize) -> Result<DepthSchedule> {
    if k == 0 {
        return Err(Error::InvalidArgument("search window K must be >= 1".into()));
    }
    let mut schedule = DepthSchedule {
        counts: Vec::new(),
        partitions: Vec::new(),
        scores: Vec::new(),
    };
    for d in layer_distances {
        let tree = build_merge_tree(d)?;
        let (c, s) = best_count(search_space(1, k, tree.len()), d, &tree, tau)?;
        schedule.counts.push(c);
        schedule.partitions.push(cut(&tree, c)?);
        schedule.scores.push(s);
    }
    Ok(schedule)
}
