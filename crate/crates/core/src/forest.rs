//! Random forest of local experts.
//!
//! Each split node holds `(selection, expert, threshold)`: the selection
//! picks a few kernel channels (each contributing its mean and std
//! descriptor entries), the expert is a linear SVM trained on the node's
//! samples restricted to those entries, and samples with
//! `score <= threshold` go left. The threshold is the one maximizing
//! information gain of the induced partition. Leaves store a
//! Laplace-smoothed road posterior; the forest averages leaf posteriors.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featext::LeReader;
use crate::seed;
use crate::superpix::SuperpixelFeatureTable;
use crate::svm::{train_svm, LinearExpert, SvmConfig};

const RFLE_MAGIC: &[u8; 4] = b"RFLE";
const RFLE_VERSION: u32 = 1;

/// At most this many distinct thresholds are tried per candidate split.
const MAX_THRESHOLDS: usize = 64;

/// Shannon entropy (base 2) of a class histogram, with `0 log 0 = 0`.
pub fn entropy(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("entropy of an empty set".into()));
    }
    Ok(entropy_of(counts, total))
}

fn entropy_of(counts: &[u64], total: u64) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Parent entropy minus the size-weighted entropies of the two children.
/// An empty child contributes nothing.
pub fn information_gain(parent: &[u64], left: &[u64], right: &[u64]) -> Result<f64> {
    if parent.len() != left.len() || parent.len() != right.len() {
        return Err(Error::DimensionMismatch(
            "class histograms differ in length".into(),
        ));
    }
    if parent.iter().zip(left).zip(right).any(|((p, l), r)| l + r != *p) {
        return Err(Error::InvalidArgument(
            "child counts do not sum to the parent counts".into(),
        ));
    }
    let n: u64 = parent.iter().sum();
    if n == 0 {
        return Err(Error::Empty("information gain of an empty node".into()));
    }
    let mut gain = entropy_of(parent, n);
    for child in [left, right] {
        let m: u64 = child.iter().sum();
        if m > 0 {
            gain -= (m as f64 / n as f64) * entropy_of(child, m);
        }
    }
    Ok(gain)
}

/// Kernel channels a node's expert looks at. Kernel `k` contributes
/// descriptor entries `2k` (mean) and `2k + 1` (std).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSelection {
    kernel_ids: Vec<u32>,
}

impl FeatureSelection {
    pub fn new(kernel_ids: Vec<u32>, num_kernels: usize) -> Result<Self> {
        if kernel_ids.is_empty() {
            return Err(Error::InvalidArgument("feature selection is empty".into()));
        }
        if let Some(&k) = kernel_ids.iter().find(|&&k| k as usize >= num_kernels) {
            return Err(Error::InvalidArgument(format!(
                "kernel {k} out of range for {num_kernels} kernels"
            )));
        }
        let mut sorted = kernel_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != kernel_ids.len() {
            return Err(Error::InvalidArgument("duplicate kernel in selection".into()));
        }
        Ok(FeatureSelection { kernel_ids })
    }

    pub fn kernel_ids(&self) -> &[u32] {
        &self.kernel_ids
    }

    pub fn len(&self) -> usize {
        self.kernel_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernel_ids.is_empty()
    }

    pub fn descriptor_indices(&self) -> Vec<usize> {
        self.kernel_ids
            .iter()
            .flat_map(|&k| [2 * k as usize, 2 * k as usize + 1])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitNode {
    pub selection: FeatureSelection,
    pub expert: LinearExpert,
    pub threshold: f32,
    pub left: u32,
    pub right: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafNode {
    pub posterior: f32,
    pub sample_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split(SplitNode),
    Leaf(LeafNode),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Leaf reached by a descriptor.
    pub fn route(&self, descriptor: &[f32]) -> &LeafNode {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf(leaf) => return leaf,
                Node::Split(s) => {
                    let idx = s.selection.descriptor_indices();
                    let score = s.expert.score_gathered(descriptor, &idx);
                    i = if score <= s.threshold { s.left } else { s.right } as usize;
                }
            }
        }
    }

    /// Depth of every node, root at 0.
    pub fn node_depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Node::Split(s) = node {
                depth[s.left as usize] = depth[i] + 1;
                depth[s.right as usize] = depth[i] + 1;
            }
        }
        depth
    }

    pub fn depth(&self) -> usize {
        self.node_depths().into_iter().max().unwrap_or(0)
    }

    /// Children always have larger indices than their parent and every
    /// non-root node has exactly one parent.
    fn validate(&self, num_kernels: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Format("tree without nodes".into()));
        }
        let mut parents = vec![0u32; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Node::Split(s) = node {
                for c in [s.left, s.right] {
                    let c = c as usize;
                    if c <= i || c >= self.nodes.len() {
                        return Err(Error::Format(format!("node {i} has bad child {c}")));
                    }
                    parents[c] += 1;
                }
                if s.expert.dim() != 2 * s.selection.len() {
                    return Err(Error::Format(format!("node {i}: expert/selection size mismatch")));
                }
                if s.selection
                    .kernel_ids()
                    .iter()
                    .any(|&k| k as usize >= num_kernels)
                {
                    return Err(Error::Format(format!("node {i}: kernel id out of range")));
                }
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(Error::Format("nodes do not form a binary tree".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitKind {
    /// Linear SVM over the selected kernels' mean/std entries.
    #[default]
    LocalExpert,
    /// Classic decision stump: threshold on one descriptor entry.
    AxisAligned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub num_trees: usize,
    /// Maximum depth ("decision levels").
    pub max_depth: usize,
    /// Feature selections evaluated per node.
    pub num_candidates: usize,
    pub min_samples_leaf: usize,
    pub min_gain: f64,
    pub bagging: bool,
    pub seed: u64,
    pub svm: SvmConfig,
    pub split_kind: SplitKind,
    /// Upper bound on kernels drawn per selection.
    pub max_kernels_per_node: usize,
    /// Z-score the node samples before fitting the SVM; the fitted expert is
    /// mapped back so it scores raw descriptors.
    pub standardize: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            num_trees: 10,
            max_depth: 10,
            num_candidates: 10,
            min_samples_leaf: 10,
            min_gain: 1e-6,
            bagging: true,
            seed: 0,
            // Node subsets are often heavily imbalanced; with equal C the
            // optimum there is usually w = 0, which cannot split anything.
            svm: SvmConfig {
                balance_classes: true,
                ..SvmConfig::default()
            },
            split_kind: SplitKind::LocalExpert,
            max_kernels_per_node: 8,
            standardize: true,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_trees == 0 || self.max_depth == 0 || self.num_candidates == 0 {
            return Err(Error::InvalidArgument(
                "trees, depth and candidates must all be at least 1".into(),
            ));
        }
        if self.max_kernels_per_node == 0 {
            return Err(Error::InvalidArgument(
                "max_kernels_per_node must be at least 1".into(),
            ));
        }
        if self.min_gain.is_nan() || self.min_gain < 0.0 {
            return Err(Error::InvalidArgument("min_gain must be non-negative".into()));
        }
        self.svm.validate()
    }
}

/// Row-major labeled descriptors used for training.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    dim: usize,
    descriptors: Vec<f32>,
    labels: Vec<u8>,
}

impl TrainingSet {
    pub fn new(dim: usize, descriptors: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "descriptor dimension must be even and positive, got {dim}"
            )));
        }
        if descriptors.len() != dim * labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} samples of dimension {dim}",
                descriptors.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(TrainingSet {
            dim,
            descriptors,
            labels,
        })
    }

    /// Concatenates the labeled tables; unlabeled tables are skipped.
    pub fn from_tables(tables: &[SuperpixelFeatureTable]) -> Result<Self> {
        let labeled: Vec<_> = tables.iter().filter(|t| t.labels().is_some()).collect();
        let first = labeled
            .first()
            .ok_or_else(|| Error::Empty("no labeled training tables".into()))?;
        let dim = first.feature_dim();
        let mut descriptors = Vec::new();
        let mut labels = Vec::new();
        for t in labeled {
            if t.feature_dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "tables mix descriptor sizes {dim} and {}",
                    t.feature_dim()
                )));
            }
            descriptors.extend_from_slice(t.descriptors());
            labels.extend_from_slice(t.labels().unwrap_or_default());
        }
        if labels.is_empty() {
            return Err(Error::Empty("training tables have no regions".into()));
        }
        TrainingSet::new(dim, descriptors, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_kernels(&self) -> usize {
        self.dim / 2
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    fn counts(&self, indices: &[usize]) -> [u64; 2] {
        let road = indices.iter().filter(|&&i| self.labels[i] == 1).count() as u64;
        [indices.len() as u64 - road, road]
    }
}

/// A trained node function with the gain it achieves on its node.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub selection: FeatureSelection,
    pub expert: LinearExpert,
    pub threshold: f32,
    pub gain: f64,
}

/// Thresholds tried for a set of scores: midpoints between consecutive
/// distinct scores (or midpoints at 64 evenly spaced quantiles when there
/// are more), plus 0. Sorted ascending, without duplicates.
pub fn threshold_candidates(scores: &[f32]) -> Vec<f32> {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f32::total_cmp);
    distinct.dedup();
    let mid = |i: usize| ((f64::from(distinct[i]) + f64::from(distinct[i + 1])) / 2.0) as f32;
    let m = distinct.len();
    let mut out: Vec<f32> = if m <= MAX_THRESHOLDS {
        (0..m.saturating_sub(1)).map(mid).collect()
    } else {
        (1..=MAX_THRESHOLDS)
            .map(|q| mid(q * (m - 1) / (MAX_THRESHOLDS + 1)))
            .collect()
    };
    out.push(0.0);
    out.sort_by(f32::total_cmp);
    out.dedup();
    out
}

/// Best `(threshold, gain)` for splitting `score <= t` left. Ties go to the
/// smallest threshold.
pub fn best_threshold(scores: &[f32], labels: &[u8]) -> Result<(f32, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::DimensionMismatch(
            "scores and labels must be non-empty and aligned".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let sorted: Vec<f32> = order.iter().map(|&i| scores[i]).collect();
    // prefix[i] = road count among the i smallest scores
    let mut prefix = Vec::with_capacity(order.len() + 1);
    prefix.push(0u64);
    for &i in &order {
        prefix.push(prefix.last().unwrap() + u64::from(labels[i]));
    }
    let n = scores.len() as u64;
    let road = prefix[order.len()];
    let parent = [n - road, road];

    let mut best = (0.0f32, f64::NEG_INFINITY);
    for t in threshold_candidates(scores) {
        let k = sorted.partition_point(|&s| s <= t);
        let left_road = prefix[k];
        let left = [k as u64 - left_road, left_road];
        let right = [parent[0] - left[0], parent[1] - left[1]];
        let gain = information_gain(&parent, &left, &right)?;
        if gain > best.1 {
            best = (t, gain);
        }
    }
    Ok(best)
}

/// Trains the node function for one feature selection on the node's
/// samples and finds its best threshold. Returns `Ok(None)` when the expert
/// cannot be trained (e.g. the SVM subsample lost a class).
pub fn evaluate_candidate(
    set: &TrainingSet,
    indices: &[usize],
    selection: &FeatureSelection,
    svm: &SvmConfig,
    standardize: bool,
) -> Result<Option<Candidate>> {
    let cols = selection.descriptor_indices();
    let d = cols.len();
    let n = indices.len();
    let mut x = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for &i in indices {
        let row = set.descriptor(i);
        x.extend(cols.iter().map(|&c| row[c]));
        labels.push(set.label(i));
    }

    let (offset, scale) = if standardize {
        column_stats(&x, d)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let z: Vec<f32> = x
        .chunks_exact(d)
        .flat_map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, &v)| ((f64::from(v) - offset[j]) / scale[j]) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    let fitted = match train_svm(&z, d, &labels, svm) {
        Ok(e) => e,
        Err(Error::SingleClass) => return Ok(None),
        Err(e) => return Err(e),
    };
    // Fold the standardization back in so the expert scores raw entries.
    let weights: Vec<f32> = fitted
        .weights()
        .iter()
        .zip(&scale)
        .map(|(&w, &s)| (f64::from(w) / s) as f32)
        .collect();
    let bias = f64::from(fitted.bias())
        - fitted
            .weights()
            .iter()
            .zip(&offset)
            .zip(&scale)
            .map(|((&w, &m), &s)| f64::from(w) * m / s)
            .sum::<f64>();
    let expert = LinearExpert::new(weights, bias as f32)?;
    Ok(Some(threshold_candidate(set, indices, selection, expert)?))
}

fn threshold_candidate(
    set: &TrainingSet,
    indices: &[usize],
    selection: &FeatureSelection,
    expert: LinearExpert,
) -> Result<Candidate> {
    let cols = selection.descriptor_indices();
    let scores: Vec<f32> = indices
        .iter()
        .map(|&i| expert.score_gathered(set.descriptor(i), &cols))
        .collect();
    let labels: Vec<u8> = indices.iter().map(|&i| set.label(i)).collect();
    let (threshold, gain) = best_threshold(&scores, &labels)?;
    Ok(Candidate {
        selection: selection.clone(),
        expert,
        threshold,
        gain,
    })
}

fn column_stats(x: &[f32], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / d) as f64;
    let mut mean = vec![0.0f64; d];
    for r in x.chunks_exact(d) {
        r.iter().zip(&mut mean).for_each(|(&v, m)| *m += f64::from(v));
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for r in x.chunks_exact(d) {
        for j in 0..d {
            var[j] += (f64::from(r[j]) - mean[j]).powi(2);
        }
    }
    let scale = var
        .iter()
        .map(|&v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

enum Draw {
    Expert(FeatureSelection),
    /// Single descriptor entry `2k + which`.
    Axis(FeatureSelection, usize),
}

fn draw_candidate(rng: &mut impl Rng, num_kernels: usize, config: &ForestConfig) -> Draw {
    match config.split_kind {
        SplitKind::LocalExpert => {
            let max_k = num_kernels.min(config.max_kernels_per_node);
            let k = rng.gen_range(1..=max_k);
            let mut ids: Vec<u32> = index::sample(rng, num_kernels, k)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            ids.sort_unstable();
            Draw::Expert(FeatureSelection { kernel_ids: ids })
        }
        SplitKind::AxisAligned => {
            let entry = rng.gen_range(0..2 * num_kernels);
            let sel = FeatureSelection {
                kernel_ids: vec![(entry / 2) as u32],
            };
            Draw::Axis(sel, entry % 2)
        }
    }
}

fn leaf(counts: [u64; 2]) -> Node {
    let n = counts[0] + counts[1];
    Node::Leaf(LeafNode {
        posterior: ((counts[1] + 1) as f64 / (n + 2) as f64) as f32,
        sample_count: n.min(u64::from(u32::MAX)) as u32,
    })
}

/// Grows one tree top-down (breadth-first node numbering) on the samples
/// `indices` of `set`, which may contain repeats.
pub fn train_tree(
    set: &TrainingSet,
    indices: Vec<usize>,
    config: &ForestConfig,
    tree_seed: u64,
) -> Result<Tree> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::Empty("no samples to grow a tree from".into()));
    }
    let num_kernels = set.num_kernels();
    let mut nodes: Vec<Option<Node>> = vec![None];
    let mut queue = std::collections::VecDeque::new();
    queue.push_back((0usize, indices, 0usize));

    while let Some((id, idx, depth)) = queue.pop_front() {
        let counts = set.counts(&idx);
        if depth >= config.max_depth
            || idx.len() < 2 * config.min_samples_leaf
            || counts[0] == 0
            || counts[1] == 0
        {
            nodes[id] = Some(leaf(counts));
            continue;
        }

        let node_seed = seed::derive(tree_seed, id as u64);
        let mut rng = seed::rng(node_seed);
        let draws: Vec<Draw> = (0..config.num_candidates)
            .map(|_| draw_candidate(&mut rng, num_kernels, config))
            .collect();
        let evaluated: Vec<Option<Candidate>> = draws
            .par_iter()
            .enumerate()
            .map(|(c, draw)| -> Result<Option<Candidate>> {
                match draw {
                    Draw::Expert(sel) => {
                        let svm = SvmConfig {
                            seed: seed::derive(node_seed, c as u64),
                            ..config.svm.clone()
                        };
                        evaluate_candidate(set, &idx, sel, &svm, config.standardize)
                    }
                    Draw::Axis(sel, which) => {
                        let mut w = vec![0.0f32; 2];
                        w[*which] = 1.0;
                        let expert = LinearExpert::new(w, 0.0)?;
                        threshold_candidate(set, &idx, sel, expert).map(Some)
                    }
                }
            })
            .collect::<Result<_>>()?;

        // Fixed-order reduction: first strictly better candidate wins.
        let best = evaluated
            .into_iter()
            .flatten()
            .fold(None::<Candidate>, |best, c| match best {
                Some(b) if b.gain >= c.gain => Some(b),
                _ => Some(c),
            });
        let best = match best {
            Some(b) if b.gain >= config.min_gain => b,
            _ => {
                nodes[id] = Some(leaf(counts));
                continue;
            }
        };

        let cols = best.selection.descriptor_indices();
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| best.expert.score_gathered(set.descriptor(i), &cols) <= best.threshold);
        if left_idx.is_empty() || right_idx.is_empty() {
            // Only reachable when min_gain is 0 and no candidate separates.
            nodes[id] = Some(leaf(counts));
            continue;
        }
        let left = nodes.len();
        nodes.push(None);
        nodes.push(None);
        nodes[id] = Some(Node::Split(SplitNode {
            selection: best.selection,
            expert: best.expert,
            threshold: best.threshold,
            left: left as u32,
            right: left as u32 + 1,
        }));
        queue.push_back((left, left_idx, depth + 1));
        queue.push_back((left + 1, right_idx, depth + 1));
    }

    let nodes = nodes
        .into_iter()
        .map(|n| n.ok_or_else(|| Error::Invariant("unfilled tree node".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tree { nodes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<Tree>,
    num_kernels: usize,
    max_depth: usize,
}

impl ForestModel {
    pub fn new(trees: Vec<Tree>, num_kernels: usize, max_depth: usize) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidArgument("forest needs at least one tree".into()));
        }
        for t in &trees {
            t.validate(num_kernels)?;
        }
        Ok(ForestModel {
            trees,
            num_kernels,
            max_depth,
        })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn num_kernels(&self) -> usize {
        self.num_kernels
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Mean leaf posterior over all trees.
    pub fn predict(&self, descriptor: &[f32]) -> Result<f32> {
        if descriptor.len() != 2 * self.num_kernels {
            return Err(Error::DimensionMismatch(format!(
                "descriptor has {} entries, model expects {}",
                descriptor.len(),
                2 * self.num_kernels
            )));
        }
        let sum: f64 = self
            .trees
            .iter()
            .map(|t| f64::from(t.route(descriptor).posterior))
            .sum();
        Ok(((sum / self.trees.len() as f64) as f32).clamp(0.0, 1.0))
    }

    /// Predicts every region of a table, sequentially.
    pub fn predict_table(&self, table: &SuperpixelFeatureTable) -> Result<Vec<f32>> {
        table.rows().map(|r| self.predict(r)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(RFLE_MAGIC);
        put(&mut out, RFLE_VERSION);
        put(&mut out, self.trees.len() as u32);
        put(&mut out, self.num_kernels as u32);
        put(&mut out, self.max_depth as u32);
        for tree in &self.trees {
            put(&mut out, tree.nodes.len() as u32);
            for node in &tree.nodes {
                match node {
                    Node::Split(s) => {
                        out.push(0);
                        put(&mut out, s.selection.len() as u32);
                        for &k in s.selection.kernel_ids() {
                            put(&mut out, k);
                        }
                        for w in s.expert.weights() {
                            out.extend_from_slice(&w.to_le_bytes());
                        }
                        out.extend_from_slice(&s.expert.bias().to_le_bytes());
                        out.extend_from_slice(&s.threshold.to_le_bytes());
                        put(&mut out, s.left);
                        put(&mut out, s.right);
                    }
                    Node::Leaf(l) => {
                        out.push(1);
                        out.extend_from_slice(&l.posterior.to_le_bytes());
                        put(&mut out, l.sample_count);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Format("empty model file".into()));
        }
        let mut r = LeReader::new(bytes);
        r.magic(RFLE_MAGIC, "RFLE")?;
        let version = r.u32()?;
        if version != RFLE_VERSION {
            return Err(Error::Version(version));
        }
        let num_trees = r.u32()? as usize;
        let num_kernels = r.u32()? as usize;
        let max_depth = r.u32()? as usize;
        let mut trees = Vec::with_capacity(num_trees.min(1 << 16));
        for _ in 0..num_trees {
            let count = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                nodes.push(match r.u8()? {
                    0 => {
                        let k = r.u32()? as usize;
                        if k == 0 || k > num_kernels {
                            return Err(Error::Format(format!("split selects {k} kernels")));
                        }
                        let ids = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                        let weights = r.f32_vec(2 * k)?;
                        let bias = r.f32()?;
                        let threshold = r.f32()?;
                        let left = r.u32()?;
                        let right = r.u32()?;
                        Node::Split(SplitNode {
                            selection: FeatureSelection::new(ids, num_kernels)
                                .map_err(|e| Error::Format(e.to_string()))?,
                            expert: LinearExpert::new(weights, bias)?,
                            threshold,
                            left,
                            right,
                        })
                    }
                    1 => {
                        let posterior = r.f32()?;
                        if !(0.0..=1.0).contains(&posterior) {
                            return Err(Error::Format(format!("leaf posterior {posterior}")));
                        }
                        Node::Leaf(LeafNode {
                            posterior,
                            sample_count: r.u32()?,
                        })
                    }
                    kind => return Err(Error::Format(format!("unknown node kind {kind}"))),
                });
            }
            trees.push(Tree { nodes });
        }
        r.finish()?;
        ForestModel::new(trees, num_kernels, max_depth)
    }
}

/// Trains `config.num_trees` independent trees. Tree `t` uses seed
/// `derive(config.seed, t)` and, with bagging, a bootstrap resample of the
/// full training set.
pub fn train_forest(tables: &[SuperpixelFeatureTable], config: &ForestConfig) -> Result<ForestModel> {
    let set = TrainingSet::from_tables(tables)?;
    train_forest_on(&set, config)
}

pub fn train_forest_on(set: &TrainingSet, config: &ForestConfig) -> Result<ForestModel> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::Empty("no labeled training data".into()));
    }
    let n = set.len();
    let trees = (0..config.num_trees)
        .into_par_iter()
        .map(|t| {
            let tree_seed = seed::derive(config.seed, t as u64);
            let indices = if config.bagging {
                let mut rng = seed::rng(seed::derive(tree_seed, u64::MAX));
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            train_tree(set, indices, config, tree_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    ForestModel::new(trees, set.num_kernels(), config.max_depth)
}

/// Upper bound on forest size: `T * 2^l * (2 K + 1) * float_bytes`.
pub fn estimate_memory(trees: u64, levels: u32, max_kernels: u64, float_bytes: u64) -> Result<u64> {
    if trees == 0 || levels == 0 || max_kernels == 0 || float_bytes == 0 {
        return Err(Error::InvalidArgument(
            "memory model inputs must be at least 1".into(),
        ));
    }
    let overflow = || Error::InvalidArgument("memory estimate overflows u64".into());
    let nodes = 1u64
        .checked_shl(levels)
        .filter(|_| levels < 64)
        .ok_or_else(overflow)?;
    max_kernels
        .checked_mul(2)
        .and_then(|v| v.checked_add(1))
        .and_then(|v| v.checked_mul(float_bytes))
        .and_then(|v| v.checked_mul(nodes))
        .and_then(|v| v.checked_mul(trees))
        .ok_or_else(overflow)
}

pub fn save_model(model: &ForestModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ForestModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ForestModel::from_bytes(&bytes)
}
