//! CART trees shared by the boosting, forest, and segmentation code paths.
//!
//! One arena-based [`Tree`] type serves three growers:
//!
//! * [`fit_grad_hess_tree`] — leaf-wise (best-first) growth on gradient and
//!   hessian sums with optional L1/L2 leaf penalties. With `grad = -y`,
//!   `hess = 1` this reduces to a plain regression tree whose split gain is
//!   exactly variance reduction, so the same engine also powers regression
//!   segmentation via [`fit_regression_tree`].
//! * [`fit_classification_tree`] — depth-first impurity-reduction growth
//!   (gini or entropy) with per-split feature subsampling, for forests.
//!
//! Split search is exact: each node sorts its rows per feature and scans all
//! boundaries between distinct values. An optional row cap subsamples the
//! scan for large nodes while the partition itself stays exact.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64, n_samples: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Binary decision tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, n_samples: usize) -> Self {
        Self { nodes: vec![Node::Leaf { value, n_samples }] }
    }

    /// Assemble a tree from explicit nodes; node 0 must be the root and
    /// every child index must be in bounds.
    pub fn from_nodes(nodes: Vec<Node>) -> Self {
        assert!(!nodes.is_empty(), "tree needs a root");
        for n in &nodes {
            if let Node::Split { left, right, .. } = n {
                assert!(*left < nodes.len() && *right < nodes.len(), "child out of bounds");
            }
        }
        Self { nodes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: usize) -> usize {
            match nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Index of the leaf `x` falls into.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Split { feature, threshold, left, right } => {
                    id = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    /// Replace every leaf value with `f(value)`.
    pub fn map_leaves(&mut self, f: impl Fn(f64) -> f64) {
        for n in &mut self.nodes {
            if let Node::Leaf { value, .. } = n {
                *value = f(*value);
            }
        }
    }
}

/// Parameters for the gradient/hessian (and regression) grower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowParams {
    pub max_leaves: usize,
    pub max_depth: Option<usize>,
    pub min_child_samples: usize,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    /// Cap on rows scanned per node when searching thresholds; the chosen
    /// split is still applied to every row.
    pub split_sample_cap: Option<usize>,
}

fn soft_threshold(g: f64, l1: f64) -> f64 {
    if g > l1 {
        g - l1
    } else if g < -l1 {
        g + l1
    } else {
        0.0
    }
}

fn leaf_objective(g: f64, h: f64, l1: f64, l2: f64) -> f64 {
    let t = soft_threshold(g, l1);
    0.5 * t * t / (h + l2).max(1e-12)
}

fn leaf_value(g: f64, h: f64, l1: f64, l2: f64) -> f64 {
    -soft_threshold(g, l1) / (h + l2).max(1e-12)
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn best_grad_hess_split(
    x: &Matrix,
    grad: &[f64],
    hess: &[f64],
    rows: &[usize],
    params: &GrowParams,
    rng: &mut ChaCha8Rng,
) -> Option<BestSplit> {
    let scan_rows: Vec<usize> = match params.split_sample_cap {
        Some(cap) if rows.len() > cap => {
            let mut pool = rows.to_vec();
            pool.shuffle(rng);
            pool.truncate(cap);
            pool.sort_unstable();
            pool
        }
        _ => rows.to_vec(),
    };
    let (mut g_tot, mut h_tot) = (0.0, 0.0);
    for &r in &scan_rows {
        g_tot += grad[r];
        h_tot += hess[r];
    }
    let parent = leaf_objective(g_tot, h_tot, params.lambda_l1, params.lambda_l2);
    // When scanning a subsample, scale the child-count floor accordingly.
    let min_count = if scan_rows.len() < rows.len() {
        ((params.min_child_samples as f64) * scan_rows.len() as f64 / rows.len() as f64).ceil() as usize
    } else {
        params.min_child_samples
    };
    let min_count = min_count.max(1);

    let mut best: Option<BestSplit> = None;
    let mut order: Vec<usize> = scan_rows.clone();
    for feature in 0..x.n_cols() {
        order.sort_by(|&a, &b| x.get(a, feature).total_cmp(&x.get(b, feature)));
        let (mut g_l, mut h_l) = (0.0, 0.0);
        for (pos, &r) in order.iter().enumerate() {
            g_l += grad[r];
            h_l += hess[r];
            if pos + 1 >= order.len() {
                break;
            }
            let v = x.get(r, feature);
            let v_next = x.get(order[pos + 1], feature);
            if v == v_next {
                continue;
            }
            let n_l = pos + 1;
            let n_r = order.len() - n_l;
            if n_l < min_count || n_r < min_count {
                continue;
            }
            let gain = leaf_objective(g_l, h_l, params.lambda_l1, params.lambda_l2)
                + leaf_objective(g_tot - g_l, h_tot - h_l, params.lambda_l1, params.lambda_l2)
                - parent;
            if gain > 1e-12 && best.as_ref().map_or(true, |b| gain > b.gain) {
                best = Some(BestSplit { feature, threshold: 0.5 * (v + v_next), gain });
            }
        }
    }
    best
}

/// Grow a tree leaf-wise on per-row gradients and hessians, expanding the
/// highest-gain leaf until `max_leaves` is reached or no split improves the
/// objective. Leaf values are the penalized Newton steps.
pub fn fit_grad_hess_tree(
    x: &Matrix,
    grad: &[f64],
    hess: &[f64],
    rows: &[usize],
    params: &GrowParams,
    rng: &mut ChaCha8Rng,
) -> Tree {
    struct Pending {
        node: usize,
        rows: Vec<usize>,
        depth: usize,
        split: BestSplit,
    }

    let sum = |rs: &[usize]| {
        let (mut g, mut h) = (0.0, 0.0);
        for &r in rs {
            g += grad[r];
            h += hess[r];
        }
        (g, h)
    };

    let (g0, h0) = sum(rows);
    let mut tree = Tree::leaf(leaf_value(g0, h0, params.lambda_l1, params.lambda_l2), rows.len());
    if rows.len() < 2 * params.min_child_samples || params.max_leaves < 2 {
        return tree;
    }

    let mut queue: Vec<Pending> = Vec::new();
    if let Some(split) = best_grad_hess_split(x, grad, hess, rows, params, rng) {
        queue.push(Pending { node: 0, rows: rows.to_vec(), depth: 0, split });
    }
    let mut n_leaves = 1;
    while n_leaves < params.max_leaves && !queue.is_empty() {
        // Highest gain first; ties resolved by node id for determinism.
        let idx = queue
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                a.split.gain.total_cmp(&b.split.gain).then(b.node.cmp(&a.node))
            })
            .map(|(i, _)| i)
            .unwrap();
        let pending = queue.swap_remove(idx);
        let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
        for &r in &pending.rows {
            if x.get(r, pending.split.feature) <= pending.split.threshold {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        if left_rows.is_empty() || right_rows.is_empty() {
            continue;
        }
        let (gl, hl) = sum(&left_rows);
        let (gr, hr) = sum(&right_rows);
        let left_id = tree.nodes.len();
        tree.nodes.push(Node::Leaf {
            value: leaf_value(gl, hl, params.lambda_l1, params.lambda_l2),
            n_samples: left_rows.len(),
        });
        let right_id = tree.nodes.len();
        tree.nodes.push(Node::Leaf {
            value: leaf_value(gr, hr, params.lambda_l1, params.lambda_l2),
            n_samples: right_rows.len(),
        });
        tree.nodes[pending.node] = Node::Split {
            feature: pending.split.feature,
            threshold: pending.split.threshold,
            left: left_id,
            right: right_id,
        };
        n_leaves += 1;
        let child_depth = pending.depth + 1;
        let depth_ok = params.max_depth.map_or(true, |d| child_depth < d);
        if depth_ok {
            for (id, rs) in [(left_id, left_rows), (right_id, right_rows)] {
                if rs.len() >= 2 * params.min_child_samples {
                    if let Some(split) = best_grad_hess_split(x, grad, hess, &rs, params, rng) {
                        queue.push(Pending { node: id, rows: rs, depth: child_depth, split });
                    }
                }
            }
        }
    }
    tree
}

/// Plain regression tree: leaves hold target means, splits maximize variance
/// reduction. Thin wrapper over the gradient/hessian grower.
pub fn fit_regression_tree(
    x: &Matrix,
    y: &[f64],
    rows: &[usize],
    max_leaves: usize,
    max_depth: Option<usize>,
    min_child_samples: usize,
) -> Tree {
    let grad: Vec<f64> = y.iter().map(|v| -v).collect();
    let hess = vec![1.0; y.len()];
    let params = GrowParams {
        max_leaves,
        max_depth,
        min_child_samples,
        lambda_l1: 0.0,
        lambda_l2: 0.0,
        split_sample_cap: None,
    };
    let mut rng = crate::rng::rng_from_seed(0);
    fit_grad_hess_tree(x, &grad, &hess, rows, &params, &mut rng)
}

/// Split quality for classification trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitCriterion {
    Gini,
    Entropy,
}

impl SplitCriterion {
    fn impurity(&self, pos_weight: f64, total_weight: f64) -> f64 {
        if total_weight <= 0.0 {
            return 0.0;
        }
        let p = (pos_weight / total_weight).clamp(0.0, 1.0);
        match self {
            SplitCriterion::Gini => 2.0 * p * (1.0 - p),
            SplitCriterion::Entropy => {
                let mut e = 0.0;
                if p > 0.0 {
                    e -= p * p.ln();
                }
                if p < 1.0 {
                    e -= (1.0 - p) * (1.0 - p).ln();
                }
                e
            }
        }
    }
}

/// How many candidate features each split considers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubsample {
    Sqrt,
    Log2,
    All,
}

impl FeatureSubsample {
    pub fn count(&self, n_features: usize) -> usize {
        let m = match self {
            FeatureSubsample::Sqrt => (n_features as f64).sqrt().ceil() as usize,
            FeatureSubsample::Log2 => (n_features as f64).log2().ceil() as usize,
            FeatureSubsample::All => n_features,
        };
        m.clamp(1, n_features)
    }
}

/// Parameters for the impurity-based classification grower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTreeParams {
    pub criterion: SplitCriterion,
    pub min_samples_split: usize,
    pub max_features: FeatureSubsample,
    pub max_depth: Option<usize>,
}

/// Grow a classification tree on boolean labels with per-row weights.
/// Leaves store the weighted positive fraction.
pub fn fit_classification_tree(
    x: &Matrix,
    y: &[bool],
    weights: &[f64],
    rows: &[usize],
    params: &ClassTreeParams,
    rng: &mut ChaCha8Rng,
) -> Tree {
    fn grow(
        x: &Matrix,
        y: &[bool],
        weights: &[f64],
        rows: Vec<usize>,
        depth: usize,
        params: &ClassTreeParams,
        rng: &mut ChaCha8Rng,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let (mut pos_w, mut tot_w) = (0.0, 0.0);
        for &r in &rows {
            tot_w += weights[r];
            if y[r] {
                pos_w += weights[r];
            }
        }
        let prob = if tot_w > 0.0 { pos_w / tot_w } else { 0.5 };
        let make_leaf = |nodes: &mut Vec<Node>| {
            nodes.push(Node::Leaf { value: prob, n_samples: rows.len() });
            nodes.len() - 1
        };
        let pure = pos_w <= 0.0 || pos_w >= tot_w;
        let depth_exhausted = params.max_depth.is_some_and(|d| depth >= d);
        if rows.len() < params.min_samples_split || pure || depth_exhausted {
            return make_leaf(nodes);
        }

        let parent_imp = params.criterion.impurity(pos_w, tot_w);
        let mut features: Vec<usize> = (0..x.n_cols()).collect();
        // Deterministic per-node feature subset from the tree's own stream.
        let m = params.max_features.count(x.n_cols());
        if m < x.n_cols() {
            features.shuffle(rng);
            features.truncate(m);
            features.sort_unstable();
        }

        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        let mut order = rows.clone();
        for &feature in &features {
            order.sort_by(|&a, &b| x.get(a, feature).total_cmp(&x.get(b, feature)));
            let (mut pos_l, mut tot_l) = (0.0, 0.0);
            for pos in 0..order.len() - 1 {
                let r = order[pos];
                tot_l += weights[r];
                if y[r] {
                    pos_l += weights[r];
                }
                let v = x.get(r, feature);
                let v_next = x.get(order[pos + 1], feature);
                if v == v_next {
                    continue;
                }
                let tot_r = tot_w - tot_l;
                if tot_l <= 0.0 || tot_r <= 0.0 {
                    continue;
                }
                let imp_l = params.criterion.impurity(pos_l, tot_l);
                let imp_r = params.criterion.impurity(pos_w - pos_l, tot_r);
                let gain = parent_imp - (tot_l * imp_l + tot_r * imp_r) / tot_w;
                if gain > 1e-12 && best.as_ref().map_or(true, |b| gain > b.0) {
                    best = Some((gain, feature, 0.5 * (v + v_next)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return make_leaf(nodes);
        };
        let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
        for &r in &rows {
            if x.get(r, feature) <= threshold {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        let id = nodes.len();
        nodes.push(Node::Leaf { value: prob, n_samples: rows.len() }); // placeholder
        let left = grow(x, y, weights, left_rows, depth + 1, params, rng, nodes);
        let right = grow(x, y, weights, right_rows, depth + 1, params, rng, nodes);
        nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    let mut nodes = Vec::new();
    grow(x, y, weights, rows.to_vec(), 0, params, rng, &mut nodes);
    Tree { nodes }
}
