//! Histogram-based gradient-boosted regression trees with leaf-wise
//! (best-first) growth.
//!
//! Features are quantized once into at most `max_bins` bins per column.
//! Every boosting round computes first and second order gradients of the
//! loss, then grows one tree by repeatedly splitting the leaf with the
//! largest second-order gain until `max_leaves` is reached or no split with
//! positive gain respects `min_samples_leaf`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numlin::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Squared,
    /// Gradient `sign(pred - y)` with a unit hessian.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub num_trees: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    pub max_bins: usize,
    pub l2_reg: f64,
    pub loss: Loss,
    /// Reserved; training has no stochastic component yet.
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            num_trees: 500,
            learning_rate: 0.05,
            max_leaves: 31,
            min_samples_leaf: 20,
            max_bins: 255,
            l2_reg: 1.0,
            loss: Loss::Squared,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be in (0, 1]",
                self.learning_rate
            )));
        }
        if self.max_leaves < 2 {
            return Err(Error::Config("max_leaves must be at least 2".into()));
        }
        if !(2..=255).contains(&self.max_bins) {
            return Err(Error::Config(format!(
                "max_bins {} must be in [2, 255]",
                self.max_bins
            )));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be at least 1".into()));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(Error::Config(
                "l2_reg must be a finite non-negative number".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        /// Rows whose bin is `<= bin` go left.
        bin: u16,
        /// Direction for missing values; always left as inputs are imputed upstream.
        default_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// `nodes[0]` is the root.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    fn leaf_value(&self, bins: impl Fn(usize) -> u8) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    bin,
                    left,
                    right,
                    ..
                } => {
                    i = if u16::from(bins(*feature)) <= *bin {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub config: GbdtConfig,
    pub base_score: f64,
    /// Per-feature bin edges; `bin(x)` is the number of edges strictly below `x`.
    pub bin_edges: Vec<Vec<f64>>,
    pub trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn n_features(&self) -> usize {
        self.bin_edges.len()
    }
}

/// Bin edges at empirical quantiles.
///
/// With at most `max_bins` distinct values every value gets its own bin and
/// the edges sit at midpoints between consecutive distinct values. Otherwise
/// the edge for quantile `q/max_bins` is the midpoint of the two order
/// statistics straddling it; boundaries inside a run of equal values are
/// dropped and duplicate edges collapsed.
pub fn quantile_bins(column: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for q in 1..max_bins {
        let idx = q * n / max_bins;
        if idx == 0 || idx >= n {
            continue;
        }
        let (lo, hi) = (sorted[idx - 1], sorted[idx]);
        if lo == hi {
            continue;
        }
        let edge = 0.5 * (lo + hi);
        if edges.last().is_none_or(|&e| edge > e) {
            edges.push(edge);
        }
    }
    edges
}

fn bin_of(edges: &[f64], x: f64) -> u8 {
    edges.partition_point(|&e| e < x) as u8
}

#[derive(Debug, Clone, Copy, Default)]
struct HistBin {
    g: f64,
    h: f64,
    count: u32,
}

#[derive(Debug, Clone, Copy)]
struct SplitCandidate {
    feature: usize,
    bin: u16,
    gain: f64,
}

struct LeafWork {
    node: usize,
    rows: Vec<u32>,
    hist: Vec<HistBin>,
    g: f64,
    h: f64,
    best: Option<SplitCandidate>,
}

/// Per-feature bin codes, column-major, plus histogram offsets.
struct BinnedData {
    cols: Vec<Vec<u8>>,
    offsets: Vec<usize>,
    n_bins: Vec<usize>,
    total_bins: usize,
}

impl BinnedData {
    fn new(x: &Matrix, edges: &[Vec<f64>]) -> Self {
        let cols: Vec<Vec<u8>> = edges
            .iter()
            .enumerate()
            .map(|(f, e)| x.iter_rows().map(|r| bin_of(e, r[f])).collect())
            .collect();
        let n_bins: Vec<usize> = edges.iter().map(|e| e.len() + 1).collect();
        let mut offsets = Vec::with_capacity(n_bins.len());
        let mut total_bins = 0;
        for nb in &n_bins {
            offsets.push(total_bins);
            total_bins += nb;
        }
        Self {
            cols,
            offsets,
            n_bins,
            total_bins,
        }
    }

    /// Each feature's slice is filled independently, so the result does not
    /// depend on how features are spread over workers.
    fn histogram(&self, rows: &[u32], grad: &[f64], hess: &[f64]) -> Vec<HistBin> {
        let mut hist = vec![HistBin::default(); self.total_bins];
        let mut slices: Vec<&mut [HistBin]> = Vec::with_capacity(self.cols.len());
        let mut rest: &mut [HistBin] = &mut hist;
        for nb in &self.n_bins {
            let (head, tail) = rest.split_at_mut(*nb);
            slices.push(head);
            rest = tail;
        }
        let fill = |(f, slice): (usize, &mut &mut [HistBin])| {
            let col = &self.cols[f];
            for &r in rows {
                let r = r as usize;
                let b = &mut slice[col[r] as usize];
                b.g += grad[r];
                b.h += hess[r];
                b.count += 1;
            }
        };
        if rows.len() * self.cols.len() > 1 << 16 {
            slices.par_iter_mut().enumerate().for_each(fill);
        } else {
            slices.iter_mut().enumerate().for_each(fill);
        }
        hist
    }
}

fn leaf_objective(g: f64, h: f64, lambda: f64) -> f64 {
    if h + lambda == 0.0 {
        0.0
    } else {
        g * g / (h + lambda)
    }
}

/// Second-order gain of splitting (G, H) into left/right parts.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    0.5 * (leaf_objective(gl, hl, lambda) + leaf_objective(gr, hr, lambda)
        - leaf_objective(gl + gr, hl + hr, lambda))
}

fn leaf_value(g: f64, h: f64, lambda: f64) -> f64 {
    if h + lambda == 0.0 {
        0.0
    } else {
        -g / (h + lambda)
    }
}

fn best_split(
    data: &BinnedData,
    hist: &[HistBin],
    g: f64,
    h: f64,
    count: usize,
    cfg: &GbdtConfig,
) -> Option<SplitCandidate> {
    let mut best: Option<SplitCandidate> = None;
    for f in 0..data.cols.len() {
        let bins = &hist[data.offsets[f]..data.offsets[f] + data.n_bins[f]];
        let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
        for (b, bin) in bins.iter().enumerate().take(bins.len() - 1) {
            gl += bin.g;
            hl += bin.h;
            cl += bin.count as usize;
            let cr = count - cl;
            if cl < cfg.min_samples_leaf {
                continue;
            }
            if cr < cfg.min_samples_leaf {
                break;
            }
            let gain = split_gain(gl, hl, g - gl, h - hl, cfg.l2_reg);
            if gain > 0.0 && best.is_none_or(|s| gain > s.gain) {
                best = Some(SplitCandidate {
                    feature: f,
                    bin: b as u16,
                    gain,
                });
            }
        }
    }
    best
}

fn gradients(loss: Loss, pred: &[f64], y: &[f64], grad: &mut [f64], hess: &mut [f64]) {
    for i in 0..y.len() {
        let r = pred[i] - y[i];
        grad[i] = match loss {
            Loss::Squared => r,
            Loss::Absolute => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        };
        hess[i] = 1.0;
    }
}

fn grow_tree(
    data: &BinnedData,
    grad: &[f64],
    hess: &[f64],
    cfg: &GbdtConfig,
) -> (Tree, Vec<(Vec<u32>, f64)>) {
    let n = grad.len();
    let rows: Vec<u32> = (0..n as u32).collect();
    let hist = data.histogram(&rows, grad, hess);
    let g: f64 = grad.iter().sum();
    let h: f64 = hess.iter().sum();
    let best = best_split(data, &hist, g, h, n, cfg);
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut leaves = vec![LeafWork {
        node: 0,
        rows,
        hist,
        g,
        h,
        best,
    }];

    while leaves.len() < cfg.max_leaves {
        // Largest gain wins; ties go to the earliest-created leaf.
        let mut pick: Option<usize> = None;
        for (i, l) in leaves.iter().enumerate() {
            if let Some(s) = l.best {
                if pick.is_none_or(|p| s.gain > leaves[p].best.unwrap().gain) {
                    pick = Some(i);
                }
            }
        }
        let Some(pick) = pick else { break };
        let parent = leaves.remove(pick);
        let split = parent.best.unwrap();
        let col = &data.cols[split.feature];
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = parent
            .rows
            .iter()
            .partition(|&&r| u16::from(col[r as usize]) <= split.bin);

        // Build the smaller child's histogram and derive the sibling by subtraction.
        let (small_rows, small_is_left) = if left_rows.len() <= right_rows.len() {
            (&left_rows, true)
        } else {
            (&right_rows, false)
        };
        let small_hist = data.histogram(small_rows, grad, hess);
        let large_hist: Vec<HistBin> = parent
            .hist
            .iter()
            .zip(&small_hist)
            .map(|(p, s)| HistBin {
                g: p.g - s.g,
                h: p.h - s.h,
                count: p.count - s.count,
            })
            .collect();
        let (left_hist, right_hist) = if small_is_left {
            (small_hist, large_hist)
        } else {
            (large_hist, small_hist)
        };

        let sum = |rows: &[u32]| -> (f64, f64) {
            rows.iter().fold((0.0, 0.0), |(g, h), &r| {
                (g + grad[r as usize], h + hess[r as usize])
            })
        };
        let (gl, hl) = sum(&left_rows);
        let (gr, hr) = sum(&right_rows);

        let left_node = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        let right_node = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[parent.node] = Node::Split {
            feature: split.feature,
            bin: split.bin,
            default_left: true,
            left: left_node,
            right: right_node,
        };
        let left_best = best_split(data, &left_hist, gl, hl, left_rows.len(), cfg);
        let right_best = best_split(data, &right_hist, gr, hr, right_rows.len(), cfg);
        let left = LeafWork {
            node: left_node,
            rows: left_rows,
            hist: left_hist,
            g: gl,
            h: hl,
            best: left_best,
        };
        let right = LeafWork {
            node: right_node,
            rows: right_rows,
            hist: right_hist,
            g: gr,
            h: hr,
            best: right_best,
        };
        leaves.insert(pick, left);
        leaves.push(right);
    }

    let mut assignments = Vec::with_capacity(leaves.len());
    for l in leaves {
        let v = leaf_value(l.g, l.h, cfg.l2_reg);
        nodes[l.node] = Node::Leaf { value: v };
        assignments.push((l.rows, v));
    }
    (Tree { nodes }, assignments)
}

fn validate_xy(x: &Matrix, y: &[f64]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} targets",
            x.rows(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training targets".into()));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    Ok(())
}

/// Per-round training loss, recorded while fitting.
pub fn fit_gbdt_traced(x: &Matrix, y: &[f64], cfg: &GbdtConfig) -> Result<(GbdtModel, Vec<f64>)> {
    cfg.validate()?;
    validate_xy(x, y)?;
    if y.len() < cfg.min_samples_leaf || y.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} training rows, min_samples_leaf is {}",
            y.len(),
            cfg.min_samples_leaf
        )));
    }
    let n = y.len();
    let base_score = y.iter().sum::<f64>() / n as f64;
    let bin_edges: Vec<Vec<f64>> = (0..x.cols())
        .map(|f| {
            let col: Vec<f64> = x.iter_rows().map(|r| r[f]).collect();
            quantile_bins(&col, cfg.max_bins)
        })
        .collect();
    let data = BinnedData::new(x, &bin_edges);

    let loss_of = |pred: &[f64]| -> f64 {
        pred.iter()
            .zip(y)
            .map(|(p, t)| match cfg.loss {
                Loss::Squared => 0.5 * (p - t) * (p - t),
                Loss::Absolute => (p - t).abs(),
            })
            .sum::<f64>()
            / n as f64
    };

    let mut pred = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(cfg.num_trees);
    let mut trace = vec![loss_of(&pred)];
    for _ in 0..cfg.num_trees {
        gradients(cfg.loss, &pred, y, &mut grad, &mut hess);
        let (tree, assignments) = grow_tree(&data, &grad, &hess, cfg);
        for (rows, v) in assignments {
            for r in rows {
                pred[r as usize] += cfg.learning_rate * v;
            }
        }
        trees.push(tree);
        trace.push(loss_of(&pred));
    }
    Ok((
        GbdtModel {
            config: cfg.clone(),
            base_score,
            bin_edges,
            trees,
        },
        trace,
    ))
}

pub fn fit_gbdt(x: &Matrix, y: &[f64], cfg: &GbdtConfig) -> Result<GbdtModel> {
    fit_gbdt_traced(x, y, cfg).map(|(m, _)| m)
}

pub fn predict_gbdt(model: &GbdtModel, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != model.n_features() {
        return Err(Error::Shape(format!(
            "model expects {} features, got {}",
            model.n_features(),
            x.cols()
        )));
    }
    let lr = model.config.learning_rate;
    Ok(x.iter_rows()
        .map(|row| {
            let bins: Vec<u8> = row
                .iter()
                .zip(&model.bin_edges)
                .map(|(&v, e)| bin_of(e, v))
                .collect();
            let sum: f64 = model.trees.iter().map(|t| t.leaf_value(|f| bins[f])).sum();
            model.base_score + lr * sum
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col_matrix(xs: &[f64]) -> Matrix {
        Matrix::from_vec(xs.len(), 1, xs.to_vec()).unwrap()
    }

    #[test]
    fn bins() {
        assert!(quantile_bins(&[5.0, 5.0, 5.0], 255).is_empty());
        assert_eq!(quantile_bins(&[1.0, 2.0, 3.0, 4.0], 2), vec![2.5]);
        assert_eq!(quantile_bins(&[3.0, 1.0, 2.0, 1.0], 255), vec![1.5, 2.5]);
        let many: Vec<f64> = (0..1000).map(|i| (i % 400) as f64).collect();
        let e = quantile_bins(&many, 16);
        assert!(e.len() <= 15);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_forest_predicts_mean() {
        let cfg = GbdtConfig {
            num_trees: 0,
            min_samples_leaf: 1,
            ..Default::default()
        };
        let m = fit_gbdt(&col_matrix(&[1.0, 2.0, 3.0]), &[2.0, 2.0, 2.0], &cfg).unwrap();
        assert_eq!(
            predict_gbdt(&m, &col_matrix(&[-5.0, 9.0])).unwrap(),
            vec![2.0, 2.0]
        );
    }

    #[test]
    fn step_function_single_split() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64 - 100.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| if x >= 0.0 { 10.0 } else { 0.0 })
            .collect();
        let cfg = GbdtConfig {
            num_trees: 1,
            learning_rate: 1.0,
            l2_reg: 0.0,
            max_leaves: 2,
            ..Default::default()
        };
        let m = fit_gbdt(&col_matrix(&xs), &ys, &cfg).unwrap();
        assert_eq!(m.trees[0].leaf_count(), 2);
        assert_eq!(predict_gbdt(&m, &col_matrix(&xs)).unwrap(), ys);
        assert_eq!(
            predict_gbdt(&m, &col_matrix(&[-1.0, 1.0])).unwrap(),
            vec![0.0, 10.0]
        );
    }

    #[test]
    fn interpolates_distinct_points() {
        let xs: Vec<f64> = (0..50)
            .map(|i| (i as f64 * 0.37).sin() * 10.0 + i as f64)
            .collect();
        let ys: Vec<f64> = (0..50).map(|i| ((i * 7919) % 50) as f64 / 3.0).collect();
        let cfg = GbdtConfig {
            num_trees: 1,
            learning_rate: 1.0,
            l2_reg: 0.0,
            max_leaves: 64,
            min_samples_leaf: 1,
            ..Default::default()
        };
        let m = fit_gbdt(&col_matrix(&xs), &ys, &cfg).unwrap();
        let p = predict_gbdt(&m, &col_matrix(&xs)).unwrap();
        let mae: f64 = p.iter().zip(&ys).map(|(a, b)| (a - b).abs()).sum::<f64>() / 50.0;
        assert!(mae < 1e-6, "{mae}");
    }

    #[test]
    fn errors() {
        let cfg = GbdtConfig {
            min_samples_leaf: 1,
            ..Default::default()
        };
        assert!(matches!(
            fit_gbdt(&col_matrix(&[1.0, 2.0]), &[1.0], &cfg),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            fit_gbdt(&col_matrix(&[1.0, 2.0]), &[1.0, f64::NAN], &cfg),
            Err(Error::NonFinite(_))
        ));
        let m = fit_gbdt(&col_matrix(&[1.0, 2.0]), &[1.0, 2.0], &cfg).unwrap();
        assert!(predict_gbdt(&m, &Matrix::zeros(1, 2)).is_err());
        let bad = GbdtConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(matches!(
            fit_gbdt(
                &col_matrix(&[1.0, 2.0]),
                &[1.0, 2.0],
                &GbdtConfig::default()
            ),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn absolute_loss_moves_toward_median() {
        let xs = vec![0.0; 5];
        let ys = vec![0.0, 0.0, 0.0, 1.0, 100.0];
        let cfg = GbdtConfig {
            num_trees: 1000,
            learning_rate: 0.1,
            min_samples_leaf: 1,
            l2_reg: 0.0,
            loss: Loss::Absolute,
            ..Default::default()
        };
        let (m, trace) = fit_gbdt_traced(&col_matrix(&xs), &ys, &cfg).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);
        let p = predict_gbdt(&m, &col_matrix(&[0.0])).unwrap()[0];
        assert!(p.abs() < 0.2, "{p}");
    }
}
