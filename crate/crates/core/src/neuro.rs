//! Compact feedforward regressor (ReLU hidden layers, linear output) trained
//! on mean squared error with mini-batch Adam. Fills the neural tabular
//! model's slot in the two-model ensemble.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mftm::{fit_standardize, ColumnKind, FeatureMatrix, Standardizer};
use crate::numlin::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Weights uniform in +-sqrt(6 / fan_in); hidden biases 0.01, output bias 0.
    Uniform,
    /// All weights and hidden biases zero; the output bias is set.
    Zero { output_bias: f64 },
}

const HIDDEN_BIAS_INIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub init: Init,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            init: Init::Uniform,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Dense layer. `weights` is `n_in x n_out`, row-major by input unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward(&self, input: &[f64], rows: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(rows * self.n_out);
        for r in 0..rows {
            let start = out.len();
            out.extend_from_slice(&self.bias);
            let o = &mut out[start..];
            for (i, &a) in input[r * self.n_in..(r + 1) * self.n_in].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let w = &self.weights[i * self.n_out..(i + 1) * self.n_out];
                for (oj, wj) in o.iter_mut().zip(w) {
                    *oj += a * wj;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ColumnTransform {
    Identity,
    Standardize(Standardizer),
    /// `ln(1 + x)` followed by standardization, for heavy-tailed counts.
    Log1pStandardize(Standardizer),
}

impl ColumnTransform {
    fn apply(&self, x: f64) -> f64 {
        match self {
            ColumnTransform::Identity => x,
            ColumnTransform::Standardize(s) => s.apply(x),
            ColumnTransform::Log1pStandardize(s) => s.apply(x.max(0.0).ln_1p()),
        }
    }
}

/// Per-column conditioning applied before the network sees a row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputAdapter {
    /// Empty means pass-through.
    pub columns: Vec<ColumnTransform>,
}

impl InputAdapter {
    /// Standardizes numeric and embedding columns, log-standardizes count
    /// columns and leaves 0/1 columns untouched. Fitted on `fm` only.
    pub fn fit(fm: &FeatureMatrix) -> Result<Self> {
        let columns = (0..fm.n_cols())
            .map(|c| {
                let col = fm.column(c);
                Ok(match fm.column_kinds[c] {
                    ColumnKind::OneHot | ColumnKind::Indicator => ColumnTransform::Identity,
                    ColumnKind::Numeric | ColumnKind::Embedding => {
                        ColumnTransform::Standardize(fit_standardize(&col)?)
                    }
                    ColumnKind::Count => {
                        let logged: Vec<f64> = col.iter().map(|x| x.max(0.0).ln_1p()).collect();
                        ColumnTransform::Log1pStandardize(fit_standardize(&logged)?)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { columns })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if self.columns.is_empty() {
            return Ok(x.clone());
        }
        if self.columns.len() != x.cols() {
            return Err(Error::Shape(format!(
                "input adapter expects {} columns, got {}",
                self.columns.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (v, t) in out.row_mut(r).iter_mut().zip(&self.columns) {
                *v = t.apply(*v);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub input: InputAdapter,
    pub layers: Vec<Layer>,
}

struct Gradients {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MlpModel {
    /// Freshly initialized network for `n_inputs` features.
    pub fn init(n_inputs: usize, cfg: &MlpConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::init_with(n_inputs, cfg, &mut rng)
    }

    fn init_with(n_inputs: usize, cfg: &MlpConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![n_inputs];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let n_layers = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (n_in, n_out) = (w[0], w[1]);
                let (weights, bias) = match cfg.init {
                    Init::Uniform => {
                        let limit = (6.0 / n_in.max(1) as f64).sqrt();
                        let weights = (0..n_in * n_out)
                            .map(|_| rng.random_range(-limit..=limit))
                            .collect();
                        // Hidden units start slightly active so no preactivation sits
                        // exactly on the ReLU kink when a whole layer below is off.
                        let b = if k + 1 == n_layers {
                            0.0
                        } else {
                            HIDDEN_BIAS_INIT
                        };
                        (weights, vec![b; n_out])
                    }
                    Init::Zero { output_bias } => {
                        let b = if k + 1 == n_layers { output_bias } else { 0.0 };
                        (vec![0.0; n_in * n_out], vec![b; n_out])
                    }
                };
                Layer {
                    n_in,
                    n_out,
                    weights,
                    bias,
                }
            })
            .collect();
        Self {
            config: cfg.clone(),
            input: InputAdapter::default(),
            layers,
        }
    }

    /// Builds a model from explicit layers (no input conditioning).
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for (k, l) in layers.iter().enumerate() {
            if l.weights.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
                return Err(Error::Shape(format!("layer {k} has inconsistent shapes")));
            }
            if k > 0 && layers[k - 1].n_out != l.n_in {
                return Err(Error::Shape(format!("layer {k} does not chain")));
            }
        }
        if layers.last().is_none_or(|l| l.n_out != 1) {
            return Err(Error::Shape("last layer must have one output".into()));
        }
        Ok(Self {
            config: MlpConfig {
                hidden: layers[..layers.len() - 1].iter().map(|l| l.n_out).collect(),
                ..Default::default()
            },
            input: InputAdapter::default(),
            layers,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Network output for already-conditioned rows (row-major, `rows x n_inputs`).
    fn forward_raw(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, rows, &mut next);
            if k < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Mean squared error and its gradient over one batch.
    fn loss_and_grad(&self, x: &[f64], y: &[f64]) -> (f64, Gradients) {
        let rows = y.len();
        let last = self.layers.len() - 1;
        // activations[k] is the input of layer k; activations[last+1] is the output.
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(&activations[k], rows, &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(out);
        }
        let pred = &activations[last + 1];
        let n = rows as f64;
        let loss = pred
            .iter()
            .zip(y)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;

        let mut delta: Vec<f64> = pred.iter().zip(y).map(|(p, t)| 2.0 * (p - t) / n).collect();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
            vec![(Vec::new(), Vec::new()); self.layers.len()];
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &activations[k];
            let mut gw = vec![0.0; layer.n_in * layer.n_out];
            let mut gb = vec![0.0; layer.n_out];
            for r in 0..rows {
                let d = &delta[r * layer.n_out..(r + 1) * layer.n_out];
                for (b, dj) in gb.iter_mut().zip(d) {
                    *b += dj;
                }
                for (i, &a) in input[r * layer.n_in..(r + 1) * layer.n_in]
                    .iter()
                    .enumerate()
                {
                    if a == 0.0 {
                        continue;
                    }
                    let g = &mut gw[i * layer.n_out..(i + 1) * layer.n_out];
                    for (gj, dj) in g.iter_mut().zip(d) {
                        *gj += a * dj;
                    }
                }
            }
            if k > 0 {
                let mut prev = vec![0.0; rows * layer.n_in];
                for r in 0..rows {
                    let d = &delta[r * layer.n_out..(r + 1) * layer.n_out];
                    for i in 0..layer.n_in {
                        // ReLU derivative: the input activation is zero where the unit was off.
                        if input[r * layer.n_in + i] <= 0.0 {
                            continue;
                        }
                        let w = &layer.weights[i * layer.n_out..(i + 1) * layer.n_out];
                        prev[r * layer.n_in + i] = w.iter().zip(d).map(|(a, b)| a * b).sum();
                    }
                }
                delta = prev;
            }
            grads[k] = (gw, gb);
        }
        (loss, Gradients { layers: grads })
    }

    fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.weights.len() {
                return &mut l.weights[k];
            }
            k -= l.weights.len();
            if k < l.bias.len() {
                return &mut l.bias[k];
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

fn validate_xy(x: &Matrix, y: &[f64]) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::InsufficientData("no training rows".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} targets",
            x.rows(),
            y.len()
        )));
    }
    if y.iter().chain(x.as_slice()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("neural regressor training data".into()));
    }
    Ok(())
}

/// Trains on already-conditioned inputs. Returns the model and the full-data
/// MSE after each epoch when `trace` is set.
fn train(x: &Matrix, y: &[f64], cfg: &MlpConfig, trace: bool) -> Result<(MlpModel, Vec<f64>)> {
    cfg.validate()?;
    validate_xy(x, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::init_with(x.cols(), cfg, &mut rng);
    let n_params = model.param_count();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut curve = Vec::new();
    let d = x.cols();
    let mut bx = Vec::with_capacity(cfg.batch_size * d);
    let mut by = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(x.row(i));
                by.push(y[i]);
            }
            let (loss, grads) = model.loss_and_grad(&bx, &by);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            step += 1;
            let c1 = 1.0 - cfg.beta1.powi(step);
            let c2 = 1.0 - cfg.beta2.powi(step);
            let flat = grads
                .layers
                .iter()
                .flat_map(|(gw, gb)| gw.iter().chain(gb.iter()));
            for (((p, g), mi), vi) in model.params_mut().zip(flat).zip(&mut m).zip(&mut v) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.epsilon);
            }
        }
        if trace {
            let pred = model.forward_raw(x.as_slice(), x.rows());
            let mse = pred
                .iter()
                .zip(y)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / y.len() as f64;
            if !mse.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            curve.push(mse);
        }
    }
    if model.params_mut().any(|p| !p.is_finite()) {
        return Err(Error::Diverged { epoch: cfg.epochs });
    }
    Ok((model, curve))
}

/// Fits the network on `x` as given (no input conditioning).
pub fn fit_mlp(x: &Matrix, y: &[f64], cfg: &MlpConfig) -> Result<MlpModel> {
    train(x, y, cfg, false).map(|(m, _)| m)
}

/// Like [`fit_mlp`], also returning the training MSE after every epoch.
pub fn fit_mlp_traced(x: &Matrix, y: &[f64], cfg: &MlpConfig) -> Result<(MlpModel, Vec<f64>)> {
    train(x, y, cfg, true)
}

/// Fits the input adapter on `fm` and the network on the conditioned rows.
pub fn fit_mlp_features(fm: &FeatureMatrix, y: &[f64], cfg: &MlpConfig) -> Result<MlpModel> {
    let adapter = InputAdapter::fit(fm)?;
    let x = adapter.apply(&fm.values)?;
    let mut model = fit_mlp(&x, y, cfg)?;
    model.input = adapter;
    Ok(model)
}

pub fn predict_mlp(model: &MlpModel, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != model.n_inputs() {
        return Err(Error::Shape(format!(
            "model expects {} features, got {}",
            model.n_inputs(),
            x.cols()
        )));
    }
    let x = model.input.apply(x)?;
    Ok(model.forward_raw(x.as_slice(), x.rows()))
}

/// Analytic gradient of the batch MSE, flattened in parameter order
/// (per layer: weights then biases). Inputs bypass the adapter.
pub fn analytic_gradient(model: &MlpModel, x: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    validate_xy(x, y)?;
    let (_, g) = model.loss_and_grad(x.as_slice(), y);
    Ok(g.layers
        .into_iter()
        .flat_map(|(gw, gb)| gw.into_iter().chain(gb))
        .collect())
}

/// Max relative error between the analytic gradient and a central finite
/// difference with step 1e-5, over all parameters:
/// `|a - f| / max(1e-8, |a| + |f|)`.
pub fn grad_check(model: &MlpModel, x: &Matrix, y: &[f64]) -> Result<f64> {
    const H: f64 = 1e-5;
    let analytic = analytic_gradient(model, x, y)?;
    let mut probe = model.clone();
    let loss = |m: &MlpModel| m.loss_and_grad(x.as_slice(), y).0;
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(k);
        *probe.param_mut(k) = orig + H;
        let up = loss(&probe);
        *probe.param_mut(k) = orig - H;
        let down = loss(&probe);
        *probe.param_mut(k) = orig;
        let fd = (up - down) / (2.0 * H);
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let x = random_matrix(8, 3, 1);
        let y = vec![0.5; 8];
        let cfg = MlpConfig {
            epochs: 0,
            hidden: vec![4],
            seed: 9,
            ..Default::default()
        };
        let m = fit_mlp(&x, &y, &cfg).unwrap();
        assert_eq!(m.layers, MlpModel::init(3, &cfg).layers);
    }

    #[test]
    fn zero_init_predicts_bias() {
        let cfg = MlpConfig {
            hidden: vec![5, 3],
            init: Init::Zero { output_bias: 2.5 },
            ..Default::default()
        };
        let m = MlpModel::init(4, &cfg);
        let p = predict_mlp(&m, &random_matrix(6, 4, 2)).unwrap();
        assert_eq!(p, vec![2.5; 6]);
    }

    #[test]
    fn affine_model_is_exact() {
        let m = MlpModel::from_layers(vec![Layer {
            n_in: 2,
            n_out: 1,
            weights: vec![2.0, -3.0],
            bias: vec![0.5],
        }])
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0], [0.0, 2.0], [4.0, 0.0]]).unwrap();
        assert_eq!(predict_mlp(&m, &x).unwrap(), vec![-0.5, -5.5, 8.5]);
        assert!(predict_mlp(&m, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn affine_gradient_closed_form() {
        let m = MlpModel::from_layers(vec![Layer {
            n_in: 3,
            n_out: 1,
            weights: vec![0.3, -0.2, 0.7],
            bias: vec![0.1],
        }])
        .unwrap();
        let x = random_matrix(5, 3, 3);
        let y = [1.0, -1.0, 0.5, 2.0, 0.0];
        let pred = predict_mlp(&m, &x).unwrap();
        let g = analytic_gradient(&m, &x, &y).unwrap();
        for j in 0..3 {
            let closed: f64 = (0..5).map(|r| x[(r, j)] * (pred[r] - y[r])).sum::<f64>() * 2.0 / 5.0;
            assert!((g[j] - closed).abs() < 1e-8);
        }
        let gb: f64 = (0..5).map(|r| pred[r] - y[r]).sum::<f64>() * 2.0 / 5.0;
        assert!((g[3] - gb).abs() < 1e-8);
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_gradients() {
        let cfg = MlpConfig {
            hidden: vec![4],
            init: Init::Uniform,
            seed: 5,
            ..Default::default()
        };
        let mut m = MlpModel::init(3, &cfg);
        // make hidden units active for zero input
        m.layers[0].bias = vec![0.5; 4];
        let x = Matrix::zeros(4, 3);
        let g = analytic_gradient(&m, &x, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(g[..12].iter().all(|&v| v == 0.0));
        assert!(g[12..16].iter().any(|&v| v != 0.0));
        assert!(grad_check(&m, &x, &[1.0, 2.0, 3.0, 4.0]).unwrap() < 1e-4);
    }

    #[test]
    fn grad_check_fresh_model() {
        let cfg = MlpConfig {
            hidden: vec![6, 4],
            seed: 11,
            ..Default::default()
        };
        let m = MlpModel::init(3, &cfg);
        let x = random_matrix(5, 3, 12);
        let y = [0.3, -0.7, 1.1, 0.0, 2.0];
        assert!(grad_check(&m, &x, &y).unwrap() < 1e-4);
    }

    #[test]
    fn rows_permute_with_outputs() {
        let m = MlpModel::init(
            3,
            &MlpConfig {
                hidden: vec![8],
                ..Default::default()
            },
        );
        let x = random_matrix(6, 3, 4);
        let p = predict_mlp(&m, &x).unwrap();
        let perm = [5, 2, 0, 1, 4, 3];
        let px = predict_mlp(&m, &x.select_rows(&perm)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(px[k], p[i]);
        }
    }

    fn line_fixture() -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let raw: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = fit_standardize(&raw).unwrap();
        let xs: Vec<f64> = raw.iter().map(|&v| s.apply(v)).collect();
        let y: Vec<f64> = xs.iter().map(|v| 3.0 * v + 1.0).collect();
        (Matrix::from_vec(1000, 1, xs).unwrap(), y)
    }

    #[test]
    fn learns_a_line() {
        let (x, y) = line_fixture();
        let m = fit_mlp(
            &x,
            &y,
            &MlpConfig {
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let p = predict_mlp(&m, &x).unwrap();
        let mae = p.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 1000.0;
        assert!(mae < 0.05, "mae {mae}");
    }

    #[test]
    fn epoch_mse_non_increasing_on_line() {
        // At lr 1e-3 the default-width network overshoots in its first epochs;
        // the pinned regression uses a smaller step.
        let (x, y) = line_fixture();
        let cfg = MlpConfig {
            learning_rate: 1e-4,
            epochs: 60,
            seed: 3,
            ..Default::default()
        };
        let (_, curve) = fit_mlp_traced(&x, &y, &cfg).unwrap();
        for w in curve.windows(2) {
            assert!(w[1] <= w[0], "training MSE rose {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn adapter_conditions_columns() {
        use crate::mftm::{BlockSchema, BlockSpan, BlockTag};
        let values =
            Matrix::from_rows(&[[0.0, 1.0, 2020.0], [1e6, 0.0, 2022.0], [9.0, 1.0, 2024.0]])
                .unwrap();
        let fm = FeatureMatrix {
            values,
            schema: BlockSchema {
                blocks: vec![BlockSpan {
                    tag: BlockTag::Eu,
                    start: 0,
                    width: 3,
                }],
            },
            pids: vec![1, 2, 3],
            column_names: vec!["a".into(), "b".into(), "c".into()],
            column_kinds: vec![ColumnKind::Count, ColumnKind::OneHot, ColumnKind::Numeric],
        };
        let adapter = InputAdapter::fit(&fm).unwrap();
        let out = adapter.apply(&fm.values).unwrap();
        assert_eq!(out.column(1), vec![1.0, 0.0, 1.0]);
        assert_eq!(out.column(2), vec![-1.0, 0.0, 1.0]);
        let logged = out.column(0);
        assert!(logged.iter().sum::<f64>().abs() < 1e-12);
        assert!(logged[0] < logged[2] && logged[2] < logged[1]);
        assert!(adapter.apply(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn errors() {
        let cfg = MlpConfig::default();
        assert!(matches!(
            fit_mlp(&Matrix::zeros(0, 2), &[], &cfg),
            Err(Error::InsufficientData(_))
        ));
        assert!(fit_mlp(&Matrix::zeros(2, 2), &[1.0], &cfg).is_err());
        let huge = MlpConfig {
            learning_rate: 1e300,
            hidden: vec![],
            epochs: 5,
            ..Default::default()
        };
        let x = random_matrix(10, 2, 1);
        let y: Vec<f64> = (0..10).map(|i| 1e200 * i as f64).collect();
        assert!(matches!(
            fit_mlp(&x, &y, &huge),
            Err(Error::Diverged { .. })
        ));
    }
}
