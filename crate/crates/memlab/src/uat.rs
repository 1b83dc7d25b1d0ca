//! Single-hidden-layer sigmoidal-sum approximator: a fixed-parameter
//! function fitter used as the static baseline against the transformer's
//! input-dependent behavior. Fitting is full-batch gradient descent; the
//! returned model is the checkpoint with the best sup-norm error seen.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Activation, Tape, Tensor, TensorError, TensorId};

#[derive(Clone, Debug, PartialEq)]
pub enum UatError {
    Tensor(TensorError),
    Dimension { expected: usize, got: usize, what: &'static str },
    TooFewSamples { got: usize },
    /// Loss became non-finite at the given iteration.
    Diverged { iteration: usize },
    BadConfig { msg: String },
}

impl fmt::Display for UatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UatError::Tensor(e) => write!(f, "{e}"),
            UatError::Dimension { expected, got, what } => {
                write!(f, "{what}: expected dimension {expected}, got {got}")
            }
            UatError::TooFewSamples { got } => {
                write!(f, "fit needs at least 2 samples, got {got}")
            }
            UatError::Diverged { iteration } => {
                write!(f, "fit diverged (non-finite loss) at iteration {iteration}")
            }
            UatError::BadConfig { msg } => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for UatError {}

impl From<TensorError> for UatError {
    fn from(e: TensorError) -> Self {
        UatError::Tensor(e)
    }
}

/// One training sample: input point and target value.
pub type Sample = (Vec<f64>, Vec<f64>);

/// Parameters of the sigmoidal sum G(x) = Σ_j α_j σ(W_j·x + θ_j).
#[derive(Clone, Debug)]
pub struct UatModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub units: usize,
    pub activation: Activation,
    /// [units, input_dim]
    pub input_weights: Tensor,
    /// [units]
    pub biases: Tensor,
    /// [output_dim, units]
    pub output_weights: Tensor,
}

#[derive(Serialize, Deserialize)]
struct UatModelFile {
    n: usize,
    m: usize,
    #[serde(rename = "N")]
    units: usize,
    activation: String,
    #[serde(rename = "W")]
    w: Vec<f64>,
    theta: Vec<f64>,
    alpha: Vec<f64>,
}

impl UatModel {
    /// Seeded initialization: W and θ uniform in (-1, 1), α zero, so the
    /// initial model is the zero function.
    pub fn init(
        input_dim: usize,
        output_dim: usize,
        units: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<UatModel, UatError> {
        if units == 0 || input_dim == 0 || output_dim == 0 {
            return Err(UatError::BadConfig {
                msg: format!(
                    "dimensions must be positive: n={input_dim}, m={output_dim}, N={units}"
                ),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |count: usize| -> Vec<f64> {
            (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        Ok(UatModel {
            input_dim,
            output_dim,
            units,
            activation,
            input_weights: Tensor::new(vec![units, input_dim], uniform(units * input_dim))?
                .with_grad(),
            biases: Tensor::new(vec![units], uniform(units))?.with_grad(),
            output_weights: Tensor::zeros(vec![output_dim, units]).with_grad(),
        })
    }

    /// Embeds this model into one with `units >= self.units`: existing
    /// parameters are copied, padded units get fresh seeded W/θ and zero α,
    /// so the embedded model computes the same function.
    pub fn embed_in(&self, units: usize, seed: u64) -> Result<UatModel, UatError> {
        if units < self.units {
            return Err(UatError::BadConfig {
                msg: format!("cannot embed {} units into {units}", self.units),
            });
        }
        let mut larger = UatModel::init(self.input_dim, self.output_dim, units, self.activation, seed)?;
        for j in 0..self.units {
            for i in 0..self.input_dim {
                larger.input_weights.data[j * self.input_dim + i] =
                    self.input_weights.data[j * self.input_dim + i];
            }
            larger.biases.data[j] = self.biases.data[j];
        }
        for k in 0..self.output_dim {
            for j in 0..self.units {
                larger.output_weights.data[k * units + j] =
                    self.output_weights.data[k * self.units + j];
            }
        }
        Ok(larger)
    }

    /// Evaluates G(x) for a single input point.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, UatError> {
        if x.len() != self.input_dim {
            return Err(UatError::Dimension {
                expected: self.input_dim,
                got: x.len(),
                what: "input point",
            });
        }
        let out = self.eval_batch(std::slice::from_ref(&x.to_vec()))?;
        Ok(out.into_iter().next().expect("one row"))
    }

    /// Evaluates G on a batch of points via the tape primitives.
    pub fn eval_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, UatError> {
        let mut tape = Tape::new();
        let w = tape.leaf(&self.input_weights);
        let theta = tape.leaf(&self.biases);
        let alpha = tape.leaf(&self.output_weights);
        let out = self.forward(&mut tape, w, theta, alpha, xs)?;
        let data = tape.data(out);
        Ok(data
            .chunks_exact(self.output_dim)
            .map(|row| row.to_vec())
            .collect())
    }

    fn forward(
        &self,
        tape: &mut Tape,
        w: TensorId,
        theta: TensorId,
        alpha: TensorId,
        xs: &[Vec<f64>],
    ) -> Result<TensorId, UatError> {
        let p = xs.len();
        let mut flat = Vec::with_capacity(p * self.input_dim);
        for x in xs {
            if x.len() != self.input_dim {
                return Err(UatError::Dimension {
                    expected: self.input_dim,
                    got: x.len(),
                    what: "input point",
                });
            }
            flat.extend_from_slice(x);
        }
        let x = tape.leaf_owned(vec![p, self.input_dim], flat, false)?;
        let wt = tape.transpose(w)?;
        let pre = tape.matmul(x, wt)?;
        let pre = tape.add_row(pre, theta)?;
        let hidden = tape.activation(pre, self.activation)?;
        let at = tape.transpose(alpha)?;
        Ok(tape.matmul(hidden, at)?)
    }

    pub fn to_json(&self) -> String {
        let file = UatModelFile {
            n: self.input_dim,
            m: self.output_dim,
            units: self.units,
            activation: activation_name(self.activation).to_string(),
            w: self.input_weights.data.clone(),
            theta: self.biases.data.clone(),
            alpha: self.output_weights.data.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(json: &str) -> Result<UatModel, UatError> {
        let file: UatModelFile =
            serde_json::from_str(json).map_err(|e| UatError::BadConfig { msg: e.to_string() })?;
        let activation = match file.activation.as_str() {
            "sigmoid" => Activation::Sigmoid,
            "relu" => Activation::Relu,
            "gelu" => Activation::Gelu,
            other => {
                return Err(UatError::BadConfig {
                    msg: format!("unknown activation {other:?}"),
                })
            }
        };
        Ok(UatModel {
            input_dim: file.n,
            output_dim: file.m,
            units: file.units,
            activation,
            input_weights: Tensor::new(vec![file.units, file.n], file.w)?.with_grad(),
            biases: Tensor::new(vec![file.units], file.theta)?.with_grad(),
            output_weights: Tensor::new(vec![file.m, file.units], file.alpha)?.with_grad(),
        })
    }
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Sigmoid => "sigmoid",
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
    }
}

/// Step-size schedule for gradient descent.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { step: f64 },
    /// Cosine decay from `initial` to `floor` over the full iteration count.
    Cosine { initial: f64, floor: f64 },
}

impl StepSchedule {
    fn at(&self, iter: usize, max_iters: usize) -> f64 {
        match *self {
            StepSchedule::Constant { step } => step,
            StepSchedule::Cosine { initial, floor } => {
                let t = iter as f64 / max_iters.max(1) as f64;
                floor + 0.5 * (initial - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub schedule: StepSchedule,
    pub max_iters: usize,
    /// Early-stop threshold on grid sup error; fitting may end without
    /// reaching it (the density theorem guarantees existence, not that a
    /// given N suffices).
    pub target_sup: Option<f64>,
    pub seed: u64,
    /// Sup error is measured and a best-model snapshot taken every this
    /// many iterations.
    pub checkpoint_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            schedule: StepSchedule::Cosine { initial: 0.1, floor: 0.01 },
            max_iters: 100_000,
            target_sup: None,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<(), UatError> {
        if self.max_iters == 0 {
            return Err(UatError::BadConfig {
                msg: "max_iters must be at least 1".to_string(),
            });
        }
        if let Some(eps) = self.target_sup {
            if eps <= 0.0 {
                return Err(UatError::BadConfig {
                    msg: format!("target sup error must be positive, got {eps}"),
                });
            }
        }
        if self.checkpoint_every == 0 {
            return Err(UatError::BadConfig {
                msg: "checkpoint_every must be at least 1".to_string(),
            });
        }
        match self.schedule {
            StepSchedule::Constant { step } if step <= 0.0 => Err(UatError::BadConfig {
                msg: format!("step size must be positive, got {step}"),
            }),
            StepSchedule::Cosine { initial, floor } if initial <= 0.0 || floor < 0.0 => {
                Err(UatError::BadConfig {
                    msg: format!("cosine schedule invalid: initial={initial}, floor={floor}"),
                })
            }
            _ => Ok(()),
        }
    }
}

/// Result of a fit: the best checkpoint, its sup error on the sample grid,
/// and the loss recorded at every checkpoint.
pub struct FitResult {
    pub model: UatModel,
    pub sup_error: f64,
    pub checkpoint_losses: Vec<f64>,
    pub iterations_run: usize,
}

/// Fits a fresh seeded model of `units` hidden units to the samples.
pub fn uat_fit(samples: &[Sample], units: usize, config: &FitConfig) -> Result<FitResult, UatError> {
    let (n, m) = sample_dims(samples)?;
    let init = UatModel::init(n, m, units, Activation::Sigmoid, config.seed)?;
    uat_fit_from(init, samples, config)
}

/// Fits starting from an explicit initial model (used for warm starts and
/// unit-embedding experiments).
pub fn uat_fit_from(
    mut model: UatModel,
    samples: &[Sample],
    config: &FitConfig,
) -> Result<FitResult, UatError> {
    config.validate()?;
    let (n, m) = sample_dims(samples)?;
    if n != model.input_dim || m != model.output_dim {
        return Err(UatError::Dimension {
            expected: model.input_dim,
            got: n,
            what: "fit samples",
        });
    }
    let p = samples.len();
    let xs: Vec<Vec<f64>> = samples.iter().map(|(x, _)| x.clone()).collect();
    let mut targets = Vec::with_capacity(p * m);
    for (_, y) in samples {
        targets.extend_from_slice(y);
    }

    let mut best = model.clone();
    let mut best_sup = sup_error(&model, samples)?;
    let mut checkpoint_losses = Vec::new();
    let mut iterations_run = 0;

    for iter in 0..config.max_iters {
        let lr = config.schedule.at(iter, config.max_iters);
        let mut tape = Tape::new();
        let w = tape.leaf(&model.input_weights);
        let theta = tape.leaf(&model.biases);
        let alpha = tape.leaf(&model.output_weights);
        let out = model.forward(&mut tape, w, theta, alpha, &xs)?;
        let y = tape.leaf_owned(vec![p, m], targets.clone(), false)?;
        let loss = (|| -> Result<TensorId, TensorError> {
            let diff = tape.sub(out, y)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq)?;
            tape.scale(total, 1.0 / (p * m) as f64)
        })()
        .map_err(|e| match e {
            TensorError::NonFinite { .. } => UatError::Diverged { iteration: iter },
            other => UatError::Tensor(other),
        })?;
        let loss_value = tape.data(loss)[0];
        if !loss_value.is_finite() {
            return Err(UatError::Diverged { iteration: iter });
        }
        tape.backward(loss)?;

        descend(&mut model.input_weights, tape.grad(w).expect("w grad"), lr);
        descend(&mut model.biases, tape.grad(theta).expect("theta grad"), lr);
        descend(&mut model.output_weights, tape.grad(alpha).expect("alpha grad"), lr);
        iterations_run = iter + 1;

        if (iter + 1) % config.checkpoint_every == 0 || iter + 1 == config.max_iters {
            checkpoint_losses.push(loss_value);
            let sup = sup_error(&model, samples)?;
            if sup < best_sup {
                best_sup = sup;
                best = model.clone();
            }
            if let Some(target) = config.target_sup {
                if best_sup <= target {
                    break;
                }
            }
        }
    }

    Ok(FitResult {
        model: best,
        sup_error: best_sup,
        checkpoint_losses,
        iterations_run,
    })
}

fn descend(param: &mut Tensor, grad: &[f64], lr: f64) {
    for (p, &g) in param.data.iter_mut().zip(grad.iter()) {
        *p -= lr * g;
    }
}

fn sample_dims(samples: &[Sample]) -> Result<(usize, usize), UatError> {
    if samples.len() < 2 {
        return Err(UatError::TooFewSamples { got: samples.len() });
    }
    let n = samples[0].0.len();
    let m = samples[0].1.len();
    for (x, y) in samples {
        if x.len() != n {
            return Err(UatError::Dimension { expected: n, got: x.len(), what: "sample input" });
        }
        if y.len() != m {
            return Err(UatError::Dimension { expected: m, got: y.len(), what: "sample target" });
        }
    }
    Ok((n, m))
}

/// Max over samples of the max-norm of G(x) − f(x).
pub fn sup_error(model: &UatModel, samples: &[Sample]) -> Result<f64, UatError> {
    if samples.is_empty() {
        return Err(UatError::TooFewSamples { got: 0 });
    }
    let xs: Vec<Vec<f64>> = samples.iter().map(|(x, _)| x.clone()).collect();
    let outputs = model.eval_batch(&xs)?;
    let mut worst = 0.0_f64;
    for (out, (_, y)) in outputs.iter().zip(samples.iter()) {
        for (o, t) in out.iter().zip(y.iter()) {
            worst = worst.max((o - t).abs());
        }
    }
    Ok(worst)
}

/// Uniform 1-d sample grid for a scalar target function.
pub fn grid_samples(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> Vec<Sample> {
    (0..points)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            (vec![x], vec![f(x)])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    /// Independent scalar-loop evaluation of the sigmoidal sum.
    fn scalar_loop_eval(model: &UatModel, x: &[f64]) -> Vec<f64> {
        let n = model.input_dim;
        let mut out = vec![0.0; model.output_dim];
        for j in 0..model.units {
            let mut z = model.biases.data[j];
            for i in 0..n {
                z += model.input_weights.data[j * n + i] * x[i];
            }
            let s = match model.activation {
                Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                Activation::Relu => z.max(0.0),
                Activation::Gelu => Activation::Gelu.apply(z),
            };
            for (k, o) in out.iter_mut().enumerate() {
                *o += model.output_weights.data[k * model.units + j] * s;
            }
        }
        out
    }

    #[test]
    fn single_unit_at_origin_outputs_half() {
        let mut model = UatModel::init(1, 1, 1, Activation::Sigmoid, 0).unwrap();
        model.input_weights.data[0] = 0.0;
        model.biases.data[0] = 0.0;
        model.output_weights.data[0] = 1.0;
        for x in [-3.0, -0.5, 0.0, 2.0] {
            assert_eq!(model.eval(&[x]).unwrap()[0], 0.5);
        }
    }

    #[test]
    fn output_is_linear_in_alpha() {
        let model = UatModel::init(2, 3, 5, Activation::Sigmoid, 7).unwrap();
        let mut scaled = model.clone();
        let mut doubled = model.clone();
        for (i, v) in scaled.output_weights.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.3).sin();
        }
        for (d, s) in doubled
            .output_weights
            .data
            .iter_mut()
            .zip(scaled.output_weights.data.iter())
        {
            *d = 2.5 * s;
        }
        let x = vec![0.3, -0.8];
        let base = scaled.eval(&x).unwrap();
        let big = doubled.eval(&x).unwrap();
        for (b, s) in big.iter().zip(base.iter()) {
            assert!((b - 2.5 * s).abs() < 1e-12);
        }

        // Additivity: alpha1 + alpha2 evaluates to the sum of evaluations.
        let mut sum_model = model.clone();
        for (v, (a, b)) in sum_model.output_weights.data.iter_mut().zip(
            scaled
                .output_weights
                .data
                .iter()
                .zip(doubled.output_weights.data.iter()),
        ) {
            *v = a + b;
        }
        let lhs = sum_model.eval(&x).unwrap();
        for ((l, a), b) in lhs.iter().zip(base.iter()).zip(big.iter()) {
            assert!((l - (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_matches_scalar_loop_oracle() {
        let mut model = UatModel::init(3, 2, 9, Activation::Sigmoid, 11).unwrap();
        for (i, v) in model.output_weights.data.iter_mut().enumerate() {
            *v = ((i * 13 + 5) as f64 * 0.21).cos();
        }
        for case in 0..8 {
            let x: Vec<f64> = (0..3).map(|i| ((case * 3 + i) as f64 * 0.37).sin()).collect();
            let tape_out = model.eval(&x).unwrap();
            let oracle = scalar_loop_eval(&model, &x);
            for (a, b) in tape_out.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sup_error_reference_cases() {
        let model = UatModel::init(1, 1, 4, Activation::Sigmoid, 3).unwrap();
        // Against its own outputs, the error is exactly zero.
        let grid: Vec<Sample> = (0..21)
            .map(|i| {
                let x = -1.0 + 0.1 * i as f64;
                (vec![x], model.eval(&[x]).unwrap())
            })
            .collect();
        assert_eq!(sup_error(&model, &grid).unwrap(), 0.0);

        // Constant-0.5 model against f == 0.
        let mut half = UatModel::init(1, 1, 1, Activation::Sigmoid, 0).unwrap();
        half.input_weights.data[0] = 0.0;
        half.biases.data[0] = 0.0;
        half.output_weights.data[0] = 1.0;
        let zeros: Vec<Sample> = (0..11).map(|i| (vec![i as f64 * 0.1], vec![0.0])).collect();
        assert!((sup_error(&half, &zeros).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sup_error_agrees_with_brute_force() {
        let model = UatModel::init(1, 1, 6, Activation::Sigmoid, 19).unwrap();
        let samples = grid_samples(|x| x * x, -1.0, 1.0, 51);
        let sup = sup_error(&model, &samples).unwrap();
        let mut brute = 0.0_f64;
        for (x, y) in &samples {
            let out = model.eval(x).unwrap();
            brute = brute.max((out[0] - y[0]).abs());
        }
        assert!((sup - brute).abs() < 1e-15);
    }

    #[test]
    fn sup_error_dominates_rms() {
        let model = UatModel::init(1, 1, 6, Activation::Sigmoid, 23).unwrap();
        let samples = grid_samples(|x| (2.0 * x).cos(), -1.0, 1.0, 41);
        let sup = sup_error(&model, &samples).unwrap();
        let mut sq = 0.0;
        for (x, y) in &samples {
            let out = model.eval(x).unwrap();
            sq += (out[0] - y[0]) * (out[0] - y[0]);
        }
        let rms = (sq / samples.len() as f64).sqrt();
        assert!(sup >= rms);
    }

    #[test]
    fn fit_constant_target_is_nearly_exact() {
        let samples = grid_samples(|_| 0.5, -1.0, 1.0, 41);
        let config = FitConfig {
            max_iters: 5_000,
            target_sup: Some(5e-4),
            ..FitConfig::default()
        };
        let result = uat_fit(&samples, 1, &config).unwrap();
        assert!(result.sup_error < 1e-3, "sup {}", result.sup_error);
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        let one = vec![(vec![0.0], vec![0.0])];
        assert!(matches!(
            uat_fit(&one, 4, &FitConfig::default()),
            Err(UatError::TooFewSamples { got: 1 })
        ));
        let samples = grid_samples(|x| x, -1.0, 1.0, 5);
        let bad = FitConfig { max_iters: 0, ..FitConfig::default() };
        assert!(matches!(
            uat_fit(&samples, 4, &bad),
            Err(UatError::BadConfig { .. })
        ));
    }

    #[test]
    fn fit_step_function_away_from_transition_band() {
        let samples = grid_samples(|x| if x < 0.0 { 0.0 } else { 1.0 }, -1.0, 1.0, 201);
        // Steepening the sigmoids needs a sustained step size; cosine decay
        // stalls the late phase here.
        let config = FitConfig {
            schedule: StepSchedule::Constant { step: 1.5 },
            max_iters: 400_000,
            target_sup: None,
            seed: 0,
            checkpoint_every: 2_000,
        };
        let result = uat_fit(&samples, 8, &config).unwrap();
        for (x, y) in &samples {
            if x[0].abs() < 0.025 {
                continue; // transition band
            }
            let out = result.model.eval(x).unwrap();
            assert!(
                (out[0] - y[0]).abs() < 0.2,
                "error {} at x={}",
                (out[0] - y[0]).abs(),
                x[0]
            );
        }
    }

    #[test]
    fn fit_loss_is_non_increasing_with_small_constant_step() {
        let samples = grid_samples(|x| (std::f64::consts::PI * x).sin(), -1.0, 1.0, 101);
        let config = FitConfig {
            schedule: StepSchedule::Constant { step: 0.05 },
            max_iters: 2_000,
            target_sup: None,
            seed: 0,
            checkpoint_every: 100,
        };
        let result = uat_fit(&samples, 16, &config).unwrap();
        for pair in result.checkpoint_losses.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "loss increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn embedding_into_doubled_units_never_hurts() {
        let samples = grid_samples(|x| (std::f64::consts::PI * x).sin(), -1.0, 1.0, 101);
        let config = FitConfig {
            max_iters: 4_000,
            ..FitConfig::default()
        };
        let small = uat_fit(&samples, 8, &config).unwrap();
        let embedded = small.model.embed_in(16, 99).unwrap();
        // The embedded model computes the same function (padded alpha = 0).
        assert!(
            (sup_error(&embedded, &samples).unwrap() - small.sup_error).abs() < 1e-12
        );
        let refit = uat_fit_from(embedded, &samples, &config).unwrap();
        assert!(
            refit.sup_error <= small.sup_error,
            "doubling units worsened sup: {} -> {}",
            small.sup_error,
            refit.sup_error
        );
    }

    #[test]
    fn sigmoid_sum_loss_passes_grad_check() {
        let model = UatModel::init(1, 1, 4, Activation::Sigmoid, 5).unwrap();
        let samples = grid_samples(|x| x * 0.5, -1.0, 1.0, 9);
        let xs: Vec<Vec<f64>> = samples.iter().map(|(x, _)| x.clone()).collect();
        let targets: Vec<f64> = samples.iter().map(|(_, y)| y[0]).collect();
        let mut alpha = model.output_weights.clone();
        for (i, v) in alpha.data.iter_mut().enumerate() {
            *v = (i as f64 + 1.0) * 0.2;
        }
        let inputs = [model.input_weights.clone(), model.biases.clone(), alpha];
        let err = grad_check(
            |tape, ids| {
                let x_flat: Vec<f64> = xs.iter().flatten().copied().collect();
                let x = tape.leaf_owned(vec![xs.len(), 1], x_flat, false)?;
                let wt = tape.transpose(ids[0])?;
                let pre = tape.matmul(x, wt)?;
                let pre = tape.add_row(pre, ids[1])?;
                let hidden = tape.activation(pre, Activation::Sigmoid)?;
                let at = tape.transpose(ids[2])?;
                let out = tape.matmul(hidden, at)?;
                let y = tape.leaf_owned(vec![targets.len(), 1], targets.clone(), false)?;
                let diff = tape.sub(out, y)?;
                let sq = tape.mul(diff, diff)?;
                let total = tape.sum(sq)?;
                tape.scale(total, 1.0 / targets.len() as f64)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "grad check error {err}");
    }

    #[test]
    fn model_json_roundtrip() {
        let model = UatModel::init(2, 1, 3, Activation::Sigmoid, 77).unwrap();
        let json = model.to_json();
        let back = UatModel::from_json(&json).unwrap();
        assert_eq!(back.input_weights.data, model.input_weights.data);
        assert_eq!(back.biases.data, model.biases.data);
        assert_eq!(back.output_weights.data, model.output_weights.data);
        assert!(json.contains("\"N\"") && json.contains("\"theta\""));
    }
}
