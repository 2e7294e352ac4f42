//! Brute-force checkers used to validate bounds and radii on small instances.
//!
//! Everything here is deliberately independent of the propagation code: the
//! only shared pieces are the exact forward pass and the data types.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ndarray::{Array1, Array2};
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{ActivationKind, Affine, Layer, MaxPool, Network};
use crate::propagate::{LayerBounds, Norm, PerturbationBall};
use crate::relaxation::{activation_value, ScalarLine, ScalarRelaxation};

/// Default tolerance for layer-bound containment.
pub const CONTAINMENT_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub samples: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            grid: 1_000,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.grid == 0 {
            return Err(Error::InvalidArgument("oracle counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub oracle: String,
    pub seed: u64,
    pub samples: usize,
    pub violations: usize,
    pub max_violation: f64,
    pub details: Vec<serde_json::Value>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Radius scaled by `U^(1/n)` along a uniform direction.
    Uniform,
    /// A third each of interior points, surface points and vertices.
    BoundaryBiased,
}

/// `n` points of the ball, boundary-biased.
pub fn sample_ball(ball: &PerturbationBall, n: usize, seed: u64) -> Vec<Vec<f64>> {
    sample_ball_with(ball, n, seed, Sampling::BoundaryBiased)
}

pub fn sample_ball_with(
    ball: &PerturbationBall,
    n: usize,
    seed: u64,
    mode: Sampling,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let kind = match mode {
                Sampling::Uniform => 0,
                Sampling::BoundaryBiased => i % 3,
            };
            let offset = match kind {
                0 => {
                    let dim = ball.dim().max(1) as f64;
                    let r = ball.radius() * rng.random::<f64>().powf(1.0 / dim);
                    scaled_direction(&mut rng, ball, r)
                }
                1 => scaled_direction(&mut rng, ball, ball.radius()),
                _ => vertex(&mut rng, ball),
            };
            into_ball(ball, offset)
        })
        .collect()
}

/// Random point on the `l_p` sphere of radius `r` around the origin.
fn scaled_direction(rng: &mut ChaCha8Rng, ball: &PerturbationBall, r: f64) -> Vec<f64> {
    let n = ball.dim();
    let dir: Vec<f64> = match ball.norm() {
        Norm::LInf => {
            // One coordinate pinned to the face, the rest uniform.
            let face = rng.random_range(0..n.max(1));
            (0..n)
                .map(|i| {
                    if i == face {
                        if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                    } else {
                        rng.random_range(-1.0..=1.0)
                    }
                })
                .collect()
        }
        Norm::L2 => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        Norm::L1 => (0..n)
            .map(|_| {
                let e: f64 = rng.sample(Exp1);
                if rng.random_bool(0.5) { e } else { -e }
            })
            .collect(),
    };
    let len = ball.norm().of(&dir);
    if len == 0.0 {
        return vec![0.0; n];
    }
    dir.into_iter().map(|v| v * r / len).collect()
}

fn vertex(rng: &mut ChaCha8Rng, ball: &PerturbationBall) -> Vec<f64> {
    let n = ball.dim();
    let eps = ball.radius();
    let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    match ball.norm() {
        Norm::LInf => (0..n).map(|_| sign(rng) * eps).collect(),
        Norm::L1 => {
            let axis = rng.random_range(0..n.max(1));
            let s = sign(rng);
            (0..n).map(|i| if i == axis { s * eps } else { 0.0 }).collect()
        }
        Norm::L2 => {
            let scale = eps / (n.max(1) as f64).sqrt();
            (0..n).map(|_| sign(rng) * scale).collect()
        }
    }
}

/// `center + offset`, pulled back inside the ball if rounding pushed it out.
fn into_ball(ball: &PerturbationBall, mut offset: Vec<f64>) -> Vec<f64> {
    let len = ball.norm().of(&offset);
    if len > ball.radius() {
        let shrink = ball.radius() / len;
        offset.iter_mut().for_each(|v| *v *= shrink);
    }
    let mut point: Vec<f64> = ball.center().iter().zip(&offset).map(|(c, o)| c + o).collect();
    if let Norm::LInf = ball.norm() {
        for (p, c) in point.iter_mut().zip(ball.center()) {
            *p = p.clamp(c - ball.radius(), c + ball.radius());
        }
    }
    point
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub sample: usize,
    pub layer: usize,
    pub neuron: usize,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub excess: f64,
}

const MAX_DETAILS: usize = 20;

/// Evaluates the network on the ball center plus `n` sampled points and
/// reports every layer output that leaves its bounds by more than `tol`.
pub fn soundness_check(
    net: &Network,
    bounds: &[LayerBounds],
    ball: &PerturbationBall,
    n: usize,
    seed: u64,
    tol: f64,
) -> Result<OracleReport> {
    if bounds.len() != net.layers().len() {
        return Err(Error::Dimension(format!(
            "{} layer bounds for {} layers",
            bounds.len(),
            net.layers().len()
        )));
    }
    let mut points = vec![ball.center().to_vec()];
    points.extend(sample_ball(ball, n, seed));

    let per_point: Vec<(usize, f64, Vec<Violation>)> = points
        .par_iter()
        .enumerate()
        .map(|(sample, x)| {
            let trace = net.forward_trace(x)?;
            let mut count = 0;
            let mut worst: f64 = 0.0;
            let mut found = Vec::new();
            for (layer, (values, b)) in trace.iter().zip(bounds).enumerate() {
                for (neuron, &value) in values.iter().enumerate() {
                    let excess = (b.lower[neuron] - value).max(value - b.upper[neuron]);
                    if excess > tol {
                        count += 1;
                        worst = worst.max(excess);
                        if found.len() < MAX_DETAILS {
                            found.push(Violation {
                                sample,
                                layer,
                                neuron,
                                value,
                                lower: b.lower[neuron],
                                upper: b.upper[neuron],
                                excess,
                            });
                        }
                    }
                }
            }
            Ok((count, worst, found))
        })
        .collect::<Result<_>>()?;

    let violations = per_point.iter().map(|p| p.0).sum();
    let max_violation = per_point.iter().map(|p| p.1).fold(0.0, f64::max);
    let details = per_point
        .into_iter()
        .flat_map(|p| p.2)
        .take(MAX_DETAILS)
        .map(|v| serde_json::to_value(v).expect("plain data"))
        .collect();
    Ok(OracleReport {
        oracle: "soundness".into(),
        seed,
        samples: points.len(),
        violations,
        max_violation,
        details,
    })
}

/// Samples the ball and reports every point the network does not assign to
/// class `t`; zero violations are expected inside a certified radius.
pub fn prediction_check(
    net: &Network,
    ball: &PerturbationBall,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<OracleReport> {
    let mut points = vec![ball.center().to_vec()];
    points.extend(sample_ball(ball, n, seed));
    let outcomes: Vec<Option<(usize, f64)>> = points
        .par_iter()
        .map(|x| {
            let predicted = net.predict(x)?;
            if predicted == t {
                return Ok(None);
            }
            Ok(Some((predicted, -margin(net, x, t)?)))
        })
        .collect::<Result<_>>()?;
    let mut violations = 0;
    let mut max_violation: f64 = 0.0;
    let mut details = Vec::new();
    for (sample, outcome) in outcomes.into_iter().enumerate() {
        if let Some((predicted, deficit)) = outcome {
            violations += 1;
            max_violation = max_violation.max(deficit);
            if details.len() < MAX_DETAILS {
                details.push(json!({ "sample": sample, "predicted": predicted, "margin_deficit": deficit }));
            }
        }
    }
    Ok(OracleReport {
        oracle: "prediction".into(),
        seed,
        samples: points.len(),
        violations,
        max_violation,
        details,
    })
}

/// Search effort for [`empirical_attack_radius`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    /// Random ball samples tried per radius.
    pub samples: usize,
    /// Finite-difference descent steps per radius.
    pub steps: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub bisections: usize,
    pub seed: u64,
}

impl Default for AttackBudget {
    fn default() -> Self {
        Self {
            samples: 500,
            steps: 20,
            min_radius: 1e-4,
            max_radius: 100.0,
            bisections: 40,
            seed: 0,
        }
    }
}

/// `F_t(x) - max_{j != t} F_j(x)`; negative means the input is misclassified.
fn margin(net: &Network, x: &[f64], t: usize) -> Result<f64> {
    let out = net.evaluate(x)?;
    let best_other = out
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(out[t] - best_other)
}

fn is_adversarial(net: &Network, x: &[f64], t: usize) -> Result<bool> {
    Ok(net.predict(x)? != t)
}

fn fd_gradient(net: &Network, x: &[f64], t: usize, h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = margin(net, &probe, t)?;
        probe[i] = x[i] - h;
        let down = margin(net, &probe, t)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Steepest-descent step of length `eps` in the `l_p` geometry.
fn descent_step(grad: &[f64], eps: f64, norm: Norm) -> Vec<f64> {
    match norm {
        Norm::LInf => grad
            .iter()
            .map(|&g| if g == 0.0 { 0.0 } else { -eps * g.signum() })
            .collect(),
        Norm::L2 => {
            let len = Norm::L2.of(grad);
            if len == 0.0 {
                return vec![0.0; grad.len()];
            }
            grad.iter().map(|g| -eps * g / len).collect()
        }
        Norm::L1 => {
            let axis = grad
                .iter()
                .enumerate()
                .fold(0, |best, (i, g)| if g.abs() > grad[best].abs() { i } else { best });
            (0..grad.len())
                .map(|i| if i == axis { -eps * grad[i].signum() } else { 0.0 })
                .collect()
        }
    }
}

/// Some misclassified point of the ball of radius `eps`, if one is found.
fn find_adversarial(
    net: &Network,
    x0: &[f64],
    t: usize,
    norm: Norm,
    eps: f64,
    budget: &AttackBudget,
    salt: u64,
) -> Result<Option<Vec<f64>>> {
    let ball = PerturbationBall::new(x0.to_vec(), eps, norm)?;
    let h = (eps * 1e-3).max(1e-7);

    // Projected finite-difference descent from the center.
    let mut x = x0.to_vec();
    for _ in 0..budget.steps.max(1) {
        let grad = fd_gradient(net, &x, t, h)?;
        let step = descent_step(&grad, eps, norm);
        let candidate: Vec<f64> = x0.iter().zip(&step).map(|(c, s)| c + s).collect();
        if is_adversarial(net, &candidate, t)? {
            return Ok(Some(candidate));
        }
        // Half step from the current iterate, kept inside the ball.
        let half = descent_step(&grad, 0.5 * eps, norm);
        let moved: Vec<f64> = x.iter().zip(&half).map(|(a, s)| a + s).collect();
        let offset: Vec<f64> = moved.iter().zip(x0).map(|(a, c)| a - c).collect();
        x = into_ball(&ball, offset);
        if is_adversarial(net, &x, t)? {
            return Ok(Some(x));
        }
    }

    let seed = budget.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for p in sample_ball(&ball, budget.samples, seed) {
        if is_adversarial(net, &p, t)? {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

/// Smallest radius at which a misclassified point was exhibited: the actual
/// `l_p` distance of the closest adversarial point found. Returns
/// `f64::INFINITY` when none is found up to `budget.max_radius`.
pub fn empirical_attack_radius(
    net: &Network,
    x0: &[f64],
    t: usize,
    norm: Norm,
    budget: &AttackBudget,
) -> Result<f64> {
    if t >= net.output_dim() {
        return Err(Error::LabelOutOfRange {
            label: t,
            classes: net.output_dim(),
        });
    }
    let distance = |p: &[f64]| {
        let d: Vec<f64> = p.iter().zip(x0).map(|(a, b)| a - b).collect();
        norm.of(&d)
    };
    if is_adversarial(net, x0, t)? {
        return Ok(0.0);
    }

    let mut salt = 0u64;
    let mut lo = 0.0;
    let mut eps = budget.min_radius;
    let mut best = loop {
        salt += 1;
        if let Some(p) = find_adversarial(net, x0, t, norm, eps, budget, salt)? {
            break distance(&p);
        }
        lo = eps;
        if eps >= budget.max_radius {
            return Ok(f64::INFINITY);
        }
        eps = (eps * 2.0).min(budget.max_radius);
    };

    let mut hi = best;
    for _ in 0..budget.bisections {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        salt += 1;
        match find_adversarial(net, x0, t, norm, mid, budget, salt)? {
            Some(p) => {
                best = best.min(distance(&p));
                hi = mid.min(best);
            }
            None => lo = mid,
        }
    }
    Ok(best)
}

/// `∫_l^u (upper(x) - lower(x)) dx`; exact because both lines are affine.
pub fn relaxation_area(r: &ScalarRelaxation) -> f64 {
    line_integral(&r.upper, r.l, r.u) - line_integral(&r.lower, r.l, r.u)
}

/// `∫_l^u line(x) dx = (u - l) line((l + u) / 2)`.
pub fn line_integral(line: &ScalarLine, l: f64, u: f64) -> f64 {
    (u - l) * line.eval(0.5 * (l + u))
}

/// Largest amount by which a candidate line crosses `f` on a uniform grid of
/// `points + 1` nodes: the line should stay above `f` when `upper` is set and
/// below it otherwise. Non-positive means sound on the grid.
pub fn line_grid_violation(
    kind: ActivationKind,
    line: &ScalarLine,
    l: f64,
    u: f64,
    points: usize,
    upper: bool,
) -> f64 {
    (0..=points)
        .map(|i| {
            let x = if points == 0 { l } else { l + (u - l) * i as f64 / points as f64 };
            let gap = line.eval(x) - activation_value(kind, x);
            if upper { -gap } else { gap }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Worst grid violation of either line of a relaxation (non-positive when sound).
pub fn relaxation_grid_violation(kind: ActivationKind, r: &ScalarRelaxation, points: usize) -> f64 {
    line_grid_violation(kind, &r.upper, r.l, r.u, points, true)
        .max(line_grid_violation(kind, &r.lower, r.l, r.u, points, false))
}

/// Shape of a random test network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomNetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub kind: ActivationKind,
    /// Put a 2x2 max-pool over a `(2, 2, 2)` grid after the first activation;
    /// the first hidden width is then forced to 8.
    pub pool: bool,
    pub weight_scale: f64,
}

/// Dense network with weights uniform in `±weight_scale / sqrt(fan_in)` and
/// biases uniform in `±0.2`.
pub fn random_network(spec: &RandomNetSpec, rng: &mut impl Rng) -> Result<Network> {
    let mut layers = Vec::new();
    let mut width = spec.input_dim;
    for (index, &h) in spec.hidden.iter().enumerate() {
        let out = if index == 0 && spec.pool { 8 } else { h };
        layers.push(Layer::Affine(random_affine(rng, width, out, spec.weight_scale)?));
        layers.push(Layer::Activation(spec.kind));
        width = out;
        if index == 0 && spec.pool {
            let pool = MaxPool::grid((2, 2, 2), (2, 2), (2, 2))?;
            width = pool.output_dim();
            layers.push(Layer::MaxPool(pool));
        }
    }
    layers.push(Layer::Affine(random_affine(rng, width, spec.classes, spec.weight_scale)?));
    Network::new(spec.input_dim, layers)
}

fn random_affine(rng: &mut impl Rng, fan_in: usize, out: usize, scale: f64) -> Result<Affine> {
    let bound = scale / (fan_in.max(1) as f64).sqrt();
    let weight = Array2::from_shape_fn((out, fan_in), |_| rng.random_range(-bound..=bound));
    let bias = Array1::from_shape_fn(out, |_| rng.random_range(-0.2..=0.2));
    Affine::new(weight, bias)
}

/// Points of `[l, u]` where `f(x) - line(x)` can attain its extrema: the
/// endpoints, the points with `f'(x)` equal to the line slope, and the ReLU
/// kink.
fn critical_points(kind: ActivationKind, slope: f64, l: f64, u: f64) -> Vec<f64> {
    let mut xs = vec![l, u];
    match kind {
        ActivationKind::Relu => xs.push(0.0),
        ActivationKind::Sigmoid => {
            // s(1 - s) = a with s = sigmoid(x).
            if slope > 0.0 && slope < 0.25 {
                let root = (1.0 - 4.0 * slope).sqrt();
                for s in [(1.0 - root) / 2.0, (1.0 + root) / 2.0] {
                    xs.push((s / (1.0 - s)).ln());
                }
            }
        }
        ActivationKind::Tanh => {
            if slope > 0.0 && slope < 1.0 {
                let t = (1.0 - slope).sqrt().atanh();
                xs.extend([t, -t]);
            }
        }
        ActivationKind::Arctan => {
            if slope > 0.0 && slope < 1.0 {
                let t = (1.0 / slope - 1.0).sqrt();
                xs.extend([t, -t]);
            }
        }
    }
    xs.retain(|x| x.is_finite() && *x >= l && *x <= u);
    xs
}

/// Like [`line_grid_violation`] but exact up to rounding: checks every point
/// where the gap between line and activation can be extremal.
pub fn line_exact_violation(
    kind: ActivationKind,
    line: &ScalarLine,
    l: f64,
    u: f64,
    upper: bool,
) -> f64 {
    critical_points(kind, line.slope, l, u)
        .into_iter()
        .map(|x| {
            let gap = line.eval(x) - activation_value(kind, x);
            if upper { -gap } else { gap }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Nodes and weights of the `k`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; k];
    let mut weights = vec![0.0; k];
    for i in 0..k.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (k as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_k(x) and its derivative.
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=k {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = k as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[k - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[k - 1 - i] = w;
    }
    (nodes, weights)
}

/// Tensor-product Gauss-Legendre quadrature of `f` over the box `[l, u]`.
pub fn box_quadrature(f: impl Fn(&[f64]) -> f64, l: &[f64], u: &[f64], k: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(k);
    let n = l.len();
    let half: Vec<f64> = l.iter().zip(u).map(|(a, b)| 0.5 * (b - a)).collect();
    let mid: Vec<f64> = l.iter().zip(u).map(|(a, b)| 0.5 * (a + b)).collect();
    let jacobian: f64 = half.iter().product();
    let mut index = vec![0usize; n];
    let mut point = vec![0.0; n];
    let mut total = 0.0;
    loop {
        let mut w = jacobian;
        for d in 0..n {
            point[d] = mid[d] + half[d] * nodes[index[d]];
            w *= weights[index[d]];
        }
        total += w * f(&point);
        let mut d = 0;
        loop {
            if d == n {
                return total;
            }
            index[d] += 1;
            if index[d] < k {
                break;
            }
            index[d] = 0;
            d += 1;
        }
    }
}

/// Oracle report for a scalar relaxation grid check, in the common JSON shape.
pub fn relaxation_report(
    kind: ActivationKind,
    relaxations: &[ScalarRelaxation],
    config: &OracleConfig,
    tol: f64,
) -> OracleReport {
    let mut violations = 0;
    let mut max_violation: f64 = 0.0;
    let mut details = Vec::new();
    for (i, r) in relaxations.iter().enumerate() {
        let v = relaxation_grid_violation(kind, r, config.grid);
        if v > tol {
            violations += 1;
            max_violation = max_violation.max(v);
            if details.len() < MAX_DETAILS {
                details.push(json!({ "index": i, "l": r.l, "u": r.u, "excess": v }));
            }
        }
    }
    OracleReport {
        oracle: "relaxation-grid".into(),
        seed: config.seed,
        samples: relaxations.len(),
        violations,
        max_violation,
        details,
    }
}
