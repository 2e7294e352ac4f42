//! Symbolic bound propagation with backsubstitution to the input layer.
//!
//! For every layer `k` a pair of linear maps bounding the layer output is
//! pulled back through layers `k, k-1, ..., 0` until it is expressed in the
//! network input. Affine layers substitute exactly; activation and max-pool
//! layers substitute through their cached relaxations, choosing the upper or
//! lower line of each neuron from the sign of the incoming coefficient. The
//! resulting input-space maps are concretized over an `l_p` ball with the
//! dual norm.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maxpool::{maxpool_relax, PoolRelaxation};
use crate::model::{Affine, Layer, Network};
use crate::relaxation::{relax, AnchorPolicy, ScalarRelaxation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    LInf,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::L1, Norm::L2, Norm::LInf];

    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "1",
            Norm::L2 => "2",
            Norm::LInf => "inf",
        }
    }

    /// `||v||_p`.
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// The Hölder conjugate `q` with `1/p + 1/q = 1`.
    pub fn dual(self) -> Norm {
        match self {
            Norm::L1 => Norm::LInf,
            Norm::L2 => Norm::L2,
            Norm::LInf => Norm::L1,
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "infinity" => Ok(Norm::LInf),
            other => Err(Error::UnsupportedNorm(other.to_string())),
        }
    }
}

/// `x -> a x + b` over the variables of some reference layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearMap {
    pub fn new(a: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension(format!(
                "map has {} rows but {} intercepts",
                a.nrows(),
                b.len()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            a: Array2::eye(n),
            b: Array1::zeros(n),
        }
    }

    pub fn outputs(&self) -> usize {
        self.a.nrows()
    }

    pub fn reference_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.a.dot(&ArrayView1::from(x)).to_vec().into_iter().zip(&self.b).map(|(v, b)| v + b).collect()
    }
}

/// Concrete per-neuron interval of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LayerBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension("lower and upper differ in length".into()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(Error::InvalidArgument(format!(
                "neuron {i}: lower {} exceeds upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// True when `lower - tol <= x <= upper + tol` everywhere.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn contains_bounds(&self, other: &LayerBounds, tol: f64) -> bool {
        self.lower
            .iter()
            .zip(&other.lower)
            .all(|(a, b)| *a <= b + tol)
            && self.upper.iter().zip(&other.upper).all(|(a, b)| *a >= b - tol)
    }
}

/// The set `{x : ||x - center||_p <= radius}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBall {
    center: Vec<f64>,
    radius: f64,
    norm: Norm,
}

impl PerturbationBall {
    pub fn new(center: Vec<f64>, radius: f64, norm: Norm) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "radius must be finite and non-negative, got {radius}"
            )));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ball center".into()));
        }
        Ok(Self {
            center,
            radius,
            norm,
        })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        let diff: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        self.norm.of(&diff) <= self.radius + tol
    }

    /// Coordinate-wise box containing the ball, valid for every supported `p`.
    pub fn bounding_box(&self) -> LayerBounds {
        LayerBounds {
            lower: self.center.iter().map(|c| c - self.radius).collect(),
            upper: self.center.iter().map(|c| c + self.radius).collect(),
        }
    }
}

/// Relaxations chosen for one nonlinear layer, with the input interval they
/// were built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "lowercase")]
pub enum LayerRelaxation {
    Activation {
        input: LayerBounds,
        neurons: Vec<ScalarRelaxation>,
    },
    MaxPool {
        input: LayerBounds,
        windows: Vec<Vec<usize>>,
        pools: Vec<PoolRelaxation>,
    },
}

impl LayerRelaxation {
    pub fn input(&self) -> &LayerBounds {
        match self {
            LayerRelaxation::Activation { input, .. } | LayerRelaxation::MaxPool { input, .. } => {
                input
            }
        }
    }

    fn input_dim(&self) -> usize {
        self.input().len()
    }

    fn output_dim(&self) -> usize {
        match self {
            LayerRelaxation::Activation { neurons, .. } => neurons.len(),
            LayerRelaxation::MaxPool { pools, .. } => pools.len(),
        }
    }
}

/// Per-layer relaxations; `None` for affine layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelaxationCache {
    pub layers: Vec<Option<LayerRelaxation>>,
}

impl RelaxationCache {
    pub fn get(&self, layer: usize) -> Option<&LayerRelaxation> {
        self.layers.get(layer).and_then(Option::as_ref)
    }
}

/// `||row||_q` for the dual exponent of `p`.
pub fn dual_norm_row(row: &[f64], p: Norm) -> f64 {
    p.dual().of(row)
}

/// Concretizes input-space maps over the ball:
/// `u_i = eps ||A_U[i]||_q + A_U[i] x0 + B_U[i]` and symmetrically for the
/// lower map.
pub fn global_interval(
    upper: &LinearMap,
    lower: &LinearMap,
    ball: &PerturbationBall,
) -> Result<LayerBounds> {
    let n = ball.dim();
    if upper.reference_dim() != n || lower.reference_dim() != n {
        return Err(Error::Dimension(format!(
            "maps reference {} / {} variables, ball has {n}",
            upper.reference_dim(),
            lower.reference_dim()
        )));
    }
    if upper.outputs() != lower.outputs() {
        return Err(Error::Dimension("upper and lower maps differ in outputs".into()));
    }
    let x0 = ArrayView1::from(ball.center());
    let eps = ball.radius();
    let p = ball.norm();
    let concretize = |map: &LinearMap, sign: f64| -> Vec<f64> {
        map.a
            .outer_iter()
            .zip(map.b.iter())
            .map(|(row, b)| {
                let spread = if eps == 0.0 {
                    0.0
                } else {
                    eps * dual_norm_row(row.as_slice().expect("standard layout"), p)
                };
                sign * spread + row.dot(&x0) + b
            })
            .collect()
    };
    let mut hi = concretize(upper, 1.0);
    let mut lo = concretize(lower, -1.0);
    // Rounding can invert a zero-width interval by an ulp.
    for (l, u) in lo.iter_mut().zip(hi.iter_mut()) {
        if *l > *u {
            let mid = 0.5 * (*l + *u);
            *l = mid;
            *u = mid;
        }
    }
    Ok(LayerBounds {
        lower: lo,
        upper: hi,
    })
}

/// Exact composition through `x -> W x + b`: `A <- A W`, `B <- A b + B`.
pub fn substitute_affine(
    upper: &LinearMap,
    lower: &LinearMap,
    layer: &Affine,
) -> Result<(LinearMap, LinearMap)> {
    let compose = |map: &LinearMap| -> Result<LinearMap> {
        if map.reference_dim() != layer.output_dim() {
            return Err(Error::Dimension(format!(
                "map references {} variables, layer outputs {}",
                map.reference_dim(),
                layer.output_dim()
            )));
        }
        Ok(LinearMap {
            a: map.a.dot(&layer.weight),
            b: map.a.dot(&layer.bias) + &map.b,
        })
    };
    Ok((compose(upper)?, compose(lower)?))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Polarity {
    Upper,
    Lower,
}

fn substitute_relaxed(
    map: &LinearMap,
    relaxation: &LayerRelaxation,
    polarity: Polarity,
) -> LinearMap {
    let rows = map.outputs();
    let mut a = Array2::zeros((rows, relaxation.input_dim()));
    let mut b = map.b.clone();
    for r in 0..rows {
        let mut row_a = a.row_mut(r);
        let mut row_b = 0.0;
        for (i, &coef) in map.a.row(r).iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            // Positive coefficients keep the bound direction of the map.
            let use_upper = (coef > 0.0) == (polarity == Polarity::Upper);
            match relaxation {
                LayerRelaxation::Activation { neurons, .. } => {
                    let n = &neurons[i];
                    let line = if use_upper { n.upper } else { n.lower };
                    row_a[i] += coef * line.slope;
                    row_b += coef * line.intercept;
                }
                LayerRelaxation::MaxPool { windows, pools, .. } => {
                    let pool = &pools[i];
                    let window = &windows[i];
                    if use_upper {
                        for (&idx, &c) in window.iter().zip(&pool.coeffs) {
                            row_a[idx] += coef * c;
                        }
                        row_b += coef * pool.intercept;
                    } else {
                        row_a[window[pool.lower_index]] += coef;
                    }
                }
            }
        }
        b[r] += row_b;
    }
    LinearMap { a, b }
}

/// Pulls both maps back through a relaxed layer. A positive coefficient on
/// neuron `i` takes the upper line of `i` into the upper map and the lower
/// line into the lower map; a negative coefficient swaps them.
pub fn substitute_nonlinear(
    upper: &LinearMap,
    lower: &LinearMap,
    relaxation: &LayerRelaxation,
) -> Result<(LinearMap, LinearMap)> {
    for map in [upper, lower] {
        if map.reference_dim() != relaxation.output_dim() {
            return Err(Error::Dimension(format!(
                "map references {} variables, relaxed layer outputs {}",
                map.reference_dim(),
                relaxation.output_dim()
            )));
        }
    }
    Ok((
        substitute_relaxed(upper, relaxation, Polarity::Upper),
        substitute_relaxed(lower, relaxation, Polarity::Lower),
    ))
}

/// Pulls maps over the output of layer `from` back to the network input.
pub fn backsubstitute(
    net: &Network,
    cache: &RelaxationCache,
    mut upper: LinearMap,
    mut lower: LinearMap,
    from: usize,
) -> Result<(LinearMap, LinearMap)> {
    for index in (0..=from).rev() {
        (upper, lower) = match &net.layers()[index] {
            Layer::Affine(aff) => substitute_affine(&upper, &lower, aff)?,
            Layer::Activation(_) | Layer::MaxPool(_) => {
                let relaxation = cache.get(index).ok_or(Error::MissingRelaxation(index))?;
                substitute_nonlinear(&upper, &lower, relaxation)?
            }
            other => return Err(Error::NotNormalized(index, other.kind_name())),
        };
    }
    Ok((upper, lower))
}

/// Bounds of every layer's output over `ball`, computed layer by layer; each
/// nonlinear layer is relaxed on the interval produced by the full
/// backsubstitution of the layer before it. The last entry bounds the logits.
pub fn compute_all_bounds(
    net: &Network,
    ball: &PerturbationBall,
    policy: AnchorPolicy,
) -> Result<(Vec<LayerBounds>, RelaxationCache)> {
    if ball.dim() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "ball has dimension {}, network expects {}",
            ball.dim(),
            net.input_dim()
        )));
    }
    for (index, layer) in net.layers().iter().enumerate() {
        if matches!(layer, Layer::Conv2d(_) | Layer::BatchNorm(_)) {
            return Err(Error::NotNormalized(index, layer.kind_name()));
        }
    }

    let anchors = match policy {
        AnchorPolicy::Forward => Some(net.forward_trace(ball.center())?),
        AnchorPolicy::Midpoint => None,
    };
    let input_box = ball.bounding_box();
    let mut bounds: Vec<LayerBounds> = Vec::with_capacity(net.layers().len());
    let mut cache = RelaxationCache {
        layers: vec![None; net.layers().len()],
    };

    for (index, layer) in net.layers().iter().enumerate() {
        let input = bounds.last().unwrap_or(&input_box);
        let (upper, lower) = match layer {
            Layer::Affine(aff) => {
                let map = LinearMap::new(aff.weight.clone(), aff.bias.clone())?;
                if index == 0 {
                    (map.clone(), map)
                } else {
                    backsubstitute(net, &cache, map.clone(), map, index - 1)?
                }
            }
            Layer::Activation(kind) => {
                let preact: Option<&[f64]> = anchors.as_ref().map(|a| {
                    if index == 0 {
                        ball.center()
                    } else {
                        a[index - 1].as_slice()
                    }
                });
                let neurons = (0..input.len())
                    .map(|i| {
                        let x0 = preact.map_or(0.0, |p| p[i]);
                        relax(*kind, input.lower[i], input.upper[i], x0, policy)
                    })
                    .collect();
                cache.layers[index] = Some(LayerRelaxation::Activation {
                    input: input.clone(),
                    neurons,
                });
                let id = LinearMap::identity(input.len());
                backsubstitute(net, &cache, id.clone(), id, index)?
            }
            Layer::MaxPool(pool) => {
                let pools = pool
                    .windows
                    .iter()
                    .map(|w| {
                        let l: Vec<f64> = w.iter().map(|&i| input.lower[i]).collect();
                        let u: Vec<f64> = w.iter().map(|&i| input.upper[i]).collect();
                        maxpool_relax(&l, &u)
                    })
                    .collect();
                cache.layers[index] = Some(LayerRelaxation::MaxPool {
                    input: input.clone(),
                    windows: pool.windows.clone(),
                    pools,
                });
                let id = LinearMap::identity(pool.output_dim());
                backsubstitute(net, &cache, id.clone(), id, index)?
            }
            other => return Err(Error::NotNormalized(index, other.kind_name())),
        };
        bounds.push(global_interval(&upper, &lower, ball)?);
    }
    Ok((bounds, cache))
}
