//! Network definition, normalization and exact evaluation.
//!
//! A [`Network`] is an ordered list of [`Layer`]s acting on flat vectors.
//! Convolutions and batch normalization are accepted on load, but every
//! bound computation runs on the normalized form produced by
//! [`Network::normalize`], which contains only affine, activation and
//! max-pool layers.

mod conv;
mod io;

pub use conv::{conv_to_affine, Conv2d};
pub use io::{
    load_idx_labels, load_inputs, load_network, parse_network, save_network, InputFormat,
    NetworkFile,
};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relaxation::activation_value;

/// A dense row-major tensor of finite 64-bit values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
    Arctan,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Relu,
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Arctan,
    ];

    pub const S_SHAPED: [ActivationKind; 3] = [
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Arctan,
    ];

    pub fn is_s_shaped(self) -> bool {
        !matches!(self, ActivationKind::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Arctan => "arctan",
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fully connected layer `x -> W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Dimension(format!(
                "weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .outer_iter()
            .zip(self.bias.iter())
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Max pooling over explicit index groups. Groups may overlap and need not
/// cover the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaxPool {
    pub windows: Vec<Vec<usize>>,
}

impl MaxPool {
    pub fn new(windows: Vec<Vec<usize>>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Shape("max-pool layer without windows".into()));
        }
        if windows.iter().any(Vec::is_empty) {
            return Err(Error::Shape("empty max-pool window".into()));
        }
        Ok(Self { windows })
    }

    /// Windows for a `size`-by-`stride` pool over a channel-major
    /// `(channels, height, width)` input; outputs are channel-major too.
    pub fn grid(
        input_shape: (usize, usize, usize),
        size: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let (c, h, w) = input_shape;
        let (kh, kw) = size;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
            return Err(Error::Shape(format!(
                "pool size {size:?} / stride {stride:?} incompatible with input {input_shape:?}"
            )));
        }
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let mut windows = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut group = Vec::with_capacity(kh * kw);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            group.push(ch * h * w + (oy * sh + ky) * w + ox * sw + kx);
                        }
                    }
                    windows.push(group);
                }
            }
        }
        Self::new(windows)
    }

    pub fn output_dim(&self) -> usize {
        self.windows.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.windows
            .iter()
            .map(|w| w.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Inference-mode batch normalization. Statistics have either one entry per
/// feature, or one entry per channel of a channel-major layout whose channel
/// count divides the width.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNorm {
    fn check(&self) -> Result<()> {
        let n = self.scale.len();
        if n == 0 || self.shift.len() != n || self.mean.len() != n || self.variance.len() != n {
            return Err(Error::Shape(
                "batchnorm scale/shift/mean/variance lengths differ".into(),
            ));
        }
        if self.epsilon < 0.0 || self.variance.iter().any(|&v| v + self.epsilon <= 0.0) {
            return Err(Error::InvalidArgument(
                "batchnorm variance + epsilon must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Per-element `(multiplier, offset)` such that `y = multiplier * x + offset`.
    pub fn elementwise(&self, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let channels = self.scale.len();
        if channels == 0 || !width.is_multiple_of(channels) {
            return Err(Error::Dimension(format!(
                "batchnorm with {channels} channels cannot act on width {width}"
            )));
        }
        let block = width / channels;
        let mut mul = Vec::with_capacity(width);
        let mut add = Vec::with_capacity(width);
        for c in 0..channels {
            let m = self.scale[c] / (self.variance[c] + self.epsilon).sqrt();
            let a = self.shift[c] - m * self.mean[c];
            mul.extend(std::iter::repeat_n(m, block));
            add.extend(std::iter::repeat_n(a, block));
        }
        Ok((mul, add))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Conv2d(Conv2d),
    Activation(ActivationKind),
    MaxPool(MaxPool),
    BatchNorm(BatchNorm),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Affine(_) => "affine",
            Layer::Conv2d(_) => "conv2d",
            Layer::Activation(k) => k.name(),
            Layer::MaxPool(_) => "maxpool",
            Layer::BatchNorm(_) => "batchnorm",
        }
    }

    fn output_dim(&self, input_dim: usize) -> std::result::Result<usize, String> {
        match self {
            Layer::Affine(a) => {
                if a.input_dim() != input_dim {
                    return Err(format!(
                        "weight expects {} inputs, previous layer provides {input_dim}",
                        a.input_dim()
                    ));
                }
                if a.bias.len() != a.output_dim() {
                    return Err(format!(
                        "bias length {} differs from weight rows {}",
                        a.bias.len(),
                        a.output_dim()
                    ));
                }
                Ok(a.output_dim())
            }
            Layer::Conv2d(c) => {
                if c.input_len() != input_dim {
                    return Err(format!(
                        "convolution expects {} inputs, previous layer provides {input_dim}",
                        c.input_len()
                    ));
                }
                c.output_len().map_err(|e| e.to_string())
            }
            Layer::Activation(_) => Ok(input_dim),
            Layer::MaxPool(p) => {
                if let Some(&bad) = p.windows.iter().flatten().find(|&&i| i >= input_dim) {
                    return Err(format!(
                        "max-pool index {bad} out of range for width {input_dim}"
                    ));
                }
                if p.windows.iter().any(Vec::is_empty) {
                    return Err("empty max-pool window".into());
                }
                Ok(p.output_dim())
            }
            Layer::BatchNorm(bn) => {
                bn.check().map_err(|e| e.to_string())?;
                bn.elementwise(input_dim).map_err(|e| e.to_string())?;
                Ok(input_dim)
            }
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Layer::Affine(a) => a.apply(x),
            Layer::Conv2d(c) => c.apply(x),
            Layer::Activation(k) => x.iter().map(|&v| activation_value(*k, v)).collect(),
            Layer::MaxPool(p) => p.apply(x),
            Layer::BatchNorm(bn) => {
                let (mul, add) = bn
                    .elementwise(x.len())
                    .expect("batchnorm validated at construction");
                x.iter()
                    .zip(mul.iter().zip(&add))
                    .map(|(v, (m, a))| m * v + a)
                    .collect()
            }
        }
    }

    fn check_finite(&self) -> bool {
        let all = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Layer::Affine(a) => {
                a.weight.iter().all(|x| x.is_finite()) && a.bias.iter().all(|x| x.is_finite())
            }
            Layer::Conv2d(c) => {
                c.filters.iter().all(|x| x.is_finite()) && c.bias.iter().all(|x| x.is_finite())
            }
            Layer::Activation(_) | Layer::MaxPool(_) => true,
            Layer::BatchNorm(bn) => {
                all(&bn.scale) && all(&bn.shift) && all(&bn.mean) && all(&bn.variance) && bn.epsilon.is_finite()
            }
        }
    }
}

/// A feed-forward classifier `R^{n_0} -> R^{n_K}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
    widths: Vec<usize>,
}

impl Network {
    /// Validates the dimension chain; errors name the offending layer index.
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Dimension("input dimension must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::Dimension("network has no layers".into()));
        }
        let mut widths = Vec::with_capacity(layers.len());
        let mut width = input_dim;
        for (index, layer) in layers.iter().enumerate() {
            if !layer.check_finite() {
                return Err(Error::NonFinite(format!("layer {index}")));
            }
            width = layer
                .output_dim(width)
                .map_err(|detail| Error::LayerDimension { layer: index, detail })?;
            if width == 0 {
                return Err(Error::LayerDimension {
                    layer: index,
                    detail: "layer produces no outputs".into(),
                });
            }
            widths.push(width);
        }
        Ok(Self {
            input_dim,
            layers,
            widths,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty network")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output width of every layer, in order.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Width of the vector entering layer `index`.
    pub fn layer_input_dim(&self, index: usize) -> usize {
        if index == 0 {
            self.input_dim
        } else {
            self.widths[index - 1]
        }
    }

    /// True when only affine, activation and max-pool layers remain.
    pub fn is_normalized(&self) -> bool {
        self.layers
            .iter()
            .all(|l| !matches!(l, Layer::Conv2d(_) | Layer::BatchNorm(_)))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self
            .forward_trace(x.values())?
            .pop()
            .expect("non-empty network");
        Tensor::vector(out)
    }

    /// Outputs of every layer for input `x`; entry `k` is the output of layer `k`.
    pub fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outputs.last().map_or(x, Vec::as_slice);
            let next = layer.apply(input);
            outputs.push(next);
        }
        Ok(outputs)
    }

    /// Final-layer output for `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.pop().expect("non-empty network"))
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.evaluate(x)?))
    }

    /// Replaces every convolution by its dense affine equivalent.
    pub fn expand_convolutions(&self) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(c) => layers.push(Layer::Affine(conv_to_affine(c).map_err(
                    |e| Error::LayerDimension {
                        layer: index,
                        detail: e.to_string(),
                    },
                )?)),
                other => layers.push(other.clone()),
            }
        }
        Network::new(self.input_dim, layers)
    }

    /// Merges each batch normalization into the affine layer right before it,
    /// or replaces it by a diagonal affine layer when no such layer exists.
    pub fn fold_batchnorm(&self) -> Network {
        let mut layers: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let Layer::BatchNorm(bn) = layer else {
                layers.push(layer.clone());
                continue;
            };
            let width = self.widths[index];
            let (mul, add) = bn
                .elementwise(width)
                .expect("batchnorm validated at construction");
            match layers.last_mut() {
                Some(Layer::Affine(prev)) => {
                    for (mut row, m) in prev.weight.outer_iter_mut().zip(&mul) {
                        row.mapv_inplace(|w| w * m);
                    }
                    for ((b, m), a) in prev.bias.iter_mut().zip(&mul).zip(&add) {
                        *b = *b * m + a;
                    }
                }
                _ => {
                    let weight = Array2::from_diag(&Array1::from(mul));
                    layers.push(Layer::Affine(Affine {
                        weight,
                        bias: Array1::from(add),
                    }));
                }
            }
        }
        Network::new(self.input_dim, layers).expect("folding preserves dimensions")
    }

    /// Convolution expansion followed by batch-norm folding.
    pub fn normalize(&self) -> Result<Network> {
        Ok(self.expand_convolutions()?.fold_batchnorm())
    }
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn affine(w: Array2<f64>, b: Array1<f64>) -> Layer {
        Layer::Affine(Affine::new(w, b).unwrap())
    }

    #[test]
    fn affine_forward_hand_value() {
        let net = Network::new(2, vec![affine(array![[1.0, -2.0]], array![0.5])]).unwrap();
        assert_eq!(net.evaluate(&[0.0, 0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn relu_and_sigmoid_forward() {
        let relu = Network::new(2, vec![Layer::Activation(ActivationKind::Relu)]).unwrap();
        assert_eq!(relu.evaluate(&[-1.0, 3.0]).unwrap(), vec![0.0, 3.0]);
        let sig = Network::new(1, vec![Layer::Activation(ActivationKind::Sigmoid)]).unwrap();
        assert_eq!(sig.evaluate(&[0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let net = Network::new(2, vec![Layer::Activation(ActivationKind::Tanh)]).unwrap();
        assert!(matches!(net.evaluate(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn dimension_error_names_layer() {
        let err = Network::new(
            2,
            vec![
                affine(Array2::eye(2), array![0.0, 0.0]),
                Layer::Activation(ActivationKind::Relu),
                affine(Array2::zeros((1, 3)), array![0.0]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::LayerDimension { layer: 2, .. }), "{err}");
    }

    #[test]
    fn maxpool_index_out_of_range() {
        let err = Network::new(
            3,
            vec![Layer::MaxPool(MaxPool::new(vec![vec![0, 3]]).unwrap())],
        )
        .unwrap_err();
        assert!(matches!(err, Error::LayerDimension { layer: 0, .. }));
    }

    #[test]
    fn overlapping_pool_windows() {
        let pool = MaxPool::new(vec![vec![0, 1], vec![1, 2], vec![2]]).unwrap();
        let net = Network::new(3, vec![Layer::MaxPool(pool)]).unwrap();
        assert_eq!(net.evaluate(&[1.0, 5.0, -2.0]).unwrap(), vec![5.0, 5.0, -2.0]);
    }

    #[test]
    fn pool_grid_windows() {
        let pool = MaxPool::grid((1, 4, 4), (2, 2), (2, 2)).unwrap();
        assert_eq!(pool.windows.len(), 4);
        assert_eq!(pool.windows[0], vec![0, 1, 4, 5]);
        assert_eq!(pool.windows[3], vec![10, 11, 14, 15]);
        let overlapping = MaxPool::grid((2, 3, 3), (2, 2), (1, 1)).unwrap();
        assert_eq!(overlapping.windows.len(), 8);
        assert_eq!(overlapping.windows[4], vec![9, 10, 12, 13]);
    }

    #[test]
    fn batchnorm_fold_into_previous_affine() {
        let bn = BatchNorm {
            scale: vec![2.0, 0.5],
            shift: vec![0.1, -0.3],
            mean: vec![1.0, -1.0],
            variance: vec![4.0, 0.25],
            epsilon: 1e-5,
        };
        let net = Network::new(
            2,
            vec![
                affine(array![[1.0, 2.0], [-1.0, 0.5]], array![0.2, -0.1]),
                Layer::BatchNorm(bn.clone()),
                Layer::Activation(ActivationKind::Tanh),
                Layer::BatchNorm(bn),
            ],
        )
        .unwrap();
        let folded = net.fold_batchnorm();
        assert!(folded.is_normalized());
        assert_eq!(folded.layers().len(), 3);
        for x in [[0.3, -0.7], [1.5, 2.0], [-4.0, 0.0]] {
            let a = net.evaluate(&x).unwrap();
            let b = folded.evaluate(&x).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::vector(vec![f64::NAN]).is_err());
    }
}
