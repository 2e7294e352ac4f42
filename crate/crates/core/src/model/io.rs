//! Network files and input vectors.
//!
//! Networks are JSON documents:
//!
//! ```json
//! { "input_dim": 4,
//!   "layers": [
//!     { "type": "conv2d", "filters": [[[[...]]]], "bias": [...], "stride": 1,
//!       "padding": [0, 1], "input_shape": [1, 2, 2] },
//!     { "type": "batchnorm", "scale": [...], "shift": [...], "mean": [...],
//!       "variance": [...], "epsilon": 1e-5 },
//!     { "type": "activation", "kind": "relu" },
//!     { "type": "maxpool", "windows": [[0, 1], [2, 3]] },
//!     { "type": "affine", "weight": [[...]], "bias": [...] } ] }
//! ```
//!
//! A max-pool layer may give `input_shape`, `size` and `stride` instead of
//! explicit `windows`.
//!
//! Inputs are a JSON array (one vector, or an array of vectors), CSV rows, or
//! IDX image files whose bytes are scaled into `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use super::{ActivationKind, Affine, BatchNorm, Conv2d, Layer, MaxPool, Network};
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum Pair {
    Same(usize),
    Both([usize; 2]),
}

impl Pair {
    fn get(self) -> (usize, usize) {
        match self {
            Pair::Same(v) => (v, v),
            Pair::Both([a, b]) => (a, b),
        }
    }
}

fn one() -> Pair {
    Pair::Same(1)
}

fn zero() -> Pair {
    Pair::Same(0)
}

fn default_epsilon() -> f64 {
    1e-5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerFile {
    Affine {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Conv2d {
        filters: Vec<Vec<Vec<Vec<f64>>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        #[serde(default = "one")]
        stride: Pair,
        #[serde(default = "zero")]
        padding: Pair,
        input_shape: [usize; 3],
    },
    Activation {
        kind: ActivationKind,
    },
    Maxpool {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        windows: Option<Vec<Vec<usize>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_shape: Option<[usize; 3]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        size: Option<Pair>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<Pair>,
    },
    Batchnorm {
        scale: Vec<f64>,
        shift: Vec<f64>,
        mean: Vec<f64>,
        variance: Vec<f64>,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

/// Serialized form of a [`Network`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    input_dim: usize,
    layers: Vec<LayerFile>,
}

fn shape_err(layer: usize, detail: impl Into<String>) -> Error {
    Error::LayerDimension {
        layer,
        detail: detail.into(),
    }
}

fn rectangular<T>(rows: &[Vec<T>], layer: usize, what: &str) -> Result<usize> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(shape_err(layer, format!("{what} rows have different lengths")));
    }
    Ok(cols)
}

impl LayerFile {
    fn into_layer(self, index: usize) -> Result<Layer> {
        Ok(match self {
            LayerFile::Affine { weight, bias } => {
                let cols = rectangular(&weight, index, "weight")?;
                let rows = weight.len();
                if bias.len() != rows {
                    return Err(shape_err(
                        index,
                        format!("bias length {} differs from weight rows {rows}", bias.len()),
                    ));
                }
                let flat: Vec<f64> = weight.into_iter().flatten().collect();
                let weight = Array2::from_shape_vec((rows, cols), flat)
                    .map_err(|e| shape_err(index, e.to_string()))?;
                Layer::Affine(Affine::new(weight, Array1::from(bias))?)
            }
            LayerFile::Conv2d {
                filters,
                bias,
                stride,
                padding,
                input_shape,
            } => {
                let co = filters.len();
                let ci = filters.first().map_or(0, Vec::len);
                let kh = filters
                    .first()
                    .and_then(|f| f.first())
                    .map_or(0, Vec::len);
                let kw = filters
                    .first()
                    .and_then(|f| f.first())
                    .and_then(|f| f.first())
                    .map_or(0, Vec::len);
                let mut flat = Vec::with_capacity(co * ci * kh * kw);
                for plane in filters.iter().flatten() {
                    for row in plane {
                        flat.extend_from_slice(row);
                    }
                }
                let filters = Array4::from_shape_vec((co, ci, kh, kw), flat)
                    .map_err(|_| shape_err(index, "filters are not a regular 4-D array"))?;
                let bias = Array1::from(bias.unwrap_or_else(|| vec![0.0; co]));
                let [c, h, w] = input_shape;
                Layer::Conv2d(
                    Conv2d::new(filters, bias, stride.get(), padding.get(), (c, h, w))
                        .map_err(|e| shape_err(index, e.to_string()))?,
                )
            }
            LayerFile::Activation { kind } => Layer::Activation(kind),
            LayerFile::Maxpool {
                windows,
                input_shape,
                size,
                stride,
            } => {
                let pool = match (windows, input_shape, size) {
                    (Some(windows), None, None) => MaxPool::new(windows),
                    (None, Some([c, h, w]), Some(size)) => {
                        let size = size.get();
                        MaxPool::grid((c, h, w), size, stride.map_or(size, Pair::get))
                    }
                    _ => Err(Error::Shape(
                        "max-pool needs either `windows` or `input_shape` + `size`".into(),
                    )),
                };
                Layer::MaxPool(pool.map_err(|e| shape_err(index, e.to_string()))?)
            }
            LayerFile::Batchnorm {
                scale,
                shift,
                mean,
                variance,
                epsilon,
            } => Layer::BatchNorm(BatchNorm {
                scale,
                shift,
                mean,
                variance,
                epsilon,
            }),
        })
    }

    fn from_layer(layer: &Layer) -> Self {
        match layer {
            Layer::Affine(a) => LayerFile::Affine {
                weight: a.weight.outer_iter().map(|r| r.to_vec()).collect(),
                bias: a.bias.to_vec(),
            },
            Layer::Conv2d(c) => {
                let (co, ci, kh, _) = c.filters.dim();
                let filters = (0..co)
                    .map(|o| {
                        (0..ci)
                            .map(|i| {
                                (0..kh)
                                    .map(|y| c.filters.slice(ndarray::s![o, i, y, ..]).to_vec())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                let (ch, h, w) = c.input_shape;
                LayerFile::Conv2d {
                    filters,
                    bias: Some(c.bias.to_vec()),
                    stride: Pair::Both([c.stride.0, c.stride.1]),
                    padding: Pair::Both([c.padding.0, c.padding.1]),
                    input_shape: [ch, h, w],
                }
            }
            Layer::Activation(kind) => LayerFile::Activation { kind: *kind },
            Layer::MaxPool(p) => LayerFile::Maxpool {
                windows: Some(p.windows.clone()),
                input_shape: None,
                size: None,
                stride: None,
            },
            Layer::BatchNorm(bn) => LayerFile::Batchnorm {
                scale: bn.scale.clone(),
                shift: bn.shift.clone(),
                mean: bn.mean.clone(),
                variance: bn.variance.clone(),
                epsilon: bn.epsilon,
            },
        }
    }
}

impl NetworkFile {
    pub fn into_network(self) -> Result<Network> {
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.into_layer(i))
            .collect::<Result<Vec<_>>>()?;
        Network::new(self.input_dim, layers)
    }
}

impl From<&Network> for NetworkFile {
    fn from(net: &Network) -> Self {
        NetworkFile {
            input_dim: net.input_dim(),
            layers: net.layers().iter().map(LayerFile::from_layer).collect(),
        }
    }
}

/// Parses a network document. Schema errors report the offending field path
/// together with line and column.
pub fn parse_network(text: &str) -> Result<Network> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: NetworkFile = serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        Error::Parse {
            context: format!(
                "field `{path}` (line {}, column {})",
                inner.line(),
                inner.column()
            ),
            message: inner.to_string(),
        }
    })?;
    file.into_network()
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_network(&text)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&NetworkFile::from(net)).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    Json,
    Csv,
    Idx,
}

impl InputFormat {
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "json" => Some(InputFormat::Json),
            "csv" => Some(InputFormat::Csv),
            "idx" | "idx3-ubyte" | "ubyte" => Some(InputFormat::Idx),
            _ => None,
        }
    }
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(InputFormat::Json),
            "csv" => Ok(InputFormat::Csv),
            "idx" => Ok(InputFormat::Idx),
            other => Err(Error::InvalidArgument(format!("unknown input format '{other}'"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonInputs {
    One(Vec<f64>),
    Many(Vec<Vec<f64>>),
}

/// Loads one or more input vectors. The format is taken from `format`, or
/// from the file extension when absent.
pub fn load_inputs(path: impl AsRef<Path>, format: Option<InputFormat>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let format = format
        .or_else(|| InputFormat::from_extension(path))
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "cannot infer input format of {}; append :json, :csv or :idx",
                path.display()
            ))
        })?;
    let inputs = match format {
        InputFormat::Json => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: JsonInputs = serde_json::from_str(&text).map_err(|e| Error::Parse {
                context: format!("{} (line {}, column {})", path.display(), e.line(), e.column()),
                message: e.to_string(),
            })?;
            match parsed {
                JsonInputs::One(v) => vec![v],
                JsonInputs::Many(v) => v,
            }
        }
        InputFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .trim(csv::Trim::All)
                .from_path(path)
                .map_err(|e| Error::Parse {
                    context: path.display().to_string(),
                    message: e.to_string(),
                })?;
            let mut rows = Vec::new();
            for (line, record) in reader.records().enumerate() {
                let record = record.map_err(|e| Error::Parse {
                    context: format!("{} row {}", path.display(), line + 1),
                    message: e.to_string(),
                })?;
                let row = record
                    .iter()
                    .map(|cell| cell.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse {
                        context: format!("{} row {}", path.display(), line + 1),
                        message: e.to_string(),
                    })?;
                rows.push(row);
            }
            rows
        }
        InputFormat::Idx => read_idx_images(path)?,
    };
    for (i, v) in inputs.iter().enumerate() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("input {i}")));
        }
    }
    Ok(inputs)
}

fn read_idx_header(path: &Path, reader: &mut impl Read, magic: u32) -> Result<Vec<usize>> {
    let found = reader
        .read_u32::<BigEndian>()
        .map_err(|e| Error::io(path, e))?;
    if found != magic {
        return Err(Error::Parse {
            context: path.display().to_string(),
            message: format!("IDX magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    let ndims = (magic & 0xff) as usize;
    (0..ndims)
        .map(|_| {
            reader
                .read_u32::<BigEndian>()
                .map(|d| d as usize)
                .map_err(|e| Error::io(path, e))
        })
        .collect()
}

fn read_idx_images(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let dims = read_idx_header(path, &mut reader, IDX_IMAGES_MAGIC)?;
    let (count, pixels) = (dims[0], dims[1] * dims[2]);
    let mut bytes = vec![0u8; count * pixels];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .chunks(pixels.max(1))
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect())
}

/// Reads an IDX label file (magic `0x00000801`).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let dims = read_idx_header(path, &mut reader, IDX_LABELS_MAGIC)?;
    let mut bytes = vec![0u8; dims[0]];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes.into_iter().map(usize::from).collect())
}
