//! Resolving command-line arguments into a network and a list of labelled inputs.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilin_core::model::{load_idx_labels, load_inputs, load_network, InputFormat, Network};

use crate::CommonArgs;

/// `PATH[:FORMAT]`.
#[derive(Clone, Debug)]
pub struct InputSpec {
    pub path: PathBuf,
    pub format: Option<InputFormat>,
}

impl FromStr for InputSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some((path, fmt)) = s.rsplit_once(':') {
            if let Ok(format) = fmt.parse::<InputFormat>() {
                return Ok(Self {
                    path: PathBuf::from(path),
                    format: Some(format),
                });
            }
        }
        Ok(Self {
            path: PathBuf::from(s),
            format: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSpec {
    Auto,
    Fixed(usize),
}

impl FromStr for LabelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LabelSpec::Auto);
        }
        s.parse()
            .map(LabelSpec::Fixed)
            .map_err(|_| format!("expected a class index or 'auto', got '{s}'"))
    }
}

/// Input indices: `n`, `a..b` (inclusive) or a comma-separated list of either.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSelection(pub Vec<usize>);

impl FromStr for IndexSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((a, b)) = part.split_once("..") {
                let b = b.strip_prefix('=').unwrap_or(b);
                let (a, b): (usize, usize) = (
                    a.trim().parse().map_err(|_| format!("bad range start in '{part}'"))?,
                    b.trim().parse().map_err(|_| format!("bad range end in '{part}'"))?,
                );
                if a > b {
                    return Err(format!("empty range '{part}'"));
                }
                out.extend(a..=b);
            } else {
                out.push(part.parse().map_err(|_| format!("bad index '{part}'"))?);
            }
        }
        if out.is_empty() {
            return Err("no indices given".into());
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self(out))
    }
}

/// One input to process, with its position in the input file.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub x: Vec<f64>,
    pub label: usize,
}

pub fn load_model(path: &Path) -> anyhow::Result<Network> {
    let net = load_network(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(net.normalize()?)
}

fn load_label_file(path: &Path) -> anyhow::Result<Vec<usize>> {
    let is_json = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading labels {}", path.display()))?;
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing labels {}", path.display()))?)
    } else {
        Ok(load_idx_labels(path)?)
    }
}

/// Loads the network and the selected, labelled inputs, sorted by index.
pub fn resolve(args: &CommonArgs) -> anyhow::Result<(Network, Vec<Sample>)> {
    let net = load_model(&args.model)?;
    let inputs = load_inputs(&args.input.path, args.input.format)
        .with_context(|| format!("loading inputs {}", args.input.path.display()))?;

    let mut indices = match &args.indices {
        Some(sel) => sel.0.clone(),
        None => (0..inputs.len()).collect(),
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= inputs.len()) {
        bail!("index {bad} out of range for {} inputs", inputs.len());
    }
    if let Some(n) = args.sample {
        if n > indices.len() {
            bail!("cannot sample {n} of {} inputs", indices.len());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let mut picked: Vec<usize> = sample(&mut rng, indices.len(), n)
            .into_iter()
            .map(|i| indices[i])
            .collect();
        picked.sort_unstable();
        indices = picked;
    }

    let file_labels = args.labels.as_deref().map(load_label_file).transpose()?;
    let mut samples = Vec::with_capacity(indices.len());
    for index in indices {
        let x = inputs[index].clone();
        if x.len() != net.input_dim() {
            bail!(
                "input {index} has {} entries, model expects {}",
                x.len(),
                net.input_dim()
            );
        }
        let label = match (&file_labels, args.label) {
            (Some(labels), _) => *labels
                .get(index)
                .with_context(|| format!("no label for input {index}"))?,
            (None, LabelSpec::Fixed(t)) => t,
            (None, LabelSpec::Auto) => net.predict(&x)?,
        };
        if label >= net.output_dim() {
            bail!("label {label} out of range for {} classes", net.output_dim());
        }
        samples.push(Sample { index, x, label });
    }
    Ok((net, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_selection() {
        assert_eq!("0..3".parse::<IndexSelection>().unwrap().0, vec![0, 1, 2, 3]);
        assert_eq!("5".parse::<IndexSelection>().unwrap().0, vec![5]);
        assert_eq!("4,1..2,4".parse::<IndexSelection>().unwrap().0, vec![1, 2, 4]);
        assert_eq!("2..=3".parse::<IndexSelection>().unwrap().0, vec![2, 3]);
        assert!("3..1".parse::<IndexSelection>().is_err());
        assert!("x".parse::<IndexSelection>().is_err());
    }

    #[test]
    fn input_spec_suffix() {
        let spec: InputSpec = "data/x.bin:idx".parse().unwrap();
        assert_eq!(spec.path, PathBuf::from("data/x.bin"));
        assert_eq!(spec.format, Some(InputFormat::Idx));
        let spec: InputSpec = "C:/data/x.json".parse().unwrap();
        assert_eq!(spec.format, None);
    }

    #[test]
    fn label_spec() {
        assert_eq!("auto".parse::<LabelSpec>().unwrap(), LabelSpec::Auto);
        assert_eq!("3".parse::<LabelSpec>().unwrap(), LabelSpec::Fixed(3));
        assert!("-1".parse::<LabelSpec>().is_err());
    }
}
