//! Bounding planes for `max(x_1, ..., x_n)` over a box.
//!
//! The upper plane is chosen from the descending ordering of all interval
//! endpoints. Depending on the first three entries it is `x_i` itself (one
//! input dominates), or a plane through two opposite "space diagonal" corners
//! of the box built from the two largest upper endpoints and an anchor value.
//! The lower bound is the single input whose interval midpoint is largest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertex enumeration limit for [`verify_plane_sound`].
pub const MAX_VERIFIED_INPUTS: usize = 20;

const VERTEX_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub value: f64,
    pub neuron: usize,
    pub kind: EndpointKind,
}

/// All `2n` endpoints sorted from largest to smallest. Ties put upper
/// endpoints first, then the lower neuron index.
pub fn endpoint_ordering(l: &[f64], u: &[f64]) -> Vec<Endpoint> {
    debug_assert_eq!(l.len(), u.len());
    let mut seq: Vec<Endpoint> = (0..l.len())
        .flat_map(|i| {
            [
                Endpoint {
                    value: u[i],
                    neuron: i,
                    kind: EndpointKind::Upper,
                },
                Endpoint {
                    value: l[i],
                    neuron: i,
                    kind: EndpointKind::Lower,
                },
            ]
        })
        .collect();
    let rank = |k: EndpointKind| match k {
        EndpointKind::Upper => 0,
        EndpointKind::Lower => 1,
    };
    seq.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(rank(a.kind).cmp(&rank(b.kind)))
            .then(a.neuron.cmp(&b.neuron))
    });
    seq
}

/// How the upper plane was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum PoolCase {
    /// `u_i >= l_i >= ...`: input `i` always attains the max.
    Dominant { i: usize },
    /// `u_i >= u_j >= l_j >= ...` or `u_j >= u_i >= l_j >= ...`.
    PairLower { i: usize, j: usize },
    /// `u_i >= u_j >= u_k >= ...`.
    PairUpper { i: usize, j: usize, k: usize },
    /// A fixed (zero-width) input is among the top endpoints.
    FixedAnchor,
    /// Anchor retried further down the ordering after a failed vertex check.
    Retried,
    /// Constant plane at the largest upper endpoint.
    Constant,
}

impl PoolCase {
    /// The two inputs whose diagonal corners the plane passes through.
    pub fn diagonal_pair(&self) -> Option<(usize, usize)> {
        match *self {
            PoolCase::PairLower { i, j } | PoolCase::PairUpper { i, j, .. } => Some((i, j)),
            _ => None,
        }
    }
}

/// Upper plane `sum_i coeffs[i] * x_i + intercept` and lower selector `x_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRelaxation {
    pub coeffs: Vec<f64>,
    pub intercept: f64,
    pub lower_index: usize,
    pub case: PoolCase,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
}

impl PoolRelaxation {
    pub fn upper_at(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + self.intercept
    }

    pub fn lower_at(&self, x: &[f64]) -> f64 {
        x[self.lower_index]
    }
}

/// Plane `sum a_i (x_i - l_i) + b` in plain affine form.
fn to_affine(a: &[f64], b: f64, l: &[f64]) -> (Vec<f64>, f64) {
    let shift: f64 = a.iter().zip(l).map(|(a, l)| a * l).sum();
    (a.to_vec(), b - shift)
}

/// Plane through the diagonal corners of inputs `i` and `j` anchored at `c`:
/// `a_p = (u_p - c) / (u_p - l_p)` for `p` in `{i, j}`, `b = c`.
fn anchored_plane(l: &[f64], u: &[f64], pair: &[usize], c: f64) -> (Vec<f64>, f64) {
    let mut a = vec![0.0; l.len()];
    for &p in pair {
        a[p] = ((u[p] - c) / (u[p] - l[p])).clamp(0.0, 1.0);
    }
    to_affine(&a, c, l)
}

/// Case plane plus the anchor position it used in the filtered ordering.
fn case_plane(l: &[f64], u: &[f64], seq: &[Endpoint]) -> (PoolCase, Vec<usize>, usize) {
    let fixed = |e: &Endpoint| u[e.neuron] == l[e.neuron];
    let first = seq[0];
    if fixed(&first) {
        return (PoolCase::Constant, vec![], 0);
    }
    let i = first.neuron;
    let second = seq[1];
    if second.neuron == i {
        return (PoolCase::Dominant { i }, vec![i], 1);
    }
    if fixed(&second) {
        return (PoolCase::FixedAnchor, vec![i], 1);
    }
    let j = second.neuron;
    let third = seq[2];
    let case = if fixed(&third) {
        PoolCase::FixedAnchor
    } else {
        match third.kind {
            EndpointKind::Lower if third.neuron == j => PoolCase::PairLower { i, j },
            EndpointKind::Lower => PoolCase::PairLower { i: j, j: i },
            EndpointKind::Upper => PoolCase::PairUpper {
                i,
                j,
                k: third.neuron,
            },
        }
    };
    (case, vec![i, j], 2)
}

/// Neuron-wise tightest upper plane for `max` over the box `[l, u]`.
///
/// Zero-width inputs never receive a slope; they only act as anchors. Planes
/// for windows of at most [`MAX_VERIFIED_INPUTS`] inputs are checked at every
/// vertex; a failing plane is rebuilt with anchors further down the ordering
/// and, as a last resort, replaced by the constant `max u`.
pub fn maxpool_upper(l: &[f64], u: &[f64]) -> (Vec<f64>, f64, PoolCase) {
    assert_eq!(l.len(), u.len(), "interval vectors differ in length");
    assert!(!l.is_empty(), "empty pooling window");
    let n = l.len();
    let max_u = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    // A fixed input contributes a single entry to the ordering.
    let seq: Vec<Endpoint> = endpoint_ordering(l, u)
        .into_iter()
        .filter(|e| !(e.kind == EndpointKind::Lower && l[e.neuron] == u[e.neuron]))
        .collect();

    let constant = || (vec![0.0; n], max_u);
    let (case, pair, anchor_pos) = case_plane(l, u, &seq);
    if case == PoolCase::Constant {
        let (a, b) = constant();
        return (a, b, case);
    }
    let checked = n <= MAX_VERIFIED_INPUTS;
    let sound = |a: &[f64], b: f64| !checked || verify_plane_sound(a, b, l, u).unwrap_or(false);

    let (a, b) = anchored_plane(l, u, &pair, seq[anchor_pos].value);
    if sound(&a, b) {
        return (a, b, case);
    }
    for e in &seq[anchor_pos + 1..] {
        let (a, b) = anchored_plane(l, u, &pair, e.value);
        if sound(&a, b) {
            return (a, b, PoolCase::Retried);
        }
    }
    let (a, b) = constant();
    (a, b, PoolCase::Constant)
}

/// Index of the largest interval midpoint; ties go to the lowest index.
pub fn maxpool_lower(l: &[f64], u: &[f64]) -> usize {
    let mid: Vec<f64> = l.iter().zip(u).map(|(a, b)| 0.5 * (a + b)).collect();
    crate::model::argmax(&mid)
}

pub fn maxpool_relax(l: &[f64], u: &[f64]) -> PoolRelaxation {
    let (coeffs, intercept, case) = maxpool_upper(l, u);
    PoolRelaxation {
        coeffs,
        intercept,
        lower_index: maxpool_lower(l, u),
        case,
        l: l.to_vec(),
        u: u.to_vec(),
    }
}

/// Checks `upper(v) >= max(v) - 1e-9` at all `2^n` vertices of the box.
/// Since `max(x) - upper(x)` is convex this is exact soundness on the box.
pub fn verify_plane_sound(coeffs: &[f64], intercept: f64, l: &[f64], u: &[f64]) -> Result<bool> {
    let n = l.len();
    if n > MAX_VERIFIED_INPUTS {
        return Err(Error::WindowTooLarge(n));
    }
    if coeffs.len() != n || u.len() != n {
        return Err(Error::Dimension(format!(
            "plane has {} coefficients for a {n}-input box",
            coeffs.len()
        )));
    }
    let mut vertex = vec![0.0; n];
    for mask in 0u32..(1u32 << n) {
        for (i, v) in vertex.iter_mut().enumerate() {
            *v = if mask >> i & 1 == 1 { u[i] } else { l[i] };
        }
        let upper: f64 = coeffs.iter().zip(&vertex).map(|(a, v)| a * v).sum::<f64>() + intercept;
        let max = vertex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if upper < max - VERTEX_TOL {
            return Ok(false);
        }
    }
    Ok(true)
}
