//! Linear upper and lower bounds for scalar activations over an interval.
//!
//! S-shaped activations (sigmoid, tanh, arctan) are convex left of zero and
//! concave right of it. Their bounding lines are picked from tangents at the
//! anchor `m`, tangents that pass through an interval endpoint, or the
//! endpoint chord, according to where `m` lies and how the chord slope
//! compares to the derivative at `l`, `m` and `u`. Each returned line either
//! is tangent to `f` at the anchor or touches `f` at two points on both sides
//! of it, which makes its value at the anchor minimal among sound lines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ActivationKind;

/// Intervals narrower than this are treated as a single point.
pub const DEGENERATE_WIDTH: f64 = 1e-9;

const BISECTION_MAX_ITERS: usize = 200;

/// Acceptance threshold for the tangent-point residual.
pub const TANGENT_RESIDUAL_TOL: f64 = 1e-10;

pub fn activation_value(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::Relu => x.max(0.0),
        ActivationKind::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        ActivationKind::Tanh => x.tanh(),
        ActivationKind::Arctan => x.atan(),
    }
}

/// First derivative. ReLU uses 0 at the kink.
pub fn activation_slope(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        // Both forms avoid the cancellation in 1 - f^2 far from the origin.
        ActivationKind::Sigmoid => {
            let e = (-x.abs()).exp();
            e / ((1.0 + e) * (1.0 + e))
        }
        ActivationKind::Tanh => {
            let c = x.cosh();
            1.0 / (c * c)
        }
        ActivationKind::Arctan => 1.0 / (1.0 + x * x),
    }
}

/// The line `x -> slope * x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarLine {
    pub slope: f64,
    pub intercept: f64,
}

impl ScalarLine {
    pub fn new(slope: f64, intercept: f64) -> Self {
        Self { slope, intercept }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(0.0, value)
    }

    /// Line with the given slope through `(x, y)`.
    pub fn through(x: f64, y: f64, slope: f64) -> Self {
        Self::new(slope, y - slope * x)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Which construction produced a bounding line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LineRule {
    /// Interval too narrow to distinguish from a point.
    Constant,
    /// Tangent at the anchor `m`.
    TangentAtAnchor,
    /// Tangent at `point` whose extension passes through `(l, f(l))`.
    TangentThroughLower { point: f64 },
    /// Tangent at `point` whose extension passes through `(u, f(u))`.
    TangentThroughUpper { point: f64 },
    /// Chord through both endpoints.
    Chord,
    Zero,
    Identity,
}

impl LineRule {
    /// Same construction, ignoring the solved tangent location.
    pub fn same_branch(&self, other: &LineRule) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarRelaxation {
    pub lower: ScalarLine,
    pub upper: ScalarLine,
    pub lower_rule: LineRule,
    pub upper_rule: LineRule,
    pub l: f64,
    pub u: f64,
    /// Anchor, always inside `[l, u]`.
    pub anchor: f64,
}

/// Where the bounding lines of an activation are centred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorPolicy {
    /// The pre-activation value at the unperturbed input.
    #[serde(alias = "forward_value")]
    Forward,
    /// The interval midpoint.
    Midpoint,
}

impl AnchorPolicy {
    pub fn name(self) -> &'static str {
        match self {
            AnchorPolicy::Forward => "forward",
            AnchorPolicy::Midpoint => "midpoint",
        }
    }
}

impl std::fmt::Display for AnchorPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AnchorPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forward" | "forward_value" | "forwardvalue" => Ok(AnchorPolicy::Forward),
            "midpoint" => Ok(AnchorPolicy::Midpoint),
            other => Err(Error::InvalidArgument(format!(
                "unknown anchor policy '{other}' (expected forward or midpoint)"
            ))),
        }
    }
}

/// `f'(d)(d - l) - (f(d) - f(l))`; zero at the tangent point through `l`.
pub fn lower_tangent_residual(kind: ActivationKind, l: f64, d: f64) -> f64 {
    activation_slope(kind, d) * (d - l) - (activation_value(kind, d) - activation_value(kind, l))
}

/// `f'(d)(d - u) - (f(d) - f(u))`; zero at the tangent point through `u`.
pub fn upper_tangent_residual(kind: ActivationKind, u: f64, d: f64) -> f64 {
    activation_slope(kind, d) * (d - u) - (activation_value(kind, d) - activation_value(kind, u))
}

/// Bisection for a root of a decreasing `g` on `[lo, hi]` with `g(lo) > 0 > g(hi)`.
fn bisect_decreasing(mut lo: f64, mut hi: f64, g: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..BISECTION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = g(mid);
        if v == 0.0 {
            return mid;
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if g(lo).abs() <= g(hi).abs() {
        lo
    } else {
        hi
    }
}

fn chord_slope(kind: ActivationKind, l: f64, u: f64) -> f64 {
    (activation_value(kind, u) - activation_value(kind, l)) / (u - l)
}

/// Tangent point `x*` in `(0, u]` whose tangent passes through `(l, f(l))`.
///
/// Requires an S-shaped `kind`, `l < 0 < u`, and a chord slope larger than
/// `f'(u)`; otherwise no such point exists and the chord itself is the
/// relevant line.
pub fn tangent_lower_anchor(kind: ActivationKind, l: f64, u: f64) -> Result<f64> {
    if !kind.is_s_shaped() {
        return Err(Error::NoTangentPoint(format!("{kind} is not S-shaped")));
    }
    if !(l < 0.0 && u > 0.0) {
        return Err(Error::NoTangentPoint(format!(
            "interval [{l}, {u}] does not straddle zero"
        )));
    }
    let k = chord_slope(kind, l, u);
    if k <= activation_slope(kind, u) {
        return Err(Error::NoTangentPoint(format!(
            "chord slope {k} does not exceed f'(u) on [{l}, {u}]"
        )));
    }
    let g = |d| lower_tangent_residual(kind, l, d);
    if g(u) >= 0.0 {
        return Err(Error::NoTangentPoint("residual has no sign change".into()));
    }
    let x = bisect_decreasing(0.0, u, g);
    let residual = g(x).abs();
    if residual > TANGENT_RESIDUAL_TOL {
        return Err(Error::NoTangentPoint(format!("residual {residual:e} after bisection")));
    }
    Ok(x)
}

/// Tangent point `x**` in `[l, 0)` whose tangent passes through `(u, f(u))`.
///
/// Requires an S-shaped `kind`, `l < 0 < u`, and a chord slope of at least
/// `f'(l)`.
pub fn tangent_upper_anchor(kind: ActivationKind, l: f64, u: f64) -> Result<f64> {
    if !kind.is_s_shaped() {
        return Err(Error::NoTangentPoint(format!("{kind} is not S-shaped")));
    }
    if !(l < 0.0 && u > 0.0) {
        return Err(Error::NoTangentPoint(format!(
            "interval [{l}, {u}] does not straddle zero"
        )));
    }
    let k = chord_slope(kind, l, u);
    if k < activation_slope(kind, l) {
        return Err(Error::NoTangentPoint(format!(
            "chord slope {k} is below f'(l) on [{l}, {u}]"
        )));
    }
    // Decreasing on [l, 0): non-negative at l, negative at 0.
    let g = |d| upper_tangent_residual(kind, u, d);
    if g(l) < 0.0 || g(0.0) >= 0.0 {
        return Err(Error::NoTangentPoint("residual has no sign change".into()));
    }
    if g(l) == 0.0 {
        return Ok(l);
    }
    let x = bisect_decreasing(l, 0.0, g);
    let residual = g(x).abs();
    if residual > TANGENT_RESIDUAL_TOL {
        return Err(Error::NoTangentPoint(format!("residual {residual:e} after bisection")));
    }
    Ok(x)
}

/// Tangent point through `(l, f(l))`, clamped to `[max(l, 0), u]` when the
/// root sits at (or numerically past) the bracket ends.
fn solve_through_lower(kind: ActivationKind, l: f64, u: f64) -> f64 {
    let lo = l.max(0.0);
    let g = |d| lower_tangent_residual(kind, l, d);
    if lo >= u || g(lo) <= 0.0 {
        return lo;
    }
    if g(u) >= 0.0 {
        return u;
    }
    bisect_decreasing(lo, u, g)
}

/// Tangent point through `(u, f(u))`, clamped to `[l, min(u, 0)]`.
fn solve_through_upper(kind: ActivationKind, l: f64, u: f64) -> f64 {
    let hi = u.min(0.0);
    let g = |d| upper_tangent_residual(kind, u, d);
    if hi <= l || g(hi) >= 0.0 {
        return hi;
    }
    if g(l) <= 0.0 {
        return l;
    }
    bisect_decreasing(l, hi, g)
}

fn tangent_at(kind: ActivationKind, x: f64) -> ScalarLine {
    ScalarLine::through(x, activation_value(kind, x), activation_slope(kind, x))
}

fn degenerate(kind: ActivationKind, l: f64, u: f64, m: f64) -> ScalarRelaxation {
    // Every supported activation is non-decreasing, so f(l) and f(u) bracket f.
    ScalarRelaxation {
        lower: ScalarLine::constant(activation_value(kind, l)),
        upper: ScalarLine::constant(activation_value(kind, u)),
        lower_rule: LineRule::Constant,
        upper_rule: LineRule::Constant,
        l,
        u,
        anchor: m,
    }
}

/// Bounding lines for a sigmoid, tanh or arctan neuron on `[l, u]` anchored
/// at `m` (clamped into the interval). ReLU is forwarded to [`relu_bounds`].
pub fn sshape_bounds(kind: ActivationKind, l: f64, u: f64, m: f64) -> ScalarRelaxation {
    if kind == ActivationKind::Relu {
        return relu_bounds(l, u, m);
    }
    debug_assert!(l <= u, "interval [{l}, {u}] is reversed");
    let m = m.clamp(l, u);
    if u - l < DEGENERATE_WIDTH {
        return degenerate(kind, l, u, m);
    }

    let f = |x| activation_value(kind, x);
    let df = |x| activation_slope(kind, x);
    let (fl, fu, fm) = (f(l), f(u), f(m));
    let k = (fu - fl) / (u - l);
    let chord = ScalarLine::through(l, fl, k);

    let through_lower = || {
        let x = solve_through_lower(kind, l, u);
        (tangent_at(kind, x), LineRule::TangentThroughLower { point: x })
    };
    let through_upper = || {
        let x = solve_through_upper(kind, l, u);
        (tangent_at(kind, x), LineRule::TangentThroughUpper { point: x })
    };
    let at_anchor = (tangent_at(kind, m), LineRule::TangentAtAnchor);

    // One-sided intervals: the slope predicates below are decided by the
    // curvature alone, but in the saturated tails they compare rounding noise.
    let (lower, upper) = if u <= 0.0 {
        (at_anchor, (chord, LineRule::Chord))
    } else if l >= 0.0 {
        ((chord, LineRule::Chord), at_anchor)
    } else if m >= 0.0 {
        let lower = if k < df(l) {
            (chord, LineRule::Chord)
        } else {
            through_upper()
        };
        // As m -> l the secant slope tends to f'(m).
        let k_ml = if m - l > DEGENERATE_WIDTH {
            (fm - fl) / (m - l)
        } else {
            df(m)
        };
        let upper = if k_ml > df(m) {
            at_anchor
        } else if k > df(u) {
            through_lower()
        } else {
            (chord, LineRule::Chord)
        };
        (lower, upper)
    } else {
        let k_mu = if u - m > DEGENERATE_WIDTH {
            (fm - fu) / (m - u)
        } else {
            df(m)
        };
        let lower = if k_mu >= df(m) {
            at_anchor
        } else if k > df(l) {
            through_upper()
        } else {
            (chord, LineRule::Chord)
        };
        let upper = if k <= df(u) {
            (chord, LineRule::Chord)
        } else {
            through_lower()
        };
        (lower, upper)
    };

    ScalarRelaxation {
        lower: lower.0,
        upper: upper.0,
        lower_rule: lower.1,
        upper_rule: upper.1,
        l,
        u,
        anchor: m,
    }
}

/// ReLU bounds: the endpoint chord above, and `0` or `x` below depending on
/// the sign of the anchor.
pub fn relu_bounds(l: f64, u: f64, m: f64) -> ScalarRelaxation {
    debug_assert!(l <= u, "interval [{l}, {u}] is reversed");
    let m = m.clamp(l, u);
    if u - l < DEGENERATE_WIDTH {
        return degenerate(ActivationKind::Relu, l, u, m);
    }
    let zero = (ScalarLine::constant(0.0), LineRule::Zero);
    let identity = (ScalarLine::new(1.0, 0.0), LineRule::Identity);
    let (lower, upper) = if u <= 0.0 {
        (zero, zero)
    } else if l >= 0.0 {
        (identity, identity)
    } else {
        let slope = u / (u - l);
        let chord = (ScalarLine::through(l, 0.0, slope), LineRule::Chord);
        (if m > 0.0 { identity } else { zero }, chord)
    };
    ScalarRelaxation {
        lower: lower.0,
        upper: upper.0,
        lower_rule: lower.1,
        upper_rule: upper.1,
        l,
        u,
        anchor: m,
    }
}

/// Relaxation of one neuron on `[l, u]`. Under [`AnchorPolicy::Forward`] the
/// anchor is the unperturbed pre-activation, clamped into the interval.
pub fn relax(
    kind: ActivationKind,
    l: f64,
    u: f64,
    x0_preactivation: f64,
    policy: AnchorPolicy,
) -> ScalarRelaxation {
    let m = match policy {
        AnchorPolicy::Forward => x0_preactivation.clamp(l, u),
        AnchorPolicy::Midpoint => 0.5 * (l + u),
    };
    match kind {
        ActivationKind::Relu => relu_bounds(l, u, m),
        _ => sshape_bounds(kind, l, u, m),
    }
}
