//! Robustness decision at a fixed radius and the log-space binary search for
//! the largest certified radius.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::propagate::{compute_all_bounds, LayerBounds, Norm, PerturbationBall};
use crate::relaxation::AnchorPolicy;

pub const METHOD_NAME: &str = "ti-lin";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertificationConfig {
    pub eps0: f64,
    pub iterations: usize,
    pub norm: Norm,
    pub policy: AnchorPolicy,
}

impl Default for CertificationConfig {
    fn default() -> Self {
        Self {
            eps0: 0.05,
            iterations: 15,
            norm: Norm::LInf,
            policy: AnchorPolicy::Forward,
        }
    }
}

impl CertificationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "initial radius must be positive and finite, got {}",
                self.eps0
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("at least one iteration is required".into()));
        }
        Ok(())
    }
}

/// One bound computation of the search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub eps: f64,
    pub robust: bool,
    pub gamma_l_t: f64,
    /// `None` when the network has a single output.
    pub max_gamma_u: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub input_id: usize,
    pub label: usize,
    /// Largest radius the trace proves robust; 0 when none was.
    pub eps_cert: f64,
    /// `exp` of the final log-radius after the last update.
    pub eps_last: f64,
    pub method: String,
    pub policy: AnchorPolicy,
    pub norm: Norm,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    pub misclassified: bool,
    pub unproven: bool,
    pub single_class: bool,
    pub wall_time_sec: f64,
}

/// `l_t >= max_{j != t} u_j`, the comparison being non-strict. A single-class
/// network has no competitor and is robust vacuously.
pub fn is_robust(output: &LayerBounds, t: usize) -> Result<bool> {
    if t >= output.len() {
        return Err(Error::LabelOutOfRange {
            label: t,
            classes: output.len(),
        });
    }
    Ok(match max_competitor_upper(output, t) {
        Some(best) => output.lower[t] >= best,
        None => true,
    })
}

fn max_competitor_upper(output: &LayerBounds, t: usize) -> Option<f64> {
    output
        .upper
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, &u)| u)
        .reduce(f64::max)
}

/// Output-layer bounds over the ball of radius `eps` around `x0`.
pub fn output_bounds(
    net: &Network,
    x0: &[f64],
    eps: f64,
    norm: Norm,
    policy: AnchorPolicy,
) -> Result<LayerBounds> {
    let ball = PerturbationBall::new(x0.to_vec(), eps, norm)?;
    let (mut bounds, _) = compute_all_bounds(net, &ball, policy)?;
    Ok(bounds.pop().expect("network has at least one layer"))
}

/// Binary search over `log(eps)`: a robust step raises the proven floor and
/// moves up by at most one unit, a failed step lowers the ceiling and moves
/// down by at most one unit; both moves stop at the midpoint of floor and
/// ceiling once both are finite.
pub fn certified_radius(
    net: &Network,
    x0: &[f64],
    t: usize,
    input_id: usize,
    config: &CertificationConfig,
) -> Result<CertificationReport> {
    config.validate()?;
    let start = Instant::now();
    let classes = net.output_dim();
    if t >= classes {
        return Err(Error::LabelOutOfRange { label: t, classes });
    }
    let mut report = CertificationReport {
        input_id,
        label: t,
        eps_cert: 0.0,
        eps_last: 0.0,
        method: METHOD_NAME.to_string(),
        policy: config.policy,
        norm: config.norm,
        iterations: config.iterations,
        trace: Vec::with_capacity(config.iterations),
        misclassified: false,
        unproven: false,
        single_class: classes == 1,
        wall_time_sec: 0.0,
    };
    if net.predict(x0)? != t {
        report.misclassified = true;
        report.wall_time_sec = start.elapsed().as_secs_f64();
        return Ok(report);
    }

    let mut log_eps = config.eps0.ln();
    let mut log_min = f64::NEG_INFINITY;
    let mut log_max = f64::INFINITY;
    let mut proven: Option<f64> = None;
    for iteration in 0..config.iterations {
        let eps = if iteration == 0 { config.eps0 } else { log_eps.exp() };
        let output = output_bounds(net, x0, eps, config.norm, config.policy)?;
        let robust = is_robust(&output, t)?;
        report.trace.push(TraceEntry {
            eps,
            robust,
            gamma_l_t: output.lower[t],
            max_gamma_u: max_competitor_upper(&output, t),
        });
        if robust {
            log_min = log_eps;
            proven = Some(eps);
            log_eps = (log_eps + 1.0).min(0.5 * (log_max + log_min));
        } else {
            log_max = log_eps;
            log_eps = (log_eps - 1.0).max(0.5 * (log_max + log_min));
        }
    }
    report.eps_cert = proven.unwrap_or(0.0);
    report.unproven = proven.is_none();
    report.eps_last = log_eps.exp();
    report.wall_time_sec = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Affine, Layer};
    use ndarray::array;

    fn margin_net() -> Network {
        Network::new(
            2,
            vec![Layer::Affine(
                Affine::new(array![[1.0, 0.0], [-1.0, 0.0]], array![1.0, 0.0]).unwrap(),
            )],
        )
        .unwrap()
    }

    #[test]
    fn robustness_predicate() {
        let b = LayerBounds::new(vec![2.0, -5.0], vec![3.0, 1.0]).unwrap();
        assert!(is_robust(&b, 0).unwrap());
        assert!(!is_robust(&b, 1).unwrap());
        let tie = LayerBounds::new(vec![1.0, 0.0], vec![2.0, 1.0]).unwrap();
        assert!(is_robust(&tie, 0).unwrap());
        let single = LayerBounds::new(vec![-1.0], vec![1.0]).unwrap();
        assert!(is_robust(&single, 0).unwrap());
        assert!(matches!(
            is_robust(&single, 1),
            Err(Error::LabelOutOfRange { label: 1, classes: 1 })
        ));
    }

    #[test]
    fn affine_margin_converges_to_half() {
        let report =
            certified_radius(&margin_net(), &[0.0, 0.0], 0, 0, &CertificationConfig::default())
                .unwrap();
        assert_eq!(report.trace.len(), 15);
        assert!(report.eps_cert <= 0.5);
        assert!((0.5 - report.eps_cert) / 0.5 <= 1e-3, "{}", report.eps_cert);
        assert!(!report.unproven && !report.misclassified);
    }

    #[test]
    fn misclassified_input() {
        let report =
            certified_radius(&margin_net(), &[-2.0, 0.0], 0, 3, &CertificationConfig::default())
                .unwrap();
        assert!(report.misclassified);
        assert_eq!(report.eps_cert, 0.0);
        assert!(report.trace.is_empty());
    }

    #[test]
    fn single_iteration_reports_initial_radius() {
        let config = CertificationConfig {
            iterations: 1,
            ..Default::default()
        };
        let report = certified_radius(&margin_net(), &[0.0, 0.0], 0, 0, &config).unwrap();
        assert_eq!(report.eps_cert, 0.05);
        assert!((report.eps_last - 0.05 * std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn unproven_when_initial_radius_fails() {
        // Margin 2 x1 + 0.02: robust only up to 0.01, below both 0.05 and 0.05 / e.
        let net = Network::new(
            2,
            vec![Layer::Affine(
                Affine::new(array![[1.0, 0.0], [-1.0, 0.0]], array![0.02, 0.0]).unwrap(),
            )],
        )
        .unwrap();
        let config = CertificationConfig {
            iterations: 2,
            ..Default::default()
        };
        let report = certified_radius(&net, &[0.0, 0.0], 0, 0, &config).unwrap();
        assert!(report.unproven);
        assert_eq!(report.eps_cert, 0.0);
        assert!(report.trace.iter().all(|e| !e.robust));
    }

    #[test]
    fn config_validation() {
        let bad = CertificationConfig {
            eps0: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CertificationConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
