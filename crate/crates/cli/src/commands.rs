//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tilin_core::certify::{certified_radius, CertificationConfig, CertificationReport, METHOD_NAME};
use tilin_core::model::Network;
use tilin_core::oracle::{
    empirical_attack_radius, prediction_check, soundness_check, AttackBudget, OracleReport,
    CONTAINMENT_TOL,
};
use tilin_core::propagate::{compute_all_bounds, LayerBounds, Norm, PerturbationBall};
use tilin_core::relaxation::AnchorPolicy;

use crate::job::{resolve, Sample};
use crate::{
    BoundsArgs, CompareArgs, OracleArgs, SearchArgs, VerifyArgs, EXIT_MISCLASSIFIED,
    EXIT_VIOLATION,
};

fn emit(out: Option<&Path>, body: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body)?;
            Ok(stdout.flush()?)
        }
    }
}

fn emit_json(out: Option<&Path>, value: &impl Serialize) -> anyhow::Result<()> {
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    emit(out, &body)
}

fn config(search: &SearchArgs, norm: Norm, policy: AnchorPolicy) -> anyhow::Result<CertificationConfig> {
    let config = CertificationConfig {
        eps0: search.eps0,
        iterations: search.iters,
        norm,
        policy,
    };
    config.validate()?;
    Ok(config)
}

fn certify_all(
    net: &Network,
    samples: &[Sample],
    config: &CertificationConfig,
) -> anyhow::Result<Vec<CertificationReport>> {
    samples
        .par_iter()
        .map(|s| {
            let report = certified_radius(net, &s.x, s.label, s.index, config)?;
            tracing::info!(input = s.index, eps_cert = report.eps_cert, "certified");
            Ok(report)
        })
        .collect()
}

pub fn verify(args: &VerifyArgs) -> anyhow::Result<ExitCode> {
    let (net, samples) = resolve(&args.common)?;
    let config = config(&args.search, args.common.norm, args.common.policy)?;
    let reports = certify_all(&net, &samples, &config)?;
    emit_json(args.common.out.as_deref(), &reports)?;
    if args.strict && reports.iter().any(|r| r.misclassified) {
        return Ok(ExitCode::from(EXIT_MISCLASSIFIED));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize, Deserialize)]
struct BoundsReport {
    input_id: usize,
    label: usize,
    eps: f64,
    norm: Norm,
    policy: AnchorPolicy,
    layers: Vec<LayerBounds>,
}

pub fn bounds(args: &BoundsArgs) -> anyhow::Result<ExitCode> {
    let (net, samples) = resolve(&args.common)?;
    let reports: Vec<BoundsReport> = samples
        .par_iter()
        .map(|s| {
            let ball = PerturbationBall::new(s.x.clone(), args.eps, args.common.norm)?;
            let (layers, _) = compute_all_bounds(&net, &ball, args.common.policy)?;
            Ok(BoundsReport {
                input_id: s.index,
                label: s.label,
                eps: args.eps,
                norm: args.common.norm,
                policy: args.common.policy,
                layers,
            })
        })
        .collect::<anyhow::Result<_>>()?;
    emit_json(args.common.out.as_deref(), &reports)?;
    Ok(ExitCode::SUCCESS)
}

/// `100 (eps - baseline) / baseline`; undefined for a zero baseline.
pub fn improvement_pct(eps: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (eps - baseline) / baseline)
}

fn method_name(policy: AnchorPolicy) -> String {
    format!("{METHOD_NAME}-{policy}")
}

#[derive(Serialize)]
struct CompareRow {
    input: usize,
    method: String,
    norm: Norm,
    eps_cert: f64,
    time: f64,
    improvement_pct: Option<f64>,
}

#[derive(Serialize, Default)]
struct MethodSummary {
    inputs: usize,
    correctly_classified: usize,
    mean_eps_cert: f64,
    /// Mean wall time over correctly classified inputs.
    mean_time_sec: f64,
    mean_improvement_pct: Option<f64>,
}

pub fn compare(args: &CompareArgs) -> anyhow::Result<ExitCode> {
    if args.policies.is_empty() || args.norms.is_empty() {
        bail!("at least one policy and one norm are required");
    }
    if !args.policies.contains(&args.baseline) {
        bail!("baseline policy '{}' is not among --policies", args.baseline);
    }
    let (net, samples) = resolve(&args.common)?;
    let jobs: Vec<(&Sample, Norm, AnchorPolicy)> = samples
        .iter()
        .flat_map(|s| {
            args.norms
                .iter()
                .flat_map(move |&n| args.policies.iter().map(move |&p| (s, n, p)))
        })
        .collect();
    let reports: Vec<CertificationReport> = jobs
        .par_iter()
        .map(|&(s, norm, policy)| {
            let config = config(&args.search, norm, policy)?;
            Ok(certified_radius(&net, &s.x, s.label, s.index, &config)?)
        })
        .collect::<anyhow::Result<_>>()?;

    let baseline: BTreeMap<(usize, &str), f64> = reports
        .iter()
        .filter(|r| r.policy == args.baseline)
        .map(|r| ((r.input_id, r.norm.name()), r.eps_cert))
        .collect();
    let rows: Vec<(CompareRow, bool)> = reports
        .iter()
        .map(|r| {
            let base = baseline[&(r.input_id, r.norm.name())];
            let row = CompareRow {
                input: r.input_id,
                method: method_name(r.policy),
                norm: r.norm,
                eps_cert: r.eps_cert,
                time: r.wall_time_sec,
                improvement_pct: improvement_pct(r.eps_cert, base),
            };
            (row, r.misclassified)
        })
        .collect();

    let mut writer = csv::Writer::from_writer(Vec::new());
    for (row, _) in &rows {
        writer.serialize(row)?;
    }
    emit(args.common.out.as_deref(), &writer.into_inner()?)?;

    if let Some(path) = &args.summary {
        let mut summary: BTreeMap<String, BTreeMap<String, MethodSummary>> = BTreeMap::new();
        for (method, norm) in args
            .policies
            .iter()
            .flat_map(|&p| args.norms.iter().map(move |&n| (method_name(p), n)))
        {
            let group: Vec<&CompareRow> = rows
                .iter()
                .filter(|(r, miss)| !miss && r.method == method && r.norm == norm)
                .map(|(r, _)| r)
                .collect();
            let n = group.len();
            let mean = |f: &dyn Fn(&CompareRow) -> f64| {
                if n == 0 { 0.0 } else { group.iter().map(|r| f(r)).sum::<f64>() / n as f64 }
            };
            let improvements: Vec<f64> = group.iter().filter_map(|r| r.improvement_pct).collect();
            let entry = MethodSummary {
                inputs: samples.len(),
                correctly_classified: n,
                mean_eps_cert: mean(&|r| r.eps_cert),
                mean_time_sec: mean(&|r| r.time),
                mean_improvement_pct: (!improvements.is_empty())
                    .then(|| improvements.iter().sum::<f64>() / improvements.len() as f64),
            };
            summary.entry(method).or_default().insert(norm.name().to_string(), entry);
        }
        emit_json(Some(path), &summary)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
#[serde(rename_all = "lowercase")]
enum Source {
    Verify,
    Bounds,
}

#[derive(Serialize)]
struct OracleEntry {
    source: Source,
    input_id: usize,
    label: usize,
    norm: Norm,
    policy: AnchorPolicy,
    /// Certified radius for verify reports, the fixed radius for bounds reports.
    eps: f64,
    checks: Vec<OracleReport>,
}

fn attack_report(
    net: &Network,
    sample: &Sample,
    report: &CertificationReport,
    seed: u64,
) -> anyhow::Result<OracleReport> {
    let budget = AttackBudget {
        seed,
        ..Default::default()
    };
    let attack = empirical_attack_radius(net, &sample.x, report.label, report.norm, &budget)?;
    let excess = report.eps_cert - attack;
    Ok(OracleReport {
        oracle: "attack".into(),
        seed,
        samples: budget.samples,
        violations: usize::from(excess > 0.0),
        max_violation: excess.max(0.0),
        details: vec![serde_json::json!({
            "eps_cert": report.eps_cert,
            "attack_radius": if attack.is_finite() { Some(attack) } else { None },
        })],
    })
}

fn check_one(
    net: &Network,
    sample: &Sample,
    report: &CertificationReport,
    args: &OracleArgs,
) -> anyhow::Result<OracleEntry> {
    let seed = args.common.seed ^ sample.index as u64;
    let mut checks = Vec::new();
    if !report.misclassified {
        let mut radii = vec![report.eps_cert];
        radii.extend(args.eps);
        for eps in radii {
            let ball = PerturbationBall::new(sample.x.clone(), eps, report.norm)?;
            let (bounds, _) = compute_all_bounds(net, &ball, report.policy)?;
            checks.push(soundness_check(net, &bounds, &ball, args.samples, seed, CONTAINMENT_TOL)?);
        }
        let ball = PerturbationBall::new(sample.x.clone(), report.eps_cert, report.norm)?;
        checks.push(prediction_check(net, &ball, report.label, args.samples, seed)?);
        checks.push(attack_report(net, sample, report, seed)?);
    }
    Ok(OracleEntry {
        source: Source::Verify,
        input_id: sample.index,
        label: report.label,
        norm: report.norm,
        policy: report.policy,
        eps: report.eps_cert,
        checks,
    })
}

fn check_bounds(
    net: &Network,
    sample: &Sample,
    report: BoundsReport,
    args: &OracleArgs,
) -> anyhow::Result<OracleEntry> {
    let widths = net.widths();
    let shapes_match = report.layers.len() == widths.len()
        && report
            .layers
            .iter()
            .zip(widths)
            .all(|(b, &w)| b.lower.len() == w && b.upper.len() == w);
    if !shapes_match {
        bail!("bounds for input {} do not match the model's layer widths", report.input_id);
    }
    let seed = args.common.seed ^ sample.index as u64;
    let ball = PerturbationBall::new(sample.x.clone(), report.eps, report.norm)?;
    let check = soundness_check(net, &report.layers, &ball, args.samples, seed, CONTAINMENT_TOL)?;
    Ok(OracleEntry {
        source: Source::Bounds,
        input_id: sample.index,
        label: report.label,
        norm: report.norm,
        policy: report.policy,
        eps: report.eps,
        checks: vec![check],
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn oracle_check(args: &OracleArgs) -> anyhow::Result<ExitCode> {
    let (net, samples) = resolve(&args.common)?;
    let by_index: BTreeMap<usize, &Sample> = samples.iter().map(|s| (s.index, s)).collect();
    let sample_for = |id: usize| {
        by_index
            .get(&id)
            .copied()
            .with_context(|| format!("report for input {id} not in the selection"))
    };

    let reports: Vec<CertificationReport> = match (&args.report, &args.bounds) {
        (Some(path), _) => read_json(path)?,
        (None, Some(_)) => Vec::new(),
        (None, None) => {
            let config = config(&args.search, args.common.norm, args.common.policy)?;
            certify_all(&net, &samples, &config)?
        }
    };
    let mut entries: Vec<OracleEntry> = reports
        .iter()
        .map(|r| check_one(&net, sample_for(r.input_id)?, r, args))
        .collect::<anyhow::Result<_>>()?;
    if let Some(path) = &args.bounds {
        let bounds: Vec<BoundsReport> = read_json(path)?;
        for b in bounds {
            let sample = sample_for(b.input_id)?;
            entries.push(check_bounds(&net, sample, b, args)?);
        }
    }

    emit_json(args.common.out.as_deref(), &entries)?;
    let failed = entries
        .iter()
        .flat_map(|e| &e.checks)
        .any(|c| !c.passed());
    Ok(if failed {
        ExitCode::from(EXIT_VIOLATION)
    } else {
        ExitCode::SUCCESS
    })
}
