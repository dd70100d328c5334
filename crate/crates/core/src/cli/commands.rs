//! The six subcommands. Each reads every key it needs, rejects unknown
//! keys before doing any work, and writes its files atomically.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::svg::{Plot, Series};
use super::{
    csv_field, ensure_dir, eval_config, master_seed, resolve_policy, spectrum_config, trainer_config, Invocation,
};
use crate::config::KeyValues;
use crate::dynsys::{system_from_config, System};
use crate::error::{Error, Result};
use crate::eval::robustness_sweep;
use crate::lyapunov::{
    divergence_curve, log_slope, reward_mle, sample_state, spectrum_over_samples, tangent_spectrum, SpectrumConfig,
    StabilityClass,
};
use crate::mleg::train_with;
use crate::policy::{save_weights, PolicyParams};
use crate::rng::{self, Stream};
use crate::write_atomic;

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    /// Human-readable result lines for stdout.
    pub summary: Vec<String>,
    pub warnings: Vec<String>,
}

impl Report {
    fn write(&mut self, dir: &Path, name: &str, content: &str) -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, content.as_bytes())?;
        self.files.push(path);
        Ok(())
    }

    fn json(&mut self, dir: &Path, name: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::InvalidArgument(format!("cannot serialise report: {e}")))?;
        text.push('\n');
        self.write(dir, name, &text)
    }
}

/// Run a parsed invocation.
pub fn run_command(inv: &Invocation) -> Result<Report> {
    let kv = KeyValues::load(&inv.config)?;
    let seed = master_seed(&kv, inv.seed)?;
    let run = match inv.command.as_str() {
        "spectrum" => spectrum,
        "reward-mle" => reward,
        "diverge" => diverge,
        "robustness" => robustness,
        "train" => train,
        "ablate" => ablate,
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    };
    run(&kv, seed, &inv.command, &inv.out)
}

fn echo(kv: &KeyValues, command: &str, seed: u64, resolved: Value) -> Value {
    json!({
        "command": command,
        "config_file": kv.origin(),
        "seed": seed,
        "keys": Value::Object(kv.echo()),
        "resolved": resolved,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn system_and_policy(kv: &KeyValues) -> Result<(System, String, PolicyParams)> {
    let sys = system_from_config(kv)?;
    let reference = kv.str("policy")?.unwrap_or_else(|| "none".into());
    let policy = resolve_policy(kv, &sys, &reference)?;
    Ok((sys, reference, policy))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

fn spectrum(kv: &KeyValues, seed: u64, command: &str, out: &Path) -> Result<Report> {
    let (sys, label, policy) = system_and_policy(kv)?;
    let cfg = spectrum_config(kv, "", SpectrumConfig::default())?;
    let oracle = kv.bool_or("oracle", false)?;
    kv.finish()?;
    ensure_dir(out)?;
    let summary = match spectrum_over_samples(&sys, &policy, &cfg, seed) {
        Err(e @ Error::DegeneratePerturbation { .. }) => {
            return collapsed_spectrum(kv, seed, command, out, &sys, &label, &cfg, &e);
        }
        r => r?,
    };
    let mut report = Report {
        warnings: summary.warnings(),
        ..Default::default()
    };
    let oracle_spectra = if oracle {
        summary
            .samples
            .iter()
            .map(|s| {
                tangent_spectrum(&sys, &policy, &s.initial_state, cfg.steps)
                    .map(|t| json!({"index": s.index, "exponents": t.exponents}))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    report.json(
        out,
        "spectrum.json",
        &json!({
            "config": echo(kv, command, seed, json!({"system": to_json(&sys), "spectrum": to_json(&cfg)})),
            "system": sys.id(),
            "policy": label,
            "summary": to_json(&summary),
            "oracle": oracle_spectra,
        }),
    )?;
    let csv = format!(
        "system,policy,seed,mle,sle,class\n{},{},{},{:?},{:?},{}\n",
        sys.id(),
        csv_field(&label),
        seed,
        summary.mle,
        summary.sle,
        summary.class
    );
    report.write(out, "spectrum.csv", &csv)?;
    report.summary.push(format!(
        "{} / {}: exponents {:?}, mle {:.6}, sle {:.6}, class {}",
        sys.id(),
        label,
        summary.exponents,
        summary.mle,
        summary.sle,
        summary.class
    ));
    Ok(report)
}

/// Every sample's offsets underflowed to zero: the closed loop contracts
/// faster than double precision can follow, reported as an MLE of `-inf`.
#[allow(clippy::too_many_arguments)]
fn collapsed_spectrum(
    kv: &KeyValues,
    seed: u64,
    command: &str,
    out: &Path,
    sys: &System,
    label: &str,
    cfg: &SpectrumConfig,
    cause: &Error,
) -> Result<Report> {
    let mut report = Report::default();
    report.warnings.push(format!(
        "perturbations collapsed on every sample ({cause}); reporting mle = -inf"
    ));
    report.json(
        out,
        "spectrum.json",
        &json!({
            "config": echo(kv, command, seed, json!({"system": to_json(sys), "spectrum": to_json(cfg)})),
            "system": sys.id(),
            "policy": label,
            "summary": null,
            "collapsed": cause.to_string(),
            "oracle": [],
        }),
    )?;
    let csv = format!(
        "system,policy,seed,mle,sle,class\n{},{},{},-inf,-inf,{}\n",
        sys.id(),
        csv_field(label),
        seed,
        StabilityClass::Stable
    );
    report.write(out, "spectrum.csv", &csv)?;
    report.summary.push(format!(
        "{} / {}: mle -inf (collapsed), class {}",
        sys.id(),
        label,
        StabilityClass::Stable
    ));
    Ok(report)
}

fn reward(kv: &KeyValues, seed: u64, command: &str, out: &Path) -> Result<Report> {
    let (sys, label, policy) = system_and_policy(kv)?;
    let cfg = spectrum_config(kv, "", SpectrumConfig::default())?;
    kv.finish()?;
    ensure_dir(out)?;
    let rm = reward_mle(&sys, &policy, &cfg, seed)?;
    let mut report = Report::default();
    let state_mle = match spectrum_over_samples(&sys, &policy, &cfg, seed) {
        Ok(s) => Some(s.mle),
        Err(e) if e.is_config() => return Err(e),
        Err(e) => {
            report.warnings.push(format!("state spectrum unavailable: {e}"));
            None
        }
    };
    if rm.no_divergence {
        report
            .warnings
            .push("no measurable reward divergence in any sample (reward_mle = -inf)".into());
    }
    report.json(
        out,
        "reward_mle.json",
        &json!({
            "config": echo(kv, command, seed, json!({"system": to_json(&sys), "spectrum": to_json(&cfg)})),
            "system": sys.id(),
            "policy": label,
            "reward_mle": rm.value,
            "per_sample": rm.per_sample,
            "no_divergence": rm.no_divergence,
            "state_mle": state_mle,
        }),
    )?;
    let csv = format!(
        "system,policy,seed,samples,reward_mle,state_mle,no_divergence\n{},{},{},{},{:?},{},{}\n",
        sys.id(),
        csv_field(&label),
        seed,
        cfg.samples,
        rm.value,
        opt(state_mle),
        rm.no_divergence
    );
    report.write(out, "reward_mle.csv", &csv)?;
    report.summary.push(format!(
        "{} / {}: reward mle {:?}, state mle {}",
        sys.id(),
        label,
        rm.value,
        opt(state_mle)
    ));
    Ok(report)
}

fn diverge(kv: &KeyValues, seed: u64, command: &str, out: &Path) -> Result<Report> {
    let (sys, label, policy) = system_and_policy(kv)?;
    let epsilon = kv.f64_or("epsilon", 1e-4)?;
    let steps = kv.usize_or("steps", 100)?;
    let curves = kv.usize_or("curves", 1)?;
    let start = kv.usize_or("slope_start", 0)?;
    let saturation = kv.f64_or("saturation", 1e-2)?;
    kv.finish()?;
    if steps == 0 || curves == 0 || !(saturation > 0.0) || !(epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "{}: need steps >= 1, curves >= 1, saturation > 0 and epsilon >= 0",
            kv.origin()
        )));
    }
    ensure_dir(out)?;
    let data = (0..curves)
        .map(|i| {
            let s0 = sample_state(&sys, seed, i);
            divergence_curve(
                &sys,
                &policy,
                &s0,
                epsilon,
                steps,
                rng::derive(seed, Stream::Direction, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = Report::default();
    for (i, c) in data.iter().enumerate() {
        if let Some(step) = c.truncated_at {
            report
                .warnings
                .push(format!("curve {i} truncated at step {step} (non-finite state)"));
        }
    }
    let gaps: Vec<Vec<f64>> = data.iter().map(|c| c.state_gap.clone()).collect();
    let slope = log_slope(&gaps, start, saturation, sys.step_duration());

    let mut csv = String::from("curve,t,state_gap,reward_gap\n");
    for (i, c) in data.iter().enumerate() {
        for (t, g) in c.state_gap.iter().enumerate() {
            let _ = writeln!(csv, "{i},{t},{g:?},{}", opt(c.reward_gap.get(t).copied()));
        }
    }
    let ln_points = |v: &[f64]| -> Vec<(f64, f64)> {
        v.iter()
            .enumerate()
            .filter(|(_, g)| **g > 0.0)
            .map(|(t, g)| (t as f64, g.ln()))
            .collect()
    };
    let mut series = Vec::new();
    for (i, c) in data.iter().enumerate() {
        series.push(Series::new(format!("state gap {i}"), ln_points(&c.state_gap)));
        series.push(Series::new(format!("reward gap {i}"), ln_points(&c.reward_gap)));
    }
    let plot = Plot {
        title: format!("{} / {}: twin-trajectory divergence", sys.id(), label),
        x_label: "step".into(),
        y_label: "ln gap".into(),
        y_transform: Some("ln".into()),
        series,
        notes: vec![match slope {
            Some(s) => format!("log-slope {s:.4} per unit time"),
            None => "log-slope unavailable".into(),
        }],
    };
    report.json(
        out,
        "divergence.json",
        &json!({
            "config": echo(kv, command, seed, json!({
                "system": to_json(&sys), "epsilon": epsilon, "steps": steps, "curves": curves,
                "slope_start": start, "saturation": saturation,
            })),
            "system": sys.id(),
            "policy": label,
            "log_slope": slope,
            "curves": to_json(&data),
        }),
    )?;
    report.write(out, "divergence.csv", &csv)?;
    report.write(out, "divergence.svg", &plot.render())?;
    report.summary.push(format!(
        "{} / {}: {} curve(s), log-slope {}",
        sys.id(),
        label,
        curves,
        opt(slope)
    ));
    Ok(report)
}

fn robustness(kv: &KeyValues, seed: u64, command: &str, out: &Path) -> Result<Report> {
    let sys = system_from_config(kv)?;
    let refs = match (kv.str_list("policies")?, kv.str("policy")?) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(format!(
                "{}: give `policies` or `policy`, not both",
                kv.origin()
            )))
        }
        (Some(list), None) => list,
        (None, Some(one)) => vec![one],
        (None, None) => vec!["none".into()],
    };
    let labels = kv.str_list("labels")?.unwrap_or_else(|| refs.clone());
    if labels.len() != refs.len() {
        return Err(Error::Config(format!(
            "{}: {} labels for {} policies",
            kv.origin(),
            labels.len(),
            refs.len()
        )));
    }
    let sigmas = kv.f64_list("sigmas")?.unwrap_or_else(|| vec![0.0, 0.05, 0.1, 0.2]);
    let cfg = eval_config(kv)?;
    let policies = refs
        .iter()
        .map(|r| resolve_policy(kv, &sys, r))
        .collect::<Result<Vec<_>>>()?;
    kv.finish()?;
    if sigmas.is_empty() {
        return Err(Error::Config(format!("{}: `sigmas` is empty", kv.origin())));
    }
    ensure_dir(out)?;
    let mut report = Report::default();
    let mut csv = String::from("policy,sigma,iqm,ci_low,ci_high,n_episodes\n");
    let mut series = Vec::new();
    let mut reports = Vec::new();
    for (label, policy) in labels.iter().zip(&policies) {
        // Same seed for every policy: common random numbers across the comparison.
        let rep = robustness_sweep(&sys, policy, &sigmas, &cfg, seed)?;
        let mut s = Series::new(label.clone(), Vec::new());
        for e in &rep.entries {
            let _ = writeln!(
                csv,
                "{},{:?},{:?},{:?},{:?},{}",
                csv_field(label),
                e.sigma,
                e.iqm,
                e.ci_low,
                e.ci_high,
                e.n_episodes
            );
            s.points.push((e.sigma, e.iqm));
            s.bars.push((e.sigma, e.ci_low, e.ci_high));
            report.summary.push(format!(
                "{label} sigma={}: iqm {:.6} [{:.6}, {:.6}]",
                e.sigma, e.iqm, e.ci_low, e.ci_high
            ));
        }
        series.push(s);
        reports.push(json!({"policy": label, "report": to_json(&rep)}));
    }
    let plot = Plot {
        title: format!("{}: return under observation noise", sys.id()),
        x_label: "noise sigma".into(),
        y_label: "IQM return".into(),
        series,
        ..Default::default()
    };
    report.json(
        out,
        "robustness.json",
        &json!({
            "config": echo(kv, command, seed, json!({"system": to_json(&sys), "sigmas": sigmas, "eval": to_json(&cfg), "policies": refs})),
            "system": sys.id(),
            "results": reports,
        }),
    )?;
    report.write(out, "robustness.csv", &csv)?;
    report.write(out, "robustness.svg", &plot.render())?;
    Ok(report)
}

fn train(kv: &KeyValues, seed: u64, command: &str, out: &Path) -> Result<Report> {
    let sys = system_from_config(kv)?;
    let cfg = trainer_config(kv, seed)?;
    kv.finish()?;
    ensure_dir(out)?;
    let result = train_with(&sys, &cfg, |h| {
        if let Some(m) = h.mle {
            eprintln!(
                "update {:>5}: return {:.4}, reg {:.4e}, mle {:.4}",
                h.update, h.return_iqm, h.reg_loss, m
            );
        }
    })?;
    let mut report = Report::default();
    save_weights(&result.policy, &out.join("policy.weights"))?;
    save_weights(&result.value, &out.join("value.weights"))?;
    report.files.push(out.join("policy.weights"));
    report.files.push(out.join("value.weights"));
    report.json(
        out,
        "train.json",
        &json!({
            "config": echo(kv, command, seed, json!({"system": to_json(&sys), "trainer": to_json(&cfg)})),
            "system": sys.id(),
            "history": to_json(&result.history),
            "return_scale": result.scale.value,
        }),
    )?;
    report.write(out, "history.csv", &result.history_csv())?;
    let returns = Plot {
        title: format!("{}: training return", sys.id()),
        x_label: "update".into(),
        y_label: "IQM batch return".into(),
        series: vec![Series::new(
            "return_iqm",
            result.history.iter().map(|h| (h.update as f64, h.return_iqm)).collect(),
        )],
        ..Default::default()
    };
    report.write(out, "history.svg", &returns.render())?;
    let mles: Vec<(f64, f64)> = result
        .history
        .iter()
        .filter_map(|h| h.mle.map(|m| (h.update as f64, m)))
        .collect();
    if !mles.is_empty() {
        let plot = Plot {
            title: format!("{}: MLE during training", sys.id()),
            x_label: "update".into(),
            y_label: "MLE (per unit time)".into(),
            series: vec![Series::new("mle", mles)],
            ..Default::default()
        };
        report.write(out, "mle.svg", &plot.render())?;
    }
    if let Some(last) = result.history.last() {
        report.summary.push(format!(
            "{} updates: return {:.6}, reg {:.6e}, mle {}",
            cfg.updates,
            last.return_iqm,
            last.reg_loss,
            opt(last.mle)
        ));
    }
    Ok(report)
}

fn ablate(kv: &KeyValues, seed: u64, command: &str, out: &Path) -> Result<Report> {
    let (sys, label, policy) = system_and_policy(kv)?;
    let base = spectrum_config(kv, "", SpectrumConfig::default())?;
    let iterations = kv.usize_list("iterations")?.unwrap_or_else(|| vec![1, 10, 100]);
    let sample_counts = kv.usize_list("sample_counts")?.unwrap_or_else(|| vec![1, 5, 20]);
    let replicates = kv.usize_or("replicates", 5)?;
    let reference = kv.usize_or("reference_iterations", 1000)?;
    kv.finish()?;
    if replicates == 0 || iterations.iter().chain(&sample_counts).any(|&k| k == 0) {
        return Err(Error::Config(format!(
            "{}: iterations, sample_counts and replicates must be >= 1",
            kv.origin()
        )));
    }
    ensure_dir(out)?;
    let mut report = Report::default();
    let mut csv = String::from("sweep,setting,seed,mle,sle,ci_low,ci_high,ci_width\n");
    let mut rows = Vec::new();
    let mut iter_series = Vec::new();
    let mut sample_series = Vec::new();
    let settings: Vec<(&str, usize, SpectrumConfig)> = iterations
        .iter()
        .map(|&k| {
            (
                "iterations",
                k,
                SpectrumConfig {
                    steps: k * base.period,
                    ..base
                },
            )
        })
        .chain(
            sample_counts
                .iter()
                .map(|&n| ("samples", n, SpectrumConfig { samples: n, ..base })),
        )
        .chain(std::iter::once((
            "reference",
            reference,
            SpectrumConfig {
                steps: reference * base.period,
                ..base
            },
        )))
        .collect();
    // Replicate r uses the plain seed `seed + r`, so any row can be rerun
    // with `chaoscope spectrum --seed`.
    for r in 0..replicates as u64 {
        let s = seed.wrapping_add(r);
        let mut it = Series::new(format!("seed {s}"), Vec::new());
        let mut sm = Series::new(format!("seed {s}"), Vec::new());
        for (sweep, setting, cfg) in &settings {
            let summary = spectrum_over_samples(&sys, &policy, cfg, s)?;
            report.warnings.extend(summary.warnings());
            let (lo, hi) = summary.mle_ci.map_or((None, None), |(a, b)| (Some(a), Some(b)));
            let width = summary.mle_ci.map(|(a, b)| b - a);
            let _ = writeln!(
                csv,
                "{sweep},{setting},{s},{:?},{:?},{},{},{}",
                summary.mle,
                summary.sle,
                opt(lo),
                opt(hi),
                opt(width)
            );
            match *sweep {
                "iterations" => it.points.push((*setting as f64, summary.mle)),
                "samples" => sm.points.push((*setting as f64, width.unwrap_or(f64::NAN))),
                _ => {}
            }
            rows.push(json!({
                "sweep": sweep, "setting": setting, "seed": s,
                "mle": summary.mle, "sle": summary.sle, "mle_ci": summary.mle_ci,
            }));
        }
        iter_series.push(it);
        sample_series.push(sm);
    }
    let iter_plot = Plot {
        title: format!("{} / {}: MLE against iterations", sys.id(), label),
        x_label: "iterations K".into(),
        y_label: "MLE".into(),
        series: iter_series,
        ..Default::default()
    };
    let sample_plot = Plot {
        title: format!("{} / {}: CI width against samples", sys.id(), label),
        x_label: "initial samples".into(),
        y_label: "MLE CI width".into(),
        series: sample_series,
        ..Default::default()
    };
    report.json(
        out,
        "ablation.json",
        &json!({
            "config": echo(kv, command, seed, json!({
                "system": to_json(&sys), "spectrum": to_json(&base), "iterations": iterations,
                "sample_counts": sample_counts, "replicates": replicates, "reference_iterations": reference,
            })),
            "system": sys.id(),
            "policy": label,
            "rows": rows,
        }),
    )?;
    report.write(out, "ablation.csv", &csv)?;
    report.write(out, "ablation_iterations.svg", &iter_plot.render())?;
    report.write(out, "ablation_samples.svg", &sample_plot.render())?;
    report.summary.push(format!(
        "{} / {}: {} rows over {} replicate(s)",
        sys.id(),
        label,
        rows.len(),
        replicates
    ));
    Ok(report)
}
