use std::fs;

use serde::Serialize;

use crate::consistency::{convergence_run, cross_count_consistency, make_signal, ConvergenceReport};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_case, make_order_dataset, train_order_probe, GradCheckSummary, TrainReport};
use crate::masks::MaskRule;
use crate::numkernel::Matrix;
use crate::projector::{encode_params, forward_video, init_params, manifest, FrameEmbeddings, ProjectorConfig};
use crate::rng::{gaussian, substream};

use super::config::Precision;
use super::output::{num, write_json, write_outputs, CsvTable, RunContext};

/// Gradient checks fail above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn double_only(ctx: &RunContext) -> Result<()> {
    if ctx.config.precision != Precision::Double {
        return Err(Error::Config(format!(
            "precision {} is only supported by forward",
            ctx.config.precision
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct MaskPayload {
    rule: MaskRule,
    n_queries: usize,
    n_frames: usize,
    prefix_lengths: Vec<usize>,
}

pub fn mask(ctx: &RunContext) -> Result<String> {
    let cfg = &ctx.config;
    let m = cfg.projector.mask_rule.build(cfg.projector.n_queries, cfg.n_frames)?;
    let mut table = CsvTable::new(std::iter::once("query".to_string()).chain((0..m.n_frames()).map(|j| format!("f{j}"))));
    for q in 0..m.n_queries() {
        table.push(
            std::iter::once(q.to_string())
                .chain(m.row(q).iter().map(|&b| u8::from(b).to_string()))
                .collect(),
        );
    }
    write_outputs(
        ctx,
        &table,
        MaskPayload {
            rule: m.rule(),
            n_queries: m.n_queries(),
            n_frames: m.n_frames(),
            prefix_lengths: (0..m.n_queries()).map(|q| m.prefix_len(q)).collect(),
        },
    )?;
    Ok(m.to_grid().trim_end().to_string())
}

#[derive(Serialize)]
struct ForwardPayload {
    precision: Precision,
    rule: MaskRule,
    n_frames: usize,
    tokens_per_frame: usize,
    output_rows: usize,
    output_cols: usize,
    output_frobenius: f64,
    params_file: String,
    manifest_file: String,
}

pub fn forward(ctx: &RunContext) -> Result<String> {
    let cfg = &ctx.config;
    let pc = &cfg.projector;
    let params = init_params(pc)?;
    let mut rng = substream(cfg.seed, "cli-frames");
    let (t, l) = (cfg.n_frames, cfg.tokens_per_frame);
    let frames = FrameEmbeddings::from_tokens(l, Matrix::from_fn(t * l, pc.input_dim, |_, _| gaussian(&mut rng, 1.0)))?;
    let mask = pc.mask_rule.build(pc.n_queries, t)?;
    let y = match cfg.precision {
        Precision::Double => forward_video(&params, &frames, &mask)?,
        Precision::Single => forward_video(&params.cast::<f32>(), &frames.cast::<f32>(), &mask)?.cast::<f64>(),
    };
    if !y.is_finite() {
        return Err(Error::NonFinite("forward output"));
    }

    fs::create_dir_all(&ctx.out_dir)?;
    let bin = ctx.out_dir.join("params.bin");
    let json = ctx.out_dir.join("params.json");
    fs::write(&bin, encode_params(&params))?;
    let mut man = manifest(&params);
    man.config_digest = Some(ctx.digest.clone());
    write_json(&json, &man)?;

    let mut table = CsvTable::new(std::iter::once("query".to_string()).chain((0..y.cols()).map(|c| format!("c{c}"))));
    for q in 0..y.rows() {
        table.push(std::iter::once(q.to_string()).chain(y.row(q).iter().map(|&v| num(v))).collect());
    }
    write_outputs(
        ctx,
        &table,
        ForwardPayload {
            precision: cfg.precision,
            rule: pc.mask_rule,
            n_frames: t,
            tokens_per_frame: l,
            output_rows: y.rows(),
            output_cols: y.cols(),
            output_frobenius: y.frobenius(),
            params_file: "params.bin".into(),
            manifest_file: "params.json".into(),
        },
    )?;
    Ok(format!(
        "forward: {} queries x {} channels, {} frames of {} tokens, |Y|_F = {:.6e}",
        y.rows(),
        y.cols(),
        t,
        l,
        y.frobenius()
    ))
}

pub fn gradcheck(ctx: &RunContext, rule: Option<MaskRule>) -> Result<String> {
    double_only(ctx)?;
    let rules: Vec<MaskRule> = rule.map_or_else(|| MaskRule::ALL.to_vec(), |r| vec![r]);
    let mut runs: Vec<GradCheckSummary> = Vec::new();
    for &r in &rules {
        for tpe in [false, true] {
            runs.push(gradcheck_case(r, tpe, ctx.seed(), ctx.config.fd_step)?);
        }
    }
    let mut table = CsvTable::new(["mask_rule", "use_tpe", "n_coordinates", "n_checked", "max_rel_error"]);
    let mut lines = Vec::new();
    for s in &runs {
        table.push(vec![
            s.mask_rule.to_string(),
            s.use_tpe.to_string(),
            s.n_coordinates.to_string(),
            s.n_checked.to_string(),
            num(s.max_rel_error),
        ]);
        lines.push(format!(
            "{:<16} tpe={:<5} checked {:>4}/{:<4} max rel error {:.3e} at {}",
            s.mask_rule.to_string(),
            s.use_tpe,
            s.n_checked,
            s.n_coordinates,
            s.max_rel_error,
            s.worst
        ));
    }
    write_outputs(ctx, &table, &runs)?;
    let worst = runs.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    if worst.is_nan() || worst >= GRADCHECK_TOLERANCE {
        return Err(Error::CheckFailed(format!(
            "max relative gradient error {worst:e} is not below {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(lines.join("\n"))
}

/// Projector for the signal experiments; its input width is the signal's.
fn signal_setup(ctx: &RunContext) -> Result<(crate::projector::ProjectorParams, crate::consistency::ContinuousVideoSignal)> {
    double_only(ctx)?;
    let cfg = &ctx.config;
    let n = cfg.projector.n_queries;
    if cfg.grid_points < 2 * n {
        return Err(Error::Config(format!(
            "grid_points {} must be at least twice projector.n_queries {n}",
            cfg.grid_points
        )));
    }
    let pc = ProjectorConfig {
        mask_rule: MaskRule::CcamContinuous,
        ..cfg.projector.clone()
    };
    Ok((init_params(&pc)?, make_signal(&cfg.signal)?))
}

pub fn converge(ctx: &RunContext) -> Result<String> {
    let (params, sig) = signal_setup(ctx)?;
    let mut report = convergence_run(&params, &sig, &ctx.config.frame_counts, ctx.config.grid_points)?;
    report.config_digest = ctx.digest.clone();
    let mut table = CsvTable::new(["frame_count", "error"]);
    for (&t, &e) in report.frame_counts.iter().zip(&report.errors) {
        table.push(vec![t.to_string(), num(e)]);
    }
    write_outputs(ctx, &table, &report)?;
    let mut lines: Vec<String> = report
        .frame_counts
        .iter()
        .zip(&report.errors)
        .map(|(t, e)| format!("frames {t:>5}  error {e:.6e}"))
        .collect();
    lines.push(format!(
        "slope {:.4}  strictly decreasing: {}",
        report.slope,
        report.strictly_decreasing()
    ));
    Ok(lines.join("\n"))
}

#[derive(Serialize)]
struct ConsistencyPayload {
    reference_frames: usize,
    frame_counts: Vec<usize>,
    discrepancies: Vec<f64>,
    /// `e(T) + e(reference)` against the quadrature reference.
    bounds: Vec<f64>,
    bound_holds: bool,
    convergence: ConvergenceReport,
}

pub fn consistency(ctx: &RunContext) -> Result<String> {
    let (params, sig) = signal_setup(ctx)?;
    let cfg = &ctx.config;
    let reference = cfg.reference_frames.unwrap_or(*cfg.frame_counts.last().expect("validated non-empty"));
    let mut counts = cfg.frame_counts.clone();
    if !counts.contains(&reference) {
        counts.push(reference);
        counts.sort_unstable();
    }
    let mut conv = convergence_run(&params, &sig, &counts, cfg.grid_points)?;
    conv.config_digest = ctx.digest.clone();
    let e_ref = conv.error_at(reference).expect("reference count included");

    let mut table = CsvTable::new(["frame_count", "error", "bound"]);
    let mut discrepancies = Vec::new();
    let mut bounds = Vec::new();
    let mut lines = Vec::new();
    for &t in &cfg.frame_counts {
        let d = cross_count_consistency(&params, &sig, t, reference)?;
        let b = conv.error_at(t).expect("count included") + e_ref;
        table.push(vec![t.to_string(), num(d), num(b)]);
        lines.push(format!("frames {t:>5} vs {reference}  discrepancy {d:.6e}  bound {b:.6e}"));
        discrepancies.push(d);
        bounds.push(b);
    }
    let bound_holds = discrepancies.iter().zip(&bounds).all(|(d, b)| d <= b);
    write_outputs(
        ctx,
        &table,
        ConsistencyPayload {
            reference_frames: reference,
            frame_counts: cfg.frame_counts.clone(),
            discrepancies,
            bounds,
            bound_holds,
            convergence: conv,
        },
    )?;
    if !bound_holds {
        return Err(Error::CheckFailed(
            "discrepancy exceeds the sum of the two errors against the quadrature reference".into(),
        ));
    }
    Ok(lines.join("\n"))
}

pub fn ordertask(ctx: &RunContext) -> Result<String> {
    double_only(ctx)?;
    let cfg = &ctx.config;
    let data = make_order_dataset(&cfg.dataset)?;
    let (report, _): (TrainReport, _) = train_order_probe(&cfg.projector, &data, cfg.projector.mask_rule, &cfg.train)?;
    let mut table = CsvTable::new(["epoch", "loss"]);
    for (k, &l) in report.loss_curve.iter().enumerate() {
        table.push(vec![k.to_string(), num(l)]);
    }
    write_outputs(ctx, &table, &report)?;
    Ok(format!(
        "{} tpe={}: train accuracy {:.4}, test accuracy {:.4}, final loss {:.6e}",
        report.mask_rule,
        report.use_tpe,
        report.train_accuracy,
        report.test_accuracy,
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    ))
}
