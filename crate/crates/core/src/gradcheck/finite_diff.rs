use serde::Serialize;

use crate::error::Result;
use crate::masks::{FrameMask, MaskRule};
use crate::numkernel::Matrix;
use crate::projector::{forward_video, init_params, FrameEmbeddings, ProjectorConfig, ProjectorParams};
use crate::rng::{gaussian, substream};

use super::backward::{backward, Gradients};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Coordinates whose analytic gradient is at most this are skipped when
/// computing relative error.
pub const MIN_ANALYTIC: f64 = 1e-8;

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn set_param(p: &mut ProjectorParams<f64>, section: usize, k: usize, v: f64) {
    p.sections_mut()[section].1.data_mut()[k] = v;
}

/// Central-difference gradient of `loss(forward_video(params, frames, mask))`
/// with respect to every parameter and frame coordinate.
pub fn finite_diff(
    params: &ProjectorParams<f64>,
    frames: &FrameEmbeddings<f64>,
    mask: &FrameMask,
    loss: impl Fn(&Matrix) -> f64,
    h: f64,
) -> Result<Gradients> {
    let eval = |p: &ProjectorParams<f64>, f: &FrameEmbeddings<f64>| forward_video(p, f, mask).map(|y| loss(&y));

    let mut p = params.clone();
    let mut grad = ProjectorParams::zeros(&params.config);
    for s in 0..grad.sections().len() {
        let len = params.sections()[s].1.data().len();
        for k in 0..len {
            let x = params.sections()[s].1.data()[k];
            set_param(&mut p, s, k, x + h);
            let plus = eval(&p, frames)?;
            set_param(&mut p, s, k, x - h);
            let minus = eval(&p, frames)?;
            set_param(&mut p, s, k, x);
            grad.sections_mut()[s].1.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
    }

    let mut f = frames.clone();
    let mut d_tokens = Matrix::zeros(frames.tokens().rows(), frames.channels());
    for k in 0..d_tokens.data().len() {
        let x = frames.tokens().data()[k];
        f.tokens_mut().data_mut()[k] = x + h;
        let plus = eval(params, &f)?;
        f.tokens_mut().data_mut()[k] = x - h;
        let minus = eval(params, &f)?;
        f.tokens_mut().data_mut()[k] = x;
        d_tokens.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    Ok(Gradients {
        params: grad,
        frames: FrameEmbeddings::from_tokens(frames.tokens_per_frame(), d_tokens)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub mask_rule: MaskRule,
    pub use_tpe: bool,
    pub seed: u64,
    pub n_coordinates: usize,
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Largest `|analytic - numeric| / |analytic|` over coordinates with
/// `|analytic| > 1e-8`; returns `(max, checked, total, worst coordinate)`.
pub fn compare(analytic: &Gradients, numeric: &Gradients) -> (f64, usize, usize, String) {
    let mut pairs: Vec<(String, &[f64], &[f64])> = analytic
        .params
        .sections()
        .iter()
        .zip(numeric.params.sections().iter())
        .map(|((name, a), (_, n))| (name.to_string(), a.data(), n.data()))
        .collect();
    pairs.push(("frames".into(), analytic.frames.tokens().data(), numeric.frames.tokens().data()));

    let mut worst = (0.0, String::new());
    let mut checked = 0;
    let mut total = 0;
    for (name, a, n) in pairs {
        for (k, (&av, &nv)) in a.iter().zip(n).enumerate() {
            total += 1;
            if av.abs() <= MIN_ANALYTIC {
                continue;
            }
            checked += 1;
            let rel = (av - nv).abs() / av.abs();
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, format!("{name}[{k}]"));
            }
        }
    }
    (worst.0, checked, total, worst.1)
}

/// One oracle run on the tiny configuration (4 queries, 3 frames of 2
/// tokens, 5 input channels, width 8, 2 heads): random frames and upstream
/// from `seed`, loss `<upstream, Y>`.
pub fn gradcheck_case(rule: MaskRule, use_tpe: bool, seed: u64, h: f64) -> Result<GradCheckSummary> {
    let cfg = ProjectorConfig {
        mask_rule: rule,
        use_tpe,
        ..ProjectorConfig::tiny(seed)
    };
    let params = init_params(&cfg)?;
    let (t, l) = (3, 2);
    let mut rng = substream(seed, "gradcheck-frames");
    let frames = FrameEmbeddings::from_tokens(l, Matrix::from_fn(t * l, cfg.input_dim, |_, _| gaussian(&mut rng, 1.0)))?;
    let mut rng = substream(seed, "gradcheck-upstream");
    let upstream = Matrix::from_fn(cfg.n_queries, cfg.model_dim, |_, _| gaussian(&mut rng, 1.0));
    let mask = rule.build(cfg.n_queries, t)?;

    let analytic = backward(&params, &frames, &mask, &upstream)?;
    let numeric = finite_diff(&params, &frames, &mask, |y| y.dot(&upstream).expect("shapes match"), h)?;
    let (max_rel_error, n_checked, n_coordinates, worst) = compare(&analytic, &numeric);
    Ok(GradCheckSummary {
        mask_rule: rule,
        use_tpe,
        seed,
        n_coordinates,
        n_checked,
        max_rel_error,
        worst,
    })
}
