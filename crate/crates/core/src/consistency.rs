//! Frame-count consistency on continuous signals.
//!
//! A video is modelled as a bounded, band-limited signal `x(t)` on
//! `[0, D]`. Query `i` of the causal projector should approximate
//!
//! ```text
//! y_i = ∫_0^{T_i} exp(q_i K(x(τ))ᵀ) V(x(τ)) dτ / ∫_0^{T_i} exp(q_i K(x(τ))ᵀ) 1 dτ,   T_i = (i+1) D / N
//! ```
//!
//! and sampling `T` frames at `t_j = j D / T` with the `ccam-continuous`
//! mask is the Riemann sum of that ratio. The reference integral is taken
//! on a fine uniform grid and pushed through the same output projection and
//! feed-forward block as the discrete path.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::digest::digest_of;
use crate::error::{Error, Result};
use crate::masks::build_ccam_continuous;
use crate::numkernel::{matmul, Matrix};
use crate::projector::{finish, forward_video, normalized_queries, FrameEmbeddings, ProjectorConfig, ProjectorParams};
use crate::rng::substream;

pub const DEFAULT_GRID_POINTS: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amplitude: f64,
    /// Radians per unit time.
    pub angular_freq: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSpec {
    pub tokens: usize,
    pub channels: usize,
    pub duration: f64,
    pub max_harmonics: usize,
    /// Upper bound on frequencies, in cycles per duration.
    pub max_cycles: f64,
    /// Bound on `sum |amplitude|` per component, hence on `|x(t)|`.
    pub amplitude_budget: f64,
    pub seed: u64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            tokens: 2,
            channels: 8,
            duration: 1.0,
            max_harmonics: 7,
            max_cycles: 4.0,
            amplitude_budget: 3.0,
            seed: 0,
        }
    }
}

/// Truncated Fourier series per (token, channel) component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousVideoSignal {
    pub duration: f64,
    pub tokens: usize,
    pub channels: usize,
    /// `tokens * channels` components, token-major.
    pub harmonics: Vec<Vec<Harmonic>>,
    pub seed: u64,
}

/// Draws a band-limited signal: every component gets `max_harmonics`
/// sinusoids with frequencies uniform in `[0, max_cycles]` cycles per
/// duration, uniform phases, and amplitudes rescaled so that their absolute
/// sum is at most `amplitude_budget`.
pub fn make_signal(spec: &SignalSpec) -> Result<ContinuousVideoSignal> {
    if spec.tokens == 0 || spec.channels == 0 {
        return Err(Error::invalid("signal needs at least one token and one channel"));
    }
    if !(spec.duration > 0.0 && spec.duration.is_finite()) {
        return Err(Error::invalid("signal duration must be positive"));
    }
    if !(spec.max_cycles >= 0.0 && spec.max_cycles <= 16.0) {
        return Err(Error::invalid("max_cycles must lie in [0, 16]"));
    }
    if !(spec.amplitude_budget >= 0.0 && spec.amplitude_budget <= 3.0) {
        return Err(Error::invalid("amplitude_budget must lie in [0, 3]"));
    }
    let mut rng = substream(spec.seed, "signal");
    let mut harmonics = Vec::with_capacity(spec.tokens * spec.channels);
    for _ in 0..spec.tokens * spec.channels {
        let mut comp: Vec<Harmonic> = (0..spec.max_harmonics)
            .map(|_| Harmonic {
                amplitude: rng.random_range(-1.0..1.0),
                angular_freq: 2.0 * PI * rng.random_range(0.0..=spec.max_cycles) / spec.duration,
                phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect();
        let total: f64 = comp.iter().map(|h| h.amplitude.abs()).sum();
        if total > 0.0 {
            let target = spec.amplitude_budget * rng.random_range(0.3..1.0);
            for h in &mut comp {
                h.amplitude *= target / total;
            }
        }
        harmonics.push(comp);
    }
    Ok(ContinuousVideoSignal {
        duration: spec.duration,
        tokens: spec.tokens,
        channels: spec.channels,
        harmonics,
        seed: spec.seed,
    })
}

impl ContinuousVideoSignal {
    /// Time-invariant signal equal to `value` (`tokens x channels`).
    pub fn constant(value: &Matrix, duration: f64) -> Self {
        let harmonics = value
            .data()
            .iter()
            .map(|&a| {
                vec![Harmonic {
                    amplitude: a,
                    angular_freq: 0.0,
                    phase: PI / 2.0,
                }]
            })
            .collect();
        Self {
            duration,
            tokens: value.rows(),
            channels: value.cols(),
            harmonics,
            seed: 0,
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        for (o, comp) in out.iter_mut().zip(&self.harmonics) {
            *o = comp.iter().map(|h| h.amplitude * (h.angular_freq * t + h.phase).sin()).sum();
        }
    }

    /// `x(t)` as a `tokens x channels` matrix.
    pub fn eval(&self, t: f64) -> Matrix {
        let mut m = Matrix::zeros(self.tokens, self.channels);
        self.eval_into(t, m.data_mut());
        m
    }

    /// Samples at the given times, stacked as frames.
    pub fn sample_at(&self, times: &[f64]) -> Result<FrameEmbeddings> {
        let per = self.tokens * self.channels;
        let mut data = vec![0.0; times.len() * per];
        for (chunk, &t) in data.chunks_mut(per).zip(times) {
            self.eval_into(t, chunk);
        }
        FrameEmbeddings::from_tokens(self.tokens, Matrix::from_vec(times.len() * self.tokens, self.channels, data)?)
    }
}

/// Frames `x(j D / T)` for `j = 0..T` (left endpoints).
pub fn sample_frames(sig: &ContinuousVideoSignal, n_frames: usize) -> Result<FrameEmbeddings> {
    if n_frames == 0 {
        return Err(Error::invalid("need at least one frame"));
    }
    let dt = sig.duration / n_frames as f64;
    let times: Vec<f64> = (0..n_frames).map(|j| j as f64 * dt).collect();
    sig.sample_at(&times)
}

fn check_signal(params: &ProjectorParams, sig: &ContinuousVideoSignal) -> Result<()> {
    if params.config.use_tpe {
        return Err(Error::invalid(
            "temporal position embeddings index frames, not time; disable use_tpe for consistency runs",
        ));
    }
    if sig.channels != params.config.input_dim {
        return Err(Error::shape(
            "consistency",
            format!("signal channels {}", sig.channels),
            format!("input_dim {}", params.config.input_dim),
        ));
    }
    Ok(())
}

/// Left-Riemann approximation of the continuous causal attention on
/// `grid_points` uniform nodes `t_g = g D / G`; query `i` integrates over
/// nodes with `t_g < T_i`. Returns the full `N x C` projector output.
pub fn quadrature_reference(params: &ProjectorParams, sig: &ContinuousVideoSignal, grid_points: usize) -> Result<Matrix> {
    check_signal(params, sig)?;
    let n = params.config.n_queries;
    if grid_points < 2 * n {
        return Err(Error::invalid(format!(
            "grid_points {grid_points} must be at least twice the query count {n}"
        )));
    }
    let times: Vec<f64> = (0..grid_points).map(|g| g as f64 * sig.duration / grid_points as f64).collect();
    let nodes = sig.sample_at(&times)?;
    // nodes with g N < (i + 1) G lie strictly inside [0, T_i)
    let visible_nodes: Vec<usize> = (0..n).map(|i| ((i + 1) * grid_points).div_ceil(n)).collect();
    continuous_attention_output(params, &nodes, &visible_nodes)
}

/// Projector output when query `i` attends, with equal node weights, to the
/// first `visible_nodes[i]` frames of `nodes`. Computed row by row so the
/// full `N x (G L)` weight matrix is never materialized.
pub fn continuous_attention_output(params: &ProjectorParams, nodes: &FrameEmbeddings, visible_nodes: &[usize]) -> Result<Matrix> {
    let cfg = &params.config;
    let l = nodes.tokens_per_frame();
    let keys = matmul(nodes.tokens(), &params.key_proj)?;
    let values = matmul(nodes.tokens(), &params.value_proj)?;
    let (qn, _) = normalized_queries(params, &params.queries);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = Matrix::zeros(cfg.n_queries, cfg.model_dim);
    let mut logits = Vec::new();
    for (i, &m) in visible_nodes.iter().enumerate() {
        if m == 0 || m > nodes.n_frames() {
            return Err(Error::EmptyMaskRow { row: i });
        }
        let k_count = m * l;
        for h in 0..cfg.n_heads {
            let q = &qn.row(i)[h * dh..(h + 1) * dh];
            logits.clear();
            logits.extend((0..k_count).map(|k| {
                let kr = &keys.row(k)[h * dh..(h + 1) * dh];
                q.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale
            }));
            let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut den = 0.0;
            let mut num = vec![0.0; dh];
            for (k, &lg) in logits.iter().enumerate() {
                let w = (lg - shift).exp();
                den += w;
                for (o, &v) in num.iter_mut().zip(&values.row(k)[h * dh..(h + 1) * dh]) {
                    *o += w * v;
                }
            }
            for (d, v) in num.into_iter().enumerate() {
                attn[(i, h * dh + d)] = v / den;
            }
        }
    }
    finish(params, &params.queries, &attn)
}

/// Largest relative row distance `max_i |a_i - b_i| / |b_i|`.
pub fn max_row_relative_error(a: &Matrix, reference: &Matrix) -> Result<f64> {
    let diff = a.sub(reference)?;
    Ok((0..a.rows())
        .map(|i| {
            let num: f64 = diff.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let den: f64 = reference.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            num / den
        })
        .fold(0.0, f64::max))
}

/// CCAM output for `n_frames` left-endpoint samples under the
/// `ccam-continuous` mask.
pub fn discrete_output(params: &ProjectorParams, sig: &ContinuousVideoSignal, n_frames: usize) -> Result<Matrix> {
    check_signal(params, sig)?;
    let frames = sample_frames(sig, n_frames)?;
    let mask = build_ccam_continuous(params.config.n_queries, n_frames)?;
    forward_video(params, &frames, &mask)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub frame_counts: Vec<usize>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub seed: u64,
    pub grid_points: usize,
    pub config_digest: String,
}

impl ConvergenceReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.errors.windows(2).all(|w| w[1] < w[0])
    }

    pub fn error_at(&self, n_frames: usize) -> Option<f64> {
        self.frame_counts.iter().position(|&t| t == n_frames).map(|k| self.errors[k])
    }
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    projector: &'a ProjectorConfig,
    signal_seed: u64,
    signal_duration: f64,
    frame_counts: &'a [usize],
    grid_points: usize,
}

/// Error of the discrete causal output against the quadrature reference for
/// each frame count, plus the fitted log-log slope.
pub fn convergence_run(
    params: &ProjectorParams,
    sig: &ContinuousVideoSignal,
    frame_counts: &[usize],
    grid_points: usize,
) -> Result<ConvergenceReport> {
    if frame_counts.is_empty() || frame_counts.windows(2).any(|w| w[1] <= w[0]) || frame_counts[0] == 0 {
        return Err(Error::invalid("frame_counts must be positive and strictly increasing"));
    }
    let reference = quadrature_reference(params, sig, grid_points)?;
    let errors = frame_counts
        .iter()
        .map(|&t| max_row_relative_error(&discrete_output(params, sig, t)?, &reference))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = frame_counts.iter().map(|&t| t as f64).collect();
    let slope = if errors.len() >= 2 && errors.iter().all(|&e| e > 0.0) {
        loglog_slope(&xs, &errors)
    } else {
        f64::NAN
    };
    let config_digest = digest_of(&RunIdentity {
        projector: &params.config,
        signal_seed: sig.seed,
        signal_duration: sig.duration,
        frame_counts,
        grid_points,
    });
    Ok(ConvergenceReport {
        frame_counts: frame_counts.to_vec(),
        errors,
        slope,
        seed: sig.seed,
        grid_points,
        config_digest,
    })
}

/// `|Y(T_a) - Y(T_b)|_F / |Y(T_b)|_F` with `ccam-continuous` masks.
pub fn cross_count_consistency(params: &ProjectorParams, sig: &ContinuousVideoSignal, t_a: usize, t_b: usize) -> Result<f64> {
    let yb = discrete_output(params, sig, t_b)?;
    if t_a == t_b {
        return Ok(0.0);
    }
    let ya = discrete_output(params, sig, t_a)?;
    Ok(ya.sub(&yb)?.frobenius() / yb.frobenius())
}
