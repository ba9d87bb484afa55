//! Forward pass: pre-norm masked multi-head cross-attention from the learnable
//! queries to the frame tokens, then a pre-norm GELU feed-forward block, each
//! wrapped in a residual connection.
//!
//! ```text
//! qn = LN1(Q)
//! A  = concat_h softmax_M(qn_h K_h(x)^T / sqrt(d_h)) V_h(x)
//! H  = Q + A W_o
//! Y  = H + GELU(LN2(H) W_1 + b_1) W_2 + b_2
//! ```

use crate::error::{Error, Result};
use crate::masks::{build_full, FrameMask};
use crate::numkernel::{masked_attend_with_weights, matmul, matmul_nt, Matrix, Real, TokenMask};

use super::frames::FrameEmbeddings;
use super::params::ProjectorParams;
use super::tpe::add_tpe;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormCache<T = f64> {
    pub xhat: Matrix<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer normalization with affine gain and bias (`1 x C` each).
pub fn layer_norm<T: Real>(x: &Matrix<T>, gain: &Matrix<T>, bias: &Matrix<T>) -> (Matrix<T>, LayerNormCache<T>) {
    let c = x.cols();
    let inv_c = T::from_f64(1.0 / c as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = Matrix::zeros(x.rows(), c);
    let mut out = Matrix::zeros(x.rows(), c);
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for k in 0..c {
            let h = (row[k] - mean) * rs;
            xhat[(r, k)] = h;
            out[(r, k)] = h * gain[(0, k)] + bias[(0, k)];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `d gelu / dx = Φ(x) + x φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f64> {
    /// Raw queries the pass ran with (all of them, or a selected subset).
    pub queries: Matrix<T>,
    /// Flattened frame tokens, after the optional temporal embedding.
    pub tokens: Matrix<T>,
    pub mask: TokenMask,
    pub queries_norm: Matrix<T>,
    pub queries_ln: LayerNormCache<T>,
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
    /// Attention weights per head, `N x K` each.
    pub weights: Vec<Matrix<T>>,
    pub attn: Matrix<T>,
    pub hidden: Matrix<T>,
    pub hidden_norm: Matrix<T>,
    pub hidden_ln: LayerNormCache<T>,
    pub ffn_pre: Matrix<T>,
    pub ffn_act: Matrix<T>,
}

pub fn normalized_queries<T: Real>(params: &ProjectorParams<T>, queries: &Matrix<T>) -> (Matrix<T>, LayerNormCache<T>) {
    layer_norm(queries, &params.attn_norm_gain, &params.attn_norm_bias)
}

/// Head-concatenated attention rows `A` (before the output projection) for
/// normalized queries `qn` over `tokens` under `mask`. Returns
/// `(A, keys, values, per-head weights)`.
#[allow(clippy::type_complexity)]
pub fn attention_core<T: Real>(
    params: &ProjectorParams<T>,
    queries_norm: &Matrix<T>,
    tokens: &Matrix<T>,
    mask: &TokenMask,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>, Vec<Matrix<T>>)> {
    let cfg = &params.config;
    if tokens.cols() != cfg.input_dim {
        return Err(Error::shape(
            "forward",
            format!("tokens {}", tokens.shape_str()),
            format!("input_dim {}", cfg.input_dim),
        ));
    }
    if mask.n_queries() != queries_norm.rows() || mask.n_keys() != tokens.rows() {
        return Err(Error::shape(
            "forward",
            format!("mask {}x{}", mask.n_queries(), mask.n_keys()),
            format!("queries {} / tokens {}", queries_norm.rows(), tokens.rows()),
        ));
    }
    let keys = matmul(tokens, &params.key_proj)?;
    let values = matmul(tokens, &params.value_proj)?;
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut attn = Matrix::zeros(queries_norm.rows(), cfg.model_dim);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q_h = queries_norm.col_block(h * dh, dh);
        let k_h = keys.col_block(h * dh, dh);
        let v_h = values.col_block(h * dh, dh);
        let logits = matmul_nt(&q_h, &k_h)?.scale(scale);
        let (o_h, w_h) = masked_attend_with_weights(&logits, mask, &v_h)?;
        attn.set_col_block(h * dh, &o_h);
        weights.push(w_h);
    }
    Ok((attn, keys, values, weights))
}

struct Tail<T> {
    hidden: Matrix<T>,
    hidden_norm: Matrix<T>,
    hidden_ln: LayerNormCache<T>,
    ffn_pre: Matrix<T>,
    ffn_act: Matrix<T>,
    out: Matrix<T>,
}

fn finish_cached<T: Real>(params: &ProjectorParams<T>, queries: &Matrix<T>, attn: &Matrix<T>) -> Result<Tail<T>> {
    let hidden = queries.add(&matmul(attn, &params.out_proj)?)?;
    let (hidden_norm, hidden_ln) = layer_norm(&hidden, &params.ffn_norm_gain, &params.ffn_norm_bias);
    let mut ffn_pre = matmul(&hidden_norm, &params.ffn_in)?;
    for r in 0..ffn_pre.rows() {
        for (u, &b) in ffn_pre.row_mut(r).iter_mut().zip(params.ffn_in_bias.data()) {
            *u += b;
        }
    }
    let ffn_act = ffn_pre.map(gelu);
    let mut out = matmul(&ffn_act, &params.ffn_out)?;
    for r in 0..out.rows() {
        for ((y, &b), &h) in out.row_mut(r).iter_mut().zip(params.ffn_out_bias.data()).zip(hidden.row(r)) {
            *y += b + h;
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("projector output"));
    }
    Ok(Tail {
        hidden,
        hidden_norm,
        hidden_ln,
        ffn_pre,
        ffn_act,
        out,
    })
}

/// Output projection, attention residual and the feed-forward sublayer
/// applied to head-concatenated attention rows.
pub fn finish<T: Real>(params: &ProjectorParams<T>, queries: &Matrix<T>, attn: &Matrix<T>) -> Result<Matrix<T>> {
    finish_cached(params, queries, attn).map(|t| t.out)
}

fn run<T: Real>(
    params: &ProjectorParams<T>,
    queries: &Matrix<T>,
    tokens: &Matrix<T>,
    mask: &TokenMask,
) -> Result<(Matrix<T>, ForwardCache<T>)> {
    let (queries_norm, queries_ln) = normalized_queries(params, queries);
    let (attn, keys, values, weights) = attention_core(params, &queries_norm, tokens, mask)?;
    let tail = finish_cached(params, queries, &attn)?;
    let cache = ForwardCache {
        queries: queries.clone(),
        tokens: tokens.clone(),
        mask: mask.clone(),
        queries_norm,
        queries_ln,
        keys,
        values,
        weights,
        attn,
        hidden: tail.hidden,
        hidden_norm: tail.hidden_norm,
        hidden_ln: tail.hidden_ln,
        ffn_pre: tail.ffn_pre,
        ffn_act: tail.ffn_act,
    };
    Ok((tail.out, cache))
}

/// Forward over already-flattened tokens with a token-level mask. The
/// temporal embedding is not applied here.
pub fn forward_tokens<T: Real>(params: &ProjectorParams<T>, tokens: &Matrix<T>, mask: &TokenMask) -> Result<Matrix<T>> {
    run(params, &params.queries, tokens, mask).map(|(y, _)| y)
}

fn prepare<T: Real>(params: &ProjectorParams<T>, frames: &FrameEmbeddings<T>, mask: &FrameMask) -> Result<(FrameEmbeddings<T>, TokenMask)> {
    let cfg = &params.config;
    if mask.n_queries() != cfg.n_queries || mask.n_frames() != frames.n_frames() {
        return Err(Error::shape(
            "forward_video",
            format!("mask {}x{}", mask.n_queries(), mask.n_frames()),
            format!("{} queries x {} frames", cfg.n_queries, frames.n_frames()),
        ));
    }
    if frames.channels() != cfg.input_dim {
        return Err(Error::shape(
            "forward_video",
            format!("{} channels", frames.channels()),
            format!("input_dim {}", cfg.input_dim),
        ));
    }
    let x = if cfg.use_tpe { add_tpe(frames) } else { frames.clone() };
    let token_mask = mask.expand_to_tokens(frames.tokens_per_frame())?;
    Ok((x, token_mask))
}

pub fn forward_cached<T: Real>(
    params: &ProjectorParams<T>,
    frames: &FrameEmbeddings<T>,
    mask: &FrameMask,
) -> Result<(Matrix<T>, ForwardCache<T>)> {
    let (x, token_mask) = prepare(params, frames, mask)?;
    run(params, &params.queries, x.tokens(), &token_mask)
}

/// `N x C` projector output for a video under a frame mask.
pub fn forward_video<T: Real>(params: &ProjectorParams<T>, frames: &FrameEmbeddings<T>, mask: &FrameMask) -> Result<Matrix<T>> {
    forward_cached(params, frames, mask).map(|(y, _)| y)
}

/// Single image (`L x C_in` tokens): a one-frame video with every token visible.
pub fn forward_image<T: Real>(params: &ProjectorParams<T>, tokens: &Matrix<T>) -> Result<Matrix<T>> {
    let frames = FrameEmbeddings::single(tokens.clone())?;
    let mask = build_full(params.config.n_queries, 1)?;
    forward_video(params, &frames, &mask)
}

/// Recomputes output row `query` from that query alone, the frames it can
/// see and an all-true mask over them. Must agree with row `query` of
/// [`forward_video`].
pub fn query_output_independence_check<T: Real>(
    params: &ProjectorParams<T>,
    frames: &FrameEmbeddings<T>,
    mask: &FrameMask,
    query: usize,
) -> Result<Matrix<T>> {
    if query >= params.config.n_queries {
        return Err(Error::invalid(format!(
            "query index {query} out of range for {} queries",
            params.config.n_queries
        )));
    }
    let (x, _) = prepare(params, frames, mask)?;
    let visible = mask.visible_frames(query);
    let sub = x.subset(&visible)?;
    let one = TokenMask::all(1, sub.tokens().rows());
    run(params, &params.queries.select_rows(&[query]), sub.tokens(), &one).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::MaskRule;
    use crate::projector::{init_params, ProjectorConfig};
    use crate::rng::{gaussian, seeded};

    fn frames(t: usize, l: usize, c: usize, seed: u64) -> FrameEmbeddings {
        let mut rng = seeded(seed);
        FrameEmbeddings::from_tokens(l, Matrix::from_fn(t * l, c, |_, _| gaussian(&mut rng, 1.0))).unwrap()
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Matrix::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap();
        let (y, _) = layer_norm(&x, &Matrix::filled(1, 4, 1.0), &Matrix::zeros(1, 4));
        for r in 0..2 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 4.0;
            let var: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn single_token_image_uses_value_row() {
        let cfg = ProjectorConfig::tiny(3);
        let p = init_params(&cfg).unwrap();
        let token = Matrix::from_fn(1, 5, |_, c| c as f64 - 2.0);
        let (qn, _) = normalized_queries(&p, &p.queries);
        let (attn, _, values, _) = attention_core(&p, &qn, &token, &TokenMask::all(4, 1)).unwrap();
        for r in 0..4 {
            assert_eq!(attn.row(r), values.row(0));
        }
    }

    #[test]
    fn duplicated_tokens_give_same_attention() {
        let cfg = ProjectorConfig::tiny(3);
        let p = init_params(&cfg).unwrap();
        let token = Matrix::from_fn(1, 5, |_, c| 0.3 * c as f64);
        let dup = Matrix::from_fn(3, 5, |_, c| 0.3 * c as f64);
        let a = forward_image(&p, &token).unwrap();
        let b = forward_image(&p, &dup).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    }

    #[test]
    fn one_frame_video_is_image() {
        let p = init_params(&ProjectorConfig::tiny(1)).unwrap();
        let f = frames(1, 3, 5, 2);
        for rule in MaskRule::ALL {
            let m = rule.build(4, 1).unwrap();
            assert_eq!(forward_video(&p, &f, &m).unwrap(), forward_image(&p, f.tokens()).unwrap());
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let p = init_params(&ProjectorConfig::tiny(1)).unwrap();
        let f = frames(3, 2, 5, 2);
        assert!(forward_video(&p, &f, &build_full(4, 2).unwrap()).is_err());
        assert!(forward_video(&p, &f, &build_full(5, 3).unwrap()).is_err());
        let wrong_channels = frames(3, 2, 6, 2);
        assert!(forward_video(&p, &wrong_channels, &build_full(4, 3).unwrap()).is_err());
    }

    #[test]
    fn independence_check_rows() {
        let p = init_params(&ProjectorConfig::tiny(42)).unwrap();
        let f = frames(3, 2, 5, 9);
        for rule in MaskRule::ALL {
            let m = rule.build(4, 3).unwrap();
            let y = forward_video(&p, &f, &m).unwrap();
            for i in 0..4 {
                let row = query_output_independence_check(&p, &f, &m, i).unwrap();
                assert!(row.max_abs_diff(&y.select_rows(&[i])).unwrap() <= 1e-12);
            }
        }
        assert!(query_output_independence_check(&p, &f, &build_full(4, 3).unwrap(), 4).is_err());
    }

    #[test]
    fn single_precision_forward_tracks_double() {
        let p = init_params(&ProjectorConfig::tiny(5)).unwrap();
        let f = frames(3, 2, 5, 1);
        let m = build_full(4, 3).unwrap();
        let y64 = forward_video(&p, &f, &m).unwrap();
        let y32 = forward_video(&p.cast::<f32>(), &f.cast::<f32>(), &m).unwrap();
        assert!(y64.max_abs_diff(&y32.cast()).unwrap() < 1e-4);
    }
}
