use crate::error::{Error, Result};
use crate::masks::FrameMask;
use crate::numkernel::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::projector::{forward_cached, gelu_grad, FrameEmbeddings, ForwardCache, LayerNormCache, ProjectorParams};

/// Gradients for every parameter section plus the input frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: ProjectorParams<f64>,
    pub frames: FrameEmbeddings<f64>,
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Backward through `gain * xhat + bias`. Accumulates into `dgain`/`dbias`
/// and returns the input gradient.
fn layer_norm_backward(dout: &Matrix, cache: &LayerNormCache, gain: &Matrix, dgain: &mut Matrix, dbias: &mut Matrix) -> Matrix {
    let c = dout.cols();
    let inv_c = 1.0 / c as f64;
    let mut dx = Matrix::zeros(dout.rows(), c);
    let mut dxhat = vec![0.0; c];
    for r in 0..dout.rows() {
        let xhat = cache.xhat.row(r);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for k in 0..c {
            let d = dout[(r, k)];
            dgain[(0, k)] += d * xhat[k];
            dbias[(0, k)] += d;
            dxhat[k] = d * gain[(0, k)];
            m1 += dxhat[k];
            m2 += dxhat[k] * xhat[k];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        let rstd = cache.rstd[r];
        for k in 0..c {
            dx[(r, k)] = rstd * (dxhat[k] - m1 - xhat[k] * m2);
        }
    }
    dx
}

/// Gradients of `<upstream, Y>` given the intermediates of the forward pass
/// that produced `Y`. Returns the parameter gradients and the gradient with
/// respect to the (embedded) tokens.
pub fn backward_from_cache(
    params: &ProjectorParams<f64>,
    cache: &ForwardCache<f64>,
    upstream: &Matrix,
) -> Result<(ProjectorParams<f64>, Matrix)> {
    let cfg = &params.config;
    if upstream.shape() != (cache.queries.rows(), cfg.model_dim) {
        return Err(Error::shape(
            "backward",
            format!("upstream {}", upstream.shape_str()),
            format!("output {}x{}", cache.queries.rows(), cfg.model_dim),
        ));
    }
    let mut g = ProjectorParams::zeros(cfg);
    let dy = upstream;

    // Y = H + GELU(U) W2 + b2, U = LN2(H) W1 + b1
    g.ffn_out_bias = col_sums(dy);
    g.ffn_out = matmul_tn(&cache.ffn_act, dy)?;
    let mut d_pre = matmul_nt(dy, &params.ffn_out)?;
    for (d, &u) in d_pre.data_mut().iter_mut().zip(cache.ffn_pre.data()) {
        *d *= gelu_grad(u);
    }
    g.ffn_in_bias = col_sums(&d_pre);
    g.ffn_in = matmul_tn(&cache.hidden_norm, &d_pre)?;
    let d_hidden_norm = matmul_nt(&d_pre, &params.ffn_in)?;
    let mut d_hidden = dy.clone();
    d_hidden.add_assign(&layer_norm_backward(
        &d_hidden_norm,
        &cache.hidden_ln,
        &params.ffn_norm_gain,
        &mut g.ffn_norm_gain,
        &mut g.ffn_norm_bias,
    ))?;

    // H = Q + A Wo
    g.out_proj = matmul_tn(&cache.attn, &d_hidden)?;
    let d_attn = matmul_nt(&d_hidden, &params.out_proj)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let n_tokens = cache.tokens.rows();
    let mut d_keys = Matrix::zeros(n_tokens, cfg.model_dim);
    let mut d_values = Matrix::zeros(n_tokens, cfg.model_dim);
    let mut d_qn = Matrix::zeros(cache.queries.rows(), cfg.model_dim);
    for (h, w) in cache.weights.iter().enumerate() {
        let d_out = d_attn.col_block(h * dh, dh);
        let v_h = cache.values.col_block(h * dh, dh);
        let k_h = cache.keys.col_block(h * dh, dh);
        let q_h = cache.queries_norm.col_block(h * dh, dh);

        let d_w = matmul_nt(&d_out, &v_h)?;
        d_values.set_col_block(h * dh, &matmul_tn(w, &d_out)?);

        // softmax backward; hidden keys have weight exactly 0 and stay 0
        let mut d_logits = Matrix::zeros(w.rows(), w.cols());
        for i in 0..w.rows() {
            let wr = w.row(i);
            let dr = d_w.row(i);
            let dot: f64 = wr.iter().zip(dr).map(|(a, b)| a * b).sum();
            for (k, o) in d_logits.row_mut(i).iter_mut().enumerate() {
                *o = if wr[k] == 0.0 { 0.0 } else { wr[k] * (dr[k] - dot) * scale };
            }
        }
        d_qn.set_col_block(h * dh, &matmul(&d_logits, &k_h)?);
        d_keys.set_col_block(h * dh, &matmul_tn(&d_logits, &q_h)?);
    }

    g.key_proj = matmul_tn(&cache.tokens, &d_keys)?;
    g.value_proj = matmul_tn(&cache.tokens, &d_values)?;
    let mut d_tokens = matmul_nt(&d_keys, &params.key_proj)?;
    d_tokens.add_assign(&matmul_nt(&d_values, &params.value_proj)?)?;

    let mut d_queries = d_hidden;
    d_queries.add_assign(&layer_norm_backward(
        &d_qn,
        &cache.queries_ln,
        &params.attn_norm_gain,
        &mut g.attn_norm_gain,
        &mut g.attn_norm_bias,
    ))?;
    g.queries = d_queries;
    Ok((g, d_tokens))
}

/// Exact gradients of `<upstream, forward_video(params, frames, mask)>` with
/// respect to every parameter and every frame value. The temporal embedding
/// is additive, so the token gradient is the frame gradient.
pub fn backward(
    params: &ProjectorParams<f64>,
    frames: &FrameEmbeddings<f64>,
    mask: &FrameMask,
    upstream: &Matrix,
) -> Result<Gradients> {
    let (_, cache) = forward_cached(params, frames, mask)?;
    let (g, d_tokens) = backward_from_cache(params, &cache, upstream)?;
    Ok(Gradients {
        params: g,
        frames: FrameEmbeddings::from_tokens(frames.tokens_per_frame(), d_tokens)?,
    })
}
