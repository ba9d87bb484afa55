use ccam::consistency::{
    convergence_run, cross_count_consistency, discrete_output, make_signal, max_row_relative_error, quadrature_reference,
    ContinuousVideoSignal, SignalSpec,
};
use ccam::numkernel::Matrix;
use ccam::projector::{finish, forward_image, init_params, ProjectorConfig, ProjectorParams};

const COUNTS: [usize; 5] = [8, 16, 32, 64, 128];

fn setup(seed: u64) -> (ProjectorParams, ContinuousVideoSignal) {
    let cfg = ProjectorConfig {
        n_queries: 32,
        model_dim: 16,
        input_dim: 8,
        n_heads: 4,
        seed,
        ..ProjectorConfig::default()
    };
    let sig = make_signal(&SignalSpec {
        seed,
        ..SignalSpec::default()
    })
    .unwrap();
    (init_params(&cfg).unwrap(), sig)
}

/// Midpoint rule on `g` nodes, written out directly from the parameters.
fn midpoint_reference(p: &ProjectorParams, sig: &ContinuousVideoSignal, g: usize) -> Matrix {
    let cfg = &p.config;
    let (n, c, h) = (cfg.n_queries, cfg.model_dim, cfg.n_heads);
    let dh = c / h;
    let qn: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row = p.queries.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + 1e-5).sqrt();
            (0..c)
                .map(|k| (row[k] - mean) * r * p.attn_norm_gain[(0, k)] + p.attn_norm_bias[(0, k)])
                .collect()
        })
        .collect();
    let mut num = vec![vec![0.0; c]; n];
    let mut den = vec![vec![0.0; h]; n];
    let mut x = Matrix::zeros(sig.tokens, sig.channels);
    for node in 0..g {
        let t = (node as f64 + 0.5) * sig.duration / g as f64;
        sig.eval_into(t, x.data_mut());
        for tok in 0..sig.tokens {
            let xr = x.row(tok);
            let proj = |w: &Matrix| -> Vec<f64> {
                (0..c).map(|k| xr.iter().enumerate().map(|(ci, &v)| v * w[(ci, k)]).sum()).collect()
            };
            let key = proj(&p.key_proj);
            let val = proj(&p.value_proj);
            for i in 0..n {
                if (2 * node + 1) * n >= 2 * (i + 1) * g {
                    continue;
                }
                for head in 0..h {
                    let s = head * dh;
                    let logit: f64 = (s..s + dh).map(|k| qn[i][k] * key[k]).sum::<f64>() / (dh as f64).sqrt();
                    let w = logit.exp();
                    den[i][head] += w;
                    for k in s..s + dh {
                        num[i][k] += w * val[k];
                    }
                }
            }
        }
    }
    let attn = Matrix::from_fn(n, c, |i, k| num[i][k] / den[i][k / dh]);
    finish(p, &p.queries, &attn).unwrap()
}

#[test]
fn band_limited_seed_3_converges() {
    let (p, sig) = setup(3);
    let r = convergence_run(&p, &sig, &COUNTS, 8192).unwrap();
    assert!(r.strictly_decreasing(), "{:?}", r.errors);
    assert!(r.slope <= -0.8, "slope {}", r.slope);
    assert!(r.errors.iter().all(|&e| e >= 0.0));
}

#[test]
fn finer_counts_agree_better() {
    let (p, sig) = setup(3);
    let near = cross_count_consistency(&p, &sig, 64, 128).unwrap();
    let far = cross_count_consistency(&p, &sig, 8, 128).unwrap();
    assert!(near < far, "{near} vs {far}");
}

#[test]
fn discrepancy_bounded_by_errors() {
    for seed in 0..3 {
        let (p, sig) = setup(seed);
        let r = convergence_run(&p, &sig, &COUNTS, 8192).unwrap();
        for (a, &ta) in COUNTS.iter().enumerate() {
            for (b, &tb) in COUNTS.iter().enumerate() {
                if a == b {
                    continue;
                }
                let d = cross_count_consistency(&p, &sig, ta, tb).unwrap();
                assert!(d <= r.errors[a] + r.errors[b], "seed {seed} ({ta},{tb}): {d}");
            }
        }
    }
}

#[test]
fn constant_signal_collapses() {
    let (p, _) = setup(1);
    let value = Matrix::from_fn(2, 8, |r, c| ((3 * r + c) as f64 * 0.7).sin() * 2.0);
    let sig = ContinuousVideoSignal::constant(&value, 1.0);
    let image = forward_image(&p, &value).unwrap();
    let reference = quadrature_reference(&p, &sig, 8192).unwrap();
    assert!(max_row_relative_error(&reference, &image).unwrap() < 1e-9);
    for t in [1, 8, 16, 96, 128] {
        let y = discrete_output(&p, &sig, t).unwrap();
        assert!(max_row_relative_error(&y, &reference).unwrap() < 1e-9, "T={t}");
        assert!(cross_count_consistency(&p, &sig, t, 128).unwrap() < 1e-9);
    }
}

#[test]
fn reference_error_is_first_order_in_grid_step() {
    let (p, sig) = setup(3);
    let r1 = quadrature_reference(&p, &sig, 4096).unwrap();
    let r2 = quadrature_reference(&p, &sig, 8192).unwrap();
    let r3 = quadrature_reference(&p, &sig, 16384).unwrap();
    let ratio = max_row_relative_error(&r1, &r2).unwrap() / max_row_relative_error(&r2, &r3).unwrap();
    assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn grid_refinement_changes_reference_below_1e_6() {
    let (p, sig) = setup(3);
    let coarse = quadrature_reference(&p, &sig, 8192).unwrap();
    let fine = quadrature_reference(&p, &sig, 16384).unwrap();
    let change = max_row_relative_error(&coarse, &fine).unwrap();
    assert!(change < 1e-6, "refinement change {change:e}");
}

#[test]
fn reference_matches_finer_midpoint_rule() {
    let (p, sig) = setup(3);
    let reference = quadrature_reference(&p, &sig, 8192).unwrap();
    let mid = midpoint_reference(&p, &sig, 81920);
    let err = max_row_relative_error(&reference, &mid).unwrap();
    assert!(err < 1e-5, "midpoint disagreement {err:e}");
}

/// Cancelling the first-order term of the left sums recovers the midpoint
/// value, so the gap above is the reference's own step error.
#[test]
fn extrapolated_reference_matches_midpoint_rule() {
    let (p, sig) = setup(3);
    let r1 = quadrature_reference(&p, &sig, 8192).unwrap();
    let r2 = quadrature_reference(&p, &sig, 16384).unwrap();
    let extrapolated = r2.scale(2.0).sub(&r1).unwrap();
    let mid = midpoint_reference(&p, &sig, 81920);
    let err = max_row_relative_error(&extrapolated, &mid).unwrap();
    assert!(err < 1e-5, "{err:e}");
}
