use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Real};
use crate::rng::{gaussian, substream};

use super::config::ProjectorConfig;

/// Learnable queries, projections, feed-forward weights and the two
/// pre-normalization affine parameters. Row vectors are stored as `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams<T = f64> {
    pub config: ProjectorConfig,
    pub queries: Matrix<T>,
    pub key_proj: Matrix<T>,
    pub value_proj: Matrix<T>,
    pub out_proj: Matrix<T>,
    pub ffn_in: Matrix<T>,
    pub ffn_in_bias: Matrix<T>,
    pub ffn_out: Matrix<T>,
    pub ffn_out_bias: Matrix<T>,
    pub attn_norm_gain: Matrix<T>,
    pub attn_norm_bias: Matrix<T>,
    pub ffn_norm_gain: Matrix<T>,
    pub ffn_norm_bias: Matrix<T>,
}

pub const SECTION_NAMES: [&str; 12] = [
    "queries",
    "key_proj",
    "value_proj",
    "out_proj",
    "ffn_in",
    "ffn_in_bias",
    "ffn_out",
    "ffn_out_bias",
    "attn_norm_gain",
    "attn_norm_bias",
    "ffn_norm_gain",
    "ffn_norm_bias",
];

impl<T: Real> ProjectorParams<T> {
    /// All-zero tensors with the shapes implied by `config`.
    pub fn zeros(config: &ProjectorConfig) -> Self {
        let (n, c, cin, f) = (config.n_queries, config.model_dim, config.input_dim, config.ffn_dim());
        Self {
            config: config.clone(),
            queries: Matrix::zeros(n, c),
            key_proj: Matrix::zeros(cin, c),
            value_proj: Matrix::zeros(cin, c),
            out_proj: Matrix::zeros(c, c),
            ffn_in: Matrix::zeros(c, f),
            ffn_in_bias: Matrix::zeros(1, f),
            ffn_out: Matrix::zeros(f, c),
            ffn_out_bias: Matrix::zeros(1, c),
            attn_norm_gain: Matrix::zeros(1, c),
            attn_norm_bias: Matrix::zeros(1, c),
            ffn_norm_gain: Matrix::zeros(1, c),
            ffn_norm_bias: Matrix::zeros(1, c),
        }
    }

    pub fn sections(&self) -> [(&'static str, &Matrix<T>); 12] {
        [
            (SECTION_NAMES[0], &self.queries),
            (SECTION_NAMES[1], &self.key_proj),
            (SECTION_NAMES[2], &self.value_proj),
            (SECTION_NAMES[3], &self.out_proj),
            (SECTION_NAMES[4], &self.ffn_in),
            (SECTION_NAMES[5], &self.ffn_in_bias),
            (SECTION_NAMES[6], &self.ffn_out),
            (SECTION_NAMES[7], &self.ffn_out_bias),
            (SECTION_NAMES[8], &self.attn_norm_gain),
            (SECTION_NAMES[9], &self.attn_norm_bias),
            (SECTION_NAMES[10], &self.ffn_norm_gain),
            (SECTION_NAMES[11], &self.ffn_norm_bias),
        ]
    }

    pub fn sections_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 12] {
        [
            (SECTION_NAMES[0], &mut self.queries),
            (SECTION_NAMES[1], &mut self.key_proj),
            (SECTION_NAMES[2], &mut self.value_proj),
            (SECTION_NAMES[3], &mut self.out_proj),
            (SECTION_NAMES[4], &mut self.ffn_in),
            (SECTION_NAMES[5], &mut self.ffn_in_bias),
            (SECTION_NAMES[6], &mut self.ffn_out),
            (SECTION_NAMES[7], &mut self.ffn_out_bias),
            (SECTION_NAMES[8], &mut self.attn_norm_gain),
            (SECTION_NAMES[9], &mut self.attn_norm_bias),
            (SECTION_NAMES[10], &mut self.ffn_norm_gain),
            (SECTION_NAMES[11], &mut self.ffn_norm_bias),
        ]
    }

    pub fn n_scalars(&self) -> usize {
        self.sections().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Checks every tensor against the shapes implied by the config.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::zeros(&self.config);
        for ((name, got), (_, want)) in self.sections().iter().zip(expected.sections().iter()) {
            if got.shape() != want.shape() {
                return Err(Error::shape("ProjectorParams", format!("{name} {}", got.shape_str()), want.shape_str()));
            }
            if !got.is_finite() {
                return Err(Error::NonFinite("projector params"));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ProjectorParams<U> {
        ProjectorParams {
            config: self.config.clone(),
            queries: self.queries.cast(),
            key_proj: self.key_proj.cast(),
            value_proj: self.value_proj.cast(),
            out_proj: self.out_proj.cast(),
            ffn_in: self.ffn_in.cast(),
            ffn_in_bias: self.ffn_in_bias.cast(),
            ffn_out: self.ffn_out.cast(),
            ffn_out_bias: self.ffn_out_bias.cast(),
            attn_norm_gain: self.attn_norm_gain.cast(),
            attn_norm_bias: self.attn_norm_bias.cast(),
            ffn_norm_gain: self.ffn_norm_gain.cast(),
            ffn_norm_bias: self.ffn_norm_bias.cast(),
        }
    }
}

impl ProjectorParams<f64> {
    /// `self += scale * other`, section by section.
    pub fn axpy(&mut self, scale: f64, other: &ProjectorParams<f64>) {
        for ((_, dst), (_, src)) in self.sections_mut().into_iter().zip(other.sections()) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += scale * s;
            }
        }
    }

    /// Sum of squares over every section.
    pub fn sq_norm(&self) -> f64 {
        self.sections()
            .iter()
            .flat_map(|(_, m)| m.data().iter())
            .map(|v| v * v)
            .sum()
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64, name: &str) -> Matrix<f64> {
    let mut rng = substream(seed, name);
    Matrix::from_fn(rows, cols, |_, _| gaussian(&mut rng, std))
}

/// Deterministic initialization from `config.seed`. Projections are drawn
/// with standard deviation `1/sqrt(fan_in)`, queries with `1/sqrt(C)`; norm
/// gains start at one and every bias at zero. Each tensor has its own
/// generator stream keyed by section name.
pub fn init_params(config: &ProjectorConfig) -> Result<ProjectorParams<f64>> {
    config.validate()?;
    let (n, c, cin, f) = (config.n_queries, config.model_dim, config.input_dim, config.ffn_dim());
    let seed = config.seed;
    let inv_sqrt = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let mut p = ProjectorParams::zeros(config);
    p.queries = gaussian_matrix(n, c, inv_sqrt(c), seed, "queries");
    p.key_proj = gaussian_matrix(cin, c, inv_sqrt(cin), seed, "key_proj");
    p.value_proj = gaussian_matrix(cin, c, inv_sqrt(cin), seed, "value_proj");
    p.out_proj = gaussian_matrix(c, c, inv_sqrt(c), seed, "out_proj");
    p.ffn_in = gaussian_matrix(c, f, inv_sqrt(c), seed, "ffn_in");
    p.ffn_out = gaussian_matrix(f, c, inv_sqrt(f), seed, "ffn_out");
    p.attn_norm_gain = Matrix::filled(1, c, 1.0);
    p.ffn_norm_gain = Matrix::filled(1, c, 1.0);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> ProjectorConfig {
        ProjectorConfig {
            n_queries: 8,
            model_dim: 16,
            input_dim: 12,
            n_heads: 4,
            seed,
            ..ProjectorConfig::default()
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        assert_eq!(init_params(&cfg(9)).unwrap(), init_params(&cfg(9)).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_params(&cfg(0)).unwrap();
        let b = init_params(&cfg(1)).unwrap();
        assert_ne!(a.queries, b.queries);
        assert_ne!(a.key_proj, b.key_proj);
    }

    #[test]
    fn shapes() {
        let p = init_params(&cfg(0)).unwrap();
        assert_eq!(p.queries.shape(), (8, 16));
        assert_eq!(p.key_proj.shape(), (12, 16));
        assert_eq!(p.value_proj.shape(), (12, 16));
        assert_eq!(p.out_proj.shape(), (16, 16));
        assert_eq!(p.ffn_in.shape(), (16, 64));
        assert_eq!(p.ffn_out.shape(), (64, 16));
        assert!(p.attn_norm_gain.data().iter().all(|&g| g == 1.0));
        assert!(p.ffn_out_bias.data().iter().all(|&b| b == 0.0));
        p.check().unwrap();
    }

    #[test]
    fn init_scale_roughly_matches_fan_in() {
        let p = init_params(&ProjectorConfig {
            n_queries: 256,
            model_dim: 64,
            input_dim: 64,
            n_heads: 8,
            ..ProjectorConfig::default()
        })
        .unwrap();
        let var = |m: &Matrix<f64>| m.data().iter().map(|v| v * v).sum::<f64>() / m.data().len() as f64;
        assert!((var(&p.key_proj) * 64.0 - 1.0).abs() < 0.1);
        assert!((var(&p.queries) * 64.0 - 1.0).abs() < 0.1);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = cfg(0);
        c.n_heads = 3;
        assert!(init_params(&c).is_err());
        c.n_heads = 4;
        c.n_queries = 0;
        assert!(init_params(&c).is_err());
    }
}
