//! Parameter-free sinusoidal embedding of the frame index.

use crate::numkernel::Real;

use super::frames::FrameEmbeddings;

const BASE_PERIOD: f64 = 10_000.0;

/// Embedding value of channel `c` (of `channels`) at frame position `pos`:
/// even channels carry `sin`, odd channels `cos`, channel pair `k` using
/// frequency `BASE_PERIOD^(-2k / channels)`.
pub fn tpe_value(pos: usize, c: usize, channels: usize) -> f64 {
    let k = (c / 2) as f64;
    let freq = BASE_PERIOD.powf(-2.0 * k / channels as f64);
    let angle = pos as f64 * freq;
    if c.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Adds the embedding of frame index `j` to every token of frame `j`.
pub fn add_tpe<T: Real>(frames: &FrameEmbeddings<T>) -> FrameEmbeddings<T> {
    let mut out = frames.clone();
    let l = frames.tokens_per_frame();
    let channels = frames.channels();
    let table: Vec<Vec<T>> = (0..frames.n_frames())
        .map(|j| (0..channels).map(|c| T::from_f64(tpe_value(j, c, channels))).collect())
        .collect();
    let tokens = out.tokens_mut();
    for r in 0..tokens.rows() {
        for (x, &e) in tokens.row_mut(r).iter_mut().zip(&table[r / l]) {
            *x += e;
        }
    }
    out
}
