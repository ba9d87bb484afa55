use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Real};

/// A sampled video: `n_frames` frames of `tokens_per_frame` tokens with
/// `channels` features each, stored as the flattened `(T·L) x C_in` token
/// matrix (frame-major).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddings<T = f64> {
    tokens_per_frame: usize,
    tokens: Matrix<T>,
}

impl<T: Real> FrameEmbeddings<T> {
    pub fn from_tokens(tokens_per_frame: usize, tokens: Matrix<T>) -> Result<Self> {
        if tokens_per_frame == 0 || tokens.rows() == 0 || !tokens.rows().is_multiple_of(tokens_per_frame) {
            return Err(Error::shape(
                "FrameEmbeddings",
                format!("{} tokens", tokens.rows()),
                format!("{tokens_per_frame} tokens per frame"),
            ));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite("frame embeddings"));
        }
        Ok(Self {
            tokens_per_frame,
            tokens,
        })
    }

    pub fn from_frames(frames: &[Matrix<T>]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("no frames"))?;
        let (l, c) = first.shape();
        let mut data = Vec::with_capacity(frames.len() * l * c);
        for f in frames {
            if f.shape() != (l, c) {
                return Err(Error::shape("FrameEmbeddings::from_frames", first.shape_str(), f.shape_str()));
            }
            data.extend_from_slice(f.data());
        }
        Self::from_tokens(l, Matrix::from_vec(frames.len() * l, c, data)?)
    }

    /// Single-frame video holding an image's tokens.
    pub fn single(tokens: Matrix<T>) -> Result<Self> {
        let l = tokens.rows();
        Self::from_tokens(l, tokens)
    }

    pub fn n_frames(&self) -> usize {
        self.tokens.rows() / self.tokens_per_frame
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens(&self) -> &Matrix<T> {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut Matrix<T> {
        &mut self.tokens
    }

    pub fn frame(&self, j: usize) -> Matrix<T> {
        let idx: Vec<usize> = (j * self.tokens_per_frame..(j + 1) * self.tokens_per_frame).collect();
        self.tokens.select_rows(&idx)
    }

    /// Frames reordered so that output frame `k` is input frame `order[k]`.
    pub fn reorder(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n_frames() {
            return Err(Error::shape(
                "FrameEmbeddings::reorder",
                format!("{} frames", self.n_frames()),
                format!("{} indices", order.len()),
            ));
        }
        let idx: Vec<usize> = order
            .iter()
            .flat_map(|&j| j * self.tokens_per_frame..(j + 1) * self.tokens_per_frame)
            .collect();
        Ok(Self {
            tokens_per_frame: self.tokens_per_frame,
            tokens: self.tokens.select_rows(&idx),
        })
    }

    /// The listed frames, in order.
    pub fn subset(&self, frames: &[usize]) -> Result<Self> {
        if frames.is_empty() || frames.iter().any(|&j| j >= self.n_frames()) {
            return Err(Error::invalid("frame subset out of range"));
        }
        let idx: Vec<usize> = frames
            .iter()
            .flat_map(|&j| j * self.tokens_per_frame..(j + 1) * self.tokens_per_frame)
            .collect();
        Ok(Self {
            tokens_per_frame: self.tokens_per_frame,
            tokens: self.tokens.select_rows(&idx),
        })
    }

    pub fn swap_frames(&self, a: usize, b: usize) -> Result<Self> {
        let mut order: Vec<usize> = (0..self.n_frames()).collect();
        order.swap(a, b);
        self.reorder(&order)
    }

    pub fn cast<U: Real>(&self) -> FrameEmbeddings<U> {
        FrameEmbeddings {
            tokens_per_frame: self.tokens_per_frame,
            tokens: self.tokens.cast(),
        }
    }
}
