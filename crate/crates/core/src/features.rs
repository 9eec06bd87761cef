//! Time-major feature matrices shared by every stage of the pipeline.

use crate::numerics::{NumericsError, Tensor};

/// Frames × dims matrix: mel bins, auxiliary channels, cepstra or any
/// concatenation of them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence(Tensor);

impl FeatureSequence {
    pub fn new(frames: usize, dims: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Tensor::from_vec(frames, dims, data).map(Self)
    }

    pub fn zeros(frames: usize, dims: usize) -> Self {
        Self(Tensor::zeros(frames, dims))
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self, NumericsError> {
        Tensor::from_rows(frames).map(Self)
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dims(&self) -> usize {
        self.0.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        self.0.row_mut(t)
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.0.get(t, d)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn iter_frames(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.frames()).map(move |t| self.frame(t))
    }

    /// Columns `start..start + len` of every frame.
    pub fn select_dims(&self, start: usize, len: usize) -> Self {
        let mut out = Self::zeros(self.frames(), len);
        for t in 0..self.frames() {
            out.frame_mut(t).copy_from_slice(&self.frame(t)[start..start + len]);
        }
        out
    }

    /// Frame-wise concatenation of two sequences of equal length.
    pub fn concat_dims(&self, other: &Self) -> Option<Self> {
        if self.frames() != other.frames() {
            return None;
        }
        let dims = self.dims() + other.dims();
        let mut out = Self::zeros(self.frames(), dims);
        for t in 0..self.frames() {
            let row = out.frame_mut(t);
            row[..self.dims()].copy_from_slice(self.frame(t));
            row[self.dims()..].copy_from_slice(other.frame(t));
        }
        Some(out)
    }

    /// First `frames` frames.
    pub fn truncate(&self, frames: usize) -> Self {
        Self(self.0.slice_rows(0, frames.min(self.frames())))
    }
}

impl From<Tensor> for FeatureSequence {
    fn from(t: Tensor) -> Self {
        Self(t)
    }
}

/// Decoder-steps × encoder-states matrix of attention probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix(Tensor);

impl AlignmentMatrix {
    pub fn new(rows: Tensor) -> Self {
        Self(rows)
    }

    pub fn steps(&self) -> usize {
        self.0.rows()
    }

    /// Number of encoder states.
    pub fn states(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Most probable encoder state at step `t` (lowest index on ties).
    pub fn argmax(&self, t: usize) -> usize {
        let row = self.row(t);
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    }
}
