//! Minimal dense layers with hand-written backward passes.
//!
//! Activations are row-major `frames x channels` matrices. All parameters of a
//! model live in one flat [`ParamStore`]; layers hold offsets into it, so
//! gradients, optimizer state and checkpoints are flat vectors of the same
//! length.

mod adam;
mod gru;
mod layers;
mod linalg;
mod params;

pub use adam::{Adam, AdamConfig};
pub use gru::{BiGru, BiGruCache, GruDirection};
pub use layers::{Conv1d, ConvCache, ConvTranspose1d, Embedding, Linear, PRelu};
pub use linalg::gemm;
pub use params::{ParamRange, ParamStore, TensorSpec};

/// Row-major `frames x channels` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub frames: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(frames: usize, channels: usize) -> Self {
        Self {
            frames,
            channels,
            data: vec![0.0; frames * channels],
        }
    }

    pub fn from_data(frames: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), frames * channels, "activation shape");
        Self {
            frames,
            channels,
            data,
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    /// Channel-wise concatenation `[self | other]`.
    pub fn concat(&self, other: &Act) -> Act {
        assert_eq!(self.frames, other.frames, "concat frame mismatch");
        let channels = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.frames * channels);
        for t in 0..self.frames {
            data.extend_from_slice(self.row(t));
            data.extend_from_slice(other.row(t));
        }
        Act::from_data(self.frames, channels, data)
    }

    /// Inverse of [`Act::concat`] for gradients.
    pub fn split(&self, left_channels: usize) -> (Act, Act) {
        let right_channels = self.channels - left_channels;
        let mut left = Vec::with_capacity(self.frames * left_channels);
        let mut right = Vec::with_capacity(self.frames * right_channels);
        for t in 0..self.frames {
            let row = self.row(t);
            left.extend_from_slice(&row[..left_channels]);
            right.extend_from_slice(&row[left_channels..]);
        }
        (
            Act::from_data(self.frames, left_channels, left),
            Act::from_data(self.frames, right_channels, right),
        )
    }

    pub fn add_assign(&mut self, other: &Act) {
        assert_eq!(self.data.len(), other.data.len(), "add shape mismatch");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}
