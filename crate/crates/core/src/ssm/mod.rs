//! Selective state-space kernels and the volumetric Mamba adapter.
//!
//! Everything here is a numeric reference: parameters are supplied by the
//! caller (random or loaded from a tensor bundle) and nothing is trained.

mod block;
mod real;
mod scan;

use thiserror::Error;

pub use block::{
    adapter_forward, input_jacobian_column, layer_norm, mamba_block_forward, AdapterConfig,
    AdapterParams, MambaBlockParams,
};
pub use real::{silu, softplus, Dual, Real};
pub use scan::{
    scan_parallel, scan_parallel_chunks, scan_sequential, scan_sequential_traced, state_bound,
    Discretization, Selection, SsmParams,
};

#[derive(Debug, Error, PartialEq)]
pub enum SsmError {
    #[error("{what}: expected {expected} values, got {actual}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at token {token}")]
    NonFinite { token: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("token sequence has no volumetric origin shape")]
    MissingOrigin,
}

/// `len` tokens of `dim` features each, token-major.
///
/// When the tokens come from a volume, `origin` records its `(D, H, W)` and
/// token `t` is voxel `t` in z-major, x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    len: usize,
    dim: usize,
    origin: Option<[usize; 3]>,
    data: Vec<T>,
}

impl<T: Copy> TokenSequence<T> {
    pub fn new(len: usize, dim: usize, data: Vec<T>) -> Result<Self, SsmError> {
        if dim == 0 {
            return Err(SsmError::InvalidParam("token dim must be positive".into()));
        }
        scan::check_len("tokens", len * dim, data.len())?;
        Ok(Self {
            len,
            dim,
            origin: None,
            data,
        })
    }

    /// Tokens for a `(D, H, W)` grid with `dim` features per voxel.
    pub fn from_volume(shape: [usize; 3], dim: usize, data: Vec<T>) -> Result<Self, SsmError> {
        let mut s = Self::new(shape.iter().product(), dim, data)?;
        s.origin = Some(shape);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn origin(&self) -> Option<[usize; 3]> {
        self.origin
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn token(&self, t: usize) -> &[T] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Same length and origin, new features (dim inferred from length).
    pub(crate) fn with_data<U: Copy>(&self, data: Vec<U>) -> TokenSequence<U> {
        let dim = data.len().checked_div(self.len).unwrap_or(self.dim);
        TokenSequence {
            len: self.len,
            dim,
            origin: self.origin,
            data,
        }
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(&T) -> U) -> TokenSequence<U> {
        TokenSequence {
            len: self.len,
            dim: self.dim,
            origin: self.origin,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl TokenSequence<f64> {
    /// `‖a − b‖∞ / ‖b‖∞` (absolute when `b` is all zero).
    pub fn max_rel_diff(&self, reference: &TokenSequence<f64>) -> f64 {
        assert_eq!(
            self.data.len(),
            reference.data.len(),
            "sequence sizes differ"
        );
        let num = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let den = reference.data.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }
}
