//! Selective state-space scan.
//!
//! Per channel `c`, state index `n` and token `t`:
//!
//! ```text
//! Ā = exp(Δ_tc · A_cn)
//! B̄ = Δ_tc · B_tn                      (Euler)
//! B̄ = (Ā − 1) / A_cn · B_tn            (zero-order hold)
//! h_t = Ā ⊙ h_{t−1} + B̄ · x_tc,  h_0 = 0
//! y_tc = Σ_n C_tn h_tn + D_c x_tc
//! ```
//!
//! [`scan_parallel`] evaluates the same recurrence by combining `(Ā, B̄x)`
//! pairs with `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)` over fixed chunks.

use rayon::prelude::*;

use super::real::Real;
use super::{SsmError, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    #[default]
    Zoh,
    Euler,
}

/// Input-independent part of the scan: decay matrix, skip weights, and the
/// discretization rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    channels: usize,
    state_dim: usize,
    /// `channels × state_dim`, row-major, all entries negative.
    a: Vec<f64>,
    d: Vec<f64>,
    pub discretization: Discretization,
}

impl SsmParams {
    pub fn new(
        channels: usize,
        state_dim: usize,
        a: Vec<f64>,
        d: Vec<f64>,
        discretization: Discretization,
    ) -> Result<Self, SsmError> {
        if channels == 0 || state_dim == 0 {
            return Err(SsmError::InvalidParam(format!(
                "channels ({channels}) and state_dim ({state_dim}) must be positive"
            )));
        }
        check_len("A", channels * state_dim, a.len())?;
        check_len("D", channels, d.len())?;
        if let Some(bad) = a.iter().find(|v| !(v.is_finite() && **v < 0.0)) {
            return Err(SsmError::InvalidParam(format!(
                "A entries must be finite and negative, found {bad}"
            )));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(SsmError::InvalidParam("D must be finite".into()));
        }
        Ok(Self {
            channels,
            state_dim,
            a,
            d,
            discretization,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }
}

/// Per-token selective parameters: `delta` is `L × C`, `b` and `c` are `L × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    pub delta: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

pub(crate) fn check_len(
    what: &'static str,
    expected: usize,
    actual: usize,
) -> Result<(), SsmError> {
    if expected == actual {
        Ok(())
    } else {
        Err(SsmError::DimMismatch {
            what,
            expected,
            actual,
        })
    }
}

fn validate<T: Real>(
    params: &SsmParams,
    x: &TokenSequence<T>,
    sel: &Selection<T>,
) -> Result<(), SsmError> {
    let l = x.len();
    check_len("token dim", params.channels, x.dim())?;
    check_len("delta", l * params.channels, sel.delta.len())?;
    check_len("B", l * params.state_dim, sel.b.len())?;
    check_len("C", l * params.state_dim, sel.c.len())?;
    if let Some(i) = sel
        .delta
        .iter()
        .position(|d| !(d.is_finite() && d.value() >= 0.0))
    {
        return Err(SsmError::InvalidParam(format!(
            "delta must be finite and non-negative (token {}, value {:?})",
            i / params.channels,
            sel.delta[i]
        )));
    }
    Ok(())
}

/// `(Ā, B̄)` for one (token, channel, state) triple.
#[inline]
fn discretize<T: Real>(kind: Discretization, delta: T, a: f64, b: T) -> (T, T) {
    let a_bar = (delta.scale(a)).exp();
    let b_bar = match kind {
        Discretization::Euler => delta * b,
        Discretization::Zoh => (a_bar - T::one()).scale(1.0 / a) * b,
    };
    (a_bar, b_bar)
}

/// Steps `state` through tokens `range`, writing outputs into `y`.
/// Returns the largest |h| seen.
fn run_span<T: Real>(
    params: &SsmParams,
    x: &TokenSequence<T>,
    sel: &Selection<T>,
    range: std::ops::Range<usize>,
    state: &mut [T],
    y: &mut [T],
) -> Result<f64, SsmError> {
    let (ch, ns) = (params.channels, params.state_dim);
    let mut max_h = 0.0f64;
    for (local, t) in range.enumerate() {
        let xt = x.token(t);
        let bt = &sel.b[t * ns..(t + 1) * ns];
        let ct = &sel.c[t * ns..(t + 1) * ns];
        for c in 0..ch {
            let delta = sel.delta[t * ch + c];
            let h = &mut state[c * ns..(c + 1) * ns];
            let mut acc = T::zero();
            for n in 0..ns {
                let (a_bar, b_bar) =
                    discretize(params.discretization, delta, params.a[c * ns + n], bt[n]);
                h[n] = a_bar * h[n] + b_bar * xt[c];
                acc += ct[n] * h[n];
                max_h = max_h.max(h[n].value().abs());
            }
            let out = acc + xt[c].scale(params.d[c]);
            if !out.is_finite() {
                return Err(SsmError::NonFinite { token: t });
            }
            y[local * ch + c] = out;
        }
    }
    Ok(max_h)
}

/// Reference scan, one token after another.
pub fn scan_sequential<T: Real>(
    params: &SsmParams,
    x: &TokenSequence<T>,
    sel: &Selection<T>,
) -> Result<TokenSequence<T>, SsmError> {
    scan_sequential_traced(params, x, sel).map(|(y, _)| y)
}

/// Like [`scan_sequential`], also returning `max |h_t|` over the whole run.
pub fn scan_sequential_traced<T: Real>(
    params: &SsmParams,
    x: &TokenSequence<T>,
    sel: &Selection<T>,
) -> Result<(TokenSequence<T>, f64), SsmError> {
    validate(params, x, sel)?;
    let mut state = vec![T::zero(); params.channels * params.state_dim];
    let mut y = vec![T::zero(); x.len() * params.channels];
    let max_h = run_span(params, x, sel, 0..x.len(), &mut state, &mut y)?;
    Ok((x.with_data(y), max_h))
}

/// Chunked associative scan with the default chunk count (four per worker
/// thread, at most one per token).
pub fn scan_parallel<T: Real>(
    params: &SsmParams,
    x: &TokenSequence<T>,
    sel: &Selection<T>,
) -> Result<TokenSequence<T>, SsmError> {
    let chunks = (rayon::current_num_threads() * 4).max(1);
    scan_parallel_chunks(params, x, sel, chunks)
}

/// Three phases: per-chunk aggregates of `(Ā, B̄x)` in parallel, an
/// exclusive combine of the aggregates to get each chunk's entry state, and
/// a parallel rescan of every chunk from its entry state.
pub fn scan_parallel_chunks<T: Real>(
    params: &SsmParams,
    x: &TokenSequence<T>,
    sel: &Selection<T>,
    chunks: usize,
) -> Result<TokenSequence<T>, SsmError> {
    validate(params, x, sel)?;
    let l = x.len();
    let (ch, ns) = (params.channels, params.state_dim);
    let width = ch * ns;
    if l == 0 {
        return Ok(x.with_data(Vec::new()));
    }
    let chunk_len = l.div_ceil(chunks.clamp(1, l));
    let spans: Vec<std::ops::Range<usize>> = (0..l)
        .step_by(chunk_len)
        .map(|s| s..(s + chunk_len).min(l))
        .collect();

    let aggregates: Vec<(Vec<T>, Vec<T>)> = spans
        .par_iter()
        .map(|span| {
            let mut a_acc = vec![T::one(); width];
            let mut b_acc = vec![T::zero(); width];
            for t in span.clone() {
                let xt = x.token(t);
                for c in 0..ch {
                    let delta = sel.delta[t * ch + c];
                    for n in 0..ns {
                        let i = c * ns + n;
                        let (a_bar, b_bar) = discretize(
                            params.discretization,
                            delta,
                            params.a[i],
                            sel.b[t * ns + n],
                        );
                        a_acc[i] = a_bar * a_acc[i];
                        b_acc[i] = a_bar * b_acc[i] + b_bar * xt[c];
                    }
                }
            }
            (a_acc, b_acc)
        })
        .collect();

    let mut entry_states = Vec::with_capacity(spans.len());
    let mut carry = vec![T::zero(); width];
    for (a_agg, b_agg) in &aggregates {
        entry_states.push(carry.clone());
        for i in 0..width {
            carry[i] = a_agg[i] * carry[i] + b_agg[i];
        }
    }

    let outputs: Vec<Vec<T>> = spans
        .par_iter()
        .zip(entry_states.into_par_iter())
        .map(|(span, mut state)| {
            let mut y = vec![T::zero(); span.len() * ch];
            run_span(params, x, sel, span.clone(), &mut state, &mut y).map(|_| y)
        })
        .collect::<Result<_, _>>()?;
    Ok(x.with_data(outputs.concat()))
}

/// Upper bound on `max |h_t|` from `|h_t| ≤ max|B̄x| / (1 − max Ā)`.
/// Infinite when some `Ā` equals 1 (zero step size).
pub fn state_bound<T: Real>(params: &SsmParams, x: &TokenSequence<T>, sel: &Selection<T>) -> f64 {
    let (ch, ns) = (params.channels, params.state_dim);
    let mut max_a = 0.0f64;
    let mut max_input = 0.0f64;
    for t in 0..x.len() {
        let xt = x.token(t);
        for c in 0..ch {
            for n in 0..ns {
                let (a_bar, b_bar) = discretize(
                    params.discretization,
                    sel.delta[t * ch + c],
                    params.a[c * ns + n],
                    sel.b[t * ns + n],
                );
                max_a = max_a.max(a_bar.value());
                max_input = max_input.max((b_bar * xt[c]).value().abs());
            }
        }
    }
    if max_a >= 1.0 {
        f64::INFINITY
    } else {
        max_input / (1.0 - max_a)
    }
}
