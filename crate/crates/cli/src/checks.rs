//! Self-checks behind `ssm-check` and `fact-check`.
//!
//! Each check compares a library result against an independent computation
//! and records the deviation. A run stops at the first failing check.

use std::collections::BTreeMap;

use emshape::fact::{
    fit_tt_core, numerical_rank, reconstruct_delta, trainable_param_count, FactCores,
    FactIncrement, FactMode, SiteId, WeightSite,
};
use emshape::ssm::{
    adapter_forward, input_jacobian_column, mamba_block_forward, scan_parallel, scan_sequential,
    AdapterConfig, AdapterParams, Discretization, MambaBlockParams, Selection, SsmParams,
    TokenSequence,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Finite-difference gradients are never better than this.
pub const GRADIENT_TOL: f64 = 1e-3;
const GRADIENT_STEP: f64 = 1e-5;
/// Random instances per scan check.
const SCAN_INSTANCES: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub pass: bool,
    pub failed: Option<&'static str>,
    pub params: BTreeMap<&'static str, serde_json::Value>,
    pub checks: Vec<CheckResult>,
}

struct Runner {
    checks: Vec<CheckResult>,
    failed: Option<&'static str>,
}

impl Runner {
    fn new() -> Self {
        Self {
            checks: Vec::new(),
            failed: None,
        }
    }

    /// Runs `f` unless an earlier check failed; `f` returns the deviation.
    fn check(&mut self, name: &'static str, tol: f64, f: impl FnOnce() -> f64) {
        if self.failed.is_some() {
            return;
        }
        let value = f();
        let pass = value <= tol;
        self.checks.push(CheckResult {
            name,
            value,
            tol,
            pass,
        });
        if !pass {
            self.failed = Some(name);
        }
    }

    fn finish(self, params: BTreeMap<&'static str, serde_json::Value>) -> CheckReport {
        CheckReport {
            pass: self.failed.is_none(),
            failed: self.failed,
            params,
            checks: self.checks,
        }
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn nan_to_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsmCheckSpec {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub seed: u64,
    pub tol: f64,
}

struct ScanCase {
    params: SsmParams,
    x: TokenSequence<f64>,
    sel: Selection<f64>,
}

fn scan_case(rng: &mut impl Rng, l: usize, c: usize, n: usize, disc: Discretization) -> ScanCase {
    let a = (0..c * n).map(|_| -rng.gen_range(0.05..4.0)).collect();
    let d = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let params = SsmParams::new(c, n, a, d, disc).expect("generated parameters are valid");
    let x = TokenSequence::new(l, c, (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("generated tokens match their length");
    let sel = Selection {
        delta: (0..l * c).map(|_| rng.gen_range(0.0..1.5)).collect(),
        b: (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        c: (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    ScanCase { params, x, sel }
}

/// Direct evaluation of the recurrence, one state element at a time.
fn reference_scan(case: &ScanCase) -> Vec<f64> {
    let (ch, ns) = (case.params.channels(), case.params.state_dim());
    let a = case.params.a();
    let mut y = vec![0.0; case.x.len() * ch];
    for c in 0..ch {
        for n in 0..ns {
            let an = a[c * ns + n];
            let mut h = 0.0;
            for t in 0..case.x.len() {
                let delta = case.sel.delta[t * ch + c];
                let b = case.sel.b[t * ns + n];
                let a_bar = (delta * an).exp();
                let b_bar = match case.params.discretization {
                    Discretization::Euler => delta * b,
                    Discretization::Zoh => (a_bar - 1.0) / an * b,
                };
                h = a_bar * h + b_bar * case.x.token(t)[c];
                y[t * ch + c] += case.sel.c[t * ns + n] * h;
            }
        }
        for t in 0..case.x.len() {
            y[t * ch + c] += case.params.d()[c] * case.x.token(t)[c];
        }
    }
    y
}

fn worst(values: impl Iterator<Item = f64>) -> f64 {
    values.map(nan_to_inf).fold(0.0, f64::max)
}

pub fn run_ssm_checks(spec: &SsmCheckSpec) -> CheckReport {
    let SsmCheckSpec {
        len,
        channels,
        state,
        seed,
        tol,
    } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<ScanCase> = (0..SCAN_INSTANCES)
        .map(|i| {
            let disc = if i % 2 == 0 {
                Discretization::Zoh
            } else {
                Discretization::Euler
            };
            scan_case(&mut rng, len, channels, state, disc)
        })
        .collect();
    let mut run = Runner::new();

    run.check("sequential_vs_reference", tol, || {
        worst(
            cases
                .iter()
                .map(|c| match scan_sequential(&c.params, &c.x, &c.sel) {
                    Ok(y) => rel(y.data(), &reference_scan(c)),
                    Err(_) => f64::INFINITY,
                }),
        )
    });

    run.check("parallel_vs_sequential", tol, || {
        worst(cases.iter().map(|c| {
            match (
                scan_parallel(&c.params, &c.x, &c.sel),
                scan_sequential(&c.params, &c.x, &c.sel),
            ) {
                (Ok(p), Ok(s)) => p.max_rel_diff(&s),
                _ => f64::INFINITY,
            }
        }))
    });

    // Perturbing tokens after position t must leave outputs up to t bitwise
    // unchanged.
    run.check("causality", 0.0, || {
        if len < 2 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
        worst(cases.iter().map(|c| {
            let cut = rng.gen_range(0..len - 1);
            let mut data = c.x.data().to_vec();
            for v in &mut data[(cut + 1) * channels..] {
                *v += rng.gen_range(-4.0..4.0);
            }
            let moved = TokenSequence::new(len, channels, data).expect("same size");
            let a = scan_parallel(&c.params, &c.x, &c.sel);
            let b = scan_parallel(&c.params, &moved, &c.sel);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    let k = (cut + 1) * channels;
                    a.data()[..k]
                        .iter()
                        .zip(&b.data()[..k])
                        .map(|(p, q)| {
                            if p.to_bits() == q.to_bits() {
                                0.0
                            } else {
                                (p - q).abs().max(f64::MIN_POSITIVE)
                            }
                        })
                        .fold(0.0, f64::max)
                }
                _ => f64::INFINITY,
            }
        }))
    });

    // With selection frozen, y is linear in x.
    run.check("linearity", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11ea);
        worst(cases.iter().map(|c| {
            let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let other: Vec<f64> = (0..len * channels)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let x2 = TokenSequence::new(len, channels, other.clone()).expect("same size");
            let mix = TokenSequence::new(
                len,
                channels,
                c.x.data()
                    .iter()
                    .zip(&other)
                    .map(|(a, b)| alpha * a + beta * b)
                    .collect(),
            )
            .expect("same size");
            match (
                scan_sequential(&c.params, &c.x, &c.sel),
                scan_sequential(&c.params, &x2, &c.sel),
                scan_sequential(&c.params, &mix, &c.sel),
            ) {
                (Ok(y1), Ok(y2), Ok(ym)) => {
                    let combo: Vec<f64> = y1
                        .data()
                        .iter()
                        .zip(y2.data())
                        .map(|(a, b)| alpha * a + beta * b)
                        .collect();
                    rel(ym.data(), &combo)
                }
                _ => f64::INFINITY,
            }
        }))
    });

    // Zero step size: Ā = 1, B̄ = 0, so the state never moves and y = D·x.
    run.check("zero_step_identity", 0.0, || {
        let c = &cases[0];
        let sel = Selection {
            delta: vec![0.0; len * channels],
            ..c.sel.clone()
        };
        match scan_sequential(&c.params, &c.x, &sel) {
            Ok(y) => worst((0..len * channels).map(|i| {
                let want = c.params.d()[i % channels] * c.x.data()[i];
                (y.data()[i] - want).abs()
            })),
            Err(_) => f64::INFINITY,
        }
    });

    let cfg = AdapterConfig::default();
    let block_len = len.min(16);
    run.check("block_gradient", GRADIENT_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d);
        let model = channels.min(4);
        let params = MambaBlockParams::random(&mut rng, &cfg, model, state.min(8), 2);
        let x = TokenSequence::new(
            block_len,
            model,
            (0..block_len * model)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .expect("sized");
        let (tok, ch) = (rng.gen_range(0..block_len), rng.gen_range(0..model));
        let Ok(exact) = input_jacobian_column(&cfg, &params, &x, tok, ch) else {
            return f64::INFINITY;
        };
        let bump = |s: f64| {
            let mut d = x.data().to_vec();
            d[tok * model + ch] += s;
            let xs = TokenSequence::new(block_len, model, d).expect("sized");
            mamba_block_forward(&cfg, &params, &xs)
        };
        match (bump(GRADIENT_STEP), bump(-GRADIENT_STEP)) {
            (Ok(p), Ok(m)) => {
                let fd: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(a, b)| (a - b) / (2.0 * GRADIENT_STEP))
                    .collect();
                nan_to_inf(rel(exact.data(), &fd))
            }
            _ => f64::INFINITY,
        }
    });

    run.check("zero_adapter_identity", 0.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
        let model = channels;
        let shape = [1, 1, len];
        let x = TokenSequence::from_volume(
            shape,
            model,
            (0..len * model).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .expect("sized");
        let adapter = AdapterParams::new(MambaBlockParams::zeros(&cfg, model, state, 1));
        match adapter_forward(&cfg, &adapter, &x) {
            Ok(y) => {
                if y.data()
                    .iter()
                    .zip(x.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
                {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    });

    let params = BTreeMap::from([
        ("len", len.into()),
        ("channels", channels.into()),
        ("state", state.into()),
        ("seed", seed.into()),
        ("tol", serde_json::json!(tol)),
        ("instances", SCAN_INSTANCES.into()),
    ]);
    run.finish(params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactCheckSpec {
    pub dim: usize,
    pub rank: usize,
    pub sites: usize,
    pub tucker_rank: usize,
    pub seed: u64,
    pub tol: f64,
}

fn site_ids(n: usize) -> Vec<SiteId> {
    const PROJ: [&str; 4] = ["q", "k", "v", "o"];
    (0..n)
        .map(|i| SiteId::new(i / PROJ.len(), PROJ[i % PROJ.len()]))
        .collect()
}

/// `s · Σ_ab U_ia K_ab V_jb`, entry by entry.
fn dense_delta(inc: &FactIncrement, site: &SiteId) -> DMatrix<f64> {
    let (d, r) = (inc.dim(), inc.rank());
    let k = |a: usize, b: usize| -> f64 {
        match &inc.cores {
            FactCores::TensorTrain { cores } => cores[site][(a, b)],
            FactCores::Tucker { core, selectors } => (0..core.len())
                .map(|m| selectors[site][m] * core[m][(a, b)])
                .sum(),
        }
    };
    DMatrix::from_fn(d, d, |i, j| {
        let mut acc = 0.0;
        for a in 0..r {
            for b in 0..r {
                acc += inc.u[(i, a)] * k(a, b) * inc.v[(j, b)];
            }
        }
        inc.scale * acc
    })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| nan_to_inf(v.abs())).fold(0.0, f64::max)
}

pub fn run_fact_checks(spec: &FactCheckSpec) -> CheckReport {
    let FactCheckSpec {
        dim,
        rank,
        sites,
        tucker_rank,
        seed,
        tol,
    } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = site_ids(sites);
    let bases: Vec<WeightSite> = ids
        .iter()
        .map(|id| {
            WeightSite::new(
                id.clone(),
                DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0)),
            )
            .expect("square")
        })
        .collect();
    let tt = FactIncrement::random(
        &mut rng,
        FactMode::TensorTrain,
        dim,
        rank,
        tucker_rank,
        &ids,
        0.5,
    );
    let tucker = FactIncrement::random(
        &mut rng,
        FactMode::Tucker,
        dim,
        rank,
        tucker_rank,
        &ids,
        0.5,
    );
    let mut run = Runner::new();

    for (name, inc) in [
        ("tensor_train_dense_oracle", &tt),
        ("tucker_dense_oracle", &tucker),
    ] {
        run.check(name, tol, || match inc {
            Ok(inc) => worst(bases.iter().map(|w| match reconstruct_delta(inc, w) {
                Ok(delta) => max_abs(&(delta - dense_delta(inc, &w.id))),
                Err(_) => f64::INFINITY,
            })),
            Err(_) => f64::INFINITY,
        });
    }

    // value is the excess of the numerical rank over min(r, d)
    run.check("rank_bound", 0.0, || {
        worst([&tt, &tucker].into_iter().flat_map(|inc| {
            bases.iter().map(
                move |w| match inc.as_ref().map(|inc| reconstruct_delta(inc, w)) {
                    Ok(Ok(delta)) => {
                        numerical_rank(&delta, 1e-9).saturating_sub(rank.min(dim)) as f64
                    }
                    _ => f64::INFINITY,
                },
            )
        }))
    });

    // ΔW stays in span(U) on the left and span(V) on the right at every site.
    run.check("shared_subspace", tol, || {
        worst([&tt, &tucker].into_iter().flat_map(|inc| {
            bases.iter().map(move |w| {
                let Ok(inc) = inc else { return f64::INFINITY };
                let (Ok(pu), Ok(pv)) = (
                    inc.u.clone().pseudo_inverse(1e-12),
                    inc.v.clone().pseudo_inverse(1e-12),
                ) else {
                    return f64::INFINITY;
                };
                match reconstruct_delta(inc, w) {
                    Ok(delta) => {
                        let left = &inc.u * &pu * &delta - &delta;
                        let right = &delta * (&inc.v * &pv) - &delta;
                        max_abs(&left).max(max_abs(&right))
                    }
                    Err(_) => f64::INFINITY,
                }
            })
        }))
    });

    // value is |formula − enumerated stored scalars|
    run.check("param_count", 0.0, || {
        [(&tt, FactMode::TensorTrain), (&tucker, FactMode::Tucker)]
            .iter()
            .map(|(inc, mode)| {
                match (
                    inc,
                    trainable_param_count(*mode, sites, dim, rank, tucker_rank),
                ) {
                    (Ok(inc), Ok(c)) => {
                        (c.trainable as f64 - inc.stored_scalar_count() as f64).abs()
                    }
                    _ => f64::INFINITY,
                }
            })
            .fold(0.0, f64::max)
    });

    // With r = d a tensor-train core can express any increment.
    run.check("full_rank_fit", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf17);
        let Ok(mut inc) =
            FactIncrement::random(&mut rng, FactMode::TensorTrain, dim, dim, 1, &ids, 0.5)
        else {
            return f64::INFINITY;
        };
        let target = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
        let Ok(core) = fit_tt_core(&inc.u, &inc.v, inc.scale, &target) else {
            return f64::INFINITY;
        };
        if let FactCores::TensorTrain { cores } = &mut inc.cores {
            cores.insert(ids[0].clone(), core);
        }
        match reconstruct_delta(&inc, &bases[0]) {
            Ok(delta) => max_abs(&(delta - target)),
            Err(_) => f64::INFINITY,
        }
    });

    let params = BTreeMap::from([
        ("dim", dim.into()),
        ("rank", rank.into()),
        ("sites", sites.into()),
        ("tucker_rank", tucker_rank.into()),
        ("seed", seed.into()),
        ("tol", serde_json::json!(tol)),
    ]);
    run.finish(params)
}
