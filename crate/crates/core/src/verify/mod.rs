//! Self-contained verification battery: finite-difference gradient checks,
//! randomized memory invariants, and agreement with the loop-based
//! references in [`reference`].

pub mod reference;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embednet::{embed_query, BackboneParams, FactorizedConvSpec, StatsAccess, BLOCKS};
use crate::episodes::synthetic::{generate, SyntheticSpec};
use crate::episodes::{sample_episode, Dataset};
use crate::error::Result;
use crate::memory::{contextual_embed_support, encode_support, Memory, ProjectionVars, WriteOutcome};
use crate::model::{ModelConfig, ModelParams, ModelStats};
use crate::numcore::gradcheck::{gradcheck, rel_err, GradCheckConfig};
use crate::numcore::{BnMode, Fault, LstmVars, RunningStats, Tape, Tensor, Var};
use crate::rng::substream;
use crate::trainer::{episode_graph, episode_logits, episode_loss, loss_weights, LossReduction};

pub const GRAD_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Seeds per gradient-check case.
    pub seeds: u64,
    pub fuzz_cases: usize,
    /// Random instances per oracle comparison.
    pub oracle_cases: usize,
    pub root_seed: u64,
    /// Deliberate kernel bug, to show that the battery catches it.
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seeds: 20, fuzz_cases: 1000, oracle_cases: 50, root_seed: 0, fault: None }
    }
}

#[derive(Debug, Clone)]
pub struct CaseFailure {
    pub case: String,
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    /// Documented lower bound on `cases` for a default run.
    pub minimum: usize,
    pub failures: Vec<CaseFailure>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn total_cases(&self) -> usize {
        self.suites.iter().map(|s| s.cases).sum()
    }
}

pub fn run_battery(opts: &VerifyOptions) -> VerifyReport {
    VerifyReport { suites: vec![gradcheck_suite(opts), memory_fuzz_suite(opts), oracle_suite(opts)] }
}

// ---------------------------------------------------------------------------
// gradient checks

type GradFn = Box<dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type GradCase = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, GradFn);

fn u(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values whose magnitude is at least 0.1, away from ReLU's kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct, well-separated values in shuffled order so that max pooling
/// has no near-ties.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + rng.gen_range(0.0..0.01)).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

/// Scalar `Σ rᵢ yᵢ` with fixed, non-uniform weights `r`.
fn reduce(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(Tensor::from_fn(&shape, |i| (i as f64 * 0.737 + 0.31).sin() + 0.2));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn unary(inputs: Vec<Tensor<f64>>, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> (Vec<Tensor<f64>>, GradFn) {
    (
        inputs,
        Box::new(move |t, v| {
            let y = op(t, v[0])?;
            reduce(t, y)
        }),
    )
}

fn binary(inputs: Vec<Tensor<f64>>, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> (Vec<Tensor<f64>>, GradFn) {
    (
        inputs,
        Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            reduce(t, y)
        }),
    )
}

fn grad_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("add", |r| binary(vec![u(r, &[3, 4]), u(r, &[3, 4])], |t, a, b| t.add(a, b))),
        ("sub", |r| binary(vec![u(r, &[3, 4]), u(r, &[3, 4])], |t, a, b| t.sub(a, b))),
        ("mul", |r| binary(vec![u(r, &[3, 4]), u(r, &[3, 4])], |t, a, b| t.mul(a, b))),
        ("scale", |r| unary(vec![u(r, &[5])], |t, a| t.scale(a, -1.7))),
        ("relu", |r| unary(vec![off_kink(r, &[12])], |t, a| t.relu(a))),
        ("tanh", |r| unary(vec![u(r, &[6])], |t, a| t.tanh(a))),
        ("sigmoid", |r| unary(vec![u(r, &[6])], |t, a| t.sigmoid(a))),
        ("softmax", |r| unary(vec![u(r, &[5])], |t, a| t.softmax(a))),
        ("l2_normalize", |r| unary(vec![u(r, &[5])], |t, a| t.l2_normalize(a))),
        ("dot", |r| binary(vec![u(r, &[6]), u(r, &[6])], |t, a, b| t.dot(a, b))),
        ("sum", |r| unary(vec![u(r, &[2, 3])], |t, a| t.sum(a))),
        ("matmul", |r| binary(vec![u(r, &[3, 4]), u(r, &[4, 2])], |t, a, b| t.matmul(a, b))),
        ("transpose", |r| unary(vec![u(r, &[3, 4])], |t, a| t.transpose(a))),
        ("matvec", |r| binary(vec![u(r, &[3, 4]), u(r, &[4])], |t, a, b| t.matvec(a, b))),
        ("stack", |r| binary(vec![u(r, &[4]), u(r, &[4])], |t, a, b| t.stack(&[a, b, a]))),
        ("row", |r| unary(vec![u(r, &[3, 4])], |t, a| t.row(a, 1))),
        ("slice", |r| unary(vec![u(r, &[7])], |t, a| t.slice(a, 2, 3))),
        ("reshape", |r| unary(vec![u(r, &[2, 6])], |t, a| t.reshape(a, &[3, 4]))),
        ("matching_loss", |r| {
            (
                vec![u(r, &[3, 4])],
                Box::new(|t, v| {
                    let w = loss_weights::<f64>(&[0, 1, 0, 1], &[1, 0, 0], LossReduction::Sum)?;
                    t.matching_loss(v[0], &w)
                }),
            )
        }),
        ("conv2d", |r| {
            (
                vec![u(r, &[2, 2, 5, 4]), u(r, &[3, 2, 3, 3]), u(r, &[3])],
                Box::new(|t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
                    reduce(t, y)
                }),
            )
        }),
        ("conv2d_1x1", |r| binary(vec![u(r, &[2, 3, 3, 3]), u(r, &[2, 3, 1, 1])], |t, x, w| t.conv2d(x, w, None, 0))),
        ("maxpool2", |r| unary(vec![spaced(r, &[2, 2, 5, 4])], |t, a| t.maxpool2(a))),
        ("batchnorm_train", |r| {
            (
                vec![u(r, &[3, 2, 2, 2]), u(r, &[2]), u(r, &[2])],
                Box::new(|t, v| {
                    let mut stats = RunningStats::new(2);
                    let y = t.batchnorm(v[0], v[1], v[2], BnMode::Train(&mut stats))?;
                    reduce(t, y)
                }),
            )
        }),
        ("batchnorm_eval", |r| {
            let stats = RunningStats::from_parts(vec![0.3, -0.2], vec![0.5, 1.7], true);
            (
                vec![u(r, &[3, 2, 2, 2]), u(r, &[2]), u(r, &[2])],
                Box::new(move |t, v| {
                    let y = t.batchnorm(v[0], v[1], v[2], BnMode::Eval(&stats))?;
                    reduce(t, y)
                }),
            )
        }),
        ("scale_channels", |r| binary(vec![u(r, &[2, 3, 2, 2]), u(r, &[3])], |t, x, s| t.scale_channels(x, s))),
        ("lstm_cell", |r| {
            let inputs = vec![u(r, &[3]), u(r, &[4]), u(r, &[4]), u(r, &[16, 3]), u(r, &[16, 4]), u(r, &[16])];
            (
                inputs,
                Box::new(|t, v| {
                    let (h, c) = t.lstm_cell(v[0], v[1], v[2], &LstmVars { w_ih: v[3], w_hh: v[4], bias: v[5] })?;
                    let both = t.stack(&[h, c])?;
                    reduce(t, both)
                }),
            )
        }),
        ("memory_embed", |r| {
            // three support features, two labels: exercises allocation and merging
            let inputs = vec![u(r, &[3, 5]), u(r, &[4, 5]), u(r, &[5, 4])];
            (
                inputs,
                Box::new(|t, v| {
                    let rows = (0..3).map(|n| t.row(v[0], n)).collect::<Result<Vec<_>>>()?;
                    let mem = encode_support(t, &rows, &[0, 1, 0], &[2, 0, 1], v[1], 3)?;
                    let proj = ProjectionVars { t_z: v[1], t_c: v[2] };
                    let g = rows
                        .iter()
                        .map(|&z| contextual_embed_support(t, z, &mem, &proj))
                        .collect::<Result<Vec<_>>>()?;
                    let g = t.stack(&g)?;
                    reduce(t, g)
                }),
            )
        }),
        ("predict_params", |r| {
            let inputs = vec![
                u(r, &[3, 4]),
                u(r, &[12, 4]),
                u(r, &[12, 3]),
                u(r, &[12]),
                u(r, &[12, 4]),
                u(r, &[12, 3]),
                u(r, &[12]),
                u(r, &[2, 3]),
            ];
            (
                inputs,
                Box::new(|t, v| {
                    let rows = (0..3).map(|n| t.row(v[0], n)).collect::<Result<Vec<_>>>()?;
                    let eye = t.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
                    let mem = encode_support(t, &rows, &[0, 1, 2], &[0, 1, 2], eye, 3)?;
                    let lv = crate::ctxlearner::LearnerVars {
                        forward: LstmVars { w_ih: v[1], w_hh: v[2], bias: v[3] },
                        backward: LstmVars { w_ih: v[4], w_hh: v[5], bias: v[6] },
                        t_p: v[7],
                    };
                    let w = crate::ctxlearner::predict_params(t, &mem, &lv)?;
                    reduce(t, w)
                }),
            )
        }),
        ("embed_query", |r| {
            let bb = BackboneParams::<f64>::init(1, 3, r);
            let fz = FactorizedConvSpec::<f64>::init(3, 2, r);
            let images = u(r, &[3, 1, 16, 16]);
            let inputs = vec![u(r, &[2]), fz.m_in.clone(), fz.m_out.clone(), fz.bias.clone()];
            (
                inputs,
                Box::new(move |t, v| {
                    let bv = bb.bind(t, &mut Vec::new());
                    let mut fv = fz.bind(t, &mut Vec::new());
                    (fv.m_in, fv.m_out, fv.bias) = (v[1], v[2], v[3]);
                    let x = t.constant(images.clone());
                    let mut stats: Vec<RunningStats<f64>> = (0..=BLOCKS).map(|_| RunningStats::new(3)).collect();
                    let f = embed_query(t, x, &bv, &fv, v[0], &mut StatsAccess::Train(&mut stats))?;
                    reduce(t, f)
                }),
            )
        }),
    ]
}

fn verify_dataset() -> Dataset {
    let spec = SyntheticSpec {
        train_classes: 4,
        test_classes: 1,
        images_per_class: 6,
        size: 16,
        shift: 1,
        ..Default::default()
    };
    generate(&spec, 11).expect("fixed spec is valid").train
}

/// Tiny model with a non-zero output map so the predicted vector is generic.
pub fn tiny_model(seed: u64) -> ModelParams<f64> {
    let mut rng = substream(seed, "verify-model", 0);
    let mut p = ModelParams::<f64>::init(&ModelConfig::tiny(), &mut rng).expect("tiny config is valid");
    p.learner.t_p = Tensor::uniform(p.learner.t_p.shape(), 0.5, &mut rng);
    p
}

/// Full-model gradient check on one 2-way 1-shot episode with 2 queries
/// per class, train-mode batchnorm.
pub fn model_gradcheck(seed: u64, fault: Option<Fault>, cfg: GradCheckConfig) -> Result<(f64, usize, String)> {
    let ds = verify_dataset();
    let episode = sample_episode(&ds, 2, 1, 2, &mut substream(seed, "verify-episode", 0))?;
    let params = tiny_model(seed);
    let weights = loss_weights::<f64>(&episode.support_labels(), &episode.query_labels(), LossReduction::Sum)?;
    let loss = |p: &ModelParams<f64>, grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        if let Some(f) = fault {
            tape.inject_fault(f);
        }
        let (vars, flat) = p.bind(&mut tape);
        let mut stats = ModelStats::new(&p.config);
        let g = episode_graph(&mut tape, &p.config, &vars, &episode, &mut StatsAccess::Train(&mut stats.layers))?;
        let l = tape.matching_loss(g.logits, &weights)?;
        let value = tape.data(l)[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(l)?;
        let gs = flat
            .iter()
            .zip(p.named())
            .map(|(&v, (_, t))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = loss(&params, true)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut work = params.clone();
    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0);
    for (ti, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = work.tensors_mut()[ti].data()[ei];
            work.tensors_mut()[ti].data_mut()[ei] = orig + cfg.eps;
            let plus = loss(&work, false)?.0;
            work.tensors_mut()[ti].data_mut()[ei] = orig - cfg.eps;
            let minus = loss(&work, false)?.0;
            work.tensors_mut()[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let err = rel_err(a, numeric, cfg.floor);
            checked += 1;
            if err > worst || worst_at.is_empty() {
                worst = err;
                worst_at = format!("{}[{ei}] analytic {a:.6e} numeric {numeric:.6e}", names[ti]);
            }
        }
    }
    Ok((worst, checked, worst_at))
}

fn gradcheck_suite(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let cases = grad_cases();
    let mut report = SuiteReport {
        name: "gradcheck",
        cases: 0,
        minimum: (cases.len() + 1) * 20,
        failures: Vec::new(),
        elapsed: Duration::ZERO,
    };
    let cfg = GradCheckConfig { eps: 1e-6, floor: 1e-6 };
    for (name, build) in &cases {
        for s in 0..opts.seeds {
            let seed = opts.root_seed + s;
            let (inputs, mut f) = build(&mut substream(seed, name, 0));
            let fault = opts.fault;
            let outcome = gradcheck(
                &inputs,
                |t, v| {
                    if let Some(flt) = fault {
                        t.inject_fault(flt);
                    }
                    f(t, v)
                },
                cfg,
            );
            report.cases += 1;
            match outcome {
                Ok(r) if r.passes(GRAD_TOL) => {}
                Ok(r) => report.failures.push(CaseFailure {
                    case: format!("gradcheck/{name}"),
                    seed,
                    detail: format!("max rel err {:.3e} at {:?}", r.max_rel_err, r.worst),
                }),
                Err(e) => {
                    report.failures.push(CaseFailure { case: format!("gradcheck/{name}"), seed, detail: e.to_string() })
                }
            }
        }
    }
    for s in 0..opts.seeds {
        let seed = opts.root_seed + s;
        report.cases += 1;
        // Conv biases ahead of train-mode batchnorm have an exact zero
        // gradient; the floor keeps roundoff in the numeric estimate from
        // counting as relative error there.
        match model_gradcheck(seed, opts.fault, GradCheckConfig { eps: 1e-6, floor: 1e-4 }) {
            Ok((err, _, _)) if err < GRAD_TOL => {}
            Ok((err, _, at)) => report.failures.push(CaseFailure {
                case: "gradcheck/full_model".into(),
                seed,
                detail: format!("max rel err {err:.3e} at {at}"),
            }),
            Err(e) => {
                report.failures.push(CaseFailure { case: "gradcheck/full_model".into(), seed, detail: e.to_string() })
            }
        }
    }
    report.elapsed = start.elapsed();
    report
}

// ---------------------------------------------------------------------------
// memory fuzz

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distance from `v` to span{a, b} (Gram–Schmidt).
fn span_residual(v: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let e1: Vec<f64> = a.iter().map(|x| x / na).collect();
    let b_perp: Vec<f64> = b.iter().zip(&e1).map(|(x, e)| x - dot(b, &e1) * e).collect();
    let nb = norm(&b_perp);
    let mut r: Vec<f64> = v.iter().zip(&e1).map(|(x, e)| x - dot(v, &e1) * e).collect();
    if nb > 1e-12 {
        let e2: Vec<f64> = b_perp.iter().map(|x| x / nb).collect();
        let c = dot(&r, &e2);
        r.iter_mut().zip(&e2).for_each(|(x, e)| *x -= c * e);
    }
    norm(&r)
}

fn fuzz_case(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let dim = rng.gen_range(2..=8);
    let capacity = rng.gen_range(1..=6);
    let ways = rng.gen_range(1..=4);
    let len = rng.gen_range(1..=10);
    let mut tape = Tape::<f64>::new();
    let mut mem = Memory::new(capacity, dim);
    let mut history: Vec<Vec<f64>> = Vec::new();
    for step in 0..len {
        let zk: Vec<f64> = if !history.is_empty() && rng.gen_bool(0.15) {
            // exact repeat of an earlier input to provoke ties
            history[rng.gen_range(0..history.len())].clone()
        } else {
            let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
            (0..dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
        };
        if norm(&zk) <= 1e-12 {
            continue;
        }
        history.push(zk.clone());
        let label = rng.gen_range(0..ways);
        let unit: Vec<f64> = zk.iter().map(|x| x / norm(&zk)).collect();
        let before: Vec<(Vec<f64>, usize)> = mem.slots().iter().map(|s| (tape.data(s.key).to_vec(), s.value)).collect();
        let mut nearest: Option<usize> = None;
        for (i, (k, _)) in before.iter().enumerate() {
            if nearest.is_none_or(|j| dot(k, &unit) > dot(&before[j].0, &unit)) {
                nearest = Some(i);
            }
        }
        let expected = match nearest {
            None => WriteOutcome::Allocated(0),
            Some(i) if before[i].1 == label => WriteOutcome::Merged(i),
            Some(_) if before.len() < capacity => WriteOutcome::Allocated(before.len()),
            Some(i) => WriteOutcome::CapacityMerged(i),
        };
        let v = tape.constant(Tensor::vector(zk));
        let got = mem.write(&mut tape, v, label).map_err(|e| format!("step {step}: {e}"))?;
        if got != expected {
            return Err(format!("step {step}: write took {got:?}, rule says {expected:?}"));
        }
        if let (WriteOutcome::Allocated(_), Some(i)) = (got, nearest) {
            if before[i].1 == label {
                return Err(format!("step {step}: allocated although nearest slot has label {label}"));
            }
        }
        if mem.len() > (step + 1).min(capacity) {
            return Err(format!("step {step}: {} slots exceed min(L, M)", mem.len()));
        }
        for (i, s) in mem.slots().iter().enumerate() {
            let k = tape.data(s.key);
            if (norm(k) - 1.0).abs() > 1e-5 {
                return Err(format!("step {step}: slot {i} key norm {}", norm(k)));
            }
            if s.value >= ways {
                return Err(format!("step {step}: slot {i} value {} outside [0, {ways})", s.value));
            }
        }
        if let WriteOutcome::Merged(i) | WriteOutcome::CapacityMerged(i) = got {
            let new_key = tape.data(mem.slots()[i].key);
            let res = span_residual(new_key, &before[i].0, &unit);
            if res > 1e-9 {
                return Err(format!("step {step}: merged key leaves span by {res:.3e}"));
            }
            if mem.slots()[i].value != before[i].1 {
                return Err(format!("step {step}: merge changed slot {i}'s label"));
            }
        }
    }
    if mem.is_empty() {
        return Ok(());
    }
    let scale = 10f64.powf(rng.gen_range(-1.0..1.5));
    let q = tape.constant(Tensor::vector((0..dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()));
    let a = mem.attention(&mut tape, q).map_err(|e| e.to_string())?;
    let a = tape.data(a);
    let total: f64 = a.iter().sum();
    if a.iter().any(|&x| x < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(format!("attention {a:?} sums to {total}"));
    }
    Ok(())
}

fn memory_fuzz_suite(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let mut failures = Vec::new();
    for i in 0..opts.fuzz_cases {
        let seed = opts.root_seed + i as u64;
        if let Err(detail) = fuzz_case(&mut substream(seed, "memory-fuzz", 0)) {
            failures.push(CaseFailure { case: "memory/fuzz".into(), seed, detail });
        }
    }
    SuiteReport { name: "memory-fuzz", cases: opts.fuzz_cases, minimum: 1000, failures, elapsed: start.elapsed() }
}

// ---------------------------------------------------------------------------
// oracle equivalence

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

fn oracle_conv(r: &mut ChaCha8Rng) -> Result<f64> {
    let (b, c, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let (k, pad) = *[(1, 0), (3, 1), (3, 0), (1, 1)].choose(r).unwrap();
    let h = r.gen_range(k.max(2)..=7);
    let w = r.gen_range(k.max(2)..=7);
    let x = u(r, &[b, c, h, w]);
    let wt = u(r, &[o, c, k, k]);
    let bias = u(r, &[o]);
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(wt.clone()), t.constant(bias.clone()));
    let y = t.conv2d(xv, wv, Some(bv), pad)?;
    Ok(max_err(t.data(y), &reference::conv2d(x.data(), b, c, h, w, wt.data(), o, k, Some(bias.data()), pad)))
}

fn oracle_maxpool(r: &mut ChaCha8Rng) -> Result<f64> {
    let (planes, h, w) = (r.gen_range(1..=4), r.gen_range(2..=7), r.gen_range(2..=7));
    let x = u(r, &[planes, h, w]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = t.maxpool2(xv)?;
    Ok(max_err(t.data(y), &reference::maxpool2(x.data(), planes, h, w)))
}

fn oracle_read(r: &mut ChaCha8Rng) -> Result<f64> {
    let (dim, slots) = (r.gen_range(2..=8), r.gen_range(1..=6));
    let mut t = Tape::new();
    let mut mem = Memory::new(slots, dim);
    for label in 0..slots {
        let v = t.constant(u(r, &[dim]));
        mem.write(&mut t, v, label)?;
    }
    let keys: Vec<Vec<f64>> = mem.slots().iter().map(|s| t.data(s.key).to_vec()).collect();
    let q = u(r, &[dim]);
    let qv = t.constant(q.clone());
    let c = mem.read(&mut t, qv)?;
    let a = mem.attention(&mut t, qv)?;
    let (ra, rc) = reference::read(&keys, q.data());
    Ok(max_err(t.data(c), &rc).max(max_err(t.data(a), &ra)))
}

fn oracle_loss(r: &mut ChaCha8Rng) -> Result<f64> {
    let ways = r.gen_range(1..=3);
    let shots = r.gen_range(1..=3);
    let support: Vec<usize> = (0..ways * shots).map(|i| i % ways).collect();
    let query: Vec<usize> = (0..r.gen_range(1..=5)).map(|_| r.gen_range(0..ways)).collect();
    let logits = Tensor::uniform(&[query.len(), support.len()], 3.0, r);
    let expect = reference::matching_loss(logits.data(), &support, &query);
    let plain = episode_loss(logits.data(), &support, &query, LossReduction::Sum)?;
    let mut t = Tape::new();
    let lv = t.constant(logits);
    let w = loss_weights::<f64>(&support, &query, LossReduction::Sum)?;
    let l = t.matching_loss(lv, &w)?;
    Ok(max_err(&[plain, t.data(l)[0]], &[expect, expect]))
}

fn oracle_lstm(r: &mut ChaCha8Rng) -> Result<f64> {
    let (d, h) = (r.gen_range(1..=4), r.gen_range(1..=4));
    let ts = [u(r, &[d]), u(r, &[h]), u(r, &[h]), u(r, &[4 * h, d]), u(r, &[4 * h, h]), u(r, &[4 * h])];
    let mut t = Tape::new();
    let v: Vec<Var> = ts.iter().map(|x| t.constant(x.clone())).collect();
    let (hn, cn) = t.lstm_cell(v[0], v[1], v[2], &LstmVars { w_ih: v[3], w_hh: v[4], bias: v[5] })?;
    let (rh, rc) =
        reference::lstm_cell(ts[0].data(), ts[1].data(), ts[2].data(), ts[3].data(), ts[4].data(), ts[5].data());
    Ok(max_err(t.data(hn), &rh).max(max_err(t.data(cn), &rc)))
}

fn oracle_episode(r: &mut ChaCha8Rng) -> Result<f64> {
    let seed = r.gen();
    let params = tiny_model(seed);
    let mut stats = ModelStats::<f64>::new(&params.config);
    for s in &mut stats.layers {
        s.mean.iter_mut().for_each(|m| *m = r.gen_range(-0.5..0.5));
        s.var.iter_mut().for_each(|v| *v = r.gen_range(0.2..2.0));
    }
    let ds = verify_dataset();
    let ways = r.gen_range(2..=3);
    let shots = r.gen_range(1..=2);
    let episode = sample_episode(&ds, ways, shots, 2, r)?;
    let got = episode_logits(&params, &stats, &episode)?;
    Ok(max_err(got.data(), &reference::episode_logits(&params, &stats, &episode)))
}

fn oracle_suite(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    type Oracle = fn(&mut ChaCha8Rng) -> Result<f64>;
    let oracles: [(&str, Oracle); 6] = [
        ("conv2d", oracle_conv),
        ("maxpool2", oracle_maxpool),
        ("memory_read", oracle_read),
        ("matching_loss", oracle_loss),
        ("lstm_cell", oracle_lstm),
        ("episode_logits", oracle_episode),
    ];
    let mut failures = Vec::new();
    let mut cases = 0;
    for (name, f) in oracles {
        for i in 0..opts.oracle_cases {
            let seed = opts.root_seed + i as u64;
            cases += 1;
            match f(&mut substream(seed, name, 1)) {
                Ok(err) if err <= ORACLE_TOL => {}
                Ok(err) => failures.push(CaseFailure {
                    case: format!("oracle/{name}"),
                    seed,
                    detail: format!("max error {err:.3e}"),
                }),
                Err(e) => failures.push(CaseFailure { case: format!("oracle/{name}"), seed, detail: e.to_string() }),
            }
        }
    }
    SuiteReport { name: "oracle", cases, minimum: 6 * 50, failures, elapsed: start.elapsed() }
}
