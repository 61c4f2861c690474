//! Shared fixtures for the integration tests: random instances, brute-force
//! oracles and the finite-difference gradient suites.
#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use uodr::config::Flags;
use uodr::gcn::{
    gcn_backward, gcn_forward, gcn_forward_cached, gcn_reg_loss, init_objective, GcnParams,
};
use uodr::graph::{normalized_adjacency, KnowledgeGraph};
use uodr::losses::{
    balance_loss_vanilla, cls_loss, cross_entropy_logits, limited_balance_loss, sgmd_loss,
    ClassifierHead, LossWeights,
};
use uodr::matcher::CostMatrix;
use uodr::model::{Encoder, ModelState};
use uodr::numkit::{grad_check, softmax_backward, softmax_rows};
use uodr::trainer::{compute_step, GraphContext, StepBatch};

use uodr::{Matrix, Rng};

pub const EPS: f64 = 1e-6;

/// Smallest nonzero gradient component, relative to `max(|f|, 1)`, that a
/// central difference at `EPS` resolves to 1e-5: roundoff in `f` is about
/// `1e-16·|f|`, which the step amplifies by `1/EPS`.
pub const RESOLVABLE: f64 = 1e-3;

static REDRAWS: AtomicUsize = AtomicUsize::new(0);

/// Instances rejected by [`resolvable`] so far.
pub fn redraws() -> usize {
    REDRAWS.load(Ordering::Relaxed)
}

/// True when every gradient component is exactly zero or large enough for
/// the finite-difference oracle to resolve. Counts rejections.
pub fn resolvable(value: f64, grads: &[&Matrix]) -> bool {
    let floor = RESOLVABLE * value.abs().max(1.0);
    let ok = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .all(|v| *v == 0.0 || v.abs() >= floor);
    if !ok {
        REDRAWS.fetch_add(1, Ordering::Relaxed);
    }
    ok
}

pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn between(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Integer costs in `0..=max`, so sums are exact.
pub fn integer_costs(rng: &mut Rng, rows: usize, cols: usize, max: usize) -> CostMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.below(max + 1) as f64)
        .collect();
    CostMatrix::from_matrix(Matrix::new(rows, cols, data).unwrap()).unwrap()
}

/// Minimum assignment cost by enumerating every injective map from the
/// smaller side into the larger one.
pub fn brute_force_cost(c: &Matrix) -> f64 {
    if c.rows() > c.cols() {
        return brute_force_cost(&c.transpose());
    }
    fn go(c: &Matrix, i: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if i == c.rows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(c, i + 1, used, acc + c.get(i, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
    best
}

/// Random connected graph: a random tree plus a few extra edges. Classes
/// sit on distinct nodes and at least one class is unknown.
pub fn random_graph(rng: &mut Rng, max_nodes: usize) -> KnowledgeGraph {
    let n = between(rng, 2, max_nodes);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.below(i), i)).collect();
    for _ in 0..rng.below(n) {
        let (a, b) = (rng.below(n), rng.below(n));
        let e = (a.min(b), a.max(b));
        if a != b && !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == e) {
            edges.push(e);
        }
    }
    let total = between(rng, 2, n);
    let class_to_node = rng.permutation(n)[..total].to_vec();
    let known = between(rng, 1, total - 1);
    let names = (0..n).map(|i| format!("n{i}")).collect();
    KnowledgeGraph::new(names, edges, class_to_node, known).unwrap()
}

/// A random model plus a batch and graph context small enough for finite
/// differences.
pub struct Instance {
    pub state: ModelState,
    pub batch: StepBatch,
    pub ctx: GraphContext,
    pub lw: LossWeights,
    pub flags: Flags,
    pub weight_decay: f64,
}

pub fn random_instance(rng: &mut Rng, vanilla: bool) -> Instance {
    let graph = loop {
        let g = random_graph(rng, 8);
        if g.total_class_count() >= 3 {
            break g;
        }
    };
    let (m_in, m, c) = (between(rng, 2, 5), between(rng, 2, 4), between(rng, 2, 4));
    let total = graph.total_class_count();
    let known = graph.known_class_count();
    let layers = between(rng, 1, 2);
    let mut gcn = GcnParams::init(c, 3, m, layers, 0.2, rng);
    for l in &mut gcn.layers {
        *l = l.scale(3.0);
    }
    let state = ModelState {
        encoder: Encoder {
            weight: gaussian(rng, m_in, m, 0.7),
            bias: (0..m).map(|_| 0.3 * rng.normal()).collect(),
        },
        head: ClassifierHead::new(gaussian(rng, total, m, 1.0), known).unwrap(),
        gcn,
    };
    let (n, nt, np) = (between(rng, 1, 6), between(rng, 1, 6), between(rng, 1, 5));
    let batch = StepBatch {
        source_raw: gaussian(rng, n, m_in, 1.0),
        source_labels: (0..n).map(|_| rng.below(known)).collect(),
        target_raw: gaussian(rng, nt, m_in, 1.0),
        pair_source_raw: gaussian(rng, np, m_in, 1.0),
        pair_target_raw: gaussian(rng, np, m_in, 1.0),
    };
    let word_vectors = gaussian(rng, graph.num_nodes(), c, 1.0);
    let ctx = GraphContext::new(&graph, &word_vectors, false);
    let lw = LossWeights {
        lambda_d: rng.uniform_range(0.1, 1.0),
        lambda_b: rng.uniform_range(0.1, 1.0),
        lambda_g: rng.uniform_range(0.1, 1.0),
        tau: rng.uniform_range(0.05, 0.5),
        w: rng.uniform_range(0.1, 0.9),
        epsilon: 1e-8,
    };
    let flags = Flags {
        lb: !vanilla,
        sgmd: true,
        gcn: true,
        vanilla_balance: vanilla,
    };
    Instance {
        state,
        batch,
        ctx,
        lw,
        flags,
        weight_decay: rng.uniform_range(0.0, 0.1),
    }
}

/// True when no leaky-ReLU input sits within `margin` of its kink.
pub fn away_from_kinks(p: &Matrix, x: &Matrix, params: &GcnParams, margin: f64) -> bool {
    let cache = gcn_forward_cached(p, x, params).unwrap();
    cache
        .pre_activations()
        .iter()
        .all(|m| m.as_slice().iter().all(|v| v.abs() > margin))
}

/// True when every pair's gate value is at least `margin` from `tau`.
pub fn away_from_gate(inst: &Instance, margin: f64) -> bool {
    let s = &inst.state;
    let probs = |raw: &Matrix| {
        let f = s.encoder.encode(raw).unwrap();
        softmax_rows(&f.matmul_nt(&s.head.weights).unwrap())
    };
    let ps = probs(&inst.batch.pair_source_raw);
    let pt = probs(&inst.batch.pair_target_raw);
    (0..ps.rows()).all(|i| {
        let dot: f64 = ps.row(i).iter().zip(pt.row(i)).map(|(a, b)| a * b).sum();
        (dot - inst.lw.tau).abs() > margin
    })
}

fn row(v: &[f64]) -> Matrix {
    Matrix::row_vector(v).unwrap()
}

fn step_output(inst: &Instance, s: &ModelState) -> uodr::trainer::StepOutput {
    compute_step(
        s,
        &inst.batch,
        Some(&inst.ctx),
        &inst.lw,
        &inst.flags,
        inst.weight_decay,
    )
    .unwrap()
}

/// Joint objective value and its gradient blocks, flattened to matrices:
/// encoder weight, encoder bias, head, then one per GCN layer.
pub fn composite_grads(inst: &Instance) -> (f64, Vec<Matrix>) {
    let out = step_output(inst, &inst.state);
    let g = out.grads;
    let mut blocks = vec![g.encoder_weight, row(&g.encoder_bias), g.head];
    blocks.extend(g.gcn);
    (out.total, blocks)
}

/// Max relative error over every parameter block of the joint objective.
pub fn composite_error(inst: &Instance) -> f64 {
    let (_, blocks) = composite_grads(inst);
    let eval = |s: &ModelState| step_output(inst, s).total;
    let s0 = &inst.state;
    let mut worst = grad_check(
        |w| {
            let mut s = s0.clone();
            s.encoder.weight = w.clone();
            eval(&s)
        },
        &s0.encoder.weight,
        &blocks[0],
        EPS,
    );
    worst = worst.max(grad_check(
        |b| {
            let mut s = s0.clone();
            s.encoder.bias = b.as_slice().to_vec();
            eval(&s)
        },
        &row(&s0.encoder.bias),
        &blocks[1],
        EPS,
    ));
    worst = worst.max(grad_check(
        |h| {
            let mut s = s0.clone();
            s.head.weights = h.clone();
            eval(&s)
        },
        &s0.head.weights,
        &blocks[2],
        EPS,
    ));
    for l in 0..s0.gcn.layers.len() {
        worst = worst.max(grad_check(
            |t| {
                let mut s = s0.clone();
                s.gcn.layers[l] = t.clone();
                eval(&s)
            },
            &s0.gcn.layers[l],
            &blocks[3 + l],
            EPS,
        ));
    }
    worst
}

/// Runs `trial` on `count` independent seeded instances and returns the
/// largest error.
pub fn suite(base_seed: u64, count: usize, mut trial: impl FnMut(&mut Rng) -> f64) -> f64 {
    (0..count)
        .map(|i| {
            trial(&mut Rng::seed_from_u64(
                base_seed.wrapping_mul(1000) + i as u64,
            ))
        })
        .fold(0.0, f64::max)
}

fn probs(rng: &mut Rng, n: usize, k: usize) -> Matrix {
    softmax_rows(&gaussian(rng, n, k, 1.5))
}

/// A random graph, word vectors and GCN weights with no pre-activation
/// near the leaky-ReLU kink.
fn gcn_fixture(rng: &mut Rng) -> (KnowledgeGraph, Matrix, Matrix, GcnParams) {
    loop {
        let g = random_graph(rng, 10);
        let p = normalized_adjacency(&g);
        let (c, m) = (between(rng, 1, 6), between(rng, 1, 6));
        let x = gaussian(rng, g.num_nodes(), c, 1.0);
        let params = GcnParams::init(c, 4, m, between(rng, 1, 2), 0.2, rng);
        if away_from_kinks(&p, &x, &params, 1e-4) {
            return (g, p, x, params);
        }
    }
}

pub fn init_loss_trial(rng: &mut Rng) -> f64 {
    loop {
        let (g, p, x, params) = gcn_fixture(rng);
        let w = gaussian(rng, g.known_class_count(), params.output_dim(), 1.0);
        let known = g.known_nodes().to_vec();
        let (value, grads) = init_objective(&p, &x, &params, &w, &known).unwrap();
        if !resolvable(value, &grads.iter().collect::<Vec<_>>()) {
            continue;
        }
        return (0..params.layers.len())
            .map(|l| {
                grad_check(
                    |t| {
                        let mut q = params.clone();
                        q.layers[l] = t.clone();
                        init_objective(&p, &x, &q, &w, &known).unwrap().0
                    },
                    &params.layers[l],
                    &grads[l],
                    EPS,
                )
            })
            .fold(0.0, f64::max);
    }
}

pub fn gcn_reg_trial(rng: &mut Rng) -> f64 {
    loop {
        let (g, p, x, params) = gcn_fixture(rng);
        let w_hat = gaussian(rng, g.total_class_count(), params.output_dim(), 1.0);
        let nodes = g.class_to_node().to_vec();
        let cache = gcn_forward_cached(&p, &x, &params).unwrap();
        let reg = gcn_reg_loss(&cache.output, &w_hat, &nodes).unwrap();
        let grads = gcn_backward(&p, &params, &cache, &reg.grad_output).unwrap();
        let mut all: Vec<&Matrix> = grads.iter().collect();
        all.push(&reg.grad_head);
        if !resolvable(reg.value, &all) {
            continue;
        }
        let mut worst = grad_check(
            |h| gcn_reg_loss(&cache.output, h, &nodes).unwrap().value,
            &w_hat,
            &reg.grad_head,
            EPS,
        );
        for l in 0..params.layers.len() {
            worst = worst.max(grad_check(
                |t| {
                    let mut q = params.clone();
                    q.layers[l] = t.clone();
                    let o = gcn_forward(&p, &x, &q).unwrap();
                    gcn_reg_loss(&o, &w_hat, &nodes).unwrap().value
                },
                &params.layers[l],
                &grads[l],
                EPS,
            ));
        }
        return worst;
    }
}

pub fn sgmd_trial(rng: &mut Rng) -> f64 {
    loop {
        let (n, m, k) = (between(rng, 1, 8), between(rng, 1, 5), between(rng, 2, 6));
        let fs = gaussian(rng, n, m, 1.0);
        let ft = gaussian(rng, n, m, 1.0);
        let ps = probs(rng, n, k);
        let pt = probs(rng, n, k);
        let tau = rng.uniform_range(0.0, 0.5);
        let l = sgmd_loss(&fs, &ft, &ps, &pt, tau).unwrap();
        if !resolvable(l.value, &[&l.grad_source, &l.grad_target]) {
            continue;
        }
        let a = grad_check(
            |f| sgmd_loss(f, &ft, &ps, &pt, tau).unwrap().value,
            &fs,
            &l.grad_source,
            EPS,
        );
        let b = grad_check(
            |f| sgmd_loss(&fs, f, &ps, &pt, tau).unwrap().value,
            &ft,
            &l.grad_target,
            EPS,
        );
        return a.max(b);
    }
}

/// Balance terms checked through the softmax, as they are used in training.
fn balance_trial(rng: &mut Rng, f: impl Fn(&Matrix, usize) -> (f64, Matrix)) -> f64 {
    loop {
        let (n, k) = (between(rng, 1, 8), between(rng, 2, 6));
        let known = between(rng, 1, k - 1);
        let z = gaussian(rng, n, k, 1.5);
        let p = softmax_rows(&z);
        let (value, d_p) = f(&p, known);
        let d_z = softmax_backward(&p, &d_p);
        if resolvable(value, &[&d_z]) {
            return grad_check(|z| f(&softmax_rows(z), known).0, &z, &d_z, EPS);
        }
    }
}

pub fn vanilla_trial(rng: &mut Rng) -> f64 {
    balance_trial(rng, |p, known| balance_loss_vanilla(p, known, 1e-8))
}

pub fn limited_trial(rng: &mut Rng) -> f64 {
    let w = rng.uniform_range(0.05, 0.95);
    balance_trial(rng, move |p, known| limited_balance_loss(p, known, w, 1e-8))
}

pub fn cls_trial(rng: &mut Rng) -> f64 {
    loop {
        let (n, k) = (between(rng, 1, 8), between(rng, 2, 6));
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let z = gaussian(rng, n, k, 1.5);
        let (value, d_z) = cross_entropy_logits(&z, &labels).unwrap();
        let p = softmax_rows(&z);
        let (_, d_p) = cls_loss(&p, &labels).unwrap();
        if !resolvable(value, &[&d_z, &d_p]) {
            continue;
        }
        let a = grad_check(
            |z| cross_entropy_logits(z, &labels).unwrap().0,
            &z,
            &d_z,
            EPS,
        );
        let b = grad_check(|p| cls_loss(p, &labels).unwrap().0, &p, &d_p, EPS);
        return a.max(b);
    }
}

pub fn encoder_trial(rng: &mut Rng) -> f64 {
    loop {
        let (n, m_in, m) = (between(rng, 1, 8), between(rng, 1, 5), between(rng, 1, 5));
        let enc = Encoder {
            weight: gaussian(rng, m_in, m, 1.0),
            bias: (0..m).map(|_| rng.normal()).collect(),
        };
        let raw = gaussian(rng, n, m_in, 1.0);
        let probe = gaussian(rng, n, m, 1.0);
        let f = |e: &Encoder, x: &Matrix| e.encode(x).unwrap().hadamard(&probe).unwrap().sum();
        let g = enc.backward(&raw, &probe).unwrap();
        let bias_grad = row(&g.bias);
        if !resolvable(f(&enc, &raw), &[&g.weight, &bias_grad, &g.input]) {
            continue;
        }
        let with = |weight: &Matrix, bias: &[f64]| Encoder {
            weight: weight.clone(),
            bias: bias.to_vec(),
        };
        let w = grad_check(
            |w| f(&with(w, &enc.bias), &raw),
            &enc.weight,
            &g.weight,
            EPS,
        );
        let b = grad_check(
            |b| f(&with(&enc.weight, b.as_slice()), &raw),
            &row(&enc.bias),
            &bias_grad,
            EPS,
        );
        let x = grad_check(|x| f(&enc, x), &raw, &g.input, EPS);
        return w.max(b).max(x);
    }
}

pub fn composite_trial(rng: &mut Rng, vanilla: bool) -> f64 {
    loop {
        let inst = random_instance(rng, vanilla);
        let s = &inst.state;
        if !away_from_gate(&inst, 1e-3)
            || !away_from_kinks(&inst.ctx.propagation, &inst.ctx.word_vectors, &s.gcn, 1e-4)
        {
            continue;
        }
        let (value, blocks) = composite_grads(&inst);
        if resolvable(value, &blocks.iter().collect::<Vec<_>>()) {
            return composite_error(&inst);
        }
    }
}
