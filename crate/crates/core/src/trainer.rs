//! Staged training: source pretraining, GCN initialization, cross-domain
//! matching and the joint objective, plus the ablation and closed-set
//! domain-adaptation runners built on top of it.

use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Flags};
use crate::error::{self, Error, Result};
use crate::evaluate::{evaluate, AccuracyTriple};
use crate::gcn::{gcn_backward, gcn_forward_cached, gcn_reg_loss, train_gcn_init, GcnParams};
use crate::graph::{load_graph, normalized_adjacency, KnowledgeGraph};
use crate::losses::{
    balance_loss_vanilla, cross_entropy_logits, limited_balance_loss, sgmd_loss, total_loss,
    unknown_mass, ClassifierHead, LossValues, LossWeights,
};
use crate::matcher::{match_domains_by, Distance, MatchedPairs};
use crate::model::{
    init_head_from_gcn, pretrain_source, Encoder, ModelGrads, ModelState, MomentumSgd,
};
use crate::numkit::{softmax_backward, softmax_rows, Matrix, Rng};
use crate::synth::{self, LabeledDataset, SynthConfig, UnlabeledDataset};

// Independent random streams per stage, so switching one stage off never
// shifts the randomness another stage sees.
const STREAM_PRETRAIN: u64 = 11;
const STREAM_GCN: u64 = 12;
const STREAM_MATCH: u64 = 13;
const STREAM_JOINT: u64 = 14;

/// Everything a run reads from disk (or generates).
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub source: LabeledDataset,
    pub target: UnlabeledDataset,
    pub graph: KnowledgeGraph,
    /// One row per graph node.
    pub word_vectors: Matrix,
}

pub const SOURCE_FILE: &str = "source.ds";
pub const TARGET_FILE: &str = "target.ds";
pub const GRAPH_FILE: &str = "graph.txt";
pub const WORDVEC_FILE: &str = "wordvec.mat";

impl ExperimentData {
    pub fn synthetic(cfg: &SynthConfig) -> Result<Self> {
        let b = synth::generate(cfg)?;
        Ok(Self {
            source: b.source,
            target: b.target,
            graph: b.graph,
            word_vectors: b.word_vectors,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.graph;
        let fail = |m: String| Err(Error::Validation(m));
        if self.source.num_classes != g.known_class_count() {
            return fail(format!(
                "source has {} classes, graph marks {} as known",
                self.source.num_classes,
                g.known_class_count()
            ));
        }
        if self.target.num_classes != g.total_class_count() {
            return fail(format!(
                "target has {} classes, graph has {}",
                self.target.num_classes,
                g.total_class_count()
            ));
        }
        if self.word_vectors.rows() != g.num_nodes() {
            return fail(format!(
                "{} word vectors for {} graph nodes",
                self.word_vectors.rows(),
                g.num_nodes()
            ));
        }
        if self.source.features.cols() != self.target.features.cols() {
            return fail(format!(
                "source features have {} columns, target {}",
                self.source.features.cols(),
                self.target.features.cols()
            ));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let data = Self {
            source: LabeledDataset::load(&dir.join(SOURCE_FILE))?,
            target: UnlabeledDataset::load(&dir.join(TARGET_FILE))?,
            graph: load_graph(&dir.join(GRAPH_FILE))?,
            word_vectors: Matrix::load(&dir.join(WORDVEC_FILE))?,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.source.save(&dir.join(SOURCE_FILE))?;
        self.target.save(&dir.join(TARGET_FILE))?;
        self.graph.save(&dir.join(GRAPH_FILE))?;
        self.word_vectors.save(&dir.join(WORDVEC_FILE))
    }

    /// The view the trainer is allowed to see: target features only.
    pub fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs {
            source: &self.source,
            target_features: &self.target.features,
            graph: &self.graph,
            word_vectors: &self.word_vectors,
        }
    }
}

/// Training inputs. Target labels are deliberately absent.
#[derive(Clone, Copy, Debug)]
pub struct TrainInputs<'a> {
    pub source: &'a LabeledDataset,
    pub target_features: &'a Matrix,
    pub graph: &'a KnowledgeGraph,
    pub word_vectors: &'a Matrix,
}

/// Fixed graph quantities used by the structure term.
#[derive(Clone, Debug)]
pub struct GraphContext {
    /// `D⁻¹A`.
    pub propagation: Matrix,
    pub word_vectors: Matrix,
    /// Graph node of each class, in class order.
    pub class_nodes: Vec<usize>,
}

impl GraphContext {
    pub fn new(graph: &KnowledgeGraph, word_vectors: &Matrix, normalize: bool) -> Self {
        let mut x = word_vectors.clone();
        if normalize {
            for r in 0..x.rows() {
                let row = x.row_mut(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        Self {
            propagation: normalized_adjacency(graph),
            word_vectors: x,
            class_nodes: graph.class_to_node().to_vec(),
        }
    }
}

/// Raw inputs of one optimization step.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub source_raw: Matrix,
    pub source_labels: Vec<usize>,
    pub target_raw: Matrix,
    /// Source and target members of the matched pairs, row-aligned.
    pub pair_source_raw: Matrix,
    pub pair_target_raw: Matrix,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub values: LossValues,
    pub total: f64,
    pub grads: ModelGrads,
    /// Per-term gradients before weighting: cls, sgmd, balance, gcn.
    pub term_grads: [ModelGrads; 4],
    pub gated: usize,
    pub pairs: usize,
}

/// Which balance term the step applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Balance {
    Off,
    Limited,
    Vanilla,
}

impl Balance {
    pub fn from_flags(flags: &Flags) -> Self {
        if flags.lb {
            Balance::Limited
        } else if flags.vanilla_balance {
            Balance::Vanilla
        } else {
            Balance::Off
        }
    }
}

fn add_encoder_grads(
    g: &mut ModelGrads,
    enc: &Encoder,
    raw: &Matrix,
    d_features: &Matrix,
) -> Result<()> {
    let e = enc.backward(raw, d_features)?;
    g.encoder_weight.add_scaled(1.0, &e.weight)?;
    for (a, b) in g.encoder_bias.iter_mut().zip(&e.bias) {
        *a += b;
    }
    Ok(())
}

/// Cross-entropy over the known-class logits. Unknown-class head rows get
/// exactly zero gradient from this term.
fn cls_term(state: &ModelState, raw: &Matrix, labels: &[usize]) -> Result<(f64, ModelGrads)> {
    let mut g = ModelGrads::zeros(state);
    if raw.rows() == 0 {
        return Ok((0.0, g));
    }
    let known = state.head.known_count;
    let f = state.encoder.encode(raw)?;
    let z = f.matmul_nt(&state.head.weights)?;
    let (value, dz_known) = cross_entropy_logits(&z.slice_cols(0, known), labels)?;
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        dz.row_mut(i)[..known].copy_from_slice(dz_known.row(i));
    }
    g.head = dz.matmul_tn(&f)?;
    add_encoder_grads(
        &mut g,
        &state.encoder,
        raw,
        &dz.matmul(&state.head.weights)?,
    )?;
    Ok((value, g))
}

fn sgmd_term(
    state: &ModelState,
    src: &Matrix,
    tgt: &Matrix,
    tau: f64,
) -> Result<(f64, ModelGrads, usize)> {
    let mut g = ModelGrads::zeros(state);
    if src.rows() == 0 {
        return Ok((0.0, g, 0));
    }
    let fs = state.encoder.encode(src)?;
    let ft = state.encoder.encode(tgt)?;
    let ps = softmax_rows(&fs.matmul_nt(&state.head.weights)?);
    let pt = softmax_rows(&ft.matmul_nt(&state.head.weights)?);
    let l = sgmd_loss(&fs, &ft, &ps, &pt, tau)?;
    // Both domains pass through the same encoder parameters.
    add_encoder_grads(&mut g, &state.encoder, src, &l.grad_source)?;
    add_encoder_grads(&mut g, &state.encoder, tgt, &l.grad_target)?;
    Ok((l.value, g, l.gated))
}

fn balance_term(
    state: &ModelState,
    raw: &Matrix,
    kind: Balance,
    lw: &LossWeights,
) -> Result<(f64, ModelGrads)> {
    let mut g = ModelGrads::zeros(state);
    if kind == Balance::Off || raw.rows() == 0 {
        return Ok((0.0, g));
    }
    let known = state.head.known_count;
    let f = state.encoder.encode(raw)?;
    let pt = softmax_rows(&f.matmul_nt(&state.head.weights)?);
    let (value, d_pt) = match kind {
        Balance::Limited => limited_balance_loss(&pt, known, lw.w, lw.epsilon),
        Balance::Vanilla => balance_loss_vanilla(&pt, known, lw.epsilon),
        Balance::Off => unreachable!(),
    };
    let dz = softmax_backward(&pt, &d_pt);
    g.head = dz.matmul_tn(&f)?;
    add_encoder_grads(
        &mut g,
        &state.encoder,
        raw,
        &dz.matmul(&state.head.weights)?,
    )?;
    Ok((value, g))
}

fn gcn_term(state: &ModelState, ctx: &GraphContext) -> Result<(f64, ModelGrads)> {
    let mut g = ModelGrads::zeros(state);
    let cache = gcn_forward_cached(&ctx.propagation, &ctx.word_vectors, &state.gcn)?;
    let reg = gcn_reg_loss(&cache.output, &state.head.weights, &ctx.class_nodes)?;
    g.head = reg.grad_head;
    g.gcn = gcn_backward(&ctx.propagation, &state.gcn, &cache, &reg.grad_output)?;
    Ok((reg.value, g))
}

/// Value and gradient of the joint objective
/// `L_cls + λ_d L_d + λ_b L_b + λ_g L_gcn` on one batch. Disabled terms
/// contribute exact zeros. The structure term needs `graph`.
pub fn compute_step(
    state: &ModelState,
    batch: &StepBatch,
    graph: Option<&GraphContext>,
    lw: &LossWeights,
    flags: &Flags,
    weight_decay: f64,
) -> Result<StepOutput> {
    let (mut cls, mut g_cls) = cls_term(state, &batch.source_raw, &batch.source_labels)?;
    if weight_decay > 0.0 {
        cls += 0.5 * weight_decay * state.encoder.weight.frobenius_sq();
        g_cls
            .encoder_weight
            .add_scaled(weight_decay, &state.encoder.weight)?;
    }
    let (sgmd, g_sgmd, gated) = if flags.sgmd {
        sgmd_term(
            state,
            &batch.pair_source_raw,
            &batch.pair_target_raw,
            lw.tau,
        )?
    } else {
        (0.0, ModelGrads::zeros(state), 0)
    };
    let (balance, g_bal) = balance_term(state, &batch.target_raw, Balance::from_flags(flags), lw)?;
    let (gcn, g_gcn) = match (flags.gcn, graph) {
        (true, Some(ctx)) => gcn_term(state, ctx)?,
        (true, None) => {
            return Err(Error::Validation(
                "structure term enabled without a graph".into(),
            ))
        }
        (false, _) => (0.0, ModelGrads::zeros(state)),
    };
    let values = LossValues {
        cls,
        sgmd,
        balance,
        gcn,
    };
    let (total, grads) = total_loss(values, [&g_cls, &g_sgmd, &g_bal, &g_gcn], lw);
    Ok(StepOutput {
        values,
        total,
        grads,
        term_grads: [g_cls, g_sgmd, g_bal, g_gcn],
        gated,
        pairs: batch.pair_source_raw.rows(),
    })
}

/// Mean of `R_i` over `target`, from features alone.
pub fn mean_unknown_mass(state: &ModelState, target: &Matrix) -> Result<f64> {
    if target.rows() == 0 {
        return Ok(0.0);
    }
    let p = softmax_rows(
        &state
            .encoder
            .encode(target)?
            .matmul_nt(&state.head.weights)?,
    );
    let r = unknown_mass(&p, state.head.known_count);
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

fn check_finite(values: &LossValues, total: f64, epoch: usize, step: usize) -> Result<()> {
    let named = [
        ("cls", values.cls),
        ("sgmd", values.sgmd),
        ("balance", values.balance),
        ("gcn", values.gcn),
        ("total", total),
    ];
    match named.iter().find(|(_, v)| !v.is_finite()) {
        Some((component, _)) => Err(Error::NumericFailure {
            component,
            epoch,
            step,
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Step means of the unweighted terms.
    pub losses: LossValues,
    /// Step mean of the weighted objective.
    pub total: f64,
    /// Open gates over matched pairs seen this epoch.
    pub gated_fraction: f64,
    /// Mean unknown-class probability mass over the whole target set at
    /// the end of the epoch. Near zero means target predictions are being
    /// forced into the known classes.
    pub unknown_mass: f64,
    pub eval: Option<AccuracyTriple>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    /// Full-data source loss before pretraining and after each epoch.
    pub pretrain_loss: Vec<f64>,
    pub pretrain_accuracy: f64,
    /// Known-row MSE of the GCN output against the pretrained classifier.
    pub gcn_init_mse: Option<f64>,
    pub matched_pairs: usize,
    /// Evaluation of the initialized model before joint training.
    pub initial_eval: Option<AccuracyTriple>,
    pub initial_unknown_mass: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Callback scoring a model snapshot. It is the only place target labels
/// may enter, and it cannot influence training.
pub type Evaluator<'a> = &'a dyn Fn(&ModelState) -> Result<AccuracyTriple>;

/// Settings the joint loop needs, separated from the config file so the
/// closed-set runner can reuse it.
#[derive(Clone, Debug)]
pub struct JointSettings {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub folds: usize,
    pub rematch_every: usize,
    pub distance: Distance,
    pub flags: Flags,
    pub weights: LossWeights,
}

impl JointSettings {
    pub fn from_config(cfg: &ExperimentConfig, known: usize, total: usize) -> Result<Self> {
        Ok(Self::with(
            cfg,
            cfg.flags,
            cfg.losses.resolve(known, total)?,
        ))
    }

    /// Schedule and matching settings from `cfg` with the given terms.
    pub fn with(cfg: &ExperimentConfig, flags: Flags, weights: LossWeights) -> Self {
        Self {
            lr: cfg.joint.lr,
            momentum: cfg.joint.momentum,
            epochs: cfg.joint.epochs,
            batch_size: cfg.joint.batch_size,
            weight_decay: cfg.joint.weight_decay,
            folds: cfg.matching.folds,
            rematch_every: cfg.matching.rematch_every,
            distance: cfg.matching.distance,
            flags,
            weights,
        }
    }
}

fn compute_matching(
    state: &ModelState,
    source: &Matrix,
    target: &Matrix,
    js: &JointSettings,
    rng: &mut Rng,
) -> Result<MatchedPairs> {
    let k = js.folds.min(source.rows()).min(target.rows()).max(1);
    let fs = state.encoder.encode(source)?;
    let ft = state.encoder.encode(target)?;
    match_domains_by(&fs, &ft, k, js.distance, rng)
}

/// Endless shuffled pass over the source indices.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut Rng) -> Self {
        Self {
            order: rng.permutation(n),
            pos: 0,
        }
    }

    fn take(&mut self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = rng.permutation(self.order.len());
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs the joint loop in place. One step pairs a target batch with an
/// equally sized source batch; an epoch is one pass over the target set.
pub fn joint_train(
    state: &mut ModelState,
    source: &LabeledDataset,
    target: &Matrix,
    graph: Option<&GraphContext>,
    js: &JointSettings,
    seed_rng: &Rng,
    eval: Option<Evaluator<'_>>,
) -> Result<(Vec<EpochRecord>, usize)> {
    let mut match_rng = seed_rng.derive(STREAM_MATCH);
    let mut rng = seed_rng.derive(STREAM_JOINT);
    let mut pairs = if js.flags.sgmd {
        Some(compute_matching(
            state,
            &source.features,
            target,
            js,
            &mut match_rng,
        )?)
    } else {
        None
    };
    let n_pairs = pairs.as_ref().map_or(0, MatchedPairs::len);
    // Target partner of each source row, if it was matched.
    let partner_of = |p: &Option<MatchedPairs>| {
        let mut v = vec![None; source.len()];
        if let Some(p) = p {
            for &(s, t) in &p.pairs {
                v[s] = Some(t);
            }
        }
        v
    };
    let mut partner = partner_of(&pairs);
    let mut opt = MomentumSgd::new(state, js.lr, js.momentum);
    let mut cycler = Cycler::new(source.len(), &mut rng);
    let batch = js.batch_size.max(1);
    let mut records = Vec::with_capacity(js.epochs);
    for epoch in 1..=js.epochs {
        if js.flags.sgmd && js.rematch_every > 0 && epoch > 1 && (epoch - 1) % js.rematch_every == 0
        {
            pairs = Some(compute_matching(
                state,
                &source.features,
                target,
                js,
                &mut match_rng,
            )?);
            partner = partner_of(&pairs);
        }
        let order = rng.permutation(target.rows());
        let mut sums = LossValues::default();
        let (mut total, mut gated, mut seen, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for (step, t_idx) in order.chunks(batch).enumerate() {
            let s_idx = cycler.take(t_idx.len(), &mut rng);
            let (ps, pt): (Vec<usize>, Vec<usize>) = s_idx
                .iter()
                .filter_map(|&s| partner[s].map(|t| (s, t)))
                .unzip();
            let b = StepBatch {
                source_raw: source.features.select_rows(&s_idx)?,
                source_labels: s_idx.iter().map(|&i| source.labels[i]).collect(),
                target_raw: target.select_rows(t_idx)?,
                pair_source_raw: source.features.select_rows(&ps)?,
                pair_target_raw: target.select_rows(&pt)?,
            };
            let out = compute_step(state, &b, graph, &js.weights, &js.flags, js.weight_decay)?;
            check_finite(&out.values, out.total, epoch, step)?;
            if !out.grads.is_finite() {
                return Err(Error::NumericFailure {
                    component: "gradient",
                    epoch,
                    step,
                });
            }
            opt.step(state, &out.grads, js.flags.gcn);
            sums.cls += out.values.cls;
            sums.sgmd += out.values.sgmd;
            sums.balance += out.values.balance;
            sums.gcn += out.values.gcn;
            total += out.total;
            gated += out.gated;
            seen += out.pairs;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let losses = LossValues {
            cls: sums.cls / n,
            sgmd: sums.sgmd / n,
            balance: sums.balance / n,
            gcn: sums.gcn / n,
        };
        let eval = eval.map(|f| f(state)).transpose()?;
        debug!(
            "epoch {epoch}: total {:.4} cls {:.4} sgmd {:.4} bal {:.4} gcn {:.4}",
            total / n,
            losses.cls,
            losses.sgmd,
            losses.balance,
            losses.gcn
        );
        records.push(EpochRecord {
            epoch,
            losses,
            total: total / n,
            gated_fraction: if seen == 0 {
                0.0
            } else {
                gated as f64 / seen as f64
            },
            unknown_mass: mean_unknown_mass(state, target)?,
            eval,
        });
    }
    Ok((records, n_pairs))
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub state: ModelState,
    pub history: TrainHistory,
}

/// Pretrain on the source, fit the GCN to the source classifier, install
/// its output as the head, match domains and run the joint loop.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    inputs: TrainInputs<'_>,
    eval: Option<Evaluator<'_>>,
) -> Result<PipelineResult> {
    cfg.validate()?;
    let graph = inputs.graph;
    let known = graph.known_class_count();
    let total = graph.total_class_count();
    if inputs.source.num_classes != known {
        return Err(Error::Validation(format!(
            "source has {} classes, graph marks {known} as known",
            inputs.source.num_classes
        )));
    }
    let root = Rng::seed_from_u64(cfg.seed);
    let pre = pretrain_source(
        inputs.source,
        cfg.feature_dim,
        &cfg.pretrain,
        &mut root.derive(STREAM_PRETRAIN),
    )?;
    let pretrain_accuracy = pre.accuracy(inputs.source)?;
    info!("source pretraining accuracy {pretrain_accuracy:.3}");

    let ctx = GraphContext::new(graph, inputs.word_vectors, cfg.normalize_word_vectors);
    let init = train_gcn_init(
        graph,
        &ctx.word_vectors,
        &pre.classifier,
        &cfg.gcn,
        &mut root.derive(STREAM_GCN),
    )?;
    let gcn_init_mse = init.known_mse(&pre.classifier);
    info!("gcn init known-row mse {gcn_init_mse:.3e}");

    let mut state = ModelState {
        encoder: pre.encoder,
        head: init_head_from_gcn(&init.embeddings, known)?,
        gcn: init.params,
    };
    state.validate()?;
    let initial_eval = eval.map(|f| f(&state)).transpose()?;
    let initial_unknown_mass = mean_unknown_mass(&state, inputs.target_features)?;

    let js = JointSettings::from_config(cfg, known, total)?;
    let (epochs, matched_pairs) = joint_train(
        &mut state,
        inputs.source,
        inputs.target_features,
        Some(&ctx),
        &js,
        &root,
        eval,
    )?;
    Ok(PipelineResult {
        state,
        history: TrainHistory {
            variant: cfg.flags.name(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            pretrain_loss: pre.loss_history,
            pretrain_accuracy,
            gcn_init_mse: Some(gcn_init_mse),
            matched_pairs,
            initial_eval,
            initial_unknown_mass,
            epochs,
        },
    })
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: ModelState,
    pub history: TrainHistory,
    pub metrics: AccuracyTriple,
}

/// [`run_pipeline`] scored on the target labels after every epoch.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<RunOutput> {
    data.validate()?;
    let target = &data.target;
    let scorer = |s: &ModelState| evaluate(s, target);
    let res = run_pipeline(cfg, data.inputs(), Some(&scorer))?;
    let metrics = evaluate(&res.state, target)?;
    Ok(RunOutput {
        state: res.state,
        history: res.history,
        metrics,
    })
}

/// Accuracy means (or standard deviations) without counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Acc3 {
    pub known: f64,
    pub unknown: f64,
    pub all: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn summarize(runs: &[AccuracyTriple]) -> (Acc3, Acc3) {
    let col = |f: fn(&AccuracyTriple) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    let (k, ks) = col(|t| t.known);
    let (u, us) = col(|t| t.unknown);
    let (a, as_) = col(|t| t.all);
    (
        Acc3 {
            known: k,
            unknown: u,
            all: a,
        },
        Acc3 {
            known: ks,
            unknown: us,
            all: as_,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub flags: Flags,
    pub seeds: Vec<u64>,
    pub runs: Vec<AccuracyTriple>,
    pub mean: Acc3,
    /// Sample standard deviation; 0 for a single seed.
    pub std: Acc3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub variants: Vec<VariantSummary>,
}

/// Fixed variant order of the ablation table.
pub fn ablation_variants() -> [(&'static str, Flags); 5] {
    let f = |lb, sgmd, gcn, vanilla_balance| Flags {
        lb,
        sgmd,
        gcn,
        vanilla_balance,
    };
    [
        ("baseline", f(false, false, false, false)),
        ("lb", f(true, false, false, false)),
        ("lb+sgmd", f(true, true, false, false)),
        ("lb+sgmd+gcn", f(true, true, true, false)),
        ("vanilla-balance", f(false, false, false, true)),
    ]
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Plain-text comparison table in percent, `mean ± std`.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>5} {:>15} {:>15} {:>15}\n",
            "variant", "seeds", "Known", "Unknown", "All"
        );
        for v in &self.variants {
            let cell = |m: f64, sd: f64| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd);
            s.push_str(&format!(
                "{:<18} {:>5} {:>15} {:>15} {:>15}\n",
                v.name,
                v.seeds.len(),
                cell(v.mean.known, v.std.known),
                cell(v.mean.unknown, v.std.unknown),
                cell(v.mean.all, v.std.all)
            ));
        }
        s
    }
}

/// Runs every ablation variant for each seed. `data_for_seed` supplies the
/// data of a seed; the run seed is set to the same value.
pub fn run_ablation(
    base: &ExperimentConfig,
    seeds: &[u64],
    data_for_seed: &dyn Fn(u64) -> Result<ExperimentData>,
) -> Result<AblationReport> {
    let variants = ablation_variants();
    let mut runs: Vec<Vec<AccuracyTriple>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let data = data_for_seed(seed)?;
        for (i, (name, flags)) in variants.iter().enumerate() {
            let cfg = ExperimentConfig {
                seed,
                flags: *flags,
                ..base.clone()
            };
            let out = run_experiment(&cfg, &data)?;
            info!("seed {seed} {name}: {:?}", out.metrics);
            runs[i].push(out.metrics);
        }
    }
    Ok(AblationReport {
        config_hash: base.hash(),
        variants: variants
            .iter()
            .zip(runs)
            .map(|((name, flags), runs)| {
                let (mean, std) = summarize(&runs);
                VariantSummary {
                    name: (*name).to_string(),
                    flags: *flags,
                    seeds: seeds.to_vec(),
                    runs,
                    mean,
                    std,
                }
            })
            .collect(),
    })
}

/// Seeds `base, base+1, …` used by the ablation and closed-set runners.
pub fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaReport {
    pub seeds: Vec<u64>,
    /// Target accuracy per seed.
    pub source_only: Vec<f64>,
    pub sgmd: Vec<f64>,
    pub source_only_mean: f64,
    pub sgmd_mean: f64,
}

/// Closed-set domain adaptation: the source covers every class, the head is
/// the pretrained classifier and only the cls and sgmd terms are used.
/// Both arms start from the same pretrained model and see the same batches.
/// Matching uses Euclidean distance.
pub fn run_da_mode(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<DaReport> {
    cfg.validate()?;
    let mut source_only = Vec::new();
    let mut sgmd = Vec::new();
    for &seed in seeds {
        let b = synth::generate_closed_set(&SynthConfig {
            seed,
            ..cfg.synth.clone()
        })?;
        let classes = b.source.num_classes;
        let root = Rng::seed_from_u64(seed);
        let pre = pretrain_source(
            &b.source,
            cfg.feature_dim,
            &cfg.pretrain,
            &mut root.derive(STREAM_PRETRAIN),
        )?;
        let start = ModelState {
            encoder: pre.encoder,
            head: ClassifierHead::new(pre.classifier, classes)?,
            gcn: GcnParams {
                layers: Vec::new(),
                activation_slope: cfg.gcn.activation_slope,
            },
        };
        start.validate()?;
        for (arm, out) in [(false, &mut source_only), (true, &mut sgmd)] {
            let mut state = start.clone();
            let flags = Flags {
                sgmd: arm,
                ..Flags::BASELINE
            };
            let weights = LossWeights {
                lambda_d: cfg.losses.lambda_d,
                lambda_b: 0.0,
                lambda_g: 0.0,
                tau: cfg.losses.tau,
                w: 0.5,
                epsilon: cfg.losses.epsilon,
            };
            let js = JointSettings {
                distance: Distance::L2,
                ..JointSettings::with(cfg, flags, weights)
            };
            joint_train(
                &mut state,
                &b.source,
                &b.target.features,
                None,
                &js,
                &root,
                None,
            )?;
            out.push(evaluate(&state, &b.target)?.all);
        }
    }
    let mean = |v: &[f64]| mean_std(v).0;
    Ok(DaReport {
        seeds: seeds.to_vec(),
        source_only_mean: mean(&source_only),
        sgmd_mean: mean(&sgmd),
        source_only,
        sgmd,
    })
}

/// Writes `history.json` into `dir`.
pub fn save_history(dir: &Path, history: &TrainHistory) -> Result<()> {
    error::write_string(&dir.join("history.json"), &(history.to_json()? + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.source_per_class = 6;
        cfg.synth.target_per_class = 6;
        cfg.pretrain.epochs = 3;
        cfg.gcn.steps = 50;
        cfg.joint.epochs = 2;
        cfg
    }

    #[test]
    fn history_has_one_record_per_epoch() {
        let cfg = tiny_cfg();
        let data = ExperimentData::synthetic(&cfg.synth).unwrap();
        let out = run_experiment(&cfg, &data).unwrap();
        assert_eq!(out.history.epochs.len(), cfg.joint.epochs);
        assert_eq!(out.history.epochs.last().unwrap().eval, Some(out.metrics));
        assert_eq!(out.history.variant, "lb+sgmd+gcn");
    }

    #[test]
    fn cycler_covers_every_index_each_pass() {
        let mut rng = Rng::seed_from_u64(3);
        let mut c = Cycler::new(5, &mut rng);
        let mut a = c.take(5, &mut rng);
        a.sort_unstable();
        assert_eq!(a, [0, 1, 2, 3, 4]);
        assert_eq!(c.take(7, &mut rng).len(), 7);
    }

    #[test]
    fn ablation_order_is_fixed() {
        let names: Vec<&str> = ablation_variants().iter().map(|v| v.0).collect();
        assert_eq!(
            names,
            [
                "baseline",
                "lb",
                "lb+sgmd",
                "lb+sgmd+gcn",
                "vanilla-balance"
            ]
        );
        for (name, flags) in ablation_variants() {
            assert_eq!(flags.name(), name);
        }
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
