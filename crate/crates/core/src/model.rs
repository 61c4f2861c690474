//! Trainable target model: a linear encoder shared by both domains, the
//! bias-free classifier head over all classes, and the GCN weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};
use crate::gcn::GcnParams;
use crate::losses::{cross_entropy_logits, Accumulate, ClassifierHead};
use crate::numkit::{Matrix, Rng};
use crate::synth::LabeledDataset;

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    /// `M_in×M`.
    pub weight: Matrix,
    /// Length `M`.
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

impl Encoder {
    pub fn init(input_dim: usize, output_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let data = (0..input_dim * output_dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            weight: Matrix::from_raw(input_dim, output_dim, data),
            bias: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `raw · weight + bias`.
    pub fn encode(&self, raw: &Matrix) -> Result<Matrix> {
        if raw.cols() != self.input_dim() {
            return Err(Error::dims(
                "encode",
                format!(
                    "input has {} columns, encoder expects {}",
                    raw.cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut out = raw.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn backward(&self, raw: &Matrix, grad_out: &Matrix) -> Result<EncoderGrads> {
        Ok(EncoderGrads {
            weight: raw.matmul_tn(grad_out)?,
            bias: grad_out.col_sums(),
            input: grad_out.matmul_nt(&self.weight)?,
        })
    }
}

/// Replaces the classifier with generated class embeddings (copied).
pub fn init_head_from_gcn(embeddings: &Matrix, known_count: usize) -> Result<ClassifierHead> {
    if !embeddings.is_finite() {
        return Err(Error::NonFinite("class embeddings".into()));
    }
    ClassifierHead::new(embeddings.clone(), known_count)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub encoder: Encoder,
    pub head: ClassifierHead,
    pub gcn: GcnParams,
}

impl ModelState {
    pub fn validate(&self) -> Result<()> {
        let m = self.encoder.output_dim();
        if self.encoder.bias.len() != m {
            return Err(Error::Validation(format!(
                "encoder bias has {} entries, expected {m}",
                self.encoder.bias.len()
            )));
        }
        if self.head.dim() != m {
            return Err(Error::Validation(format!(
                "head dimension {} != feature dimension {m}",
                self.head.dim()
            )));
        }
        if !self.gcn.layers.is_empty() && self.gcn.output_dim() != m {
            return Err(Error::Validation(format!(
                "gcn output dimension {} != feature dimension {m}",
                self.gcn.output_dim()
            )));
        }
        for pair in self.gcn.layers.windows(2) {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::Validation("gcn layer shapes do not chain".into()));
            }
        }
        Ok(())
    }
}

/// Gradient (or velocity) buffers matching [`ModelState`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub encoder_weight: Matrix,
    pub encoder_bias: Vec<f64>,
    pub head: Matrix,
    pub gcn: Vec<Matrix>,
}

impl ModelGrads {
    pub fn zeros(state: &ModelState) -> Self {
        Self {
            encoder_weight: state.encoder.weight.zeros_like(),
            encoder_bias: vec![0.0; state.encoder.bias.len()],
            head: state.head.weights.zeros_like(),
            gcn: state.gcn.zeros_like(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder_weight.is_finite()
            && self.encoder_bias.iter().all(|v| v.is_finite())
            && self.head.is_finite()
            && self.gcn.iter().all(Matrix::is_finite)
    }
}

impl Accumulate for ModelGrads {
    fn zeros_like(&self) -> Self {
        Self {
            encoder_weight: self.encoder_weight.zeros_like(),
            encoder_bias: vec![0.0; self.encoder_bias.len()],
            head: self.head.zeros_like(),
            gcn: self.gcn.iter().map(Accumulate::zeros_like).collect(),
        }
    }

    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        Accumulate::add_scaled(&mut self.encoder_weight, alpha, &other.encoder_weight);
        for (a, b) in self.encoder_bias.iter_mut().zip(&other.encoder_bias) {
            *a += alpha * b;
        }
        Accumulate::add_scaled(&mut self.head, alpha, &other.head);
        for (a, b) in self.gcn.iter_mut().zip(&other.gcn) {
            Accumulate::add_scaled(a, alpha, b);
        }
    }
}

/// SGD with classical momentum: `v ← μv − lr·g; θ ← θ + v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: ModelGrads,
}

fn momentum_update(params: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, mu: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v - lr * g;
        *p += *v;
    }
}

impl MomentumSgd {
    pub fn new(state: &ModelState, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: ModelGrads::zeros(state),
        }
    }

    /// Applies one update. GCN weights are left untouched when `update_gcn`
    /// is false.
    pub fn step(&mut self, state: &mut ModelState, grads: &ModelGrads, update_gcn: bool) {
        let (lr, mu) = (self.lr, self.momentum);
        momentum_update(
            state.encoder.weight.as_mut_slice(),
            self.velocity.encoder_weight.as_mut_slice(),
            grads.encoder_weight.as_slice(),
            lr,
            mu,
        );
        momentum_update(
            &mut state.encoder.bias,
            &mut self.velocity.encoder_bias,
            &grads.encoder_bias,
            lr,
            mu,
        );
        momentum_update(
            state.head.weights.as_mut_slice(),
            self.velocity.head.as_mut_slice(),
            grads.head.as_slice(),
            lr,
            mu,
        );
        if update_gcn {
            for ((theta, v), g) in state
                .gcn
                .layers
                .iter_mut()
                .zip(&mut self.velocity.gcn)
                .zip(&grads.gcn)
            {
                momentum_update(theta.as_mut_slice(), v.as_mut_slice(), g.as_slice(), lr, mu);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 penalty on encoder and classifier weights.
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            weight_decay: 0.03,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub encoder: Encoder,
    /// `L_S×M` source classifier.
    pub classifier: Matrix,
    /// Full-data cross-entropy before training and after each epoch.
    pub loss_history: Vec<f64>,
}

impl Pretrained {
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        let logits = self
            .encoder
            .encode(&data.features)?
            .matmul_nt(&self.classifier)?;
        let correct = (0..logits.rows())
            .filter(|&i| argmax(logits.row(i)) == data.labels[i])
            .count();
        Ok(correct as f64 / data.len().max(1) as f64)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn source_objective(
    encoder: &Encoder,
    classifier: &Matrix,
    raw: &Matrix,
    labels: &[usize],
    weight_decay: f64,
) -> Result<(f64, EncoderGrads, Matrix)> {
    let f = encoder.encode(raw)?;
    let logits = f.matmul_nt(classifier)?;
    let (mut loss, d_logits) = cross_entropy_logits(&logits, labels)?;
    let mut d_w = d_logits.matmul_tn(&f)?;
    let d_f = d_logits.matmul(classifier)?;
    let mut g = encoder.backward(raw, &d_f)?;
    if weight_decay > 0.0 {
        loss += 0.5 * weight_decay * (encoder.weight.frobenius_sq() + classifier.frobenius_sq());
        g.weight.add_scaled(weight_decay, &encoder.weight)?;
        d_w.add_scaled(weight_decay, classifier)?;
    }
    Ok((loss, g, d_w))
}

/// Trains encoder and known-class classifier with cross-entropy on the
/// labeled source data.
pub fn pretrain_source(
    source: &LabeledDataset,
    feature_dim: usize,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<Pretrained> {
    let known = source.num_classes;
    let mut encoder = Encoder::init(source.features.cols(), feature_dim, rng);
    let mut classifier = Matrix::from_raw(
        known,
        feature_dim,
        (0..known * feature_dim)
            .map(|_| 0.01 * rng.normal())
            .collect(),
    );
    let mut v_we = encoder.weight.zeros_like();
    let mut v_b = vec![0.0; feature_dim];
    let mut v_w = classifier.zeros_like();
    let full_loss = |e: &Encoder, c: &Matrix| -> Result<f64> {
        Ok(source_objective(e, c, &source.features, &source.labels, cfg.weight_decay)?.0)
    };
    let mut loss_history = vec![full_loss(&encoder, &classifier)?];
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        let order = rng.permutation(source.len());
        for chunk in order.chunks(batch) {
            let raw = source.features.select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| source.labels[i]).collect();
            let (_, g, d_w) =
                source_objective(&encoder, &classifier, &raw, &labels, cfg.weight_decay)?;
            momentum_update(
                encoder.weight.as_mut_slice(),
                v_we.as_mut_slice(),
                g.weight.as_slice(),
                cfg.lr,
                cfg.momentum,
            );
            momentum_update(&mut encoder.bias, &mut v_b, &g.bias, cfg.lr, cfg.momentum);
            momentum_update(
                classifier.as_mut_slice(),
                v_w.as_mut_slice(),
                d_w.as_slice(),
                cfg.lr,
                cfg.momentum,
            );
        }
        let loss = full_loss(&encoder, &classifier)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("source pretraining loss".into()));
        }
        loss_history.push(loss);
    }
    Ok(Pretrained {
        encoder,
        classifier,
        loss_history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub raw_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub known_classes: usize,
    pub gcn_layers: usize,
    pub gcn_input_dim: usize,
    pub activation_slope: f64,
    pub config_hash: String,
}

const CHECKPOINT_FORMAT: &str = "uodr-checkpoint-v1";

fn gcn_file(layer: usize) -> String {
    if layer == 0 {
        "gcn.theta".to_string()
    } else {
        format!("gcn.theta.{layer}")
    }
}

pub fn save_checkpoint(dir: &Path, state: &ModelState, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.encoder.weight.save(&dir.join("encoder.weight"))?;
    Matrix::row_vector(&state.encoder.bias)?.save(&dir.join("encoder.bias"))?;
    state.head.weights.save(&dir.join("head.weights"))?;
    for (l, theta) in state.gcn.layers.iter().enumerate() {
        theta.save(&dir.join(gcn_file(l)))?;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        raw_dim: state.encoder.input_dim(),
        feature_dim: state.encoder.output_dim(),
        num_classes: state.head.num_classes(),
        known_classes: state.head.known_count,
        gcn_layers: state.gcn.layers.len(),
        gcn_input_dim: state.gcn.input_dim(),
        activation_slope: state.gcn.activation_slope,
        config_hash: config_hash.into(),
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    error::write_string(&dir.join("manifest.json"), &json)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_str(&error::read_to_string(&mpath)?)
        .map_err(|e| Error::Validation(format!("{}: {e}", mpath.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Validation(format!(
            "{}: unsupported format `{}`",
            mpath.display(),
            manifest.format
        )));
    }
    let weight = Matrix::load(&dir.join("encoder.weight"))?;
    let bias = Matrix::load(&dir.join("encoder.bias"))?;
    let head = Matrix::load(&dir.join("head.weights"))?;
    let layers = (0..manifest.gcn_layers)
        .map(|l| Matrix::load(&dir.join(gcn_file(l))))
        .collect::<Result<Vec<_>>>()?;
    let expect = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{}: {what} does not match the manifest",
                dir.display()
            )))
        }
    };
    expect(
        weight.shape() == (manifest.raw_dim, manifest.feature_dim),
        "encoder.weight shape",
    )?;
    expect(
        bias.shape() == (1, manifest.feature_dim),
        "encoder.bias shape",
    )?;
    expect(
        head.shape() == (manifest.num_classes, manifest.feature_dim),
        "head.weights shape",
    )?;
    expect(
        layers.first().map(Matrix::rows) == Some(manifest.gcn_input_dim),
        "gcn input dimension",
    )?;
    let state = ModelState {
        encoder: Encoder {
            weight,
            bias: bias.into_vec(),
        },
        head: ClassifierHead::new(head, manifest.known_classes)?,
        gcn: GcnParams {
            layers,
            activation_slope: manifest.activation_slope,
        },
    };
    state.validate()?;
    Ok((state, manifest))
}
