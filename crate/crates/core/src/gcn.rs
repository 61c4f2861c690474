//! Graph convolution over the class taxonomy.
//!
//! Each layer computes `H' = σ(P · H · Θ)` with `P = D⁻¹A` and σ a leaky
//! ReLU. The output rows live in classifier-weight space, so a class's row is
//! directly usable as its (bias-free) classifier vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, KnowledgeGraph};
use crate::numkit::{leaky_relu, leaky_relu_grad, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    /// One weight matrix per layer; the first is `C×·`, the last `·×M`.
    pub layers: Vec<Matrix>,
    pub activation_slope: f64,
}

impl GcnParams {
    /// Fan-in scaled uniform init: each entry in `[-1/√in, 1/√in)`.
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        num_layers: usize,
        activation_slope: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(num_layers >= 1, "a GCN needs at least one layer");
        let mut layers = Vec::with_capacity(num_layers);
        let mut fan_in = input_dim;
        for l in 0..num_layers {
            let fan_out = if l + 1 == num_layers {
                output_dim
            } else {
                hidden_dim
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            layers.push(Matrix::from_raw(fan_in, fan_out, data));
            fan_in = fan_out;
        }
        Self {
            layers,
            activation_slope,
        }
    }

    pub fn single(theta: Matrix, activation_slope: f64) -> Self {
        Self {
            layers: vec![theta],
            activation_slope,
        }
    }

    /// The first layer's weights (the only one in the default single-layer setup).
    pub fn theta(&self) -> &Matrix {
        &self.layers[0]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Matrix::cols)
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GcnCache {
    /// `P · H_l` for each layer input `H_l`.
    propagated: Vec<Matrix>,
    /// Pre-activations `P · H_l · Θ_l`.
    pre: Vec<Matrix>,
    pub output: Matrix,
}

impl GcnCache {
    /// Pre-activations of each layer, input side of the leaky ReLU.
    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

pub fn gcn_forward(p: &Matrix, x: &Matrix, params: &GcnParams) -> Result<Matrix> {
    Ok(gcn_forward_cached(p, x, params)?.output)
}

pub fn gcn_forward_cached(p: &Matrix, x: &Matrix, params: &GcnParams) -> Result<GcnCache> {
    if p.rows() != p.cols() || p.cols() != x.rows() {
        return Err(Error::dims(
            "gcn_forward",
            format!(
                "P is {}x{}, X is {}x{}",
                p.rows(),
                p.cols(),
                x.rows(),
                x.cols()
            ),
        ));
    }
    let mut propagated = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = x.clone();
    for theta in &params.layers {
        let ph = p.matmul(&h)?;
        let z = ph.matmul(theta)?;
        h = leaky_relu(&z, params.activation_slope);
        propagated.push(ph);
        pre.push(z);
    }
    Ok(GcnCache {
        propagated,
        pre,
        output: h,
    })
}

/// Gradients of a scalar with respect to every layer's weights, given its
/// gradient with respect to the output.
pub fn gcn_backward(
    p: &Matrix,
    params: &GcnParams,
    cache: &GcnCache,
    grad_output: &Matrix,
) -> Result<Vec<Matrix>> {
    let mut grads = vec![Matrix::zeros(0, 0); params.layers.len()];
    let mut d_h = grad_output.clone();
    for l in (0..params.layers.len()).rev() {
        let d_z = d_h.hadamard(&leaky_relu_grad(&cache.pre[l], params.activation_slope))?;
        grads[l] = cache.propagated[l].matmul_tn(&d_z)?;
        if l > 0 {
            // d(P H Θ)/dH = Pᵀ · dZ · Θᵀ
            let d_ph = d_z.matmul_nt(&params.layers[l])?;
            d_h = p.matmul_tn(&d_ph)?;
        }
    }
    Ok(grads)
}

fn regression(
    o: &Matrix,
    target: &Matrix,
    nodes: &[usize],
    op: &'static str,
) -> Result<(f64, Matrix, Matrix)> {
    if nodes.len() != target.rows() || o.cols() != target.cols() {
        return Err(Error::dims(
            op,
            format!(
                "{} nodes, target {}x{}, output {}x{}",
                nodes.len(),
                target.rows(),
                target.cols(),
                o.rows(),
                o.cols()
            ),
        ));
    }
    let m = o.cols() as f64;
    let mut loss = 0.0;
    let mut d_o = Matrix::zeros(o.rows(), o.cols());
    let mut d_t = Matrix::zeros(target.rows(), target.cols());
    for (i, &node) in nodes.iter().enumerate() {
        if node >= o.rows() {
            return Err(Error::dims(
                op,
                format!("node index {node} out of range for {} rows", o.rows()),
            ));
        }
        for j in 0..o.cols() {
            let diff = o.get(node, j) - target.get(i, j);
            loss += diff * diff;
            d_o.set(node, j, d_o.get(node, j) + diff / m);
            d_t.set(i, j, -diff / m);
        }
    }
    Ok((loss / (2.0 * m), d_o, d_t))
}

/// Regression of the known-class output rows onto pretrained classifier
/// weights: `(1/2M) Σ_{known i} Σ_j (O_ij − W_ij)²`.
///
/// Returns the loss and its gradient with respect to `o`.
pub fn init_loss(o: &Matrix, w: &Matrix, known_nodes: &[usize]) -> Result<(f64, Matrix)> {
    let (loss, d_o, _) = regression(o, w, known_nodes, "init_loss")?;
    Ok((loss, d_o))
}

#[derive(Clone, Debug)]
pub struct RegLoss {
    pub value: f64,
    pub grad_output: Matrix,
    pub grad_head: Matrix,
}

/// Structure term tying every class's head row to its GCN output row:
/// `(1/2M) Σ_{i<L_T} Σ_j (O_{node(i),j} − Ŵ_ij)²`. Gradients go to both sides.
pub fn gcn_reg_loss(o: &Matrix, w_hat: &Matrix, class_nodes: &[usize]) -> Result<RegLoss> {
    let (value, grad_output, grad_head) = regression(o, w_hat, class_nodes, "gcn_reg_loss")?;
    Ok(RegLoss {
        value,
        grad_output,
        grad_head,
    })
}

/// Loss and per-layer weight gradients of the initialization objective.
pub fn init_objective(
    p: &Matrix,
    x: &Matrix,
    params: &GcnParams,
    w: &Matrix,
    known_nodes: &[usize],
) -> Result<(f64, Vec<Matrix>)> {
    let cache = gcn_forward_cached(p, x, params)?;
    let (loss, d_o) = init_loss(&cache.output, w, known_nodes)?;
    let grads = gcn_backward(p, params, &cache, &d_o)?;
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub layers: usize,
    /// Width of intermediate layers; unused with a single layer.
    pub hidden_dim: usize,
    pub activation_slope: f64,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Multiplier on the fan-in init bound of every layer.
    pub init_scale: f64,
    /// Ridge penalty `½·wd·‖Θ‖²` added during initialization. It removes the
    /// components of Θ the known rows do not constrain, which would
    /// otherwise leak into the unknown-class rows.
    pub weight_decay: f64,
    /// Scale each target classifier row to unit norm before regression.
    pub normalize_targets: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            hidden_dim: 32,
            activation_slope: 0.2,
            lr: 1.0,
            momentum: 0.9,
            steps: 3000,
            init_scale: 0.01,
            weight_decay: 0.0,
            normalize_targets: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GcnInit {
    pub params: GcnParams,
    /// `L_T×M` output rows of the class nodes, in class order.
    pub embeddings: Matrix,
    /// Loss before each step plus the final loss.
    pub loss_history: Vec<f64>,
}

impl GcnInit {
    /// Mean squared error of the known-class rows against `w`.
    pub fn known_mse(&self, w: &Matrix) -> f64 {
        let known = self
            .embeddings
            .select_rows(&(0..w.rows()).collect::<Vec<_>>());
        known.map_or(f64::INFINITY, |k| {
            k.sub(w).map_or(f64::INFINITY, |d| {
                d.frobenius_sq() / (w.rows() * w.cols()).max(1) as f64
            })
        })
    }
}

fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Fits the GCN so that known-class rows reproduce `w` (momentum gradient
/// descent from a random start) and returns the output rows of all classes.
pub fn train_gcn_init(
    graph: &KnowledgeGraph,
    x: &Matrix,
    w: &Matrix,
    cfg: &GcnConfig,
    rng: &mut Rng,
) -> Result<GcnInit> {
    if x.rows() != graph.num_nodes() {
        return Err(Error::dims(
            "train_gcn_init",
            format!("{} word vectors for {} nodes", x.rows(), graph.num_nodes()),
        ));
    }
    if w.rows() != graph.known_class_count() {
        return Err(Error::dims(
            "train_gcn_init",
            format!(
                "{} classifier rows for {} known classes",
                w.rows(),
                graph.known_class_count()
            ),
        ));
    }
    let target = if cfg.normalize_targets {
        normalize_rows(w)
    } else {
        w.clone()
    };
    let p = normalized_adjacency(graph);
    let mut params = GcnParams::init(
        x.cols(),
        cfg.hidden_dim,
        w.cols(),
        cfg.layers,
        cfg.activation_slope,
        rng,
    );
    for theta in &mut params.layers {
        *theta = theta.scale(cfg.init_scale);
    }
    let mut velocity = params.zeros_like();
    let mut loss_history = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (loss, grads) = init_objective(&p, x, &params, &target, graph.known_nodes())?;
        loss_history.push(loss);
        for ((theta, v), g) in params.layers.iter_mut().zip(&mut velocity).zip(&grads) {
            for ((t, vi), gi) in theta
                .as_mut_slice()
                .iter_mut()
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *vi = cfg.momentum * *vi - cfg.lr * (gi + cfg.weight_decay * *t);
                *t += *vi;
            }
        }
    }
    let out = gcn_forward(&p, x, &params)?;
    let (final_loss, _) = init_loss(&out, &target, graph.known_nodes())?;
    loss_history.push(final_loss);
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("GCN initialization loss".into()));
    }
    let embeddings = out.select_rows(graph.class_to_node())?;
    Ok(GcnInit {
        params,
        embeddings,
        loss_history,
    })
}
