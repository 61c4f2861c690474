//! Seeded synthetic benchmarks and dataset files.
//!
//! A random tree taxonomy is grown over the classes; class prototypes follow
//! a random walk down the tree, word vectors are a noisy projection of the
//! prototypes, source samples cover the known classes and target samples
//! cover every class after an affine (rotation + translation) shift.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};
use crate::graph::KnowledgeGraph;
use crate::numkit::{format_f64, parse_f64, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Target-domain data. `eval_labels` exist only for scoring; training code
/// takes the feature matrix alone.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    pub features: Matrix,
    pub eval_labels: Vec<usize>,
    pub num_classes: usize,
}

fn check_labels(labels: &[usize], n: usize, classes: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "{what}: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Validation(format!(
            "{what}: label {y} not below class count {classes}"
        )));
    }
    Ok(())
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        check_labels(&labels, features.rows(), num_classes, "labeled dataset")?;
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl UnlabeledDataset {
    pub fn new(features: Matrix, eval_labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        check_labels(
            &eval_labels,
            features.rows(),
            num_classes,
            "unlabeled dataset",
        )?;
        Ok(Self {
            features,
            eval_labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.eval_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eval_labels.is_empty()
    }
}

fn eval_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".eval");
    PathBuf::from(s)
}

fn dataset_text(features: &Matrix, labels: Option<&[usize]>, num_classes: usize) -> String {
    let mut s = format!(
        "{} {} labeled {} classes {}\n",
        features.rows(),
        features.cols(),
        u8::from(labels.is_some()),
        num_classes
    );
    for r in 0..features.rows() {
        match labels {
            Some(l) => {
                let _ = write!(s, "{}", l[r]);
            }
            None => s.push('?'),
        }
        for v in features.row(r) {
            s.push(' ');
            s.push_str(&format_f64(*v));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug)]
struct RawDataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

fn parse_dataset(text: &str, origin: &str) -> Result<RawDataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (hl, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, "empty dataset file"))?;
    let hloc = format!("{origin}:{}", hl + 1);
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 6 || h[2] != "labeled" || h[4] != "classes" {
        return Err(Error::parse(
            hloc,
            "expected `n M_in labeled <0|1> classes <count>`",
        ));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(&hloc, format!("expected a count, got `{s}`")))
    };
    let (n, dim, labeled, classes) = (num(h[0])?, num(h[1])?, num(h[3])?, num(h[5])?);
    if labeled > 1 {
        return Err(Error::parse(&hloc, "labeled flag must be 0 or 1"));
    }
    let labeled = labeled == 1;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut rows = 0;
    for (ln, line) in lines {
        let loc = format!("{origin}:{}", ln + 1);
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != dim + 1 {
            return Err(Error::parse(
                loc,
                format!(
                    "expected a label and {dim} values, found {} fields",
                    toks.len()
                ),
            ));
        }
        if labeled {
            let y: usize = toks[0]
                .parse()
                .map_err(|_| Error::parse(&loc, format!("bad label `{}`", toks[0])))?;
            if y >= classes {
                return Err(Error::Validation(format!(
                    "{loc}: label {y} not below class count {classes}"
                )));
            }
            labels.push(y);
        } else if toks[0] != "?" {
            return Err(Error::parse(&loc, "unlabeled rows start with `?`"));
        }
        for t in &toks[1..] {
            data.push(parse_f64(t, &loc)?);
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::parse(
            origin,
            format!("header declares {n} rows, found {rows}"),
        ));
    }
    Ok(RawDataset {
        features: Matrix::new(n, dim, data)?,
        labels: labeled.then_some(labels),
        num_classes: classes,
    })
}

fn eval_text(labels: &[usize], num_classes: usize) -> String {
    let mut s = format!("eval {} classes {num_classes}\n", labels.len());
    for y in labels {
        let _ = writeln!(s, "{y}");
    }
    s
}

fn parse_eval(text: &str, origin: &str, n: usize, classes: usize) -> Result<Vec<usize>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, "empty eval file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 || h[0] != "eval" || h[1].parse::<usize>().ok() != Some(n) {
        return Err(Error::parse(
            origin,
            format!("expected `eval {n} classes {classes}`"),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for (ln, line) in lines {
        let loc = format!("{origin}:{}", ln + 1);
        let y: usize = line
            .trim()
            .parse()
            .map_err(|_| Error::parse(&loc, format!("bad label `{}`", line.trim())))?;
        if y >= classes {
            return Err(Error::Validation(format!(
                "{loc}: label {y} not below class count {classes}"
            )));
        }
        out.push(y);
    }
    if out.len() != n {
        return Err(Error::parse(
            origin,
            format!("expected {n} labels, found {}", out.len()),
        ));
    }
    Ok(out)
}

impl LabeledDataset {
    pub fn to_text(&self) -> String {
        dataset_text(&self.features, Some(&self.labels), self.num_classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let raw = parse_dataset(&error::read_to_string(path)?, &origin)?;
        let labels = raw
            .labels
            .ok_or_else(|| Error::Validation(format!("{origin}: dataset is not labeled")))?;
        LabeledDataset::new(raw.features, labels, raw.num_classes)
    }
}

impl UnlabeledDataset {
    /// Writes `path` with `?` labels and the held-out labels to `<path>.eval`.
    pub fn save(&self, path: &Path) -> Result<()> {
        error::write_string(path, &dataset_text(&self.features, None, self.num_classes))?;
        error::write_string(
            &eval_path(path),
            &eval_text(&self.eval_labels, self.num_classes),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let raw = parse_dataset(&error::read_to_string(path)?, &origin)?;
        if raw.labels.is_some() {
            return Err(Error::Validation(format!(
                "{origin}: expected an unlabeled dataset"
            )));
        }
        let ep = eval_path(path);
        let eval_labels = parse_eval(
            &error::read_to_string(&ep)?,
            &ep.display().to_string(),
            raw.features.rows(),
            raw.num_classes,
        )?;
        UnlabeledDataset::new(raw.features, eval_labels, raw.num_classes)
    }
}

/// Loads a matrix of features from either a dataset file or a matrix file.
pub fn load_features(path: &Path) -> Result<Matrix> {
    let text = error::read_to_string(path)?;
    let origin = path.display().to_string();
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .unwrap_or("");
    if first.split_whitespace().nth(2) == Some("labeled") {
        Ok(parse_dataset(&text, &origin)?.features)
    } else {
        Matrix::from_text(&text, &origin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub known_classes: usize,
    pub total_classes: usize,
    pub raw_dim: usize,
    /// Dimension of the space the taxonomy random walk lives in.
    pub latent_dim: usize,
    pub word_dim: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Children per internal taxonomy node.
    pub branching: usize,
    /// Spread of the root prototype.
    pub root_scale: f64,
    /// Std of each random-walk step from parent to child prototype.
    pub step_size: f64,
    /// Std of per-sample feature noise.
    pub noise: f64,
    /// Norm of a direction shared by every word vector, like the common
    /// mean component of real embeddings.
    pub word_offset: f64,
    /// Std of word-vector noise.
    pub word_noise: f64,
    /// Angle (radians) applied in every plane of a random orthonormal basis.
    pub rotation: f64,
    /// Per-coordinate magnitude of the target translation.
    pub translation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            known_classes: 8,
            total_classes: 12,
            raw_dim: 16,
            latent_dim: 6,
            word_dim: 64,
            source_per_class: 50,
            target_per_class: 50,
            branching: 3,
            root_scale: 1.0,
            step_size: 1.0,
            noise: 0.5,
            word_offset: 1.0,
            word_noise: 0.2,
            rotation: 0.3,
            translation: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("synth: {m}")));
        if self.known_classes >= self.total_classes {
            return bad("known_classes must be < total_classes");
        }
        if self.known_classes == 0 {
            return bad("known_classes must be >= 1");
        }
        if self.raw_dim == 0 || self.word_dim == 0 || self.latent_dim == 0 {
            return bad("dimensions must be >= 1");
        }
        if self.latent_dim > self.raw_dim {
            return bad("latent_dim must be <= raw_dim");
        }
        if self.source_per_class == 0 || self.target_per_class == 0 {
            return bad("per-class counts must be >= 1");
        }
        if self.branching < 2 {
            return bad("branching must be >= 2");
        }
        let scales = [
            self.root_scale,
            self.step_size,
            self.noise,
            self.word_offset,
            self.word_noise,
            self.translation,
        ];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) || !self.rotation.is_finite() {
            return bad("scales must be finite and non-negative");
        }
        Ok(())
    }

    /// Same config with the domain shift removed.
    pub fn without_shift(&self) -> Self {
        Self {
            rotation: 0.0,
            translation: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthBenchmark {
    pub source: LabeledDataset,
    pub target: UnlabeledDataset,
    pub graph: KnowledgeGraph,
    /// `N×C` word vectors, one row per graph node.
    pub word_vectors: Matrix,
    /// `N×M_in` node prototypes (class nodes and internal nodes).
    pub prototypes: Matrix,
    /// Parent of each node; the root is its own parent.
    pub parents: Vec<usize>,
    pub rotation: Matrix,
    pub translation: Vec<f64>,
}

impl SynthBenchmark {
    /// Number of tree edges between the nodes of two classes.
    pub fn taxonomy_distance(&self, a: usize, b: usize) -> usize {
        let nodes = self.graph.class_to_node();
        let path = |mut n: usize| {
            let mut p = vec![n];
            while self.parents[n] != n {
                n = self.parents[n];
                p.push(n);
            }
            p
        };
        let (pa, pb) = (path(nodes[a]), path(nodes[b]));
        for (i, x) in pa.iter().enumerate() {
            if let Some(j) = pb.iter().position(|y| y == x) {
                return i + j;
            }
        }
        unreachable!("nodes share the root")
    }
}

/// `count` orthonormal vectors in `dim` dimensions, by Gram-Schmidt on
/// Gaussian draws.
fn random_orthonormal(dim: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Random orthonormal basis, then the same angle in each consecutive pair of
/// basis vectors.
fn random_rotation(dim: usize, angle: f64, rng: &mut Rng) -> Matrix {
    let basis = random_orthonormal(dim, dim, rng);
    // R = Σ_planes (cos·(uuᵀ + vvᵀ) + sin·(vuᵀ − uvᵀ)) + remaining axis if dim is odd.
    let (c, s) = (angle.cos(), angle.sin());
    let mut r = Matrix::zeros(dim, dim);
    let mut k = 0;
    while k + 1 < dim {
        let (u, v) = (&basis[k], &basis[k + 1]);
        for i in 0..dim {
            for j in 0..dim {
                let add = c * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
                r.set(i, j, r.get(i, j) + add);
            }
        }
        k += 2;
    }
    if dim % 2 == 1 {
        let u = &basis[dim - 1];
        for i in 0..dim {
            for j in 0..dim {
                r.set(i, j, r.get(i, j) + u[i] * u[j]);
            }
        }
    }
    r
}

/// Builds the taxonomy bottom-up by grouping shuffled nodes `branching` at a
/// time until one root remains. Returns parents (root first in node order).
fn random_tree(leaves: usize, branching: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    // Work in "build ids": leaves 0..L, internal nodes appended.
    let mut parent_build: Vec<usize> = vec![usize::MAX; leaves];
    let mut level: Vec<usize> = (0..leaves).collect();
    while level.len() > 1 {
        rng.shuffle(&mut level);
        let mut next = Vec::new();
        for group in level.chunks(branching) {
            let id = parent_build.len();
            parent_build.push(usize::MAX);
            for &child in group {
                parent_build[child] = id;
            }
            next.push(id);
        }
        level = next;
    }
    let root = level[0];
    parent_build[root] = root;
    // Renumber breadth-first from the root so parents precede children.
    let total = parent_build.len();
    let mut children = vec![Vec::new(); total];
    for (c, &p) in parent_build.iter().enumerate() {
        if c != root {
            children[p].push(c);
        }
    }
    let mut order = vec![root];
    let mut head = 0;
    while head < order.len() {
        let n = order[head];
        head += 1;
        order.extend(children[n].iter().copied());
    }
    let mut new_id = vec![0; total];
    for (i, &b) in order.iter().enumerate() {
        new_id[b] = i;
    }
    let parents: Vec<usize> = order.iter().map(|&b| new_id[parent_build[b]]).collect();
    let leaf_nodes: Vec<usize> = (0..leaves).map(|l| new_id[l]).collect();
    (parents, leaf_nodes)
}

/// Open-set benchmark: source covers the known classes only.
pub fn generate(cfg: &SynthConfig) -> Result<SynthBenchmark> {
    generate_with_source_classes(cfg, cfg.known_classes)
}

/// Closed-set variant for plain domain adaptation: same taxonomy and shift,
/// but the source covers every class.
pub fn generate_closed_set(cfg: &SynthConfig) -> Result<SynthBenchmark> {
    generate_with_source_classes(cfg, cfg.total_classes)
}

fn generate_with_source_classes(
    cfg: &SynthConfig,
    source_classes: usize,
) -> Result<SynthBenchmark> {
    cfg.validate()?;
    let root = Rng::seed_from_u64(cfg.seed);
    let mut tree_rng = root.derive(1);
    let mut proto_rng = root.derive(2);
    let mut word_rng = root.derive(3);
    let mut source_rng = root.derive(4);
    let mut target_rng = root.derive(5);
    let mut shift_rng = root.derive(6);

    let (lt, dim, latent) = (cfg.total_classes, cfg.raw_dim, cfg.latent_dim);
    let (parents, leaf_nodes) = random_tree(lt, cfg.branching, &mut tree_rng);
    let n = parents.len();

    // Random walk from the root in the latent space; node order has parents
    // first. Raw prototypes are an isometric embedding of the latent ones.
    let mut latent_protos = Matrix::zeros(n, latent);
    for node in 0..n {
        let p = parents[node];
        for j in 0..latent {
            let v = if p == node {
                cfg.root_scale * proto_rng.normal()
            } else {
                latent_protos.get(p, j) + cfg.step_size * proto_rng.normal()
            };
            latent_protos.set(node, j, v);
        }
    }
    let lift = Matrix::from_raw(
        latent,
        dim,
        random_orthonormal(dim, latent, &mut proto_rng).concat(),
    );
    let protos = latent_protos.matmul(&lift)?;

    let proj_scale = 1.0 / (latent as f64).sqrt();
    let proj = Matrix::from_raw(
        latent,
        cfg.word_dim,
        (0..latent * cfg.word_dim)
            .map(|_| proj_scale * word_rng.normal())
            .collect(),
    );
    let mut word_vectors = latent_protos.matmul(&proj)?;
    // One global scale so rows average unit norm; the noise is relative to it.
    let mean_norm = (0..n)
        .map(|i| {
            word_vectors
                .row(i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64;
    if mean_norm > 0.0 {
        word_vectors = word_vectors.scale(1.0 / mean_norm);
    }
    let offset: Vec<f64> = (0..cfg.word_dim).map(|_| word_rng.normal()).collect();
    let offset_norm = offset.iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..n {
        for (v, o) in word_vectors.row_mut(i).iter_mut().zip(&offset) {
            *v += cfg.word_offset * o / offset_norm + cfg.word_noise * word_rng.normal();
        }
    }

    let names = (0..n)
        .map(|i| match leaf_nodes.iter().position(|&l| l == i) {
            Some(c) if c < cfg.known_classes => format!("known_{c}"),
            Some(c) => format!("unknown_{c}"),
            None => format!("concept_{i}"),
        })
        .collect();
    let edges: Vec<(usize, usize)> = (0..n)
        .filter(|&i| parents[i] != i)
        .map(|i| (parents[i], i))
        .collect();
    let graph = KnowledgeGraph::new(names, edges, leaf_nodes.clone(), cfg.known_classes)?;

    let sample = |class: usize, rng: &mut Rng| -> Vec<f64> {
        protos
            .row(leaf_nodes[class])
            .iter()
            .map(|m| m + cfg.noise * rng.normal())
            .collect()
    };

    let mut src = Vec::with_capacity(cfg.known_classes * cfg.source_per_class * dim);
    let mut src_labels = Vec::new();
    for c in 0..source_classes {
        for _ in 0..cfg.source_per_class {
            src.extend(sample(c, &mut source_rng));
            src_labels.push(c);
        }
    }

    let rotation = random_rotation(dim, cfg.rotation, &mut shift_rng);
    let translation: Vec<f64> = (0..dim)
        .map(|_| {
            let sign = if shift_rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            sign * cfg.translation
        })
        .collect();

    let mut tgt = Vec::with_capacity(lt * cfg.target_per_class * dim);
    let mut tgt_labels = Vec::new();
    for c in 0..lt {
        for _ in 0..cfg.target_per_class {
            let x = sample(c, &mut target_rng);
            for i in 0..dim {
                let rx: f64 = rotation.row(i).iter().zip(&x).map(|(a, b)| a * b).sum();
                tgt.push(rx + translation[i]);
            }
            tgt_labels.push(c);
        }
    }

    let source = LabeledDataset::new(
        Matrix::new(src_labels.len(), dim, src)?,
        src_labels,
        source_classes,
    )?;
    let target = UnlabeledDataset::new(Matrix::new(tgt_labels.len(), dim, tgt)?, tgt_labels, lt)?;
    Ok(SynthBenchmark {
        source,
        target,
        graph,
        word_vectors,
        prototypes: protos,
        parents,
        rotation,
        translation,
    })
}
