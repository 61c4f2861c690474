//! Class taxonomy graph and its row-normalized adjacency.
//!
//! Text format (whitespace separated, `#` starts a comment line):
//!
//! ```text
//! nodes 5 known 2 classes 3
//! node 0 animal
//! ...
//! class 0 3
//! edge 0 1
//! ```

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{self, Error, Result};
use crate::numkit::Matrix;

/// Undirected taxonomy over classes and auxiliary ancestor nodes.
///
/// Self-loops are implicit: every node is adjacent to itself. `edges` holds
/// only the off-diagonal pairs, normalized so that `i < j`, sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    node_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    class_to_node: Vec<usize>,
    known_class_count: usize,
}

impl KnowledgeGraph {
    /// Builds and validates a graph. Explicit self-loops in `edges` are
    /// accepted and absorbed; duplicate off-diagonal edges are rejected.
    pub fn new(
        node_names: Vec<String>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        class_to_node: Vec<usize>,
        known_class_count: usize,
    ) -> Result<Self> {
        let n = node_names.len();
        let total = class_to_node.len();
        if n == 0 {
            return Err(Error::Validation("graph has no nodes".into()));
        }
        if known_class_count >= total {
            return Err(Error::Validation(format!(
                "need known classes < total classes, got {known_class_count} >= {total}"
            )));
        }
        if total > n {
            return Err(Error::Validation(format!(
                "{total} classes but only {n} nodes"
            )));
        }
        let mut used = vec![None; n];
        for (class, &node) in class_to_node.iter().enumerate() {
            if node >= n {
                return Err(Error::Validation(format!(
                    "class {class} mapped to node {node}, but there are {n} nodes"
                )));
            }
            if let Some(other) = used[node] {
                return Err(Error::Validation(format!(
                    "classes {other} and {class} both map to node {node}"
                )));
            }
            used[node] = Some(class);
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                continue;
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::Validation(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self {
            node_names,
            edges: set.into_iter().collect(),
            class_to_node,
            known_class_count,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_names.len()
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    /// Off-diagonal undirected edges, `i < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn self_loop_count(&self) -> usize {
        self.num_nodes()
    }

    pub fn class_to_node(&self) -> &[usize] {
        &self.class_to_node
    }

    pub fn known_class_count(&self) -> usize {
        self.known_class_count
    }

    pub fn total_class_count(&self) -> usize {
        self.class_to_node.len()
    }

    pub fn known_nodes(&self) -> &[usize] {
        &self.class_to_node[..self.known_class_count]
    }

    /// Dense adjacency including the unit diagonal.
    pub fn adjacency(&self) -> Matrix {
        let n = self.num_nodes();
        let mut a = Matrix::identity(n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Unknown classes whose node cannot be reached from any known-class node.
    pub fn check_reachability(&self) -> Vec<usize> {
        let adj = self.neighbours();
        let mut seen = vec![false; self.num_nodes()];
        let mut queue: VecDeque<usize> = self.known_nodes().iter().copied().collect();
        for &s in &queue {
            seen[s] = true;
        }
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        (self.known_class_count..self.total_class_count())
            .filter(|&c| !seen[self.class_to_node[c]])
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "nodes {} known {} classes {}\n",
            self.num_nodes(),
            self.known_class_count,
            self.total_class_count()
        );
        for (i, name) in self.node_names.iter().enumerate() {
            let _ = writeln!(s, "node {i} {name}");
        }
        for (c, node) in self.class_to_node.iter().enumerate() {
            let _ = writeln!(s, "class {c} {node}");
        }
        for (i, j) in &self.edges {
            let _ = writeln!(s, "edge {i} {j}");
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut header: Option<(usize, usize, usize)> = None;
        let mut names: Vec<Option<String>> = Vec::new();
        let mut classes: Vec<Option<usize>> = Vec::new();
        let mut edges = Vec::new();

        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = format!("{origin}:{}", ln + 1);
            let toks: Vec<&str> = line.split_whitespace().collect();
            let idx = |i: usize| -> Result<usize> {
                toks.get(i)
                    .ok_or_else(|| Error::parse(&loc, "missing field"))?
                    .parse::<usize>()
                    .map_err(|_| {
                        Error::parse(&loc, format!("expected an index, got `{}`", toks[i]))
                    })
            };
            match (toks[0], &header) {
                ("nodes", None) => {
                    if toks.len() != 6 || toks[2] != "known" || toks[4] != "classes" {
                        return Err(Error::parse(
                            loc,
                            "expected `nodes N known L_S classes L_T`",
                        ));
                    }
                    let (n, ls, lt) = (idx(1)?, idx(3)?, idx(5)?);
                    names = vec![None; n];
                    classes = vec![None; lt];
                    header = Some((n, ls, lt));
                }
                (_, None) => return Err(Error::parse(loc, "header line must come first")),
                ("nodes", Some(_)) => return Err(Error::parse(loc, "duplicate header")),
                ("node", Some(_)) => {
                    let i = idx(1)?;
                    let name = line
                        .splitn(3, char::is_whitespace)
                        .nth(2)
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .ok_or_else(|| Error::parse(&loc, "node line needs a name"))?;
                    let slot = names.get_mut(i).ok_or_else(|| {
                        Error::Validation(format!("{loc}: node index {i} out of range"))
                    })?;
                    if slot.is_some() {
                        return Err(Error::Validation(format!("{loc}: node {i} declared twice")));
                    }
                    *slot = Some(name.to_string());
                }
                ("class", Some(_)) => {
                    expect_len(&toks, 3, &loc)?;
                    let (c, node) = (idx(1)?, idx(2)?);
                    let slot = classes.get_mut(c).ok_or_else(|| {
                        Error::Validation(format!("{loc}: class index {c} out of range"))
                    })?;
                    if slot.is_some() {
                        return Err(Error::Validation(format!("{loc}: class {c} mapped twice")));
                    }
                    *slot = Some(node);
                }
                ("edge", Some(_)) => {
                    expect_len(&toks, 3, &loc)?;
                    edges.push((idx(1)?, idx(2)?));
                }
                (other, Some(_)) => {
                    return Err(Error::parse(loc, format!("unknown record `{other}`")))
                }
            }
        }

        let (_, known, _) = header.ok_or_else(|| Error::parse(origin, "missing header"))?;
        let names = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| n.ok_or_else(|| Error::Validation(format!("node {i} not declared"))))
            .collect::<Result<Vec<_>>>()?;
        let classes = classes
            .into_iter()
            .enumerate()
            .map(|(c, n)| n.ok_or_else(|| Error::Validation(format!("class {c} has no node"))))
            .collect::<Result<Vec<_>>>()?;
        KnowledgeGraph::new(names, edges, classes, known)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write_string(path, &self.to_text())
    }
}

fn expect_len(toks: &[&str], n: usize, loc: &str) -> Result<()> {
    if toks.len() != n {
        return Err(Error::parse(
            loc,
            format!("expected {n} fields, found {}", toks.len()),
        ));
    }
    Ok(())
}

/// Reads an edge-list file. Unknown classes unreachable from every known
/// class are logged, not rejected.
pub fn load_graph(path: &Path) -> Result<KnowledgeGraph> {
    let text = error::read_to_string(path)?;
    let g = KnowledgeGraph::from_text(&text, &path.display().to_string())?;
    let unreachable = g.check_reachability();
    if !unreachable.is_empty() {
        log::warn!(
            "{}: unknown classes {:?} are not connected to any known class",
            path.display(),
            unreachable
        );
    }
    Ok(g)
}

/// `D⁻¹A` with `D_ii = Σ_j A_ij`.
pub fn normalized_adjacency(g: &KnowledgeGraph) -> Matrix {
    let mut a = g.adjacency();
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        let degree: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= degree;
        }
    }
    a
}
