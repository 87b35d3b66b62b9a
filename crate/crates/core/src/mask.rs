//! Attention masks as directed graphs.
//!
//! **Edge convention.** An edge `(j, i)` means *token `i` attends to token `j`*:
//! information flows from `j` to `i`. The in-neighborhood `N_i = {k : (k, i) in E}`
//! is the set of tokens row `i` of the attention matrix may put weight on.
//!
//! Indices are 0-based in this API. Mask files and everything printed for
//! users are 1-based; see [`MaskGraph::parse`] and [`MaskGraph::to_mask_file`].

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask must have at least one token")]
    EmptyGraph,
    #[error("window width must be at least 1")]
    ZeroWidth,
    #[error("edge ({j}, {i}) is out of range for n = {n} (1-based)")]
    OutOfRange { j: usize, i: usize, n: usize },
    #[error("duplicate edge ({j}, {i}) (1-based)")]
    DuplicateEdge { j: usize, i: usize },
    #[error("node {node} has no self-loop (assumption A1)")]
    MissingSelfLoop { node: usize },
    #[error("mask file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("cannot read mask file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskKind {
    Complete,
    Causal,
    /// `(j, i)` for `|i - j| <= width`.
    SlidingWindow {
        width: usize,
    },
    /// `(j, i)` for `i - width <= j <= i`.
    UnidirectionalSlidingWindow {
        width: usize,
    },
    /// Explicit `(j, i)` pairs, 1-based.
    Custom {
        edges: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGraph {
    n: usize,
    in_neighbors: Vec<Vec<usize>>,
    out_neighbors: Vec<Vec<usize>>,
    edges: BTreeSet<(usize, usize)>,
}

impl MaskGraph {
    pub fn build(kind: &MaskKind, n: usize) -> Result<Self, MaskError> {
        if n == 0 {
            return Err(MaskError::EmptyGraph);
        }
        let edges: Vec<(usize, usize)> = match kind {
            MaskKind::Complete => (0..n).flat_map(|i| (0..n).map(move |j| (j, i))).collect(),
            MaskKind::Causal => (0..n).flat_map(|i| (0..=i).map(move |j| (j, i))).collect(),
            MaskKind::SlidingWindow { width } => {
                let w = nonzero_width(*width)?;
                (0..n)
                    .flat_map(|i| (i.saturating_sub(w)..=(i + w).min(n - 1)).map(move |j| (j, i)))
                    .collect()
            }
            MaskKind::UnidirectionalSlidingWindow { width } => {
                let w = nonzero_width(*width)?;
                (0..n)
                    .flat_map(|i| (i.saturating_sub(w)..=i).map(move |j| (j, i)))
                    .collect()
            }
            MaskKind::Custom { edges } => return Self::from_one_based_edges(n, edges),
        };
        Self::from_edges(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self, MaskError> {
        Self::build(&MaskKind::Complete, n)
    }

    pub fn causal(n: usize) -> Result<Self, MaskError> {
        Self::build(&MaskKind::Causal, n)
    }

    /// Builds from 0-based `(j, i)` pairs.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, MaskError> {
        if n == 0 {
            return Err(MaskError::EmptyGraph);
        }
        let mut set = BTreeSet::new();
        let mut in_neighbors = vec![Vec::new(); n];
        let mut out_neighbors = vec![Vec::new(); n];
        for &(j, i) in edges {
            if j >= n || i >= n {
                return Err(MaskError::OutOfRange {
                    j: j + 1,
                    i: i + 1,
                    n,
                });
            }
            if !set.insert((j, i)) {
                return Err(MaskError::DuplicateEdge { j: j + 1, i: i + 1 });
            }
        }
        for &(j, i) in &set {
            in_neighbors[i].push(j);
            out_neighbors[j].push(i);
        }
        Ok(Self {
            n,
            in_neighbors,
            out_neighbors,
            edges: set,
        })
    }

    /// Builds from 1-based `(j, i)` pairs as they appear in mask files.
    pub fn from_one_based_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, MaskError> {
        let mut zero_based = Vec::with_capacity(edges.len());
        for &(j, i) in edges {
            if j == 0 || i == 0 || j > n || i > n {
                return Err(MaskError::OutOfRange { j, i, n });
            }
            zero_based.push((j - 1, i - 1));
        }
        Self::from_edges(n, &zero_based)
    }

    /// Parses the text mask format: first line `n`, then one `j i` pair per
    /// line (1-based). Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, MaskError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (first, header) = lines.next().ok_or(MaskError::Parse {
            line: 1,
            reason: "missing token count".into(),
        })?;
        let n: usize = header.parse().map_err(|_| MaskError::Parse {
            line: first,
            reason: format!("expected token count, found {header:?}"),
        })?;
        let mut edges = Vec::new();
        for (line, content) in lines {
            let fields: Vec<&str> = content.split_whitespace().collect();
            let parsed: Option<Vec<usize>> = fields.iter().map(|f| f.parse().ok()).collect();
            match parsed.as_deref() {
                Some([j, i]) => edges.push((*j, *i)),
                _ => {
                    return Err(MaskError::Parse {
                        line,
                        reason: format!("expected \"j i\", found {content:?}"),
                    })
                }
            }
        }
        Self::from_one_based_edges(n, &edges)
    }

    pub fn load(path: &Path) -> Result<Self, MaskError> {
        let text = fs::read_to_string(path).map_err(|e| MaskError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_mask_file(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for &(j, i) in &self.edges {
            out.push_str(&format!("{} {}\n", j + 1, i + 1));
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `N_i`: the tokens that token `i` attends to, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    /// Tokens that attend to `j`, ascending.
    pub fn attended_by(&self, j: usize) -> &[usize] {
        &self.out_neighbors[j]
    }

    pub fn has_edge(&self, j: usize, i: usize) -> bool {
        self.edges.contains(&(j, i))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn max_in_degree(&self) -> usize {
        self.in_neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Assumption A1: every token attends to itself.
    pub fn assert_a1(&self) -> Result<(), MaskError> {
        match (0..self.n).find(|&i| !self.has_edge(i, i)) {
            Some(node) => Err(MaskError::MissingSelfLoop { node: node + 1 }),
            None => Ok(()),
        }
    }

    /// Directed hop distances from `source` along information flow; `None`
    /// for unreachable nodes.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued nodes have a distance");
            for &v in &self.out_neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn classify(&self) -> MaskClassification {
        let eccentricities: Vec<Option<usize>> = (0..self.n)
            .map(|s| {
                self.distances_from(s)
                    .into_iter()
                    .try_fold(0, |acc, d| d.map(|d| acc.max(d)))
            })
            .collect();
        let center_nodes: Vec<usize> = (0..self.n)
            .filter(|&s| eccentricities[s].is_some())
            .collect();
        let strongly_connected = center_nodes.len() == self.n;
        let radius = eccentricities.iter().flatten().min().copied();
        let diameter = if strongly_connected {
            eccentricities.iter().flatten().max().copied()
        } else {
            None
        };
        MaskClassification {
            has_self_loops: self.assert_a1().is_ok(),
            strongly_connected,
            quasi_strongly_connected: !center_nodes.is_empty(),
            center_count: center_nodes.len(),
            center_nodes,
            radius,
            diameter,
        }
    }
}

fn nonzero_width(width: usize) -> Result<usize, MaskError> {
    if width == 0 {
        Err(MaskError::ZeroWidth)
    } else {
        Ok(width)
    }
}

/// Graph quantities that parameterize the collapse bounds. `center_nodes` are
/// 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskClassification {
    pub has_self_loops: bool,
    pub strongly_connected: bool,
    pub quasi_strongly_connected: bool,
    pub center_nodes: Vec<usize>,
    /// Smallest eccentricity over center nodes; absent without a center.
    pub radius: Option<usize>,
    /// Largest pairwise distance; present only for strongly connected masks.
    pub diameter: Option<usize>,
    pub center_count: usize,
}

impl MaskClassification {
    pub fn center_nodes_one_based(&self) -> Vec<usize> {
        self.center_nodes.iter().map(|c| c + 1).collect()
    }
}
