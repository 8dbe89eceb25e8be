//! View graph over verified pairs, triplet cycle-consistency filtering and
//! largest connected component extraction.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::executor::Executor;
use crate::geom::Rotation3;
use crate::two_view::TwoViewMeasurement;

/// Undirected graph keyed by `(i, j)` with `i < j`.
///
/// A measurement stored under key `(i, j)` may have `pair == (i, j)` (holding
/// `R_ji`) or `pair == (j, i)` (holding `R_ij`); [`ViewGraph::rotation`]
/// resolves the orientation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewGraph {
    pub vertices: BTreeSet<usize>,
    pub edges: BTreeMap<(usize, usize), TwoViewMeasurement>,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl ViewGraph {
    pub fn new(vertices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            vertices: vertices.into_iter().collect(),
            edges: BTreeMap::new(),
        }
    }

    pub fn from_measurements(n_cameras: usize, measurements: impl IntoIterator<Item = TwoViewMeasurement>) -> Self {
        let mut g = Self::new(0..n_cameras);
        for m in measurements {
            g.insert(m);
        }
        g
    }

    pub fn insert(&mut self, m: TwoViewMeasurement) {
        let (a, b) = m.pair;
        self.vertices.insert(a);
        self.vertices.insert(b);
        self.edges.insert(key(a, b), m);
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Rotation taking frame `from` to frame `to`, if the edge exists.
    pub fn rotation(&self, from: usize, to: usize) -> Option<Rotation3> {
        let m = self.edges.get(&key(from, to))?;
        if m.pair == (from, to) {
            Some(m.rotation)
        } else {
            Some(m.rotation.inverse())
        }
    }

    /// Measurement oriented as `(i, j)` with `i < j`.
    pub fn oriented(&self, i: usize, j: usize) -> Option<TwoViewMeasurement> {
        let m = self.edges.get(&key(i, j))?;
        Some(if m.pair == key(i, j) { m.clone() } else { m.reversed() })
    }

    pub fn adjacency(&self) -> BTreeMap<usize, BTreeSet<usize>> {
        let mut adj: BTreeMap<usize, BTreeSet<usize>> =
            self.vertices.iter().map(|&v| (v, BTreeSet::new())).collect();
        for &(i, j) in self.edges.keys() {
            adj.entry(i).or_default().insert(j);
            adj.entry(j).or_default().insert(i);
        }
        adj
    }

    fn retain_edges(&self, keep: impl Fn(&(usize, usize)) -> bool) -> ViewGraph {
        ViewGraph {
            vertices: self.vertices.clone(),
            edges: self
                .edges
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, m)| (*k, m.clone()))
                .collect(),
        }
    }
}

/// Angle in degrees of the loop `R_ki R_jk R_ij`, each argument taking the
/// frame of its first index to its second.
pub fn triplet_cycle_error(r_ij: &Rotation3, r_jk: &Rotation3, r_ki: &Rotation3) -> f64 {
    (r_ki * &(r_jk * r_ij)).angle().to_degrees()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleErrorRecord {
    pub edge: (usize, usize),
    /// Errors over the triplets of the input graph, in degrees.
    pub errors: Vec<f64>,
    /// `None` when the edge is in no triplet.
    pub min_error: Option<f64>,
    /// Median over the triplets remaining after the first stage (over the
    /// original triplets if the edge was already removed).
    pub median_error: Option<f64>,
    pub kept_stage1: bool,
    pub kept_stage2: bool,
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn edge_cycle_errors(graph: &ViewGraph, executor: &Executor) -> BTreeMap<(usize, usize), Vec<f64>> {
    let adj = graph.adjacency();
    let keys: Vec<(usize, usize)> = graph.edges.keys().copied().collect();
    let errors = executor.map(&keys, |_, &(i, j)| {
        let r_ij = graph.rotation(i, j).expect("edge");
        adj[&i]
            .intersection(&adj[&j])
            .map(|&k| {
                let r_jk = graph.rotation(j, k).expect("edge");
                let r_ki = graph.rotation(k, i).expect("edge");
                triplet_cycle_error(&r_ij, &r_jk, &r_ki)
            })
            .collect::<Vec<f64>>()
    });
    keys.into_iter().zip(errors).collect()
}

/// Stage 1 keeps edges whose minimum triplet error is below `epsilon_deg`;
/// stage 2 recomputes triplets on the survivors and keeps edges whose median
/// is below it. Edges in no triplet are kept.
pub fn two_stage_cycle_filter(graph: &ViewGraph, epsilon_deg: f64) -> (ViewGraph, Vec<CycleErrorRecord>) {
    two_stage_cycle_filter_with(graph, epsilon_deg, &Executor::new(1))
}

pub fn two_stage_cycle_filter_with(
    graph: &ViewGraph,
    epsilon_deg: f64,
    executor: &Executor,
) -> (ViewGraph, Vec<CycleErrorRecord>) {
    let stage1_errors = edge_cycle_errors(graph, executor);
    let min_of = |e: &[f64]| e.iter().copied().min_by(f64::total_cmp);
    let stage1: ViewGraph = graph.retain_edges(|k| match min_of(&stage1_errors[k]) {
        Some(m) => m < epsilon_deg,
        None => true,
    });

    let stage2_errors = edge_cycle_errors(&stage1, executor);
    let stage2 = stage1.retain_edges(|k| match median(&stage2_errors[k]) {
        Some(m) => m < epsilon_deg,
        None => true,
    });

    let records = stage1_errors
        .into_iter()
        .map(|(edge, errors)| {
            let kept_stage1 = stage1.edges.contains_key(&edge);
            let median_error = match stage2_errors.get(&edge) {
                Some(e) => median(e),
                None => median(&errors),
            };
            CycleErrorRecord {
                edge,
                min_error: min_of(&errors),
                median_error,
                errors,
                kept_stage1,
                kept_stage2: stage2.edges.contains_key(&edge),
            }
        })
        .collect();
    (stage2, records)
}

/// Subgraph induced by the largest vertex component; ties go to the component
/// holding the smallest vertex id.
pub fn largest_connected_component(graph: &ViewGraph) -> ViewGraph {
    let adj = graph.adjacency();
    let mut seen = BTreeSet::new();
    let mut best: Option<BTreeSet<usize>> = None;
    for &start in &graph.vertices {
        if seen.contains(&start) {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some(v) = queue.pop_front() {
            comp.insert(v);
            for &w in &adj[&v] {
                if seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
        // Vertices are visited in increasing order, so a strict comparison
        // keeps the earliest component on ties.
        if best.as_ref().is_none_or(|b| comp.len() > b.len()) {
            best = Some(comp);
        }
    }
    let vertices = best.unwrap_or_default();
    ViewGraph {
        edges: graph
            .edges
            .iter()
            .filter(|((i, _), _)| vertices.contains(i))
            .map(|(k, m)| (*k, m.clone()))
            .collect(),
        vertices,
    }
}

pub fn write_cycle_csv(records: &[CycleErrorRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "i,j,min_cycle_error_deg,median_cycle_error_deg,kept_stage1,kept_stage2")?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.edge.0,
            r.edge.1,
            fmt(r.min_error),
            fmt(r.median_error),
            r.kept_stage1,
            r.kept_stage2
        )?;
    }
    Ok(())
}
