//! Adaptive refinement of the deterministic boundary-flux estimate.
//!
//! The boundary is held as an edge/simplex complex. Each step picks the
//! simplex with the largest priority `area · (σ + ε) · Σ‖e‖²`, where σ is the
//! spread of `G · n` over its vertices, and splits its longest edge at the
//! midpoint. Every simplex sharing that edge is replaced by two children of
//! half the area with the parent's normal, so one new `G` evaluation refines
//! all of them. The running estimate is updated incrementally.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimateTrace, Method};
use crate::field::{dot_g_normal, field_g, FieldSample};
use crate::flows::Diffeomorphism;
use crate::geometry::{weighted_normal, GeometryError, Point, SimplicialBoundary};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Relative tolerance for the child-geometry check in `verify_complex` mode.
pub const VERIFY_TOLERANCE: f64 = 1e-10;

/// Unordered vertex pair, stored with the smaller id first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeKey(usize, usize);

impl EdgeKey {
    pub fn new(a: usize, b: usize) -> Self {
        assert_ne!(a, b, "an edge needs two distinct vertices");
        EdgeKey(a.min(b), a.max(b))
    }

    pub fn low(self) -> usize {
        self.0
    }

    pub fn high(self) -> usize {
        self.1
    }

    pub fn touches(self, v: usize) -> bool {
        self.0 == v || self.1 == v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub key: EdgeKey,
    pub length_sq: f64,
    pub incident: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexNode {
    pub vertex_ids: Vec<usize>,
    pub unit_normal: Point,
    pub area: f64,
    pub edge_keys: Vec<EdgeKey>,
    pub vertex_dots: Vec<f64>,
    pub priority: f64,
}

impl SimplexNode {
    /// `area · mean(G · n)` over the vertices. The mean divides by the vertex
    /// count so that linear fields are integrated exactly.
    pub fn volume_element(&self) -> f64 {
        self.area * self.vertex_dots.iter().sum::<f64>() / self.vertex_dots.len() as f64
    }
}

/// `area · (σ + ε) · Σ‖e‖²` with σ the population standard deviation of the vertex dots.
pub fn priority(area: f64, vertex_dots: &[f64], edge_lengths_sq: impl IntoIterator<Item = f64>, epsilon: f64) -> f64 {
    let n = vertex_dots.len() as f64;
    let mean = vertex_dots.iter().sum::<f64>() / n;
    let var = vertex_dots.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    area * (var.sqrt() + epsilon) * edge_lengths_sq.into_iter().sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfaOptions {
    pub epsilon: f64,
    /// Recompute every child's geometry from its vertices and fail on disagreement.
    pub verify_complex: bool,
}

impl Default for BfaOptions {
    fn default() -> Self {
        BfaOptions {
            epsilon: DEFAULT_EPSILON,
            verify_complex: false,
        }
    }
}

/// Heap entry: highest priority first, then the smallest simplex id.
#[derive(Debug, Clone, Copy)]
struct QueueEntry {
    priority: f64,
    id: usize,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// The refinable complex together with its running estimate.
///
/// Simplex ids are never reused, so a queue entry whose id is no longer live
/// is stale and is dropped when it reaches the top.
#[derive(Debug)]
pub struct RefinementState<'a> {
    flow: &'a dyn Diffeomorphism,
    options: BfaOptions,
    vertices: Vec<Point>,
    samples: Vec<Option<FieldSample>>,
    interior_point: Point,
    edges: HashMap<EdgeKey, EdgeRecord>,
    simplices: HashMap<usize, SimplexNode>,
    queue: BinaryHeap<QueueEntry>,
    next_id: usize,
    volume: f64,
    points_used: usize,
    initial_points: usize,
    splits: usize,
}

impl<'a> RefinementState<'a> {
    /// Builds the complex from an oriented closed boundary and evaluates `G`
    /// once at every vertex used by a facet.
    pub fn new(flow: &'a dyn Diffeomorphism, boundary: &SimplicialBoundary, options: BfaOptions) -> Result<Self> {
        if !boundary.is_oriented() {
            return Err(GeometryError::NotOriented.into());
        }
        boundary.check_closed()?;
        let mut samples = vec![None; boundary.vertices.len()];
        let used = boundary.used_vertex_ids();
        for &id in &used {
            samples[id] = Some(field_g(flow, &boundary.vertices[id])?);
        }
        let mut state = RefinementState {
            flow,
            options,
            vertices: boundary.vertices.clone(),
            samples,
            interior_point: boundary.interior_point.clone(),
            edges: HashMap::new(),
            simplices: HashMap::new(),
            queue: BinaryHeap::new(),
            next_id: 0,
            volume: 0.0,
            points_used: used.len(),
            initial_points: used.len(),
            splits: 0,
        };
        for facet in &boundary.facets {
            let id = state.insert_simplex(facet.vertex_ids.clone(), facet.unit_normal(), facet.area);
            state.volume += state.simplices[&id].volume_element();
        }
        Ok(state)
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn points_used(&self) -> usize {
        self.points_used
    }

    pub fn initial_points(&self) -> usize {
        self.initial_points
    }

    pub fn splits(&self) -> usize {
        self.splits
    }

    pub fn dim(&self) -> usize {
        self.interior_point.len()
    }

    pub fn num_simplices(&self) -> usize {
        self.simplices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn simplex(&self, id: usize) -> Option<&SimplexNode> {
        self.simplices.get(&id)
    }

    pub fn edge(&self, key: EdgeKey) -> Option<&EdgeRecord> {
        self.edges.get(&key)
    }

    /// Live simplex ids in increasing order.
    pub fn simplex_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.simplices.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn total_area(&self) -> f64 {
        self.simplices.values().map(|s| s.area).sum()
    }

    /// `Σ area · unit_normal` over live simplices.
    pub fn normal_sum(&self) -> Point {
        let mut sum = Point::zeros(self.dim());
        for id in self.simplex_ids() {
            let s = &self.simplices[&id];
            sum += &s.unit_normal * s.area;
        }
        sum
    }

    /// Sum of the stored volume elements, in id order.
    pub fn recompute_volume(&self) -> f64 {
        self.simplex_ids()
            .into_iter()
            .map(|id| self.simplices[&id].volume_element())
            .sum()
    }

    pub fn volume_element(&self, simplex: usize) -> Option<f64> {
        self.simplices.get(&simplex).map(SimplexNode::volume_element)
    }

    /// The current complex as a boundary, with geometry recomputed from the vertices.
    pub fn to_boundary(&self) -> Result<SimplicialBoundary> {
        let facets = self
            .simplex_ids()
            .into_iter()
            .map(|id| self.simplices[&id].vertex_ids.clone())
            .collect();
        let b = SimplicialBoundary::from_facets(self.vertices.clone(), facets, self.interior_point.clone())?;
        Ok(b.assume_oriented())
    }

    /// Checks that edge incidence is symmetric and that every edge record
    /// matches its endpoints.
    pub fn check_incidence(&self) -> Result<()> {
        for (&id, s) in &self.simplices {
            for key in &s.edge_keys {
                let rec = self
                    .edges
                    .get(key)
                    .ok_or_else(|| Error::Complex(format!("simplex {id} references missing edge {key:?}")))?;
                if !rec.incident.contains(&id) {
                    return Err(Error::Complex(format!("edge {key:?} does not list simplex {id}")));
                }
            }
        }
        for (key, rec) in &self.edges {
            for id in &rec.incident {
                let s = self
                    .simplices
                    .get(id)
                    .ok_or_else(|| Error::Complex(format!("edge {key:?} lists dead simplex {id}")))?;
                if !s.edge_keys.contains(key) {
                    return Err(Error::Complex(format!("simplex {id} does not list edge {key:?}")));
                }
            }
            let len = (&self.vertices[key.high()] - &self.vertices[key.low()]).norm_squared();
            if len != rec.length_sq {
                return Err(Error::Complex(format!("edge {key:?} has stale length")));
            }
        }
        Ok(())
    }

    fn sample(&self, v: usize) -> &FieldSample {
        self.samples[v].as_ref().expect("vertex without a cached field sample")
    }

    fn insert_simplex(&mut self, vertex_ids: Vec<usize>, unit_normal: Point, area: f64) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        let mut edge_keys = Vec::with_capacity(vertex_ids.len() * (vertex_ids.len() - 1) / 2);
        for (i, &a) in vertex_ids.iter().enumerate() {
            for &b in &vertex_ids[i + 1..] {
                let key = EdgeKey::new(a, b);
                let vertices = &self.vertices;
                self.edges
                    .entry(key)
                    .or_insert_with(|| EdgeRecord {
                        key,
                        length_sq: (&vertices[key.high()] - &vertices[key.low()]).norm_squared(),
                        incident: BTreeSet::new(),
                    })
                    .incident
                    .insert(id);
                edge_keys.push(key);
            }
        }
        let vertex_dots: Vec<f64> = vertex_ids
            .iter()
            .map(|&v| dot_g_normal(self.sample(v), &unit_normal))
            .collect();
        let priority = priority(
            area,
            &vertex_dots,
            edge_keys.iter().map(|k| self.edges[k].length_sq),
            self.options.epsilon,
        );
        self.queue.push(QueueEntry { priority, id });
        self.simplices.insert(
            id,
            SimplexNode {
                vertex_ids,
                unit_normal,
                area,
                edge_keys,
                vertex_dots,
                priority,
            },
        );
        id
    }

    fn remove_simplex(&mut self, id: usize) -> SimplexNode {
        let node = self.simplices.remove(&id).expect("removing a dead simplex");
        for key in &node.edge_keys {
            if let Some(rec) = self.edges.get_mut(key) {
                rec.incident.remove(&id);
                if rec.incident.is_empty() {
                    self.edges.remove(key);
                }
            }
        }
        node
    }

    /// Id of the live simplex with the highest priority, discarding stale entries.
    pub fn top_simplex(&mut self) -> Option<usize> {
        while let Some(top) = self.queue.peek() {
            if self.simplices.contains_key(&top.id) {
                return Some(top.id);
            }
            self.queue.pop();
        }
        None
    }

    /// Longest edge of the highest-priority simplex. Ties go to the smaller key.
    pub fn select_edge(&mut self) -> Result<EdgeKey> {
        let id = self
            .top_simplex()
            .ok_or_else(|| Error::Complex("no simplices left to refine".into()))?;
        let node = &self.simplices[&id];
        let mut best = node.edge_keys[0];
        for &key in &node.edge_keys[1..] {
            let (len, best_len) = (self.edges[&key].length_sq, self.edges[&best].length_sq);
            if len > best_len || (len == best_len && key < best) {
                best = key;
            }
        }
        Ok(best)
    }

    /// Splits `edge` at its midpoint, replacing every incident simplex by two
    /// children, and updates the running volume.
    pub fn split_edge(&mut self, edge: EdgeKey) -> Result<()> {
        let incident: Vec<usize> = match self.edges.get(&edge) {
            Some(rec) if !rec.incident.is_empty() => rec.incident.iter().copied().collect(),
            Some(_) => return Err(Error::Complex(format!("edge {edge:?} has no incident simplices"))),
            None => return Err(Error::Complex(format!("edge {edge:?} does not exist"))),
        };
        let (a, b) = (edge.low(), edge.high());
        let midpoint = (&self.vertices[a] + &self.vertices[b]) * 0.5;
        let sample = field_g(self.flow, &midpoint)?;
        let m = self.vertices.len();
        self.vertices.push(midpoint);
        self.samples.push(Some(sample));
        self.points_used += 1;
        self.splits += 1;

        for parent_id in incident {
            let parent = self.remove_simplex(parent_id);
            // Positional replacement keeps each child's orientation equal to the parent's.
            let child1: Vec<usize> = parent.vertex_ids.iter().map(|&v| if v == b { m } else { v }).collect();
            let child2: Vec<usize> = parent.vertex_ids.iter().map(|&v| if v == a { m } else { v }).collect();
            let half = parent.area / 2.0;
            let c1 = self.insert_simplex(child1, parent.unit_normal.clone(), half);
            let c2 = self.insert_simplex(child2, parent.unit_normal.clone(), half);
            if self.options.verify_complex {
                self.verify_child(c1)?;
                self.verify_child(c2)?;
            }
            self.volume += self.simplices[&c1].volume_element() + self.simplices[&c2].volume_element()
                - parent.volume_element();
        }
        Ok(())
    }

    fn verify_child(&self, id: usize) -> Result<()> {
        let node = &self.simplices[&id];
        let pts: Vec<Point> = node.vertex_ids.iter().map(|&v| self.vertices[v].clone()).collect();
        let n = weighted_normal(&pts).vector;
        let expected = &node.unit_normal * node.area;
        let err = (&n - &expected).amax();
        if err > VERIFY_TOLERANCE * node.area.max(f64::MIN_POSITIVE) {
            return Err(Error::Complex(format!(
                "simplex {id}: inherited normal·area differs from recomputed by {err:e}"
            )));
        }
        Ok(())
    }

    /// One select-and-split step.
    pub fn step(&mut self) -> Result<EdgeKey> {
        let edge = self.select_edge()?;
        self.split_edge(edge)?;
        Ok(edge)
    }
}

/// Builds a refinement state with default options.
pub fn init_state<'a>(flow: &'a dyn Diffeomorphism, boundary: &SimplicialBoundary) -> Result<RefinementState<'a>> {
    RefinementState::new(flow, boundary, BfaOptions::default())
}

/// Refines until `budget` field evaluations have been spent. The trace has one
/// entry for the initial estimate and one after every split.
pub fn run_bfa(
    flow: &dyn Diffeomorphism,
    boundary: &SimplicialBoundary,
    budget: usize,
    options: BfaOptions,
) -> Result<EstimateTrace> {
    Ok(run_bfa_with_state(flow, boundary, budget, options)?.0)
}

pub fn run_bfa_with_state<'a>(
    flow: &'a dyn Diffeomorphism,
    boundary: &SimplicialBoundary,
    budget: usize,
    options: BfaOptions,
) -> Result<(EstimateTrace, RefinementState<'a>)> {
    let needed = boundary.used_vertex_ids().len();
    if budget < needed {
        return Err(Error::Budget {
            budget,
            reason: format!("the boundary already has {needed} vertices"),
        });
    }
    let mut state = RefinementState::new(flow, boundary, options)?;
    let mut trace = EstimateTrace::new(Method::Bfa, None);
    trace.push(state.points_used(), state.volume());
    while state.points_used() < budget {
        state.step()?;
        trace.push(state.points_used(), state.volume());
    }
    Ok((trace, state))
}
