//! Graph reasoning layers (GAT, R-GCN) and the residual combination with
//! text features.
//!
//! Two implementations live here. The per-node functions (`gat_attention`,
//! `gat_aggregate`, `rgcn_update`) evaluate one node at a time and serve as
//! the reference. The batched path records the whole graph on a [`Tape`] so
//! training gets gradients; its edges are grouped by destination node in the
//! same order the per-node path walks them, so both agree bit for bit.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{leaky, segment_softmax_values, Tape, Var};
use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, KnowledgeGraph, RelationId};
use crate::linalg::{dot, Matrix};
use crate::text::xavier_uniform;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnKind {
    Gat,
    Rgcn,
    None,
}

impl std::str::FromStr for GnnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gat" => Ok(GnnKind::Gat),
            "rgcn" => Ok(GnnKind::Rgcn),
            "none" => Ok(GnnKind::None),
            other => Err(Error::Config(format!("unknown gnn variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        if self == Activation::Relu {
            for x in v {
                *x = crate::linalg::relu(*x);
            }
        }
    }
}

/// One attention head: `W` (d' x d), attention vector `a` (1 x 2d').
#[derive(Clone, Debug, PartialEq)]
pub struct GatParams {
    pub w: Matrix,
    pub a: Matrix,
    pub leaky_slope: f64,
}

/// Per direction-tagged relation matrices plus the self-loop matrix.
///
/// `rel[2r]` carries messages from head to tail of relation `r`,
/// `rel[2r + 1]` from tail to head.
#[derive(Clone, Debug, PartialEq)]
pub struct RgcnParams {
    pub rel: Vec<Matrix>,
    pub self_w: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Heads are averaged so the output width stays d.
    Gat(Vec<GatParams>),
    Rgcn(RgcnParams),
}

/// ReLU between layers, identity after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug)]
pub struct StackShape {
    pub kind: GnnKind,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_relations: usize,
    pub leaky_slope: f64,
}

/// Tag of the message a center receives from a neighbor seen in `direction`.
#[inline]
pub fn direction_tag(relation: RelationId, direction: Direction) -> usize {
    match direction {
        // neighbor is the head: head -> tail message
        Direction::In => 2 * relation.index(),
        Direction::Out => 2 * relation.index() + 1,
    }
}

impl LayerStack {
    /// Xavier-uniform init, or all zeros when `zero` is set.
    pub fn init(shape: &StackShape, zero: bool, rng: &mut impl Rng) -> Result<Option<LayerStack>> {
        if shape.kind == GnnKind::None {
            return Ok(None);
        }
        if !(1..=4).contains(&shape.depth) {
            return Err(Error::Config(format!("gnn depth must be 1..=4, got {}", shape.depth)));
        }
        if shape.heads == 0 {
            return Err(Error::Config("gat needs at least one head".into()));
        }
        let d = shape.dim;
        let mut mat = |rows: usize, cols: usize| {
            if zero {
                Matrix::zeros(rows, cols)
            } else {
                xavier_uniform(rows, cols, rng)
            }
        };
        let layers = (0..shape.depth)
            .map(|_| match shape.kind {
                GnnKind::Gat => Layer::Gat(
                    (0..shape.heads)
                        .map(|_| GatParams {
                            w: mat(d, d),
                            a: mat(1, 2 * d),
                            leaky_slope: shape.leaky_slope,
                        })
                        .collect(),
                ),
                _ => Layer::Rgcn(RgcnParams {
                    rel: (0..2 * shape.num_relations).map(|_| mat(d, d)).collect(),
                    self_w: mat(d, d),
                }),
            })
            .collect();
        Ok(Some(LayerStack { layers }))
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Parameters in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Gat(heads) => {
                    for (h, p) in heads.iter().enumerate() {
                        out.push((format!("gnn.{l}.gat.{h}.w"), &p.w));
                        out.push((format!("gnn.{l}.gat.{h}.a"), &p.a));
                    }
                }
                Layer::Rgcn(p) => {
                    for (k, w) in p.rel.iter().enumerate() {
                        out.push((format!("gnn.{l}.rgcn.rel.{k}"), w));
                    }
                    out.push((format!("gnn.{l}.rgcn.self"), &p.self_w));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Gat(heads) => {
                    for p in heads {
                        out.push(&mut p.w);
                        out.push(&mut p.a);
                    }
                }
                Layer::Rgcn(p) => {
                    out.extend(p.rel.iter_mut());
                    out.push(&mut p.self_w);
                }
            }
        }
        out
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Identity
        } else {
            Activation::Relu
        }
    }
}

fn check_dims(w: &Matrix, v: &[f64]) -> Result<()> {
    if w.cols() != v.len() {
        return Err(Error::dim(format!("weight expects width {}, vector has {}", w.cols(), v.len())));
    }
    Ok(())
}

/// Attention weights of `v_i` over its neighborhood (self included by the caller).
pub fn gat_attention(params: &GatParams, v_i: &[f64], neighbors: &[&[f64]]) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::Data("gat neighborhood is empty; it must contain the node itself".into()));
    }
    check_dims(&params.w, v_i)?;
    let dp = params.w.rows();
    if params.a.data().len() != 2 * dp {
        return Err(Error::dim(format!("attention vector must have {} entries", 2 * dp)));
    }
    let (a_center, a_nb) = params.a.data().split_at(dp);
    let wi = params.w.matvec(v_i);
    let center = dot(&wi, a_center);
    let mut logits = Vec::with_capacity(neighbors.len());
    for v_j in neighbors {
        check_dims(&params.w, v_j)?;
        let wj = params.w.matvec(v_j);
        logits.push(leaky(center + dot(&wj, a_nb), params.leaky_slope));
    }
    Ok(segment_softmax_values(&logits, &vec![0; logits.len()]))
}

/// `σ(Σ_j α_ij W v_j)` for one head.
pub fn gat_aggregate(params: &GatParams, v_i: &[f64], neighbors: &[&[f64]], sigma: Activation) -> Result<Vec<f64>> {
    let mut out = gat_head_sum(params, v_i, neighbors)?;
    sigma.apply(&mut out);
    Ok(out)
}

fn gat_head_sum(params: &GatParams, v_i: &[f64], neighbors: &[&[f64]]) -> Result<Vec<f64>> {
    let alpha = gat_attention(params, v_i, neighbors)?;
    let mut out = vec![0.0; params.w.rows()];
    for (v_j, a) in neighbors.iter().zip(&alpha) {
        let wj = params.w.matvec(v_j);
        for (o, x) in out.iter_mut().zip(&wj) {
            *o += x * a;
        }
    }
    Ok(out)
}

/// Multi-head GAT layer at one node: heads are averaged before `σ`.
pub fn gat_layer_node(heads: &[GatParams], v_i: &[f64], neighbors: &[&[f64]], sigma: Activation) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for p in heads {
        let h = gat_head_sum(p, v_i, neighbors)?;
        acc = Some(match acc {
            None => h,
            Some(a) => a.iter().zip(&h).map(|(x, y)| x + y).collect(),
        });
    }
    let mut out = acc.ok_or_else(|| Error::Config("gat layer without heads".into()))?;
    if heads.len() > 1 {
        let s = 1.0 / heads.len() as f64;
        for x in &mut out {
            *x *= s;
        }
    }
    sigma.apply(&mut out);
    Ok(out)
}

/// `σ(Σ_k Σ_{m∈N_k} W_k v_m / |N_k| + W_0 v_i)`; `per_tag[k]` holds the
/// neighbors under direction-tagged relation `k`.
pub fn rgcn_update(params: &RgcnParams, v_i: &[f64], per_tag: &[Vec<&[f64]>], sigma: Activation) -> Result<Vec<f64>> {
    if per_tag.len() > params.rel.len() {
        return Err(Error::dim(format!(
            "{} relation tags but only {} relation matrices",
            per_tag.len(),
            params.rel.len()
        )));
    }
    check_dims(&params.self_w, v_i)?;
    let mut acc: Option<Vec<f64>> = None;
    for (k, nbs) in per_tag.iter().enumerate() {
        if nbs.is_empty() {
            continue;
        }
        let coef = 1.0 / nbs.len() as f64;
        let mut part = vec![0.0; params.rel[k].rows()];
        for v_m in nbs {
            check_dims(&params.rel[k], v_m)?;
            let wm = params.rel[k].matvec(v_m);
            for (p, x) in part.iter_mut().zip(&wm) {
                *p += x * coef;
            }
        }
        acc = Some(match acc {
            None => part,
            Some(a) => a.iter().zip(&part).map(|(x, y)| x + y).collect(),
        });
    }
    let self_term = params.self_w.matvec(v_i);
    let mut out = match acc {
        None => self_term,
        Some(a) => a.iter().zip(&self_term).map(|(x, y)| x + y).collect(),
    };
    sigma.apply(&mut out);
    Ok(out)
}

/// Final representation: text feature plus graph output.
pub fn residual_combine(text_feature: &[f64], gnn_output: &[f64]) -> Result<Vec<f64>> {
    if text_feature.len() != gnn_output.len() {
        return Err(Error::dim(format!(
            "residual needs equal widths, got {} and {}",
            text_feature.len(),
            gnn_output.len()
        )));
    }
    Ok(text_feature.iter().zip(gnn_output).map(|(a, b)| a + b).collect())
}

/// Undirected GAT neighborhood of `e`: itself first, then distinct
/// neighbors in relation order and adjacency order.
pub fn gat_neighborhood(kg: &KnowledgeGraph, e: EntityId) -> Vec<EntityId> {
    let mut out = vec![e];
    for r in 0..kg.num_relations() {
        for nb in kg.neighbors(RelationId(r as u32), e) {
            if !out.contains(&nb.entity) {
                out.push(nb.entity);
            }
        }
    }
    out
}

/// Neighbors of `e` grouped by direction tag, in adjacency order.
pub fn rgcn_neighborhood(kg: &KnowledgeGraph, e: EntityId) -> Vec<Vec<EntityId>> {
    let mut out = vec![Vec::new(); 2 * kg.num_relations()];
    for r in 0..kg.num_relations() {
        let rel = RelationId(r as u32);
        for nb in kg.neighbors(rel, e) {
            out[direction_tag(rel, nb.direction)].push(nb.entity);
        }
    }
    out
}

struct TagEdges {
    center: Rc<[usize]>,
    neighbor: Rc<[usize]>,
    coef: Matrix,
}

/// Edge lists for the batched forward, grouped by center node.
pub struct GraphIndex {
    num_entities: usize,
    gat_center: Rc<[usize]>,
    gat_neighbor: Rc<[usize]>,
    tags: Vec<TagEdges>,
}

impl GraphIndex {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let n = kg.num_entities();
        let mut gc = Vec::new();
        let mut gn = Vec::new();
        for e in 0..n {
            for nb in gat_neighborhood(kg, EntityId(e as u32)) {
                gc.push(e);
                gn.push(nb.index());
            }
        }
        let n_tags = 2 * kg.num_relations();
        let mut centers = vec![Vec::new(); n_tags];
        let mut neighbors = vec![Vec::new(); n_tags];
        let mut coefs = vec![Vec::new(); n_tags];
        for e in 0..n {
            for (k, nbs) in rgcn_neighborhood(kg, EntityId(e as u32)).into_iter().enumerate() {
                let c = 1.0 / nbs.len().max(1) as f64;
                for m in nbs {
                    centers[k].push(e);
                    neighbors[k].push(m.index());
                    coefs[k].push(c);
                }
            }
        }
        let tags = centers
            .into_iter()
            .zip(neighbors)
            .zip(coefs)
            .map(|((c, m), w)| TagEdges {
                coef: Matrix::from_vec(w.len(), 1, w).expect("shape"),
                center: c.into(),
                neighbor: m.into(),
            })
            .collect();
        GraphIndex {
            num_entities: n,
            gat_center: gc.into(),
            gat_neighbor: gn.into(),
            tags,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }
}

/// Leaf variables of a stack registered on a tape, in `LayerStack::params` order.
pub struct StackVars {
    pub vars: Vec<Var>,
}

/// Records the stack over input table `x` (N x d); returns the GNN output
/// (without the residual) and the parameter leaves.
pub fn stack_forward_tape(tape: &mut Tape, stack: &LayerStack, graph: &GraphIndex, x: Var) -> Result<(Var, StackVars)> {
    let n = graph.num_entities;
    if tape.value(x).rows() != n {
        return Err(Error::dim(format!(
            "feature table has {} rows, graph has {n} entities",
            tape.value(x).rows()
        )));
    }
    let mut vars = Vec::new();
    let mut h = x;
    for (l, layer) in stack.layers.iter().enumerate() {
        let out = match layer {
            Layer::Gat(heads) => {
                let mut acc: Option<Var> = None;
                for p in heads {
                    let w = tape.leaf(p.w.clone());
                    let a = tape.leaf(p.a.clone());
                    vars.push(w);
                    vars.push(a);
                    let dp = p.w.rows();
                    let wx = tape.linear(h, w);
                    let a_center = tape.slice_cols(a, 0, dp);
                    let a_nb = tape.slice_cols(a, dp, dp);
                    let s_center = tape.row_dot(wx, a_center);
                    let s_nb = tape.row_dot(wx, a_nb);
                    let lc = tape.gather_rows(s_center, graph.gat_center.clone());
                    let ln = tape.gather_rows(s_nb, graph.gat_neighbor.clone());
                    let logits = tape.add(lc, ln);
                    let logits = tape.leaky_relu(logits, p.leaky_slope);
                    let alpha = tape.segment_softmax(logits, graph.gat_center.clone());
                    let msgs = tape.gather_rows(wx, graph.gat_neighbor.clone());
                    let msgs = tape.scale_rows(msgs, alpha);
                    let head = tape.scatter_add_rows(msgs, graph.gat_center.clone(), n);
                    acc = Some(match acc {
                        None => head,
                        Some(prev) => tape.add(prev, head),
                    });
                }
                let sum = acc.ok_or_else(|| Error::Config("gat layer without heads".into()))?;
                if heads.len() > 1 {
                    tape.scale(sum, 1.0 / heads.len() as f64)
                } else {
                    sum
                }
            }
            Layer::Rgcn(p) => {
                if p.rel.len() != graph.tags.len() {
                    return Err(Error::dim(format!(
                        "r-gcn layer has {} relation matrices, graph has {} direction tags",
                        p.rel.len(),
                        graph.tags.len()
                    )));
                }
                let rel_vars: Vec<Var> = p.rel.iter().map(|w| tape.leaf(w.clone())).collect();
                let self_var = tape.leaf(p.self_w.clone());
                vars.extend(&rel_vars);
                vars.push(self_var);
                let mut acc: Option<Var> = None;
                for (edges, &w) in graph.tags.iter().zip(&rel_vars) {
                    if edges.center.is_empty() {
                        continue;
                    }
                    let src = tape.gather_rows(h, edges.neighbor.clone());
                    let msgs = tape.linear(src, w);
                    let coef = tape.leaf(edges.coef.clone());
                    let msgs = tape.scale_rows(msgs, coef);
                    let part = tape.scatter_add_rows(msgs, edges.center.clone(), n);
                    acc = Some(match acc {
                        None => part,
                        Some(prev) => tape.add(prev, part),
                    });
                }
                let self_term = tape.linear(h, self_var);
                match acc {
                    None => self_term,
                    Some(a) => tape.add(a, self_term),
                }
            }
        };
        h = match stack.activation(l) {
            Activation::Relu => tape.relu(out),
            Activation::Identity => out,
        };
    }
    Ok((h, StackVars { vars }))
}

/// Final entity table: features plus the stack output (features alone when
/// there is no stack).
pub fn forward_all(stack: Option<&LayerStack>, features: &Matrix, graph: &GraphIndex) -> Result<Matrix> {
    let Some(stack) = stack else {
        return Ok(features.clone());
    };
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let (g, _) = stack_forward_tape(&mut tape, stack, graph, x)?;
    let out = tape.add(x, g);
    Ok(tape.value(out).clone())
}

/// Per-node evaluation of the same computation as [`forward_all`].
pub fn forward_all_per_node(stack: Option<&LayerStack>, features: &Matrix, kg: &KnowledgeGraph) -> Result<Matrix> {
    let Some(stack) = stack else {
        return Ok(features.clone());
    };
    let n = kg.num_entities();
    let mut h = features.clone();
    for (l, layer) in stack.layers.iter().enumerate() {
        let sigma = stack.activation(l);
        let mut next = Matrix::zeros(n, h.cols());
        for e in 0..n {
            let id = EntityId(e as u32);
            let row = match layer {
                Layer::Gat(heads) => {
                    let nbs: Vec<&[f64]> = gat_neighborhood(kg, id).iter().map(|m| h.row(m.index())).collect();
                    gat_layer_node(heads, h.row(e), &nbs, sigma)?
                }
                Layer::Rgcn(p) => {
                    let per_tag: Vec<Vec<&[f64]>> = rgcn_neighborhood(kg, id)
                        .iter()
                        .map(|ms| ms.iter().map(|m| h.row(m.index())).collect())
                        .collect();
                    rgcn_update(p, h.row(e), &per_tag, sigma)?
                }
            };
            if row.len() != next.cols() {
                next = Matrix::zeros(n, row.len());
            }
            next.row_mut(e).copy_from_slice(&row);
        }
        h = next;
    }
    let mut out = Matrix::zeros(n, features.cols());
    for e in 0..n {
        out.row_mut(e).copy_from_slice(&residual_combine(features.row(e), h.row(e))?);
    }
    Ok(out)
}
