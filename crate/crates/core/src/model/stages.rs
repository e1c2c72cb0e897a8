//! Message-passing stages over the particle graph.
//!
//! One stage owns four networks: a node encoder, a relation encoder, a node
//! propagator, and a relation propagator. Encoders run once per stage; the
//! propagators run for the stage's step count, with effects carried in a
//! shared hidden state `h` that persists across stages within one
//! prediction.
//!
//! Hierarchical environments run four stages in order: leaf-to-leaf,
//! leaf-to-root, root-to-root, root-to-leaf. Flat environments (or the
//! no-hierarchy ablation) run the leaf stage only.
//!
//! The propagators take concatenated inputs (encoding, hidden states,
//! aggregate). Rather than materializing the concatenation per step, the
//! first weight matrix is split into row blocks and each block's product is
//! computed where it changes: the encoding projections once per stage, the
//! hidden-state projections once per step.

use rand::Rng;

use crate::autodiff::{Mlp, MlpSpec, ParamStore, Tape, TensorId};
use crate::scene::InteractionGraph;
use crate::{Error, Result};

use super::features::{Assembled, EdgeBatch, EDGE_FEATURE_DIM};
use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Leaf,
    LeafToRoot,
    Root,
    RootToLeaf,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Leaf => "leaf",
            StageKind::LeafToRoot => "up",
            StageKind::Root => "root",
            StageKind::RootToLeaf => "down",
        }
    }
}

pub fn stage_kinds(hierarchy: bool) -> Vec<StageKind> {
    if hierarchy {
        vec![
            StageKind::Leaf,
            StageKind::LeafToRoot,
            StageKind::Root,
            StageKind::RootToLeaf,
        ]
    } else {
        vec![StageKind::Leaf]
    }
}

/// The four networks of one stage.
pub struct StageParams {
    pub kind: StageKind,
    pub node_enc: Mlp,
    pub rel_enc: Mlp,
    pub node_prop: Mlp,
    pub rel_prop: Mlp,
}

fn specs(cfg: &ModelConfig, node_feature_dim: usize) -> (MlpSpec, MlpSpec, MlpSpec, MlpSpec) {
    let e = cfg.effect_dim;
    (
        MlpSpec::new(node_feature_dim, &cfg.node_enc_hidden, e),
        MlpSpec::new(EDGE_FEATURE_DIM, &cfg.rel_enc_hidden, e),
        MlpSpec::new(3 * e, &[e], e).with_residual(),
        MlpSpec::new(3 * e, &[e], e).with_residual(),
    )
}

impl StageParams {
    pub fn init(
        store: &mut ParamStore,
        kind: StageKind,
        cfg: &ModelConfig,
        node_feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (ne, re, np, rp) = specs(cfg, node_feature_dim);
        let p = format!("stage.{}", kind.name());
        Ok(StageParams {
            kind,
            node_enc: Mlp::init(store, &format!("{p}.node_enc"), &ne, rng)?,
            rel_enc: Mlp::init(store, &format!("{p}.rel_enc"), &re, rng)?,
            node_prop: Mlp::init(store, &format!("{p}.node_prop"), &np, rng)?,
            rel_prop: Mlp::init(store, &format!("{p}.rel_prop"), &rp, rng)?,
        })
    }

    pub fn bind(
        store: &ParamStore,
        kind: StageKind,
        cfg: &ModelConfig,
        node_feature_dim: usize,
    ) -> Result<Self> {
        let (ne, re, np, rp) = specs(cfg, node_feature_dim);
        let p = format!("stage.{}", kind.name());
        Ok(StageParams {
            kind,
            node_enc: Mlp::bind(store, &format!("{p}.node_enc"), &ne)?,
            rel_enc: Mlp::bind(store, &format!("{p}.rel_enc"), &re)?,
            node_prop: Mlp::bind(store, &format!("{p}.node_prop"), &np)?,
            rel_prop: Mlp::bind(store, &format!("{p}.rel_prop"), &rp)?,
        })
    }
}

/// One stage's node range, step count, and edges, resolved for a concrete
/// graph.
pub struct StagePlan {
    pub kind: StageKind,
    /// Node rows of the full hidden state this stage reads and writes.
    pub rows: (usize, usize),
    pub steps: usize,
    pub edges: Option<EdgeBatch>,
}

/// Resolve the stage schedule for a graph: node ranges, per-stage step
/// counts, and on-tape edge batches with stage-local endpoint indices.
pub fn plan_stages(
    tape: &mut Tape,
    asm: &Assembled,
    graph: &InteractionGraph,
    cfg: &ModelConfig,
    kinds: &[StageKind],
    edge_mean: &[f32],
    edge_std: &[f32],
) -> Result<Vec<StagePlan>> {
    let n_leaf = asm.layout.n_leaf;
    let n_node = asm.layout.n_node;
    let mut plans = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let (rows, steps, edges): (_, _, &[crate::scene::Relation]) = match kind {
            StageKind::Leaf => ((0, n_leaf), cfg.leaf_steps, &graph.leaf_edges),
            StageKind::LeafToRoot => {
                let h = hierarchy(graph)?;
                ((0, n_node), cfg.updown_steps, &h.leaf_to_root)
            }
            StageKind::Root => {
                let h = hierarchy(graph)?;
                ((n_leaf, n_node), cfg.root_steps, &h.root_to_root)
            }
            StageKind::RootToLeaf => {
                let h = hierarchy(graph)?;
                ((0, n_node), cfg.updown_steps, &h.root_to_leaf)
            }
        };
        let batch = super::features::edge_batch(tape, asm, edges, rows.0, edge_mean, edge_std)?;
        plans.push(StagePlan {
            kind,
            rows,
            steps,
            edges: batch,
        });
    }
    Ok(plans)
}

fn hierarchy(graph: &InteractionGraph) -> Result<&crate::scene::Hierarchy> {
    graph
        .hierarchy
        .as_ref()
        .ok_or_else(|| Error::Contract("hierarchical stage on a flat graph".into()))
}

/// Run every stage in order. Returns the final hidden state (n_node x
/// effect_dim) and the leaf stage's node encoding (n_leaf x effect_dim),
/// which the output heads consume alongside the hidden state.
pub fn run_stages(
    tape: &mut Tape,
    store: &ParamStore,
    params: &[StageParams],
    plans: &[StagePlan],
    asm: &Assembled,
    effect_dim: usize,
) -> Result<(TensorId, TensorId)> {
    let n_node = asm.layout.n_node;
    let mut h_all = tape.leaf(n_node, effect_dim, vec![0.0; n_node * effect_dim]);
    let mut c_leaf = None;
    for (stage, plan) in params.iter().zip(plans) {
        debug_assert_eq!(stage.kind, plan.kind);
        let (r0, r1) = plan.rows;
        let n_stage = r1 - r0;
        let full = r0 == 0 && r1 == n_node;

        let feats_stage = if full {
            asm.node_feats
        } else {
            tape.slice_rows(asm.node_feats, r0, r1)
        };
        let c = stage.node_enc.forward(tape, store, feats_stage)?;
        if stage.kind == StageKind::Leaf && c_leaf.is_none() {
            c_leaf = Some(if r1 == asm.layout.n_leaf && r0 == 0 {
                c
            } else {
                tape.slice_rows(c, 0, asm.layout.n_leaf)
            });
        }

        // First-layer row blocks of the node propagator: input is
        // [encoding | hidden | aggregate].
        let (w0n, b0n) = stage.node_prop.first_layer_slots();
        let wn = tape.param(w0n, store.tensor(w0n));
        let bn = tape.param(b0n, store.tensor(b0n));
        let wn_c = tape.slice_rows(wn, 0, effect_dim);
        let wn_h = tape.slice_rows(wn, effect_dim, 2 * effect_dim);
        let wn_a = tape.slice_rows(wn, 2 * effect_dim, 3 * effect_dim);
        let c_proj = tape.matmul(c, wn_c);
        let c_pre = tape.add_row(c_proj, bn);

        // Relation side, present when the stage has edges: input is
        // [encoding | receiver hidden | sender hidden].
        let rel = match &plan.edges {
            Some(batch) => {
                let e_enc = stage.rel_enc.forward(tape, store, batch.feats)?;
                let (w0r, b0r) = stage.rel_prop.first_layer_slots();
                let wr = tape.param(w0r, store.tensor(w0r));
                let br = tape.param(b0r, store.tensor(b0r));
                let wr_e = tape.slice_rows(wr, 0, effect_dim);
                let wr_recv = tape.slice_rows(wr, effect_dim, 2 * effect_dim);
                let wr_send = tape.slice_rows(wr, 2 * effect_dim, 3 * effect_dim);
                let e_proj = tape.matmul(e_enc, wr_e);
                let e_pre = tape.add_row(e_proj, br);
                Some((batch, e_pre, wr_recv, wr_send))
            }
            None => None,
        };

        let mut h_stage = if full {
            h_all
        } else {
            tape.slice_rows(h_all, r0, r1)
        };

        for _ in 0..plan.steps {
            let z_node = match &rel {
                Some((batch, e_pre, wr_recv, wr_send)) => {
                    let h_recv = tape.matmul(h_stage, *wr_recv);
                    let h_send = tape.matmul(h_stage, *wr_send);
                    let zr = tape.gather_rows(h_recv, batch.recv.clone());
                    let zs = tape.gather_rows(h_send, batch.send.clone());
                    let z = tape.add(*e_pre, zr);
                    let z = tape.add(z, zs);
                    let msg = stage.rel_prop.forward_from_first_preact(tape, store, z)?;
                    let agg = tape.scatter_add_rows(msg, batch.recv.clone(), n_stage);
                    let h_proj = tape.matmul(h_stage, wn_h);
                    let a_proj = tape.matmul(agg, wn_a);
                    let z = tape.add(c_pre, h_proj);
                    tape.add(z, a_proj)
                }
                None => {
                    let h_proj = tape.matmul(h_stage, wn_h);
                    tape.add(c_pre, h_proj)
                }
            };
            h_stage = stage.node_prop.forward_from_first_preact(tape, store, z_node)?;
        }

        h_all = if full {
            h_stage
        } else {
            let mut parts = Vec::with_capacity(3);
            if r0 > 0 {
                parts.push(tape.slice_rows(h_all, 0, r0));
            }
            parts.push(h_stage);
            if r1 < n_node {
                parts.push(tape.slice_rows(h_all, r1, n_node));
            }
            tape.concat_rows(&parts)
        };
    }
    let c_leaf = c_leaf.ok_or_else(|| Error::Contract("stage schedule lacks a leaf stage".into()))?;
    Ok((h_all, c_leaf))
}
