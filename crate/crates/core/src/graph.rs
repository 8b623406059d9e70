//! Salient and contextual scene-graph construction from a fused feature map.
//!
//! Positions are ranked by their channel-summed intensity. The top `k` form
//! the salient graph; a width-`k` window around the middle of the ranking
//! forms the contextual graph. Both node lists are then put back in spatial
//! (ascending flat index) order and wired with the same 4-node subgraph
//! layout, weighting each edge by the Manhattan distance of its endpoints.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Channel sum of a `[N,C,H,W]` map, flattened to `[N, H*W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityMap {
    pub values: Tensor,
    pub h: usize,
    pub w: usize,
}

impl IntensityMap {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.values.data()[n * hw..(n + 1) * hw]
    }

    /// Run [`select_nodes`] for every batch item.
    pub fn select(&self, k: usize) -> Result<Vec<NodeSelection>> {
        (0..self.batch()).map(|n| select_nodes(self.row(n), self.h, self.w, k)).collect()
    }
}

pub fn intensity_map(f_ffr: &Tensor) -> Result<IntensityMap> {
    if f_ffr.rank() != 4 {
        return Err(Error::config(format!("intensity map needs [N,C,H,W], got {:?}", f_ffr.shape())));
    }
    let (n, c, h, w) = (f_ffr.shape()[0], f_ffr.shape()[1], f_ffr.shape()[2], f_ffr.shape()[3]);
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    for i in 0..n {
        let dst = &mut out[i * hw..(i + 1) * hw];
        for ch in 0..c {
            let src = &f_ffr.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
    Ok(IntensityMap { values: Tensor::from_parts(vec![n, hw], out), h, w })
}

/// Flat indices of the two node sets, each strictly ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSelection {
    pub salient_idx: Vec<usize>,
    pub contextual_idx: Vec<usize>,
}

pub fn check_node_count(k: usize, h: usize, w: usize) -> Result<()> {
    if k < 4 || k % 4 != 0 {
        return Err(Error::config(format!("node count k={k} must be a positive multiple of 4")));
    }
    if h * w < 3 * k {
        return Err(Error::config(format!(
            "feature map {h}x{w} has {} positions, need at least 3k={} for k={k}",
            h * w,
            3 * k
        )));
    }
    Ok(())
}

/// Flat positions sorted by descending intensity, ties (including `-0.0`
/// against `0.0`) by ascending index. Values must be finite.
pub fn intensity_ranking(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Salient ranks `[0, k)` and contextual ranks `[hw/2 - k/2, hw/2 + k/2)` of
/// the descending intensity ranking, each re-sorted by flat index.
pub fn select_nodes(values: &[f64], h: usize, w: usize, k: usize) -> Result<NodeSelection> {
    check_node_count(k, h, w)?;
    if values.len() != h * w {
        return Err(Error::config(format!("{} intensities for a {h}x{w} map", values.len())));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("intensity at position {i} is {}", values[i])));
    }
    let order = intensity_ranking(values);
    let m_left = h * w / 2 - k / 2;
    let mut salient_idx = order[..k].to_vec();
    let mut contextual_idx = order[m_left..m_left + k].to_vec();
    salient_idx.sort_unstable();
    contextual_idx.sort_unstable();
    Ok(NodeSelection { salient_idx, contextual_idx })
}

/// Node groups of four ranks each plus one centre per group. Ranks are 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgraphLayout {
    pub k: usize,
    pub groups: Vec<[usize; 4]>,
    pub centers: Vec<usize>,
}

impl SubgraphLayout {
    pub fn groups_one_based(&self) -> Vec<[usize; 4]> {
        self.groups.iter().map(|g| g.map(|r| r + 1)).collect()
    }

    pub fn centers_one_based(&self) -> Vec<usize> {
        self.centers.iter().map(|c| c + 1).collect()
    }

    /// Every 4-clique edge plus the chain linking consecutive centres, as
    /// `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(7 * self.groups.len());
        for g in &self.groups {
            for a in 0..4 {
                for b in a + 1..4 {
                    edges.push((g[a].min(g[b]), g[a].max(g[b])));
                }
            }
        }
        for pair in self.centers.windows(2) {
            edges.push((pair[0].min(pair[1]), pair[0].max(pair[1])));
        }
        edges
    }
}

/// Group `i` (1-based, `i <= k/4`) is `{i, i + k/4, i + 2k/4, i + 3k/4}` with
/// centre `i + 2k/4`.
pub fn build_subgraphs(k: usize) -> Result<SubgraphLayout> {
    if k < 4 || k % 4 != 0 {
        return Err(Error::config(format!("node count k={k} must be a positive multiple of 4")));
    }
    let q = k / 4;
    let groups = (0..q).map(|i| [i, i + q, i + 2 * q, i + 3 * q]).collect();
    let centers = (0..q).map(|i| i + 2 * q).collect();
    Ok(SubgraphLayout { k, groups, centers })
}

/// Grid coordinates of a node: `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodePos {
    pub x: usize,
    pub y: usize,
}

pub fn node_positions(indices: &[usize], w: usize) -> Vec<NodePos> {
    indices.iter().map(|&i| NodePos { x: i % w, y: i / w }).collect()
}

/// Symmetric `[K,K]` matrix with the Manhattan distance on every layout edge
/// and zero elsewhere.
pub fn build_adjacency(positions: &[NodePos], layout: &SubgraphLayout) -> Result<Tensor> {
    let k = layout.k;
    if positions.len() != k {
        return Err(Error::config(format!("{} positions for a {k}-node layout", positions.len())));
    }
    let mut a = Tensor::zeros(&[k, k]);
    for (i, j) in layout.edges() {
        let (p, q) = (positions[i], positions[j]);
        let d = (p.x.abs_diff(q.x) + p.y.abs_diff(q.y)) as f64;
        a.data_mut()[i * k + j] = d;
        a.data_mut()[j * k + i] = d;
    }
    Ok(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Salient,
    Contextual,
}

/// Node placement and weighted adjacency of one graph across a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphGeometry {
    pub kind: GraphKind,
    /// Per sample, `k` ascending flat indices.
    pub indices: Vec<Vec<usize>>,
    pub positions: Vec<Vec<NodePos>>,
    /// `[N,K,K]`.
    pub adjacency: Tensor,
    /// Layout edges shared by every sample.
    pub edges: Vec<(usize, usize)>,
}

impl GraphGeometry {
    fn build(kind: GraphKind, indices: Vec<Vec<usize>>, w: usize, layout: &SubgraphLayout) -> Result<Self> {
        let positions: Vec<Vec<NodePos>> = indices.iter().map(|idx| node_positions(idx, w)).collect();
        let mats = positions
            .iter()
            .map(|p| build_adjacency(p, layout))
            .collect::<Result<Vec<_>>>()?;
        let adjacency = Tensor::stack(&mats.iter().collect::<Vec<_>>())?;
        Ok(GraphGeometry { kind, indices, positions, adjacency, edges: layout.edges() })
    }

    /// `[K,K]` adjacency of one sample.
    pub fn adjacency_of(&self, n: usize) -> Tensor {
        let t = self.adjacency.batch_item(n);
        let k = t.shape()[1];
        t.reshape(&[k, k]).expect("square")
    }
}

/// Everything needed to gather and propagate node features for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePlan {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub layout: SubgraphLayout,
    pub salient: GraphGeometry,
    pub contextual: GraphGeometry,
}

pub fn plan_scene_graphs(f_ffr: &Tensor, k: usize) -> Result<ScenePlan> {
    let map = intensity_map(f_ffr)?;
    check_node_count(k, map.h, map.w)?;
    let selections = map.select(k)?;
    let layout = build_subgraphs(k)?;
    let (sal, ctx): (Vec<_>, Vec<_>) =
        selections.into_iter().map(|s| (s.salient_idx, s.contextual_idx)).unzip();
    Ok(ScenePlan {
        h: map.h,
        w: map.w,
        k,
        salient: GraphGeometry::build(GraphKind::Salient, sal, map.w, &layout)?,
        contextual: GraphGeometry::build(GraphKind::Contextual, ctx, map.w, &layout)?,
        layout,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub geometry: GraphGeometry,
    /// `[N,K,C]`.
    pub node_features: Tensor,
}

/// Feature vectors at the selected positions, `[N,K,C]` for each node set.
pub fn gather_node_features(f_ffr: &Tensor, selections: &[NodeSelection]) -> Result<(Tensor, Tensor)> {
    let sal: Vec<Vec<usize>> = selections.iter().map(|s| s.salient_idx.clone()).collect();
    let ctx: Vec<Vec<usize>> = selections.iter().map(|s| s.contextual_idx.clone()).collect();
    Ok((ops::gather_positions(f_ffr, &sal)?, ops::gather_positions(f_ffr, &ctx)?))
}

/// Salient and contextual graphs of a fused map `[N,C,H,W]`.
pub fn build_scene_graphs(f_ffr: &Tensor, k: usize) -> Result<(SceneGraph, SceneGraph)> {
    let plan = plan_scene_graphs(f_ffr, k)?;
    let sal = ops::gather_positions(f_ffr, &plan.salient.indices)?;
    let ctx = ops::gather_positions(f_ffr, &plan.contextual.indices)?;
    Ok((
        SceneGraph { geometry: plan.salient, node_features: sal },
        SceneGraph { geometry: plan.contextual, node_features: ctx },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    /// 1-based rank within its graph.
    pub rank: usize,
    pub flat_idx: usize,
    pub x: usize,
    pub y: usize,
    pub kind: GraphKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportEdge {
    /// Indices into `nodes`.
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
}

impl ScenePlan {
    /// Both graphs of batch item `n`; salient nodes come first in `nodes`.
    pub fn export(&self, n: usize) -> GraphExport {
        let mut nodes = Vec::with_capacity(2 * self.k);
        let mut edges = Vec::new();
        for (offset, g) in [(0, &self.salient), (self.k, &self.contextual)] {
            for (r, (&flat_idx, p)) in g.indices[n].iter().zip(&g.positions[n]).enumerate() {
                nodes.push(ExportNode { rank: r + 1, flat_idx, x: p.x, y: p.y, kind: g.kind });
            }
            let a = g.adjacency_of(n);
            for &(i, j) in &g.edges {
                edges.push(ExportEdge { i: offset + i, j: offset + j, weight: a.data()[i * self.k + j] });
            }
        }
        GraphExport { h: self.h, w: self.w, k: self.k, nodes, edges }
    }

    pub fn export_json(&self, n: usize) -> String {
        serde_json::to_string_pretty(&self.export(n)).expect("plain data serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn intensity_sums_channels() {
        let f = Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 1.0 } else { 2.0 });
        let m = intensity_map(&f).unwrap();
        assert_eq!(m.values.shape(), &[1, 4]);
        assert!(m.values.data().iter().all(|&v| v == 3.0));

        let single = Tensor::from_fn(&[1, 1, 3, 2], |i| i as f64);
        assert_eq!(intensity_map(&single).unwrap().values.data(), single.data());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let m = intensity_map(&f).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mut want = 0.0;
                for c in 0..3 {
                    want += f.data()[(c * 4 + y) * 4 + x];
                }
                assert_eq!(m.values.data()[y * 4 + x], want);
            }
        }
    }

    #[test]
    fn selection_on_descending_ramp() {
        let values: Vec<f64> = (0..16).map(|i| 16.0 - i as f64).collect();
        let s = select_nodes(&values, 4, 4, 4).unwrap();
        assert_eq!(s.salient_idx, vec![0, 1, 2, 3]);
        assert_eq!(s.contextual_idx, vec![6, 7, 8, 9]);
    }

    #[test]
    fn selection_ties_prefer_lower_index() {
        let s = select_nodes(&[5.0; 16], 4, 4, 4).unwrap();
        assert_eq!(s.salient_idx, vec![0, 1, 2, 3]);
        assert_eq!(s.contextual_idx, vec![6, 7, 8, 9]);
    }

    #[test]
    fn selection_preconditions() {
        assert!(matches!(select_nodes(&[0.0; 64], 8, 8, 6), Err(Error::Config(_))));
        assert!(matches!(select_nodes(&[0.0; 16], 4, 4, 8), Err(Error::Config(_))));
        assert!(select_nodes(&[0.0; 24], 4, 6, 8).is_ok());
    }

    #[test]
    fn subgraph_layouts() {
        let l20 = build_subgraphs(20).unwrap();
        assert_eq!(l20.centers_one_based(), vec![11, 12, 13, 14, 15]);
        assert_eq!(l20.groups_one_based()[0], [1, 6, 11, 16]);
        let l8 = build_subgraphs(8).unwrap();
        assert_eq!(l8.groups_one_based(), vec![[1, 3, 5, 7], [2, 4, 6, 8]]);
        assert_eq!(l8.centers_one_based(), vec![5, 6]);
        assert!(build_subgraphs(10).is_err());
        assert_eq!(l20.edges().len(), 6 * 5 + 4);
    }

    #[test]
    fn positions_are_row_major() {
        assert_eq!(node_positions(&[0, 12, 7], 8), vec![
            NodePos { x: 0, y: 0 },
            NodePos { x: 4, y: 1 },
            NodePos { x: 7, y: 0 }
        ]);
    }

    #[test]
    fn adjacency_weights() {
        let layout = build_subgraphs(4).unwrap();
        let pos = vec![
            NodePos { x: 3, y: 0 },
            NodePos { x: 4, y: 1 },
            NodePos { x: 4, y: 1 },
            NodePos { x: 0, y: 9 },
        ];
        let a = build_adjacency(&pos, &layout).unwrap();
        assert_eq!(a.data()[1], 2.0);
        assert_eq!(a.data()[4 + 2], 0.0); // coincident but connected
        assert!(layout.edges().contains(&(1, 2)));
        assert_eq!(a.data()[3], 12.0);

        // k=8: ranks 0 and 1 sit in different groups and are not centres.
        let layout = build_subgraphs(8).unwrap();
        let pos: Vec<NodePos> = (0..8).map(|i| NodePos { x: 3 * i, y: i }).collect();
        let a = build_adjacency(&pos, &layout).unwrap();
        assert_eq!(a.data()[1], 0.0);
    }

    #[test]
    fn gather_reproduces_indices() {
        let f = Tensor::from_fn(&[1, 2, 6, 6], |i| (i % 36) as f64);
        let sel = select_nodes(&intensity_map(&f).unwrap().values.data().to_vec(), 6, 6, 8).unwrap();
        let (sal, ctx) = gather_node_features(&f, std::slice::from_ref(&sel)).unwrap();
        assert_eq!(sal.shape(), &[1, 8, 2]);
        for (j, &idx) in sel.salient_idx.iter().enumerate() {
            assert_eq!(sal.data()[j * 2], idx as f64);
            assert_eq!(sal.data()[j * 2 + 1], idx as f64);
        }
        for (j, &idx) in sel.contextual_idx.iter().enumerate() {
            assert_eq!(ctx.data()[j * 2], idx as f64);
        }
    }

    #[test]
    fn gather_then_scatter_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::from_fn(&[1, 3, 6, 6], |_| rng.random_range(-1.0..1.0));
        let sel = select_nodes(intensity_map(&f).unwrap().row(0), 6, 6, 8).unwrap();
        let (sal, ctx) = gather_node_features(&f, std::slice::from_ref(&sel)).unwrap();
        let mut back = Tensor::zeros(&[1, 3, 6, 6]);
        for (feats, idx) in [(&sal, &sel.salient_idx), (&ctx, &sel.contextual_idx)] {
            for (j, &p) in idx.iter().enumerate() {
                for c in 0..3 {
                    back.data_mut()[c * 36 + p] = feats.data()[j * 3 + c];
                }
            }
        }
        for idx in sel.salient_idx.iter().chain(&sel.contextual_idx) {
            for c in 0..3 {
                assert_eq!(back.data()[c * 36 + idx], f.data()[c * 36 + idx]);
            }
        }
    }

    #[test]
    fn scene_graphs_for_k20() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::from_fn(&[1, 4, 10, 8], |_| rng.random_range(-1.0..1.0));
        let (sal, ctx) = build_scene_graphs(&f, 20).unwrap();
        assert_eq!(sal.node_features.shape(), &[1, 20, 4]);
        assert_eq!(ctx.node_features.shape(), &[1, 20, 4]);
        let mut all: Vec<usize> = sal.geometry.indices[0].iter().chain(&ctx.geometry.indices[0]).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 40);
        assert_eq!(build_subgraphs(20).unwrap().groups.len(), 5);
        assert_eq!(build_scene_graphs(&f, 20).unwrap(), (sal, ctx));
    }

    #[test]
    fn export_json_lists_both_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.random_range(-1.0..1.0));
        let plan = plan_scene_graphs(&f, 8).unwrap();
        let parsed: GraphExport = serde_json::from_str(&plan.export_json(0)).unwrap();
        assert_eq!((parsed.h, parsed.w, parsed.k), (6, 6, 8));
        assert_eq!(parsed.nodes.len(), 16);
        assert_eq!(parsed.edges.len(), 2 * (6 * 2 + 1));
        assert_eq!(parsed.nodes[8].kind, GraphKind::Contextual);
        let v: serde_json::Value = serde_json::from_str(&plan.export_json(0)).unwrap();
        assert_eq!(v["nodes"][0]["kind"], "salient");
        for e in &parsed.edges {
            let (a, b) = (&parsed.nodes[e.i], &parsed.nodes[e.j]);
            assert_eq!(a.kind, b.kind);
            assert_eq!(e.weight, (a.x.abs_diff(b.x) + a.y.abs_diff(b.y)) as f64);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn selection_is_invariant_to_increasing_maps(
                seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let values: Vec<f64> = (0..64).map(|_| rng.random_range(0..10) as f64).collect();
                let base = select_nodes(&values, 8, 8, 8).unwrap();
                let affine: Vec<f64> = values.iter().map(|v| v * scale + shift).collect();
                let cubed: Vec<f64> = values.iter().map(|v| v.powi(3) + v).collect();
                prop_assert_eq!(&select_nodes(&affine, 8, 8, 8).unwrap(), &base);
                prop_assert_eq!(&select_nodes(&cubed, 8, 8, 8).unwrap(), &base);
                prop_assert!(base.salient_idx.iter().all(|i| !base.contextual_idx.contains(i)));
                prop_assert!(base.salient_idx.windows(2).all(|p| p[0] < p[1]));
                prop_assert!(base.contextual_idx.windows(2).all(|p| p[0] < p[1]));
            }

            #[test]
            fn adjacency_is_symmetric_with_zero_diagonal(seed in any::<u64>(), q in 1usize..7) {
                let k = 4 * q;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pos: Vec<NodePos> = (0..k).map(|_| NodePos { x: rng.random_range(0..20), y: rng.random_range(0..20) }).collect();
                let layout = build_subgraphs(k).unwrap();
                let a = build_adjacency(&pos, &layout).unwrap();
                let edges = layout.edges();
                prop_assert_eq!(edges.len(), 6 * q + q - 1);
                for i in 0..k {
                    prop_assert_eq!(a.data()[i * k + i], 0.0);
                    for j in 0..k {
                        let v = a.data()[i * k + j];
                        prop_assert_eq!(v, a.data()[j * k + i]);
                        prop_assert!(v >= 0.0);
                        if v > 0.0 {
                            prop_assert!(edges.contains(&(i.min(j), i.max(j))));
                        }
                    }
                }
            }
        }
    }
}
