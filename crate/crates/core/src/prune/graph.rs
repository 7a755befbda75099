use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActId, Consumer, ModelSpec, Topology};

/// Minimum number of filters every conv layer keeps.
pub const MIN_KEEP: usize = 1;

/// Filters that must be removed together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoupledGroup {
    /// `(conv index, filter index)`, sorted.
    pub members: Vec<(usize, usize)>,
    /// False when a member feeds an unprunable path (e.g. an identity skip
    /// from the network input).
    pub prunable: bool,
}

/// Producer→consumer structure of a model and its partition of conv filters
/// into coupled groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyGraph {
    topo: Topology,
    pub groups: Vec<CoupledGroup>,
    group_of: Vec<Vec<usize>>,
    /// `(producer conv id, consumer layer id)`.
    pub edges: Vec<(String, String)>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

impl DependencyGraph {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        Ok(Self::from_topology(spec.compile()?))
    }

    pub fn from_topology(topo: Topology) -> Self {
        let offsets: Vec<usize> = topo
            .convs
            .iter()
            .scan(0, |acc, c| {
                let o = *acc;
                *acc += c.spec.filters;
                Some(o)
            })
            .collect();
        let total: usize = topo.convs.iter().map(|c| c.spec.filters).sum();
        let mut uf = UnionFind((0..total).collect());
        let mut pinned = vec![false; total];
        for act in &topo.acts {
            if act.producers.is_empty() {
                continue;
            }
            for c in 0..act.channels {
                let first = offsets[act.producers[0]] + c;
                for &p in &act.producers[1..] {
                    uf.union(first, offsets[p] + c);
                }
                if act.fixed {
                    for &p in &act.producers {
                        pinned[offsets[p] + c] = true;
                    }
                }
            }
        }

        let mut root_to_group: BTreeMap<usize, usize> = BTreeMap::new();
        let mut groups: Vec<CoupledGroup> = vec![];
        let mut group_of = vec![];
        for (ci, conv) in topo.convs.iter().enumerate() {
            let mut row = vec![];
            for f in 0..conv.spec.filters {
                let flat = offsets[ci] + f;
                let root = uf.find(flat);
                let g = *root_to_group.entry(root).or_insert_with(|| {
                    groups.push(CoupledGroup {
                        members: vec![],
                        prunable: true,
                    });
                    groups.len() - 1
                });
                groups[g].members.push((ci, f));
                if pinned[flat] {
                    groups[g].prunable = false;
                }
                row.push(g);
            }
            group_of.push(row);
        }

        let mut edges = vec![];
        for (ci, conv) in topo.convs.iter().enumerate() {
            for cons in topo.consumers_of(conv.output) {
                edges.push((conv.id.clone(), consumer_id(&topo, cons)));
            }
            // producers feeding a residual add reach that add's consumers too
            for act in topo.acts.iter().enumerate().filter(|(i, a)| *i != conv.output && a.producers.contains(&ci)) {
                for cons in topo.consumers_of(act.0) {
                    let e = (conv.id.clone(), consumer_id(&topo, cons));
                    if !edges.contains(&e) {
                        edges.push(e);
                    }
                }
            }
        }

        Self {
            topo,
            groups,
            group_of,
            edges,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn conv_count(&self) -> usize {
        self.topo.convs.len()
    }

    pub fn conv_id(&self, conv: usize) -> &str {
        &self.topo.convs[conv].id
    }

    pub fn filters(&self, conv: usize) -> usize {
        self.topo.convs[conv].spec.filters
    }

    pub fn group_of(&self, conv: usize, filter: usize) -> usize {
        self.group_of[conv][filter]
    }

    /// Group index per filter of `conv`.
    pub fn groups_of_conv(&self, conv: usize) -> &[usize] {
        &self.group_of[conv]
    }

    /// Group index for channel `c` of activation `act`, or `None` for fixed
    /// activations without producers.
    pub fn group_of_channel(&self, act: ActId, c: usize) -> Option<usize> {
        self.topo.acts[act].producers.first().map(|&p| self.group_of[p][c])
    }
}

fn consumer_id(topo: &Topology, c: Consumer) -> String {
    match c {
        Consumer::Conv(i) => topo.convs[i].id.clone(),
        Consumer::Dense(i) => topo.denses[i].id.clone(),
    }
}

/// Per-conv keep flags, keyed by conv id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    pub fn all_keep(graph: &DependencyGraph) -> Self {
        Self {
            keep: graph
                .topo
                .convs
                .iter()
                .map(|c| (c.id.clone(), vec![true; c.spec.filters]))
                .collect(),
        }
    }

    pub fn kept(&self, conv_id: &str) -> &[bool] {
        &self.keep[conv_id]
    }

    pub fn kept_count(&self, conv_id: &str) -> usize {
        self.keep[conv_id].iter().filter(|&&k| k).count()
    }

    pub fn removed_filters(&self) -> usize {
        self.keep.values().map(|v| v.iter().filter(|&&k| !k).count()).sum()
    }

    pub fn is_group_kept(&self, graph: &DependencyGraph, group: usize) -> bool {
        let (c, f) = graph.groups[group].members[0];
        self.keep[graph.conv_id(c)][f]
    }

    /// Whether removing `group` keeps the mask valid.
    pub fn can_remove(&self, graph: &DependencyGraph, group: usize) -> bool {
        let g = &graph.groups[group];
        g.prunable
            && self.is_group_kept(graph, group)
            && g.members
                .iter()
                .all(|&(c, _)| self.kept_count(graph.conv_id(c)) > MIN_KEEP)
    }

    pub fn remove_group(&mut self, graph: &DependencyGraph, group: usize) {
        for &(c, f) in &graph.groups[group].members {
            self.keep.get_mut(graph.conv_id(c)).expect("conv in mask")[f] = false;
        }
    }

    pub fn removed_groups(&self, graph: &DependencyGraph) -> Vec<usize> {
        (0..graph.groups.len()).filter(|&g| !self.is_group_kept(graph, g)).collect()
    }

    /// Checks layer coverage, coupled-group closure, and `MIN_KEEP`.
    pub fn validate(&self, graph: &DependencyGraph) -> Result<()> {
        if self.keep.len() != graph.conv_count() {
            return Err(Error::Mask(format!(
                "mask covers {} layers, model has {} conv layers",
                self.keep.len(),
                graph.conv_count()
            )));
        }
        for (ci, conv) in graph.topo.convs.iter().enumerate() {
            let Some(k) = self.keep.get(&conv.id) else {
                return Err(Error::Mask(format!("no entry for conv layer `{}`", conv.id)));
            };
            if k.len() != conv.spec.filters {
                return Err(Error::Mask(format!(
                    "`{}` has {} filters but mask lists {}",
                    conv.id,
                    conv.spec.filters,
                    k.len()
                )));
            }
            let kept = k.iter().filter(|&&b| b).count();
            if kept < MIN_KEEP {
                return Err(Error::Mask(format!(
                    "`{}` keeps {kept} filters, below min_keep = {MIN_KEEP}",
                    conv.id
                )));
            }
            let _ = ci;
        }
        for (gi, g) in graph.groups.iter().enumerate() {
            let bits: Vec<bool> = g.members.iter().map(|&(c, f)| self.keep[graph.conv_id(c)][f]).collect();
            if bits.iter().any(|&b| b != bits[0]) {
                let names: Vec<String> = g.members.iter().map(|&(c, f)| format!("{}[{f}]", graph.conv_id(c))).collect();
                return Err(Error::Mask(format!(
                    "coupled group {gi} ({}) is partially removed",
                    names.join(", ")
                )));
            }
            if !bits[0] && !g.prunable {
                return Err(Error::Mask(format!("group {gi} is not prunable")));
            }
        }
        Ok(())
    }

    /// Keep flags per activation channel; fixed activations keep everything.
    pub(crate) fn act_keep(&self, topo: &Topology) -> Vec<Vec<bool>> {
        topo.acts
            .iter()
            .map(|a| match a.producers.first() {
                Some(&p) => self.keep[&topo.convs[p].id].clone(),
                None => vec![true; a.channels],
            })
            .collect()
    }

    /// Compact text form, e.g. `conv0:11101111|conv1:...`, in topology order.
    pub fn fingerprint(&self, graph: &DependencyGraph) -> String {
        graph
            .topo
            .convs
            .iter()
            .map(|c| {
                let bits: String = self.keep[&c.id].iter().map(|&b| if b { '1' } else { '0' }).collect();
                format!("{}:{bits}", c.id)
            })
            .collect::<Vec<_>>()
            .join("|")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_model_has_singleton_groups() {
        let g = DependencyGraph::build(&ModelSpec::mini_plain([1, 16, 16], 2)).unwrap();
        assert_eq!(g.groups.len(), 8 + 16 + 16);
        assert!(g.groups.iter().all(|gr| gr.members.len() == 1 && gr.prunable));
        assert!(g.edges.contains(&("conv2".into(), "head".into())));
    }

    #[test]
    fn partial_group_removal_rejected() {
        let g = DependencyGraph::build(&ModelSpec::mini_res([1, 16, 16], 2)).unwrap();
        let mut m = PruneMask::all_keep(&g);
        m.keep.get_mut("res1.b").unwrap()[0] = false;
        assert!(matches!(m.validate(&g), Err(Error::Mask(_))));
    }

    #[test]
    fn min_keep_enforced() {
        let g = DependencyGraph::build(&ModelSpec::mini_plain([1, 16, 16], 2)).unwrap();
        let mut m = PruneMask::all_keep(&g);
        m.keep.get_mut("conv0").unwrap().iter_mut().for_each(|b| *b = false);
        assert!(m.validate(&g).is_err());
        let mut m = PruneMask::all_keep(&g);
        for f in 0..7 {
            m.remove_group(&g, g.group_of(0, f));
        }
        assert!(m.validate(&g).is_ok());
        assert!(!m.can_remove(&g, g.group_of(0, 7)));
    }
}
