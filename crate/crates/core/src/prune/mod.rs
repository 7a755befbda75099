//! Dependency-aware structured filter pruning.

mod flops;
mod graph;

pub use flops::{count_flops, speedup, FlopsReport, LayerFlops};
pub(crate) use flops::count_flops_topo;
pub use graph::{CoupledGroup, DependencyGraph, PruneMask, MIN_KEEP};

use crate::error::{Error, Result};
use crate::model::{Consumer, LayerSpec, ModelSpec, ModelState};
use crate::tensor::Tensor;

/// Zeroes every removed filter (weights, bias, scale, shift) and the matching
/// input slices of its consumers, keeping shapes.
pub fn pseudo_prune(state: &ModelState, graph: &DependencyGraph, mask: &PruneMask) -> Result<ModelState> {
    mask.validate(graph)?;
    let topo = state.topology().clone();
    if topo.convs.len() != graph.conv_count() {
        return Err(Error::Mask("graph does not describe this model".into()));
    }
    let mut out = state.clone();
    let params = out.params_mut();
    for conv in &topo.convs {
        let keep = mask.kept(&conv.id);
        let per = conv.in_channels * conv.spec.kernel * conv.spec.kernel;
        for (f, _) in keep.iter().enumerate().filter(|(_, &k)| !k) {
            params[conv.param_base].data_mut()[f * per..(f + 1) * per].fill(0.0);
            for p in 1..4 {
                params[conv.param_base + p].data_mut()[f] = 0.0;
            }
        }
    }
    let act_keep = mask.act_keep(&topo);
    for (a, keep) in act_keep.iter().enumerate() {
        if keep.iter().all(|&k| k) {
            continue;
        }
        for cons in topo.consumers_of(a) {
            match cons {
                Consumer::Conv(i) => {
                    let c = &topo.convs[i];
                    let k2 = c.spec.kernel * c.spec.kernel;
                    let w = params[c.param_base].data_mut();
                    for o in 0..c.spec.filters {
                        for (ci, _) in keep.iter().enumerate().filter(|(_, &k)| !k) {
                            let s = (o * c.in_channels + ci) * k2;
                            w[s..s + k2].fill(0.0);
                        }
                    }
                }
                Consumer::Dense(i) => {
                    let d = &topo.denses[i];
                    let w = params[d.param_base].data_mut();
                    for o in 0..d.units {
                        for (ci, _) in keep.iter().enumerate().filter(|(_, &k)| !k) {
                            w[o * d.in_features + ci] = 0.0;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Builds the physically smaller model: removed filters and the matching
/// consumer input slices disappear.
pub fn structural_prune(state: &ModelState, graph: &DependencyGraph, mask: &PruneMask) -> Result<ModelState> {
    mask.validate(graph)?;
    let old = state.topology();
    let mut spec: ModelSpec = state.spec().clone();
    for (li, layer) in spec.layers.iter_mut().enumerate() {
        match layer {
            LayerSpec::Conv(c) => c.filters = mask.kept_count(&format!("conv{li}")),
            LayerSpec::Residual { first, second, .. } => {
                first.filters = mask.kept_count(&format!("res{li}.a"));
                second.filters = mask.kept_count(&format!("res{li}.b"));
            }
            _ => {}
        }
    }
    let new_topo = spec.compile()?;
    let act_keep = mask.act_keep(old);
    let idx = |k: &[bool]| -> Vec<usize> { k.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect() };
    let mut params: Vec<Tensor> = Vec::with_capacity(new_topo.param_names.len());
    let src = state.params();
    for conv in &old.convs {
        let outs = idx(mask.kept(&conv.id));
        let ins = idx(&act_keep[conv.input]);
        let k2 = conv.spec.kernel * conv.spec.kernel;
        let w = src[conv.param_base].data();
        let mut nw = Vec::with_capacity(outs.len() * ins.len() * k2);
        for &o in &outs {
            for &i in &ins {
                let s = (o * conv.in_channels + i) * k2;
                nw.extend_from_slice(&w[s..s + k2]);
            }
        }
        params.push(Tensor::new(
            vec![outs.len(), ins.len(), conv.spec.kernel, conv.spec.kernel],
            nw,
        )?);
        for p in 1..4 {
            let v = src[conv.param_base + p].data();
            params.push(Tensor::new(vec![outs.len()], outs.iter().map(|&o| v[o]).collect())?);
        }
    }
    // convs precede denses in parameter order only if layers do; rebuild by name
    let mut by_name: Vec<(String, Tensor)> = old
        .convs
        .iter()
        .flat_map(|c| ["weight", "bias", "scale", "shift"].map(|s| format!("{}.{s}", c.id)))
        .zip(params)
        .collect();
    for d in &old.denses {
        let ins = idx(&act_keep[d.input]);
        let w = src[d.param_base].data();
        let mut nw = Vec::with_capacity(d.units * ins.len());
        for o in 0..d.units {
            nw.extend(ins.iter().map(|&i| w[o * d.in_features + i]));
        }
        by_name.push((format!("{}.weight", d.id), Tensor::new(vec![d.units, ins.len()], nw)?));
        by_name.push((format!("{}.bias", d.id), src[d.param_base + 1].clone()));
    }
    let mut ordered = Vec::with_capacity(by_name.len());
    for name in &new_topo.param_names {
        let pos = by_name
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Mask(format!("no parameter `{name}` after pruning")))?;
        ordered.push(by_name.swap_remove(pos).1);
    }
    ModelState::from_params(&spec, ordered, state.seed())
}

/// The most-pruned valid mask: removes prunable groups in index order while
/// `MIN_KEEP` allows.
pub fn floor_mask(graph: &DependencyGraph) -> PruneMask {
    let mut m = PruneMask::all_keep(graph);
    for g in 0..graph.groups.len() {
        if m.can_remove(graph, g) {
            m.remove_group(graph, g);
        }
    }
    m
}

/// Fails with `UnreachableTarget` when no valid mask reaches `target` MACs.
/// The floor is a lower bound estimate by greedy removal; the layers pinned
/// at `MIN_KEEP` are named.
pub fn check_reachable(graph: &DependencyGraph, target: u64) -> Result<()> {
    let m = floor_mask(graph);
    let floor = count_flops_topo(graph.topology(), Some(&m))?.total;
    if floor > target {
        let layers: Vec<String> = (0..graph.conv_count())
            .map(|c| graph.conv_id(c).to_string())
            .filter(|id| m.kept_count(id) == MIN_KEEP)
            .collect();
        return Err(Error::UnreachableTarget {
            target,
            floor,
            layers: layers.join(", "),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn batch(seed: u64) -> Tensor {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        Tensor::uniform(&[3, 1, 16, 16], 0.0, 1.0, &mut rng)
    }

    fn remove_some(g: &DependencyGraph) -> PruneMask {
        let mut m = PruneMask::all_keep(g);
        for gi in (0..g.groups.len()).step_by(3) {
            if m.can_remove(g, gi) {
                m.remove_group(g, gi);
            }
        }
        m
    }

    #[test]
    fn mini_res_groups_match_hand_trace() {
        let g = DependencyGraph::build(&ModelSpec::mini_res([1, 16, 16], 2)).unwrap();
        // conv0: 8 singletons; res1.a: 16 singletons; {res1.b, res1.proj,
        // res2.b} coupled 16 times; res2.a: 16 singletons
        assert_eq!(g.groups.len(), 8 + 16 + 16 + 16);
        let coupled: Vec<_> = g.groups.iter().filter(|gr| gr.members.len() == 3).collect();
        assert_eq!(coupled.len(), 16);
        let names = |gr: &CoupledGroup| -> Vec<String> { gr.members.iter().map(|&(c, _)| g.conv_id(c).to_string()).collect() };
        for gr in coupled {
            let mut n = names(gr);
            n.sort();
            assert_eq!(n, ["res1.b", "res1.proj", "res2.b"]);
            let f = gr.members[0].1;
            assert!(gr.members.iter().all(|&(_, ff)| ff == f));
        }
    }

    #[test]
    fn identity_skip_from_input_is_unprunable() {
        let spec = ModelSpec {
            input: [4, 8, 8],
            layers: vec![
                LayerSpec::Residual {
                    first: crate::model::ConvSpec::new(4, 3, 1, 1),
                    second: crate::model::ConvSpec::new(4, 3, 1, 1).linear(),
                    projection: false,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxHead { classes: 2 },
            ],
        };
        let g = DependencyGraph::build(&spec).unwrap();
        let b = g.topology().conv_index("res0.b").unwrap();
        assert!(g.groups_of_conv(b).iter().all(|&gi| !g.groups[gi].prunable));
    }

    #[test]
    fn pseudo_and_structural_agree() {
        for spec in [ModelSpec::mini_plain([1, 16, 16], 3), ModelSpec::mini_res([1, 16, 16], 3)] {
            let st = ModelState::build(&spec, 5).unwrap();
            let g = DependencyGraph::build(&spec).unwrap();
            let m = remove_some(&g);
            let pseudo = pseudo_prune(&st, &g, &m).unwrap();
            let small = structural_prune(&st, &g, &m).unwrap();
            let x = batch(1);
            let (a, _) = pseudo.forward(&x, false).unwrap();
            let (b, _) = small.forward(&x, false).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10);
            let fl = count_flops(&spec, Some(&m)).unwrap();
            let fs = count_flops(small.spec(), None).unwrap();
            assert_eq!(fl.total, fs.total);
            assert_eq!(fl.params as usize, small.parameter_count());
        }
    }

    #[test]
    fn all_keep_is_identity() {
        let spec = ModelSpec::mini_res([1, 16, 16], 2);
        let st = ModelState::build(&spec, 2).unwrap();
        let g = DependencyGraph::build(&spec).unwrap();
        let m = PruneMask::all_keep(&g);
        assert_eq!(pseudo_prune(&st, &g, &m).unwrap().params(), st.params());
        assert_eq!(structural_prune(&st, &g, &m).unwrap().params(), st.params());
    }

    #[test]
    fn unreachable_target_names_layers() {
        let g = DependencyGraph::build(&ModelSpec::mini_plain([1, 16, 16], 2)).unwrap();
        match check_reachable(&g, 10) {
            Err(Error::UnreachableTarget { layers, .. }) => assert!(layers.contains("conv0")),
            other => panic!("{other:?}"),
        }
        assert!(check_reachable(&g, u64::MAX).is_ok());
    }
}
