use serde::{Deserialize, Serialize};

use super::PruneMask;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Topology};

/// Multiply-accumulate count and parameter count of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub total: u64,
    pub params: u64,
}

/// Conv layers count `k² · C_in_kept · C_out_kept · H_out · W_out`; dense
/// layers count `F_kept · O`. Scale/shift, bias, pooling and softmax are
/// not counted as MACs.
pub fn count_flops(spec: &ModelSpec, mask: Option<&PruneMask>) -> Result<FlopsReport> {
    count_flops_topo(&spec.compile()?, mask)
}

pub(crate) fn count_flops_topo(topo: &Topology, mask: Option<&PruneMask>) -> Result<FlopsReport> {
    let act_keep: Option<Vec<usize>> = match mask {
        Some(m) => {
            for c in &topo.convs {
                match m.keep.get(&c.id) {
                    Some(k) if k.len() == c.spec.filters => {}
                    _ => return Err(Error::Mask(format!("mask does not match conv layer `{}`", c.id))),
                }
            }
            Some(
                m.act_keep(topo)
                    .iter()
                    .map(|k| k.iter().filter(|&&b| b).count())
                    .collect(),
            )
        }
        None => None,
    };
    let kept = |act: usize| -> u64 {
        match &act_keep {
            Some(k) => k[act] as u64,
            None => topo.acts[act].channels as u64,
        }
    };
    let mut layers = vec![];
    for c in &topo.convs {
        let (cin, cout) = (kept(c.input), kept(c.output));
        let k2 = (c.spec.kernel * c.spec.kernel) as u64;
        let hw = (c.out_hw.0 * c.out_hw.1) as u64;
        layers.push(LayerFlops {
            layer: c.id.clone(),
            macs: k2 * cin * cout * hw,
            params: cout * cin * k2 + 3 * cout,
        });
    }
    for d in &topo.denses {
        let (f, o) = (kept(d.input), d.units as u64);
        layers.push(LayerFlops {
            layer: d.id.clone(),
            macs: f * o,
            params: f * o + o,
        });
    }
    Ok(FlopsReport {
        total: layers.iter().map(|l| l.macs).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        layers,
    })
}

/// `original.total / pruned.total`.
pub fn speedup(original: &FlopsReport, pruned: &FlopsReport) -> Result<f64> {
    if pruned.total == 0 {
        return Err(Error::InvalidArgument("pruned model has zero FLOPs".into()));
    }
    Ok(original.total as f64 / pruned.total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvSpec, LayerSpec};
    use crate::prune::DependencyGraph;

    #[test]
    fn single_conv_count() {
        let spec = ModelSpec {
            input: [3, 8, 8],
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(4, 3, 1, 1)),
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxHead { classes: 2 },
            ],
        };
        let r = count_flops(&spec, None).unwrap();
        assert_eq!(r.layers[0].macs, 9 * 3 * 4 * 64);
        assert_eq!(r.layers[1].macs, 8);
        assert_eq!(r.total, 6912 + 8);
        assert_eq!(r.params as usize, spec.parameter_count().unwrap());
    }

    #[test]
    fn removing_filter_shrinks_consumer() {
        let spec = ModelSpec::mini_plain([1, 16, 16], 2);
        let g = DependencyGraph::build(&spec).unwrap();
        let mut m = PruneMask::all_keep(&g);
        m.remove_group(&g, g.group_of(0, 0));
        let full = count_flops(&spec, None).unwrap();
        let pr = count_flops(&spec, Some(&m)).unwrap();
        assert_eq!(full.layers[0].macs - pr.layers[0].macs, 9 * 256);
        assert_eq!(full.layers[1].macs - pr.layers[1].macs, 9 * 16 * 64);
        assert_eq!(full.layers[2].macs, pr.layers[2].macs);
        assert!(speedup(&full, &pr).unwrap() > 1.0);
    }
}
