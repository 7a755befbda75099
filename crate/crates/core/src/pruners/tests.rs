use super::*;
use crate::data::{generate, SynthConfig};
use crate::fair_loss::{LossProvider, Reduction};
use crate::model::{ConvSpec, LayerSpec, ModelSpec};
use crate::prune::count_flops;
use crate::data::LabeledDataset;
use crate::tensor::Tensor;

fn single_conv(filters: usize) -> ModelSpec {
    ModelSpec {
        input: [1, 16, 16],
        layers: vec![
            LayerSpec::Conv(ConvSpec::new(filters, 3, 2, 1)),
            LayerSpec::GlobalAvgPool,
            LayerSpec::SoftmaxHead { classes: 2 },
        ],
    }
}

#[test]
fn random_is_deterministic_and_stops_at_target() {
    let spec = ModelSpec::mini_res([1, 16, 16], 2);
    let g = DependencyGraph::build(&spec).unwrap();
    let full = original_flops(&g).unwrap();
    let target = full / 3;
    let a = random_prune(&g, target, 4).unwrap();
    let b = random_prune(&g, target, 4).unwrap();
    let c = random_prune(&g, target, 5).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_ne!(a.mask, c.mask);
    let achieved = masked_flops(&g, &a.mask).unwrap();
    assert!(achieved <= target);
    // undoing the last removal lands above the target
    let last = *a.log.last().unwrap().removed_groups.last().unwrap();
    let mut undo = a.mask.clone();
    for &(cv, f) in &g.groups[last].members {
        undo.keep.get_mut(g.conv_id(cv)).unwrap()[f] = true;
    }
    assert!(masked_flops(&g, &undo).unwrap() > target);
}

#[test]
fn full_target_keeps_everything() {
    let spec = ModelSpec::mini_plain([1, 16, 16], 2);
    let g = DependencyGraph::build(&spec).unwrap();
    let full = original_flops(&g).unwrap();
    assert_eq!(random_prune(&g, full, 1).unwrap().mask, PruneMask::all_keep(&g));
    let d = generate(&SynthConfig::two_group(4, 2, 1)).unwrap();
    let st = ModelState::build(&spec, 1).unwrap();
    let loss = LossProvider::cross_entropy(&d, Reduction::Mean).unwrap();
    let ab = AutoBotConfig {
        lr: 0.1,
        batch_size: 4,
        iterations: 3,
        beta: 2.0,
        gamma: 0.1,
    };
    let out = autobot_prune(&st, &g, &d, &d.all_indices(), &loss, &ab, full, 1).unwrap();
    assert_eq!(out.mask, PruneMask::all_keep(&g));
    let tc = TaylorConfig {
        lr: 1e-3,
        batch_size: 4,
        prune_frequency: 5,
        filters_per_prune: 1,
        weight_decay: 0.0,
        normalize: true,
    };
    let out = taylor_prune(&st, &g, &d, &d.all_indices(), &loss, &tc, full, 1).unwrap();
    assert_eq!(out.mask, PruneMask::all_keep(&g));
    assert_eq!(out.batches, 0);
}

#[test]
fn unreachable_target_is_an_error() {
    let g = DependencyGraph::build(&ModelSpec::mini_plain([1, 16, 16], 2)).unwrap();
    assert!(matches!(random_prune(&g, 1, 1), Err(Error::UnreachableTarget { .. })));
}

#[test]
fn soft_flops_matches_count_at_unit_gates() {
    for spec in [ModelSpec::mini_plain([1, 16, 16], 2), ModelSpec::mini_res([1, 16, 16], 3)] {
        let g = DependencyGraph::build(&spec).unwrap();
        let soft = SoftFlops::new(&g);
        let full = count_flops(&spec, None).unwrap().total as f64;
        assert_eq!(soft.value_and_grad(&vec![1.0; g.groups.len()]).0, full);
        let sat = 1.0 / (1.0 + (-9.0f64).exp());
        let (v, _) = soft.value_and_grad(&vec![sat; g.groups.len()]);
        assert!((full - v) / full < 1e-3);
        // binary gates reproduce the masked count
        let m = random_prune(&g, (full / 2.0) as u64, 3).unwrap().mask;
        let bin: Vec<f64> = (0..g.groups.len()).map(|j| m.is_group_kept(&g, j) as u8 as f64).collect();
        assert_eq!(soft.value_and_grad(&bin).0, masked_flops(&g, &m).unwrap() as f64);
    }
}

#[test]
fn soft_flops_gradient_matches_finite_differences() {
    let g = DependencyGraph::build(&ModelSpec::mini_res([1, 16, 16], 2)).unwrap();
    let soft = SoftFlops::new(&g);
    let gates: Vec<f64> = (0..g.groups.len()).map(|j| 0.2 + 0.7 * ((j * 37 % 11) as f64 / 10.0)).collect();
    let (_, grad) = soft.value_and_grad(&gates);
    for j in 0..gates.len() {
        let h = 1e-4;
        let mut p = gates.clone();
        p[j] += h;
        let mut m = gates.clone();
        m[j] -= h;
        let fd = (soft.value_and_grad(&p).0 - soft.value_and_grad(&m).0) / (2.0 * h);
        assert!((fd - grad[j]).abs() <= 1e-6 * grad[j].abs().max(1.0), "{j}: {fd} vs {}", grad[j]);
    }
}

#[test]
fn taylor_schedule_arithmetic() {
    let spec = single_conv(8);
    let g = DependencyGraph::build(&spec).unwrap();
    let mut keep2 = PruneMask::all_keep(&g);
    for f in 0..6 {
        keep2.remove_group(&g, f);
    }
    let target = masked_flops(&g, &keep2).unwrap();
    let d = generate(&SynthConfig::two_group(6, 2, 1)).unwrap();
    let st = ModelState::build(&spec, 2).unwrap();
    let loss = LossProvider::cross_entropy(&d, Reduction::Sum).unwrap();
    let tc = TaylorConfig {
        lr: 1e-3,
        batch_size: 4,
        prune_frequency: 5,
        filters_per_prune: 1,
        weight_decay: 0.0,
        normalize: true,
    };
    let out = taylor_prune(&st, &g, &d, &d.all_indices(), &loss, &tc, target, 1).unwrap();
    assert_eq!(out.batches, 30);
    assert_eq!(out.log.len(), 6);
    assert_eq!(out.mask.kept_count("conv0"), 2);
    // removed filters stay zero in the returned weights
    let w = out.state.unwrap();
    let wt = w.param("conv0.weight").unwrap();
    for (f, &k) in out.mask.kept("conv0").iter().enumerate() {
        if !k {
            assert!(wt.data()[f * 9..(f + 1) * 9].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn importance_basics() {
    let spec = ModelSpec {
        input: [1, 8, 8],
        layers: vec![
            LayerSpec::Conv(ConvSpec::new(3, 3, 1, 1)),
            LayerSpec::Conv(ConvSpec::new(1, 3, 1, 1)),
            LayerSpec::GlobalAvgPool,
            LayerSpec::SoftmaxHead { classes: 2 },
        ],
    };
    let g = DependencyGraph::build(&spec).unwrap();
    let mut st = ModelState::build(&spec, 3).unwrap();
    // filter 1 of conv0 is dead: zero scale and shift
    st.params_mut()[2].data_mut()[1] = 0.0;
    let d = LabeledDataset::new(
        [1, 8, 8],
        (0..4 * 64).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect(),
        vec![0, 1, 0, 1],
        vec![0; 4],
        vec!["A".into()],
        2,
        "t",
    )
    .unwrap();
    let loss = LossProvider::cross_entropy(&d, Reduction::Sum).unwrap();
    let fg = feature_map_gradients(&st, &d, &[0, 1, 2, 3], &loss).unwrap();
    let s = taylor_importance(&fg.trace, &fg.fm_grads, &g, true).unwrap();
    assert_eq!(s[g.group_of(0, 1)], 0.0);
    assert!((s[g.group_of(1, 0)] - 1.0).abs() < 1e-12);
    // sample order does not matter
    let fg2 = feature_map_gradients(&st, &d, &[3, 1, 0, 2], &loss).unwrap();
    let s2 = taylor_importance(&fg2.trace, &fg2.fm_grads, &g, true).unwrap();
    for (a, b) in s.iter().zip(&s2) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
    assert!(raw_filter_scores(&[Tensor::zeros(&[1, 2, 2, 2])], &[]).is_err());
}

#[test]
fn prune_log_csv() {
    let g = DependencyGraph::build(&ModelSpec::mini_plain([1, 16, 16], 2)).unwrap();
    let out = random_prune(&g, original_flops(&g).unwrap() / 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.csv");
    write_prune_log(&out.log, &p).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert!(text.starts_with("iteration,loss,flops,removed_groups\n"));
    assert_eq!(text.lines().count(), out.log.len() + 1);
}
