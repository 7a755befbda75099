mod common;

use common::planted_toy;
use fairprune::fair_loss::{annotate, BaseTarget, LossProvider, Reduction};
use fairprune::prune::{count_flops, pseudo_prune, DependencyGraph, PruneMask};
use fairprune::pruners::{autobot_prune, taylor_prune, AutoBotConfig, TaylorConfig};

/// Loss of every mask keeping exactly one filter; returns the best filter.
fn oracle_best_filter(seed: u64) -> usize {
    let toy = planted_toy(seed);
    let g = DependencyGraph::build(&toy.spec).unwrap();
    let loss = LossProvider::cross_entropy(&toy.data, Reduction::Mean).unwrap();
    let idx = toy.data.all_indices();
    let mut best = (f64::INFINITY, 0);
    for keep in 0..4 {
        let mut m = PruneMask::all_keep(&g);
        for f in (0..4).filter(|&f| f != keep) {
            m.remove_group(&g, g.group_of(0, f));
        }
        let st = pseudo_prune(&toy.state, &g, &m).unwrap();
        let p = st.predict(&toy.data, &idx).unwrap();
        let l = loss.value(&p.probs, &idx).unwrap();
        if l < best.0 {
            best = (l, keep);
        }
    }
    best.1
}

fn target(seed: u64) -> u64 {
    let toy = planted_toy(seed);
    (count_flops(&toy.spec, None).unwrap().total as f64 * 0.4) as u64
}

#[test]
fn oracle_picks_filter_zero() {
    for seed in 0..3 {
        assert_eq!(oracle_best_filter(seed), 0);
    }
}

#[test]
fn taylor_keeps_signal_filter() {
    let mut kept = 0;
    for seed in 0..3 {
        let toy = planted_toy(seed);
        let g = DependencyGraph::build(&toy.spec).unwrap();
        let loss = LossProvider::cross_entropy(&toy.data, Reduction::Sum).unwrap();
        let cfg = TaylorConfig {
            lr: 1e-3,
            batch_size: 16,
            prune_frequency: 5,
            filters_per_prune: 1,
            weight_decay: 0.0,
            normalize: true,
        };
        let out = taylor_prune(&toy.state, &g, &toy.data, &toy.data.all_indices(), &loss, &cfg, target(seed), seed).unwrap();
        println!("taylor seed {seed}: {:?}", out.mask.kept("conv0"));
        kept += out.mask.kept("conv0")[0] as usize;
    }
    assert!(kept >= 2);
}

#[test]
fn autobot_keeps_signal_filter() {
    let mut kept = 0;
    for seed in 0..3 {
        let toy = planted_toy(seed);
        let g = DependencyGraph::build(&toy.spec).unwrap();
        let ann = annotate(&toy.state, &toy.data, 0.3, 1.0).unwrap();
        let loss = LossProvider::plain(ann, BaseTarget::OriginalOutputs, Reduction::WeightedMean);
        let cfg = AutoBotConfig {
            lr: 0.1,
            batch_size: 16,
            iterations: 200,
            beta: 2.7,
            gamma: 0.1,
        };
        let out = autobot_prune(&toy.state, &g, &toy.data, &toy.data.all_indices(), &loss, &cfg, target(seed), seed).unwrap();
        println!("autobot seed {seed}: {:?}", out.mask.kept("conv0"));
        kept += out.mask.kept("conv0")[0] as usize;
    }
    assert!(kept >= 2);
}

#[test]
fn doubling_beta_never_widens_target_gap() {
    let gap = |beta: f64| -> f64 {
        let mut gaps: Vec<f64> = (0..3)
            .map(|seed| {
                let toy = planted_toy(seed);
                let g = DependencyGraph::build(&toy.spec).unwrap();
                let ann = annotate(&toy.state, &toy.data, 0.3, 1.0).unwrap();
                let loss = LossProvider::plain(ann, BaseTarget::OriginalOutputs, Reduction::WeightedMean);
                let cfg = AutoBotConfig {
                    lr: 0.1,
                    batch_size: 16,
                    iterations: 100,
                    beta,
                    gamma: 0.1,
                };
                let out = autobot_prune(&toy.state, &g, &toy.data, &toy.data.all_indices(), &loss, &cfg, target(seed), seed).unwrap();
                let achieved = count_flops(&toy.spec, Some(&out.mask)).unwrap().total;
                (achieved as f64 - target(seed) as f64).abs()
            })
            .collect();
        gaps.sort_by(f64::total_cmp);
        gaps[1]
    };
    for beta in [1.0, 2.7] {
        assert!(gap(2.0 * beta) <= gap(beta), "beta {beta}");
    }
}
