//! Filter pruning: parameter deltas, function preservation and the
//! progressive schedule down to the native architecture.

use contextnet_core::arch::{build_contextnet, ContextNetConfig, GraphBuilder};
use contextnet_core::graph::{count_params, ForwardOptions};
use contextnet_core::prune::*;
use contextnet_core::{seeded_rng, Graph, Mark, Op, Tensor};

fn chain() -> Graph {
    let mut b = GraphBuilder::<f32>::new(7);
    let x = b.input("x", 6, 6, 3).unwrap();
    let a = b.conv_bn("a", x, 3, 8, 1, true).unwrap();
    let m = b.conv_bn("b", a, 1, 6, 1, true).unwrap();
    let d = b.depthwise("c", m, 3, 1, 1).unwrap();
    let d = b.batch_norm("c.bn", d).unwrap();
    let y = b.conv("d", d, 1, 4, 1, true).unwrap();
    b.mark(Mark::Logits, y);
    b.finish().unwrap()
}

#[test]
fn keeping_everything_is_a_no_op() {
    let g = chain();
    assert_eq!(prune_filters(&g, "b", &[0, 1, 2, 3, 4, 5]).unwrap(), g);
}

#[test]
fn parameter_delta_matches_closed_form() {
    let g = chain();
    let p = prune_filters(&g, "b", &[0, 2, 5]).unwrap();
    let removed = 3;
    // b kernel 1·1·8 per filter, b.bn γ and β, depthwise 3·3 per channel,
    // c.bn γ and β, and one input row of d per output (4).
    let delta = removed * (8 + 2 + 9 + 2 + 4);
    assert_eq!(count_params(&g) - count_params(&p), delta);
    let x = Tensor::random_uniform([2, 6, 6, 3], 0.0, 1.0, &mut seeded_rng(1));
    let y = p.run(&x, &ForwardOptions::inference(), p.mark(Mark::Logits).unwrap(), &mut seeded_rng(0)).unwrap();
    assert_eq!(y.dims(), [2, 6, 6, 4]);
}

#[test]
fn pruning_equals_zeroing_removed_filters_before_linear_consumers() {
    let mut b = GraphBuilder::<f32>::new(3);
    let x = b.input("x", 7, 7, 3).unwrap();
    let a = b.conv("a", x, 3, 6, 1, false).unwrap();
    let y = b.conv("b", a, 1, 4, 1, true).unwrap();
    b.mark(Mark::Output, y);
    let g = b.finish().unwrap();
    let keep = [0, 2, 5];
    let pruned = prune_filters(&g, "a", &keep).unwrap();

    let mut zeroed = g.clone();
    let id = zeroed.find("a").unwrap();
    if let Op::Conv(p) = &mut zeroed.node_mut(id).op {
        let co = p.kernel.dims()[3];
        for (i, v) in p.kernel.data_mut().iter_mut().enumerate() {
            if !keep.contains(&(i % co)) {
                *v = 0.0;
            }
        }
    }
    let opts = ForwardOptions::inference();
    for seed in 0..5 {
        let x = Tensor::random_uniform([1, 7, 7, 3], -1.0, 1.0, &mut seeded_rng(seed));
        let out = |g: &Graph| g.run(&x, &opts, g.mark(Mark::Output).unwrap(), &mut seeded_rng(0)).unwrap();
        assert!(out(&pruned).max_abs_diff(&out(&zeroed)) < 1e-5);
    }
}

#[test]
fn residual_members_must_share_a_keep_set() {
    let g = build_contextnet::<f32>(&ContextNetConfig::cn14(4, 64, 128), 0).unwrap();
    // stage2 block 0 adds its projection onto stage1's output.
    assert!(prune_filters(&g, "context.stage2.0.project", &[0, 1, 2]).is_err());
    let groups = prune_groups(&g).unwrap();
    let members = groups.group_of(g.find("context.stage2.0.project").unwrap()).unwrap().to_vec();
    let names: Vec<&str> = members.iter().map(|&i| g.node(i).name.as_str()).collect();
    let keep: Vec<usize> = (0..16).collect();
    let p = prune_group(&g, &names, &keep).unwrap();
    let x = Tensor::random_uniform([1, 64, 128, 3], 0.0, 1.0, &mut seeded_rng(2));
    let y = p.run(&x, &ForwardOptions::inference(), p.mark(Mark::FullLogits).unwrap(), &mut seeded_rng(0)).unwrap();
    assert_eq!(y.dims(), [1, 64, 128, 4]);
    // Class heads are never prunable.
    assert!(prune_filters(&g, "classifier.conv", &[0, 1]).is_err());
}

#[test]
fn two_stage_uniform_schedule_halves_widths() {
    let mut b = GraphBuilder::<f32>::new(1);
    let x = b.input("x", 8, 8, 3).unwrap();
    let l1 = b.conv_bn("l1", x, 3, 16, 1, true).unwrap();
    let l2 = b.conv_bn("l2", l1, 3, 8, 1, true).unwrap();
    let h = b.conv("head", l2, 1, 3, 1, true).unwrap();
    b.mark(Mark::Logits, h);
    let g = b.finish().unwrap();
    let schedule = PruneSchedule { multipliers: vec![2.0, 1.0], finetune_epochs: 0 };
    let targets = UniformTargets::new(&g, 2.0).unwrap();
    let mut calls = 0;
    let (p, report) = progressive_prune(g, &schedule, &targets, |_, _| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 1);
    let w = conv_out_widths(&p);
    assert_eq!((w["l1"], w["l2"], w["head"]), (8, 4, 3));
    assert!(report.stages[0].params < report.initial_params);
}

#[test]
fn progressive_schedule_reaches_native_widths() {
    let cfg = ContextNetConfig::cn14(4, 64, 128);
    let wide = build_contextnet::<f32>(&cfg.clone().with_width(2.0), 5).unwrap();
    let native = build_contextnet::<f32>(&cfg, 5).unwrap();
    let schedule = PruneSchedule::default();
    let (p, report) = progressive_prune(wide, &schedule, &ContextNetTargets(cfg.clone()), |g, _| {
        let x = Tensor::random_uniform([1, 64, 128, 3], 0.0, 1.0, &mut seeded_rng(3));
        let y = g.run(&x, &ForwardOptions::inference(), g.mark(Mark::FullLogits).unwrap(), &mut seeded_rng(0))?;
        assert_eq!(y.dims(), [1, 64, 128, 4]);
        Ok(())
    })
    .unwrap();
    assert_eq!(conv_out_widths(&p), conv_out_widths(&native));
    let depthwise = |g: &Graph| -> Vec<usize> {
        g.nodes().iter().filter_map(|n| if let Op::DepthwiseConv(c) = &n.op { Some(c.kernel.dims()[2]) } else { None }).collect()
    };
    assert_eq!(depthwise(&p), depthwise(&native));
    assert_eq!(count_params(&p), count_params(&native));
    let params: Vec<usize> = std::iter::once(report.initial_params).chain(report.stages.iter().map(|s| s.params)).collect();
    assert!(params.windows(2).all(|w| w[1] < w[0]), "{params:?}");
    assert_eq!(report.stages.iter().map(|s| s.multiplier).collect::<Vec<_>>(), [1.5, 1.25, 1.0]);
}

#[test]
fn schedule_must_match_the_starting_widths() {
    let cfg = ContextNetConfig::cn14(4, 64, 128);
    let native = build_contextnet::<f32>(&cfg, 0).unwrap();
    let r = progressive_prune(native, &PruneSchedule::default(), &ContextNetTargets(cfg), |_, _| Ok(()));
    assert!(r.is_err());
}
