mod common;

use std::collections::HashMap;

use apnet::heap::{HeapNetwork, HeapPathwaySpec, HeapStageSpec};
use apnet::nn::{softmax_rows, ForwardCtx, NORM_EPS};
use apnet::tape::{Graph, ParamId, Tensor};
use common::*;
use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stage(scales: &[usize], widths: &[usize], blocks: usize) -> HeapStageSpec {
    HeapStageSpec {
        in_channels: 3,
        num_classes: 4,
        pathways: scales
            .iter()
            .zip(widths)
            .map(|(&scale, &width)| HeapPathwaySpec { scale, width, blocks })
            .collect(),
        fusion: None,
    }
}

fn param(net: &HeapNetwork, name: &str) -> Tensor {
    let (id, _) = net
        .state
        .params
        .iter()
        .find(|(_, p)| p.name == name)
        .unwrap_or_else(|| panic!("{name}"));
    net.state.params.value(id).clone()
}

fn warm_up(net: &mut HeapNetwork, size: usize, rng: &mut ChaCha8Rng) {
    let views: Vec<Tensor> = (0..net.k()).map(|_| random_tensor(&[4, 3, size, size], rng)).collect();
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::train();
    net.forward_train(&mut g, &views, &mut ctx).unwrap();
    ctx.commit(&mut net.state.norms);
}

fn avg_pool2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(IxDyn(&[s[0], s[1], s[2] / 2, s[3] / 2]));
    for ((n, c, y, xx), v) in out
        .view_mut()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .indexed_iter_mut()
    {
        *v = (x[[n, c, 2 * y, 2 * xx]]
            + x[[n, c, 2 * y + 1, 2 * xx]]
            + x[[n, c, 2 * y, 2 * xx + 1]]
            + x[[n, c, 2 * y + 1, 2 * xx + 1]])
            / 4.0;
    }
    out
}

fn relu(x: Tensor) -> Tensor {
    x.mapv(|v| v.max(0.0))
}

/// Eval-mode normalisation with level-1 running statistics.
fn norm(net: &HeapNetwork, name: &str, x: &Tensor) -> Tensor {
    let e = net.state.norms.entries().iter().find(|e| e.name == name).unwrap();
    let gamma = net.state.params.value(e.gamma);
    let beta = net.state.params.value(e.beta);
    let mut out = x.clone();
    for ((_, c, _, _), v) in out
        .view_mut()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .indexed_iter_mut()
    {
        *v = gamma[[c]] * (*v - e.running_mean[0][c]) / (e.running_var[0][c] + NORM_EPS).sqrt() + beta[[c]];
    }
    out
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).unwrap()
}

fn conv(net: &HeapNetwork, name: &str, x: &Tensor, pad: usize, stride: usize, bias: bool) -> Tensor {
    let b = bias.then(|| param(net, &format!("{name}.bias")));
    naive_conv(x, &param(net, &format!("{name}.weight")), b.as_ref(), stride, pad)
}

fn basic_block(net: &HeapNetwork, p: &str, x: &Tensor, proj: bool) -> Tensor {
    let r = relu(norm(
        net,
        &format!("{p}.conv1.norm"),
        &conv(net, &format!("{p}.conv1"), x, 1, 1, false),
    ));
    let r = norm(
        net,
        &format!("{p}.conv2.norm"),
        &conv(net, &format!("{p}.conv2"), &r, 1, 1, false),
    );
    let skip = if proj {
        norm(
            net,
            &format!("{p}.proj.norm"),
            &conv(net, &format!("{p}.proj"), x, 0, 1, false),
        )
    } else {
        x.clone()
    };
    relu(r + skip)
}

#[test]
fn averaging_downsample_preserves_constants() {
    let net = HeapNetwork::new(&stage(&[4, 2, 1], &[2, 3, 4], 1), 0).unwrap();
    for c in [0.0, 0.37, -2.5, 1e3] {
        let mut x = Tensor::from_elem(IxDyn(&[2, 4, 8, 8]), c);
        for s in 0..2 {
            x = conv(&net, &format!("pathway1.down3.{s}"), &x, 0, 2, true);
        }
        assert_eq!(x.shape(), &[2, 4, 2, 2]);
        assert!(x.iter().all(|&v| v == c), "{c}");
    }
}

#[test]
fn inference_matches_a_manual_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = HeapNetwork::new(&stage(&[2, 1], &[3, 2], 1), 5).unwrap();
    warm_up(&mut net, 8, &mut rng);
    // Move the fusion kernel off its averaging initialisation.
    let ids: Vec<ParamId> = net.fusion_params(1);
    for id in ids {
        let shape = net.state.params.value(id).shape().to_vec();
        *net.state.params.value_mut(id) = random_tensor(&shape, &mut rng);
    }
    let x = random_tensor(&[3, 3, 8, 8], &mut rng);

    // Heavy pathway at full resolution.
    let own2 = relu(norm(
        &net,
        "pathway2.stem.norm",
        &conv(&net, "pathway2.stem", &x, 1, 1, false),
    ));
    let out2 = basic_block(&net, "pathway2.block0", &own2, false);
    // Main pathway at half resolution with the heavy pathway fused in.
    let x1 = avg_pool2(&x);
    let own1 = relu(norm(
        &net,
        "pathway1.stem.norm",
        &conv(&net, "pathway1.stem", &x1, 1, 1, false),
    ));
    let fused = concat(&own1, &conv(&net, "pathway1.down2.0", &out2, 0, 2, true));
    let out1 = basic_block(&net, "pathway1.block0", &fused, true);
    let pooled = out1
        .mean_axis(ndarray::Axis(3))
        .unwrap()
        .mean_axis(ndarray::Axis(2))
        .unwrap();
    let (w, b) = (param(&net, "head1.weight"), param(&net, "head1.bias"));
    let mut logits = Array2::<f64>::zeros((3, 4));
    for n in 0..3 {
        for c in 0..4 {
            logits[[n, c]] = b[[c]] + (0..3).map(|i| w[[c, i]] * pooled[[n, i]]).sum::<f64>();
        }
    }
    let want = softmax_rows(&logits.into_dyn()).unwrap();
    let got = net.infer_batch(&x).unwrap();
    let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-12, "{err}");
}

#[test]
fn heavier_pathways_ignore_lighter_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = HeapNetwork::new(&stage(&[4, 2, 1], &[2, 3, 4], 1), 6).unwrap();
    warm_up(&mut net, 8, &mut rng);
    let views: Vec<Tensor> = (0..3).map(|_| random_tensor(&[2, 3, 8, 8], &mut rng)).collect();
    let labels = [1, 3];
    for level in 1..=3 {
        let mut g = Graph::new();
        let out = net.forward_train(&mut g, &views, &mut ForwardCtx::train()).unwrap();
        let loss = g.cross_entropy(out.logits[level - 1], &labels, 0.0).unwrap();
        let grads: HashMap<ParamId, Tensor> = g.backward(loss).unwrap().param_grads(&g).into_iter().collect();
        let sq = |ids: &[ParamId]| -> f64 {
            ids.iter()
                .filter_map(|i| grads.get(i))
                .flat_map(|t| t.iter())
                .map(|x| x * x)
                .sum()
        };
        for j in 1..=3 {
            let n = sq(&net.pathway_params(j));
            assert_eq!(n == 0.0, j < level, "level {level} pathway {j}");
        }
        let fusion = sq(&net.fusion_params(level));
        assert_eq!(fusion > 0.0, level < 3, "level {level} fusion");
    }

    // Perturbing lighter pathways leaves the heaviest logits bitwise unchanged.
    let heavy = |net: &HeapNetwork| {
        let mut g = Graph::new();
        let (l, _) = net
            .forward_level(&mut g, &views[2], 3, &mut ForwardCtx::eval())
            .unwrap();
        g.value(l).clone()
    };
    let before = heavy(&net);
    let mut other = net.clone();
    for id in other.pathway_params(1).into_iter().chain(other.pathway_params(2)) {
        other.state.params.value_mut(id).mapv_inplace(|v| v * 3.0 + 1.0);
    }
    assert_eq!(heavy(&other), before);
}

#[test]
fn inference_uses_only_the_main_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = HeapNetwork::new(&stage(&[4, 2, 1], &[2, 3, 4], 2), 7).unwrap();
    warm_up(&mut net, 8, &mut rng);
    let x = random_tensor(&[2, 3, 8, 8], &mut rng);
    let before = net.infer_batch(&x).unwrap();
    assert_eq!(net.infer_batch(&x).unwrap(), before);
    for j in 2..=3 {
        for id in net.head_params(j) {
            net.state.params.value_mut(id).fill(0.0);
        }
    }
    let after = net.infer_batch(&x).unwrap();
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));

    let views = vec![x.clone(), x.clone(), x.clone()];
    let mut g = Graph::new();
    let out = net.forward_train(&mut g, &views, &mut ForwardCtx::eval()).unwrap();
    assert_eq!(softmax_rows(g.value(out.logits[0])).unwrap(), after);
}

#[test]
fn single_pathway_stage_is_plain() {
    let s = stage(&[1], &[4], 2);
    let net = HeapNetwork::new(&s, 0).unwrap();
    assert!(net.fusion_params(1).is_empty());
    assert_eq!(s.params_infer().unwrap(), s.params_train().unwrap());
    assert_eq!(s.fused_width(0), 4);
    let mut g = Graph::new();
    let x = random_tensor(&[1, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(0));
    let (_, features) = net.forward_level(&mut g, &x, 1, &mut ForwardCtx::eval()).unwrap();
    assert!(features.is_empty());
}

#[test]
fn pruned_fusion_is_smaller_than_full_exchange() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let k = rng.random_range(2..5);
        let scales: Vec<usize> = (0..k).map(|j| 1 << (k - 1 - j)).collect();
        let widths: Vec<usize> = (0..k).map(|_| rng.random_range(1..9)).collect();
        let s = stage(&scales, &widths, rng.random_range(1..3));
        let net = HeapNetwork::new(&s, 0).unwrap();
        assert_eq!(net.param_count(), s.params_train().unwrap());
        assert!(s.params_train().unwrap() < s.full_fusion_params().unwrap());
        for j in 0..k {
            assert_eq!(s.fused_width(j), widths[j..].iter().sum::<usize>());
        }
    }
}

#[test]
fn similarity_features_are_own_and_fused_maps() {
    let net = HeapNetwork::new(&stage(&[4, 2, 1], &[2, 3, 4], 1), 0).unwrap();
    let x = random_tensor(&[1, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(5));
    for (level, parts) in [(1, 3), (2, 2), (3, 0)] {
        let mut g = Graph::new();
        let (_, f) = net.forward_level(&mut g, &x, level, &mut ForwardCtx::train()).unwrap();
        assert_eq!(f.iter().map(|f| f.pathways.len()).sum::<usize>(), parts);
    }
}
