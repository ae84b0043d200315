use super::checkpoint::TensorMap;
use super::*;
use crate::nn::SlotKind;
use rand::{Rng, SeedableRng};

fn small(name: &str, classes: Option<usize>, lai: Option<LaiSpec>) -> ArchitectureSpec {
    let mut s = preset(name, lai, classes).unwrap().scaled(8, 32).unwrap();
    s.backbone = BackboneKind::ResNet50;
    s
}

fn images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n, 3, size, size], 1.0, &mut rng)
}

fn meta(n: usize) -> Vec<CamView> {
    (0..n).map(|i| CamView { camera: i % 3, view: i % 2 }).collect()
}

#[test]
fn assemble_normalizes_each_unit() {
    let g = assemble(&[Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap()]).unwrap();
    assert_eq!(g.data(), &[0.6, 0.8]);
    let g = assemble(&[Tensor::zeros(&[1, 3]), Tensor::full(&[1, 1], -2.0)]).unwrap();
    assert_eq!(g.data(), &[0.0, 0.0, 0.0, -1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(1..5);
        let dims: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(1..40)).collect();
        let units: Vec<Tensor> = dims.iter().map(|&d| Tensor::randn(&[n, d], 3.0, &mut rng)).collect();
        let g = assemble(&units).unwrap();
        let total: usize = dims.iter().sum();
        for row in g.data().chunks(total) {
            let mut col = 0;
            for &d in &dims {
                let norm: f32 = row[col..col + d].iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5);
                col += d;
            }
        }
    }
}

#[test]
fn full_size_descriptor_lengths() {
    let four = vec![Tensor::zeros(&[1, 2048]); 4];
    assert_eq!(assemble(&four).unwrap().shape(), &[1, 8192]);
    for (name, dim) in [("R50", 2048), ("MBR-4B", 8192), ("MBR-2x2G", 4096)] {
        let s = preset(name, None, None).unwrap();
        assert_eq!(s.global_dim(), dim);
    }
    let units = preset("MBR-2x2G", None, None).unwrap().units();
    assert_eq!(units.iter().map(|u| u.dim).collect::<Vec<_>>(), vec![1024; 4]);
}

#[test]
fn forward_shapes_and_input_checks() {
    let spec = small("MBR-4B", None, None);
    let model = Model::new(spec.clone(), 1).unwrap();
    let x = images(2, 32, 0);
    let f3 = model.forward_shared(&x).unwrap();
    assert_eq!(f3.shape(), &[2, 128, 2, 2]);
    let out = model.forward(&x, None).unwrap();
    assert_eq!(out.global.shape(), &[2, spec.global_dim()]);
    assert_eq!(out.units.len(), 4);
    assert_eq!(out.roles, vec![LossRole::Cls, LossRole::Metric, LossRole::Cls, LossRole::Metric]);
    assert!(matches!(model.forward_shared(&images(1, 48, 0)), Err(Error::Shape(_))));
}

#[test]
fn eval_forward_is_deterministic() {
    let model = Model::new(small("Hybrid-4G", None, None), 5).unwrap();
    let x = images(3, 32, 1);
    let a = model.forward(&x, None).unwrap();
    let b = model.forward(&x, None).unwrap();
    assert_eq!(a.global, b.global);
    let again = Model::new(small("Hybrid-4G", None, None), 5).unwrap();
    assert_eq!(again.forward(&x, None).unwrap().global, a.global);
}

#[test]
fn grouping_locality() {
    let model = Model::new(small("R50-4G", None, None), 2).unwrap();
    let f3 = model.forward_shared(&images(2, 32, 2)).unwrap();
    let base = model.branch_forward(&f3, 0).unwrap();
    let per = 128 / 4;
    for g in 0..4 {
        let mut p = f3.clone();
        let (n, c, h, w) = p.dims4().unwrap();
        for i in 0..n {
            let start = (i * c + g * per) * h * w;
            p.data_mut()[start..start + per * h * w].iter_mut().for_each(|v| *v += 1.5);
        }
        let out = model.branch_forward(&p, 0).unwrap();
        for (k, (a, b)) in base.iter().zip(&out).enumerate() {
            assert_eq!(a != b, k == g, "group {g} perturbation leaked into unit {k}");
        }
    }
}

fn copy_slice(store: &mut ParamStore, dst: &str, src_store: &ParamStore, src: &str, range: std::ops::Range<usize>) {
    let v = src_store.get(src).unwrap().value[range].to_vec();
    store.get_mut(dst).unwrap().value.copy_from_slice(&v);
}

#[test]
fn grouped_stage_equals_independent_halves() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = BottleneckConfig {
        in_channels: 16,
        mid_channels: 8,
        out_channels: 32,
        stride: 1,
        groups: 2,
        ibn: false,
        attention: None,
    };
    let mut gstore = ParamStore::new();
    let grouped = Stage::new(&mut gstore, &Scope::new("g", ParamGroup::Branch(0)), cfg, 2, &mut rng).unwrap();
    for s in gstore.slots_mut() {
        if s.kind == SlotKind::Buffer || s.name.contains("bn") || s.name.contains("downsample.1") {
            s.value.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    let half = BottleneckConfig { in_channels: 8, mid_channels: 4, out_channels: 16, groups: 1, ..cfg };
    let x = Tensor::randn(&[2, 16, 5, 5], 1.0, &mut rng);
    let full = grouped.forward(&gstore, &x).unwrap();
    for g in 0..2 {
        let mut hstore = ParamStore::new();
        let part = Stage::new(&mut hstore, &Scope::new("h", ParamGroup::Branch(0)), half, 2, &mut rng).unwrap();
        let names: Vec<(String, usize)> = hstore.slots().iter().map(|s| (s.name.clone(), s.numel())).collect();
        for (name, numel) in names {
            let src = name.replacen("h.", "g.", 1);
            copy_slice(&mut hstore, &name, &gstore, &src, g * numel..(g + 1) * numel);
        }
        let y = part.forward(&hstore, &x.channel_slice(g * 8, (g + 1) * 8).unwrap()).unwrap();
        let want = full.channel_slice(g * 16, (g + 1) * 16).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn one_group_stage_is_a_plain_stage() {
    let cfg = BottleneckConfig {
        in_channels: 8,
        mid_channels: 4,
        out_channels: 16,
        stride: 1,
        groups: 1,
        ibn: false,
        attention: None,
    };
    let mut a = ParamStore::new();
    let sa = Stage::new(&mut a, &Scope::new("s", ParamGroup::Trunk), cfg, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut b = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sb = Stage::new(&mut b, &Scope::new("s", ParamGroup::Trunk), cfg, 2, &mut rng).unwrap();
    for s in b.slots_mut() {
        s.value.copy_from_slice(&a.get(&s.name).unwrap().value);
    }
    let x = Tensor::randn(&[2, 8, 4, 4], 1.0, &mut rng);
    assert_eq!(sa.forward(&a, &x).unwrap(), sb.forward(&b, &x).unwrap());
}

fn grad_norm(model: &Model, pred: impl Fn(ParamGroup) -> bool) -> f64 {
    model
        .store
        .slots()
        .iter()
        .filter(|s| pred(s.group))
        .flat_map(|s| s.grad.iter())
        .map(|g| (*g as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn branch_gradients_are_isolated_and_trunk_is_shared() {
    let mut model = Model::new(small("R50-2B", Some(3), None), 4).unwrap();
    let x = images(4, 32, 3);
    for probe in 0..2 {
        model.store.zero_grad();
        let out = model.forward_train(&x, None, true).unwrap();
        let mut d_units = vec![None, None];
        d_units[probe] = Some(Tensor::full(out.units[probe].shape(), 1.0));
        model.backward(&d_units, &[None, None]).unwrap();
        let other = 1 - probe;
        assert_eq!(grad_norm(&model, |g| g == ParamGroup::Branch(other)), 0.0);
        assert!(grad_norm(&model, |g| g == ParamGroup::Branch(probe)) > 0.0);
        assert!(grad_norm(&model, |g| g == ParamGroup::Trunk) > 0.0);
    }
}

#[test]
fn frozen_trunk_gets_no_gradient() {
    let mut model = Model::new(small("R50-2G", Some(3), None), 4).unwrap();
    let x = images(2, 32, 3);
    let out = model.forward_train(&x, None, false).unwrap();
    let d: Vec<Option<Tensor>> = out.units.iter().map(|u| Some(Tensor::full(u.shape(), 1.0))).collect();
    let dl: Vec<Option<Tensor>> = out.logits.iter().map(|l| l.as_ref().map(|l| Tensor::full(l.shape(), 0.1))).collect();
    model.backward(&d, &dl).unwrap();
    assert_eq!(grad_norm(&model, |g| g == ParamGroup::Trunk), 0.0);
    assert!(grad_norm(&model, |g| matches!(g, ParamGroup::Branch(_))) > 0.0);
    assert!(grad_norm(&model, |g| matches!(g, ParamGroup::Head(_))) > 0.0);
}

#[test]
fn side_embeddings_start_as_a_no_op() {
    let lai = Some(LaiSpec { n_cam: 3, n_view: 2 });
    let with = Model::new(small("MBR_R50-2G-LAI", Some(4), lai), 8).unwrap();
    let without = Model::new(small("MBR_R50-2G", Some(4), None), 8).unwrap();
    let x = images(3, 32, 5);
    let m = meta(3);
    assert_eq!(with.forward(&x, Some(&m)).unwrap().global, without.forward(&x, None).unwrap().global);
    assert!(matches!(with.forward(&x, None), Err(Error::Metadata(_))));
    let bad = vec![CamView { camera: 3, view: 0 }; 3];
    assert!(matches!(with.forward(&x, Some(&bad)), Err(Error::Metadata(_))));
}

#[test]
fn side_embeddings_receive_gradient() {
    let lai = Some(LaiSpec { n_cam: 3, n_view: 2 });
    let mut model = Model::new(small("MBR_R50-2G-LAI", Some(4), lai), 8).unwrap();
    let x = images(3, 32, 5);
    let m = meta(3);
    let out = model.forward_train(&x, Some(&m), true).unwrap();
    let d: Vec<Option<Tensor>> = out.units.iter().map(|u| Some(Tensor::full(u.shape(), 1.0))).collect();
    model.backward(&d, &[None, None]).unwrap();
    assert!(grad_norm(&model, |g| g == ParamGroup::Lai) > 0.0);
}

/// Scalar probe `sum(r_u * unit_u) + sum(s_u * logits_u)` through the whole network.
/// Also returns the sum of absolute terms, which bounds f32 rounding noise.
fn probe_loss(model: &mut Model, x: &Tensor, m: &[CamView], weights: &[Tensor], lw: &[Option<Tensor>]) -> (f64, f64) {
    let out = model.forward_train(x, Some(m), true).unwrap();
    let mut terms = Vec::new();
    for (u, r) in out.units.iter().zip(weights) {
        terms.extend(u.data().iter().zip(r.data()).map(|(a, b)| (*a as f64) * (*b as f64)));
    }
    for (z, s) in out.logits.iter().zip(lw) {
        if let (Some(z), Some(s)) = (z, s) {
            terms.extend(z.data().iter().zip(s.data()).map(|(a, b)| (*a as f64) * (*b as f64)));
        }
    }
    (terms.iter().sum(), terms.iter().map(|t| t.abs()).sum())
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let lai = Some(LaiSpec { n_cam: 3, n_view: 2 });
    let spec = small("Hybrid-4G-LAI", Some(3), lai);
    let mut model = Model::new(spec, 21).unwrap();
    for s in model.store.slots_mut().iter_mut().filter(|s| s.group == ParamGroup::Lai) {
        s.value.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 7) as f32 - 3.0) * 0.05);
    }
    let x = images(4, 32, 6);
    let m = meta(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = model.forward_train(&x, Some(&m), true).unwrap();
    let weights: Vec<Tensor> = out.units.iter().map(|u| Tensor::randn(u.shape(), 1.0, &mut rng)).collect();
    let lw: Vec<Option<Tensor>> = out.logits.iter().map(|z| z.as_ref().map(|z| Tensor::randn(z.shape(), 1.0, &mut rng))).collect();
    model.store.zero_grad();
    let d: Vec<Option<Tensor>> = weights.iter().cloned().map(Some).collect();
    model.backward(&d, &lw).unwrap();
    let snapshot = model.store.clone();

    let h = 5e-4f32;
    let (_, magnitude) = probe_loss(&mut model, &x, &m, &weights, &lw);
    let floor = 2e-7 * magnitude / h as f64;
    let probes = [
        "layer3.5.conv3.weight",
        "layer3.5.bn3.weight",
        "branches.0.0.conv2.weight",
        "branches.0.2.conv3.weight",
        "branches.1.0.conv2.query.weight",
        "branches.1.1.conv2.rel_h",
        "branches.1.2.bn3.bias",
        "heads.0.classifier.weight",
        "heads.2.neck.weight",
        "lai.table",
    ];
    for name in probes {
        let slot = snapshot.get(name).unwrap_or_else(|| panic!("{name}"));
        for k in 0..4 {
            let i = (k * 7919 + 13) % slot.numel();
            let analytic = slot.grad[i] as f64;
            let orig = slot.value[i];
            model.store.get_mut(name).unwrap().value[i] = orig + h;
            let (lp, _) = probe_loss(&mut model, &x, &m, &weights, &lw);
            model.store.get_mut(name).unwrap().value[i] = orig - h;
            let (lm, _) = probe_loss(&mut model, &x, &m, &weights, &lw);
            model.store.get_mut(name).unwrap().value[i] = orig;
            let numeric = (lp - lm) / (2.0 * h as f64);
            let tol = 2e-2 * numeric.abs() + floor.max(1e-2);
            assert!((numeric - analytic).abs() < tol, "{name}[{i}]: numeric {numeric} vs analytic {analytic}");
        }
    }
}

#[test]
fn checkpoint_round_trip_restores_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let model = Model::new(small("MBR-2x2G", Some(5), None), 3).unwrap();
    let mut meta = std::collections::HashMap::new();
    meta.insert("epoch".to_string(), "7".to_string());
    model.save(&path, meta, TensorMap::new()).unwrap();
    let (back, meta, _) = Model::load(&path).unwrap();
    assert_eq!(meta["epoch"], "7");
    assert_eq!(back.spec, model.spec);
    let x = images(2, 32, 8);
    assert_eq!(back.forward(&x, None).unwrap().global, model.forward(&x, None).unwrap().global);
}

/// Renames a single-branch model's stage-4 weights into the torchvision layout.
fn torchvision_state(model: &Model) -> TensorMap {
    model
        .state()
        .into_iter()
        .filter(|(k, _)| !k.starts_with("heads.") && !k.starts_with("lai."))
        .map(|(k, v)| (k.replacen("branches.0.", "layer4.", 1), v))
        .collect()
}

#[test]
fn backbone_loading_copies_dense_and_diagonal_blocks() {
    let source = Model::new(small("R50", None, None), 30).unwrap();
    let tv = torchvision_state(&source);

    let mut dense = Model::new(small("R50-2B", Some(4), None), 31).unwrap();
    dense.load_backbone(&tv).unwrap();
    let x = images(2, 32, 9);
    let want = source.forward(&x, None).unwrap().units[0].clone();
    let got = dense.forward(&x, None).unwrap();
    assert_eq!(got.units[0], want);
    assert_eq!(got.units[1], want);

    let mut hybrid = Model::new(small("Hybrid-4G", None, None), 32).unwrap();
    let rel_before = hybrid.store.get("branches.1.0.conv2.rel_h").unwrap().value.clone();
    hybrid.load_backbone(&tv).unwrap();
    assert_eq!(hybrid.store.get("branches.1.0.conv2.rel_h").unwrap().value, rel_before);
    // BoT branch is global groups 2..4 of a G=4 split of the dense stage.
    let dense_w = &tv["layer4.0.conv3.weight"];
    let ours = hybrid.store.get("branches.1.0.conv3.weight").unwrap();
    let (out, cin) = (ours.shape[0], ours.shape[1]);
    assert_eq!((out, cin), (128, 16));
    let s_in = dense_w.shape[1];
    for o in [0usize, 63, 64, 127] {
        let gg = 2 + o / 64;
        let so = gg * 64 + o % 64;
        let want = &dense_w.data[so * s_in + gg * cin..so * s_in + gg * cin + cin];
        assert_eq!(&ours.value[o * cin..(o + 1) * cin], want);
    }
    let bn = &hybrid.store.get("branches.1.0.bn3.weight").unwrap().value;
    assert_eq!(bn[..], tv["layer4.0.bn3.weight"].data[128..256]);

    let mut missing = tv.clone();
    missing.remove("layer2.1.conv2.weight");
    assert!(matches!(dense.load_backbone(&missing), Err(Error::Checkpoint(_))));
}

#[test]
fn ibn_model_loads_plain_norms_by_halves() {
    let source = Model::new(small("R50", None, None), 30).unwrap();
    let tv = torchvision_state(&source);
    let mut spec = small("R50", None, None);
    spec.backbone = BackboneKind::ResNet50IbnA;
    let mut ibn = Model::new(spec, 1).unwrap();
    ibn.load_backbone(&tv).unwrap();
    let w = &tv["layer1.0.bn1.weight"].data;
    let half = w.len() / 2;
    assert_eq!(ibn.store.get("layer1.0.bn1.IN.weight").unwrap().value[..], w[..half]);
    assert_eq!(ibn.store.get("layer1.0.bn1.BN.weight").unwrap().value[..], w[half..]);
}
