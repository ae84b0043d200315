//! Stem and stages 1-3 loaded from a torchvision-layout weight map reproduce
//! torchvision's activations. Constants come from `fixtures/torchvision_golden.py`.

#![allow(clippy::excessive_precision)]

use mbr_core::model::{preset, BackboneKind, Model, NamedTensor, TensorMap};
use mbr_core::nn::ParamGroup;
use mbr_core::Tensor;

const GOLDEN: &[(usize, f32)] = &[
    (0, 0.000000000e+00),
    (1, 1.493155718e+00),
    (2, 1.443236321e-01),
    (3, 2.372724056e+00),
    (4, 2.906755805e-01),
    (511, 0.000000000e+00),
    (1019, 1.780457377e+00),
    (1023, 2.103750467e+00),
];

fn phase(name: &str) -> f64 {
    (name.bytes().map(u64::from).sum::<u64>() % 97) as f64 * 0.1
}

fn fill(name: &str, shape: &[usize]) -> Vec<f32> {
    let n: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap();
    (0..n)
        .map(|i| {
            let s = (0.7 * i as f64 + phase(name)).sin();
            let v = if shape.len() == 4 {
                s * (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt()
            } else {
                match leaf {
                    "weight" => 0.5 + 0.1 * s,
                    "bias" => 0.1 * s,
                    "running_mean" => 0.05 * s,
                    "running_var" => 1.0 + 0.5 * s.abs(),
                    _ => panic!("unexpected tensor {name}"),
                }
            };
            v as f32
        })
        .collect()
}

/// Torchvision names and shapes of stem, stages 1-4, filled in closed form.
fn torchvision_like(model: &Model) -> TensorMap {
    model
        .store
        .slots()
        .iter()
        .filter(|s| matches!(s.group, ParamGroup::Trunk | ParamGroup::Branch(0)))
        .map(|s| {
            let name = s.name.replacen("branches.0.", "layer4.", 1);
            let data = fill(&name, &s.shape);
            (name, NamedTensor { shape: s.shape.clone(), data })
        })
        .collect()
}

#[test]
fn stage3_activations_match_torchvision() {
    let mut spec = preset("R50", None, None).unwrap().scaled(64, 64).unwrap();
    spec.backbone = BackboneKind::ResNet50;
    let mut model = Model::new(spec, 0).unwrap();
    let src = torchvision_like(&model);
    let loaded = model.load_backbone(&src).unwrap();
    assert_eq!(loaded, src.len());

    let n = 3 * 64 * 64;
    let x: Vec<f32> = (0..n).map(|i| (1.5 * (0.013 * i as f64).sin()) as f32).collect();
    let f3 = model.forward_shared(&Tensor::from_vec(&[1, 3, 64, 64], x).unwrap()).unwrap();
    let (_, c, h, w) = f3.dims4().unwrap();
    assert_eq!((c, h, w), (1024, 4, 4));
    for &(ch, want) in GOLDEN {
        let plane = &f3.data()[ch * h * w..(ch + 1) * h * w];
        let got = plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
        assert!((got - want as f64).abs() <= 1e-4 * (1.0 + want.abs() as f64), "channel {ch}: {got} vs {want}");
    }
}
