use super::*;
use crate::model::{BackboneKind, BottleneckConfig, Stage};
use crate::nn::{ConvConfig, ParamStore, Scope};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scaled(name: &str) -> Model {
    let mut spec = preset(name, None, Some(5)).unwrap().scaled(8, 64).unwrap();
    spec.backbone = BackboneKind::ResNet50IbnA;
    Model::new(spec, 0).unwrap()
}

#[test]
fn expected_table_covers_the_registry() {
    let table = expected_table();
    assert_eq!(table.len(), PRESETS.len());
    for name in PRESETS {
        assert!(expected_for(name).is_ok(), "{name}");
    }
    assert!(matches!(expected_for("R51"), Err(Error::UnknownPreset { .. })));
}

#[test]
fn analytic_count_equals_enumeration_on_every_preset() {
    for name in PRESETS {
        let m = scaled(name);
        let layers = m.layers().unwrap();
        for scope in [CountScope::Audit, CountScope::Full] {
            assert_eq!(analytic_params(&layers, scope).unwrap(), count_params(&m, scope), "{name} {scope:?}");
        }
        assert!(count_params(&m, CountScope::Full) > count_params(&m, CountScope::Audit), "{name} has heads");
    }
}

#[test]
fn lbs_twins_have_equal_audit_params() {
    for (a, b) in [("R50-2B", "MBR_R50-2B"), ("R50-4G", "MBR_R50-4G"), ("Hybrid-4B", "MBR-4B"), ("Hybrid-2x2G", "MBR-2x2G")] {
        assert_eq!(count_params(&scaled(a), CountScope::Audit), count_params(&scaled(b), CountScope::Audit));
    }
}

fn stage_conv_params(groups: usize) -> usize {
    let mut store = ParamStore::new();
    let cfg = BottleneckConfig { in_channels: 64, mid_channels: 32, out_channels: 128, stride: 1, groups, ibn: false, attention: None };
    let stage = Stage::new(&mut store, &Scope::new("s", ParamGroup::Branch(0)), cfg, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut layers = Vec::new();
    stage.describe("s", ParamGroup::Branch(0), (8, 8), &mut layers).unwrap();
    layers
        .iter()
        .map(|r| match &r.kind {
            LayerKind::Conv(c) => c.param_count(),
            _ => 0,
        })
        .sum()
}

#[test]
fn grouped_stage_divides_conv_params_by_g() {
    let dense = stage_conv_params(1);
    for g in [2, 4, 8] {
        assert_eq!(stage_conv_params(g) * g, dense, "G={g}");
    }
}

#[test]
fn doubling_input_width_quadruples_stage_one_macs() {
    let stage1 = |size: usize| {
        let mut spec = preset("R50", None, None).unwrap().scaled(8, size).unwrap();
        spec.backbone = BackboneKind::ResNet50;
        let layers = Model::new(spec, 0).unwrap().layers().unwrap();
        let s1: Vec<LayerRecord> = layers.into_iter().filter(|r| r.name.starts_with("layer1.")).collect();
        estimate_flops(&s1).unwrap()
    };
    assert_eq!(stage1(128), 4 * stage1(64));
}

#[test]
fn unknown_layers_are_rejected_by_name() {
    let r = LayerRecord::new("branches.0.mystery", ParamGroup::Branch(0), LayerKind::Other("deformable conv".into()), (4, 4));
    match estimate_flops(std::slice::from_ref(&r)) {
        Err(Error::UnsupportedLayer(msg)) => assert!(msg.contains("branches.0.mystery")),
        other => panic!("{other:?}"),
    }
    assert!(analytic_params(&[r], CountScope::Full).is_err());
}

#[test]
fn conv_and_linear_mac_rules() {
    let conv = LayerRecord::new("c", ParamGroup::Trunk, LayerKind::Conv(ConvConfig::new(4, 6, 3, 2, 1).groups(2)), (8, 8));
    assert_eq!(layer_macs(&conv).unwrap(), 16 * 6 * 2 * 9);
    let lin = LayerRecord::new("l", ParamGroup::Head(0), LayerKind::Linear { in_features: 5, out_features: 3 }, (1, 1));
    assert_eq!(layer_macs(&lin).unwrap(), 15);
}

#[test]
fn mislabeled_grouping_fails_the_params_row() {
    let model = build_for_audit("R50-2G").unwrap();
    let own = audit_model(&model, &expected_for("R50-2G").unwrap()).unwrap();
    assert!(own.params_pass && own.enumeration_pass, "{own:?}");
    let wrong = audit_model(&model, &expected_for("R50-4G").unwrap()).unwrap();
    assert!(!wrong.params_pass && !wrong.pass);
}

#[test]
fn report_renders_every_row() {
    let report = audit_all(&["R50".to_string(), "BoT".to_string()], false).unwrap();
    assert_eq!(report.rows.len(), 2);
    let text = report.to_table();
    assert!(text.contains("R50") && text.contains("BoT") && text.contains("overall"));
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert!(audit_all(&["nope".to_string()], false).is_err());
}
