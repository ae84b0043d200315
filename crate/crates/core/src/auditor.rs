//! Parameter, MAC and dimension audits of the preset registry.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{preset, LaiSpec, LayerKind, LayerRecord, Model, PRESETS};
use crate::nn::ParamGroup;

pub const PARAMS_TOLERANCE: f64 = 0.02;
pub const FLOPS_TOLERANCE: f64 = 0.05;

/// Camera and view counts of the Veri-776 side-embedding configuration.
pub const VERI776_LAI: LaiSpec = LaiSpec { n_cam: 20, n_view: 8 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountScope {
    /// Shared stages and branches only: no classification heads, no side embeddings.
    Audit,
    Full,
}

impl CountScope {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            CountScope::Audit => matches!(group, ParamGroup::Trunk | ParamGroup::Branch(_)),
            CountScope::Full => true,
        }
    }
}

/// Expected sizes of one preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub preset: String,
    /// Which published ablation table the row comes from.
    pub source: String,
    pub params_m: f64,
    pub flops_g: f64,
    pub dim_slice: usize,
    pub dim_fg: usize,
}

pub fn expected_table() -> Vec<Expected> {
    serde_json::from_str(include_str!("auditor/expected.json")).expect("embedded audit table is valid JSON")
}

pub fn expected_for(name: &str) -> Result<Expected> {
    expected_table().into_iter().find(|e| e.preset == name).ok_or_else(|| Error::UnknownPreset {
        name: name.to_string(),
        valid: PRESETS.iter().map(|s| s.to_string()).collect(),
    })
}

fn layer_params(r: &LayerRecord) -> Result<usize> {
    Ok(match &r.kind {
        LayerKind::Conv(c) => c.param_count(),
        LayerKind::BatchNorm { channels } | LayerKind::InstanceNorm { channels } => 2 * channels,
        LayerKind::Attention(a) => a.param_count(),
        LayerKind::Linear { in_features, out_features } => in_features * out_features,
        LayerKind::SideEmbedding { numel } => *numel,
        LayerKind::MaxPool { .. } | LayerKind::GlobalAvgPool { .. } => 0,
        LayerKind::Other(name) => return Err(Error::UnsupportedLayer(format!("{}: {name}", r.name))),
    })
}

/// Learnable parameters derived from the layer description alone.
pub fn analytic_params(layers: &[LayerRecord], scope: CountScope) -> Result<usize> {
    layers.iter().filter(|r| scope.includes(r.group)).map(layer_params).sum()
}

/// Learnable parameters found by enumerating the weight store.
pub fn count_params(model: &Model, scope: CountScope) -> usize {
    model.store.count_params(|g| scope.includes(g))
}

/// Multiply-accumulates of one layer for a single image. Normalization,
/// pooling, activations and side-embedding additions count as zero.
pub fn layer_macs(r: &LayerRecord) -> Result<u64> {
    Ok(match &r.kind {
        LayerKind::Conv(c) => c.macs(r.in_hw.0, r.in_hw.1)?,
        LayerKind::Attention(a) => a.macs(),
        LayerKind::Linear { in_features, out_features } => (in_features * out_features) as u64,
        LayerKind::BatchNorm { .. }
        | LayerKind::InstanceNorm { .. }
        | LayerKind::MaxPool { .. }
        | LayerKind::GlobalAvgPool { .. }
        | LayerKind::SideEmbedding { .. } => 0,
        LayerKind::Other(name) => return Err(Error::UnsupportedLayer(format!("{}: {name}", r.name))),
    })
}

/// MACs per image over the given layers.
pub fn estimate_flops(layers: &[LayerRecord]) -> Result<u64> {
    layers.iter().map(layer_macs).sum()
}

fn deviation(measured: f64, expected: f64) -> f64 {
    (measured - expected).abs() / expected
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub preset: String,
    pub source: String,
    pub measured_params: usize,
    pub analytic_params: usize,
    pub expected_params_m: f64,
    pub params_deviation: f64,
    pub params_pass: bool,
    pub measured_macs: u64,
    pub expected_flops_g: f64,
    pub flops_deviation: f64,
    pub flops_pass: bool,
    pub dim_slice: usize,
    pub expected_dim_slice: usize,
    pub dim_fg: usize,
    pub expected_dim_fg: usize,
    pub dims_pass: bool,
    /// Analytic and enumerated counts agree exactly.
    pub enumeration_pass: bool,
    pub pass: bool,
}

/// Audits a built (headless) model against one expected row.
pub fn audit_model(model: &Model, expected: &Expected) -> Result<AuditRow> {
    let layers = model.layers()?;
    let measured_params = count_params(model, CountScope::Audit);
    let analytic = analytic_params(&layers, CountScope::Audit)?;
    let audit_layers: Vec<LayerRecord> = layers.into_iter().filter(|r| CountScope::Audit.includes(r.group)).collect();
    let macs = estimate_flops(&audit_layers)?;
    let params_deviation = deviation(measured_params as f64, expected.params_m * 1e6);
    let flops_deviation = deviation(macs as f64, expected.flops_g * 1e9);
    let (dim_slice, dim_fg) = (model.spec.input_slice_dim(), model.spec.global_dim());
    let params_pass = params_deviation <= PARAMS_TOLERANCE;
    let flops_pass = flops_deviation <= FLOPS_TOLERANCE;
    let dims_pass = dim_slice == expected.dim_slice && dim_fg == expected.dim_fg;
    let enumeration_pass = analytic == measured_params;
    Ok(AuditRow {
        preset: expected.preset.clone(),
        source: expected.source.clone(),
        measured_params,
        analytic_params: analytic,
        expected_params_m: expected.params_m,
        params_deviation,
        params_pass,
        measured_macs: macs,
        expected_flops_g: expected.flops_g,
        flops_deviation,
        flops_pass,
        dim_slice,
        expected_dim_slice: expected.dim_slice,
        dim_fg,
        expected_dim_fg: expected.dim_fg,
        dims_pass,
        enumeration_pass,
        pass: params_pass && flops_pass && dims_pass && enumeration_pass,
    })
}

/// Builds a preset at full size (256 input, stride-1 last stage, no heads).
pub fn build_for_audit(name: &str) -> Result<Model> {
    Model::new(preset(name, None, None)?, 0)
}

pub fn audit_preset(name: &str) -> Result<AuditRow> {
    let expected = expected_for(name)?;
    audit_model(&build_for_audit(name)?, &expected)
}

/// Side-embedding size claim: extra parameters per 2048-d unit embedding
/// under the Veri-776 camera/view configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaiClaim {
    pub preset: String,
    pub units: usize,
    pub full_minus_audit_params: usize,
    pub per_unit: usize,
    pub expected_per_unit: usize,
    pub pass: bool,
}

pub const LAI_EXPECTED_PER_UNIT: usize = 327_680;

pub fn audit_lai(name: &str) -> Result<LaiClaim> {
    let base = name.strip_suffix("-LAI").unwrap_or(name);
    let model = Model::new(preset(&format!("{base}-LAI"), Some(VERI776_LAI), None)?, 0)?;
    let extra = count_params(&model, CountScope::Full) - count_params(&model, CountScope::Audit);
    let units = model.units().len();
    let dims: Vec<usize> = model.units().iter().map(|u| u.dim).collect();
    let per_unit = extra / units;
    let uniform = dims.iter().all(|&d| d == dims[0]);
    Ok(LaiClaim {
        preset: format!("{base}-LAI"),
        units,
        full_minus_audit_params: extra,
        per_unit,
        expected_per_unit: LAI_EXPECTED_PER_UNIT,
        pass: uniform && per_unit * units == extra && per_unit == LAI_EXPECTED_PER_UNIT,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub params_tolerance: f64,
    pub flops_tolerance: f64,
    pub rows: Vec<AuditRow>,
    pub lai: Option<LaiClaim>,
    pub pass: bool,
}

/// Audits the named presets (`"all"` expands to the whole registry) and,
/// when `lai` is set, the side-embedding size claim on a four-branch model.
pub fn audit_all(names: &[String], lai: bool) -> Result<AuditReport> {
    let names: Vec<String> = if names.iter().any(|n| n == "all") || names.is_empty() {
        PRESETS.iter().map(|s| s.to_string()).collect()
    } else {
        names.to_vec()
    };
    let mut rows = Vec::with_capacity(names.len());
    for n in &names {
        rows.push(audit_preset(n)?);
        log::info!("audited {n}");
    }
    let lai = if lai { Some(audit_lai("MBR-4B")?) } else { None };
    let pass = rows.iter().all(|r| r.pass) && lai.as_ref().map_or(true, |l| l.pass);
    Ok(AuditReport { params_tolerance: PARAMS_TOLERANCE, flops_tolerance: FLOPS_TOLERANCE, rows, lai, pass })
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

impl AuditReport {
    /// Fixed-width text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>9} {:>7} {:<4} {:>8} {:>8} {:>7} {:<4} {:>6} {:>6} {:<4}",
            "preset", "params", "expected", "dev", "", "GMACs", "expected", "dev", "", "slice", "f_g", ""
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>8.2}M {:>8.2}M {:>6.2}% {:<4} {:>8.2} {:>8.2} {:>6.2}% {:<4} {:>6} {:>6} {:<4}",
                r.preset,
                r.measured_params as f64 / 1e6,
                r.expected_params_m,
                100.0 * r.params_deviation,
                mark(r.params_pass && r.enumeration_pass),
                r.measured_macs as f64 / 1e9,
                r.expected_flops_g,
                100.0 * r.flops_deviation,
                mark(r.flops_pass),
                r.dim_slice,
                r.dim_fg,
                mark(r.dims_pass),
            );
        }
        if let Some(l) = &self.lai {
            let _ = writeln!(
                s,
                "side embeddings ({}): {} extra parameters over {} units = {} per unit (expected {}) {}",
                l.preset,
                l.full_minus_audit_params,
                l.units,
                l.per_unit,
                l.expected_per_unit,
                mark(l.pass)
            );
        }
        let _ = writeln!(s, "overall: {}", if self.pass { "PASS" } else { "FAIL" });
        s
    }
}

#[cfg(test)]
mod tests;
