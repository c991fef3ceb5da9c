//! Analytic MAC and parameter accounting.
//!
//! Conventions, matching the graph's own MAC counter:
//! matmul `m·k·n`, convolution `C_out·C_in·k²·H'·W'`, depthwise
//! convolution `C·k²·H'·W'`, one scan step `N² + 2N`, a matrix exponential
//! `EXPM_MAC_FACTOR·N³`. Normalization, activations, biases, reshapes and
//! the channel count zero MACs.

use std::fmt::Write as _;

use mambajscc_core::codec::{CsiMode, ModelConfig};
use mambajscc_core::graph::{scan_macs, EXPM_MAC_FACTOR};
use mambajscc_core::ssm::AbarRule;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Linear,
    Norm,
    /// Projections producing `Δ`, `B`, `C` from the sequence.
    ScanProjection,
    /// `Ā`, `B̄` from `Δ`, `A`, `B`.
    Discretize,
    /// The recurrence itself.
    ScanCore,
    Csi,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub kind: LayerKind,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CountReport {
    pub layers: Vec<LayerCount>,
}

impl CountReport {
    fn push(&mut self, name: impl Into<String>, kind: LayerKind, macs: usize, params: usize) {
        self.layers.push(LayerCount {
            name: name.into(),
            kind,
            macs: macs as u64,
            params: params as u64,
        });
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn macs_of(&self, kind: LayerKind) -> u64 {
        self.layers.iter().filter(|l| l.kind == kind).map(|l| l.macs).sum()
    }

    pub fn params_of(&self, kind: LayerKind) -> u64 {
        self.layers.iter().filter(|l| l.kind == kind).map(|l| l.params).sum()
    }

    /// Tab-separated `name kind macs params`, then a totals line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("layer\tkind\tmacs\tparams\n");
        for l in &self.layers {
            let _ = writeln!(out, "{}\t{:?}\t{}\t{}", l.name, l.kind, l.macs, l.params);
        }
        let _ = writeln!(out, "total\t-\t{}\t{}", self.total_macs(), self.total_params());
        out
    }
}

/// Per-direction costs `(projection, discretization)` of one V-S6 scan.
fn direction_macs(n: usize, d: usize, rule: AbarRule) -> (usize, usize) {
    // H1·v, H2·v, H3·v and the rank-one (H1·v)·G
    let proj = 3 * n * d + n * n;
    // Δ·A and Δ·B, plus the matrix exponential
    let mut disc = n * n * n + n * n;
    if rule == AbarRule::MatrixExp {
        disc += EXPM_MAC_FACTOR as usize * n * n * n;
    }
    (proj, disc)
}

fn count_block(r: &mut CountReport, cfg: &ModelConfig, name: &str, c: usize, h: usize, w: usize) {
    let s = cfg.ssm;
    let cz = s.expand * c;
    let (n, d, k) = (s.state_dim, h * w, s.conv_kernel);
    let hw = h * w;
    r.push(format!("{name}.norm"), LayerKind::Norm, 0, 2 * c);
    r.push(format!("{name}.in_proj"), LayerKind::Linear, cz * c * hw, cz * c + cz);
    r.push(format!("{name}.dwconv"), LayerKind::Conv, cz * k * k * hw, cz * k * k + cz);
    let scans = cz * 4;
    let (proj, disc) = direction_macs(n, d, s.abar_rule);
    r.push(
        format!("{name}.vs6.proj"),
        LayerKind::ScanProjection,
        scans * proj,
        scans * (n + n * n + 3 * n * d),
    );
    r.push(format!("{name}.vs6.discretize"), LayerKind::Discretize, scans * disc, scans * n * n);
    r.push(
        format!("{name}.vs6.scan"),
        LayerKind::ScanCore,
        scans * scan_macs(d, n) as usize,
        scans,
    );
    r.push(format!("{name}.gate_proj"), LayerKind::Linear, cz * c * hw, cz * c + cz);
    r.push(format!("{name}.out_proj"), LayerKind::Linear, c * cz * hw, c * cz + c);
    if cfg.csi_mode == CsiMode::Embed {
        let m = cfg.csi_len;
        r.push(format!("{name}.csi"), LayerKind::Csi, cz * m, cz * m + cz);
    }
}

fn count_csi_encoder(r: &mut CountReport, cfg: &ModelConfig, name: &str) {
    if cfg.csi_mode == CsiMode::Embed {
        let m = cfg.csi_len;
        let d_pe = m;
        r.push(format!("{name}.fc1"), LayerKind::Csi, m * d_pe, m * d_pe + m);
        r.push(format!("{name}.fc2"), LayerKind::Csi, m * m, m * m + m);
    }
}

/// Counts every layer of the model `cfg` describes, in forward order.
pub fn count_macs_params(cfg: &ModelConfig) -> Result<CountReport> {
    cfg.validate()?;
    let mut r = CountReport::default();
    let stages = cfg.stages();
    let c_sym = cfg.complex_channels()?;
    let last = *stages.last().expect("validated");

    count_csi_encoder(&mut r, cfg, "enc.csi");
    let k = cfg.embed_kernel;
    let c1 = stages[0].channels;
    r.push(
        "enc.embed",
        LayerKind::Conv,
        c1 * 3 * k * k * stages[0].height * stages[0].width,
        c1 * 3 * k * k + c1,
    );
    for (i, st) in stages.iter().enumerate() {
        let hw = st.height * st.width;
        if i > 0 {
            let c_in = 4 * stages[i - 1].channels;
            r.push(format!("enc.s{i}.merge"), LayerKind::Linear, st.channels * c_in * hw, st.channels * c_in);
        }
        for j in 0..st.blocks {
            count_block(&mut r, cfg, &format!("enc.s{i}.b{j}"), st.channels, st.height, st.width);
        }
    }
    let hw = last.height * last.width;
    let c2 = 2 * c_sym;
    r.push("enc.compress", LayerKind::Conv, c2 * last.channels * hw, c2 * last.channels + c2);

    count_csi_encoder(&mut r, cfg, "dec.csi");
    r.push("dec.expand", LayerKind::Conv, last.channels * c2 * hw, last.channels * c2 + last.channels);
    for i in (0..stages.len()).rev() {
        let st = stages[i];
        for j in 0..st.blocks {
            count_block(&mut r, cfg, &format!("dec.s{i}.b{j}"), st.channels, st.height, st.width);
        }
        let c_out = 4 * if i == 0 { 3 } else { stages[i - 1].channels };
        let hw = st.height * st.width;
        r.push(format!("dec.s{i}.divide.norm"), LayerKind::Norm, 0, 2 * st.channels);
        r.push(
            format!("dec.s{i}.divide"),
            LayerKind::Linear,
            c_out * st.channels * hw,
            c_out * st.channels + c_out,
        );
    }
    Ok(r)
}

/// Closed-form parameter count of the CSI path: per codec half
/// `m·d_pe + m² + Σ_blocks m·c_z`, plus all biases.
pub fn csi_overhead_formula(cfg: &ModelConfig) -> u64 {
    if cfg.csi_mode == CsiMode::Off {
        return 0;
    }
    let m = cfg.csi_len as u64;
    let d_pe = m;
    let encoder = m * d_pe + m * m + 2 * m;
    let blocks: u64 = cfg
        .stages()
        .iter()
        .map(|st| st.blocks as u64 * (cfg.ssm.expand * st.channels) as u64 * (m + 1))
        .sum();
    2 * (encoder + blocks)
}

/// MACs of single-head self-attention over `tokens` of width `dim`
/// (scores plus weighted sum), the quadratic reference.
pub fn attention_macs(tokens: usize, dim: usize) -> u64 {
    2 * (tokens * tokens * dim) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_are_sums_of_parts() {
        let r = count_macs_params(&ModelConfig::desk()).unwrap();
        let macs: u64 = r.layers.iter().map(|l| l.macs).sum();
        assert_eq!(r.total_macs(), macs);
        assert!(r.to_table().ends_with(&format!("total\t-\t{}\t{}\n", macs, r.total_params())));
    }

    #[test]
    fn empty_report_is_zero() {
        let r = CountReport::default();
        assert_eq!((r.total_macs(), r.total_params()), (0, 0));
    }

    #[test]
    fn attention_reference_is_quadratic() {
        assert_eq!(attention_macs(512, 8), 4 * attention_macs(256, 8));
    }
}
