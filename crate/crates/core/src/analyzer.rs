//! Analytical complexity accounting for the PMRN family.
//!
//! The descriptors are enumerated directly from a [`PmrnConfig`], without
//! building a model, so parameter totals can be cross-checked against a
//! materialized [`ParamStore`](crate::nn::ParamStore).
//!
//! Parameters per convolution are `ch_i·ch_o·fw·fh/gs + bs`. MACs are
//! `ch_i·ch_o·fw·fh/gs` per output pixel; every convolution runs at the LR
//! resolution, before the final pixel shuffle.

use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::{Attention, MultiScale, PmrnConfig};
use crate::error::{Error, Result};

/// Output resolution the complexity is evaluated for (720P by default).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Resolution {
    pub width: u64,
    pub height: u64,
}

impl Resolution {
    pub const HD720: Resolution = Resolution {
        width: 1280,
        height: 720,
    };

    pub fn parse(s: &str) -> Option<Resolution> {
        let (w, h) = s.split_once(['x', 'X'])?;
        let (width, height) = (w.trim().parse().ok()?, h.trim().parse().ok()?);
        (width > 0 && height > 0).then_some(Resolution { width, height })
    }

    /// Number of LR pixels the network processes to produce this output.
    ///
    /// Exact per-axis division when possible, otherwise total-pixel division
    /// when that is exact (1280x720 at ×3 gives 102,400), otherwise the
    /// per-axis floor.
    pub fn lr_pixels(&self, r: u64) -> u64 {
        let (w, h) = (self.width, self.height);
        if w % r == 0 && h % r == 0 {
            (w / r) * (h / r)
        } else if (w * h) % (r * r) == 0 {
            w * h / (r * r)
        } else {
            (w / r) * (h / r)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerDescriptor {
    pub name: String,
    pub ch_i: u64,
    pub ch_o: u64,
    pub fw: u64,
    pub fh: u64,
    pub gs: u64,
    pub bs: u64,
    /// Nominal LR output size (per-axis floor).
    pub w_out: u64,
    pub h_out: u64,
    /// Output pixels used for MACs.
    pub pixels: u64,
}

impl LayerDescriptor {
    pub fn weights(&self) -> u64 {
        self.ch_i * self.ch_o * self.fw * self.fh / self.gs
    }

    pub fn params(&self) -> u64 {
        self.weights() + self.bs
    }

    pub fn macs(&self) -> u64 {
        self.weights() * self.pixels
    }
}

/// A non-convolution operation counted only in
/// [`MacsMode::IncludeElementwise`]: one operation per element.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ElementwiseOp {
    pub name: String,
    pub elements: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MacsMode {
    /// Convolution multiply-accumulates only.
    #[default]
    ConvOnly,
    /// Adds bias additions, activations, residual additions and gating.
    IncludeElementwise,
}

struct Walker {
    out: Vec<LayerDescriptor>,
    w: u64,
    h: u64,
    pixels: u64,
}

impl Walker {
    fn conv(&mut self, name: String, ch_i: usize, ch_o: usize, k: usize, gs: usize) {
        self.out.push(LayerDescriptor {
            name,
            ch_i: ch_i as u64,
            ch_o: ch_o as u64,
            fw: k as u64,
            fh: k as u64,
            gs: gs as u64,
            bs: ch_o as u64,
            w_out: self.w,
            h_out: self.h,
            pixels: self.pixels,
        });
    }
}

/// One descriptor per convolution in forward order: fem, blocks, padding
/// structure, restoration module.
pub fn describe_model(cfg: &PmrnConfig, res: Resolution) -> Vec<LayerDescriptor> {
    let r = cfg.upscale as u64;
    let c = cfg.channels;
    let mut wk = Walker {
        out: Vec::new(),
        w: res.width / r,
        h: res.height / r,
        pixels: res.lr_pixels(r),
    };
    wk.conv("fem".into(), 3, c, 3, 1);
    for k in 1..=cfg.blocks {
        let p = format!("body.block{k}");
        for s in (3..=cfg.max_scale).step_by(2) {
            match cfg.multiscale {
                MultiScale::Combinations => {
                    for i in 1..=(s - 1) / 2 {
                        wk.conv(format!("{p}.comb{s}.conv{i}"), c, c, 3, 1);
                    }
                }
                MultiScale::LargeKernels => wk.conv(format!("{p}.large{s}"), c, c, s, 1),
            }
        }
        wk.conv(format!("{p}.fusion"), c * (cfg.max_scale - 1) / 2, c, 1, 1);
        if cfg.attention == Attention::Cpa {
            wk.conv(format!("{p}.cpa.st"), c, c, 3, 1);
            for path in ["beta", "gamma"] {
                wk.conv(format!("{p}.cpa.{path}.pconv"), c, c, 1, 1);
                wk.conv(format!("{p}.cpa.{path}.dconv"), c, c, 3, c);
            }
        }
    }
    wk.conv("pad.conv1".into(), c, c, 3, 1);
    wk.conv("pad.conv2".into(), c, c, 3, 1);
    wk.conv("rm.conv1".into(), c, c, 3, 1);
    wk.conv("rm.conv2".into(), c, 3 * cfg.upscale * cfg.upscale, 3, 1);
    wk.out
}

/// Elementwise work outside the convolutions' multiply-accumulates.
pub fn describe_elementwise(cfg: &PmrnConfig, res: Resolution) -> Vec<ElementwiseOp> {
    let px = res.lr_pixels(cfg.upscale as u64);
    let c = cfg.channels as u64;
    let fmap = c * px;
    let mut ops: Vec<ElementwiseOp> = describe_model(cfg, res)
        .into_iter()
        .map(|d| ElementwiseOp {
            name: format!("{}.bias", d.name),
            elements: d.ch_o * d.pixels,
        })
        .collect();
    let mut push = |name: String, elements: u64| ops.push(ElementwiseOp { name, elements });
    for k in 1..=cfg.blocks {
        let p = format!("body.block{k}");
        for s in (3..=cfg.max_scale).step_by(2) {
            if cfg.multiscale == MultiScale::Combinations {
                push(format!("{p}.comb{s}.relu"), (s as u64 - 3) / 2 * fmap);
            }
            if s > 3 {
                push(format!("{p}.residual{s}"), fmap);
            }
        }
        if cfg.attention == Attention::Cpa {
            push(format!("{p}.cpa.relu"), 2 * fmap);
            push(format!("{p}.cpa.sigmoid"), fmap);
            push(format!("{p}.cpa.gate"), 2 * fmap);
        }
        push(format!("{p}.lrl"), fmap);
    }
    push("pad.relu".into(), fmap);
    push("global_residual".into(), fmap);
    ops.retain(|o| o.elements > 0);
    ops
}

pub fn count_params(descriptors: &[LayerDescriptor]) -> u64 {
    descriptors.iter().map(LayerDescriptor::params).sum()
}

pub fn count_macs(descriptors: &[LayerDescriptor]) -> u64 {
    descriptors.iter().map(LayerDescriptor::macs).sum()
}

/// Receptive field of `Comb_s`: 3 for the base case, +2 per additional 3x3
/// convolution.
pub fn receptive_field(s: usize) -> Result<u64> {
    if s < 3 || s % 2 == 0 {
        return Err(Error::invalid(
            "receptive_field",
            format!("scale must be odd and at least 3, got {s}"),
        ));
    }
    let mut rf = 3;
    let mut scale = 3;
    while scale < s {
        rf += 2;
        scale += 2;
    }
    Ok(rf)
}

/// Receptive field of one scale branch under the config's multi-scale mode.
pub fn branch_receptive_field(cfg: &PmrnConfig, s: usize) -> Result<u64> {
    match cfg.multiscale {
        MultiScale::Combinations => receptive_field(s),
        MultiScale::LargeKernels if s >= 3 && s % 2 == 1 => Ok(s as u64),
        MultiScale::LargeKernels => receptive_field(s),
    }
}

/// Largest receptive field through one PMRB (stride-1 chain: sizes add
/// minus one).
pub fn block_receptive_field(cfg: &PmrnConfig) -> u64 {
    let branch = branch_receptive_field(cfg, cfg.max_scale).expect("validated scale");
    // fusion is 1x1; CPA path is st 3x3, p-conv 1x1, d-conv 3x3
    let attention = match cfg.attention {
        Attention::Cpa => 2 + 2,
        Attention::None => 0,
    };
    branch + attention
}

/// Receptive field of the whole network in LR pixels.
pub fn receptive_field_model(cfg: &PmrnConfig) -> u64 {
    let fem = 2;
    let blocks = cfg.blocks as u64 * (block_receptive_field(cfg) - 1);
    let pad = 2 + 2;
    let rm = 2 + 2;
    1 + fem + blocks + pad + rm
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerRow {
    #[serde(flatten)]
    pub layer: LayerDescriptor,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisReport {
    pub config: PmrnConfig,
    pub resolution: Resolution,
    pub lr_pixels: u64,
    pub macs_mode: MacsMode,
    pub layers: Vec<LayerRow>,
    pub elementwise: Vec<ElementwiseOp>,
    pub total_params: u64,
    pub total_macs: u64,
    /// Eight forward passes for the self-ensemble.
    pub ensemble_macs: u64,
    pub receptive_fields: Vec<(usize, u64)>,
    pub model_receptive_field: u64,
}

pub const ENSEMBLE_PASSES: u64 = 8;

pub fn analyze(cfg: &PmrnConfig, res: Resolution, mode: MacsMode) -> Result<AnalysisReport> {
    cfg.validate()?;
    let descriptors = describe_model(cfg, res);
    let total_params = count_params(&descriptors);
    let conv_macs = count_macs(&descriptors);
    let elementwise = match mode {
        MacsMode::ConvOnly => Vec::new(),
        MacsMode::IncludeElementwise => describe_elementwise(cfg, res),
    };
    let total_macs = conv_macs + elementwise.iter().map(|e| e.elements).sum::<u64>();
    let receptive_fields = cfg
        .scales()
        .map(|s| branch_receptive_field(cfg, s).map(|rf| (s, rf)))
        .collect::<Result<_>>()?;
    Ok(AnalysisReport {
        config: *cfg,
        resolution: res,
        lr_pixels: res.lr_pixels(cfg.upscale as u64),
        macs_mode: mode,
        layers: descriptors
            .into_iter()
            .map(|layer| LayerRow {
                params: layer.params(),
                macs: layer.macs(),
                layer,
            })
            .collect(),
        elementwise,
        total_params,
        total_macs,
        ensemble_macs: ENSEMBLE_PASSES * total_macs,
        receptive_fields,
        model_receptive_field: receptive_field_model(cfg),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantComparison {
    pub a: AnalysisReport,
    pub b: AnalysisReport,
    pub param_delta: i64,
    pub macs_delta: i64,
    /// Reduction of `a` relative to `b`, in percent.
    pub param_savings_pct: f64,
    pub macs_savings_pct: f64,
}

pub fn compare_variants(
    a: &PmrnConfig,
    b: &PmrnConfig,
    res: Resolution,
    mode: MacsMode,
) -> Result<VariantComparison> {
    let a = analyze(a, res, mode)?;
    let b = analyze(b, res, mode)?;
    let savings = |x: u64, y: u64| {
        if y == 0 {
            0.0
        } else {
            (y as f64 - x as f64) / y as f64 * 100.0
        }
    };
    Ok(VariantComparison {
        param_delta: b.total_params as i64 - a.total_params as i64,
        macs_delta: b.total_macs as i64 - a.total_macs as i64,
        param_savings_pct: savings(a.total_params, b.total_params),
        macs_savings_pct: savings(a.total_macs, b.total_macs),
        a,
        b,
    })
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Exact integer with thousands separators.
pub fn format_count(n: u64) -> String {
    group_thousands(n)
}

/// Parameters floored to thousands: `3,598,320` → `3,598K`.
pub fn format_params_k(n: u64) -> String {
    format!("{}K", group_thousands(n / 1000))
}

/// MACs in giga-operations rounded to one decimal: `206,773,862,400` → `206.8G`.
pub fn format_macs_g(n: u64) -> String {
    let tenths = (n + 50_000_000) / 100_000_000;
    format!("{}.{}G", group_thousands(tenths / 10), tenths % 10)
}

fn config_line(cfg: &PmrnConfig) -> String {
    format!(
        "S={} K={} c={} r={} attention={:?} multiscale={:?}",
        cfg.max_scale, cfg.blocks, cfg.channels, cfg.upscale, cfg.attention, cfg.multiscale
    )
}

/// Human-readable report.
pub fn render_table(report: &AnalysisReport, per_layer: bool) -> String {
    let mut s = String::new();
    let res = report.resolution;
    let _ = writeln!(s, "model       {}", config_line(&report.config));
    let _ = writeln!(
        s,
        "resolution  {}x{} output, {} LR pixels",
        res.width,
        res.height,
        format_count(report.lr_pixels)
    );
    let _ = writeln!(s, "macs mode   {:?}", report.macs_mode);
    if per_layer {
        let _ = writeln!(
            s,
            "\n{:<32} {:>5} {:>5} {:>3} {:>3} {:>3} {:>12} {:>18}",
            "layer", "ch_i", "ch_o", "fw", "fh", "gs", "params", "macs"
        );
        for row in &report.layers {
            let l = &row.layer;
            let _ = writeln!(
                s,
                "{:<32} {:>5} {:>5} {:>3} {:>3} {:>3} {:>12} {:>18}",
                l.name,
                l.ch_i,
                l.ch_o,
                l.fw,
                l.fh,
                l.gs,
                format_count(row.params),
                format_count(row.macs)
            );
        }
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "params      {} ({})",
        format_count(report.total_params),
        format_params_k(report.total_params)
    );
    let _ = writeln!(
        s,
        "macs        {} ({})",
        format_count(report.total_macs),
        format_macs_g(report.total_macs)
    );
    let _ = writeln!(
        s,
        "ensemble    {} ({}, {} passes)",
        format_count(report.ensemble_macs),
        format_macs_g(report.ensemble_macs),
        ENSEMBLE_PASSES
    );
    let rfs: Vec<String> = report
        .receptive_fields
        .iter()
        .map(|(scale, rf)| format!("s{scale}={rf}"))
        .collect();
    let _ = writeln!(s, "rf          {}", rfs.join(" "));
    let _ = writeln!(s, "model rf    {} LR pixels", report.model_receptive_field);
    s
}

pub fn render_comparison(cmp: &VariantComparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "A  {}", config_line(&cmp.a.config));
    let _ = writeln!(s, "B  {}", config_line(&cmp.b.config));
    let _ = writeln!(
        s,
        "params  A {} ({})  B {} ({})  saving {:.1}%",
        format_count(cmp.a.total_params),
        format_params_k(cmp.a.total_params),
        format_count(cmp.b.total_params),
        format_params_k(cmp.b.total_params),
        cmp.param_savings_pct
    );
    let _ = writeln!(
        s,
        "macs    A {} ({})  B {} ({})  saving {:.1}%",
        format_count(cmp.a.total_macs),
        format_macs_g(cmp.a.total_macs),
        format_count(cmp.b.total_macs),
        format_macs_g(cmp.b.total_macs),
        cmp.macs_savings_pct
    );
    s
}

/// One CSV record per layer: `name,ch_i,ch_o,fw,fh,gs,params,macs`.
pub fn render_csv(report: &AnalysisReport) -> String {
    let mut s = String::from("name,ch_i,ch_o,fw,fh,gs,params,macs\n");
    for row in &report.layers {
        let l = &row.layer;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            l.name, l.ch_i, l.ch_o, l.fw, l.fh, l.gs, row.params, row.macs
        );
    }
    for e in &report.elementwise {
        let _ = writeln!(s, "{},,,,,,0,{}", e.name, e.elements);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(ch_i: u64, ch_o: u64, k: u64, gs: u64, pixels: u64) -> LayerDescriptor {
        LayerDescriptor {
            name: "l".into(),
            ch_i,
            ch_o,
            fw: k,
            fh: k,
            gs,
            bs: ch_o,
            w_out: 0,
            h_out: 0,
            pixels,
        }
    }

    #[test]
    fn single_layer_counts() {
        assert_eq!(count_params(&[desc(64, 64, 3, 1, 1)]), 36_928);
        assert_eq!(count_params(&[desc(64, 64, 3, 64, 1)]), 640);
        assert_eq!(count_macs(&[desc(64, 64, 3, 1, 320 * 180)]), 2_123_366_400);
    }

    #[test]
    fn descriptor_count() {
        let cfg = PmrnConfig::default();
        assert_eq!(describe_model(&cfg, Resolution::HD720).len(), 133);
        let none = PmrnConfig {
            attention: Attention::None,
            ..cfg
        };
        assert_eq!(describe_model(&none, Resolution::HD720).len(), 133 - 5 * 8);
    }

    #[test]
    fn lr_pixel_convention() {
        assert_eq!(Resolution::HD720.lr_pixels(3), 102_400);
        assert_eq!(Resolution::HD720.lr_pixels(4), 57_600);
        assert_eq!(Resolution::HD720.lr_pixels(2), 230_400);
        let odd = Resolution { width: 10, height: 10 };
        assert_eq!(odd.lr_pixels(3), 9);
    }

    #[test]
    fn receptive_fields() {
        let rfs: Vec<u64> = [3, 5, 7, 9].iter().map(|&s| receptive_field(s).unwrap()).collect();
        assert_eq!(rfs, vec![3, 5, 7, 9]);
        assert!(receptive_field(4).is_err());
        assert!(receptive_field(1).is_err());
        let cfg = PmrnConfig::default();
        assert_eq!(block_receptive_field(&cfg), 13);
        let large = PmrnConfig {
            multiscale: MultiScale::LargeKernels,
            ..cfg
        };
        assert_eq!(branch_receptive_field(&large, 7).unwrap(), 7);
    }

    #[test]
    fn formatting() {
        assert_eq!(format_params_k(3_598_320), "3,598K");
        assert_eq!(format_params_k(6_020_080), "6,020K");
        assert_eq!(format_macs_g(206_773_862_400), "206.8G");
        assert_eq!(format_macs_g(8 * 207_200_000_000), "1,657.6G");
        assert_eq!(format_count(1_000), "1,000");
        assert_eq!(format_count(999), "999");
    }

    #[test]
    fn macs_scale_with_area() {
        let cfg = PmrnConfig::default();
        let small = count_macs(&describe_model(&cfg, Resolution { width: 640, height: 360 }));
        let big = count_macs(&describe_model(&cfg, Resolution { width: 1280, height: 720 }));
        assert_eq!(big, 4 * small);
    }

    #[test]
    fn elementwise_mode_adds_work() {
        let cfg = PmrnConfig::default();
        let conv = analyze(&cfg, Resolution::HD720, MacsMode::ConvOnly).unwrap();
        let all = analyze(&cfg, Resolution::HD720, MacsMode::IncludeElementwise).unwrap();
        assert!(all.total_macs > conv.total_macs);
        assert_eq!(all.total_params, conv.total_params);
    }

    #[test]
    fn identical_configs_have_zero_delta() {
        let cfg = PmrnConfig::default();
        let cmp = compare_variants(&cfg, &cfg, Resolution::HD720, MacsMode::ConvOnly).unwrap();
        assert_eq!(cmp.param_delta, 0);
        assert_eq!(cmp.macs_delta, 0);
        assert_eq!(cmp.param_savings_pct, 0.0);
    }

    #[test]
    fn csv_has_one_record_per_layer() {
        let report = analyze(&PmrnConfig::default(), Resolution::HD720, MacsMode::ConvOnly).unwrap();
        let csv = render_csv(&report);
        assert_eq!(csv.lines().count(), 1 + 133);
        assert!(csv.lines().nth(1).unwrap().starts_with("fem,3,64,3,3,1,1792,"));
    }
}
