use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{check_input_size, conv_layers, ConvLayer, FusionMode, Model, ModelConfig, Section};
use crate::rng::{self, streams};
use crate::tensor::{conv_out_extent, Shape, Tensor};

/// Learnable element counts, total and per section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    pub by_section: Vec<(Section, usize)>,
}

impl ParamReport {
    pub fn section(&self, s: Section) -> usize {
        self.by_section.iter().find(|(k, _)| *k == s).map_or(0, |(_, v)| *v)
    }
}

pub fn count_params(model: &Model) -> ParamReport {
    let by_section: Vec<(Section, usize)> = Section::ALL
        .iter()
        .map(|&s| {
            let prefix = format!("{}.", s.name());
            let n = model
                .params()
                .iter()
                .filter(|(name, _)| name.starts_with(&prefix))
                .map(|(_, t)| t.numel())
                .sum();
            (s, n)
        })
        .collect();
    ParamReport {
        total: model.param_count(),
        by_section,
    }
}

/// Multiply-accumulates count as 2 FLOPs.
pub fn conv_flops(h_out: usize, w_out: usize, c_in: usize, c_out: usize, kernel: usize, groups: usize, bias: bool) -> u64 {
    let hw = (h_out * w_out) as u64;
    let macs = hw * c_out as u64 * (kernel * kernel * c_in / groups) as u64;
    2 * macs + if bias { hw * c_out as u64 } else { 0 }
}

pub const INTERP_FLOPS_PER_OUTPUT: u64 = 8;

/// FLOPs of one forward pass, itemised by stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub input_size: (usize, usize),
    pub total: u64,
    /// `(stage, flops)` in forward order: stem, encoder.0-3, fusion, head.
    pub by_stage: Vec<(String, u64)>,
}

impl FlopReport {
    pub fn stage(&self, name: &str) -> u64 {
        self.by_stage.iter().find(|(k, _)| k == name).map_or(0, |(_, v)| *v)
    }
}

struct Counter {
    stages: Vec<(String, u64)>,
}

impl Counter {
    fn add(&mut self, stage: &str, flops: u64) {
        match self.stages.iter_mut().find(|(k, _)| k == stage) {
            Some((_, v)) => *v += flops,
            None => self.stages.push((stage.to_string(), flops)),
        }
    }

    /// Conv on an (h, w) input; returns the output extent.
    fn conv(&mut self, stage: &str, l: &ConvLayer, (h, w): (usize, usize)) -> (usize, usize) {
        let ho = conv_out_extent(h, l.kernel, l.stride, l.padding);
        let wo = conv_out_extent(w, l.kernel, l.stride, l.padding);
        self.add(stage, conv_flops(ho, wo, l.c_in, l.c_out, l.kernel, l.groups, true));
        (ho, wo)
    }

    fn resize(&mut self, stage: &str, from: (usize, usize), to: (usize, usize), c: usize) {
        if from != to {
            self.add(stage, INTERP_FLOPS_PER_OUTPUT * (to.0 * to.1 * c) as u64);
        }
    }
}

/// Symbolic FLOP count for one sample of size `(h, w)`, following the
/// forward pass op by op: convolutions by the MAC rule, elementwise and
/// pooling ops at 1 per output element, bilinear resizes at 8, concatenation
/// free.
pub fn count_flops(cfg: &ModelConfig, (h, w): (usize, usize)) -> Result<FlopReport> {
    cfg.validate()?;
    check_input_size(h, w)?;
    let layers = conv_layers(cfg);
    let find = |name: &str| {
        layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Config(format!("layer `{name}` missing from config")))
    };
    let mut c = Counter { stages: Vec::new() };

    // shift and scale of both 3-channel inputs
    c.add("stem", 2 * 2 * (3 * h * w) as u64);
    let half = c.conv("stem", find("stem.pre")?, (h, w));
    c.conv("stem", find("stem.post")?, (h, w));
    for name in ["stem.dw1", "stem.pw", "stem.dw2"] {
        c.conv("stem", find(name)?, half);
    }

    let mut size = half;
    let mut sizes = [(0, 0); 4];
    for (i, slot) in sizes.iter_mut().enumerate() {
        let stage = format!("encoder.{i}");
        let ch = cfg.encoder_widths[i];
        size = c.conv(&stage, find(&format!("encoder.{i}.down"))?, size);
        let elems = (size.0 * size.1 * ch) as u64;
        for j in 0..cfg.encoder_depths[i] {
            c.conv(&stage, find(&format!("encoder.{i}.block{j}.conv1"))?, size);
            c.add(&stage, elems);
            c.conv(&stage, find(&format!("encoder.{i}.block{j}.conv2"))?, size);
            c.add(&stage, 2 * elems);
        }
        *slot = size;
    }

    let [c1, c2, c3, _] = cfg.encoder_widths;
    let s1 = sizes[0];
    let n = (s1.0 * s1.1) as u64;
    for (i, &ch) in cfg.encoder_widths.iter().enumerate().skip(1) {
        c.resize("fusion", sizes[i], s1, ch);
    }
    match cfg.fusion_mode {
        FusionMode::Emff => {
            let (c1, c2, c3) = (c1 as u64, c2 as u64, c3 as u64);
            // s4 pooling, gate mean, tanh, gating product, residual add
            c.add("fusion", n * c3 + n + n + n * c3 + n * c3);
            // pooling to C_2, add, max pooling to C_1, add
            c.add("fusion", n * c2 + n * c2 + n * c1 + n * c1);
        }
        FusionMode::Naive => {
            c.conv("fusion", find("fusion.proj")?, s1);
        }
    }
    // channel mean of the fused map feeding the deep-supervision branch
    c.add("fusion", n);

    c.conv("head", find("head.conv1")?, s1);
    c.add("head", n * cfg.head_hidden as u64);
    c.conv("head", find("head.conv2")?, s1);
    c.resize("head", s1, (h, w), 2);
    let full = (h * w) as u64;
    // softmax over 2 classes, then the upsampled sigmoid map
    c.add("head", 2 * full);
    c.resize("head", s1, (h, w), 1);
    c.add("head", full);

    let total = c.stages.iter().map(|(_, v)| v).sum();
    Ok(FlopReport {
        input_size: (h, w),
        total,
        by_stage: c.stages,
    })
}

/// Host description recorded alongside timings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Environment {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
    pub optimized: bool,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            optimized: !cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
    pub warmups: usize,
    pub input_size: (usize, usize),
    pub environment: Environment,
}

impl LatencyReport {
    /// Fewer than five timed runs.
    pub fn low_confidence(&self) -> bool {
        self.samples_ms.len() < 5
    }
}

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Median wall-clock time of a single-sample forward pass.
pub fn measure_latency(model: &Model, (h, w): (usize, usize), warmups: usize, runs: usize) -> Result<LatencyReport> {
    if runs == 0 {
        return Err(Error::Usage("latency needs at least one timed run".into()));
    }
    check_input_size(h, w)?;
    let mut r = rng::stream(0, streams::LATENCY_INPUT);
    let shape = Shape::new(1, 3, h, w);
    let pre = Tensor::from_fn(shape, |_| r.random_range(0.0..1.0));
    let post = Tensor::from_fn(shape, |_| r.random_range(0.0..1.0));
    for _ in 0..warmups {
        model.predict(&pre, &post)?;
    }
    let mut samples_ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        model.predict(&pre, &post)?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyReport {
        median_ms: median(&samples_ms),
        samples_ms,
        warmups,
        input_size: (h, w),
        environment: Environment::current(),
    })
}

/// Parameters, FLOPs and optionally latency for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub params: ParamReport,
    pub flops: FlopReport,
    pub latency: Option<LatencyReport>,
}

impl ComplexityReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let (h, w) = self.flops.input_size;
        s.push_str(&format!("{:<12} {:>14}\n", "section", "params"));
        for (sec, n) in &self.params.by_section {
            s.push_str(&format!("{:<12} {:>14}\n", sec.name(), n));
        }
        s.push_str(&format!("{:<12} {:>14}\n\n", "total", self.params.total));
        s.push_str(&format!("{:<12} {:>14}   (at {h}x{w}, 1 MAC = 2 FLOPs)\n", "stage", "flops"));
        for (stage, n) in &self.flops.by_stage {
            s.push_str(&format!("{stage:<12} {n:>14}\n"));
        }
        s.push_str(&format!("{:<12} {:>14}\n", "total", self.flops.total));
        if let Some(l) = &self.latency {
            let e = &l.environment;
            s.push_str(&format!(
                "\nlatency median {:.3} ms over {} runs after {} warmups ({} {}, {} cpus, optimized={}){}\n",
                l.median_ms,
                l.samples_ms.len(),
                l.warmups,
                e.os,
                e.arch,
                e.cpus,
                e.optimized,
                if l.low_confidence() { " [low confidence]" } else { "" }
            ));
        }
        s
    }

    pub fn to_records(&self) -> Vec<String> {
        let (h, w) = self.flops.input_size;
        let mut out = vec![format!("params={}", self.params.total)];
        for (sec, n) in &self.params.by_section {
            out.push(format!("params.{}={n}", sec.name()));
        }
        out.push(format!("flops={} input={h}x{w} flops_per_mac=2", self.flops.total));
        for (stage, n) in &self.flops.by_stage {
            out.push(format!("flops.{stage}={n}"));
        }
        if let Some(l) = &self.latency {
            out.push(format!(
                "latency_ms={} runs={} warmups={} low_confidence={} os={} arch={} cpus={} optimized={}",
                l.median_ms,
                l.samples_ms.len(),
                l.warmups,
                l.low_confidence(),
                l.environment.os,
                l.environment.arch,
                l.environment.cpus,
                l.environment.optimized
            ));
        }
        out
    }
}

pub fn complexity_report(model: &Model, input_size: (usize, usize)) -> Result<ComplexityReport> {
    Ok(ComplexityReport {
        params: count_params(model),
        flops: count_flops(model.config(), input_size)?,
        latency: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_closed_forms() {
        assert_eq!(conv_flops(8, 8, 16, 2, 1, 1, true), 4224);
        assert_eq!(16 * 32 * 9 + 32, 4640);
    }

    #[test]
    fn fusion_params_by_mode() {
        let emff = count_params(&Model::new(ModelConfig::tiny(), 0).unwrap());
        let naive = count_params(&Model::new(ModelConfig::tiny().with_fusion(FusionMode::Naive), 0).unwrap());
        assert_eq!(emff.section(Section::Fusion), 0);
        assert_eq!(naive.section(Section::Fusion), 34_704);
        assert!(emff.total < naive.total);
        assert_eq!(emff.by_section.iter().map(|(_, n)| n).sum::<usize>(), emff.total);
    }

    #[test]
    fn flops_grow_with_input_and_naive_costs_more() {
        let cfg = ModelConfig::tiny();
        let a = count_flops(&cfg, (64, 64)).unwrap();
        let b = count_flops(&cfg, (128, 128)).unwrap();
        assert!(b.total > a.total);
        let naive = count_flops(&cfg.clone().with_fusion(FusionMode::Naive), (64, 64)).unwrap();
        assert!(naive.total > a.total);
        assert_eq!(a.by_stage.iter().map(|(_, v)| v).sum::<u64>(), a.total);
        assert!(matches!(count_flops(&cfg, (48, 64)), Err(Error::Config(_))));
    }

    #[test]
    fn median_properties() {
        assert_eq!(median(&[3.5]), 3.5);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[5.0, 1.0, 3.0]), median(&[3.0, 5.0, 1.0]));
    }

    #[test]
    fn single_run_latency() {
        let model = Model::new(ModelConfig::preset("micro").unwrap(), 0).unwrap();
        let l = measure_latency(&model, (32, 32), 0, 1).unwrap();
        assert_eq!(l.median_ms, l.samples_ms[0]);
        assert!(l.low_confidence());
    }
}
