//! Corpus-wide size, exactness and stability measurements.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::time::{Duration, Instant};

use flate2::write::DeflateEncoder;
use flate2::Compression;
use rayon::prelude::*;

use super::{make_delta, reconstruct};
use crate::deltadata::{pack, DeltaParams};
use crate::diversify::{build_default, build_diversified, SeedTuple};
use crate::progmodel::{function_size, LayoutError, LayoutOptions, ProgramModel, Schemes};
use crate::symfile::emit_symbol_file;

/// Scheme columns: padding, NOPs, shuffling in isolation, then combined.
pub const SCHEME_COLUMNS: [(&str, Schemes); 4] =
    [("A", Schemes::PADDING_ONLY), ("B", Schemes::NOPS_ONLY), ("C", Schemes::SHUFFLE_ONLY), ("D", Schemes::ALL)];

/// Number of padding amounts per function in the size histograms.
pub const HISTOGRAM_PADS: u32 = 32;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SchemeSizes {
    pub packed_total: u64,
    pub packed_max: u64,
    pub payload_total: u64,
    pub payload_max: u64,
    pub runs: u64,
}

impl SchemeSizes {
    fn add(&mut self, packed: u64, payload: u64) {
        self.packed_total += packed;
        self.packed_max = self.packed_max.max(packed);
        self.payload_total += payload;
        self.payload_max = self.payload_max.max(payload);
        self.runs += 1;
    }

    fn merge(&mut self, o: &SchemeSizes) {
        self.packed_total += o.packed_total;
        self.packed_max = self.packed_max.max(o.packed_max);
        self.payload_total += o.payload_total;
        self.payload_max = self.payload_max.max(o.payload_max);
        self.runs += o.runs;
    }

    pub fn packed_avg(&self) -> f64 {
        self.packed_total as f64 / self.runs.max(1) as f64
    }

    pub fn payload_avg(&self) -> f64 {
        self.payload_total as f64 / self.runs.max(1) as f64
    }
}

/// Function size change (bytes) against the default build, counted over
/// every function and padding amount.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Histogram {
    pub counts: BTreeMap<i64, u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn mass_at_zero(&self) -> f64 {
        self.counts.get(&0).copied().unwrap_or(0) as f64 / self.total().max(1) as f64
    }

    pub fn mean_abs(&self) -> f64 {
        let s: f64 = self.counts.iter().map(|(d, c)| d.unsigned_abs() as f64 * *c as f64).sum();
        s / self.total().max(1) as f64
    }

    fn merge(&mut self, o: &Histogram) {
        for (d, c) in &o.counts {
            *self.counts.entry(*d).or_default() += c;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProgramMetrics {
    pub name: String,
    pub functions: usize,
    pub default_symfile_bytes: u64,
    pub diversified_symfile_bytes_max: u64,
    pub opplog_compressed_bytes: u64,
    pub schemes: [SchemeSizes; 4],
    pub exact: u64,
    pub reconstructions: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub programs: Vec<ProgramMetrics>,
    pub schemes: [SchemeSizes; 4],
    /// Keyed by (default padding, sp_fp_opt).
    pub histograms: BTreeMap<(bool, bool), Histogram>,
    pub delta_time: Duration,
    pub reconstruct_time: Duration,
}

impl MetricsReport {
    pub fn exactness_rate(&self) -> f64 {
        let (e, n) = self.programs.iter().fold((0, 0), |(e, n), p| (e + p.exact, n + p.reconstructions));
        e as f64 / n.max(1) as f64
    }

    pub fn render(&self, include_timings: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "program functions default_sym div_sym_max opplog_z A_avg A_max B_avg B_max C_avg C_max D_avg D_max exact"
        );
        for p in &self.programs {
            let _ = write!(
                out,
                "{} {} {} {} {}",
                p.name,
                p.functions,
                p.default_symfile_bytes,
                p.diversified_symfile_bytes_max,
                p.opplog_compressed_bytes
            );
            for s in &p.schemes {
                let _ = write!(out, " {:.1} {}", s.packed_avg(), s.packed_max);
            }
            let _ = writeln!(out, " {}/{}", p.exact, p.reconstructions);
        }
        let _ = writeln!(out);
        for ((label, _), s) in SCHEME_COLUMNS.iter().zip(&self.schemes) {
            let _ = writeln!(
                out,
                "scheme {label}: packed avg {:.1} max {}, patch payload avg {:.1} max {}",
                s.packed_avg(),
                s.packed_max,
                s.payload_avg(),
                s.payload_max
            );
        }
        let _ = writeln!(out, "exactness {:.4}", self.exactness_rate());
        for ((dp, sfo), h) in &self.histograms {
            let _ = writeln!(
                out,
                "histogram default_padding={} sp_fp_opt={}: n={} zero={:.4} mean_abs={:.3}",
                u8::from(*dp),
                u8::from(*sfo),
                h.total(),
                h.mass_at_zero(),
                h.mean_abs()
            );
            let line: Vec<String> = h.counts.iter().map(|(d, c)| format!("{d}:{c}")).collect();
            let _ = writeln!(out, "  {}", line.join(" "));
        }
        if include_timings {
            let _ = writeln!(out, "delta generation {:.3}s", self.delta_time.as_secs_f64());
            let _ = writeln!(out, "reconstruction {:.3}s", self.reconstruct_time.as_secs_f64());
        }
        out
    }
}

pub fn deflate_len(bytes: &[u8]) -> u64 {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len() as u64
}

/// Size deltas of every function over `HISTOGRAM_PADS` padding amounts
/// (8, 16, ... bytes) against the default padding of `options`.
pub fn size_histogram(model: &ProgramModel, options: &LayoutOptions) -> Result<Histogram, LayoutError> {
    let mut h = Histogram::default();
    let default_pad = if options.default_padding { 8 } else { 0 };
    for f in &model.functions {
        let mut g = f.clone();
        g.frame.padding = default_pad;
        let base = function_size(&g, options)? as i64;
        for k in 1..=HISTOGRAM_PADS {
            g.frame.padding = 8 * k;
            let d = function_size(&g, options)? as i64 - base;
            *h.counts.entry(d).or_default() += 1;
        }
    }
    Ok(h)
}

struct ProgramRun {
    metrics: ProgramMetrics,
    histograms: BTreeMap<(bool, bool), Histogram>,
    delta_time: Duration,
    reconstruct_time: Duration,
}

fn run_program(model: &ProgramModel, seeds: &[SeedTuple], options: &LayoutOptions) -> Result<ProgramRun, LayoutError> {
    let (def, log) = build_default(model, options)?;
    let default_text = emit_symbol_file(&def.layout.symfile).expect("layout emits valid symbol files");
    let mut m = ProgramMetrics {
        name: model.module_name.clone(),
        functions: model.functions.len(),
        default_symfile_bytes: default_text.len() as u64,
        diversified_symfile_bytes_max: 0,
        opplog_compressed_bytes: deflate_len(log.to_text().as_bytes()),
        schemes: Default::default(),
        exact: 0,
        reconstructions: 0,
    };
    let mut delta_time = Duration::ZERO;
    let mut reconstruct_time = Duration::ZERO;
    for (col, (_, schemes)) in SCHEME_COLUMNS.iter().enumerate() {
        let opts = LayoutOptions { schemes: *schemes, ..*options };
        let params = DeltaParams {
            nop_probability: opts.nop_probability,
            default_padding: opts.default_padding,
            sp_fp_opt: opts.sp_fp_opt,
            schemes: opts.schemes,
        };
        for s in seeds {
            let (div, _) = build_diversified(model, s, &opts)?;
            let truth = emit_symbol_file(&div.layout.symfile).expect("layout emits valid symbol files");
            m.diversified_symfile_bytes_max = m.diversified_symfile_bytes_max.max(truth.len() as u64);

            let t = Instant::now();
            let dd = make_delta(&def.layout.symfile, &log, &div.layout.symfile, s, &params);
            let packed = dd.as_ref().map(|dd| pack(dd, None).len()).ok();
            delta_time += t.elapsed();

            m.reconstructions += 1;
            let (Ok(dd), Some(packed)) = (dd, packed) else { continue };
            m.schemes[col].add(packed as u64, dd.patch.payload_bytes() as u64);

            let t = Instant::now();
            let rebuilt = reconstruct(&dd, &def.layout.symfile, &log);
            reconstruct_time += t.elapsed();
            if rebuilt.ok().and_then(|sf| emit_symbol_file(&sf).ok()).is_some_and(|x| x == truth) {
                m.exact += 1;
            }
        }
    }
    let mut histograms = BTreeMap::new();
    for dp in [false, true] {
        for sfo in [false, true] {
            let opts = LayoutOptions { default_padding: dp, sp_fp_opt: sfo, ..*options };
            histograms.insert((dp, sfo), size_histogram(model, &opts)?);
        }
    }
    Ok(ProgramRun { metrics: m, histograms, delta_time, reconstruct_time })
}

/// Evaluate every program under every seed tuple and each scheme column.
/// Programs run in parallel; the report, timings aside, is deterministic.
pub fn corpus_metrics(
    corpus: &[ProgramModel],
    seeds: &[SeedTuple],
    options: &LayoutOptions,
) -> Result<MetricsReport, LayoutError> {
    let runs: Vec<ProgramRun> = corpus.par_iter().map(|m| run_program(m, seeds, options)).collect::<Result<_, _>>()?;
    let mut report = MetricsReport {
        programs: Vec::with_capacity(runs.len()),
        schemes: Default::default(),
        histograms: BTreeMap::new(),
        delta_time: Duration::ZERO,
        reconstruct_time: Duration::ZERO,
    };
    for r in runs {
        for (agg, s) in report.schemes.iter_mut().zip(&r.metrics.schemes) {
            agg.merge(s);
        }
        for (k, h) in &r.histograms {
            report.histograms.entry(*k).or_default().merge(h);
        }
        report.delta_time += r.delta_time;
        report.reconstruct_time += r.reconstruct_time;
        report.programs.push(r.metrics);
    }
    Ok(report)
}
