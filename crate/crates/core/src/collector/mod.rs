//! The crash pipeline: Δdata generation on the build side, and on the
//! server, reconstruction of the diversified symbol file followed by a
//! source-level stack walk.

mod metrics;
mod minidump;

pub use metrics::{
    corpus_metrics, deflate_len, size_histogram, Histogram, MetricsReport, ProgramMetrics, SchemeSizes, HISTOGRAM_PADS,
    SCHEME_COLUMNS,
};
pub use minidump::{simulate_crash, CrashSite, HarnessError, MinidumpError, MinidumpLite, STACK_TOP};

use std::fmt::Write as _;

use crate::cfi::{unwind, UnwindStop, DEFAULT_MAX_FRAMES};
use crate::deltadata::{apply, diff, unpack, DeltaData, DeltaParams, UnpackError};
use crate::diversify::{OpportunityLog, SeedTuple};
use crate::replicate::{replicate, ReplicateError};
use crate::symfile::{SymbolFile, SymfileError};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TraceFrame {
    pub function: String,
    pub file: String,
    pub line: u32,
    /// Offset of the frame's pc from its function start.
    pub offset: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackTrace {
    pub frames: Vec<TraceFrame>,
    pub stop: UnwindStop,
}

impl StackTrace {
    /// Source-level text: function, file and line per frame, then the stop
    /// reason. Addresses and offsets vary between builds and are left out.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, f) in self.frames.iter().enumerate() {
            let _ = writeln!(out, "#{i} {} {}:{}", f.function, f.file, f.line);
        }
        let _ = writeln!(out, "stop: {}", self.stop.as_str());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("dump module `{dump}` does not match symbol file module `{symbols}`")]
    ModuleMismatch { dump: String, symbols: String },
    #[error("Δdata authentication failed")]
    Auth,
    #[error(transparent)]
    Delta(UnpackError),
    #[error(transparent)]
    Replicate(#[from] ReplicateError),
    #[error("patch does not reproduce a valid symbol file: {0}")]
    PatchCorrupt(String),
}

/// Build-side Δdata: replicate the diversified symbol file from the default
/// artifacts and record the patch that closes the gap.
pub fn make_delta(
    default_sf: &SymbolFile,
    log: &OpportunityLog,
    div_sf: &SymbolFile,
    seeds: &SeedTuple,
    params: &DeltaParams,
) -> Result<DeltaData, DeltaError> {
    let approx = replicate(default_sf, log, seeds, &params.replication())?;
    let patch = diff(&approx, div_sf)?;
    Ok(DeltaData { seeds: *seeds, params: *params, patch })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeltaError {
    #[error(transparent)]
    Replicate(#[from] ReplicateError),
    #[error(transparent)]
    Symfile(#[from] SymfileError),
}

/// Server-side reconstruction of the diversified symbol file.
pub fn reconstruct(dd: &DeltaData, default_sf: &SymbolFile, log: &OpportunityLog) -> Result<SymbolFile, ReportError> {
    let approx = replicate(default_sf, log, &dd.seeds, &dd.params.replication())?;
    apply(&approx, &dd.patch).map_err(|e| ReportError::PatchCorrupt(e.to_string()))
}

/// Source-level trace of `dump` against an exact symbol file. Frame 0 is
/// looked up at the crash address, callers at their call instruction.
pub fn symbolize(dump: &MinidumpLite, sf: &SymbolFile) -> StackTrace {
    let unwound = unwind(&dump.registers, &dump.stack, sf, DEFAULT_MAX_FRAMES);
    let frames = unwound
        .frames
        .iter()
        .enumerate()
        .map(|(k, fr)| {
            let at = if k == 0 { fr.pc } else { fr.pc.wrapping_sub(4) } as u64;
            match sf.func_at(at) {
                Some(func) => {
                    let line = func.line_at(at);
                    TraceFrame {
                        function: func.name.clone(),
                        file: line.and_then(|l| sf.file_path(l.filenum)).unwrap_or("??").to_string(),
                        line: line.map_or(0, |l| l.line),
                        offset: (at - func.address) as u32,
                    }
                }
                None => TraceFrame { function: format!("{at:#x}"), file: "??".into(), line: 0, offset: 0 },
            }
        })
        .collect();
    StackTrace { frames, stop: unwound.stop }
}

/// The full server path from a dump and packed Δdata to a trace.
pub fn report(
    dump: &MinidumpLite,
    dd_bytes: &[u8],
    default_sf: &SymbolFile,
    log: &OpportunityLog,
    key: Option<&[u8]>,
) -> Result<StackTrace, ReportError> {
    if dump.module_id != default_sf.module_id {
        return Err(ReportError::ModuleMismatch {
            dump: dump.module_id.clone(),
            symbols: default_sf.module_id.clone(),
        });
    }
    let dd = unpack(dd_bytes, key).map_err(|e| match e {
        UnpackError::Auth | UnpackError::KeyRequired => ReportError::Auth,
        e => ReportError::Delta(e),
    })?;
    let sf = reconstruct(&dd, default_sf, log)?;
    Ok(symbolize(dump, &sf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deltadata::pack;
    use crate::diversify::{build_default, build_diversified};
    use crate::progmodel::{generate_corpus, LayoutOptions, SizeClass};

    #[test]
    fn leaf_crash_at_entry() {
        let model = &generate_corpus(5, 1, SizeClass::Small)[0];
        let opts = LayoutOptions::default();
        let (def, log) = build_default(model, &opts).unwrap();
        let seeds = SeedTuple::from_master(9);
        let (div, _) = build_diversified(model, &seeds, &opts).unwrap();
        let params = DeltaParams {
            nop_probability: opts.nop_probability,
            default_padding: opts.default_padding,
            sp_fp_opt: opts.sp_fp_opt,
            schemes: opts.schemes,
        };
        let dd = make_delta(&def.layout.symfile, &log, &div.layout.symfile, &seeds, &params).unwrap();
        let bytes = pack(&dd, Some(b"k"));
        let site = CrashSite { function: 0, block: 0, instr: 0 };
        let dump = simulate_crash(&div.layout, &div.model, &[site]).unwrap();
        let trace = report(&dump, &bytes, &def.layout.symfile, &log, Some(b"k")).unwrap();
        assert_eq!(trace.frames.len(), 1);
        assert_eq!(trace.stop, UnwindStop::EndOfStack);
        let f = &model.functions[0];
        assert_eq!(trace.frames[0].function, f.name);
        let span = &f.blocks[0].spans[0];
        assert_eq!(trace.frames[0].line, span.line);

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 1;
        assert_eq!(report(&dump, &bad, &def.layout.symfile, &log, Some(b"k")), Err(ReportError::Auth));
        let mut other = dump.clone();
        other.module_id.push('x');
        assert!(matches!(
            report(&other, &bytes, &def.layout.symfile, &log, Some(b"k")),
            Err(ReportError::ModuleMismatch { .. })
        ));
    }
}
