//! Opportunity and decision logs.
//!
//! ```text
//! OPPORTUNITIES default_padding=1 sp_fp_opt=0
//! F parse_line_0 unit1.o .text.parse_line_0 align=4 local=16 saved=2 fp=0 pad=8
//! B code 12 15 epi
//! B data 8
//! P 0 8
//! ```
//!
//! A `B code` record gives the body instruction count and the total
//! instruction count of the block (prologue, accesses and epilogue
//! included). `P after bytes` is a literal pool following block `after`.
//! Decision logs use the `DECISIONS` header and add `nops=` on code blocks,
//! `X block` for an injected phantom instruction and a final `ORDER` line.

use std::fmt::Write as _;

use crate::progmodel::{LayoutOptions, LayoutResult, ProgramModel};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("log line {line}: {msg}")]
pub struct LogError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LoggedBlock {
    Code { body: u32, total: u32, epilogue: bool, nops: Vec<u32> },
    Data { bytes: u32 },
}

impl LoggedBlock {
    pub fn bytes(&self) -> u32 {
        match self {
            LoggedBlock::Code { total, .. } => 4 * total,
            LoggedBlock::Data { bytes } => *bytes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoggedFunction {
    pub name: String,
    pub object_name: String,
    pub section_name: String,
    pub alignment: u32,
    pub local_size: u32,
    /// Number of registers pushed by the prologue, lr included.
    pub saved: u32,
    pub has_fp: bool,
    pub padding: u32,
    pub blocks: Vec<LoggedBlock>,
    /// `(after_block, bytes)`.
    pub pools: Vec<(usize, u32)>,
    pub desync: Option<usize>,
}

impl LoggedFunction {
    pub fn identifier(&self) -> String {
        format!("{}{}{}", self.name, self.object_name, self.section_name)
    }

    pub fn push_bytes(&self) -> u32 {
        4 * self.saved
    }

    /// Byte offset of every block, pools accounted for.
    pub fn block_offsets(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut cur = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(cur);
            cur += b.bytes();
            cur += self.pools.iter().filter(|p| p.0 == i).map(|p| p.1).sum::<u32>();
        }
        out
    }

    pub fn size(&self) -> u32 {
        self.blocks.iter().map(LoggedBlock::bytes).sum::<u32>() + self.pools.iter().map(|p| p.1).sum::<u32>()
    }
}

/// Per-function data of a default build, in default link order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpportunityLog {
    pub default_padding: bool,
    pub sp_fp_opt: bool,
    pub functions: Vec<LoggedFunction>,
}

/// The structure of a diversified build plus the choices that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionLog {
    /// Functions in model order, with their diversified structure.
    pub log: OpportunityLog,
    pub order: Vec<usize>,
}

impl OpportunityLog {
    pub fn from_build(model: &ProgramModel, lr: &LayoutResult, options: &LayoutOptions) -> Self {
        let functions = model
            .functions
            .iter()
            .zip(&lr.functions)
            .map(|(f, pf)| LoggedFunction {
                name: f.name.clone(),
                object_name: f.object_name.clone(),
                section_name: f.section_name.clone(),
                alignment: f.alignment,
                local_size: f.frame.local_size,
                saved: f.frame.callee_saved.len() as u32,
                has_fp: f.has_fp,
                padding: f.frame.padding,
                blocks: f
                    .blocks
                    .iter()
                    .zip(&pf.blocks)
                    .map(|(b, pb)| {
                        if b.is_code() {
                            LoggedBlock::Code {
                                body: b.size,
                                total: pb.total_instrs(),
                                epilogue: b.epilogue,
                                nops: b.nops.clone(),
                            }
                        } else {
                            LoggedBlock::Data { bytes: b.size }
                        }
                    })
                    .collect(),
                pools: pf.pools.iter().map(|p| (p.after_block, p.size)).collect(),
                desync: None,
            })
            .collect();
        OpportunityLog { default_padding: options.default_padding, sp_fp_opt: options.sp_fp_opt, functions }
    }

    fn write_body(&self, out: &mut String, header: &str) {
        let _ = writeln!(
            out,
            "{header} default_padding={} sp_fp_opt={}",
            u8::from(self.default_padding),
            u8::from(self.sp_fp_opt)
        );
        for f in &self.functions {
            let _ = writeln!(
                out,
                "F {} {} {} align={} local={} saved={} fp={} pad={}",
                f.name,
                f.object_name,
                f.section_name,
                f.alignment,
                f.local_size,
                f.saved,
                u8::from(f.has_fp),
                f.padding
            );
            if let Some(k) = f.desync {
                let _ = writeln!(out, "X {k}");
            }
            for (i, b) in f.blocks.iter().enumerate() {
                match b {
                    LoggedBlock::Code { body, total, epilogue, nops } => {
                        let _ = write!(out, "B code {body} {total}");
                        if *epilogue {
                            out.push_str(" epi");
                        }
                        if !nops.is_empty() {
                            let g: Vec<String> = nops.iter().map(u32::to_string).collect();
                            let _ = write!(out, " nops={}", g.join(","));
                        }
                        out.push('\n');
                    }
                    LoggedBlock::Data { bytes } => {
                        let _ = writeln!(out, "B data {bytes}");
                    }
                }
                for (_, bytes) in f.pools.iter().filter(|p| p.0 == i) {
                    let _ = writeln!(out, "P {i} {bytes}");
                }
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.write_body(&mut out, "OPPORTUNITIES");
        out
    }

    pub fn parse(text: &str) -> Result<Self, LogError> {
        let (log, order) = parse_log(text, "OPPORTUNITIES")?;
        if order.is_some() {
            return Err(LogError { line: 0, msg: "ORDER in an opportunity log".into() });
        }
        Ok(log)
    }
}

impl DecisionLog {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.log.write_body(&mut out, "DECISIONS");
        let o: Vec<String> = self.order.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "ORDER {}", o.join(" "));
        out
    }

    pub fn parse(text: &str) -> Result<Self, LogError> {
        let (log, order) = parse_log(text, "DECISIONS")?;
        let order = order.ok_or(LogError { line: 0, msg: "missing ORDER".into() })?;
        Ok(DecisionLog { log, order })
    }
}

fn flag(tok: &str, key: &str) -> Result<bool, String> {
    match tok.strip_prefix(key).and_then(|t| t.strip_prefix('=')) {
        Some("0") => Ok(false),
        Some("1") => Ok(true),
        _ => Err(format!("expected `{key}=0|1`, found `{tok}`")),
    }
}

fn field<T: std::str::FromStr>(tok: &str, key: &str) -> Result<T, String> {
    tok.strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| format!("expected `{key}=N`, found `{tok}`"))
}

fn num<T: std::str::FromStr>(tok: &str) -> Result<T, String> {
    tok.parse().map_err(|_| format!("invalid number `{tok}`"))
}

fn parse_log(text: &str, header: &str) -> Result<(OpportunityLog, Option<Vec<usize>>), LogError> {
    let mut lines = text.lines().enumerate();
    let (default_padding, sp_fp_opt) = match lines.next() {
        Some((_, l)) => {
            let t: Vec<&str> = l.split_whitespace().collect();
            match t[..] {
                [h, dp, so] if h == header => (|| Ok((flag(dp, "default_padding")?, flag(so, "sp_fp_opt")?)))()
                    .map_err(|msg: String| LogError { line: 1, msg })?,
                _ => return Err(LogError { line: 1, msg: format!("expected `{header}` header") }),
            }
        }
        None => return Err(LogError { line: 1, msg: "empty log".into() }),
    };
    let mut functions: Vec<LoggedFunction> = Vec::new();
    let mut order = None;
    for (i, l) in lines {
        let lineno = i + 1;
        let t: Vec<&str> = l.split_whitespace().collect();
        let res: Result<(), String> = (|| {
            match t.as_slice() {
                [] => {}
                ["F", name, object, section, align, local, saved, fp, pad] => {
                    functions.push(LoggedFunction {
                        name: name.to_string(),
                        object_name: object.to_string(),
                        section_name: section.to_string(),
                        alignment: field(align, "align")?,
                        local_size: field(local, "local")?,
                        saved: field(saved, "saved")?,
                        has_fp: flag(fp, "fp")?,
                        padding: field(pad, "pad")?,
                        blocks: Vec::new(),
                        pools: Vec::new(),
                        desync: None,
                    });
                }
                ["X", k] => functions.last_mut().ok_or("X before F")?.desync = Some(num(k)?),
                ["B", "data", bytes] => {
                    functions.last_mut().ok_or("B before F")?.blocks.push(LoggedBlock::Data { bytes: num(bytes)? })
                }
                ["B", "code", body, total, rest @ ..] => {
                    let mut epilogue = false;
                    let mut nops = Vec::new();
                    for r in rest {
                        if *r == "epi" {
                            epilogue = true;
                        } else if let Some(g) = r.strip_prefix("nops=") {
                            nops = g.split(',').map(num).collect::<Result<_, _>>()?;
                        } else {
                            return Err(format!("unexpected `{r}`"));
                        }
                    }
                    functions.last_mut().ok_or("B before F")?.blocks.push(LoggedBlock::Code {
                        body: num(body)?,
                        total: num(total)?,
                        epilogue,
                        nops,
                    });
                }
                ["P", after, bytes] => {
                    let f = functions.last_mut().ok_or("P before F")?;
                    let after: usize = num(after)?;
                    if after + 1 != f.blocks.len() {
                        return Err("pool does not follow its block".into());
                    }
                    f.pools.push((after, num(bytes)?));
                }
                ["ORDER", rest @ ..] if header == "DECISIONS" => {
                    order = Some(rest.iter().map(|x| num(x)).collect::<Result<Vec<usize>, _>>()?);
                }
                _ => return Err(format!("unrecognized record `{l}`")),
            }
            Ok(())
        })();
        res.map_err(|msg| LogError { line: lineno, msg })?;
    }
    Ok((OpportunityLog { default_padding, sp_fp_opt, functions }, order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diversify::{build_default, build_diversified, SeedTuple};
    use crate::progmodel::{generate_corpus, LayoutOptions, SizeClass};

    #[test]
    fn logs_round_trip() {
        let m = generate_corpus(21, 1, SizeClass::Small).remove(0);
        let o = LayoutOptions { desync_rate: crate::progmodel::Ratio::new(1, 2).unwrap(), ..Default::default() };
        let (_, opp) = build_default(&m, &o).unwrap();
        assert_eq!(OpportunityLog::parse(&opp.to_text()).unwrap(), opp);
        let (_, dec) = build_diversified(&m, &SeedTuple::from_master(3), &o).unwrap();
        assert!(dec.log.functions.iter().any(|f| f.desync.is_some()));
        assert_eq!(DecisionLog::parse(&dec.to_text()).unwrap(), dec);
        assert!(OpportunityLog::parse(&dec.to_text()).is_err());
    }

    #[test]
    fn log_matches_layout() {
        for m in generate_corpus(22, 3, SizeClass::Small) {
            let (b, log) = build_default(&m, &LayoutOptions::default()).unwrap();
            assert_eq!(log.functions.len(), m.functions.len());
            for (lf, pf) in log.functions.iter().zip(&b.layout.functions) {
                assert_eq!(lf.size(), pf.size);
                let offs = lf.block_offsets();
                for ((lb, pb), off) in lf.blocks.iter().zip(&pf.blocks).zip(offs) {
                    assert_eq!(lb.bytes(), pb.size);
                    assert_eq!(off + pf.address, pb.address);
                }
            }
        }
    }
}
