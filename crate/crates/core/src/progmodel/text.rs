//! Line-oriented text form of a `ProgramModel`.
//!
//! ```text
//! MODULE demo
//! FILE 1 src/a.c
//! FUNCTION f f.o .text.f align=4 fp=0 local=16 pad=0 saved=4,14
//! BLOCK code 10:1:3,11:1:2 epi nops=2
//! CONST 0xdeadbeef
//! BLOCK data 8
//! ACCESS 0 4 2 10
//! CALL g 0 1
//! ```
//!
//! `CONST` attaches to the preceding `BLOCK`; `ACCESS` and `CALL` to the
//! preceding `FUNCTION`. Spans are `line:filenum:count`.

use std::fmt::Write as _;

use super::{
    BlockKind, BlockModel, CallSite, FrameModel, FunctionModel, LineSpan, ProgramModel, SourceFile, StackAccess,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("model line {line}: {msg}")]
pub struct ModelParseError {
    pub line: usize,
    pub msg: String,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_model(m: &ProgramModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "MODULE {}", m.module_name);
    for f in &m.files {
        let _ = writeln!(out, "FILE {} {}", f.filenum, f.path);
    }
    for f in &m.functions {
        let fr = &f.frame;
        let saved = if fr.callee_saved.is_empty() { "-".to_string() } else { join(&fr.callee_saved) };
        let _ = writeln!(
            out,
            "FUNCTION {} {} {} align={} fp={} local={} pad={} saved={}",
            f.name,
            f.object_name,
            f.section_name,
            f.alignment,
            u8::from(f.has_fp),
            fr.local_size,
            fr.padding,
            saved
        );
        for b in &f.blocks {
            match b.kind {
                BlockKind::Data => {
                    let _ = writeln!(out, "BLOCK data {}", b.size);
                }
                BlockKind::Code => {
                    let spans: Vec<String> =
                        b.spans.iter().map(|s| format!("{}:{}:{}", s.line, s.filenum, s.count)).collect();
                    let _ = write!(out, "BLOCK code {}", spans.join(","));
                    if b.epilogue {
                        out.push_str(" epi");
                    }
                    if !b.nops.is_empty() {
                        let _ = write!(out, " nops={}", join(&b.nops));
                    }
                    out.push('\n');
                }
            }
            if !b.consts.is_empty() {
                let cs: Vec<String> = b.consts.iter().map(|c| format!("{c:#x}")).collect();
                let _ = writeln!(out, "CONST {}", cs.join(" "));
            }
        }
        for a in &fr.accesses {
            let _ = writeln!(out, "ACCESS {} {} {} {}", a.block, a.offset, a.count, a.source_line);
        }
        for c in &f.calls {
            let _ = writeln!(out, "CALL {} {} {}", m.functions[c.callee].name, c.block, c.instr);
        }
    }
    out
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("invalid number `{s}`"))
}

fn hex_or_dec(s: &str) -> Result<u32, String> {
    match s.strip_prefix("0x") {
        Some(h) => u32::from_str_radix(h, 16).map_err(|_| format!("invalid constant `{s}`")),
        None => num(s),
    }
}

fn list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    if s == "-" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(num).collect()
}

fn key<'a>(tok: &'a str, name: &str) -> Result<&'a str, String> {
    tok.strip_prefix(name).and_then(|t| t.strip_prefix('=')).ok_or_else(|| format!("expected `{name}=`, found `{tok}`"))
}

/// Parse the text form and validate the result.
pub fn parse_model(text: &str) -> Result<ProgramModel, ModelParseError> {
    let mut m = ProgramModel { module_name: String::new(), files: Vec::new(), functions: Vec::new() };
    let mut pending_calls: Vec<(usize, usize, String, usize, u32)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |msg: String| ModelParseError { line: lineno, msg };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (kw, rest) = line.split_once(' ').unwrap_or((line, ""));
        let toks: Vec<&str> = rest.split_whitespace().collect();
        let cur_fn = m.functions.last_mut();
        match kw {
            "MODULE" => m.module_name = rest.trim().to_string(),
            "FILE" => {
                let (n, path) = rest.split_once(' ').ok_or_else(|| err("FILE needs a path".into()))?;
                m.files.push(SourceFile { filenum: num(n).map_err(err)?, path: path.to_string() });
            }
            "FUNCTION" => {
                let [name, object, section, align, fp, local, pad, saved] = toks[..] else {
                    return Err(err("FUNCTION needs 8 fields".into()));
                };
                let f = (|| -> Result<FunctionModel, String> {
                    Ok(FunctionModel {
                        name: name.to_string(),
                        object_name: object.to_string(),
                        section_name: section.to_string(),
                        alignment: num(key(align, "align")?)?,
                        has_fp: num::<u8>(key(fp, "fp")?)? != 0,
                        frame: FrameModel {
                            local_size: num(key(local, "local")?)?,
                            padding: num(key(pad, "pad")?)?,
                            callee_saved: list(key(saved, "saved")?)?,
                            accesses: Vec::new(),
                        },
                        blocks: Vec::new(),
                        calls: Vec::new(),
                    })
                })()
                .map_err(err)?;
                m.functions.push(f);
            }
            "BLOCK" => {
                let f = cur_fn.ok_or_else(|| err("BLOCK before FUNCTION".into()))?;
                let b = match toks.as_slice() {
                    ["data", bytes] => BlockModel::data(num(bytes).map_err(err)?),
                    ["code", spans, flags @ ..] => {
                        let spans = spans
                            .split(',')
                            .map(|s| {
                                let p: Vec<&str> = s.split(':').collect();
                                match p[..] {
                                    [l, f, c] => Ok(LineSpan { line: num(l)?, filenum: num(f)?, count: num(c)? }),
                                    _ => Err(format!("invalid span `{s}`")),
                                }
                            })
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(err)?;
                        let mut b = BlockModel::code(spans);
                        for fl in flags {
                            if *fl == "epi" {
                                b.epilogue = true;
                            } else {
                                b.nops = list(key(fl, "nops").map_err(err)?).map_err(err)?;
                            }
                        }
                        b
                    }
                    _ => return Err(err("BLOCK must be `code SPANS [epi] [nops=..]` or `data BYTES`".into())),
                };
                f.blocks.push(b);
            }
            "CONST" => {
                let b = cur_fn.and_then(|f| f.blocks.last_mut()).ok_or_else(|| err("CONST before BLOCK".into()))?;
                for t in toks {
                    b.consts.push(hex_or_dec(t).map_err(err)?);
                }
            }
            "ACCESS" => {
                let f = cur_fn.ok_or_else(|| err("ACCESS before FUNCTION".into()))?;
                let [block, offset, count, src] = toks[..] else {
                    return Err(err("ACCESS needs 4 fields".into()));
                };
                f.frame.accesses.push(StackAccess {
                    block: num(block).map_err(err)?,
                    offset: num(offset).map_err(err)?,
                    count: num(count).map_err(err)?,
                    source_line: num(src).map_err(err)?,
                });
            }
            "CALL" => {
                if cur_fn.is_none() {
                    return Err(err("CALL before FUNCTION".into()));
                }
                let [callee, block, instr] = toks[..] else {
                    return Err(err("CALL needs 3 fields".into()));
                };
                pending_calls.push((
                    lineno,
                    m.functions.len() - 1,
                    callee.to_string(),
                    num(block).map_err(err)?,
                    num(instr).map_err(err)?,
                ));
            }
            _ => return Err(err(format!("unknown keyword `{kw}`"))),
        }
    }
    for (lineno, caller, callee, block, instr) in pending_calls {
        let callee = m
            .function_index(&callee)
            .ok_or_else(|| ModelParseError { line: lineno, msg: format!("unknown callee `{callee}`") })?;
        m.functions[caller].calls.push(CallSite { callee, block, instr });
    }
    m.validate().map_err(|e| ModelParseError { line: 0, msg: e.0 })?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::progmodel::{generate_corpus, SizeClass};

    const SAMPLE: &str = "\
MODULE demo
FILE 1 src/a file.c
FUNCTION f f.o .text.f align=4 fp=0 local=16 pad=0 saved=4,14
BLOCK code 10:1:3,11:1:2 epi nops=2
CONST 0xdeadbeef 0x10
BLOCK data 8
ACCESS 0 4 2 10
CALL g 0 1
FUNCTION g g.o .text.g align=16 fp=1 local=0 pad=8 saved=11,14
BLOCK code 20:1:1 epi
";

    #[test]
    fn sample_round_trips() {
        let m = parse_model(SAMPLE).unwrap();
        assert_eq!(m.files[0].path, "src/a file.c");
        assert_eq!(m.functions[0].calls, vec![CallSite { callee: 1, block: 0, instr: 1 }]);
        assert_eq!(m.functions[0].blocks[0].consts, vec![0xdeadbeef, 0x10]);
        assert_eq!(write_model(&m), SAMPLE);
    }

    #[test]
    fn corpus_round_trips() {
        for m in generate_corpus(11, 4, SizeClass::Small) {
            let text = write_model(&m);
            assert_eq!(parse_model(&text).unwrap(), m);
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_model("MODULE x\nBLOCK data 4\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = parse_model(
            "MODULE x\nFILE 1 a.c\nFUNCTION f f.o s align=4 fp=0 local=0 pad=0 saved=-\nBLOCK code 1:1:1\n",
        )
        .unwrap_err();
        assert_eq!(e.line, 0, "{e}");
        let e = parse_model("WAT\n").unwrap_err();
        assert_eq!(e.line, 1);
    }
}
