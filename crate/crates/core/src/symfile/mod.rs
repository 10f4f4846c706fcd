//! Breakpad text symbol files.
//!
//! A [`SymbolFile`] is the parsed, canonical form of a symbol file: one
//! `MODULE` record, the `FILE` table, `FUNC` records with their line records,
//! `PUBLIC` records and `STACK CFI` blocks. Emission is fully deterministic
//! (lowercase hex, single spaces, records ordered by kind and address) so that
//! two symbol files can be compared byte for byte.

mod expr;

pub use expr::{ExprError, PostfixExpr, RuleMap, Token};

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SymfileError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid symbol file: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileRecord {
    pub filenum: u32,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineRecord {
    pub address: u64,
    pub size: u64,
    pub line: u32,
    pub filenum: u32,
}

impl LineRecord {
    pub fn end(&self) -> u64 {
        self.address + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.address <= addr && addr < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuncRecord {
    /// The `m` flag: the same code is shared by several symbols.
    pub multiple: bool,
    pub address: u64,
    pub size: u64,
    pub param_size: u64,
    pub name: String,
    pub lines: Vec<LineRecord>,
}

impl FuncRecord {
    pub fn end(&self) -> u64 {
        self.address + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.address <= addr && addr < self.end()
    }

    pub fn line_at(&self, addr: u64) -> Option<&LineRecord> {
        let i = self.lines.partition_point(|l| l.address <= addr);
        i.checked_sub(1).map(|i| &self.lines[i]).filter(|l| l.contains(addr))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicRecord {
    pub multiple: bool,
    pub address: u64,
    pub param_size: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CfiDelta {
    pub address: u64,
    pub rules: RuleMap,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CfiInitRecord {
    pub address: u64,
    pub size: u64,
    pub init_rules: RuleMap,
    pub deltas: Vec<CfiDelta>,
}

impl CfiInitRecord {
    pub fn end(&self) -> u64 {
        self.address + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.address <= addr && addr < self.end()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolFile {
    /// Everything after `MODULE ` (os, arch, id, name). Empty when absent.
    pub module_id: String,
    pub files: Vec<FileRecord>,
    pub funcs: Vec<FuncRecord>,
    pub publics: Vec<PublicRecord>,
    pub cfi_regions: Vec<CfiInitRecord>,
}

impl SymbolFile {
    pub fn func_at(&self, addr: u64) -> Option<&FuncRecord> {
        let i = self.funcs.partition_point(|f| f.address <= addr);
        i.checked_sub(1).map(|i| &self.funcs[i]).filter(|f| f.contains(addr))
    }

    pub fn cfi_at(&self, addr: u64) -> Option<&CfiInitRecord> {
        let i = self.cfi_regions.partition_point(|c| c.address <= addr);
        i.checked_sub(1).map(|i| &self.cfi_regions[i]).filter(|c| c.contains(addr))
    }

    pub fn file_path(&self, filenum: u32) -> Option<&str> {
        self.files.binary_search_by_key(&filenum, |f| f.filenum).ok().map(|i| self.files[i].path.as_str())
    }

    pub fn line_record_count(&self) -> usize {
        self.funcs.iter().map(|f| f.lines.len()).sum()
    }

    pub fn cfi_record_count(&self) -> usize {
        self.cfi_regions.iter().map(|c| 1 + c.deltas.len()).sum()
    }

    /// Check every structural invariant; this is what `emit` relies on.
    pub fn validate(&self) -> Result<(), SymfileError> {
        let bad = |m: String| Err(SymfileError::Invalid(m));
        for w in self.files.windows(2) {
            if w[0].filenum >= w[1].filenum {
                return bad(format!("FILE {} not in increasing order", w[1].filenum));
            }
        }
        for w in self.funcs.windows(2) {
            if w[0].end() > w[1].address {
                return bad(format!("FUNC {} overlaps FUNC {}", w[0].name, w[1].name));
            }
        }
        for f in &self.funcs {
            if f.size == 0 {
                return bad(format!("FUNC {} has size 0", f.name));
            }
            let mut prev_end = f.address;
            for l in &f.lines {
                if l.size == 0 {
                    return bad(format!("line record at {:x} has size 0", l.address));
                }
                if l.address < prev_end || l.end() > f.end() {
                    return bad(format!("line record at {:x} outside FUNC {} or out of order", l.address, f.name));
                }
                if self.file_path(l.filenum).is_none() {
                    return bad(format!("line record references unknown file {}", l.filenum));
                }
                prev_end = l.end();
            }
        }
        for w in self.publics.windows(2) {
            if w[0].address > w[1].address {
                return bad("PUBLIC records out of order".to_string());
            }
        }
        for w in self.cfi_regions.windows(2) {
            if w[0].end() > w[1].address {
                return bad(format!("STACK CFI INIT {:x} overlaps next", w[0].address));
            }
        }
        for c in &self.cfi_regions {
            if c.init_rules.get(".cfa").is_none() || c.init_rules.get(".ra").is_none() {
                return bad(format!("STACK CFI INIT {:x} lacks .cfa or .ra", c.address));
            }
            let mut prev: Option<u64> = None;
            for d in &c.deltas {
                if !c.contains(d.address) || prev.is_some_and(|p| p >= d.address) {
                    return bad(format!("STACK CFI {:x} misplaced", d.address));
                }
                prev = Some(d.address);
            }
            for rules in std::iter::once(&c.init_rules).chain(c.deltas.iter().map(|d| &d.rules)) {
                if rules.get(".cfa").is_some_and(|e| e.references(".cfa")) {
                    return bad(format!("STACK CFI in {:x}: .cfa rule uses .cfa", c.address));
                }
            }
        }
        Ok(())
    }
}

fn parse_hex(field: Option<&str>, what: &str) -> Result<u64, String> {
    let f = field.ok_or_else(|| format!("missing {what}"))?;
    u64::from_str_radix(f, 16).map_err(|_| format!("malformed hex {what} `{f}`"))
}

fn parse_dec(field: Option<&str>, what: &str) -> Result<u32, String> {
    let f = field.ok_or_else(|| format!("missing {what}"))?;
    f.parse::<u32>().map_err(|_| format!("malformed {what} `{f}`"))
}

/// Split off the first `n` space-separated fields; the remainder (which may
/// itself contain spaces) is returned last.
fn split_fields(s: &str, n: usize) -> (Vec<&str>, &str) {
    let mut fields = Vec::with_capacity(n);
    let mut rest = s;
    for _ in 0..n {
        rest = rest.trim_start_matches(' ');
        if rest.is_empty() {
            break;
        }
        match rest.find(' ') {
            Some(i) => {
                fields.push(&rest[..i]);
                rest = &rest[i + 1..];
            }
            None => {
                fields.push(rest);
                rest = "";
            }
        }
    }
    (fields, rest)
}

fn parse_record_line(
    sf: &mut SymbolFile,
    text: &str,
    current_func: &mut Option<usize>,
    current_cfi: &mut Option<usize>,
) -> Result<(), String> {
    let keyword = text.split(' ').next().unwrap_or("");
    match keyword {
        "MODULE" => {
            if !sf.module_id.is_empty() {
                return Err("duplicate MODULE record".into());
            }
            let rest = text["MODULE".len()..].trim_start();
            if rest.is_empty() {
                return Err("empty MODULE record".into());
            }
            sf.module_id = rest.to_string();
        }
        "FILE" => {
            let (f, path) = split_fields(&text[4..], 1);
            let filenum = parse_dec(f.first().copied(), "file number")?;
            if sf.files.iter().any(|x| x.filenum == filenum) {
                return Err(format!("duplicate FILE {filenum}"));
            }
            sf.files.push(FileRecord { filenum, path: path.to_string() });
        }
        "FUNC" => {
            let mut body = &text[4..];
            let multiple = body.starts_with(" m ");
            if multiple {
                body = &body[2..];
            }
            let (f, name) = split_fields(body, 3);
            let address = parse_hex(f.first().copied(), "function address")?;
            let size = parse_hex(f.get(1).copied(), "function size")?;
            let param_size = parse_hex(f.get(2).copied(), "parameter size")?;
            sf.funcs.push(FuncRecord {
                multiple,
                address,
                size,
                param_size,
                name: name.to_string(),
                lines: Vec::new(),
            });
            *current_func = Some(sf.funcs.len() - 1);
            *current_cfi = None;
        }
        "PUBLIC" => {
            let mut body = &text[6..];
            let multiple = body.starts_with(" m ");
            if multiple {
                body = &body[2..];
            }
            let (f, name) = split_fields(body, 2);
            let address = parse_hex(f.first().copied(), "public address")?;
            let param_size = parse_hex(f.get(1).copied(), "parameter size")?;
            sf.publics.push(PublicRecord { multiple, address, param_size, name: name.to_string() });
            *current_func = None;
            *current_cfi = None;
        }
        "STACK" => {
            let rest = text.strip_prefix("STACK CFI ").ok_or_else(|| "unsupported STACK record".to_string())?;
            *current_func = None;
            if let Some(init) = rest.strip_prefix("INIT ") {
                let (f, rules) = split_fields(init, 2);
                let address = parse_hex(f.first().copied(), "CFI address")?;
                let size = parse_hex(f.get(1).copied(), "CFI size")?;
                let init_rules = RuleMap::parse(rules)?;
                sf.cfi_regions.push(CfiInitRecord { address, size, init_rules, deltas: Vec::new() });
                *current_cfi = Some(sf.cfi_regions.len() - 1);
            } else {
                let (f, rules) = split_fields(rest, 1);
                let address = parse_hex(f.first().copied(), "CFI address")?;
                let rules = RuleMap::parse(rules)?;
                let idx = current_cfi.ok_or_else(|| "STACK CFI without INIT".to_string())?;
                sf.cfi_regions[idx].deltas.push(CfiDelta { address, rules });
            }
        }
        _ => {
            // Line records start with a hex address.
            if !keyword.chars().all(|c| c.is_ascii_hexdigit()) || keyword.is_empty() {
                return Err(format!("unknown record `{keyword}`"));
            }
            let idx = current_func.ok_or_else(|| "line record outside any FUNC".to_string())?;
            let (f, rest) = split_fields(text, 4);
            if !rest.is_empty() || f.len() != 4 {
                return Err("line record needs exactly 4 fields".into());
            }
            let rec = LineRecord {
                address: parse_hex(f.first().copied(), "line address")?,
                size: parse_hex(f.get(1).copied(), "line size")?,
                line: parse_dec(f.get(2).copied(), "line number")?,
                filenum: parse_dec(f.get(3).copied(), "file number")?,
            };
            let func = &mut sf.funcs[idx];
            if rec.address < func.address || rec.end() > func.end() {
                return Err(format!("line record {:x} outside FUNC {}", rec.address, func.name));
            }
            func.lines.push(rec);
        }
    }
    Ok(())
}

/// Parse a Breakpad text symbol file into canonical form.
pub fn parse_symbol_file(text: &str) -> Result<SymbolFile, SymfileError> {
    let mut sf = SymbolFile::default();
    let mut current_func = None;
    let mut current_cfi = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        parse_record_line(&mut sf, line, &mut current_func, &mut current_cfi)
            .map_err(|msg| SymfileError::Parse { line: i + 1, msg })?;
    }
    sf.files.sort_by_key(|f| f.filenum);
    sf.funcs.sort_by_key(|f| f.address);
    for f in &mut sf.funcs {
        f.lines.sort_by_key(|l| l.address);
    }
    sf.publics.sort_by_key(|p| p.address);
    sf.cfi_regions.sort_by_key(|c| c.address);
    sf.validate().map_err(|e| match e {
        SymfileError::Invalid(msg) => SymfileError::Parse { line: 0, msg },
        other => other,
    })?;
    Ok(sf)
}

pub(crate) fn write_func_header(out: &mut String, f: &FuncRecord) {
    let m = if f.multiple { "m " } else { "" };
    let _ = writeln!(out, "FUNC {m}{:x} {:x} {:x} {}", f.address, f.size, f.param_size, f.name);
}

pub(crate) fn write_line(out: &mut String, l: &LineRecord) {
    let _ = writeln!(out, "{:x} {:x} {} {}", l.address, l.size, l.line, l.filenum);
}

/// Serialize in canonical order. Fails if `sf` violates its invariants.
pub fn emit_symbol_file(sf: &SymbolFile) -> Result<String, SymfileError> {
    sf.validate()?;
    let mut out = String::new();
    if !sf.module_id.is_empty() {
        let _ = writeln!(out, "MODULE {}", sf.module_id);
    }
    for f in &sf.files {
        let _ = writeln!(out, "FILE {} {}", f.filenum, f.path);
    }
    for f in &sf.funcs {
        write_func_header(&mut out, f);
        for l in &f.lines {
            write_line(&mut out, l);
        }
    }
    for p in &sf.publics {
        let m = if p.multiple { "m " } else { "" };
        let _ = writeln!(out, "PUBLIC {m}{:x} {:x} {}", p.address, p.param_size, p.name);
    }
    for c in &sf.cfi_regions {
        let _ = writeln!(out, "STACK CFI INIT {:x} {:x} {}", c.address, c.size, c.init_rules);
        for d in &c.deltas {
            let _ = writeln!(out, "STACK CFI {:x} {}", d.address, d.rules);
        }
    }
    Ok(out)
}
