mod common;

use divcrash::deltadata::{apply, apply_text, diff, diff_text, Patch};
use divcrash::symfile::{emit_symbol_file, parse_symbol_file};
use proptest::prelude::*;

proptest! {
    #[test]
    fn emit_parse_emit_is_stable(spec in common::sym_spec()) {
        let sf = common::build(&spec);
        let text = emit_symbol_file(&sf).unwrap();
        let back = parse_symbol_file(&text).unwrap();
        prop_assert_eq!(&back, &sf);
        prop_assert_eq!(emit_symbol_file(&back).unwrap(), text);
    }

    #[test]
    fn parse_accepts_publics_first(spec in common::sym_spec()) {
        let sf = common::build(&spec);
        let text = emit_symbol_file(&sf).unwrap();
        // FUNC and STACK CFI blocks own the lines that follow them, so only
        // PUBLIC records can move freely.
        let (publics, rest): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.starts_with("PUBLIC"));
        let mut lines: Vec<&str> = publics;
        lines.extend(rest);
        let shuffled = lines.join("\n");
        prop_assert_eq!(parse_symbol_file(&shuffled).unwrap(), sf);
    }

    #[test]
    fn apply_inverts_diff((approx, truth) in common::any_pair()) {
        let patch = diff(&approx, &truth).unwrap();
        let reparsed = Patch::parse(&patch.to_text()).unwrap();
        prop_assert_eq!(&reparsed, &patch);
        let out = apply(&approx, &reparsed).unwrap();
        prop_assert_eq!(emit_symbol_file(&out).unwrap(), emit_symbol_file(&truth).unwrap());
    }

    #[test]
    fn identical_files_need_no_payload(spec in common::sym_spec()) {
        let sf = common::build(&spec);
        prop_assert_eq!(diff(&sf, &sf).unwrap().payload_bytes(), 0);
    }

    #[test]
    fn text_diff_round_trips(a in prop::collection::vec("[a-c0-9 ]{0,12}", 0..30),
                             b in prop::collection::vec("[a-c0-9 ]{0,12}", 0..30)) {
        let a = a.iter().map(|l| format!("{l}\n")).collect::<String>();
        let b = b.iter().map(|l| format!("{l}\n")).collect::<String>();
        let p = diff_text(&a, &b);
        prop_assert_eq!(apply_text(&a, &p).unwrap(), b);
    }
}

#[test]
fn patch_against_wrong_base_is_rejected() {
    let a = common::build(&common::SymSpec {
        module: 1,
        files: 1,
        funcs: vec![common::FuncSpec { gap: 0, segments: vec![(3, 10, 0)], name: 1, multiple: false, cfi: None }],
        publics: vec![],
    });
    let mut spec_b = common::SymSpec { module: 1, files: 1, funcs: vec![], publics: vec![] };
    for i in 0..3 {
        spec_b.funcs.push(common::FuncSpec {
            gap: 1,
            segments: vec![(2, 20 + i, 0)],
            name: i,
            multiple: false,
            cfi: None,
        });
    }
    let b = common::build(&spec_b);
    let p = diff(&b, &a).unwrap();
    let empty = divcrash::symfile::SymbolFile::default();
    assert!(apply(&empty, &p).is_err());
}
