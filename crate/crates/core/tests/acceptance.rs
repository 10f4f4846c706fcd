//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::Instant;

use divcrash::collector::{deflate_len, make_delta, reconstruct, simulate_crash, size_histogram, symbolize, CrashSite};
use divcrash::deltadata::{apply, diff, embed, extract, pack, unpack, DeltaData, DeltaParams, Image, Patch};
use divcrash::diversify::{build_default, build_diversified, insert_nops, pad_amount, Prng, SeedTuple};
use divcrash::progmodel::{arm_imm_encodable, generate_corpus, LayoutOptions, ProgramModel, Ratio, Schemes, SizeClass};
use divcrash::symfile::{emit_symbol_file, parse_symbol_file};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, TestRng, TestRunner};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const CORPUS_SEED: u64 = 0x5eed;
const PROGRAMS: usize = 20;
const SEED_TUPLES: usize = 30;
const SITES: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn seed_tuples(n: usize) -> Vec<SeedTuple> {
    let mut p = Prng::new(0x00ac_ce97);
    (0..n).map(|_| SeedTuple::from_master(p.next_u64())).collect()
}

fn params(o: &LayoutOptions) -> DeltaParams {
    DeltaParams {
        nop_probability: o.nop_probability,
        default_padding: o.default_padding,
        sp_fp_opt: o.sp_fp_opt,
        schemes: o.schemes,
    }
}

fn runner(cases: u32, seed: u8) -> TestRunner {
    let config = Config { cases, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &[seed; 32]))
}

/// Draw `n` values from a strategy with a fixed seed.
fn sample<S: Strategy>(s: &S, n: usize, seed: u8) -> Vec<S::Value> {
    let mut r = runner(n as u32, seed);
    (0..n).map(|_| s.new_tree(&mut r).expect("strategy").current()).collect()
}

/// Per-program results shared by the reconstruction, trace, patch and size
/// criteria.
struct ProgramRun {
    exact: usize,
    pairs: usize,
    patch_exact: usize,
    trace_sites_stable: usize,
    trace_sites: usize,
    size_ordered: usize,
    size_pairs: usize,
    max_ratio_dd_log: f64,
    max_ratio_log_sym: f64,
}

fn run_program(model: &ProgramModel, seeds: &[SeedTuple], opts: &LayoutOptions, site_seed: u64) -> ProgramRun {
    let key = b"acceptance-key";
    let (def, log) = build_default(model, opts).expect("default build");
    let log_z = deflate_len(log.to_text().as_bytes());
    let mut rng = Prng::new(site_seed);
    let chains: Vec<Vec<CrashSite>> = (0..SITES).map(|_| common::random_chain(model, &mut rng, 6)).collect();
    let mut traces: Vec<HashSet<String>> = vec![HashSet::new(); SITES];
    let mut r = ProgramRun {
        exact: 0,
        pairs: 0,
        patch_exact: 0,
        trace_sites_stable: 0,
        trace_sites: SITES,
        size_ordered: 0,
        size_pairs: 0,
        max_ratio_dd_log: 0.0,
        max_ratio_log_sym: 0.0,
    };
    for s in seeds {
        let (div, _) = build_diversified(model, s, opts).expect("diversified build");
        let truth = emit_symbol_file(&div.layout.symfile).expect("valid symbol file");
        let dd = make_delta(&def.layout.symfile, &log, &div.layout.symfile, s, &params(opts)).expect("delta");
        let bytes = pack(&dd, Some(key));
        let got = unpack(&bytes, Some(key))
            .ok()
            .and_then(|dd| reconstruct(&dd, &def.layout.symfile, &log).ok())
            .and_then(|sf| emit_symbol_file(&sf).ok());
        r.pairs += 1;
        if got.as_deref() == Some(truth.as_str()) {
            r.exact += 1;
        }
        // The same pair through the bare patch path.
        let approx = divcrash::replicate::replicate(&def.layout.symfile, &log, s, &params(opts).replication()).unwrap();
        if apply(&approx, &dd.patch).ok().and_then(|sf| emit_symbol_file(&sf).ok()).as_deref() == Some(&truth) {
            r.patch_exact += 1;
        }

        let plain = pack(&dd, None).len() as u64;
        let sym = truth.len() as u64;
        r.size_pairs += 1;
        if plain < log_z && log_z < sym {
            r.size_ordered += 1;
        }
        r.max_ratio_dd_log = r.max_ratio_dd_log.max(plain as f64 / log_z as f64);
        r.max_ratio_log_sym = r.max_ratio_log_sym.max(log_z as f64 / sym as f64);

        let parsed = parse_symbol_file(&truth).expect("parse");
        for (c, set) in chains.iter().zip(&mut traces) {
            let dump = simulate_crash(&div.layout, &div.model, c).expect("crash");
            set.insert(symbolize(&dump, &parsed).render());
        }
    }
    r.trace_sites_stable = traces.iter().filter(|t| t.len() == 1).count();
    r
}

fn corpus_runs(corpus: &[ProgramModel], seeds: &[SeedTuple], opts: &LayoutOptions) -> Vec<ProgramRun> {
    corpus.par_iter().enumerate().map(|(i, m)| run_program(m, seeds, opts, 900 + i as u64)).collect()
}

fn c3_patch_oracle(corpus_pairs: (usize, usize)) -> Outcome {
    let pairs = sample(&common::any_pair(), 1000, 3);
    let ok = pairs
        .par_iter()
        .filter(|(approx, truth)| {
            let Ok(p) = diff(approx, truth) else { return false };
            let Ok(p) = Patch::parse(&p.to_text()) else { return false };
            apply(approx, &p).ok().and_then(|sf| emit_symbol_file(&sf).ok()) == emit_symbol_file(truth).ok()
        })
        .count();
    let (cx, cn) = corpus_pairs;
    outcome(ok == pairs.len() && cx == cn, format!("{ok}/{} generated pairs, {cx}/{cn} corpus pairs", pairs.len()))
}

/// All values with an encoding, by enumerating every 8-bit value and even
/// rotation.
fn encodable_set() -> HashSet<u32> {
    let mut s = HashSet::new();
    for rot in 0..16u32 {
        for b in 0..256u32 {
            s.insert(b.rotate_right(2 * rot));
        }
    }
    s
}

fn c4_immediates() -> Outcome {
    let set = encodable_set();
    let listed: Vec<u32> = set.iter().copied().collect();
    let mut rng = Prng::new(44);
    let mut mismatches = 0;
    let n = 100_000;
    for i in 0..n {
        // Alternate uniform values with near-misses of encodable ones.
        let v = if i % 2 == 0 {
            rng.next_u64() as u32
        } else {
            let base = listed[(rng.next_u64() % listed.len() as u64) as usize];
            base.wrapping_add((rng.next_u64() % 9) as u32).wrapping_sub(4)
        };
        if arm_imm_encodable(v) != set.contains(&v) {
            mismatches += 1;
        }
    }
    let quoted = !arm_imm_encodable(0x3ff0) && arm_imm_encodable(0x4000);
    outcome(
        mismatches == 0 && quoted,
        format!(
            "{mismatches} mismatches in {n} values; 0x3ff0 -> {}, 0x4000 -> {}",
            arm_imm_encodable(0x3ff0),
            arm_imm_encodable(0x4000)
        ),
    )
}

fn mean_packed(corpus: &[ProgramModel], seeds: &[SeedTuple], opts: &LayoutOptions) -> f64 {
    let sizes: Vec<usize> = corpus
        .par_iter()
        .flat_map_iter(|m| {
            let (def, log) = build_default(m, opts).expect("default build");
            seeds
                .iter()
                .map(|s| {
                    let (div, _) = build_diversified(m, s, opts).expect("diversified build");
                    let dd =
                        make_delta(&def.layout.symfile, &log, &div.layout.symfile, s, &params(opts)).expect("delta");
                    pack(&dd, None).len()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
}

fn c5_delta_direction(corpus: &[ProgramModel], seeds: &[SeedTuple]) -> Outcome {
    let base = LayoutOptions { desync_rate: Ratio::new(1, 50).unwrap(), ..LayoutOptions::default() };
    let pad_on = mean_packed(corpus, seeds, &LayoutOptions { default_padding: true, sp_fp_opt: false, ..base });
    let pad_off = mean_packed(corpus, seeds, &LayoutOptions { default_padding: false, sp_fp_opt: false, ..base });
    let sfo_on = mean_packed(corpus, seeds, &LayoutOptions { default_padding: true, sp_fp_opt: true, ..base });
    outcome(
        pad_on < pad_off && pad_on < sfo_on,
        format!(
            "mean packed bytes: padding on {pad_on:.1} vs off {pad_off:.1} (+{:.0}%); sp_fp_opt off {pad_on:.1} vs on {sfo_on:.1} (+{:.0}%)",
            100.0 * (pad_off / pad_on - 1.0),
            100.0 * (sfo_on / pad_on - 1.0)
        ),
    )
}

fn c6_shuffle_only(corpus: &[ProgramModel], seeds: &[SeedTuple]) -> Outcome {
    let opts = LayoutOptions { schemes: Schemes::SHUFFLE_ONLY, ..LayoutOptions::default() };
    let worst: Vec<(usize, usize)> = corpus
        .par_iter()
        .map(|m| {
            let (def, log) = build_default(m, &opts).expect("default build");
            seeds
                .iter()
                .map(|s| {
                    let (div, _) = build_diversified(m, s, &opts).expect("diversified build");
                    let dd =
                        make_delta(&def.layout.symfile, &log, &div.layout.symfile, s, &params(&opts)).expect("delta");
                    (dd.patch.payload_bytes(), pack(&dd, None).len())
                })
                .fold((0, 0), |a, b| (a.0.max(b.0), a.1.max(b.1)))
        })
        .collect();
    let bad = worst.iter().filter(|w| w.0 != 0).count();
    let max_packed = worst.iter().map(|w| w.1).max().unwrap_or(0);
    outcome(bad == 0, format!("{bad} programs with nonzero payload; largest packed container {max_packed} bytes"))
}

fn c8_statistics(corpus: &[ProgramModel]) -> Outcome {
    // NOP rate, measured on the instrumented models.
    let (mut gaps, mut nops) = (0u64, 0u64);
    let mut seed = Prng::new(8);
    while gaps < 200_000 {
        let s = seed.next_u64();
        for m in corpus {
            let out = insert_nops(m, s, Ratio::new(1, 5).unwrap());
            for (a, b) in m.functions.iter().zip(&out.functions) {
                for (x, y) in a.blocks.iter().zip(&b.blocks) {
                    if x.is_code() {
                        gaps += x.size.saturating_sub(1) as u64;
                        nops += (y.size - x.size) as u64;
                    }
                }
            }
        }
    }
    let rate = nops as f64 / gaps as f64;

    // Padding over 32 values by chi-square.
    let mut counts = [0u64; 32];
    let mut bad_values = 0;
    let draws = 64_000;
    let mut p = Prng::new(88);
    for i in 0..draws {
        let pad = pad_amount(&format!("f{i}unit.o.text.f{i}"), p.next_u64(), false);
        if !pad.is_multiple_of(8) || !(8..=256).contains(&pad) {
            bad_values += 1;
            continue;
        }
        counts[(pad / 8 - 1) as usize] += 1;
    }
    let expected = draws as f64 / 32.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(31.0).unwrap().inverse_cdf(0.999);
    outcome(
        (rate - 0.20).abs() <= 0.01 && chi2 < critical && bad_values == 0,
        format!("NOP rate {rate:.4} over {gaps} gaps; padding chi2 {chi2:.1} < {critical:.1} (31 dof)"),
    )
}

fn c9_histograms(corpus: &[ProgramModel]) -> Outcome {
    let hist = |dp: bool| {
        let opts = LayoutOptions { default_padding: dp, sp_fp_opt: false, ..LayoutOptions::default() };
        corpus.iter().fold((0u64, 0u64, 0f64), |acc, m| {
            let h = size_histogram(m, &opts).expect("histogram");
            (acc.0 + h.counts.get(&0).copied().unwrap_or(0), acc.1 + h.total(), acc.2 + h.mean_abs() * h.total() as f64)
        })
    };
    let (z_on, n_on, a_on) = hist(true);
    let (z_off, n_off, a_off) = hist(false);
    let (m_on, m_off) = (z_on as f64 / n_on as f64, z_off as f64 / n_off as f64);
    outcome(
        m_on > m_off,
        format!(
            "mass at zero {m_on:.4} with default padding vs {m_off:.4} without; mean |delta| {:.3} vs {:.3} bytes",
            a_on / n_on as f64,
            a_off / n_off as f64
        ),
    )
}

fn c10_round_trips() -> Outcome {
    let mut failures = Vec::new();
    let files = sample(&common::sym_spec(), 500, 10);
    let sym_ok = files
        .iter()
        .filter(|spec| {
            let sf = common::build(spec);
            let text = emit_symbol_file(&sf).unwrap();
            parse_symbol_file(&text).ok().and_then(|p| emit_symbol_file(&p).ok()).as_deref() == Some(&text)
        })
        .count();
    if sym_ok != files.len() {
        failures.push("symbol file");
    }

    let pairs = sample(&common::near_pair(), 300, 11);
    let mut rng = Prng::new(1010);
    let (mut dd_ok, mut embed_ok, mut tamper_missed, mut tamper_total) = (0, 0, 0, 0);
    for (k, (approx, truth)) in pairs.iter().enumerate() {
        let dd = DeltaData {
            seeds: SeedTuple { pad_seed: rng.next_u64(), nop_seed: rng.next_u64(), shuffle_seed: rng.next_u64() },
            params: DeltaParams {
                nop_probability: Ratio::new((rng.next_u64() % 100) as u32, 100).unwrap(),
                default_padding: k % 2 == 0,
                sp_fp_opt: k % 3 == 0,
                schemes: Schemes { padding: k % 5 != 0, nops: k % 7 != 0, shuffle: k % 11 != 0 },
            },
            patch: diff(approx, truth).unwrap(),
        };
        let key = format!("key-{k}");
        let plain = pack(&dd, None);
        let authed = pack(&dd, Some(key.as_bytes()));
        if unpack(&plain, None).as_ref() == Ok(&dd) && unpack(&authed, Some(key.as_bytes())).as_ref() == Ok(&dd) {
            dd_ok += 1;
        }
        let mut img = Image::default();
        img.add(".text", (0..(k * 7) as u8).collect()).unwrap();
        let img = img.to_bytes();
        if embed(&img, &authed).and_then(|e| extract(&e)).as_ref() == Ok(&authed) {
            embed_ok += 1;
        }
        if k < 40 {
            for i in 0..authed.len() {
                let mut t = authed.clone();
                t[i] ^= 1 << (i % 8);
                tamper_total += 1;
                if unpack(&t, Some(key.as_bytes())).is_ok() {
                    tamper_missed += 1;
                }
            }
        }
    }
    if dd_ok != pairs.len() {
        failures.push("Δdata");
    }
    if embed_ok != pairs.len() {
        failures.push("embed");
    }
    if tamper_missed != 0 {
        failures.push("tamper");
    }
    outcome(
        failures.is_empty(),
        format!(
            "symbol files {sym_ok}/{}, Δdata {dd_ok}/{n}, embed {embed_ok}/{n}, tampering detected {}/{tamper_total}{}",
            files.len(),
            tamper_total - tamper_missed,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) },
            n = pairs.len(),
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let corpus = generate_corpus(CORPUS_SEED, PROGRAMS, SizeClass::Small);
    let seeds = seed_tuples(SEED_TUPLES);
    let combined = LayoutOptions { desync_rate: Ratio::new(1, 50).unwrap(), ..LayoutOptions::default() };
    let runs = corpus_runs(&corpus, &seeds, &combined);
    let sum = |f: fn(&ProgramRun) -> usize| runs.iter().map(f).sum::<usize>();

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let (exact, pairs) = (sum(|r| r.exact), sum(|r| r.pairs));
    results.push((
        "exact reconstruction",
        outcome(exact == pairs && pairs == PROGRAMS * SEED_TUPLES, format!("{exact}/{pairs} byte-identical")),
    ));
    let (stable, sites) = (sum(|r| r.trace_sites_stable), sum(|r| r.trace_sites));
    results.push((
        "trace invariance",
        outcome(stable == sites, format!("{stable}/{sites} sites with one trace across {SEED_TUPLES} seed tuples")),
    ));
    results.push(("patch oracle", c3_patch_oracle((sum(|r| r.patch_exact), pairs))));
    results.push(("immediate encoding", c4_immediates()));
    results.push(("Δdata minimization direction", c5_delta_direction(&corpus, &seeds[..10])));
    results.push(("seeds-only Δdata for shuffling", c6_shuffle_only(&corpus, &seeds)));
    let (ordered, size_pairs) = (sum(|r| r.size_ordered), sum(|r| r.size_pairs));
    let dd_log = runs.iter().map(|r| r.max_ratio_dd_log).fold(0.0, f64::max);
    let log_sym = runs.iter().map(|r| r.max_ratio_log_sym).fold(0.0, f64::max);
    results.push((
        "size ordering",
        outcome(
            ordered == size_pairs,
            format!("{ordered}/{size_pairs} pairs; worst Δdata/log {dd_log:.3}, worst log/symfile {log_sym:.3}"),
        ),
    ));
    results.push(("decision statistics", c8_statistics(&corpus)));
    results.push(("size histogram at zero", c9_histograms(&corpus)));
    results.push(("round trips", c10_round_trips()));

    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {:>2} {:<32} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
