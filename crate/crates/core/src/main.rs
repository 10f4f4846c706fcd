use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use divcrash::collector::{corpus_metrics, make_delta, report, simulate_crash, CrashSite, MinidumpLite, ReportError};
use divcrash::deltadata::{pack, DeltaParams, Image, UnpackError};
use divcrash::diversify::{build_default, build_diversified, Build, OpportunityLog, SeedTuple};
use divcrash::progmodel::{
    generate_corpus, layout, parse_model, write_model, LayoutOptions, ProgramModel, Ratio, Schemes, SizeClass,
};
use divcrash::symfile::{emit_symbol_file, parse_symbol_file, SymbolFile};

#[derive(Parser)]
#[command(name = "divcrash", version, about = "Crash reporting for diversified binaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic program corpus.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "small")]
        class: SizeClass,
        #[arg(long)]
        out: PathBuf,
    },
    /// Default build: image, symbol file and opportunity log.
    Build {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        build: BuildFlags,
    },
    /// Diversified build: image, symbol file and decision log.
    Diversify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_seeds)]
        seeds: SeedTuple,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        build: BuildFlags,
        #[command(flatten)]
        div: DiversifyFlags,
        /// Fraction of functions given a phantom instruction, e.g. 0.02 or 1/50.
        #[arg(long, value_parser = parse_rate, default_value = "0")]
        desync: Ratio,
    },
    /// Compute and pack Δdata for a diversified symbol file.
    Delta {
        #[arg(long)]
        default_sym: PathBuf,
        #[arg(long)]
        opplog: PathBuf,
        #[arg(long)]
        div_sym: PathBuf,
        #[arg(long, value_parser = parse_seeds)]
        seeds: SeedTuple,
        #[arg(long)]
        out: PathBuf,
        /// HMAC key as hex.
        #[arg(long, value_parser = parse_key)]
        key: Option<HexKey>,
        #[command(flatten)]
        div: DiversifyFlags,
    },
    /// Simulate a crash in a built image.
    Crash {
        #[arg(long)]
        image: PathBuf,
        /// The laid-out model written next to the image.
        #[arg(long)]
        model: PathBuf,
        /// Call chain `function:block:instr,...`, outermost first.
        #[arg(long)]
        chain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct the symbol file and print the stack trace.
    Report {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        default_sym: PathBuf,
        #[arg(long)]
        opplog: PathBuf,
        #[arg(long, value_parser = parse_key)]
        key: Option<HexKey>,
    },
    /// Size, exactness and stability metrics over a corpus.
    Metrics {
        #[arg(long)]
        corpus: PathBuf,
        /// One `P,N,F` seed tuple per line.
        #[arg(long)]
        seeds_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        build: BuildFlags,
        #[arg(long, value_parser = parse_ratio, default_value = "1/5")]
        nop_prob: Ratio,
        #[arg(long, value_parser = parse_rate, default_value = "0")]
        desync: Ratio,
        #[arg(long)]
        timings: bool,
    },
}

#[derive(Args, Clone, Copy)]
struct BuildFlags {
    #[arg(long)]
    no_default_padding: bool,
    #[arg(long)]
    sp_fp_opt: bool,
}

#[derive(Args, Clone)]
struct DiversifyFlags {
    #[arg(long, value_parser = parse_ratio, default_value = "1/5")]
    nop_prob: Ratio,
    /// Comma-separated subset of `pad,nops,shuffle`.
    #[arg(long, value_parser = parse_schemes, default_value = "pad,nops,shuffle")]
    schemes: Schemes,
}

enum CliError {
    Input(String),
    Auth(String),
    PatchCorrupt(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Auth(_) => 3,
            CliError::PatchCorrupt(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Auth(m) | CliError::PatchCorrupt(m) => m,
        }
    }
}

fn input<E: std::fmt::Display>(ctx: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Input(format!("{ctx}: {e}"))
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let s = s.trim();
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|e| format!("`{s}`: {e}"))
}

fn parse_seeds(s: &str) -> Result<SeedTuple, String> {
    let v: Vec<u64> = s.split(',').map(parse_u64).collect::<Result<_, _>>()?;
    match v[..] {
        [pad_seed, nop_seed, shuffle_seed] => Ok(SeedTuple { pad_seed, nop_seed, shuffle_seed }),
        _ => Err(format!("expected three seeds P,N,F, got `{s}`")),
    }
}

fn parse_ratio(s: &str) -> Result<Ratio, String> {
    s.parse()
}

/// A ratio or a decimal fraction with up to six digits.
fn parse_rate(s: &str) -> Result<Ratio, String> {
    if s.contains('/') {
        return s.parse();
    }
    let x: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if !(0.0..=1.0).contains(&x) {
        return Err(format!("rate {s} outside [0, 1]"));
    }
    Ratio::new((x * 1e6).round() as u32, 1_000_000).ok_or_else(|| format!("invalid rate {s}"))
}

fn parse_schemes(s: &str) -> Result<Schemes, String> {
    let mut out = Schemes { padding: false, nops: false, shuffle: false };
    for part in s.split(',').filter(|p| !p.is_empty()) {
        match part {
            "pad" => out.padding = true,
            "nops" => out.nops = true,
            "shuffle" => out.shuffle = true,
            _ => return Err(format!("unknown scheme `{part}`")),
        }
    }
    Ok(out)
}

#[derive(Clone)]
struct HexKey(Vec<u8>);

fn parse_key(s: &str) -> Result<HexKey, String> {
    let k = hex::decode(s).map_err(|e| e.to_string())?;
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok(HexKey(k))
}

fn read_text(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(input(p.display()))
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(p, bytes).map_err(input(p.display()))
}

fn read_model(p: &Path) -> Result<ProgramModel, CliError> {
    parse_model(&read_text(p)?).map_err(input(p.display()))
}

fn read_symfile(p: &Path) -> Result<SymbolFile, CliError> {
    parse_symbol_file(&read_text(p)?).map_err(input(p.display()))
}

fn read_opplog(p: &Path) -> Result<OpportunityLog, CliError> {
    OpportunityLog::parse(&read_text(p)?).map_err(input(p.display()))
}

fn layout_options(b: BuildFlags) -> LayoutOptions {
    LayoutOptions { default_padding: !b.no_default_padding, sp_fp_opt: b.sp_fp_opt, ..LayoutOptions::default() }
}

/// Writes `image.dimg`, `symbols.sym` and `laid_out.model`. The image holds
/// the code bytes and, in `.layout`, what is needed to lay the model out
/// again.
fn write_build(dir: &Path, b: &Build, options: &LayoutOptions) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(input(dir.display()))?;
    let order: Vec<String> = b.layout.order.iter().map(usize::to_string).collect();
    let meta =
        format!("base={} sp_fp_opt={} order={}\n", b.layout.base_address, u8::from(options.sp_fp_opt), order.join(","));
    let mut img = Image::default();
    img.add(".text", b.layout.text.clone()).expect("fixed section names");
    img.add(".layout", meta.into_bytes()).expect("fixed section names");
    write(&dir.join("image.dimg"), img.to_bytes())?;
    let sym = emit_symbol_file(&b.layout.symfile).map_err(input("symbol file"))?;
    write(&dir.join("symbols.sym"), sym)?;
    write(&dir.join("laid_out.model"), write_model(&b.model))
}

fn parse_layout_meta(s: &str) -> Result<(LayoutOptions, Vec<usize>), String> {
    let mut options = LayoutOptions::default();
    let mut order = None;
    for kv in s.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad field `{kv}`"))?;
        match k {
            "base" => options.base_address = v.parse().map_err(|_| format!("bad base `{v}`"))?,
            "sp_fp_opt" => options.sp_fp_opt = v == "1",
            "order" => {
                order = Some(
                    v.split(',')
                        .filter(|x| !x.is_empty())
                        .map(|x| x.parse().map_err(|_| format!("bad order entry `{x}`")))
                        .collect::<Result<Vec<usize>, _>>()?,
                )
            }
            _ => return Err(format!("unknown field `{k}`")),
        }
    }
    Ok((options, order.ok_or("missing order")?))
}

fn parse_chain(s: &str, model: &ProgramModel) -> Result<Vec<CrashSite>, String> {
    s.split(',')
        .map(|site| {
            let parts: Vec<&str> = site.split(':').collect();
            let [name, block, instr] = parts[..] else {
                return Err(format!("site `{site}` is not function:block:instr"));
            };
            Ok(CrashSite {
                function: model.function_index(name).ok_or_else(|| format!("no function `{name}`"))?,
                block: block.parse().map_err(|_| format!("bad block `{block}`"))?,
                instr: instr.parse().map_err(|_| format!("bad instruction `{instr}`"))?,
            })
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { seed, n, class, out } => {
            fs::create_dir_all(&out).map_err(input(out.display()))?;
            for (i, m) in generate_corpus(seed, n, class).iter().enumerate() {
                write(&out.join(format!("prog{i:03}.model")), write_model(m))?;
            }
        }
        Command::Build { model, out, build } => {
            let options = layout_options(build);
            let (b, log) = build_default(&read_model(&model)?, &options).map_err(input("layout"))?;
            write_build(&out, &b, &options)?;
            write(&out.join("opportunity.log"), log.to_text())?;
        }
        Command::Diversify { model, seeds, out, build, div, desync } => {
            let options = LayoutOptions {
                nop_probability: div.nop_prob,
                schemes: div.schemes,
                desync_rate: desync,
                ..layout_options(build)
            };
            let (b, log) = build_diversified(&read_model(&model)?, &seeds, &options).map_err(input("layout"))?;
            write_build(&out, &b, &options)?;
            write(&out.join("decision.log"), log.to_text())?;
        }
        Command::Delta { default_sym, opplog, div_sym, seeds, out, key, div } => {
            let log = read_opplog(&opplog)?;
            let params = DeltaParams {
                nop_probability: div.nop_prob,
                default_padding: log.default_padding,
                sp_fp_opt: log.sp_fp_opt,
                schemes: div.schemes,
            };
            let dd = make_delta(&read_symfile(&default_sym)?, &log, &read_symfile(&div_sym)?, &seeds, &params)
                .map_err(input("delta"))?;
            write(&out, pack(&dd, key.as_ref().map(|k| k.0.as_slice())))?;
        }
        Command::Crash { image, model, chain, out } => {
            let bytes = fs::read(&image).map_err(input(image.display()))?;
            let img = Image::from_bytes(&bytes).map_err(input(image.display()))?;
            let meta = img.section(".layout").ok_or_else(|| CliError::Input("image has no .layout".into()))?;
            let (options, order) = parse_layout_meta(&String::from_utf8_lossy(meta)).map_err(input(".layout"))?;
            let m = read_model(&model)?;
            let lr = layout(&m, &order, &options).map_err(input("layout"))?;
            if img.section(".text") != Some(&lr.text[..]) {
                return Err(CliError::Input("model does not reproduce the image's code".into()));
            }
            let chain = parse_chain(&chain, &m).map_err(input("chain"))?;
            let dump = simulate_crash(&lr, &m, &chain).map_err(input("crash"))?;
            write(&out, dump.to_text())?;
        }
        Command::Report { dump, delta, default_sym, opplog, key } => {
            let dump = MinidumpLite::parse(&read_text(&dump)?).map_err(input(dump.display()))?;
            let dd = fs::read(&delta).map_err(input(delta.display()))?;
            let trace = report(
                &dump,
                &dd,
                &read_symfile(&default_sym)?,
                &read_opplog(&opplog)?,
                key.as_ref().map(|k| k.0.as_slice()),
            )
            .map_err(|e| match e {
                ReportError::Auth => CliError::Auth(e.to_string()),
                ReportError::PatchCorrupt(_) | ReportError::Delta(UnpackError::Payload(_)) => {
                    CliError::PatchCorrupt(e.to_string())
                }
                e => CliError::Input(e.to_string()),
            })?;
            print!("{}", trace.render());
        }
        Command::Metrics { corpus, seeds_file, out, build, nop_prob, desync, timings } => {
            let mut paths: Vec<PathBuf> = fs::read_dir(&corpus)
                .map_err(input(corpus.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "model"))
                .collect();
            paths.sort();
            let models = paths.iter().map(|p| read_model(p)).collect::<Result<Vec<_>, _>>()?;
            let seeds = read_text(&seeds_file)?
                .lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .map(parse_seeds)
                .collect::<Result<Vec<_>, _>>()
                .map_err(input(seeds_file.display()))?;
            let options = LayoutOptions { nop_probability: nop_prob, desync_rate: desync, ..layout_options(build) };
            let r = corpus_metrics(&models, &seeds, &options).map_err(input("layout"))?;
            write(&out, r.render(timings))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("divcrash: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
