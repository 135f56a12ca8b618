//! `glass`: every pipeline stage as a subcommand.

mod args;
mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use glass_core::eval::{
    compare_masks, compare_prepared, default_top_k, jaccard_radar_csv, prepare_documents, sweep_csv, sweep_rows,
    write_csv, EvalOptions, EvalReport, GlobalStats,
};
use glass_core::fixture::{drift_document, planted_units, DriftConfig};
use glass_core::importance::{
    global_activation_stats, global_impact_stats, impact_locality_report, local_activation_stats, nps_generate,
    per_document_impact_stats, Corpus, ImportanceStats, LocalityReport, NpsConfig,
};
use glass_core::model::{init_model, Model, ModelSpec, PlantedSpec, TokenId};
use glass_core::pruning::{build_masks, Method, NeuronMask};
use glass_core::storage::{load, save};
use glass_core::sweep::{density_to_k, per_seed_csv, run_sweep, sweep_single, SweepConfig, SweepOutput};
use glass_core::verify::{run_oracle_suite, VerifyOptions};
use serde::de::DeserializeOwned;
use serde_json::Value;

use args::*;

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn io(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<glass_core::Error> for CliError {
    fn from(e: glass_core::Error) -> Self {
        CliError { code: e.exit_code() as u8, message: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

const VERIFY_FAILED: u8 = 4;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}

fn run(argv: Vec<OsString>) -> Result<()> {
    let argv = match config::config_path(&argv) {
        Some(path) => config::merge(argv.clone(), &path)?,
        None => argv,
    };
    let cli = parse(argv)?;
    init_threads()?;
    match cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::Nps(a) => nps(a),
        Command::Stats(a) => stats(a),
        Command::Mask(a) => mask(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Verify(a) => verify(a),
        Command::GenDocs(a) => gen_docs(a),
    }
}

fn parse(argv: Vec<OsString>) -> Result<Cli> {
    Cli::try_parse_from(argv).map_err(|e| {
        // clap prints help and version to stdout, usage errors to stderr
        let _ = e.print();
        if e.exit_code() == 0 {
            std::process::exit(0);
        }
        CliError { code: e.exit_code() as u8, message: String::new() }
    })
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("GLASS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| CliError::validation(format!("GLASS_THREADS must be a count, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::validation(format!("thread pool: {e}")))
}

fn enum_from_str<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.replace('-', "_")))
        .map_err(|_| CliError::validation(format!("unknown {what} {s:?}")))
}

fn parse_planted(s: &str, spec: &ModelSpec, scale: f64) -> Result<PlantedSpec> {
    let per_layer: Vec<Vec<usize>> = s
        .split(';')
        .map(|chunk| {
            chunk
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| CliError::validation(format!("bad planted unit {t:?}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let planted = PlantedSpec { layers: per_layer, scale };
    planted.validate(spec)?;
    Ok(planted)
}

fn gen_model(a: GenModelArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<ModelSpec>(&text).map_err(|e| CliError::validation(format!("model spec: {e}")))?
        }
        None => ModelSpec::default(),
    };
    macro_rules! set {
        ($($field:ident <- $flag:expr),*) => { $(if let Some(v) = $flag { spec.$field = v; })* };
    }
    set!(vocab_size <- a.vocab_size, d_model <- a.d_model, ffn_width <- a.ffn_width, n_layers <- a.layers,
         n_heads <- a.heads, max_seq <- a.max_seq, norm_eps <- a.norm_eps, seed <- a.seed);
    if let Some(s) = &a.phi_u {
        spec.phi_u = enum_from_str("phi_u", s)?;
    }
    if let Some(s) = &a.phi_g {
        spec.phi_g = enum_from_str("phi_g", s)?;
    }
    spec.validate()?;
    let planted = match (&a.planted, a.planted_count) {
        (Some(s), _) => Some(parse_planted(s, &spec, a.planted_scale)?),
        (None, Some(n)) => {
            if n > spec.ffn_width {
                return Err(CliError::validation(format!("--planted-count {n} exceeds ffn width {}", spec.ffn_width)));
            }
            let cfg = DriftConfig {
                seed: spec.seed,
                spec: spec.clone(),
                planted_per_layer: n,
                planted_scale: a.planted_scale,
                ..DriftConfig::default()
            };
            Some(planted_units(&cfg))
        }
        (None, None) => None,
    };
    let model = init_model(&spec, planted.as_ref())?;
    let hash = save(&model, &a.out)?;
    println!("{hash}");
    Ok(())
}

fn nps(a: NpsArgs) -> Result<()> {
    if a.count == 0 {
        return Err(CliError::validation("--count must be at least 1"));
    }
    let model: Model = load(&a.model)?;
    let cfg = NpsConfig {
        count: a.count,
        length: a.length,
        seed: a.seed,
        warmup_tokens: a.warmup_tokens,
        warmup_temperature: a.warmup_temperature,
        temperature: a.temperature,
        bigram_penalty: a.bigram_penalty,
    };
    let corpus = nps_generate(&model, &cfg)?;
    let hash = save(&corpus, &a.out)?;
    let fallback = corpus.metadata.as_ref().map_or(0, |m| m.fallback_steps);
    println!("{hash}");
    if fallback > 0 {
        log::warn!("{fallback} sampling steps had every token penalized; the penalty was dropped for them");
    }
    Ok(())
}

fn read_prompt(path: &Path) -> Result<Vec<TokenId>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::validation(format!("bad token id {t:?} in {}", path.display()))))
        .collect()
}

fn locality_csv(report: &LocalityReport) -> Result<Vec<u8>> {
    let mut out = String::from("layer,rank,unit,mean,std,head_mass\n");
    for (l, layer) in report.layers.iter().enumerate() {
        for (r, &j) in layer.order.iter().enumerate() {
            writeln!(out, "{l},{},{j},{},{},{}", r + 1, layer.mean[r], layer.std[r], layer.head_mass).unwrap();
        }
    }
    Ok(out.into_bytes())
}

fn stats(a: StatsArgs) -> Result<()> {
    let model: Model = load(&a.model)?;
    let corpus: Option<Corpus> = a.corpus.as_deref().map(load).transpose()?;
    if a.locality_csv.is_some() && a.kind != KindArg::GlobalImpact {
        return Err(CliError::validation("--locality-csv needs --kind global-impact"));
    }
    let stats = match a.kind {
        KindArg::Local => {
            let prompt = match (&a.prompt_file, &corpus) {
                (Some(p), _) => read_prompt(p)?,
                (None, Some(c)) if c.documents.len() == 1 => c.documents[0].clone(),
                (None, Some(c)) => {
                    return Err(CliError::validation(format!(
                        "local stats need one prompt; the corpus has {} documents",
                        c.documents.len()
                    )))
                }
                (None, None) => unreachable!("clap requires an input"),
            };
            local_activation_stats(&model, &prompt)?
        }
        KindArg::GlobalAct | KindArg::GlobalImpact => {
            let corpus = corpus.ok_or_else(|| CliError::validation("global stats need --corpus"))?;
            if a.kind == KindArg::GlobalAct {
                global_activation_stats(&model, &corpus)?
            } else {
                let s = global_impact_stats(&model, &corpus)?;
                if let Some(path) = &a.locality_csv {
                    let per_doc = per_document_impact_stats(&model, &corpus)?;
                    let report = impact_locality_report(&s, &per_doc)?;
                    write_csv(path, &locality_csv(&report)?)?;
                    for (l, layer) in report.layers.iter().enumerate() {
                        println!("layer {l}: top-10% head mass {:.4}", layer.head_mass);
                    }
                }
                s
            }
        }
    };
    if stats.skipped_documents > 0 {
        log::warn!("{} documents were too short to contribute", stats.skipped_documents);
    }
    println!("{}", save(&stats, &a.out)?);
    Ok(())
}

fn budget(k: Option<usize>, density: Option<f64>, m: usize) -> Result<usize> {
    match (k, density) {
        (Some(k), _) => Ok(k),
        (None, Some(d)) => Ok(density_to_k(d, m)?),
        (None, None) => Err(CliError::validation("need --k or --density")),
    }
}

fn is_fused(m: Method) -> bool {
    matches!(m, Method::AGlass | Method::IGlass)
}

fn mask(a: MaskArgs) -> Result<()> {
    let model: Model = load(&a.model)?;
    let method: Method = a.method.parse()?;
    if a.lambda.is_some() && !is_fused(method) {
        log::warn!("λ ignored: method {} uses a fixed λ of {}", method.name(), method.effective_lambda(0.5));
    }
    let local: Option<ImportanceStats> = a.local_stats.as_deref().map(load).transpose()?;
    let global: Option<ImportanceStats> = a.global_stats.as_deref().map(load).transpose()?;
    let k = budget(a.k, a.density, model.ffn_width())?;
    let mask = build_masks(&model, method, local.as_ref(), global.as_ref(), k, a.lambda.unwrap_or(0.5), a.tie_policy.into())?;
    println!("{}", save(&mask, &a.out)?);
    Ok(())
}

fn print_report(report: &EvalReport) {
    let md = &report.metadata;
    println!("k = {} of {}, top-K = {}, {} documents, prompt {} tokens", md.k, md.width, md.top_k, md.documents, md.prompt_len);
    println!("{:<18} {:>22} {:>22} {:>9} {:>9}", "method", "ppl (± se)", "kld (± se)", "ref_mass", "jaccard");
    for r in &report.methods {
        let jac = r.jaccard.as_ref().map_or("-".to_string(), |j| format!("{:.4}", j.iter().sum::<f64>() / j.len() as f64));
        println!(
            "{:<18} {:>22} {:>22} {:>9.4} {:>9}",
            r.method.name(),
            format!("{:.4} ± {:.4}", r.ppl.mean, r.ppl.stderr),
            format!("{:.5} ± {:.5}", r.kld.mean, r.kld.stderr),
            r.ref_mass,
            jac
        );
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let model: Model = load(&a.model)?;
    let docs: Corpus = load(&a.docs)?;
    let opts = EvalOptions {
        top_k: a.topk.unwrap_or_else(|| default_top_k(model.vocab_size())),
        gen_len: a.gen_len,
        tie_policy: a.tie_policy.into(),
    };
    let prepared = prepare_documents(&model, &docs.documents, a.prompt_len, &opts)?;
    let report = if !a.mask.is_empty() {
        if !a.methods.is_empty() {
            return Err(CliError::validation("use either --mask or --methods"));
        }
        let masks: Vec<NeuronMask> = a.mask.iter().map(|p| load(p)).collect::<glass_core::Result<_>>()?;
        compare_masks(&model, &prepared, &masks, a.with_oracle, &opts)?
    } else {
        let mut methods: Vec<Method> = a.methods.iter().map(|m| m.parse()).collect::<glass_core::Result<_>>()?;
        if a.with_oracle && !methods.contains(&Method::Oracle) {
            methods.push(Method::Oracle);
        }
        let act: Option<ImportanceStats> = a.global_act_stats.as_deref().map(load).transpose()?;
        let imp: Option<ImportanceStats> = a.global_impact_stats.as_deref().map(load).transpose()?;
        let k = budget(a.k, a.density, model.ffn_width())?;
        let globals = GlobalStats { activation: act.as_ref(), impact: imp.as_ref() };
        compare_prepared(&model, &prepared, k, a.lambda, &methods, globals, &opts)?
    };
    print_report(&report);
    if let Some(p) = &a.out_report {
        save(&report, p)?;
    }
    if let Some(p) = &a.out_csv {
        write_csv(p, &sweep_csv(&sweep_rows(&report))?)?;
    }
    if let Some(p) = &a.out_radar {
        if report.methods.iter().all(|r| r.jaccard.is_none()) {
            return Err(CliError::validation("--out-radar needs Jaccard columns (use --methods or --with-oracle)"));
        }
        write_csv(p, &jaccard_radar_csv(&report)?)?;
    }
    Ok(())
}

/// Inclusive float range "a..b[:step]" or a comma list.
pub fn parse_densities(s: &str) -> Result<Vec<f64>> {
    let bad = || CliError::validation(format!("bad density list {s:?}"));
    if let Some((a, rest)) = s.split_once("..") {
        let (b, step) = rest.split_once(':').unwrap_or((rest, "0.1"));
        let (a, b, step): (f64, f64, f64) =
            (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?, step.trim().parse().map_err(|_| bad())?);
        if !(step > 0.0) || b < a {
            return Err(bad());
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        // rounding keeps 0.1 + 2·0.1 printing as 0.3
        Ok((0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect())
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
    }
}

/// End-exclusive integer range "a..b" or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || CliError::validation(format!("bad seed list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if b <= a {
            return Err(bad());
        }
        Ok((a..b).collect())
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
    }
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut base = DriftConfig::default();
    macro_rules! set {
        ($($field:expr => $flag:expr),*) => { $(if let Some(v) = $flag { $field = v; })* };
    }
    set!(base.prompt_len => a.prompt_len, base.documents => a.documents, base.doc_len => a.doc_len,
         base.topic_len => a.topic_len, base.topic_vocab => a.topic_vocab, base.planted_per_layer => a.planted_count,
         base.nps.count => a.nps_count, base.nps.length => a.nps_length);
    let methods: Vec<Method> = a.methods.iter().map(|m| m.parse()).collect::<glass_core::Result<_>>()?;
    let mut cfg = SweepConfig {
        densities: parse_densities(&a.densities)?,
        methods,
        lambdas: a.lambdas.clone(),
        seeds: parse_seeds(&a.seeds)?,
        base,
        top_k: a.topk,
    };
    let out: SweepOutput = match (&a.model, &a.docs) {
        (Some(mp), Some(dp)) => {
            let model: Model = load(mp)?;
            let docs: Corpus = load(dp)?;
            let act: Option<ImportanceStats> = a.global_act_stats.as_deref().map(load).transpose()?;
            let imp: Option<ImportanceStats> = a.global_impact_stats.as_deref().map(load).transpose()?;
            cfg.base.spec = model.spec.clone();
            cfg.validate()?;
            sweep_single(&model, &docs.documents, cfg.base.prompt_len, act.as_ref(), imp.as_ref(), &cfg)?
        }
        _ => run_sweep(&cfg)?,
    };
    write_csv(&a.out_csv, &sweep_csv(&out.rows)?)?;
    if let Some(p) = &a.per_seed_csv {
        write_csv(p, &per_seed_csv(&out.per_seed)?)?;
    }
    println!("{:<18} {:>8} {:>14} {:>12}", "method", "density", "ppl", "kld");
    for r in out.rows.iter().filter(|r| r.metric == "ppl") {
        let kld = out
            .rows
            .iter()
            .find(|q| q.metric == "kld" && q.method == r.method && q.density == r.density)
            .map_or(f64::NAN, |q| q.mean);
        println!("{:<18} {:>8} {:>14.4} {:>12.5}", r.method, r.density, r.mean, kld);
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let Suite::Oracles = a.suite;
    let results = run_oracle_suite(&VerifyOptions { seed: a.seed, perturb_gradient: a.perturb_gradient });
    println!("{:<22} {:<6} {:>8}  detail", "check", "result", "seconds");
    for r in &results {
        println!("{:<22} {:<6} {:>8.2}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.seconds, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError { code: VERIFY_FAILED, message: format!("failed checks: {}", failed.join(", ")) })
    }
}

fn gen_docs(a: GenDocsArgs) -> Result<()> {
    let model: Model = load(&a.model)?;
    let cfg = DriftConfig {
        seed: a.seed,
        spec: model.spec.clone(),
        documents: a.count,
        doc_len: a.doc_len,
        prompt_len: a.topic_len.min(DriftConfig::default().prompt_len),
        topic_len: a.topic_len,
        topic_vocab: a.topic_vocab,
        continuation_temperature: a.temperature,
        ..DriftConfig::default()
    };
    cfg.validate()?;
    let docs = (0..a.count).map(|i| drift_document(&model, &cfg, i)).collect::<glass_core::Result<Vec<_>>>()?;
    let corpus = Corpus::external(docs, model.vocab_size())?;
    println!("{}", save(&corpus, &a.out)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_ranges() {
        assert_eq!(parse_densities("0.1..0.9").unwrap(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(parse_densities("0.25..1:0.25").unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_densities("0.5, 1").unwrap(), vec![0.5, 1.0]);
        assert!(parse_densities("0.9..0.1").is_err());
    }

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4,7").unwrap(), vec![4, 7]);
        assert!(parse_seeds("3..3").is_err());
    }

    #[test]
    fn planted_spec_parsing() {
        let spec = ModelSpec::default();
        let p = parse_planted("1,2;3", &spec, 4.0).unwrap();
        assert_eq!(p.layers, vec![vec![1, 2], vec![3]]);
        assert_eq!(parse_planted(";", &spec, 4.0).unwrap().layers, vec![Vec::<usize>::new(), vec![]]);
        assert_eq!(parse_planted("64", &spec, 4.0).unwrap_err().code, 2);
        assert_eq!(parse_planted("1;2;3", &spec, 4.0).unwrap_err().code, 2);
        assert_eq!(parse_planted("x", &spec, 4.0).unwrap_err().code, 2);
    }
}
