use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use darkspec::darksynth::{export_dark_shading, DarkSynthesizer, SynthesisConfig, DEFAULT_ITERATIONS, DEFAULT_SIGMA};
use darkspec::error::Error;
use darkspec::metrics::{validate_report_with_bins, DEFAULT_BINS};
use darkspec::photon::{
    collect_variance_pairs, collect_variance_single, default_bin_width, fit_gain_with, synthesize_noisy, FitMethod,
    GainModel, VarianceSamples, DEFAULT_PSEUDO_SIGMA,
};
use darkspec::ptb::{encode_ptb, load_tensor, save_tensor, write_atomic};
use darkspec::rng::{domain, substream};
use darkspec::sensorsim::{generate_dark, generate_noisy_pair, SimConfig};
use darkspec::tensor::{FrameMeta, PlanarImage};

#[derive(Parser)]
#[command(name = "darkspec", version, about = "Dark-frame noise synthesis by spectral sampling")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (default: all cores). Output bytes do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize dark frames from one reference dark frame.
    SynthDark(SynthDarkArgs),
    /// Estimate system gain from a noisy frame or clean/noisy pairs.
    EstimateGain(EstimateGainArgs),
    /// Build a noisy frame from a clean one and a synthetic dark frame.
    SynthNoisy(SynthNoisyArgs),
    /// Compare the noise residuals of two dark frames.
    Validate(ValidateArgs),
    /// Write simulated dark frames and clean/noisy pairs with ground truth.
    SimulateSensor(SimulateArgs),
    /// Export the smooth dark-shading map of a dark frame.
    ExportShading(ExportShadingArgs),
}

#[derive(Args)]
struct SynthDarkArgs {
    #[arg(long)]
    dark: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Index of the first frame; frame `i` is the same whatever the range.
    #[arg(long, default_value_t = 0)]
    first_index: u64,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent phase per channel instead of one shared field.
    #[arg(long)]
    no_shared_phase: bool,
    /// Skip histogram matching and spectral refinement.
    #[arg(long)]
    no_ihm: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitArg {
    Wls,
    TheilSen,
}

#[derive(Args)]
struct EstimateGainArgs {
    /// Noisy frame; repeat together with --clean for the pair estimator.
    #[arg(long, required = true)]
    noisy: Vec<PathBuf>,
    #[arg(long)]
    clean: Vec<PathBuf>,
    /// ISO recorded in the model (default: from the noisy frame).
    #[arg(long)]
    iso: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_PSEUDO_SIGMA)]
    pseudo_sigma: f64,
    /// Level bin width in DN (default: dynamic range / 256).
    #[arg(long)]
    bin_width: Option<f64>,
    #[arg(long, value_enum, default_value_t = FitArg::Wls)]
    fit: FitArg,
    /// Also write the gain model JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthNoisyArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    gain: PathBuf,
    #[arg(long)]
    dark_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    #[arg(long)]
    quantize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    syn: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON or TOML simulator config (default settings when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long, default_value_t = 0)]
    pairs: usize,
    /// Temporal-noise seed of the dark frame; pair `i` uses `seed + 1 + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportShadingArgs {
    #[arg(long)]
    dark: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code: 1 usage, 2 data or I/O, 3 numerical.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_numerical() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<serde_json::Value, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the thread pool: {e}");
        }
    }
    let json = cli.json;
    let outcome = match cli.command {
        Command::SynthDark(a) => synth_dark(a),
        Command::EstimateGain(a) => estimate_gain(a, json),
        Command::SynthNoisy(a) => synth_noisy(a),
        Command::Validate(a) => validate(a, json),
        Command::SimulateSensor(a) => simulate(a),
        Command::ExportShading(a) => export_shading(a),
    };
    match outcome {
        Ok(value) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&value).expect("JSON output"));
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            if json {
                println!("{}", json!({ "ok": false, "exit_code": f.code, "error": f.message }));
            }
            ExitCode::from(f.code)
        }
    }
}

fn load(path: &Path) -> Result<(PlanarImage, FrameMeta), Failure> {
    load_tensor(path).map_err(|e| Failure {
        message: format!("{}: {e}", path.display()),
        ..Failure::from(e)
    })
}

fn black_subtracted(img: &PlanarImage, meta: &FrameMeta) -> Result<PlanarImage, Failure> {
    let black = meta.black_level;
    Ok(img.map(|v| v - black)?)
}

fn to_json_file<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON output");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(Failure::from)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    source: String,
    seed: u64,
    index: u64,
    config: &'a SynthesisConfig,
    max_imag_residue: f64,
}

fn synth_dark(a: SynthDarkArgs) -> CmdResult {
    if a.count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    let (dark, meta) = load(&a.dark)?;
    let config = SynthesisConfig {
        sigma: a.sigma,
        iterations: a.iters,
        seed: a.seed,
        shared_phase: !a.no_shared_phase,
        histogram_matching: !a.no_ihm,
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure::data(format!("{}: {e}", a.out_dir.display())))?;
    let synth = DarkSynthesizer::new(&dark, config)?;
    let mut out_meta = meta.clone();
    out_meta.exposure_tag = "synthetic".into();
    let source = a.dark.display().to_string();
    let last = a.first_index.checked_add(a.count).ok_or_else(|| Failure::usage("frame index overflows"))?;
    info!(
        "synthesizing {} frame(s) of {:?} on {} thread(s)",
        a.count,
        dark.shape(),
        rayon::current_num_threads()
    );
    let names: Vec<String> = (a.first_index..last)
        .into_par_iter()
        .map(|index| -> Result<String, Failure> {
            let frame = synth.synthesize(index)?;
            let stem = format!("syn_{}_{}", meta.iso, index);
            let ptb = a.out_dir.join(format!("{stem}.ptb"));
            write_atomic(&ptb, &encode_ptb(&frame.frame, &out_meta)?)?;
            let sidecar = Sidecar {
                source: source.clone(),
                seed: a.seed,
                index,
                config: synth.config(),
                max_imag_residue: frame.max_imag_residue,
            };
            to_json_file(&sidecar, &a.out_dir.join(format!("{stem}.json")))?;
            Ok(ptb.display().to_string())
        })
        .collect::<Result<_, _>>()?;
    info!("wrote {} frame(s) to {}", names.len(), a.out_dir.display());
    Ok(json!({ "ok": true, "command": "synth-dark", "seed": a.seed, "outputs": names }))
}

fn estimate_gain(a: EstimateGainArgs, json: bool) -> CmdResult {
    if !a.clean.is_empty() && a.clean.len() != a.noisy.len() {
        return Err(Failure::usage(format!(
            "{} --clean for {} --noisy; pairs need one of each",
            a.clean.len(),
            a.noisy.len()
        )));
    }
    let noisy: Vec<(PlanarImage, FrameMeta)> = a.noisy.iter().map(|p| load(p)).collect::<Result<_, _>>()?;
    let meta = noisy[0].1.clone();
    let bin = a.bin_width.unwrap_or_else(|| default_bin_width(&meta));
    let samples = if a.clean.is_empty() {
        let mut all = Vec::new();
        for (img, m) in &noisy {
            all.extend(collect_variance_single(&black_subtracted(img, m)?, m, a.pseudo_sigma, bin)?.0);
        }
        VarianceSamples(all)
    } else {
        let mut pairs = Vec::with_capacity(noisy.len());
        for ((n, nm), path) in noisy.iter().zip(&a.clean) {
            let (c, cm) = load(path)?;
            pairs.push((black_subtracted(&c, &cm)?, black_subtracted(n, nm)?));
        }
        collect_variance_pairs(&pairs, &meta, bin)?
    };
    let method = match a.fit {
        FitArg::Wls => FitMethod::WeightedLeastSquares,
        FitArg::TheilSen => FitMethod::TheilSen,
    };
    let model = fit_gain_with(&samples, a.iso.unwrap_or(meta.iso), method)?;
    info!(
        "gain {:.5} DN/e-, intercept {:.4} DN^2, {} groups, r2 {:.4}",
        model.gain, model.var_intercept, model.fit_points, model.fit_r2
    );
    if let Some(out) = &a.out {
        to_json_file(&model, out)?;
    }
    if !json && a.out.is_none() {
        println!("{}", model.to_json());
    }
    Ok(serde_json::to_value(&model).expect("gain model JSON"))
}

fn synth_noisy(a: SynthNoisyArgs) -> CmdResult {
    let text = std::fs::read_to_string(&a.gain).map_err(|e| Failure::data(format!("{}: {e}", a.gain.display())))?;
    let model = GainModel::from_json(&text)?;
    let mut candidates = Vec::new();
    let entries =
        std::fs::read_dir(&a.dark_dir).map_err(|e| Failure::data(format!("{}: {e}", a.dark_dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ptb"))
        .collect();
    paths.sort();
    for p in paths {
        match load_tensor(&p) {
            Ok((_, m)) if m.iso == model.iso => candidates.push(p),
            Ok(_) => {}
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if candidates.is_empty() {
        return Err(Failure::data(format!(
            "no dark frame with ISO {} in {}",
            model.iso,
            a.dark_dir.display()
        )));
    }
    let pick = substream(a.seed, &[domain::PICK]).random_range(0..candidates.len());
    let dark_path = &candidates[pick];
    let (dark, dark_meta) = load(dark_path)?;
    let (clean, clean_meta) = load(&a.clean)?;
    let noisy = synthesize_noisy(
        &black_subtracted(&clean, &clean_meta)?,
        &model,
        &dark,
        &dark_meta,
        a.ratio,
        a.quantize,
        a.seed,
    )?;
    let black = dark_meta.black_level;
    let raw = noisy.map(|v| v + black)?;
    let mut out_meta = dark_meta.clone();
    out_meta.exposure_tag = "synthetic-noisy".into();
    save_tensor(&raw, &out_meta, &a.out)?;
    info!("noisy frame from {} written to {}", dark_path.display(), a.out.display());
    Ok(json!({
        "ok": true,
        "command": "synth-noisy",
        "seed": a.seed,
        "dark": dark_path.display().to_string(),
        "output": a.out.display().to_string(),
    }))
}

fn validate(a: ValidateArgs, json: bool) -> CmdResult {
    let (reference, _) = load(&a.reference)?;
    let (syn, _) = load(&a.syn)?;
    let report = validate_report_with_bins(&reference, &syn, a.sigma, a.bins)?;
    if let Some(out) = &a.out {
        to_json_file(&report, out)?;
    }
    if !json {
        for (c, k) in report.kld.iter().enumerate() {
            println!(
                "channel {c}: kld {k:.5}  mean {:+.4}  var {:+.4}  skew {:+.4}  kurt {:+.4}  spectral {:.4}",
                report.mean_delta[c],
                report.variance_delta[c],
                report.skewness_delta[c],
                report.kurtosis_delta[c],
                report.spectral_l2[c]
            );
        }
        match report.icc_offdiag_delta {
            Some(d) => println!("icc off-diagonal delta {d:+.4}"),
            None => println!("icc off-diagonal delta not computed"),
        }
    }
    Ok(serde_json::to_value(&report).expect("report JSON"))
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let cfg = match &a.config {
        Some(p) => SimConfig::load(p).map_err(|e| Failure {
            message: format!("{}: {e}", p.display()),
            ..Failure::from(e)
        })?,
        None => SimConfig::default(),
    };
    let prefix = a.out_prefix.display().to_string();
    if let Some(parent) = a.out_prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::data(format!("{}: {e}", parent.display())))?;
    }
    let (dark, meta, truth) = generate_dark(&cfg, a.seed)?;
    let mut outputs = vec![format!("{prefix}_dark.ptb")];
    save_tensor(&dark, &meta, &outputs[0])?;
    let black = cfg.black_level;
    for i in 0..a.pairs {
        let (clean, noisy) = generate_noisy_pair(&cfg, a.seed.wrapping_add(1 + i as u64))?;
        for (name, img) in [("clean", clean), ("noisy", noisy)] {
            let path = format!("{prefix}_{name}_{i}.ptb");
            save_tensor(&img.map(|v| v + black)?, &meta, &path)?;
            outputs.push(path);
        }
    }
    let truth_path = format!("{prefix}_truth.json");
    to_json_file(
        &json!({ "config": cfg, "dark_seed": a.seed, "truth": truth.summary() }),
        Path::new(&truth_path),
    )?;
    outputs.push(truth_path);
    info!("wrote {} file(s) with prefix {prefix}", outputs.len());
    Ok(json!({ "ok": true, "command": "simulate-sensor", "outputs": outputs }))
}

fn export_shading(a: ExportShadingArgs) -> CmdResult {
    let (dark, meta) = load(&a.dark)?;
    let shading = export_dark_shading(&dark, a.sigma)?;
    let mut out_meta = meta;
    out_meta.exposure_tag = "dark-shading".into();
    save_tensor(&shading, &out_meta, &a.out)?;
    Ok(json!({ "ok": true, "command": "export-shading", "output": a.out.display().to_string() }))
}
