//! `vqround`: command-line driver for the quantization pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vqround::analysis::{
    default_eps_grid, error_histograms, inf_norm_comparison, singular_spectrum, theory_report,
    ComparisonConfig, TheoryReport,
};
use vqround::hessian::{
    accumulate_hessian, damped_inverse_factor, hessian_aware_init, output_error, HessianConfig,
};
use vqround::io::{format_number, load_tensor, save_tensor, write_csv, write_records};
use vqround::optim::{
    anneal_beta, build_student, e2e_finetune, hard_kl, optimize_blockwise,
    optimize_blockwise_with_base, BetaSchedule, FinetuneConfig, Layer, StudentConfig, TinyNet,
};
use vqround::quant::{compute_quant_params, inverse_rectified_sigmoid, RoundingSpec};
use vqround::reparam::{flatten_blocks, kmeans_fit, Codebook, INIT_MARGIN};
use vqround::{Error, ErrorKind, Tensor2D};

#[derive(Parser)]
#[command(
    name = "vqround",
    version,
    about = "Codebook-reparameterized adaptive rounding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hessian-aware rounding initialization of one layer.
    Init(InitArgs),
    /// K-means codebook over the blocks of a latent matrix.
    Vq(VqArgs),
    /// Codebook optimization, blockwise or end to end.
    Optimize(OptimizeArgs),
    /// Theory checks and comparison reports for latent approximations.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct HessianArgs {
    /// Damping as a fraction of the mean Hessian diagonal.
    #[arg(long, default_value_t = 0.01)]
    percdamp: f32,
    /// Columns processed per lazy-update block.
    #[arg(long, default_value_t = 128)]
    blocksize: usize,
    /// Use the unnormalized error `w - q` in the residual instead of `(w - q) / s`.
    #[arg(long)]
    literal_residual: bool,
}

impl HessianArgs {
    fn config(&self) -> HessianConfig {
        HessianConfig {
            percdamp: self.percdamp,
            blocksize: self.blocksize,
            literal_residual: self.literal_residual,
        }
    }
}

#[derive(Args)]
struct InitArgs {
    /// Weight matrix, `out x in`.
    #[arg(long)]
    weights: PathBuf,
    /// Calibration inputs, `in x T`.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 3)]
    bits: u32,
    #[command(flatten)]
    hessian: HessianArgs,
    /// Writes `<prefix>_wq.vqt`, `_b.vqt`, `_htilde.vqt` and `_latent.vqt`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct VqArgs {
    #[arg(long)]
    latent: PathBuf,
    #[arg(long, default_value_t = 4096)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes `<out>.centroids.vqt` and `<out>.indices.bin`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Blockwise,
    E2e,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Linear,
    Cosine,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 1e-2)]
    lr: f32,
    #[arg(long, default_value_t = 1e-2)]
    lambda: f32,
    #[arg(long, default_value_t = 20.0)]
    beta_high: f32,
    #[arg(long, default_value_t = 2.0)]
    beta_low: f32,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    warmup_frac: f32,
    /// Distillation temperature.
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    #[arg(long, value_enum, default_value_t = Schedule::Linear)]
    schedule: Schedule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.lr,
            lambda: self.lambda,
            beta_high: self.beta_high,
            beta_low: self.beta_low,
            steps: self.steps,
            warmup_frac: self.warmup_frac,
            temperature: self.temperature,
            seed: self.seed,
            schedule: match self.schedule {
                Schedule::Linear => BetaSchedule::Linear,
                Schedule::Cosine => BetaSchedule::Cosine,
            },
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Blockwise: layer weights, `out x in`.
    #[arg(long, required_if_eq("mode", "blockwise"))]
    weights: Option<PathBuf>,
    /// Blockwise: calibration inputs, `in x T`.
    #[arg(long, required_if_eq("mode", "blockwise"))]
    calib: Option<PathBuf>,
    /// Blockwise: prefix of the initial codebook.
    #[arg(long, required_if_eq("mode", "blockwise"))]
    codebook: Option<PathBuf>,
    /// Blockwise: integer rounding base from `init`; defaults to `floor(W / s)`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// End to end: teacher layer weights in forward order, repeatable.
    #[arg(long = "layer", required_if_eq("mode", "e2e"))]
    layers: Vec<PathBuf>,
    /// End to end: inputs, one sample per row.
    #[arg(long, required_if_eq("mode", "e2e"))]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    bits: u32,
    /// End to end: codebook size per layer, capped at the layer's block count.
    #[arg(long, default_value_t = 4096)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 100)]
    kmeans_iters: usize,
    #[command(flatten)]
    hessian: HessianArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Output codebook prefix; end to end appends `_l<i>` per layer.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace; defaults to `<out>_loss.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Reference latent matrix.
    #[arg(long)]
    latent: PathBuf,
    /// Approximate latent, `name=path`, repeatable.
    #[arg(long = "approx", value_parser = parse_named)]
    approx: Vec<(String, PathBuf)>,
    /// Rounding matrix to check for an approximation, `name=path`; defaults to `h(approx)`.
    #[arg(long = "approx-h", value_parser = parse_named)]
    approx_h: Vec<(String, PathBuf)>,
    /// Also compare against methods fitted to this parameter budget.
    #[arg(long)]
    budget: Option<usize>,
    /// Methods fitted under `--budget`.
    #[arg(long, value_delimiter = ',', default_value = "vq,lowrank,kronecker")]
    compare: Vec<String>,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Histogram bins, odd.
    #[arg(long, default_value_t = 41)]
    bins: usize,
    /// Tail thresholds on a geometric grid over [0.01, 1].
    #[arg(long, default_value_t = 20)]
    eps_points: usize,
    #[arg(long)]
    report_dir: PathBuf,
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

type CmdResult = Result<(), Error>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Init(args) => cmd_init(&args),
        Command::Vq(args) => cmd_vq(&args),
        Command::Optimize(args) => cmd_optimize(&args),
        Command::Analyze(args) => cmd_analyze(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Io => 2,
        ErrorKind::Shape => 3,
        ErrorKind::Domain => 4,
        ErrorKind::Theorem => 5,
    }
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    s.into()
}

fn cmd_init(args: &InitArgs) -> CmdResult {
    let w = load_tensor(&args.weights)?;
    let x = load_tensor(&args.calib)?;
    if w.cols() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "weights have {} columns, calibration has {} rows",
            w.cols(),
            x.rows()
        )));
    }
    let p = compute_quant_params(&w, args.bits)?;
    let hcfg = args.hessian.config();
    let factor = damped_inverse_factor(&accumulate_hessian(&x)?, &hcfg)?;
    let init = hessian_aware_init(&w, &p, &factor, &hcfg)?;
    let spec = RoundingSpec::default();
    let latent = inverse_rectified_sigmoid(
        &init
            .h_tilde
            .map(|v| v.clamp(INIT_MARGIN, 1.0 - INIT_MARGIN)),
        &spec,
    )?;

    save_tensor(&init.w_q, suffixed(&args.out_prefix, "_wq.vqt"))?;
    save_tensor(&init.base, suffixed(&args.out_prefix, "_b.vqt"))?;
    save_tensor(&init.h_tilde, suffixed(&args.out_prefix, "_htilde.vqt"))?;
    save_tensor(&latent, suffixed(&args.out_prefix, "_latent.vqt"))?;
    println!(
        "recon_err={}",
        format_number(output_error(&w, &init.w_q, &x)?)
    );
    Ok(())
}

fn cmd_vq(args: &VqArgs) -> CmdResult {
    let a = load_tensor(&args.latent)?;
    let fit = kmeans_fit(&flatten_blocks(&a, args.d)?, args.k, args.iters, args.seed)?;
    fit.codebook
        .clone()
        .with_shape(a.shape())?
        .save(&args.out)?;
    println!("wcss={}", format_number(fit.wcss()));
    Ok(())
}

fn cmd_optimize(args: &OptimizeArgs) -> CmdResult {
    let cfg = args.train.config();
    cfg.validate()?;
    let trace = args
        .trace
        .clone()
        .unwrap_or_else(|| suffixed(&args.out, "_loss.csv"));
    match args.mode {
        Mode::Blockwise => optimize_layer(args, &cfg, &trace),
        Mode::E2e => optimize_model(args, &cfg, &trace),
    }
}

fn schedule_rows(cfg: &FinetuneConfig, losses: &[f64]) -> Result<Vec<Vec<f64>>, Error> {
    losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| {
            let t = i + 1;
            Ok(vec![
                t as f64,
                anneal_beta(t, cfg)? as f64,
                cfg.lambda_at(t),
                loss,
            ])
        })
        .collect()
}

fn optimize_layer(args: &OptimizeArgs, cfg: &FinetuneConfig, trace: &Path) -> CmdResult {
    let required = |p: &Option<PathBuf>| p.clone().expect("enforced by the parser");
    let w = load_tensor(required(&args.weights))?;
    let x = load_tensor(required(&args.calib))?;
    let cb = Codebook::load(required(&args.codebook))?;
    let p = compute_quant_params(&w, args.bits)?;
    let spec = RoundingSpec::default();
    let run = match &args.base {
        Some(path) => {
            let base = load_tensor(path)?;
            optimize_blockwise_with_base(&w, &x, &p, &base, &cb, &spec, cfg)?
        }
        None => optimize_blockwise(&w, &x, &p, &cb, &spec, cfg)?,
    };
    run.codebook.save(&args.out)?;
    write_csv(
        &["step", "beta", "lambda", "loss"],
        &schedule_rows(cfg, &run.losses)?,
        trace,
    )?;
    println!(
        "initial_loss={} final_loss={}",
        format_number(run.initial_loss),
        format_number(run.final_loss)
    );
    Ok(())
}

fn optimize_model(args: &OptimizeArgs, cfg: &FinetuneConfig, trace: &Path) -> CmdResult {
    let layers = args
        .layers
        .iter()
        .map(|p| load_tensor(p).map(Layer::dense))
        .collect::<Result<Vec<_>, _>>()?;
    let teacher = TinyNet::new(layers)?;
    let inputs = load_tensor(args.data.as_ref().expect("enforced by the parser"))?;
    let data = (0..inputs.rows())
        .map(|i| Tensor2D::new(1, inputs.cols(), inputs.row(i).to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = RoundingSpec::default();
    let hcfg = args.hessian.config();
    hcfg.validate()?;
    let scfg = StudentConfig {
        bits: args.bits,
        k: args.k,
        d: args.d,
        kmeans_iters: args.kmeans_iters,
        seed: args.train.seed,
        hessian: Some(hcfg),
        ..Default::default()
    };
    let student = build_student(&teacher, &data, &spec, &scfg)?;
    let run = e2e_finetune(&teacher, &student, &data, &spec, cfg)?;
    for (i, cb) in run.codebooks.iter().enumerate() {
        cb.save(suffixed(&args.out, &format!("_l{i}")))?;
    }
    let mut rows = schedule_rows(cfg, &run.losses)?;
    for (row, (kd, reg)) in rows
        .iter_mut()
        .zip(run.kd_losses.iter().zip(&run.reg_terms))
    {
        row.extend([*kd, *reg]);
    }
    write_csv(
        &["step", "beta", "lambda", "loss", "kd", "regularizer"],
        &rows,
        trace,
    )?;
    let finished = student.with_codebooks(&run.codebooks)?;
    let kl = hard_kl(&teacher, &finished, &data, &spec, cfg.temperature)?;
    println!(
        "final_loss={} hard_kl={}",
        run.losses
            .last()
            .map_or("nan".into(), |&l| format_number(l)),
        format_number(kl)
    );
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> CmdResult {
    let a = load_tensor(&args.latent)?;
    let spec = RoundingSpec::default();
    let mut methods = Vec::new();
    for (name, path) in &args.approx {
        methods.push((name.clone(), load_tensor(path)?));
    }
    let mut norms = Vec::new();
    if let Some(budget) = args.budget {
        let cmp = inf_norm_comparison(
            &a,
            budget,
            &ComparisonConfig {
                d: args.d,
                kmeans_iters: args.iters,
                seed: args.seed,
            },
        )?;
        for known in &args.compare {
            if cmp.row(known).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "unknown comparison method {known:?}"
                )));
            }
        }
        for (row, (name, approx)) in cmp.rows.iter().zip(cmp.approximations) {
            if args.compare.contains(&name) {
                norms.push((
                    name.clone(),
                    row.params,
                    row.inf,
                    row.spectral,
                    row.frobenius,
                ));
                methods.push((name, approx));
            }
        }
    }
    for (name, _) in &args.approx_h {
        if !methods.iter().any(|(m, _)| m == name) {
            return Err(Error::InvalidConfig(format!(
                "rounding matrix given for unknown approximation {name:?}"
            )));
        }
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig(
            "nothing to analyze: pass --approx or --budget".into(),
        ));
    }

    let eps = default_eps_grid(args.eps_points);
    let mut reports: Vec<(String, TheoryReport)> = Vec::new();
    for (name, approx) in &methods {
        let h = match args.approx_h.iter().find(|(m, _)| m == name) {
            Some((_, path)) => Some(load_tensor(path)?),
            None => None,
        };
        reports.push((
            name.clone(),
            theory_report(&a, approx, h.as_ref(), &spec, &eps)?,
        ));
    }

    std::fs::create_dir_all(&args.report_dir).map_err(Error::Io)?;
    write_records(
        &["method", "metric", "eps", "value"],
        &theory_rows(&reports, &norms),
        args.report_dir.join("theory.csv"),
    )?;
    write_histograms(&a, &methods, &spec, args)?;
    write_spectra(&a, &methods, args)?;

    let mut failed = Vec::new();
    for (name, report) in &reports {
        let clip_rate = report.clip_rate();
        println!(
            "method={name} lipschitz_l={} max_ratio={} clip_rate={} clip_bound={}",
            format_number(report.lipschitz_l()),
            report
                .max_observed_ratio()
                .map_or("nan".into(), format_number),
            format_number(clip_rate),
            format_number(report.clip_bound())
        );
        failed.extend(
            report
                .violations()
                .into_iter()
                .map(|v| format!("{name}: {v}")),
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::TheoremViolation(failed.join("; ")))
    }
}

type NormEntry = (String, usize, f64, f64, f64);

fn theory_rows(reports: &[(String, TheoryReport)], norms: &[NormEntry]) -> Vec<Vec<String>> {
    let cell = |name: &str, metric: &str, eps: Option<f64>, value: f64| {
        vec![
            name.to_string(),
            metric.to_string(),
            eps.map_or(String::new(), format_number),
            format_number(value),
        ]
    };
    let mut rows = Vec::new();
    for (name, r) in reports {
        let l = &r.lipschitz;
        rows.push(cell(name, "lipschitz_l", None, l.lipschitz_l));
        rows.push(cell(
            name,
            "max_observed_ratio",
            None,
            l.max_ratio.unwrap_or(f64::NAN),
        ));
        rows.push(cell(name, "dh_inf", None, l.dh_inf));
        rows.push(cell(name, "da_inf", None, l.da_inf));
        rows.push(cell(name, "clip_rate", None, r.clip_rate()));
        rows.push(cell(name, "clip_bound", None, r.clip_bound()));
        rows.push(cell(
            name,
            "converse_violations",
            None,
            r.clip.converse_violations as f64,
        ));
        for t in &r.tail {
            rows.push(cell(name, "tail_lhs", Some(t.eps), t.lhs));
            rows.push(cell(name, "tail_rhs", Some(t.eps), t.rhs));
        }
    }
    for (name, params, inf, spectral, frobenius) in norms {
        rows.push(cell(name, "params", None, *params as f64));
        rows.push(cell(name, "inf_norm", None, *inf));
        rows.push(cell(name, "spectral_norm", None, *spectral));
        rows.push(cell(name, "frobenius_norm", None, *frobenius));
    }
    rows
}

fn write_histograms(
    a: &Tensor2D,
    methods: &[(String, Tensor2D)],
    spec: &RoundingSpec,
    args: &AnalyzeArgs,
) -> CmdResult {
    let hist = error_histograms(a, methods, spec, args.bins)?;
    let mut headers = vec!["bin".to_string(), "da_center".into(), "dh_center".into()];
    for m in &hist.methods {
        headers.push(format!("{}_da_density", m.label));
        headers.push(format!("{}_dh_density", m.label));
    }
    let center = |edges: &[f64], i: usize| 0.5 * (edges[i] + edges[i + 1]);
    let rows: Vec<Vec<f64>> = (0..hist.bins)
        .map(|i| {
            let mut row = vec![i as f64, center(&hist.a_edges, i), center(&hist.h_edges, i)];
            for m in &hist.methods {
                row.extend([m.da_density[i], m.dh_density[i]]);
            }
            row
        })
        .collect();
    let headers: Vec<&str> = headers.iter().map(String::as_str).collect();
    write_csv(&headers, &rows, args.report_dir.join("histograms.csv"))
}

fn write_spectra(a: &Tensor2D, methods: &[(String, Tensor2D)], args: &AnalyzeArgs) -> CmdResult {
    let mut columns = vec![("latent".to_string(), singular_spectrum(a))];
    for (name, approx) in methods {
        let diff = Tensor2D::new(
            a.rows(),
            a.cols(),
            a.data()
                .iter()
                .zip(approx.data())
                .map(|(x, y)| y - x)
                .collect(),
        )?;
        columns.push((format!("{name}_error"), singular_spectrum(&diff)));
    }
    let mut headers = vec!["index".to_string()];
    headers.extend(columns.iter().map(|(n, _)| n.clone()));
    let len = columns[0].1.len();
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|i| {
            let mut row = vec![(i + 1) as f64];
            row.extend(columns.iter().map(|(_, s)| s[i]));
            row
        })
        .collect();
    let headers: Vec<&str> = headers.iter().map(String::as_str).collect();
    write_csv(&headers, &rows, args.report_dir.join("spectrum.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vqround::analysis::lipschitz_constant;

    #[test]
    fn named_paths_parse() {
        assert_eq!(
            parse_named("vq=a/b.vqt").unwrap(),
            ("vq".to_string(), PathBuf::from("a/b.vqt"))
        );
        assert!(parse_named("vq").is_err());
        assert!(parse_named("=x").is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(Error::BitsOutOfRange(1).kind()), 4);
        assert_eq!(exit_code(Error::ShapeMismatch(String::new()).kind()), 3);
        assert_eq!(exit_code(Error::TheoremViolation(String::new()).kind()), 5);
        assert_eq!(exit_code(Error::EmptyCalibration.kind()), 4);
    }

    #[test]
    fn lipschitz_default_matches_reports() {
        let l = lipschitz_constant(&RoundingSpec::default());
        assert!((l - 0.3).abs() < 1e-6);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
