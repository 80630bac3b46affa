//! `pinlab` subcommands. Exit codes: 0 success, 1 usage, 2 runtime.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pinlab_core::amplification::{amplification_sweep, Placement, RegionSpec};
use pinlab_core::dissect::{
    ablate_synthesize, detect_regions, iterative_ablation, keep_one_unit, noise_resample_with_seeds, AblationMask,
};
use pinlab_core::generator::{
    bias_scatter, channel_profile, synthesize, GeneratorConfig, GeneratorParams, LatentZ, NoiseInputs, NormKind,
    SynthesisTrace, UnitRef,
};
use pinlab_core::training::{rho_histogram, variant_compare, Checkpoint, MetricsRow, TrainError, TrainState};
use pinlab_core::Tensor;

use crate::config::RunConfig;
use crate::{checkpoint, image, report};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.spck";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.spck";

#[derive(Debug, Parser)]
#[command(name = "pinlab", version, about = "Normalization artifact lab: amplification model, toy generator, dissection and training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form and planted-map post-IN region means over an alpha grid.
    Amplify(AmplifyArgs),
    /// Render one image with full trace panels and region report.
    Synth(GenArgs),
    /// Like `synth` with units zeroed after their convolution.
    Ablate(AblateArgs),
    /// Iterative ablation, noise resampling and per-site inspection.
    Dissect(DissectArgs),
    /// Train generator and discriminator on the synthetic dataset.
    Train(TrainArgs),
    /// Histogram of rho per PIN site of a checkpoint.
    RhoHist(RhoHistArgs),
    /// Train one generator per normalization variant from shared seeds.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PlacementArg {
    Disc,
    Scattered,
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::Disc => Placement::Disc,
            PlacementArg::Scattered => Placement::Scattered,
        }
    }
}

#[derive(Debug, Args)]
pub struct AmplifyArgs {
    /// Comma-separated region fractions in (0, 0.5].
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub mu1: f64,
    #[arg(long, default_value_t = 0.01)]
    pub mu2: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma1: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma2: f64,
    /// Side length of the planted map.
    #[arg(long)]
    pub l: usize,
    #[arg(long, default_value_t = 8)]
    pub seeds: usize,
    #[arg(long, value_enum, default_value_t = PlacementArg::Disc)]
    pub placement: PlacementArg,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Comma-separated `site:channel` list; empty means no units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskArg(pub Vec<UnitRef>);

pub fn parse_mask(s: &str) -> Result<MaskArg, String> {
    let mut units = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (site, ch) = part
            .split_once(':')
            .ok_or_else(|| format!("mask entry {part:?} is not site:channel"))?;
        let site = site.trim().parse().map_err(|_| format!("bad site in {part:?}"))?;
        let ch = ch.trim().parse().map_err(|_| format!("bad channel in {part:?}"))?;
        let u = UnitRef::new(site, ch);
        if units.contains(&u) {
            return Err(format!("unit {part} listed twice"));
        }
        units.push(u);
    }
    Ok(MaskArg(units))
}

fn parse_unit(s: &str) -> Result<UnitRef, String> {
    match parse_mask(s)?.0.as_slice() {
        [u] => Ok(*u),
        _ => Err(format!("expected one site:channel, got {s:?}")),
    }
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(',').ok_or_else(|| format!("pixel {s:?} is not h,w"))?;
    let h = h.trim().parse().map_err(|_| format!("bad row in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad column in {s:?}"))?;
    Ok((h, w))
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator checkpoint; fresh initialization when omitted.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub z_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Region detector threshold in MADs; overrides the config.
    #[arg(long)]
    pub detect_k: Option<f64>,
    /// Overrides the config's out_dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    /// Units to zero, `site:channel[,...]`.
    #[arg(long, value_parser = parse_mask, default_value = "", conflicts_with = "keep_only")]
    pub mask: MaskArg,
    /// Zero every channel at the site except this one.
    #[arg(long, value_parser = parse_unit)]
    pub keep_only: Option<UnitRef>,
}

#[derive(Debug, Args)]
pub struct DissectArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    /// Site whose units are ablated and inspected.
    #[arg(long, default_value_t = 0)]
    pub site: usize,
    /// Iterative ablation steps.
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    /// Noise seeds for resampling, starting at --noise-seed.
    #[arg(long, default_value_t = 4)]
    pub noise_seeds: usize,
    /// Write the channel profile at `h,w` of --site.
    #[arg(long, value_parser = parse_pixel)]
    pub pixel: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total step count; overrides the config.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Training seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint up to the total step count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RhoHistArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated variants out of IN, PN, PIN.
    #[arg(long, value_delimiter = ',', default_value = "IN,PN,PIN", value_parser = parse_norm)]
    pub variants: Vec<NormKind>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_norm(s: &str) -> Result<NormKind, String> {
    s.parse().map_err(|e: pinlab_core::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn prepare_out_dir(cfg: &RunConfig, flag: Option<&PathBuf>) -> Result<PathBuf> {
    let dir = flag.cloned().unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn load_generator(cfg: &GeneratorConfig, ckpt: Option<&Path>) -> Result<GeneratorParams<Tensor<f32>>> {
    match ckpt {
        Some(p) => {
            let ck = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            ck.generator(cfg).context("config mismatch")
        }
        None => Ok(GeneratorParams::init(cfg)?),
    }
}

struct GenContext {
    gcfg: GeneratorConfig,
    params: GeneratorParams<Tensor<f32>>,
    z: LatentZ,
    noise: NoiseInputs,
    k: f64,
    out: PathBuf,
}

impl GenContext {
    fn new(a: &GenArgs) -> Result<Self> {
        let run = load_config(a.config.as_deref())?;
        let gcfg = run.generator_config()?;
        let params = load_generator(&gcfg, a.ckpt.as_deref())?;
        let k = a.detect_k.unwrap_or(run.detect_k);
        if !(k > 0.0 && k.is_finite()) {
            bail!("detect-k must be positive, got {k}");
        }
        let out = prepare_out_dir(&run, a.out_dir.as_ref())?;
        Ok(Self {
            z: LatentZ::from_seed(a.z_seed, gcfg.latent_dim),
            noise: NoiseInputs::from_seed(a.noise_seed, &gcfg),
            gcfg,
            params,
            k,
            out,
        })
    }

    /// `image.ppm`, trace panels, `normalization.csv`, `regions.csv` and
    /// `regions.pgm` for the final site.
    fn write_outputs(&self, img: &Tensor<f32>, trace: &SynthesisTrace<f32>) -> Result<()> {
        image::save_ppm(&self.out.join("image.ppm"), img)?;
        let norm_rows = image::save_trace_panels(&self.out, trace)?;
        report::save_normalization(&self.out.join("normalization.csv"), &norm_rows)?;
        let rep = detect_regions(trace, self.gcfg.final_site(), self.k)?;
        report::save_regions(&self.out.join("regions.csv"), &rep)?;
        let (px, h, w) = image::region_overlay(trace, &rep)?;
        image::write_file(&self.out.join("regions.pgm"), &image::encode_pgm(&px, h, w))
    }
}

fn cmd_amplify(a: &AmplifyArgs) -> Result<()> {
    let first = *a.alphas.first().context("no alphas given")?;
    let template = RegionSpec::new(first, a.mu1, a.sigma1, a.mu2, a.sigma2, a.l)?;
    let rows = amplification_sweep(&a.alphas, &template, a.seeds, a.placement.into())?;
    match &a.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            report::save_amplify(p, &rows)
        }
        None => report::write_amplify(std::io::stdout().lock(), &rows),
    }
}

fn cmd_synth(a: &GenArgs) -> Result<()> {
    let ctx = GenContext::new(a)?;
    let (img, trace) = synthesize(&ctx.z, &ctx.noise, &ctx.gcfg, &ctx.params)?;
    ctx.write_outputs(&img, &trace)
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let ctx = GenContext::new(&a.gen)?;
    let (img, trace) = match a.keep_only {
        Some(u) => keep_one_unit(&ctx.z, &ctx.noise, &ctx.gcfg, &ctx.params, u.site, u.channel)?,
        None => {
            let mask = AblationMask::from_units(a.mask.0.iter().copied())?;
            ablate_synthesize(&ctx.z, &ctx.noise, &ctx.gcfg, &ctx.params, &mask)?
        }
    };
    ctx.write_outputs(&img, &trace)
}

fn cmd_dissect(a: &DissectArgs) -> Result<()> {
    let ctx = GenContext::new(&a.gen)?;
    let g = &ctx.gcfg;
    let steps = iterative_ablation(&ctx.z, &ctx.noise, g, &ctx.params, a.site, a.steps, ctx.k)?;
    report::save_ablation(&ctx.out.join("ablation.csv"), &steps)?;
    for (i, s) in steps.iter().enumerate() {
        let (img, _) = ablate_synthesize(&ctx.z, &ctx.noise, g, &ctx.params, &s.mask)?;
        image::save_ppm(&ctx.out.join(format!("ablation_step{i}.ppm")), &img)?;
    }
    report::save_regions(&ctx.out.join("regions.csv"), &steps[0].report)?;

    let seeds: Vec<u64> = (0..a.noise_seeds as u64).map(|i| a.gen.noise_seed.wrapping_add(i)).collect();
    let res = noise_resample_with_seeds(&ctx.z, g, &ctx.params, &seeds, ctx.k)?;
    report::save_noise_distances(&ctx.out.join("noise_distances.csv"), &res)?;

    if g.norm_kinds[a.site] == NormKind::Adain {
        report::save_bias_scatter(&ctx.out.join("bias_scatter.csv"), &bias_scatter(g, &ctx.params, a.site)?)?;
    }
    if let Some(px) = a.pixel {
        let (_, trace) = synthesize(&ctx.z, &ctx.noise, g, &ctx.params)?;
        report::save_profile(&ctx.out.join("profile.csv"), &channel_profile(&trace, a.site, px)?)?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let run = load_config(a.config.as_deref())?;
    let gcfg = run.generator_config()?;
    let mut tcfg = run.train_config()?;
    if let Some(s) = a.steps {
        tcfg.steps = s;
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    let data = run.dataset();
    data.validate()?;
    let out = prepare_out_dir(&run, a.out_dir.as_ref())?;
    let ckpt_path = out.join(CHECKPOINT_FILE);

    let state = match &a.resume {
        Some(p) => {
            let ck = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            TrainState::from_checkpoint(&ck, tcfg, gcfg.clone()).context("cannot resume")?
        }
        None => TrainState::new(tcfg, gcfg.clone())?,
    };
    let images = data.generate();
    let mut save_err: Option<anyhow::Error> = None;
    let result = state.run(&images, |st, row: &MetricsRow| {
        if save_err.is_none() && row.step % tcfg.checkpoint_interval == 0 {
            if let Err(e) = checkpoint::save(&ckpt_path, &st.checkpoint()) {
                save_err = Some(e.into());
            }
        }
    });
    if let Some(e) = save_err {
        return Err(e);
    }
    match result {
        Ok(outcome) => {
            checkpoint::save(&ckpt_path, &outcome.checkpoint())?;
            report::save_metrics(&out.join("metrics.csv"), &outcome.metrics)
        }
        Err(TrainError::Diverged {
            step,
            error,
            checkpoint: ck,
            metrics,
        }) => {
            checkpoint::save(&out.join(DIAGNOSTIC_FILE), &ck)?;
            report::save_metrics(&out.join("metrics.csv"), &metrics)?;
            bail!(
                "training diverged at step {step}: {error}; state before the step saved to {}",
                out.join(DIAGNOSTIC_FILE).display()
            )
        }
        Err(TrainError::Setup(e)) => Err(e.into()),
    }
}

fn cmd_rho_hist(a: &RhoHistArgs) -> Result<()> {
    let run = load_config(a.config.as_deref())?;
    let gcfg = run.generator_config()?;
    let ck: Checkpoint = checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let hist = rho_histogram(&ck, &gcfg, a.bins)?;
    let out = prepare_out_dir(&run, a.out_dir.as_ref())?;
    report::save_rho_histogram(&out.join("rho_histogram.csv"), &hist)
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let run = load_config(a.config.as_deref())?;
    let gcfg = run.generator_config()?;
    let mut tcfg = run.train_config()?;
    if let Some(s) = a.steps {
        tcfg.steps = s;
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    let out = prepare_out_dir(&run, a.out_dir.as_ref())?;
    let rows = variant_compare(&a.variants, tcfg, &gcfg, &run.dataset())?;
    report::save_compare(&out.join("compare.csv"), &rows)?;
    for r in &rows {
        let name = r.variant.name();
        report::save_metrics(&out.join(format!("metrics_{name}.csv")), &r.metrics)?;
        checkpoint::save(&out.join(format!("checkpoint_{name}.spck")), &r.checkpoint)?;
        if r.variant == NormKind::PinStyle {
            let cfg = gcfg.clone().with_uniform_norm(r.variant);
            let hist = rho_histogram(&r.checkpoint, &cfg, 10)?;
            report::save_rho_histogram(&out.join(format!("rho_histogram_{name}.csv")), &hist)?;
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Amplify(a) => cmd_amplify(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Dissect(a) => cmd_dissect(a),
        Command::Train(a) => cmd_train(a),
        Command::RhoHist(a) => cmd_rho_hist(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

/// Parse `args` (program name first), run, and map the outcome to an
/// exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
