//! Command-line front end: bundled experiment presets, overrides, result
//! files and SVG figures.

pub mod plot;
pub mod preset;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::{
    self, ExperimentRecord, ExperimentRun, Progress, ReceiverKind,
};
pub use plot::{LinePlot, Series};
pub use preset::{preset_names, run_name, ChannelSpec, Preset, Scale, ScaleSettings, PRESETS};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "POISONLINK_OUT";

/// Exit status for usage errors, unknown presets and invalid configs.
pub const EXIT_USAGE: i32 = 2;
/// Exit status when training aborted; partial results are still written.
pub const EXIT_ABORTED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "poisonlink", version, about = "Deep MIMO receivers under adversarial pilot poisoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a preset or config file and write CSV, JSON and SVG outputs.
    Run(RunArgs),
    /// List the bundled presets.
    List,
    /// Print the effective configuration without running it.
    Show(RunArgs),
    /// Render the cumulative-SER figure of a results CSV.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "cumulative SER")]
        title: String,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// Bundled preset name.
    #[arg(value_name = "PRESET")]
    pub name: Option<String>,
    #[arg(long = "preset", value_name = "NAME", conflicts_with = "name")]
    pub preset: Option<String>,
    /// Experiment file in the preset format.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["name", "preset"])]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "desk|full")]
    pub scale: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Clean arms only.
    #[arg(long)]
    pub no_attack: bool,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub receivers: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST", allow_negative_numbers = true)]
    pub snr: Option<Vec<f64>>,
    #[arg(long, value_name = "N")]
    pub pilot_size: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub l_info: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// No per-block progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

/// Why a preset could not be loaded.
#[derive(Debug)]
pub enum LoadError {
    UnknownPreset(String),
    Missing,
    Invalid(Error),
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadError::UnknownPreset(name) => write!(
                f,
                "unknown preset `{name}`; available presets: {}",
                preset_names().join(", ")
            ),
            LoadError::Missing => write!(f, "give a preset name, --preset or --config"),
            LoadError::Invalid(e) => write!(f, "{e}"),
        }
    }
}

/// Loads the preset named by `args` and applies every override.
pub fn load_preset(args: &RunArgs) -> std::result::Result<Preset, LoadError> {
    let mut preset = match (&args.name, &args.preset, &args.config) {
        (_, _, Some(path)) => Preset::from_file(path).map_err(LoadError::Invalid)?,
        (Some(n), _, _) | (None, Some(n), _) => match Preset::bundled(n) {
            Some(p) => p.map_err(LoadError::Invalid)?,
            None => return Err(LoadError::UnknownPreset(n.clone())),
        },
        _ => return Err(LoadError::Missing),
    };
    apply_overrides(&mut preset, args).map_err(LoadError::Invalid)?;
    preset.validate().map_err(LoadError::Invalid)?;
    Ok(preset)
}

fn apply_overrides(p: &mut Preset, a: &RunArgs) -> Result<()> {
    if let Some(s) = &a.scale {
        p.scale = Scale::parse(s)?;
    }
    if let Some(seed) = a.seed {
        p.seed = seed;
    }
    if let Some(dir) = &a.out_dir {
        p.out_dir = Some(dir.clone());
    }
    if a.no_attack {
        p.attack = false;
    }
    if let Some(list) = &a.receivers {
        p.receivers = list
            .iter()
            .map(|r| ReceiverKind::parse(r.trim()))
            .collect::<Result<_>>()?;
    }
    if let Some(n) = a.pilot_size {
        p.pilot_sizes = vec![n];
    }
    let s = p.settings_mut();
    if let Some(snr) = &a.snr {
        s.snr_db = snr.clone();
    }
    if let Some(v) = a.blocks {
        s.blocks = v;
    }
    if let Some(v) = a.reps {
        s.reps = v;
    }
    if let Some(v) = a.l_info {
        s.l_info = v;
    }
    if let Some(v) = a.epochs {
        s.epochs = v;
    }
    Ok(())
}

/// Output directory: explicit setting, then `POISONLINK_OUT`, then `results`.
pub fn resolve_out_dir(preset: &Preset) -> PathBuf {
    preset
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

/// Everything a preset run produced.
#[derive(Debug)]
pub struct PresetOutcome {
    pub runs: Vec<ExperimentRun>,
    pub files: Vec<PathBuf>,
}

impl PresetOutcome {
    pub fn aborted(&self) -> bool {
        self.runs.iter().any(|r| r.aborted.is_some())
    }
}

/// Runs every experiment of the preset and writes results, summary,
/// effective config and figures into `out_dir`.
pub fn execute(preset: &Preset, out_dir: &Path, verbose: bool) -> Result<PresetOutcome> {
    preset.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let effective = out_dir.join(format!("{}_effective.toml", preset.name));
    std::fs::write(&effective, preset.to_toml()?)?;
    files.push(effective);

    let mut runs = Vec::new();
    for cfg in preset.resolve()? {
        if verbose {
            eprintln!("== {} ({} blocks x {} reps)", cfg.name, cfg.blocks, cfg.reps);
        }
        let run = harness::run_experiment_with(
            &cfg,
            &mut |kind, cfg, rng| Ok(Box::new(harness::DetectorReceiver::new(kind, cfg, rng))),
            &mut |p| {
                if verbose {
                    log_progress(&p);
                }
            },
        )?;
        let csv = out_dir.join(format!("{}.csv", cfg.name));
        harness::persist(&run, &csv)?;
        files.push(harness::metadata_path(&csv));
        files.push(csv);
        runs.push(run);
    }

    let summary = out_dir.join(format!("{}_summary.csv", preset.name));
    std::fs::write(&summary, summary_csv(&runs))?;
    files.push(summary);
    files.extend(write_figures(preset, &runs, out_dir)?);
    Ok(PresetOutcome { runs, files })
}

fn log_progress(p: &Progress<'_>) {
    match p {
        Progress::SurrogateTrained { rep, final_loss } => {
            eprintln!("rep {rep}: surrogate trained, loss {final_loss:.4}")
        }
        Progress::Block {
            rep,
            block,
            receiver,
            poisoned,
            ser,
        } => eprintln!(
            "rep {rep} block {block:>3} {:<14} {:<8} SER {ser:.4}",
            receiver.name(),
            if *poisoned { "poisoned" } else { "clean" }
        ),
        Progress::Aborted(msg) => eprintln!("aborted: {msg}"),
    }
}

/// `receiver,channel,snr_db,l_pilot,poisoned,ser_final,degradation_db` for
/// the repetition-averaged records of every run.
pub fn summary_csv(runs: &[ExperimentRun]) -> String {
    let mut out = String::from("receiver,channel,snr_db,l_pilot,poisoned,ser_final,degradation_db\n");
    for run in runs {
        let avg = run.averaged();
        for r in &avg {
            let deg = if r.poisoned {
                run.degradation_db(r.receiver)
                    .map(|d| format!("{d:?}"))
                    .unwrap_or_default()
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                "{},{},{:?},{},{},{:?},{}",
                r.receiver.name(),
                r.channel.name(),
                r.snr_db,
                run.config.l_pilot,
                r.poisoned,
                r.final_ser(),
                deg
            );
        }
    }
    out
}

fn ser_floor(runs: &[ExperimentRun]) -> f64 {
    let most = runs
        .iter()
        .map(|r| (r.config.l_info * r.config.blocks * r.config.reps) as f64)
        .fold(1.0, f64::max);
    0.5 / most
}

fn write_figures(preset: &Preset, runs: &[ExperimentRun], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let floor = ser_floor(runs);
    let title = if preset.title.is_empty() { preset.name.clone() } else { preset.title.clone() };
    // block figure at the SNR closest to 14 dB, first pilot size
    if let Some(run) = runs
        .iter()
        .filter(|r| r.config.l_pilot == preset.pilot_sizes[0])
        .min_by(|a, b| {
            (a.config.channel.snr_db - 14.0)
                .abs()
                .total_cmp(&(b.config.channel.snr_db - 14.0).abs())
        })
    {
        let plot = plot::ser_vs_block(
            &format!("{title}, SNR = {} dB", run.config.channel.snr_db),
            &run.averaged(),
            floor,
        );
        files.push(write_svg(out_dir, &format!("{}_ser_vs_block.svg", preset.name), &plot)?);
    }
    let snrs = distinct(runs.iter().map(|r| r.config.channel.snr_db));
    if snrs.len() > 1 {
        let plot = final_ser_plot(
            &format!("{title}: SER vs SNR"),
            "SNR [dB]",
            runs.iter()
                .filter(|r| r.config.l_pilot == preset.pilot_sizes[0])
                .map(|r| (r.config.channel.snr_db, r)),
            floor,
        );
        files.push(write_svg(out_dir, &format!("{}_ser_vs_snr.svg", preset.name), &plot)?);
    }
    let pilots = distinct(runs.iter().map(|r| r.config.l_pilot as f64));
    if pilots.len() > 1 {
        let focus = runs[0].config.channel.snr_db;
        let plot = final_ser_plot(
            &format!("{title}: SER vs pilot size"),
            "pilot symbols per block",
            runs.iter()
                .filter(|r| r.config.channel.snr_db == focus)
                .map(|r| (r.config.l_pilot as f64, r)),
            floor,
        );
        files.push(write_svg(out_dir, &format!("{}_ser_vs_pilot.svg", preset.name), &plot)?);
    }
    Ok(files)
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn final_ser_plot<'a>(
    title: &str,
    x_label: &str,
    points: impl Iterator<Item = (f64, &'a ExperimentRun)>,
    floor: f64,
) -> LinePlot {
    let mut series: Vec<Series> = Vec::new();
    let mut keys: Vec<(ReceiverKind, bool)> = Vec::new();
    for (x, run) in points {
        for r in run.averaged() {
            let key = (r.receiver, r.poisoned);
            let idx = match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    series.push(Series {
                        label: plot::arm_label(r.receiver, r.poisoned),
                        points: Vec::new(),
                        color: plot::receiver_color(r.receiver).into(),
                        dashed: r.poisoned,
                    });
                    series.len() - 1
                }
            };
            series[idx].points.push((x, r.final_ser().max(floor)));
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    LinePlot {
        title: title.into(),
        x_label: x_label.into(),
        y_label: "SER".into(),
        log_y: true,
        series,
    }
}

fn write_svg(dir: &Path, file: &str, plot: &LinePlot) -> Result<PathBuf> {
    let path = dir.join(file);
    std::fs::write(&path, plot.render()?)?;
    Ok(path)
}

/// Renders the repetition-averaged cumulative SER of a results CSV.
pub fn plot_results_csv(text: &str, title: &str) -> Result<String> {
    let rows = harness::parse_results_csv(text)?;
    if rows.is_empty() {
        return Err(Error::Argument("results file has no rows".into()));
    }
    let mut records: Vec<ExperimentRecord> = Vec::new();
    for row in rows {
        let found = records
            .iter_mut()
            .find(|r| r.receiver == row.receiver && r.poisoned == row.poisoned && r.rep == row.rep);
        match found {
            Some(r) => {
                r.ser_block.push(row.ser_block);
                r.ser_cum.push(row.ser_cum);
            }
            None => records.push(ExperimentRecord {
                receiver: row.receiver,
                channel: row.channel,
                snr_db: row.snr_db,
                poisoned: row.poisoned,
                rep: row.rep,
                seed: 0,
                config_hash: String::new(),
                ser_block: vec![row.ser_block],
                ser_cum: vec![row.ser_cum],
                per_user_ser: vec![Vec::new()],
            }),
        }
    }
    for r in &mut records {
        r.per_user_ser = vec![Vec::new(); r.ser_block.len()];
    }
    let avg = harness::average_reps(&records);
    let positive_min = avg
        .iter()
        .flat_map(|r| r.ser_cum.iter().copied())
        .filter(|&v| v > 0.0)
        .fold(1.0, f64::min);
    plot::ser_vs_block(title, &avg, positive_min / 2.0).render()
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::List => {
            for (name, text) in PRESETS {
                let title = Preset::parse(text, name).map(|p| p.title).unwrap_or_default();
                println!("{name:<8} {title}");
            }
            0
        }
        Command::Show(args) => match load_preset(&args) {
            Ok(p) => match p.to_toml() {
                Ok(t) => {
                    print!("{t}");
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            },
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_USAGE
            }
        },
        Command::Run(args) => {
            let preset = match load_preset(&args) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_USAGE;
                }
            };
            let out = resolve_out_dir(&preset);
            match execute(&preset, &out, !args.quiet) {
                Ok(outcome) => {
                    for f in &outcome.files {
                        println!("{}", f.display());
                    }
                    if outcome.aborted() {
                        eprintln!("warning: training aborted; partial results written");
                        EXIT_ABORTED
                    } else {
                        0
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
        Command::Plot { csv, out, title } => {
            let result = std::fs::read_to_string(&csv)
                .map_err(Error::from)
                .and_then(|text| plot_results_csv(&text, &title))
                .and_then(|svg| {
                    let path = out.unwrap_or_else(|| csv.with_extension("svg"));
                    std::fs::write(&path, svg)?;
                    Ok(path)
                });
            match result {
                Ok(path) => {
                    println!("{}", path.display());
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
    }
}
