use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use chanprune::arch::ArchDescription;
use chanprune::checkpoint;
use chanprune::data::DatasetSpec;
use chanprune::evo::{self, Evaluator, SearchContext, SupernetEvaluator};
use chanprune::prior::{self, PriorDistribution, ProxyLossTable, Weighting};
use chanprune::records::{read_jsonl, JsonlWriter, LossRecord};
use chanprune::trainer::{self, EpochSummary, ResultRow, RunConfig, SearchSection, TrainOptions};
use chanprune::{SearchSpace, WidthConfig};
use clap::Args;
use serde::Serialize;

use crate::chart;
use crate::manifest::ManifestBuilder;

pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<chanprune::Error> for CliError {
    fn from(e: chanprune::Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_space(spec: &str) -> CliResult<SearchSpace> {
    let desc = ArchDescription::load(Path::new(spec))?;
    Ok(SearchSpace::from_description(&desc)?)
}

fn parse_widths(space: &SearchSpace, text: &str) -> CliResult<WidthConfig> {
    let cfg: WidthConfig = text
        .parse()
        .map_err(|e: chanprune::Error| CliError::Usage(format!("--widths: {e}")))?;
    space
        .validate(&cfg)
        .map_err(|e| CliError::Usage(format!("--widths: {e}")))?;
    Ok(cfg)
}

/// Parses `1500000`, `1.5M`, `4.1G` and similar.
fn parse_amount(text: &str) -> Option<f64> {
    let t = text.trim();
    let (num, scale) = match t.chars().last()? {
        'k' | 'K' => (&t[..t.len() - 1], 1e3),
        'm' | 'M' => (&t[..t.len() - 1], 1e6),
        'g' | 'G' => (&t[..t.len() - 1], 1e9),
        _ => (t, 1.0),
    };
    let v: f64 = num.trim().parse().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v * scale)
}

fn flops_arg(text: &str) -> CliResult<u64> {
    parse_amount(text)
        .map(|v| v.round() as u64)
        .ok_or_else(|| CliError::Usage(format!("--flops: cannot parse '{text}'")))
}

fn tolerance_arg(text: &str, max_flops: u64) -> CliResult<f64> {
    flops_or_percent(text, max_flops).ok_or_else(|| CliError::Usage(format!("--tolerance: cannot parse '{text}'")))
}

/// Absolute FLOPs, or a percentage of the largest configuration's FLOPs.
fn flops_or_percent(text: &str, max_flops: u64) -> Option<f64> {
    match text.trim().strip_suffix('%') {
        Some(p) => {
            let v: f64 = p.trim().parse().ok()?;
            (v >= 0.0 && v.is_finite()).then(|| max_flops as f64 * v / 100.0)
        }
        None => parse_amount(text),
    }
}

fn print_epoch(s: &EpochSummary) {
    eprintln!(
        "epoch {:>3}  iteration {:>6}  anchor loss {:.4}  mean loss {:.4}",
        s.epoch, s.iteration, s.anchor_loss, s.mean_loss
    );
}

pub fn train_supernet(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>, resume: Option<PathBuf>) -> CliResult {
    let mut manifest = ManifestBuilder::new("train-supernet");
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.recipe.seed = s;
    }
    let out = out
        .or_else(|| cfg.paths.out.as_ref().map(|p| cfg.resolve(p)))
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set [paths] out".into()))?;
    let space = cfg.search_space()?;
    let resume_ck = match &resume {
        Some(p) => Some(checkpoint::load::<f32>(p, Some(&space))?),
        None => None,
    };
    let data = cfg.recipe.dataset.load()?;
    create_dir(&out)?;
    let mut cb = print_epoch;
    let run = trainer::train_supernet(
        &space,
        &cfg.recipe,
        &data,
        TrainOptions {
            out_dir: Some(out.clone()),
            resume: resume_ck,
            on_epoch: Some(&mut cb),
        },
    )?;
    println!(
        "trained {} iterations; records in {}",
        run.total_iterations,
        out.join(trainer::RECORDS_FILE).display()
    );
    manifest
        .config(&cfg)
        .input("config", config_path)
        .output(out.join(trainer::RECORDS_FILE))
        .output(out.join(trainer::FINAL_CHECKPOINT))
        .output(out.join(trainer::CHECKPOINT_DIR))
        .seed(cfg.recipe.seed);
    if let Some(r) = resume {
        manifest.input("resume", r);
    }
    manifest.finish(&out).map_err(|e| io_err(&out, e))?;
    Ok(())
}

pub const PRIOR_FILE: &str = "prior.json";

#[derive(Serialize)]
struct PriorSettings<'a> {
    space: &'a str,
    weighting: Weighting,
    bucket_width: u64,
    records: usize,
}

pub fn build_prior(records_path: &Path, space_spec: &str, weighting: &str, bucket_width: Option<&str>, out: &Path) -> CliResult {
    let mut manifest = ManifestBuilder::new("build-prior");
    let weighting: Weighting = weighting
        .parse()
        .map_err(|e: chanprune::Error| CliError::Usage(format!("--weighting: {e}")))?;
    let space = load_space(space_spec)?;
    let max = space.flops(&space.largest_config())?;
    let width = match bucket_width {
        None => prior::default_bucket_width(&space),
        Some(text) => {
            let w = flops_or_percent(text, max)
                .ok_or_else(|| CliError::Usage(format!("--bucket-width: cannot parse '{text}'")))?;
            if w < 1.0 {
                return Err(CliError::Usage("--bucket-width must be at least one FLOP".into()));
            }
            w.round() as u64
        }
    };
    let records: Vec<LossRecord> = read_jsonl(records_path)?;
    let dist = prior::build_distribution(&records, &space, width, weighting)?;
    create_dir(out)?;
    let path = out.join(PRIOR_FILE);
    dist.save(&path)?;
    let empty = dist.fallback_flags.iter().filter(|&&f| f).count();
    println!(
        "{} buckets of {} FLOPs ({} without records) from {} records -> {}",
        dist.num_buckets(),
        width,
        empty,
        records.len(),
        path.display()
    );
    manifest
        .config(&PriorSettings {
            space: space_spec,
            weighting,
            bucket_width: width,
            records: records.len(),
        })
        .input("records", records_path)
        .output(&path);
    manifest.finish(out).map_err(|e| io_err(out, e))?;
    Ok(())
}

#[derive(Args)]
pub struct SearchArgs {
    /// Trained supernet used for proxy accuracy.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Table with `widths` and `fitness` columns used instead of a supernet.
    #[arg(long, conflicts_with = "checkpoint")]
    fitness_table: Option<PathBuf>,
    #[arg(long)]
    prior: PathBuf,
    /// Loss records; the best in-tolerance ones seed the first population.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Run configuration supplying the space, dataset and search defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture file or `builtin:<name>`; overrides the config's.
    #[arg(long)]
    space: Option<String>,
    /// FLOPs target, e.g. `2.5M`.
    #[arg(long)]
    flops: Option<String>,
    /// Absolute FLOPs or a percentage of the maximum, e.g. `2%`.
    #[arg(long)]
    tolerance: Option<String>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    parents: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

pub const SEARCH_LOG_FILE: &str = "search_log.jsonl";
pub const RANKED_FILE: &str = "ranked.csv";
pub const BEST_FILE: &str = "best_widths.txt";

struct TableEvaluator(HashMap<WidthConfig, f64>);

impl Evaluator for TableEvaluator {
    fn evaluate(&mut self, config: &WidthConfig) -> chanprune::Result<f64> {
        self.0
            .get(config)
            .copied()
            .ok_or_else(|| chanprune::Error::Config(format!("fitness table has no entry for {config}")))
    }
}

fn read_fitness_table(path: &Path) -> CliResult<HashMap<WidthConfig, f64>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let headers = rd.headers().map_err(|e| io_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Usage(format!("{}: missing '{name}' column", path.display())))
    };
    let (wc, fc) = (col("widths")?, col("fitness")?);
    let mut table = HashMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let bad = |m: String| CliError::Usage(format!("{}: {m}", path.display()));
        let widths: WidthConfig = rec.get(wc).unwrap_or("").parse().map_err(|e: chanprune::Error| bad(e.to_string()))?;
        let fitness: f64 = rec
            .get(fc)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        table.insert(widths, fitness);
    }
    Ok(table)
}

#[derive(Serialize)]
struct SearchSettings {
    space: String,
    evo: evo::EvoConfig,
    weighting: Weighting,
    evaluator: &'static str,
    dataset: Option<DatasetSpec>,
    calibration_batches: usize,
    eval_batch_size: usize,
}

pub fn search(args: &SearchArgs) -> CliResult {
    let mut manifest = ManifestBuilder::new("search");
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let (space, space_label) = match (&args.space, &cfg) {
        (Some(s), _) => (load_space(s)?, s.clone()),
        (None, Some(c)) => (c.search_space()?, c.space.arch.clone()),
        (None, None) => return Err(CliError::Usage("pass --space or --config".into())),
    };
    let section = cfg.as_ref().map(|c| c.search.clone()).unwrap_or_else(SearchSection::default);
    let dist = PriorDistribution::load(&args.prior)?;
    let max = space.flops(&space.largest_config())?;
    let target = match &args.flops {
        Some(t) => flops_arg(t)?,
        None => section.resolve_target(&space),
    };
    let tolerance = match (&args.tolerance, section.tolerance) {
        (Some(t), _) => tolerance_arg(t, max)?,
        (None, Some(t)) => t,
        (None, None) => dist.default_tolerance() as f64,
    };
    let mut evo_cfg = section.evo_config(target, tolerance);
    if let Some(g) = args.generations {
        evo_cfg.generations = g;
    }
    if let Some(p) = args.population {
        evo_cfg.population_size = p;
    }
    if let Some(k) = args.parents {
        evo_cfg.parent_count = k;
    }
    if let Some(s) = args.seed {
        evo_cfg.seed = s;
    }
    evo_cfg.validate()?;

    let records: Vec<LossRecord> = match &args.records {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let table = if records.is_empty() {
        None
    } else {
        Some(ProxyLossTable::from_records(&records)?)
    };
    let ctx = SearchContext {
        space: &space,
        dist: &dist,
        records: &records,
        table: table.as_ref(),
        weighting: dist.weighting,
    };

    create_dir(&args.out)?;
    let log_path = args.out.join(SEARCH_LOG_FILE);
    let mut log = JsonlWriter::create(&log_path)?;
    let mut settings = SearchSettings {
        space: space_label,
        evo: evo_cfg.clone(),
        weighting: dist.weighting,
        evaluator: "",
        dataset: None,
        calibration_batches: section.calibration_batches,
        eval_batch_size: section.eval_batch_size,
    };
    let ranked = match (&args.checkpoint, &args.fitness_table) {
        (Some(ck), None) => {
            let handle = trainer::load_supernet(ck, &space)?;
            let spec = cfg.as_ref().map(|c| c.recipe.dataset.clone()).unwrap_or_default();
            let data = spec.load()?;
            settings.evaluator = "supernet";
            settings.dataset = Some(spec);
            manifest.input("checkpoint", ck);
            let mut evaluator = SupernetEvaluator::new(
                &handle,
                &data.validation,
                &data.calibration,
                section.eval_batch_size,
                section.calibration_batches,
            );
            evo::search(&ctx, &evo_cfg, &mut evaluator, Some(&mut log))?
        }
        (None, Some(ft)) => {
            let mut evaluator = TableEvaluator(read_fitness_table(ft)?);
            settings.evaluator = "fitness-table";
            manifest.input("fitness_table", ft);
            evo::search(&ctx, &evo_cfg, &mut evaluator, Some(&mut log))?
        }
        _ => {
            return Err(CliError::Usage(
                "pass exactly one of --checkpoint or --fitness-table".into(),
            ))
        }
    };
    log.flush()?;
    let ranked_path = args.out.join(RANKED_FILE);
    evo::write_ranked_csv(&ranked_path, &ranked)?;
    let best_path = args.out.join(BEST_FILE);
    let best = ranked
        .first()
        .ok_or_else(|| CliError::Runtime("search evaluated no candidates".into()))?;
    std::fs::write(&best_path, format!("{}\n", best.config)).map_err(|e| io_err(&best_path, e))?;
    println!(
        "best {}  flops {}  params {}  fitness {:.4}  ({} candidates)",
        best.config,
        best.flops,
        best.params,
        best.proxy_accuracy.unwrap_or(f64::NAN),
        ranked.len()
    );
    manifest
        .config(&settings)
        .input("prior", &args.prior)
        .output(&log_path)
        .output(&ranked_path)
        .output(&best_path)
        .seed(evo_cfg.seed);
    if let Some(c) = &args.config {
        manifest.input("config", c);
    }
    if let Some(r) = &args.records {
        manifest.input("records", r);
    }
    manifest.finish(&args.out).map_err(|e| io_err(&args.out, e))?;
    Ok(())
}

pub const RETRAIN_REPORT: &str = "retrain_report.json";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Serialize)]
struct RetrainReport {
    widths: WidthConfig,
    flops: u64,
    params: u64,
    accuracy: f64,
    epochs: Vec<EpochReport>,
}

#[derive(Serialize)]
struct EpochReport {
    epoch: usize,
    loss: f64,
}

pub fn retrain(config_path: &Path, space_spec: Option<&str>, widths: &str, out: &Path, seed: Option<u64>) -> CliResult {
    let mut manifest = ManifestBuilder::new("retrain");
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.recipe.seed = s;
    }
    let space = match space_spec {
        Some(s) => load_space(s)?,
        None => cfg.search_space()?,
    };
    let config = parse_widths(&space, widths)?;
    let data = cfg.recipe.dataset.load()?;
    let mut cb = print_epoch;
    let result = trainer::retrain_subnet(&space, &config, &cfg.recipe, &data, Some(&mut cb))?;
    let flops = space.flops(&config)?;
    create_dir(out)?;
    let report = RetrainReport {
        widths: config.clone(),
        flops,
        params: result.params,
        accuracy: result.accuracy,
        epochs: result
            .epochs
            .iter()
            .map(|e| EpochReport {
                epoch: e.epoch,
                loss: e.mean_loss,
            })
            .collect(),
    };
    let report_path = out.join(RETRAIN_REPORT);
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| io_err(&report_path, e))?;
    let results_path = out.join(RESULTS_FILE);
    trainer::write_results(
        &results_path,
        &[ResultRow {
            config_id: "retrained".into(),
            widths: config.clone(),
            flops,
            params: result.params,
            proxy_acc: None,
            retrained_acc: Some(result.accuracy),
        }],
    )?;
    println!(
        "{config}: top-1 {:.4}, {flops} FLOPs, {} params",
        result.accuracy, result.params
    );
    manifest
        .config(&cfg)
        .input("config", config_path)
        .output(&report_path)
        .output(&results_path)
        .seed(cfg.recipe.seed);
    manifest.finish(out).map_err(|e| io_err(out, e))?;
    Ok(())
}

#[derive(Serialize)]
struct LayerCost {
    name: String,
    width: usize,
    max_width: usize,
}

#[derive(Serialize)]
struct CostReport {
    space: String,
    widths: WidthConfig,
    flops: u64,
    params: u64,
    max_flops: u64,
    space_size: String,
    degrees_of_freedom: usize,
    layers: Vec<LayerCost>,
}

pub const FLOPS_FILE: &str = "flops.json";

pub fn flops(space_spec: &str, widths: Option<&str>, json: bool, out: Option<PathBuf>) -> CliResult {
    let mut manifest = ManifestBuilder::new("flops");
    let space = load_space(space_spec)?;
    let config = match widths {
        Some(w) => parse_widths(&space, w)?,
        None => space.largest_config(),
    };
    let report = CostReport {
        space: space.name.clone(),
        flops: space.flops(&config)?,
        params: space.params(&config)?,
        max_flops: space.flops(&space.largest_config())?,
        space_size: space.space_size().to_string(),
        degrees_of_freedom: space
            .degrees_of_freedom()
            .iter()
            .filter(|members| space.allowed_choices(members[0]).map_or(false, |c| c.len() > 1))
            .count(),
        layers: space
            .layers
            .iter()
            .zip(&config.widths)
            .map(|(l, &w)| LayerCost {
                name: l.name.clone(),
                width: w,
                max_width: l.max_out_channels,
            })
            .collect(),
        widths: config,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    let shown = if json {
        format!("{text}\n")
    } else {
        format!(
            "space      {}\nwidths     {}\nflops      {} ({:.3} G)\nparams     {} ({:.3} M)\n\
             flops ratio {:.4} of max {}\nspace size {} over {} free choices\n",
            report.space,
            report.widths,
            report.flops,
            report.flops as f64 / 1e9,
            report.params,
            report.params as f64 / 1e6,
            report.flops as f64 / report.max_flops as f64,
            report.max_flops,
            report.space_size,
            report.degrees_of_freedom
        )
    };
    // a closed pipe (`| head`) is not an error
    match std::io::stdout().lock().write_all(shown.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            return Err(CliError::Runtime(format!("writing to stdout: {e}")))
        }
        _ => {}
    }
    if let Some(out) = out {
        create_dir(&out)?;
        let path = out.join(FLOPS_FILE);
        std::fs::write(&path, &text).map_err(|e| io_err(&path, e))?;
        manifest.config(&report.widths).input("space", space_spec).output(&path);
        manifest.finish(&out).map_err(|e| io_err(&out, e))?;
    }
    Ok(())
}

pub const KEEP_RATIOS_CSV: &str = "keep_ratios.csv";
pub const KEEP_RATIOS_SVG: &str = "keep_ratios.svg";

#[derive(Serialize)]
struct ExportSettings<'a> {
    space: &'a str,
    format: &'static str,
    rows: usize,
}

pub fn export_widths(results: &Path, space_spec: &str, chart: bool, top: Option<usize>, out: &Path) -> CliResult {
    let mut manifest = ManifestBuilder::new("export-widths");
    let space = load_space(space_spec)?;
    let mut rows = trainer::read_results(results)?;
    if let Some(n) = top {
        rows.truncate(n);
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{}: no result rows", results.display())));
    }
    let mut series = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        space
            .validate(&row.widths)
            .map_err(|e| CliError::Usage(format!("{} row {}: {e}", results.display(), i + 1)))?;
        let ratios: Vec<f64> = space
            .layers
            .iter()
            .zip(&row.widths.widths)
            .map(|(l, &w)| w as f64 / l.max_out_channels as f64)
            .collect();
        let label = if row.config_id.is_empty() {
            format!("row {}", i + 1)
        } else {
            row.config_id.clone()
        };
        series.push((label, row.widths.widths.clone(), ratios));
    }

    create_dir(out)?;
    let csv_path = out.join(KEEP_RATIOS_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    w.write_record(["config_id", "layer_index", "layer", "width", "max_width", "keep_ratio"])
        .map_err(|e| io_err(&csv_path, e))?;
    for (label, widths, ratios) in &series {
        for (i, l) in space.layers.iter().enumerate() {
            w.write_record([
                label.clone(),
                i.to_string(),
                l.name.clone(),
                widths[i].to_string(),
                l.max_out_channels.to_string(),
                format!("{:.6}", ratios[i]),
            ])
            .map_err(|e| io_err(&csv_path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;
    manifest.output(&csv_path);

    if chart {
        let names: Vec<String> = space.layers.iter().map(|l| l.name.clone()).collect();
        let lines: Vec<(String, Vec<f64>)> = series.into_iter().map(|(l, _, r)| (l, r)).collect();
        let svg_path = out.join(KEEP_RATIOS_SVG);
        std::fs::write(&svg_path, chart::keep_ratio_svg(&names, &lines)).map_err(|e| io_err(&svg_path, e))?;
        manifest.output(&svg_path);
    }
    println!("{} configurations -> {}", rows.len(), out.display());
    manifest
        .config(&ExportSettings {
            space: space_spec,
            format: if chart { "chart" } else { "csv" },
            rows: rows.len(),
        })
        .input("results", results);
    manifest.finish(out).map_err(|e| io_err(out, e))?;
    Ok(())
}
