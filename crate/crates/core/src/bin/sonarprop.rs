//! Command-line front end: dataset synthesis, training, proposal extraction,
//! and recall/timing evaluation, all deterministic given explicit seeds.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sonar_proposals::dataset::{
    build_patch_dataset_capped, convert_voc_dir, load_annotations, AnnotatedImage, ImageRecord,
    Manifest,
};
use sonar_proposals::error::{Error, Result};
use sonar_proposals::eval::{
    import_external_proposals, recall_curve, timing_bench, write_curve_csv, write_timing_json,
    Sweep,
};
use sonar_proposals::imageio::{load_gray, save_gray};
use sonar_proposals::model::{build_cnn, build_fcn_tiny, LayerSpec, Network};
use sonar_proposals::proposals::{
    nms, objectness_map_fcn, objectness_map_sliding, proposals_all, proposals_by_threshold,
    ranked_proposals, write_proposals_csv, ObjectnessMap, Proposal, RankingOrder,
};
use sonar_proposals::synth::synth_sonar_image;
use sonar_proposals::template::{select_templates, tm_objectness_map, TemplateBank};
use sonar_proposals::tensor::Tensor;
use sonar_proposals::train::{train, write_history_csv, TrainConfig};
use sonar_proposals::weights::{
    load_weights, save_network, save_templates, WeightsFile,
};

#[derive(Parser)]
#[command(
    name = "sonarprop",
    version,
    about = "Class-agnostic detection proposals for forward-looking sonar images"
)]
struct Cli {
    /// Threads for per-image parallelism; 1 keeps timings reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// JSON file whose keys mirror the command's flags; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Cnn,
    Fcn,
    Tm,
}

impl Model {
    fn method_name(self) -> &'static str {
        match self {
            Model::Cnn => "cnnProposals",
            Model::Fcn => "fcnProposals",
            Model::Tm => "tmProposals",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Threshold,
    Ranking,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic sonar dataset with ground-truth boxes.
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
        /// Objects per image.
        #[arg(long, default_value_t = 2)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for images and annotations.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network, or select a template bank, from an annotated dataset.
    Train {
        /// Annotation manifest (JSON).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long, default_value_t = 0.01)]
        lr: f32,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        patience: usize,
        /// Train/validation split over images.
        #[arg(long, default_value_t = 0.7)]
        split: f64,
        /// Cap on positive patches per image.
        #[arg(long)]
        max_positives: Option<usize>,
        /// Template count for --model tm.
        #[arg(long, default_value_t = 100)]
        templates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for weights and history.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one image and write detection proposals.
    Propose {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Objectness threshold for --mode threshold.
        #[arg(long)]
        t_o: Option<f64>,
        /// Proposal budget for --mode ranking.
        #[arg(long)]
        k: Option<usize>,
        /// NMS overlap threshold.
        #[arg(long, default_value_t = 0.8)]
        t_s: f64,
        /// Window stride for sliding evaluation.
        #[arg(long, default_value_t = 4)]
        stride: usize,
        /// Apply NMS over all windows before truncating to k.
        #[arg(long)]
        nms_first: bool,
        /// Also write the upsampled objectness map (PGM or PNG).
        #[arg(long)]
        map: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep a parameter over a dataset; write recall curves and timing.
    Eval {
        /// Weights file (network or template bank).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Directory of externally generated per-image proposal CSVs.
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        model: Option<Model>,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Comma-separated sweep values (thresholds or k).
        #[arg(long, value_delimiter = ',', required = true)]
        sweep: Vec<f64>,
        #[arg(long, default_value_t = 0.8)]
        t_s: f64,
        /// Detection IoU threshold.
        #[arg(long, default_value_t = 0.5)]
        t_d: f64,
        #[arg(long, default_value_t = 4)]
        stride: usize,
        #[arg(long)]
        nms_first: bool,
        /// Timed repetitions per benchmark image.
        #[arg(long, default_value_t = 3)]
        timing_reps: usize,
        /// Images to benchmark; 0 skips timing.
        #[arg(long, default_value_t = 1)]
        timing_images: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a directory of VOC-style XML annotations to a JSON manifest.
    Convert {
        #[arg(long)]
        voc_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Reads `--config FILE` (if present) and appends each JSON key as a flag
/// unless it was given explicitly on the command line.
fn merged_args() -> Result<Vec<OsString>> {
    let mut argv: Vec<OsString> = std::env::args_os().collect();
    let pos = argv.iter().position(|a| a == "--config");
    let Some(pos) = pos else {
        return Ok(argv);
    };
    let path = PathBuf::from(argv.get(pos + 1).cloned().ok_or_else(|| {
        Error::invalid("cli", "--config requires a file path")
    })?);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for (key, value) in map {
        if key == "config" {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        if argv.iter().any(|a| *a == *flag.as_str()) {
            continue;
        }
        match value {
            serde_json::Value::Bool(true) => argv.push(flag.into()),
            serde_json::Value::Bool(false) => {}
            serde_json::Value::String(s) => {
                argv.push(flag.into());
                argv.push(s.into());
            }
            serde_json::Value::Number(n) => {
                argv.push(flag.into());
                argv.push(n.to_string().into());
            }
            other => {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("key {key:?}: unsupported value {other}"),
                ));
            }
        }
    }
    Ok(argv)
}

fn main() -> ExitCode {
    let args = match merged_args() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    ExitCode::SUCCESS
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(Error::invalid("cli", "--workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| Error::invalid("cli", format!("thread pool: {e}")))?;
    match cli.cmd {
        Cmd::Synth {
            count,
            width,
            height,
            objects,
            seed,
            out,
        } => cmd_synth(count, width, height, objects, seed, &out),
        Cmd::Train {
            dataset,
            model,
            lr,
            batch,
            epochs,
            patience,
            split,
            max_positives,
            templates,
            seed,
            out,
        } => cmd_train(
            &dataset,
            model,
            lr,
            batch,
            epochs,
            patience,
            split,
            max_positives,
            templates,
            seed,
            &out,
        ),
        Cmd::Propose {
            weights,
            image,
            model,
            mode,
            t_o,
            k,
            t_s,
            stride,
            nms_first,
            map,
            out,
        } => cmd_propose(
            &weights, &image, model, mode, t_o, k, t_s, stride, nms_first,
            map.as_deref(), &out,
        ),
        Cmd::Eval {
            weights,
            proposals,
            dataset,
            model,
            mode,
            sweep,
            t_s,
            t_d,
            stride,
            nms_first,
            timing_reps,
            timing_images,
            out,
        } => cmd_eval(
            weights.as_deref(),
            proposals.as_deref(),
            &dataset,
            model,
            mode,
            &sweep,
            t_s,
            t_d,
            stride,
            nms_first,
            timing_reps,
            timing_images,
            &out,
        ),
        Cmd::Convert { voc_dir, out } => {
            let manifest = convert_voc_dir(&voc_dir)?;
            manifest.save(&out)?;
            println!("wrote {} with {} images", out.display(), manifest.images.len());
            Ok(())
        }
    }
}

fn golden_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn cmd_synth(
    count: usize,
    width: usize,
    height: usize,
    objects: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest::default();
    for i in 0..count {
        let generated = synth_sonar_image(width, height, objects, golden_seed(seed, i))?;
        if generated.placement_shortfall {
            eprintln!("warning: image {i} placed {} of {objects} objects", generated.boxes.len());
        }
        let file = format!("synth_{i:04}.png");
        save_gray(&out.join(&file), &generated.image)?;
        manifest.images.push(ImageRecord {
            file,
            width,
            height,
            boxes: generated.boxes,
        });
    }
    let manifest_path = out.join("annotations.json");
    manifest.save(&manifest_path)?;
    println!("wrote {count} images and {}", manifest_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    dataset: &Path,
    model: Model,
    lr: f32,
    batch: usize,
    epochs: usize,
    patience: usize,
    split: f64,
    max_positives: Option<usize>,
    templates: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let images = load_annotations(dataset)?;
    let (train_set, val_set) = build_patch_dataset_capped(&images, split, seed, max_positives)?;
    println!(
        "{} train patches, {} validation patches from {} images",
        train_set.len(),
        val_set.len(),
        images.len()
    );
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    if let Model::Tm = model {
        let bank = select_templates(&train_set, templates, seed)?;
        let path = out.join("tm.spnw");
        save_templates(&path, &bank)?;
        println!("selected {} templates -> {}", bank.len(), path.display());
        return Ok(());
    }

    let mut net = match model {
        Model::Cnn => build_cnn(seed)?,
        Model::Fcn => build_fcn_tiny(seed)?,
        Model::Tm => unreachable!(),
    };
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        max_epochs: epochs,
        patience,
        seed,
        ..TrainConfig::default()
    };
    let history = train(&mut net, &train_set, &val_set, &cfg)?;
    for h in &history {
        println!(
            "epoch {:>3}  train mse {:.6}  val mse {:.6}",
            h.epoch, h.train_mse, h.val_mse
        );
    }
    let name = match model {
        Model::Cnn => "cnn.spnw",
        Model::Fcn => "fcn.spnw",
        Model::Tm => unreachable!(),
    };
    let weights_path = out.join(name);
    save_network(&weights_path, &net)?;
    write_history_csv(&out.join("history.csv"), &history)?;
    let best = history
        .iter()
        .map(|h| h.val_mse)
        .fold(f64::INFINITY, f64::min);
    println!("best val mse {best:.6} -> {}", weights_path.display());
    Ok(())
}

/// A loaded scoring method: sliding patch network, one-pass converted
/// network, or template bank.
enum Scorer {
    Sliding(Network, usize),
    Full(Network),
    Tm(TemplateBank, usize),
}

impl Scorer {
    fn map(&self, image: &Tensor) -> Result<ObjectnessMap> {
        match self {
            Scorer::Sliding(net, stride) => objectness_map_sliding(net, image, *stride),
            Scorer::Full(net) => objectness_map_fcn(net, image),
            Scorer::Tm(bank, stride) => tm_objectness_map(bank, image, *stride),
        }
    }
}

fn build_scorer(weights_path: &Path, model: Model, stride: usize) -> Result<Scorer> {
    let weights = load_weights(weights_path)?;
    match (model, weights) {
        (Model::Tm, WeightsFile::Templates(bank)) => Ok(Scorer::Tm(bank, stride)),
        (Model::Tm, WeightsFile::Network(_)) => Err(Error::invalid(
            "cli",
            format!(
                "--model tm given but {} holds a network",
                weights_path.display()
            ),
        )),
        (Model::Cnn | Model::Fcn, WeightsFile::Templates(_)) => Err(Error::invalid(
            "cli",
            format!(
                "--model {} given but {} holds a template bank",
                if model == Model::Cnn { "cnn" } else { "fcn" },
                weights_path.display()
            ),
        )),
        (Model::Cnn, WeightsFile::Network(net)) => {
            let reference = build_cnn(0)?;
            if net.spec != reference.spec {
                return Err(Error::invalid(
                    "cli",
                    format!(
                        "--model cnn given but the layer stack in {} is not the patch CNN",
                        weights_path.display()
                    ),
                ));
            }
            Ok(Scorer::Sliding(net, stride))
        }
        (Model::Fcn, WeightsFile::Network(net)) => {
            let patch_form = build_fcn_tiny(0)?;
            if net.spec == patch_form.spec {
                return Ok(Scorer::Full(net.fc_to_conv()?));
            }
            let has_dense = net
                .spec
                .layers
                .iter()
                .any(|l| matches!(l, LayerSpec::Dense { .. }));
            if !has_dense && net.spec.layers.len() == patch_form.spec.layers.len() {
                return Ok(Scorer::Full(net));
            }
            Err(Error::invalid(
                "cli",
                format!(
                    "--model fcn given but the layer stack in {} is neither the patch FCN nor its converted form",
                    weights_path.display()
                ),
            ))
        }
    }
}

fn extract(
    map: &ObjectnessMap,
    mode: Mode,
    t_o: Option<f64>,
    k: Option<usize>,
    t_s: f64,
    nms_first: bool,
) -> Result<Vec<Proposal>> {
    match mode {
        Mode::Threshold => {
            let t = t_o.ok_or_else(|| Error::invalid("cli", "--mode threshold requires --t-o"))?;
            nms(&proposals_by_threshold(map, t)?, t_s)
        }
        Mode::Ranking => {
            let k = k.ok_or_else(|| Error::invalid("cli", "--mode ranking requires --k"))?;
            let order = if nms_first {
                RankingOrder::NmsThenTruncate
            } else {
                RankingOrder::TruncateThenNms
            };
            ranked_proposals(map, k, t_s, order)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_propose(
    weights: &Path,
    image_path: &Path,
    model: Model,
    mode: Mode,
    t_o: Option<f64>,
    k: Option<usize>,
    t_s: f64,
    stride: usize,
    nms_first: bool,
    map_out: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let scorer = build_scorer(weights, model, stride)?;
    let image = load_gray(image_path)?;
    let map = scorer.map(&image)?;
    let proposals = extract(&map, mode, t_o, k, t_s, nms_first)?;
    write_proposals_csv(out, &proposals)?;
    if let Some(path) = map_out {
        save_gray(path, &map.map)?;
    }
    println!("{} proposals -> {}", proposals.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    weights: Option<&Path>,
    proposals_dir: Option<&Path>,
    dataset: &Path,
    model: Option<Model>,
    mode: Mode,
    sweep_values: &[f64],
    t_s: f64,
    t_d: f64,
    stride: usize,
    nms_first: bool,
    timing_reps: usize,
    timing_images: usize,
    out: &Path,
) -> Result<()> {
    let images = load_annotations(dataset)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let order = if nms_first {
        RankingOrder::NmsThenTruncate
    } else {
        RankingOrder::TruncateThenNms
    };
    let sweep = match mode {
        Mode::Threshold => Sweep::Thresholds(sweep_values.to_vec()),
        Mode::Ranking => {
            let mut ks = Vec::with_capacity(sweep_values.len());
            for &v in sweep_values {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::invalid(
                        "cli",
                        format!("ranking sweep value {v} is not a non-negative integer"),
                    ));
                }
                ks.push(v as usize);
            }
            Sweep::TopK(ks)
        }
    };

    let (method, scorer): (&str, Option<Scorer>) = match (weights, proposals_dir) {
        (Some(w), None) => {
            let model = model.ok_or_else(|| {
                Error::invalid("cli", "--weights requires --model to pick the pipeline")
            })?;
            (model.method_name(), Some(build_scorer(w, model, stride)?))
        }
        (None, Some(_)) => ("importedProposals", None),
        _ => {
            return Err(Error::invalid(
                "cli",
                "exactly one of --weights or --proposals must be given",
            ));
        }
    };

    let imported: Option<HashMap<String, Vec<Proposal>>> = match proposals_dir {
        Some(dir) => {
            let files: Vec<String> = images.iter().map(|im| im.file.clone()).collect();
            let sets = import_external_proposals(dir, &files)?;
            Some(files.into_iter().zip(sets).collect())
        }
        None => None,
    };

    let generator = |im: &AnnotatedImage| -> Result<Vec<Proposal>> {
        match (&scorer, &imported) {
            (Some(s), None) => Ok(proposals_all(&s.map(&im.image)?)),
            (None, Some(map)) => map
                .get(&im.file)
                .cloned()
                .ok_or_else(|| Error::invalid("cli", format!("no proposals for {}", im.file))),
            _ => unreachable!("validated above"),
        }
    };

    let curve = recall_curve(generator, &images, &sweep, t_s, t_d, order, method)?;
    let param = match mode {
        Mode::Threshold => "threshold",
        Mode::Ranking => "topK",
    };
    let csv = out.join(format!("{method}-{param}VsRecallAtIoU{t_d:.2}NMS{t_s:.2}.csv"));
    write_curve_csv(&csv, sweep.parameter_name(), &curve.results)?;
    for r in &curve.results {
        println!(
            "{}={} meanRecall={:.2} meanNumProposals={:.2}",
            sweep.parameter_name(),
            r.parameter,
            r.mean_recall,
            r.mean_proposals
        );
    }
    println!("curve -> {}", csv.display());

    if !curve.failures.is_empty() {
        let log = out.join(format!("{method}-failures.log"));
        let mut text = String::new();
        for (idx, err) in &curve.failures {
            text.push_str(&format!("{idx}\t{}\t{err}\n", images[*idx].file));
        }
        std::fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
        eprintln!(
            "warning: {} image(s) failed, see {}",
            curve.failures.len(),
            log.display()
        );
    }

    if timing_images > 0 {
        let subset: Vec<&Tensor> = images
            .iter()
            .take(timing_images)
            .map(|im| &im.image)
            .collect();
        let last = *sweep_values.last().expect("sweep is nonempty");
        let pipeline = |image: &Tensor| -> Result<()> {
            let candidates = match (&scorer, &imported) {
                (Some(s), None) => proposals_all(&s.map(image)?),
                // Imported proposals have no map stage; time extraction only.
                (None, Some(map)) => map.values().next().cloned().unwrap_or_default(),
                _ => unreachable!(),
            };
            match mode {
                Mode::Threshold => {
                    let kept: Vec<Proposal> = candidates
                        .into_iter()
                        .filter(|p| (p.score as f64) > last)
                        .collect();
                    nms(&kept, t_s)?;
                }
                Mode::Ranking => {
                    let mut kept = candidates;
                    kept.truncate(last as usize);
                    nms(&kept, t_s)?;
                }
            }
            Ok(())
        };
        let timing = timing_bench(pipeline, &subset, timing_reps, method)?;
        let json = out.join(format!("{method}-timing.json"));
        write_timing_json(&json, &timing)?;
        println!(
            "timing: {:.3} +/- {:.3} s/image over {} image(s) -> {}",
            timing.mean_s,
            timing.std_s,
            timing.n_images,
            json.display()
        );
    }
    Ok(())
}
