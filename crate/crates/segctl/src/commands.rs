//! The five `segctl` workflows. Each writes its artifacts plus a
//! `run_record.toml` into its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use brainseg::checkpoint::{load_checkpoint, save_checkpoint};
use brainseg::manifest::{Manifest, Split};
use brainseg::modality::Modality;
use brainseg::mvox;
use brainseg::phantom::{generate_dataset, Corruption, DatasetConfig, PhantomSpec};
use brainseg::resample::resample_labels_onto;
use brainseg::affine::AffineTransform;
use brainseg::trainer::{train, training_sets};
use brainseg::unet::UNet;
use brainseg::volume::StructureTable;

use crate::config::{resolve_inference, resolve_train, ConfigFile, InferenceOverrides, RunRecord, TrainOverrides};
use crate::evaluate::{evaluate_items, EvalItem, Evaluation};
use crate::pipeline::{registration_text, segment_volume, SegmentOutput};
use crate::{CliError, Outcome};

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|e| CliError::Io { path, source: e })
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io { path: out.to_path_buf(), source: e })
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} {} does not exist", path.display())))
    }
}

fn stem(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().trim_end_matches(".mvox").to_string()).unwrap_or_else(|| "volume".into())
}

/// Options shared by the inference commands.
#[derive(Debug, Clone, Default)]
pub struct InferenceArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: InferenceOverrides,
}

struct Resolved {
    settings: crate::config::InferenceSettings,
    checkpoint: PathBuf,
    reference: PathBuf,
    out: PathBuf,
}

fn resolve(args: &InferenceArgs) -> Result<Resolved, CliError> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let settings = resolve_inference(&file, &args.overrides)?;
    let pick = |cli: &Option<PathBuf>, f: &Option<PathBuf>, what: &str| {
        cli.clone().or_else(|| f.clone()).ok_or_else(|| CliError::Config(format!("no {what} given")))
    };
    let r = Resolved {
        settings,
        checkpoint: pick(&args.checkpoint, &file.checkpoint, "checkpoint")?,
        reference: pick(&args.reference, &file.reference, "reference volume")?,
        out: pick(&args.out, &file.out, "output directory")?,
    };
    require(&r.checkpoint, "checkpoint")?;
    require(&r.reference, "reference volume")?;
    Ok(r)
}

fn load_model(path: &Path) -> Result<UNet<f32>, CliError> {
    Ok(load_checkpoint(path)?.model)
}

/// Full pipeline on one volume: writes `<name>.labels.mvox`,
/// `<name>.registration.txt` and, with MC on, `<name>.uncertainty.tsv`.
pub fn cmd_segment(input: &Path, args: &InferenceArgs) -> Result<(Outcome, SegmentOutput), CliError> {
    require(input, "input volume")?;
    let r = resolve(args)?;
    let mut model = load_model(&r.checkpoint)?;
    let reference = mvox::read_intensity(&r.reference)?;
    let volume = mvox::read_intensity(input)?;
    let result = segment_volume(&mut model, &reference, &volume, &r.settings)?;
    create_dir(&r.out)?;
    let name = stem(input);
    mvox::write_labels(r.out.join(format!("{name}.labels.mvox")), &result.labels)?;
    write(r.out.join(format!("{name}.registration.txt")), registration_text(&result.registration))?;
    let mut outcome = Outcome::Pass;
    if let Some(rep) = &result.report {
        write(r.out.join(format!("{name}.uncertainty.tsv")), rep.to_text(&StructureTable::standard()))?;
        if rep.verdict == brainseg::mc::Verdict::Warn {
            log::warn!("CV {:.4} exceeds threshold {:.4}: segmentation flagged for review", rep.cv, rep.threshold);
            outcome = Outcome::Warn;
        }
    }
    RunRecord::new("segment", r.settings)
        .input("input", input, &r.out)
        .input("checkpoint", &r.checkpoint, &r.out)
        .input("reference", &r.reference, &r.out)
        .write(&r.out)?;
    Ok((outcome, result))
}

/// MC uncertainty for one volume; writes only the report.
pub fn cmd_uncertainty(input: &Path, args: &InferenceArgs) -> Result<Outcome, CliError> {
    let mut a = args.clone();
    a.overrides.mc = Some(true);
    require(input, "input volume")?;
    let r = resolve(&a)?;
    let mut model = load_model(&r.checkpoint)?;
    let reference = mvox::read_intensity(&r.reference)?;
    let volume = mvox::read_intensity(input)?;
    let result = segment_volume(&mut model, &reference, &volume, &r.settings)?;
    let rep = result.report.expect("MC mode produces a report");
    create_dir(&r.out)?;
    write(r.out.join(format!("{}.uncertainty.tsv", stem(input))), rep.to_text(&StructureTable::standard()))?;
    RunRecord::new("uncertainty", r.settings)
        .input("input", input, &r.out)
        .input("checkpoint", &r.checkpoint, &r.out)
        .input("reference", &r.reference, &r.out)
        .write(&r.out)?;
    Ok(if rep.verdict == brainseg::mc::Verdict::Warn { Outcome::Warn } else { Outcome::Pass })
}

/// Segments every test volume of the modality and scores it: writes
/// `dice.tsv`, `summary.tsv` and `scatter.tsv`.
pub fn cmd_evaluate(manifest_path: &Path, args: &InferenceArgs) -> Result<Evaluation, CliError> {
    require(manifest_path, "manifest")?;
    let r = resolve(args)?;
    let manifest = Manifest::read(manifest_path)?;
    let entries = manifest.select(r.settings.modality, Split::Test);
    let mut model = load_model(&r.checkpoint)?;
    let reference = mvox::read_intensity(&r.reference)?;
    let mut items = Vec::with_capacity(entries.len());
    for e in entries {
        let volume = mvox::read_intensity(&e.volume)?;
        let truth = mvox::read_labels(&e.labels)?;
        let out = segment_volume(&mut model, &reference, &volume, &r.settings)?;
        let prediction = if out.labels.grid == truth.grid {
            out.labels
        } else {
            resample_labels_onto(&out.labels, &AffineTransform::identity(), &truth.grid)?
        };
        let name = e.volume.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| stem(&e.volume));
        log::info!("evaluated {name}");
        items.push(EvalItem { name, corruption: e.corruption.clone(), prediction, truth, cv: out.report.map(|rep| rep.cv) });
    }
    let eval = evaluate_items(&items)?;
    create_dir(&r.out)?;
    write(r.out.join("dice.tsv"), eval.dice_table(&StructureTable::standard()))?;
    write(r.out.join("summary.tsv"), eval.summary())?;
    write(r.out.join("scatter.tsv"), eval.scatter())?;
    RunRecord::new("evaluate", r.settings)
        .input("manifest", manifest_path, &r.out)
        .input("checkpoint", &r.checkpoint, &r.out)
        .input("reference", &r.reference, &r.out)
        .write(&r.out)?;
    Ok(eval)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: TrainOverrides,
}

/// Trains on the manifest's training split: writes `model.ckpt` (best
/// validation epoch) and `train_log.tsv`.
pub fn cmd_train(manifest_path: &Path, args: &TrainArgs) -> Result<brainseg::trainer::TrainLog, CliError> {
    require(manifest_path, "manifest")?;
    let file = ConfigFile::load(args.config.as_deref())?;
    let settings = resolve_train(&file, &args.overrides)?;
    let out = args.out.clone().or(file.out).ok_or_else(|| CliError::Config("no output directory given".into()))?;
    let manifest = Manifest::read(manifest_path)?;
    let cfg = settings.train_config();
    let (train_set, validation) = training_sets(&manifest, settings.modality, &cfg)?;
    let dims = train_set.first().map(|s| s.labels.grid.dims).ok_or_else(|| CliError::Input("no training volumes".into()))?;
    let spec = settings.model_spec(dims);
    let mut model = UNet::build(spec, settings.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let outcome = train(&mut model, &train_set, &validation, &cfg)?;
    create_dir(&out)?;
    save_checkpoint(&model, Some(&outcome.optimizer), &out.join("model.ckpt"))?;
    write(out.join("train_log.tsv"), outcome.log.to_tsv())?;
    RunRecord::new("train", settings).input("manifest", manifest_path, &out).write(&out)?;
    Ok(outcome.log)
}

#[derive(Debug, Clone, Serialize)]
pub struct PhantomArgs {
    /// Phantom description; the built-in desk phantom when absent.
    pub spec: Option<PathBuf>,
    pub dims: [usize; 3],
    pub subjects: usize,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub corrupt: Vec<String>,
    pub modalities: Vec<Modality>,
    pub seed: u64,
}

impl Default for PhantomArgs {
    fn default() -> Self {
        Self {
            spec: None,
            dims: [32, 32, 32],
            subjects: 40,
            test_fraction: 0.1,
            validation_fraction: 0.0,
            corrupt: Vec::new(),
            modalities: Vec::new(),
            seed: 0,
        }
    }
}

/// Writes a phantom dataset with `manifest.csv` into `out`.
pub fn cmd_phantoms(args: &PhantomArgs, out: &Path) -> Result<Manifest, CliError> {
    let spec = match &args.spec {
        Some(p) => {
            require(p, "phantom spec")?;
            PhantomSpec::read(p)?
        }
        None => PhantomSpec::desk(args.dims, args.seed),
    };
    let corrupted = args
        .corrupt
        .iter()
        .map(|s| s.parse::<Corruption>().map_err(|e| CliError::Config(format!("{s}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = DatasetConfig {
        n_subjects: args.subjects,
        test_fraction: args.test_fraction,
        validation_fraction: args.validation_fraction,
        corrupted,
        modalities: args.modalities.clone(),
    };
    create_dir(out)?;
    let manifest = generate_dataset(&spec, &cfg, out)?;
    let mut record = RunRecord::new("phantoms", args.clone());
    if let Some(p) = &args.spec {
        record = record.input("spec", p, out);
    }
    record.write(out)?;
    Ok(manifest)
}
