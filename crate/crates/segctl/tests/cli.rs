use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use brainseg::affine::AffineTransform;
use brainseg::manifest::{Manifest, Split};
use brainseg::modality::Modality;
use brainseg::mvox;
use brainseg::resample::{resample_onto, Interpolation};
use brainseg::volume::Grid;
use segctl::commands::{InferenceArgs, PhantomArgs, TrainArgs};
use segctl::config::{InferenceOverrides, TrainOverrides};
use segctl::{cmd_evaluate, cmd_phantoms, cmd_segment, cmd_train, Outcome};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn model(&self) -> PathBuf {
        self.root.join("model")
    }
}

/// A small dataset and a briefly trained model shared by all tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(
            root.join("train.toml"),
            "modality = \"mprage\"\nseed = 3\n[train]\nmax_epochs = 2\npatience = 2\n[model]\ninitial_features = 4\n",
        )
        .unwrap();
        let args = PhantomArgs {
            dims: [28, 28, 28],
            subjects: 6,
            test_fraction: 0.2,
            corrupt: vec!["noise:0.5".into()],
            modalities: vec![Modality::Mprage, Modality::Dwi],
            seed: 5,
            ..PhantomArgs::default()
        };
        cmd_phantoms(&args, &root.join("data")).unwrap();
        let targs = TrainArgs { config: Some(root.join("train.toml")), out: Some(root.join("model")), overrides: TrainOverrides::default() };
        cmd_train(&root.join("data/manifest.csv"), &targs).unwrap();
        Fixture { _dir: dir, root }
    })
}

fn inference(f: &Fixture, out: &Path, mc: bool) -> InferenceArgs {
    InferenceArgs {
        config: None,
        checkpoint: Some(f.model().join("model.ckpt")),
        reference: Some(f.data().join("atlas/mprage.mvox")),
        out: Some(out.to_path_buf()),
        overrides: InferenceOverrides {
            modality: Some(Modality::Mprage),
            mc: Some(mc),
            mc_samples: Some(3),
            ..Default::default()
        },
    }
}

fn segctl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_segctl"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn phantoms_and_training_write_their_artifacts() {
    let f = fixture();
    let manifest = fs::read_to_string(f.data().join("manifest.csv")).unwrap();
    // 6 clean + 1 corrupted subject, two modalities each.
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 14);
    assert!(manifest.contains("noise:0.5"));
    for name in ["model.ckpt", "train_log.tsv", "run_record.toml"] {
        assert!(f.model().join(name).exists(), "{name}");
    }
    let record = fs::read_to_string(f.model().join("run_record.toml")).unwrap();
    assert!(record.contains("max_epochs = 2"));
    assert!(record.contains("learning_rate = 0.001"));
}

#[test]
fn single_pass_segmentation_keeps_input_grid_and_file() {
    let f = fixture();
    let out = f.root.join("seg_single");
    let input = f.data().join("subject_000/mprage.mvox");
    let before = fs::read(&input).unwrap();
    let (outcome, result) = cmd_segment(&input, &inference(f, &out, false)).unwrap();
    assert_eq!(outcome, Outcome::Pass);
    assert!(result.report.is_none());
    assert_eq!(fs::read(&input).unwrap(), before);
    let labels = mvox::read_labels(out.join("mprage.labels.mvox")).unwrap();
    assert_eq!(labels.grid, mvox::read_intensity(&input).unwrap().grid);
    assert!(!out.join("mprage.uncertainty.tsv").exists());
}

#[test]
fn arbitrary_input_shape_is_segmented_on_its_own_grid() {
    let f = fixture();
    let src = mvox::read_intensity(f.data().join("subject_001/mprage.mvox")).unwrap();
    let grid = Grid::new([30, 20, 27], [0.8, 1.2, 0.9], AffineTransform::translation([0.5, 1.5, 0.2])).unwrap();
    let odd = resample_onto(&src, &AffineTransform::identity(), &grid, Interpolation::CubicBSpline).unwrap();
    let input = f.root.join("odd.mvox");
    mvox::write_volume(&input, &odd).unwrap();
    let out = f.root.join("seg_odd");
    let (_, result) = cmd_segment(&input, &inference(f, &out, false)).unwrap();
    assert_eq!(result.labels.grid.dims, [30, 20, 27]);
    // spacing is stored at single precision
    assert_eq!(result.labels.grid, mvox::read_intensity(&input).unwrap().grid);
}

#[test]
fn thick_slice_input_maps_back_to_its_grid() {
    let f = fixture();
    let mut args = inference(f, &f.root.join("seg_dwi"), false);
    args.reference = Some(f.data().join("atlas/dwi.mvox"));
    args.overrides.modality = Some(Modality::Dwi);
    let input = f.data().join("subject_002/dwi.mvox");
    let (_, result) = cmd_segment(&input, &args).unwrap();
    assert_eq!(result.labels.grid, mvox::read_intensity(&input).unwrap().grid);
}

#[test]
fn mc_mode_writes_a_report() {
    let f = fixture();
    let out = f.root.join("seg_mc");
    let (outcome, result) = cmd_segment(&f.data().join("subject_000/mprage.mvox"), &inference(f, &out, true)).unwrap();
    let report = result.report.unwrap();
    assert_eq!(outcome == Outcome::Warn, report.cv > report.threshold);
    let text = fs::read_to_string(out.join("mprage.uncertainty.tsv")).unwrap();
    assert!(text.lines().last().unwrap().starts_with("summary\tcv="));
}

#[test]
fn evaluation_tables_are_consistent() {
    let f = fixture();
    let out = f.root.join("eval");
    let eval = cmd_evaluate(&f.data().join("manifest.csv"), &inference(f, &out, true)).unwrap();
    // round_half_up(6 * 0.2) = 1 clean test subject plus the corrupted one.
    assert_eq!(eval.volumes.len(), 2);
    let dice = fs::read_to_string(out.join("dice.tsv")).unwrap();
    assert_eq!(dice.lines().count(), 1 + eval.row_count());
    let scatter = fs::read_to_string(out.join("scatter.tsv")).unwrap();
    assert!(scatter.contains("noise:0.5"));
    assert!(fs::read_to_string(out.join("summary.tsv")).unwrap().contains("D_A\t"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let f = fixture();
    let input = f.data().join("subject_000/mprage.mvox");
    let (a, b) = (f.root.join("det_a"), f.root.join("det_b"));
    cmd_segment(&input, &inference(f, &a, true)).unwrap();
    cmd_segment(&input, &inference(f, &b, true)).unwrap();
    for name in ["mprage.labels.mvox", "mprage.uncertainty.tsv", "mprage.registration.txt", "run_record.toml"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn incompatible_checkpoint_is_an_error() {
    let f = fixture();
    let small = f.root.join("small_ref.mvox");
    let v = mvox::read_intensity(f.data().join("atlas/mprage.mvox")).unwrap();
    let grid = Grid::canonical([16, 16, 16], [1.5; 3]).unwrap();
    mvox::write_volume(&small, &resample_onto(&v, &AffineTransform::identity(), &grid, Interpolation::Linear).unwrap()).unwrap();
    let mut args = inference(f, &f.root.join("bad"), false);
    args.reference = Some(small);
    assert!(cmd_segment(&f.data().join("subject_000/mprage.mvox"), &args).is_err());
}

#[test]
fn binary_exit_codes() {
    let f = fixture();
    let ckpt = f.model().join("model.ckpt");
    let reference = f.data().join("atlas/mprage.mvox");
    let input = f.data().join("subject_000/mprage.mvox");
    let run = |extra: &[&str], out: &str| {
        segctl()
            .arg("segment")
            .arg(&input)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--reference")
            .arg(&reference)
            .args(["--modality", "mprage", "--seed", "1", "--out"])
            .arg(f.root.join(out))
            .args(extra)
            .status()
            .unwrap()
            .code()
    };
    assert_eq!(run(&["--mc", "off"], "bin_off"), Some(0));
    // Threshold 0 turns any spread into a warning; a huge one passes.
    let strict = run(&["--mc", "on", "--mc-samples", "3", "--dropout-rate", "0.5", "--cv-threshold", "0"], "bin_strict");
    let report = fs::read_to_string(f.root.join("bin_strict/mprage.uncertainty.tsv")).unwrap();
    let cv_positive = !report.contains("cv=0.000000");
    assert_eq!(strict, Some(if cv_positive { 2 } else { 0 }));
    assert_eq!(run(&["--mc", "on", "--mc-samples", "3", "--cv-threshold", "1000"], "bin_lax"), Some(0));
    assert_eq!(run(&["--modality", "pet"], "bin_bad"), Some(1));
    let missing = segctl().args(["segment", "/nonexistent.mvox", "--modality", "ct", "--out"]).arg(f.root.join("x")).status().unwrap();
    assert_eq!(missing.code(), Some(1));
    assert_eq!(segctl().arg("--help").status().unwrap().code(), Some(0));
}

#[test]
fn config_file_supplies_paths() {
    let f = fixture();
    let cfg = f.root.join("run.toml");
    fs::write(
        &cfg,
        "modality = \"mprage\"\ncheckpoint = \"model/model.ckpt\"\nreference = \"data/atlas/mprage.mvox\"\nout = \"from_config\"\n[inference]\nmc = false\n",
    )
    .unwrap();
    let status = segctl().arg("segment").arg(f.data().join("subject_000/mprage.mvox")).arg("--config").arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(f.root.join("from_config/mprage.labels.mvox").exists());
    let record = fs::read_to_string(f.root.join("from_config/run_record.toml")).unwrap();
    assert!(record.contains("mc = false"));
    assert!(record.contains("mc_samples = 15"));
}

#[test]
fn evaluating_without_test_volumes_fails() {
    let f = fixture();
    let manifest = f.root.join("no_test.csv");
    let mut m = Manifest::read(f.data().join("manifest.csv")).unwrap();
    m.entries.retain(|e| e.split != Split::Test);
    m.write(&manifest).unwrap();
    assert!(cmd_evaluate(&manifest, &inference(f, &f.root.join("eval_empty"), false)).is_err());
}
