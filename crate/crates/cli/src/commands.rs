use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use duplo::model::{load_checkpoint, model_gradcheck, save_checkpoint, Checkpoint, DuploModel, ModelConfig, Variant, PATCH};
use duplo::sits::{
    compute_ndvi, extract_patch, gapfill_linear, generate_synthetic, load_cube, load_labels, load_split,
    normalize_minmax, object_split, save_cube, save_labels, save_split, LabelRaster, NormalizationStats,
    SitsCube, SplitAssignment, SplitPart, SyntheticSpec, NDVI,
};
use duplo::tensor::Tensor;
use duplo::train::{ablate, ablation_table, evaluate, train, PatchSet, TrainConfig};
use serde_json::json;

use crate::formats::{confusion_ppm, ClassMap, FeatureTable};
use crate::{
    AblateArgs, Cli, Command, EvaluateArgs, FeaturesArgs, GradcheckArgs, PredictArgs, PreprocessArgs, SplitArgs,
    SynthArgs, TrainArgs, TrainFlags, UsageError,
};

const HEATMAP_CELL: usize = 32;
const PREDICT_CHUNK: usize = 256;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Features(a) => features(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn open_cube(path: &Path) -> Result<SitsCube> {
    load_cube(path).with_context(|| format!("cannot open cube `{}`", path.display()))
}

fn open_labels(path: &Path) -> Result<LabelRaster> {
    load_labels(path).with_context(|| format!("cannot open labels `{}`", path.display()))
}

fn open_split(path: &Path) -> Result<SplitAssignment> {
    load_split(path).with_context(|| format!("cannot open split `{}`", path.display()))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("cannot open checkpoint `{}`", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write `{}`", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot write `{}`", path.display()))?,
    ))
}

/// Fills cloudy observations when the cube carries a mask.
fn fill_gaps(cube: SitsCube) -> Result<SitsCube> {
    Ok(if cube.validity.is_some() { gapfill_linear(&cube)? } else { cube })
}

fn check_labels(cube: &SitsCube, labels: &LabelRaster) -> Result<()> {
    if (cube.height, cube.width) != (labels.height, labels.width) {
        bail!(UsageError(format!(
            "cube is {}×{} but labels are {}×{}",
            cube.height, cube.width, labels.height, labels.width
        )));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        height: a.height,
        width: a.width,
        timestamps: a.timestamps,
        objects_per_class: a.objects_per_class,
        object_size: (a.min_size, a.max_size),
        noise_sigma: a.noise,
        cloud_prob: a.cloud_prob,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let (cube, labels) = generate_synthetic(&spec)?;
    save_cube(&a.cube, &cube).with_context(|| format!("cannot write `{}`", a.cube.display()))?;
    save_labels(&a.labels, &labels).with_context(|| format!("cannot write `{}`", a.labels.display()))?;
    println!(
        "wrote {}×{} cube with {} dates and {} bands, {} labeled pixels in {} objects",
        cube.height,
        cube.width,
        cube.num_timestamps(),
        cube.num_bands(),
        labels.labeled_count(),
        labels.objects_by_class().iter().map(Vec::len).sum::<usize>()
    );
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut cube = open_cube(&a.input)?;
    if a.gapfill {
        cube = fill_gaps(cube)?;
    }
    if a.ndvi {
        if cube.band_index(NDVI).is_some() {
            println!("{NDVI} already present, not recomputed");
        } else {
            cube = compute_ndvi(&cube)?;
        }
    }
    if a.normalize {
        let stats = NormalizationStats::compute(&cube, None)?;
        cube = normalize_minmax(&cube, &stats)?;
    }
    save_cube(&a.output, &cube).with_context(|| format!("cannot write `{}`", a.output.display()))?;
    println!("band,min,max,mean");
    let plane = cube.height * cube.width;
    for (b, name) in cube.bands.iter().enumerate() {
        let (mut lo, mut hi, mut sum, mut n) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64, 0usize);
        for t in 0..cube.num_timestamps() {
            for p in 0..plane {
                if cube.is_valid(t, p / cube.width, p % cube.width) {
                    let v = cube.data[(t * cube.num_bands() + b) * plane + p];
                    lo = lo.min(v);
                    hi = hi.max(v);
                    sum += v as f64;
                    n += 1;
                }
            }
        }
        println!("{name},{lo},{hi},{:.6}", sum / n.max(1) as f64);
    }
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let labels = open_labels(&a.labels)?;
    let test = 1.0 - a.train - a.val;
    if !(a.train >= 0.0 && a.val >= 0.0 && test >= -1e-12) {
        bail!(UsageError(format!("--train {} and --val {} leave no room for test", a.train, a.val)));
    }
    let s = object_split(&labels, [a.train, a.val, test.max(0.0)], a.seed)?;
    save_split(&a.out, &s).with_context(|| format!("cannot write `{}`", a.out.display()))?;
    for part in SplitPart::ALL {
        println!("{part}: {} objects", s.objects(part).count());
    }
    Ok(())
}

impl TrainFlags {
    pub fn config(&self, variant: Variant) -> TrainConfig {
        let base = if self.small { TrainConfig::small() } else { TrainConfig::default() };
        TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch,
            learning_rate: self.lr,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            seed: self.seed,
            variant,
            small: self.small,
        }
    }
}

/// Normalized training data plus the statistics that produced it.
struct Prepared {
    cube: SitsCube,
    labels: LabelRaster,
    split: SplitAssignment,
    stats: NormalizationStats,
    data: PatchSet,
}

fn prepare_training(flags: &TrainFlags) -> Result<Prepared> {
    let cube = fill_gaps(open_cube(&flags.cube)?)?;
    let labels = open_labels(&flags.labels)?;
    let split = open_split(&flags.split)?;
    check_labels(&cube, &labels)?;
    let stats = NormalizationStats::compute(&cube, None)?;
    let cube = normalize_minmax(&cube, &stats)?;
    let data = PatchSet::from_cube(&cube, &labels)?;
    Ok(Prepared {
        cube,
        labels,
        split,
        stats,
        data,
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = a.flags.config(a.variant);
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    println!(
        "variant={} lr={:e} epochs={} batch={} alpha1={} alpha2={} seed={} small={}",
        config.variant, config.learning_rate, config.epochs, config.batch_size, config.alpha1, config.alpha2, config.seed, config.small
    );
    let p = prepare_training(&a.flags)?;
    let model_cfg = config.model_config(p.labels.num_classes, p.cube.num_timestamps(), p.cube.num_bands());
    let mut model = DuploModel::new(model_cfg, config.variant)?;
    let outcome = train(&mut model, &p.data, &p.split, &config)?;
    println!(
        "best epoch {} with validation accuracy {:.4}",
        outcome.best_epoch, outcome.best_val_accuracy
    );

    let b = p.stats.bands.len();
    let ckpt = Checkpoint {
        model,
        extras: vec![
            ("norm.min".into(), Tensor::new(vec![b], p.stats.min.clone())?),
            ("norm.max".into(), Tensor::new(vec![b], p.stats.max.clone())?),
        ],
        metadata: json!({
            "train": config,
            "best_epoch": outcome.best_epoch,
            "best_val_accuracy": outcome.best_val_accuracy,
            "bands": p.cube.bands,
            "timestamps": p.cube.timestamps,
        }),
    };
    save_checkpoint(&a.out, &ckpt).with_context(|| format!("cannot write `{}`", a.out.display()))?;
    let history = a.history.unwrap_or_else(|| with_suffix(&a.out, ".history.csv"));
    write_file(&history, outcome.history_csv().as_bytes())?;
    println!("wrote {} and {}", a.out.display(), history.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Applies the checkpoint's training-time preprocessing to a cube.
fn align_cube(ckpt: &Checkpoint, cube: SitsCube) -> Result<SitsCube> {
    let meta = &ckpt.metadata;
    let bands: Vec<String> = serde_json::from_value(meta["bands"].clone()).context("checkpoint lacks band names")?;
    let timestamps: Vec<i64> =
        serde_json::from_value(meta["timestamps"].clone()).context("checkpoint lacks acquisition dates")?;
    if cube.bands != bands {
        bail!(UsageError(format!("cube bands {:?} differ from the model's {:?}", cube.bands, bands)));
    }
    if cube.timestamps != timestamps {
        bail!(UsageError(format!(
            "cube has {} dates {:?}, the model was trained on {:?}",
            cube.num_timestamps(),
            cube.timestamps,
            timestamps
        )));
    }
    let (Some(min), Some(max)) = (ckpt.extra("norm.min"), ckpt.extra("norm.max")) else {
        bail!("checkpoint lacks normalization statistics");
    };
    let stats = NormalizationStats {
        bands,
        min: min.data().to_vec(),
        max: max.data().to_vec(),
    };
    Ok(normalize_minmax(&fill_gaps(cube)?, &stats)?)
}

fn load_for_labels(model: &Path, cube: &Path, labels: &Path) -> Result<(Checkpoint, PatchSet, LabelRaster)> {
    let ckpt = open_checkpoint(model)?;
    let cube = open_cube(cube)?;
    let labels = open_labels(labels)?;
    check_labels(&cube, &labels)?;
    if labels.num_classes != ckpt.model.config.num_classes {
        bail!(
            "the model predicts {} classes but the labels define {}",
            ckpt.model.config.num_classes,
            labels.num_classes
        );
    }
    let cube = align_cube(&ckpt, cube)?;
    let data = PatchSet::from_cube(&cube, &labels)?;
    Ok((ckpt, data, labels))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let part: SplitPart = a.part.parse().map_err(|e: duplo::Error| UsageError(e.to_string()))?;
    let (mut ckpt, data, _) = load_for_labels(&a.model, &a.cube, &a.labels)?;
    let split = open_split(&a.split)?;
    let idx = data.indices(&split, part);
    let report = evaluate(&mut ckpt.model, &data, &idx)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create `{}`", a.out_dir.display()))?;
    let text = report.to_text();
    write_file(&a.out_dir.join("metrics.txt"), text.as_bytes())?;
    write_file(&a.out_dir.join("confusion.csv"), report.confusion.to_csv().as_bytes())?;
    write_file(&a.out_dir.join("confusion.ppm"), &confusion_ppm(&report.confusion, HEATMAP_CELL))?;
    print!("{text}");
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut ckpt = open_checkpoint(&a.model)?;
    let cube = align_cube(&ckpt, open_cube(&a.cube)?)?;
    let (t, b) = (cube.num_timestamps(), cube.num_bands());
    let per = t * b * PATCH * PATCH;
    let pixels: Vec<(usize, usize)> = (0..cube.height).flat_map(|r| (0..cube.width).map(move |c| (r, c))).collect();
    let mut labels = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(PREDICT_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * per);
        for &(r, c) in chunk {
            data.extend(extract_patch(&cube, r, c));
        }
        let x = Tensor::new(vec![chunk.len(), t, b, PATCH, PATCH], data)?;
        labels.extend(ckpt.model.predict(&x)?.into_iter().map(|k| k as i32 + 1));
    }
    let map = ClassMap {
        height: cube.height,
        width: cube.width,
        num_classes: ckpt.model.config.num_classes,
        labels,
    };
    let mut w = create(&a.out)?;
    map.write(&mut w)?;
    w.flush()?;
    let preview = a.out.with_extension("ppm");
    write_file(&preview, &map.to_ppm())?;
    println!("wrote {}×{} class map to {} and {}", map.height, map.width, a.out.display(), preview.display());
    Ok(())
}

fn features(a: FeaturesArgs) -> Result<()> {
    let (mut ckpt, data, _) = load_for_labels(&a.model, &a.cube, &a.labels)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut values = Vec::new();
    let mut width = 0;
    for chunk in all.chunks(PREDICT_CHUNK) {
        let (x, _) = data.batch(chunk)?;
        let f = ckpt.model.extract_features(&x)?;
        width = f.shape()[1];
        values.extend_from_slice(f.data());
    }
    let table = FeatureTable {
        width,
        object_ids: data.samples.iter().map(|s| s.object_id).collect(),
        labels: data.samples.iter().map(|s| s.label as i32 + 1).collect(),
        values,
    };
    let mut w = create(&a.out)?;
    if a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        table.write_csv(&mut w)?;
    } else {
        table.write_bin(&mut w)?;
    }
    w.flush()?;
    println!("wrote {} records of {} features to {}", table.rows(), width, a.out.display());
    Ok(())
}

/// Reads a feature table in whichever format its extension names.
pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let f = File::open(path).with_context(|| format!("cannot open `{}`", path.display()))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        FeatureTable::read_csv(BufReader::new(f))
    } else {
        FeatureTable::read_bin(&mut BufReader::new(f))
    }
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let config = a.flags.config(Variant::Full);
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    let p = prepare_training(&a.flags)?;
    let rows = ablate(&p.data, &p.split, &config)?;
    let table = ablation_table(&rows);
    if let Some(out) = &a.out {
        write_file(out, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = ModelConfig::tiny(a.classes, a.timestamps, a.bands).with_seed(a.seed);
    let report = model_gradcheck(&cfg, a.variant, a.batch, (0.3, 0.3), a.seed, 1e-6, None)?;
    let mut worst = 0.0f64;
    println!("tensor,values,rel_error");
    for e in &report {
        println!("{},{},{:.3e}", e.name, e.checked, e.tensor_rel_error);
        worst = worst.max(e.tensor_rel_error);
    }
    println!("worst relative error {worst:.3e} (tolerance {:.0e})", a.tolerance);
    if report.iter().any(|e| !e.passes(a.tolerance)) {
        bail!("gradient check failed: {worst:.3e} ≥ {:.0e}", a.tolerance);
    }
    Ok(())
}
