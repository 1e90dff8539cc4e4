use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use log::info;

use super::settings::{
    features_from_kv, features_to_kv, require, vocabulary_from_kv, Settings,
};
use super::{
    Cli, Command, EvalArgs, GradcheckArgs, GridFormat, HeadChoice, ModelKind, PredictArgs, Preset,
    SaliencyArgs, SweepArgs, SynthArgs, TrainArgs, TrainFlags, EXIT_NUMERIC, EXIT_OK,
};
use crate::autodiff::gradcheck::{run_suite, Operator, TOLERANCE};
use crate::autodiff::Array;
use crate::dataset::{
    default_classes, load_manifest, overlapping_classes, to_examples, write_dataset,
    DatasetManifest, Example, LabeledClip, SynthSpec, Vocabulary,
};
use crate::features::{read_wav, write_matrix, FeatureConfig, MbeExtractor};
use crate::kv::parse_list;
use crate::metrics::{
    decode_events, evaluate_annotations, format_report, read_strong_annotations,
    read_weak_annotations, write_strong_annotations, write_weak_annotations, AnnotationSet,
    DecodeOptions, SplitReport, StrongRecord, WeakRecord,
};
use crate::model::{
    saliency, AnyModel, BaselineConfig, BaselineMlp, Checkpoint, ConvSpec, Crnn, Head,
    ModelConfig, SedModel,
};
use crate::train::{
    default_weight_pairs, fit, weak_from_strong, weight_sweep, write_history_csv,
    write_sweep_csv, TrainConfig,
};
use crate::{Error, Result};

pub fn dispatch(cli: &Cli) -> Result<i32> {
    let settings = Settings::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => synth(&settings, a),
        Command::Train(a) => train(&settings, a),
        Command::Predict(a) => predict(&settings, a),
        Command::Eval(a) => eval(&settings, a),
        Command::Gradcheck(a) => gradcheck(&settings, a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::Sweep(a) => sweep(&settings, a),
    }
}

fn synth(s: &Settings, a: &SynthArgs) -> Result<i32> {
    let clips: usize = s.pick(a.clips, "clips", 200)?;
    let classes: usize = s.pick(a.classes, "classes", 4)?;
    let polyphony: usize = s.pick(a.polyphony, "polyphony", 2)?;
    require(clips > 0 && classes > 0 && polyphony > 0, "clips, classes and polyphony must be positive")?;
    let preset = match s.opt(a.preset.map(|p| format!("{p:?}").to_lowercase()), "preset")? {
        None => Preset::Separated,
        Some(p) if p == "separated" => Preset::Separated,
        Some(p) if p == "overlapping" => Preset::Overlapping,
        Some(p) => return Err(Error::Config(format!("unknown preset `{p}`"))),
    };
    let sample_rate: usize = s.pick(a.sample_rate, "sample_rate", 44_100)?;
    let spec = SynthSpec {
        num_clips: clips,
        classes: match preset {
            Preset::Separated => default_classes(classes),
            Preset::Overlapping => overlapping_classes(classes),
        },
        clip_s: s.pick(a.clip_seconds, "clip_seconds", 10.0)?,
        sample_rate: u32::try_from(sample_rate).map_err(|_| Error::Config("sample rate too large".into()))?,
        polyphony_max: polyphony,
        seed: s.pick(a.seed, "seed", 0)?,
        ..SynthSpec::new(clips, classes, 0)
    };
    let split: String = s.pick(a.split.clone(), "split", "train".to_string())?;
    let data = spec.generate()?;
    let manifest = write_dataset(&a.out, &split, &spec.vocabulary()?, &data)?;
    let events: usize = data.iter().filter_map(|c| c.strong.as_ref()).map(|e| e.len()).sum();
    println!(
        "wrote {clips} clips, {classes} classes, {events} events; manifest {}",
        manifest.display()
    );
    Ok(EXIT_OK)
}

/// Loads a manifest and extracts features, keeping each clip's sample rate.
fn load_examples(path: &Path, cfg: &FeatureConfig) -> Result<(DatasetManifest, Vec<Example>, u32)> {
    let manifest = load_manifest(path)?;
    let clips = manifest.load_all()?;
    let sr = clips
        .first()
        .map(|c| c.clip.sample_rate())
        .ok_or_else(|| Error::EmptyDataset(format!("{} lists no clips", path.display())))?;
    let examples = to_examples(&clips, &feature_config_for(cfg, sr))?;
    Ok((manifest, examples, sr))
}

/// Caps the upper mel edge at the Nyquist frequency of `sample_rate`.
fn feature_config_for(cfg: &FeatureConfig, sample_rate: u32) -> FeatureConfig {
    FeatureConfig {
        fmax: cfg.fmax.min(f64::from(sample_rate) / 2.0),
        ..cfg.clone()
    }
}

struct TrainSetup {
    feature_cfg: FeatureConfig,
    sample_rate: u32,
    vocabulary: Vocabulary,
    train: Vec<Example>,
    validation: Vec<Example>,
    train_cfg: TrainConfig,
}

fn train_setup(s: &Settings, f: &TrainFlags) -> Result<TrainSetup> {
    let feature_cfg = FeatureConfig {
        num_mel_bands: s.pick(f.mel_bands, "mel_bands", 40)?,
        window_ms: s.pick(f.window_ms, "window_ms", 40.0)?,
        ..FeatureConfig::default()
    };
    let train_path = s.path(f.train.as_ref(), "train")?;
    let val_path = s.path(f.validation.as_ref(), "validation")?;
    let (train_manifest, mut train, sample_rate) = load_examples(&train_path, &feature_cfg)?;
    let (val_manifest, validation, val_rate) = load_examples(&val_path, &feature_cfg)?;
    if train_manifest.vocabulary != val_manifest.vocabulary {
        return Err(Error::Format("training and validation vocabularies differ".into()));
    }
    if val_rate != sample_rate {
        return Err(Error::Format("training and validation sample rates differ".into()));
    }
    // Training never sees event timings.
    for e in &mut train {
        e.strong = None;
    }
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        max_epochs: s.pick(f.epochs, "epochs", defaults.max_epochs)?,
        patience: s.pick(f.patience, "patience", defaults.patience)?,
        batch_size: s.pick(f.batch_size, "batch_size", defaults.batch_size)?,
        dropout: s.pick(f.dropout, "dropout", defaults.dropout)?,
        lr: s.pick(f.lr, "lr", defaults.lr)?,
        seed: s.pick(f.seed, "seed", defaults.seed)?,
        metric_segment_s: s.pick(f.segment, "segment", defaults.metric_segment_s)?,
        ..defaults
    };
    info!(
        "{} training clips, {} validation clips, {} classes",
        train.len(),
        validation.len(),
        train_manifest.vocabulary.len()
    );
    Ok(TrainSetup {
        feature_cfg: feature_config_for(&feature_cfg, sample_rate),
        sample_rate,
        vocabulary: train_manifest.vocabulary,
        train,
        validation,
        train_cfg,
    })
}

fn build_model(s: &Settings, f: &TrainFlags, classes: usize, bands: usize, cfg: &TrainConfig) -> Result<AnyModel> {
    let kind = match s.opt(f.model.map(|m| format!("{m:?}").to_lowercase()), "model")? {
        None => ModelKind::Crnn,
        Some(k) if k == "crnn" => ModelKind::Crnn,
        Some(k) if k == "baseline" => ModelKind::Baseline,
        Some(k) => return Err(Error::Config(format!("unknown model `{k}`"))),
    };
    match kind {
        ModelKind::Baseline => Ok(AnyModel::Baseline(BaselineMlp::new(BaselineConfig {
            seed: cfg.seed,
            ..BaselineConfig::new(classes, bands)
        })?)),
        ModelKind::Crnn => {
            let mut mc = ModelConfig::with_classes(classes, bands);
            mc.dropout = cfg.dropout;
            mc.seed = cfg.seed;
            let filters: Option<Vec<usize>> = s.list(f.conv_filters.as_ref(), "conv_filters")?;
            let pools: Option<Vec<usize>> = s.list(f.conv_pools.as_ref(), "conv_pools")?;
            if filters.is_some() || pools.is_some() {
                let filters = filters.unwrap_or_else(|| mc.conv.iter().map(|c| c.filters).collect());
                let pools = pools.unwrap_or_else(|| mc.conv.iter().map(|c| c.pool).collect());
                require(filters.len() == pools.len(), "conv filters and pools differ in length")?;
                mc.conv = filters
                    .into_iter()
                    .zip(pools)
                    .map(|(filters, pool)| ConvSpec { filters, pool })
                    .collect();
            }
            mc.gru_units = s.pick(f.gru_units, "gru_units", mc.gru_units)?;
            if let Some(mut h) = s.list::<usize>(f.strong_hidden.as_ref(), "strong_hidden")? {
                h.push(classes);
                mc.strong_dense = h;
            }
            if let Some(mut h) = s.list::<usize>(f.weak_hidden.as_ref(), "weak_hidden")? {
                h.push(classes);
                mc.weak_dense = h;
            }
            Ok(AnyModel::Crnn(Crnn::new(mc)?))
        }
    }
}

fn write_run_checkpoint(path: &Path, model: &AnyModel, setup: &TrainSetup) -> Result<()> {
    let mut ckpt = model.to_checkpoint();
    features_to_kv(&setup.feature_cfg, setup.sample_rate, &mut ckpt.config);
    ckpt.config.set("vocabulary", setup.vocabulary.labels().join(","));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ckpt.save(path)
}

fn train(s: &Settings, a: &TrainArgs) -> Result<i32> {
    let mut setup = train_setup(s, &a.flags)?;
    setup.train_cfg.strong_weight = s.pick(a.strong_weight, "strong_weight", 1.0)?;
    setup.train_cfg.weak_weight = s.pick(a.weak_weight, "weak_weight", 1.0)?;
    setup.train_cfg.validate()?;
    let model = build_model(
        s,
        &a.flags,
        setup.vocabulary.len(),
        setup.feature_cfg.num_mel_bands,
        &setup.train_cfg,
    )?;
    info!("model has {} trainable parameters", model.count_parameters());
    let out = fit(model, &setup.train, &setup.validation, &setup.train_cfg)?;
    let ckpt_path = s.pick(a.checkpoint.clone(), "checkpoint", PathBuf::from("model.wsedm"))?;
    write_run_checkpoint(&ckpt_path, &out.model, &setup)?;
    let log_path = s.pick(a.log.clone(), "log", ckpt_path.with_extension("csv"))?;
    let mut w = BufWriter::new(fs::File::create(&log_path)?);
    write_history_csv(&mut w, &out.history)?;
    w.flush()?;
    let best = &out.history[out.best_epoch - 1];
    println!(
        "best epoch {} of {}: weak F {:.1}, strong ER {}, metric {:.3}",
        out.best_epoch,
        out.history.len(),
        best.weak.f,
        best.strong_er.map_or("n/a".into(), |e| format!("{e:.2}")),
        best.metric
    );
    println!("checkpoint {}, log {}", ckpt_path.display(), log_path.display());
    Ok(EXIT_OK)
}

/// A checkpoint written by `train`, with the feature settings and class
/// names it was trained with.
struct LoadedRun {
    model: AnyModel,
    feature_cfg: FeatureConfig,
    sample_rate: u32,
    vocabulary: Vocabulary,
}

fn load_run(path: &Path) -> Result<LoadedRun> {
    let ckpt = Checkpoint::load(path)?;
    let as_format = |e: Error| match e {
        Error::Config(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    };
    let model = AnyModel::from_checkpoint(&ckpt).map_err(as_format)?;
    let (feature_cfg, sample_rate) = features_from_kv(&ckpt.config).map_err(as_format)?;
    let vocabulary = vocabulary_from_kv(&ckpt.config).map_err(as_format)?;
    if vocabulary.len() != model.num_classes() || feature_cfg.num_mel_bands != model.input_bands() {
        return Err(Error::Format(format!(
            "{}: stored vocabulary or features do not match the network",
            path.display()
        )));
    }
    Ok(LoadedRun {
        model,
        feature_cfg,
        sample_rate,
        vocabulary,
    })
}

fn check_rate(run: &LoadedRun, clip: &LabeledClip) -> Result<()> {
    if clip.clip.sample_rate() != run.sample_rate {
        return Err(Error::Format(format!(
            "`{}` is sampled at {} Hz but the model was trained at {} Hz",
            clip.name,
            clip.clip.sample_rate(),
            run.sample_rate
        )));
    }
    Ok(())
}

fn wav_clip(path: &Path) -> Result<LabeledClip> {
    Ok(LabeledClip {
        name: path.to_string_lossy().into_owned(),
        clip: read_wav(path)?,
        weak: Default::default(),
        strong: None,
    })
}

fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.replace('/', "_"))
}

fn write_grid(path: &Path, grid: &Array, format: GridFormat) -> Result<()> {
    let (t, c) = (grid.shape()[0], grid.shape()[1]);
    let mut w = BufWriter::new(fs::File::create(path)?);
    match format {
        GridFormat::Binary => write_matrix(&mut w, t, c, grid.data())?,
        GridFormat::Csv => {
            for row in grid.data().chunks_exact(c) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                writeln!(w, "{}", line.join(","))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn predict(s: &Settings, a: &PredictArgs) -> Result<i32> {
    let mut run = load_run(&a.checkpoint)?;
    let clips = match (&a.manifest, a.wav.is_empty()) {
        (Some(m), _) => load_manifest(m)?.load_all()?,
        (None, false) => a.wav.iter().map(|p| wav_clip(p)).collect::<Result<Vec<_>>>()?,
        (None, true) => return Err(Error::Config("give --manifest or --wav".into())),
    };
    let threshold: f64 = s.pick(a.threshold, "threshold", 0.5)?;
    require(threshold <= 1.0, "threshold must be in [0, 1]")?;
    let format = match s.opt(a.format.map(|f| format!("{f:?}").to_lowercase()), "format")? {
        None => GridFormat::Binary,
        Some(f) if f == "binary" => GridFormat::Binary,
        Some(f) if f == "csv" => GridFormat::Csv,
        Some(f) => return Err(Error::Config(format!("unknown grid format `{f}`"))),
    };
    let decode = DecodeOptions {
        median_frames: s.pick(a.median_filter, "median_filter", 0)?,
        fill_gaps_s: s.pick(a.fill_gaps, "fill_gaps", 0.0)?,
        min_duration_s: s.pick(a.min_duration, "min_duration", 0.0)?,
    };
    require(
        decode.median_frames <= 1 || decode.median_frames % 2 == 1,
        "median filter width must be odd",
    )?;
    fs::create_dir_all(&a.out)?;
    let extractor = MbeExtractor::new(&run.feature_cfg, run.sample_rate)?;
    let ext = match format {
        GridFormat::Binary => "strong.wsedf",
        GridFormat::Csv => "strong.csv",
    };
    let mut weak_records = Vec::new();
    let mut events = Vec::new();
    for clip in &clips {
        check_rate(&run, clip)?;
        let features = extractor.extract(&clip.clip)?;
        let (grid, _) = run.model.predict(&features)?;
        if !grid.all_finite() {
            return Err(Error::NonFinite(format!("prediction for `{}`", clip.name)));
        }
        write_grid(&a.out.join(format!("{}.{ext}", stem(&clip.name))), &grid, format)?;
        let weak = weak_from_strong(&grid, threshold)?;
        weak_records.push(WeakRecord {
            file: clip.name.clone(),
            labels: weak.iter().map(|&c| run.vocabulary.name(c).to_string()).collect(),
        });
        for e in decode_events(&grid, threshold, features.frame_hop_s(), &decode)?.events() {
            events.push(StrongRecord {
                file: clip.name.clone(),
                onset: e.onset,
                offset: e.offset,
                label: run.vocabulary.name(e.class).to_string(),
            });
        }
        info!("{}: {} frames, weak {:?}", clip.name, grid.shape()[0], weak);
    }
    let mut w = BufWriter::new(fs::File::create(a.out.join("weak.tsv"))?);
    write_weak_annotations(&mut w, &weak_records)?;
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(a.out.join("events.tsv"))?);
    write_strong_annotations(&mut w, &events)?;
    w.flush()?;
    println!(
        "{} clips, {} events written to {}",
        clips.len(),
        events.len(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn annotation_set(strong: Option<PathBuf>, weak: Option<PathBuf>, side: &str) -> Result<AnnotationSet> {
    let strong = strong.map(|p| read_strong_annotations(&p)).transpose()?;
    let weak = weak.map(|p| read_weak_annotations(&p)).transpose()?;
    if strong.is_none() && weak.is_none() {
        return Err(Error::Config(format!("give --{side}-strong and/or --{side}-weak")));
    }
    AnnotationSet::new(strong.as_deref(), weak.as_deref())
}

fn eval(s: &Settings, a: &EvalArgs) -> Result<i32> {
    let reference = annotation_set(
        s.opt(a.ref_strong.clone(), "ref_strong")?,
        s.opt(a.ref_weak.clone(), "ref_weak")?,
        "ref",
    )?;
    let estimate = annotation_set(
        s.opt(a.est_strong.clone(), "est_strong")?,
        s.opt(a.est_weak.clone(), "est_weak")?,
        "est",
    )?;
    let segment: f64 = s.pick(a.segment, "segment", 1.0)?;
    let duration: f64 = s.pick(a.duration, "duration", 10.0)?;
    require(segment > 0.0 && duration > 0.0, "segment and duration must be positive")?;
    let report = evaluate_annotations(&reference, &estimate, segment, duration)?;
    print!("{}", format_report(&report));
    if let Some(path) = s.opt(a.csv.clone(), "csv")? {
        fs::write(path, format!("{}\n{}\n", SplitReport::CSV_HEADER, report.csv_row()))?;
    }
    Ok(EXIT_OK)
}

fn gradcheck(s: &Settings, a: &GradcheckArgs) -> Result<i32> {
    let seed: u64 = s.pick(a.seed, "seed", 0)?;
    let seeds: usize = s.pick(a.seeds, "seeds", 20)?;
    require(seeds > 0, "at least one seed is required")?;
    let fault = s
        .opt(a.inject_fault.clone(), "inject_fault")?
        .map(|name| name.parse::<Operator>())
        .transpose()?;
    let reports = run_suite(seed, seeds, fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<14} seeds {:>3}  max rel error {:.3e}  {verdict}",
            r.operator.name(),
            r.seeds,
            r.max_rel_error
        );
        if !r.passed() {
            failed.push(r.operator.name());
        }
    }
    if failed.is_empty() {
        println!("all {} operators within {TOLERANCE:e}", reports.len());
        Ok(EXIT_OK)
    } else {
        println!("gradient check failed: {}", failed.join(", "));
        Ok(EXIT_NUMERIC)
    }
}

/// Time runs left to right, low frequencies at the bottom, brightness
/// proportional to the value relative to the map's maximum.
fn render_png(path: &Path, map: &Array) -> Result<()> {
    let (t, f) = (map.shape()[0], map.shape()[1]);
    let max = map.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let w = u32::try_from(t).map_err(|_| Error::invalid("map too wide"))?;
    let h = u32::try_from(f).map_err(|_| Error::invalid("map too tall"))?;
    let img = GrayImage::from_fn(w, h, |x, y| {
        let band = f - 1 - y as usize;
        let v = map.data()[x as usize * f + band];
        Luma([(v * scale).round().clamp(0.0, 255.0) as u8])
    });
    img.save(path)?;
    Ok(())
}

fn saliency_cmd(a: &SaliencyArgs) -> Result<i32> {
    let mut run = load_run(&a.checkpoint)?;
    let clip = wav_clip(&a.wav)?;
    check_rate(&run, &clip)?;
    let class = run.vocabulary.resolve(&a.class)?;
    let features = MbeExtractor::new(&run.feature_cfg, run.sample_rate)?.extract(&clip.clip)?;
    let heads: &[Head] = match a.head {
        HeadChoice::Strong => &[Head::Strong],
        HeadChoice::Weak => &[Head::Weak],
        HeadChoice::Both => &[Head::Strong, Head::Weak],
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    for &head in heads {
        let map = saliency(&mut run.model, &features, class, head)?;
        let base = a.out.to_string_lossy();
        let matrix = PathBuf::from(format!("{base}.{head}.wsedf"));
        let png = PathBuf::from(format!("{base}.{head}.png"));
        let mut w = BufWriter::new(fs::File::create(&matrix)?);
        write_matrix(&mut w, map.shape()[0], map.shape()[1], map.data())?;
        w.flush()?;
        render_png(&png, &map)?;
        println!("{head}: {} and {}", matrix.display(), png.display());
    }
    Ok(EXIT_OK)
}

fn sweep(s: &Settings, a: &SweepArgs) -> Result<i32> {
    let text: String = s.pick(a.weights.clone(), "weights", "0.002,0.02,0.2,1".to_string())?;
    let values: Vec<f64> = parse_list(&text)
        .map_err(|_| Error::Config(format!("bad weight list `{text}`")))?;
    require(!values.is_empty(), "the weight list is empty")?;
    require(
        values.iter().all(|w| w.is_finite() && *w > 0.0),
        "weights must be positive numbers",
    )?;
    let pairs = default_weight_pairs(&values);
    let setup = train_setup(s, &a.flags)?;
    setup.train_cfg.validate()?;
    let (classes, bands) = (setup.vocabulary.len(), setup.feature_cfg.num_mel_bands);
    let rows = weight_sweep(
        || build_model(s, &a.flags, classes, bands, &setup.train_cfg),
        &setup.train,
        &setup.validation,
        &pairs,
        &setup.train_cfg,
    )?;
    match s.opt(a.out.clone(), "out")? {
        Some(path) => {
            let mut w = BufWriter::new(fs::File::create(&path)?);
            write_sweep_csv(&mut w, &rows)?;
            w.flush()?;
            println!("{} rows written to {}", rows.len(), path.display());
        }
        None => write_sweep_csv(io::stdout().lock(), &rows)?,
    }
    Ok(EXIT_OK)
}
