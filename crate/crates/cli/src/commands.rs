use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde_json::json;

use slicelab_core::cae::{predict_volume, save_checkpoint, ArchConfig, ModelVersion};
use slicelab_core::metrics::{agreement_report, consensus_mode};
use slicelab_core::scalar::Scalar;
use slicelab_core::study::{self, write_capacity_csv, CapacityOptions, TrainOptions};
use slicelab_core::sus::{read_responses, sus_report};
use slicelab_core::synth::{generate, SynthConfig};
use slicelab_core::volume::{
    load_label_map, load_volume, save_label_map, save_label_map_with_spacing, save_volume, LabelMap, Volume,
};
use slicelab_service::{AppState, TrainingMode};

use crate::{
    AgreementArgs, CapacityArgs, ConsensusArgs, ModelArgs, Precision, ServeArgs, SusArgs, SynthArgs, TrainArgs, Training,
};

fn read_config(path: Option<&Path>) -> Result<ArchConfig> {
    let Some(path) = path else {
        return Ok(ArchConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: ArchConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    config.validate()?;
    Ok(config)
}

fn read_volume(path: &Path) -> Result<Volume> {
    load_volume(path).with_context(|| format!("loading volume {}", path.display()))
}

fn read_labels(path: &Path) -> Result<LabelMap> {
    load_label_map(path).with_context(|| format!("loading labels {}", path.display()))
}

/// Reader id of a label file: its name without the label suffixes.
fn reader_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    [".lab.json", ".lab.raw"].iter().find_map(|s| name.strip_suffix(s)).unwrap_or(&name).to_string()
}

/// Standard output unless `path` is given.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn train_options(m: &ModelArgs, epochs: usize, max_grad_norm: Option<f64>) -> TrainOptions {
    TrainOptions {
        epochs,
        seed: m.seed,
        train_slices: m.train_slices.clone(),
        learning_rate: m.learning_rate,
        momentum: m.momentum,
        max_grad_norm,
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        width: a.width,
        height: a.height,
        depth: a.depth,
        fractions: [a.fractions[0], a.fractions[1], a.fractions[2]],
        stripe_period: a.stripe_period,
        seed: a.seed,
    };
    let s = generate(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_volume(&s.volume, &a.out)?;
    save_label_map_with_spacing(&s.truth, s.volume.spacing(), &a.out)?;
    let n = s.truth.labels().len() as f64;
    let shares: Vec<f64> =
        (1..=3u8).map(|c| s.truth.labels().iter().filter(|&&v| v == c).count() as f64 / n).collect();
    let stem = a.out.display();
    println!(
        "{}",
        json!({
            "volume": format!("{stem}.vol.json"),
            "labels": format!("{stem}.lab.json"),
            "dims": [a.width, a.height, a.depth],
            "seed": a.seed,
            "class_fractions": shares,
        })
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    match a.model.precision {
        Precision::F32 => train_as::<f32>(a),
        Precision::F64 => train_as::<f64>(a),
    }
}

fn train_as<T: Scalar>(a: TrainArgs) -> Result<()> {
    let volume = Arc::new(read_volume(&a.volume)?);
    let labels = read_labels(&a.labels)?;
    let config = read_config(a.model.config.as_deref())?;
    let opts = train_options(&a.model, a.epochs, a.max_grad_norm);
    let out = study::train::<T>(&volume, &labels, &config, &opts, |e, loss| {
        if e % 25 == 0 {
            eprintln!("epoch {e}: loss {loss:.6}");
        }
    })?;
    save_checkpoint(&out.model, &a.checkpoint).with_context(|| format!("writing {}", a.checkpoint.display()))?;
    if let Some(path) = &a.loss_csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss"])?;
        for (i, l) in out.losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
    }
    if let Some(stem) = &a.predictions {
        let preds = predict_volume(&out.model, &volume, T::lit(a.threshold), ModelVersion::default())?;
        let mut map = LabelMap::empty_with_classes(volume.dims(), labels.class_names().to_vec());
        let n = volume.dims().slice_len();
        for p in &preds {
            let plane = &mut map.labels_mut()[p.slice * n..(p.slice + 1) * n];
            for (i, (&c, &hidden)) in p.prediction.classes().iter().zip(&p.hidden).enumerate() {
                if !hidden {
                    plane[i] = c;
                }
            }
        }
        save_label_map_with_spacing(&map, volume.spacing(), stem)?;
    }
    println!(
        "{}",
        json!({
            "checkpoint": a.checkpoint,
            "epochs": a.epochs,
            "final_loss": out.losses.last(),
            "training_seconds": out.seconds,
        })
    );
    Ok(())
}

pub fn capacity_study(a: CapacityArgs) -> Result<()> {
    match a.model.precision {
        Precision::F32 => capacity_as::<f32>(a),
        Precision::F64 => capacity_as::<f64>(a),
    }
}

fn capacity_as<T: Scalar>(a: CapacityArgs) -> Result<()> {
    let volume = Arc::new(read_volume(&a.volume)?);
    let truth = read_labels(&a.labels)?;
    let clip = (!a.no_clip).then_some(a.max_grad_norm);
    let opts = CapacityOptions {
        layer_counts: a.layers.clone(),
        base: read_config(a.model.config.as_deref())?,
        train: train_options(&a.model, a.epochs, clip),
        test_slice: a.test_slice,
    };
    let rows = study::capacity_study::<T>(&volume, &truth, &opts, |layers, e, loss| {
        if e % 50 == 0 {
            eprintln!("{layers} layers, epoch {e}: loss {loss:.6}");
        }
    })?;
    write_capacity_csv(&rows, output(a.out.as_deref())?)?;
    Ok(())
}

pub fn agreement(a: AgreementArgs) -> Result<()> {
    let maps = a.readers.iter().map(|p| read_labels(p)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = a.readers.iter().map(|p| reader_id(p)).collect();
    let classes = maps.iter().map(LabelMap::num_classes).max().unwrap_or(0);
    for (m, p) in maps.iter().zip(&a.readers).skip(1) {
        if m.dims() != maps[0].dims() {
            bail!("{} has dimensions {:?}, {} has {:?}", p.display(), m.dims(), a.readers[0].display(), maps[0].dims());
        }
    }
    let readers: Vec<(String, &[u8])> = ids.into_iter().zip(maps.iter().map(LabelMap::labels)).collect();
    let report = agreement_report(&readers, a.mode, classes)?;
    report.write_csv(output(a.out.as_deref())?)?;
    if let Some(path) = &a.json {
        fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn consensus(a: ConsensusArgs) -> Result<()> {
    let maps = a.readers.iter().map(|p| read_labels(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LabelMap> = maps.iter().collect();
    let merged = consensus_mode(&refs)?;
    save_label_map(&merged, &a.out)?;
    println!("{}", json!({ "labels": format!("{}.lab.json", a.out.display()), "readers": maps.len(), "labeled": merged.labeled_count() }));
    Ok(())
}

pub fn sus_score(a: SusArgs) -> Result<()> {
    let file = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let report = sus_report(&read_responses(file)?)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record(["respondent", "score", "grade"])?;
    for r in &report.responses {
        w.write_record([r.respondent.clone(), r.score.to_string(), format!("{:?}", r.grade)])?;
    }
    w.write_record(["mean".to_string(), report.mean.to_string(), String::new()])?;
    w.write_record(["sd".to_string(), report.sd.to_string(), String::new()])?;
    w.flush()?;
    Ok(())
}

/// Header files of every volume directly inside `dir`, sorted by name.
fn volume_headers(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".vol.json"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let volumes = volume_headers(&a.data)?.iter().map(|p| read_volume(p)).collect::<Result<Vec<_>>>()?;
    if volumes.is_empty() {
        bail!("no *.vol.json volumes in {}", a.data.display());
    }
    let mode = match a.training {
        Training::Background => TrainingMode::Background,
        Training::Manual => TrainingMode::Manual,
    };
    let ids: Vec<String> = volumes.iter().map(|v| v.id().to_string()).collect();
    let state = AppState::new(volumes, mode).with_default_config(read_config(a.config.as_deref())?);
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("serving {} on http://{}", ids.join(", "), a.addr);
    runtime.block_on(slicelab_service::serve(Arc::new(state), a.addr))?;
    Ok(())
}
