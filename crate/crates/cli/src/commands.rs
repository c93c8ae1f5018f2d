use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use laser_core::checkpoint::load_checkpoint;
use laser_core::config::RunConfig;
use laser_core::curation::{
    background_rms, clip_background_rms, external_vad, meets_min_duration, noise_split, CurationConfig,
};
use laser_core::data::{load_corpus, load_corpus_dir, load_manifest, write_corpus, write_tensor, CorpusEntry, MANIFEST_FILE};
use laser_core::eval::{evaluate, EvalConfig, Protocol};
use laser_core::lip::{aggregate, encode_lip_landmarks, LipAggregator};
use laser_core::model::LipIntegration;
use laser_core::synth::{generate_corpus, generate_track, SynthConfig};
use laser_core::train::{checkpoint_path, train as run_training, TrainOutput, TrainState};
use laser_core::{Error, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::{AblateArgs, Baseline, CurateArgs, EncodeArgs, EvalArgs, SynthArgs, TrainArgs};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, text).map_err(|e| Error::io(p, e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
    let cfg = RunConfig::from_json(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        .resolved();
    Ok((cfg, sha256_hex(&bytes)))
}

fn check_crop(cfg: &RunConfig, corpus: &[CorpusEntry]) -> Result<()> {
    if let Some(e) = corpus.iter().find(|e| e.track.width != cfg.model.crop_size) {
        return Err(Error::Config(format!(
            "model crop_size {} does not match track {} ({} px)",
            cfg.model.crop_size, e.track.track_id, e.track.width
        )));
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?.0.synth,
        None => SynthConfig::default(),
    };
    cfg.num_tracks = a.num_tracks;
    cfg.noise_rms = a.noise_rms.clone();
    cfg.seed = a.seed;
    cfg.crop_size = a.crop_size;
    cfg.landmark_dropout = a.landmark_dropout;
    cfg.validate()?;
    if a.out.exists() {
        let occupied = fs::read_dir(&a.out).map_err(|e| Error::io(&a.out, e))?.next().is_some();
        if occupied && !a.force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
    }
    let corpus = generate_corpus(&cfg)?;
    write_corpus(&a.out, &corpus)?;
    let path = a.out.join("synth_config.json");
    let text = serde_json::to_string_pretty(&cfg)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    eprintln!("wrote {} tracks to {}", corpus.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (mut cfg, hash) = load_config(&a.config)?;
    if a.no_consistency {
        cfg.train.consistency = false;
    }
    if a.no_lte {
        cfg.model.integration = LipIntegration::None;
    }
    match a.baseline {
        Some(Baseline::Pooling) => cfg.model.integration = LipIntegration::Pooling,
        Some(Baseline::Ldi) => cfg.model.integration = LipIntegration::Ldi,
        None => {}
    }
    cfg.validate()?;
    let corpus = load_corpus_dir(&a.corpus)?;
    check_crop(&cfg, &corpus)?;
    let dir = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/train"));
    let mut state = match &a.resume {
        Some(p) => TrainState::load(p)?,
        None => TrainState::new(cfg.model.clone(), cfg.loss, cfg.train.clone())?,
    };
    let header = json!({
        "command": "train",
        "config_path": a.config,
        "config_sha256": hash,
        "corpus": a.corpus,
        "variant": {
            "consistency": cfg.train.consistency,
            "integration": cfg.model.integration,
        },
        "config": cfg,
    });
    let out = TrainOutput { dir: dir.clone(), header };
    let records = run_training(&mut state, &corpus, Some(&out))?;
    eprintln!(
        "trained {} steps to epoch {}; last checkpoint {}",
        records.len(),
        state.epoch,
        checkpoint_path(&dir, state.epoch).display()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let protocol: Protocol = a.protocol.parse()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model::<f32>()?;
    let corpus = load_corpus_dir(&a.corpus)?;
    let cfg = EvalConfig {
        protocol,
        delays: a.delays.clone(),
        rms_threshold: a.rms_threshold,
        with_lte: a.with_lte,
        seed: a.seed,
    };
    let curation = CurationConfig {
        rms_threshold: a.rms_threshold,
        ..CurationConfig::default()
    };
    let report = evaluate(&model, &corpus, &cfg, &curation)?;
    emit(&serde_json::to_string_pretty(&report)?, a.out.as_deref())
}

pub fn curate(a: &CurateArgs) -> Result<()> {
    let cfg = CurationConfig {
        min_track_seconds: a.min_track_seconds,
        rms_threshold: a.rms_threshold,
        vad: a.vad.clone(),
        ..CurationConfig::default()
    };
    cfg.validate()?;
    let manifest = load_manifest(&a.corpus.join(MANIFEST_FILE))?;
    let corpus = load_corpus(&manifest)?;
    let mut dropped = Vec::new();
    let mut clips = Vec::new();
    for (entry, m) in corpus.iter().zip(&manifest.entries) {
        let t = &entry.track;
        if !meets_min_duration(t.num_frames, t.fps, cfg.min_track_seconds) {
            dropped.push(t.track_id.clone());
            continue;
        }
        let rms = match cfg.vad.strip_prefix("external:") {
            Some(cmd) => {
                let vad = external_vad(cmd, &manifest.resolve(&m.audio))
                    .map_err(|e| Error::track(&t.track_id, e.to_string()))?;
                background_rms(&entry.audio, &vad, cfg.min_background_seconds)
            }
            None => clip_background_rms(&entry.audio, &cfg),
        };
        clips.push((t.track_id.clone(), rms));
    }
    let split = noise_split(&clips, cfg.rms_threshold);
    let doc = json!({
        "low": split.low,
        "high": split.high,
        "undetermined": split.undetermined,
        "threshold": split.threshold,
        "normalization": split.normalization,
        "dropped_short": dropped,
        "config": cfg,
    });
    emit(&serde_json::to_string_pretty(&doc)?, a.out.as_deref())
}

fn apply_sweep(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("bad value {value:?} for sweep key {key}"));
    match key {
        "stage" => cfg.model.visual.lip_injection_stage = value.parse().map_err(|_| bad())?,
        "S" => cfg.model.aggregated_channels = value.parse().map_err(|_| bad())?,
        "lambda_c" => cfg.loss.lambda_c = value.parse().map_err(|_| bad())?,
        _ => {
            return Err(Error::Config(format!(
                "unknown sweep key {key:?}; expected stage, S or lambda_c"
            )))
        }
    }
    cfg.validate()
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let (base, _) = load_config(&a.config)?;
    let (key, values) = a
        .sweep
        .split_once('=')
        .ok_or_else(|| Error::Config("sweep must look like key=v1,v2".into()))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Config("sweep has no values".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            apply_sweep(&mut cfg, key, v)?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = load_corpus_dir(&a.corpus)?;
    let eval_corpus = match &a.eval_corpus {
        Some(p) => load_corpus_dir(p)?,
        None => corpus.clone(),
    };
    check_crop(&base, &corpus)?;
    let mut csv = String::from("key,value,seed,map,accuracy\n");
    for (v, cfg) in values.iter().zip(configs) {
        let mut state = TrainState::new(cfg.model.clone(), cfg.loss, cfg.train.clone())?;
        run_training(&mut state, &corpus, None)?;
        let eval_cfg = EvalConfig {
            protocol: Protocol::Standard,
            ..cfg.eval.clone()
        };
        let report = evaluate(&state.model, &eval_corpus, &eval_cfg, &cfg.curation)?;
        let all = &report.subsets[0];
        let map = all.map.map(|m| format!("{m:.6}")).unwrap_or_default();
        let _ = writeln!(csv, "{key},{v},{},{map},{:.6}", cfg.seed, all.accuracy);
    }
    emit(csv.trim_end(), a.out.as_deref())
}

pub fn encode(a: &EncodeArgs) -> Result<()> {
    if !a.demo {
        return Err(Error::Config("only --demo is supported".into()));
    }
    let cfg = SynthConfig {
        num_tracks: 1,
        min_frames: a.frames,
        max_frames: a.frames,
        crop_size: a.crop_size,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let (entry, _) = generate_track(&cfg, 0);
    let c = a.crop_size;
    let maps = encode_lip_landmarks(&entry.lips, c, c)?;
    let [t, k, _, h, w] = maps.shape();
    let agg = aggregate(&maps, &LipAggregator::<f32>::uniform(a.channels, k))?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_tensor(&a.out.join("frames.lsrt"), [t, h, w], &entry.track.frames)?;
    write_tensor(&a.out.join("lip_maps.lsrt"), [t * k * 2, h, w], maps.to_dense::<f32>().data())?;
    write_tensor(&a.out.join("aggregated.lsrt"), [t * a.channels * 2, h, w], agg.values.data())?;
    let layout = json!({
        "frames.lsrt": {"planes": "frame", "shape": [t, h, w]},
        "lip_maps.lsrt": {"planes": "frame, landmark, coordinate (x then y)", "shape": [t, k, 2, h, w]},
        "aggregated.lsrt": {"planes": "frame, channel, coordinate (x then y)", "shape": [t, a.channels, 2, h, w]},
        "aggregator": "uniform",
        "synth": cfg,
    });
    let path = a.out.join("layout.json");
    fs::write(&path, serde_json::to_string_pretty(&layout)?).map_err(|e| Error::io(&path, e))?;
    eprintln!("wrote encoded maps for {t} frames to {}", a.out.display());
    Ok(())
}
