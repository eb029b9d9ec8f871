use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use foleyflow_core::audiofe::{mel_spectrogram, StftParams, ToyCodec, Waveform};
use foleyflow_core::checkpoint::Checkpoint;
use foleyflow_core::config::{KeyValueConfig, KeyValues};
use foleyflow_core::metrics::{
    detect_onsets, detect_onsets_envelope, frechet_distance, inception_score, lag_metric, onset_scores, paired_kl,
    EmbeddingSet, KlDirection, LogitSet, OnsetParams, OnsetSeries,
};
use foleyflow_core::mmdit::{count_params, sample};
use foleyflow_core::synthdata::{derive_seed, generate_scenes, Manifest, ManifestEntry, SynthWorld};
use foleyflow_core::tensorfile::TensorFile;
use foleyflow_core::trainer::{train_until, TrainData, TrainState};
use foleyflow_core::{Error, Model, ModelConfig, Result, SampleConfig, TrainConfig};

use crate::args::*;
use crate::report::Report;

const CODEC_SEED: u64 = 0xc0dec;

fn check(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

fn fraction(v: f64, name: &str) -> Result<()> {
    check((0.0..=1.0).contains(&v), format!("--{name} must lie in [0, 1], got {v}"))
}

pub fn gen_data(a: &GenDataArgs, r: &mut Report) -> Result<()> {
    check(a.n > 0, "--n must be at least 1")?;
    check(a.classes > 0, "--classes must be at least 1")?;
    check(a.duration >= 1.0 && a.duration <= 60.0, "--duration must lie in [1, 60] seconds")?;
    fraction(a.no_video_fraction, "no-video-fraction")?;
    fraction(a.no_text_fraction, "no-text-fraction")?;
    let cfg = ModelConfig::preset(&a.preset)?;

    let mut flag_rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, u64::MAX));
    let entries: Vec<ManifestEntry> = generate_scenes(a.n, a.seed, a.classes, a.duration)
        .into_iter()
        .map(|scene| ManifestEntry {
            scene,
            has_video: flag_rng.gen::<f64>() >= a.no_video_fraction,
            has_text: flag_rng.gen::<f64>() >= a.no_text_fraction,
        })
        .collect();
    let m = Manifest {
        n_classes: a.classes,
        world_seed: a.world_seed,
        entries,
    };
    m.write(&a.out)?;
    if a.render {
        let world = SynthWorld::new(&cfg, a.classes, a.world_seed)?;
        m.entries.par_iter().enumerate().try_for_each(|(i, e)| -> Result<()> {
            let s = world.render_entry(e)?;
            let stem = a.out.with_extension("");
            let path = |kind: &str| PathBuf::from(format!("{}.{i:05}.{kind}.mmt", stem.display()));
            TensorFile::new(s.cond.visual)
                .with_fps(cfg.visual_fps)
                .write(&path("visual"))?;
            TensorFile::new(s.cond.sync).with_fps(cfg.sync_fps).write(&path("sync"))?;
            TensorFile::new(s.cond.text).write(&path("text"))?;
            TensorFile::new(s.x1.data)
                .with_fps(cfg.latent_fps)
                .with_preset(&cfg.name)
                .with_label("ground_truth")
                .write(&path("latent"))
        })?;
    }
    r.seed(a.seed)
        .config("n", a.n)
        .config("duration", a.duration)
        .config("classes", a.classes)
        .config("world_seed", a.world_seed)
        .config("no_video_fraction", a.no_video_fraction)
        .config("no_text_fraction", a.no_text_fraction)
        .config("render", a.render)
        .result("scenes", m.entries.len())
        .result("events", m.entries.iter().map(|e| e.scene.event_times.len()).sum::<usize>())
        .result("manifest", a.out.display().to_string());
    Ok(())
}

fn resolve_train(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let mut cfg = ModelConfig::preset(&a.preset)?;
    let mut t = TrainConfig::default();
    if let Some(p) = &a.config {
        let kv = KeyValues::read(p)?;
        cfg.apply(&kv.section("model"))?;
        t.apply(&kv.section("train"))?;
    }
    if a.no_sync {
        cfg.sync_module = false;
    }
    if let Some(v) = a.steps {
        t.total_steps = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = a.mask_prob {
        t.mask_prob = v;
    }
    if let Some(v) = a.dup_factor {
        t.dup_factor = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    match a.warmup {
        Some(v) => t.warmup_steps = v,
        None if t.warmup_steps >= t.total_steps => t.warmup_steps = t.total_steps / 10,
        None => {}
    }
    cfg.validate()?;
    t.validate()?;
    Ok((cfg, t))
}

pub fn render_data(m: &Manifest, cfg: &ModelConfig) -> Result<TrainData> {
    let world = SynthWorld::new(cfg, m.n_classes, m.world_seed)?;
    let samples: Vec<_> = m.entries.par_iter().map(|e| world.render_entry(e)).collect::<Result<_>>()?;
    let (av, at) = samples.into_iter().partition(|s| s.has_video());
    Ok(TrainData { av, at })
}

pub fn train(a: &TrainArgs, r: &mut Report) -> Result<()> {
    let (cfg, tcfg) = resolve_train(a)?;
    let manifest = Manifest::read(&a.manifest)?;
    let data = render_data(&manifest, &cfg)?;
    let mut state = match &a.resume {
        Some(p) => Checkpoint::load(p, Some(&cfg))?.state,
        None => TrainState::new(Model::new(&cfg, a.init_seed)?, &tcfg),
    };
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let start = Instant::now();
    let (mut first, mut last) = (None, None);
    let mut io_err = None;
    let save = |state: &TrainState| {
        Checkpoint {
            model_cfg: cfg.clone(),
            train_cfg: tcfg.clone(),
            state: state.clone(),
        }
        .save(&a.out)
    };
    let every = if a.checkpoint_every == 0 { tcfg.total_steps } else { a.checkpoint_every };
    let mut saved = false;
    while state.step() < tcfg.total_steps {
        let target = ((state.step() / every + 1) * every).min(tcfg.total_steps);
        train_until(&mut state, &data, &tcfg, target, |l| {
            first.get_or_insert(l.loss);
            last = Some(l.loss);
            if let (Some(w), None) = (log.as_mut(), io_err.as_ref()) {
                if let Err(e) = writeln!(w, "{}", l.to_json()) {
                    io_err = Some(e);
                }
            }
        })?;
        if let Some(e) = io_err.take() {
            return Err(Error::io(a.log.as_deref().unwrap_or(Path::new("log")), e));
        }
        save(&state)?;
        saved = true;
    }
    if !saved {
        save(&state)?;
    }
    if let Some(mut w) = log {
        w.flush().map_err(|e| Error::io(a.log.as_deref().unwrap_or(Path::new("log")), e))?;
    }
    r.seed(tcfg.seed)
        .config_text(&cfg.to_text("model"))
        .config_text(&tcfg.to_text("train"))
        .config("init_seed", a.init_seed)
        .config("world_seed", manifest.world_seed)
        .config("classes", manifest.n_classes)
        .result("steps", state.step())
        .result("samples_av", data.av.len())
        .result("samples_at", data.at.len())
        .result("first_loss", first.unwrap_or(f64::NAN))
        .result("final_loss", last.unwrap_or(f64::NAN))
        .result("wall_s", start.elapsed().as_secs_f64())
        .result("checkpoint", a.out.display().to_string());
    Ok(())
}

fn stft_for(cfg: &ModelConfig) -> StftParams {
    if (cfg.latent_fps - StftParams::SR16K.latent_fps()).abs() < 1e-9 {
        StftParams::SR16K
    } else {
        StftParams::SR44K
    }
}

pub fn sample_cmd(a: &SampleArgs, r: &mut Report) -> Result<()> {
    check(
        (1.0..=60.0).contains(&a.duration),
        format!("--duration must lie in [1, 60] seconds, got {}", a.duration),
    )?;
    let scfg = SampleConfig {
        n_steps: a.n_steps,
        cfg_strength: a.cfg_strength,
        duration_sec: a.duration,
        seed: a.seed,
    };
    scfg.validate()?;
    let ck = Checkpoint::load(&a.checkpoint, None)?;
    let manifest = Manifest::read(&a.manifest)?;
    let entry = manifest.entry(a.index)?;
    let cfg = ck.model_cfg.clone();
    let world = SynthWorld::new(&cfg, manifest.n_classes, manifest.world_seed)?;
    let mut s = world.render_sample(&entry.scene.with_duration(a.duration))?;
    s.cond.has_video = a.with_video && entry.has_video;
    s.cond.has_text = a.with_text && entry.has_text;
    let model = if a.raw_weights { ck.state.model.clone() } else { ck.state.ema_model() };
    let out = sample(&model, &s.cond, &scfg)?;
    if !out.is_finite() {
        return Err(Error::non_finite("generated latent"));
    }
    TensorFile::new(out.data.clone())
        .with_fps(cfg.latent_fps)
        .with_preset(&cfg.name)
        .with_label("generated")
        .write(&a.out)?;
    let codec = ToyCodec::new(&stft_for(&cfg), cfg.latent_dim, CODEC_SEED)?;
    let mel = codec.decode(&out.cast());
    let mel_path = PathBuf::from(format!("{}.mel", a.out.display()));
    TensorFile::new(mel.data.mapv(|v| v as f32))
        .with_fps(mel.fps())
        .with_label("mel")
        .write(&mel_path)?;
    r.seed(a.seed)
        .config_text(&cfg.to_text("model"))
        .config("n_steps", a.n_steps)
        .config("cfg_strength", a.cfg_strength)
        .config("duration", a.duration)
        .config("index", a.index)
        .config("with_video", s.cond.has_video)
        .config("with_text", s.cond.has_text)
        .config("weights", if a.raw_weights { "raw" } else { "ema" })
        .result("frames", out.len())
        .result("channels", out.channels())
        .result("latent", a.out.display().to_string())
        .result("mel", mel_path.display().to_string());
    Ok(())
}

fn to_f64(t: &TensorFile) -> Array2<f64> {
    t.data.mapv(f64::from)
}

pub fn eval_fd(a: &EvalFdArgs, r: &mut Report) -> Result<()> {
    let (x, y) = (TensorFile::read(&a.a)?, TensorFile::read(&a.b)?);
    let set = |t: &TensorFile, p: &Path| EmbeddingSet {
        vectors: to_f64(t),
        label: p.display().to_string(),
    };
    let fd = frechet_distance(&set(&x, &a.a), &set(&y, &a.b))?;
    r.config("a", a.a.display()).config("b", a.b.display()).result("fd", fd);
    Ok(())
}

pub fn eval_is(a: &EvalIsArgs, r: &mut Report) -> Result<()> {
    let t = TensorFile::read(&a.logits)?;
    let is = inception_score(&LogitSet {
        logits: to_f64(&t),
        paired: false,
    })?;
    r.config("logits", a.logits.display()).result("is", is);
    Ok(())
}

pub fn eval_kl(a: &EvalKlArgs, r: &mut Report) -> Result<()> {
    let dir = match a.direction {
        Direction::GtGen => KlDirection::GtToGen,
        Direction::GenGt => KlDirection::GenToGt,
    };
    let load = |p: &Path| -> Result<LogitSet> {
        Ok(LogitSet {
            logits: to_f64(&TensorFile::read(p)?),
            paired: true,
        })
    };
    let kl = paired_kl(&load(&a.gt)?, &load(&a.gen)?, dir)?;
    r.config("gt", a.gt.display())
        .config("gen", a.gen.display())
        .config("direction", dir.name())
        .result("kl", kl);
    Ok(())
}

fn envelope(t: &TensorFile, channel: usize) -> Result<Vec<f64>> {
    check(
        channel < t.data.ncols(),
        format!("channel {channel} out of range for {} columns", t.data.ncols()),
    )?;
    Ok(t.data.column(channel).iter().map(|&v| f64::from(v)).collect())
}

pub fn eval_onset(a: &EvalOnsetArgs, r: &mut Report) -> Result<()> {
    check(a.tol > 0.0, "--tol must be positive")?;
    check(
        a.times.is_some() != a.manifest.is_some(),
        "give exactly one of --times and --manifest",
    )?;
    let params = OnsetParams::default();
    let is_wav = a.gen.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let pred = if is_wav {
        let w = Waveform::read_wav(&a.gen)?;
        let p = StftParams::for_rate(w.sample_rate)?;
        detect_onsets(&mel_spectrogram(&w, &p)?, &params)
    } else {
        let t = TensorFile::read(&a.gen)?;
        detect_onsets_envelope(&envelope(&t, a.channel)?, t.fps.unwrap_or(31.25), &params)
    };
    let times = match (&a.times, &a.manifest) {
        (Some(t), _) => t.clone(),
        (None, Some(m)) => Manifest::read(m)?.entry(a.index)?.scene.event_times.clone(),
        _ => unreachable!("checked above"),
    };
    let times: Vec<f64> = times.into_iter().filter(|&t| t < pred.duration).collect();
    let gt = OnsetSeries::new(times, pred.duration)?;
    let s = onset_scores(&pred, &gt, a.tol)?;
    r.config("gen", a.gen.display())
        .config("tol", a.tol)
        .config("channel", a.channel)
        .result("accuracy", s.accuracy)
        .result("ap", s.ap)
        .result("f1", s.f1)
        .result("precision", s.precision)
        .result("recall", s.recall)
        .result("detected", pred.len())
        .result("reference", gt.len());
    Ok(())
}

pub fn eval_lag(a: &EvalLagArgs, r: &mut Report) -> Result<()> {
    check(a.max_lag > 0.0, "--max-lag must be positive")?;
    let (g, t) = (TensorFile::read(&a.gen)?, TensorFile::read(&a.gt)?);
    let fps = g.fps.unwrap_or(a.fps);
    let lag = lag_metric(&envelope(&g, a.channel)?, &envelope(&t, a.channel)?, fps, a.max_lag)?;
    r.config("gen", a.gen.display())
        .config("gt", a.gt.display())
        .config("fps", fps)
        .result("lag_s", lag)
        .result("lag_frames", lag * fps);
    Ok(())
}

pub fn inspect(a: &InspectArgs, r: &mut Report) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint, None)?;
    let mut total = 0usize;
    for (name, v) in ck.state.model.params.iter() {
        eprintln!("{name:<28} {:>5} x {:<5}", v.nrows(), v.ncols());
        total += v.len();
    }
    let expected = count_params(&ck.model_cfg)?;
    check(total == expected, format!("tensor total {total} differs from layout {expected}"))?;
    r.seed(ck.train_cfg.seed)
        .config_text(&ck.model_cfg.to_text("model"))
        .config_text(&ck.train_cfg.to_text("train"))
        .result("step", ck.step())
        .result("tensors", ck.state.model.params.len())
        .result("params", total);
    Ok(())
}
