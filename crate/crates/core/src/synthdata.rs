//! Procedural multimodal scenes with known event times.
//!
//! A scene has a class and a handful of timed events. Rendering produces the
//! three conditioning streams and the target latents:
//!
//! * visual features: a class embedding plus a smooth bump (0.25 s wide) at
//!   each event, so timing is only loosely visible at 8 fps;
//! * sync features: a one-frame spike at each event at 24 fps, on top of a
//!   pattern repeating every 8 frames;
//! * text features: a fixed sequence per class;
//! * latents: channel 0 carries a decaying impulse (0.1 s) per event, the
//!   remaining channels a class-specific stationary texture (sinusoids whose
//!   amplitude, frequency and phase depend only on the class).

use std::f64::consts::TAU;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::LatentSeq;
use crate::mmdit::clip_lengths;
use crate::syncmod::{Conditions, SYNC_CLIP};

pub const DEFAULT_CLASSES: usize = 16;
pub const MIN_EVENT_GAP: f64 = 0.2;
pub const MAX_EVENTS: usize = 8;
const MEAN_EVENTS: f64 = 3.0;
/// Events are kept this far from the clip edges.
const EDGE_MARGIN: f64 = 0.25;
const VISUAL_BUMP_SIGMA: f64 = 0.25;
const IMPULSE_DECAY: f64 = 0.1;
const IMPULSE_AMPLITUDE: f64 = 2.0;
const SYNC_NOISE: f64 = 0.05;

/// SplitMix64 mixing of a base seed with an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub duration_sec: f64,
    pub class_id: usize,
    /// Strictly increasing, at least [`MIN_EVENT_GAP`] apart.
    pub event_times: Vec<f64>,
    pub seed: u64,
}

impl SyntheticScene {
    /// The same events and class over a different clip length (events past
    /// the new end are dropped).
    pub fn with_duration(&self, duration_sec: f64) -> Self {
        SyntheticScene {
            duration_sec,
            event_times: self.event_times.iter().copied().filter(|&t| t < duration_sec).collect(),
            ..self.clone()
        }
    }
}

/// Draws a scene: uniform class, event count from a Poisson(3) clamped to
/// `[1, 8]` (and to what fits), event times uniform subject to the minimum gap.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, n_classes: usize, duration_sec: f64) -> SyntheticScene {
    let seed = rng.gen::<u64>();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let class_id = r.gen_range(0..n_classes.max(1));
    let span = (duration_sec - 2.0 * EDGE_MARGIN).max(0.0);
    let fit = (span / MIN_EVENT_GAP).floor() as usize + 1;
    let count = (Poisson::new(MEAN_EVENTS).unwrap().sample(&mut r) as usize).clamp(1, MAX_EVENTS.min(fit));
    let lo = EDGE_MARGIN.min(duration_sec / 2.0);
    // Sorted uniforms on the span minus the reserved gaps, then shifted by
    // i gaps: uniform over all gap-respecting configurations.
    let free = (span - (count - 1) as f64 * MIN_EVENT_GAP).max(0.0);
    let mut event_times: Vec<f64> = (0..count).map(|_| r.gen::<f64>() * free).collect();
    event_times.sort_by(|a, b| a.total_cmp(b));
    for (i, t) in event_times.iter_mut().enumerate() {
        *t += lo + i as f64 * MIN_EVENT_GAP;
    }
    SyntheticScene {
        duration_sec,
        class_id,
        event_times,
        seed,
    }
}

/// `n` scenes whose seeds derive from `(seed, index)`.
pub fn generate_scenes(n: usize, seed: u64, n_classes: usize, duration_sec: f64) -> Vec<SyntheticScene> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            generate_scene(&mut rng, n_classes, duration_sec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub scene: SyntheticScene,
    /// Raw features and presence flags.
    pub cond: Conditions<f32>,
    pub x1: LatentSeq<f32>,
}

impl TrainingSample {
    pub fn has_video(&self) -> bool {
        self.cond.has_video
    }

    pub fn has_text(&self) -> bool {
        self.cond.has_text
    }
}

/// Class-level tables shared by every scene of a dataset.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub cfg: ModelConfig,
    pub n_classes: usize,
    class_visual: Array2<f64>,
    bump_visual: Array1<f64>,
    class_text: Vec<Array2<f64>>,
    sync_spike: Array1<f64>,
    sync_pattern: Array2<f64>,
    /// `(n_classes, latent_dim - 1)` texture amplitudes, frequencies (Hz) and phases.
    tex_amp: Array2<f64>,
    tex_freq: Array2<f64>,
    tex_phase: Array2<f64>,
}

fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || scale * rng.sample::<f64, _>(StandardNormal))
}

impl SynthWorld {
    pub fn new(cfg: &ModelConfig, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Config("n_classes must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tex = cfg.latent_dim.saturating_sub(1);
        let class_visual = normal_mat(&mut rng, n_classes, cfg.visual_feat_dim, 0.5);
        let bump_visual = normal_mat(&mut rng, 1, cfg.visual_feat_dim, 1.0).row(0).to_owned();
        let class_text = (0..n_classes)
            .map(|_| normal_mat(&mut rng, cfg.text_len, cfg.text_feat_dim, 0.5))
            .collect();
        let sync_spike = normal_mat(&mut rng, 1, cfg.sync_feat_dim, 1.0).row(0).to_owned();
        let sync_pattern = normal_mat(&mut rng, SYNC_CLIP, cfg.sync_feat_dim, 0.3);
        let tex_amp = Array2::from_shape_simple_fn((n_classes, tex), || rng.gen_range(0.5..1.0));
        let tex_freq = Array2::from_shape_simple_fn((n_classes, tex), || rng.gen_range(0.5..3.0));
        let tex_phase = Array2::from_shape_simple_fn((n_classes, tex), || rng.gen_range(0.0..TAU));
        Ok(SynthWorld {
            cfg: cfg.clone(),
            n_classes,
            class_visual,
            bump_visual,
            class_text,
            sync_spike,
            sync_pattern,
            tex_amp,
            tex_freq,
            tex_phase,
        })
    }

    /// Ground-truth event envelope at the latent rate (latent channel 0).
    pub fn event_envelope(&self, scene: &SyntheticScene) -> Vec<f64> {
        let fps = self.cfg.latent_fps;
        let len = self.cfg.audio_len(scene.duration_sec);
        let decay_frames = IMPULSE_DECAY * fps;
        let mut env = vec![0.0; len];
        for &e in &scene.event_times {
            let start = (e * fps).round() as usize;
            for (j, v) in env.iter_mut().enumerate().skip(start) {
                *v += IMPULSE_AMPLITUDE * (-((j - start) as f64) / decay_frames).exp();
            }
        }
        env
    }

    pub fn render_sample(&self, scene: &SyntheticScene) -> Result<TrainingSample> {
        let cfg = &self.cfg;
        if scene.class_id >= self.n_classes {
            return Err(Error::Config(format!(
                "class {} out of range for {} classes",
                scene.class_id, self.n_classes
            )));
        }
        let (la, lv, ls) = clip_lengths(cfg, scene.duration_sec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, 1));
        let c = scene.class_id;

        let class_row = self.class_visual.row(c);
        let visual = Array2::from_shape_fn((lv, cfg.visual_feat_dim), |(i, d)| {
            let t = i as f64 / cfg.visual_fps;
            let bump: f64 = scene
                .event_times
                .iter()
                .map(|&e| (-(t - e).powi(2) / (2.0 * VISUAL_BUMP_SIGMA.powi(2))).exp())
                .sum();
            class_row[d] + bump * self.bump_visual[d]
        });

        let spikes: Vec<usize> = scene.event_times.iter().map(|&e| (e * cfg.sync_fps).round() as usize).collect();
        let mut sync = Array2::from_shape_fn((ls, cfg.sync_feat_dim), |(i, d)| {
            let hit = spikes.contains(&i) as u8 as f64;
            self.sync_pattern[[i % SYNC_CLIP, d]] + hit * self.sync_spike[d]
        });
        sync.mapv_inplace(|v| v + SYNC_NOISE * rng.sample::<f64, _>(StandardNormal));

        let text = self.class_text[c].clone();

        let env = self.event_envelope(scene);
        let x1 = Array2::from_shape_fn((la, cfg.latent_dim), |(j, ch)| {
            if ch == 0 {
                env[j]
            } else {
                let t = j as f64 / cfg.latent_fps;
                let k = ch - 1;
                self.tex_amp[[c, k]] * (TAU * self.tex_freq[[c, k]] * t + self.tex_phase[[c, k]]).sin()
            }
        });

        let f = |a: Array2<f64>| a.mapv(|v| v as f32);
        Ok(TrainingSample {
            scene: scene.clone(),
            cond: Conditions {
                visual: f(visual),
                sync: f(sync),
                text: f(text),
                has_video: true,
                has_text: true,
            },
            x1: LatentSeq::new(f(x1), cfg.latent_fps),
        })
    }
}

/// Independently drops video (visual and sync together) and text with
/// probability `p` each. Both uniforms are always drawn.
pub fn mask_modalities<R: Rng + ?Sized>(sample: &TrainingSample, p: f64, rng: &mut R) -> TrainingSample {
    let drop_video = rng.gen::<f64>() < p;
    let drop_text = rng.gen::<f64>() < p;
    let mut out = sample.clone();
    out.cond.has_video &= !drop_video;
    out.cond.has_text &= !drop_text;
    out
}

/// Which source set an epoch entry points into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EpochItem {
    /// Audio-visual(-text) sample index.
    Av(usize),
    /// Audio-text (or audio-only) sample index.
    At(usize),
}

/// Audio-visual samples repeated `dup_factor` times, concatenated with the
/// audio-text samples and shuffled with the epoch seed.
pub fn balance_interleave(av_len: usize, at_len: usize, dup_factor: usize, epoch_seed: u64) -> Result<Vec<EpochItem>> {
    if dup_factor == 0 {
        return Err(Error::Config("dup_factor must be at least 1".into()));
    }
    let mut order: Vec<EpochItem> = (0..dup_factor)
        .flat_map(|_| (0..av_len).map(EpochItem::Av))
        .chain((0..at_len).map(EpochItem::At))
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order)
}

/// One manifest line per scene.
pub fn manifest_line(scene: &SyntheticScene, has_video: bool, has_text: bool) -> String {
    let mut s = format!(
        "seed={} class={} duration={} has_video={} has_text={} events=",
        scene.seed, scene.class_id, scene.duration_sec, has_video as u8, has_text as u8
    );
    for (i, t) in scene.event_times.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{t:.6}");
    }
    s
}

pub fn parse_manifest_line(line: &str) -> Result<(SyntheticScene, bool, bool)> {
    let bad = |what: &str| Error::Format(format!("manifest line '{line}': bad {what}"));
    let mut scene = SyntheticScene {
        duration_sec: 0.0,
        class_id: 0,
        event_times: Vec::new(),
        seed: 0,
    };
    let (mut hv, mut ht) = (true, true);
    for field in line.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| bad("field"))?;
        match k {
            "seed" => scene.seed = v.parse().map_err(|_| bad("seed"))?,
            "class" => scene.class_id = v.parse().map_err(|_| bad("class"))?,
            "duration" => scene.duration_sec = v.parse().map_err(|_| bad("duration"))?,
            "has_video" => hv = v == "1",
            "has_text" => ht = v == "1",
            "events" => {
                scene.event_times = v
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| bad("events")))
                    .collect::<Result<_>>()?
            }
            _ => return Err(bad("key")),
        }
    }
    Ok((scene, hv, ht))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub scene: SyntheticScene,
    pub has_video: bool,
    pub has_text: bool,
}

/// A dataset description: the class-table parameters on a `#` header line,
/// then one scene per line.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub n_classes: usize,
    pub world_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("# manifest classes={} world_seed={}\n", self.n_classes, self.world_seed);
        for e in &self.entries {
            out += &manifest_line(&e.scene, e.has_video, e.has_text);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest {
            n_classes: DEFAULT_CLASSES,
            world_seed: 0,
            entries: Vec::new(),
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    match field.split_once('=') {
                        Some(("classes", v)) => {
                            m.n_classes = v.parse().map_err(|_| Error::Format(format!("bad classes '{v}'")))?
                        }
                        Some(("world_seed", v)) => {
                            m.world_seed = v.parse().map_err(|_| Error::Format(format!("bad world_seed '{v}'")))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let (scene, has_video, has_text) = parse_manifest_line(line)?;
            m.entries.push(ManifestEntry {
                scene,
                has_video,
                has_text,
            });
        }
        if let Some(e) = m.entries.iter().find(|e| e.scene.class_id >= m.n_classes) {
            return Err(Error::Format(format!(
                "class {} exceeds the manifest's {} classes",
                e.scene.class_id, m.n_classes
            )));
        }
        Ok(m)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn entry(&self, index: usize) -> Result<&ManifestEntry> {
        self.entries.get(index).ok_or_else(|| {
            Error::Config(format!("index {index} out of range for {} manifest entries", self.entries.len()))
        })
    }
}

impl SynthWorld {
    /// Renders an entry and applies its stored modality flags.
    pub fn render_entry(&self, e: &ManifestEntry) -> Result<TrainingSample> {
        let mut s = self.render_sample(&e.scene)?;
        s.cond.has_video = e.has_video;
        s.cond.has_text = e.has_text;
        Ok(s)
    }
}
