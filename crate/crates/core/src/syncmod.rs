//! Frame-aligned conditioning from high-rate synchronization features.
//!
//! Sync features arrive at 24 fps in clips of 8 frames. They are projected,
//! upsampled to the audio latent rate with center-aligned nearest neighbor
//! indexing and added to the global condition, giving one conditioning row
//! per audio token. This module also owns the empty tokens that stand in for
//! missing modalities.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Real, Var};
use crate::layers::{gate, modulate, Conv1d, ConvMlp, Init, ParamBuilder};

/// Frames per sync clip; the learnable positional embedding has this period.
pub const SYNC_CLIP: usize = 8;

/// Frame rate at which the sync encoder consumes video.
const SYNC_INPUT_FPS: f64 = 25.0;
const SYNC_WINDOW: usize = 16;

/// Seed of the fixed "empty string" text features.
const EMPTY_TEXT_SEED: u64 = 0x0e77_7e47;

/// Number of sync feature rows for a clip of the given duration: windows of
/// 16 frames at 25 fps with stride 8, each window yielding 8 features.
pub fn sync_seq_len(duration_sec: f64) -> Result<usize> {
    let frames = SYNC_INPUT_FPS * duration_sec;
    if !(duration_sec > 0.0) || frames + 1e-9 < SYNC_WINDOW as f64 {
        return Err(Error::TooShort { duration_sec });
    }
    // Guard against 25 * 0.64 landing a hair under 16.
    let windows = ((frames - SYNC_WINDOW as f64) / SYNC_CLIP as f64 + 1e-9).floor() as usize + 1;
    Ok(SYNC_CLIP * windows)
}

/// Source row for each destination row of a nearest-neighbor resampling:
/// `clamp(floor((j + 0.5) * src / dst), 0, src - 1)`, computed in integers.
pub fn upsample_index(src_len: usize, dst_len: usize) -> Vec<usize> {
    assert!(src_len >= 1 && dst_len >= 1, "upsample needs nonempty sequences");
    (0..dst_len)
        .map(|j| (((2 * j + 1) * src_len) / (2 * dst_len)).min(src_len - 1))
        .collect()
}

pub fn upsample_nearest<T: Real>(src: ArrayView2<'_, T>, dst_len: usize) -> Array2<T> {
    let index = upsample_index(src.nrows(), dst_len);
    Array2::from_shape_fn((dst_len, src.ncols()), |(j, c)| src[[index[j], c]])
}

/// Raw (pre-projection) conditioning inputs for one clip.
///
/// When a modality is absent its arrays still fix the sequence lengths, but
/// their contents are ignored and the empty tokens are used instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions<T = f32> {
    /// `(L_v, visual_feat_dim)` at the visual frame rate.
    pub visual: Array2<T>,
    /// `(L_sync, sync_feat_dim)` at the sync frame rate.
    pub sync: Array2<T>,
    /// `(text_len, text_feat_dim)`.
    pub text: Array2<T>,
    pub has_video: bool,
    pub has_text: bool,
}

impl<T: Real> Conditions<T> {
    pub fn cast<U: Real>(&self) -> Conditions<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::c(v.f64()));
        Conditions {
            visual: c(&self.visual),
            sync: c(&self.sync),
            text: c(&self.text),
            has_video: self.has_video,
            has_text: self.has_text,
        }
    }

    /// Same geometry with both modalities marked absent.
    pub fn unconditional(&self) -> Self {
        Conditions {
            has_video: false,
            has_text: false,
            ..self.clone()
        }
    }
}

/// Learnable stand-ins for missing video; missing text uses the fixed
/// [`empty_text_features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmptyTokens {
    pub visual: ParamId,
    pub sync: Option<ParamId>,
}

impl EmptyTokens {
    pub fn new(pb: &mut dyn ParamBuilder, cfg: &ModelConfig) -> Self {
        let visual = pb.declare(
            "empty.visual",
            1,
            cfg.visual_feat_dim,
            Init::Uniform { fan_in: cfg.visual_feat_dim },
        );
        let sync = cfg.sync_module.then(|| {
            pb.declare(
                "empty.sync",
                1,
                cfg.sync_feat_dim,
                Init::Uniform { fan_in: cfg.sync_feat_dim },
            )
        });
        EmptyTokens { visual, sync }
    }

    /// Current values of all three empty tokens.
    pub fn values<T: Real>(&self, store: &ParamStore<T>, cfg: &ModelConfig) -> EmptyValues<T> {
        EmptyValues {
            visual: store.get(self.visual).clone(),
            sync: match self.sync {
                Some(id) => store.get(id).clone(),
                None => Array2::zeros((1, cfg.sync_feat_dim)),
            },
            text: empty_text_features(cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmptyValues<T> {
    /// `(1, visual_feat_dim)`.
    pub visual: Array2<T>,
    /// `(1, sync_feat_dim)`.
    pub sync: Array2<T>,
    /// `(text_len, text_feat_dim)`.
    pub text: Array2<T>,
}

/// Text features of the empty caption. These come from the (frozen) text
/// encoder, so they are a fixed function of the geometry, not a parameter.
pub fn empty_text_features<T: Real>(cfg: &ModelConfig) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(EMPTY_TEXT_SEED);
    let scale = 1.0 / (cfg.text_feat_dim as f64).sqrt();
    Array2::from_shape_simple_fn((cfg.text_len, cfg.text_feat_dim), || {
        T::c(rng.gen_range(-1.0..1.0) * scale)
    })
}

fn repeat_row<T: Real>(row: &Array2<T>, n: usize) -> Array2<T> {
    Array2::from_shape_fn((n, row.ncols()), |(_, c)| row[[0, c]])
}

/// Replaces absent modalities by empty tokens at the raw-feature stage.
/// Missing video swaps both the visual and the sync features.
pub fn substitute_missing<T: Real>(
    cond: &Conditions<T>,
    present_video: bool,
    present_text: bool,
    empty: &EmptyValues<T>,
) -> Conditions<T> {
    let mut out = cond.clone();
    if !present_video {
        out.visual = repeat_row(&empty.visual, cond.visual.nrows());
        out.sync = repeat_row(&empty.sync, cond.sync.nrows());
        out.has_video = false;
    }
    if !present_text {
        out.text = empty.text.clone();
        out.has_text = false;
    }
    out
}

/// Sync projection: an 8-periodic learnable positional embedding added to
/// the raw features, then conv(7) to the hidden width, SELU and a ConvMLP(3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncProjection {
    pub pos: ParamId,
    pub conv: Conv1d,
    pub mlp: ConvMlp,
}

impl SyncProjection {
    pub fn new(pb: &mut dyn ParamBuilder, cfg: &ModelConfig) -> Self {
        let d = cfg.sync_feat_dim;
        SyncProjection {
            pos: pb.declare("sync.pos", SYNC_CLIP, d, Init::Uniform { fan_in: d }),
            conv: Conv1d::new(pb, "sync.conv", d, cfg.hidden_dim, 7),
            mlp: ConvMlp::new(pb, "sync.mlp", cfg.hidden_dim, cfg.mlp_hidden(), 3),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, raw: Var) -> Var {
        let len = g.shape(raw).0;
        let pos = g.param(self.pos);
        let pos = g.gather_rows(pos, (0..len).map(|i| i % SYNC_CLIP).collect());
        let x = g.add(raw, pos);
        let x = self.conv.apply(g, x);
        let x = g.selu(x);
        self.mlp.apply(g, x)
    }
}

/// `c_f = upsample(project(F_sync)) + 1 c_g`; without a sync pathway the
/// first term is absent and every row equals `c_g`.
pub fn compute_frame_condition<T: Real>(
    g: &mut Graph<'_, T>,
    proj: Option<&SyncProjection>,
    sync_raw: Var,
    c_g: Var,
    audio_len: usize,
) -> Result<Var> {
    if audio_len == 0 {
        return Err(Error::shape("frame condition", "audio length is zero"));
    }
    let Some(proj) = proj else {
        return Ok(g.gather_rows(c_g, vec![0; audio_len]));
    };
    let src_len = g.shape(sync_raw).0;
    if src_len == 0 {
        return Err(Error::shape("frame condition", "sync sequence is empty"));
    }
    let feats = proj.apply(g, sync_raw);
    let up = g.gather_rows(feats, upsample_index(src_len, audio_len));
    Ok(g.add(up, c_g))
}

fn check_rows<T: Real>(g: &Graph<'_, T>, stage: &str, x: Var, rows: &[Var]) -> Result<()> {
    let n = g.shape(x).0;
    for &r in rows {
        if g.shape(r).0 != n {
            return Err(Error::shape(
                stage,
                format!("{} tokens but {} condition rows", n, g.shape(r).0),
            ));
        }
    }
    Ok(())
}

/// Per-token adaLN: `LN(x) * gamma + beta` with one scale/bias row per token
/// (both produced from `c_f`).
pub fn ada_ln_frame<T: Real>(g: &mut Graph<'_, T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    check_rows(g, "ada_ln_frame", x, &[gamma, beta])?;
    Ok(modulate(g, x, gamma, beta))
}

/// Per-token gating `x * scale`.
pub fn gating_frame<T: Real>(g: &mut Graph<'_, T>, x: Var, scale: Var) -> Result<Var> {
    check_rows(g, "gating_frame", x, &[scale])?;
    Ok(gate(g, x, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::StoreBuilder;
    use proptest::prelude::*;

    #[test]
    fn sync_lengths_match_known_durations() {
        assert_eq!(sync_seq_len(8.0).unwrap(), 192);
        assert_eq!(sync_seq_len(10.0).unwrap(), 240);
        assert_eq!(sync_seq_len(0.64).unwrap(), 8);
        assert!(matches!(sync_seq_len(0.5), Err(Error::TooShort { .. })));
        assert!(sync_seq_len(0.0).is_err());
        let msg = sync_seq_len(0.3).unwrap_err().to_string();
        assert!(msg.contains("16 frames"), "{msg}");
    }

    #[test]
    fn sync_rate_is_24_exactly_from_8_to_15_seconds() {
        // 8 * (floor((25T - 16) / 8) + 1) == 24T  <=>  T - 16 in [-8, 0).
        for d in 1..=60usize {
            let len = sync_seq_len(d as f64).unwrap();
            let oracle = 8 * ((25 * d - 16) / 8 + 1);
            assert_eq!(len, oracle, "duration {d}");
            assert_eq!(len == 24 * d, (8..16).contains(&d), "duration {d}");
        }
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(upsample_index(5, 5), vec![0, 1, 2, 3, 4]);
        let src = Array2::from_shape_vec((2, 1), vec![1.0f64, 2.0]).unwrap();
        let up = upsample_nearest(src.view(), 4);
        assert_eq!(up.column(0).to_vec(), vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn upsample_192_to_250_counts() {
        let index = upsample_index(192, 250);
        let mut counts = vec![0usize; 192];
        for &i in &index {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1 || c == 2));
        assert_eq!(counts.iter().sum::<usize>(), 250);
        assert!(index.windows(2).all(|w| w[0] <= w[1]));
        // Oracle: the float form of the same rule.
        for (j, &i) in index.iter().enumerate() {
            let f = (((j as f64 + 0.5) * 192.0 / 250.0).floor() as usize).min(191);
            assert_eq!(i, f);
        }
    }

    proptest! {
        #[test]
        fn upsample_map_is_monotone_and_covers_a_contiguous_range(src in 1usize..300, dst in 1usize..300) {
            let index = upsample_index(src, dst);
            prop_assert_eq!(index.len(), dst);
            prop_assert!(index.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(index.windows(2).all(|w| w[1] - w[0] <= src.div_ceil(dst)));
            if dst >= src {
                // Upsampling hits every source row.
                prop_assert_eq!(index[0], 0);
                prop_assert_eq!(*index.last().unwrap(), src - 1);
                prop_assert!(index.windows(2).all(|w| w[1] - w[0] <= 1));
            }
        }
    }

    fn tiny_with_sync() -> (ModelConfig, SyncProjection, ParamStore<f64>) {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.hidden_dim = 8;
        cfg.n_heads = 1;
        cfg.sync_feat_dim = 6;
        let mut sb = StoreBuilder::<f64>::new(5);
        let proj = SyncProjection::new(&mut sb, &cfg);
        (cfg, proj, sb.store)
    }

    #[test]
    fn frame_condition_shape_and_constant_input() {
        let (cfg, proj, mut ps) = tiny_with_sync();
        // A constant pos embedding makes a repeated token constant in time.
        ps.get_mut(proj.pos).row_mut(0).fill(0.0);
        let row = ps.get(proj.pos).row(0).to_owned();
        for mut r in ps.get_mut(proj.pos).rows_mut() {
            r.assign(&row);
        }
        let mut g = Graph::new(&ps);
        let raw = g.constant(Array2::from_elem((192, cfg.sync_feat_dim), 0.3));
        let cg = g.constant(Array2::from_shape_fn((1, 8), |(_, c)| c as f64));
        let cf = compute_frame_condition(&mut g, Some(&proj), raw, cg, 250).unwrap();
        let v = g.value(cf);
        assert_eq!(v.dim(), (250, 8));
        // Interior rows away from the zero padding are identical.
        for r in 10..240 {
            for c in 0..8 {
                assert!((v[[r, c]] - v[[125, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_sync_path_reduces_to_global_condition() {
        let (cfg, proj, mut ps) = tiny_with_sync();
        for id in [proj.mlp.c2.w, proj.mlp.c2.b] {
            ps.get_mut(id).fill(0.0);
        }
        let mut g = Graph::new(&ps);
        let raw = g.constant(Array2::from_shape_fn((24, cfg.sync_feat_dim), |(i, c)| (i * c) as f64 * 0.01));
        let cg = g.constant(Array2::from_shape_fn((1, 8), |(_, c)| 1.0 - c as f64));
        let cf = compute_frame_condition(&mut g, Some(&proj), raw, cg, 31).unwrap();
        for row in g.value(cf).rows() {
            assert_eq!(row, g.value(cg).row(0));
        }
        let cf = compute_frame_condition(&mut g, None, raw, cg, 31).unwrap();
        assert_eq!(g.shape(cf), (31, 8));
        assert!(g.value(cf).rows().into_iter().all(|r| r == g.value(cg).row(0)));
    }

    #[test]
    fn per_token_adaln_matches_global_when_rows_coincide() {
        let ps = ParamStore::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64));
        let gr = g.constant(Array2::from_shape_vec((1, 4), vec![0.5, 1.0, -2.0, 3.0]).unwrap());
        let br = g.constant(Array2::from_shape_vec((1, 4), vec![0.1, 0.0, 0.2, -0.3]).unwrap());
        let gf = g.gather_rows(gr, vec![0; 5]);
        let bf = g.gather_rows(br, vec![0; 5]);
        let global = modulate(&mut g, x, gr, br);
        let frame = ada_ln_frame(&mut g, x, gf, bf).unwrap();
        assert_eq!(g.value(global), g.value(frame));
    }

    #[test]
    fn per_token_adaln_changes_only_the_modified_row() {
        let ps = ParamStore::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(Array2::from_shape_fn((4, 3), |(i, j)| (i + 2 * j) as f64));
        let gm = Array2::from_shape_fn((4, 3), |(i, j)| 1.0 + 0.1 * (i + j) as f64);
        let bm = Array2::from_elem((4, 3), 0.2);
        let (gv, bv) = (g.constant(gm.clone()), g.constant(bm.clone()));
        let a = ada_ln_frame(&mut g, x, gv, bv).unwrap();
        let mut gm2 = gm;
        gm2.row_mut(2).fill(-4.0);
        let gv2 = g.constant(gm2);
        let b = ada_ln_frame(&mut g, x, gv2, bv).unwrap();
        let (a, b) = (g.value(a).to_owned(), g.value(b).to_owned());
        for r in 0..4 {
            assert_eq!(a.row(r) == b.row(r), r != 2);
        }
        let zero = g.constant(Array2::zeros((4, 3)));
        let z = ada_ln_frame(&mut g, x, zero, zero).unwrap();
        assert!(g.value(z).iter().all(|&v| v == 0.0));
        let short = g.constant(Array2::zeros((3, 3)));
        assert!(ada_ln_frame(&mut g, x, short, zero).is_err());
        assert!(gating_frame(&mut g, x, short).is_err());
    }

    #[test]
    fn substitution_replaces_only_missing_modalities() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let mut sb = StoreBuilder::<f32>::new(1);
        let empty = EmptyTokens::new(&mut sb, &cfg);
        let vals = empty.values(&sb.store, &cfg);
        let cond = Conditions {
            visual: Array2::from_elem((64, cfg.visual_feat_dim), 0.5f32),
            sync: Array2::from_elem((192, cfg.sync_feat_dim), 0.25),
            text: Array2::from_elem((cfg.text_len, cfg.text_feat_dim), 0.125),
            has_video: true,
            has_text: true,
        };
        assert_eq!(substitute_missing(&cond, true, true, &vals), cond);
        let nv = substitute_missing(&cond, false, true, &vals);
        assert!(!nv.has_video && nv.has_text);
        assert!(nv.visual.rows().into_iter().all(|r| r == vals.visual.row(0)));
        assert!(nv.sync.rows().into_iter().all(|r| r == vals.sync.row(0)));
        assert_eq!(nv.text, cond.text);
        let nt = substitute_missing(&cond, true, false, &vals);
        assert_eq!(nt.text, vals.text);
        assert_eq!(nt.visual, cond.visual);
        assert_eq!(empty_text_features::<f32>(&cfg), vals.text);
    }
}
