//! Tensor archive: a one-line text header followed by little-endian `f32`
//! values in row-major order.
//!
//! ```text
//! mmtensor v1 rows=250 cols=8 fps=31.25 preset=tiny label=generated
//! <rows * cols * 4 bytes>
//! ```
//!
//! `fps`, `preset` and `label` are optional; values may not contain spaces.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &str = "mmtensor";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub data: Array2<f32>,
    pub fps: Option<f64>,
    pub preset: Option<String>,
    pub label: Option<String>,
}

impl TensorFile {
    pub fn new(data: Array2<f32>) -> Self {
        TensorFile {
            data,
            fps: None,
            preset: None,
            label: None,
        }
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = Some(fps);
        self
    }

    pub fn with_preset(mut self, preset: &str) -> Self {
        self.preset = Some(preset.to_string());
        self
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (rows, cols) = self.data.dim();
        let mut header = format!("{MAGIC} {VERSION} rows={rows} cols={cols}");
        if let Some(fps) = self.fps {
            header += &format!(" fps={fps}");
        }
        for (k, v) in [("preset", &self.preset), ("label", &self.label)] {
            if let Some(v) = v {
                header += &format!(" {k}={}", v.replace(' ', "_"));
            }
        }
        header.push('\n');
        let mut out = header.into_bytes();
        out.reserve(rows * cols * 4);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("tensor file has no header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("tensor header is not UTF-8".into()))?;
        let mut words = header.split_whitespace();
        if words.next() != Some(MAGIC) {
            return Err(Error::Format("not a tensor file".into()));
        }
        if words.next() != Some(VERSION) {
            return Err(Error::Format(format!("unsupported tensor file version in '{header}'")));
        }
        let (mut rows, mut cols) = (None, None);
        let mut tf = TensorFile::new(Array2::zeros((0, 0)));
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field '{w}'")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| Error::Format(format!("bad {k} '{v}'")));
            match k {
                "rows" => rows = Some(num(v)?),
                "cols" => cols = Some(num(v)?),
                "fps" => tf.fps = Some(v.parse().map_err(|_| Error::Format(format!("bad fps '{v}'")))?),
                "preset" => tf.preset = Some(v.to_string()),
                "label" => tf.label = Some(v.to_string()),
                _ => {}
            }
        }
        let (rows, cols) = match (rows, cols) {
            (Some(r), Some(c)) => (r, c),
            _ => return Err(Error::Format("tensor header lacks rows/cols".into())),
        };
        let payload = &bytes[nl + 1..];
        let need = rows * cols * 4;
        if payload.len() != need {
            return Err(Error::Truncated {
                expected: need,
                found: payload.len(),
            });
        }
        let vals = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tf.data = Array2::from_shape_vec((rows, cols), vals).expect("length checked");
        Ok(tf)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
