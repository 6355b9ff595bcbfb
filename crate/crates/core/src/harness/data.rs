//! Dataset CSV files and the generator sidecar.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DddmError, Result};
use crate::toy::{ToyConfig, ToyDataset, ToySample};

/// Everything needed to rebuild the generator that produced a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: String,
    pub toy: ToyConfig,
    pub splits: Vec<SplitInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub styles: Vec<usize>,
    pub n_per_style: usize,
    pub stream: u64,
}

impl Sidecar {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn header(s: &ToySample) -> Vec<String> {
    let mut h: Vec<String> = (0..s.x.len()).map(|j| format!("x{j}")).collect();
    h.extend(["token", "pitch", "style"].map(String::from));
    h.extend((0..s.latent.len()).map(|j| format!("g{j}")));
    h.extend((0..s.content.len()).map(|j| format!("c{j}")));
    for (f, frame) in s.style_frames.iter().enumerate() {
        h.extend((0..frame.len()).map(|j| format!("f{f}_{j}")));
    }
    h
}

/// One row per sample after a `# seed=… config=…` line.
pub fn write_dataset<W: Write>(mut w: W, seed: u64, config_hash: &str, data: &ToyDataset) -> Result<()> {
    writeln!(w, "# seed={seed} config={config_hash}")?;
    let mut out = csv::Writer::from_writer(w);
    if let Some(first) = data.samples.first() {
        out.write_record(header(first))?;
    }
    for s in &data.samples {
        let mut rec: Vec<String> = s.x.iter().map(f64::to_string).collect();
        rec.push(s.content_token.to_string());
        rec.push(s.pitch.to_string());
        rec.push(s.style_id.to_string());
        rec.extend(s.latent.iter().map(f64::to_string));
        rec.extend(s.content.iter().map(f64::to_string));
        rec.extend(s.style_frames.iter().flatten().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset whose dimensions match `toy`. Errors name the line.
pub fn read_dataset<R: Read>(mut r: R, toy: &ToyConfig) -> Result<ToyDataset> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let body = match text.split_once('\n') {
        Some((first, rest)) if first.starts_with('#') => rest,
        _ => return Err(DddmError::Format("line 1: expected '# seed=… config=…'".into())),
    };
    let (d, g, c, f) = (
        toy.data_dim,
        toy.style_dim,
        toy.content_dim,
        toy.n_frames * toy.style_dim,
    );
    let width = d + 3 + g + c + f;
    let mut rd = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let cols = rd.headers()?.len();
    if cols != width {
        return Err(DddmError::Format(format!(
            "line 2: {cols} columns, the generator config implies {width}"
        )));
    }
    let mut samples = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 3;
        let rec = rec.map_err(|e| DddmError::Format(format!("line {line}: {e}")))?;
        let nums = rec
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DddmError::Format(format!("line {line}, column {}: bad number '{v}'", j + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let index = |v: f64, what: &str, bound: usize| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < bound {
                Ok(v as usize)
            } else {
                Err(DddmError::Format(format!(
                    "line {line}: {what} {v} is not an index below {bound}"
                )))
            }
        };
        let content_token = index(nums[d], "token", toy.n_tokens)?;
        let style_id = index(nums[d + 2], "style", toy.n_styles)?;
        let rest = &nums[d + 3..];
        samples.push(ToySample {
            x: nums[..d].to_vec(),
            content_token,
            pitch: nums[d + 1],
            style_id,
            latent: rest[..g].to_vec(),
            content: rest[g..g + c].to_vec(),
            style_frames: rest[g + c..].chunks(toy.style_dim).map(<[f64]>::to_vec).collect(),
        });
    }
    if samples.is_empty() {
        return Err(DddmError::Format("dataset has no rows".into()));
    }
    ToyDataset::from_samples(samples, toy.n_styles)
}

pub fn load_dataset(path: &Path, toy: &ToyConfig) -> Result<ToyDataset> {
    let f = std::fs::File::open(path).map_err(|e| DddmError::Format(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(f, toy).map_err(|e| match e {
        DddmError::Format(m) => DddmError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
