//! Reductions of recorded cross-attention to latent coordinates, plus CSV and
//! PGM export.
//!
//! Every layer's query grid tiles the `[frames, bins]` latent, so a query cell
//! `(r, c)` of a `rows x cols` grid covers frames `r * frames / rows ..` and
//! bins `c * bins / cols ..`. Maps are upsampled by repetition onto the latent
//! and then averaged with equal weight per record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::AttentionRecord;
use crate::tensor::Tensor;

fn check_records(records: &[AttentionRecord], frames: usize, bins: usize) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Metric("no attention records".into()))?;
    let l = first.tokens();
    for r in records {
        let (rows, cols) = r.grid;
        if r.tokens() != l
            || rows == 0
            || cols == 0
            || !frames.is_multiple_of(rows)
            || !bins.is_multiple_of(cols)
        {
            return Err(Error::Metric(format!(
                "record on grid {:?} with {} tokens does not tile a {frames}x{bins} latent with {l} tokens",
                r.grid,
                r.tokens()
            )));
        }
    }
    Ok(l)
}

/// Mean attention to `token` per latent cell, `[frames, bins]`.
pub fn token_attention_map(
    records: &[AttentionRecord],
    token: usize,
    frames: usize,
    bins: usize,
) -> Result<Tensor> {
    let l = check_records(records, frames, bins)?;
    if token >= l {
        return Err(Error::OutOfRange {
            what: "token index",
            detail: format!("{token} >= {l}"),
        });
    }
    let mut acc = vec![0.0; frames * bins];
    for r in records {
        let w = r.mean_over_heads();
        let (rows, cols) = r.grid;
        let (fr, fc) = (frames / rows, bins / cols);
        for f in 0..frames {
            for b in 0..bins {
                acc[f * bins + b] +=
                    w.data()[((f / fr) * cols + b / fc) * l + token] / records.len() as f64;
            }
        }
    }
    Tensor::new(vec![frames, bins], acc)
}

/// Mean of `map` over cells inside and outside `mask` (row-major, same size).
pub fn box_attention_contrast(map: &Tensor, mask: &[bool]) -> Result<(f64, f64)> {
    if map.numel() != mask.len() {
        return Err(Error::shape(
            "box_attention_contrast",
            map.shape(),
            &[mask.len()],
        ));
    }
    let (mut s, mut n) = ([0.0; 2], [0usize; 2]);
    for (v, &m) in map.data().iter().zip(mask) {
        s[usize::from(m)] += v;
        n[usize::from(m)] += 1;
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(Error::Metric(
            "mask must have cells both inside and outside".into(),
        ));
    }
    Ok((s[1] / n[1] as f64, s[0] / n[0] as f64))
}

/// Per-step attention to one token over time frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDynamics {
    pub token: usize,
    /// Flow time of each sampling step.
    pub steps: Vec<f64>,
    /// `[steps][frames]`, averaged over heads, bins and layers.
    pub weights: Vec<Vec<f64>>,
}

/// Groups consecutive records with the same `t` into sampling steps.
fn steps_of(records: &[AttentionRecord]) -> Vec<&[AttentionRecord]> {
    records.chunk_by(|a, b| a.t == b.t).collect()
}

pub fn export_token_dynamics(
    records: &[AttentionRecord],
    token: usize,
    frames: usize,
    bins: usize,
) -> Result<TokenDynamics> {
    check_records(records, frames, bins)?;
    let mut steps = Vec::new();
    let mut weights = Vec::new();
    for step in steps_of(records) {
        let map = token_attention_map(step, token, frames, bins)?;
        steps.push(step[0].t);
        weights.push(
            map.data()
                .chunks(bins)
                .map(|row| row.iter().sum::<f64>() / bins as f64)
                .collect(),
        );
    }
    Ok(TokenDynamics {
        token,
        steps,
        weights,
    })
}

impl TokenDynamics {
    pub fn frames(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Long format: `step,t,frame,weight`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,t,frame,weight")?;
        for (i, (t, row)) in self.steps.iter().zip(&self.weights).enumerate() {
            for (f, v) in row.iter().enumerate() {
                writeln!(w, "{i},{t},{f},{v}")?;
            }
        }
        Ok(())
    }
}

/// Time-major `[frames, L]` mean attention over heads, layers, bins and steps.
/// Rows are distributions over tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Tensor,
}

pub fn export_temporal_heatmap(
    records: &[AttentionRecord],
    frames: usize,
    bins: usize,
) -> Result<Heatmap> {
    let l = check_records(records, frames, bins)?;
    let mut out = vec![0.0; frames * l];
    for token in 0..l {
        let map = token_attention_map(records, token, frames, bins)?;
        for (f, row) in map.data().chunks(bins).enumerate() {
            out[f * l + token] = row.iter().sum::<f64>() / bins as f64;
        }
    }
    Ok(Heatmap {
        values: Tensor::new(vec![frames, l], out)?,
    })
}

impl Heatmap {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[1]
    }

    /// 8-bit rendering with each row scaled by its own maximum.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .data()
            .chunks(self.tokens())
            .flat_map(|row| {
                let max = row.iter().copied().fold(0.0, f64::max);
                row.iter().map(move |v| {
                    if max > 0.0 {
                        (255.0 * v / max).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                })
            })
            .collect()
    }

    /// Header `frame,tok0,tok1,...`, one row per frame.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let head: Vec<String> = (0..self.tokens()).map(|k| format!("tok{k}")).collect();
        writeln!(w, "frame,{}", head.join(","))?;
        for (f, row) in self.values.data().chunks(self.tokens()).enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{f},{}", cells.join(","))?;
        }
        Ok(())
    }

    /// Writes the gray rendering as PGM (width = tokens, height = frames).
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_pgm(&mut w, self.tokens(), self.frames(), &self.to_gray())?;
        w.flush()?;
        Ok(())
    }
}

/// Binary PGM (`P5`, maxval 255).
pub fn write_pgm<W: Write>(w: &mut W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", &[height, width], &[pixels.len()]));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

/// Reads a `P5` file with maxval 255 as `(width, height, pixels)`. Comment
/// lines starting with `#` are allowed between header fields.
pub fn read_pgm<R: BufRead>(r: &mut R) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut line = String::new();
    while fields.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PGM header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        fields.extend(content.split_whitespace().map(str::to_owned));
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(Error::Format(format!("unsupported PGM header {fields:?}")));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM field {s:?}")))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval {maxval}, expected 255")));
    }
    let mut pixels = vec![0u8; width * height];
    r.read_exact(&mut pixels)?;
    Ok((width, height, pixels))
}

pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pgm(&mut BufReader::new(File::open(path)?))
}
