//! Attention matrices as CSV and 8-bit grayscale PGM.

use std::path::{Path, PathBuf};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::AttentionRecord;
use crate::tensor::Tensor;

/// One square weight matrix picked out of an [`AttentionRecord`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub layer: usize,
    pub stage: usize,
    pub head: usize,
    pub kind: AttentionKind,
    /// Time step (spatial kinds) or node (ReTSA) the matrix belongs to.
    pub slice: usize,
    /// `N×N` for spatial kinds, `T×T` for ReTSA.
    pub matrix: Tensor,
}

impl AttentionDump {
    /// Slice `slice` of the record's leading axis; `None` takes the last
    /// time step for spatial kinds and node 0 for ReTSA.
    pub fn from_record(rec: &AttentionRecord, slice: Option<usize>) -> Result<Self> {
        let (outer, rows, cols) = rec.weights.dims3("attention weights")?;
        let slice = slice.unwrap_or(match rec.kind {
            AttentionKind::Retsa => 0,
            _ => outer - 1,
        });
        if slice >= outer {
            return Err(Error::Data(format!("slice {slice} out of range, record has {outer}")));
        }
        let data = rec.weights.data()[slice * rows * cols..(slice + 1) * rows * cols].to_vec();
        Ok(AttentionDump {
            layer: rec.layer,
            stage: rec.stage,
            head: rec.head,
            kind: rec.kind,
            slice,
            matrix: Tensor::new(&[rows, cols], data)?,
        })
    }

    pub fn file_stem(&self) -> String {
        format!("attn_l{}_s{}_h{}_{}", self.layer, self.stage, self.head, self.kind.name())
    }

    /// Headerless CSV, one matrix row per line.
    pub fn csv(&self) -> String {
        let cols = self.matrix.shape()[1];
        self.matrix
            .data()
            .chunks(cols)
            .map(|row| row.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }

    /// Binary PGM; pixel values scale linearly from 0 to the largest weight.
    pub fn pgm(&self) -> Vec<u8> {
        let (rows, cols) = (self.matrix.shape()[0], self.matrix.shape()[1]);
        let max = self.matrix.data().iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
        out.extend(self.matrix.data().iter().map(|&v| {
            if max > 0.0 {
                (255.0 * v.max(0.0) / max).round() as u8
            } else {
                0
            }
        }));
        out
    }

    /// Write `<stem>.csv` and `<stem>.pgm` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fsutil::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.file_stem()));
        let pgm = dir.join(format!("{}.pgm", self.file_stem()));
        fsutil::write_atomic(&csv, self.csv().as_bytes())?;
        fsutil::write_atomic(&pgm, &self.pgm())?;
        Ok((csv, pgm))
    }
}

/// Width, height and pixels of a binary 8-bit PGM.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if pixels.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, pixels.len())));
    }
    Ok((w, h, pixels.to_vec()))
}
