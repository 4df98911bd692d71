//! Binary concept store, one record per task.
//!
//! ```text
//! file    := "ALCV" version:u32 count:u32 record*
//! record  := name_len:u16 name:utf8 dim:u32
//!            direction:f32[dim] coefficients:f64[dim]
//!            bias:f64 lambda:f64
//!            metric_count:u8 metric*
//!            fingerprint:[u8; 32]
//! metric  := split:u8 n:u64 tp:u64 tn:u64 fp:u64 fn:u64
//!            accuracy:f64 sensitivity:f64 specificity:f64
//! ```
//!
//! All integers and floats are little-endian. Undefined sensitivity or
//! specificity is stored as NaN. The direction is renormalized on load.

use std::path::Path;

use crate::concepts::{normalize, ConceptVector, MetricsRow};
use crate::dataset::{BinaryTask, Split};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ALCV";
pub const VERSION: u32 = 1;

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        what: "concept store",
        message: message.into(),
    }
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

pub fn encode_concepts(concepts: &[ConceptVector]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(concepts.len() as u32).to_le_bytes());
    for c in concepts {
        if c.direction.len() != c.raw_coefficients.len() {
            return Err(Error::shape(format!(
                "direction has {} entries, coefficients {}",
                c.direction.len(),
                c.raw_coefficients.len()
            )));
        }
        if c.metrics.len() > u8::MAX as usize {
            return Err(Error::invalid("too many metric rows"));
        }
        let name = c.task.as_str().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(c.direction.len() as u32).to_le_bytes());
        for &d in &c.direction {
            out.extend_from_slice(&(d as f32).to_le_bytes());
        }
        for &r in &c.raw_coefficients {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out.extend_from_slice(&c.bias.to_le_bytes());
        out.extend_from_slice(&c.lambda.to_le_bytes());
        out.push(c.metrics.len() as u8);
        for m in &c.metrics {
            out.push(split_code(m.split));
            for v in [m.n, m.tp, m.tn, m.fp, m.fn_] {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
            for v in [m.accuracy, m.sensitivity.unwrap_or(f64::NAN), m.specificity.unwrap_or(f64::NAN)] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&c.fingerprint);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format_err(format!("non-finite {what}")))
    }
}

fn optional_ratio(v: f64, what: &str) -> Result<Option<f64>> {
    if v.is_nan() {
        Ok(None)
    } else if (0.0..=1.0).contains(&v) {
        Ok(Some(v))
    } else {
        Err(format_err(format!("{what} {v} outside [0, 1]")))
    }
}

fn decode_metric(r: &mut Reader<'_>) -> Result<MetricsRow> {
    let split = match r.u8()? {
        0 => Split::Train,
        1 => Split::Val,
        2 => Split::Test,
        other => return Err(format_err(format!("unknown split code {other}"))),
    };
    let mut counts = [0usize; 5];
    for c in &mut counts {
        *c = usize::try_from(r.u64()?).map_err(|_| format_err("count overflows usize"))?;
    }
    let [n, tp, tn, fp, fn_] = counts;
    if tp.checked_add(tn).and_then(|s| s.checked_add(fp)).and_then(|s| s.checked_add(fn_)) != Some(n) {
        return Err(format_err("confusion counts do not add up to n"));
    }
    let accuracy = r.f64()?;
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(format_err(format!("accuracy {accuracy} outside [0, 1]")));
    }
    Ok(MetricsRow {
        split,
        n,
        tp,
        tn,
        fp,
        fn_,
        accuracy,
        sensitivity: optional_ratio(r.f64()?, "sensitivity")?,
        specificity: optional_ratio(r.f64()?, "specificity")?,
    })
}

fn decode_record(r: &mut Reader<'_>) -> Result<ConceptVector> {
    let len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(len)?).map_err(|e| format_err(e.to_string()))?;
    let task: BinaryTask = name.parse().map_err(format_err)?;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(format_err(format!("concept `{name}` has dimension 0")));
    }
    // 4 + 8 bytes per entry must still be in the buffer
    if dim.checked_mul(12).is_none_or(|b| b > r.remaining()) {
        return Err(format_err(format!("concept `{name}` dimension {dim} exceeds the file")));
    }
    let mut stored = Vec::with_capacity(dim);
    for _ in 0..dim {
        stored.push(finite(r.f32()? as f64, "direction")?);
    }
    let mut raw_coefficients = Vec::with_capacity(dim);
    for _ in 0..dim {
        raw_coefficients.push(finite(r.f64()?, "coefficient")?);
    }
    let direction = normalize(&stored).map_err(|_| format_err(format!("concept `{name}` has a zero direction")))?;
    let bias = finite(r.f64()?, "bias")?;
    let lambda = finite(r.f64()?, "lambda")?;
    let rows = r.u8()?;
    let mut metrics = Vec::with_capacity(rows as usize);
    for _ in 0..rows {
        metrics.push(decode_metric(r)?);
    }
    let fingerprint = r.array::<32>()?;
    Ok(ConceptVector {
        task,
        positive_class: task.positive_class().to_string(),
        negative_class: task.negative_class().to_string(),
        direction,
        bias,
        raw_coefficients,
        lambda,
        metrics,
        fingerprint,
    })
}

pub fn decode_concepts(bytes: &[u8]) -> Result<Vec<ConceptVector>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| format_err("missing magic"))? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = r.u32()?;
    if version > VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    if version == 0 {
        return Err(format_err("version 0"));
    }
    let count = r.u32()?;
    let mut out: Vec<ConceptVector> = Vec::new();
    for _ in 0..count {
        let c = decode_record(&mut r)?;
        if out.iter().any(|o| o.task == c.task) {
            return Err(format_err(format!("duplicate concept `{}`", c.task)));
        }
        out.push(c);
    }
    if r.remaining() != 0 {
        return Err(format_err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn save_concepts(path: &Path, concepts: &[ConceptVector]) -> Result<()> {
    let bytes = encode_concepts(concepts)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_concepts(path: &Path) -> Result<Vec<ConceptVector>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_concepts(&bytes)
}
