//! Persistence: dataset files, checkpoints, run configs and reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngPosition};
pub use config::RunConfig;
pub use dataset::{load_dataset, save_dataset};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ProcessKind, SigmaForm};

/// Little-endian cursor that reports running past the end as truncation.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// `n` floats; the whole run must be present.
    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes_needed = n.checked_mul(8).ok_or_else(|| Error::Malformed(format!("float count {n} overflows")))?;
        let raw = self.take(bytes_needed)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// kind u8, form u8, t_max, t_n, guard, anchor count u32, anchors.
pub(crate) fn encode_schedule(out: &mut Vec<u8>, schedule: &NoiseSchedule) {
    out.push(match schedule.kind() {
        ProcessKind::Ve => 0,
        ProcessKind::Vp => 1,
    });
    let anchors: &[(f64, f64)] = match schedule.form() {
        SigmaForm::Identity => {
            out.push(0);
            &[]
        }
        SigmaForm::Anchors(a) => {
            out.push(1);
            a
        }
    };
    put_f64s(out, &[schedule.t_max(), schedule.t_nature(), schedule.guard()]);
    out.extend_from_slice(&(anchors.len() as u32).to_le_bytes());
    for (t, s) in anchors {
        put_f64s(out, &[*t, *s]);
    }
}

pub(crate) fn schedule_block_len(schedule: &NoiseSchedule) -> usize {
    let anchors = match schedule.form() {
        SigmaForm::Identity => 0,
        SigmaForm::Anchors(a) => a.len(),
    };
    2 + 3 * 8 + 4 + 16 * anchors
}

pub(crate) fn decode_schedule(r: &mut ByteReader<'_>) -> Result<NoiseSchedule> {
    let kind = match r.u8()? {
        0 => ProcessKind::Ve,
        1 => ProcessKind::Vp,
        other => return Err(Error::Malformed(format!("unknown process kind tag {other}"))),
    };
    let form_tag = r.u8()?;
    let t_max = r.f64()?;
    let t_nature = r.f64()?;
    let guard = r.f64()?;
    let n = r.u32()? as usize;
    let flat = r.f64s(n.checked_mul(2).ok_or_else(|| Error::Malformed("anchor count overflows".into()))?)?;
    let form = match form_tag {
        0 if n == 0 => SigmaForm::Identity,
        0 => return Err(Error::Malformed("identity schedule carries anchors".into())),
        1 => SigmaForm::Anchors(flat.chunks_exact(2).map(|p| (p[0], p[1])).collect()),
        other => return Err(Error::Malformed(format!("unknown schedule form tag {other}"))),
    };
    NoiseSchedule::new(kind, form, t_max, t_nature)
        .and_then(|s| s.with_guard(guard))
        .map_err(|e| Error::Malformed(format!("schedule block: {e}")))
}
