//! Frame results as JSON lines and loss curves as CSV.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::Result;
use crate::tracker::FrameResult;
use crate::training::LossRecord;

pub fn write_results<W: Write>(mut w: W, results: &[FrameResult]) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results<R: BufRead>(r: R) -> Result<Vec<FrameResult>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<FrameResult>> {
    read_results(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Header: `iteration,match,enc_0..,dec_0..,total`.
pub fn write_loss_csv<W: Write>(mut w: W, records: &[LossRecord]) -> Result<()> {
    let (ne, nd) = records
        .first()
        .map_or((0, 0), |r| (r.encoder.len(), r.decoder.len()));
    let mut header = vec!["iteration".to_string(), "match".to_string()];
    header.extend((0..ne).map(|k| format!("enc_{k}")));
    header.extend((0..nd).map(|k| format!("dec_{k}")));
    header.push("total".into());
    writeln!(w, "{}", header.join(","))?;
    for r in records {
        let mut cols = vec![r.iteration.to_string(), r.matching.to_string()];
        cols.extend(r.encoder.iter().map(f64::to_string));
        cols.extend(r.decoder.iter().map(f64::to_string));
        cols.push(r.total.to_string());
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}
