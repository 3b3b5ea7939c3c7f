use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptionRecord, CorpusError, Domain};

/// One manifest line: a single (audio, caption) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub audio_id: String,
    pub audio_path: String,
    pub duration: f64,
    pub source: String,
    pub domain: Domain,
    pub caption: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<CaptionRecord>,
    /// `(1-based line number, reason)` for every skipped line.
    pub skipped: Vec<(usize, String)>,
}

impl IngestReport {
    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }
}

fn parse_line(line: &str) -> Result<CaptionRecord, String> {
    let m: ManifestLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if m.audio_id.is_empty() {
        return Err("empty audio_id".into());
    }
    if !(m.duration.is_finite() && m.duration > 0.0) {
        return Err(format!("duration must be positive, got {}", m.duration));
    }
    if m.caption.trim().is_empty() {
        return Err("empty caption".into());
    }
    Ok(CaptionRecord {
        audio_id: m.audio_id,
        audio_path: m.audio_path,
        duration: m.duration,
        source: m.source,
        domain: m.domain,
        captions: vec![m.caption],
    })
}

/// Parses a JSON-lines manifest. Blank lines are ignored; malformed lines
/// are skipped and reported, unless more than half are malformed.
pub fn ingest_reader<R: BufRead>(reader: R) -> Result<IngestReport, CorpusError> {
    let mut report = IngestReport::default();
    let mut total = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(&line) {
            Ok(r) => report.records.push(r),
            Err(reason) => report.skipped.push((i + 1, reason)),
        }
    }
    if report.skipped.len() * 2 > total {
        return Err(CorpusError::CorruptManifest {
            malformed: report.skipped.len(),
            total,
        });
    }
    Ok(report)
}

pub fn ingest(path: &Path) -> Result<IngestReport, CorpusError> {
    ingest_reader(BufReader::new(File::open(path)?))
}

/// Writes one line per caption, in record order.
pub fn write_manifest<W: Write>(mut w: W, records: &[CaptionRecord]) -> Result<(), CorpusError> {
    for r in records {
        for caption in &r.captions {
            let line = ManifestLine {
                audio_id: r.audio_id.clone(),
                audio_path: r.audio_path.clone(),
                duration: r.duration,
                source: r.source.clone(),
                domain: r.domain,
                caption: caption.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}
