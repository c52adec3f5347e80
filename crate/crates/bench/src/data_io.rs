//! CSV ingestion and emission for interaction logs.
//!
//! One schema everywhere: `user_id,item_id,label,timestamp`, UTF-8, header
//! required. The synthetic generator writes the same schema, so every
//! downstream path shares a single ingestion format.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context, Result};
use malloc_core::data::{Dataset, InteractionRecord};

pub const CSV_HEADER: [&str; 4] = ["user_id", "item_id", "label", "timestamp"];

#[derive(serde::Serialize, serde::Deserialize)]
struct Row {
    user_id: String,
    item_id: String,
    label: u8,
    timestamp: i64,
}

/// Reads interaction records, validating the header and reporting parse
/// failures with their line number (line 1 is the header).
pub fn read_records(path: &Path) -> Result<Vec<InteractionRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers().with_context(|| format!("reading {} header", path.display()))?;
    if headers.iter().ne(CSV_HEADER) {
        bail!(
            "{}: expected header {}, found {}",
            path.display(),
            CSV_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        );
    }
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.with_context(|| format!("{} line {line}", path.display()))?;
        if row.label > 1 {
            bail!("{} line {line}: label {} is outside {{0, 1}}", path.display(), row.label);
        }
        records.push(InteractionRecord {
            user_id: row.user_id,
            item_id: row.item_id,
            label: row.label,
            timestamp: row.timestamp,
        });
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    // The header is written explicitly so empty logs still carry it.
    let mut writer =
        csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    writer.write_record(CSV_HEADER).context("writing CSV header")?;
    for rec in records {
        writer
            .serialize(Row {
                user_id: rec.user_id.clone(),
                item_id: rec.item_id.clone(),
                label: rec.label,
                timestamp: rec.timestamp,
            })
            .with_context(|| format!("writing row for user {}", rec.user_id))?;
    }
    writer.flush().context("flushing CSV")?;
    Ok(())
}

/// Reads a CSV log and assembles per-user chronological sequences capped at
/// `max_seq_len`.
pub fn load_dataset(path: &Path, max_seq_len: usize) -> Result<Dataset> {
    let records = read_records(path)?;
    Dataset::from_records(&records, max_seq_len)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
