use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{cumulative, degradation_db};
use super::run::{ExperimentConfig, ReceiverKind};
use crate::channel::ChannelKind;
use crate::error::{Error, Result};

/// Version of the results CSV + metadata JSON pair.
pub const RESULTS_VERSION: u32 = 1;

pub const RESULTS_HEADER: [&str; 8] = [
    "receiver", "channel", "snr_db", "poisoned", "rep", "block", "ser_block", "ser_cum",
];

/// SER trajectory of one receiver arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub receiver: ReceiverKind,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub poisoned: bool,
    /// `None` for a mean over repetitions.
    pub rep: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
    pub ser_block: Vec<f64>,
    /// Running mean of `ser_block`.
    pub ser_cum: Vec<f64>,
    /// Per block, the error rate of each user.
    pub per_user_ser: Vec<Vec<f64>>,
}

impl ExperimentRecord {
    /// Cumulative SER after the last block.
    pub fn final_ser(&self) -> f64 {
        self.ser_cum.last().copied().unwrap_or(f64::NAN)
    }
}

/// Output of one experiment: per-repetition records plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRun {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub code_version: String,
    pub records: Vec<ExperimentRecord>,
    /// Set when training failed; records then hold only completed blocks.
    pub aborted: Option<String>,
}

impl ExperimentRun {
    pub fn record(
        &self,
        receiver: ReceiverKind,
        poisoned: bool,
        rep: usize,
    ) -> Option<&ExperimentRecord> {
        self.records
            .iter()
            .find(|r| r.receiver == receiver && r.poisoned == poisoned && r.rep == Some(rep))
    }

    pub fn averaged(&self) -> Vec<ExperimentRecord> {
        average_reps(&self.records)
    }

    /// SER degradation of a receiver on the repetition-averaged records.
    pub fn degradation_db(&self, receiver: ReceiverKind) -> Result<f64> {
        let avg = self.averaged();
        let find = |poisoned| {
            avg.iter()
                .find(|r| r.receiver == receiver && r.poisoned == poisoned)
                .ok_or_else(|| {
                    Error::Argument(format!(
                        "no {} record for {}",
                        if poisoned { "poisoned" } else { "clean" },
                        receiver.name()
                    ))
                })
        };
        ser_degradation_db(find(false)?, find(true)?)
    }
}

/// Degradation in dB between matched clean and poisoned records, on the
/// final cumulative SER.
pub fn ser_degradation_db(clean: &ExperimentRecord, poisoned: &ExperimentRecord) -> Result<f64> {
    if clean.receiver != poisoned.receiver
        || clean.channel != poisoned.channel
        || clean.snr_db != poisoned.snr_db
        || clean.ser_block.len() != poisoned.ser_block.len()
    {
        return Err(Error::Argument(
            "records differ in more than the poisoning flag".into(),
        ));
    }
    degradation_db(clean.final_ser(), poisoned.final_ser())
}

/// Means over repetitions, one record per (receiver, arm), in first-seen
/// order. Only blocks present in every repetition are averaged.
pub fn average_reps(records: &[ExperimentRecord]) -> Vec<ExperimentRecord> {
    let mut keys: Vec<(ReceiverKind, bool)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.receiver, r.poisoned)) {
            keys.push((r.receiver, r.poisoned));
        }
    }
    keys.into_iter()
        .map(|(receiver, poisoned)| {
            let group: Vec<&ExperimentRecord> = records
                .iter()
                .filter(|r| r.receiver == receiver && r.poisoned == poisoned)
                .collect();
            let n = group.len() as f64;
            let blocks = group.iter().map(|r| r.ser_block.len()).min().unwrap_or(0);
            let users = group
                .iter()
                .flat_map(|r| r.per_user_ser.first())
                .map(Vec::len)
                .min()
                .unwrap_or(0);
            let ser_block: Vec<f64> = (0..blocks)
                .map(|b| group.iter().map(|r| r.ser_block[b]).sum::<f64>() / n)
                .collect();
            let per_user_ser = (0..blocks)
                .map(|b| {
                    (0..users)
                        .map(|u| group.iter().map(|r| r.per_user_ser[b][u]).sum::<f64>() / n)
                        .collect()
                })
                .collect();
            ExperimentRecord {
                receiver,
                channel: group[0].channel,
                snr_db: group[0].snr_db,
                poisoned,
                rep: None,
                seed: group[0].seed,
                config_hash: group[0].config_hash.clone(),
                ser_cum: cumulative(&ser_block),
                ser_block,
                per_user_ser,
            }
        })
        .collect()
}

/// SHA-256 of the canonical JSON form of the config.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_string(cfg)
        .map_err(|e| Error::State(format!("config does not serialize: {e}")))?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    receiver: ReceiverKind,
    poisoned: bool,
    rep: Option<usize>,
    seed: u64,
    channel: ChannelKind,
    snr_db: f64,
    per_user_ser: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    version: u32,
    code_version: String,
    config_hash: String,
    config: ExperimentConfig,
    aborted: Option<String>,
    records: Vec<RecordMeta>,
}

/// Path of the metadata file that accompanies a results CSV.
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn rep_field(rep: Option<usize>) -> String {
    rep.map_or_else(|| "mean".to_string(), |r| r.to_string())
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Renders the results CSV.
pub fn results_csv(records: &[ExperimentRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).map_err(io_err)?;
    for r in records {
        for (b, (s, c)) in r.ser_block.iter().zip(&r.ser_cum).enumerate() {
            w.write_record([
                r.receiver.name().to_string(),
                r.channel.name().to_string(),
                format!("{:?}", r.snr_db),
                r.poisoned.to_string(),
                rep_field(r.rep),
                b.to_string(),
                format!("{s:?}"),
                format!("{c:?}"),
            ])
            .map_err(io_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::State(e.to_string()))
}

/// Writes `csv_path` (per-block series) and the metadata JSON next to it.
pub fn persist(run: &ExperimentRun, csv_path: &Path) -> Result<()> {
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(csv_path, results_csv(&run.records)?)?;
    let meta = Metadata {
        version: RESULTS_VERSION,
        code_version: run.code_version.clone(),
        config_hash: run.config_hash.clone(),
        config: run.config.clone(),
        aborted: run.aborted.clone(),
        records: run
            .records
            .iter()
            .map(|r| RecordMeta {
                receiver: r.receiver,
                poisoned: r.poisoned,
                rep: r.rep,
                seed: r.seed,
                channel: r.channel,
                snr_db: r.snr_db,
                per_user_ser: r.per_user_ser.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::State(format!("metadata does not serialize: {e}")))?;
    std::fs::write(metadata_path(csv_path), json)?;
    Ok(())
}

/// One parsed row of a results CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub receiver: ReceiverKind,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub poisoned: bool,
    pub rep: Option<usize>,
    pub block: usize,
    pub ser_block: f64,
    pub ser_cum: f64,
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what} `{s}`"),
    })
}

/// Parses a results CSV; any malformed or short row fails the whole read.
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if i == 0 {
            if rec.iter().ne(RESULTS_HEADER) {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected header {}", RESULTS_HEADER.join(",")),
                });
            }
            continue;
        }
        if rec.len() != RESULTS_HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("{} fields, expected {}", rec.len(), RESULTS_HEADER.len()),
            });
        }
        let map_cfg = |e: Error| match e {
            Error::Config { msg, .. } => Error::Parse { line, msg },
            other => other,
        };
        rows.push(ResultRow {
            receiver: ReceiverKind::parse(&rec[0]).map_err(map_cfg)?,
            channel: ChannelKind::parse(&rec[1]).map_err(map_cfg)?,
            snr_db: parse_field(&rec[2], line, "snr_db")?,
            poisoned: parse_field(&rec[3], line, "poisoned flag")?,
            rep: match &rec[4] {
                "mean" => None,
                s => Some(parse_field(s, line, "rep")?),
            },
            block: parse_field(&rec[5], line, "block")?,
            ser_block: parse_field(&rec[6], line, "ser_block")?,
            ser_cum: parse_field(&rec[7], line, "ser_cum")?,
        });
    }
    if text.trim().is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "empty results file".into(),
        });
    }
    if !text.ends_with('\n') {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: "last row is not newline-terminated (truncated file?)".into(),
        });
    }
    Ok(rows)
}

/// Reads back what [`persist`] wrote.
pub fn load(csv_path: &Path) -> Result<ExperimentRun> {
    let meta_text = std::fs::read_to_string(metadata_path(csv_path))?;
    let version: serde_json::Value = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("metadata: {e}"),
    })?;
    match version.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(RESULTS_VERSION) => {}
        other => {
            return Err(Error::Compatibility(format!(
                "results version {other:?}, expected {RESULTS_VERSION}"
            )))
        }
    }
    let meta: Metadata = serde_json::from_value(version).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("metadata: {e}"),
    })?;
    let rows = parse_results_csv(&std::fs::read_to_string(csv_path)?)?;
    let mut records = Vec::with_capacity(meta.records.len());
    let mut cursor = 0;
    for m in meta.records {
        let blocks = m.per_user_ser.len();
        let end = cursor + blocks;
        if end > rows.len() {
            return Err(Error::Parse {
                line: rows.len() + 1,
                msg: "results file ends before the last record is complete".into(),
            });
        }
        let series = &rows[cursor..end];
        for (b, row) in series.iter().enumerate() {
            if row.receiver != m.receiver
                || row.poisoned != m.poisoned
                || row.rep != m.rep
                || row.block != b
            {
                return Err(Error::Parse {
                    line: cursor + b + 2,
                    msg: "row does not match the metadata record order".into(),
                });
            }
        }
        records.push(ExperimentRecord {
            receiver: m.receiver,
            channel: m.channel,
            snr_db: m.snr_db,
            poisoned: m.poisoned,
            rep: m.rep,
            seed: m.seed,
            config_hash: meta.config_hash.clone(),
            ser_block: series.iter().map(|r| r.ser_block).collect(),
            ser_cum: series.iter().map(|r| r.ser_cum).collect(),
            per_user_ser: m.per_user_ser,
        });
        cursor = end;
    }
    if cursor != rows.len() {
        return Err(Error::Parse {
            line: cursor + 2,
            msg: "rows beyond the records listed in the metadata".into(),
        });
    }
    Ok(ExperimentRun {
        config: meta.config,
        config_hash: meta.config_hash,
        code_version: meta.code_version,
        records,
        aborted: meta.aborted,
    })
}
