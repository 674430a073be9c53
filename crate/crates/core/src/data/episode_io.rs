//! On-disk episode layout.
//!
//! A cohort directory holds one `<patient>_episode<n>_timeseries.csv` per
//! stay (header `Hours` plus the 17 channel names, empty cell = not
//! recorded) and a `listfile.csv` with one row per stay:
//!
//! ```text
//! stay,region,period_length,y_true_mortality,y_true_deathtime,y_true_<phenotype>...,patient,episode,age
//! ```
//!
//! Numbers are written in Rust's shortest round-trip form, so reading a
//! written cohort reproduces it exactly.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::schema::ChannelSchema;
use super::{EpisodeRecord, Event, Labels, NUM_CHANNELS, NUM_PHENOTYPES, PHENOTYPES, UNKNOWN_REGION};

pub const LISTFILE: &str = "listfile.csv";

#[derive(Debug, Error)]
pub enum EpisodeIoError {
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {file}, line {line}: {msg}")]
    MalformedFile { file: PathBuf, line: usize, msg: String },
}

type Result<T> = std::result::Result<T, EpisodeIoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EpisodeIoError + '_ {
    move |source| EpisodeIoError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> EpisodeIoError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => EpisodeIoError::IoFailure {
            path: path.to_path_buf(),
            source,
        },
        other => EpisodeIoError::MalformedFile {
            file: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn listfile_header() -> Vec<String> {
    let mut h: Vec<String> = ["stay", "region", "period_length", "y_true_mortality", "y_true_deathtime"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(PHENOTYPES.iter().map(|p| format!("y_true_{p}")));
    h.extend(["patient", "episode", "age"].iter().map(|s| s.to_string()));
    h
}

/// Writes one time-series file per episode plus the listfile.
pub fn write_episodes(cohort: &[EpisodeRecord], schema: &ChannelSchema, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let list_path = dir.join(LISTFILE);
    let mut list = csv::Writer::from_path(&list_path).map_err(|e| csv_err(&list_path, e))?;
    list.write_record(listfile_header()).map_err(|e| csv_err(&list_path, e))?;
    for ep in cohort {
        write_timeseries(ep, schema, &dir.join(ep.stay_name()))?;
        let mut row = vec![
            ep.stay_name(),
            ep.region.clone(),
            ep.los_hours.to_string(),
            u8::from(ep.labels.mortality).to_string(),
            ep.labels.death_time.map(|t| t.to_string()).unwrap_or_default(),
        ];
        row.extend(ep.labels.phenotypes.iter().map(|&p| u8::from(p).to_string()));
        row.extend([ep.patient_id.to_string(), ep.episode.to_string(), ep.age.to_string()]);
        list.write_record(&row).map_err(|e| csv_err(&list_path, e))?;
    }
    list.flush().map_err(io_err(&list_path))?;
    Ok(())
}

fn write_timeseries(ep: &EpisodeRecord, schema: &ChannelSchema, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["Hours".to_string()];
    header.extend(schema.channels.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut row: Vec<String> = vec![String::new(); NUM_CHANNELS + 1];
    let mut open = false;
    for ev in &ep.events {
        // Events sharing a timestamp share a row unless a channel repeats.
        let same_row = open && row[0] == ev.time.to_string() && row[ev.channel + 1].is_empty();
        if open && !same_row {
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
            row.iter_mut().for_each(String::clear);
        }
        row[0] = ev.time.to_string();
        row[ev.channel + 1] = ev.value.to_string();
        open = true;
    }
    if open {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn malformed(file: &Path, line: usize, msg: impl Into<String>) -> EpisodeIoError {
    EpisodeIoError::MalformedFile {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(file: &Path, line: usize, field: &str, text: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| malformed(file, line, format!("invalid {field} {text:?}")))
}

/// Reads a cohort directory in listfile order.
pub fn read_episodes(dir: &Path, schema: &ChannelSchema) -> Result<Vec<EpisodeRecord>> {
    let list_path = dir.join(LISTFILE);
    let mut reader = csv::Reader::from_path(&list_path).map_err(|e| csv_err(&list_path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(&list_path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != listfile_header() {
        return Err(malformed(&list_path, 1, "unexpected listfile header"));
    }
    let mut cohort = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(&list_path, e))?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let stay = field(0).to_string();
        let los_hours: f64 = parse_num(&list_path, line, "period_length", field(2))?;
        let mortality = parse_flag(&list_path, line, field(3))?;
        let death_time = match field(4).trim() {
            "" => None,
            t => Some(parse_num(&list_path, line, "deathtime", t)?),
        };
        let phenotypes = (0..NUM_PHENOTYPES)
            .map(|k| parse_flag(&list_path, line, field(5 + k)))
            .collect::<Result<Vec<_>>>()?;
        let base = 5 + NUM_PHENOTYPES;
        let patient_id = parse_num(&list_path, line, "patient", field(base))?;
        let episode = parse_num(&list_path, line, "episode", field(base + 1))?;
        let age = parse_num(&list_path, line, "age", field(base + 2))?;
        if stay.contains('/') || stay.contains('\\') || stay.starts_with('.') {
            return Err(malformed(&list_path, line, format!("invalid stay name {stay:?}")));
        }
        let events = read_timeseries(&dir.join(&stay), schema)?;
        cohort.push(EpisodeRecord {
            patient_id,
            episode,
            region: field(1).to_string(),
            age,
            los_hours,
            events,
            labels: Labels {
                mortality,
                phenotypes,
                death_time,
            },
        });
    }
    Ok(cohort)
}

/// Reads a cohort and drops stays without a region label. Returns the kept
/// stays and the number dropped.
pub fn ingest(dir: &Path, schema: &ChannelSchema) -> Result<(Vec<EpisodeRecord>, usize)> {
    let all = read_episodes(dir, schema)?;
    let before = all.len();
    let kept: Vec<_> = all
        .into_iter()
        .filter(|e| !e.region.is_empty() && e.region != UNKNOWN_REGION)
        .collect();
    let dropped = before - kept.len();
    Ok((kept, dropped))
}

fn parse_flag(file: &Path, line: usize, text: &str) -> Result<bool> {
    match text.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(malformed(file, line, format!("expected 0 or 1, got {other:?}"))),
    }
}

fn read_timeseries(path: &Path, schema: &ChannelSchema) -> Result<Vec<Event>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.get(0) != Some("Hours") {
        return Err(malformed(path, 1, "first column must be Hours"));
    }
    let columns = header
        .iter()
        .skip(1)
        .map(|name| {
            schema
                .channel_index(name)
                .ok_or_else(|| malformed(path, 1, format!("unknown channel column {name:?}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut events = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let time: f64 = parse_num(path, line, "Hours", rec.get(0).unwrap_or(""))?;
        for (cell, &channel) in rec.iter().skip(1).zip(&columns) {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            let value = schema.channels[channel]
                .parse_cell(cell)
                .ok_or_else(|| malformed(path, line, format!("invalid value {cell:?} for {}", header[channel + 1].to_string())))?;
            events.push(Event { time, channel, value });
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.channel.cmp(&b.channel)));
    Ok(events)
}
