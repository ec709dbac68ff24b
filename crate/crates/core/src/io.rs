//! On-disk formats: PGM frame directories, detection and track CSVs, and
//! debug dumps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageError};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{encode_flo2, FlowField, VotingMap};
use crate::types::{BBox, Detection, GrayFrame, Observation, Source, Track, TrackPool};

fn image_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), 1, other.to_string()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, frame: &GrayFrame) -> Result<()> {
    let w = create(path)?;
    PnmEncoder::new(w)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(frame.data(), frame.width() as u32, frame.height() as u32, ExtendedColorType::L8)
        .map_err(|e| image_error(path, e))
}

pub fn read_pgm(path: &Path, index: u32) -> Result<GrayFrame> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    GrayFrame::new(w as usize, h as usize, img.into_raw(), index)
}

pub fn frame_path(dir: &Path, index: u32) -> PathBuf {
    dir.join(format!("frame_{index:06}.pgm"))
}

fn frame_index(name: &str) -> Option<u32> {
    name.strip_prefix("frame_")?.strip_suffix(".pgm")?.parse().ok()
}

/// Indices of the `frame_NNNNNN.pgm` files in a directory, ascending.
pub fn list_frames(dir: &Path) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(frame_index) {
            out.push(i);
        }
    }
    out.sort_unstable();
    Ok(out)
}

pub fn read_frames(dir: &Path) -> Result<Vec<GrayFrame>> {
    list_frames(dir)?
        .into_iter()
        .map(|i| read_pgm(&frame_path(dir, i), i))
        .collect()
}

pub fn write_frames(dir: &Path, frames: &[GrayFrame]) -> Result<()> {
    for f in frames {
        write_pgm(&frame_path(dir, f.index()), f)?;
    }
    Ok(())
}

pub fn write_voting_pgm(path: &Path, votes: &VotingMap) -> Result<()> {
    let mut data = Vec::with_capacity(votes.width * votes.height);
    for y in 0..votes.height {
        for x in 0..votes.width {
            data.push(if votes.get(x, y) { 255 } else { 0 });
        }
    }
    write_pgm(path, &GrayFrame::new(votes.width, votes.height, data, 0)?)
}

pub fn write_flo2(path: &Path, flow: &FlowField) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode_flo2(flow)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::io(path, e.into()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::parse(path.display().to_string(), line, format!("{kind:?}")),
    }
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    Ok(w)
}

fn finish(path: &Path, w: csv::Writer<BufWriter<File>>) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut w = csv_writer(path, &["frame", "cx", "cy", "w", "h", "area"])?;
    for d in detections {
        let b = &d.bbox;
        w.write_record([d.frame.to_string(), fmt(b.cx), fmt(b.cy), fmt(b.w), fmt(b.h), fmt(d.blob_area)])
            .map_err(|e| csv_error(path, e))?;
    }
    finish(path, w)
}

#[derive(Deserialize)]
struct DetectionRow {
    frame: u32,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    area: f64,
}

/// Detections grouped by frame. Rows must be in ascending frame order.
pub fn read_detections(path: &Path) -> Result<BTreeMap<u32, Vec<Detection>>> {
    let name = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    let mut last = None;
    for rec in r.deserialize::<DetectionRow>() {
        let row = rec.map_err(|e| csv_error(path, e))?;
        let line = last.map_or(2, |(_, l)| l + 1);
        let bbox = BBox::new(row.cx, row.cy, row.w, row.h)
            .map_err(|_| Error::parse(&name, line, format!("invalid box {}x{}", row.w, row.h)))?;
        if !(row.area >= 0.0) {
            return Err(Error::parse(&name, line, format!("invalid area {}", row.area)));
        }
        if last.is_some_and(|(f, _)| row.frame < f) {
            return Err(Error::parse(&name, line, "frames are not ascending"));
        }
        last = Some((row.frame, line));
        out.entry(row.frame).or_default().push(Detection::new(row.frame, bbox, row.area));
    }
    Ok(out)
}

fn write_track_rows(path: &Path, tracks: &[&Track], with_source: bool) -> Result<()> {
    let header: &[&str] = if with_source {
        &["track_id", "frame", "cx", "cy", "w", "h", "source"]
    } else {
        &["track_id", "frame", "cx", "cy", "w", "h"]
    };
    let mut w = csv_writer(path, header)?;
    for t in tracks {
        for o in t.observations() {
            let b = &o.bbox;
            let mut rec = vec![t.id.to_string(), o.frame.to_string(), fmt(b.cx), fmt(b.cy), fmt(b.w), fmt(b.h)];
            if with_source {
                rec.push(o.source.as_str().to_string());
            }
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
    }
    finish(path, w)
}

pub fn write_tracks(path: &Path, pool: &TrackPool) -> Result<()> {
    write_track_rows(path, &pool.iter().collect::<Vec<_>>(), true)
}

pub fn write_gt(path: &Path, tracks: &[Track]) -> Result<()> {
    write_track_rows(path, &tracks.iter().collect::<Vec<_>>(), false)
}

#[derive(Deserialize)]
struct TrackRow {
    track_id: u64,
    frame: u32,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    #[serde(default)]
    source: Option<String>,
}

/// Read a tracks or ground-truth CSV. A missing source column reads as DET.
pub fn read_tracks(path: &Path) -> Result<Vec<Track>> {
    let name = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut by_id: BTreeMap<u64, Vec<Observation>> = BTreeMap::new();
    for (i, rec) in r.deserialize::<TrackRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| csv_error(path, e))?;
        let bbox = BBox::new(row.cx, row.cy, row.w, row.h)
            .map_err(|_| Error::parse(&name, line, format!("invalid box {}x{}", row.w, row.h)))?;
        let source = match row.source.as_deref() {
            None | Some("") => Source::Detection,
            Some(s) => Source::parse(s).ok_or_else(|| Error::parse(&name, line, format!("unknown source `{s}`")))?,
        };
        by_id.entry(row.track_id).or_default().push(Observation::new(row.frame, bbox, source));
    }
    by_id
        .into_iter()
        .map(|(id, mut obs)| {
            obs.sort_by_key(|o| o.frame);
            if obs.windows(2).any(|w| w[0].frame == w[1].frame) {
                return Err(Error::parse(&name, 0, format!("track {id} has two rows for one frame")));
            }
            Track::new(id, obs)
        })
        .collect()
}

pub fn read_pool(path: &Path) -> Result<TrackPool> {
    let mut pool = TrackPool::new();
    for t in read_tracks(path)? {
        pool.insert(t);
    }
    Ok(pool)
}
