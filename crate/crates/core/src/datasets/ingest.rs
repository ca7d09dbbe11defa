use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DsdpError, Result};

/// Required CSV header, in write order.
pub const CSV_COLUMNS: [&str; 9] = [
    "vehicle_id",
    "frame_id",
    "position",
    "velocity",
    "acceleration",
    "lane_id",
    "space_headway",
    "preceding_id",
    "vehicle_length",
];

/// One row of an NGSIM-style trajectory log.
///
/// `position` is the front bumper along the lane and `space_headway` is
/// front-to-front. `preceding_id == 0` means no leader.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub vehicle_id: u64,
    pub frame_id: u64,
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub lane_id: u32,
    pub space_headway: f64,
    pub preceding_id: u64,
    pub vehicle_length: f64,
}

impl RawRecord {
    pub fn leader_id(&self) -> Option<u64> {
        (self.preceding_id != 0).then_some(self.preceding_id)
    }
}

/// Parses a CSV log. Extra columns are ignored; row errors carry line numbers.
pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path).map_err(|e| DsdpError::file(path, e))?;
    let shown = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers().map_err(|e| DsdpError::Parse {
        path: shown.clone(),
        line: 1,
        msg: e.to_string(),
    })?;
    if let Some(missing) = CSV_COLUMNS
        .iter()
        .find(|c| !headers.iter().any(|h| h == **c))
    {
        return Err(DsdpError::Parse {
            path: shown,
            line: 1,
            msg: format!("missing column `{missing}`"),
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<RawRecord>() {
        let rec = row.map_err(|e| DsdpError::Parse {
            path: shown.clone(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Frame-sorted records per vehicle. Duplicate frames are an error.
pub fn group_by_vehicle(records: &[RawRecord]) -> Result<BTreeMap<u64, Vec<RawRecord>>> {
    let mut by: BTreeMap<u64, Vec<RawRecord>> = BTreeMap::new();
    for r in records {
        by.entry(r.vehicle_id).or_default().push(*r);
    }
    for (id, recs) in &mut by {
        recs.sort_by_key(|r| r.frame_id);
        if let Some(w) = recs.windows(2).find(|w| w[0].frame_id == w[1].frame_id) {
            return Err(DsdpError::Data(format!(
                "vehicle {id} has duplicate frame {}",
                w[0].frame_id
            )));
        }
    }
    Ok(by)
}

pub fn ingest_csv(path: &Path) -> Result<BTreeMap<u64, Vec<RawRecord>>> {
    group_by_vehicle(&read_records(path)?)
}

pub fn write_csv(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| DsdpError::Data(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r)
            .map_err(|e| DsdpError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| DsdpError::file(path, e))
}
