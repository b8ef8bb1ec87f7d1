//! CSV readers and writers for `speeds.csv`, `graph.csv` and `coords.csv`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::Deserialize;

use super::panel::is_grid_aligned;
use super::{Edge, RawReading, RoadId, SpeedPanel, SpeedUnit, STEP_MINUTES};
use crate::{Error, Result};

#[derive(Deserialize)]
struct SpeedRow {
    timestamp: String,
    road_id: String,
    speed: Option<String>,
}

#[derive(Deserialize)]
struct GraphRow {
    from_id: String,
    to_id: String,
    weight: f64,
}

#[derive(Deserialize)]
struct CoordRow {
    road_id: String,
    lat: f64,
    lon: f64,
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_timestamp(s: &str, line: u64) -> Result<DateTime<Utc>> {
    if let Ok(ts) = DateTime::parse_from_rfc3339(s) {
        return Ok(ts.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(ts.and_utc());
        }
    }
    Err(Error::Parse {
        line,
        message: format!("invalid ISO-8601 timestamp {s:?}"),
    })
}

fn parse_speed(s: Option<&str>, line: u64) -> Result<f64> {
    match s {
        None | Some("") => Ok(f64::NAN),
        Some(v) => v.parse::<f64>().map_err(|_| Error::Parse {
            line,
            message: format!("invalid speed {v:?}"),
        }),
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn read_speed_rows(path: &Path) -> Result<Vec<(u64, RawReading)>> {
    let mut rdr = open(path)?;
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = line_of(&rec);
        let row: SpeedRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push((
            line,
            RawReading {
                timestamp: parse_timestamp(&row.timestamp, line)?,
                road: RoadId::new(row.road_id),
                speed: parse_speed(row.speed.as_deref(), line)?,
            },
        ));
    }
    Ok(out)
}

/// Load a gridded `timestamp,road_id,speed` file into a panel.
///
/// Timestamps must sit on the 5-minute grid (use [`load_raw_readings_csv`]
/// plus [`super::aggregate_5min`] for irregular data). Grid cells without a
/// row become `NaN` and are masked. Repeated identical rows are tolerated,
/// differing repeats are a conflict.
pub fn load_speed_csv(path: impl AsRef<Path>, unit: SpeedUnit) -> Result<SpeedPanel> {
    let rows = read_speed_rows(path.as_ref())?;
    if rows.is_empty() {
        return Err(Error::invalid("speed file has no rows"));
    }
    for (line, r) in &rows {
        if !is_grid_aligned(&r.timestamp) {
            return Err(Error::Parse {
                line: *line,
                message: format!("timestamp {} is not on the 5-minute grid", r.timestamp),
            });
        }
    }
    let start = rows.iter().map(|(_, r)| r.timestamp).min().expect("non-empty");
    let end = rows.iter().map(|(_, r)| r.timestamp).max().expect("non-empty");
    let steps = ((end - start).num_minutes() / STEP_MINUTES) as usize + 1;
    let roads: Vec<RoadId> = rows
        .iter()
        .map(|(_, r)| r.road.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&RoadId, usize> = roads.iter().enumerate().map(|(i, r)| (r, i)).collect();

    let mut series = vec![vec![f64::NAN; steps]; roads.len()];
    let mut seen = vec![vec![false; steps]; roads.len()];
    for (_, r) in &rows {
        let i = index[&r.road];
        let t = ((r.timestamp - start).num_minutes() / STEP_MINUTES) as usize;
        if seen[i][t] {
            let prev = series[i][t];
            let same = prev == r.speed || (prev.is_nan() && r.speed.is_nan());
            if !same {
                return Err(Error::Conflict {
                    road: r.road.to_string(),
                    timestamp: r.timestamp.to_rfc3339(),
                    first: prev,
                    second: r.speed,
                });
            }
        }
        seen[i][t] = true;
        series[i][t] = r.speed;
    }
    let mask = series
        .iter()
        .map(|s| s.iter().map(|v| v.is_nan()).collect())
        .collect();
    SpeedPanel::new(start, unit, roads, series, mask)
}

/// Load `timestamp,road_id,speed` rows without gridding.
pub fn load_raw_readings_csv(path: impl AsRef<Path>) -> Result<Vec<RawReading>> {
    Ok(read_speed_rows(path.as_ref())?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

pub fn load_graph_csv(path: impl AsRef<Path>) -> Result<Vec<Edge>> {
    let mut rdr = open(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let row: GraphRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if !(row.weight >= 0.0) {
            return Err(Error::Parse {
                line,
                message: format!("negative edge weight {}", row.weight),
            });
        }
        edges.push(Edge {
            from: row.from_id.into(),
            to: row.to_id.into(),
            weight: row.weight,
        });
    }
    Ok(edges)
}

pub fn load_coords_csv(path: impl AsRef<Path>) -> Result<BTreeMap<RoadId, (f64, f64)>> {
    let mut rdr = open(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let row: CoordRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.insert(RoadId::new(row.road_id), (row.lat, row.lon));
    }
    Ok(out)
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Write a panel as `timestamp,road_id,speed`, skipping `NaN` cells.
pub fn write_speed_csv(path: impl AsRef<Path>, panel: &SpeedPanel) -> Result<()> {
    let mut w = create(path.as_ref())?;
    w.write_record(["timestamp", "road_id", "speed"])?;
    for t in 0..panel.len() {
        let ts = panel.timestamp(t).format("%Y-%m-%dT%H:%M:%SZ").to_string();
        for (i, road) in panel.roads().iter().enumerate() {
            let v = panel.value(i, t);
            if v.is_nan() {
                continue;
            }
            w.write_record([ts.as_str(), road.as_str(), &v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

pub fn write_graph_csv(path: impl AsRef<Path>, edges: &[Edge]) -> Result<()> {
    let mut w = create(path.as_ref())?;
    w.write_record(["from_id", "to_id", "weight"])?;
    for e in edges {
        w.write_record([e.from.as_str(), e.to.as_str(), &e.weight.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

pub fn write_coords_csv(path: impl AsRef<Path>, coords: &BTreeMap<RoadId, (f64, f64)>) -> Result<()> {
    let mut w = create(path.as_ref())?;
    w.write_record(["road_id", "lat", "lon"])?;
    for (road, (lat, lon)) in coords {
        w.write_record([road.as_str(), &lat.to_string(), &lon.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn full_day_csv(skip: Option<(usize, &str)>) -> String {
        let mut s = String::from("timestamp,road_id,speed\n");
        let start = DateTime::parse_from_rfc3339("2024-03-04T00:00:00Z").unwrap().with_timezone(&Utc);
        for t in 0..288 {
            let ts = (start + chrono::Duration::minutes(5 * t as i64)).to_rfc3339();
            for road in ["a", "b"] {
                if skip == Some((t, road)) {
                    continue;
                }
                s.push_str(&format!("{ts},{road},{}\n", 50 + t % 7));
            }
        }
        s
    }

    #[test]
    fn complete_day_loads_without_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = load_speed_csv(write(&dir, "s.csv", &full_day_csv(None)), SpeedUnit::Mph).unwrap();
        assert_eq!(p.num_roads(), 2);
        assert_eq!(p.len(), 288);
        assert_eq!(p.imputed_count(), 0);
        assert_eq!(p.unit(), SpeedUnit::Mph);
    }

    #[test]
    fn missing_cell_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let p = load_speed_csv(write(&dir, "s.csv", &full_day_csv(Some((40, "b")))), SpeedUnit::Mph)
            .unwrap();
        assert!(p.mask(1)[40]);
        assert!(p.value(1, 40).is_nan());
        assert_eq!(p.imputed_count(), 1);
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "timestamp,road_id,speed\n2024-01-01T00:00:00Z,a,50\n2024-01-01T00:05:00Z,a,fast\n";
        match load_speed_csv(write(&dir, "s.csv", body), SpeedUnit::Kmh) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let body = "timestamp,road_id,speed\nyesterday,a,50\n";
        assert!(matches!(
            load_speed_csv(write(&dir, "t.csv", body), SpeedUnit::Kmh),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn conflicting_duplicate_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = "timestamp,road_id,speed\n2024-01-01T00:00:00Z,a,50\n2024-01-01T00:00:00Z,a,51\n";
        assert!(matches!(
            load_speed_csv(write(&dir, "s.csv", body), SpeedUnit::Kmh),
            Err(Error::Conflict { .. })
        ));
        let body = "timestamp,road_id,speed\n2024-01-01T00:00:00Z,a,50\n2024-01-01T00:00:00Z,a,50\n";
        assert!(load_speed_csv(write(&dir, "t.csv", body), SpeedUnit::Kmh).is_ok());
    }

    #[test]
    fn speed_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = load_speed_csv(write(&dir, "s.csv", &full_day_csv(Some((3, "a")))), SpeedUnit::Kmh)
            .unwrap();
        let out = dir.path().join("out.csv");
        write_speed_csv(&out, &p).unwrap();
        let back = load_speed_csv(&out, SpeedUnit::Kmh).unwrap();
        assert_eq!(back.roads(), p.roads());
        assert_eq!(back.mask(0), p.mask(0));
        assert_eq!(back.series(1), p.series(1));
    }

    #[test]
    fn graph_and_coords_load() {
        let dir = tempfile::tempdir().unwrap();
        let g = write(&dir, "g.csv", "from_id,to_id,weight\na,b,0.5\nb,a,1\n");
        let edges = load_graph_csv(g).unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!(edges[0].weight, 0.5);
        let c = write(&dir, "c.csv", "road_id,lat,lon\na,34.1,-118.2\n");
        let coords = load_coords_csv(c).unwrap();
        assert_eq!(coords[&RoadId::from("a")], (34.1, -118.2));
        let bad = write(&dir, "bad.csv", "from_id,to_id,weight\na,b,-2\n");
        assert!(load_graph_csv(bad).is_err());
    }
}
