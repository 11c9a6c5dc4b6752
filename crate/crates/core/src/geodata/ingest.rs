use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::{CategoricalColumn, StationDataset, StationRecord};
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 5] = ["station_id", "timestamp", "lng", "lat", "target"];

/// Declares which extra CSV columns are features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default)]
    pub numeric_features: Vec<String>,
    #[serde(default)]
    pub categorical_features: Vec<String>,
}

struct Row {
    station: usize,
    ts: DateTime<Utc>,
    target: Option<f64>,
    features: Vec<f64>,
    categorical: Vec<Option<String>>,
}

/// Parses RFC 3339 or a naive `YYYY-MM-DD[T ]HH:MM[:SS]` timestamp taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|n| n.and_utc())
}

fn parse_f64(s: &str, what: &str, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what}: cannot parse {s:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{what}: non-finite value {s:?}"),
        });
    }
    Ok(v)
}

/// Reads a station CSV onto a uniform hourly grid.
///
/// Rows absent for a station at a grid timestamp become missing readings.
/// Categorical levels are sorted lexicographically, so indices do not depend
/// on row order.
pub fn load_observations(path: &Path, schema: &CsvSchema) -> Result<StationDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::file(path, io),
            other => Error::Schema(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let fixed: Vec<usize> = FIXED_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let num_cols: Vec<usize> = schema
        .numeric_features
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let cat_cols: Vec<usize> = schema
        .categorical_features
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;

    let mut station_ids: Vec<String> = Vec::new();
    let mut station_pos: Vec<(f64, f64)> = Vec::new();
    let mut station_lookup: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Row> = Vec::new();
    let mut seen: BTreeSet<(usize, DateTime<Utc>)> = BTreeSet::new();

    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let id = field(fixed[0]).trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty station_id".into(),
            });
        }
        let ts = parse_timestamp(field(fixed[1])).ok_or_else(|| Error::Parse {
            line,
            message: format!("timestamp: cannot parse {:?}", field(fixed[1])),
        })?;
        let lng = parse_f64(field(fixed[2]), "lng", line)?;
        let lat = parse_f64(field(fixed[3]), "lat", line)?;
        let target = match field(fixed[4]).trim() {
            "" => None,
            s => {
                let v = parse_f64(s, "target", line)?;
                if v < 0.0 {
                    return Err(Error::Parse {
                        line,
                        message: format!("target must be nonnegative, got {v}"),
                    });
                }
                Some(v)
            }
        };
        let features = num_cols
            .iter()
            .zip(&schema.numeric_features)
            .map(|(&c, name)| match field(c).trim() {
                "" => Ok(f64::NAN),
                s => parse_f64(s, name, line),
            })
            .collect::<Result<Vec<_>>>()?;
        let categorical = cat_cols
            .iter()
            .map(|&c| match field(c).trim() {
                "" => None,
                s => Some(s.to_string()),
            })
            .collect();

        let station = match station_lookup.get(&id) {
            Some(&s) => {
                let (l0, a0) = station_pos[s];
                if (l0 - lng).abs() > 1e-9 || (a0 - lat).abs() > 1e-9 {
                    return Err(Error::Schema(format!(
                        "station {id:?} changes position at line {line}"
                    )));
                }
                s
            }
            None => {
                let s = station_ids.len();
                station_lookup.insert(id.clone(), s);
                station_ids.push(id.clone());
                station_pos.push((lng, lat));
                s
            }
        };
        if !seen.insert((station, ts)) {
            return Err(Error::Schema(format!(
                "duplicate reading for station {id:?} at {ts} (line {line})"
            )));
        }
        rows.push(Row {
            station,
            ts,
            target,
            features,
            categorical,
        });
    }
    if rows.is_empty() {
        return Err(Error::NoUsableData(format!("{} has no rows", path.display())));
    }

    let grid: Vec<DateTime<Utc>> = rows
        .iter()
        .map(|r| r.ts)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for w in grid.windows(2) {
        if (w[1] - w[0]).num_seconds() != 3600 {
            return Err(Error::Schema(format!(
                "non-uniform timestamp grid: step from {} to {} is not one hour",
                w[0], w[1]
            )));
        }
    }
    let grid_index: BTreeMap<DateTime<Utc>, usize> =
        grid.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let categorical: Vec<CategoricalColumn> = schema
        .categorical_features
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let levels: BTreeSet<&str> = rows
                .iter()
                .filter_map(|r| r.categorical[k].as_deref())
                .collect();
            CategoricalColumn {
                name: name.clone(),
                levels: levels.into_iter().map(str::to_string).collect(),
            }
        })
        .collect();
    let level_index: Vec<HashMap<&str, u32>> = categorical
        .iter()
        .map(|c| {
            c.levels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.as_str(), i as u32))
                .collect()
        })
        .collect();

    let n_t = grid.len();
    let n_num = schema.numeric_features.len();
    let n_cat = schema.categorical_features.len();
    let mut stations: Vec<StationRecord> = station_ids
        .iter()
        .zip(&station_pos)
        .map(|(id, &(lng, lat))| StationRecord {
            station_id: id.clone(),
            raw_lng: lng,
            raw_lat: lat,
            targets: vec![None; n_t],
            features: vec![vec![f64::NAN; n_num]; n_t],
            categorical: vec![vec![None; n_cat]; n_t],
        })
        .collect();
    for r in &rows {
        let t = grid_index[&r.ts];
        let st = &mut stations[r.station];
        st.targets[t] = r.target;
        st.features[t].clone_from(&r.features);
        st.categorical[t] = r
            .categorical
            .iter()
            .enumerate()
            .map(|(k, v)| v.as_deref().map(|v| level_index[k][v]))
            .collect();
    }

    Ok(StationDataset {
        stations,
        epoch: grid[0],
        timestamps: grid,
        normalizer: None,
        feature_names: schema.numeric_features.clone(),
        categorical,
    })
}

/// Writes a dataset in the ingestion format, one row per station and
/// timestep. Floats use the shortest round-trip representation.
pub fn write_observations(dataset: &StationDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(dataset.feature_names.iter().cloned());
    header.extend(dataset.categorical.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for st in &dataset.stations {
        for (t, ts) in dataset.timestamps.iter().enumerate() {
            let mut rec = vec![
                st.station_id.clone(),
                ts.to_rfc3339_opts(SecondsFormat::Secs, true),
                st.raw_lng.to_string(),
                st.raw_lat.to_string(),
                st.targets[t].map(|v| v.to_string()).unwrap_or_default(),
            ];
            rec.extend(st.features[t].iter().map(|v| {
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            }));
            rec.extend(st.categorical[t].iter().zip(&dataset.categorical).map(
                |(v, col)| v.map(|i| col.levels[i as usize].clone()).unwrap_or_default(),
            ));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
