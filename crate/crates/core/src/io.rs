//! Line-delimited scenario files.
//!
//! The first line is a header object:
//!
//! ```text
//! {"schema":"scenflow.scenarios","version":1,"dt":..,"history_steps":H,"future_steps":T,
//!  "state_fields":["x","y","z","yaw","v","length","width","height"],"record_fields":[...]}
//! ```
//!
//! Every following line is one scenario with keys in `record_fields` order.
//! States are arrays in `state_fields` order, indexed `[timestep][actor]`.
//! Map nodes are `[x, y, heading, lane_id]`; edges are `[from, to]` node
//! index pairs. Floats are written in scientific notation with 17 significant
//! digits, which round-trips every finite `f64` exactly.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scene::{ActorId, ActorState, LaneGraph, LaneNode, ManeuverLabel, Scenario, Source};

pub const SCHEMA: &str = "scenflow.scenarios";
pub const VERSION: u32 = 1;
pub const RECORD_FIELDS: [&str; 10] = [
    "id",
    "source",
    "label",
    "dt",
    "ego",
    "actors",
    "history",
    "future",
    "map",
    "provenance",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing header line")]
    MissingHeader,
    #[error("unsupported schema {schema} version {version}")]
    Schema { schema: String, version: u32 },
    #[error("inconsistent corpus: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    pub dt: Option<f64>,
    pub history_steps: Option<usize>,
    pub future_steps: Option<usize>,
    pub state_fields: Vec<String>,
    pub record_fields: Vec<String>,
}

/// Where a scenario came from, for generated and synthesized files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ManeuverLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub scenario: Scenario,
    pub provenance: Option<Provenance>,
}

impl From<Scenario> for Record {
    fn from(scenario: Scenario) -> Self {
        Record {
            scenario,
            provenance: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MapWire {
    spacing: f64,
    speed_limit: f64,
    nodes: Vec<(f64, f64, f64, u32)>,
    successors: Vec<(usize, usize)>,
    left: Vec<(usize, usize)>,
    right: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    id: String,
    source: Source,
    label: ManeuverLabel,
    dt: f64,
    ego: ActorId,
    actors: Vec<ActorId>,
    history: Vec<Vec<[f64; 8]>>,
    future: Vec<Vec<[f64; 8]>>,
    map: MapWire,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

fn states_out(rows: &[Vec<ActorState>]) -> Vec<Vec<[f64; 8]>> {
    rows.iter()
        .map(|r| r.iter().map(ActorState::fields).collect())
        .collect()
}

fn states_in(rows: Vec<Vec<[f64; 8]>>) -> Vec<Vec<ActorState>> {
    rows.into_iter()
        .map(|r| r.into_iter().map(ActorState::from_fields).collect())
        .collect()
}

impl RecordWire {
    fn from_record(r: &Record) -> Self {
        let s = &r.scenario;
        let m = &s.map;
        RecordWire {
            id: s.id.clone(),
            source: s.source,
            label: s.label,
            dt: s.dt,
            ego: s.ego,
            actors: s.actors.clone(),
            history: states_out(&s.history),
            future: states_out(&s.future),
            map: MapWire {
                spacing: m.spacing,
                speed_limit: m.speed_limit,
                nodes: m.nodes.iter().map(|n| (n.x, n.y, n.heading, n.lane_id)).collect(),
                successors: m.successors.clone(),
                left: m.left.clone(),
                right: m.right.clone(),
            },
            provenance: r.provenance.clone(),
        }
    }

    fn into_record(self) -> Record {
        let map = LaneGraph {
            nodes: self
                .map
                .nodes
                .into_iter()
                .map(|(x, y, heading, lane_id)| LaneNode { x, y, heading, lane_id })
                .collect(),
            successors: self.map.successors,
            left: self.map.left,
            right: self.map.right,
            spacing: self.map.spacing,
            speed_limit: self.map.speed_limit,
        };
        Record {
            scenario: Scenario {
                id: self.id,
                map: Arc::new(map),
                actors: self.actors,
                history: states_in(self.history),
                future: states_in(self.future),
                dt: self.dt,
                ego: self.ego,
                source: self.source,
                label: self.label,
            },
            provenance: self.provenance,
        }
    }
}

/// JSON formatter writing floats with 17 significant digits.
struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
}

fn check_finite(s: &Scenario) -> Result<(), IoError> {
    let states = s.history.iter().chain(&s.future).flatten().flat_map(|a| a.fields());
    let map = s.map.nodes.iter().flat_map(|n| [n.x, n.y, n.heading]);
    let scalars = [s.dt, s.map.spacing, s.map.speed_limit];
    if states.chain(map).chain(scalars).all(f64::is_finite) {
        Ok(())
    } else {
        Err(IoError::Inconsistent(format!(
            "scenario {} holds non-finite values",
            s.id
        )))
    }
}

fn to_line<T: Serialize>(value: &T) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    value.serialize(&mut ser).map_err(io::Error::from)?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn header_for(scenarios: &[&Scenario]) -> Result<Header, IoError> {
    let first = scenarios.first();
    for s in scenarios {
        let f = first.unwrap();
        if s.dt != f.dt || s.history.len() != f.history.len() || s.future.len() != f.future.len() {
            return Err(IoError::Inconsistent(format!(
                "scenario {} has (dt, H, T) = ({}, {}, {}) but {} has ({}, {}, {})",
                s.id,
                s.dt,
                s.history.len(),
                s.future.len(),
                f.id,
                f.dt,
                f.history.len(),
                f.future.len()
            )));
        }
    }
    Ok(Header {
        schema: SCHEMA.to_string(),
        version: VERSION,
        dt: first.map(|s| s.dt),
        history_steps: first.map(|s| s.history.len()),
        future_steps: first.map(|s| s.future.len()),
        state_fields: ActorState::FIELD_NAMES.iter().map(|s| s.to_string()).collect(),
        record_fields: RECORD_FIELDS.iter().map(|s| s.to_string()).collect(),
    })
}

pub fn write_records<W: Write>(w: &mut W, records: &[Record]) -> Result<(), IoError> {
    let scenarios: Vec<&Scenario> = records.iter().map(|r| &r.scenario).collect();
    w.write_all(&to_line(&header_for(&scenarios)?)?)?;
    for r in records {
        check_finite(&r.scenario)?;
        w.write_all(&to_line(&RecordWire::from_record(r))?)?;
    }
    Ok(())
}

pub fn write_scenarios<W: Write>(w: &mut W, scenarios: &[Scenario]) -> Result<(), IoError> {
    let records: Vec<Record> = scenarios.iter().cloned().map(Record::from).collect();
    write_records(w, &records)
}

pub fn read_records<R: BufRead>(r: R) -> Result<(Header, Vec<Record>), IoError> {
    let mut lines = r.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(IoError::MissingHeader),
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| IoError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.schema != SCHEMA || header.version != VERSION {
        return Err(IoError::Schema {
            schema: header.schema,
            version: header.version,
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: RecordWire = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(wire.into_record());
    }
    Ok((header, out))
}

pub fn read_scenarios<R: BufRead>(r: R) -> Result<Vec<Scenario>, IoError> {
    Ok(read_records(r)?.1.into_iter().map(|r| r.scenario).collect())
}

fn file_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path).map_err(file_err(path))?);
    write_records(&mut w, records)?;
    w.flush().map_err(file_err(path))?;
    Ok(())
}

pub fn save_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<(), IoError> {
    let records: Vec<Record> = scenarios.iter().cloned().map(Record::from).collect();
    save_records(path, &records)
}

pub fn load_records(path: &Path) -> Result<(Header, Vec<Record>), IoError> {
    read_records(BufReader::new(File::open(path).map_err(file_err(path))?))
}

pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, IoError> {
    Ok(load_records(path)?.1.into_iter().map(|r| r.scenario).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(file_err(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Scenario {
        let map = LaneGraph {
            nodes: vec![
                LaneNode {
                    x: 0.0,
                    y: 0.0,
                    heading: 0.0,
                    lane_id: 0,
                },
                LaneNode {
                    x: 2.0,
                    y: 0.0,
                    heading: 0.0,
                    lane_id: 0,
                },
            ],
            successors: vec![(0, 1)],
            left: vec![],
            right: vec![],
            spacing: 2.0,
            speed_limit: 30.0,
        };
        let a = ActorState::car(0.1, 1.0 / 3.0, 0.2, 7.123456789012345);
        let b = ActorState::car(20.0, -1e-300, -3.0, 0.0);
        Scenario {
            id: "s0".into(),
            map: Arc::new(map),
            actors: vec![4, 9],
            history: vec![vec![a, b]; 2],
            future: vec![vec![b, a]],
            dt: 0.1,
            ego: 9,
            source: Source::RealCritical,
            label: ManeuverLabel::VerySafetyCritical,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let s = tiny();
        let rec = Record {
            scenario: s.clone(),
            provenance: Some(Provenance {
                seed: Some(u64::MAX),
                t_end: Some(0.25),
                ..Default::default()
            }),
        };
        let mut buf = Vec::new();
        write_records(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let (header, back) = read_records(buf.as_slice()).unwrap();
        assert_eq!(header.history_steps, Some(2));
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn writes_at_least_nine_significant_digits() {
        let mut buf = Vec::new();
        write_scenarios(&mut buf, &[tiny()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("1.0000000000000001e-1") || text.contains("1.0000000000000000e-1"));
    }

    #[test]
    fn non_finite_is_refused() {
        let mut s = tiny();
        s.history[0][0].x = f64::NAN;
        assert!(write_scenarios(&mut Vec::new(), &[s]).is_err());
    }

    #[test]
    fn bad_header_and_lines() {
        assert!(matches!(read_scenarios("".as_bytes()), Err(IoError::MissingHeader)));
        let bad = "{\"schema\":\"other\",\"version\":1,\"dt\":null,\"history_steps\":null,\"future_steps\":null,\"state_fields\":[],\"record_fields\":[]}\n";
        assert!(matches!(read_scenarios(bad.as_bytes()), Err(IoError::Schema { .. })));
        let mut buf = Vec::new();
        write_scenarios(&mut buf, &[tiny()]).unwrap();
        buf.extend_from_slice(b"{not json}\n");
        assert!(matches!(
            read_scenarios(buf.as_slice()),
            Err(IoError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn mixed_horizons_rejected() {
        let a = tiny();
        let mut b = tiny();
        b.future.clear();
        assert!(matches!(
            write_scenarios(&mut Vec::new(), &[a, b]),
            Err(IoError::Inconsistent(_))
        ));
    }
}
