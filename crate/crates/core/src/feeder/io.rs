//! Text and CSV formats for feeders, load profiles and bus voltages.
//!
//! Feeder definition (one record per line, `#` starts a comment):
//!
//! ```text
//! bus  <id> <slack|pq>
//! line <from-id> <to-id> <r_pu> <x_pu>
//! ```
//!
//! Profiles: `bus_id,timestamp,p_pu,q_pu`, voltages:
//! `bus_id,timestamp,v_pu,theta_rad`. `timestamp` is minutes since the first
//! sample. Rows are grouped by timestamp, buses in a fixed order within each
//! group. Randomized profiles carry a leading `# transformed=true` comment.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Bus, BusState, FeederError, FeederModel, Line, LoadProfile, Result};

const TRANSFORMED_MARK: &str = "# transformed=true";

impl FeederModel {
    pub fn parse(text: &str) -> Result<FeederModel> {
        let mut buses = Vec::new();
        let mut lines = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line_no = no + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let err = |msg: String| FeederError::Parse { line: line_no, msg };
            match fields[0] {
                "bus" => {
                    if fields.len() != 3 {
                        return Err(err(format!("expected `bus <id> <type>`, got `{content}`")));
                    }
                    let id = fields[1].parse().map_err(|e| err(format!("bad bus id: {e}")))?;
                    let kind = fields[2].parse().map_err(err)?;
                    buses.push(Bus { id, kind });
                }
                "line" => {
                    if fields.len() != 5 {
                        return Err(err(format!("expected `line <from> <to> <r> <x>`, got `{content}`")));
                    }
                    let parse_id = |s: &str| s.parse::<usize>().map_err(|e| err(format!("bad bus id: {e}")));
                    let parse_f = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad impedance: {e}")));
                    lines.push(Line {
                        from: parse_id(fields[1])?,
                        to: parse_id(fields[2])?,
                        r: parse_f(fields[3])?,
                        x: parse_f(fields[4])?,
                    });
                }
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        FeederModel::new(buses, lines)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# bus <id> <slack|pq>\n# line <from> <to> <r_pu> <x_pu>\n");
        for b in self.buses() {
            out.push_str(&format!("bus {} {}\n", b.id, b.kind));
        }
        for l in self.lines() {
            out.push_str(&format!("line {} {} {} {}\n", l.from, l.to, l.r, l.x));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FeederModel> {
        FeederModel::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProfileCsvMeta {
    pub transformed: bool,
}

pub fn write_profiles_csv(path: impl AsRef<Path>, profile: &LoadProfile, transformed: bool) -> Result<()> {
    let mut file = fs::File::create(path)?;
    if transformed {
        writeln!(file, "{TRANSFORMED_MARK}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["bus_id", "timestamp", "p_pu", "q_pu"])?;
    for t in 0..profile.samples() {
        let ts = (t as u64 * profile.resolution_min as u64).to_string();
        for (j, id) in profile.bus_ids.iter().enumerate() {
            w.write_record([id.to_string(), ts.clone(), profile.p[[t, j]].to_string(), profile.q[[t, j]].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_voltages_csv(path: impl AsRef<Path>, state: &BusState) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bus_id", "timestamp", "v_pu", "theta_rad"])?;
    for t in 0..state.samples() {
        let ts = (t as u64 * state.resolution_min as u64).to_string();
        for (j, id) in state.bus_ids.iter().enumerate() {
            w.write_record([id.to_string(), ts.clone(), state.v[[t, j]].to_string(), state.theta[[t, j]].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format rows `(bus, timestamp, a, b)` back into two `T x N` matrices.
struct Wide {
    bus_ids: Vec<usize>,
    resolution_min: u32,
    a: Array2<f64>,
    b: Array2<f64>,
}

fn read_long(path: &Path, columns: [&str; 4]) -> Result<(Wide, bool)> {
    let first = BufReader::new(fs::File::open(path)?).lines().next().transpose()?.unwrap_or_default();
    let transformed = first.trim() == TRANSFORMED_MARK;

    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != columns {
        return Err(FeederError::Parse { line: 1, msg: format!("expected header {}, got {:?}", columns.join(","), headers) });
    }
    let mut bus_order: Vec<usize> = Vec::new();
    let mut bus_pos: HashMap<usize, usize> = HashMap::new();
    let mut stamps: Vec<u64> = Vec::new();
    let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let err = |msg: String| FeederError::Parse { line: i + 2, msg };
        let bus: usize = rec[0].trim().parse().map_err(|e| err(format!("bus_id: {e}")))?;
        let ts: u64 = rec[1].trim().parse().map_err(|e| err(format!("timestamp: {e}")))?;
        let a: f64 = rec[2].trim().parse().map_err(|e| err(format!("{}: {e}", columns[2])))?;
        let b: f64 = rec[3].trim().parse().map_err(|e| err(format!("{}: {e}", columns[3])))?;
        let col = *bus_pos.entry(bus).or_insert_with(|| {
            bus_order.push(bus);
            bus_order.len() - 1
        });
        if stamps.last() != Some(&ts) {
            if stamps.last().is_some_and(|&last| ts < last) {
                return Err(err("timestamps must be nondecreasing".into()));
            }
            stamps.push(ts);
        }
        rows.push((stamps.len() - 1, col, a, b));
    }
    let (t_len, n) = (stamps.len(), bus_order.len());
    if rows.len() != t_len * n {
        return Err(FeederError::ProfileMismatch(format!("{} rows for {t_len} timestamps x {n} buses", rows.len())));
    }
    let mut a = Array2::from_elem((t_len, n), f64::NAN);
    let mut b = Array2::from_elem((t_len, n), f64::NAN);
    for (t, j, va, vb) in rows {
        a[[t, j]] = va;
        b[[t, j]] = vb;
    }
    if a.iter().any(|x| x.is_nan()) {
        return Err(FeederError::ProfileMismatch("missing (bus, timestamp) rows".into()));
    }
    let resolution_min = if t_len > 1 { (stamps[1] - stamps[0]) as u32 } else { 60 };
    Ok((Wide { bus_ids: bus_order, resolution_min, a, b }, transformed))
}

pub fn read_profiles_csv(path: impl AsRef<Path>) -> Result<(LoadProfile, ProfileCsvMeta)> {
    let (w, transformed) = read_long(path.as_ref(), ["bus_id", "timestamp", "p_pu", "q_pu"])?;
    Ok((LoadProfile::new(w.bus_ids, w.resolution_min, w.a, w.b)?, ProfileCsvMeta { transformed }))
}

pub fn read_voltages_csv(path: impl AsRef<Path>) -> Result<BusState> {
    let (w, _) = read_long(path.as_ref(), ["bus_id", "timestamp", "v_pu", "theta_rad"])?;
    Ok(BusState { bus_ids: w.bus_ids, resolution_min: w.resolution_min, v: w.a, theta: w.b })
}
