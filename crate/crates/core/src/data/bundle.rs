//! Dataset bundle: a directory holding `meta.txt`, `nodes.csv`, `edges.csv`
//! and `flow.csv`.

use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::graph::{Edge, Layout, RoadNetwork};
use crate::series::TrafficTensor;
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.txt";
pub const NODES_FILE: &str = "nodes.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const FLOW_FILE: &str = "flow.csv";
pub const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// A road network with its observed series and the external node ids used
/// in the files.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub network: RoadNetwork,
    pub series: TrafficTensor,
    /// External id of each node, in node-index order.
    pub node_ids: Vec<u64>,
    /// Optional `(lat, lon)` per node on graph layouts.
    pub coords: Option<Vec<(f64, f64)>>,
}

impl Bundle {
    /// Bundle with node ids `0..N` and no coordinates.
    pub fn new(network: RoadNetwork, series: TrafficTensor) -> Result<Self> {
        if series.nodes() != network.node_count() {
            return Err(Error::Data(format!(
                "series has {} nodes but the network has {}",
                series.nodes(),
                network.node_count()
            )));
        }
        let node_ids = (0..network.node_count() as u64).collect();
        Ok(Bundle {
            network,
            series,
            node_ids,
            coords: None,
        })
    }

    pub fn node_index(&self, id: u64) -> Option<usize> {
        self.node_ids.iter().position(|&n| n == id)
    }
}

fn data_err(file: &str, line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{file} line {line}: {msg}"))
}

fn meta_text(b: &Bundle) -> String {
    let mut s = format!(
        "interval_minutes={}\nstart_time={}\n",
        b.series.interval_minutes(),
        b.series.start().format(TIME_FORMAT)
    );
    match b.network.layout() {
        Layout::Graph => s.push_str("layout=graph\n"),
        Layout::Grid { rows, cols } => s.push_str(&format!("layout=grid\nrows={rows}\ncols={cols}\n")),
    }
    s.push_str(&format!("channels={}\n", b.series.channels()));
    s
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(fmt)?;
    for r in rows {
        w.write_record(&r).map_err(fmt)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Write `b` into `dir`, creating it if needed. Each file is replaced
/// atomically. Values are written in shortest round-trip form, so reading
/// back is bitwise exact.
pub fn write_bundle(dir: &Path, b: &Bundle) -> Result<()> {
    fsutil::create_dir_all(dir)?;
    let n = b.network.node_count();
    if b.node_ids.len() != n || b.coords.as_ref().is_some_and(|c| c.len() != n) {
        return Err(Error::Data("node ids or coordinates do not match the node count".into()));
    }
    fsutil::write_atomic(&dir.join(META_FILE), meta_text(b).as_bytes())?;

    let s = |v: &dyn ToString| v.to_string();
    let (header, rows): (Vec<String>, Vec<Vec<String>>) = match (b.network.layout(), &b.coords) {
        (Layout::Grid { cols, .. }, _) => (
            vec!["node_id".into(), "row".into(), "col".into()],
            (0..n).map(|i| vec![s(&b.node_ids[i]), s(&(i / cols)), s(&(i % cols))]).collect(),
        ),
        (Layout::Graph, Some(c)) => (
            vec!["node_id".into(), "lat".into(), "lon".into()],
            (0..n).map(|i| vec![s(&b.node_ids[i]), s(&c[i].0), s(&c[i].1)]).collect(),
        ),
        (Layout::Graph, None) => (vec!["node_id".into()], (0..n).map(|i| vec![s(&b.node_ids[i])]).collect()),
    };
    fsutil::write_atomic(&dir.join(NODES_FILE), &csv_bytes(&header, rows.into_iter())?)?;

    let edges = b
        .network
        .edges()
        .iter()
        .map(|e| vec![s(&b.node_ids[e.src]), s(&b.node_ids[e.dst]), s(&e.cost)]);
    let header = ["src", "dst", "cost"].map(String::from);
    fsutil::write_atomic(&dir.join(EDGES_FILE), &csv_bytes(&header, edges)?)?;

    let c = b.series.channels();
    let mut header = vec!["step".to_string(), "node_id".to_string()];
    header.extend((0..c).map(|k| format!("c{k}")));
    let flow = (0..b.series.steps()).flat_map(|t| {
        (0..n).map(move |i| {
            let mut r = vec![t.to_string(), b.node_ids[i].to_string()];
            r.extend((0..c).map(|k| b.series.get(t, i, k).to_string()));
            r
        })
    });
    fsutil::write_atomic(&dir.join(FLOW_FILE), &csv_bytes(&header, flow)?)?;
    Ok(())
}

struct Meta {
    interval: u32,
    start: NaiveDateTime,
    layout: Layout,
    channels: usize,
}

fn parse_meta(text: &str) -> Result<Meta> {
    let mut kv = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| data_err(META_FILE, i as u64 + 1, "expected key=value"))?;
        let k = k.trim();
        if !matches!(k, "interval_minutes" | "start_time" | "layout" | "rows" | "cols" | "channels") {
            return Err(data_err(META_FILE, i as u64 + 1, format!("unknown key {k:?}")));
        }
        kv.insert(k.to_string(), (i as u64 + 1, v.trim().to_string()));
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Data(format!("{META_FILE}: missing {k}")));
    let num = |k: &str| -> Result<usize> {
        let (line, v) = get(k)?;
        v.parse()
            .map_err(|_| data_err(META_FILE, *line, format!("{k} must be a non-negative integer, got {v:?}")))
    };
    let (line, start) = get("start_time")?;
    let start = NaiveDateTime::parse_from_str(start, TIME_FORMAT)
        .map_err(|e| data_err(META_FILE, *line, format!("start_time: {e}")))?;
    let (line, layout) = get("layout")?;
    let layout = match layout.as_str() {
        "graph" => Layout::Graph,
        "grid" => Layout::Grid {
            rows: num("rows")?,
            cols: num("cols")?,
        },
        other => return Err(data_err(META_FILE, *line, format!("layout must be graph or grid, got {other:?}"))),
    };
    let interval = num("interval_minutes")?;
    let channels = num("channels")?;
    if interval == 0 || channels == 0 {
        return Err(Error::Data(format!("{META_FILE}: interval_minutes and channels must be positive")));
    }
    Ok(Meta {
        interval: u32::try_from(interval).map_err(|_| Error::Data(format!("{META_FILE}: interval too large")))?,
        start,
        layout,
        channels,
    })
}

fn reader(dir: &Path, file: &str) -> Result<csv::Reader<std::io::Cursor<Vec<u8>>>> {
    let bytes = fsutil::read(&dir.join(file))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(std::io::Cursor::new(bytes)))
}

/// Header plus each record with its line number.
type Records = (Vec<String>, Vec<(u64, csv::StringRecord)>);

/// Parse every record of `file`, passing its line number along.
fn records(dir: &Path, file: &str) -> Result<Records> {
    let mut r = reader(dir, file)?;
    let header = r
        .headers()
        .map_err(|e| Error::Data(format!("{file}: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_err(file, line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec));
    }
    Ok((header, out))
}

fn field<T: std::str::FromStr>(file: &str, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| data_err(file, line, format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| data_err(file, line, format!("cannot parse {name} from {raw:?}")))
}

/// Read a bundle directory, validating it against its meta file.
///
/// Flow rows must be ordered by step with no gaps; a node absent at some
/// step is recorded as missing (`NaN`).
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let meta = parse_meta(&fsutil::read_string(&dir.join(META_FILE))?)?;

    let (header, rows) = records(dir, NODES_FILE)?;
    let mut node_ids = Vec::with_capacity(rows.len());
    let mut coords = Vec::new();
    let has_coords = header.len() >= 3;
    for (line, rec) in &rows {
        let id: u64 = field(NODES_FILE, *line, rec, 0, "node_id")?;
        if node_ids.contains(&id) {
            return Err(data_err(NODES_FILE, *line, format!("duplicate node id {id}")));
        }
        match meta.layout {
            Layout::Grid { cols, .. } => {
                let (r, c): (usize, usize) = (
                    field(NODES_FILE, *line, rec, 1, "row")?,
                    field(NODES_FILE, *line, rec, 2, "col")?,
                );
                if cols == 0 || r * cols + c != node_ids.len() || c >= cols {
                    return Err(data_err(NODES_FILE, *line, "grid nodes must be listed in row-major order"));
                }
            }
            Layout::Graph if has_coords => coords.push((
                field(NODES_FILE, *line, rec, 1, "lat")?,
                field(NODES_FILE, *line, rec, 2, "lon")?,
            )),
            Layout::Graph => {}
        }
        node_ids.push(id);
    }
    let index: HashMap<u64, usize> = node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = node_ids.len();
    let lookup = |file: &str, line: u64, id: u64| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| data_err(file, line, format!("unknown node {id} (bundle has {n} nodes)")))
    };

    let (_, rows) = records(dir, EDGES_FILE)?;
    let mut edges = Vec::with_capacity(rows.len());
    for (line, rec) in &rows {
        edges.push(Edge {
            src: lookup(EDGES_FILE, *line, field(EDGES_FILE, *line, rec, 0, "src")?)?,
            dst: lookup(EDGES_FILE, *line, field(EDGES_FILE, *line, rec, 1, "dst")?)?,
            cost: field(EDGES_FILE, *line, rec, 2, "cost")?,
        });
    }
    let network = RoadNetwork::new(n, edges, meta.layout)?;

    let (header, rows) = records(dir, FLOW_FILE)?;
    let c = meta.channels;
    if header.len() != c + 2 {
        return Err(data_err(
            FLOW_FILE,
            1,
            format!("expected step, node_id and {c} channel columns, got {} columns", header.len()),
        ));
    }
    let mut data: Vec<f64> = Vec::new();
    let mut seen: Vec<bool> = Vec::new();
    let mut last_step: Option<usize> = None;
    for (line, rec) in &rows {
        if rec.len() != c + 2 {
            return Err(data_err(FLOW_FILE, *line, format!("expected {} fields, got {}", c + 2, rec.len())));
        }
        let step: usize = field(FLOW_FILE, *line, rec, 0, "step")?;
        let node = lookup(FLOW_FILE, *line, field(FLOW_FILE, *line, rec, 1, "node_id")?)?;
        let expected = last_step.map_or(0, |s| s + 1);
        match last_step {
            Some(s) if step == s => {}
            _ if step == expected => {
                data.resize((step + 1) * n * c, f64::NAN);
                seen.resize((step + 1) * n, false);
                last_step = Some(step);
            }
            _ => {
                return Err(data_err(
                    FLOW_FILE,
                    *line,
                    format!("step {step} breaks the contiguous sequence (expected {expected})"),
                ))
            }
        }
        let slot = step * n + node;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(data_err(FLOW_FILE, *line, format!("duplicate reading for step {step}, node {}", node_ids[node])));
        }
        for k in 0..c {
            data[slot * c + k] = field(FLOW_FILE, *line, rec, k + 2, "flow value")?;
        }
    }
    let steps = last_step.map_or(0, |s| s + 1);
    if steps == 0 {
        return Err(Error::Data(format!("{FLOW_FILE}: no readings")));
    }
    let missing = seen.iter().filter(|&&s| !s).count();
    if missing > 0 {
        log::warn!("{missing} (step, node) readings absent from {FLOW_FILE}; treated as missing");
    }
    let series = TrafficTensor::new(Tensor::new(&[steps, n, c], data)?, meta.interval, meta.start)?;
    Ok(Bundle {
        network,
        series,
        node_ids,
        coords: (has_coords && meta.layout == Layout::Graph).then_some(coords),
    })
}
