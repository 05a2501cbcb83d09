//! Plain-text artifact formats: CSV tables and self-describing matrix files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::dataset::TrainingDataset;
use crate::error::{Error, Result};
use crate::network::{transpose, TrainTrajectory, TwoLayerReluNet};

/// Shortest round-trip representation.
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn dataset_csv(ds: &TrainingDataset) -> String {
    let d = ds.dim();
    let mut s = String::from("t");
    for i in 0..d {
        let _ = write!(s, ",x0_{i}");
    }
    for i in 0..d {
        let _ = write!(s, ",xt_{i}");
    }
    s.push('\n');
    for e in ds.entries() {
        s.push_str(&num(e.t));
        for v in e.x0.iter().chain(&e.xt) {
            s.push(',');
            s.push_str(&num(*v));
        }
        s.push('\n');
    }
    s
}

pub fn trajectory_csv(traj: &TrainTrajectory) -> String {
    let mut s = String::from("iter,loss,max_weight_move,flip_count\n");
    for k in 0..traj.losses.len() {
        let _ = writeln!(
            s,
            "{k},{},{},{}",
            num(traj.losses[k]),
            num(traj.max_weight_move[k]),
            traj.flip_counts[k]
        );
    }
    s
}

/// Rows of points, one per line.
pub fn points_csv(points: &[Vec<f64>]) -> String {
    let d = points.first().map_or(0, |p| p.len());
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    let mut s = header.join(",");
    s.push('\n');
    for p in points {
        let row: Vec<String> = p.iter().map(|v| num(*v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Matrix file: `#`-prefixed `key=value` header lines, then one row per line.
pub fn matrix_text(m: &DMatrix<f64>, header: &[(&str, String)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# rows={}", m.nrows());
    let _ = writeln!(s, "# cols={}", m.ncols());
    for (k, v) in header {
        let _ = writeln!(s, "# {k}={v}");
    }
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| num(*v)).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Parses [`matrix_text`] output, returning the matrix and header pairs.
pub fn parse_matrix_text(text: &str) -> Result<(DMatrix<f64>, Vec<(String, String)>)> {
    let mut header = Vec::new();
    let mut values = Vec::new();
    let mut ncols = None;
    for line in text.lines() {
        if let Some(h) = line.strip_prefix('#') {
            if let Some((k, v)) = h.trim().split_once('=') {
                header.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let row = row.map_err(|e| Error::Config(format!("bad matrix entry: {e}")))?;
        match ncols {
            None => ncols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::DimensionMismatch {
                    expected: c,
                    got: row.len(),
                })
            }
            _ => {}
        }
        values.extend(row);
    }
    let c = ncols.unwrap_or(0);
    let r = if c == 0 { 0 } else { values.len() / c };
    Ok((DMatrix::from_row_slice(r, c, &values), header))
}

/// Net snapshot: header `(m, d, t0, seed)` followed by the current first
/// layer, the signs and the initial first layer, each `m` rows.
pub fn net_snapshot(net: &TwoLayerReluNet) -> String {
    let m = net.width();
    let mut s = String::new();
    let _ = writeln!(s, "# m={m}");
    let _ = writeln!(s, "# d={}", net.dim());
    let _ = writeln!(s, "# t0={}", num(net.t0()));
    let _ = writeln!(s, "# seed={}", net.seed().map_or("none".to_string(), |v| v.to_string()));
    let blocks: [(&str, &dyn Fn(usize) -> Vec<f64>); 3] = [
        ("w", &|r| net.neuron_weights(r)),
        ("a", &|r| net.neuron_signs(r)),
        ("w_init", &|r| net.initial_neuron_weights(r)),
    ];
    for (label, row_of) in blocks {
        let _ = writeln!(s, "# block={label}");
        for r in 0..m {
            let row: Vec<String> = row_of(r).iter().map(|v| num(*v)).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    s
}

/// Restores a net written by [`net_snapshot`].
pub fn parse_net_snapshot(text: &str) -> Result<TwoLayerReluNet> {
    let mut meta = std::collections::HashMap::new();
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if let Some(h) = line.strip_prefix('#') {
            if let Some((k, v)) = h.trim().split_once('=') {
                if k == "block" {
                    blocks.push(Vec::new());
                } else {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
            continue;
        }
        let cur = blocks
            .last_mut()
            .ok_or_else(|| Error::Config("snapshot data before first block".into()))?;
        for tok in line.split_whitespace() {
            cur.push(tok.parse().map_err(|e| Error::Config(format!("bad snapshot entry: {e}")))?);
        }
    }
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Config(format!("snapshot missing header `{k}`")))
    };
    let d: usize = get("d")?.parse().map_err(|_| Error::Config("bad `d`".into()))?;
    let t0: f64 = get("t0")?.parse().map_err(|_| Error::Config("bad `t0`".into()))?;
    let seed = get("seed")?.parse::<u64>().ok();
    if blocks.len() != 3 {
        return Err(Error::Config("snapshot needs blocks w, a, w_init".into()));
    }
    let w_init = blocks.pop().unwrap();
    let a = blocks.pop().unwrap();
    let w = blocks.pop().unwrap();
    let mut net = TwoLayerReluNet::from_parts(d, t0, w_init, a)?;
    net.set_weights(transpose(&w, net.width(), d + 1))?;
    Ok(match seed {
        Some(s) => net.with_seed(s),
        None => net,
    })
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}
