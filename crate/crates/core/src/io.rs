//! Point cloud serialization.
//!
//! CSV: one point per line, `x,y,z[,f1..fd]`, no header.
//! Binary: magic `PCLD`, `u32` point count, `u32` feature width, then the
//! `N·(3+d)` row-major values as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::pointops::PointCloud;

const PCLD_MAGIC: &[u8; 4] = b"PCLD";

fn rows(cloud: &PointCloud) -> impl Iterator<Item = Vec<f64>> + '_ {
    (0..cloud.len()).map(move |i| {
        let mut row: Vec<f64> = cloud.positions().row(i).to_vec();
        if let Some(f) = cloud.features() {
            row.extend(f.row(i).iter());
        }
        row
    })
}

fn split(data: Vec<f64>, n: usize, width: usize) -> Result<PointCloud> {
    if width < 3 {
        return Err(Error::Format(format!("rows need at least 3 values, got {width}")));
    }
    let all = Array2::from_shape_vec((n, width), data).map_err(|e| Error::Format(e.to_string()))?;
    let positions = all.slice(s![.., ..3]).to_owned();
    let features = (width > 3).then(|| all.slice(s![.., 3..]).to_owned());
    PointCloud::new(positions, features)
}

pub fn write_csv<W: Write>(w: W, cloud: &PointCloud) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in rows(cloud) {
        out.write_record(row.iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<PointCloud> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut data = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Format(format!("line {}: ragged row", line + 1)));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad number `{field}`", line + 1)))?;
            data.push(v);
        }
        n += 1;
    }
    split(data, n, width.unwrap_or(0))
}

pub fn write_pcld<W: Write>(mut w: W, cloud: &PointCloud) -> Result<()> {
    w.write_all(PCLD_MAGIC)?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    w.write_all(&(cloud.feature_dim() as u32).to_le_bytes())?;
    for row in rows(cloud) {
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pcld<R: Read>(mut r: R) -> Result<PointCloud> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != PCLD_MAGIC {
        return Err(Error::Format("bad PCLD magic".into()));
    }
    let n = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; n * (3 + d) * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    split(data, n, 3 + d)
}

/// Read a cloud, choosing the format by extension (`.csv` or anything else as PCLD).
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    if path.extension().is_some_and(|e| e == "csv") {
        read_csv(file)
    } else {
        read_pcld(file)
    }
}

pub fn save_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "csv") {
        write_csv(&mut buf, cloud)?;
    } else {
        write_pcld(&mut buf, cloud)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}
