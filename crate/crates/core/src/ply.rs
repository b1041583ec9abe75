//! Binary little-endian PLY storage for splat maps.
//!
//! Vertex properties, all float32: x y z red green blue radius opacity,
//! colors in [0, 1].

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianMap};

const PROPS: [&str; 8] = ["x", "y", "z", "red", "green", "blue", "radius", "opacity"];

pub fn write_ply<W: Write>(map: &GaussianMap, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", map.len())?;
    for p in PROPS {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "end_header")?;
    for g in map.gaussians() {
        let vals = [
            g.center.x, g.center.y, g.center.z, g.color[0], g.color[1], g.color[2], g.radius, g.opacity,
        ];
        for v in vals {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_ply(map: &GaussianMap, path: &Path) -> Result<()> {
    write_ply(map, std::fs::File::create(path)?)
}

pub fn read_ply<R: Read>(input: R) -> Result<GaussianMap> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Ply("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(Error::Ply("missing magic".into()));
    }
    if next_line(&mut r)? != "format binary_little_endian 1.0" {
        return Err(Error::Ply("only binary_little_endian 1.0 is supported".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| Error::Ply(format!("bad vertex count: {e}")))?)
            }
            ["property", "float", name] => props.push(name.to_string()),
            _ => return Err(Error::Ply(format!("unsupported header line `{l}`"))),
        }
    }
    if props != PROPS {
        return Err(Error::Ply(format!("expected properties {PROPS:?}, found {props:?}")));
    }
    let n = count.ok_or_else(|| Error::Ply("no vertex element".into()))?;
    let mut buf = vec![0u8; n * PROPS.len() * 4];
    r.read_exact(&mut buf).map_err(|e| Error::Ply(format!("truncated body: {e}")))?;
    let mut map = GaussianMap::new();
    for rec in buf.chunks_exact(PROPS.len() * 4) {
        let v: Vec<f64> =
            rec.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        map.push(Gaussian::new([v[3], v[4], v[5]], Vector3::new(v[0], v[1], v[2]), v[6], v[7]))
            .map_err(|e| Error::Ply(e.to_string()))?;
    }
    Ok(map)
}

pub fn load_ply(path: &Path) -> Result<GaussianMap> {
    read_ply(std::fs::File::open(path)?)
}

/// The map after a PLY round trip (float32 quantization).
pub fn quantized(map: &GaussianMap) -> Result<GaussianMap> {
    let mut bytes = Vec::new();
    write_ply(map, &mut bytes)?;
    read_ply(bytes.as_slice())
}
