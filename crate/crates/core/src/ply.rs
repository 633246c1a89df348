//! PLY export and import of activated Gaussian attributes, one file per frame.
//!
//! Vertex properties: `x y z quat_w quat_x quat_y quat_z scale_x scale_y
//! scale_z` (float), `red green blue` (uchar), `opacity` (float). Scales are
//! positive extents and opacity lies in `(0, 1)`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussians::{COLOR, D, OPACITY};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

const FLOAT_PROPS: [&str; 10] = ["x", "y", "z", "quat_w", "quat_x", "quat_y", "quat_z", "scale_x", "scale_y", "scale_z"];
const COLOR_PROPS: [&str; 3] = ["red", "green", "blue"];

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ply(out: &mut impl Write, attrs: &Tensor, format: PlyFormat) -> Result<()> {
    if attrs.rank() != 2 || attrs.shape()[1] != D {
        return Err(Error::Dimension(format!("PLY export expects [N, {D}], got {:?}", attrs.shape())));
    }
    let n = attrs.shape()[0];
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut header = format!("ply\nformat {fmt} 1.0\nelement vertex {n}\n");
    for p in FLOAT_PROPS {
        header.push_str(&format!("property float {p}\n"));
    }
    for p in COLOR_PROPS {
        header.push_str(&format!("property uchar {p}\n"));
    }
    header.push_str("property float opacity\nend_header\n");
    out.write_all(header.as_bytes())?;
    for row in attrs.data().chunks(D) {
        match format {
            PlyFormat::Ascii => {
                let mut line: Vec<String> = row[..10].iter().map(|v| format!("{}", *v as f32)).collect();
                line.extend((0..3).map(|k| to_u8(row[COLOR + k]).to_string()));
                line.push(format!("{}", row[OPACITY] as f32));
                writeln!(out, "{}", line.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                let mut buf = Vec::with_capacity(47);
                for v in &row[..10] {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                buf.extend((0..3).map(|k| to_u8(row[COLOR + k])));
                buf.extend_from_slice(&(row[OPACITY] as f32).to_le_bytes());
                out.write_all(&buf)?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }
}

/// Reads a Gaussian PLY written by [`write_ply`] (property order may vary).
pub fn read_ply(input: impl Read, source: &Path) -> Result<Tensor> {
    let perr = |m: String| Error::Parse { path: source.to_path_buf(), message: m };
    let mut r = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(perr("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(perr("missing `ply` magic".into()));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next_line(&mut r)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", f, _] => return Err(perr(format!("unsupported format {f}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| perr(e.to_string()))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => return Err(perr("list properties are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| perr(format!("unknown type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(perr(format!("malformed header line `{l}`"))),
        }
    }
    let format = format.ok_or_else(|| perr("missing format line".into()))?;
    let n = count.ok_or_else(|| perr("missing vertex element".into()))?;
    let names: Vec<&str> = FLOAT_PROPS.iter().chain(&COLOR_PROPS).chain(&["opacity"]).copied().collect();
    let mut column = Vec::with_capacity(D);
    for name in &names {
        let idx = props.iter().position(|(p, _)| p == name).ok_or_else(|| perr(format!("missing property {name}")))?;
        column.push(idx);
    }
    let mut values = vec![0.0; props.len()];
    let mut out = Vec::with_capacity(n * D);
    let mut text = String::new();
    for v in 0..n {
        match format {
            PlyFormat::Ascii => {
                text.clear();
                if r.read_line(&mut text)? == 0 {
                    return Err(perr(format!("expected {n} vertices, found {v}")));
                }
                let toks: Vec<&str> = text.split_whitespace().collect();
                if toks.len() != props.len() {
                    return Err(perr(format!("vertex {v} has {} values", toks.len())));
                }
                for (slot, t) in values.iter_mut().zip(toks) {
                    *slot = t.parse::<f64>().map_err(|e| perr(format!("vertex {v}: {e}")))?;
                }
            }
            PlyFormat::BinaryLittleEndian => {
                for (slot, (_, s)) in values.iter_mut().zip(&props) {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b[..s.size()]).map_err(|_| perr(format!("truncated vertex {v}")))?;
                    *slot = s.read_le(&b);
                }
            }
        }
        for (k, &c) in column.iter().enumerate() {
            let val = values[c];
            let is_color = (COLOR..COLOR + 3).contains(&k);
            out.push(if is_color && props[c].1.is_integer() { val / 255.0 } else { val });
        }
    }
    Tensor::new([n, D], out)
}

pub fn frame_name(t: usize, ext: &str) -> String {
    format!("frame_{t:04}.{ext}")
}

pub fn save_ply(path: impl AsRef<Path>, attrs: &Tensor, format: PlyFormat) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ply(&mut w, attrs, format)?;
    w.flush()?;
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    read_ply(std::fs::File::open(path)?, path)
}

/// Loads every `frame_NNNN.ply` of a directory in frame order.
pub fn load_ply_dir(dir: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let mut files: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "ply")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("frame_"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no frame_*.ply files in {}", dir.as_ref().display())));
    }
    files.iter().map(load_ply).collect()
}
