//! On-disk formats: Wavefront OBJ (positions, UVs, triangles), versioned
//! JSON documents and PFM float images.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::render::Mesh;
use crate::{Error, Image, Result, Vec2, Vec3};

pub const FORMAT_VERSION: u32 = 1;

/// JSON envelope carrying a format version and a kind tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document<T> {
    pub version: u32,
    pub kind: String,
    pub data: T,
}

pub fn to_json<T: Serialize>(kind: &str, data: &T) -> Result<String> {
    let doc = Document {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        data,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let doc: Document<T> = serde_json::from_str(text)?;
    if doc.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: doc.version,
            expected: FORMAT_VERSION,
        });
    }
    if doc.kind != kind {
        return Err(Error::Parse(format!("expected a {kind} document, found {}", doc.kind)));
    }
    Ok(doc.data)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, kind: &str, data: &T) -> Result<()> {
    fs::write(path, to_json(kind, data)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<T> {
    from_json(kind, &fs::read_to_string(path)?)
}

/// OBJ with one `vt` per `v` and `f a/a b/b c/c` faces.
pub fn write_obj(mesh: &Mesh, mut out: impl Write) -> Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.uvs {
        // OBJ texture v grows upwards
        writeln!(out, "vt {} {}", t.x, 1.0 - t.y)?;
    }
    for f in &mesh.triangles {
        writeln!(out, "f {0}/{0} {1}/{1} {2}/{2}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

fn parse_floats<const N: usize>(parts: &[&str], line_no: usize) -> Result<[f64; N]> {
    if parts.len() < N {
        return Err(Error::Parse(format!("line {line_no}: expected {N} numbers")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| Error::Parse(format!("line {line_no}: bad number {p:?}")))?;
    }
    Ok(out)
}

/// Reads the subset written by [`write_obj`]. Faces with more than three
/// corners are fanned; UVs are matched to vertices by the face indices.
pub fn read_obj(input: impl Read) -> Result<Mesh> {
    let mut positions = Vec::new();
    let mut texcoords = Vec::new();
    let mut faces: Vec<Vec<(usize, Option<usize>)>> = Vec::new();
    for (no, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(tag) = parts.next() else {
            continue;
        };
        let rest: Vec<&str> = parts.collect();
        match tag {
            "v" => {
                let [x, y, z] = parse_floats::<3>(&rest, no + 1)?;
                positions.push(Vec3::new(x, y, z));
            }
            "vt" => {
                let [u, v] = parse_floats::<2>(&rest, no + 1)?;
                texcoords.push(Vec2::new(u, 1.0 - v));
            }
            "f" => {
                let corners = rest
                    .iter()
                    .map(|c| {
                        let mut it = c.split('/');
                        let parse = |s: Option<&str>| -> Result<Option<usize>> {
                            match s {
                                None | Some("") => Ok(None),
                                Some(s) => s
                                    .parse::<usize>()
                                    .ok()
                                    .filter(|&i| i > 0)
                                    .map(|i| Some(i - 1))
                                    .ok_or_else(|| Error::Parse(format!("line {}: bad index {s:?}", no + 1))),
                            }
                        };
                        let v = parse(it.next())?.ok_or_else(|| Error::Parse(format!("line {}: empty face corner", no + 1)))?;
                        Ok((v, parse(it.next())?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if corners.len() < 3 {
                    return Err(Error::Parse(format!("line {}: face with < 3 corners", no + 1)));
                }
                faces.push(corners);
            }
            _ => {}
        }
    }
    let mut uvs = vec![Vec2::zeros(); positions.len()];
    let mut triangles = Vec::new();
    for face in &faces {
        for &(v, t) in face {
            if v >= positions.len() {
                return Err(Error::Parse(format!("face index {} out of range", v + 1)));
            }
            if let Some(t) = t {
                uvs[v] = *texcoords
                    .get(t)
                    .ok_or_else(|| Error::Parse(format!("uv index {} out of range", t + 1)))?;
            }
        }
        for k in 1..face.len() - 1 {
            triangles.push([face[0].0, face[k].0, face[k + 1].0]);
        }
    }
    Ok(Mesh {
        vertices: positions,
        triangles,
        uvs,
    })
}

/// Little-endian color PFM, rows stored bottom to top.
pub fn write_pfm(image: &Image, mut out: impl Write) -> Result<()> {
    write!(out, "PF\n{} {}\n-1.0\n", image.width, image.height)?;
    for y in (0..image.height).rev() {
        for x in 0..image.width {
            for c in image.get(x, y) {
                out.write_all(&(c as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_pfm(mut input: impl Read) -> Result<Image> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PFM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "PF" {
        return Err(Error::Parse("only color PFM is supported".into()));
    }
    let width: usize = fields[1].parse().map_err(|_| Error::Parse("bad PFM width".into()))?;
    let height: usize = fields[2].parse().map_err(|_| Error::Parse("bad PFM height".into()))?;
    let scale: f64 = fields[3].parse().map_err(|_| Error::Parse("bad PFM scale".into()))?;
    let data = &bytes[pos.min(bytes.len())..];
    if data.len() < width * height * 12 {
        return Err(Error::Parse("truncated PFM data".into()));
    }
    let read = |i: usize| {
        let b = [data[4 * i], data[4 * i + 1], data[4 * i + 2], data[4 * i + 3]];
        (if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
    };
    let mut img = Image::new(width, height);
    for row in 0..height {
        let y = height - 1 - row;
        for x in 0..width {
            let i = 3 * (row * width + x);
            img.set(x, y, [read(i), read(i + 1), read(i + 2)]);
        }
    }
    Ok(img)
}
