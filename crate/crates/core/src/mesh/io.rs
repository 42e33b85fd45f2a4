//! Mesh file I/O: Wavefront OBJ and PLY (ASCII + binary little-endian).
//!
//! Coordinates are stored at float32 precision in all supported formats;
//! text writers print the shortest representation that round-trips f32.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::mesh::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
    PlyBinary,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<MeshFormat> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::PlyBinary),
            other => Err(CoreError::parse(
                path,
                format!("unsupported mesh extension {other:?} (expected .obj or .ply)"),
            )),
        }
    }
}

/// Load a mesh from an OBJ or PLY file, dispatching on the extension.
/// Vertex order is preserved from the file.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    match MeshFormat::from_path(path)? {
        MeshFormat::Obj => load_obj(path),
        _ => load_ply(path),
    }
}

/// Save a mesh; PLY defaults to binary little-endian unless `MeshFormat::PlyAscii`.
pub fn save_mesh(path: impl AsRef<Path>, mesh: &Mesh, format: MeshFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        MeshFormat::Obj => save_obj(path, mesh),
        MeshFormat::PlyAscii => save_ply(path, mesh, false),
        MeshFormat::PlyBinary => save_ply(path, mesh, true),
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| CoreError::io(path, e))
}

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(path, e))?;
        }
    }
    std::fs::File::create(path).map_err(|e| CoreError::io(path, e))
}

// ---------------------------------------------------------------- OBJ

pub fn load_obj(path: &Path) -> Result<Mesh> {
    let reader = BufReader::new(open(path)?);
    let mut verts: Vec<[f32; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0f32; 3];
                for c in &mut coords {
                    let tok = tokens.next().ok_or_else(|| {
                        CoreError::parse(path, format!("line {}: short vertex record", lineno + 1))
                    })?;
                    *c = tok.parse::<f32>().map_err(|_| {
                        CoreError::parse(path, format!("line {}: bad coordinate {tok:?}", lineno + 1))
                    })?;
                }
                verts.push(coords);
            }
            Some("f") => {
                let idx: Vec<usize> = tokens
                    .map(|tok| parse_obj_index(tok, verts.len(), path, lineno))
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(CoreError::parse(
                        path,
                        format!("line {}: face with fewer than 3 vertices", lineno + 1),
                    ));
                }
                // fan-triangulate polygons
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {} // comments, normals, texcoords, groups: ignored
        }
    }
    build_mesh(path, verts, faces)
}

fn parse_obj_index(tok: &str, n_so_far: usize, path: &Path, lineno: usize) -> Result<usize> {
    let first = tok.split('/').next().unwrap_or(tok);
    let raw: i64 = first.parse().map_err(|_| {
        CoreError::parse(path, format!("line {}: bad face index {tok:?}", lineno + 1))
    })?;
    // OBJ indices are 1-based; negative indices are relative to the current count
    let zero_based = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        n_so_far as i64 + raw
    } else {
        return Err(CoreError::parse(
            path,
            format!("line {}: face index 0 is invalid in OBJ", lineno + 1),
        ));
    };
    if zero_based < 0 {
        return Err(CoreError::parse(
            path,
            format!("line {}: face index {raw} out of range", lineno + 1),
        ));
    }
    Ok(zero_based as usize)
}

fn save_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    let io_err = |e| CoreError::io(path, e);
    for i in 0..mesh.n_vertices() {
        let p = mesh.vertex(i);
        writeln!(w, "v {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32).map_err(io_err)?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io_err)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(name: &str) -> Option<PlyType> {
        Some(match name {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read_f64(self, buf: &[u8]) -> f64 {
        match self {
            PlyType::I8 => buf[0] as i8 as f64,
            PlyType::U8 => buf[0] as f64,
            PlyType::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            PlyType::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            PlyType::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            PlyType::F64 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar { name: String, ty: PlyType },
    List { name: String, count_ty: PlyType, item_ty: PlyType },
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

pub fn load_ply(path: &Path) -> Result<Mesh> {
    let mut reader = BufReader::new(open(path)?);
    let mut header = Vec::new();
    // read header line by line (header is always ASCII, terminated by end_header)
    loop {
        let mut line = String::new();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| CoreError::io(path, e))?;
        if n == 0 {
            return Err(CoreError::parse(path, "unexpected EOF in PLY header"));
        }
        let trimmed = line.trim_end().to_string();
        if trimmed == "end_header" {
            break;
        }
        header.push(trimmed);
    }
    if header.first().map(String::as_str) != Some("ply") {
        return Err(CoreError::parse(path, "missing 'ply' magic"));
    }
    let mut binary = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in &header[1..] {
        let mut t = line.split_whitespace();
        match t.next() {
            Some("format") => match t.next() {
                Some("ascii") => binary = Some(false),
                Some("binary_little_endian") => binary = Some(true),
                other => {
                    return Err(CoreError::parse(
                        path,
                        format!("unsupported PLY format {other:?}"),
                    ))
                }
            },
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = t.next().unwrap_or("").to_string();
                let count: usize = t
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| CoreError::parse(path, "bad element count"))?;
                elements.push(PlyElement {
                    name,
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| CoreError::parse(path, "property before element"))?;
                let first = t.next().unwrap_or("");
                if first == "list" {
                    let count_ty = PlyType::parse(t.next().unwrap_or(""))
                        .ok_or_else(|| CoreError::parse(path, "bad list count type"))?;
                    let item_ty = PlyType::parse(t.next().unwrap_or(""))
                        .ok_or_else(|| CoreError::parse(path, "bad list item type"))?;
                    let name = t.next().unwrap_or("").to_string();
                    elem.props.push(PlyProperty::List {
                        name,
                        count_ty,
                        item_ty,
                    });
                } else {
                    let ty = PlyType::parse(first)
                        .ok_or_else(|| CoreError::parse(path, format!("bad type {first:?}")))?;
                    let name = t.next().unwrap_or("").to_string();
                    elem.props.push(PlyProperty::Scalar { name, ty });
                }
            }
            _ => {}
        }
    }
    let binary =
        binary.ok_or_else(|| CoreError::parse(path, "PLY header missing format line"))?;

    let mut verts: Vec<[f32; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for elem in &elements {
        let is_vertex = elem.name == "vertex";
        let is_face = elem.name == "face";
        for _ in 0..elem.count {
            let mut xyz = [0f64; 3];
            let mut indices: Vec<usize> = Vec::new();
            for prop in &elem.props {
                match prop {
                    PlyProperty::Scalar { name, ty } => {
                        let v = if binary {
                            let mut buf = [0u8; 8];
                            reader
                                .read_exact(&mut buf[..ty.size()])
                                .map_err(|e| CoreError::io(path, e))?;
                            ty.read_f64(&buf)
                        } else {
                            read_ascii_value(&mut reader, path)?
                        };
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            _ => {}
                        }
                    }
                    PlyProperty::List { name, count_ty, item_ty } => {
                        let count = if binary {
                            let mut buf = [0u8; 8];
                            reader
                                .read_exact(&mut buf[..count_ty.size()])
                                .map_err(|e| CoreError::io(path, e))?;
                            count_ty.read_f64(&buf) as usize
                        } else {
                            read_ascii_value(&mut reader, path)? as usize
                        };
                        let mut items = Vec::with_capacity(count);
                        for _ in 0..count {
                            let v = if binary {
                                let mut buf = [0u8; 8];
                                reader
                                    .read_exact(&mut buf[..item_ty.size()])
                                    .map_err(|e| CoreError::io(path, e))?;
                                item_ty.read_f64(&buf)
                            } else {
                                read_ascii_value(&mut reader, path)?
                            };
                            items.push(v);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            if items.iter().any(|&v| v < 0.0) {
                                return Err(CoreError::parse(path, "negative face index"));
                            }
                            indices = items.iter().map(|&v| v as usize).collect();
                        }
                    }
                }
            }
            if is_vertex {
                verts.push([xyz[0] as f32, xyz[1] as f32, xyz[2] as f32]);
            }
            if is_face && !indices.is_empty() {
                if indices.len() < 3 {
                    return Err(CoreError::parse(path, "face with fewer than 3 vertices"));
                }
                for k in 1..indices.len() - 1 {
                    faces.push([indices[0], indices[k], indices[k + 1]]);
                }
            }
        }
    }
    build_mesh(path, verts, faces)
}

/// Pull the next whitespace-separated ASCII token and parse it as f64.
fn read_ascii_value<R: BufRead>(reader: &mut R, path: &Path) -> Result<f64> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read(&mut byte).map_err(|e| CoreError::io(path, e))? {
            0 => {
                if tok.is_empty() {
                    return Err(CoreError::parse(path, "unexpected EOF in PLY body"));
                }
                break;
            }
            _ => {
                if byte[0].is_ascii_whitespace() {
                    if !tok.is_empty() {
                        break;
                    }
                } else {
                    tok.push(byte[0]);
                }
            }
        }
    }
    let s = std::str::from_utf8(&tok)
        .map_err(|_| CoreError::parse(path, "non-UTF8 token in PLY body"))?;
    s.parse::<f64>()
        .map_err(|_| CoreError::parse(path, format!("bad numeric token {s:?}")))
}

fn save_ply(path: &Path, mesh: &Mesh, binary: bool) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    let io_err = |e| CoreError::io(path, e);
    let format = if binary { "binary_little_endian" } else { "ascii" };
    write!(
        w,
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.n_vertices(),
        mesh.n_faces()
    )
    .map_err(io_err)?;
    if binary {
        for i in 0..mesh.n_vertices() {
            let p = mesh.vertex(i);
            for c in p {
                w.write_all(&(c as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        for f in mesh.faces() {
            w.write_all(&[3u8]).map_err(io_err)?;
            for &v in f {
                w.write_all(&(v as i32).to_le_bytes()).map_err(io_err)?;
            }
        }
    } else {
        for i in 0..mesh.n_vertices() {
            let p = mesh.vertex(i);
            writeln!(w, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32).map_err(io_err)?;
        }
        for f in mesh.faces() {
            writeln!(w, "3 {} {} {}", f[0], f[1], f[2]).map_err(io_err)?;
        }
    }
    Ok(())
}

fn build_mesh(path: &Path, verts: Vec<[f32; 3]>, faces: Vec<[usize; 3]>) -> Result<Mesh> {
    let mut arr = Array2::zeros((verts.len(), 3));
    for (i, v) in verts.iter().enumerate() {
        arr[(i, 0)] = v[0] as f64;
        arr[(i, 1)] = v[1] as f64;
        arr[(i, 2)] = v[2] as f64;
    }
    Mesh::new(arr, faces).map_err(|e| match e {
        CoreError::Validation(msg) => CoreError::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}
