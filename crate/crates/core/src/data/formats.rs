use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use super::{Categories, DataError, LabelMap, StabilityMap};
use crate::autodiff::Tensor;
use crate::binio::{parse_key_values, put_f32s, put_u32, Cursor, DecodeError};
use crate::evaluation::{Pose, Trajectory};
use crate::network::ActivationMap;
use crate::selection::{Descriptors, Keypoint};

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn decode_at<T>(path: &Path, r: Result<T, DecodeError>) -> Result<T, DataError> {
    r.map_err(|source| DataError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn decode_fail<T>(offset: usize, message: impl Into<String>) -> Result<T, DecodeError> {
    Err(DecodeError {
        offset,
        message: message.into(),
    })
}

// ---------------------------------------------------------------- netpbm

/// A decoded binary netpbm image (`P5` gray or `P6` RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode_netpbm(img: &Netpbm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn header_number(buf: &[u8], pos: &mut usize, end: u8) -> Result<usize, DecodeError> {
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
    }
    let digits = &buf[start..*pos];
    if digits.is_empty() || digits.len() > 9 || (digits.len() > 1 && digits[0] == b'0') {
        return decode_fail(start, "malformed header number");
    }
    if buf.get(*pos) != Some(&end) {
        return decode_fail(*pos, format!("expected {:?} after header number", end as char));
    }
    *pos += 1;
    Ok(std::str::from_utf8(digits)
        .expect("ascii digits")
        .parse()
        .expect("at most nine digits"))
}

/// Reads the canonical header `P5\n<w> <h>\n<maxval>\n` (or `P6`), with
/// optional `#` comment lines after the magic line.
pub fn decode_netpbm(buf: &[u8]) -> Result<Netpbm, DecodeError> {
    let channels = match buf.get(..3) {
        Some(b"P5\n") => 1,
        Some(b"P6\n") => 3,
        _ => return decode_fail(0, "expected P5 or P6 magic line"),
    };
    let mut pos = 3;
    while buf.get(pos) == Some(&b'#') {
        match buf[pos..].iter().position(|b| *b == b'\n') {
            Some(n) => pos += n + 1,
            None => return decode_fail(pos, "unterminated comment"),
        }
    }
    let width = header_number(buf, &mut pos, b' ')?;
    let height = header_number(buf, &mut pos, b'\n')?;
    let maxval_at = pos;
    let maxval = header_number(buf, &mut pos, b'\n')?;
    if maxval == 0 || maxval > 255 {
        return decode_fail(maxval_at, format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return decode_fail(3, "zero image extent");
    }
    let need = width * height * channels;
    let have = buf.len() - pos;
    if have != need {
        return decode_fail(pos, format!("expected {need} pixel bytes, found {have}"));
    }
    let data = buf[pos..].to_vec();
    if let Some(i) = data.iter().position(|v| *v as usize > maxval) {
        return decode_fail(pos + i, format!("sample exceeds maxval {maxval}"));
    }
    Ok(Netpbm {
        width,
        height,
        maxval: maxval as u16,
        channels,
        data,
    })
}

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// `[1, 3, H, W]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new([1, 3, self.height, self.width], out).expect("rgb extents")
    }
}

pub fn encode_rgb(img: &RgbImage) -> Vec<u8> {
    encode_netpbm(&Netpbm {
        width: img.width,
        height: img.height,
        maxval: 255,
        channels: 3,
        data: img.data.clone(),
    })
}

pub fn decode_rgb(buf: &[u8]) -> Result<RgbImage, DecodeError> {
    let p = decode_netpbm(buf)?;
    if p.channels != 3 || p.maxval != 255 {
        return decode_fail(0, "expected an 8-bit P6 image");
    }
    Ok(RgbImage {
        height: p.height,
        width: p.width,
        data: p.data,
    })
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<(), DataError> {
    write_bytes(path, &encode_rgb(img))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, DataError> {
    decode_at(path, decode_rgb(&read_bytes(path)?))
}

pub fn encode_stability(s: &StabilityMap) -> Vec<u8> {
    encode_netpbm(&Netpbm {
        width: s.width(),
        height: s.height(),
        maxval: 1,
        channels: 1,
        data: s.values().to_vec(),
    })
}

/// Accepts maxval 1 (cells 0/1) or 255 (cells 0/255).
pub fn decode_stability(buf: &[u8]) -> Result<StabilityMap, DecodeError> {
    let p = decode_netpbm(buf)?;
    if p.channels != 1 {
        return decode_fail(0, "stability map must be P5");
    }
    let values = match p.maxval {
        1 => p.data,
        255 => {
            if let Some(i) = p.data.iter().position(|v| *v != 0 && *v != 255) {
                return decode_fail(buf.len() - p.data.len() + i, "stability cell is not 0 or 255");
            }
            p.data.iter().map(|v| (*v == 255) as u8).collect()
        }
        m => return decode_fail(0, format!("stability map maxval {m}, expected 1 or 255")),
    };
    Ok(StabilityMap::new(p.height, p.width, values).expect("validated cells"))
}

pub fn write_stability_map(path: &Path, s: &StabilityMap) -> Result<(), DataError> {
    write_bytes(path, &encode_stability(s))
}

pub fn read_stability_map(path: &Path) -> Result<StabilityMap, DataError> {
    decode_at(path, decode_stability(&read_bytes(path)?))
}

pub fn write_category_table(path: &Path, c: &Categories) -> Result<(), DataError> {
    let mut s = String::new();
    for (id, name) in c.iter() {
        writeln!(s, "{id}\t{name}").expect("string write");
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_category_table(path: &Path) -> Result<Categories, DataError> {
    let text = read_text(path)?;
    let mut table = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i + 1, "expected id<TAB>name"))?;
        let id: u8 = id
            .trim()
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad category id {id:?}")))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(parse_err(path, i + 1, "empty category name"));
        }
        if table.insert(id, name.to_string()).is_some() {
            return Err(parse_err(path, i + 1, format!("duplicate category id {id}")));
        }
    }
    Ok(Categories::new(table))
}

pub fn write_label_map(pgm: &Path, table: &Path, lm: &LabelMap) -> Result<(), DataError> {
    write_bytes(
        pgm,
        &encode_netpbm(&Netpbm {
            width: lm.width(),
            height: lm.height(),
            maxval: 255,
            channels: 1,
            data: lm.ids().to_vec(),
        }),
    )?;
    write_category_table(table, lm.categories())
}

/// An 8-bit `P5` image, as used for label maps.
pub fn decode_gray8(buf: &[u8]) -> Result<Netpbm, DecodeError> {
    let p = decode_netpbm(buf)?;
    if p.channels != 1 || p.maxval != 255 {
        return decode_fail(0, "expected an 8-bit P5 image");
    }
    Ok(p)
}

pub fn read_label_map(pgm: &Path, table: &Path) -> Result<LabelMap, DataError> {
    let p = decode_at(pgm, decode_gray8(&read_bytes(pgm)?))?;
    LabelMap::new(p.height, p.width, p.data, read_category_table(table)?)
}

/// Renders `round(255·a)` per cell as an 8-bit PGM.
pub fn encode_heatmap(a: &ActivationMap) -> Vec<u8> {
    encode_netpbm(&Netpbm {
        width: a.width(),
        height: a.height(),
        maxval: 255,
        channels: 1,
        data: a
            .values()
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect(),
    })
}

// ------------------------------------------------------ activation maps

const DSFA: &[u8; 4] = b"DSFA";

pub fn encode_activation(a: &ActivationMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * a.values().len());
    out.extend_from_slice(DSFA);
    put_u32(&mut out, a.height() as u32);
    put_u32(&mut out, a.width() as u32);
    put_f32s(&mut out, a.values());
    out
}

pub fn decode_activation(buf: &[u8]) -> Result<ActivationMap, DecodeError> {
    let mut c = Cursor::new(buf);
    c.magic(DSFA)?;
    let h = c.u32("height")? as usize;
    let w = c.u32("width")? as usize;
    let n = h
        .checked_mul(w)
        .map_or_else(|| c.fail("map size overflows"), Ok)?;
    if c.remaining() != n.saturating_mul(4) {
        return c.fail(format!(
            "{h}x{w} map needs {} data bytes, found {}",
            n.saturating_mul(4),
            c.remaining()
        ));
    }
    let values = c.f32s(n, "map values")?;
    c.finish()?;
    Ok(ActivationMap::new(h, w, values).expect("length checked"))
}

pub fn write_activation(path: &Path, a: &ActivationMap) -> Result<(), DataError> {
    write_bytes(path, &encode_activation(a))
}

pub fn read_activation(path: &Path) -> Result<ActivationMap, DataError> {
    decode_at(path, decode_activation(&read_bytes(path)?))
}

// ----------------------------------------------------------- descriptors

const DSFD: &[u8; 4] = b"DSFD";

pub fn encode_descriptors(d: &Descriptors) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DSFD);
    put_u32(&mut out, d.len() as u32);
    put_u32(&mut out, d.dim() as u32);
    match d {
        Descriptors::Float { data, .. } => {
            out.push(0);
            put_f32s(&mut out, data);
        }
        Descriptors::Binary { data, .. } => {
            out.push(1);
            out.extend_from_slice(data);
        }
    }
    out
}

pub fn decode_descriptors(buf: &[u8]) -> Result<Descriptors, DecodeError> {
    let mut c = Cursor::new(buf);
    c.magic(DSFD)?;
    let n = c.u32("row count")? as usize;
    let dim = c.u32("dimension")? as usize;
    let kind_at = c.pos();
    let kind = c.u8("kind")?;
    if dim == 0 {
        return decode_fail(8, "zero descriptor dimension");
    }
    let row_bytes = match kind {
        0 => dim.checked_mul(4),
        1 => Some(dim.div_ceil(8)),
        k => return decode_fail(kind_at, format!("unknown descriptor kind {k}")),
    };
    let need = row_bytes.and_then(|r| r.checked_mul(n));
    if need != Some(c.remaining()) {
        return c.fail(format!(
            "{n} rows of dim {dim} need {need:?} bytes, found {}",
            c.remaining()
        ));
    }
    let d = if kind == 0 {
        Descriptors::Float {
            dim,
            data: c.f32s(n * dim, "descriptor data")?,
        }
    } else {
        let data = c.take(n * dim.div_ceil(8), "descriptor data")?.to_vec();
        if dim % 8 != 0 {
            let pad_mask = 0xffu8 >> (dim % 8);
            let stride = dim.div_ceil(8);
            for r in 0..n {
                if data[r * stride + stride - 1] & pad_mask != 0 {
                    return decode_fail(13 + r * stride + stride - 1, "nonzero padding bits");
                }
            }
        }
        Descriptors::Binary { bits: dim, data }
    };
    c.finish()?;
    Ok(d)
}

pub fn write_descriptors(path: &Path, d: &Descriptors) -> Result<(), DataError> {
    write_bytes(path, &encode_descriptors(d))
}

pub fn read_descriptors(path: &Path) -> Result<Descriptors, DataError> {
    decode_at(path, decode_descriptors(&read_bytes(path)?))
}

// ------------------------------------------------------------ text formats

fn fields<T: FromStr>(path: &Path, line_no: usize, line: &str, sep: &[char]) -> Result<Vec<T>, DataError> {
    line.split(|c| sep.contains(&c))
        .filter(|s| !s.is_empty())
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| parse_err(path, line_no, format!("cannot parse {tok:?}")))
        })
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn write_keypoints(path: &Path, kps: &[Keypoint]) -> Result<(), DataError> {
    let mut s = String::new();
    for k in kps {
        writeln!(s, "{}\t{}\t{}", k.x, k.y, k.response).expect("string write");
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>, DataError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in content_lines(&text) {
        let v: Vec<f64> = fields(path, n, line, &['\t', ' '])?;
        if v.len() != 3 {
            return Err(parse_err(path, n, format!("expected 3 fields, found {}", v.len())));
        }
        out.push(Keypoint {
            x: v[0],
            y: v[1],
            response: v[2],
        });
    }
    Ok(out)
}

pub fn write_matches(path: &Path, matches: &[crate::geometry::Match]) -> Result<(), DataError> {
    let mut s = String::new();
    for m in matches {
        write!(s, "{}\t{}\t{}\t{}", m.p1.x, m.p1.y, m.p2.x, m.p2.y).expect("string write");
        if let Some(w) = m.weight {
            write!(s, "\t{w}").expect("string write");
        }
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_matches(path: &Path) -> Result<Vec<crate::geometry::Match>, DataError> {
    use crate::geometry::{Match, NormPoint};
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in content_lines(&text) {
        let v: Vec<f64> = fields(path, n, line, &['\t', ' '])?;
        let weight = match v.len() {
            4 => None,
            5 => {
                if !(v[4].is_finite() && v[4] >= 0.0) {
                    return Err(parse_err(path, n, format!("invalid weight {}", v[4])));
                }
                Some(v[4])
            }
            k => return Err(parse_err(path, n, format!("expected 4 or 5 fields, found {k}"))),
        };
        out.push(Match {
            p1: NormPoint::new(v[0], v[1]),
            p2: NormPoint::new(v[2], v[3]),
            weight,
        });
    }
    Ok(out)
}

pub fn write_loops(path: &Path, pairs: &[(usize, usize)]) -> Result<(), DataError> {
    let mut s = String::from("id_a,id_b\n");
    for (a, b) in pairs {
        writeln!(s, "{a},{b}").expect("string write");
    }
    write_bytes(path, s.as_bytes())
}

/// Reads `id_a,id_b` lines; a leading header line is skipped.
pub fn read_loops(path: &Path) -> Result<Vec<(usize, usize)>, DataError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in content_lines(&text) {
        if n == 1 && line.starts_with("id_a") {
            continue;
        }
        let v: Vec<usize> = fields(path, n, line, &[','])?;
        if v.len() != 2 {
            return Err(parse_err(path, n, format!("expected 2 fields, found {}", v.len())));
        }
        out.push((v[0], v[1]));
    }
    Ok(out)
}

pub fn encode_trajectory(t: &Trajectory) -> String {
    let mut s = String::new();
    for p in t.poses() {
        let r = &p.rotation;
        let tr = &p.translation;
        let vals = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            tr[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            tr[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            tr[2],
        ];
        let line: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<(), DataError> {
    write_bytes(path, encode_trajectory(t).as_bytes())
}

/// Twelve whitespace-separated numbers per line, row-major 3×4.
pub fn read_trajectory(path: &Path) -> Result<Trajectory, DataError> {
    let text = read_text(path)?;
    let mut poses = Vec::new();
    for (n, line) in content_lines(&text) {
        let v: Vec<f64> = fields(path, n, line, &[' ', '\t'])?;
        if v.len() != 12 {
            return Err(parse_err(path, n, format!("expected 12 numbers, found {}", v.len())));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        poses.push(Pose::new(rotation, translation).map_err(|e| parse_err(path, n, e.to_string()))?);
    }
    Ok(Trajectory::new(poses))
}

// ----------------------------------------------------------------- config

/// UTF-8 `key=value` settings with `#` comments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self, DataError> {
        let entries = parse_key_values(text)
            .map_err(|(line, msg)| parse_err(path, line, msg))?
            .into_iter()
            .collect();
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        write_bytes(path, self.render().as_bytes())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={v}").expect("string write");
        }
        s
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, DataError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| DataError::Invalid(format!("config {key}={v} cannot be parsed"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
