//! File formats: PFM depth maps, binary PPM/PGM images, ascii PLY clouds.
//!
//! PFM follows the usual convention: `Pf` (one channel) or `PF` (three),
//! dimensions, then a scale line whose sign encodes endianness (negative =
//! little-endian, the only variant written here), then float32 rows stored
//! bottom-to-top.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use endodepth_core::geometry::{CloudPoint, DepthMap, ImageBuffer};

fn read_token<'a>(data: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    while *pos < data.len() && data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        bail!("{}: truncated header", path.display());
    }
    std::str::from_utf8(&data[start..*pos])
        .with_context(|| format!("{}: non-ascii header", path.display()))
}

fn parse_dims(w: &str, h: &str, path: &Path) -> Result<(usize, usize)> {
    let w: usize = w
        .parse()
        .with_context(|| format!("{}: bad width '{w}'", path.display()))?;
    let h: usize = h
        .parse()
        .with_context(|| format!("{}: bad height '{h}'", path.display()))?;
    if w == 0 || h == 0 {
        bail!("{}: zero image dimension", path.display());
    }
    Ok((w, h))
}

/// Write a depth map as single-channel little-endian PFM.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = depth.shape();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(depth.get(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Read a single-channel PFM into a depth map.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pos = 0;
    let magic = read_token(&data, &mut pos, path)?;
    if magic != "Pf" {
        bail!("{}: expected 'Pf' magic, found '{magic}'", path.display());
    }
    let w = read_token(&data, &mut pos, path)?.to_owned();
    let h = read_token(&data, &mut pos, path)?.to_owned();
    let (w, h) = parse_dims(&w, &h, path)?;
    let scale: f64 = read_token(&data, &mut pos, path)?
        .parse()
        .with_context(|| format!("{}: bad scale line", path.display()))?;
    if scale >= 0.0 {
        bail!("{}: big-endian PFM not supported (scale {scale})", path.display());
    }
    pos += 1; // single whitespace byte after the scale line
    let need = w * h * 4;
    if data.len() < pos + need {
        bail!(
            "{}: payload truncated ({} of {need} bytes)",
            path.display(),
            data.len().saturating_sub(pos)
        );
    }
    let mut values = vec![0.0f64; w * h];
    for ry in 0..h {
        let y = h - 1 - ry; // rows are stored bottom-to-top
        for x in 0..w {
            let o = pos + (ry * w + x) * 4;
            let v = f32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]);
            values[y * w + x] = v as f64;
        }
    }
    DepthMap::new(w, h, values)
        .map_err(|e| anyhow::anyhow!("{}: invalid depth data: {e}", path.display()))
}

/// Write an image as binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn write_pnm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let (w, h) = img.shape();
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => bail!("{}: PNM supports 1 or 3 channels, not {c}", path.display()),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                out.push((img.get(x, y, c) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Read a binary PGM/PPM written by [`write_pnm`].
pub fn read_pnm(path: &Path) -> Result<ImageBuffer> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pos = 0;
    let magic = read_token(&data, &mut pos, path)?;
    let channels = match magic {
        "P5" => 1,
        "P6" => 3,
        m => bail!("{}: expected P5/P6 magic, found '{m}'", path.display()),
    };
    let w = read_token(&data, &mut pos, path)?.to_owned();
    let h = read_token(&data, &mut pos, path)?.to_owned();
    let (w, h) = parse_dims(&w, &h, path)?;
    let maxval = read_token(&data, &mut pos, path)?;
    if maxval != "255" {
        bail!("{}: unsupported maxval '{maxval}'", path.display());
    }
    pos += 1;
    let need = w * h * channels;
    if data.len() < pos + need {
        bail!("{}: payload truncated", path.display());
    }
    let values: Vec<f64> = data[pos..pos + need]
        .iter()
        .map(|b| *b as f64 / 255.0)
        .collect();
    ImageBuffer::new(w, h, channels, values)
        .map_err(|e| anyhow::anyhow!("{}: invalid image data: {e}", path.display()))
}

/// Write an ascii PLY vertex cloud, with `red green blue` properties when
/// colors are present.
pub fn write_ply(path: &Path, points: &[CloudPoint]) -> Result<()> {
    let colored = points.iter().any(|p| p.color.is_some());
    let mut s = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if colored {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for p in points {
        let _ = write!(s, "{} {} {}", p.position[0], p.position[1], p.position[2]);
        if colored {
            let [r, g, b] = p.color.unwrap_or([0.0; 3]);
            let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
            let _ = write!(s, " {} {} {}", q(r), q(g), q(b));
        }
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Read an ascii PLY written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<Vec<CloudPoint>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let mut count: Option<usize> = None;
    let mut colored = false;
    for (ln, line) in lines.by_ref() {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.parse().with_context(|| {
                format!("{}:{}: bad vertex count", path.display(), ln + 1)
            })?);
        }
        if line == "property uchar red" {
            colored = true;
        }
    }
    let count = count
        .ok_or_else(|| anyhow::anyhow!("{}: missing 'element vertex' line", path.display()))?;
    let mut points = Vec::with_capacity(count);
    for (ln, line) in lines.take(count) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let expected = if colored { 6 } else { 3 };
        if fields.len() != expected {
            bail!("{}:{}: expected {expected} fields", path.display(), ln + 1);
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .with_context(|| format!("{}:{}: bad number '{}'", path.display(), ln + 1, fields[i]))
        };
        let position = [f(0)?, f(1)?, f(2)?];
        let color = if colored {
            let c = |i: usize| -> Result<f64> {
                let v: u8 = fields[i].parse().with_context(|| {
                    format!("{}:{}: bad color '{}'", path.display(), ln + 1, fields[i])
                })?;
                Ok(v as f64 / 255.0)
            };
            Some([c(3)?, c(4)?, c(5)?])
        } else {
            None
        };
        points.push(CloudPoint { position, color });
    }
    if points.len() != count {
        bail!("{}: expected {count} vertices, found {}", path.display(), points.len());
    }
    Ok(points)
}
