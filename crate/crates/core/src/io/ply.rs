//! ASCII PLY with vertex properties x, y, z, optional red/green/blue and
//! an optional integer label. Colors become three features in [0, 1].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{KpxError, Result};
use crate::sampling::StackedCloud;

#[derive(Clone, Copy, PartialEq)]
enum Prop {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
    Label,
    Skip,
}

pub fn read_ply(path: &Path) -> Result<StackedCloud> {
    let file = File::open(path)?;
    read_ply_from(BufReader::new(file), path)
}

/// Parses a PLY stream; `path` is only used in error messages.
pub fn read_ply_from(reader: impl BufRead, path: &Path) -> Result<StackedCloud> {
    let err = |m: String| KpxError::format(path, m);
    let mut lines = reader.lines();
    let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(KpxError::from) };

    if next()?.as_deref().map(str::trim) != Some("ply") {
        return Err(err("missing `ply` magic line".into()));
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<Prop> = Vec::new();
    loop {
        let Some(line) = next()? else {
            return Err(err("header is not terminated by end_header".into()));
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", ..] => {}
            ["format", other, ..] => {
                return Err(KpxError::Unsupported(format!("{other} PLY in {}", path.display())));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse().map_err(|_| err(format!("bad vertex count `{n}`")))?);
                } else {
                    log::warn!("{}: ignoring element `{name}`", path.display());
                }
            }
            ["property", "list", ..] if !in_vertex => {}
            ["property", _, name] if in_vertex => props.push(match *name {
                "x" => Prop::X,
                "y" => Prop::Y,
                "z" => Prop::Z,
                "red" => Prop::Red,
                "green" => Prop::Green,
                "blue" => Prop::Blue,
                "label" | "class" => Prop::Label,
                other => {
                    log::warn!("{}: skipping vertex property `{other}`", path.display());
                    Prop::Skip
                }
            }),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(err(format!("unrecognized header line `{line}`"))),
        }
    }
    let n = count.ok_or_else(|| err("no vertex element".into()))?;
    let pos = |p: Prop| props.iter().position(|&q| q == p);
    let (Some(ix), Some(iy), Some(iz)) = (pos(Prop::X), pos(Prop::Y), pos(Prop::Z)) else {
        return Err(err("vertex element lacks x, y or z".into()));
    };
    let rgb = match (pos(Prop::Red), pos(Prop::Green), pos(Prop::Blue)) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let label = pos(Prop::Label);

    let mut points = Vec::with_capacity(n);
    let mut features = Vec::new();
    let mut labels = label.map(|_| Vec::with_capacity(n));
    let mut vals: Vec<f64> = Vec::with_capacity(props.len());
    for i in 0..n {
        let Some(line) = next()? else {
            return Err(err(format!("expected {n} vertices, file ends after {i}")));
        };
        vals.clear();
        for t in line.split_whitespace().take(props.len()) {
            vals.push(t.parse().map_err(|_| err(format!("vertex {i}: bad number `{t}`")))?);
        }
        if vals.len() < props.len() {
            return Err(err(format!(
                "vertex {i}: expected {} values, found {} (of {n} vertices)",
                props.len(),
                vals.len()
            )));
        }
        points.push([vals[ix], vals[iy], vals[iz]]);
        if let Some(c) = rgb {
            features.extend(c.iter().map(|&k| vals[k] / 255.0));
        }
        if let (Some(out), Some(k)) = (&mut labels, label) {
            let v = vals[k];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(err(format!("vertex {i}: label {v} is not a class id")));
            }
            out.push(v as usize);
        }
    }
    let channels = if rgb.is_some() { 3 } else { 0 };
    StackedCloud::single(points, features, channels, labels)
}

pub fn write_ply(cloud: &StackedCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply_to(cloud, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes all elements as one vertex list. Features are written as colors
/// when there are exactly three channels and dropped otherwise.
pub fn write_ply_to(cloud: &StackedCloud, w: &mut impl Write) -> Result<()> {
    let rgb = cloud.channels == 3;
    if cloud.channels != 0 && !rgb {
        log::warn!("PLY output drops {} feature channels", cloud.channels);
    }
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if rgb {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    if cloud.labels.is_some() {
        writeln!(w, "property int label")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        write!(w, "{:.9e} {:.9e} {:.9e}", p[0], p[1], p[2])?;
        if rgb {
            for c in &cloud.features[3 * i..3 * i + 3] {
                write!(w, " {}", (c.clamp(0.0, 1.0) * 255.0).round() as u8)?;
            }
        }
        if let Some(l) = &cloud.labels {
            write!(w, " {}", l[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}
