//! CSV manifests (`path,label,group[,split]`) over PGM/PPM images.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedRow {
    /// 1-based line number in the manifest.
    pub line: usize,
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct ManifestLoad {
    pub dataset: LabeledDataset,
    pub skipped: Vec<SkippedRow>,
}

struct Image {
    shape: [usize; 3],
    data: Vec<f64>,
}

/// Parses binary (P5/P6) or ASCII (P2/P3) netpbm grey/colour images and
/// scales samples to `[0, 1]`.
fn read_netpbm(path: &Path) -> std::result::Result<Image, String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        other => return Err(format!("unsupported image format `{other}`")),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header value `{s}`"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(format!("unsupported dimensions {w}x{h} or maxval {maxval}"));
    }
    let n = w * h * channels;
    let samples: Vec<usize> = if magic == "P5" || magic == "P6" {
        let start = pos + 1;
        if bytes.len() < start + n {
            return Err("truncated pixel data".into());
        }
        bytes[start..start + n].iter().map(|&b| b as usize).collect()
    } else {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(num(token()?)?);
        }
        v
    };
    // interleaved HWC -> planar CHW
    let mut data = vec![0.0; n];
    for (i, &s) in samples.iter().enumerate() {
        let (px, c) = (i / channels, i % channels);
        data[c * w * h + px] = s.min(maxval) as f64 / maxval as f64;
    }
    Ok(Image {
        shape: [channels, h, w],
        data,
    })
}

fn write_netpbm(path: &Path, shape: [usize; 3], data: &[f64]) -> Result<()> {
    let [c, h, w] = shape;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Data(format!("cannot export {c}-channel images as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for px in 0..h * w {
        for ch in 0..c {
            let v = data[ch * h * w + px].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a manifest. Relative image paths resolve against the manifest's
/// directory; rows whose image is missing or unreadable are skipped and
/// reported.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ManifestLoad> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (path_col, label_col, group_col) = match (col("path"), col("label"), col("group")) {
        (Some(p), Some(l), Some(g)) => (p, l, g),
        (p, l, g) => {
            let missing: Vec<&str> = [("path", p), ("label", l), ("group", g)]
                .iter()
                .filter(|(_, c)| c.is_none())
                .map(|(n, _)| *n)
                .collect();
            return Err(Error::Data(format!(
                "manifest header is missing column(s): {}",
                missing.join(", ")
            )));
        }
    };
    let split_col = col("split");

    struct Row {
        image: Image,
        label: usize,
        group: String,
        split: Option<String>,
    }
    let mut rows = vec![];
    let mut skipped = vec![];
    let mut shape: Option<[usize; 3]> = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let rel = rec.get(path_col).unwrap_or("").to_string();
        let label: usize = rec
            .get(label_col)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("line {line}: label is not a non-negative integer")))?;
        let group = rec.get(group_col).unwrap_or("").to_string();
        if group.is_empty() {
            return Err(Error::Data(format!("line {line}: empty group tag")));
        }
        let split = split_col.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()).map(str::to_string);
        let full: PathBuf = if Path::new(&rel).is_absolute() {
            PathBuf::from(&rel)
        } else {
            base.join(&rel)
        };
        match read_netpbm(&full) {
            Ok(img) => {
                if let Some(s) = shape {
                    if s != img.shape {
                        skipped.push(SkippedRow {
                            line,
                            path: rel,
                            reason: format!("image shape {:?} differs from {:?}", img.shape, s),
                        });
                        continue;
                    }
                }
                shape = Some(img.shape);
                rows.push(Row {
                    image: img,
                    label,
                    group,
                    split,
                });
            }
            Err(reason) => skipped.push(SkippedRow { line, path: rel, reason }),
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} has no loadable rows ({} skipped)",
            path.display(),
            skipped.len()
        )));
    }
    let group_names: Vec<String> = rows.iter().map(|r| r.group.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let classes = rows.iter().map(|r| r.label).max().unwrap_or(0).max(1) + 1;
    let mut splits: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut images = vec![];
    let mut labels = vec![];
    let mut groups = vec![];
    for (i, r) in rows.into_iter().enumerate() {
        images.extend(r.image.data);
        labels.push(r.label);
        groups.push(group_names.iter().position(|g| *g == r.group).expect("collected above"));
        if let Some(s) = r.split {
            splits.entry(s).or_default().push(i);
        }
    }
    let dataset = LabeledDataset::new(
        shape.expect("at least one row"),
        images,
        labels,
        groups,
        group_names,
        classes,
        format!("manifest:{}", path.display()),
    )?
    .with_splits(splits)?;
    Ok(ManifestLoad { dataset, skipped })
}

/// Writes every sample to `dir/data/<split>/<id>.pgm` (or `.ppm`) plus
/// `dir/manifest.csv`. Samples outside any split go under `unassigned`.
pub fn export_manifest(dataset: &LabeledDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let ext = if dataset.image_shape()[0] == 3 { "ppm" } else { "pgm" };
    let mut split_of: Vec<Option<&str>> = vec![None; dataset.len()];
    for (name, idx) in dataset.splits() {
        for &i in idx {
            split_of[i] = Some(name);
        }
    }
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["path", "label", "group", "split"])?;
    for (i, split) in split_of.iter().enumerate() {
        let sdir = split.unwrap_or("unassigned");
        fs::create_dir_all(dir.join("data").join(sdir))?;
        let rel = format!("data/{sdir}/{i:06}.{ext}");
        write_netpbm(&dir.join(&rel), dataset.image_shape(), dataset.image(i))?;
        w.write_record([rel.as_str(), &dataset.label(i).to_string(), dataset.group(i), split.unwrap_or("")])?;
    }
    w.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_binary_pgm_agree() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.pgm"), "P2\n# c\n2 1\n255\n0 255\n").unwrap();
        let mut bin = b"P5\n2 1\n255\n".to_vec();
        bin.extend([0u8, 255]);
        fs::write(dir.path().join("b.pgm"), bin).unwrap();
        let a = read_netpbm(&dir.path().join("a.pgm")).unwrap();
        let b = read_netpbm(&dir.path().join("b.pgm")).unwrap();
        assert_eq!(a.data, vec![0.0, 1.0]);
        assert_eq!(a.data, b.data);
        assert_eq!(a.shape, [1, 1, 2]);
    }

    #[test]
    fn ppm_is_planar_after_load() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.ppm"), "P3 2 1 255 255 0 0 0 0 255").unwrap();
        let img = read_netpbm(&dir.path().join("c.ppm")).unwrap();
        assert_eq!(img.shape, [3, 1, 2]);
        assert_eq!(img.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
