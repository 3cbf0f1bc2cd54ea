//! CSV manifests pointing at PPM image pairs.
//!
//! Paths in a manifest are resolved relative to the manifest's directory.
//! A class mask is picked up from `masks/<source_id>.pgm` next to the
//! manifest when that file exists.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::netpbm::{read_pgm_mask, read_ppm, write_pgm_mask, write_ppm};
use super::{Label, PatchRecord, PatchSet, SetRole};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

pub const MANIFEST_HEADER: [&str; 4] = ["he_path", "ihc_path", "label", "source_id"];

fn load_error(row: usize, message: impl std::fmt::Display) -> Error {
    Error::Load {
        row,
        message: message.to_string(),
    }
}

fn file_stem(source_id: &str) -> String {
    source_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Rows are numbered from 1, not counting the header.
pub fn load_manifest(path: &Path, role: SetRole) -> Result<PatchSet> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::format(
            path,
            format!("header must be {}", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| load_error(row_no, e))?;
        let field = |k: usize| row.get(k).unwrap_or("");
        let resolve = |p: &str| -> PathBuf { base.join(p) };
        let he = read_ppm(&resolve(field(0))).map_err(|e| load_error(row_no, e))?;
        let source_id = match field(3) {
            "" => format!("row-{row_no}"),
            id => id.to_string(),
        };
        let mut record = PatchRecord::new(he, source_id);
        if !field(1).is_empty() {
            let ihc = read_ppm(&resolve(field(1))).map_err(|e| load_error(row_no, e))?;
            record.ihc_image = Some(Arc::new(ihc));
        }
        if !field(2).is_empty() {
            record.label = Some(
                field(2)
                    .parse::<Label>()
                    .map_err(|e| load_error(row_no, e))?,
            );
        }
        let mask_path = base
            .join("masks")
            .join(format!("{}.pgm", file_stem(&record.source_id)));
        if mask_path.is_file() {
            record.mask = Some(Arc::new(
                read_pgm_mask(&mask_path).map_err(|e| load_error(row_no, e))?,
            ));
        }
        record.validate().map_err(|e| load_error(row_no, e))?;
        records.push(record);
    }
    PatchSet::new(records, role)
}

/// Writes `images/`, `masks/` and the manifest file `name` under `dir`.
pub fn save_manifest(set: &PatchSet, dir: &Path, name: &str) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut rows = Vec::with_capacity(set.len());
    for r in &set.records {
        let stem = file_stem(&r.source_id);
        let he_rel = format!("images/{stem}_he.ppm");
        write_ppm(&dir.join(&he_rel), &r.he_image)?;
        let ihc_rel = match &r.ihc_image {
            Some(img) => {
                let rel = format!("images/{stem}_ihc.ppm");
                write_ppm(&dir.join(&rel), img)?;
                rel
            }
            None => String::new(),
        };
        if let Some(mask) = &r.mask {
            write_pgm_mask(&dir.join("masks").join(format!("{stem}.pgm")), mask)?;
        }
        let label = r.label.map(Label::as_str).unwrap_or("");
        rows.push([he_rel, ihc_rel, label.to_string(), r.source_id.clone()]);
    }
    let path = dir.join(name);
    write_atomic(&path, |w| {
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(MANIFEST_HEADER)?;
        for row in &rows {
            writer.write_record(row)?;
        }
        writer.flush()
    })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassMask, Image};

    fn image(v: u8) -> Image {
        Image::filled(3, 4, 4, f64::from(v) / 255.0)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = PatchRecord::new(image(10), "a");
        a.ihc_image = Some(Arc::new(image(200)));
        a.label = Some(Label::Tumour);
        a.mask = Some(Arc::new(ClassMask::new(4, 4, vec![2; 16]).unwrap()));
        let b = PatchRecord::new(image(77), "b/odd id");
        let set = PatchSet::new(vec![a, b], SetRole::Source).unwrap();
        let path = save_manifest(&set, dir.path(), "manifest.csv").unwrap();
        let back = load_manifest(&path, SetRole::Source).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "he_path,ihc_path,label,source_id\n").unwrap();
        assert!(load_manifest(&path, SetRole::Test).unwrap().is_empty());
    }

    #[test]
    fn errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        write_ppm(&dir.path().join("x.ppm"), &image(1)).unwrap();
        write_ppm(&dir.path().join("small.ppm"), &Image::filled(3, 2, 2, 0.0)).unwrap();
        let path = dir.path().join("m.csv");
        let cases = [
            ("x.ppm,,tumour,a\nx.ppm,,fat,b\n", 2),
            ("x.ppm,,,a\nx.ppm,,,b\nx.ppm,small.ppm,,c\n", 3),
            ("missing.ppm,,,a\n", 1),
        ];
        for (body, row) in cases {
            fs::write(&path, format!("he_path,ihc_path,label,source_id\n{body}")).unwrap();
            match load_manifest(&path, SetRole::Source) {
                Err(Error::Load { row: r, .. }) => assert_eq!(r, row, "{body}"),
                other => panic!("expected load error, got {other:?}"),
            }
        }
    }

    #[test]
    fn labels_parse_case_insensitively() {
        let dir = tempfile::tempdir().unwrap();
        write_ppm(&dir.path().join("x.ppm"), &image(1)).unwrap();
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "he_path,ihc_path,label,source_id\nx.ppm,,Tumour,a\nx.ppm,,STROMA,b\n",
        )
        .unwrap();
        let set = load_manifest(&path, SetRole::Test).unwrap();
        assert_eq!(set.labels().unwrap(), vec![Label::Tumour, Label::Stroma]);
    }
}
