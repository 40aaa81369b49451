//! Sample manifest: participant ids, frame directories and motility
//! percentages.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::data::tabular::csv_error;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = [
    "participant_id",
    "frames_dir",
    "progressive",
    "non_progressive",
    "immotile",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub participant_id: String,
    /// Resolved against the manifest's directory when relative.
    pub frames_dir: PathBuf,
    /// Progressive, non-progressive, immotile percentages.
    pub motility: [f64; 3],
}

impl ManifestRow {
    pub fn label(&self) -> usize {
        derive_label(self.motility)
    }
}

/// Index of the largest percentage; ties go to the lowest index.
pub fn derive_label(motility: [f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if motility[i] > motility[best] {
            best = i;
        }
    }
    best
}

pub fn class_histogram(rows: &[ManifestRow]) -> [usize; 3] {
    let mut h = [0; 3];
    for r in rows {
        h[r.label()] += 1;
    }
    h
}

pub fn read_manifest(path: &Path, delimiter: u8) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let schema = |detail: String| Error::Schema {
        path: path.to_path_buf(),
        detail,
    };
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().ne(MANIFEST_HEADER) {
        return Err(schema(format!(
            "header must be '{}', got '{}'",
            MANIFEST_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(i + 2, |p| p.line() as usize);
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(schema(format!("row {line}: empty participant id")));
        }
        if !seen.insert(id.clone()) {
            return Err(schema(format!("row {line}: duplicate participant id '{id}'")));
        }
        let mut motility = [0.0; 3];
        for (k, m) in motility.iter_mut().enumerate() {
            let cell = &record[k + 2];
            *m = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    column: MANIFEST_HEADER[k + 2].to_string(),
                    value: cell.to_string(),
                })?;
            if !(0.0..=100.0).contains(m) {
                return Err(schema(format!(
                    "row {line}: {} = {m} outside [0, 100]",
                    MANIFEST_HEADER[k + 2]
                )));
            }
        }
        let total: f64 = motility.iter().sum();
        if !(99.0..=101.0).contains(&total) {
            return Err(schema(format!(
                "row {line}: motility percentages sum to {total}, expected 100 within 1"
            )));
        }
        let dir = PathBuf::from(&record[1]);
        rows.push(ManifestRow {
            participant_id: id,
            frames_dir: if dir.is_absolute() { dir } else { base.join(dir) },
            motility,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest(body: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(
            f.path(),
            format!("participant_id,frames_dir,progressive,non_progressive,immotile\n{body}"),
        )
        .unwrap();
        f
    }

    #[test]
    fn labels() {
        assert_eq!(derive_label([70.0, 10.0, 20.0]), 0);
        assert_eq!(derive_label([33.3, 33.4, 33.3]), 1);
        assert_eq!(derive_label([10.0, 10.0, 80.0]), 2);
        assert_eq!(derive_label([40.0, 40.0, 20.0]), 0);
    }

    #[test]
    fn reads_and_resolves_rows() {
        let f = manifest("p1,clips/p1,70,10,20\np2,/abs/p2,5,60.5,34.5\n");
        let rows = read_manifest(f.path(), b',').unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].frames_dir, f.path().parent().unwrap().join("clips/p1"));
        assert_eq!(rows[1].frames_dir, PathBuf::from("/abs/p2"));
        assert_eq!(class_histogram(&rows), [1, 1, 0]);
    }

    #[test]
    fn validation() {
        for body in [
            "p1,d,70,10,30\n",
            "p1,d,-1,51,50\n",
            "p1,d,70,10,20\np1,d,70,10,20\n",
            ",d,70,10,20\n",
        ] {
            assert!(
                matches!(read_manifest(manifest(body).path(), b','), Err(Error::Schema { .. })),
                "{body}"
            );
        }
        assert!(matches!(
            read_manifest(manifest("p1,d,x,10,20\n").path(), b','),
            Err(Error::Parse { row: 2, .. })
        ));
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "id,dir,a,b,c\n").unwrap();
        assert!(matches!(read_manifest(f.path(), b','), Err(Error::Schema { .. })));
    }

    proptest! {
        #[test]
        fn label_is_scale_invariant(
            m in prop::array::uniform3(0.0f64..100.0),
            k in 1e-3f64..1e3,
        ) {
            prop_assert_eq!(derive_label(m), derive_label(m.map(|v| v * k)));
        }
    }
}
