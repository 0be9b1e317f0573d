use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{load_image, GrayImage};
use super::DataError;

pub const MANIFEST_HEADER: &str =
    "case_id,patient_id,image_t0_path,image_t1_path,label_task1,label_task2,split,fold";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One registered (t0, t1) pair, by reference; pixels are loaded on demand.
#[derive(Clone, Debug)]
pub struct PairRecord {
    pub case_id: String,
    pub patient_id: String,
    /// Image paths relative to the manifest's directory, forward slashes.
    pub image_t0_path: String,
    pub image_t1_path: String,
    pub label_task1: Option<u8>,
    pub label_task2: Option<u8>,
    pub split: Split,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<PairRecord>,
    /// Directory that image paths are resolved against.
    pub source_dir: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.source_dir.join(rel)
    }

    /// Load both images of a record, enforcing the equal-dimensions
    /// registration premise.
    pub fn load_pair(&self, idx: usize) -> Result<(GrayImage, GrayImage), DataError> {
        let r = &self.records[idx];
        let t0 = load_image(&self.resolve(&r.image_t0_path))?;
        let t1 = load_image(&self.resolve(&r.image_t1_path))?;
        if t0.height() != t1.height() || t0.width() != t1.width() {
            return Err(DataError::BadManifest {
                path: self.source_dir.clone(),
                msg: format!(
                    "case `{}`: t0 is {}x{} but t1 is {}x{}",
                    r.case_id,
                    t0.height(),
                    t0.width(),
                    t1.height(),
                    t1.width()
                ),
            });
        }
        Ok((t0, t1))
    }
}

fn parse_label(
    field: &str,
    name: &str,
    max: u8,
    path: &Path,
    row: usize,
) -> Result<Option<u8>, DataError> {
    if field.is_empty() {
        return Ok(None);
    }
    let v: u8 = field.parse().map_err(|_| DataError::BadRow {
        path: path.to_path_buf(),
        row,
        msg: format!("{name}: `{field}` is not an integer"),
    })?;
    if v > max {
        return Err(DataError::BadRow {
            path: path.to_path_buf(),
            row,
            msg: format!("{name}: {v} out of range 0..={max}"),
        });
    }
    Ok(Some(v))
}

/// Parse and validate a manifest CSV. Row numbers in errors are 1-based
/// data rows (the header is row 0).
pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let source_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DataError::BadManifest { path: path.to_path_buf(), msg: e.to_string() })?;
    {
        let got = reader
            .headers()
            .map_err(|e| DataError::BadManifest { path: path.to_path_buf(), msg: e.to_string() })?;
        let want: Vec<&str> = MANIFEST_HEADER.split(',').collect();
        if got.iter().collect::<Vec<_>>() != want {
            return Err(DataError::BadManifest {
                path: path.to_path_buf(),
                msg: format!("expected header `{MANIFEST_HEADER}`, got `{}`", got.iter().collect::<Vec<_>>().join(",")),
            });
        }
    }
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        if row.len() != 8 {
            return Err(DataError::BadRow {
                path: path.to_path_buf(),
                row: row_no,
                msg: format!("expected 8 fields, got {}", row.len()),
            });
        }
        let field = |j: usize| row.get(j).unwrap_or("").trim().to_string();
        let case_id = field(0);
        if case_id.is_empty() {
            return Err(DataError::BadRow {
                path: path.to_path_buf(),
                row: row_no,
                msg: "empty case_id".into(),
            });
        }
        if let Some(&first) = seen.get(&case_id) {
            return Err(DataError::DuplicateCase {
                path: path.to_path_buf(),
                case_id,
                first,
                second: row_no,
            });
        }
        seen.insert(case_id.clone(), row_no);
        let split = Split::parse(&field(6)).ok_or_else(|| DataError::BadRow {
            path: path.to_path_buf(),
            row: row_no,
            msg: format!("split: `{}` is not one of train|val|test", field(6)),
        })?;
        let fold_field = field(7);
        let fold = if fold_field.is_empty() {
            None
        } else {
            Some(fold_field.parse().map_err(|_| DataError::BadRow {
                path: path.to_path_buf(),
                row: row_no,
                msg: format!("fold: `{fold_field}` is not an integer"),
            })?)
        };
        let rec = PairRecord {
            case_id,
            patient_id: field(1),
            image_t0_path: field(2),
            image_t1_path: field(3),
            label_task1: parse_label(&field(4), "label_task1", 3, path, row_no)?,
            label_task2: parse_label(&field(5), "label_task2", 2, path, row_no)?,
            split,
            fold,
        };
        for rel in [&rec.image_t0_path, &rec.image_t1_path] {
            let p = source_dir.join(rel);
            if !p.is_file() {
                return Err(DataError::MissingFile { path: p });
            }
        }
        records.push(rec);
    }
    Ok(Manifest { records, source_dir })
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| DataError::BadManifest { path: path.to_path_buf(), msg: e.to_string() })?;
    writer.write_record(MANIFEST_HEADER.split(','))?;
    for r in &manifest.records {
        let opt = |v: Option<u8>| v.map(|x| x.to_string()).unwrap_or_default();
        writer.write_record([
            r.case_id.as_str(),
            r.patient_id.as_str(),
            r.image_t0_path.as_str(),
            r.image_t1_path.as_str(),
            &opt(r.label_task1),
            &opt(r.label_task2),
            &r.split.to_string(),
            &r.fold.map(|f| f.to_string()).unwrap_or_default(),
        ])?;
    }
    writer
        .flush()
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

/// Assign cross-validation folds by patient so no patient spans folds.
/// Patient counts per fold differ by at most one.
pub fn split_folds(manifest: &mut Manifest, k_folds: usize, seed: u64) -> Result<(), DataError> {
    if k_folds < 2 {
        return Err(DataError::FoldSplit(format!("k_folds must be >= 2, got {k_folds}")));
    }
    // unique patients in first-appearance order, then a seeded shuffle
    let mut patients: Vec<String> = Vec::new();
    for r in &manifest.records {
        if !patients.contains(&r.patient_id) {
            patients.push(r.patient_id.clone());
        }
    }
    if patients.len() < k_folds {
        return Err(DataError::FoldSplit(format!(
            "{} patients cannot fill {} folds",
            patients.len(),
            k_folds
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let assignment: HashMap<&str, usize> =
        patients.iter().enumerate().map(|(i, p)| (p.as_str(), i % k_folds)).collect();
    for r in &mut manifest.records {
        r.fold = Some(assignment[r.patient_id.as_str()]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_images(dir: &Path, names: &[&str]) {
        for n in names {
            let img = GrayImage::zeros(2, 2);
            super::super::save_image(&img, &dir.join(n)).unwrap();
        }
    }

    fn write_manifest(dir: &Path, rows: &[&str]) -> PathBuf {
        let path = dir.join("manifest.csv");
        let mut body = String::from(MANIFEST_HEADER);
        for r in rows {
            body.push('\n');
            body.push_str(r);
        }
        body.push('\n');
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn two_row_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a0.pgm", "a1.pgm", "b0.pgm", "b1.pgm"]);
        let path = write_manifest(
            dir.path(),
            &["c1,p1,a0.pgm,a1.pgm,0,0,train,", "c2,p1,b0.pgm,b1.pgm,3,,train,2"],
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].label_task1, Some(0));
        assert_eq!(m.records[1].label_task1, Some(3));
        assert_eq!(m.records[1].label_task2, None);
        assert_eq!(m.records[1].fold, Some(2));
    }

    #[test]
    fn label_out_of_range_names_row_and_field() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a0.pgm", "a1.pgm"]);
        let path = write_manifest(dir.path(), &["c1,p1,a0.pgm,a1.pgm,5,,train,"]);
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
        assert!(err.contains("label_task1"), "{err}");
    }

    #[test]
    fn duplicate_case_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a0.pgm", "a1.pgm"]);
        let path = write_manifest(
            dir.path(),
            &["c1,p1,a0.pgm,a1.pgm,0,,train,", "c1,p2,a0.pgm,a1.pgm,1,,train,"],
        );
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate case_id `c1`"), "{err}");
    }

    #[test]
    fn missing_image_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a0.pgm"]);
        let path = write_manifest(dir.path(), &["c1,p1,a0.pgm,gone.pgm,0,,train,"]);
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("gone.pgm"), "{err}");
    }

    #[test]
    fn manifest_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a0.pgm", "a1.pgm", "b0.pgm", "b1.pgm"]);
        let path = write_manifest(
            dir.path(),
            &["c1,p1,a0.pgm,a1.pgm,2,2,val,1", "c2,p2,b0.pgm,b1.pgm,,,test,"],
        );
        let m = load_manifest(&path).unwrap();
        let path2 = dir.path().join("copy.csv");
        save_manifest(&m, &path2).unwrap();
        let m2 = load_manifest(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        assert_eq!(m2.len(), m.len());
    }

    #[test]
    fn fold_split_groups_patients_and_balances() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a0.pgm", "a1.pgm"]);
        // 8 patients, 3 pairs for p0
        let mut rows = vec![];
        let owned: Vec<String> = (0..10)
            .map(|i| {
                let pid = if i < 3 { 0 } else { i - 2 };
                format!("c{i},p{pid},a0.pgm,a1.pgm,1,,train,")
            })
            .collect();
        rows.extend(owned.iter().map(|s| s.as_str()));
        let path = write_manifest(dir.path(), &rows);
        let mut m = load_manifest(&path).unwrap();
        split_folds(&mut m, 4, 7).unwrap();
        // all of p0's pairs share one fold
        let p0_folds: Vec<usize> =
            m.records.iter().filter(|r| r.patient_id == "p0").map(|r| r.fold.unwrap()).collect();
        assert!(p0_folds.windows(2).all(|w| w[0] == w[1]));
        // 8 patients over 4 folds -> exactly 2 per fold
        let mut per_fold = [0usize; 4];
        let mut seen = std::collections::HashSet::new();
        for r in &m.records {
            if seen.insert(r.patient_id.clone()) {
                per_fold[r.fold.unwrap()] += 1;
            }
        }
        assert_eq!(per_fold, [2, 2, 2, 2]);
        // determinism
        let mut m2 = load_manifest(&path).unwrap();
        split_folds(&mut m2, 4, 7).unwrap();
        let folds: Vec<_> = m.records.iter().map(|r| r.fold).collect();
        let folds2: Vec<_> = m2.records.iter().map(|r| r.fold).collect();
        assert_eq!(folds, folds2);
    }

    #[test]
    fn fold_split_rejects_too_few_patients() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a0.pgm", "a1.pgm"]);
        let path = write_manifest(dir.path(), &["c1,p1,a0.pgm,a1.pgm,1,,train,"]);
        let mut m = load_manifest(&path).unwrap();
        assert!(split_folds(&mut m, 4, 0).is_err());
    }
}
