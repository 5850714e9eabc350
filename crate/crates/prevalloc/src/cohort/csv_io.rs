//! Panel CSV ingestion and persistence.
//!
//! Format: header `patient_id,year,treated,died,onset_next,fasting_glucose,
//! f0,...,f{n-1}`; `onset_next` is an empty string when the follow-up was
//! missed; floats carry up to 9 significant digits; UTF-8 with LF endings.

use std::path::Path;

use super::{CohortError, FeatureLayout, Panel, PatientId, PatientRecord};

const FIXED_COLUMNS: [&str; 6] =
    ["patient_id", "year", "treated", "died", "onset_next", "fasting_glucose"];

/// Render a float with at most 9 significant digits, trimming trailing zeros.
pub(crate) fn fmt_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(8 - exp);
    let rounded = (v * scale).round() / scale;
    format!("{rounded}")
}

/// Write a panel; feature columns are emitted positionally as `f0..f{n-1}`
/// regardless of the layout's names (the layout travels in run manifests).
pub fn save_panel(panel: &Panel, path: &Path) -> Result<(), CohortError> {
    let mut wtr = csv::WriterBuilder::new().from_path(path).map_err(io_err)?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..panel.n_features()).map(|i| format!("f{i}")));
    wtr.write_record(&header).map_err(io_err)?;
    for r in panel.records() {
        let mut row: Vec<String> = vec![
            r.patient_id.to_string(),
            r.year.to_string(),
            if r.treated { "1" } else { "0" }.to_string(),
            if r.died { "1" } else { "0" }.to_string(),
            match r.onset_next {
                None => String::new(),
                Some(true) => "1".to_string(),
                Some(false) => "0".to_string(),
            },
            fmt_sig9(r.fasting_glucose),
        ];
        row.extend(r.features.iter().map(|&v| fmt_sig9(v)));
        wtr.write_record(&row).map_err(io_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> CohortError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CohortError::Io(io),
        other => CohortError::Io(std::io::Error::other(format!("csv: {other:?}"))),
    }
}

fn parse<T: std::str::FromStr>(field: &str, row: usize, column: &str) -> Result<T, CohortError>
where
    T::Err: std::fmt::Display,
{
    field.trim().parse::<T>().map_err(|e| CohortError::CsvParse {
        row,
        column: column.to_string(),
        message: format!("cannot parse `{field}`: {e}"),
    })
}

fn parse_flag(field: &str, row: usize, column: &str) -> Result<bool, CohortError> {
    match field.trim() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(CohortError::CsvParse {
            row,
            column: column.to_string(),
            message: format!("expected 0/1, got `{other}`"),
        }),
    }
}

/// Load a panel from CSV. `schema` names the positional feature columns;
/// pass `None` to fall back to the generic `f0..f{n-1}` layout implied by
/// the header. The schema's length must match the file's feature count.
pub fn load_panel(path: &Path, schema: Option<FeatureLayout>) -> Result<Panel, CohortError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_path(path).map_err(io_err)?;
    let header = rdr.headers().map_err(io_err)?.clone();
    if header.len() < FIXED_COLUMNS.len() {
        return Err(CohortError::CsvParse {
            row: 0,
            column: "header".into(),
            message: format!("expected at least {} columns", FIXED_COLUMNS.len()),
        });
    }
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i) != Some(*expected) {
            return Err(CohortError::CsvParse {
                row: 0,
                column: format!("header[{i}]"),
                message: format!("expected `{expected}`, got `{}`", header.get(i).unwrap_or("")),
            });
        }
    }
    let n_features = header.len() - FIXED_COLUMNS.len();
    let layout = match schema {
        Some(l) => {
            if l.len() != n_features {
                return Err(CohortError::CsvWidth { got: n_features, expected: l.len() });
            }
            l
        }
        None => FeatureLayout::generic(n_features),
    };

    let mut records = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec.map_err(|e| CohortError::CsvParse {
            row,
            column: "record".into(),
            message: e.to_string(),
        })?;
        let onset_field = rec.get(4).unwrap_or("");
        let onset_next = if onset_field.trim().is_empty() {
            None
        } else {
            Some(parse_flag(onset_field, row, "onset_next")?)
        };
        let mut features = Vec::with_capacity(n_features);
        for j in 0..n_features {
            features.push(parse::<f64>(
                rec.get(FIXED_COLUMNS.len() + j).unwrap_or(""),
                row,
                layout.names()[j].as_str(),
            )?);
        }
        records.push(PatientRecord {
            patient_id: PatientId::new(rec.get(0).unwrap_or("").to_string()),
            year: parse(rec.get(1).unwrap_or(""), row, "year")?,
            features,
            treated: parse_flag(rec.get(2).unwrap_or(""), row, "treated")?,
            died: parse_flag(rec.get(3).unwrap_or(""), row, "died")?,
            onset_next,
            fasting_glucose: parse(rec.get(5).unwrap_or(""), row, "fasting_glucose")?,
        });
    }
    Panel::new(records, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn three_row_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "p.csv",
            "patient_id,year,treated,died,onset_next,fasting_glucose,f0\n\
             a,1,0,0,0,6.5,1.5\n\
             a,2,1,0,1,6.8,2.5\n\
             b,1,0,0,,6.2,0.5\n",
        );
        let panel = load_panel(&path, None).unwrap();
        assert_eq!(panel.records().len(), 3);
        assert_eq!(panel.record(&"b".into(), 1).unwrap().onset_next, None);
        assert_eq!(panel.record(&"a".into(), 2).unwrap().onset_next, Some(true));
    }

    #[test]
    fn duplicate_key_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "dup.csv",
            "patient_id,year,treated,died,onset_next,fasting_glucose,f0\n\
             a,1,0,0,0,6.5,1.0\n\
             a,1,0,0,0,6.5,2.0\n",
        );
        assert!(matches!(load_panel(&path, None), Err(CohortError::DuplicateKey { .. })));
    }

    #[test]
    fn bad_row_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "bad.csv",
            "patient_id,year,treated,died,onset_next,fasting_glucose,f0\n\
             a,1,0,0,0,6.5,1.0\n\
             b,two,0,0,0,6.5,1.0\n",
        );
        match load_panel(&path, None) {
            Err(CohortError::CsvParse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "year");
            }
            other => panic!("expected CsvParse, got {other:?}"),
        }
    }

    #[test]
    fn empty_onset_survives_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_file(
            &dir,
            "src.csv",
            "patient_id,year,treated,died,onset_next,fasting_glucose,f0,f1\n\
             a,1,0,0,,6.5,1.25,-3.5\n",
        );
        let panel = load_panel(&src, None).unwrap();
        let out = dir.path().join("out.csv");
        save_panel(&panel, &out).unwrap();
        let reloaded = load_panel(&out, None).unwrap();
        assert_eq!(panel.records(), reloaded.records());
        assert_eq!(reloaded.record(&"a".into(), 1).unwrap().onset_next, None);
    }

    #[test]
    fn write_then_read_is_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::cohort::generate::tests::three_feature_config();
        let panel = crate::cohort::generate_synthetic_cohort(&cfg).unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        save_panel(&panel, &p1).unwrap();
        let reloaded = load_panel(&p1, None).unwrap();
        save_panel(&reloaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(!text.contains('\r'), "LF line endings expected");
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(114.3), "114.3");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(-6.123456789123), "-6.12345679");
        assert_eq!(fmt_sig9(123456789123.0), "123456789000");
    }
}
