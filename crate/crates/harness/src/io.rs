//! Domain-file and CSV ingestion with per-cell diagnostics, and synthetic
//! CSV emission.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use vertimrf_core::data::{Dataset, Schema};

use crate::HarnessError;

/// Domain description: attribute names, sizes and an optional category
/// dictionary mapping strings to integer codes by position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainFile {
    pub attributes: Vec<DomainAttribute>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainAttribute {
    pub name: String,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl DomainFile {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let parsed: DomainFile = serde_json::from_str(&text)?;
        for attr in &parsed.attributes {
            if let Some(cats) = &attr.categories {
                if cats.len() != attr.size {
                    return Err(HarnessError::Config(format!(
                        "attribute `{}` declares {} categories for size {}",
                        attr.name,
                        cats.len(),
                        attr.size
                    )));
                }
            }
        }
        Ok(parsed)
    }

    pub fn schema(&self) -> Result<Schema, HarnessError> {
        Ok(Schema::new(
            self.attributes
                .iter()
                .map(|a| (a.name.clone(), a.size))
                .collect(),
        )?)
    }

    pub fn for_schema(schema: &Schema) -> Self {
        DomainFile {
            attributes: (0..schema.attribute_count())
                .map(|a| DomainAttribute {
                    name: schema.name(a).to_string(),
                    size: schema.domain_size(a),
                    categories: None,
                })
                .collect(),
        }
    }
}

/// Loads a CSV against the domain: columns are matched to attributes by
/// header name, values either parse as integer codes or map through the
/// category dictionary. Domain violations name the row and attribute.
pub fn load_csv(path: &Path, domain: &DomainFile) -> Result<Dataset, HarnessError> {
    let schema = domain.schema()?;
    let csv_err = |detail: String| HarnessError::Csv {
        path: path.display().to_string(),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_err(e.to_string()))?
        .clone();
    let mut column_of = Vec::with_capacity(domain.attributes.len());
    for attr in &domain.attributes {
        let pos = headers
            .iter()
            .position(|h| h == attr.name)
            .ok_or_else(|| csv_err(format!("missing column `{}`", attr.name)))?;
        column_of.push(pos);
    }
    let lookups: Vec<Option<BTreeMap<&str, u32>>> = domain
        .attributes
        .iter()
        .map(|a| {
            a.categories.as_ref().map(|cats| {
                cats.iter()
                    .enumerate()
                    .map(|(i, c)| (c.as_str(), i as u32))
                    .collect()
            })
        })
        .collect();
    let mut rows: Vec<Vec<u32>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let mut row = Vec::with_capacity(domain.attributes.len());
        for (j, attr) in domain.attributes.iter().enumerate() {
            let raw = record.get(column_of[j]).ok_or_else(|| {
                csv_err(format!("row {}: missing field `{}`", line + 1, attr.name))
            })?;
            let code: u32 = match &lookups[j] {
                Some(map) => *map.get(raw.trim()).ok_or_else(|| {
                    csv_err(format!(
                        "row {}: unknown category `{}` for attribute `{}`",
                        line + 1,
                        raw,
                        attr.name
                    ))
                })?,
                None => raw.trim().parse().map_err(|_| {
                    csv_err(format!(
                        "row {}: `{}` is not an integer code for attribute `{}`",
                        line + 1,
                        raw,
                        attr.name
                    ))
                })?,
            };
            if code as usize >= attr.size {
                return Err(csv_err(format!(
                    "row {}: value {} out of domain [0,{}) for attribute `{}`",
                    line + 1,
                    code,
                    attr.size,
                    attr.name
                )));
            }
            row.push(code);
        }
        rows.push(row);
    }
    Ok(Dataset::new(schema, rows)?)
}

/// Writes a dataset as CSV, mapping codes back through the category
/// dictionary when one exists.
pub fn write_csv(
    dataset: &Dataset,
    domain: &DomainFile,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| HarnessError::Csv {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let names: Vec<&str> = domain.attributes.iter().map(|a| a.name.as_str()).collect();
    writer.write_record(&names).map_err(|e| HarnessError::Csv {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    for r in 0..dataset.row_count() {
        let mut record: Vec<String> = Vec::with_capacity(names.len());
        for (j, attr) in domain.attributes.iter().enumerate() {
            let code = dataset.value(r, j);
            match &attr.categories {
                Some(cats) => record.push(cats[code as usize].clone()),
                None => record.push(code.to_string()),
            }
        }
        writer.write_record(&record).map_err(|e| HarnessError::Csv {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_domain() -> DomainFile {
        DomainFile {
            attributes: vec![
                DomainAttribute {
                    name: "gender".into(),
                    size: 2,
                    categories: Some(vec!["male".into(), "female".into()]),
                },
                DomainAttribute {
                    name: "age".into(),
                    size: 3,
                    categories: Some(vec!["10-20".into(), "20-30".into(), "30-40".into()]),
                },
                DomainAttribute {
                    name: "hobby".into(),
                    size: 2,
                    categories: Some(vec!["cook".into(), "basketball".into()]),
                },
            ],
        }
    }

    #[test]
    fn loads_category_coded_table() {
        // The three-record membership example: one male, two female.
        let dir = std::env::temp_dir().join("vertimrf_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("example.csv");
        std::fs::write(
            &path,
            "gender,age,hobby\nmale,20-30,cook\nfemale,20-30,basketball\nfemale,10-20,cook\n",
        )
        .unwrap();
        let data = load_csv(&path, &example_domain()).unwrap();
        assert_eq!(data.row_count(), 3);
        assert_eq!(data.row(0), &[0, 1, 0]);
        assert_eq!(data.row(1), &[1, 1, 1]);
        assert_eq!(data.row(2), &[1, 0, 0]);
    }

    #[test]
    fn empty_file_with_header_is_a_zero_row_dataset() {
        let dir = std::env::temp_dir().join("vertimrf_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.csv");
        std::fs::write(&path, "gender,age,hobby\n").unwrap();
        let data = load_csv(&path, &example_domain()).unwrap();
        assert_eq!(data.row_count(), 0);
    }

    #[test]
    fn out_of_domain_values_name_row_and_attribute() {
        let dir = std::env::temp_dir().join("vertimrf_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        let domain = DomainFile {
            attributes: vec![DomainAttribute {
                name: "x".into(),
                size: 3,
                categories: None,
            }],
        };
        std::fs::write(&path, "x\n1\n7\n").unwrap();
        let err = load_csv(&path, &domain).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("row 2"), "{text}");
        assert!(text.contains("`x`"), "{text}");
    }

    #[test]
    fn csv_roundtrip_preserves_codes() {
        let dir = std::env::temp_dir().join("vertimrf_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let domain = example_domain();
        let schema = domain.schema().unwrap();
        let data = Dataset::new(
            schema,
            vec![vec![0, 2, 1], vec![1, 0, 0]],
        )
        .unwrap();
        write_csv(&data, &domain, &path).unwrap();
        let back = load_csv(&path, &domain).unwrap();
        assert_eq!(back, data);
    }
}
