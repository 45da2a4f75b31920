//! Observation CSV: one row per cell, `source_id,idx_1,...,idx_k,value`.
//!
//! An optional header row whose first field is `source_id` is skipped, as are
//! blank lines and lines starting with `#`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build_schema, DataSource, Schema, SchemaConfig, SourceId};
use crate::error::{Error, Result};

/// Parses observation rows against a declared layout and validates the result.
pub fn read_observations<R: Read>(
    reader: R,
    config: &SchemaConfig,
    origin: &str,
) -> Result<Schema> {
    let mut sources: Vec<DataSource> = config
        .sources
        .iter()
        .cloned()
        .map(DataSource::new)
        .collect();
    let slot: HashMap<SourceId, usize> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id(), i))
        .collect();
    let dims: HashMap<usize, usize> = config.fibers.iter().map(|f| (f.id, f.dim)).collect();

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);

    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };

    let mut index = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line() as usize);
        if std::mem::take(&mut first) && record.get(0) == Some("source_id") {
            continue;
        }
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let sid: SourceId = record
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(|_| parse_err(line, format!("bad source id {:?}", record.get(0))))?;
        let &pos = slot
            .get(&sid)
            .ok_or_else(|| parse_err(line, format!("undeclared source id {sid}")))?;
        let src = &mut sources[pos];
        let order = src.order();
        if record.len() != order + 2 {
            return Err(parse_err(
                line,
                format!(
                    "source {sid} has order {order}; expected {} fields, found {}",
                    order + 2,
                    record.len()
                ),
            ));
        }
        index.clear();
        for (j, field) in record.iter().skip(1).take(order).enumerate() {
            let i: usize = field
                .parse()
                .map_err(|_| parse_err(line, format!("bad index {field:?}")))?;
            let fiber = src.fibers()[j];
            // Unknown fibers are reported by build_schema.
            if let Some(&dim) = dims.get(&fiber) {
                if i >= dim {
                    return Err(parse_err(
                        line,
                        format!("index {i} out of range for fiber {fiber} (dim {dim})"),
                    ));
                }
            }
            index.push(i);
        }
        let raw = &record[order + 1];
        let value: f64 = raw
            .parse()
            .map_err(|_| parse_err(line, format!("bad value {raw:?}")))?;
        if !value.is_finite() {
            return Err(parse_err(line, format!("non-finite value {raw:?}")));
        }
        src.push(&index, value)?;
    }
    build_schema(config.fibers.clone(), sources)
}

pub fn load_observations_csv(path: impl AsRef<Path>, config: &SchemaConfig) -> Result<Schema> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_observations(BufReader::new(file), config, &path.display().to_string())
}

/// Writes every cell of every source. `f64` values use the shortest
/// representation that parses back to the identical bits.
pub fn write_observations<W: Write>(writer: W, schema: &Schema) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for src in schema.sources() {
        for (idx, value) in src.iter() {
            write!(w, "{}", src.id())?;
            for i in idx {
                write!(w, ",{i}")?;
            }
            writeln!(w, ",{value:?}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_observations_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<()> {
    write_observations(File::create(path)?, schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs_store::{FiberSpec, SourceSpec};
    use proptest::prelude::*;

    fn config() -> SchemaConfig {
        SchemaConfig {
            fibers: vec![
                FiberSpec {
                    id: 0,
                    label: "user".into(),
                    dim: 4,
                },
                FiberSpec {
                    id: 1,
                    label: "top".into(),
                    dim: 3,
                },
                FiberSpec {
                    id: 2,
                    label: "bottom".into(),
                    dim: 3,
                },
            ],
            sources: vec![
                SourceSpec::new(1, "utb", &[0, 1, 2]),
                SourceSpec::new(2, "ut", &[0, 1]),
            ],
        }
    }

    fn parse(text: &str) -> Result<Schema> {
        read_observations(text.as_bytes(), &config(), "test.csv")
    }

    #[test]
    fn parses_a_utb_row() {
        let schema = parse("1,0,0,0,3.5\n").unwrap();
        let src = schema.source(1).unwrap();
        assert_eq!(src.len(), 1);
        assert_eq!(src.index(0), &[0, 0, 0]);
        assert_eq!(src.value(0), 3.5);
    }

    #[test]
    fn skips_header_comments_and_blank_lines() {
        let schema = parse("source_id,i,j,k,value\n# note\n\n2,3,2,-1e-3\n1,1,2,0,4\n").unwrap();
        assert_eq!(schema.source(2).unwrap().len(), 1);
        assert_eq!(schema.source(1).unwrap().len(), 1);
    }

    #[test]
    fn rejects_out_of_range_index_with_line_number() {
        let err = parse("1,0,0,0,1\n1,0,3,0,1\n").unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("out of range"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_rows() {
        for bad in [
            "1,0,0,1\n",
            "2,0,0,0,1\n",
            "9,0,0,1\n",
            "x,0,0,1\n",
            "2,0,a,1\n",
            "2,0,0,nan\n",
            "2,0,0,\n",
            "2,-1,0,1\n",
        ] {
            assert!(parse(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn rejects_duplicate_cell() {
        assert!(parse("2,1,1,1\n2,1,1,2\n").is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_preserves_cells(
            cells in proptest::collection::btree_map((0usize..4, 0usize..3), -1e6f64..1e6, 0..12),
        ) {
            let mut src = DataSource::new(SourceSpec::new(2, "ut", &[0, 1]));
            for (&(i, j), &v) in &cells {
                src.push(&[i, j], v).unwrap();
            }
            let mut cfg = config();
            cfg.sources.truncate(2);
            let schema = build_schema(cfg.fibers.clone(), vec![
                DataSource::new(SourceSpec::new(1, "utb", &[0, 1, 2])),
                src,
            ]).unwrap();
            let mut buf = Vec::new();
            write_observations(&mut buf, &schema).unwrap();
            let back = read_observations(buf.as_slice(), &cfg, "mem").unwrap();
            prop_assert_eq!(back, schema);
        }
    }
}
