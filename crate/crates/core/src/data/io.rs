//! The `.ncdcsv` text format.
//!
//! ```text
//! # dim=<d> known=<C^l> novel=<C^u> seed=<s>
//! SPLIT_FLAG,label,f0,...,f{d-1}
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so save/load is
//! bit-exact.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    writeln!(
        w,
        "# dim={} known={} novel={} seed={}",
        dataset.dim(),
        dataset.num_known(),
        dataset.num_novel(),
        dataset.seed()
    )?;
    for i in 0..dataset.len() {
        write!(w, "{},{}", dataset.splits[i], dataset.labels[i])?;
        for v in dataset.features().row(i) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::file(parent))?;
    }
    write_dataset(dataset, BufWriter::new(File::create(path).map_err(Error::file(path))?))
}

struct Header {
    dim: usize,
    known: usize,
    novel: usize,
    seed: u64,
}

fn parse_header(line: &str) -> Result<Header> {
    let err = |detail: String| Error::Parse { line: 1, detail };
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| err(format!("expected header line, got {line:?}")))?;
    let (mut dim, mut known, mut novel, mut seed) = (None, None, None, None);
    for field in body.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header field {field:?}")))?;
        let bad = || err(format!("invalid header value {field:?}"));
        match k {
            "dim" => dim = Some(v.parse().map_err(|_| bad())?),
            "known" => known = Some(v.parse().map_err(|_| bad())?),
            "novel" => novel = Some(v.parse().map_err(|_| bad())?),
            "seed" => seed = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(err(format!("unknown header field {k:?}"))),
        }
    }
    match (dim, known, novel, seed) {
        (Some(dim), Some(known), Some(novel), Some(seed)) => Ok(Header { dim, known, novel, seed }),
        _ => Err(err("header must define dim, known, novel and seed".into())),
    }
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(Error::Empty("dataset file")),
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break parse_header(line.trim())?;
                }
            }
        }
    };
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (n, line) in lines {
        let line = line?;
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| Error::Parse { line: line_no, detail };
        let mut fields = line.split(',');
        let split: Split = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e: Error| err(e.to_string()))?;
        let label_field = fields.next().ok_or_else(|| err("missing label".into()))?;
        let label: usize = label_field
            .trim()
            .parse()
            .map_err(|_| err(format!("invalid label {label_field:?}")))?;
        let row: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>().map_err(|_| err(format!("invalid feature {f:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != header.dim {
            return Err(err(format!(
                "row has {} features but the header declares dim={}",
                row.len(),
                header.dim
            )));
        }
        features.extend(row);
        labels.push(label);
        splits.push(split);
    }
    if labels.is_empty() {
        return Err(Error::Empty("dataset file has no samples"));
    }
    let n = labels.len();
    Dataset::new(
        Tensor::matrix(n, header.dim, features)?,
        labels,
        splits,
        header.known,
        header.novel,
        header.seed,
    )
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path).map_err(Error::file(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = SyntheticSpec {
            samples_per_class: 5,
            test_samples_per_class: 3,
            ..SyntheticSpec::default()
        };
        let (d, _) = generate(&spec).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(d, back);
        assert!(String::from_utf8(buf).unwrap().starts_with("# dim=16 known=10 novel=5 seed=0\n"));
    }

    #[test]
    fn dimension_mismatch_names_row() {
        let text = "# dim=3 known=1 novel=1 seed=0\nLABELED_KNOWN,0,1,2,3\nTEST_NOVEL,1,1,2,3,4\n";
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, detail }) => {
                assert_eq!(line, 3);
                assert!(detail.contains("dim=3"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_malformed_inputs() {
        assert!(matches!(read_dataset("".as_bytes()), Err(Error::Empty(_))));
        assert!(matches!(
            read_dataset("# dim=1 known=1 novel=1 seed=0\n".as_bytes()),
            Err(Error::Empty(_))
        ));
        let bad_flag = "# dim=1 known=1 novel=1 seed=0\nWHATEVER,0,1\n";
        assert!(matches!(read_dataset(bad_flag.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let bad_num = "# dim=1 known=1 novel=1 seed=0\nLABELED_KNOWN,0,abc\n";
        assert!(matches!(read_dataset(bad_num.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(read_dataset("LABELED_KNOWN,0,1\n".as_bytes()).is_err());
    }
}
