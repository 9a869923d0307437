//! Dataset CSV files with header `f0,…,f{D-1},label,domain,split`.

use std::path::Path;

use crate::data::{Dataset, DomainTag, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn header(dim: usize) -> Vec<String> {
    (0..dim)
        .map(|i| format!("f{i}"))
        .chain(["label", "domain", "split"].map(String::from))
        .collect()
}

pub fn write_dataset<W: std::io::Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wr.write_record(header(ds.dim())).map_err(io)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].to_string());
        rec.push(ds.domains[i].as_str().into());
        rec.push(ds.splits[i].as_str().into());
        wr.write_record(&rec).map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(f))
}

/// Parses a dataset; the class count is taken as `max(label) + 1`.
pub fn read_dataset<R: std::io::Read>(r: R) -> Result<Dataset> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut records = rd.records();
    let parse_err = |line: u64, msg: String| Error::Parse { line, msg };
    let head = match records.next() {
        Some(rec) => rec.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    let cols: Vec<&str> = head.iter().collect();
    if cols.len() < 3 {
        return Err(parse_err(1, "header too short".into()));
    }
    let dim = cols.len() - 3;
    let expected = header(dim);
    if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(parse_err(
            1,
            format!("header mismatch: expected `{}`", expected.join(",")),
        ));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    let mut splits = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != dim + 3 {
            return Err(parse_err(line, format!("expected {} fields, got {}", dim + 3, rec.len())));
        }
        for (j, v) in rec.iter().take(dim).enumerate() {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| parse_err(line, format!("f{j}: bad number `{v}`")))?,
            );
        }
        labels.push(
            rec[dim]
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("bad label `{}`", &rec[dim])))?,
        );
        domains.push(
            DomainTag::parse(&rec[dim + 1])
                .ok_or_else(|| parse_err(line, format!("bad domain `{}`", &rec[dim + 1])))?,
        );
        splits.push(
            Split::parse(&rec[dim + 2])
                .ok_or_else(|| parse_err(line, format!("bad split `{}`", &rec[dim + 2])))?,
        );
    }
    let n = labels.len();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(n, dim, data)?, labels, domains, splits, classes)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}
