//! CSV exchange formats for precomputed inputs.
//!
//! Estimates: columns `label,estimate` and optionally `must_equal`, main
//! specification first. Covariance: a header row of labels followed by the
//! square matrix, one row per label in the same order. Numbers are written
//! in shortest round-trip form, so a write/read cycle is exact.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatesTable {
    pub labels: Vec<String>,
    pub theta: Vec<f64>,
    pub must_equal: Vec<bool>,
}

fn parse_number(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::InvalidData(format!("{what}: \"{field}\" is not a finite number")))
}

fn parse_flag(field: &str) -> Result<bool> {
    match field.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "no" => Ok(false),
        "1" | "true" | "yes" => Ok(true),
        other => Err(Error::InvalidData(format!("must_equal: \"{other}\" is not a boolean"))),
    }
}

pub fn read_estimates_csv<R: Read>(input: R) -> Result<EstimatesTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_col = find("label").ok_or_else(|| Error::InvalidData("estimates need a \"label\" column".into()))?;
    let est_col = find("estimate").ok_or_else(|| Error::InvalidData("estimates need an \"estimate\" column".into()))?;
    let eq_col = find("must_equal");
    let mut table = EstimatesTable { labels: Vec::new(), theta: Vec::new(), must_equal: Vec::new() };
    for record in rdr.records() {
        let record = record?;
        table.labels.push(record.get(label_col).unwrap_or("").to_string());
        table.theta.push(parse_number(record.get(est_col).unwrap_or(""), "estimate")?);
        table.must_equal.push(match eq_col {
            Some(c) => parse_flag(record.get(c).unwrap_or(""))?,
            None => false,
        });
    }
    if table.theta.len() < 2 {
        return Err(Error::InvalidData("need a main estimate and at least one check".into()));
    }
    Ok(table)
}

pub fn write_estimates_csv<W: Write>(table: &EstimatesTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "estimate", "must_equal"])?;
    for ((l, t), e) in table.labels.iter().zip(&table.theta).zip(&table.must_equal) {
        w.write_record([l.clone(), t.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a labelled covariance matrix; returns the labels and the matrix.
pub fn read_cov_csv<R: Read>(input: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let labels: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let k = labels.len();
    let mut values = Vec::with_capacity(k * k);
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        if record.len() != k {
            return Err(Error::InvalidData(format!("covariance row {} has {} entries, expected {k}", rows + 1, record.len())));
        }
        for f in record.iter() {
            values.push(parse_number(f, "covariance")?);
        }
        rows += 1;
    }
    if rows != k {
        return Err(Error::InvalidData(format!("covariance has {rows} rows for {k} labels")));
    }
    Ok((labels, DMatrix::from_row_slice(k, k, &values)))
}

pub fn write_cov_csv<W: Write>(labels: &[String], cov: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(labels)?;
    for i in 0..cov.nrows() {
        w.write_record(cov.row(i).iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
