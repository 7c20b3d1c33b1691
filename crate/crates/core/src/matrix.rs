//! Expression matrix loading, validation and normalization.
//!
//! A matrix is `m` cells by `n` genes, stored row-major. Raw matrices hold
//! nonnegative expression levels; normalized matrices may hold any finite
//! real. The on-disk layout is a delimited text file whose header starts with
//! the literal `cell_id` followed by gene names, one cell per row.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Tsv,
}

impl TableFormat {
    pub fn delimiter(self) -> u8 {
        match self {
            TableFormat::Csv => b',',
            TableFormat::Tsv => b'\t',
        }
    }

    /// Guess from a file extension; anything that is not `.tsv`/`.tab` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") || ext.eq_ignore_ascii_case("tab") => {
                TableFormat::Tsv
            }
            _ => TableFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMethod {
    #[default]
    Log1pZscore,
    Log1pOnly,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub method: NormalizationMethod,
    pub per_gene: bool,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            method: NormalizationMethod::Log1pZscore,
            per_gene: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    values: Vec<f64>,
    cell_ids: Vec<String>,
    gene_names: Vec<String>,
    normalized: bool,
    cell_lookup: HashMap<String, usize>,
    gene_lookup: HashMap<String, usize>,
}

fn index_unique(names: &[String]) -> Result<HashMap<String, usize>> {
    let mut lookup = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if lookup.insert(name.clone(), i).is_some() {
            return Err(Error::DuplicateId(name.clone()));
        }
    }
    Ok(lookup)
}

impl ExpressionMatrix {
    /// Build a raw (unnormalized) matrix from row-major values.
    pub fn new(cell_ids: Vec<String>, gene_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        Self::build(cell_ids, gene_names, values, false)
    }

    /// Build a matrix that is already normalized (values may be negative).
    pub fn new_normalized(
        cell_ids: Vec<String>,
        gene_names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::build(cell_ids, gene_names, values, true)
    }

    fn build(
        cell_ids: Vec<String>,
        gene_names: Vec<String>,
        values: Vec<f64>,
        normalized: bool,
    ) -> Result<Self> {
        if cell_ids.is_empty() || gene_names.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        let n = gene_names.len();
        if values.len() != cell_ids.len() * n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {}x{} matrix",
                values.len(),
                cell_ids.len(),
                n
            )));
        }
        for (idx, &v) in values.iter().enumerate() {
            if !v.is_finite() || (!normalized && v < 0.0) {
                return Err(Error::NegativeValue {
                    line: idx / n + 2,
                    column: idx % n + 2,
                    value: v.to_string(),
                });
            }
        }
        let cell_lookup = index_unique(&cell_ids)?;
        let gene_lookup = index_unique(&gene_names)?;
        Ok(Self {
            values,
            cell_ids,
            gene_names,
            normalized,
            cell_lookup,
            gene_lookup,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, cell: usize, gene: usize) -> f64 {
        self.values[cell * self.n_genes() + gene]
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        let n = self.n_genes();
        &self.values[cell * n..(cell + 1) * n]
    }

    pub fn column(&self, gene: usize) -> Vec<f64> {
        (0..self.n_cells()).map(|c| self.get(c, gene)).collect()
    }

    pub fn cell_index(&self, id: &str) -> Option<usize> {
        self.cell_lookup.get(id).copied()
    }

    pub fn gene_index(&self, name: &str) -> Option<usize> {
        self.gene_lookup.get(name).copied()
    }

    pub fn require_gene(&self, name: &str) -> Result<usize> {
        self.gene_index(name)
            .ok_or_else(|| Error::UnknownGene(name.to_string()))
    }

    /// Parse a delimited table. Line numbers in errors are 1-based file lines.
    pub fn read<R: Read>(reader: R, format: TableFormat) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(format.delimiter())
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut records = rdr.records();

        let header = match records.next() {
            Some(rec) => rec?,
            None => return Err(Error::EmptyMatrix),
        };
        if header.get(0).map(str::trim) != Some("cell_id") {
            return Err(Error::BadHeader);
        }
        let gene_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let n = gene_names.len();

        let mut cell_ids = Vec::new();
        let mut values = Vec::new();
        for rec in records {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != n + 1 {
                return Err(Error::RaggedRow {
                    line,
                    expected: n + 1,
                    found: rec.len(),
                });
            }
            cell_ids.push(rec[0].trim().to_string());
            for (j, field) in rec.iter().enumerate().skip(1) {
                let field = field.trim();
                let v: f64 = match field.parse() {
                    Ok(v) if f64::is_finite(v) => v,
                    _ => {
                        return Err(Error::NonNumericCell {
                            line,
                            column: j + 1,
                            value: field.to_string(),
                        })
                    }
                };
                if v < 0.0 {
                    return Err(Error::NegativeValue {
                        line,
                        column: j + 1,
                        value: field.to_string(),
                    });
                }
                values.push(v);
            }
        }
        Self::new(cell_ids, gene_names, values)
    }

    pub fn load(path: impl AsRef<Path>, format: TableFormat) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read(std::io::BufReader::new(file), format)
    }

    /// Write in the same layout `read` accepts. Values use the shortest
    /// representation that parses back to the identical `f64`.
    pub fn write<W: Write>(&self, writer: W, format: TableFormat) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .delimiter(format.delimiter())
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header = Vec::with_capacity(self.n_genes() + 1);
        header.push("cell_id".to_string());
        header.extend(self.gene_names.iter().cloned());
        wtr.write_record(&header)?;
        for (c, id) in self.cell_ids.iter().enumerate() {
            let mut rec = Vec::with_capacity(self.n_genes() + 1);
            rec.push(id.clone());
            rec.extend(self.row(c).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, format: TableFormat) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write(std::io::BufWriter::new(file), format)
    }

    pub fn normalize(&self, spec: &NormalizationSpec) -> Result<Self> {
        if self.normalized {
            return Err(Error::AlreadyNormalized);
        }
        let m = self.n_cells();
        let n = self.n_genes();
        let mut values = self.values.clone();
        if spec.method != NormalizationMethod::None {
            for v in values.iter_mut() {
                *v = v.ln_1p();
            }
        }
        if spec.method == NormalizationMethod::Log1pZscore {
            if spec.per_gene {
                for g in 0..n {
                    let col = (0..m).map(|c| values[c * n + g]);
                    let (mean, sd) = mean_sd(col);
                    for c in 0..m {
                        let v = &mut values[c * n + g];
                        *v = if sd > ZERO_VARIANCE { (*v - mean) / sd } else { 0.0 };
                    }
                }
            } else {
                let (mean, sd) = mean_sd(values.iter().copied());
                for v in values.iter_mut() {
                    *v = if sd > ZERO_VARIANCE { (*v - mean) / sd } else { 0.0 };
                }
            }
        }
        Ok(Self {
            values,
            cell_ids: self.cell_ids.clone(),
            gene_names: self.gene_names.clone(),
            normalized: true,
            cell_lookup: self.cell_lookup.clone(),
            gene_lookup: self.gene_lookup.clone(),
        })
    }

    /// Matrix restricted to the given cells, in the given order.
    pub fn select_cells(&self, indices: &[usize]) -> Result<Self> {
        let m = self.n_cells();
        let mut values = Vec::with_capacity(indices.len() * self.n_genes());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= m {
                return Err(Error::IndexOutOfRange { index: i, len: m });
            }
            values.extend_from_slice(self.row(i));
            ids.push(self.cell_ids[i].clone());
        }
        Self::build(ids, self.gene_names.clone(), values, self.normalized)
    }

    pub fn validate(&self) -> ValidationReport {
        let m = self.n_cells();
        let n = self.n_genes();
        let zero_variance_genes = (0..n)
            .filter(|&g| {
                let first = self.get(0, g);
                (1..m).all(|c| self.get(c, g) == first)
            })
            .map(|g| self.gene_names[g].clone())
            .collect();
        let zero_cells = (0..m)
            .filter(|&c| self.row(c).iter().all(|&v| v == 0.0))
            .map(|c| self.cell_ids[c].clone())
            .collect();
        let (mean, sd) = mean_sd(self.values.iter().copied());
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let zeros = self.values.iter().filter(|&&v| v == 0.0).count();
        ValidationReport {
            n_cells: m,
            n_genes: n,
            normalized: self.normalized,
            zero_variance_genes,
            zero_cells,
            min,
            max,
            mean,
            sd,
            zero_fraction: zeros as f64 / self.values.len() as f64,
        }
    }
}

const ZERO_VARIANCE: f64 = 1e-12;

/// Mean and population standard deviation.
pub(crate) fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        count += 1;
    }
    if count == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / count as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_cells: usize,
    pub n_genes: usize,
    pub normalized: bool,
    pub zero_variance_genes: Vec<String>,
    pub zero_cells: Vec<String>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub sd: f64,
    pub zero_fraction: f64,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.zero_variance_genes.is_empty() && self.zero_cells.is_empty()
    }
}

/// Indices of `wanted` ids in the matrix, failing on the first unknown id or
/// on a repeated id.
pub fn resolve_cells(matrix: &ExpressionMatrix, wanted: &[String]) -> Result<Vec<usize>> {
    let mut seen = HashSet::with_capacity(wanted.len());
    wanted
        .iter()
        .map(|id| {
            let idx = matrix
                .cell_index(id)
                .ok_or_else(|| Error::UnknownCell(id.clone()))?;
            if !seen.insert(idx) {
                return Err(Error::DuplicateId(id.clone()));
            }
            Ok(idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExpressionMatrix> {
        ExpressionMatrix::read(text.as_bytes(), TableFormat::Csv)
    }

    #[test]
    fn parses_small_file() {
        let m = parse("cell_id,gA,gB\nc1,1,2\nc2,3,4\n").unwrap();
        assert_eq!(m.n_cells(), 2);
        assert_eq!(m.n_genes(), 2);
        assert_eq!(m.gene_names(), &["gA", "gB"]);
        assert_eq!(m.values(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(!m.is_normalized());
    }

    #[test]
    fn tsv_layout() {
        let m = ExpressionMatrix::read("cell_id\tg1\nx\t0.5\n".as_bytes(), TableFormat::Tsv).unwrap();
        assert_eq!(m.get(0, 0), 0.5);
    }

    #[test]
    fn ragged_row_names_line() {
        let err = parse("cell_id,gA,gB\nc1,1,2\nc2,3\n").unwrap_err();
        match err {
            Error::RaggedRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_value_rejected() {
        let err = parse("cell_id,gA\nc1,-1\n").unwrap_err();
        assert_eq!(err.code(), "NegativeValue");
    }

    #[test]
    fn non_numeric_and_duplicates() {
        assert_eq!(parse("cell_id,gA\nc1,abc\n").unwrap_err().code(), "NonNumericCell");
        assert_eq!(parse("cell_id,gA\nc1,nan\n").unwrap_err().code(), "NonNumericCell");
        assert_eq!(parse("cell_id,gA\nc1,1\nc1,2\n").unwrap_err().code(), "DuplicateId");
        assert_eq!(parse("cell_id,gA,gA\nc1,1,2\n").unwrap_err().code(), "DuplicateId");
        assert_eq!(parse("cell_id,gA\n").unwrap_err().code(), "EmptyMatrix");
        assert_eq!(parse("").unwrap_err().code(), "EmptyMatrix");
        assert_eq!(parse("id,gA\nc1,1\n").unwrap_err().code(), "BadHeader");
    }

    #[test]
    fn log1p_only_column() {
        let e = std::f64::consts::E;
        let m = ExpressionMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["g".into()],
            vec![0.0, e - 1.0],
        )
        .unwrap();
        let spec = NormalizationSpec {
            method: NormalizationMethod::Log1pOnly,
            per_gene: true,
        };
        let out = m.normalize(&spec).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
        assert!((out.get(1, 0) - 1.0).abs() < 1e-15);
        assert!(out.is_normalized());
    }

    #[test]
    fn zscore_zero_variance_and_unit_matrix() {
        let m = ExpressionMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["const".into(), "var".into()],
            vec![5.0, 0.0, 5.0, 1.0, 5.0, 7.0],
        )
        .unwrap();
        let out = m.normalize(&NormalizationSpec::default()).unwrap();
        assert_eq!(out.column(0), vec![0.0, 0.0, 0.0]);
        let (mean, sd) = mean_sd(out.column(1).into_iter());
        assert!(mean.abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-12);

        let one = ExpressionMatrix::new(vec!["a".into()], vec!["g".into()], vec![0.0]).unwrap();
        let out = one.normalize(&NormalizationSpec::default()).unwrap();
        assert_eq!(out.values(), &[0.0]);
    }

    #[test]
    fn normalize_twice_rejected() {
        let m = parse("cell_id,gA\nc1,1\nc2,2\n").unwrap();
        let once = m.normalize(&NormalizationSpec::default()).unwrap();
        assert_eq!(
            once.normalize(&NormalizationSpec::default()).unwrap_err().code(),
            "AlreadyNormalized"
        );
    }

    #[test]
    fn validation_report() {
        let m = parse("cell_id,flat,gB\nc1,2,0\nc2,2,3\nc3,2,1\n").unwrap();
        let r = m.validate();
        assert_eq!(r.zero_variance_genes, vec!["flat".to_string()]);
        assert!(r.zero_cells.is_empty());

        let m = parse("cell_id,gA,gB\nc1,1,2\nc2,3,5\n").unwrap();
        assert!(m.validate().is_clean());

        let m = parse("cell_id,gA,gB\nc1,1,2\nzero,0,0\n").unwrap();
        assert_eq!(m.validate().zero_cells, vec!["zero".to_string()]);
    }

    #[test]
    fn select_cells_checks_range() {
        let m = parse("cell_id,gA\nc1,1\nc2,2\n").unwrap();
        let sub = m.select_cells(&[1]).unwrap();
        assert_eq!(sub.cell_ids(), &["c2"]);
        assert_eq!(m.select_cells(&[2]).unwrap_err().code(), "IndexOutOfRange");
    }
}
