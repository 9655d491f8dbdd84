//! Entropy upper bound, compression ratios and batch statistics.
//!
//! All rates are in bits per character, where a character is one input
//! byte. Standard deviations use the population formula (divide by the
//! number of batches).

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::token::{chars_per_token, TokenStream};

/// Measurements for one token stream. Codec sizes are `None` when that codec
/// was not run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamMetrics {
    pub n_chars: u64,
    pub n_tokens: u64,
    /// `Σ log₂(PMF_TOTAL / wᵢ(xᵢ))`.
    pub cross_entropy_bits: f64,
    /// Rank varints after DEFLATE, payload bits.
    pub rank_bits: Option<u64>,
    /// `Σ ⌈log₂(PMF_TOTAL / wᵢ)⌉`, the per-token code length total.
    pub tbyt_bits: Option<u64>,
    /// Token-by-token payload including the padding of the last byte.
    pub tbyt_emitted_bits: Option<u64>,
    pub ac_bits: Option<u64>,
    /// DEFLATE at maximum level applied directly to the text.
    pub deflate_bits: Option<u64>,
}

impl StreamMetrics {
    pub fn h_ub_bpc(&self) -> Result<f64> {
        if self.n_chars == 0 {
            return Err(Error::UndefinedStatistic("entropy bound of an empty stream"));
        }
        Ok(self.cross_entropy_bits / self.n_chars as f64)
    }

    pub fn h_ub_bits_per_token(&self) -> Result<f64> {
        if self.n_tokens == 0 {
            return Err(Error::UndefinedStatistic("entropy bound of an empty stream"));
        }
        Ok(self.cross_entropy_bits / self.n_tokens as f64)
    }

    /// `E[B]` estimate `N_c / N_T`.
    pub fn mean_chars_per_token(&self) -> Result<Ratio<u64>> {
        chars_per_token(self.n_chars, self.n_tokens)
    }

    pub fn bits(&self, column: Column) -> Option<f64> {
        match column {
            Column::Hub => Some(self.cross_entropy_bits),
            Column::Rank => self.rank_bits.map(|b| b as f64),
            Column::Tbyt => self.tbyt_bits.map(|b| b as f64),
            Column::TbytEmitted => self.tbyt_emitted_bits.map(|b| b as f64),
            Column::Ac => self.ac_bits.map(|b| b as f64),
            Column::Deflate => self.deflate_bits.map(|b| b as f64),
        }
    }

    /// Rate of one column in bpc; `Ok(None)` if that codec was not run.
    pub fn rate(&self, column: Column) -> Result<Option<f64>> {
        match self.bits(column) {
            None => Ok(None),
            Some(_) if self.n_chars == 0 => {
                Err(Error::UndefinedStatistic("rate of an empty stream"))
            }
            Some(bits) => Ok(Some(bits / self.n_chars as f64)),
        }
    }

    /// Sums counts and bit totals; a codec column survives only if every
    /// input has it.
    pub fn pooled<'a, I: IntoIterator<Item = &'a StreamMetrics>>(rows: I) -> StreamMetrics {
        fn add(acc: Option<u64>, x: Option<u64>) -> Option<u64> {
            Some(acc? + x?)
        }
        let mut total = StreamMetrics {
            rank_bits: Some(0),
            tbyt_bits: Some(0),
            tbyt_emitted_bits: Some(0),
            ac_bits: Some(0),
            deflate_bits: Some(0),
            ..StreamMetrics::default()
        };
        for r in rows {
            total.n_chars += r.n_chars;
            total.n_tokens += r.n_tokens;
            total.cross_entropy_bits += r.cross_entropy_bits;
            total.rank_bits = add(total.rank_bits, r.rank_bits);
            total.tbyt_bits = add(total.tbyt_bits, r.tbyt_bits);
            total.tbyt_emitted_bits = add(total.tbyt_emitted_bits, r.tbyt_emitted_bits);
            total.ac_bits = add(total.ac_bits, r.ac_bits);
            total.deflate_bits = add(total.deflate_bits, r.deflate_bits);
        }
        total
    }
}

/// One reported rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Column {
    Hub,
    Rank,
    Tbyt,
    TbytEmitted,
    Ac,
    Deflate,
}

impl Column {
    pub const ALL: [Column; 6] = [
        Column::Hub,
        Column::Rank,
        Column::Tbyt,
        Column::TbytEmitted,
        Column::Ac,
        Column::Deflate,
    ];

    /// Machine-readable name used in CSV headers.
    pub fn key(self) -> &'static str {
        match self {
            Column::Hub => "h_ub_bpc",
            Column::Rank => "rho_rank_bpc",
            Column::Tbyt => "rho_tbyt_bpc",
            Column::TbytEmitted => "rho_tbyt_emitted_bpc",
            Column::Ac => "rho_ac_bpc",
            Column::Deflate => "rho_deflate_bpc",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Column::Hub => "H_ub (bpc)",
            Column::Rank => "ρ rank+deflate (bpc)",
            Column::Tbyt => "ρ tbyt (bpc)",
            Column::TbytEmitted => "ρ tbyt emitted (bpc)",
            Column::Ac => "ρ ac (bpc)",
            Column::Deflate => "ρ deflate only (bpc)",
        }
    }
}

/// `N_b / N_c`.
pub fn compression_ratio(n_bits: u64, n_chars: u64) -> Result<f64> {
    if n_chars == 0 {
        return Err(Error::UndefinedStatistic("compression ratio with zero characters"));
    }
    Ok(n_bits as f64 / n_chars as f64)
}

/// Runs `predictor` (fresh) over `stream` and accumulates the code length
/// `Σ log₂(PMF_TOTAL / wᵢ(xᵢ))`. Codec columns are left empty.
pub fn estimate_h_ub<P: Predictor + ?Sized>(
    stream: &TokenStream,
    predictor: &mut P,
) -> Result<StreamMetrics> {
    if stream.n_chars() == 0 {
        return Err(Error::UndefinedStatistic("entropy bound of an empty stream"));
    }
    let mut bits = 0.0;
    for &t in stream.ids() {
        bits += predictor.predict()?.information_bits(t);
        predictor.update(t)?;
    }
    Ok(StreamMetrics {
        n_chars: stream.n_chars(),
        n_tokens: stream.n_tokens() as u64,
        cross_entropy_bits: bits,
        ..StreamMetrics::default()
    })
}

/// Population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::UndefinedStatistic("statistics of an empty batch set"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }

    /// `0.7093 ± 0.0228` with `digits` decimals.
    pub fn format(&self, digits: usize) -> String {
        format!("{:.digits$} ± {:.digits$}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub rows: Vec<StreamMetrics>,
    /// Columns present in every row, in [`Column::ALL`] order.
    pub columns: Vec<Column>,
    /// Per-column mean and std of the per-batch rates.
    pub stats: Vec<Summary>,
    /// Sum over batches; its rates weight each batch by its characters.
    pub pooled: StreamMetrics,
}

pub fn batch_stats(rows: Vec<StreamMetrics>) -> Result<BatchReport> {
    if rows.is_empty() {
        return Err(Error::UndefinedStatistic("statistics of an empty batch set"));
    }
    let columns: Vec<Column> = Column::ALL
        .into_iter()
        .filter(|&c| rows.iter().all(|r| r.bits(c).is_some()))
        .collect();
    let mut stats = Vec::with_capacity(columns.len());
    for &c in &columns {
        let values = rows
            .iter()
            .map(|r| Ok(r.rate(c)?.expect("column present")))
            .collect::<Result<Vec<f64>>>()?;
        stats.push(Summary::of(&values)?);
    }
    let pooled = StreamMetrics::pooled(&rows);
    Ok(BatchReport {
        rows,
        columns,
        stats,
        pooled,
    })
}

impl BatchReport {
    pub fn summary(&self, column: Column) -> Option<Summary> {
        let i = self.columns.iter().position(|&c| c == column)?;
        Some(self.stats[i])
    }

    /// Per-batch rows, then the pooled total and the batch mean ± std.
    pub fn table(&self) -> Table {
        let mut header = vec!["batch".to_string(), "N_c".into(), "N_T".into()];
        header.extend(self.columns.iter().map(|c| c.label().to_string()));
        let mut keys = vec!["batch".to_string(), "n_chars".into(), "n_tokens".into()];
        keys.extend(self.columns.iter().map(|c| c.key().to_string()));
        let mut rows = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            rows.push(self.metrics_row((i + 1).to_string(), r));
        }
        rows.push(self.metrics_row("total (pooled)".into(), &self.pooled));
        let mut mean = vec![
            Cell::text("mean ± std"),
            Cell::Empty,
            Cell::Empty,
        ];
        mean.extend(self.stats.iter().map(|&s| Cell::Stat(s)));
        rows.push(mean);
        Table {
            header,
            keys,
            rows,
            notes: vec![format!(
                "± is the population standard deviation over {} batches; total (pooled) divides summed bits by summed characters",
                self.rows.len()
            )],
        }
    }

    fn metrics_row(&self, label: String, r: &StreamMetrics) -> Vec<Cell> {
        let mut row = vec![Cell::Text(label), Cell::Count(r.n_chars), Cell::Count(r.n_tokens)];
        row.extend(
            self.columns
                .iter()
                .map(|&c| r.rate(c).ok().flatten().map_or(Cell::Empty, Cell::Rate)),
        );
        row
    }
}

/// Memory sweep: one [`BatchReport`] per value of `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub entries: Vec<(usize, BatchReport)>,
}

impl SweepReport {
    /// Pooled rates per `M`.
    pub fn totals_table(&self) -> Table {
        let columns = self.common_columns();
        let mut header = vec!["M".to_string(), "N_c".into(), "N_T".into()];
        header.extend(columns.iter().map(|c| c.label().to_string()));
        let mut keys = vec!["memory".to_string(), "n_chars".into(), "n_tokens".into()];
        keys.extend(columns.iter().map(|c| c.key().to_string()));
        let rows = self
            .entries
            .iter()
            .map(|(m, rep)| {
                let p = &rep.pooled;
                let mut row = vec![Cell::Count(*m as u64), Cell::Count(p.n_chars), Cell::Count(p.n_tokens)];
                row.extend(
                    columns
                        .iter()
                        .map(|&c| p.rate(c).ok().flatten().map_or(Cell::Empty, Cell::Rate)),
                );
                row
            })
            .collect();
        Table {
            header,
            keys,
            rows,
            notes: vec!["rates divide summed bits by summed characters over all batches".into()],
        }
    }

    /// Batch mean ± std per `M`.
    pub fn stats_table(&self) -> Table {
        let columns = self.common_columns();
        let mut header = vec!["M".to_string()];
        header.extend(columns.iter().map(|c| c.label().to_string()));
        let mut keys = vec!["memory".to_string()];
        keys.extend(columns.iter().map(|c| c.key().to_string()));
        let rows = self
            .entries
            .iter()
            .map(|(m, rep)| {
                let mut row = vec![Cell::Count(*m as u64)];
                row.extend(
                    columns
                        .iter()
                        .map(|&c| rep.summary(c).map_or(Cell::Empty, Cell::Stat)),
                );
                row
            })
            .collect();
        let n = self.entries.first().map_or(0, |(_, r)| r.rows.len());
        Table {
            header,
            keys,
            rows,
            notes: vec![format!(
                "± is the population standard deviation over {n} batches"
            )],
        }
    }

    fn common_columns(&self) -> Vec<Column> {
        Column::ALL
            .into_iter()
            .filter(|c| self.entries.iter().all(|(_, r)| r.columns.contains(c)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Empty,
    Text(String),
    Count(u64),
    Rate(f64),
    Stat(Summary),
}

impl Cell {
    fn text(s: &str) -> Self {
        Cell::Text(s.to_string())
    }

    fn csv(&self) -> Vec<String> {
        match self {
            Cell::Empty => vec![String::new()],
            Cell::Text(s) => vec![s.clone()],
            Cell::Count(n) => vec![n.to_string()],
            Cell::Rate(x) => vec![format!("{x:.10}")],
            Cell::Stat(s) => vec![format!("{:.10}", s.mean), format!("{:.10}", s.std)],
        }
    }

    fn display(&self) -> String {
        match self {
            Cell::Empty => String::new(),
            Cell::Text(s) => s.clone(),
            Cell::Count(n) => group_thousands(*n),
            Cell::Rate(x) => format!("{x:.4}"),
            Cell::Stat(s) => s.format(4),
        }
    }
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// A rendered report. `header` is for humans, `keys` for CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub keys: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub notes: Vec<String>,
}

impl Table {
    /// Comma-separated values. A statistic cell expands to a `mean,std` pair
    /// in the same column slot, so summary rows carry an extra `_std` column
    /// per statistic; notes become leading `#` lines.
    pub fn to_csv(&self) -> String {
        let has_stats = self.rows.iter().flatten().any(|c| matches!(c, Cell::Stat(_)));
        let stat_slots: Vec<bool> = (0..self.keys.len())
            .map(|i| self.rows.iter().any(|r| matches!(r.get(i), Some(Cell::Stat(_)))))
            .collect();
        let mut out = String::new();
        for note in &self.notes {
            out.push_str("# ");
            out.push_str(note);
            out.push('\n');
        }
        let mut head = Vec::new();
        for (i, k) in self.keys.iter().enumerate() {
            head.push(k.clone());
            if has_stats && stat_slots[i] {
                head.push(format!("{k}_std"));
            }
        }
        out.push_str(&head.join(","));
        out.push('\n');
        for row in &self.rows {
            let mut fields = Vec::new();
            for (i, cell) in row.iter().enumerate() {
                let mut f = cell.csv();
                if stat_slots[i] && f.len() == 1 {
                    f.push(String::new());
                }
                fields.extend(f.into_iter().map(|s| csv_escape(&s)));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Space-aligned text table with a rule under the header.
    pub fn to_aligned(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(Cell::display).collect())
            .collect();
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |fields: &[String]| {
            let padded: Vec<String> = fields
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (f, &w))| {
                    let pad = w - f.chars().count();
                    if i == 0 {
                        format!("{f}{}", " ".repeat(pad))
                    } else {
                        format!("{}{f}", " ".repeat(pad))
                    }
                })
                .collect();
            padded.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        let total: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        for note in &self.notes {
            out.push_str(note);
            out.push('\n');
        }
        out
    }
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{QuantizedPmf, StaticPredictor, PMF_TOTAL};
    use crate::token::{tokenize, Vocabulary};

    fn metrics(n_chars: u64, bits: f64, ac: u64) -> StreamMetrics {
        StreamMetrics {
            n_chars,
            n_tokens: n_chars / 2,
            cross_entropy_bits: bits,
            ac_bits: Some(ac),
            ..StreamMetrics::default()
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(compression_ratio(0, 10).unwrap(), 0.0);
        assert_eq!(compression_ratio(7_101, 10_000).unwrap(), 0.7101);
        assert!(matches!(compression_ratio(5, 0), Err(Error::UndefinedStatistic(_))));
    }

    #[test]
    fn uniform_bytes_are_eight_bits() {
        let (stream, _) = tokenize(b"any text at all, really", &Vocabulary::bytes());
        let m = estimate_h_ub(&stream, &mut StaticPredictor::uniform(256).unwrap()).unwrap();
        assert_eq!(m.h_ub_bpc().unwrap(), 8.0);
        assert_eq!(m.h_ub_bits_per_token().unwrap(), 8.0);
    }

    #[test]
    fn empty_stream_is_undefined() {
        let (stream, _) = tokenize(b"", &Vocabulary::bytes());
        assert!(matches!(
            estimate_h_ub(&stream, &mut StaticPredictor::uniform(256).unwrap()),
            Err(Error::UndefinedStatistic(_))
        ));
        assert!(batch_stats(Vec::new()).is_err());
        assert!(Summary::of(&[]).is_err());
    }

    #[test]
    fn matched_fixed_predictor() {
        // Source a:1/2 b:1/4 c:1/4 over bytes; every other byte gets weight 1.
        let mut w = vec![1u32; 256];
        let rest = PMF_TOTAL - 253;
        w[usize::from(b'a')] = rest / 2;
        w[usize::from(b'b')] = rest / 4;
        w[usize::from(b'c')] = rest - rest / 2 - rest / 4;
        let pmf = QuantizedPmf::new(w).unwrap();
        let text: Vec<u8> = b"aabc".iter().cycle().take(4000).copied().collect();
        let (stream, _) = tokenize(&text, &Vocabulary::bytes());
        let m = estimate_h_ub(&stream, &mut StaticPredictor::new(pmf)).unwrap();
        assert!((m.h_ub_bpc().unwrap() - 1.5).abs() < 1e-4);
    }

    #[test]
    fn population_std() {
        let s = Summary::of(&[0.6, 0.8]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.std - 0.1).abs() < 1e-15);
        let same = batch_stats(vec![metrics(100, 70.0, 71); 4]).unwrap();
        assert!(same.stats.iter().all(|s| s.std == 0.0));
    }

    #[test]
    fn summary_format() {
        let s = Summary { mean: 0.70931, std: 0.02279 };
        assert_eq!(s.format(4), "0.7093 ± 0.0228");
    }

    #[test]
    fn pooled_and_mean_differ_when_batches_differ_in_size() {
        let rep = batch_stats(vec![metrics(100, 50.0, 60), metrics(300, 300.0, 310)]).unwrap();
        assert_eq!(rep.columns, vec![Column::Hub, Column::Ac]);
        assert!((rep.summary(Column::Hub).unwrap().mean - 0.75).abs() < 1e-15);
        assert!((rep.pooled.h_ub_bpc().unwrap() - 350.0 / 400.0).abs() < 1e-15);
        assert_eq!(rep.pooled.ac_bits, Some(370));
        assert_eq!(rep.pooled.rank_bits, None);
    }

    #[test]
    fn table_shapes() {
        let rows: Vec<StreamMetrics> = (0..10).map(|i| metrics(1000 + i, 700.0 + i as f64, 710)).collect();
        let rep = batch_stats(rows).unwrap();
        let table = rep.table();
        assert_eq!(table.rows.len(), 12);
        assert_eq!(table.header[..4], ["batch", "N_c", "N_T", "H_ub (bpc)"]);
        let text = table.to_aligned();
        assert!(text.contains("1,009"));
        assert!(text.contains(" ± "));
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines[0], "batch,n_chars,n_tokens,h_ub_bpc,h_ub_bpc_std,rho_ac_bpc,rho_ac_bpc_std");
        assert_eq!(lines.len(), 13);
        assert!(lines.iter().all(|l| l.split(',').count() == 7));
    }

    #[test]
    fn thousands() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(9_137_710), "9,137,710");
        assert_eq!(group_thousands(100_000), "100,000");
    }
}
