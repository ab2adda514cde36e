//! Raw log parsing, cleaning profiles, codebooks and the canonical corpus
//! format.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::EventSequence;

pub const EVENT_NUMBER: &str = "event.number";
pub const EVENT: &str = "event";
pub const TIME: &str = "time";
pub const EVENT_TYPE: &str = "event.type";
pub const SETTINGS: [&str; 3] = ["top.setting", "central.setting", "bottom.setting"];

/// One row of a raw process log.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLogRow {
    /// 1-based line in the source file.
    pub line: usize,
    pub examinee: String,
    pub event_number: u64,
    pub event: String,
    pub time: f64,
    pub event_type: String,
    /// Top, central and bottom slider settings; `None` for NULL.
    pub settings: [Option<String>; 3],
    /// Remaining columns as (header, value).
    pub extra: Vec<(String, String)>,
}

/// Rows of one examinee, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGroup {
    pub examinee: String,
    pub rows: Vec<RawLogRow>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOptions {
    pub id_column: String,
    /// Field delimiter; detected from the header when `None`.
    pub delimiter: Option<u8>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            id_column: "examinee_id".into(),
            delimiter: None,
        }
    }
}

fn is_null(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("NULL") || t.eq_ignore_ascii_case("NA")
}

fn detect_delimiter(header: &str) -> u8 {
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Parses a delimited log and groups rows by examinee in order of first
/// appearance. Each group is sorted by time, then event number.
pub fn parse_log<R: Read>(reader: R, options: &ParseOptions) -> Result<Vec<RowGroup>> {
    let mut buf = BufReader::new(reader);
    let mut header = String::new();
    buf.read_line(&mut header)
        .map_err(|e| Error::Parse(format!("cannot read header: {e}")))?;
    if header.trim().is_empty() {
        return Ok(Vec::new());
    }
    let delimiter = options.delimiter.unwrap_or_else(|| detect_delimiter(&header));
    let chained = std::io::Cursor::new(header.clone().into_bytes()).chain(buf);
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(chained);

    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::MalformedRow {
            line: 1,
            detail: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col(&options.id_column)?;
    let num_col = col(EVENT_NUMBER)?;
    let event_col = col(EVENT)?;
    let time_col = col(TIME)?;
    let type_col = col(EVENT_TYPE)?;
    let setting_cols: Vec<Option<usize>> = SETTINGS.iter().map(|s| headers.iter().position(|h| h == s)).collect();
    let known: Vec<usize> = [id_col, num_col, event_col, time_col, type_col]
        .into_iter()
        .chain(setting_cols.iter().flatten().copied())
        .collect();

    let mut groups: Vec<RowGroup> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::MalformedRow {
            line,
            detail: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let bad = |detail: String| Error::MalformedRow { line, detail };

        let event_number: u64 = field(num_col)
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| bad(format!("event number {:?} is not a positive integer", field(num_col))))?;
        let time: f64 = field(time_col)
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite() && *t >= 0.0)
            .ok_or_else(|| bad(format!("time {:?} is not a non-negative number", field(time_col))))?;
        let setting = |j: usize| {
            setting_cols[j]
                .map(field)
                .filter(|s| !is_null(s))
                .map(str::to_string)
        };
        let extra = headers
            .iter()
            .enumerate()
            .filter(|(c, _)| !known.contains(c))
            .map(|(c, h)| (h.clone(), field(c).to_string()))
            .collect();
        let row = RawLogRow {
            line,
            examinee: field(id_col).to_string(),
            event_number,
            event: field(event_col).to_string(),
            time,
            event_type: field(type_col).to_string(),
            settings: [setting(0), setting(1), setting(2)],
            extra,
        };
        let g = *index.entry(row.examinee.clone()).or_insert_with(|| {
            groups.push(RowGroup {
                examinee: row.examinee.clone(),
                rows: Vec::new(),
            });
            groups.len() - 1
        });
        groups[g].rows.push(row);
    }

    for g in &mut groups {
        g.rows.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.event_number.cmp(&b.event_number)));
        if g.rows.windows(2).any(|w| w[0].event_number >= w[1].event_number) {
            return Err(Error::NonMonotoneTime(g.examinee.clone()));
        }
    }
    Ok(groups)
}

pub fn parse_log_file(path: &Path, options: &ParseOptions) -> Result<Vec<RowGroup>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_log(f, options)
}

/// How a kept row becomes an event label.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// "(s1,s2,s3)" from the three slider settings, each in −2..=2.
    SliderTriple,
    /// A fixed label.
    Constant(String),
    /// The row's `event` column.
    Event,
    /// The row's `event.type` column.
    EventType,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ProfileRule {
    /// Matched case-insensitively against `event.type`.
    pub event_type: String,
    pub label: LabelRule,
}

/// Which rows survive cleaning and how they are labelled. Rows matching no
/// rule are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct CleaningProfile {
    pub rules: Vec<ProfileRule>,
}

impl CleaningProfile {
    /// PISA Climate Control: apply rows as slider triples, reset rows as
    /// "RESET"; START_ITEM, END_ITEM and Diagram rows are dropped.
    pub fn climate() -> Self {
        Self {
            rules: vec![
                ProfileRule {
                    event_type: "apply".into(),
                    label: LabelRule::SliderTriple,
                },
                ProfileRule {
                    event_type: "reset".into(),
                    label: LabelRule::Constant("RESET".into()),
                },
            ],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    fn rule_for(&self, row: &RawLogRow) -> Option<&LabelRule> {
        self.rules
            .iter()
            .find(|r| r.event_type.eq_ignore_ascii_case(row.event_type.trim()))
            .map(|r| &r.label)
    }

    fn label(&self, row: &RawLogRow) -> Result<Option<String>> {
        let Some(rule) = self.rule_for(row) else {
            return Ok(None);
        };
        let label = match rule {
            LabelRule::SliderTriple => {
                let mut parts = Vec::with_capacity(3);
                for (name, s) in SETTINGS.iter().zip(&row.settings) {
                    let v: i32 = s
                        .as_deref()
                        .and_then(|s| s.parse().ok())
                        .filter(|v| (-2..=2).contains(v))
                        .ok_or_else(|| Error::MalformedRow {
                            line: row.line,
                            detail: format!("{name} must be an integer in -2..=2"),
                        })?;
                    parts.push(v.to_string());
                }
                format!("({})", parts.join(","))
            }
            LabelRule::Constant(c) => c.clone(),
            LabelRule::Event => row.event.clone(),
            LabelRule::EventType => row.event_type.clone(),
        };
        Ok(Some(label))
    }
}

/// Drops rows no rule keeps and rows repeating an earlier kept timestamp.
pub fn filter_rows(rows: &[RawLogRow], profile: &CleaningProfile) -> Vec<RawLogRow> {
    let mut out: Vec<RawLogRow> = Vec::new();
    for row in rows {
        if profile.rule_for(row).is_none() {
            continue;
        }
        if out.last().is_some_and(|prev| prev.time == row.time) {
            continue;
        }
        out.push(row.clone());
    }
    out
}

/// A cleaned examinee sequence with string labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub id: String,
    pub labels: Vec<String>,
    pub times: Vec<f64>,
}

/// Applies a cleaning profile to one examinee's rows.
pub fn clean(group: &RowGroup, profile: &CleaningProfile) -> Result<LabeledSequence> {
    let kept = filter_rows(&group.rows, profile);
    if kept.is_empty() {
        return Err(Error::EmptySequence(group.examinee.clone()));
    }
    let mut labels = Vec::with_capacity(kept.len());
    for row in &kept {
        labels.push(profile.label(row)?.expect("filtered rows have a rule"));
    }
    Ok(LabeledSequence {
        id: group.examinee.clone(),
        labels,
        times: kept.iter().map(|r| r.time).collect(),
    })
}

/// Cleans every group; examinees whose sequence comes out empty are
/// excluded and reported by id.
pub fn clean_all(groups: &[RowGroup], profile: &CleaningProfile) -> Result<(Vec<LabeledSequence>, Vec<String>)> {
    let results: Vec<Result<LabeledSequence>> = groups.par_iter().map(|g| clean(g, profile)).collect();
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for r in results {
        match r {
            Ok(s) => kept.push(s),
            Err(Error::EmptySequence(id)) => excluded.push(id),
            Err(e) => return Err(e),
        }
    }
    Ok((kept, excluded))
}

/// Bijection between event labels and dense 0-based ids (1-based on disk).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Codebook {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Codebook {
    pub fn from_labels<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Result<Self> {
        let mut cb = Self::default();
        for l in labels {
            let l = l.into();
            if cb.index.contains_key(&l) {
                return Err(Error::Parse(format!("duplicate label {l:?} in codebook")));
            }
            cb.intern(&l);
        }
        Ok(cb)
    }

    fn intern(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), self.labels.len() - 1);
        self.labels.len() - 1
    }

    pub fn v(&self) -> usize {
        self.labels.len()
    }

    pub fn encode(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Assigns ids by first appearance across the corpus and encodes it.
pub fn build_codebook(seqs: &[LabeledSequence]) -> Result<(Codebook, Vec<EventSequence>)> {
    let mut cb = Codebook::default();
    let mut out = Vec::with_capacity(seqs.len());
    for s in seqs {
        let events = s.labels.iter().map(|l| cb.intern(l)).collect();
        out.push(EventSequence::new(s.id.clone(), events, s.times.clone())?);
    }
    Ok((cb, out))
}

pub fn decode(seq: &EventSequence, codebook: &Codebook) -> Vec<String> {
    seq.events()
        .iter()
        .map(|&e| codebook.decode(e).map_or_else(|| (e + 1).to_string(), str::to_string))
        .collect()
}

pub const CORPUS_HEADER: &str = "examinee_id\tevent_id\tlabel\ttime";
pub const CODEBOOK_HEADER: &str = "id\tlabel";

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Parse(format!("{what} {s:?} contains a tab or newline")));
    }
    Ok(())
}

/// Writes the canonical corpus: one line per event, ids 1-based, times with
/// 17 significant digits.
pub fn write_corpus<W: Write>(mut w: W, seqs: &[EventSequence], codebook: &Codebook) -> std::io::Result<()> {
    writeln!(w, "{CORPUS_HEADER}")?;
    for s in seqs {
        for (&e, &t) in s.events().iter().zip(s.times()) {
            let label = codebook.decode(e).map_or_else(|| (e + 1).to_string(), str::to_string);
            writeln!(w, "{}\t{}\t{}\t{:.16e}", s.id(), e + 1, label, t)?;
        }
    }
    Ok(())
}

pub fn write_codebook<W: Write>(mut w: W, codebook: &Codebook) -> std::io::Result<()> {
    writeln!(w, "{CODEBOOK_HEADER}")?;
    for (i, l) in codebook.labels().iter().enumerate() {
        writeln!(w, "{}\t{}", i + 1, l)?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, seqs: &[EventSequence], codebook: &Codebook) -> Result<()> {
    for s in seqs {
        check_field(s.id(), "examinee id")?;
    }
    for l in codebook.labels() {
        check_field(l, "label")?;
    }
    let mut buf = Vec::new();
    write_corpus(&mut buf, seqs, codebook).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn save_codebook(path: &Path, codebook: &Codebook) -> Result<()> {
    let mut buf = Vec::new();
    write_codebook(&mut buf, codebook).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a canonical corpus. Labels missing from the file (ids that never
/// occur) decode to their id.
pub fn read_corpus<R: Read>(reader: R) -> Result<(Codebook, Vec<EventSequence>)> {
    let buf = BufReader::new(reader);
    let mut lines = buf.lines().enumerate();
    match lines.next() {
        None => return Ok((Codebook::default(), Vec::new())),
        Some((_, Ok(h))) if h.trim_end() == CORPUS_HEADER => {}
        Some((_, Ok(h))) => {
            return Err(Error::MalformedRow {
                line: 1,
                detail: format!("expected header {CORPUS_HEADER:?}, found {h:?}"),
            })
        }
        Some((_, Err(e))) => return Err(Error::Parse(e.to_string())),
    }

    let mut labels: Vec<Option<String>> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: &str| Error::MalformedRow {
            line: line_no,
            detail: detail.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let id: usize = fields[1]
            .parse()
            .ok()
            .filter(|&x| x >= 1)
            .ok_or_else(|| bad("event_id must be a positive integer"))?;
        let t: f64 = fields[3].parse().map_err(|_| bad("time is not a number"))?;
        if labels.len() < id {
            labels.resize(id, None);
        }
        match &labels[id - 1] {
            Some(l) if l != fields[2] => return Err(bad("event_id mapped to two different labels")),
            Some(_) => {}
            None => labels[id - 1] = Some(fields[2].to_string()),
        }
        let entry = rows.entry(fields[0].to_string()).or_insert_with(|| {
            order.push(fields[0].to_string());
            (Vec::new(), Vec::new())
        });
        entry.0.push(id - 1);
        entry.1.push(t);
    }

    let codebook = Codebook::from_labels(
        labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.unwrap_or_else(|| (i + 1).to_string())),
    )?;
    let seqs = order
        .into_iter()
        .map(|id| {
            let (events, times) = rows.remove(&id).expect("recorded");
            EventSequence::new(id, events, times)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((codebook, seqs))
}

pub fn load_corpus(path: &Path) -> Result<(Codebook, Vec<EventSequence>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(f)
}

/// Reads a codebook file written by [`write_codebook`].
pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.split_once('\t').ok_or_else(|| Error::MalformedRow {
            line: i + 1,
            detail: "expected id<TAB>label".into(),
        })?;
        if id.parse::<usize>().ok() != Some(labels.len() + 1) {
            return Err(Error::MalformedRow {
                line: i + 1,
                detail: "codebook ids must be 1, 2, 3, ...".into(),
            });
        }
        labels.push(label.to_string());
    }
    Codebook::from_labels(labels)
}
