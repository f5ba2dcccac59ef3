//! Plain-text item and sample files.
//!
//! ```text
//! #items |T|=2 d_mm=3
//! 1<TAB>4<TAB>0.1 -0.2 0.3
//!
//! #samples N=4 n_side=2
//! 17<TAB>3 9 1<TAB>5<TAB>2,1<TAB>1
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::schema::{ImpressionSample, ItemRecord, ItemTable, SampleSet};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads `key=<int>` fields of a header line such as `#items |T|=2 d_mm=3`.
fn header_fields(path: &Path, line: &str, tag: &str, keys: &[&str]) -> Result<Vec<usize>> {
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| parse_err(path, 1, format!("expected header starting with `{tag}`")))?;
    let mut out = Vec::new();
    for key in keys {
        let prefix = format!("{key}=");
        let field = rest
            .split_whitespace()
            .find_map(|f| f.strip_prefix(prefix.as_str()))
            .ok_or_else(|| parse_err(path, 1, format!("header lacks `{key}=`")))?;
        out.push(
            field
                .parse()
                .map_err(|_| parse_err(path, 1, format!("bad `{key}` value `{field}`")))?,
        );
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} `{s}`")))
}

fn parse_list<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    what: &str,
    s: &str,
    sep: char,
) -> Result<Vec<T>> {
    s.split(sep)
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .map(|f| parse_num(path, line, what, f))
        .collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_items(path: &Path, text: &str) -> Result<ItemTable> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let h = header_fields(path, header, "#items", &["|T|", "d_mm"])?;
    let mut table = ItemTable::new(h[0], h[1]).map_err(|e| parse_err(path, 1, e.to_string()))?;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, lineno, format!("expected 3 tab-separated fields, got {}", cols.len())));
        }
        let item_id = parse_num(path, lineno, "item id", cols[0])?;
        let cat_features: Vec<usize> = parse_list(path, lineno, "category code", cols[1], ',')?;
        if cat_features.len() + 1 != table.n_features {
            return Err(parse_err(
                path,
                lineno,
                format!("{} category codes, expected {}", cat_features.len(), table.n_features - 1),
            ));
        }
        let mm_embedding: Vec<f32> = parse_list(path, lineno, "float", cols[2], ' ')?;
        if mm_embedding.len() != table.d_mm {
            return Err(parse_err(
                path,
                lineno,
                format!("{} floats, expected d_mm={}", mm_embedding.len(), table.d_mm),
            ));
        }
        if mm_embedding.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(path, lineno, "non-finite multimodal value"));
        }
        table
            .insert(ItemRecord {
                item_id,
                cat_features,
                mm_embedding,
            })
            .map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("{}:{lineno}: {msg}", path.display())),
                other => other,
            })?;
    }
    Ok(table)
}

pub fn load_items(path: impl AsRef<Path>) -> Result<ItemTable> {
    let path = path.as_ref();
    parse_items(path, &read(path)?)
}

pub fn parse_samples(path: &Path, text: &str) -> Result<SampleSet> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let h = header_fields(path, header, "#samples", &["N", "n_side"])?;
    let (seq_len, n_side) = (h[0], h[1]);
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(parse_err(path, lineno, format!("expected 5 tab-separated fields, got {}", cols.len())));
        }
        let side_features: Vec<usize> = parse_list(path, lineno, "side code", cols[3], ',')?;
        if side_features.len() != n_side {
            return Err(parse_err(
                path,
                lineno,
                format!("{} side codes, header says n_side={n_side}", side_features.len()),
            ));
        }
        let label: u8 = parse_num(path, lineno, "label", cols[4])?;
        if label > 1 {
            return Err(parse_err(path, lineno, format!("label {label} not in {{0,1}}")));
        }
        samples.push(ImpressionSample {
            user_id: parse_num(path, lineno, "user id", cols[0])?,
            history: parse_list(path, lineno, "history id", cols[1], ' ')?,
            target_item: parse_num(path, lineno, "target id", cols[2])?,
            side_features,
            label,
        });
    }
    Ok(SampleSet::new(seq_len, n_side, samples))
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<SampleSet> {
    let path = path.as_ref();
    parse_samples(path, &read(path)?)
}

pub fn format_items(table: &ItemTable) -> String {
    let mut out = format!("#items |T|={} d_mm={}\n", table.n_features, table.d_mm);
    for item in table.iter() {
        let cats: Vec<String> = item.cat_features.iter().map(ToString::to_string).collect();
        let mm: Vec<String> = item.mm_embedding.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "{}\t{}\t{}", item.item_id, cats.join(","), mm.join(" "));
    }
    out
}

pub fn format_samples(set: &SampleSet) -> String {
    let mut out = format!("#samples N={} n_side={}\n", set.seq_len, set.n_side);
    for s in &set.samples {
        let hist: Vec<String> = s.history.iter().map(ToString::to_string).collect();
        let side: Vec<String> = s.side_features.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.user_id,
            hist.join(" "),
            s.target_item,
            side.join(","),
            s.label
        );
    }
    out
}

pub fn write_items(path: impl AsRef<Path>, table: &ItemTable) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_items(table)).map_err(|e| Error::io(path, e))
}

pub fn write_samples(path: impl AsRef<Path>, set: &SampleSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_samples(set)).map_err(|e| Error::io(path, e))
}
