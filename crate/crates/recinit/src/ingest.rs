//! Tab-separated catalogs and interaction logs, id maps and tokenizer files.
//!
//! Catalog line: `item_id<TAB>key<TAB>value[<TAB>key<TAB>value]...`
//! Interaction line: `user_id<TAB>item_id<TAB>timestamp`

use std::collections::HashMap;

use recinit_core::corpus::{Interaction, InteractionLog, Item, ItemCatalog};
use recinit_core::textenc::Tokenizer;

use crate::error::{Error, Result};

/// Raw string ids in dense-id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn get(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    /// Dense id of `raw`, assigning the next one on first sight.
    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len() as u32;
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), i);
        i
    }

    pub fn raw(&self, dense: u32) -> Option<&str> {
        self.raw.get(dense as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Two columns: raw id, dense id.
    pub fn to_text(&self) -> String {
        self.raw.iter().enumerate().map(|(i, r)| format!("{r}\t{i}\n")).collect()
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_catalog(text: &str, origin: &str) -> Result<(ItemCatalog, IdMap)> {
    let mut map = IdMap::default();
    let mut items = Vec::new();
    for (n, line) in lines(text) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 || f.len().is_multiple_of(2) {
            return Err(Error::parse(origin, n, "expected an item id followed by key/value pairs"));
        }
        if map.get(f[0]).is_some() {
            return Err(Error::parse(origin, n, format!("duplicate item id {:?}", f[0])));
        }
        map.intern(f[0]);
        let attrs = f[1..]
            .chunks_exact(2)
            .map(|kv| (kv[0].to_string(), kv[1].to_string()))
            .collect();
        items.push(Item { attrs });
    }
    if items.is_empty() {
        return Err(Error::parse(origin, 0, "catalog is empty"));
    }
    Ok((ItemCatalog::new(items)?, map))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub log: InteractionLog,
    pub users: IdMap,
    /// Records whose item is missing from the catalog.
    pub skipped_unknown_item: usize,
}

/// Users get dense ids in order of first appearance. Records naming an item
/// outside the catalog are dropped and counted.
pub fn parse_interactions(text: &str, origin: &str, catalog: &ItemCatalog, items: &IdMap) -> Result<ParsedLog> {
    let mut users = IdMap::default();
    let mut records = Vec::new();
    let mut skipped = 0;
    for (n, line) in lines(text) {
        let f: Vec<&str> = line.split('\t').collect();
        let [user, item, ts] = f.as_slice() else {
            return Err(Error::parse(origin, n, "expected user, item and timestamp"));
        };
        let timestamp = ts
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::parse(origin, n, format!("timestamp {ts:?} is not an integer")))?;
        let Some(item) = items.get(item) else {
            skipped += 1;
            continue;
        };
        records.push(Interaction {
            user: users.intern(user),
            item,
            timestamp,
        });
    }
    Ok(ParsedLog {
        log: InteractionLog::new(records, catalog)?,
        users,
        skipped_unknown_item: skipped,
    })
}

fn check_cell(s: &str) -> Result<&str> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Format(format!("value {s:?} contains a tab or newline")));
    }
    Ok(s)
}

/// Writes dense ids as raw ids.
pub fn catalog_to_tsv(catalog: &ItemCatalog) -> Result<String> {
    let mut out = String::new();
    for (i, item) in catalog.items().iter().enumerate() {
        out.push_str(&i.to_string());
        for (k, v) in &item.attrs {
            out.push('\t');
            out.push_str(check_cell(k)?);
            out.push('\t');
            out.push_str(check_cell(v)?);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn log_to_tsv(log: &InteractionLog) -> String {
    log.records
        .iter()
        .map(|r| format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp))
        .collect()
}

/// Two columns: token, id.
pub fn tokenizer_to_text(tok: &Tokenizer) -> String {
    tok.entries().map(|(t, i)| format!("{t}\t{i}\n")).collect()
}

pub fn parse_tokenizer(text: &str, origin: &str) -> Result<Tokenizer> {
    let mut entries = Vec::new();
    for (n, line) in lines(text) {
        let Some((t, i)) = line.split_once('\t') else {
            return Err(Error::parse(origin, n, "expected token and id"));
        };
        let id = i
            .parse::<u32>()
            .map_err(|_| Error::parse(origin, n, format!("id {i:?} is not an integer")))?;
        entries.push((t.to_string(), id));
    }
    Ok(Tokenizer::from_entries(entries)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CATALOG: &str = "B01\ttitle\tRed Pen\tbrand\tAcme\nB02\ttitle\tBlue Ink\n";

    #[test]
    fn catalog_and_log_parse_with_id_maps() {
        let (cat, items) = parse_catalog(CATALOG, "cat").unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(items.get("B02"), Some(1));
        let log = "u9\tB02\t5\nu1\tB01\t3\nu9\tZZZ\t1\n\nu9\tB01\t7\n";
        let p = parse_interactions(log, "log", &cat, &items).unwrap();
        assert_eq!(p.skipped_unknown_item, 1);
        assert_eq!(p.log.records.len(), 3);
        assert_eq!(p.users.raw(0), Some("u9"));
        assert_eq!(p.users.to_text(), "u9\t0\nu1\t1\n");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_catalog("A\ttitle\tx\nB\ttitle\n", "cat.tsv").unwrap_err();
        assert!(err.to_string().starts_with("cat.tsv:2:"), "{err}");
        let (cat, items) = parse_catalog(CATALOG, "cat").unwrap();
        let err = parse_interactions("u\tB01\tsoon\n", "log.tsv", &cat, &items).unwrap_err();
        assert!(err.to_string().starts_with("log.tsv:1:"), "{err}");
    }

    #[test]
    fn written_catalog_reads_back() {
        let (cat, _) = parse_catalog(CATALOG, "cat").unwrap();
        let (again, ids) = parse_catalog(&catalog_to_tsv(&cat).unwrap(), "again").unwrap();
        assert_eq!(again, cat);
        assert_eq!(ids.get("1"), Some(1));
    }

    #[test]
    fn tokenizer_file_round_trips() {
        let (cat, _) = parse_catalog(CATALOG, "cat").unwrap();
        let tok = Tokenizer::build(&[&cat], 1).unwrap();
        let back = parse_tokenizer(&tokenizer_to_text(&tok), "tok").unwrap();
        assert_eq!(back.vocab_size(), tok.vocab_size());
        assert_eq!(back.tokenize("red ink"), tok.tokenize("red ink"));
    }
}
