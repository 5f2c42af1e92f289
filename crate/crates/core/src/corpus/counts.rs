use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Token-occurrence counts for a corpus. `total_tokens` always equals the sum
/// of the per-term counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TermCounts {
    counts: HashMap<String, u64>,
    total_tokens: u64,
    doc_count: u64,
}

impl TermCounts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one document's terms.
    pub fn add_document<I, S>(&mut self, terms: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for term in terms {
            self.add(term.as_ref(), 1);
        }
        self.doc_count += 1;
    }

    fn add(&mut self, term: &str, n: u64) {
        if n == 0 {
            return;
        }
        match self.counts.get_mut(term) {
            Some(c) => *c += n,
            None => {
                self.counts.insert(term.to_owned(), n);
            }
        }
        self.total_tokens += n;
    }

    pub fn count(&self, term: &str) -> u64 {
        self.counts.get(term).copied().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn doc_count(&self) -> u64 {
        self.doc_count
    }

    /// Number of distinct terms.
    pub fn vocabulary_size(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(t, c)| (t.as_str(), *c))
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    /// Adds `other` into `self`. Commutative and associative.
    pub fn merge(&mut self, other: &TermCounts) {
        for (term, n) in other.iter() {
            self.add(term, n);
        }
        self.doc_count += other.doc_count;
    }

    pub fn merged<'a>(tables: impl IntoIterator<Item = &'a TermCounts>) -> TermCounts {
        let mut out = TermCounts::new();
        for t in tables {
            out.merge(t);
        }
        out
    }

    /// Entries ordered by count descending, then term ascending.
    pub fn sorted(&self) -> Vec<(&str, u64)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    /// Writes the `term TAB count` table with its `#total_tokens=N #docs=D`
    /// header line.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "#total_tokens={} #docs={}", self.total_tokens, self.doc_count)?;
        for (term, n) in self.sorted() {
            writeln!(out, "{term}\t{n}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R, source: &str) -> Result<TermCounts> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: source.to_owned(),
            line,
            message,
        };
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))??;
        let (total, docs) =
            parse_header(&header).ok_or_else(|| parse_err(1, format!("bad header `{header}`")))?;
        let mut table = TermCounts::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (term, n) = line
                .split_once('\t')
                .and_then(|(t, n)| Some((t, n.parse::<u64>().ok()?)))
                .ok_or_else(|| parse_err(i + 2, format!("expected `term<TAB>count`, got `{line}`")))?;
            if table.counts.contains_key(term) {
                return Err(parse_err(i + 2, format!("duplicate term `{term}`")));
            }
            table.add(term, n);
        }
        if table.total_tokens != total {
            return Err(parse_err(
                1,
                format!("header total {total} != sum of counts {}", table.total_tokens),
            ));
        }
        table.doc_count = docs;
        Ok(table)
    }
}

fn parse_header(line: &str) -> Option<(u64, u64)> {
    let mut parts = line.split_whitespace();
    let total = parts.next()?.strip_prefix("#total_tokens=")?.parse().ok()?;
    let docs = parts.next()?.strip_prefix("#docs=")?.parse().ok()?;
    parts.next().is_none().then_some((total, docs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn direct_count() {
        let mut t = TermCounts::new();
        t.add_document(["a", "b", "a"]);
        t.add_document(["b"]);
        assert_eq!(t.count("a"), 2);
        assert_eq!(t.count("b"), 2);
        assert_eq!(t.total_tokens(), 4);
        assert_eq!(t.doc_count(), 2);
    }

    #[test]
    fn tsv_round_trip() {
        let mut t = TermCounts::new();
        t.add_document(["x", "y", "x", "z"]);
        let mut buf = Vec::new();
        t.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#total_tokens=4 #docs=1\nx\t2\n"));
        let back = TermCounts::read_tsv(&buf[..], "mem").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tsv_rejects_inconsistent_total() {
        let text = "#total_tokens=5 #docs=1\na\t2\n";
        assert!(TermCounts::read_tsv(text.as_bytes(), "mem").is_err());
    }

    proptest! {
        #[test]
        fn merge_is_order_independent(
            docs in prop::collection::vec(prop::collection::vec("[a-e]", 0..6), 0..30),
            seed in any::<u64>(),
        ) {
            let shards: Vec<TermCounts> = docs
                .chunks(3)
                .map(|chunk| {
                    let mut t = TermCounts::new();
                    for d in chunk { t.add_document(d); }
                    t
                })
                .collect();
            let forward = TermCounts::merged(&shards);
            let mut order: Vec<usize> = (0..shards.len()).collect();
            let mut s = seed;
            for i in (1..order.len()).rev() {
                s = crate::hashing::splitmix64(s);
                order.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let shuffled = TermCounts::merged(order.iter().map(|&i| &shards[i]));
            prop_assert_eq!(&forward, &shuffled);
            let total: u64 = forward.iter().map(|(_, n)| n).sum();
            prop_assert_eq!(total, forward.total_tokens());
        }
    }
}
