//! Line-delimited dataset files, one instance per line.
//!
//! Sentences: `tokens<TAB>head_start head_end<TAB>tail_start tail_end<TAB>relation`
//! with space-separated token ids and `-` for a missing relation.
//!
//! Triples: `head<TAB>relation<TAB>tail<TAB>label[<TAB>structural]` where the
//! label is `1`, `0` or `-` and the optional structural vector is
//! space-separated reals.

use std::io::{BufRead, Write};
use std::str::FromStr;

use super::DataError;
use crate::encoders::{Dataset, SentenceInstance, Span, TripleInstance, TripleLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Sentences,
    Triples,
}

impl DataKind {
    pub fn of(data: &Dataset) -> Self {
        match data {
            Dataset::Sentences(_) => DataKind::Sentences,
            Dataset::Triples(_) => DataKind::Triples,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataKind::Sentences => "sentences",
            DataKind::Triples => "triples",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sentences" => Some(DataKind::Sentences),
            "triples" => Some(DataKind::Triples),
            _ => None,
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_dataset(data: &Dataset, mut w: impl Write) -> Result<(), DataError> {
    match data {
        Dataset::Sentences(v) => {
            for s in v {
                let rel = s.relation.map_or("-".to_string(), |r| r.to_string());
                writeln!(
                    w,
                    "{}\t{} {}\t{} {}\t{rel}",
                    join(&s.tokens),
                    s.head.start,
                    s.head.end,
                    s.tail.start,
                    s.tail.end
                )?;
            }
        }
        Dataset::Triples(v) => {
            for t in v {
                let label = match t.label {
                    Some(TripleLabel::Positive) => "1",
                    Some(TripleLabel::Negative) => "0",
                    None => "-",
                };
                write!(w, "{}\t{}\t{}\t{label}", t.head, t.relation, t.tail)?;
                if let Some(s) = &t.structural {
                    let reals: Vec<String> = s.iter().map(|x| format!("{x:?}")).collect();
                    write!(w, "\t{}", reals.join(" "))?;
                }
                writeln!(w)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn field<T: FromStr>(s: &str, line: usize, what: &str) -> Result<T, DataError> {
    s.trim().parse().map_err(|_| DataError::Parse {
        line,
        msg: format!("bad {what} `{s}`"),
    })
}

fn list<T: FromStr>(s: &str, line: usize, what: &str) -> Result<Vec<T>, DataError> {
    s.split_whitespace().map(|x| field(x, line, what)).collect()
}

fn span(s: &str, line: usize, what: &str) -> Result<Span, DataError> {
    let v: Vec<usize> = list(s, line, what)?;
    match v[..] {
        [a, b] if a < b => Ok(Span::new(a, b)),
        _ => Err(DataError::Parse {
            line,
            msg: format!("{what} must be `start end` with start < end, got `{s}`"),
        }),
    }
}

pub fn read_dataset(r: impl BufRead, kind: DataKind) -> Result<Dataset, DataError> {
    let mut sentences = Vec::new();
    let mut triples = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let arity = |ok: bool, expect: &str| {
            if ok {
                Ok(())
            } else {
                Err(DataError::Parse {
                    line: no,
                    msg: format!("expected {expect} tab-separated fields, got {}", cols.len()),
                })
            }
        };
        match kind {
            DataKind::Sentences => {
                arity(cols.len() == 4, "4")?;
                let tokens: Vec<usize> = list(cols[0], no, "token id")?;
                if tokens.is_empty() {
                    return Err(DataError::Parse {
                        line: no,
                        msg: "empty token list".into(),
                    });
                }
                let head = span(cols[1], no, "head span")?;
                let tail = span(cols[2], no, "tail span")?;
                if head.end > tokens.len() || tail.end > tokens.len() {
                    return Err(DataError::Parse {
                        line: no,
                        msg: "span beyond the token list".into(),
                    });
                }
                let relation = match cols[3].trim() {
                    "-" => None,
                    s => Some(field(s, no, "relation id")?),
                };
                sentences.push(SentenceInstance {
                    tokens,
                    head,
                    tail,
                    relation,
                });
            }
            DataKind::Triples => {
                arity(cols.len() == 4 || cols.len() == 5, "4 or 5")?;
                let label = match cols[3].trim() {
                    "1" => Some(TripleLabel::Positive),
                    "0" => Some(TripleLabel::Negative),
                    "-" => None,
                    s => {
                        return Err(DataError::Parse {
                            line: no,
                            msg: format!("bad label `{s}`"),
                        })
                    }
                };
                let structural = match cols.get(4) {
                    Some(s) => Some(list::<f64>(s, no, "real")?),
                    None => None,
                };
                triples.push(TripleInstance {
                    head: field(cols[0], no, "head id")?,
                    relation: field(cols[1], no, "relation id")?,
                    tail: field(cols[2], no, "tail id")?,
                    structural,
                    label,
                });
            }
        }
    }
    Ok(match kind {
        DataKind::Sentences => Dataset::Sentences(sentences),
        DataKind::Triples => Dataset::Triples(triples),
    })
}
