//! Tab-separated purification report.
//!
//! ```text
//! # mscn purify-report v1
//! # clean alpha=<f64> beta=<f64> weight=<f64>
//! # noisy alpha=<f64> beta=<f64> weight=<f64>
//! # em iterations=<usize> log_likelihood=<f64> collapsed=<bool>
//! index<TAB>score<TAB>posterior<TAB>admitted<TAB>clean
//! <usize><TAB><f64><TAB><f64><TAB><0|1><TAB><0|1>
//! ```
//!
//! Reals use Rust's shortest round-trip formatting, so parsing is lossless.

use std::fmt::Write as _;
use std::str::FromStr;

use super::{BetaComponent, BetaMixture};
use crate::error::{Error, FormatError, Result};

const TITLE: &str = "# mscn purify-report v1";
const COLUMNS: &str = "index\tscore\tposterior\tadmitted\tclean";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub index: usize,
    pub score: f64,
    pub posterior: f64,
    pub admitted: bool,
    pub clean: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurifyReport {
    pub clean: BetaComponent,
    pub noisy: BetaComponent,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub collapsed: bool,
    pub rows: Vec<ReportRow>,
}

impl PurifyReport {
    pub fn new(mixture: &BetaMixture, rows: Vec<ReportRow>) -> Self {
        Self {
            clean: mixture.clean,
            noisy: mixture.noisy,
            iterations: mixture.iterations,
            log_likelihood: mixture.final_log_likelihood().unwrap_or(f64::NAN),
            collapsed: mixture.collapsed,
            rows,
        }
    }

    pub fn admitted(&self) -> usize {
        self.rows.iter().filter(|r| r.admitted).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let comp = |c: &BetaComponent| format!("alpha={} beta={} weight={}", c.alpha, c.beta, c.weight);
        writeln!(out, "{TITLE}").unwrap();
        writeln!(out, "# clean {}", comp(&self.clean)).unwrap();
        writeln!(out, "# noisy {}", comp(&self.noisy)).unwrap();
        writeln!(
            out,
            "# em iterations={} log_likelihood={} collapsed={}",
            self.iterations, self.log_likelihood, self.collapsed
        )
        .unwrap();
        writeln!(out, "{COLUMNS}").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.index, r.score, r.posterior, r.admitted as u8, r.clean as u8
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &'static str| lines.next().ok_or(FormatError::Truncated(what));
        if next("title")? != TITLE {
            return Err(bad("missing report title"));
        }
        let clean = parse_component(next("clean header")?, "# clean ")?;
        let noisy = parse_component(next("noisy header")?, "# noisy ")?;
        let em = next("em header")?
            .strip_prefix("# em ")
            .ok_or_else(|| bad("missing em header"))?;
        let kv = key_values(em)?;
        let iterations = field(&kv, "iterations")?;
        let log_likelihood = field(&kv, "log_likelihood")?;
        let collapsed = field(&kv, "collapsed")?;
        if next("column header")? != COLUMNS {
            return Err(bad("missing column header"));
        }
        let mut rows = Vec::new();
        for line in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(&format!("row has {} columns", cols.len())));
            }
            rows.push(ReportRow {
                index: num(cols[0])?,
                score: num(cols[1])?,
                posterior: num(cols[2])?,
                admitted: flag(cols[3])?,
                clean: flag(cols[4])?,
            });
        }
        Ok(Self {
            clean,
            noisy,
            iterations,
            log_likelihood,
            collapsed,
            rows,
        })
    }
}

fn bad(msg: &str) -> Error {
    FormatError::Inconsistent(msg.to_string()).into()
}

fn num<T: FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| bad(&format!("cannot parse {s:?}")))
}

fn flag(s: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(bad(&format!("bad flag {s:?}"))),
    }
}

fn key_values(s: &str) -> Result<Vec<(&str, &str)>> {
    s.split(' ')
        .map(|kv| kv.split_once('=').ok_or_else(|| bad(&format!("bad field {kv:?}"))))
        .collect()
}

fn field<T: FromStr>(kv: &[(&str, &str)], key: &str) -> Result<T> {
    let v = kv
        .iter()
        .find(|(k, _)| *k == key)
        .ok_or_else(|| bad(&format!("missing {key}")))?
        .1;
    num(v)
}

fn parse_component(line: &str, prefix: &str) -> Result<BetaComponent> {
    let rest = line
        .strip_prefix(prefix)
        .ok_or_else(|| bad(&format!("expected {prefix:?}")))?;
    let kv = key_values(rest)?;
    Ok(BetaComponent {
        alpha: field(&kv, "alpha")?,
        beta: field(&kv, "beta")?,
        weight: field(&kv, "weight")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut mix = BetaMixture::new((7.123456789012345, 1.1), (0.3, 9.87654321));
        mix.log_likelihood = vec![0.1, 0.4142135623730951];
        mix.iterations = 1;
        let rows = (0..20)
            .map(|i| ReportRow {
                index: i,
                score: 1.0 / (i as f64 + 3.0),
                posterior: (i as f64 * 0.731).sin().abs(),
                admitted: i % 3 == 0,
                clean: i % 2 == 0,
            })
            .collect();
        let report = PurifyReport::new(&mix, rows);
        let parsed = PurifyReport::parse(&report.render()).unwrap();
        assert_eq!(parsed, report);
        for (a, b) in parsed.rows.iter().zip(&report.rows) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(PurifyReport::parse("hello").is_err());
        assert!(PurifyReport::parse("").is_err());
    }
}
