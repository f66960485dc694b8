//! Rollout-log ingestion (JSONL) and metric emission (CSV).
//!
//! Input is one group per line:
//!
//! ```text
//! {"v":1,"group_id":"g0","prompt_id":"p0","responses":[
//!     {"tokens":[5,9,2],"reward":1.0,"ratios":[1.0,0.98,1.1]},
//!     {"token_count":4,"reward":0.0,"logp_new":[..],"logp_old":[..]}]}
//! ```
//!
//! Each response supplies `ratios`, or both log-prob arrays, or neither
//! (length-only). `token_count` may stand in for `tokens`. A missing `"v"`
//! means version 1. [`write_rollouts`] emits fields in the order above,
//! `tokens` when known and `token_count` otherwise, log-probs when present
//! and `ratios` only when no log-probs are stored.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AggError, Result};
use crate::group::{Response, RolloutGroup};

pub const SCHEMA_VERSION: u32 = 1;

/// Fixed metric CSV header.
pub const METRICS_HEADER: &str =
    "step,rule,objective,pg_loss,len_cv,len_gap,tbar_pos,tbar_neg,mean_reward,k_mean,clip_fraction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<usize>,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_new: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_old: Option<Vec<f64>>,
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLogRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<u32>,
    pub group_id: String,
    pub prompt_id: String,
    pub responses: Vec<ResponseRecord>,
}

/// A validated group with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedGroup {
    /// 1-based line number in the source file.
    pub line: usize,
    pub group_id: String,
    pub group: RolloutGroup,
}

impl ParsedGroup {
    pub fn is_length_only(&self) -> bool {
        self.group.is_length_only()
    }
}

fn response_from_record(rec: ResponseRecord) -> std::result::Result<Response, String> {
    let len = match (&rec.tokens, rec.token_count) {
        (Some(t), Some(c)) if t.len() != c => {
            return Err(format!("token_count {c} disagrees with {} tokens", t.len()))
        }
        (Some(t), _) => t.len(),
        (None, Some(c)) => c,
        (None, None) => return Err("needs tokens or token_count".into()),
    };
    Response::from_parts(
        len,
        rec.tokens,
        rec.reward,
        rec.ratios,
        rec.logp_new,
        rec.logp_old,
    )
    .map_err(|e| match e {
        AggError::InvalidResponse(reason) => reason,
        other => other.to_string(),
    })
}

/// Parses and validates one line. `eps_var` is attached to the group.
pub fn parse_rollout_line(line: usize, text: &str, eps_var: f64) -> Result<ParsedGroup> {
    let rec: RolloutLogRecord = serde_json::from_str(text).map_err(|e| AggError::Parse {
        line,
        reason: e.to_string(),
    })?;
    match rec.v {
        None | Some(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(AggError::Parse {
                line,
                reason: format!("unsupported schema version {v}"),
            })
        }
    }
    let responses = rec
        .responses
        .into_iter()
        .enumerate()
        .map(|(response, r)| {
            response_from_record(r).map_err(|reason| AggError::Validation {
                line,
                response,
                reason,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let group =
        RolloutGroup::new(rec.prompt_id, responses, eps_var).map_err(|e| AggError::Parse {
            line,
            reason: e.to_string(),
        })?;
    Ok(ParsedGroup {
        line,
        group_id: rec.group_id,
        group,
    })
}

/// Streaming reader over a JSONL rollout log. Blank lines are skipped;
/// a bad line yields an error and reading continues with the next line.
pub struct RolloutReader<R> {
    lines: Lines<R>,
    line: usize,
    eps_var: f64,
    path: PathBuf,
}

impl<R: BufRead> RolloutReader<R> {
    pub fn new(reader: R, eps_var: f64) -> Self {
        Self {
            lines: reader.lines(),
            line: 0,
            eps_var,
            path: PathBuf::from("<stream>"),
        }
    }
}

impl<R: BufRead> Iterator for RolloutReader<R> {
    type Item = Result<ParsedGroup>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(AggError::io(&self.path, e))),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(parse_rollout_line(self.line, &text, self.eps_var));
        }
    }
}

/// Opens `path` for streaming.
pub fn read_rollouts(
    path: impl AsRef<Path>,
    eps_var: f64,
) -> Result<RolloutReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| AggError::io(path, e))?;
    let mut reader = RolloutReader::new(BufReader::new(file), eps_var);
    reader.path = path.to_path_buf();
    Ok(reader)
}

/// Canonical record for a group.
pub fn group_to_record(group_id: &str, group: &RolloutGroup) -> RolloutLogRecord {
    let responses = group
        .responses()
        .iter()
        .map(|r| {
            let has_logp = r.logp_new().is_some();
            ResponseRecord {
                tokens: r.tokens().map(<[u32]>::to_vec),
                token_count: r.tokens().is_none().then_some(r.len()),
                reward: r.reward(),
                ratios: if has_logp {
                    None
                } else {
                    r.ratios().map(<[f64]>::to_vec)
                },
                logp_new: r.logp_new().map(<[f64]>::to_vec),
                logp_old: r.logp_old().map(<[f64]>::to_vec),
            }
        })
        .collect();
    RolloutLogRecord {
        v: Some(SCHEMA_VERSION),
        group_id: group_id.to_string(),
        prompt_id: group.prompt_id().to_string(),
        responses,
    }
}

/// Writes groups as canonical JSONL.
pub fn write_rollouts<'a, I>(groups: I, path: impl AsRef<Path>) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a RolloutGroup)>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| AggError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, group) in groups {
        let line =
            serde_json::to_string(&group_to_record(id, group)).expect("rollout record serializes");
        writeln!(w, "{line}").map_err(|e| AggError::io(path, e))?;
    }
    w.flush().map_err(|e| AggError::io(path, e))
}

/// One metric CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub rule: String,
    pub objective: Option<f64>,
    pub pg_loss: Option<f64>,
    pub len_cv: Option<f64>,
    pub len_gap: Option<f64>,
    pub tbar_pos: Option<f64>,
    pub tbar_neg: Option<f64>,
    pub mean_reward: Option<f64>,
    pub k_mean: Option<f64>,
    pub clip_fraction: Option<f64>,
}

/// Formats `x` with 10 significant digits in the style of C's `%.10g`:
/// fixed notation for decimal exponents in `[-5, 10)`, scientific
/// otherwise, trailing zeros trimmed. Non-finite values render empty.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return String::new();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.9e}");
    let (mantissa, exp) = sci
        .split_once('e')
        .expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if (-5..10).contains(&exp) {
        let decimals = (9 - exp) as usize;
        trim_fraction(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_fraction(mantissa.to_string()))
    }
}

fn trim_fraction(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn cell(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

/// CSV rendering of one record, without trailing newline.
pub fn metric_row(r: &MetricRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.rule,
        cell(r.objective),
        cell(r.pg_loss),
        cell(r.len_cv),
        cell(r.len_gap),
        cell(r.tbar_pos),
        cell(r.tbar_neg),
        cell(r.mean_reward),
        cell(r.k_mean),
        cell(r.clip_fraction),
    )
}

/// Full CSV document: header plus one line per record.
pub fn render_metrics<'a>(records: impl IntoIterator<Item = &'a MetricRecord>) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&metric_row(r));
        out.push('\n');
    }
    out
}

pub fn write_metrics<'a>(
    records: impl IntoIterator<Item = &'a MetricRecord>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_metrics(records)).map_err(|e| AggError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_only_line() {
        let line = r#"{"group_id":"g0","prompt_id":"p0","responses":[{"token_count":3,"reward":1.0},{"token_count":5,"reward":0.0}]}"#;
        let g = parse_rollout_line(1, line, 0.0).unwrap();
        assert!(g.is_length_only());
        assert_eq!(g.group.size(), 2);
        assert_eq!(g.group.lengths(), vec![3, 5]);
        assert_eq!(g.group_id, "g0");
    }

    #[test]
    fn equal_logprobs_give_unit_ratio() {
        let line = r#"{"group_id":"g","prompt_id":"p","responses":[{"token_count":1,"reward":1.0,"logp_new":[-1.0],"logp_old":[-1.0]},{"tokens":[4],"reward":0.0,"ratios":[1.0]}]}"#;
        let g = parse_rollout_line(1, line, 0.0).unwrap();
        assert_eq!(g.group.responses()[0].ratios(), Some(&[1.0][..]));
        assert!(!g.is_length_only());
    }

    #[test]
    fn ratio_length_mismatch() {
        let line = r#"{"group_id":"g","prompt_id":"p","responses":[{"token_count":1,"reward":1.0,"ratios":[1.0]},{"tokens":[4,5],"reward":0.0,"ratios":[1.0]}]}"#;
        match parse_rollout_line(7, line, 0.0) {
            Err(AggError::Validation { line, response, .. }) => {
                assert_eq!((line, response), (7, 1))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_version_and_json() {
        let line = r#"{"v":2,"group_id":"g","prompt_id":"p","responses":[]}"#;
        assert!(matches!(
            parse_rollout_line(3, line, 0.0),
            Err(AggError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_rollout_line(4, "{not json", 0.0),
            Err(AggError::Parse { line: 4, .. })
        ));
        let single =
            r#"{"group_id":"g","prompt_id":"p","responses":[{"token_count":1,"reward":1.0}]}"#;
        assert!(matches!(
            parse_rollout_line(5, single, 0.0),
            Err(AggError::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn float_formatting() {
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(-0.0), "0");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(0.5), "0.5");
        assert_eq!(format_float(-0.375), "-0.375");
        assert_eq!(format_float(1.0 / 3.0), "0.3333333333");
        assert_eq!(format_float(2.0 / 3.0), "0.6666666667");
        assert_eq!(format_float(123456.789), "123456.789");
        assert_eq!(format_float(1234567890.0), "1234567890");
        assert_eq!(format_float(12345678901.0), "1.23456789e10");
        assert_eq!(format_float(1e-5), "0.00001");
        assert_eq!(format_float(1.5e-7), "1.5e-7");
        assert_eq!(format_float(9.99999999999), "10");
        assert_eq!(format_float(f64::NAN), "");
    }

    #[test]
    fn metrics_rendering() {
        assert_eq!(render_metrics(&[]), format!("{METRICS_HEADER}\n"));
        let r = MetricRecord {
            step: 3,
            rule: "token".into(),
            objective: Some(0.5),
            pg_loss: Some(-0.5),
            len_cv: Some(0.25),
            len_gap: None,
            tbar_pos: Some(2.0),
            tbar_neg: None,
            mean_reward: Some(0.125),
            k_mean: Some(2.0),
            clip_fraction: Some(0.0),
        };
        let doc = render_metrics(std::slice::from_ref(&r));
        assert_eq!(doc.lines().count(), 2);
        assert_eq!(
            doc.lines().nth(1).unwrap(),
            "3,token,0.5,-0.5,0.25,,2,,0.125,2,0"
        );
    }
}
