//! System Usability Scale scoring and letter grades.
//!
//! CSV input has one row per respondent: either ten answers, or a
//! respondent id followed by ten answers. A first row that does not parse
//! as answers is treated as a header.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SusError {
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("score {0} outside [0, 100]")]
    OutOfRange(f64),
    #[error("need at least {needed} responses, got {got}")]
    TooFewResponses { needed: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SusResponse {
    pub respondent: String,
    pub answers: [u8; 10],
}

impl SusResponse {
    pub fn new(respondent: impl Into<String>, answers: [u8; 10]) -> Result<Self, SusError> {
        if let Some((i, a)) = answers.iter().enumerate().find(|(_, a)| !(1..=5).contains(*a)) {
            return Err(SusError::MalformedResponse(format!("answer {} is {a}, expected 1..=5", i + 1)));
        }
        Ok(Self { respondent: respondent.into(), answers })
    }
}

/// Odd items add `answer − 1`, even items add `5 − answer`; the sum times
/// 2.5 lands in `[0, 100]`.
pub fn sus_score(r: &SusResponse) -> Result<f64, SusError> {
    let r = SusResponse::new(r.respondent.clone(), r.answers)?;
    let sum: u32 = r
        .answers
        .iter()
        .enumerate()
        .map(|(i, &a)| if i % 2 == 0 { a as u32 - 1 } else { 5 - a as u32 })
        .sum();
    Ok(sum as f64 * 2.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grade {
    A,
    B,
    C,
    D,
    F,
}

impl std::fmt::Display for Grade {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// A from 90, B from 80, C from 70, D from 65, F below.
pub fn sus_grade(score: f64) -> Result<Grade, SusError> {
    if !(0.0..=100.0).contains(&score) {
        return Err(SusError::OutOfRange(score));
    }
    Ok(match score {
        s if s >= 90.0 => Grade::A,
        s if s >= 80.0 => Grade::B,
        s if s >= 70.0 => Grade::C,
        s if s >= 65.0 => Grade::D,
        _ => Grade::F,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub respondent: String,
    pub score: f64,
    pub grade: Grade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusReport {
    pub responses: Vec<ScoredResponse>,
    pub mean: f64,
    /// Sample standard deviation; `0` for a single respondent.
    pub sd: f64,
}

pub fn sus_report(responses: &[SusResponse]) -> Result<SusReport, SusError> {
    if responses.is_empty() {
        return Err(SusError::TooFewResponses { needed: 1, got: 0 });
    }
    let scored = responses
        .iter()
        .map(|r| {
            let score = sus_score(r)?;
            Ok(ScoredResponse { respondent: r.respondent.clone(), score, grade: sus_grade(score)? })
        })
        .collect::<Result<Vec<_>, SusError>>()?;
    let n = scored.len() as f64;
    let mean = scored.iter().map(|s| s.score).sum::<f64>() / n;
    let sd = if scored.len() < 2 {
        0.0
    } else {
        (scored.iter().map(|s| (s.score - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(SusReport { responses: scored, mean, sd })
}

fn parse_answers(fields: &[&str]) -> Option<[u8; 10]> {
    let v: Vec<u8> = fields.iter().map(|f| f.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

pub fn read_responses<R: Read>(input: R) -> Result<Vec<SusResponse>, SusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| SusError::MalformedResponse(e.to_string()))?;
        let fields: Vec<&str> = rec.iter().collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        let (id, answers) = match fields.len() {
            10 => (format!("{}", out.len() + 1), parse_answers(&fields)),
            11 => (fields[0].to_string(), parse_answers(&fields[1..])),
            n => return Err(SusError::MalformedResponse(format!("row {} has {n} fields", i + 1))),
        };
        match answers {
            Some(a) => out.push(SusResponse::new(id, a)?),
            None if i == 0 => continue,
            None => return Err(SusError::MalformedResponse(format!("row {} is not numeric", i + 1))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(odd: u8, even: u8) -> SusResponse {
        let mut a = [0; 10];
        for (i, v) in a.iter_mut().enumerate() {
            *v = if i % 2 == 0 { odd } else { even };
        }
        SusResponse::new("x", a).unwrap()
    }

    #[test]
    fn fixtures() {
        assert_eq!(sus_score(&resp(3, 3)).unwrap(), 50.0);
        assert_eq!(sus_score(&resp(5, 1)).unwrap(), 100.0);
        assert_eq!(sus_score(&resp(1, 5)).unwrap(), 0.0);
        assert_eq!(sus_score(&resp(4, 2)).unwrap(), 75.0);
    }

    #[test]
    fn grades() {
        let g = |s| sus_grade(s).unwrap();
        assert_eq!([g(58.0), g(75.0), g(73.0), g(53.0), g(68.0), g(40.0)], [Grade::F, Grade::C, Grade::C, Grade::F, Grade::D, Grade::F]);
        assert_eq!((g(90.0), g(89.9), g(80.0), g(65.0), g(64.9)), (Grade::A, Grade::B, Grade::B, Grade::D, Grade::F));
        assert_eq!(sus_grade(100.5), Err(SusError::OutOfRange(100.5)));
    }

    #[test]
    fn invalid_answers_rejected() {
        assert!(SusResponse::new("x", [0; 10]).is_err());
        let bad = SusResponse { respondent: "x".into(), answers: [6; 10] };
        assert!(sus_score(&bad).is_err());
    }

    #[test]
    fn csv_with_header_and_ids() {
        let text = "id,q1,q2,q3,q4,q5,q6,q7,q8,q9,q10\nr1,3,3,3,3,3,3,3,3,3,3\nr2,5,1,5,1,5,1,5,1,5,1\n";
        let rs = read_responses(text.as_bytes()).unwrap();
        let rep = sus_report(&rs).unwrap();
        assert_eq!(rep.responses[1].respondent, "r2");
        assert_eq!(rep.mean, 75.0);
        assert!((rep.sd - 1250f64.sqrt()).abs() < 1e-12);
        let bare = read_responses("4,2,4,2,4,2,4,2,4,2\n".as_bytes()).unwrap();
        assert_eq!(bare[0].respondent, "1");
        assert!(read_responses("1,2,3\n".as_bytes()).is_err());
    }
}
