//! CHB-MIT `*-summary.txt` parsing and the JSON annotation interchange format.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::time::parse_clock;
use super::EdfError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeizureSpan {
    pub onset_s: f64,
    pub offset_s: f64,
}

/// One recording file: its absolute start time and seizures relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileAnnotation {
    pub file: String,
    pub start_time: Option<f64>,
    #[serde(default)]
    pub seizures: Vec<SeizureSpan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeizureAnnotation {
    pub file_id: String,
    pub onset_s: f64,
    pub offset_s: f64,
    pub abs_onset: f64,
    pub abs_offset: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet {
    pub files: Vec<FileAnnotation>,
}

impl AnnotationSet {
    pub fn from_json(text: &str) -> Result<Self, EdfError> {
        let set: Self = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation set serializes")
    }

    pub fn validate(&self) -> Result<(), EdfError> {
        for f in &self.files {
            for s in &f.seizures {
                if !(s.onset_s >= 0.0 && s.onset_s < s.offset_s) {
                    return Err(EdfError::SeizureOrder {
                        file: f.file.clone(),
                        onset: s.onset_s,
                        offset: s.offset_s,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, file: &str) -> Option<&FileAnnotation> {
        self.files.iter().find(|f| f.file == file)
    }

    pub fn has_full_timeline(&self) -> bool {
        self.files.iter().all(|f| f.start_time.is_some())
    }

    /// Every seizure with absolute times, sorted by onset.
    pub fn seizures(&self) -> Result<Vec<SeizureAnnotation>, EdfError> {
        let mut out = Vec::new();
        for f in &self.files {
            if f.seizures.is_empty() {
                continue;
            }
            let start = f.start_time.ok_or_else(|| EdfError::MissingStartTime(f.file.clone()))?;
            for s in &f.seizures {
                out.push(SeizureAnnotation {
                    file_id: f.file.clone(),
                    onset_s: s.onset_s,
                    offset_s: s.offset_s,
                    abs_onset: start + s.onset_s,
                    abs_offset: start + s.offset_s,
                });
            }
        }
        out.sort_by(|a, b| a.abs_onset.total_cmp(&b.abs_onset));
        Ok(out)
    }
}

fn patterns() -> &'static [Regex; 4] {
    static P: OnceLock<[Regex; 4]> = OnceLock::new();
    P.get_or_init(|| {
        [
            Regex::new(r"^File Name:\s*(\S+)").unwrap(),
            Regex::new(r"^File Start Time:\s*(\S+)").unwrap(),
            Regex::new(r"^Seizure(?:\s+\d+)?\s+Start Time:\s*(\d+(?:\.\d+)?)\s*seconds").unwrap(),
            Regex::new(r"^Seizure(?:\s+\d+)?\s+End Time:\s*(\d+(?:\.\d+)?)\s*seconds").unwrap(),
        ]
    })
}

/// Parses a CHB-MIT summary file.
///
/// Clock times carry no date, so files are placed on a running timeline:
/// each start is the previous start plus the clock difference modulo one day.
/// The first file starts at its clock time on day zero.
pub fn parse_summary(text: &str) -> Result<AnnotationSet, EdfError> {
    let [file_re, start_re, onset_re, end_re] = patterns();
    let mut files: Vec<FileAnnotation> = Vec::new();
    let mut pending_onset: Option<(usize, f64)> = None;
    let mut last_start: Option<f64> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if let Some(c) = file_re.captures(line) {
            if let Some((l, _)) = pending_onset.take() {
                return Err(EdfError::Summary {
                    line: l,
                    msg: "seizure start without end".into(),
                });
            }
            files.push(FileAnnotation {
                file: c[1].to_string(),
                start_time: None,
                seizures: Vec::new(),
            });
        } else if let Some(c) = start_re.captures(line) {
            let file = files.last_mut().ok_or_else(|| EdfError::Summary {
                line: line_no,
                msg: "start time outside a file block".into(),
            })?;
            let clock = parse_clock(&c[1]).ok_or_else(|| EdfError::Summary {
                line: line_no,
                msg: format!("bad clock `{}`", &c[1]),
            })?;
            let abs = match last_start {
                None => clock,
                Some(prev) => prev + (clock - prev).rem_euclid(86400.0),
            };
            file.start_time = Some(abs);
            last_start = Some(abs);
        } else if let Some(c) = onset_re.captures(line) {
            if files.is_empty() {
                return Err(EdfError::Summary {
                    line: line_no,
                    msg: "seizure outside a file block".into(),
                });
            }
            if pending_onset.is_some() {
                return Err(EdfError::Summary {
                    line: line_no,
                    msg: "two seizure starts without an end".into(),
                });
            }
            pending_onset = Some((line_no, c[1].parse().unwrap()));
        } else if let Some(c) = end_re.captures(line) {
            let (_, onset) = pending_onset.take().ok_or_else(|| EdfError::Summary {
                line: line_no,
                msg: "seizure end without start".into(),
            })?;
            let offset: f64 = c[1].parse().unwrap();
            let file = files.last_mut().expect("checked when the onset was read");
            if offset <= onset {
                return Err(EdfError::SeizureOrder {
                    file: file.file.clone(),
                    onset,
                    offset,
                });
            }
            file.seizures.push(SeizureSpan { onset_s: onset, offset_s: offset });
        }
    }
    if let Some((l, _)) = pending_onset {
        return Err(EdfError::Summary {
            line: l,
            msg: "seizure start without end".into(),
        });
    }
    for f in &files {
        if !f.seizures.is_empty() && f.start_time.is_none() {
            return Err(EdfError::MissingStartTime(f.file.clone()));
        }
    }
    Ok(AnnotationSet { files })
}
