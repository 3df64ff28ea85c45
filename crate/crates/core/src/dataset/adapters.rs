//! Readers for each benchmark's public distribution format and for the
//! normalized line-delimited format.
//!
//! | tag          | native input                                                        |
//! |--------------|---------------------------------------------------------------------|
//! | `csqa`       | JSONL, `{"id", "question": {"stem", "choices": [{"label","text"}]}, "answerKey"}` |
//! | `strategyqa` | JSON array (or JSONL) of `{"qid", "question", "answer": bool}`       |
//! | `piqa`       | JSONL `{"goal", "sol1", "sol2"}` plus `<stem>-labels.lst`, or an inline `"label"` |
//! | `bbh_date`   | BBH JSON `{"examples": [{"input", "target": "(D)"}]}` with `(A) ..` option lines |
//! | `bbh_causal` | BBH JSON `{"examples": [{"input", "target": "Yes"}]}`                |

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;
use serde_json::Value;

use super::{DatasetDescriptor, DatasetError, DatasetTag, Label, McqInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// The benchmark's own distribution format, chosen by tag.
    Native,
    /// `{"question_id", "question", "options": [..], "gold_index"}` per line.
    Normalized,
}

impl FromStr for InputFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(InputFormat::Native),
            "jsonl" | "normalized" => Ok(InputFormat::Normalized),
            other => Err(DatasetError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub instances: Vec<McqInstance>,
    pub descriptor: DatasetDescriptor,
}

impl LoadedDataset {
    pub fn size_matches(&self) -> bool {
        self.instances.len() == self.descriptor.expected_size
    }
}

/// Loads `path` with the native adapter registered for `tag`.
pub fn load_dataset(path: &Path, tag: DatasetTag) -> Result<LoadedDataset, DatasetError> {
    load_dataset_as(path, tag, InputFormat::Native)
}

pub fn load_dataset_as(
    path: &Path,
    tag: DatasetTag,
    format: InputFormat,
) -> Result<LoadedDataset, DatasetError> {
    let raw = read(path)?;
    let instances = match (format, tag) {
        (InputFormat::Normalized, _) => jsonl_rows(path, &raw)
            .map(|(line, v)| normalized_row(path, line, v, tag))
            .collect::<Result<Vec<_>, _>>()?,
        (InputFormat::Native, DatasetTag::Csqa) => jsonl_rows(path, &raw)
            .map(|(line, v)| csqa_row(path, line, v))
            .collect::<Result<Vec<_>, _>>()?,
        (InputFormat::Native, DatasetTag::Strategyqa) => strategyqa(path, &raw)?,
        (InputFormat::Native, DatasetTag::Piqa) => piqa(path, &raw)?,
        (InputFormat::Native, DatasetTag::BbhDate) => bbh(path, &raw, DatasetTag::BbhDate)?,
        (InputFormat::Native, DatasetTag::BbhCausal) => bbh(path, &raw, DatasetTag::BbhCausal)?,
    };
    let loaded = LoadedDataset {
        instances,
        descriptor: tag.descriptor(),
    };
    if format == InputFormat::Native && !loaded.size_matches() {
        log::warn!(
            "{}: loaded {} {} questions, reference split has {}",
            path.display(),
            loaded.instances.len(),
            tag,
            loaded.descriptor.expected_size
        );
    }
    Ok(loaded)
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Unreadable {
        path: path.to_path_buf(),
        source,
    })
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Non-blank lines parsed as JSON, with 1-based line numbers. Parse failures
/// come through as `Value::Null` so the row adapter reports them in context.
fn jsonl_rows<'a>(
    path: &'a Path,
    raw: &'a str,
) -> impl Iterator<Item = (usize, Result<Value, DatasetError>)> + 'a {
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(move |(i, l)| {
            let line = i + 1;
            (
                line,
                serde_json::from_str(l).map_err(|e| malformed(path, line, e.to_string())),
            )
        })
}

#[derive(Deserialize)]
struct NormalizedRow {
    question_id: String,
    question: String,
    options: Vec<String>,
    gold_index: usize,
}

/// Parses one normalized record line.
pub fn parse_normalized_line(line: &str, tag: DatasetTag) -> Result<McqInstance, DatasetError> {
    let value =
        serde_json::from_str(line).map_err(|e| malformed(Path::new("<line>"), 1, e.to_string()));
    normalized_row(Path::new("<line>"), 1, value, tag)
}

fn normalized_row(
    path: &Path,
    line: usize,
    value: Result<Value, DatasetError>,
    tag: DatasetTag,
) -> Result<McqInstance, DatasetError> {
    let row: NormalizedRow =
        serde_json::from_value(value?).map_err(|e| malformed(path, line, e.to_string()))?;
    McqInstance::from_texts(
        row.question_id,
        tag,
        row.question,
        row.options,
        row.gold_index,
    )
}

#[derive(Deserialize)]
struct CsqaChoice {
    label: String,
    text: String,
}

#[derive(Deserialize)]
struct CsqaQuestion {
    stem: String,
    choices: Vec<CsqaChoice>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CsqaRow {
    id: String,
    question: CsqaQuestion,
    answer_key: String,
}

fn csqa_row(
    path: &Path,
    line: usize,
    value: Result<Value, DatasetError>,
) -> Result<McqInstance, DatasetError> {
    let row: CsqaRow =
        serde_json::from_value(value?).map_err(|e| malformed(path, line, e.to_string()))?;
    let gold = row
        .question
        .choices
        .iter()
        .position(|c| c.label.trim() == row.answer_key.trim())
        .ok_or_else(|| {
            malformed(
                path,
                line,
                format!("answerKey `{}` matches no choice", row.answer_key),
            )
        })?;
    for (i, c) in row.question.choices.iter().enumerate() {
        let expected = Label::from_index(i).map(|l| l.to_string());
        if expected.as_deref() != Some(c.label.trim()) {
            return Err(malformed(
                path,
                line,
                format!(
                    "choice {} has label `{}`, labels must run A, B, ..",
                    i, c.label
                ),
            ));
        }
    }
    let texts = row.question.choices.into_iter().map(|c| c.text).collect();
    McqInstance::from_texts(row.id, DatasetTag::Csqa, row.question.stem, texts, gold)
}

#[derive(Deserialize)]
struct StrategyQaRow {
    qid: String,
    question: String,
    answer: bool,
}

fn yes_no() -> Vec<String> {
    vec!["Yes".to_string(), "No".to_string()]
}

fn strategyqa(path: &Path, raw: &str) -> Result<Vec<McqInstance>, DatasetError> {
    let values: Vec<(usize, Result<Value, DatasetError>)> = if raw.trim_start().starts_with('[') {
        let arr: Vec<Value> =
            serde_json::from_str(raw).map_err(|e| malformed(path, e.line(), e.to_string()))?;
        arr.into_iter()
            .enumerate()
            .map(|(i, v)| (i + 1, Ok(v)))
            .collect()
    } else {
        jsonl_rows(path, raw).collect()
    };
    values
        .into_iter()
        .map(|(line, v)| {
            let row: StrategyQaRow =
                serde_json::from_value(v?).map_err(|e| malformed(path, line, e.to_string()))?;
            let gold = if row.answer { 0 } else { 1 };
            McqInstance::from_texts(
                row.qid,
                DatasetTag::Strategyqa,
                row.question,
                yes_no(),
                gold,
            )
        })
        .collect()
}

#[derive(Deserialize)]
struct PiqaRow {
    #[serde(default)]
    id: Option<String>,
    goal: String,
    sol1: String,
    sol2: String,
    #[serde(default)]
    label: Option<usize>,
}

/// `dir/valid.jsonl` → `dir/valid-labels.lst`
fn piqa_labels_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("piqa");
    path.with_file_name(format!("{stem}-labels.lst"))
}

fn piqa(path: &Path, raw: &str) -> Result<Vec<McqInstance>, DatasetError> {
    let rows = jsonl_rows(path, raw)
        .map(|(line, v)| {
            let row: PiqaRow =
                serde_json::from_value(v?).map_err(|e| malformed(path, line, e.to_string()))?;
            Ok((line, row))
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;

    let external = if rows.iter().any(|(_, r)| r.label.is_none()) {
        let labels_path = piqa_labels_path(path);
        let labels = read(&labels_path)?;
        let parsed = labels
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.trim().parse::<usize>().map_err(|_| {
                    malformed(&labels_path, i + 1, format!("label `{l}` is not 0 or 1"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if parsed.len() != rows.len() {
            return Err(malformed(
                &labels_path,
                parsed.len(),
                format!("{} labels for {} questions", parsed.len(), rows.len()),
            ));
        }
        Some(parsed)
    } else {
        None
    };

    rows.into_iter()
        .enumerate()
        .map(|(i, (_, row))| {
            let gold = row
                .label
                .or_else(|| external.as_ref().map(|l| l[i]))
                .unwrap_or(0);
            let id = row.id.unwrap_or_else(|| format!("piqa-{i}"));
            McqInstance::from_texts(
                id,
                DatasetTag::Piqa,
                row.goal,
                vec![row.sol1, row.sol2],
                gold,
            )
        })
        .collect()
}

#[derive(Deserialize)]
struct BbhFile {
    examples: Vec<BbhExample>,
}

#[derive(Deserialize)]
struct BbhExample {
    input: String,
    target: String,
}

fn split_options_block(input: &str) -> Option<(&str, &str)> {
    let idx = input.rfind("Options:")?;
    Some((
        input[..idx].trim_end(),
        input[idx + "Options:".len()..].trim(),
    ))
}

fn bbh(path: &Path, raw: &str, tag: DatasetTag) -> Result<Vec<McqInstance>, DatasetError> {
    let file: BbhFile =
        serde_json::from_str(raw).map_err(|e| malformed(path, e.line(), e.to_string()))?;
    file.examples
        .into_iter()
        .enumerate()
        .map(|(i, ex)| {
            let row = i + 1;
            let id = format!("{tag}-{i}");
            let (question, block) = split_options_block(&ex.input)
                .ok_or_else(|| malformed(path, row, "input has no `Options:` block"))?;
            match tag {
                DatasetTag::BbhCausal => {
                    let gold = match ex.target.trim() {
                        "Yes" => 0,
                        "No" => 1,
                        other => {
                            return Err(malformed(
                                path,
                                row,
                                format!("target `{other}` is not Yes/No"),
                            ))
                        }
                    };
                    McqInstance::from_texts(id, tag, question, yes_no(), gold)
                }
                _ => {
                    let mut texts = Vec::new();
                    for (j, l) in block
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .enumerate()
                    {
                        let expected = format!(
                            "({})",
                            Label::from_index(j).map(|l| l.as_char()).unwrap_or('?')
                        );
                        let text = l.strip_prefix(&expected).ok_or_else(|| {
                            malformed(
                                path,
                                row,
                                format!("option line `{l}` should start with {expected}"),
                            )
                        })?;
                        texts.push(text.trim().to_string());
                    }
                    let target = ex
                        .target
                        .trim()
                        .trim_start_matches('(')
                        .trim_end_matches(')');
                    let gold = Label::from_str(target).map(Label::index).map_err(|_| {
                        malformed(path, row, format!("target `{}` is not a label", ex.target))
                    })?;
                    McqInstance::from_texts(id, tag, question, texts, gold)
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::InvariantViolation;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn normalized_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.jsonl",
            r#"{"question_id": "a", "question": "Pick one", "options": ["x", "y"], "gold_index": 1}

{"question_id": "b", "question": "Pick again", "options": ["x", "y", "z"], "gold_index": 0}
"#,
        );
        let d = load_dataset_as(&p, DatasetTag::Csqa, InputFormat::Normalized).unwrap();
        assert_eq!(d.instances.len(), 2);
        assert!(d.instances.iter().all(|i| i.ordering_id == 0));
        assert_eq!(d.instances[0].gold_text(), "y");
        assert!(!d.size_matches());
    }

    #[test]
    fn row_error_names_question_and_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.jsonl",
            r#"{"question_id": "bad-1", "question": "q", "options": ["x", ""], "gold_index": 0}"#,
        );
        match load_dataset_as(&p, DatasetTag::Csqa, InputFormat::Normalized).unwrap_err() {
            DatasetError::InvalidRow {
                question_id,
                violation,
            } => {
                assert_eq!(question_id, "bad-1");
                assert!(matches!(violation, InvariantViolation::EmptyOption(_)));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unreadable_file_names_path() {
        let err = load_dataset(Path::new("/nonexistent/x.jsonl"), DatasetTag::Csqa).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.jsonl"));
    }

    #[test]
    fn csqa_native() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "dev_rand_split.jsonl",
            r#"{"answerKey": "A", "id": "075e483d21c29a511267ef62bedc0461", "question": {"question_concept": "revolving door", "choices": [{"label": "A", "text": "bank"}, {"label": "B", "text": "library"}, {"label": "C", "text": "department store"}, {"label": "D", "text": "mall"}, {"label": "E", "text": "new york"}], "stem": "A revolving door is convenient for two direction travel, but it also serves as a security measure at a what?"}}"#,
        );
        let d = load_dataset(&p, DatasetTag::Csqa).unwrap();
        let i = &d.instances[0];
        assert_eq!(i.options.len(), 5);
        assert_eq!(i.gold_text(), "bank");
        assert_eq!(i.question_id, "075e483d21c29a511267ef62bedc0461");
    }

    #[test]
    fn strategyqa_array_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "sqa.json",
            r#"[{"qid": "q1", "term": "x", "question": "Are more people today related to Genghis Khan than Julius Caesar?", "answer": true, "facts": []},
                {"qid": "q2", "question": "Could a llama birth twice during War in Vietnam (1945-46)?", "answer": false}]"#,
        );
        let d = load_dataset(&p, DatasetTag::Strategyqa).unwrap();
        assert_eq!(d.instances.len(), 2);
        assert_eq!(d.instances[0].gold_text(), "Yes");
        assert_eq!(d.instances[1].gold_text(), "No");
        assert_eq!(d.instances[1].gold_label.to_string(), "B");

        let p = write(
            dir.path(),
            "sqa.jsonl",
            r#"{"qid": "q3", "question": "Q?", "answer": true}"#,
        );
        assert_eq!(
            load_dataset(&p, DatasetTag::Strategyqa)
                .unwrap()
                .instances
                .len(),
            1
        );
    }

    #[test]
    fn piqa_with_sibling_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "valid.jsonl",
            "{\"goal\": \"To open a jar\", \"sol1\": \"twist the lid\", \"sol2\": \"push the lid\"}\n{\"goal\": \"g\", \"sol1\": \"a\", \"sol2\": \"b\"}\n",
        );
        write(dir.path(), "valid-labels.lst", "0\n1\n");
        let d = load_dataset(&p, DatasetTag::Piqa).unwrap();
        assert_eq!(d.instances[0].gold_text(), "twist the lid");
        assert_eq!(d.instances[1].gold_text(), "b");
        assert_eq!(d.instances[1].question_id, "piqa-1");
    }

    #[test]
    fn piqa_missing_labels_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.jsonl",
            "{\"goal\": \"g\", \"sol1\": \"a\", \"sol2\": \"b\"}\n",
        );
        assert!(matches!(
            load_dataset(&p, DatasetTag::Piqa).unwrap_err(),
            DatasetError::Unreadable { .. }
        ));
    }

    #[test]
    fn bbh_date_options_parsed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "date_understanding.json",
            r#"{"examples": [{"input": "Today is Christmas Eve of 1937. What is the date 10 days ago in MM/DD/YYYY?\nOptions:\n(A) 12/14/2026\n(B) 12/14/1950\n(C) 12/14/2007\n(D) 12/14/1937\n(E) 07/14/1938\n(F) 12/14/1988", "target": "(D)"}]}"#,
        );
        let d = load_dataset(&p, DatasetTag::BbhDate).unwrap();
        let i = &d.instances[0];
        assert_eq!(i.options.len(), 6);
        assert_eq!(i.gold_text(), "12/14/1937");
        assert!(i.question.ends_with("MM/DD/YYYY?"));
        assert_eq!(i.question_id, "bbh_date-0");
    }

    #[test]
    fn bbh_causal_yes_no() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "causal_judgement.json",
            r#"{"examples": [{"input": "How would a typical person answer each of the following questions about causation?\nA machine is set up.\nQuestion: Did the man cause it?\nOptions:\n- Yes\n- No", "target": "No"}]}"#,
        );
        let d = load_dataset(&p, DatasetTag::BbhCausal).unwrap();
        let i = &d.instances[0];
        assert_eq!(
            i.options
                .iter()
                .map(|o| o.text.as_str())
                .collect::<Vec<_>>(),
            ["Yes", "No"]
        );
        assert_eq!(i.gold_label.to_string(), "B");
        assert!(i.question.ends_with("Did the man cause it?"));
    }

    #[test]
    fn full_size_split_matches_descriptor() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for i in 0..1221 {
            body.push_str(&format!(
                "{{\"question_id\": \"q{i}\", \"question\": \"Q{i}?\", \"options\": [\"a\",\"b\",\"c\",\"d\",\"e\"], \"gold_index\": {}}}\n",
                i % 5
            ));
        }
        let p = write(dir.path(), "csqa.jsonl", &body);
        let d = load_dataset_as(&p, DatasetTag::Csqa, InputFormat::Normalized).unwrap();
        assert!(d.size_matches());
        assert_eq!(
            super::super::dataset_stats(&d.instances).choices.get(&5),
            Some(&1221)
        );
    }
}
