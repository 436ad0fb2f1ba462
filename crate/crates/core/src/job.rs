//! Job files: parsing with line-precise errors and token resolution.
//!
//! ```json
//! {
//!   "prompt_source": "a cat sitting on a chair",
//!   "prompt_target": "a cat sitting on a chair",
//!   "objects": [{ "token": "cat", "dx": 2, "dy": 0 }],
//!   "run": { "T": 30, "t_star": 15, "guidance_scale": 7.5, "seed": 7 },
//!   "toy": { "seed": 0, "resolutions": [[8, 8], [4, 4]], "d": 16 }
//! }
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{prepare_prompt, DenoiserBackend, PreparedPrompt};
use crate::error::MftfError;
use crate::model::{LayoutParams, RunConfig, DEFAULT_ETA};
use crate::toy::ToyConfig;

/// An object named by its word or by its token index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenRef {
    Index(usize),
    Word(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub token: TokenRef,
    #[serde(default)]
    pub dx: f64,
    #[serde(default)]
    pub dy: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub drop: bool,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn one() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub prompt_source: String,
    pub prompt_target: String,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyConfig>,
}

/// A job error located in the source text when possible.
#[derive(Clone, Debug, PartialEq)]
pub struct JobError {
    pub message: String,
    /// 1-based.
    pub line: Option<usize>,
    pub column: Option<usize>,
    /// JSON path of the offending value, e.g. `objects[0].token`.
    pub path: Option<String>,
    /// Whether the error is the caller's (bad job) rather than the runtime's.
    pub is_config: bool,
}

impl fmt::Display for JobError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: ")?,
            (Some(l), None) => write!(f, "line {l}: ")?,
            _ => {}
        }
        if let Some(p) = &self.path {
            write!(f, "{p}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for JobError {}

impl JobError {
    fn at(error: MftfError, text: &str, path: &str, needle: Option<&str>) -> Self {
        Self {
            is_config: error.is_config(),
            message: error.to_string(),
            line: needle.and_then(|n| line_of(text, n)),
            column: None,
            path: Some(path.to_string()),
        }
    }
}

/// 1-based line of the first occurrence of `needle`.
pub fn line_of(text: &str, needle: &str) -> Option<usize> {
    text.find(needle).map(|pos| text[..pos].matches('\n').count() + 1)
}

/// Line of the `n`-th `"token"` key, the usual anchor for object errors.
fn object_line(text: &str, n: usize) -> Option<usize> {
    let mut from = 0;
    let mut found = None;
    for _ in 0..=n {
        let pos = text[from..].find("\"token\"")? + from;
        found = Some(pos);
        from = pos + 1;
    }
    found.map(|pos| text[..pos].matches('\n').count() + 1)
}

pub fn parse_job(text: &str) -> Result<JobSpec, JobError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        JobError {
            line: Some(inner.line()).filter(|&l| l > 0),
            column: Some(inner.column()).filter(|&c| c > 0),
            message: inner.to_string(),
            path: Some(path).filter(|p| p != "."),
            is_config: true,
        }
    })
}

#[derive(Clone, Debug)]
pub struct ResolvedJob {
    pub source: PreparedPrompt,
    pub target: PreparedPrompt,
    pub layouts: Vec<LayoutParams>,
    pub run: RunConfig,
    /// The job with tokens as indices and aliases expanded; re-running it
    /// reproduces the run exactly.
    pub snapshot: JobSpec,
    pub warnings: Vec<String>,
}

/// Tokenize both prompts and turn object specs into layout parameters.
///
/// `eta = 1` is shorthand for dropping the object; the object is then
/// localized at the default threshold.
pub fn resolve_job(job: &JobSpec, text: &str, backend: &dyn DenoiserBackend) -> Result<ResolvedJob, JobError> {
    let info = backend.info();
    let mut source = prepare_prompt(backend, &job.prompt_source)
        .map_err(|e| JobError::at(e, text, "prompt_source", Some("\"prompt_source\"")))?;
    let target = prepare_prompt(backend, &job.prompt_target)
        .map_err(|e| JobError::at(e, text, "prompt_target", Some("\"prompt_target\"")))?;
    if job.objects.is_empty() && job.run.t_star > 0 {
        return Err(JobError::at(
            MftfError::config("layout control requested without any objects"),
            text,
            "objects",
            Some("\"objects\""),
        ));
    }
    let mut warnings = source.warnings.clone();
    warnings.extend(target.warnings.iter().cloned());
    let mut layouts = Vec::with_capacity(job.objects.len());
    let mut resolved_objects = Vec::with_capacity(job.objects.len());
    for (k, obj) in job.objects.iter().enumerate() {
        let path = format!("objects[{k}].token");
        let locate = |e: MftfError, needle: Option<String>| {
            let mut err = JobError::at(e, text, &path, needle.as_deref());
            if err.line.is_none() {
                err.line = object_line(text, k);
            }
            err
        };
        let index = match &obj.token {
            TokenRef::Index(i) => {
                if *i >= source.spec.len() {
                    return Err(locate(
                        MftfError::Index(format!(
                            "token index {i} out of range for source prompt of {} tokens",
                            source.spec.len()
                        )),
                        None,
                    ));
                }
                *i
            }
            TokenRef::Word(w) => source
                .spec
                .find_token(w)
                .map_err(|e| locate(e, Some(format!("{w:?}"))))?,
        };
        let mut params = LayoutParams {
            token_index: index,
            dx: obj.dx,
            dy: obj.dy,
            theta: obj.theta,
            scale: obj.scale,
            drop: obj.drop,
            eta: obj.eta,
        };
        if params.eta == 1.0 {
            if !params.drop {
                warnings.push(format!("object {k}: eta = 1 read as drop = true"));
            }
            params.drop = true;
            params.eta = DEFAULT_ETA;
        }
        params
            .validate()
            .map_err(|e| locate(e, None).with_path(format!("objects[{k}]")))?;
        let label = source.spec.token_strings[index].clone();
        source
            .spec
            .add_object(index, label)
            .map_err(|e| locate(e, None))?;
        layouts.push(params);
        resolved_objects.push(ObjectSpec {
            token: TokenRef::Index(index),
            dx: params.dx,
            dy: params.dy,
            theta: params.theta,
            scale: params.scale,
            drop: params.drop,
            eta: params.eta,
        });
    }
    job.run
        .validate(info)
        .map_err(|e| JobError::at(e, text, "run", Some("\"run\"")))?;
    Ok(ResolvedJob {
        snapshot: JobSpec {
            prompt_source: job.prompt_source.clone(),
            prompt_target: job.prompt_target.clone(),
            objects: resolved_objects,
            run: job.run.clone(),
            toy: job.toy.clone(),
        },
        source,
        target,
        layouts,
        run: job.run.clone(),
        warnings,
    })
}

impl JobError {
    fn with_path(mut self, path: String) -> Self {
        self.path = Some(path);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::build_toy_backend;

    const JOB: &str = r#"{
  "prompt_source": "a cat sitting on a chair",
  "prompt_target": "a cat sitting on a chair",
  "objects": [
    { "token": "cat", "dx": 2 },
    { "token": 6, "eta": 1.0 }
  ],
  "run": { "T": 10, "t_star": 5 }
}"#;

    #[test]
    fn resolves_words_and_indices() {
        let b = build_toy_backend(0, &[(8, 8), (4, 4)], 16).unwrap();
        let job = parse_job(JOB).unwrap();
        let r = resolve_job(&job, JOB, &b).unwrap();
        assert_eq!(r.layouts[0].token_index, 2);
        assert_eq!(r.layouts[0].dx, 2.0);
        assert!(r.layouts[1].drop);
        assert_eq!(r.layouts[1].eta, DEFAULT_ETA);
        assert_eq!(r.snapshot.objects[0].token, TokenRef::Index(2));
        assert_eq!(r.run.guidance_scale, 7.5);
    }

    #[test]
    fn unknown_token_names_the_word_and_line() {
        let b = build_toy_backend(0, &[(8, 8), (4, 4)], 16).unwrap();
        let text = JOB.replace("\"cat\"", "\"dog\"");
        let job = parse_job(&text).unwrap();
        let e = resolve_job(&job, &text, &b).unwrap_err();
        assert!(e.is_config);
        assert!(e.message.contains("dog"));
        assert_eq!(e.line, Some(5));
    }

    #[test]
    fn syntax_errors_carry_line_and_path() {
        let text = JOB.replace("\"dx\": 2", "\"dx\": \"two\"");
        let e = parse_job(&text).unwrap_err();
        assert_eq!(e.line, Some(5));
        assert_eq!(e.path.as_deref(), Some("objects[0].dx"));
    }

    #[test]
    fn snapshot_round_trips() {
        let b = build_toy_backend(0, &[(8, 8), (4, 4)], 16).unwrap();
        let job = parse_job(JOB).unwrap();
        let r = resolve_job(&job, JOB, &b).unwrap();
        let text = serde_json::to_string_pretty(&r.snapshot).unwrap();
        let again = resolve_job(&parse_job(&text).unwrap(), &text, &b).unwrap();
        assert_eq!(again.layouts, r.layouts);
        assert_eq!(again.snapshot, r.snapshot);
    }
}
