//! JSON Lines demonstration files, one demonstration per line.
//!
//! ```text
//! {"domain_id":"s0-fetch","seen":true,"entities":["agent",...],
//!  "instruction":["fetch","cup"],"goal":[["agent","holds","cup"]],
//!  "initial":[["agent","inside","kitchen"],...],
//!  "steps":[{"observation":[...],"action":"walk(cup)","next_observation":[...]}]}
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::domain::{generate_domain, DomainSpec, Instruction, TaskCategory};
use super::expert::{demonstrate, Demonstration, Step, Trajectory};
use super::state::{Action, Triple, WorldState};
use crate::error::{Result, TmowError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    observation: Vec<Triple>,
    action: Action,
    next_observation: Vec<Triple>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoRecord {
    domain_id: String,
    seen: bool,
    entities: Vec<String>,
    instruction: Vec<String>,
    goal: Vec<Triple>,
    initial: Vec<Triple>,
    steps: Vec<StepRecord>,
}

/// Demonstrations grouped by domain, with the domain specs that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seen: Vec<DomainSpec>,
    pub unseen: Vec<DomainSpec>,
    pub demos: Vec<Demonstration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub seed: u64,
    pub seen: Vec<(usize, TaskCategory)>,
    pub unseen: Vec<(usize, TaskCategory)>,
    pub episodes_per_domain: usize,
    pub max_steps: usize,
}

fn domain_rng(seed: u64, domain_index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD6E8_FEB8_6659_FD93);
    rng.set_stream(stream * 1000 + domain_index as u64);
    rng
}

impl Dataset {
    pub fn generate(params: &GenerationParams) -> Result<Self> {
        let build = |list: &[(usize, TaskCategory)]| {
            list.iter()
                .map(|(scene, task)| generate_domain(params.seed, *task, *scene))
                .collect::<Result<Vec<_>>>()
        };
        let seen = build(&params.seen)?;
        let unseen = build(&params.unseen)?;
        let mut demos = Vec::new();
        for (k, d) in seen.iter().chain(&unseen).enumerate() {
            let mut rng = domain_rng(params.seed, k, 1);
            for _ in 0..params.episodes_per_domain {
                let ep = d.sample_episode(&mut rng)?;
                demos.push(demonstrate(&ep, params.max_steps)?);
            }
        }
        Ok(Self { seen, unseen, demos })
    }

    pub fn domain(&self, id: &str) -> Option<&DomainSpec> {
        self.seen.iter().chain(&self.unseen).find(|d| d.domain_id == id)
    }

    pub fn is_seen(&self, id: &str) -> bool {
        self.seen.iter().any(|d| d.domain_id == id)
    }

    pub fn demos_for<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Demonstration> + 'a {
        self.demos.iter().filter(move |d| d.domain_id == id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for demo in &self.demos {
            let rec = DemoRecord {
                domain_id: demo.domain_id.clone(),
                seen: self.is_seen(&demo.domain_id),
                entities: demo.trajectory.initial.names().to_vec(),
                instruction: demo.instruction.tokens.clone(),
                goal: demo.goal.clone(),
                initial: demo.trajectory.initial.triples().into_iter().collect(),
                steps: demo
                    .trajectory
                    .steps
                    .iter()
                    .map(|s| StepRecord {
                        observation: s.observation.triples().into_iter().collect(),
                        action: s.action.clone(),
                        next_observation: s.next_observation.triples().into_iter().collect(),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| TmowError::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| TmowError::io(path, e))
    }
}

/// Parses demonstrations from JSON Lines text; blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<(bool, Demonstration)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DemoRecord = serde_json::from_str(line)
            .map_err(|e| TmowError::Parse(format!("line {}: {e}", lineno + 1)))?;
        let state = |t: &[Triple]| WorldState::from_triples(&rec.entities, t);
        let initial = state(&rec.initial)?;
        let steps = rec
            .steps
            .iter()
            .map(|s| {
                Ok(Step {
                    observation: state(&s.observation)?,
                    action: s.action.clone(),
                    next_observation: state(&s.next_observation)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((
            rec.seen,
            Demonstration {
                domain_id: rec.domain_id.clone(),
                instruction: Instruction {
                    tokens: rec.instruction,
                    domain_id: Some(rec.domain_id),
                },
                goal: rec.goal,
                trajectory: Trajectory { initial, steps },
            },
        ));
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<(bool, Demonstration)>> {
    let text = fs::read_to_string(path).map_err(|e| TmowError::io(path, e))?;
    parse_jsonl(&text)
}
