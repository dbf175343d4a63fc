use super::catalog::EntityKind;
use super::domain::{Episode, Instruction};
use super::state::{Action, Relation, Triple, Verb, WorldState};
use crate::error::{Result, TmowError};

pub const DEFAULT_MAX_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: WorldState,
    pub action: Action,
    pub next_observation: WorldState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: WorldState,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_state(&self) -> &WorldState {
        self.steps
            .last()
            .map_or(&self.initial, |s| &s.next_observation)
    }

    /// Observations the agent acted on (one per step).
    pub fn observations(&self) -> impl Iterator<Item = &WorldState> {
        self.steps.iter().map(|s| &s.observation)
    }
}

/// Instruction plus an expert trajectory for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub domain_id: String,
    pub instruction: Instruction,
    pub goal: Vec<Triple>,
    pub trajectory: Trajectory,
}

struct Recorder {
    state: WorldState,
    steps: Vec<Step>,
}

impl Recorder {
    fn act(&mut self, verb: Verb, target: usize) -> Result<()> {
        let action = Action::new(verb, &self.state.names()[target]);
        let out = self.state.step(&action);
        if out.noop {
            return Err(TmowError::Generation(format!(
                "scripted action {action} is inapplicable"
            )));
        }
        self.steps.push(Step {
            observation: self.state.clone(),
            action,
            next_observation: out.state.clone(),
        });
        self.state = out.state;
        Ok(())
    }

    fn approach(&mut self, x: usize) -> Result<()> {
        let room = self
            .state
            .room_of(x)
            .ok_or_else(|| TmowError::Generation(format!("{} has no room", self.state.names()[x])))?;
        if self.state.agent_room() != Some(room) {
            self.act(Verb::Walk, room)?;
        }
        if !self.state.is_close(x) {
            self.act(Verb::Walk, x)?;
        }
        Ok(())
    }

    fn acquire(&mut self, x: usize) -> Result<()> {
        if self.state.held() == Some(x) {
            return Ok(());
        }
        if self.state.held().is_some() {
            return Err(TmowError::Generation("agent already holds another object".into()));
        }
        self.approach(x)?;
        if self.state.is_enclosed(x) {
            let holder = self.state.support_of(x).expect("enclosed implies support").holder;
            self.act(Verb::Open, holder)?;
        }
        self.act(Verb::Grab, x)
    }

    fn deliver(&mut self, x: usize, dest: usize) -> Result<()> {
        self.acquire(x)?;
        self.approach(dest)?;
        let verb = if self.state.kinds()[dest] == EntityKind::Container {
            if !self.state.is_open(dest) {
                self.act(Verb::Open, dest)?;
            }
            Verb::PutIn
        } else {
            Verb::Put
        };
        self.act(verb, dest)
    }

    fn switch_on(&mut self, d: usize) -> Result<()> {
        if self.state.is_powered(d) {
            return Ok(());
        }
        self.approach(d)?;
        self.act(Verb::Switch, d)
    }
}

/// Shortest scripted plan that satisfies `goal` from `initial`, subgoals in order.
pub fn script_expert(initial: &WorldState, goal: &[Triple], max_steps: usize) -> Result<Trajectory> {
    initial.satisfies(goal)?;
    let mut rec = Recorder {
        state: initial.clone(),
        steps: Vec::new(),
    };
    for t in goal {
        if rec.state.triples().contains(t) {
            continue;
        }
        let idx = |n: &str| {
            rec.state
                .index(n)
                .ok_or_else(|| TmowError::Generation(format!("unknown entity {n:?}")))
        };
        match t.1 {
            Relation::Holds => {
                let x = idx(&t.2)?;
                rec.acquire(x)?;
            }
            Relation::On | Relation::In => {
                let (x, dest) = (idx(&t.0)?, idx(&t.2)?);
                rec.deliver(x, dest)?;
            }
            Relation::Is if t.2 == "switched_on" => {
                let d = idx(&t.0)?;
                rec.switch_on(d)?;
            }
            _ => {
                return Err(TmowError::Generation(format!("no script for goal triple {t}")));
            }
        }
    }
    if !rec.state.satisfies(goal)? {
        return Err(TmowError::Generation("scripted plan misses the goal".into()));
    }
    if rec.steps.len() > max_steps {
        return Err(TmowError::Generation(format!(
            "plan of {} steps exceeds max_steps {max_steps}",
            rec.steps.len()
        )));
    }
    Ok(Trajectory {
        initial: initial.clone(),
        steps: rec.steps,
    })
}

pub fn demonstrate(episode: &Episode, max_steps: usize) -> Result<Demonstration> {
    let trajectory = script_expert(&episode.initial, &episode.goal, max_steps)?;
    Ok(Demonstration {
        domain_id: episode.domain_id.clone(),
        instruction: episode.instruction.clone(),
        goal: episode.goal.clone(),
        trajectory,
    })
}
