use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::catalog::{catalog_index, CATALOG};
use super::domain::Instruction;
use super::state::{Action, Relation, Triple, Verb, WorldState, STATE_WORDS};
use crate::error::{Result, TmowError};

pub const SEP: &str = "<sep>";
pub const EOS: &str = "<eos>";
pub const INSTRUCTION_WORDS: [&str; 5] = ["fetch", "put", "place", "then", "switch"];
pub const MAX_SEQ_LEN: usize = 128;

/// Closed token vocabulary: specials, catalog entities, relations, state words, instruction words.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

/// Input side of one world-model example, split by role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedIo {
    pub instruction: Vec<usize>,
    pub triples: Vec<[usize; 3]>,
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = vec![SEP.into(), EOS.into()];
        tokens.extend(CATALOG.iter().map(|e| e.name.to_string()));
        tokens.extend(Relation::ALL.iter().map(|r| r.name().to_string()));
        tokens.extend(STATE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(INSTRUCTION_WORDS.iter().map(|s| s.to_string()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| TmowError::Input(format!("token {token:?} is out of vocabulary")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| TmowError::Input(format!("token id {id} is out of vocabulary")))
    }

    /// Short stable digest of the token list, stored in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn encode_instruction(&self, instruction: &Instruction) -> Result<Vec<usize>> {
        if instruction.tokens.is_empty() {
            return Err(TmowError::Input("empty instruction".into()));
        }
        instruction.tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_triples(&self, state: &WorldState) -> Result<Vec<[usize; 3]>> {
        state
            .triples()
            .iter()
            .map(|t| Ok([self.id(&t.0)?, self.id(t.1.name())?, self.id(&t.2)?]))
            .collect()
    }

    /// `instruction <sep> s r o s r o ... <eos>`.
    pub fn serialize_io(&self, instruction: &Instruction, state: &WorldState) -> Result<Vec<usize>> {
        let mut out = self.encode_instruction(instruction)?;
        out.push(self.id(SEP)?);
        for t in self.encode_triples(state)? {
            out.extend(t);
        }
        out.push(self.id(EOS)?);
        if out.len() > MAX_SEQ_LEN {
            return Err(TmowError::Truncation {
                len: out.len(),
                max: MAX_SEQ_LEN,
            });
        }
        Ok(out)
    }

    pub fn deserialize_io(&self, ids: &[usize]) -> Result<(Instruction, Vec<Triple>)> {
        let sep = self.id(SEP)?;
        let eos = self.id(EOS)?;
        let split = ids
            .iter()
            .position(|i| *i == sep)
            .ok_or_else(|| TmowError::Parse("missing <sep>".into()))?;
        if ids.last() != Some(&eos) {
            return Err(TmowError::Parse("missing <eos>".into()));
        }
        let tokens = ids[..split]
            .iter()
            .map(|i| self.token(*i).map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        let body = &ids[split + 1..ids.len() - 1];
        if body.len() % 3 != 0 {
            return Err(TmowError::Parse("triple section length is not a multiple of 3".into()));
        }
        let triples = body
            .chunks(3)
            .map(|c| {
                let rel = self.token(c[1])?;
                let rel = Relation::parse(rel)
                    .ok_or_else(|| TmowError::Parse(format!("{rel:?} is not a relation")))?;
                Ok(Triple(self.token(c[0])?.to_string(), rel, self.token(c[2])?.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Instruction {
                tokens,
                domain_id: None,
            },
            triples,
        ))
    }

    /// Splits a serialized sequence by role for the world model embedder.
    pub fn encode_io(&self, instruction: &Instruction, state: &WorldState) -> Result<EncodedIo> {
        self.serialize_io(instruction, state)?;
        Ok(EncodedIo {
            instruction: self.encode_instruction(instruction)?,
            triples: self.encode_triples(state)?,
        })
    }

    /// Next-observation target tokens (flattened triples).
    pub fn observation_targets(&self, state: &WorldState) -> Result<Vec<usize>> {
        Ok(self.encode_triples(state)?.into_iter().flatten().collect())
    }
}

/// Every action is a single class id: `verb_index · |catalog| + entity_index`.
pub fn action_vocab_size() -> usize {
    Verb::ALL.len() * CATALOG.len()
}

pub fn tokenize_action(action: &Action) -> Result<Vec<usize>> {
    let v = Verb::ALL
        .iter()
        .position(|x| *x == action.verb)
        .expect("verb in ALL");
    let e = catalog_index(&action.target)
        .ok_or_else(|| TmowError::Input(format!("unknown action target {:?}", action.target)))?;
    Ok(vec![v * CATALOG.len() + e])
}

pub fn decode_action(id: usize) -> Result<Action> {
    if id >= action_vocab_size() {
        return Err(TmowError::Input(format!("action id {id} out of range")));
    }
    let verb = Verb::ALL[id / CATALOG.len()];
    Ok(Action::new(verb, CATALOG[id % CATALOG.len()].name))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graphworld::domain::{generate_domain, TaskCategory};

    #[test]
    fn vocabulary_size_from_catalog() {
        let v = Vocabulary::new();
        let expected = 2 + CATALOG.len() + Relation::ALL.len() + STATE_WORDS.len() + INSTRUCTION_WORDS.len();
        assert_eq!(v.len(), expected);
        assert_eq!(action_vocab_size(), 6 * CATALOG.len());
    }

    #[test]
    fn io_round_trip_and_injective() {
        let v = Vocabulary::new();
        let d = generate_domain(3, TaskCategory::Relocate, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = d.sample_episode(&mut rng).unwrap();
        let b = d.sample_episode(&mut rng).unwrap();
        let ids = v.serialize_io(&a.instruction, &a.initial).unwrap();
        let (inst, triples) = v.deserialize_io(&ids).unwrap();
        assert_eq!(inst.tokens, a.instruction.tokens);
        let rebuilt = WorldState::from_triples(a.initial.names(), &triples).unwrap();
        assert_eq!(rebuilt, a.initial);
        if a.initial != b.initial {
            assert_ne!(
                v.serialize_io(&a.instruction, &a.initial).unwrap(),
                v.serialize_io(&a.instruction, &b.initial).unwrap()
            );
        }
    }

    #[test]
    fn action_round_trip() {
        for id in 0..action_vocab_size() {
            let a = decode_action(id).unwrap();
            assert_eq!(tokenize_action(&a).unwrap(), vec![id]);
        }
    }

    #[test]
    fn oov_instruction_rejected() {
        let v = Vocabulary::new();
        let err = v.encode_instruction(&Instruction::new(&["fetch", "dragon"]));
        assert!(matches!(err, Err(TmowError::Input(_))));
        assert!(v.encode_instruction(&Instruction::new(&[])).is_err());
    }
}
