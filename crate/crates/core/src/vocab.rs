//! Token ids and the registry of structural roles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Structural roles a token id can play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    AuxOpen,
    AuxClose,
    HintBegin,
    HintEnd,
    AnswerMark,
    Eos,
    Pad,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::AuxOpen,
        Role::AuxClose,
        Role::HintBegin,
        Role::HintEnd,
        Role::AnswerMark,
        Role::Eos,
        Role::Pad,
    ];
}

pub const MIN_VOCAB_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    roles: BTreeMap<Role, TokenId>,
    answer_alphabet: Vec<TokenId>,
}

impl Vocabulary {
    pub fn new(
        size: usize,
        roles: BTreeMap<Role, TokenId>,
        answer_alphabet: Vec<TokenId>,
    ) -> Result<Self> {
        if size < MIN_VOCAB_SIZE {
            return Err(Error::Vocabulary(format!(
                "size {size} is below the minimum of {MIN_VOCAB_SIZE}"
            )));
        }
        for role in Role::ALL {
            let Some(&id) = roles.get(&role) else {
                return Err(Error::Vocabulary(format!("role {role:?} has no token id")));
            };
            if id as usize >= size {
                return Err(Error::Vocabulary(format!("role {role:?} id {id} out of range")));
            }
        }
        let mut seen: Vec<TokenId> = roles.values().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != roles.len() {
            return Err(Error::Vocabulary("special-role ids are not distinct".into()));
        }
        if answer_alphabet.is_empty() {
            return Err(Error::Vocabulary("answer alphabet is empty".into()));
        }
        for &a in &answer_alphabet {
            if a as usize >= size {
                return Err(Error::Vocabulary(format!("answer id {a} out of range")));
            }
            if seen.binary_search(&a).is_ok() {
                return Err(Error::Vocabulary(format!(
                    "answer id {a} collides with a special role"
                )));
            }
        }
        Ok(Self { size, roles, answer_alphabet })
    }

    /// Roles on ids 0..7 in [`Role::ALL`] order, answers on the next four ids.
    pub fn standard(size: usize) -> Result<Self> {
        let roles = Role::ALL
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, i as TokenId))
            .collect();
        let first = Role::ALL.len() as TokenId;
        Self::new(size, roles, (first..first + 4).collect())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn id(&self, role: Role) -> TokenId {
        self.roles[&role]
    }

    pub fn role_of(&self, token: TokenId) -> Option<Role> {
        self.roles.iter().find(|(_, &id)| id == token).map(|(&r, _)| r)
    }

    pub fn answer_alphabet(&self) -> &[TokenId] {
        &self.answer_alphabet
    }

    pub fn is_aux(&self, token: TokenId) -> bool {
        token == self.id(Role::AuxOpen) || token == self.id(Role::AuxClose)
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_layout_is_valid() {
        let v = Vocabulary::standard(32).unwrap();
        assert_eq!(v.size(), 32);
        assert_eq!(v.answer_alphabet().len(), 4);
        assert!(v.is_aux(v.id(Role::AuxOpen)));
        assert!(!v.is_aux(v.id(Role::Eos)));
        assert_eq!(v.role_of(v.id(Role::HintEnd)), Some(Role::HintEnd));
    }

    #[test]
    fn rejects_small_or_colliding_vocabularies() {
        assert!(Vocabulary::standard(8).is_err());

        let mut roles: BTreeMap<Role, TokenId> =
            Role::ALL.iter().enumerate().map(|(i, &r)| (r, i as TokenId)).collect();
        roles.insert(Role::Pad, 0);
        assert!(Vocabulary::new(16, roles, vec![10]).is_err());

        let roles = Role::ALL.iter().enumerate().map(|(i, &r)| (r, i as TokenId)).collect();
        assert!(Vocabulary::new(16, roles, vec![3]).is_err());
    }
}
