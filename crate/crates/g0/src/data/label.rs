//! Closed annotation vocabulary: skill verbs, object nouns, and rendered
//! subtask text. Annotations are picked from these fixed tables, never typed
//! free-form, so ids are stable across recording, training and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Skill verbs. `Done` is the terminal planner entry, not a demonstration
/// label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Skill {
    Pick,
    Place,
    Open,
    Close,
    Hang,
    Stack,
    MoveTo,
    LiftTorso,
    LeanBack,
    Flatten,
    Done,
}

pub const ALL_SKILLS: [Skill; 11] = [
    Skill::Pick,
    Skill::Place,
    Skill::Open,
    Skill::Close,
    Skill::Hang,
    Skill::Stack,
    Skill::MoveTo,
    Skill::LiftTorso,
    Skill::LeanBack,
    Skill::Flatten,
    Skill::Done,
];

impl Skill {
    pub fn id(self) -> u16 {
        ALL_SKILLS.iter().position(|s| *s == self).unwrap() as u16
    }

    pub fn from_id(id: u16) -> Result<Skill> {
        ALL_SKILLS
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown skill id {id}")))
    }

    /// Config/key spelling, underscores included.
    pub fn key(self) -> &'static str {
        match self {
            Skill::Pick => "pick",
            Skill::Place => "place",
            Skill::Open => "open",
            Skill::Close => "close",
            Skill::Hang => "hang",
            Skill::Stack => "stack",
            Skill::MoveTo => "move_to",
            Skill::LiftTorso => "lift_torso",
            Skill::LeanBack => "lean_back",
            Skill::Flatten => "flatten",
            Skill::Done => "done",
        }
    }

    /// Spoken form used in rendered subtask text.
    pub fn words(self) -> &'static str {
        match self {
            Skill::MoveTo => "move to",
            Skill::LiftTorso => "lift torso",
            Skill::LeanBack => "lean back",
            other => other.key(),
        }
    }

    pub fn parse(s: &str) -> Result<Skill> {
        ALL_SKILLS
            .iter()
            .copied()
            .find(|sk| sk.key() == s)
            .ok_or_else(|| Error::config(format!("unknown skill verb `{s}`")))
    }
}

/// Object nouns, including per-letter block names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Noun {
    Pen,
    Book,
    Holder,
    Stand,
    Food,
    Plate,
    Microwave,
    Quilt,
    Bed,
    Block,
    BlockA,
    BlockB,
    BlockC,
    BlockD,
    BlockE,
    BlockF,
    Tray,
    /// Placeholder noun for the terminal `done` entry.
    None,
}

pub const ALL_NOUNS: [Noun; 18] = [
    Noun::Pen,
    Noun::Book,
    Noun::Holder,
    Noun::Stand,
    Noun::Food,
    Noun::Plate,
    Noun::Microwave,
    Noun::Quilt,
    Noun::Bed,
    Noun::Block,
    Noun::BlockA,
    Noun::BlockB,
    Noun::BlockC,
    Noun::BlockD,
    Noun::BlockE,
    Noun::BlockF,
    Noun::Tray,
    Noun::None,
];

impl Noun {
    pub fn id(self) -> u16 {
        ALL_NOUNS.iter().position(|n| *n == self).unwrap() as u16
    }

    pub fn from_id(id: u16) -> Result<Noun> {
        ALL_NOUNS
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown noun id {id}")))
    }

    pub fn key(self) -> &'static str {
        match self {
            Noun::Pen => "pen",
            Noun::Book => "book",
            Noun::Holder => "holder",
            Noun::Stand => "stand",
            Noun::Food => "food",
            Noun::Plate => "plate",
            Noun::Microwave => "microwave",
            Noun::Quilt => "quilt",
            Noun::Bed => "bed",
            Noun::Block => "block",
            Noun::BlockA => "block_a",
            Noun::BlockB => "block_b",
            Noun::BlockC => "block_c",
            Noun::BlockD => "block_d",
            Noun::BlockE => "block_e",
            Noun::BlockF => "block_f",
            Noun::Tray => "tray",
            Noun::None => "none",
        }
    }

    pub fn words(self) -> String {
        self.key().replace('_', " ")
    }

    pub fn parse(s: &str) -> Result<Noun> {
        ALL_NOUNS
            .iter()
            .copied()
            .find(|n| n.key() == s)
            .ok_or_else(|| Error::config(format!("unknown object noun `{s}`")))
    }

    pub fn block_for_letter(letter: char) -> Result<Noun> {
        match letter {
            'a' => Ok(Noun::BlockA),
            'b' => Ok(Noun::BlockB),
            'c' => Ok(Noun::BlockC),
            'd' => Ok(Noun::BlockD),
            'e' => Ok(Noun::BlockE),
            'f' => Ok(Noun::BlockF),
            other => Err(Error::config(format!("no block noun for letter `{other}`"))),
        }
    }
}

/// One atomic subtask: a skill verb paired with an object noun.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubtaskLabel {
    pub skill: Skill,
    pub object: Noun,
}

impl SubtaskLabel {
    pub fn new(skill: Skill, object: Noun) -> SubtaskLabel {
        SubtaskLabel { skill, object }
    }

    pub fn done() -> SubtaskLabel {
        SubtaskLabel {
            skill: Skill::Done,
            object: Noun::None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.skill == Skill::Done
    }

    /// "skill the object" text, e.g. "pick the pen"; the terminal entry
    /// renders as "done".
    pub fn rendered_text(&self) -> String {
        if self.is_done() {
            "done".to_string()
        } else {
            format!("{} the {}", self.skill.words(), self.object.words())
        }
    }
}

/// Every word that can appear in an instruction, a rendered subtask, a task
/// paraphrase, or the terminal entry. Index = token id. `<pad>` is id 0.
pub const WORDS: [&str; 64] = [
    "<pad>", "<unk>", "the", "a", "b", "c", "d", "e", "f", "up", "tidy", "desk", "clean", "bus",
    "table", "organize", "heat", "food", "in", "microwave", "warm", "dinner", "make", "bed",
    "straighten", "covers", "neaten", "spell", "word", "with", "blocks", "build", "from",
    "letters", "arrange", "to", "put", "block", "on", "tray", "set", "move", "onto", "sort",
    "trays", "away", "pick", "place", "open", "close", "hang", "stack", "lift", "torso", "lean",
    "back", "flatten", "done", "pen", "book", "holder", "stand", "plate", "quilt",
];

pub const PAD_WORD: u32 = 0;
pub const UNK_WORD: u32 = 1;

/// Whitespace tokenization over the closed word list.
pub fn tokenize_words(text: &str) -> Vec<u32> {
    text.split_whitespace()
        .map(|w| {
            WORDS
                .iter()
                .position(|k| *k == w)
                .map(|i| i as u32)
                .unwrap_or(UNK_WORD)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skill_ids_round_trip() {
        for s in ALL_SKILLS {
            assert_eq!(Skill::from_id(s.id()).unwrap(), s);
        }
        for n in ALL_NOUNS {
            assert_eq!(Noun::from_id(n.id()).unwrap(), n);
        }
    }

    #[test]
    fn rendered_text_uses_spaces() {
        let l = SubtaskLabel::new(Skill::MoveTo, Noun::Bed);
        assert_eq!(l.rendered_text(), "move to the bed");
        let l = SubtaskLabel::new(Skill::Stack, Noun::BlockD);
        assert_eq!(l.rendered_text(), "stack the block d");
        assert_eq!(SubtaskLabel::done().rendered_text(), "done");
    }

    #[test]
    fn word_list_has_no_duplicates() {
        for (i, w) in WORDS.iter().enumerate() {
            assert_eq!(WORDS.iter().position(|k| k == w), Some(i), "dup word {w}");
        }
    }

    #[test]
    fn rendered_vocabulary_is_closed() {
        // Noun::None only pairs with the terminal done entry.
        for s in ALL_SKILLS {
            for n in ALL_NOUNS.into_iter().filter(|n| *n != Noun::None) {
                let text = SubtaskLabel::new(s, n).rendered_text();
                for tok in tokenize_words(&text) {
                    assert_ne!(tok, UNK_WORD, "word outside list in `{text}`");
                }
            }
        }
        for tok in tokenize_words(&SubtaskLabel::done().rendered_text()) {
            assert_ne!(tok, UNK_WORD);
        }
    }
}
