//! Input builders shared by the benchmarks.

use defner_core::corpus::{EntitySpan, LabeledExample};
use defner_core::promptgen::DefinitionDoc;

const WORDS: [&str; 8] = ["the", "minister", "said", "on", "Monday", "that", "talks", "resumed"];
const NAMES: [(&str, &str); 4] = [
    ("Angela Ruiz", "PER"),
    ("Northbank Group", "ORG"),
    ("Lisbon", "LOC"),
    ("Euro Cup", "MISC"),
];

/// A sentence of roughly `len` tokens with an entity every eighth position.
pub fn sentence(id: usize, len: usize) -> LabeledExample {
    let mut tokens: Vec<String> = Vec::with_capacity(len + 2);
    let mut spans = Vec::new();
    let mut i = 0;
    while tokens.len() < len {
        if i % 8 == 3 {
            let (name, t) = NAMES[(i / 8 + id) % NAMES.len()];
            let start = tokens.len();
            tokens.extend(name.split(' ').map(str::to_string));
            spans.push(EntitySpan::new(start, tokens.len(), t));
        } else {
            tokens.push(WORDS[(i + id) % WORDS.len()].to_string());
        }
        i += 1;
    }
    LabeledExample::new(format!("b{id}"), &tokens, spans).expect("valid spans")
}

/// A model answer with `lines` numbered candidates, every third line in a
/// format the strict pattern rejects.
pub fn completion(lines: usize) -> String {
    let mut out = String::from("Here are the candidates:\n");
    for n in 1..=lines {
        let (name, t) = NAMES[n % NAMES.len()];
        if n % 3 == 0 {
            out.push_str(&format!("- {name} {n} | yes | {t}\n"));
        } else {
            out.push_str(&format!("{n}. {name} {n} | True | is a named thing ({t})\n"));
        }
    }
    out
}

pub fn definition() -> DefinitionDoc {
    DefinitionDoc::parse(
        "---\nPER: person\nORG: organization\nLOC: location\nMISC: other named entity\n---\n\
         Entities are names of people, organizations, places and other proper nouns.\n",
    )
    .expect("valid definition")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_are_consistent() {
        let ex = sentence(1, 40);
        assert!(ex.tokens.len() >= 40);
        assert!(!ex.gold.is_empty());
        let r = defner_core::parse::parse_completion(&completion(9)).unwrap();
        assert_eq!((r.candidates.len(), r.repaired_lines, r.skipped_lines), (9, 3, 1));
    }
}
