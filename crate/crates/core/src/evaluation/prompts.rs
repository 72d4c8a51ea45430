//! Evaluation prompt suite and placeholder rendering.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::PairSpec;
use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "<placeholder>";

/// The bundled 20-prompt suite, one template per line.
pub const BUNDLED_SUITE: &str = include_str!("../../data/prompts.txt");

/// SHA-256 of the bundled templates joined by `\n`.
pub const BUNDLED_CHECKSUM: &str = "f7adabb996adcfdbe128e97769c450a43d8c976f5e92d3774312fa02b1083d56";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Recontextualization,
    Restylization,
    Interaction,
    PropertyModification,
}

impl Aspect {
    pub const ALL: [Aspect; 4] = [
        Aspect::Recontextualization,
        Aspect::Restylization,
        Aspect::Interaction,
        Aspect::PropertyModification,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// `<p1> with <p2>`, used for generation.
    Pseudo,
    /// `c1 with c2`, used as the text-alignment reference.
    Label,
}

impl fmt::Display for RenderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RenderMode::Pseudo => "pseudo",
            RenderMode::Label => "label",
        })
    }
}

fn check_template(template: &str) -> Result<()> {
    match template.matches(PLACEHOLDER).count() {
        1 => Ok(()),
        0 => Err(Error::Evaluation(format!("template `{template}` has no {PLACEHOLDER}"))),
        n => Err(Error::Evaluation(format!("template `{template}` has {n} placeholders"))),
    }
}

/// Substitutes `"{first} with {second}"` for the placeholder.
pub fn render_with(template: &str, first: &str, second: &str) -> Result<String> {
    check_template(template)?;
    Ok(template.replace(PLACEHOLDER, &format!("{first} with {second}")))
}

pub fn render_prompt(template: &str, pair: &PairSpec, mode: RenderMode) -> Result<String> {
    let (a, b) = (pair.concept(), pair.component());
    match mode {
        RenderMode::Pseudo => render_with(template, &a.pseudo_word, &b.pseudo_word),
        RenderMode::Label => render_with(template, &a.category_label, &b.category_label),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSuite {
    pub templates: Vec<String>,
}

impl PromptSuite {
    /// Parses one template per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let templates: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect();
        if templates.is_empty() {
            return Err(Error::Evaluation("prompt suite is empty".into()));
        }
        for t in &templates {
            check_template(t)?;
        }
        Ok(PromptSuite { templates })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_SUITE).expect("bundled suite is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::config("eval.prompts", format!("{}: {e}", path.display())))
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn checksum(&self) -> String {
        Sha256::digest(self.templates.join("\n").as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Aspect of template `i` when the suite is the bundled one (5 per aspect, in order).
    pub fn aspect(&self, i: usize) -> Option<Aspect> {
        (self.checksum() == BUNDLED_CHECKSUM && i < 20).then(|| Aspect::ALL[i / 5])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXPECTED: [&str; 20] = [
        "<placeholder>, on the beach",
        "<placeholder>, in the jungle",
        "<placeholder>, in the snow",
        "<placeholder>, at night",
        "<placeholder>, in autumn",
        "<placeholder>, watercolor painting",
        "<placeholder>, Ukiyo-e painting",
        "<placeholder>, in Pixel Art style",
        "<placeholder>, in Von Gogh style",
        "<placeholder>, in a comic book",
        "<placeholder>, with clouds in the background",
        "<placeholder>, with flowers in the background",
        "<placeholder>, near the Eiffel Tower",
        "<placeholder>, on top of water",
        "<placeholder>, in front of the Mount Fuji",
        "<placeholder>, from 3D rendering",
        "<placeholder>, in a far view",
        "<placeholder>, in a close view",
        "<placeholder>, made of clay",
        "<placeholder>, made of plastic",
    ];

    #[test]
    fn bundled_suite_matches_reference_strings() {
        let suite = PromptSuite::bundled();
        assert_eq!(suite.templates, EXPECTED);
        let digest: String = Sha256::digest(EXPECTED.join("\n").as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(suite.checksum(), digest);
        assert_eq!(BUNDLED_CHECKSUM, digest);
        assert_eq!(suite.aspect(0), Some(Aspect::Recontextualization));
        assert_eq!(suite.aspect(19), Some(Aspect::PropertyModification));
    }

    #[test]
    fn render_substitutes_pseudo_words_or_labels() {
        assert_eq!(
            render_with("<placeholder>, on the beach", "<tower>", "<roof>").unwrap(),
            "<tower> with <roof>, on the beach"
        );
        assert_eq!(
            render_with("<placeholder>, on the beach", "tower", "roof").unwrap(),
            "tower with roof, on the beach"
        );
        assert!(render_with("on the beach", "a", "b").is_err());
        assert!(render_with("<placeholder> <placeholder>", "a", "b").is_err());
        let pair = crate::dataset::synthetic_pair(8, 1, 0);
        assert_eq!(render_prompt("<placeholder>, at night", &pair, RenderMode::Label).unwrap(), "toy with hat, at night");
    }

    #[test]
    fn custom_suites_parse_and_validate() {
        let s = PromptSuite::parse("<placeholder>, a\n\n<placeholder>, b\r\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.aspect(0), None);
        assert!(PromptSuite::parse("\n").is_err());
        assert!(PromptSuite::parse("no slot").is_err());
    }
}
