use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conllu::{write_conllu, DependencyTree};
use super::Tag;
use crate::error::{Error, Result};
use crate::scene::ObjectRecord;

/// Surface forms paired with hand-built dependency parses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// "the red chair"
    ColorCategory,
    /// "the red chair near the table"
    Near,
    /// "it is a red chair . it is near the table"
    TwoSentenceNear,
    /// "this is a chair . its color is red"
    TwoSentenceColor,
    /// "a chair which is red"
    Relative,
    /// "the chair" (only when the category occurs once)
    CategoryOnly,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::ColorCategory,
        Template::Near,
        Template::TwoSentenceNear,
        Template::TwoSentenceColor,
        Template::Relative,
        Template::CategoryOnly,
    ];

    fn needs_neighbor(self) -> bool {
        matches!(self, Template::Near | Template::TwoSentenceNear)
    }

    fn sentences(self, color: &str, category: &str, other: &str) -> Vec<DependencyTree> {
        let s = |rows: &[(&str, usize, &str)]| DependencyTree {
            forms: rows.iter().map(|r| r.0.to_string()).collect(),
            heads: rows.iter().map(|r| r.1).collect(),
            deprels: rows.iter().map(|r| r.2.to_string()).collect(),
        };
        match self {
            Template::ColorCategory => {
                vec![s(&[("the", 3, "det"), (color, 3, "amod"), (category, 0, "root")])]
            }
            Template::Near => vec![s(&[
                ("the", 3, "det"),
                (color, 3, "amod"),
                (category, 0, "root"),
                ("near", 6, "case"),
                ("the", 6, "det"),
                (other, 3, "nmod"),
            ])],
            Template::TwoSentenceNear => vec![
                s(&[
                    ("it", 5, "nsubj"),
                    ("is", 5, "cop"),
                    ("a", 5, "det"),
                    (color, 5, "amod"),
                    (category, 0, "root"),
                    (".", 5, "punct"),
                ]),
                s(&[
                    ("it", 5, "nsubj"),
                    ("is", 5, "cop"),
                    ("near", 5, "case"),
                    ("the", 5, "det"),
                    (other, 0, "root"),
                ]),
            ],
            Template::TwoSentenceColor => vec![
                s(&[
                    ("this", 4, "nsubj"),
                    ("is", 4, "cop"),
                    ("a", 4, "det"),
                    (category, 0, "root"),
                    (".", 4, "punct"),
                ]),
                s(&[
                    ("its", 2, "nmod:poss"),
                    ("color", 4, "nsubj"),
                    ("is", 4, "cop"),
                    (color, 0, "root"),
                ]),
            ],
            Template::Relative => vec![s(&[
                ("a", 2, "det"),
                (category, 0, "root"),
                ("which", 5, "nsubj"),
                ("is", 5, "cop"),
                (color, 2, "acl:relcl"),
            ])],
            Template::CategoryOnly => vec![s(&[("the", 2, "det"), (category, 0, "root")])],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedExpression {
    pub text: String,
    pub conllu: String,
    pub target_instance: usize,
    pub tag: Tag,
    pub mentioned_categories: Vec<String>,
}

/// Picks a target object and a template that singles it out.
///
/// Only objects whose (category, color) pair is unique in the scene are
/// eligible, since every template names at least one of the two.
pub fn generate_expression(
    objects: &[ObjectRecord],
    templates: &[Template],
    rng: &mut impl Rng,
) -> Result<GeneratedExpression> {
    let count = |cat: &str| objects.iter().filter(|o| o.category == cat).count();
    let candidates: Vec<&ObjectRecord> = objects
        .iter()
        .filter(|o| {
            objects
                .iter()
                .filter(|p| p.category == o.category && p.color == o.color)
                .count()
                == 1
        })
        .collect();
    let target = *candidates
        .choose(rng)
        .ok_or_else(|| Error::Generation("no uniquely describable object".into()))?;
    let unique = count(&target.category) == 1;
    let neighbor = target
        .relations
        .iter()
        .find(|r| r.relation == "near")
        .and_then(|r| objects.iter().find(|o| o.instance == r.target));
    let usable: Vec<Template> = templates
        .iter()
        .copied()
        .filter(|t| (!t.needs_neighbor() || neighbor.is_some()) && (*t != Template::CategoryOnly || unique))
        .collect();
    let template = *usable
        .choose(rng)
        .ok_or_else(|| Error::Generation("no template applies to the chosen object".into()))?;
    let other = neighbor.map_or("", |o| o.category.as_str());
    let trees = template.sentences(&target.color, &target.category, other);
    let text = trees.iter().map(|t| t.forms.join(" ")).collect::<Vec<_>>().join(" ");
    let mut mentioned = vec![target.category.clone()];
    if template.needs_neighbor() && other != target.category {
        mentioned.push(other.to_string());
    }
    Ok(GeneratedExpression {
        text,
        conllu: write_conllu(&trees),
        target_instance: target.instance,
        tag: if unique { Tag::Unique } else { Tag::Multiple },
        mentioned_categories: mentioned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::parse_conllu;
    use crate::scene::Relation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obj(instance: usize, category: &str, color: &str, near: Option<usize>) -> ObjectRecord {
        ObjectRecord {
            instance,
            category: category.into(),
            color: color.into(),
            relations: near
                .map(|target| Relation { relation: "near".into(), target })
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn single_red_chair() {
        let objects = [obj(1, "chair", "red", None)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = generate_expression(&objects, &[Template::ColorCategory], &mut rng).unwrap();
        assert_eq!(g.text, "the red chair");
        assert_eq!(g.target_instance, 1);
        assert_eq!(g.tag, Tag::Unique);
    }

    #[test]
    fn two_chairs_are_multiple() {
        let objects = [obj(1, "chair", "red", Some(2)), obj(2, "chair", "blue", Some(1))];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = generate_expression(&objects, &[Template::Near], &mut rng).unwrap();
        assert_eq!(g.tag, Tag::Multiple);
        assert!(g.text.ends_with("near the chair"));
        assert_eq!(g.mentioned_categories, vec!["chair"]);
        // CategoryOnly would be ambiguous here.
        assert!(generate_expression(&objects, &[Template::CategoryOnly], &mut rng).is_err());
    }

    #[test]
    fn every_template_parses() {
        let objects = [obj(1, "lamp", "white", Some(2)), obj(2, "sofa", "green", Some(1))];
        for t in Template::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let g = generate_expression(&objects, &[t], &mut rng).unwrap();
            let trees = parse_conllu(&g.conllu).unwrap();
            let words: Vec<String> = trees.iter().flat_map(|t| t.forms.clone()).collect();
            assert_eq!(words.join(" "), g.text);
        }
    }

    #[test]
    fn duplicates_are_not_targets() {
        let objects = [obj(1, "bin", "red", None), obj(2, "bin", "red", None)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_expression(&objects, &Template::ALL, &mut rng).is_err());
        assert!(generate_expression(&[], &Template::ALL, &mut rng).is_err());
    }
}
