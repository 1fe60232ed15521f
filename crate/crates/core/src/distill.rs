//! Distilled and augmented training sets: kd, back-translation, best-2 and
//! their concatenations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decode::DecodeConfig;
use crate::error::{io_err, Error, Result};
use crate::textproc::Bitext;
use crate::train::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Base,
    Kd,
    Bt,
    Best2,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::Base => "base",
            Component::Kd => "kd",
            Component::Bt => "bt",
            Component::Best2 => "best-2",
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" | "baseline" => Ok(Component::Base),
            "kd" => Ok(Component::Kd),
            "bt" => Ok(Component::Bt),
            "best-2" | "best2" => Ok(Component::Best2),
            _ => Err(Error::Config(format!("unknown dataset component {s:?}"))),
        }
    }
}

/// Ordered list of dataset components, written `base+kd+bt`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DatasetRecipe {
    pub components: Vec<Component>,
}

impl DatasetRecipe {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("recipe without components".into()));
        }
        Ok(Self { components })
    }

    pub fn name(&self) -> String {
        self.components
            .iter()
            .map(|c| c.label())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn needs_teacher(&self) -> bool {
        self.components
            .iter()
            .any(|c| matches!(c, Component::Kd | Component::Best2))
    }

    pub fn needs_reverse_teacher(&self) -> bool {
        self.components.contains(&Component::Bt)
    }
}

impl FromStr for DatasetRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(
            s.split('+')
                .map(str::trim)
                .map(Component::from_str)
                .collect::<Result<_>>()?,
        )
    }
}

impl fmt::Display for DatasetRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl Serialize for DatasetRecipe {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for DatasetRecipe {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// A derived dataset and the number of source lines that produced no pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Derived {
    pub bitext: Bitext,
    pub failures: usize,
}

fn decode_config(beam: usize, nbest: usize) -> DecodeConfig {
    DecodeConfig {
        beam_size: beam,
        nbest,
        ..DecodeConfig::default()
    }
}

/// Original sources paired with the teacher's best beam translation.
pub fn make_kd_dataset(teacher: &Checkpoint, bitext: &Bitext, beam: usize) -> Result<Derived> {
    let out = teacher.translate(&bitext.sources(), &decode_config(beam, 1))?;
    let mut pairs = Vec::with_capacity(bitext.len());
    let mut failures = 0;
    for ((s, _), t) in bitext.pairs.iter().zip(out.best()) {
        if t.is_empty() {
            failures += 1;
        } else {
            pairs.push((s.clone(), t));
        }
    }
    Ok(Derived {
        bitext: Bitext::new("kd", pairs)?,
        failures,
    })
}

/// Reverse-teacher translations of the gold targets paired with those
/// targets.
pub fn make_bt_dataset(
    reverse_teacher: &Checkpoint,
    bitext: &Bitext,
    beam: usize,
) -> Result<Derived> {
    let out = reverse_teacher.translate(&bitext.targets(), &decode_config(beam, 1))?;
    let mut pairs = Vec::with_capacity(bitext.len());
    let mut failures = 0;
    for ((_, t), s) in bitext.pairs.iter().zip(out.best()) {
        if s.is_empty() {
            failures += 1;
        } else {
            pairs.push((s, t.clone()));
        }
    }
    Ok(Derived {
        bitext: Bitext::new("bt", pairs)?,
        failures,
    })
}

/// All `(source, best)` pairs followed by all `(source, second best)` pairs.
/// `failures` counts sources whose beam produced fewer than two distinct
/// translations.
pub fn make_best2_dataset(teacher: &Checkpoint, bitext: &Bitext, beam: usize) -> Result<Derived> {
    if beam < 2 {
        return Err(Error::Config(format!(
            "best-2 needs a beam of at least 2, got {beam}"
        )));
    }
    let out = teacher.translate(&bitext.sources(), &decode_config(beam, 2))?;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    let mut shortfall = 0;
    for ((s, _), cands) in bitext.pairs.iter().zip(&out.nbest) {
        let cands: Vec<_> = cands.iter().filter(|c| !c.is_empty()).collect();
        if let Some(best) = cands.first() {
            first.push((s.clone(), (*best).clone()));
        }
        match cands.get(1) {
            Some(c) => second.push((s.clone(), (*c).clone())),
            None => shortfall += 1,
        }
    }
    first.extend(second);
    Ok(Derived {
        bitext: Bitext::new("best-2", first)?,
        failures: shortfall,
    })
}

/// Plain concatenation; the name joins the parts with `+`.
pub fn concat_datasets(parts: &[&Bitext]) -> Result<Bitext> {
    if parts.is_empty() {
        return Err(Error::Config("nothing to concatenate".into()));
    }
    let name = parts
        .iter()
        .map(|b| b.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let pairs = parts.iter().flat_map(|b| b.pairs.iter().cloned()).collect();
    Ok(Bitext { name, pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub label: String,
    pub lines: usize,
    pub failures: usize,
    pub sha256: String,
}

/// Provenance of an assembled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub lines: usize,
    pub sha256: String,
    pub components: Vec<ComponentRecord>,
    pub teacher: Option<String>,
    pub reverse_teacher: Option<String>,
    pub beam: usize,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }
}

/// Sources for each component of a recipe.
pub struct RecipeInputs<'a> {
    pub base: &'a Bitext,
    pub teacher: Option<&'a Checkpoint>,
    pub reverse_teacher: Option<&'a Checkpoint>,
    pub beam: usize,
}

/// Builds every component of `recipe` and concatenates them.
pub fn build_recipe(
    recipe: &DatasetRecipe,
    inputs: &RecipeInputs<'_>,
) -> Result<(Bitext, Vec<Derived>)> {
    let missing = |what: &str| Error::Config(format!("recipe {recipe} needs a {what}"));
    let mut parts = Vec::with_capacity(recipe.components.len());
    for c in &recipe.components {
        let derived = match c {
            Component::Base => Derived {
                bitext: Bitext {
                    name: "base".into(),
                    ..inputs.base.clone()
                },
                failures: 0,
            },
            Component::Kd => make_kd_dataset(
                inputs.teacher.ok_or_else(|| missing("teacher"))?,
                inputs.base,
                inputs.beam,
            )?,
            Component::Bt => make_bt_dataset(
                inputs
                    .reverse_teacher
                    .ok_or_else(|| missing("reverse teacher"))?,
                inputs.base,
                inputs.beam,
            )?,
            Component::Best2 => make_best2_dataset(
                inputs.teacher.ok_or_else(|| missing("teacher"))?,
                inputs.base,
                inputs.beam.max(2),
            )?,
        };
        parts.push(derived);
    }
    let joined = concat_datasets(&parts.iter().map(|d| &d.bitext).collect::<Vec<_>>())?;
    Ok((joined, parts))
}

pub fn manifest(
    bitext: &Bitext,
    parts: &[Derived],
    teacher: Option<&Path>,
    reverse: Option<&Path>,
    beam: usize,
) -> Manifest {
    Manifest {
        name: bitext.name.clone(),
        lines: bitext.len(),
        sha256: bitext.content_hash(),
        components: parts
            .iter()
            .map(|d| ComponentRecord {
                label: d.bitext.name.clone(),
                lines: d.bitext.len(),
                failures: d.failures,
                sha256: d.bitext.content_hash(),
            })
            .collect(),
        teacher: teacher.map(|p| p.display().to_string()),
        reverse_teacher: reverse.map(|p| p.display().to_string()),
        beam,
    }
}
