//! Template grammar for a navigation-domain toy corpus.
//!
//! Templates are whitespace-separated words with placeholders: `{SL:NAME}`
//! expands to a slot whose filler is drawn from `slots`, `{name}` (no prefix)
//! expands to an unlabeled filler from `words`. A slot filler written as
//! `{IN:NAME}` expands one of the nested intent's templates inside the slot.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Example};
use crate::parsetree::{parse_bracketed, serialize, NodeKind, ParseTree, INTENT_PREFIX, SLOT_PREFIX};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentGrammar {
    pub name: String,
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub size: usize,
    pub intents: Vec<IntentGrammar>,
    pub nested: Vec<IntentGrammar>,
    pub slots: BTreeMap<String, Vec<String>>,
    pub words: BTreeMap<String, Vec<String>>,
    pub prefixes: Vec<String>,
    pub suffixes: Vec<String>,
}

/// Which template produced an example; lets tests recompute partitions
/// without going through the reverse-update code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub intent: String,
    pub template: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub examples: Vec<Example>,
    pub provenance: Vec<Provenance>,
}

fn v(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn intent(name: &str, templates: &[&str]) -> IntentGrammar {
    IntentGrammar { name: name.to_string(), templates: v(templates) }
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let intents = vec![
            intent(
                "IN:GET_DIRECTIONS",
                &[
                    "directions to {SL:DESTINATION}",
                    "how do i get to {SL:DESTINATION}",
                    "how do i get to {SL:DESTINATION} from {SL:SOURCE}",
                    "best route to {SL:DESTINATION} avoiding {SL:OBSTRUCTION}",
                    "which route to {SL:DESTINATION} has less {SL:OBSTRUCTION}",
                    "take me to {SL:DESTINATION} without {SL:OBSTRUCTION}",
                    "navigate to {SL:DESTINATION} via {SL:PATH}",
                    "show me the way to {SL:DESTINATION} and skip {SL:OBSTRUCTION}",
                    "route from {SL:SOURCE} to {SL:DESTINATION}",
                ],
            ),
            intent(
                "IN:GET_ESTIMATED_DURATION",
                &[
                    "how long will it take to get to {SL:DESTINATION}",
                    "how long is the drive to {SL:DESTINATION} from {SL:SOURCE}",
                    "travel time to {SL:DESTINATION} {SL:METHOD_TRAVEL}",
                    "how long to {SL:DESTINATION} with {SL:OBSTRUCTION}",
                    "how much time to reach {SL:DESTINATION} avoiding {SL:OBSTRUCTION}",
                    "how long will the trip take",
                    "how long does it usually take",
                    "what is my {trip} time",
                ],
            ),
            intent(
                "IN:GET_ESTIMATED_ARRIVAL",
                &[
                    "if i leave {SL:DATE_TIME_DEPARTURE} when will i get to {SL:DESTINATION}",
                    "what time will i arrive at {SL:DESTINATION}",
                    "when will i reach {SL:DESTINATION} if i leave {SL:DATE_TIME_DEPARTURE}",
                    "eta to {SL:DESTINATION}",
                    "can i get to {SL:DESTINATION} {SL:DATE_TIME_ARRIVAL} if i leave {SL:DATE_TIME_DEPARTURE}",
                    "arrival time at {SL:DESTINATION} {SL:METHOD_TRAVEL}",
                ],
            ),
            intent(
                "IN:GET_ESTIMATED_DEPARTURE",
                &[
                    "when should i leave to get to {SL:DESTINATION} {SL:DATE_TIME_ARRIVAL}",
                    "what time do i need to leave to arrive {SL:DATE_TIME_ARRIVAL}",
                    "when do i have to head out for {SL:DESTINATION}",
                    "departure time to reach {SL:DESTINATION} {SL:DATE_TIME_ARRIVAL}",
                    "when to leave for {SL:DESTINATION} to be there {SL:DATE_TIME_ARRIVAL}",
                ],
            ),
            intent(
                "IN:GET_DISTANCE",
                &[
                    "how far is {SL:DESTINATION}",
                    "how many {SL:UNIT_DISTANCE} to {SL:DESTINATION}",
                    "distance from {SL:SOURCE} to {SL:DESTINATION}",
                    "how far away is {SL:DESTINATION} from {SL:SOURCE}",
                    "how many {SL:UNIT_DISTANCE} is it to {SL:DESTINATION}",
                ],
            ),
            intent(
                "IN:GET_INFO_TRAFFIC",
                &[
                    "is there traffic on {SL:LOCATION}",
                    "how bad is traffic on {SL:LOCATION} {SL:DATE_TIME}",
                    "any accidents on {SL:LOCATION}",
                    "where is there construction on {SL:LOCATION}",
                    "is {SL:LOCATION} congested {SL:DATE_TIME}",
                    "traffic report for {SL:LOCATION}",
                ],
            ),
            intent(
                "IN:GET_INFO_ROAD_CONDITION",
                &[
                    "are the roads {SL:ROAD_CONDITION}",
                    "is {SL:LOCATION} {SL:ROAD_CONDITION} {SL:DATE_TIME}",
                    "road conditions on {SL:LOCATION}",
                    "will {SL:LOCATION} be {SL:ROAD_CONDITION} {SL:DATE_TIME}",
                    "how are the roads on {SL:LOCATION}",
                    "are roads {SL:ROAD_CONDITION} near {SL:LOCATION}",
                ],
            ),
            intent(
                "IN:GET_EVENT",
                &[
                    "any {SL:CATEGORY_EVENT} {SL:DATE_TIME}",
                    "what {SL:CATEGORY_EVENT} are happening in {SL:LOCATION}",
                    "find {SL:CATEGORY_EVENT} near {SL:LOCATION} {SL:DATE_TIME}",
                    "are there any {SL:CATEGORY_EVENT} {SL:DATE_TIME}",
                    "things to do {SL:DATE_TIME}",
                ],
            ),
            intent(
                "IN:UNSUPPORTED_NAVIGATION",
                &[
                    "what {size} city has the worst traffic",
                    "who invented the traffic light",
                    "why are roads so {bad} here",
                    "what is the longest highway in the world",
                    "do self driving cars exist",
                    "how many cars are on the road",
                    "which state has the {bad} highways",
                    "is it {bad} to drive at night",
                ],
            ),
        ];
        let nested = vec![intent(
            "IN:GET_LOCATION_HOME",
            &["{SL:CONTACT} 's house", "{SL:CONTACT} 's place", "home"],
        )];
        let slots: BTreeMap<String, Vec<String>> = [
            (
                "SL:DESTINATION",
                v(&[
                    "work", "the airport", "downtown", "the mall", "boston", "new york city", "atlanta", "the beach",
                    "my office", "the stadium", "chicago", "the train station", "central park", "the library",
                    "school", "the hospital", "denver", "the zoo", "{IN:GET_LOCATION_HOME}", "{IN:GET_LOCATION_HOME}",
                ]),
            ),
            (
                "SL:SOURCE",
                v(&["here", "the hotel", "the office", "seattle", "the gym", "my school", "the station", "portland"]),
            ),
            (
                "SL:OBSTRUCTION",
                v(&[
                    "traffic", "tolls", "highways", "construction", "the bridge", "accidents", "road work", "the freeway",
                    "toll roads", "heavy traffic",
                ]),
            ),
            ("SL:METHOD_TRAVEL", v(&["by car", "on foot", "by bus", "by bike", "by train"])),
            (
                "SL:DATE_TIME_DEPARTURE",
                v(&["right now", "at 5pm", "in ten minutes", "at noon", "tomorrow morning", "at 8 am", "tonight"]),
            ),
            (
                "SL:DATE_TIME_ARRIVAL",
                v(&["by 6pm", "by noon", "at 9 am", "before dinner", "by 3pm", "on time", "by midnight"]),
            ),
            ("SL:UNIT_DISTANCE", v(&["miles", "kilometers", "feet", "blocks"])),
            (
                "SL:LOCATION",
                v(&[
                    "the highway", "i-95", "route 66", "the bay bridge", "main street", "the interstate", "my area",
                    "the tunnel", "highway 101", "elm street",
                ]),
            ),
            (
                "SL:DATE_TIME",
                v(&["today", "tonight", "this weekend", "tomorrow", "this morning", "on friday", "later"]),
            ),
            ("SL:ROAD_CONDITION", v(&["icy", "slippery", "flooded", "snowy", "closed", "wet", "foggy"])),
            (
                "SL:CATEGORY_EVENT",
                v(&["concerts", "festivals", "games", "parades", "fireworks", "markets", "shows"]),
            ),
            ("SL:CONTACT", v(&["my mom", "my brother", "mark", "my sister", "sarah", "my dad", "my boss"])),
            ("SL:PATH", v(&["back roads", "the coast", "route 9", "the parkway", "the scenic route"])),
        ]
        .into_iter()
        .map(|(k, vs)| (k.to_string(), vs))
        .collect();
        let words: BTreeMap<String, Vec<String>> = [
            ("size", v(&["major", "big", "small", "large"])),
            ("bad", v(&["bad", "terrible", "worst", "awful", "dangerous"])),
            ("trip", v(&["travel", "trip", "commute", "drive"])),
        ]
        .into_iter()
        .map(|(k, vs)| (k.to_string(), vs))
        .collect();
        GrammarConfig {
            size: 6000,
            intents,
            nested,
            slots,
            words,
            prefixes: v(&["", "", "", "hey", "please", "can you tell me", "i want to know", "quick question"]),
            suffixes: v(&["", "", "?", "please", "thanks"]),
        }
    }
}

impl GrammarConfig {
    pub fn intent_names(&self) -> BTreeSet<&str> {
        self.intents.iter().chain(&self.nested).map(|i| i.name.as_str()).collect()
    }

    pub fn slot_labels(&self) -> BTreeSet<&str> {
        self.slots.keys().map(String::as_str).collect()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let degenerate = |m: String| Err(DatasetError::DegenerateGrammar(m));
        if self.intents.is_empty() {
            return degenerate("no intents defined".into());
        }
        let nested: BTreeSet<&str> = self.nested.iter().map(|i| i.name.as_str()).collect();
        for g in self.intents.iter().chain(&self.nested) {
            if NodeKind::of_label(&g.name) != Some(NodeKind::Intent) {
                return degenerate(format!("{} is not an intent label", g.name));
            }
            if g.templates.is_empty() {
                return degenerate(format!("intent {} has no template", g.name));
            }
            for t in &g.templates {
                if t.split_whitespace().next().is_none() {
                    return degenerate(format!("intent {} has an empty template", g.name));
                }
                for ph in placeholders(t) {
                    if ph.starts_with(SLOT_PREFIX) {
                        if !self.slots.contains_key(ph) {
                            return degenerate(format!("template {t:?} of {} uses undefined slot {ph}", g.name));
                        }
                    } else if !self.words.contains_key(ph) {
                        return degenerate(format!("template {t:?} of {} uses undefined word class {ph}", g.name));
                    }
                }
            }
        }
        for (slot, fillers) in &self.slots {
            if fillers.is_empty() {
                return degenerate(format!("slot {slot} has no fillers"));
            }
            for f in fillers {
                if let Some(inner) = nested_ref(f) {
                    if !nested.contains(inner) {
                        return degenerate(format!("slot {slot} refers to undefined nested intent {inner}"));
                    }
                } else if f.split_whitespace().next().is_none() {
                    return degenerate(format!("slot {slot} has an empty filler"));
                }
            }
        }
        if let Some((w, _)) = self.words.iter().find(|(_, f)| f.is_empty()) {
            return degenerate(format!("word class {w} has no fillers"));
        }
        Ok(())
    }
}

fn placeholders(template: &str) -> impl Iterator<Item = &str> {
    template.split_whitespace().filter_map(|w| w.strip_prefix('{').and_then(|w| w.strip_suffix('}')))
}

fn nested_ref(filler: &str) -> Option<&str> {
    filler.trim().strip_prefix('{').and_then(|f| f.strip_suffix('}')).filter(|f| f.starts_with(INTENT_PREFIX))
}

struct Expander<'a> {
    cfg: &'a GrammarConfig,
    rng: ChaCha8Rng,
}

impl Expander<'_> {
    fn pick<'b>(&mut self, items: &'b [String]) -> &'b str {
        items.choose(&mut self.rng).map(String::as_str).unwrap_or("")
    }

    /// Expands `template` into `tokens`, returning the intent node for it.
    fn expand_intent(&mut self, name: &str, template: &str, tokens: &mut Vec<String>, depth: usize) -> ParseTree {
        let mut slots = Vec::new();
        for word in template.split_whitespace() {
            match word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                Some(slot) if slot.starts_with(SLOT_PREFIX) => {
                    let filler = self.pick(&self.cfg.slots[slot]).to_string();
                    match nested_ref(&filler) {
                        Some(inner) if depth < 2 => {
                            let g = self.cfg.nested.iter().find(|g| g.name == inner).expect("validated");
                            let t = self.pick(&g.templates).to_string();
                            let sub = self.expand_intent(inner, &t, tokens, depth + 1);
                            slots.push(ParseTree::nested_slot(slot, sub));
                        }
                        _ => {
                            let start = tokens.len();
                            tokens.extend(filler.split_whitespace().map(String::from));
                            slots.push(ParseTree::slot(slot, (start..tokens.len()).collect()));
                        }
                    }
                }
                Some(class) => {
                    let filler = self.pick(&self.cfg.words[class]).to_string();
                    tokens.extend(filler.split_whitespace().map(String::from));
                }
                None => tokens.push(word.to_string()),
            }
        }
        ParseTree::intent(name, slots)
    }
}

/// Generates `cfg.size` examples with V2 labels. Intents are drawn uniformly,
/// then a template and fillers; draws whose spans would not survive a text
/// round trip are redrawn.
pub fn generate_toy_corpus(cfg: &GrammarConfig, seed: u64) -> Result<ToyCorpus, DatasetError> {
    cfg.validate()?;
    let mut ex = Expander { cfg, rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut examples = Vec::with_capacity(cfg.size);
    let mut provenance = Vec::with_capacity(cfg.size);
    for i in 0..cfg.size {
        let gi = ex.rng.gen_range(0..cfg.intents.len());
        let g = &cfg.intents[gi];
        let mut attempts = 0;
        let (tokens, tree, ti) = loop {
            attempts += 1;
            let ti = ex.rng.gen_range(0..g.templates.len());
            let mut tokens: Vec<String> = Vec::new();
            let prefix = ex.pick(&cfg.prefixes).to_string();
            tokens.extend(prefix.split_whitespace().map(String::from));
            let tree = ex.expand_intent(&g.name, &g.templates[ti], &mut tokens, 0);
            let suffix = ex.pick(&cfg.suffixes).to_string();
            tokens.extend(suffix.split_whitespace().map(String::from));
            let text = serialize(&tree, &tokens);
            if parse_bracketed(&text, &tokens).ok().as_ref() == Some(&tree) {
                break (tokens, tree, ti);
            }
            if attempts > 100 {
                return Err(DatasetError::DegenerateGrammar(format!(
                    "intent {} cannot produce a round-trippable example",
                    g.name
                )));
            }
        };
        let id = format!("toy{i:05}");
        provenance.push(Provenance { id: id.clone(), intent: g.name.clone(), template: ti });
        examples.push(Example::with_v2(id, tokens, tree));
    }
    Ok(ToyCorpus { examples, provenance })
}
