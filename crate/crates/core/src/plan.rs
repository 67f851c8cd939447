//! Topic seeds used when a run names none.

use crate::dataset::{MessageCatalog, StrategyTag};
use crate::topic::{DataTopic, DataTopicKind, Descriptor, KnowledgeTopic, Relation, Topic, WisdomTopic};

pub const DEFAULT_OBJECTIVE: &str = "Raise click-through on prescription review reminders";
pub const DEFAULT_PORTFOLIO_SIZE: u32 = 20;
pub const DEFAULT_EXPLOITATION_FRACTION: f64 = 0.75;
pub const BASELINE_VARIANT: &str = "default";

/// Each strategy tag in the catalog against the baseline variant, plus
/// urgency against social proof when both occur.
pub fn default_hypotheses(catalog: &MessageCatalog) -> Vec<KnowledgeTopic> {
    let present: Vec<StrategyTag> = StrategyTag::ALL
        .into_iter()
        .filter(|t| *t != StrategyTag::Default && !catalog.variants_with_tag(*t).is_empty())
        .collect();
    let mut out = Vec::new();
    if catalog.contains(BASELINE_VARIANT) {
        for t in &present {
            let arms = catalog.variants_with_tag(*t);
            if arms.iter().all(|a| a == BASELINE_VARIANT) {
                continue;
            }
            out.push(KnowledgeTopic::new(
                Descriptor::tag(*t),
                Relation::Outperforms,
                Descriptor::variant(BASELINE_VARIANT),
            ));
        }
    }
    if present.contains(&StrategyTag::Urgency) && present.contains(&StrategyTag::SocialProof) {
        out.push(KnowledgeTopic::new(
            Descriptor::tag(StrategyTag::Urgency),
            Relation::Outperforms,
            Descriptor::tag(StrategyTag::SocialProof),
        ));
    }
    out
}

pub fn default_wisdom() -> WisdomTopic {
    WisdomTopic::new(DEFAULT_OBJECTIVE, DEFAULT_PORTFOLIO_SIZE, DEFAULT_EXPLOITATION_FRACTION)
}

/// Data checks, the default hypotheses and one portfolio topic.
pub fn default_topics(catalog: &MessageCatalog) -> Vec<Topic> {
    let mut out: Vec<Topic> = [
        DataTopicKind::SchemaVerification,
        DataTopicKind::MissingValueMap,
        DataTopicKind::ExperimentDimensioning,
        DataTopicKind::IdUniqueness,
        DataTopicKind::FormatCompliance,
        DataTopicKind::ExperimentConfig,
    ]
    .into_iter()
    .map(|k| Topic::Data(DataTopic::new(k)))
    .collect();
    out.extend(default_hypotheses(catalog).into_iter().map(Topic::Knowledge));
    out.push(Topic::Wisdom(default_wisdom()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage1_plan() {
        let h = default_hypotheses(&MessageCatalog::stage1());
        assert_eq!(h.len(), 12);
        let t = default_topics(&MessageCatalog::stage1());
        assert_eq!(t.iter().filter(|t| matches!(t, Topic::Wisdom(_))).count(), 1);
    }
}
