//! Wires the stages together: bundles labeled conversations with their
//! annotations and user profiles, then drives cross-validation, early
//! prediction, final-model training, and the subreddit distribution check.
//!
//! Fold-local fitting runs through closures handed to the evaluators, so
//! nothing fitted on a training fold can see held-out conversations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::annotate::ConversationAnnotations;
use crate::corpus::{Label, LabeledConversation};
use crate::explain::{early_curve, ks_two_sample, EarlyCurve, KsResult};
use crate::featurize::{
    ConversationData, FeatureConfig, FeaturePipeline, FeatureVector, Resources,
};
use crate::model::{cross_validate, train, CvReport, TrainedModel};
use crate::userfactors::UserProfile;
use crate::Error;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("conversation {0:?} has no annotations")]
    MissingAnnotation(String),
    #[error("conversation {id:?} has {acts} act tags for {expected} texts")]
    ActsMismatch {
        id: String,
        acts: usize,
        expected: usize,
    },
    #[error("conversation {id:?} has {scores} comment toxicity scores for {comments} comments")]
    ToxicityMismatch {
        id: String,
        scores: usize,
        comments: usize,
    },
    #[error("no conversations to evaluate")]
    Empty,
}

/// Everything the evaluators need, index-aligned: `labels[i]` belongs to
/// `data[i]`. Conversations are ordered by id so a given input set always
/// produces the same index space.
#[derive(Debug)]
pub struct PipelineInputs {
    pub data: Vec<ConversationData>,
    pub labels: Vec<Label>,
    pub profiles: BTreeMap<String, UserProfile>,
    pub stopwords: BTreeSet<String>,
    pub resources: Resources,
}

impl PipelineInputs {
    /// Joins labeled conversations with their annotations. Every
    /// conversation must have an annotation record whose act and toxicity
    /// lengths match its comment count; embeddings are optional per
    /// conversation and only checked when the group is enabled.
    pub fn new(
        labeled: Vec<LabeledConversation>,
        annotations: &BTreeMap<String, ConversationAnnotations>,
        profiles: BTreeMap<String, UserProfile>,
        embeddings: &BTreeMap<String, Vec<f64>>,
        stopwords: BTreeSet<String>,
        resources: Resources,
    ) -> Result<Self, PipelineError> {
        if labeled.is_empty() {
            return Err(PipelineError::Empty);
        }
        let mut sorted = labeled;
        sorted.sort_by(|a, b| a.conversation.id.cmp(&b.conversation.id));

        let mut data = Vec::with_capacity(sorted.len());
        let mut labels = Vec::with_capacity(sorted.len());
        for item in sorted {
            let id = item.conversation.id.clone();
            let record = annotations
                .get(&id)
                .ok_or_else(|| PipelineError::MissingAnnotation(id.clone()))?;
            let expected = 1 + item.conversation.comments.len();
            if record.acts.len() != expected {
                return Err(PipelineError::ActsMismatch {
                    id,
                    acts: record.acts.len(),
                    expected,
                });
            }
            if record.toxicity.comments.len() != item.conversation.comments.len() {
                return Err(PipelineError::ToxicityMismatch {
                    id,
                    scores: record.toxicity.comments.len(),
                    comments: item.conversation.comments.len(),
                });
            }
            labels.push(item.label);
            data.push(ConversationData {
                embedding: embeddings.get(&id).cloned(),
                conversation: item.conversation,
                acts: record.acts.clone(),
                toxicity: record.toxicity.clone(),
                label: item.label,
            });
        }
        Ok(PipelineInputs {
            data,
            labels,
            profiles,
            stopwords,
            resources,
        })
    }

    /// Regularization strength when the config does not pin one: 1/n.
    pub fn default_lambda(&self) -> f64 {
        1.0 / self.data.len() as f64
    }

    fn fit_fold(
        &self,
        config: &FeatureConfig,
        train_idx: &[usize],
    ) -> Result<FeaturePipeline, Error> {
        let refs: Vec<&ConversationData> = train_idx.iter().map(|i| &self.data[*i]).collect();
        Ok(FeaturePipeline::fit(
            config.clone(),
            &refs,
            &self.profiles,
            &self.stopwords,
        )?)
    }

    fn assemble_one(
        &self,
        state: &FeaturePipeline,
        index: usize,
        fraction: f64,
    ) -> Result<FeatureVector, Error> {
        Ok(state.assemble_at(&self.data[index], fraction, &self.profiles, &self.resources)?)
    }
}

/// Stratified k-fold evaluation of one feature configuration. All
/// dictionaries refit per fold on training data only.
pub fn evaluate(
    inputs: &PipelineInputs,
    config: &FeatureConfig,
    k: usize,
    lambda: Option<f64>,
    seed: u64,
) -> Result<CvReport, Error> {
    config.validate().map_err(Error::from)?;
    let lambda = lambda.unwrap_or_else(|| inputs.default_lambda());
    let mut report = cross_validate(
        &inputs.labels,
        k,
        lambda,
        seed,
        |train_idx: &[usize]| inputs.fit_fold(config, train_idx),
        |state: &FeaturePipeline, i: usize| inputs.assemble_one(state, i, 1.0),
    )?;
    report.groups = config.enabled_groups.iter().cloned().collect();
    Ok(report)
}

/// Early-prediction curve under the same folds and models as [`evaluate`]:
/// each fold's model trains on full conversations, then scores test
/// conversations truncated to each fraction. The fraction-1.0 point equals
/// the [`evaluate`] means bit-exactly for the same seed.
pub fn evaluate_early(
    inputs: &PipelineInputs,
    config: &FeatureConfig,
    k: usize,
    lambda: Option<f64>,
    seed: u64,
    fractions: &[f64],
) -> Result<EarlyCurve, Error> {
    config.validate().map_err(Error::from)?;
    let lambda = lambda.unwrap_or_else(|| inputs.default_lambda());
    early_curve(
        &inputs.labels,
        k,
        lambda,
        seed,
        fractions,
        |train_idx: &[usize]| inputs.fit_fold(config, train_idx),
        |state: &FeaturePipeline, i: usize, f: f64| inputs.assemble_one(state, i, f),
    )
}

/// Fits dictionaries on the whole corpus and assembles every conversation
/// at the given comment fraction. The featurize export stage; no training.
pub fn assemble_all(
    inputs: &PipelineInputs,
    config: &FeatureConfig,
    fraction: f64,
) -> Result<(FeaturePipeline, Vec<FeatureVector>), Error> {
    config.validate().map_err(Error::from)?;
    let all: Vec<usize> = (0..inputs.data.len()).collect();
    let state = inputs.fit_fold(config, &all)?;
    let vectors: Vec<FeatureVector> = all
        .iter()
        .map(|i| inputs.assemble_one(&state, *i, fraction))
        .collect::<Result<_, Error>>()?;
    Ok((state, vectors))
}

/// Fits dictionaries and trains one model on the whole corpus. This is the
/// model that odds-ratio reports explain.
pub fn train_full(
    inputs: &PipelineInputs,
    config: &FeatureConfig,
    lambda: Option<f64>,
    seed: u64,
) -> Result<(FeaturePipeline, TrainedModel), Error> {
    config.validate().map_err(Error::from)?;
    let lambda = lambda.unwrap_or_else(|| inputs.default_lambda());
    let all: Vec<usize> = (0..inputs.data.len()).collect();
    let state = inputs.fit_fold(config, &all)?;
    let vectors: Vec<FeatureVector> = all
        .iter()
        .map(|i| inputs.assemble_one(&state, *i, 1.0))
        .collect::<Result<_, Error>>()?;
    let model = train(&vectors, &inputs.labels, lambda, seed)?;
    Ok((state, model))
}

/// Subreddit distribution check between the label classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubredditKsReport {
    pub result: KsResult,
    /// Union of subreddits across both classes, sorted.
    pub subreddits: Vec<String>,
    /// Conversation counts per subreddit among contentious conversations,
    /// aligned with `subreddits`.
    pub contentious_counts: Vec<f64>,
    pub non_contentious_counts: Vec<f64>,
    /// How the two samples were built, spelled out for report readers.
    pub construction: String,
}

/// Compares where contentious and non-contentious conversations live: the
/// two samples are per-subreddit conversation counts within each label
/// class, over the union of subreddits (zeros included for subreddits one
/// class never touches).
pub fn subreddit_ks(labeled: &[LabeledConversation]) -> Result<SubredditKsReport, Error> {
    let mut subreddits: BTreeSet<&str> = BTreeSet::new();
    for item in labeled {
        subreddits.insert(&item.conversation.subreddit);
    }
    let count_for = |label: Label| -> Vec<f64> {
        subreddits
            .iter()
            .map(|s| {
                labeled
                    .iter()
                    .filter(|item| item.label == label && item.conversation.subreddit == **s)
                    .count() as f64
            })
            .collect()
    };
    let contentious_counts = count_for(Label::Contentious);
    let non_contentious_counts = count_for(Label::NonContentious);
    let result = ks_two_sample(&contentious_counts, &non_contentious_counts)?;
    Ok(SubredditKsReport {
        result,
        subreddits: subreddits.into_iter().map(str::to_string).collect(),
        contentious_counts,
        non_contentious_counts,
        construction: "samples are per-subreddit conversation counts within each label class, \
                       over the union of subreddits observed in either class"
            .to_string(),
    })
}
