/*!
Multi-task learning for event-sequence classification with very few samples
per task, built around a shared parameter initialization that is fast-adapted
to dynamically measured similar tasks.

The training loop alternates three phases each epoch:

1. **Similarity measurement.** Every task owns an adapted parameter vector;
   the adaptation delta (task parameters minus the shared initialization) is
   a direction in parameter space. Tasks whose deltas point the same way
   (cosine above a threshold) are grouped into neighborhoods. Static-feature,
   k-nearest-neighbor and identity (no grouping) strategies are available as
   ablations.
2. **Meta update.** For each task, training samples pooled from its
   neighborhood simulate a small learning problem: one gradient step from the
   shared initialization, then a first-order meta-gradient evaluated on a
   held-out draw from the same pool. Meta-gradients aggregated over a batch
   of tasks update the shared initialization.
3. **Per-task adaptation.** Each task re-adapts from the updated
   initialization on its own training split, producing the parameter vectors
   scored against validation data and measured for similarity next epoch.

The backbone model embeds heterogeneous timestamped events (type,
categorical attributes, numeric attributes), runs an LSTM over the sequence
and emits a probability through a sigmoid on the last hidden state. Loss is
summed cross-entropy; gradients are exact backpropagation through time.

Evaluation uses rank-exact ROC AUC and average precision with explicit tie
handling, reported both pooled over all tasks (micro) and averaged over
per-task values where defined (macro).
*/

pub mod data;
pub mod metatrain;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod similarity;
