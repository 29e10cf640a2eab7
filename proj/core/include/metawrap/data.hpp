#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "metawrap/rng.hpp"
#include "metawrap/tensor.hpp"

namespace metawrap {

// Interaction logs, vocabularies, train/valid/test splitting, task batching
// and the synthetic interest-recovery dataset.

enum class Behavior { kClick, kOther };

// One interaction row after id densification.
struct InteractionRecord {
  int64_t user = 0;
  int64_t item = 0;
  int64_t category = 0;
  int64_t timestamp = 0;
  Behavior behavior = Behavior::kClick;
};

// Bidirectional id maps. Dense indices are assigned in first-seen order.
struct Vocab {
  std::unordered_map<int64_t, int64_t> user_to_idx, item_to_idx, cat_to_idx;
  std::vector<int64_t> users, items, cats;  // dense -> original
  std::vector<int64_t> item_category;       // dense item -> dense category (first seen)

  int64_t n_users() const { return static_cast<int64_t>(users.size()); }
  int64_t n_items() const { return static_cast<int64_t>(items.size()); }
  int64_t n_cats() const { return static_cast<int64_t>(cats.size()); }

  int64_t add_user(int64_t orig);
  int64_t add_item(int64_t orig, int64_t dense_cat);
  int64_t add_cat(int64_t orig);

  void save(const std::string& path) const;  // JSON sidecar
  static Vocab load(const std::string& path);
};

struct Interactions {
  std::vector<InteractionRecord> records;  // dense ids
  Vocab vocab;
  int64_t duplicates_dropped = 0;
};

// Tab-separated rows: user_id, item_id, category_id, timestamp, behavior.
// An optional header line is skipped; malformed rows raise ParseError with
// their line number; exact (user,item,timestamp) duplicates are dropped and
// counted.
Interactions load_interactions(const std::string& tsv_path);

// Serialize rows (dense ids mapped back through vocab) in the same format.
void write_interactions_tsv(const std::string& path, const std::vector<InteractionRecord>& rows,
                            const Vocab& vocab);

// One scoring example: a user's click history and a target item.
struct Instance {
  int64_t user = 0;
  std::vector<int64_t> history_items;  // dense ids, chronological
  std::vector<int64_t> history_cats;   // aligned with history_items
  int64_t target_item = 0;
  int64_t target_cat = 0;
  double label = 0.0;
};

struct SplitDataset {
  std::vector<Instance> train, valid, test;
  int64_t n_items = 0;
  int64_t n_cats = 0;
  int64_t users_dropped = 0;      // fewer than 3 clicks
  int64_t instances_dropped = 0;  // empty history after construction
};

// Leave-one-out split per user over click rows ordered by (timestamp, item):
// the last click is the test positive, the second-to-last the validation
// positive, every earlier click with a non-empty preceding history a training
// positive. Each positive is paired with one uniformly sampled negative item
// the user never clicked (same history). Histories keep at most the most
// recent `max_seq_len` clicks.
SplitDataset build_split(const Interactions& data, int64_t max_seq_len, uint64_t seed);

// A simultaneous draw of two disjoint mini-batches.
struct TaskBatch {
  std::vector<const Instance*> d_in;
  std::vector<const Instance*> d_out;
};

// Re-randomized each call: shuffles the training set, assigns the first
// round(in_ratio * n) instances to the inner partition and the rest to the
// outer partition, then walks both partitions without replacement. Inner
// batches have `batch_size` instances (the final one may be short); outer
// batches split the outer partition evenly across the same number of steps.
std::vector<TaskBatch> make_tasks(const std::vector<Instance>& train, double in_ratio,
                                  int64_t batch_size, Rng& rng);

// Controlled interest-recovery study. Items fall into `n_groups` interest
// groups by item id modulo n_groups; user u is interested exactly in group
// (u mod n_groups). Each user draws pos_per_user distinct interested items
// (clicked with probability keep_prob) and neg_per_user distinct
// non-interested items (clicked with probability flip_prob). Observed clicks
// form the user's history; every drawn item becomes a labeled instance.
struct SyntheticConfig {
  int64_t n_users = 100;
  int64_t n_items = 10000;
  int64_t n_groups = 10;
  int64_t pos_per_user = 50;
  int64_t neg_per_user = 50;
  double keep_prob = 0.5;
  double flip_prob = 0.2;
  double test_fraction = 0.1;
  int64_t max_seq_len = 100;
  uint64_t seed = 1;
};

struct SyntheticData {
  SplitDataset split;  // train/test populated; valid empty
  // Raw rows for serialization: behavior kClick marks observed clicks
  // (label 1), kOther marks label-0 instances.
  std::vector<InteractionRecord> rows;
  Vocab vocab;
  int64_t interested_observed = 0;   // label-1 count among interested draws
  int64_t flipped_negatives = 0;     // label-1 count among non-interested draws
  int64_t empty_history_dropped = 0;
};

SyntheticData generate_synthetic(const SyntheticConfig& cfg);

// Rebuild instances from rows written by generate_synthetic (each row is one
// instance; history = the user's click rows minus the target) and re-split.
SplitDataset split_synthetic_rows(const std::vector<InteractionRecord>& rows, const Vocab& vocab,
                                  int64_t max_seq_len, double test_fraction, uint64_t seed);

}  // namespace metawrap
