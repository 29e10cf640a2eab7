#include "metawrap/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace metawrap {

namespace {

using json = nlohmann::ordered_json;

int64_t parse_int(std::string_view field, size_t line_no, const char* what) {
  int64_t v = 0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw ParseError("line " + std::to_string(line_no) + ": expected integer " + what + ", got '" +
                     std::string(field) + "'");
  return v;
}

bool looks_like_int(std::string_view field) {
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  return ec == std::errc() && ptr == field.data() + field.size();
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    const size_t pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

int64_t Vocab::add_user(int64_t orig) {
  auto [it, inserted] = user_to_idx.try_emplace(orig, n_users());
  if (inserted) users.push_back(orig);
  return it->second;
}

int64_t Vocab::add_cat(int64_t orig) {
  auto [it, inserted] = cat_to_idx.try_emplace(orig, n_cats());
  if (inserted) cats.push_back(orig);
  return it->second;
}

int64_t Vocab::add_item(int64_t orig, int64_t dense_cat) {
  auto [it, inserted] = item_to_idx.try_emplace(orig, n_items());
  if (inserted) {
    items.push_back(orig);
    item_category.push_back(dense_cat);
  }
  return it->second;
}

void Vocab::save(const std::string& path) const {
  json j;
  j["users"] = users;
  j["items"] = items;
  j["cats"] = cats;
  j["item_category"] = item_category;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open vocab file for writing: " + path);
  os << j.dump(2) << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open vocab file: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError("invalid vocab JSON in " + path + ": " + e.what());
  }
  Vocab v;
  try {
    v.users = j.at("users").get<std::vector<int64_t>>();
    v.items = j.at("items").get<std::vector<int64_t>>();
    v.cats = j.at("cats").get<std::vector<int64_t>>();
    v.item_category = j.at("item_category").get<std::vector<int64_t>>();
  } catch (const json::exception& e) {
    throw ParseError("vocab JSON missing fields in " + path + ": " + e.what());
  }
  if (v.item_category.size() != v.items.size())
    throw ParseError("vocab JSON: item_category length mismatch in " + path);
  for (size_t i = 0; i < v.users.size(); ++i) v.user_to_idx[v.users[i]] = static_cast<int64_t>(i);
  for (size_t i = 0; i < v.items.size(); ++i) v.item_to_idx[v.items[i]] = static_cast<int64_t>(i);
  for (size_t i = 0; i < v.cats.size(); ++i) v.cat_to_idx[v.cats[i]] = static_cast<int64_t>(i);
  return v;
}

Interactions load_interactions(const std::string& tsv_path) {
  std::ifstream is(tsv_path, std::ios::binary);
  if (!is) throw Error("cannot open dataset file: " + tsv_path);

  Interactions out;
  std::unordered_set<std::string> seen_keys;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (line_no == 1 && !fields.empty() && !looks_like_int(fields[0])) continue;  // header
    if (fields.size() != 5)
      throw ParseError("line " + std::to_string(line_no) + ": expected 5 tab-separated fields, got " +
                       std::to_string(fields.size()));
    const int64_t user = parse_int(fields[0], line_no, "user_id");
    const int64_t item = parse_int(fields[1], line_no, "item_id");
    const int64_t cat = parse_int(fields[2], line_no, "category_id");
    const int64_t ts = parse_int(fields[3], line_no, "timestamp");
    const Behavior behavior = (fields[4] == "click") ? Behavior::kClick : Behavior::kOther;

    std::string key = std::to_string(user) + "\t" + std::to_string(item) + "\t" + std::to_string(ts);
    if (!seen_keys.insert(std::move(key)).second) {
      ++out.duplicates_dropped;
      continue;
    }
    InteractionRecord r;
    r.user = out.vocab.add_user(user);
    const int64_t dense_cat = out.vocab.add_cat(cat);
    r.item = out.vocab.add_item(item, dense_cat);
    r.category = out.vocab.item_category[static_cast<size_t>(r.item)];
    r.timestamp = ts;
    r.behavior = behavior;
    out.records.push_back(r);
  }
  return out;
}

void write_interactions_tsv(const std::string& path, const std::vector<InteractionRecord>& rows,
                            const Vocab& vocab) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open dataset file for writing: " + path);
  os << "user_id\titem_id\tcategory_id\ttimestamp\tbehavior\n";
  for (const InteractionRecord& r : rows) {
    os << vocab.users.at(static_cast<size_t>(r.user)) << '\t'
       << vocab.items.at(static_cast<size_t>(r.item)) << '\t'
       << vocab.cats.at(static_cast<size_t>(r.category)) << '\t' << r.timestamp << '\t'
       << (r.behavior == Behavior::kClick ? "click" : "other") << '\n';
  }
}

namespace {

void truncate_history(Instance& inst, int64_t max_seq_len) {
  const int64_t t = static_cast<int64_t>(inst.history_items.size());
  if (t > max_seq_len) {
    inst.history_items.erase(inst.history_items.begin(),
                             inst.history_items.begin() + (t - max_seq_len));
    inst.history_cats.erase(inst.history_cats.begin(), inst.history_cats.begin() + (t - max_seq_len));
  }
}

}  // namespace

SplitDataset build_split(const Interactions& data, int64_t max_seq_len, uint64_t seed) {
  if (max_seq_len < 1) throw ConfigError("max_seq_len must be at least 1");
  SplitDataset out;
  out.n_items = data.vocab.n_items();
  out.n_cats = data.vocab.n_cats();
  if (out.n_items < 2) throw ConfigError("need at least 2 distinct items to sample negatives");

  // Clicks per user, ordered by (timestamp, item) for a deterministic
  // chronology under timestamp ties.
  std::vector<std::vector<const InteractionRecord*>> clicks(
      static_cast<size_t>(data.vocab.n_users()));
  for (const InteractionRecord& r : data.records)
    if (r.behavior == Behavior::kClick) clicks[static_cast<size_t>(r.user)].push_back(&r);
  for (auto& v : clicks)
    std::sort(v.begin(), v.end(), [](const InteractionRecord* a, const InteractionRecord* b) {
      if (a->timestamp != b->timestamp) return a->timestamp < b->timestamp;
      return a->item < b->item;
    });

  Rng rng(seed);
  for (int64_t u = 0; u < data.vocab.n_users(); ++u) {
    const auto& seq = clicks[static_cast<size_t>(u)];
    const int64_t t_total = static_cast<int64_t>(seq.size());
    if (t_total < 3) {
      if (t_total > 0) ++out.users_dropped;
      continue;
    }
    std::unordered_set<int64_t> clicked;
    for (const InteractionRecord* r : seq) clicked.insert(r->item);

    auto sample_negative = [&]() -> int64_t {
      // Uniform over items the user never clicked. The clicked set is tiny
      // relative to the catalog, so rejection sampling terminates quickly;
      // guard against pathological vocabularies anyway.
      if (static_cast<int64_t>(clicked.size()) >= out.n_items)
        throw ConfigError("user clicked every item; cannot sample a negative");
      while (true) {
        const int64_t cand = rng.index(out.n_items);
        if (!clicked.count(cand)) return cand;
      }
    };

    for (int64_t t = 1; t < t_total; ++t) {
      Instance pos;
      pos.user = u;
      pos.history_items.reserve(static_cast<size_t>(t));
      pos.history_cats.reserve(static_cast<size_t>(t));
      for (int64_t h = 0; h < t; ++h) {
        pos.history_items.push_back(seq[static_cast<size_t>(h)]->item);
        pos.history_cats.push_back(seq[static_cast<size_t>(h)]->category);
      }
      truncate_history(pos, max_seq_len);
      pos.target_item = seq[static_cast<size_t>(t)]->item;
      pos.target_cat = seq[static_cast<size_t>(t)]->category;
      pos.label = 1.0;

      Instance neg = pos;
      neg.target_item = sample_negative();
      neg.target_cat = data.vocab.item_category[static_cast<size_t>(neg.target_item)];
      neg.label = 0.0;

      auto& dest = (t == t_total - 1) ? out.test : (t == t_total - 2) ? out.valid : out.train;
      dest.push_back(std::move(pos));
      dest.push_back(std::move(neg));
    }
  }
  return out;
}

std::vector<TaskBatch> make_tasks(const std::vector<Instance>& train, double in_ratio,
                                  int64_t batch_size, Rng& rng) {
  if (train.empty()) throw ConfigError("make_tasks: empty training set");
  if (batch_size < 1) throw ConfigError("make_tasks: batch_size must be at least 1");
  if (!(in_ratio > 0.0 && in_ratio <= 1.0))
    throw ConfigError("make_tasks: in_ratio must lie in (0, 1]");

  const int64_t n = static_cast<int64_t>(train.size());
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  rng.shuffle(idx);

  int64_t n_in = n;
  if (in_ratio < 1.0) {
    if (n < 2)
      throw ConfigError("make_tasks: need at least 2 instances to form two partitions");
    n_in = std::clamp<int64_t>(std::llround(in_ratio * static_cast<double>(n)), 1, n - 1);
  }
  const int64_t n_out = n - n_in;
  const int64_t steps = (n_in + batch_size - 1) / batch_size;

  std::vector<TaskBatch> tasks(static_cast<size_t>(steps));
  for (int64_t s = 0; s < steps; ++s) {
    TaskBatch& tb = tasks[static_cast<size_t>(s)];
    const int64_t in_lo = s * batch_size;
    const int64_t in_hi = std::min(n_in, in_lo + batch_size);
    for (int64_t i = in_lo; i < in_hi; ++i)
      tb.d_in.push_back(&train[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
    // Even partition of the outer pool across the same number of steps.
    const int64_t out_lo = n_out * s / steps;
    const int64_t out_hi = n_out * (s + 1) / steps;
    for (int64_t i = out_lo; i < out_hi; ++i)
      tb.d_out.push_back(&train[static_cast<size_t>(idx[static_cast<size_t>(n_in + i)])]);
  }
  return tasks;
}

namespace {

Instance make_synthetic_instance(int64_t user, int64_t item, int64_t cat, double label) {
  Instance inst;
  inst.user = user;
  inst.target_item = item;
  inst.target_cat = cat;
  inst.label = label;
  return inst;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.n_users < 1 || cfg.n_items < 1 || cfg.n_groups < 1)
    throw ConfigError("synthetic: users, items and groups must be positive");
  if (cfg.n_groups > cfg.n_items) throw ConfigError("synthetic: more groups than items");
  if (!(cfg.test_fraction >= 0.0 && cfg.test_fraction < 1.0))
    throw ConfigError("synthetic: test_fraction must lie in [0, 1)");
  if (cfg.keep_prob < 0.0 || cfg.keep_prob > 1.0 || cfg.flip_prob < 0.0 || cfg.flip_prob > 1.0)
    throw ConfigError("synthetic: probabilities must lie in [0, 1]");

  // Interest group of item j is (j mod n_groups); user u cares about group
  // (u mod n_groups).
  std::vector<std::vector<int64_t>> group_items(static_cast<size_t>(cfg.n_groups));
  for (int64_t j = 0; j < cfg.n_items; ++j)
    group_items[static_cast<size_t>(j % cfg.n_groups)].push_back(j);
  for (int64_t g = 0; g < cfg.n_groups; ++g) {
    if (static_cast<int64_t>(group_items[static_cast<size_t>(g)].size()) < cfg.pos_per_user)
      throw ConfigError("synthetic: group " + std::to_string(g) + " has fewer than pos_per_user items");
    if (cfg.n_items - static_cast<int64_t>(group_items[static_cast<size_t>(g)].size()) <
        cfg.neg_per_user)
      throw ConfigError("synthetic: complement of group " + std::to_string(g) +
                        " has fewer than neg_per_user items");
  }

  SyntheticData out;
  for (int64_t u = 0; u < cfg.n_users; ++u) out.vocab.add_user(u);
  for (int64_t c = 0; c < cfg.n_groups; ++c) out.vocab.add_cat(c);
  for (int64_t j = 0; j < cfg.n_items; ++j) out.vocab.add_item(j, j % cfg.n_groups);

  Rng rng(cfg.seed);

  auto sample_without_replacement = [&](std::vector<int64_t> pool, int64_t count) {
    // Partial Fisher-Yates: the first `count` slots become the sample.
    for (int64_t k = 0; k < count; ++k) {
      const int64_t j = k + rng.index(static_cast<int64_t>(pool.size()) - k);
      std::swap(pool[static_cast<size_t>(k)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(count));
    return pool;
  };

  for (int64_t u = 0; u < cfg.n_users; ++u) {
    const int64_t g = u % cfg.n_groups;
    const std::vector<int64_t> interested =
        sample_without_replacement(group_items[static_cast<size_t>(g)], cfg.pos_per_user);

    std::vector<int64_t> complement;
    complement.reserve(static_cast<size_t>(cfg.n_items -
        static_cast<int64_t>(group_items[static_cast<size_t>(g)].size())));
    for (int64_t og = 0; og < cfg.n_groups; ++og)
      if (og != g)
        complement.insert(complement.end(), group_items[static_cast<size_t>(og)].begin(),
                          group_items[static_cast<size_t>(og)].end());
    const std::vector<int64_t> non_interested =
        sample_without_replacement(std::move(complement), cfg.neg_per_user);

    struct Draw {
      int64_t item;
      double label;
      bool interested;
    };
    std::vector<Draw> draws;
    draws.reserve(static_cast<size_t>(cfg.pos_per_user + cfg.neg_per_user));
    for (int64_t item : interested) {
      const bool clicked = rng.bernoulli(cfg.keep_prob);
      if (clicked) ++out.interested_observed;
      draws.push_back({item, clicked ? 1.0 : 0.0, true});
    }
    for (int64_t item : non_interested) {
      const bool clicked = rng.bernoulli(cfg.flip_prob);
      if (clicked) ++out.flipped_negatives;
      draws.push_back({item, clicked ? 1.0 : 0.0, false});
    }
    rng.shuffle(draws);  // interaction order = synthetic timestamps

    for (size_t t = 0; t < draws.size(); ++t) {
      InteractionRecord r;
      r.user = u;
      r.item = draws[t].item;
      r.category = draws[t].item % cfg.n_groups;
      r.timestamp = static_cast<int64_t>(t);
      r.behavior = draws[t].label > 0.5 ? Behavior::kClick : Behavior::kOther;
      out.rows.push_back(r);
    }
  }

  out.split = split_synthetic_rows(out.rows, out.vocab, cfg.max_seq_len, cfg.test_fraction,
                                   cfg.seed + 1);
  out.empty_history_dropped = out.split.instances_dropped;
  return out;
}

SplitDataset split_synthetic_rows(const std::vector<InteractionRecord>& rows, const Vocab& vocab,
                                  int64_t max_seq_len, double test_fraction, uint64_t seed) {
  if (max_seq_len < 1) throw ConfigError("max_seq_len must be at least 1");
  SplitDataset out;
  out.n_items = vocab.n_items();
  out.n_cats = vocab.n_cats();

  // Group rows per user in timestamp order (rows are stored that way, but do
  // not rely on it).
  std::vector<std::vector<const InteractionRecord*>> per_user(static_cast<size_t>(vocab.n_users()));
  for (const InteractionRecord& r : rows) per_user[static_cast<size_t>(r.user)].push_back(&r);
  for (auto& v : per_user)
    std::sort(v.begin(), v.end(), [](const InteractionRecord* a, const InteractionRecord* b) {
      if (a->timestamp != b->timestamp) return a->timestamp < b->timestamp;
      return a->item < b->item;
    });

  std::vector<Instance> instances;
  int64_t dropped = 0;
  for (size_t u = 0; u < per_user.size(); ++u) {
    const auto& seq = per_user[u];
    for (const InteractionRecord* target : seq) {
      Instance inst = make_synthetic_instance(static_cast<int64_t>(u), target->item,
                                              target->category,
                                              target->behavior == Behavior::kClick ? 1.0 : 0.0);
      for (const InteractionRecord* r : seq) {
        if (r == target) continue;
        if (r->behavior != Behavior::kClick) continue;
        inst.history_items.push_back(r->item);
        inst.history_cats.push_back(r->category);
      }
      if (inst.history_items.empty()) {
        ++dropped;
        continue;
      }
      truncate_history(inst, max_seq_len);
      instances.push_back(std::move(inst));
    }
  }

  Rng rng(seed);
  std::vector<int64_t> idx(instances.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
  rng.shuffle(idx);
  const int64_t n_test = std::llround(test_fraction * static_cast<double>(instances.size()));
  for (size_t i = 0; i < idx.size(); ++i) {
    Instance& inst = instances[static_cast<size_t>(idx[i])];
    if (static_cast<int64_t>(i) < n_test)
      out.test.push_back(std::move(inst));
    else
      out.train.push_back(std::move(inst));
  }
  out.instances_dropped = dropped;
  return out;
}

}  // namespace metawrap
