#include "metawrap/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "metawrap/bilevel.hpp"
#include "metawrap/metrics.hpp"
#include "metawrap/model.hpp"
#include "metawrap/oracle.hpp"
#include "metawrap/train.hpp"

namespace metawrap {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o << std::setprecision(precision) << v;
  return o.str();
}

std::string fmt_csv(double v) { return fmt(v, 10); }

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

// Resolve and create the command's output directory, refusing to reuse an
// existing one unless the run is forced.
fs::path prepare_run_dir(const RunConfig& cfg, const std::string& default_id) {
  const std::string id = cfg.run_id.empty() ? default_id : cfg.run_id;
  const fs::path dir = fs::path(cfg.out_dir) / id;
  if (fs::exists(dir) && !cfg.force)
    throw UsageError("output directory '" + dir.string() +
                     "' already exists; pass --force to overwrite");
  fs::create_directories(dir);
  return dir;
}

std::string dataset_summary(const SplitDataset& d) {
  std::ostringstream o;
  o << "dataset: train=" << d.train.size() << " valid=" << d.valid.size()
    << " test=" << d.test.size() << " items=" << d.n_items << " cats=" << d.n_cats;
  if (d.users_dropped > 0) o << " users_dropped=" << d.users_dropped;
  if (d.instances_dropped > 0) o << " instances_dropped=" << d.instances_dropped;
  return o.str();
}

// Long-form result table shared by train / ablate / eval outputs.
struct Report {
  std::ostringstream rows;
  Report() { rows << "method,seed,split,metric,value\n"; }
  void add(const std::string& method, const std::string& seed, const std::string& split,
           const std::string& metric, double value) {
    if (!std::isfinite(value)) return;  // empty splits produce no row
    rows << method << ',' << seed << ',' << split << ',' << metric << ',' << fmt_csv(value)
         << '\n';
  }
  std::string str() const { return rows.str(); }
};

ModelVariant variant_for(Method m) {
  return m == Method::kBase ? ModelVariant::kBase : ModelVariant::kSelector;
}

void print_epoch(const EpochMetrics& em, int total_epochs) {
  std::ostringstream o;
  o << "  epoch " << std::setw(3) << em.epoch << "/" << total_epochs
    << "  train_loss=" << fmt(em.train_loss, 6);
  if (std::isfinite(em.oob_loss)) o << "  oob_loss=" << fmt(em.oob_loss, 6);
  if (std::isfinite(em.valid_auc)) o << "  valid_auc=" << fmt(em.valid_auc);
  if (std::isfinite(em.test_auc)) o << "  test_auc=" << fmt(em.test_auc);
  o << "  (" << fmt(em.step_ms_mean, 3) << " ms/step)";
  std::cout << o.str() << std::endl;
}

}  // namespace

void save_synthetic_dir(const std::string& dir, const SyntheticData& data,
                        const SyntheticConfig& cfg) {
  fs::create_directories(dir);
  write_interactions_tsv((fs::path(dir) / "data.tsv").string(), data.rows, data.vocab);
  data.vocab.save((fs::path(dir) / "vocab.json").string());

  json manifest;
  manifest["kind"] = "synthetic";
  json c;
  c["users"] = cfg.n_users;
  c["items"] = cfg.n_items;
  c["groups"] = cfg.n_groups;
  c["pos_per_user"] = cfg.pos_per_user;
  c["neg_per_user"] = cfg.neg_per_user;
  c["keep_prob"] = cfg.keep_prob;
  c["flip_prob"] = cfg.flip_prob;
  c["test_fraction"] = cfg.test_fraction;
  c["max_seq_len"] = cfg.max_seq_len;
  c["seed"] = cfg.seed;
  manifest["config"] = std::move(c);
  json s;
  s["rows"] = data.rows.size();
  s["train_instances"] = data.split.train.size();
  s["test_instances"] = data.split.test.size();
  s["interested_observed"] = data.interested_observed;
  s["flipped_negatives"] = data.flipped_negatives;
  s["empty_history_dropped"] = data.empty_history_dropped;
  manifest["stats"] = std::move(s);
  write_text_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
}

SplitDataset load_synthetic_dir(const std::string& dir) {
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw UsageError("no manifest.json in '" + dir + "' (not a synthetic dataset dir?)");
  json manifest;
  SyntheticConfig cfg;
  try {
    in >> manifest;
    if (manifest.at("kind").get<std::string>() != "synthetic")
      throw ParseError("manifest kind is not 'synthetic'");
    const json& c = manifest.at("config");
    cfg.n_users = c.at("users").get<int64_t>();
    cfg.n_items = c.at("items").get<int64_t>();
    cfg.n_groups = c.at("groups").get<int64_t>();
    cfg.pos_per_user = c.at("pos_per_user").get<int64_t>();
    cfg.neg_per_user = c.at("neg_per_user").get<int64_t>();
    cfg.keep_prob = c.at("keep_prob").get<double>();
    cfg.flip_prob = c.at("flip_prob").get<double>();
    cfg.test_fraction = c.at("test_fraction").get<double>();
    cfg.max_seq_len = c.at("max_seq_len").get<int64_t>();
    cfg.seed = c.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw ParseError("bad manifest '" + manifest_path.string() + "': " + e.what());
  }

  const Vocab vocab = Vocab::load((fs::path(dir) / "vocab.json").string());
  const Interactions raw = load_interactions((fs::path(dir) / "data.tsv").string());

  // load_interactions assigns dense ids in first-seen order; translate each
  // row back to original ids and re-densify through the saved vocabulary so
  // feature ids match the generating run exactly.
  std::vector<InteractionRecord> rows;
  rows.reserve(raw.records.size());
  for (const InteractionRecord& r : raw.records) {
    const int64_t orig_user = raw.vocab.users.at(static_cast<size_t>(r.user));
    const int64_t orig_item = raw.vocab.items.at(static_cast<size_t>(r.item));
    const int64_t orig_cat = raw.vocab.cats.at(static_cast<size_t>(r.category));
    const auto u = vocab.user_to_idx.find(orig_user);
    const auto i = vocab.item_to_idx.find(orig_item);
    const auto cp = vocab.cat_to_idx.find(orig_cat);
    if (u == vocab.user_to_idx.end() || i == vocab.item_to_idx.end() ||
        cp == vocab.cat_to_idx.end())
      throw ParseError("data.tsv row references an id missing from vocab.json");
    InteractionRecord m = r;
    m.user = u->second;
    m.item = i->second;
    m.category = cp->second;
    rows.push_back(m);
  }
  return split_synthetic_rows(rows, vocab, cfg.max_seq_len, cfg.test_fraction, cfg.seed + 1);
}

SplitDataset load_dataset(const RunConfig& cfg) {
  if (cfg.dataset_kind == "synthetic") {
    if (cfg.dataset_path.empty()) {
      SyntheticConfig sc = cfg.synth;
      sc.max_seq_len = cfg.max_seq_len;
      return generate_synthetic(sc).split;
    }
    return load_synthetic_dir(cfg.dataset_path);
  }
  if (cfg.dataset_kind == "tsv") {
    if (cfg.dataset_path.empty())
      throw UsageError("dataset.kind = tsv requires dataset.path to name the interaction log");
    const Interactions ia = load_interactions(cfg.dataset_path);
    return build_split(ia, cfg.max_seq_len, cfg.train.seed);
  }
  throw ConfigError("unknown dataset.kind '" + cfg.dataset_kind + "' (expected synthetic or tsv)");
}

int cmd_synth(const RunConfig& cfg) {
  if (cfg.dataset_path.empty())
    throw UsageError("synth: set dataset.path to the directory to create");
  if (fs::exists(cfg.dataset_path) && !cfg.force)
    throw UsageError("dataset directory '" + cfg.dataset_path +
                     "' already exists; pass --force to overwrite");

  SyntheticConfig sc = cfg.synth;
  sc.max_seq_len = cfg.max_seq_len;
  const SyntheticData data = generate_synthetic(sc);
  save_synthetic_dir(cfg.dataset_path, data, sc);

  std::cout << "synthetic study: users=" << sc.n_users << " items=" << sc.n_items
            << " groups=" << sc.n_groups << " seed=" << sc.seed << "\n"
            << "  rows=" << data.rows.size()
            << " interested_observed=" << data.interested_observed
            << " flipped_negatives=" << data.flipped_negatives
            << " empty_history_dropped=" << data.empty_history_dropped << "\n"
            << "  " << dataset_summary(data.split) << "\n"
            << "wrote " << cfg.dataset_path << std::endl;
  return 0;
}

int cmd_prepare(const RunConfig& cfg) {
  if (cfg.dataset_kind != "tsv")
    throw UsageError("prepare: works on dataset.kind = tsv (synthetic dirs are already prepared)");
  if (cfg.dataset_path.empty())
    throw UsageError("prepare: set dataset.path to the interaction log");

  const Interactions ia = load_interactions(cfg.dataset_path);
  const SplitDataset split = build_split(ia, cfg.max_seq_len, cfg.train.seed);

  const fs::path dir = prepare_run_dir(cfg, "prepare");
  ia.vocab.save((dir / "vocab.json").string());
  json stats;
  stats["rows"] = ia.records.size();
  stats["duplicates_dropped"] = ia.duplicates_dropped;
  stats["users"] = ia.vocab.n_users();
  stats["items"] = ia.vocab.n_items();
  stats["cats"] = ia.vocab.n_cats();
  stats["train_instances"] = split.train.size();
  stats["valid_instances"] = split.valid.size();
  stats["test_instances"] = split.test.size();
  stats["users_dropped"] = split.users_dropped;
  stats["instances_dropped"] = split.instances_dropped;
  write_text_file(dir / "prepare.json", stats.dump(2) + "\n");

  std::cout << "rows=" << ia.records.size() << " duplicates_dropped=" << ia.duplicates_dropped
            << " users=" << ia.vocab.n_users() << " items=" << ia.vocab.n_items()
            << " cats=" << ia.vocab.n_cats() << "\n"
            << dataset_summary(split) << "\n"
            << "wrote " << dir.string() << std::endl;
  return 0;
}

namespace {

// Run one training configuration, persist metrics + checkpoint with the
// given filename suffix, and append its final-epoch numbers to the report.
void run_training(const SplitDataset& data, const TrainConfig& tc, const std::string& label,
                  const fs::path& dir, const std::string& suffix, Report& report) {
  std::cout << "== " << label << std::endl;
  TrainConfig cfg = tc;
  cfg.on_epoch = [&](const EpochMetrics& em) { print_epoch(em, cfg.epochs); };
  const TrainResult res = train(data, cfg);

  write_text_file(dir / ("metrics" + suffix + ".jsonl"), metrics_to_jsonl(res.metrics));
  save_checkpoint((dir / ("checkpoint" + suffix + ".bin")).string(), res.params, cfg.seed);

  const std::string seed = std::to_string(cfg.seed);
  if (!res.metrics.epochs.empty()) {
    const EpochMetrics& last = res.metrics.epochs.back();
    report.add(label, seed, "train", "loss", last.train_loss);
    report.add(label, seed, "outer", "loss", last.oob_loss);
    report.add(label, seed, "valid", "auc", last.valid_auc);
    report.add(label, seed, "test", "auc", last.test_auc);
  }
  const ModelVariant variant = variant_for(cfg.method);
  if (!data.test.empty()) {
    const OverfitReport ofr = overfit_report(res.params, data, variant, cfg.pooling);
    report.add(label, seed, "train", "final_loss", ofr.train_loss);
    report.add(label, seed, "test", "final_loss", ofr.test_loss);
    report.add(label, seed, "gap", "loss", ofr.gap);
  }
}

}  // namespace

int cmd_train(const RunConfig& cfg) {
  const SplitDataset data = load_dataset(cfg);
  std::cout << dataset_summary(data) << std::endl;

  const std::string default_id =
      method_name(cfg.train.method) + "-seed" + std::to_string(cfg.train.seed);
  const fs::path dir = prepare_run_dir(cfg, default_id);
  write_text_file(dir / "config.echo", serialize_config(cfg));

  const std::vector<double> mus = cfg.sweep_mu.empty() ? std::vector<double>{cfg.train.mu}
                                                       : cfg.sweep_mu;
  const std::vector<double> betas = cfg.sweep_beta.empty() ? std::vector<double>{cfg.train.beta}
                                                           : cfg.sweep_beta;
  const std::vector<int> ns = cfg.sweep_n.empty() ? std::vector<int>{cfg.train.n_inner}
                                                  : cfg.sweep_n;
  const bool sweeping = mus.size() * betas.size() * ns.size() > 1;

  Report report;
  for (const double mu : mus)
    for (const double beta : betas)
      for (const int n : ns) {
        TrainConfig tc = cfg.train;
        tc.mu = mu;
        tc.beta = beta;
        tc.n_inner = n;
        std::string suffix, label = method_name(tc.method);
        if (sweeping) {
          std::ostringstream tag;
          tag << "-mu" << mu << "-beta" << beta << "-n" << n;
          suffix = tag.str();
          label += suffix;
        }
        run_training(data, tc, label, dir, suffix, report);
      }

  write_text_file(dir / "summary.csv", report.str());
  std::cout << "wrote " << dir.string() << std::endl;
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  if (cfg.run_id.empty())
    throw UsageError("eval: set output.run_id to the run whose checkpoint should be scored");
  const fs::path dir = fs::path(cfg.out_dir) / cfg.run_id;
  const fs::path ckpt_path = dir / "checkpoint.bin";
  if (!fs::exists(ckpt_path))
    throw UsageError("no checkpoint at '" + ckpt_path.string() + "'");

  const Checkpoint ckpt = load_checkpoint(ckpt_path.string());
  const SplitDataset data = load_dataset(cfg);
  if (ckpt.params.n_items != data.n_items || ckpt.params.n_cats != data.n_cats)
    throw ConfigError("checkpoint vocabulary (" + std::to_string(ckpt.params.n_items) + " items, " +
                      std::to_string(ckpt.params.n_cats) + " cats) does not match the dataset (" +
                      std::to_string(data.n_items) + ", " + std::to_string(data.n_cats) + ")");

  const ModelVariant variant = variant_for(cfg.train.method);
  const Pooling pooling = cfg.train.pooling;
  const std::string label = method_name(cfg.train.method);
  const std::string seed = std::to_string(ckpt.seed);

  Report report;
  auto eval_split = [&](const char* name, const std::vector<Instance>& split) {
    if (split.empty()) return;
    const std::vector<double> scores =
        score_instances(split, ckpt.params, variant, pooling, cfg.train.eval_batch_size);
    std::vector<double> labels(split.size());
    for (size_t i = 0; i < split.size(); ++i) labels[i] = split[i].label;
    const double a = auc_labeled(scores, labels);
    const double loss =
        dataset_loss(split, ckpt.params, variant, pooling, cfg.train.eval_batch_size);
    report.add(label, seed, name, "auc", a);
    report.add(label, seed, name, "loss", loss);
    std::cout << "  " << name << ": auc=" << fmt(a, 6) << " loss=" << fmt(loss, 6) << "\n";
  };
  std::cout << "eval " << ckpt_path.string() << " (" << label << ", seed " << seed << ")"
            << std::endl;
  eval_split("train", data.train);
  eval_split("valid", data.valid);
  eval_split("test", data.test);

  write_text_file(dir / "eval.csv", report.str());
  std::cout << "wrote " << (dir / "eval.csv").string() << std::endl;
  return 0;
}

int cmd_ablate(const RunConfig& cfg) {
  if (cfg.ablate_methods.empty()) throw UsageError("ablate: ablate.methods is empty");
  if (cfg.ablate_seeds.empty()) throw UsageError("ablate: ablate.seeds is empty");

  const SplitDataset data = load_dataset(cfg);
  std::cout << dataset_summary(data) << std::endl;
  const fs::path dir = prepare_run_dir(cfg, "ablate");
  write_text_file(dir / "config.echo", serialize_config(cfg));

  Report report;
  std::vector<std::pair<std::string, double>> means;
  for (const std::string& mname : cfg.ablate_methods) {
    const Method m = method_from_string(mname);
    double auc_sum = 0.0;
    int auc_count = 0;
    for (const uint64_t seed : cfg.ablate_seeds) {
      TrainConfig tc = cfg.train;
      tc.method = m;
      tc.seed = seed;
      std::ostringstream label;
      label << mname << " seed " << seed;
      std::cout << "== " << label.str() << std::endl;
      tc.on_epoch = [&](const EpochMetrics& em) { print_epoch(em, tc.epochs); };
      const TrainResult res = train(data, tc);
      const EpochMetrics& last = res.metrics.epochs.back();
      report.add(mname, std::to_string(seed), "train", "loss", last.train_loss);
      report.add(mname, std::to_string(seed), "valid", "auc", last.valid_auc);
      report.add(mname, std::to_string(seed), "test", "auc", last.test_auc);
      if (std::isfinite(last.test_auc)) {
        auc_sum += last.test_auc;
        ++auc_count;
      }
    }
    const double mean = auc_count > 0 ? auc_sum / auc_count : std::nan("");
    if (auc_count > 0) report.add(mname, "mean", "test", "auc", mean);
    means.emplace_back(mname, mean);
  }

  write_text_file(dir / "summary.csv", report.str());

  std::vector<std::pair<std::string, double>> ranked = means;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::cout << "mean test auc over " << cfg.ablate_seeds.size() << " seed(s):" << std::endl;
  for (const auto& [name, mean] : ranked)
    std::cout << "  " << std::left << std::setw(16) << name << fmt(mean, 6) << std::endl;
  if (cfg.ablate_seeds.size() < 2)
    std::cout << "warning: single seed; rankings carry no dispersion estimate" << std::endl;
  std::cout << "wrote " << dir.string() << std::endl;
  return 0;
}

namespace {

struct CheckLine {
  std::string name;
  int n = 0;
  double max_rel = 0.0;
  double tol = 0.0;
  bool ok() const { return max_rel <= tol; }
};

void print_check(const CheckLine& c) {
  std::cout << "gradcheck " << std::left << std::setw(34) << c.name << " n=" << std::setw(4)
            << c.n << " max_rel_err=" << std::scientific << std::setprecision(2) << c.max_rel
            << " tol=" << c.tol << std::defaultfloat << (c.ok() ? "  [ok]" : "  [FAIL]")
            << std::endl;
}

// Hand-built instances over a 6-item / 3-category vocabulary (category =
// item modulo 3).
std::vector<Instance> probe_instances() {
  auto mk = [](int64_t user, std::vector<int64_t> items, int64_t target, double label) {
    Instance inst;
    inst.user = user;
    inst.history_items = std::move(items);
    for (const int64_t it : inst.history_items) inst.history_cats.push_back(it % 3);
    inst.target_item = target;
    inst.target_cat = target % 3;
    inst.label = label;
    return inst;
  };
  return {mk(0, {0, 1, 2}, 3, 1.0), mk(0, {1, 4}, 5, 0.0), mk(1, {2, 5}, 0, 1.0),
          mk(1, {3, 0, 4}, 1, 0.0)};
}

}  // namespace

int cmd_gradcheck(const RunConfig& cfg) {
  std::vector<CheckLine> checks;

  {  // Reverse-mode gradients vs central differences on random graphs.
    CheckLine c{"gradients vs fd (random graphs)", 200, 0.0, 1e-6};
    for (int s = 1; s <= c.n; ++s) {
      const RandomGraph g = make_random_graph(static_cast<uint64_t>(s));
      const GradMap grads = gradient(g.root, g.params, /*create_graph=*/false);
      const std::vector<Tensor> ref = fd_gradient(graph_scalar_fn(g.root, g.params), g.values);
      for (size_t i = 0; i < g.params.size(); ++i) {
        Tensor got = grads.tensor(i);
        // Negative control: a deliberately corrupted gradient must trip the
        // tolerance check (exercised by tests to prove the check has teeth).
        if (cfg.gradcheck_corrupt && s == 1 && i == 0) got[0] += 1e-3;
        c.max_rel = std::max(c.max_rel, max_rel_err(got, ref[i]));
      }
    }
    print_check(c);
    checks.push_back(c);
  }

  {  // Hessian-vector products vs finite differences of fd gradients.
    CheckLine c{"hvp vs fd-of-fd (random graphs)", 60, 0.0, 1e-5};
    for (int s = 1; s <= c.n; ++s) {
      const RandomGraph g = make_random_graph(static_cast<uint64_t>(s));
      Rng vrng(static_cast<uint64_t>(s) * 977 + 3);
      std::vector<Tensor> v;
      for (const Tensor& t : g.values) {
        Tensor ti(t.shape());
        for (int64_t i = 0; i < ti.numel(); ++i) ti[i] = vrng.uniform(-1.0, 1.0);
        v.push_back(std::move(ti));
      }
      const GradMap got = hvp(g.root, g.params, v, g.params);
      const std::vector<Tensor> ref = fd_hvp(graph_scalar_fn(g.root, g.params), g.values, v);
      for (size_t i = 0; i < g.params.size(); ++i)
        c.max_rel = std::max(c.max_rel, max_rel_err(got.tensor(i), ref[i]));
    }
    print_check(c);
    checks.push_back(c);
  }

  {  // Full-model joint gradient vs central differences (tiny model).
    CheckLine c{"joint gradient vs fd (model)", 0, 0.0, 1e-4};
    const std::vector<Instance> insts = probe_instances();
    const std::vector<const Instance*> d_in = {&insts[0], &insts[1]};
    const std::vector<const Instance*> d_out = {&insts[2], &insts[3]};
    const ParamSet params = init_params(/*k=*/2, /*n_items=*/6, /*n_cats=*/3, /*seed=*/7);
    for (const int n : {0, 1, 2, 3}) {
      for (const double mu : {0.0, 0.7}) {
        if (n > 0 && mu == 0.0) continue;  // the unroll is dropped; one case suffices
        const JointProbe probe =
            make_joint_probe(params, d_in, d_out, mu, /*beta=*/0.05, n, cfg.train.pooling);
        const std::vector<Tensor> got = probe.gradient(probe.at);
        const JointProbe::Graph jg = probe.graph();
        Replay replay(jg.total, jg.leaves);
        // The prebuilt graph and the direct evaluation must agree bit for
        // bit, otherwise differencing the replay would check the wrong
        // function.
        if (replay.eval_all(probe.at) != probe.value(probe.at))
          throw ToleranceError("joint probe: replayed graph and direct value disagree");
        const std::vector<Tensor> ref = fd_gradient(replay, probe.at);
        for (size_t i = 0; i < got.size(); ++i)
          c.max_rel = std::max(c.max_rel, max_rel_err(got[i], ref[i]));
        ++c.n;
      }
    }
    print_check(c);
    checks.push_back(c);
  }

  {  // Unrolled gradient vs the quadratic problem's closed form.
    CheckLine c{"unrolled gradient vs closed form", 0, 0.0, 1e-8};
    for (const uint64_t seed : {11ULL, 12ULL}) {
      const StubProblem stub = StubProblem::random(3, 2, seed, /*linear_outer=*/seed == 12);
      const LossBuilder inner = [&stub](const NodeMap& th, const NodeMap& ph) {
        return stub.inner_loss(th.at("theta"), ph.at("phi"));
      };
      const LossBuilder outer = [&stub](const NodeMap& th, const NodeMap& ph) {
        return stub.outer_loss(th.at("theta"), ph.at("phi"));
      };
      for (const int n : {1, 3}) {
        const double beta = 0.1;
        const NodeMap theta0 = {{"theta", input(stub.theta0, "theta")}};
        const NodeMap phi = {{"phi", input(stub.phi, "phi")}};
        const MetaGradient mg = meta_gradient(inner, outer, theta0, phi, /*mu=*/1.0, beta, n);
        // joint = inner(theta0) + outer(theta_n); subtract the inner term's
        // own phi gradient to isolate the unrolled chain.
        const Tensor direct = stub.inner_grad_phi(stub.theta0, stub.phi);
        const Tensor chain = t_sub(mg.phi.at("phi"), direct);
        c.max_rel = std::max(c.max_rel, max_rel_err(chain, stub_hypergradient(stub, beta, n)));
        ++c.n;
      }
    }
    print_check(c);
    checks.push_back(c);
  }

  for (const CheckLine& c : checks)
    if (!c.ok())
      throw ToleranceError("gradient check '" + c.name + "' failed: max_rel_err=" +
                           fmt(c.max_rel, 3) + " exceeds tol=" + fmt(c.tol, 3));
  std::cout << "all gradient checks passed" << std::endl;
  return 0;
}

namespace {

json stats_json(const TimingStats& s) {
  json j;
  j["mean_ms"] = s.mean_ms;
  j["p50_ms"] = s.p50_ms;
  j["p95_ms"] = s.p95_ms;
  j["min_ms"] = s.min_ms;
  j["max_ms"] = s.max_ms;
  j["count"] = s.count;
  return j;
}

void print_stats(const char* label, const TimingStats& s) {
  std::cout << "  " << std::left << std::setw(24) << label << " mean=" << fmt(s.mean_ms, 4)
            << "ms p50=" << fmt(s.p50_ms, 4) << "ms p95=" << fmt(s.p95_ms, 4) << "ms"
            << std::endl;
}

}  // namespace

int cmd_bench(const RunConfig& cfg) {
  const SplitDataset data = load_dataset(cfg);
  std::cout << dataset_summary(data) << std::endl;

  TrainConfig m1 = cfg.train;
  m1.method = Method::kAttentionOnly;
  TrainConfig m4 = cfg.train;
  m4.method = Method::kMetaWrapper;
  m4.n_inner = std::max(1, cfg.train.n_inner);
  if (m4.mu <= 0.0) m4.mu = 0.5;

  std::cout << "timing " << cfg.bench_steps << " optimizer steps (warmup " << cfg.bench_warmup
            << ", batch " << cfg.train.batch_size << ")" << std::endl;
  const TimingStats s1 =
      summarize_timings(bench_train_steps(data, m1, cfg.bench_steps, cfg.bench_warmup));
  const TimingStats s4 =
      summarize_timings(bench_train_steps(data, m4, cfg.bench_steps, cfg.bench_warmup));
  const double step_ratio = s4.mean_ms / s1.mean_ms;
  print_stats("train step attention_only", s1);
  print_stats("train step meta_wrapper", s4);
  std::cout << "  step ratio meta_wrapper/attention_only = " << fmt(step_ratio, 4) << std::endl;

  // Inference cost depends only on the architecture, which both methods
  // share; time the same forward pass under two independently initialized
  // parameter sets.
  const std::vector<Instance>& insts = data.test.empty() ? data.train : data.test;
  const ParamSet p1 = init_params(cfg.train.k, data.n_items, data.n_cats, cfg.train.seed);
  const ParamSet p4 = init_params(cfg.train.k, data.n_items, data.n_cats, cfg.train.seed + 1);
  const TimingStats i1 = summarize_timings(
      bench_inference(insts, p1, ModelVariant::kSelector, cfg.train.pooling, cfg.bench_steps,
                      cfg.bench_infer_batch, cfg.bench_warmup));
  const TimingStats i4 = summarize_timings(
      bench_inference(insts, p4, ModelVariant::kSelector, cfg.train.pooling, cfg.bench_steps,
                      cfg.bench_infer_batch, cfg.bench_warmup));
  const double infer_ratio = i4.mean_ms / i1.mean_ms;
  print_stats("inference attention_only", i1);
  print_stats("inference meta_wrapper", i4);
  std::cout << "  inference ratio = " << fmt(infer_ratio, 4) << std::endl;

  const fs::path dir = prepare_run_dir(cfg, "bench");
  json out;
  out["train_step_ms"] = {{"attention_only", stats_json(s1)},
                          {"meta_wrapper_n" + std::to_string(m4.n_inner), stats_json(s4)},
                          {"ratio", step_ratio}};
  out["inference_ms"] = {{"attention_only", stats_json(i1)},
                         {"meta_wrapper", stats_json(i4)},
                         {"ratio", infer_ratio}};
  write_text_file(dir / "bench.json", out.dump(2) + "\n");
  std::cout << "wrote " << (dir / "bench.json").string() << std::endl;
  return 0;
}

}  // namespace metawrap
