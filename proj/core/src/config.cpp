#include "metawrap/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace metawrap {

namespace {

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

int64_t to_int(const std::string& v, const std::string& key) {
  int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  return out;
}

uint64_t to_uint(const std::string& v, const std::string& key) {
  uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

bool to_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(v);
  while (std::getline(ss, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) out += (i ? "," : "") + parts[i];
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string pooling_name(Pooling p) {
  return p == Pooling::kWeightedSum ? "weighted_sum" : "softmax";
}

Pooling pooling_from_string(const std::string& name) {
  if (name == "weighted_sum") return Pooling::kWeightedSum;
  if (name == "softmax") return Pooling::kSoftmax;
  throw ConfigError("unknown pooling '" + name + "' (expected weighted_sum or softmax)");
}

std::string lr_kind_name(LrSpec::Kind k) {
  switch (k) {
    case LrSpec::Kind::kConstant: return "constant";
    case LrSpec::Kind::kExponential: return "exponential";
    case LrSpec::Kind::kInvSqrt: return "invsqrt";
  }
  return "?";
}

LrSpec::Kind lr_kind_from_string(const std::string& name) {
  if (name == "constant") return LrSpec::Kind::kConstant;
  if (name == "exponential") return LrSpec::Kind::kExponential;
  if (name == "invsqrt") return LrSpec::Kind::kInvSqrt;
  throw ConfigError("unknown lr schedule '" + name + "' (expected constant, exponential or invsqrt)");
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "dataset.kind") {
    if (v != "synthetic" && v != "tsv")
      throw ConfigError("dataset.kind must be 'synthetic' or 'tsv', got '" + v + "'");
    cfg.dataset_kind = v;
  } else if (key == "dataset.path") {
    cfg.dataset_path = v;
  } else if (key == "dataset.max_seq_len") {
    cfg.max_seq_len = to_int(v, key);
  } else if (key == "synth.users") {
    cfg.synth.n_users = to_int(v, key);
  } else if (key == "synth.items") {
    cfg.synth.n_items = to_int(v, key);
  } else if (key == "synth.groups") {
    cfg.synth.n_groups = to_int(v, key);
  } else if (key == "synth.pos_per_user") {
    cfg.synth.pos_per_user = to_int(v, key);
  } else if (key == "synth.neg_per_user") {
    cfg.synth.neg_per_user = to_int(v, key);
  } else if (key == "synth.keep_prob") {
    cfg.synth.keep_prob = to_double(v, key);
  } else if (key == "synth.flip_prob") {
    cfg.synth.flip_prob = to_double(v, key);
  } else if (key == "synth.test_fraction") {
    cfg.synth.test_fraction = to_double(v, key);
  } else if (key == "synth.seed") {
    cfg.synth.seed = to_uint(v, key);
  } else if (key == "model.k") {
    cfg.train.k = to_int(v, key);
  } else if (key == "model.pooling") {
    cfg.train.pooling = pooling_from_string(v);
  } else if (key == "train.method") {
    cfg.train.method = method_from_string(v);
  } else if (key == "train.mu") {
    cfg.train.mu = to_double(v, key);
  } else if (key == "train.beta") {
    cfg.train.beta = to_double(v, key);
  } else if (key == "train.n_inner") {
    cfg.train.n_inner = static_cast<int>(to_int(v, key));
  } else if (key == "train.batch_size") {
    cfg.train.batch_size = to_int(v, key);
  } else if (key == "train.epochs") {
    cfg.train.epochs = static_cast<int>(to_int(v, key));
  } else if (key == "train.in_ratio") {
    cfg.train.in_ratio = to_double(v, key);
  } else if (key == "train.seed") {
    cfg.train.seed = to_uint(v, key);
  } else if (key == "train.lr.kind") {
    cfg.train.lr.kind = lr_kind_from_string(v);
  } else if (key == "train.lr.gamma0") {
    cfg.train.lr.gamma0 = to_double(v, key);
  } else if (key == "train.lr.decay") {
    cfg.train.lr.decay = to_double(v, key);
  } else if (key == "train.eval_batch_size") {
    cfg.train.eval_batch_size = to_int(v, key);
  } else if (key == "train.divergence_threshold") {
    cfg.train.divergence_threshold = to_double(v, key);
  } else if (key == "train.eval_each_epoch") {
    cfg.train.eval_each_epoch = to_bool(v, key);
  } else if (key == "sweep.mu") {
    cfg.sweep_mu.clear();
    for (const std::string& s : split_list(v)) cfg.sweep_mu.push_back(to_double(s, key));
  } else if (key == "sweep.beta") {
    cfg.sweep_beta.clear();
    for (const std::string& s : split_list(v)) cfg.sweep_beta.push_back(to_double(s, key));
  } else if (key == "sweep.n") {
    cfg.sweep_n.clear();
    for (const std::string& s : split_list(v)) cfg.sweep_n.push_back(static_cast<int>(to_int(s, key)));
  } else if (key == "ablate.methods") {
    cfg.ablate_methods = split_list(v);
    for (const std::string& m : cfg.ablate_methods) method_from_string(m);  // validate
  } else if (key == "ablate.seeds") {
    cfg.ablate_seeds.clear();
    for (const std::string& s : split_list(v)) cfg.ablate_seeds.push_back(to_uint(s, key));
  } else if (key == "bench.steps") {
    cfg.bench_steps = static_cast<int>(to_int(v, key));
  } else if (key == "bench.warmup") {
    cfg.bench_warmup = static_cast<int>(to_int(v, key));
  } else if (key == "bench.infer_batch") {
    cfg.bench_infer_batch = to_int(v, key);
  } else if (key == "gradcheck.corrupt") {
    cfg.gradcheck_corrupt = to_bool(v, key);
  } else if (key == "output.dir") {
    cfg.out_dir = v;
  } else if (key == "output.run_id") {
    cfg.run_id = v;
  } else if (key == "output.force") {
    cfg.force = to_bool(v, key);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    try {
      apply_override(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "dataset.kind = " << cfg.dataset_kind << "\n";
  os << "dataset.path = " << cfg.dataset_path << "\n";
  os << "dataset.max_seq_len = " << cfg.max_seq_len << "\n";
  os << "synth.users = " << cfg.synth.n_users << "\n";
  os << "synth.items = " << cfg.synth.n_items << "\n";
  os << "synth.groups = " << cfg.synth.n_groups << "\n";
  os << "synth.pos_per_user = " << cfg.synth.pos_per_user << "\n";
  os << "synth.neg_per_user = " << cfg.synth.neg_per_user << "\n";
  os << "synth.keep_prob = " << fmt_double(cfg.synth.keep_prob) << "\n";
  os << "synth.flip_prob = " << fmt_double(cfg.synth.flip_prob) << "\n";
  os << "synth.test_fraction = " << fmt_double(cfg.synth.test_fraction) << "\n";
  os << "synth.seed = " << cfg.synth.seed << "\n";
  os << "model.k = " << cfg.train.k << "\n";
  os << "model.pooling = " << pooling_name(cfg.train.pooling) << "\n";
  os << "train.method = " << method_name(cfg.train.method) << "\n";
  os << "train.mu = " << fmt_double(cfg.train.mu) << "\n";
  os << "train.beta = " << fmt_double(cfg.train.beta) << "\n";
  os << "train.n_inner = " << cfg.train.n_inner << "\n";
  os << "train.batch_size = " << cfg.train.batch_size << "\n";
  os << "train.epochs = " << cfg.train.epochs << "\n";
  os << "train.in_ratio = " << fmt_double(cfg.train.in_ratio) << "\n";
  os << "train.seed = " << cfg.train.seed << "\n";
  os << "train.lr.kind = " << lr_kind_name(cfg.train.lr.kind) << "\n";
  os << "train.lr.gamma0 = " << fmt_double(cfg.train.lr.gamma0) << "\n";
  os << "train.lr.decay = " << fmt_double(cfg.train.lr.decay) << "\n";
  os << "train.eval_batch_size = " << cfg.train.eval_batch_size << "\n";
  os << "train.divergence_threshold = " << fmt_double(cfg.train.divergence_threshold) << "\n";
  os << "train.eval_each_epoch = " << (cfg.train.eval_each_epoch ? "true" : "false") << "\n";
  {
    std::vector<std::string> mu, beta, n;
    for (double x : cfg.sweep_mu) mu.push_back(fmt_double(x));
    for (double x : cfg.sweep_beta) beta.push_back(fmt_double(x));
    for (int x : cfg.sweep_n) n.push_back(std::to_string(x));
    os << "sweep.mu = " << join(mu) << "\n";
    os << "sweep.beta = " << join(beta) << "\n";
    os << "sweep.n = " << join(n) << "\n";
  }
  {
    std::vector<std::string> seeds;
    for (uint64_t s : cfg.ablate_seeds) seeds.push_back(std::to_string(s));
    os << "ablate.methods = " << join(cfg.ablate_methods) << "\n";
    os << "ablate.seeds = " << join(seeds) << "\n";
  }
  os << "bench.steps = " << cfg.bench_steps << "\n";
  os << "bench.warmup = " << cfg.bench_warmup << "\n";
  os << "bench.infer_batch = " << cfg.bench_infer_batch << "\n";
  os << "gradcheck.corrupt = " << (cfg.gradcheck_corrupt ? "true" : "false") << "\n";
  os << "output.dir = " << cfg.out_dir << "\n";
  os << "output.run_id = " << cfg.run_id << "\n";
  os << "output.force = " << (cfg.force ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace metawrap
