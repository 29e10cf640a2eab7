#include "metawrap/model.hpp"

#include <cstring>
#include <fstream>

#include "metawrap/rng.hpp"

namespace metawrap {

namespace {

Tensor uniform_tensor(std::vector<int64_t> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

Tensor layer_weight(int64_t out_dim, int64_t in_dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
  return uniform_tensor({out_dim, in_dim}, rng, -bound, bound);
}

MlpParams init_mlp(int64_t in_dim, Rng& rng) {
  MlpParams m;
  m.w1 = layer_weight(kHidden1, in_dim, rng);
  m.b1 = Tensor::zeros({kHidden1, 1});
  m.w2 = layer_weight(kHidden2, kHidden1, rng);
  m.b2 = Tensor::zeros({kHidden2, 1});
  m.w3 = layer_weight(1, kHidden2, rng);
  m.b3 = Tensor::zeros({1, 1});
  return m;
}

NodeMap mlp_inputs(const MlpParams& m, const std::string& prefix) {
  NodeMap out;
  out[prefix + ".w1"] = input(m.w1, prefix + ".w1");
  out[prefix + ".b1"] = input(m.b1, prefix + ".b1");
  out[prefix + ".w2"] = input(m.w2, prefix + ".w2");
  out[prefix + ".b2"] = input(m.b2, prefix + ".b2");
  out[prefix + ".w3"] = input(m.w3, prefix + ".w3");
  out[prefix + ".b3"] = input(m.b3, prefix + ".b3");
  return out;
}

// w x + b with the bias broadcast across columns via a rank-one product.
NodePtr affine(const NodePtr& w, const NodePtr& b, const NodePtr& x) {
  const int64_t cols = x->value().dim(1);
  return add(matmul(w, x), matmul(b, constant(Tensor::ones({1, cols}))));
}

NodePtr mlp_sigmoid_row(const NodePtr& x, const NodeMap& params, const std::string& prefix) {
  const NodePtr h1 = sigmoid(affine(params.at(prefix + ".w1"), params.at(prefix + ".b1"), x));
  const NodePtr h2 = sigmoid(affine(params.at(prefix + ".w2"), params.at(prefix + ".b2"), h1));
  return sigmoid(affine(params.at(prefix + ".w3"), params.at(prefix + ".b3"), h2));
}

}  // namespace

int64_t ParamSet::item_fid(int64_t item) const {
  if (item < 0 || item >= n_items)
    throw Error("unknown item id " + std::to_string(item) + " (vocabulary has " +
                std::to_string(n_items) + " items)");
  return item;
}

int64_t ParamSet::cat_fid(int64_t cat) const {
  if (cat < 0 || cat >= n_cats)
    throw Error("unknown category id " + std::to_string(cat) + " (vocabulary has " +
                std::to_string(n_cats) + " categories)");
  return n_items + cat;
}

Tensor ParamSet::embedding_row(int64_t fid) const {
  if (fid < 0 || fid >= n_features())
    throw Error("feature id " + std::to_string(fid) + " out of range");
  Tensor row({k, 1});
  for (int64_t j = 0; j < k; ++j) row[j] = embedding.at(fid, j);
  return row;
}

ParamSet init_params(int64_t k, int64_t n_items, int64_t n_cats, uint64_t seed) {
  if (k < 1) throw ConfigError("embedding width must be positive");
  if (n_items < 1 || n_cats < 1) throw ConfigError("need at least one item and one category");
  Rng rng(seed);
  ParamSet p;
  p.k = k;
  p.n_items = n_items;
  p.n_cats = n_cats;
  p.embedding = uniform_tensor({n_items + n_cats, k}, rng, -0.05, 0.05);
  p.predictor = init_mlp(2 * k, rng);
  p.selector = init_mlp(4 * k, rng);
  return p;
}

NodeMap predictor_inputs(const ParamSet& p) { return mlp_inputs(p.predictor, "f"); }
NodeMap selector_inputs(const ParamSet& p) { return mlp_inputs(p.selector, "g"); }

std::string embedding_key(int64_t fid) { return "e" + std::to_string(fid); }

std::map<std::string, Tensor*> dense_param_slots(ParamSet& p) {
  return {
      {"f.w1", &p.predictor.w1}, {"f.b1", &p.predictor.b1}, {"f.w2", &p.predictor.w2},
      {"f.b2", &p.predictor.b2}, {"f.w3", &p.predictor.w3}, {"f.b3", &p.predictor.b3},
      {"g.w1", &p.selector.w1},  {"g.b1", &p.selector.b1},  {"g.w2", &p.selector.w2},
      {"g.b2", &p.selector.b2},  {"g.w3", &p.selector.w3},  {"g.b3", &p.selector.b3},
  };
}

EmbeddingLookup table_lookup(const ParamSet& p) {
  return [&p](int64_t fid) { return constant(p.embedding_row(fid), embedding_key(fid)); };
}

NodePtr selector_scores(const NodePtr& E, const NodePtr& ev, const NodeMap& selector) {
  const int64_t t = E->value().dim(1);
  // Target embedding broadcast across the history; interaction features are
  // the pair, their difference and their elementwise product.
  const NodePtr evb = matmul(ev, constant(Tensor::ones({1, t})));
  const NodePtr z = concat({E, evb, sub(E, evb), mul(E, evb)}, /*axis=*/0);
  return mlp_sigmoid_row(z, selector, "g");
}

NodePtr pool(const NodePtr& E, const NodePtr& s_row, Pooling pooling) {
  if (pooling == Pooling::kWeightedSum) return matmul(E, transpose(s_row));
  return matmul(E, softmax(transpose(s_row)));
}

NodePtr predictor_probs(const NodePtr& x, const NodeMap& predictor) {
  return clamp(mlp_sigmoid_row(x, predictor, "f"), kProbClampLo, kProbClampHi);
}

NodePtr bce_loss(const NodePtr& p_row, const std::vector<double>& labels) {
  const int64_t n = p_row->value().dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw ShapeError("bce_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " probabilities");
  Tensor y({1, n}), ny({1, n});
  for (int64_t i = 0; i < n; ++i) {
    if (labels[static_cast<size_t>(i)] != 0.0 && labels[static_cast<size_t>(i)] != 1.0)
      throw Error("bce_loss: labels must be 0 or 1");
    y[i] = labels[static_cast<size_t>(i)];
    ny[i] = 1.0 - labels[static_cast<size_t>(i)];
  }
  const NodePtr log_p = log(p_row);
  const NodePtr log_np = log(sub(constant_scalar(1.0), p_row));
  const NodePtr ll = add(mul(constant(y), log_p), mul(constant(ny), log_np));
  return scale(mean(ll), -1.0);
}

namespace {

struct InstancePieces {
  NodePtr E;       // {k,T}
  NodePtr ev;      // {k,1}
  NodePtr s_row;   // {1,T} or null for kBase
  NodePtr pooled;  // {k,1}
};

InstancePieces build_instance(const Instance& inst, const EmbeddingLookup& emb,
                              const ParamSet& shapes, const NodeMap& selector,
                              ModelVariant variant, Pooling pooling) {
  if (inst.history_items.empty()) throw Error("instance has an empty history");
  if (inst.history_items.size() != inst.history_cats.size())
    throw Error("instance history items/categories misaligned");
  InstancePieces out;
  std::vector<NodePtr> cols;
  cols.reserve(inst.history_items.size());
  for (size_t h = 0; h < inst.history_items.size(); ++h)
    cols.push_back(add(emb(shapes.item_fid(inst.history_items[h])),
                       emb(shapes.cat_fid(inst.history_cats[h]))));
  out.E = cols.size() == 1 ? cols[0] : concat(cols, /*axis=*/1);
  out.ev = add(emb(shapes.item_fid(inst.target_item)), emb(shapes.cat_fid(inst.target_cat)));
  if (variant == ModelVariant::kSelector) {
    out.s_row = selector_scores(out.E, out.ev, selector);
    out.pooled = pool(out.E, out.s_row, pooling);
  } else {
    const int64_t t = out.E->value().dim(1);
    out.pooled = matmul(out.E, constant(Tensor::ones({t, 1})));
  }
  return out;
}

}  // namespace

NodePtr batch_probs(const std::vector<const Instance*>& batch, const EmbeddingLookup& emb,
                    const ParamSet& shapes, const NodeMap& predictor, const NodeMap& selector,
                    ModelVariant variant, Pooling pooling) {
  if (batch.empty()) throw Error("batch_probs: empty batch");
  std::vector<NodePtr> xs;
  xs.reserve(batch.size());
  for (const Instance* inst : batch) {
    InstancePieces p = build_instance(*inst, emb, shapes, selector, variant, pooling);
    xs.push_back(concat({p.pooled, p.ev}, /*axis=*/0));
  }
  const NodePtr x = xs.size() == 1 ? xs[0] : concat(xs, /*axis=*/1);
  return predictor_probs(x, predictor);
}

NodePtr batch_loss(const std::vector<const Instance*>& batch, const EmbeddingLookup& emb,
                   const ParamSet& shapes, const NodeMap& predictor, const NodeMap& selector,
                   ModelVariant variant, Pooling pooling) {
  std::vector<double> labels;
  labels.reserve(batch.size());
  for (const Instance* inst : batch) labels.push_back(inst->label);
  return bce_loss(batch_probs(batch, emb, shapes, predictor, selector, variant, pooling), labels);
}

Prediction predict(const Instance& inst, const ParamSet& params, ModelVariant variant,
                   Pooling pooling) {
  const EmbeddingLookup emb = table_lookup(params);
  const NodeMap fp = predictor_inputs(params);
  const NodeMap gp = variant == ModelVariant::kSelector ? selector_inputs(params) : NodeMap{};
  InstancePieces pieces = build_instance(inst, emb, params, gp, variant, pooling);
  const NodePtr x = concat({pieces.pooled, pieces.ev}, /*axis=*/0);
  const NodePtr p = predictor_probs(x, fp);
  Prediction out;
  out.p_hat = p->value().value();
  out.r_hat = pieces.pooled->value();
  out.s_u = pieces.s_row ? pieces.s_row->value()
                         : Tensor::ones({1, static_cast<int64_t>(inst.history_items.size())});
  return out;
}

std::vector<double> score_instances(const std::vector<Instance>& instances,
                                    const ParamSet& params, ModelVariant variant, Pooling pooling,
                                    int64_t batch_size) {
  if (batch_size < 1) throw ConfigError("score_instances: batch_size must be positive");
  std::vector<double> scores;
  scores.reserve(instances.size());
  const EmbeddingLookup emb = table_lookup(params);
  const NodeMap fp = predictor_inputs(params);
  const NodeMap gp = variant == ModelVariant::kSelector ? selector_inputs(params) : NodeMap{};
  for (size_t lo = 0; lo < instances.size(); lo += static_cast<size_t>(batch_size)) {
    const size_t hi = std::min(instances.size(), lo + static_cast<size_t>(batch_size));
    std::vector<const Instance*> chunk;
    chunk.reserve(hi - lo);
    for (size_t i = lo; i < hi; ++i) chunk.push_back(&instances[i]);
    const NodePtr p = batch_probs(chunk, emb, params, fp, gp, variant, pooling);
    for (int64_t j = 0; j < p->value().numel(); ++j) scores.push_back(p->value()[j]);
  }
  return scores;
}

double dataset_loss(const std::vector<Instance>& instances, const ParamSet& params,
                    ModelVariant variant, Pooling pooling, int64_t batch_size) {
  if (instances.empty()) throw Error("dataset_loss: empty instance set");
  const std::vector<double> scores = score_instances(instances, params, variant, pooling, batch_size);
  double total = 0.0;
  for (size_t i = 0; i < instances.size(); ++i) {
    const double p = scores[i];
    total -= instances[i].label * std::log(p) + (1.0 - instances[i].label) * std::log(1.0 - p);
  }
  return total / static_cast<double>(instances.size());
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'W', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError("truncated checkpoint: " + path);
  return v;
}

void write_block(std::ofstream& os, const std::string& name, const Tensor& t) {
  write_pod(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod(os, static_cast<uint32_t>(t.rank()));
  for (int64_t i = 0; i < t.rank(); ++i) write_pod(os, t.dim(i));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
}

std::pair<std::string, Tensor> read_block(std::ifstream& is, const std::string& path) {
  const uint32_t name_len = read_pod<uint32_t>(is, path);
  if (name_len > 4096) throw ParseError("corrupt checkpoint (block name too long): " + path);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  if (!is) throw ParseError("truncated checkpoint: " + path);
  const uint32_t rank = read_pod<uint32_t>(is, path);
  if (rank < 1 || rank > 2) throw ParseError("corrupt checkpoint (bad rank): " + path);
  std::vector<int64_t> shape;
  for (uint32_t i = 0; i < rank; ++i) {
    const int64_t d = read_pod<int64_t>(is, path);
    if (d <= 0 || d > (int64_t{1} << 32)) throw ParseError("corrupt checkpoint (bad dim): " + path);
    shape.push_back(d);
  }
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
  if (!is) throw ParseError("truncated checkpoint: " + path);
  return {std::move(name), std::move(t)};
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params, uint64_t seed) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, seed);
  write_pod(os, params.k);
  write_pod(os, params.n_items);
  write_pod(os, params.n_cats);
  const std::vector<std::pair<std::string, const Tensor*>> blocks = {
      {"embedding", &params.embedding},
      {"f.w1", &params.predictor.w1}, {"f.b1", &params.predictor.b1},
      {"f.w2", &params.predictor.w2}, {"f.b2", &params.predictor.b2},
      {"f.w3", &params.predictor.w3}, {"f.b3", &params.predictor.b3},
      {"g.w1", &params.selector.w1},  {"g.b1", &params.selector.b1},
      {"g.w2", &params.selector.w2},  {"g.b2", &params.selector.b2},
      {"g.w3", &params.selector.w3},  {"g.b3", &params.selector.b3},
  };
  write_pod(os, static_cast<uint32_t>(blocks.size()));
  for (const auto& [name, tensor] : blocks) write_block(os, name, *tensor);
  if (!os) throw Error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw ParseError("not a checkpoint file: " + path);
  const uint32_t version = read_pod<uint32_t>(is, path);
  if (version != kVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  Checkpoint out;
  out.seed = read_pod<uint64_t>(is, path);
  out.params.k = read_pod<int64_t>(is, path);
  out.params.n_items = read_pod<int64_t>(is, path);
  out.params.n_cats = read_pod<int64_t>(is, path);
  const uint32_t n_blocks = read_pod<uint32_t>(is, path);
  std::map<std::string, Tensor> blocks;
  for (uint32_t i = 0; i < n_blocks; ++i) {
    auto [name, tensor] = read_block(is, path);
    blocks.emplace(std::move(name), std::move(tensor));
  }
  auto take = [&](const std::string& name) {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw ParseError("checkpoint missing block '" + name + "': " + path);
    return std::move(it->second);
  };
  out.params.embedding = take("embedding");
  out.params.predictor.w1 = take("f.w1");
  out.params.predictor.b1 = take("f.b1");
  out.params.predictor.w2 = take("f.w2");
  out.params.predictor.b2 = take("f.b2");
  out.params.predictor.w3 = take("f.w3");
  out.params.predictor.b3 = take("f.b3");
  out.params.selector.w1 = take("g.w1");
  out.params.selector.b1 = take("g.b1");
  out.params.selector.w2 = take("g.w2");
  out.params.selector.b2 = take("g.b2");
  out.params.selector.w3 = take("g.w3");
  out.params.selector.b3 = take("g.b3");
  if (out.params.embedding.rank() != 2 ||
      out.params.embedding.dim(0) != out.params.n_features() ||
      out.params.embedding.dim(1) != out.params.k)
    throw ParseError("checkpoint embedding shape inconsistent with header: " + path);
  return out;
}

}  // namespace metawrap
