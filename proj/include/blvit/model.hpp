// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  Whole networks built from a declarative layer plan: patch embedding
 *         with a learned positional table, a stack of vanilla / big.LITTLE /
 *         pruned-only layers with sparse prediction layers, final norm,
 *         mean-pool and a linear head. Also the checkpoint format.
 *
 * Parameters live in a name-sorted store. Layer numbers in names and in
 * `predictor_layers` are 1-based; a predictor "at p" reads the output of
 * layer p and its scores are reused by every routed layer until the next one.
 */
#pragma once

#include <blvit/config.hpp>
#include <blvit/nn.hpp>
#include <blvit/random.hpp>
#include <blvit/routing.hpp>
#include <blvit/tensor.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace blvit {

enum class LayerKind { Vanilla, BigLittle, PrunedOnly };

inline char layer_code(LayerKind k) {
  switch (k) {
    case LayerKind::Vanilla: return 'V';
    case LayerKind::BigLittle: return 'B';
    case LayerKind::PrunedOnly: return 'P';
  }
  return '?';
}

inline const char* layer_name(LayerKind k) {
  switch (k) {
    case LayerKind::Vanilla: return "vanilla";
    case LayerKind::BigLittle: return "big-little";
    case LayerKind::PrunedOnly: return "pruned-only";
  }
  return "?";
}

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 1;
  std::size_t num_classes = 10;
  std::size_t dim = 64;       // performance width
  std::size_t e_dim = 16;     // efficiency width
  std::size_t head_dim = 16;  // shared by both paths
  std::vector<LayerKind> layer_plan;
  std::vector<std::size_t> predictor_layers;
  double prune_ratio = routing::kDefaultPruneRatio;
  std::optional<std::size_t> window_size;
  std::uint64_t seed = 0;

  std::size_t depth() const { return layer_plan.size(); }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t heads() const { return dim / head_dim; }
  std::size_t e_heads() const { return e_dim / head_dim; }

  std::size_t count(LayerKind k) const {
    return static_cast<std::size_t>(std::count(layer_plan.begin(), layer_plan.end(), k));
  }
  bool has_predictor_at(std::size_t layer) const {
    return std::find(predictor_layers.begin(), predictor_layers.end(), layer) != predictor_layers.end();
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      fail("patch_size " + std::to_string(patch_size) + " does not divide image_size " + std::to_string(image_size));
    if (channels == 0 || num_classes < 2) fail("need channels >= 1 and num_classes >= 2");
    if (head_dim == 0 || dim == 0 || e_dim == 0) fail("widths must be positive");
    if (dim % head_dim != 0 || e_dim % head_dim != 0)
      fail("head_dim " + std::to_string(head_dim) + " must divide dim and e_dim");
    if (e_dim > dim) fail("e_dim exceeds dim");
    if (layer_plan.empty()) fail("empty layer_plan");
    if (!(prune_ratio >= 0.0 && prune_ratio < 1.0)) fail("prune_ratio must lie in [0, 1)");
    if (window_size && (*window_size == 0 || tokens() % *window_size != 0))
      fail("window_size " + std::to_string(*window_size) + " does not divide " + std::to_string(tokens()) +
           " tokens");
    if (count(LayerKind::PrunedOnly) > 0 && count(LayerKind::BigLittle) == 0)
      fail("pruned-only layers need a plan that also has big-little layers");
    std::set<std::size_t> seen;
    for (std::size_t p : predictor_layers) {
      if (p == 0 || p >= depth())
        fail("predictor layer " + std::to_string(p) + " must lie in [1, " + std::to_string(depth() - 1) + "]");
      if (!seen.insert(p).second) fail("duplicate predictor layer " + std::to_string(p));
    }
    const auto first_routed = std::find_if(layer_plan.begin(), layer_plan.end(),
                                           [](LayerKind k) { return k != LayerKind::Vanilla; });
    if (first_routed != layer_plan.end()) {
      const std::size_t layer = static_cast<std::size_t>(first_routed - layer_plan.begin()) + 1;
      if (seen.empty() || *seen.begin() >= layer)
        fail("first routed layer " + std::to_string(layer) + " has no predictor before it");
    }
  }

  KeyValues to_key_values() const {
    std::string plan;
    for (LayerKind k : layer_plan) plan += layer_code(k);
    return {
        {"channels", config::to_text(std::uint64_t{channels})},
        {"dim", config::to_text(std::uint64_t{dim})},
        {"e_dim", config::to_text(std::uint64_t{e_dim})},
        {"head_dim", config::to_text(std::uint64_t{head_dim})},
        {"image_size", config::to_text(std::uint64_t{image_size})},
        {"layer_plan", plan},
        {"num_classes", config::to_text(std::uint64_t{num_classes})},
        {"patch_size", config::to_text(std::uint64_t{patch_size})},
        {"predictor_layers", config::join(predictor_layers)},
        {"prune_ratio", config::to_text(prune_ratio)},
        {"seed", config::to_text(seed)},
        {"window_size", config::to_text(std::uint64_t{window_size.value_or(0)})},
    };
  }

  /// Sets one key; returns false when the key is not a model key.
  bool apply(const std::string& key, const std::string& value) {
    if (key == "channels") channels = config::parse_uint(key, value);
    else if (key == "dim") dim = config::parse_uint(key, value);
    else if (key == "e_dim") e_dim = config::parse_uint(key, value);
    else if (key == "head_dim") head_dim = config::parse_uint(key, value);
    else if (key == "image_size") image_size = config::parse_uint(key, value);
    else if (key == "num_classes") num_classes = config::parse_uint(key, value);
    else if (key == "patch_size") patch_size = config::parse_uint(key, value);
    else if (key == "predictor_layers") predictor_layers = config::parse_uint_list(key, value);
    else if (key == "prune_ratio") prune_ratio = config::parse_double(key, value);
    else if (key == "seed") seed = config::parse_uint(key, value);
    else if (key == "window_size") {
      const auto w = config::parse_uint(key, value);
      window_size = w ? std::optional<std::size_t>(w) : std::nullopt;
    } else if (key == "layer_plan") {
      layer_plan.clear();
      for (char c : value) {
        if (c == 'V') layer_plan.push_back(LayerKind::Vanilla);
        else if (c == 'B') layer_plan.push_back(LayerKind::BigLittle);
        else if (c == 'P') layer_plan.push_back(LayerKind::PrunedOnly);
        else throw ConfigError("key 'layer_plan': unknown layer code '" + std::string(1, c) + "' (use V, B, P)");
      }
    } else {
      return false;
    }
    return true;
  }

  static ModelConfig from_key_values(const KeyValues& kv) {
    ModelConfig c;
    for (const auto& [key, value] : kv)
      if (!c.apply(key, value)) throw ConfigError("unknown model key '" + key + "'");
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

namespace presets {

/// 32x32 single-channel images, 8x8 patches (16 tokens), C=64, C_e=16.
inline ModelConfig toy_base() { return ModelConfig{}; }

inline ModelConfig vanilla(std::size_t depth = 12) {
  ModelConfig c = toy_base();
  c.layer_plan.assign(depth, LayerKind::Vanilla);
  return c;
}

/// Layer 1 vanilla, layers 2-12 big.LITTLE, predictors after layers 1, 4, 7, 10.
inline ModelConfig base_tiny() {
  ModelConfig c = toy_base();
  c.layer_plan.assign(12, LayerKind::BigLittle);
  c.layer_plan[0] = LayerKind::Vanilla;
  c.predictor_layers = {1, 4, 7, 10};
  return c;
}

/// Depth 16: layers 1-5 vanilla, then big.LITTLE at even layers and pruned-only at odd ones.
inline ModelConfig huge_base() {
  ModelConfig c = toy_base();
  c.layer_plan.assign(16, LayerKind::Vanilla);
  for (std::size_t layer = 6; layer <= 16; ++layer)
    c.layer_plan[layer - 1] = layer % 2 == 0 ? LayerKind::BigLittle : LayerKind::PrunedOnly;
  c.predictor_layers = {4, 8, 12};
  return c;
}

inline ModelConfig by_name(const std::string& name) {
  if (name == "vanilla") return vanilla();
  if (name == "base-tiny") return base_tiny();
  if (name == "huge-base") return huge_base();
  throw ConfigError("unknown preset '" + name + "' (use vanilla, base-tiny, huge-base)");
}

}  // namespace presets

/// Name-sorted parameter tensors. Copies share storage; use deep_copy() to clone.
class ParamStore {
 public:
  void add(const std::string& name, Tensor t) {
    if (!tensors_.emplace(name, std::move(t)).second) throw std::logic_error("duplicate parameter " + name);
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& at(const std::string& name) const {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) { return const_cast<Tensor&>(std::as_const(*this).at(name)); }
  const std::map<std::string, Tensor>& items() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
  }
  ParamStore deep_copy() const {
    ParamStore out;
    for (const auto& [name, t] : tensors_) out.add(name, t.clone(t.requires_grad()));
    return out;
  }
  void zero_grad() {
    for (auto& [_, t] : tensors_) t.zero_grad();
  }
  void set_requires_grad(bool on) {
    for (auto& [_, t] : tensors_) t.set_requires_grad(on);
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

struct Model {
  ModelConfig config;
  ParamStore params;
};

namespace detail {

inline std::string layer_prefix(std::size_t layer) { return "layers." + std::to_string(layer) + "."; }

class Initializer {
 public:
  explicit Initializer(ParamStore& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  void weight(const std::string& name, Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.values()) v = rng_.truncated_normal(0.02);
    store_.add(name, t);
  }
  void constant(const std::string& name, Shape shape, double value) {
    store_.add(name, Tensor::full(std::move(shape), value, true));
  }
  void linear(const std::string& name, std::size_t in, std::size_t out) {
    weight(name + ".weight", {in, out});
    constant(name + ".bias", {out}, 0.0);
  }
  void norm(const std::string& name, std::size_t width) {
    constant(name + ".gain", {width}, 1.0);
    constant(name + ".bias", {width}, 0.0);
  }
  /// Performance blocks pass inner == width and no maps; efficiency blocks are mapped.
  void block(const std::string& prefix, std::size_t width, std::size_t inner, bool mapped) {
    norm(prefix + "norm1", width);
    for (const char* proj : {"q", "k", "v"}) linear(prefix + "attn." + proj, width, inner);
    linear(prefix + "attn.o", inner, width);
    norm(prefix + "norm2", width);
    if (mapped) linear(prefix + "ffn.in_map", width, inner);
    linear(prefix + "ffn.fc1", inner, 4 * inner);
    linear(prefix + "ffn.fc2", 4 * inner, inner);
    if (mapped) linear(prefix + "ffn.out_map", inner, width);
  }

 private:
  ParamStore& store_;
  Rng rng_;
};

inline nn::Linear linear_view(const ParamStore& s, const std::string& name) {
  return {s.at(name + ".weight"), s.at(name + ".bias")};
}

inline nn::LayerNormParams norm_view(const ParamStore& s, const std::string& name) {
  return {s.at(name + ".gain"), s.at(name + ".bias")};
}

inline nn::BlockParams block_view(const ParamStore& s, const std::string& prefix, std::size_t heads) {
  nn::BlockParams b;
  b.norm1 = norm_view(s, prefix + "norm1");
  b.attn.q = linear_view(s, prefix + "attn.q");
  b.attn.k = linear_view(s, prefix + "attn.k");
  b.attn.v = linear_view(s, prefix + "attn.v");
  b.attn.o = linear_view(s, prefix + "attn.o");
  b.attn.heads = heads;
  b.norm2 = norm_view(s, prefix + "norm2");
  if (s.contains(prefix + "ffn.in_map.weight")) {
    b.ffn.in_map = linear_view(s, prefix + "ffn.in_map");
    b.ffn.out_map = linear_view(s, prefix + "ffn.out_map");
  }
  b.ffn.fc1 = linear_view(s, prefix + "ffn.fc1");
  b.ffn.fc2 = linear_view(s, prefix + "ffn.fc2");
  return b;
}

inline routing::RoutingParams routing_view(const ParamStore& s, const ModelConfig& c, std::size_t layer) {
  const std::string p = layer_prefix(layer);
  return {s.at(p + "alpha_attn"), s.at(p + "alpha_ffn"), s.at(p + "gamma_attn"), s.at(p + "gamma_ffn"),
          c.prune_ratio,          c.window_size};
}

}  // namespace detail

/// Fresh model: truncated-normal(0.02) weights, zero biases, unit norm gains, alpha 0, gamma 1e-5.
inline Model build(const ModelConfig& config) {
  config.validate();
  Model m{config, {}};
  detail::Initializer init(m.params, config.seed);
  const std::size_t c = config.dim;
  init.linear("embed", config.patch_dim(), c);
  init.weight("pos_embed", {config.tokens(), c});
  for (std::size_t layer = 1; layer <= config.depth(); ++layer) {
    const std::string prefix = detail::layer_prefix(layer);
    const LayerKind kind = config.layer_plan[layer - 1];
    init.block(prefix + "p.", c, c, false);
    if (kind == LayerKind::BigLittle) init.block(prefix + "e.", c, config.e_dim, true);
    if (kind != LayerKind::Vanilla) {
      init.constant(prefix + "alpha_attn", {}, routing::kAlphaInit);
      init.constant(prefix + "alpha_ffn", {}, routing::kAlphaInit);
      init.constant(prefix + "gamma_attn", {}, routing::kGammaInit);
      init.constant(prefix + "gamma_ffn", {}, routing::kGammaInit);
    }
    if (config.has_predictor_at(layer)) init.weight("predictors." + std::to_string(layer) + ".weight", {c, 1});
  }
  init.norm("norm", c);
  init.linear("head", c, config.num_classes);
  return m;
}

/// [B,H,W,ch] images -> [B,N,patch*patch*ch] raster-ordered patches, (row, col, channel) inside a patch.
inline Tensor patchify(const Tensor& images, const ModelConfig& c) {
  if (images.rank() != 4 || images.dim(1) != c.image_size || images.dim(2) != c.image_size ||
      images.dim(3) != c.channels)
    throw ShapeError("patchify: expected [B," + std::to_string(c.image_size) + "," + std::to_string(c.image_size) +
                     "," + std::to_string(c.channels) + "] images, got " + to_string(images.shape()));
  const std::size_t b = images.dim(0), g = c.grid(), ps = c.patch_size, ch = c.channels, side = c.image_size;
  std::vector<double> out(b * c.tokens() * c.patch_dim());
  const auto& in = images.values();
  std::size_t o = 0;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx)
        for (std::size_t y = 0; y < ps; ++y)
          for (std::size_t x = 0; x < ps; ++x)
            for (std::size_t k = 0; k < ch; ++k)
              out[o++] = in[((n * side + gy * ps + y) * side + gx * ps + x) * ch + k];
  return Tensor(Shape{b, c.tokens(), c.patch_dim()}, std::move(out));
}

/// One routed module's record in a traced forward.
struct LayerTrace {
  std::size_t layer = 0;
  LayerKind kind = LayerKind::BigLittle;
  std::size_t predictor_layer = 0;  // which prediction produced the scores
  Tensor scores;                    // detached [B,N]
  routing::SelectionMask mask;
  double attention_stage_norm = 0.0;
  double ffn_stage_norm = 0.0;
};

struct ForwardOptions {
  bool trace = false;
  bool count_flops = false;
};

struct ForwardResult {
  Tensor logits;    // [B, classes]
  Tensor features;  // [B,N,C], after the final norm, before pooling
  std::vector<std::pair<std::size_t, Tensor>> predictions;  // (layer, scores [B,N]) per predictor
  std::vector<LayerTrace> trace;
  std::vector<std::pair<std::string, std::uint64_t>> flops;  // per stage, when counted
};

inline ForwardResult forward(const Model& m, const Tensor& images, const ForwardOptions& opt = {}) {
  const ModelConfig& c = m.config;
  const ParamStore& s = m.params;
  ForwardResult r;
  std::optional<flops::Scope> scope;
  auto begin = [&] {
    if (opt.count_flops) scope.emplace();
  };
  auto end = [&](std::string name) {
    if (opt.count_flops) r.flops.emplace_back(std::move(name), scope->count());
  };

  begin();
  Tensor x = add_trailing(detail::linear_view(s, "embed")(patchify(images, c)), s.at("pos_embed"));
  end("embed");

  Tensor scores;
  std::size_t scores_from = 0;
  for (std::size_t layer = 1; layer <= c.depth(); ++layer) {
    const std::string prefix = detail::layer_prefix(layer);
    const LayerKind kind = c.layer_plan[layer - 1];
    const nn::BlockParams perf = detail::block_view(s, prefix + "p.", c.heads());
    begin();
    if (kind == LayerKind::Vanilla) {
      x = nn::vanilla_block(x, perf);
    } else {
      routing::ModuleTrace mt;
      routing::ModuleTrace* mtp = opt.trace ? &mt : nullptr;
      const auto rp = detail::routing_view(s, c, layer);
      if (kind == LayerKind::BigLittle)
        x = routing::forward_big_little(x, scores, rp, perf, detail::block_view(s, prefix + "e.", c.e_heads()), mtp);
      else
        x = routing::forward_pruned_only(x, scores, rp, perf, mtp);
      if (opt.trace)
        r.trace.push_back({layer, kind, scores_from, scores.detach(), std::move(mt.mask), mt.attention_stage_norm,
                           mt.ffn_stage_norm});
    }
    end("layer." + std::to_string(layer));
    if (c.has_predictor_at(layer)) {
      begin();
      scores = routing::predict_scores(x, s.at("predictors." + std::to_string(layer) + ".weight"));
      scores_from = layer;
      r.predictions.emplace_back(layer, scores);
      end("predictor." + std::to_string(layer));
    }
  }

  begin();
  r.features = layernorm(x, s.at("norm.gain"), s.at("norm.bias"));
  r.logits = detail::linear_view(s, "head")(mean(r.features, 1));
  end("head");
  return r;
}

/**
 * Copies parameters from `src` into `dst` for every (src_prefix, dst_prefix)
 * pair: each src key starting with src_prefix lands on dst_prefix + rest.
 * Every mapped key must exist in dst with the same shape. Returns the count.
 */
inline std::size_t transfer_parameters(Model& dst, const Model& src,
                                       const std::vector<std::pair<std::string, std::string>>& prefix_map) {
  std::size_t copied = 0;
  for (const auto& [from, to] : prefix_map) {
    for (const auto& [name, t] : src.params.items()) {
      if (!name.starts_with(from)) continue;
      const std::string target = to + name.substr(from.size());
      if (!dst.params.contains(target))
        throw ConfigError("transfer: source key '" + name + "' maps to missing key '" + target + "'");
      Tensor& d = dst.params.at(target);
      if (d.shape() != t.shape())
        throw ShapeError("transfer: '" + name + "' " + to_string(t.shape()) + " vs '" + target + "' " +
                         to_string(d.shape()));
      d.values() = t.values();
      ++copied;
    }
  }
  return copied;
}

/// Prefix map that loads a vanilla teacher into the embedding, head and every performance block.
inline std::vector<std::pair<std::string, std::string>> performance_prefix_map(const ModelConfig& student) {
  std::vector<std::pair<std::string, std::string>> map{
      {"embed.", "embed."}, {"pos_embed", "pos_embed"}, {"norm.", "norm."}, {"head.", "head."}};
  for (std::size_t layer = 1; layer <= student.depth(); ++layer)
    map.emplace_back(detail::layer_prefix(layer) + "p.", detail::layer_prefix(layer) + "p.");
  return map;
}

// ---------------------------------------------------------------------------
// Checkpoints: "BLVT", u32 version, u32-length config text, u32 record count,
// then per record (u32-length name, u32 rank, u64 dims, f64 data), all
// little-endian, records sorted by name.

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  template <class T>
  void le(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes(raw, sizeof(T));
  }
  void text(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& str() const { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n)
      throw CheckpointError(origin_ + ": corrupt checkpoint, truncated while reading " + what + " at byte " +
                            std::to_string(pos_));
  }
  template <class T>
  T le(const char* what) {
    need(sizeof(T), what);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string text(const char* what) {
    const auto n = le<std::uint32_t>(what);
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }
  std::size_t pos() const { return pos_; }
  const std::string& origin() const { return origin_; }

 private:
  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Model& m) {
  detail::ByteWriter w;
  w.bytes("BLVT", 4);
  w.le(kCheckpointVersion);
  w.text(config::format(m.config.to_key_values()));
  w.le(static_cast<std::uint32_t>(m.params.size()));
  for (const auto& [name, t] : m.params.items()) {
    w.text(name);
    w.le(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.le(static_cast<std::uint64_t>(d));
    for (double v : t.values()) w.le(v);
  }
  return w.str();
}

inline Model deserialize(std::string data, const std::string& origin = "<memory>") {
  detail::ByteReader r(std::move(data), origin);
  r.need(4, "magic");
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.le<std::uint8_t>("magic"));
  if (std::string(magic, 4) != "BLVT") throw CheckpointError(origin + ": not a checkpoint (bad magic)");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(origin + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_key_values(config::parse(r.text("config"), origin));
  } catch (const ConfigError& e) {
    throw CheckpointError(origin + ": bad embedded config: " + e.what());
  }
  Model m = build(cfg);
  const auto count = r.le<std::uint32_t>("record count");
  std::set<std::string> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.text("record name");
    if (!m.params.contains(name)) throw CheckpointError(origin + ": unexpected parameter '" + name + "'");
    if (!loaded.insert(name).second) throw CheckpointError(origin + ": duplicate parameter '" + name + "'");
    Tensor& t = m.params.at(name);
    const auto rank = r.le<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.le<std::uint64_t>("dims")));
    if (shape != t.shape())
      throw CheckpointError(origin + ": parameter '" + name + "' has shape " + to_string(shape) + ", expected " +
                            to_string(t.shape()));
    r.need(t.numel() * sizeof(double), "tensor data");
    for (double& v : t.values()) v = r.le<double>("tensor data");
  }
  if (loaded.size() != m.params.size()) {
    for (const auto& [name, _] : m.params.items())
      if (!loaded.count(name)) throw CheckpointError(origin + ": missing parameter '" + name + "'");
  }
  if (!r.done())
    throw CheckpointError(origin + ": corrupt checkpoint, trailing bytes at " + std::to_string(r.pos()));
  return m;
}

inline void save(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize(m);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

inline Model load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(std::move(data), path);
}

}  // namespace blvit
