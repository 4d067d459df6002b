#pragma once

// Organ-wise tokenization pipeline:
//   image -> encoder -> organ collector -> (retained groups) -> token group
//   encoder -> holistic embedding restorer -> decoder -> image
// plus a holistic path that decodes the encoder output directly.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "owt/errors.hpp"
#include "owt/image.hpp"
#include "owt/layers.hpp"
#include "owt/ops.hpp"
#include "owt/params.hpp"
#include "owt/random.hpp"
#include "owt/tensor.hpp"

namespace owt {

struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  std::size_t patch = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t enc_blocks = 2;
  std::size_t tge_blocks = 2;
  std::size_t dec_blocks = 2;
  std::size_t groups = 3;  // organ groups g; the background adds one more token group
  std::size_t tokens_per_group = 4;
  std::vector<std::size_t> group_token_counts;  // adaptive allocation, g+1 entries when set
  std::uint64_t seed = 0;
  // Init std of the collector alpha and restorer phi weights (the attention logits).
  double routing_init_std = kInitStd;

  PatchGrid grid() const { return {height, width, patch, channels}; }
  std::size_t token_groups() const { return groups + 1; }

  std::vector<std::size_t> token_counts() const {
    if (!group_token_counts.empty()) return group_token_counts;
    return std::vector<std::size_t>(token_groups(), tokens_per_group);
  }

  void validate() const {
    grid().validate();
    if (groups == 0) throw ConfigError("model needs at least one organ group");
    if (dim < 2) throw ConfigError("embedding width must be at least 2");
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
    }
    if (!(routing_init_std > 0)) throw ConfigError("routing_init_std must be positive");
    if (enc_blocks == 0 || tge_blocks == 0 || dec_blocks == 0) {
      throw ConfigError("encoder, token group encoder and decoder each need at least one block");
    }
    if (!group_token_counts.empty()) {
      if (group_token_counts.size() != token_groups()) {
        throw ConfigError("group_token_counts needs " + std::to_string(token_groups()) + " entries");
      }
      for (auto c : group_token_counts) {
        if (c == 0) throw ConfigError("every token group needs at least one token");
      }
    } else if (tokens_per_group == 0) {
      throw ConfigError("tokens_per_group must be positive");
    }
  }
};

// Token spans of each group inside X_G; group k occupies [offset[k], offset[k] + count[k]).
struct GroupLayout {
  std::vector<std::size_t> counts;
  std::vector<std::size_t> offsets;

  explicit GroupLayout(std::vector<std::size_t> per_group = {}) : counts(std::move(per_group)) {
    offsets.resize(counts.size());
    std::size_t at = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      offsets[k] = at;
      at += counts[k];
    }
  }

  std::size_t groups() const { return counts.size(); }
  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

  std::size_t group_of(std::size_t token) const {
    for (std::size_t k = 0; k < counts.size(); ++k) {
      if (token < offsets[k] + counts[k]) return k;
    }
    throw DimensionError("token " + std::to_string(token) + " outside group layout");
  }
};

// Token groups kept for one forward pass, in the order they are concatenated.
struct RetainedSelection {
  std::vector<std::size_t> groups;

  std::size_t size() const { return groups.size(); }

  static RetainedSelection all(std::size_t token_groups) {
    RetainedSelection s;
    s.groups.resize(token_groups);
    std::iota(s.groups.begin(), s.groups.end(), std::size_t{0});
    return s;
  }
  static RetainedSelection only(std::size_t group) { return {{group}}; }

  std::size_t retained_tokens(const GroupLayout& layout) const {
    std::size_t n = 0;
    for (auto g : groups) n += layout.counts.at(g);
    return n;
  }
};

template <typename T>
struct BasicHolisticEmbedding {
  BasicTensor<T> tokens;  // [(h*w) x c_e]
  PatchGrid grid;
};

template <typename T>
struct BasicTokenGroupSet {
  BasicTensor<T> tokens;  // [N_g x c_e]
  GroupLayout layout;

  // Rows of group k.
  BasicTensor<T> group(std::size_t k) const {
    std::vector<std::size_t> rows(layout.counts.at(k));
    std::iota(rows.begin(), rows.end(), layout.offsets[k]);
    return gather_rows(tokens, std::move(rows));
  }
};

template <typename T>
struct BasicCollectorOutput {
  BasicTokenGroupSet<T> groups;
  BasicTensor<T> attention;  // A_t [N_g x (h*w)]
};

template <typename T>
struct BasicRestorerOutput {
  BasicHolisticEmbedding<T> embedding;
  BasicTensor<T> attention;  // A'_t [(h*w) x retained tokens]
};

template <typename T>
struct BasicOwtOutput {
  BasicTensor<T> image;  // [H x W x C]
  BasicTokenGroupSet<T> groups;
  BasicTensor<T> attention;
};

template <typename T>
struct BasicOwtModel {
  ModelConfig config;
  PatchGrid grid;
  GroupLayout layout;

  BasicLinear<T> patch_proj;
  BasicTensor<T> pos;  // learned positional table [(h*w) x c_e]
  BasicBlockStack<T> encoder;
  BasicLinear<T> collector_alpha;  // c_e -> N_g, per holistic token
  BasicLinear<T> collector_gamma;  // c_e -> c_e
  BasicBlockStack<T> group_encoder;
  BasicLinear<T> restorer_phi;  // c_e -> h*w, per retained token
  BasicLinear<T> restorer_psi;  // c_e -> c_e
  BasicBlockStack<T> decoder;
  BasicLinear<T> out_proj;  // c_e -> p*p*C

  static BasicOwtModel init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    BasicOwtModel m;
    m.config = cfg;
    m.grid = cfg.grid();
    m.layout = GroupLayout(cfg.token_counts());
    const std::size_t c = cfg.dim;
    const std::size_t t = m.grid.tokens();
    m.patch_proj = BasicLinear<T>::init(m.grid.patch_dim(), c, rng);
    m.pos = BasicTensor<T>::from_data({t, c}, truncated_normal<T>(t * c, kInitStd, rng), true);
    m.encoder = BasicBlockStack<T>::init(cfg.enc_blocks, c, cfg.heads, rng);
    m.collector_alpha = BasicLinear<T>::init(c, m.layout.total(), rng, cfg.routing_init_std);
    m.collector_gamma = BasicLinear<T>::init(c, c, rng);
    m.group_encoder = BasicBlockStack<T>::init(cfg.tge_blocks, c, cfg.heads, rng);
    m.restorer_phi = BasicLinear<T>::init(c, t, rng, cfg.routing_init_std);
    m.restorer_psi = BasicLinear<T>::init(c, c, rng);
    m.decoder = BasicBlockStack<T>::init(cfg.dec_blocks, c, cfg.heads, rng);
    m.out_proj = BasicLinear<T>::init(c, m.grid.patch_dim(), rng);
    return m;
  }

  // Parameter handles alias the model's tensors.
  BasicParameterSet<T> parameters() const {
    BasicParameterSet<T> set;
    patch_proj.collect(set, "patch_embed");
    set.add("pos_embed", pos, false);
    encoder.collect(set, "encoder");
    collector_alpha.collect(set, "collector.alpha");
    collector_gamma.collect(set, "collector.gamma");
    group_encoder.collect(set, "group_encoder");
    restorer_phi.collect(set, "restorer.phi");
    restorer_psi.collect(set, "restorer.psi");
    decoder.collect(set, "decoder");
    out_proj.collect(set, "decoder_pred");
    return set;
  }

  // Subset shared with the holistic path (used by two-stage training).
  BasicParameterSet<T> holistic_parameters() const {
    BasicParameterSet<T> set;
    patch_proj.collect(set, "patch_embed");
    set.add("pos_embed", pos, false);
    encoder.collect(set, "encoder");
    decoder.collect(set, "decoder");
    out_proj.collect(set, "decoder_pred");
    return set;
  }
};

template <typename T>
BasicHolisticEmbedding<T> encode(const BasicTensor<T>& image, const BasicOwtModel<T>& model) {
  if (image.shape() != model.grid.image_shape()) {
    throw DimensionError("encode: image " + shape_string(image.shape()) + " does not match model grid " +
                         shape_string(model.grid.image_shape()));
  }
  const auto tokens = patch_embed(image, model.grid, model.patch_proj, model.pos);
  return {encoder_stack(tokens, model.encoder), model.grid};
}

// A_t = softmax over the spatial axis of alpha(X_H)^T; X_G = A_t gamma(X_H).
template <typename T>
BasicCollectorOutput<T> organ_collect(const BasicHolisticEmbedding<T>& xh, const BasicOwtModel<T>& model) {
  const auto attention = softmax_rows(transpose(model.collector_alpha(xh.tokens)));
  const auto xg = matmul(attention, model.collector_gamma(xh.tokens));
  return {{xg, model.layout}, attention};
}

// Concatenates the selected groups' token spans in selection order.
template <typename T>
BasicTensor<T> gather_retained(const BasicTokenGroupSet<T>& xg, const RetainedSelection& sel) {
  if (sel.groups.empty()) throw ContractError("gather_retained: empty selection");
  std::vector<bool> used(xg.layout.groups(), false);
  std::vector<std::size_t> rows;
  for (std::size_t g : sel.groups) {
    if (g >= xg.layout.groups()) {
      throw ContractError("gather_retained: group " + std::to_string(g) + " out of range (" +
                          std::to_string(xg.layout.groups()) + " groups)");
    }
    if (used[g]) throw ContractError("gather_retained: group " + std::to_string(g) + " selected twice");
    used[g] = true;
    for (std::size_t i = 0; i < xg.layout.counts[g]; ++i) rows.push_back(xg.layout.offsets[g] + i);
  }
  return gather_rows(xg.tokens, std::move(rows));
}

template <typename T>
BasicTensor<T> token_group_encode(const BasicTensor<T>& retained, const BasicOwtModel<T>& model) {
  if (!retained.defined() || retained.rank() != 2 || retained.dim(0) == 0) {
    throw ContractError("token_group_encode: no retained tokens");
  }
  return encoder_stack(retained, model.group_encoder);
}

// A'_t = softmax over retained tokens of phi(X'_G)^T; X'_H = A'_t psi(X'_G).
template <typename T>
BasicRestorerOutput<T> aher_restore(const BasicTensor<T>& encoded, const BasicOwtModel<T>& model) {
  if (!encoded.defined() || encoded.rank() != 2 || encoded.dim(0) == 0) {
    throw ContractError("aher_restore: no retained tokens");
  }
  const auto attention = softmax_rows(transpose(model.restorer_phi(encoded)));
  return {{matmul(attention, model.restorer_psi(encoded)), model.grid}, attention};
}

// Adds the positional table, runs the decoder stack and unpatchifies.
template <typename T>
BasicTensor<T> decode(const BasicHolisticEmbedding<T>& xh, const BasicOwtModel<T>& model) {
  if (xh.tokens.shape() != model.pos.shape()) {
    throw DimensionError("decode: embedding " + shape_string(xh.tokens.shape()) + " does not match " +
                         shape_string(model.pos.shape()));
  }
  const auto h = encoder_stack(add(xh.tokens, model.pos), model.decoder);
  return unpatchify(h, model.grid, model.out_proj);
}

template <typename T>
BasicOwtOutput<T> forward_owt(const BasicTensor<T>& image, const RetainedSelection& sel,
                              const BasicOwtModel<T>& model) {
  const auto xh = encode(image, model);
  auto collected = organ_collect(xh, model);
  const auto retained = gather_retained(collected.groups, sel);
  const auto restored = aher_restore(token_group_encode(retained, model), model);
  return {decode(restored.embedding, model), std::move(collected.groups), std::move(collected.attention)};
}

template <typename T>
BasicTensor<T> forward_holistic(const BasicTensor<T>& image, const BasicOwtModel<T>& model) {
  return decode(encode(image, model), model);
}

using OwtModel = BasicOwtModel<float>;
using HolisticEmbedding = BasicHolisticEmbedding<float>;
using TokenGroupSet = BasicTokenGroupSet<float>;
using OwtOutput = BasicOwtOutput<float>;

// Same architecture in another scalar type, with identical parameter values.
template <typename To, typename From>
BasicOwtModel<To> cast_model(const BasicOwtModel<From>& src) {
  auto dst = BasicOwtModel<To>::init(src.config);
  auto dst_params = dst.parameters();
  copy_parameters(src.parameters(), dst_params);
  return dst;
}

}  // namespace owt
