#pragma once

// Transformer building blocks: linear layers, patch embedding, and the
// multi-head linear self-attention block (feature map elu(u) + 1).

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "owt/errors.hpp"
#include "owt/ops.hpp"
#include "owt/params.hpp"
#include "owt/random.hpp"
#include "owt/tensor.hpp"

namespace owt {

inline constexpr double kInitStd = 0.02;
inline constexpr double kAttentionDenominatorFloor = 1e-6;
inline constexpr std::size_t kMlpRatio = 4;

template <typename T>
struct BasicLinear {
  BasicTensor<T> weight;  // [in x out]
  BasicTensor<T> bias;    // [out]

  static BasicLinear init(std::size_t in, std::size_t out, Rng& rng, double std = kInitStd) {
    return {BasicTensor<T>::from_data({in, out}, truncated_normal<T>(in * out, std, rng), true),
            BasicTensor<T>::zeros({out}, true)};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return affine(x, weight, bias); }

  void collect(BasicParameterSet<T>& set, const std::string& prefix) const {
    set.add(prefix + ".weight", weight, true);
    set.add(prefix + ".bias", bias, false);
  }
};

template <typename T>
struct BasicLayerNorm {
  BasicTensor<T> gain;
  BasicTensor<T> bias;

  static BasicLayerNorm init(std::size_t width) {
    return {BasicTensor<T>::full({width}, T{1}, true), BasicTensor<T>::zeros({width}, true)};
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layernorm(x, gain, bias); }

  void collect(BasicParameterSet<T>& set, const std::string& prefix) const {
    set.add(prefix + ".gain", gain, false);
    set.add(prefix + ".bias", bias, false);
  }
};

// Image geometry and its token grid. depth is fixed to one slice.
struct PatchGrid {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t patch = 4;
  std::size_t channels = 1;

  void validate() const {
    if (patch == 0 || height == 0 || width == 0 || channels == 0) {
      throw DimensionError("patch grid extents must be positive");
    }
    if (height % patch != 0 || width % patch != 0) {
      throw DimensionError("patch size " + std::to_string(patch) + " does not divide image " +
                           std::to_string(height) + "x" + std::to_string(width));
    }
  }

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  Shape image_shape() const { return {height, width, channels}; }

  // Flat pixel index of element e of patch k; patch elements are ordered (row, col, channel).
  std::size_t pixel_of(std::size_t k, std::size_t e) const {
    const std::size_t ty = k / grid_w(), tx = k % grid_w();
    const std::size_t c = e % channels;
    const std::size_t q = (e / channels) % patch;
    const std::size_t p = e / (channels * patch);
    return ((ty * patch + p) * width + (tx * patch + q)) * channels + c;
  }

  std::shared_ptr<const std::vector<std::size_t>> patchify_index() const {
    auto idx = std::make_shared<std::vector<std::size_t>>(tokens() * patch_dim());
    for (std::size_t k = 0; k < tokens(); ++k)
      for (std::size_t e = 0; e < patch_dim(); ++e) (*idx)[k * patch_dim() + e] = pixel_of(k, e);
    return idx;
  }

  std::shared_ptr<const std::vector<std::size_t>> unpatchify_index() const {
    auto idx = std::make_shared<std::vector<std::size_t>>(tokens() * patch_dim());
    for (std::size_t k = 0; k < tokens(); ++k)
      for (std::size_t e = 0; e < patch_dim(); ++e) (*idx)[pixel_of(k, e)] = k * patch_dim() + e;
    return idx;
  }
};

// Projects each patch (row-major over the grid) to a token and adds the
// positional table. No class token.
template <typename T>
BasicTensor<T> patch_embed(const BasicTensor<T>& image, const PatchGrid& grid, const BasicLinear<T>& proj,
                           const BasicTensor<T>& pos) {
  grid.validate();
  if (image.shape() != grid.image_shape()) {
    throw DimensionError("patch_embed: image " + shape_string(image.shape()) + " does not match grid " +
                         shape_string(grid.image_shape()));
  }
  if (proj.in_features() != grid.patch_dim()) {
    throw DimensionError("patch_embed: projection expects " + std::to_string(proj.in_features()) +
                         " inputs, patches have " + std::to_string(grid.patch_dim()));
  }
  const auto patches = gather(image, grid.patchify_index(), {grid.tokens(), grid.patch_dim()});
  return add(proj(patches), pos);
}

template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, const PatchGrid& grid, const BasicLinear<T>& proj) {
  grid.validate();
  if (tokens.rank() != 2 || tokens.dim(0) != grid.tokens()) {
    throw DimensionError("unpatchify: expected " + std::to_string(grid.tokens()) + " tokens, got " +
                         shape_string(tokens.shape()));
  }
  if (proj.out_features() != grid.patch_dim()) {
    throw DimensionError("unpatchify: projection emits " + std::to_string(proj.out_features()) +
                         " values, patches need " + std::to_string(grid.patch_dim()));
  }
  const auto patches = proj(tokens);
  return gather(patches, grid.unpatchify_index(), grid.image_shape());
}

// Single-head linear attention over already-projected q, k, v [t x d]:
//   out_i = phi(q_i)^T (sum_j phi(k_j) v_j^T) / (phi(q_i)^T sum_j phi(k_j))
template <typename T>
BasicTensor<T> linear_attention_head(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v) {
  if (q.rank() != 2 || q.dim(0) == 0) throw ContractError("linear attention needs at least one token");
  const auto fq = elu_plus_one(q);
  const auto fk = elu_plus_one(k);
  const auto kv = matmul(transpose(fk), v);
  const auto z = col_sum(fk);
  const auto den = clamp_min(matmul(fq, transpose(z)), kAttentionDenominatorFloor);
  return div_rows(matmul(fq, kv), den);
}

template <typename T>
struct BasicAttentionBlock {
  std::size_t heads = 1;
  BasicLayerNorm<T> norm1;
  BasicLinear<T> qkv;
  BasicLinear<T> proj;
  BasicLayerNorm<T> norm2;
  BasicLinear<T> fc1;
  BasicLinear<T> fc2;

  static BasicAttentionBlock init(std::size_t dim, std::size_t heads, Rng& rng) {
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError("embedding width " + std::to_string(dim) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    BasicAttentionBlock b;
    b.heads = heads;
    b.norm1 = BasicLayerNorm<T>::init(dim);
    b.qkv = BasicLinear<T>::init(dim, 3 * dim, rng);
    b.proj = BasicLinear<T>::init(dim, dim, rng);
    b.norm2 = BasicLayerNorm<T>::init(dim);
    b.fc1 = BasicLinear<T>::init(dim, kMlpRatio * dim, rng);
    b.fc2 = BasicLinear<T>::init(kMlpRatio * dim, dim, rng);
    return b;
  }

  std::size_t dim() const { return proj.out_features(); }

  void collect(BasicParameterSet<T>& set, const std::string& prefix) const {
    norm1.collect(set, prefix + ".norm1");
    qkv.collect(set, prefix + ".qkv");
    proj.collect(set, prefix + ".proj");
    norm2.collect(set, prefix + ".norm2");
    fc1.collect(set, prefix + ".fc1");
    fc2.collect(set, prefix + ".fc2");
  }
};

// Multi-head linear self-attention (no residual, no norm).
template <typename T>
BasicTensor<T> multi_head_linear_attention(const BasicTensor<T>& x, const BasicAttentionBlock<T>& blk) {
  const std::size_t c = blk.dim();
  const std::size_t dh = c / blk.heads;
  const auto qkv = blk.qkv(x);
  std::vector<BasicTensor<T>> outs;
  outs.reserve(blk.heads);
  for (std::size_t h = 0; h < blk.heads; ++h) {
    outs.push_back(linear_attention_head(slice_cols(qkv, h * dh, dh), slice_cols(qkv, c + h * dh, dh),
                                         slice_cols(qkv, 2 * c + h * dh, dh)));
  }
  return blk.proj(blk.heads == 1 ? outs[0] : concat_cols(outs));
}

// Pre-norm residual block: x + Attn(LN(x)), then + MLP(LN(.)).
template <typename T>
BasicTensor<T> linear_attention_block(const BasicTensor<T>& x, const BasicAttentionBlock<T>& blk) {
  if (x.rank() != 2 || x.dim(1) != blk.dim()) {
    throw DimensionError("attention block of width " + std::to_string(blk.dim()) + " got " +
                         shape_string(x.shape()));
  }
  const auto h = add(x, multi_head_linear_attention(blk.norm1(x), blk));
  return add(h, blk.fc2(gelu(blk.fc1(blk.norm2(h)))));
}

template <typename T>
struct BasicBlockStack {
  std::vector<BasicAttentionBlock<T>> blocks;
  BasicLayerNorm<T> final_norm;

  static BasicBlockStack init(std::size_t depth, std::size_t dim, std::size_t heads, Rng& rng) {
    if (depth == 0) throw ConfigError("a block stack needs at least one block");
    BasicBlockStack s;
    for (std::size_t i = 0; i < depth; ++i) s.blocks.push_back(BasicAttentionBlock<T>::init(dim, heads, rng));
    s.final_norm = BasicLayerNorm<T>::init(dim);
    return s;
  }

  void collect(BasicParameterSet<T>& set, const std::string& prefix) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(set, prefix + ".blocks." + std::to_string(i));
    final_norm.collect(set, prefix + ".norm");
  }
};

template <typename T>
BasicTensor<T> encoder_stack(const BasicTensor<T>& x, const BasicBlockStack<T>& stack) {
  if (stack.blocks.empty()) throw ContractError("encoder_stack on an empty block list");
  if (x.rank() != 2 || x.dim(0) == 0) throw ContractError("encoder_stack needs at least one token");
  BasicTensor<T> h = x;
  for (const auto& blk : stack.blocks) h = linear_attention_block(h, blk);
  return stack.final_norm(h);
}

using Linear = BasicLinear<float>;
using AttentionBlock = BasicAttentionBlock<float>;
using BlockStack = BasicBlockStack<float>;

}  // namespace owt
