#pragma once

// Closed-form compute accounting per pipeline stage.

#include <cstddef>
#include <string>

#include "owt/errors.hpp"
#include "owt/model.hpp"

namespace owt {

// How a stage's cost is counted.
//   mac_factor: 1 counts multiply-accumulates, 2 counts multiplies and adds.
//   attention_products: include activation x activation products (linear
//     attention k^T v, q (k^T v), normalizers; collector/restorer A x V).
//   embeddings: include the patch projection in Enc and the prediction head in Dec.
struct FlopConvention {
  double mac_factor = 1.0;
  bool attention_products = false;
  bool embeddings = false;
};

struct FlopsShape {
  std::size_t tokens = 196;       // h*w holistic tokens
  std::size_t dim = 768;          // c_e
  std::size_t heads = 12;
  std::size_t patch_dim = 768;    // p*p*C
  std::size_t enc_blocks = 6;
  std::size_t tge_blocks = 6;
  std::size_t dec_blocks = 8;
  std::size_t group_tokens = 100;     // N_g
  std::size_t retained_tokens = 100;  // N~_g

  static FlopsShape from_model(const ModelConfig& cfg, std::size_t retained) {
    cfg.validate();
    FlopsShape s;
    s.tokens = cfg.grid().tokens();
    s.dim = cfg.dim;
    s.heads = cfg.heads;
    s.patch_dim = cfg.grid().patch_dim();
    s.enc_blocks = cfg.enc_blocks;
    s.tge_blocks = cfg.tge_blocks;
    s.dec_blocks = cfg.dec_blocks;
    s.group_tokens = GroupLayout(cfg.token_counts()).total();
    s.retained_tokens = retained;
    return s;
  }
};

struct FlopsBreakdown {
  double encoder = 0;
  double collector = 0;
  double group_encoder = 0;
  double restorer = 0;
  double decoder = 0;

  double total() const { return encoder + collector + group_encoder + restorer + decoder; }
};

inline double linear_flops(double tokens, double in, double out, const FlopConvention& cv = {}) {
  return cv.mac_factor * tokens * in * out;
}

// One pre-norm linear-attention block: qkv, output projection, 4x MLP.
inline double block_flops(double t, double c, std::size_t heads, const FlopConvention& cv) {
  double f = linear_flops(t, c, 3 * c, cv) + linear_flops(t, c, c, cv) + linear_flops(t, c, 4 * c, cv) +
             linear_flops(t, 4 * c, c, cv);
  if (cv.attention_products) {
    const double dh = c / static_cast<double>(heads);
    // k^T v, q (k^T v), column sum of k, q . ksum
    f += cv.mac_factor * static_cast<double>(heads) * (2 * t * dh * dh + 2 * t * dh);
  }
  return f;
}

inline FlopsBreakdown count_flops(const FlopsShape& s, const FlopConvention& cv = {}) {
  if (s.tokens == 0 || s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 || s.retained_tokens == 0) {
    throw ConfigError("count_flops: invalid shape");
  }
  const double t = static_cast<double>(s.tokens), c = static_cast<double>(s.dim);
  const double ng = static_cast<double>(s.group_tokens), nr = static_cast<double>(s.retained_tokens);
  FlopsBreakdown b;
  b.encoder = static_cast<double>(s.enc_blocks) * block_flops(t, c, s.heads, cv);
  b.collector = linear_flops(t, c, ng, cv) + linear_flops(t, c, c, cv);
  b.group_encoder = static_cast<double>(s.tge_blocks) * block_flops(nr, c, s.heads, cv);
  b.restorer = linear_flops(nr, c, t, cv) + linear_flops(nr, c, c, cv);
  b.decoder = static_cast<double>(s.dec_blocks) * block_flops(t, c, s.heads, cv);
  if (cv.attention_products) {
    b.collector += cv.mac_factor * ng * t * c;
    b.restorer += cv.mac_factor * t * nr * c;
  }
  if (cv.embeddings) {
    b.encoder += linear_flops(t, static_cast<double>(s.patch_dim), c, cv);
    b.decoder += linear_flops(t, c, static_cast<double>(s.patch_dim), cv);
  }
  return b;
}

// Holistic encoder -> decoder baseline of the same block shapes (no OC/TGE/AHER).
inline FlopsBreakdown count_flops_holistic(const FlopsShape& s, std::size_t enc_blocks, const FlopConvention& cv = {}) {
  FlopsShape h = s;
  h.enc_blocks = enc_blocks;
  auto b = count_flops(h, cv);
  b.collector = b.group_encoder = b.restorer = 0;
  return b;
}

}  // namespace owt
