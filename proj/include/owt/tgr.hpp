#pragma once

// Token group-based reconstruction: selection draws, masked targets, loss,
// schedule and training loops.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "owt/errors.hpp"
#include "owt/image.hpp"
#include "owt/model.hpp"
#include "owt/ops.hpp"
#include "owt/optim.hpp"
#include "owt/phantom.hpp"
#include "owt/random.hpp"

namespace owt {

enum class TrainMode { kTgr, kHolistic, kSemi };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kTgr: return "tgr";
    case TrainMode::kHolistic: return "holistic";
    case TrainMode::kSemi: return "semi";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "tgr") return TrainMode::kTgr;
  if (s == "holistic") return TrainMode::kHolistic;
  if (s == "semi") return TrainMode::kSemi;
  throw ConfigError("unknown train mode '" + s + "' (expected tgr, holistic or semi)");
}

struct TgrConfig {
  double base_lr = 1e-4;
  std::size_t effective_batch = 256;
  std::size_t epochs = 1200;
  double warmup_epochs = 60;
  std::uint64_t seed = 0;
  double perceptual_weight = 0.0;
  TrainMode mode = TrainMode::kTgr;
  double labeled_fraction = 1.0;
  std::size_t semi_stage1_epochs = 0;
  AdamWOptions optimizer{};

  void validate() const {
    if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (effective_batch == 0) throw ConfigError("batch must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(warmup_epochs >= 0) || !(warmup_epochs < static_cast<double>(epochs))) {
      throw ConfigError("warmup_epochs must lie in [0, epochs)");
    }
    if (perceptual_weight < 0) throw ConfigError("perceptual_weight must be nonnegative");
    if (!(labeled_fraction > 0) || labeled_fraction > 1) throw ConfigError("labeled_fraction must lie in (0, 1]");
  }

  double peak_lr() const { return base_lr * static_cast<double>(effective_batch) / 256.0; }
};

// ---- selection ----------------------------------------------------------

// floor((g+1) * omega); omega in [0, 1).
inline std::size_t selection_size(std::size_t g, double omega) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(g + 1) * omega));
}

// Draws g~ by the floor rule (redrawing g~ = 0), then a uniformly ordered
// random g~-subset of the g+1 token groups.
inline RetainedSelection draw_selection(std::size_t g, Rng& rng) {
  if (g == 0) throw ConfigError("draw_selection needs at least one organ group");
  std::size_t size = 0;
  while (size == 0) size = std::min(g, selection_size(g, uniform01(rng)));
  std::vector<std::size_t> order(g + 1);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(g + 1 - i));
    std::swap(order[i], order[std::min(j, g)]);
  }
  order.resize(size);
  return {order};
}

struct MaskedTarget {
  Image target;
  std::vector<std::size_t> retained;
};

inline MaskedTarget mask_target(const Image& img, const LabelMap& labels, const RetainedSelection& sel,
                                std::size_t g) {
  if (labels.size() != img.height * img.width) {
    throw DimensionError("label map has " + std::to_string(labels.size()) + " entries for a " +
                         std::to_string(img.height) + "x" + std::to_string(img.width) + " image");
  }
  std::vector<bool> keep(g + 1, false);
  for (auto k : sel.groups) {
    if (k > g) throw DataError("selected group " + std::to_string(k) + " exceeds group count " + std::to_string(g));
    keep[k] = true;
  }
  MaskedTarget out{Image(img.height, img.width, img.channels), sel.groups};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > g) {
      throw DataError("label " + std::to_string(labels[i]) + " at pixel " + std::to_string(i) +
                      " outside {0.." + std::to_string(g) + "}");
    }
    if (!keep[labels[i]]) continue;
    for (std::size_t c = 0; c < img.channels; ++c) out.target.pixels[i * img.channels + c] = img.pixels[i * img.channels + c];
  }
  return out;
}

// ---- loss ---------------------------------------------------------------

inline constexpr std::size_t kPyramidLevels = 3;

// Fixed linear feature map: for each of three scales (1, 1/2, 1/4 via average
// pooling) the pooled image plus its horizontal and vertical differences.
inline std::shared_ptr<const SparseMap> perceptual_pyramid(std::size_t h, std::size_t w, std::size_t c) {
  static std::mutex mu;
  static std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::shared_ptr<const SparseMap>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{h, w, c}];
  if (slot) return slot;

  auto map = std::make_shared<SparseMap>();
  map->in_size = h * w * c;
  std::size_t next = 0;
  for (std::size_t level = 0, s = 1; level < kPyramidLevels && h / s >= 2 && w / s >= 2; ++level, s *= 2) {
    const std::size_t lh = h / s, lw = w / s;
    const double wt = 1.0 / static_cast<double>(s * s);
    // pooled(y, x, ch) as a list of (input, weight)
    auto pooled = [&](std::size_t y, std::size_t x, std::size_t ch, double sign, std::size_t out) {
      for (std::size_t dy = 0; dy < s; ++dy)
        for (std::size_t dx = 0; dx < s; ++dx)
          map->entries.push_back({out, ((y * s + dy) * w + (x * s + dx)) * c + ch, sign * wt});
    };
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < lh; ++y)
        for (std::size_t x = 0; x < lw; ++x) pooled(y, x, ch, 1.0, next++);
      for (std::size_t y = 0; y < lh; ++y) {
        for (std::size_t x = 0; x + 1 < lw; ++x) {
          pooled(y, x + 1, ch, 1.0, next);
          pooled(y, x, ch, -1.0, next++);
        }
      }
      for (std::size_t y = 0; y + 1 < lh; ++y) {
        for (std::size_t x = 0; x < lw; ++x) {
          pooled(y + 1, x, ch, 1.0, next);
          pooled(y, x, ch, -1.0, next++);
        }
      }
    }
  }
  map->out_size = next;
  slot = std::move(map);
  return slot;
}

template <typename T>
BasicTensor<T> perceptual_term(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape() || pred.rank() != 3) {
    throw DimensionError("perceptual_term shapes " + shape_string(pred.shape()) + " vs " +
                         shape_string(target.shape()));
  }
  const auto map = perceptual_pyramid(pred.dim(0), pred.dim(1), pred.dim(2));
  return mse_loss(sparse_linear(pred, map), sparse_linear(target, map));
}

template <typename T>
BasicTensor<T> reconstruction_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, double w_perc) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("reconstruction_loss shapes " + shape_string(pred.shape()) + " vs " +
                         shape_string(target.shape()));
  }
  auto loss = mse_loss(pred, target);
  if (w_perc != 0.0) loss = add(loss, scale(perceptual_term(pred, target), w_perc));
  return loss;
}

// ---- schedule -----------------------------------------------------------

// Fractional-epoch schedule: linear warmup from 0, then half-cosine to 0.
inline double lr_at(std::size_t step, const TgrConfig& cfg, std::size_t steps_per_epoch) {
  if (steps_per_epoch == 0) throw ConfigError("steps_per_epoch must be positive");
  const double epoch = static_cast<double>(step) / static_cast<double>(steps_per_epoch);
  const double peak = cfg.peak_lr();
  const double total = static_cast<double>(cfg.epochs);
  if (epoch < cfg.warmup_epochs) return peak * epoch / cfg.warmup_epochs;
  const double progress = std::min(1.0, (epoch - cfg.warmup_epochs) / (total - cfg.warmup_epochs));
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline std::size_t steps_per_epoch(std::size_t samples, std::size_t batch) { return (samples + batch - 1) / batch; }

// ---- training -----------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  double epoch = 0;
  double lr = 0;
  double loss = 0;
  double wall_ms = 0;
};

struct TrainLog {
  std::vector<StepRecord> rows;

  void write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "step,epoch,lr,loss,wall_ms\n";
    out.precision(9);
    for (const auto& r : rows) out << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss << ',' << r.wall_ms << '\n';
  }
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(std::size_t epoch)> on_epoch;  // after each completed epoch
  const RetainedSelection* forced = nullptr;        // overrides the random draw (tests)
};

// One sample's loss for the requested objective; graph attached to model params.
inline Tensor sample_loss(const OwtModel& model, const PhantomSample& s, TrainMode mode, double w_perc, Rng& rng,
                          const RetainedSelection* forced = nullptr) {
  const auto img = to_tensor(s.image);
  if (mode == TrainMode::kHolistic) return reconstruction_loss(forward_holistic(img, model), img, w_perc);
  const auto sel = forced ? *forced : draw_selection(model.config.groups, rng);
  const auto target = mask_target(s.image, s.labels, sel, model.config.groups);
  return reconstruction_loss(forward_owt(img, sel, model).image, to_tensor(target.target), w_perc);
}

// Mean loss over the batch, one AdamW update at `lr`, grads zeroed afterwards.
// Each sample's graph is released before the next is built.
inline double train_step(std::span<const PhantomSample* const> batch, OwtModel& model, AdamW& opt, TrainMode mode,
                         double w_perc, Rng& rng, double lr, const RetainedSelection* forced = nullptr) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto* s : batch) {
    auto loss = sample_loss(model, *s, mode, w_perc, rng, forced);
    const double v = loss.item();
    if (!std::isfinite(v)) {
      opt.zero_grad();
      throw NumericError("loss diverged (" + std::to_string(v) + ")");
    }
    total += v;
    scale(loss, inv).backward();
  }
  opt.step(lr);
  opt.zero_grad();
  return total * inv;
}

// Runs cfg.epochs epochs over `data` with a seeded shuffle per epoch.
inline TrainLog train(OwtModel& model, AdamW& opt, std::span<const PhantomSample> data, const TgrConfig& cfg,
                      TrainMode mode, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  if (mode == TrainMode::kSemi) throw ContractError("train: use train_semi for two-stage training");
  Rng rng(cfg.seed);
  const std::size_t spe = steps_per_epoch(data.size(), cfg.effective_batch);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainLog log;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = 0;
  std::vector<const PhantomSample*> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < spe; ++b, ++step) {
      batch.clear();
      for (std::size_t i = b * cfg.effective_batch; i < std::min(data.size(), (b + 1) * cfg.effective_batch); ++i) {
        batch.push_back(&data[order[i]]);
      }
      const double lr = lr_at(step, cfg, spe);
      StepRecord rec;
      rec.step = step;
      rec.epoch = static_cast<double>(step) / static_cast<double>(spe);
      rec.lr = lr;
      rec.loss = train_step(batch, model, opt, mode, cfg.perceptual_weight, rng, lr, hooks.forced);
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log.rows.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch + 1);
  }
  return log;
}

struct SemiResult {
  TrainLog stage1;
  TrainLog stage2;
  std::vector<std::size_t> labeled;  // indices into the dataset
};

// Seeded subset of round(fraction * n) indices, in ascending order.
inline std::vector<std::size_t> labeled_subset(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0) || fraction > 1) throw ConfigError("labeled_fraction must lie in (0, 1]");
  const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (take == 0) throw DataError("labeled subset is empty");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0x5e111));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(take);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Stage 1: holistic reconstruction on every image for semi_stage1_epochs
// (skipped when zero), updating only encoder/decoder parameters.
// Stage 2: TGR on the labeled subset for cfg.epochs.
// Each stage keeps the configured warmup fraction of its own length.
inline SemiResult train_semi(OwtModel& model, std::span<const PhantomSample> data, double labeled_fraction,
                             const TgrConfig& cfg, const TrainHooks& stage1_hooks = {},
                             const TrainHooks& stage2_hooks = {}) {
  cfg.validate();
  SemiResult out;
  out.labeled = labeled_subset(data.size(), labeled_fraction, cfg.seed);
  const double warm_frac = cfg.warmup_epochs / static_cast<double>(cfg.epochs);
  if (cfg.semi_stage1_epochs > 0) {
    TgrConfig s1 = cfg;
    s1.epochs = cfg.semi_stage1_epochs;
    s1.warmup_epochs = warm_frac * static_cast<double>(s1.epochs);
    AdamW opt1(model.holistic_parameters(), cfg.optimizer);
    out.stage1 = train(model, opt1, data, s1, TrainMode::kHolistic, stage1_hooks);
  }
  std::vector<PhantomSample> labeled;
  labeled.reserve(out.labeled.size());
  for (auto i : out.labeled) labeled.push_back(data[i]);
  TgrConfig s2 = cfg;
  s2.seed = mix_seed(cfg.seed, 2);
  AdamW opt2(model.parameters(), cfg.optimizer);
  out.stage2 = train(model, opt2, labeled, s2, TrainMode::kTgr, stage2_hooks);
  return out;
}

// ---- adaptive token allocation -----------------------------------------

// counts proportional to volume^(1/4), largest-remainder rounding, at least one
// token per group, summing to budget.
inline std::vector<std::size_t> allocate_tokens(std::span<const double> volumes, std::size_t budget) {
  const std::size_t n = volumes.size();
  if (n == 0) throw ConfigError("allocate_tokens: no groups");
  if (budget < n) {
    throw ConfigError("token budget " + std::to_string(budget) + " below one token per group (" + std::to_string(n) + ")");
  }
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(volumes[i] > 0)) throw ConfigError("allocate_tokens: volumes must be positive");
    w[i] = std::pow(volumes[i], 0.25);
  }
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<std::size_t> counts(n);
  std::vector<double> ideal(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ideal[i] = static_cast<double>(budget) * w[i] / wsum;
    counts[i] = static_cast<std::size_t>(std::floor(ideal[i] + 1e-9));
    assigned += counts[i];
  }
  std::vector<std::size_t> by_rem(n);
  std::iota(by_rem.begin(), by_rem.end(), std::size_t{0});
  std::stable_sort(by_rem.begin(), by_rem.end(), [&](std::size_t a, std::size_t b) {
    return ideal[a] - static_cast<double>(counts[a]) > ideal[b] - static_cast<double>(counts[b]);
  });
  for (std::size_t i = 0; assigned < budget; i = (i + 1) % n, ++assigned) ++counts[by_rem[i]];
  // Lift empty groups to one token, taking from the group furthest above its ideal share.
  for (std::size_t i = 0; i < n; ++i) {
    if (counts[i] > 0) continue;
    std::size_t donor = n;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (counts[j] <= 1) continue;
      const double surplus = static_cast<double>(counts[j]) - ideal[j];
      if (surplus > best) {
        best = surplus;
        donor = j;
      }
    }
    --counts[donor];
    counts[i] = 1;
  }
  return counts;
}

// Mean per-group pixel counts over a dataset (background first).
inline std::vector<double> group_volumes(std::span<const PhantomSample> data, std::size_t g) {
  std::vector<double> v(g + 1, 0.0);
  for (const auto& s : data)
    for (auto l : s.labels) v[std::min<std::size_t>(l, g)] += 1.0;
  for (auto& x : v) x /= static_cast<double>(std::max<std::size_t>(1, data.size()));
  return v;
}

}  // namespace owt
