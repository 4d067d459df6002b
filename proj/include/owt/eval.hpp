#pragma once

// Reconstruction metrics, threshold segmentation, retrieval, linear probe and
// PCA projection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "owt/errors.hpp"
#include "owt/image.hpp"
#include "owt/random.hpp"

namespace owt {

using Mask = std::vector<std::uint8_t>;

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": " + std::to_string(a.height) + "x" + std::to_string(a.width) + "x" +
                         std::to_string(a.channels) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width) + "x" + std::to_string(b.channels));
  }
}

// ---- reconstruction metrics ----------------------------------------------

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    s += d * d;
  }
  return a.size() ? s / static_cast<double>(a.size()) : 0.0;
}

// MSE restricted to pixels where mask != 0; 0 when the mask is empty.
inline double masked_mse(const Image& a, const Image& b, const Mask& mask) {
  require_same_shape(a, b, "masked_mse");
  if (mask.size() != a.height * a.width) throw DimensionError("masked_mse: mask size differs from image");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    for (std::size_t c = 0; c < a.channels; ++c) {
      const double d = static_cast<double>(a.pixels[p * a.channels + c]) - b.pixels[p * a.channels + c];
      s += d * d;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

inline constexpr std::size_t kSsimWindow = 8;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Mean SSIM over all 8x8 windows at stride 1 (population moments).
inline double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  if (a.channels != 1) throw DimensionError("ssim expects single-channel images");
  if (a.height < kSsimWindow || a.width < kSsimWindow) {
    throw DimensionError("ssim: image smaller than the 8x8 window");
  }
  const double n = static_cast<double>(kSsimWindow * kSsimWindow);
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t y = 0; y + kSsimWindow <= a.height; ++y) {
    for (std::size_t x = 0; x + kSsimWindow <= a.width; ++x) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t dy = 0; dy < kSsimWindow; ++dy) {
        for (std::size_t dx = 0; dx < kSsimWindow; ++dx) {
          const double va = a.at(y + dy, x + dx), vb = b.at(y + dy, x + dx);
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      }
      const double ma = sa / n, mb = sb / n;
      const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
      total += ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) /
               ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

// ---- segmentation --------------------------------------------------------

inline constexpr double kThetaNoise = 0.02;
inline constexpr double kThetaMask = 0.15;

// Values below theta_noise are zeroed, then |value| >= theta_mask marks the mask.
// Multi-channel images use the channel mean.
inline Mask segment_by_threshold(const Image& img, double theta_noise = kThetaNoise,
                                 double theta_mask = kThetaMask) {
  if (!(theta_noise < theta_mask)) throw ConfigError("segment_by_threshold needs theta_noise < theta_mask");
  Mask out(img.height * img.width, 0);
  for (std::size_t p = 0; p < out.size(); ++p) {
    double v = 0.0;
    for (std::size_t c = 0; c < img.channels; ++c) v += img.pixels[p * img.channels + c];
    v /= static_cast<double>(img.channels);
    if (v < theta_noise) v = 0.0;
    out[p] = std::abs(v) >= theta_mask ? 1 : 0;
  }
  return out;
}

inline Mask label_mask(const LabelMap& labels, std::size_t group) {
  Mask m(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] == group ? 1 : 0;
  return m;
}

inline double dice(const Mask& a, const Mask& b) {
  if (a.size() != b.size()) {
    throw DimensionError("dice: mask sizes " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  std::size_t sa = 0, sb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > 1 || b[i] > 1) throw DataError("dice: masks must be binary (pixel " + std::to_string(i) + ")");
    sa += a[i];
    sb += b[i];
    both += a[i] & b[i];
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(sa + sb);
}

// Residual of the input after subtracting every complementary group's
// reconstruction, thresholded like a direct reconstruction.
inline Mask indirect_mask(const Image& img, std::span<const Image> complements, std::size_t expected,
                          double theta_noise = kThetaNoise, double theta_mask = kThetaMask) {
  if (complements.size() != expected) {
    throw DataError("indirect_mask: got " + std::to_string(complements.size()) + " complementary reconstructions, need " +
                    std::to_string(expected));
  }
  Image residual = img;
  for (const auto& c : complements) {
    require_same_shape(img, c, "indirect_mask");
    for (std::size_t i = 0; i < residual.size(); ++i) residual.pixels[i] -= c.pixels[i];
  }
  return segment_by_threshold(residual, theta_noise, theta_mask);
}

// ---- retrieval -----------------------------------------------------------

struct RetrievalHit {
  std::uint64_t case_id = 0;
  std::size_t group = 0;
  double distance = 0.0;
};

// Exact L2 index over flattened token-group vectors.
class RetrievalIndex {
 public:
  explicit RetrievalIndex(std::size_t dim = 0) : dim_(dim) {}

  void add(std::uint64_t case_id, std::size_t group, std::span<const float> vec) {
    if (dim_ == 0) dim_ = vec.size();
    if (vec.size() != dim_) {
      throw DimensionError("retrieval index holds " + std::to_string(dim_) + "-vectors, got " +
                           std::to_string(vec.size()));
    }
    entries_.push_back({case_id, group});
    data_.insert(data_.end(), vec.begin(), vec.end());
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t dim() const { return dim_; }

  // Ascending distance, ties broken by case id then group.
  std::vector<RetrievalHit> topk(std::span<const float> query, std::size_t k) const {
    if (entries_.empty()) throw DataError("retrieval index is empty");
    if (query.size() != dim_) {
      throw DimensionError("query has " + std::to_string(query.size()) + " values, index expects " +
                           std::to_string(dim_));
    }
    std::vector<RetrievalHit> hits(entries_.size());
    for (std::size_t e = 0; e < entries_.size(); ++e) {
      const float* row = data_.data() + e * dim_;
      double s = 0.0;
      for (std::size_t i = 0; i < dim_; ++i) {
        const double d = static_cast<double>(query[i]) - row[i];
        s += d * d;
      }
      hits[e] = {entries_[e].case_id, entries_[e].group, std::sqrt(s)};
    }
    const std::size_t take = std::min(k, hits.size());
    auto before = [](const RetrievalHit& a, const RetrievalHit& b) {
      if (a.distance != b.distance) return a.distance < b.distance;
      if (a.case_id != b.case_id) return a.case_id < b.case_id;
      return a.group < b.group;
    };
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(take), hits.end(), before);
    hits.resize(take);
    return hits;
  }

 private:
  struct Entry {
    std::uint64_t case_id;
    std::size_t group;
  };
  std::size_t dim_;
  std::vector<Entry> entries_;
  std::vector<float> data_;
};

inline void write_retrieval_csv(const std::string& path, std::span<const std::uint64_t> query_ids,
                                std::span<const std::vector<RetrievalHit>> results) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "query_id,rank,case_id,group,dist\n";
  out.precision(9);
  for (std::size_t q = 0; q < results.size(); ++q)
    for (std::size_t r = 0; r < results[q].size(); ++r)
      out << query_ids[q] << ',' << r + 1 << ',' << results[q][r].case_id << ',' << results[q][r].group << ','
          << results[q][r].distance << '\n';
}

// ---- linear probe --------------------------------------------------------

struct ProbeResult {
  double accuracy = 0.0;        // held-out
  double train_accuracy = 0.0;
  double majority_baseline = 0.0;  // held-out accuracy of the train-majority class
};

inline constexpr std::size_t kProbeIterations = 500;
inline constexpr double kProbeLearningRate = 0.1;

// Logistic regression on train-standardized features, full-batch gradient
// descent for a fixed number of iterations.
inline ProbeResult linear_probe(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                                std::span<const std::size_t> train, std::span<const std::size_t> test,
                                std::size_t iterations = kProbeIterations, double lr = kProbeLearningRate) {
  if (features.size() != labels.size()) throw DimensionError("linear_probe: feature/label counts differ");
  if (train.empty() || test.empty()) throw DataError("linear_probe: empty split");
  const std::size_t d = features[train[0]].size();
  std::size_t positives = 0;
  for (auto i : train) {
    if (features[i].size() != d) throw DimensionError("linear_probe: ragged feature vectors");
    if (labels[i] != 0 && labels[i] != 1) throw DataError("linear_probe: labels must be 0/1");
    positives += static_cast<std::size_t>(labels[i]);
  }
  if (positives == 0 || positives == train.size()) throw DataError("linear_probe: train split has a single class");

  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (auto i : train)
    for (std::size_t j = 0; j < d; ++j) mu[j] += features[i][j];
  for (auto& m : mu) m /= static_cast<double>(train.size());
  for (auto i : train)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (features[i][j] - mu[j]) * (features[i][j] - mu[j]);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(train.size())) + 1e-8;
  auto z = [&](std::size_t i, std::size_t j) { return (features[i][j] - mu[j]) / sd[j]; };

  std::vector<double> w(d, 0.0), gw(d);
  double b = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (auto i : train) {
      double s = b;
      for (std::size_t j = 0; j < d; ++j) s += w[j] * z(i, j);
      const double err = 1.0 / (1.0 + std::exp(-s)) - labels[i];
      for (std::size_t j = 0; j < d; ++j) gw[j] += err * z(i, j);
      gb += err;
    }
    const double inv = 1.0 / static_cast<double>(train.size());
    for (std::size_t j = 0; j < d; ++j) w[j] -= lr * gw[j] * inv;
    b -= lr * gb * inv;
  }
  auto accuracy = [&](std::span<const std::size_t> split) {
    std::size_t hit = 0;
    for (auto i : split) {
      double s = b;
      for (std::size_t j = 0; j < d; ++j) s += w[j] * z(i, j);
      hit += static_cast<std::size_t>((s >= 0 ? 1 : 0) == labels[i]);
    }
    return static_cast<double>(hit) / static_cast<double>(split.size());
  };
  ProbeResult r;
  r.accuracy = accuracy(test);
  r.train_accuracy = accuracy(train);
  const int majority = 2 * positives >= train.size() ? 1 : 0;
  std::size_t maj = 0;
  for (auto i : test) maj += static_cast<std::size_t>(labels[i] == majority);
  r.majority_baseline = static_cast<double>(maj) / static_cast<double>(test.size());
  return r;
}

// ---- projection ----------------------------------------------------------

struct PcaResult {
  std::vector<std::vector<double>> coords;  // n x dims
  std::vector<std::vector<double>> components;  // dims x d, unit vectors
  std::vector<double> explained_variance;    // per component
  double total_variance = 0.0;
  bool rank_deficient = false;  // fewer than dims components carried variance
};

// Mean-centered PCA by power iteration with deflation on the covariance.
inline PcaResult pca_project(const std::vector<std::vector<double>>& x, std::size_t dims = 2,
                             std::uint64_t seed = 0, std::size_t iterations = 500) {
  const std::size_t n = x.size();
  if (n < dims + 1) throw DataError("pca_project needs at least " + std::to_string(dims + 1) + " vectors");
  const std::size_t d = x[0].size();
  std::vector<double> mean(d, 0.0);
  for (const auto& row : x) {
    if (row.size() != d) throw DimensionError("pca_project: ragged input");
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  std::vector<double> cov(d * d, 0.0);
  for (const auto& row : x)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
  for (auto& c : cov) c /= static_cast<double>(n);

  PcaResult r;
  for (std::size_t i = 0; i < d; ++i) r.total_variance += cov[i * d + i];
  const double floor = 1e-12 * std::max(r.total_variance, 1e-300);
  Rng rng(seed);
  std::vector<double> v(d), next(d);
  for (std::size_t comp = 0; comp < std::min(dims, d); ++comp) {
    for (auto& e : v) e = uniform01(rng) - 0.5;
    double lambda = 0.0;
    for (std::size_t it = 0; it < iterations; ++it) {
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += cov[i * d + j] * v[j];
        next[i] = s;
      }
      double norm = 0.0;
      for (double e : next) norm += e * e;
      norm = std::sqrt(norm);
      if (norm <= floor) {
        lambda = 0.0;
        break;
      }
      for (std::size_t i = 0; i < d; ++i) v[i] = next[i] / norm;
      lambda = norm;
    }
    if (lambda <= floor) {
      r.rank_deficient = true;
      break;
    }
    // Sign convention: largest-magnitude entry positive.
    std::size_t big = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (std::abs(v[i]) > std::abs(v[big])) big = i;
    if (v[big] < 0)
      for (auto& e : v) e = -e;
    r.components.push_back(v);
    r.explained_variance.push_back(lambda);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i * d + j] -= lambda * v[i] * v[j];
  }
  if (r.components.size() < dims) r.rank_deficient = true;
  r.coords.assign(n, std::vector<double>(r.components.size(), 0.0));
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t c = 0; c < r.components.size(); ++c)
      for (std::size_t j = 0; j < d; ++j) r.coords[s][c] += (x[s][j] - mean[j]) * r.components[c][j];
  return r;
}

}  // namespace owt
