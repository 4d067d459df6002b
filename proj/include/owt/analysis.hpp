#pragma once

// Model-level evaluation: reconstructions under different selections, the
// segmentation / independence / retrieval / probe / projection studies, and
// their report records. Everything here runs without gradient tracking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "owt/eval.hpp"
#include "owt/model.hpp"
#include "owt/phantom.hpp"
#include "owt/tgr.hpp"

namespace owt {

// Encoder and collector outputs for one image, reused across selections.
struct CollectedImage {
  HolisticEmbedding holistic;
  TokenGroupSet groups;
};

inline CollectedImage collect(const OwtModel& model, const Image& img) {
  NoGradGuard guard;
  auto xh = encode(to_tensor(img), model);
  auto cg = organ_collect(xh, model);
  return {std::move(xh), std::move(cg.groups)};
}

inline Image reconstruct_from(const OwtModel& model, const CollectedImage& c, const RetainedSelection& sel) {
  NoGradGuard guard;
  const auto restored = aher_restore(token_group_encode(gather_retained(c.groups, sel), model), model);
  return to_image(decode(restored.embedding, model));
}

inline Image reconstruct(const OwtModel& model, const Image& img, const RetainedSelection& sel) {
  return reconstruct_from(model, collect(model, img), sel);
}

inline Image reconstruct_holistic(const OwtModel& model, const Image& img) {
  NoGradGuard guard;
  return to_image(forward_holistic(to_tensor(img), model));
}

// Row-mean of a token matrix.
inline std::vector<double> mean_pool(const Tensor& tokens, std::size_t first, std::size_t count) {
  const std::size_t c = tokens.cols();
  std::vector<double> out(c, 0.0);
  for (std::size_t r = first; r < first + count; ++r)
    for (std::size_t j = 0; j < c; ++j) out[j] += tokens.data()[r * c + j];
  for (auto& v : out) v /= static_cast<double>(count);
  return out;
}

inline std::vector<double> group_feature(const CollectedImage& c, std::size_t group) {
  return mean_pool(c.groups.tokens, c.groups.layout.offsets[group], c.groups.layout.counts[group]);
}

inline std::vector<double> holistic_feature(const CollectedImage& c) {
  return mean_pool(c.holistic.tokens, 0, c.holistic.tokens.rows());
}

// Flattened f x c_e token block of one group.
inline std::vector<float> group_vector(const CollectedImage& c, std::size_t group) {
  const std::size_t cols = c.groups.tokens.cols();
  const auto* base = c.groups.tokens.data().data() + c.groups.layout.offsets[group] * cols;
  return std::vector<float>(base, base + c.groups.layout.counts[group] * cols);
}

inline double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---- reconstruction / segmentation study ---------------------------------

struct GroupMetrics {
  std::size_t group = 0;
  double mse = 0;            // single-group reconstruction vs masked target
  double ssim = 0;
  double dice = 0;           // direct mask vs ground truth
  double dice_indirect = 0;  // input minus complementary reconstructions
  double independence_gap = 0;  // MSE on group pixels, single-group vs all-groups reconstruction
  double all_groups_mse = 0;    // MSE on group pixels, all-groups reconstruction vs input
};

struct SampleMetrics {
  std::uint64_t case_id = 0;
  double mse = 0;  // all-groups (or holistic) reconstruction vs input
  double ssim = 0;
  std::vector<GroupMetrics> groups;
};

struct EvalOptions {
  double theta_noise = kThetaNoise;
  double theta_mask = kThetaMask;
  std::vector<std::size_t> groups;  // organ groups to study individually; empty = none
  bool holistic = false;            // bypass collector/TGE/AHER for the whole-image metrics
};

inline SampleMetrics evaluate_sample(const OwtModel& model, const PhantomSample& s, std::uint64_t case_id,
                                     const EvalOptions& opt) {
  const std::size_t g = model.config.groups;
  SampleMetrics m;
  m.case_id = case_id;
  const auto c = collect(model, s.image);
  const Image full = opt.holistic ? reconstruct_holistic(model, s.image)
                                  : reconstruct_from(model, c, RetainedSelection::all(g + 1));
  m.mse = mse(full, s.image);
  m.ssim = ssim(full, s.image);
  if (opt.groups.empty()) return m;

  std::vector<Image> single(g + 1);
  for (std::size_t k = 0; k <= g; ++k) single[k] = reconstruct_from(model, c, RetainedSelection::only(k));
  for (std::size_t k : opt.groups) {
    if (k > g) throw DataError("group " + std::to_string(k) + " exceeds group count " + std::to_string(g));
    GroupMetrics gm;
    gm.group = k;
    const auto target = mask_target(s.image, s.labels, RetainedSelection::only(k), g).target;
    gm.mse = mse(single[k], target);
    gm.ssim = ssim(single[k], target);
    const auto truth = label_mask(s.labels, k);
    gm.dice = dice(segment_by_threshold(single[k], opt.theta_noise, opt.theta_mask), truth);
    std::vector<Image> others;
    for (std::size_t j = 0; j <= g; ++j)
      if (j != k) others.push_back(single[j]);
    gm.dice_indirect = dice(indirect_mask(s.image, others, g, opt.theta_noise, opt.theta_mask), truth);
    gm.independence_gap = masked_mse(single[k], full, truth);
    gm.all_groups_mse = masked_mse(full, s.image, truth);
    m.groups.push_back(gm);
  }
  return m;
}

struct GroupSummary {
  std::size_t group = 0;
  double mse = 0, ssim = 0, dice = 0, dice_indirect = 0, independence_gap = 0, all_groups_mse = 0;
  double independence_ratio() const { return all_groups_mse > 0 ? independence_gap / all_groups_mse : 0.0; }
};

struct MetricReport {
  std::vector<SampleMetrics> samples;
  double mse = 0;
  double ssim = 0;
  std::vector<GroupSummary> groups;
  std::string selection = "all";
  std::uint64_t model_hash = 0;
  std::uint64_t dataset_hash = 0;
  double theta_noise = kThetaNoise;
  double theta_mask = kThetaMask;

  double mean_dice() const {
    double s = 0;
    for (const auto& g : groups) s += g.dice;
    return groups.empty() ? 0.0 : s / static_cast<double>(groups.size());
  }
};

inline MetricReport evaluate(const OwtModel& model, std::span<const PhantomSample> data, const EvalOptions& opt) {
  MetricReport r;
  r.theta_noise = opt.theta_noise;
  r.theta_mask = opt.theta_mask;
  r.selection = opt.holistic ? "holistic" : "all";
  for (std::size_t i = 0; i < data.size(); ++i) r.samples.push_back(evaluate_sample(model, data[i], i, opt));
  std::vector<double> v;
  for (const auto& s : r.samples) v.push_back(s.mse);
  r.mse = mean_of(v);
  v.clear();
  for (const auto& s : r.samples) v.push_back(s.ssim);
  r.ssim = mean_of(v);
  for (std::size_t gi = 0; gi < opt.groups.size(); ++gi) {
    GroupSummary gs;
    gs.group = opt.groups[gi];
    const double n = static_cast<double>(r.samples.size());
    for (const auto& s : r.samples) {
      const auto& m = s.groups[gi];
      gs.mse += m.mse / n;
      gs.ssim += m.ssim / n;
      gs.dice += m.dice / n;
      gs.dice_indirect += m.dice_indirect / n;
      gs.independence_gap += m.independence_gap / n;
      gs.all_groups_mse += m.all_groups_mse / n;
    }
    r.groups.push_back(gs);
  }
  return r;
}

inline nlohmann::json to_json(const MetricReport& r) {
  using nlohmann::json;
  json j;
  auto hex = [](std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
  };
  j["metadata"] = {{"model_hash", hex(r.model_hash)},
                   {"dataset_hash", hex(r.dataset_hash)},
                   {"theta_noise", r.theta_noise},
                   {"theta_mask", r.theta_mask},
                   {"selection", r.selection},
                   {"samples", r.samples.size()}};
  json groups = json::array();
  for (const auto& g : r.groups) {
    groups.push_back({{"group", g.group},
                      {"mse", g.mse},
                      {"ssim", g.ssim},
                      {"dice", g.dice},
                      {"dice_indirect", g.dice_indirect},
                      {"independence_gap", g.independence_gap},
                      {"all_groups_mse", g.all_groups_mse},
                      {"independence_ratio", g.independence_ratio()}});
  }
  j["aggregate"] = {{"mse", r.mse}, {"ssim", r.ssim}, {"groups", groups}};
  json samples = json::array();
  for (const auto& s : r.samples) {
    json gs = json::array();
    for (const auto& g : s.groups) {
      gs.push_back({{"group", g.group}, {"mse", g.mse}, {"ssim", g.ssim}, {"dice", g.dice},
                    {"dice_indirect", g.dice_indirect}});
    }
    samples.push_back({{"case_id", s.case_id}, {"mse", s.mse}, {"ssim", s.ssim}, {"groups", gs}});
  }
  j["samples"] = samples;
  return j;
}

// ---- retrieval study -------------------------------------------------------

struct RetrievalStudy {
  std::size_t group = 0;
  std::size_t queries = 0;
  std::size_t self_top1 = 0;       // queries whose top hit is themselves at distance 0
  double closer_than_median = 0;   // fraction of queries whose top-1 intensity gap beats the median gap
  double mean_top1_gap = 0;
  double mean_median_gap = 0;
  std::vector<std::uint64_t> query_ids;
  std::vector<std::vector<RetrievalHit>> hits;
};

// Mean input intensity over the pixels of `group`.
inline double region_intensity(const PhantomSample& s, std::size_t group) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.labels.size(); ++i)
    if (s.labels[i] == group) sum += s.image.pixels[i], ++n;
  return n ? sum / static_cast<double>(n) : 0.0;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2) return *mid;
  const double hi = *mid;
  return 0.5 * (hi + *std::max_element(v.begin(), mid));
}

// Index = group-k token blocks of `database`. Each query (the first `queries`
// database entries) is searched twice: once against the full index for the
// self-match, once with itself excluded for the intensity audit.
inline RetrievalStudy retrieval_study(const OwtModel& model, std::span<const PhantomSample> database,
                                      std::size_t group, std::size_t queries, std::size_t k = 5) {
  RetrievalStudy st;
  st.group = group;
  std::vector<std::vector<float>> vecs;
  RetrievalIndex index;
  for (std::size_t i = 0; i < database.size(); ++i) {
    vecs.push_back(group_vector(collect(model, database[i].image), group));
    index.add(i, group, vecs.back());
  }
  std::vector<double> intensity(database.size());
  for (std::size_t i = 0; i < database.size(); ++i) intensity[i] = region_intensity(database[i], group);
  st.queries = std::min(queries, database.size());
  std::size_t closer = 0;
  for (std::size_t q = 0; q < st.queries; ++q) {
    auto hits = index.topk(vecs[q], std::min(k + 1, index.size()));
    if (!hits.empty() && hits[0].case_id == q && hits[0].distance == 0.0) ++st.self_top1;
    const RetrievalHit* other = nullptr;
    for (const auto& h : hits)
      if (h.case_id != q) {
        other = &h;
        break;
      }
    std::vector<double> gaps;
    for (std::size_t j = 0; j < database.size(); ++j)
      if (j != q) gaps.push_back(std::abs(intensity[j] - intensity[q]));
    const double med = median_of(gaps);
    const double top = other ? std::abs(intensity[other->case_id] - intensity[q]) : med;
    closer += static_cast<std::size_t>(top < med);
    st.mean_top1_gap += top;
    st.mean_median_gap += med;
    st.query_ids.push_back(q);
    if (hits.size() > k) hits.resize(k);
    st.hits.push_back(std::move(hits));
  }
  if (st.queries) {
    st.closer_than_median = static_cast<double>(closer) / static_cast<double>(st.queries);
    st.mean_top1_gap /= static_cast<double>(st.queries);
    st.mean_median_gap /= static_cast<double>(st.queries);
  }
  return st;
}

// ---- lesion probe ----------------------------------------------------------

struct ProbeStudy {
  std::size_t group = 0;
  ProbeResult group_probe;     // features: mean of the group's f tokens
  ProbeResult holistic_probe;  // features: mean of all h*w holistic tokens
  double positive_rate = 0;    // in the evaluation split
};

// Label = lesion inside `group`; probe trained on `train`, scored on `test`.
inline ProbeStudy probe_study(const OwtModel& model, std::span<const PhantomSample> train,
                              std::span<const PhantomSample> test, std::size_t group) {
  std::vector<std::vector<double>> gf, hf;
  std::vector<int> labels;
  for (auto split : {train, test}) {
    for (const auto& s : split) {
      const auto c = collect(model, s.image);
      gf.push_back(group_feature(c, group));
      hf.push_back(holistic_feature(c));
      labels.push_back(s.has_lesion(group) ? 1 : 0);
    }
  }
  std::vector<std::size_t> tr(train.size()), te(test.size());
  std::iota(tr.begin(), tr.end(), std::size_t{0});
  std::iota(te.begin(), te.end(), train.size());
  ProbeStudy st;
  st.group = group;
  st.group_probe = linear_probe(gf, labels, tr, te);
  st.holistic_probe = linear_probe(hf, labels, tr, te);
  std::size_t pos = 0;
  for (auto i : te) pos += static_cast<std::size_t>(labels[i]);
  st.positive_rate = static_cast<double>(pos) / static_cast<double>(te.size());
  return st;
}

// ---- projection study ------------------------------------------------------

struct ProjectionStudy {
  PcaResult pca;
  std::vector<std::uint64_t> case_ids;
  std::vector<std::size_t> groups;
  double inter_centroid = 0;  // mean pairwise distance between group centroids
  double intra_spread = 0;    // mean distance of points to their own centroid
};

// One point per (sample, token group): the mean of that group's tokens.
inline ProjectionStudy projection_study(const OwtModel& model, std::span<const PhantomSample> data,
                                        std::uint64_t seed = 0) {
  ProjectionStudy st;
  std::vector<std::vector<double>> pts;
  const std::size_t ng = model.layout.groups();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto c = collect(model, data[i].image);
    for (std::size_t k = 0; k < ng; ++k) {
      pts.push_back(group_feature(c, k));
      st.case_ids.push_back(i);
      st.groups.push_back(k);
    }
  }
  st.pca = pca_project(pts, 2, seed);
  const std::size_t dims = st.pca.components.size();
  std::vector<std::vector<double>> centroid(ng, std::vector<double>(dims, 0.0));
  std::vector<std::size_t> count(ng, 0);
  for (std::size_t p = 0; p < pts.size(); ++p) {
    ++count[st.groups[p]];
    for (std::size_t d = 0; d < dims; ++d) centroid[st.groups[p]][d] += st.pca.coords[p][d];
  }
  for (std::size_t k = 0; k < ng; ++k)
    for (auto& v : centroid[k]) v /= static_cast<double>(std::max<std::size_t>(1, count[k]));
  auto dist = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t d = 0; d < dims; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
    return std::sqrt(s);
  };
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < ng; ++a)
    for (std::size_t b = a + 1; b < ng; ++b) st.inter_centroid += dist(centroid[a], centroid[b]), ++pairs;
  if (pairs) st.inter_centroid /= static_cast<double>(pairs);
  for (std::size_t p = 0; p < pts.size(); ++p) st.intra_spread += dist(st.pca.coords[p], centroid[st.groups[p]]);
  st.intra_spread /= static_cast<double>(pts.size());
  return st;
}

inline void write_projection_csv(const std::string& path, const ProjectionStudy& st) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "case_id,group,x,y\n";
  out.precision(9);
  for (std::size_t p = 0; p < st.case_ids.size(); ++p) {
    const auto& c = st.pca.coords[p];
    out << st.case_ids[p] << ',' << st.groups[p] << ',' << (c.size() > 0 ? c[0] : 0.0) << ','
        << (c.size() > 1 ? c[1] : 0.0) << '\n';
  }
}

}  // namespace owt
