#pragma once

// JSON run configuration. Unknown keys anywhere are rejected; every field has
// a default, and resolve() writes back the complete effective document.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "owt/errors.hpp"
#include "owt/eval.hpp"
#include "owt/model.hpp"
#include "owt/phantom.hpp"
#include "owt/tgr.hpp"

namespace owt {

using Json = nlohmann::json;

struct EvalConfig {
  double theta_noise = kThetaNoise;
  double theta_mask = kThetaMask;
};

struct DataConfig {
  std::string path;       // OWTD training data; empty = generate from spec
  std::string test_path;  // OWTD held-out data; empty = generate from test_spec
  PhantomSpec spec{};
  PhantomSpec test_spec = [] {
    PhantomSpec s;
    s.seed = 43;
    s.count = 256;
    return s;
  }();
};

struct RunConfig {
  ModelConfig model{};
  bool adaptive = false;        // allocate group_token_counts from data volumes
  std::size_t token_budget = 0; // adaptive budget; 0 = (g+1) * tokens_per_group
  TgrConfig train{};
  DataConfig data{};
  EvalConfig eval{};
};

namespace detail {

inline void reject_unknown(const Json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("'" + where + "' must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!ok.count(key)) throw ConfigError("unknown key '" + where + "." + key + "'");
  }
}

template <typename V>
void read(const Json& obj, const char* key, V& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const Json::exception& e) {
    throw ConfigError("bad value for '" + where + "." + key + "': " + e.what());
  }
}

inline void read_spec(const Json& j, PhantomSpec& s, const std::string& where) {
  reject_unknown(j, where,
                 {"height", "width", "groups", "seed", "count", "base_intensity", "intensity_jitter", "noise_amplitude",
                  "lesion_probability", "lesion_intensity", "lesion_radius", "lesion_min_area", "min_area", "max_area"});
  read(j, "height", s.height, where);
  read(j, "width", s.width, where);
  read(j, "groups", s.groups, where);
  read(j, "seed", s.seed, where);
  read(j, "count", s.count, where);
  read(j, "base_intensity", s.base_intensity, where);
  read(j, "intensity_jitter", s.intensity_jitter, where);
  read(j, "noise_amplitude", s.noise_amplitude, where);
  read(j, "lesion_probability", s.lesion_probability, where);
  read(j, "lesion_intensity", s.lesion_intensity, where);
  read(j, "lesion_radius", s.lesion_radius, where);
  read(j, "lesion_min_area", s.lesion_min_area, where);
  read(j, "min_area", s.min_area, where);
  read(j, "max_area", s.max_area, where);
}

inline Json spec_json(const PhantomSpec& s) {
  return {{"height", s.height},
          {"width", s.width},
          {"groups", s.groups},
          {"seed", s.seed},
          {"count", s.count},
          {"base_intensity", s.intensities()},
          {"intensity_jitter", s.intensity_jitter},
          {"noise_amplitude", s.noise_amplitude},
          {"lesion_probability", s.lesion_probability},
          {"lesion_intensity", s.lesion_intensity},
          {"lesion_radius", s.lesion_radius},
          {"lesion_min_area", s.lesion_min_area},
          {"min_area", s.min_area},
          {"max_area", s.max_area}};
}

}  // namespace detail

inline RunConfig parse_run_config(const Json& j) {
  using detail::read;
  using detail::reject_unknown;
  RunConfig c;
  reject_unknown(j, "config", {"model", "train", "data", "eval"});
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, "model",
                   {"height", "width", "channels", "patch", "dim", "heads", "enc_blocks", "tge_blocks", "dec_blocks",
                    "groups", "tokens_per_group", "group_token_counts", "adaptive", "token_budget", "seed", "routing_init_std"});
    read(m, "height", c.model.height, "model");
    read(m, "width", c.model.width, "model");
    read(m, "channels", c.model.channels, "model");
    read(m, "patch", c.model.patch, "model");
    read(m, "dim", c.model.dim, "model");
    read(m, "heads", c.model.heads, "model");
    read(m, "enc_blocks", c.model.enc_blocks, "model");
    read(m, "tge_blocks", c.model.tge_blocks, "model");
    read(m, "dec_blocks", c.model.dec_blocks, "model");
    read(m, "groups", c.model.groups, "model");
    read(m, "tokens_per_group", c.model.tokens_per_group, "model");
    read(m, "group_token_counts", c.model.group_token_counts, "model");
    read(m, "adaptive", c.adaptive, "model");
    read(m, "token_budget", c.token_budget, "model");
    read(m, "seed", c.model.seed, "model");
    read(m, "routing_init_std", c.model.routing_init_std, "model");
    if (c.adaptive && m.contains("group_token_counts")) {
      throw ConfigError("model.adaptive and model.group_token_counts are mutually exclusive");
    }
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t, "train",
                   {"base_lr", "batch", "epochs", "warmup_epochs", "seed", "perceptual_weight", "mode",
                    "labeled_fraction", "stage1_epochs", "beta1", "beta2", "weight_decay", "eps"});
    read(t, "base_lr", c.train.base_lr, "train");
    read(t, "batch", c.train.effective_batch, "train");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "warmup_epochs", c.train.warmup_epochs, "train");
    read(t, "seed", c.train.seed, "train");
    read(t, "perceptual_weight", c.train.perceptual_weight, "train");
    if (t.contains("mode")) {
      std::string mode;
      read(t, "mode", mode, "train");
      c.train.mode = parse_mode(mode);
    }
    read(t, "labeled_fraction", c.train.labeled_fraction, "train");
    read(t, "stage1_epochs", c.train.semi_stage1_epochs, "train");
    read(t, "beta1", c.train.optimizer.beta1, "train");
    read(t, "beta2", c.train.optimizer.beta2, "train");
    read(t, "weight_decay", c.train.optimizer.weight_decay, "train");
    read(t, "eps", c.train.optimizer.eps, "train");
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, "data", {"path", "test_path", "spec", "test_spec"});
    read(d, "path", c.data.path, "data");
    read(d, "test_path", c.data.test_path, "data");
    if (d.contains("spec")) detail::read_spec(d["spec"], c.data.spec, "data.spec");
    if (d.contains("test_spec")) detail::read_spec(d["test_spec"], c.data.test_spec, "data.test_spec");
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    reject_unknown(e, "eval", {"theta_noise", "theta_mask"});
    read(e, "theta_noise", c.eval.theta_noise, "eval");
    read(e, "theta_mask", c.eval.theta_mask, "eval");
  }
  c.model.validate();
  c.train.validate();
  c.data.spec.validate();
  c.data.test_spec.validate();
  for (const auto* sp : {&c.data.spec, &c.data.test_spec}) {
    if (sp->groups != c.model.groups || sp->height != c.model.height || sp->width != c.model.width) {
      throw ConfigError("data spec (" + std::to_string(sp->height) + "x" + std::to_string(sp->width) + ", " +
                        std::to_string(sp->groups) + " groups) does not match the model (" +
                        std::to_string(c.model.height) + "x" + std::to_string(c.model.width) + ", " +
                        std::to_string(c.model.groups) + " groups)");
    }
  }
  if (!(c.eval.theta_noise < c.eval.theta_mask)) throw ConfigError("eval.theta_noise must be below eval.theta_mask");
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

// Fixes group_token_counts from mean per-group volumes when adaptive allocation is on.
inline void resolve_tokens(RunConfig& c, std::span<const PhantomSample> data) {
  if (!c.adaptive) return;
  const std::size_t budget = c.token_budget ? c.token_budget : c.model.token_groups() * c.model.tokens_per_group;
  const auto volumes = group_volumes(data, c.model.groups);
  c.model.group_token_counts = allocate_tokens(volumes, budget);
  c.adaptive = false;
}

// Complete effective configuration; parsing it back yields the same RunConfig.
inline Json to_json(const RunConfig& c) {
  Json model = {{"height", c.model.height},
                {"width", c.model.width},
                {"channels", c.model.channels},
                {"patch", c.model.patch},
                {"dim", c.model.dim},
                {"heads", c.model.heads},
                {"enc_blocks", c.model.enc_blocks},
                {"tge_blocks", c.model.tge_blocks},
                {"dec_blocks", c.model.dec_blocks},
                {"groups", c.model.groups},
                {"tokens_per_group", c.model.tokens_per_group},
                {"seed", c.model.seed},
                {"routing_init_std", c.model.routing_init_std}};
  if (c.adaptive) {
    model["adaptive"] = true;
    model["token_budget"] = c.token_budget;
  } else if (!c.model.group_token_counts.empty()) {
    model["group_token_counts"] = c.model.group_token_counts;
  }
  Json train = {{"base_lr", c.train.base_lr},
                {"batch", c.train.effective_batch},
                {"epochs", c.train.epochs},
                {"warmup_epochs", c.train.warmup_epochs},
                {"seed", c.train.seed},
                {"perceptual_weight", c.train.perceptual_weight},
                {"mode", mode_name(c.train.mode)},
                {"labeled_fraction", c.train.labeled_fraction},
                {"stage1_epochs", c.train.semi_stage1_epochs},
                {"beta1", c.train.optimizer.beta1},
                {"beta2", c.train.optimizer.beta2},
                {"weight_decay", c.train.optimizer.weight_decay},
                {"eps", c.train.optimizer.eps}};
  Json data = {{"spec", detail::spec_json(c.data.spec)}, {"test_spec", detail::spec_json(c.data.test_spec)}};
  if (!c.data.path.empty()) data["path"] = c.data.path;
  if (!c.data.test_path.empty()) data["test_path"] = c.data.test_path;
  return {{"model", model},
          {"train", train},
          {"data", data},
          {"eval", {{"theta_noise", c.eval.theta_noise}, {"theta_mask", c.eval.theta_mask}}}};
}

inline void write_run_config(const std::string& path, const RunConfig& c) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << to_json(c).dump(2) << '\n';
}

}  // namespace owt
