#pragma once

// Command-line front end: gen / train / eval. run() returns the process exit
// code so the commands can be driven in-process from tests.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "owt/analysis.hpp"
#include "owt/config.hpp"
#include "owt/flops.hpp"
#include "owt/params.hpp"

namespace owt::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kDiverged = 3, kShape = 4 };

namespace fs = std::filesystem;

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

struct GenArgs {
  std::size_t count = 0;
  std::optional<std::size_t> height, width, groups;
  std::optional<double> lesion_probability;
};

struct TrainArgs {
  std::string data;
  std::optional<std::size_t> epochs;
  std::optional<std::string> mode;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string groups = "all";
  bool metrics = false, retrieval = false, probe = false, project = false, flops = false, holistic = false;
  std::size_t queries = 100;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

inline RunConfig base_config(const Globals& g) {
  return g.config.empty() ? parse_run_config(Json::object()) : load_run_config(g.config);
}

inline void require_geometry(const ModelConfig& m, std::size_t h, std::size_t w, std::size_t groups,
                             const std::string& what) {
  if (h != m.height || w != m.width || groups != m.groups) {
    throw DimensionError(what + " holds [" + std::to_string(h) + " x " + std::to_string(w) + "] images with " +
                         std::to_string(groups) + " groups, model expects [" + std::to_string(m.height) + " x " +
                         std::to_string(m.width) + "] with " + std::to_string(m.groups));
  }
}

inline std::vector<PhantomSample> load_or_generate(const std::string& path, const PhantomSpec& spec,
                                                   const ModelConfig& m, const std::string& what) {
  if (path.empty()) {
    require_geometry(m, spec.height, spec.width, spec.groups, what + " spec");
    return generate(spec);
  }
  auto ds = read_owtd(path);
  require_geometry(m, ds.height, ds.width, ds.groups, "'" + path + "'");
  return std::move(ds.samples);
}

inline std::uint64_t dataset_hash(std::span<const PhantomSample> data, std::size_t groups) {
  return fnv1a(encode_owtd(data, groups));
}

// ---- gen -------------------------------------------------------------------

inline int cmd_gen(const Globals& g, const GenArgs& a, Streams io) {
  if (g.out.empty()) {
    io.err << "gen: --out is required\n";
    return kUsage;
  }
  PhantomSpec spec = g.config.empty() ? PhantomSpec{} : base_config(g).data.spec;
  if (g.seed) spec.seed = *g.seed;
  if (a.count) spec.count = a.count;
  if (a.height) spec.height = *a.height;
  if (a.width) spec.width = *a.width;
  if (a.groups) spec.groups = *a.groups;
  if (a.lesion_probability) spec.lesion_probability = *a.lesion_probability;
  const auto data = generate(spec);
  write_owtd(data, spec.groups, g.out);
  io.out << "wrote " << data.size() << " samples (" << spec.height << "x" << spec.width << ", " << spec.groups
         << " groups) to " << g.out << '\n';
  return kOk;
}

// ---- train -----------------------------------------------------------------

inline int cmd_train(const Globals& g, const TrainArgs& a, Streams io) {
  if (g.out.empty()) {
    io.err << "train: --out is required\n";
    return kUsage;
  }
  RunConfig cfg = base_config(g);
  if (g.seed) {
    cfg.train.seed = *g.seed;
    cfg.model.seed = *g.seed;
  }
  if (a.epochs) {
    // Keep the configured warmup fraction.
    cfg.train.warmup_epochs *= static_cast<double>(*a.epochs) / static_cast<double>(cfg.train.epochs);
    cfg.train.epochs = *a.epochs;
  }
  if (a.mode) cfg.train.mode = parse_mode(*a.mode);
  if (!a.data.empty()) cfg.data.path = a.data;
  cfg.train.validate();

  const auto data = load_or_generate(cfg.data.path, cfg.data.spec, cfg.model, "training data");
  resolve_tokens(cfg, data);
  fs::create_directories(g.out);
  const fs::path dir(g.out);
  write_run_config((dir / "config.json").string(), cfg);

  auto model = OwtModel::init(cfg.model);
  auto params = model.parameters();
  const auto ckpt = (dir / "model.owtw").string();
  save_checkpoint(ckpt, params);

  TrainLog log, stage1_log;
  auto recorder = [&io](TrainLog& into, const char* tag) {
    TrainHooks h;
    h.on_step = [&into](const StepRecord& r) { into.rows.push_back(r); };
    h.on_epoch = [&into, &io, tag](std::size_t epoch) {
      io.out << tag << " epoch " << epoch << " loss " << into.rows.back().loss << '\n';
    };
    return h;
  };
  auto stage2 = recorder(log, "train");
  const auto inner_epoch = stage2.on_epoch;
  stage2.on_epoch = [&](std::size_t e) {
    inner_epoch(e);
    save_checkpoint(ckpt, params);
  };
  int code = kOk;
  try {
    if (cfg.train.mode == TrainMode::kSemi) {
      auto stage1 = recorder(stage1_log, "stage1");
      const auto s1_epoch = stage1.on_epoch;
      stage1.on_epoch = [&](std::size_t e) {
        s1_epoch(e);
        save_checkpoint((dir / "stage1.owtw").string(), params);
      };
      train_semi(model, data, cfg.train.labeled_fraction, cfg.train, stage1, stage2);
    } else {
      AdamW opt(model.parameters(), cfg.train.optimizer);
      train(model, opt, data, cfg.train, cfg.train.mode, stage2);
    }
  } catch (const NumericError& e) {
    io.err << "train: " << e.what() << "; last good checkpoint kept at " << ckpt << '\n';
    code = kDiverged;
  }
  log.write_csv((dir / "train_log.csv").string());
  if (cfg.train.mode == TrainMode::kSemi) stage1_log.write_csv((dir / "stage1_log.csv").string());
  if (code == kOk) io.out << "checkpoint " << ckpt << '\n';
  return code;
}

// ---- eval ------------------------------------------------------------------

inline std::vector<std::size_t> parse_groups(const std::string& spec, std::size_t g) {
  std::vector<std::size_t> out;
  if (spec == "all") return out;
  if (spec == "each") {
    for (std::size_t k = 1; k <= g; ++k) out.push_back(k);
    return out;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long k = 0;
    try {
      k = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || item.empty()) throw ConfigError("--groups expects all, each or a list like 1,3");
    if (k > g) throw ConfigError("--groups: group " + item + " exceeds group count " + std::to_string(g));
    out.push_back(k);
  }
  return out;
}

inline void print_flops(const ModelConfig& m, Streams io) {
  const auto shape = FlopsShape::from_model(m, GroupLayout(m.token_counts()).total());
  const auto owt = count_flops(shape);
  const auto base = count_flops_holistic(shape, m.enc_blocks + m.tge_blocks);
  char line[160];
  auto g = [](double v) { return v / 1e9; };
  io.out << "GFLOPs (multiply-accumulates, parametric layers)\n";
  io.out << "model        Enc      OC   TG Enc    AHER     Dec    Total\n";
  std::snprintf(line, sizeof line, "holistic %7.2f       -        -       - %7.2f %8.2f\n", g(base.encoder),
                g(base.decoder), g(base.total()));
  io.out << line;
  std::snprintf(line, sizeof line, "OWT      %7.2f %7.3f %8.2f %7.3f %7.2f %8.2f\n", g(owt.encoder), g(owt.collector),
                g(owt.group_encoder), g(owt.restorer), g(owt.decoder), g(owt.total()));
  io.out << line;
}

inline int cmd_eval(const Globals& g, const EvalArgs& a, Streams io) {
  RunConfig cfg;
  if (!g.config.empty()) {
    cfg = load_run_config(g.config);
  } else if (!a.checkpoint.empty() && fs::exists(fs::path(a.checkpoint).parent_path() / "config.json")) {
    cfg = load_run_config((fs::path(a.checkpoint).parent_path() / "config.json").string());
  } else {
    cfg = parse_run_config(Json::object());
  }
  if (a.flops) print_flops(cfg.model, io);
  const bool any = a.metrics || a.retrieval || a.probe || a.project;
  if (!any) return kOk;
  if (a.checkpoint.empty()) {
    io.err << "eval: --checkpoint is required for --metrics/--retrieval/--probe/--project\n";
    return kUsage;
  }
  const fs::path dir(g.out.empty() ? "." : g.out);
  fs::create_directories(dir);
  auto model = OwtModel::init(cfg.model);
  auto params = model.parameters();
  load_checkpoint(a.checkpoint, params);
  auto test_spec = cfg.data.test_spec;
  if (g.seed) test_spec.seed = *g.seed;
  const auto data = load_or_generate(a.data.empty() ? cfg.data.test_path : a.data, test_spec, cfg.model, "eval data");
  const auto groups = parse_groups(a.groups, cfg.model.groups);
  const auto organ_groups = groups.empty() ? parse_groups("each", cfg.model.groups) : groups;

  if (a.metrics) {
    EvalOptions opt;
    opt.theta_noise = cfg.eval.theta_noise;
    opt.theta_mask = cfg.eval.theta_mask;
    opt.groups = groups;
    opt.holistic = a.holistic;
    auto report = evaluate(model, data, opt);
    report.model_hash = fnv1a(encode_checkpoint(params));
    report.dataset_hash = dataset_hash(data, cfg.model.groups);
    std::ofstream((dir / "metrics.json").string()) << to_json(report).dump(2) << '\n';
    io.out << "reconstruction (" << report.selection << "): mse " << report.mse << " ssim " << report.ssim << '\n';
    for (const auto& s : report.groups) {
      io.out << "group " << s.group << ": mse " << s.mse << " dice " << s.dice << " dice_indirect "
             << s.dice_indirect << " independence_ratio " << s.independence_ratio() << '\n';
    }
  }
  if (a.retrieval) {
    std::vector<std::uint64_t> ids;
    std::vector<std::vector<RetrievalHit>> hits;
    for (auto k : organ_groups) {
      const auto st = retrieval_study(model, data, k, a.queries);
      ids.insert(ids.end(), st.query_ids.begin(), st.query_ids.end());
      hits.insert(hits.end(), st.hits.begin(), st.hits.end());
      io.out << "retrieval group " << k << ": self top-1 " << st.self_top1 << "/" << st.queries
             << ", top-1 closer than median " << st.closer_than_median << '\n';
    }
    write_retrieval_csv((dir / "retrieval.csv").string(), ids, hits);
  }
  if (a.probe) {
    const std::size_t split = data.size() * 7 / 10;
    const std::span<const PhantomSample> all(data);
    Json out = Json::array();
    for (auto k : organ_groups) {
      const auto st = probe_study(model, all.first(split), all.subspan(split), k);
      out.push_back({{"group", k},
                     {"group_accuracy", st.group_probe.accuracy},
                     {"holistic_accuracy", st.holistic_probe.accuracy},
                     {"majority_baseline", st.group_probe.majority_baseline},
                     {"positive_rate", st.positive_rate}});
      io.out << "probe group " << k << ": group tokens " << st.group_probe.accuracy << ", holistic "
             << st.holistic_probe.accuracy << ", majority " << st.group_probe.majority_baseline << '\n';
    }
    std::ofstream((dir / "probe.json").string()) << out.dump(2) << '\n';
  }
  if (a.project) {
    const auto st = projection_study(model, data, g.seed.value_or(0));
    write_projection_csv((dir / "projection.csv").string(), st);
    io.out << "projection: inter-centroid " << st.inter_centroid << ", intra spread " << st.intra_spread
           << (st.pca.rank_deficient ? " (rank deficient)" : "") << '\n';
  }
  return kOk;
}

// ---- entry -----------------------------------------------------------------

inline int run(int argc, const char* const* argv, Streams io = {}) {
  CLI::App app{"Organ-wise tokenization: phantoms, training and evaluation"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "JSON run configuration");
  auto* seed_opt = app.add_option("--seed", seed, "override the run seed");
  app.add_option("--out", g.out, "output file (gen) or directory (train, eval)");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "write a phantom dataset (OWTD)");
  gen_cmd->add_option("--count", gen.count, "number of samples");
  gen_cmd->add_option("--height", gen.height);
  gen_cmd->add_option("--width", gen.width);
  gen_cmd->add_option("--groups", gen.groups, "organ groups (1..8)");
  gen_cmd->add_option("--lesion-probability", gen.lesion_probability);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  train_cmd->add_option("--data", tr.data, "OWTD training set (default: generate from config)");
  train_cmd->add_option("--epochs", tr.epochs);
  train_cmd->add_option("--mode", tr.mode, "tgr | holistic | semi");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint);
  eval_cmd->add_option("--data", ev.data, "OWTD evaluation set (default: generate from config)");
  eval_cmd->add_option("--groups", ev.groups, "all | each | comma list of organ groups");
  eval_cmd->add_flag("--metrics", ev.metrics, "reconstruction and segmentation report");
  eval_cmd->add_flag("--retrieval", ev.retrieval, "organ-level L2 retrieval");
  eval_cmd->add_flag("--probe", ev.probe, "lesion linear probe");
  eval_cmd->add_flag("--project", ev.project, "PCA projection of token groups");
  eval_cmd->add_flag("--flops", ev.flops, "analytic compute breakdown");
  eval_cmd->add_flag("--holistic", ev.holistic, "whole-image metrics through encoder and decoder only");
  eval_cmd->add_option("--queries", ev.queries, "retrieval queries per group");

  // Global flags are accepted after the verb as well.
  for (auto* sub : {gen_cmd, train_cmd, eval_cmd}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, io.out, io.err);
    return rc == 0 ? kOk : kUsage;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*gen_cmd) return cmd_gen(g, gen, io);
    if (*train_cmd) return cmd_train(g, tr, io);
    return cmd_eval(g, ev, io);
  } catch (const DimensionError& e) {
    io.err << "shape error: " << e.what() << '\n';
    return kShape;
  } catch (const NumericError& e) {
    io.err << "numeric error: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::invalid_argument& e) {  // config, spec and data errors
    io.err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    io.err << "format error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace owt::cli
