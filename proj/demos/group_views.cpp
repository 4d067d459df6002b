// Writes one PGM strip per phantom: input, each token group decoded on its own,
// then all groups together. Trains a small model first unless --checkpoint is given.
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "owt/config.hpp"
#include "owt/params.hpp"
#include "owt/tgr.hpp"

namespace {

void write_pgm(const std::string& path, const std::vector<owt::Image>& tiles) {
  const std::size_t h = tiles.front().height, w = tiles.front().width, gap = 2;
  const std::size_t width = tiles.size() * (w + gap) - gap;
  std::vector<unsigned char> px(h * width, 255);
  for (std::size_t t = 0; t < tiles.size(); ++t)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        px[y * width + t * (w + gap) + x] =
            static_cast<unsigned char>(std::clamp(tiles[t].at(y, x), 0.0f, 1.0f) * 255.0f + 0.5f);
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << width << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

}  // namespace

int main(int argc, char** argv) {
  using namespace owt;
  CLI::App app{"Decode each token group of a few phantoms separately"};
  std::string config_path = OWT_CONFIG_DIR "/tiny.json", checkpoint, out_dir = "group_views";
  std::size_t samples = 4;
  app.add_option("--config", config_path);
  app.add_option("--checkpoint", checkpoint);
  app.add_option("--samples", samples);
  app.add_option("--out", out_dir);
  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = load_run_config(config_path);
    auto model = OwtModel::init(cfg.model);
    if (checkpoint.empty()) {
      const auto data = generate(cfg.data.spec);
      AdamW opt(model.parameters(), cfg.train.optimizer);
      train(model, opt, data, cfg.train, TrainMode::kTgr);
    } else {
      auto params = model.parameters();
      load_checkpoint(checkpoint, params);
    }

    auto spec = cfg.data.test_spec;
    spec.count = samples;
    const auto test = generate(spec);
    std::filesystem::create_directories(out_dir);
    const NoGradGuard no_grad;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto img = to_tensor(test[i].image);
      std::vector<Image> tiles{test[i].image};
      for (std::size_t k = 0; k <= cfg.model.groups; ++k)
        tiles.push_back(to_image(forward_owt(img, RetainedSelection{{k}}, model).image));
      tiles.push_back(to_image(forward_owt(img, RetainedSelection::all(cfg.model.groups + 1), model).image));
      const auto path = (std::filesystem::path(out_dir) / ("sample_" + std::to_string(i) + ".pgm")).string();
      write_pgm(path, tiles);
      std::cout << path << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
