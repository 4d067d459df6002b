// Fits y = 3x - 1 with the tape autodiff and AdamW.
#include <cstdio>

#include "owt/ops.hpp"
#include "owt/optim.hpp"

int main() {
  using namespace owt;
  std::vector<float> xs, ys;
  for (int i = 0; i < 32; ++i) {
    const float x = -1.0f + 2.0f * static_cast<float>(i) / 31.0f;
    xs.push_back(x);
    ys.push_back(3.0f * x - 1.0f);
  }
  const auto x = Tensor::from_data({32, 1}, xs);
  const auto y = Tensor::from_data({32, 1}, ys);
  auto w = Tensor::from_data({1, 1}, {0.0f}, true);
  auto b = Tensor::from_data({1}, {0.0f}, true);

  ParameterSet params;
  params.add("w", w, true);
  params.add("b", b, false);
  AdamW opt(params, AdamWOptions{0.9, 0.999, 1e-8, 0.0});
  for (int step = 0; step <= 400; ++step) {
    opt.zero_grad();
    auto loss = mse_loss(affine(x, w, b), y);
    loss.backward();
    opt.step(0.05);
    if (step % 100 == 0) std::printf("step %3d  loss %.6f  w %.4f  b %.4f\n", step, loss.item(), w.data()[0], b.data()[0]);
  }
}
