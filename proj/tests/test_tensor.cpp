#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "convmpn/layers.hpp"
#include "convmpn/ops.hpp"
#include "convmpn/optim.hpp"
#include "convmpn/tensor.hpp"
#include "oracles.hpp"

using namespace convmpn;
using oracles::random_tensor;

TEST_CASE("tensor invariants", "[tensor]") {
  auto t = Tensor<float>::zeros({2, 3});
  REQUIRE(t.numel() == 6);
  REQUIRE_THROWS_AS(Tensor<float>::from({2, 2}, {1.f, 2.f, 3.f}), std::invalid_argument);
  REQUIRE_THROWS_AS(t.item(), std::invalid_argument);

  t.set_requires_grad(true);
  REQUIRE(t.grad().size() == 6);

  DebugChecks::finite() = true;
  auto bad = Tensor<float>::from({2}, {1.f, std::numeric_limits<float>::infinity()});
  bad.set_requires_grad(true);
  REQUIRE_THROWS(relu(bad));
  DebugChecks::finite() = false;
}

TEST_CASE("conv2d matches declared shapes", "[tensor][conv]") {
  Rng rng(7);
  SECTION("7x7 stride 1 keeps 256 spatial size") {
    auto x = random_tensor<float>({4, 256, 256}, rng);
    auto w = random_tensor<float>({16, 4, 7, 7}, rng, 0.1);
    auto b = random_tensor<float>({16}, rng, 0.1);
    auto y = conv2d(x, w, b, 1, 3);
    REQUIRE(y.shape() == Shape{16, 256, 256});
  }
  SECTION("identity 1x1 kernel") {
    auto x = random_tensor<float>({1, 5, 5}, rng);
    auto w = Tensor<float>::from({1, 1, 1, 1}, {1.f});
    auto b = Tensor<float>::zeros({1});
    auto y = conv2d(x, w, b, 1, 0);
    for (int i = 0; i < x.numel(); ++i) REQUIRE(y.data()[i] == x.data()[i]);
  }
  SECTION("shape mismatch names both shapes") {
    auto x = random_tensor<float>({3, 8, 8}, rng);
    auto w = random_tensor<float>({4, 2, 3, 3}, rng);
    auto b = Tensor<float>::zeros({4});
    try {
      conv2d(x, w, b, 1, 1);
      FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      REQUIRE(msg.find("(3,8,8)") != std::string::npos);
      REQUIRE(msg.find("(4,2,3,3)") != std::string::npos);
    }
  }
}

TEST_CASE("conv2d equals the direct nested-loop oracle", "[tensor][conv][oracle]") {
  Rng rng(11);
  SECTION("stated 3x3 single-filter case") {
    auto x = random_tensor<float>({1, 3, 3}, rng);
    auto w = random_tensor<float>({1, 1, 2, 2}, rng);
    auto b = random_tensor<float>({1}, rng);
    auto y = conv2d(x, w, b, 1, 0);
    auto ref = oracles::conv2d_direct(x.vec(), 1, 3, 3, w.vec(), 1, 2, 2, b.vec(), 1, 0);
    REQUIRE(y.numel() == static_cast<std::int64_t>(ref.size()));
    for (size_t i = 0; i < ref.size(); ++i)
      REQUIRE(std::abs(y.data()[i] - ref[i]) < 1e-6f);
  }
  SECTION("random geometry sweep on <=8x8 inputs") {
    for (int it = 0; it < 25; ++it) {
      const int cin = rng.range(1, 3), cout = rng.range(1, 4);
      const int h = rng.range(3, 8), w = rng.range(3, 8);
      const int k = rng.range(1, 3);
      const int stride = rng.range(1, 2), pad = rng.range(0, 2);
      if (h + 2 * pad < k || w + 2 * pad < k) continue;
      auto x = random_tensor<float>({cin, h, w}, rng);
      auto wt = random_tensor<float>({cout, cin, k, k}, rng);
      auto b = random_tensor<float>({cout}, rng);
      auto y = conv2d(x, wt, b, stride, pad);
      auto ref = oracles::conv2d_direct(x.vec(), cin, h, w, wt.vec(), cout, k, k, b.vec(),
                                        stride, pad);
      for (size_t i = 0; i < ref.size(); ++i)
        REQUIRE(std::abs(y.data()[i] - ref[i]) < 1e-6f);
    }
  }
  SECTION("batched input equals per-image results") {
    auto x = random_tensor<float>({3, 2, 6, 6}, rng);
    auto w = random_tensor<float>({4, 2, 3, 3}, rng);
    auto b = random_tensor<float>({4}, rng);
    auto y = conv2d(x, w, b, 1, 1);
    REQUIRE(y.shape() == Shape{3, 4, 6, 6});
    for (int i = 0; i < 3; ++i) {
      std::vector<float> img(x.data() + i * 2 * 36, x.data() + (i + 1) * 2 * 36);
      auto ref = oracles::conv2d_direct(img, 2, 6, 6, w.vec(), 4, 3, 3, b.vec(), 1, 1);
      for (size_t j = 0; j < ref.size(); ++j)
        REQUIRE(std::abs(y.data()[i * 4 * 36 + j] - ref[j]) < 1e-5f);
    }
  }
}

TEST_CASE("batch_norm statistics and modes", "[tensor][bn]") {
  Rng rng(3);
  SECTION("eval with matching running stats zeroes a constant input") {
    auto x = Tensor<float>::full({2, 3, 2, 2}, 0.f);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int j = 0; j < 4; ++j) x.data()[(n * 3 + c) * 4 + j] = 1.f + c;
    auto gamma = Tensor<float>::full({3}, 1.f);
    auto beta = Tensor<float>::zeros({3});
    std::vector<float> rm = {1.f, 2.f, 3.f}, rv = {1.f, 1.f, 1.f};
    auto y = batch_norm(x, gamma, beta, rm, rv, false);
    for (int i = 0; i < y.numel(); ++i) REQUIRE(std::abs(y.data()[i]) < 1e-6f);
  }
  SECTION("train mode normalizes each channel") {
    auto x = random_tensor<float>({2, 3, 4, 4}, rng, 2.0);
    auto gamma = Tensor<float>::full({3}, 1.f);
    auto beta = Tensor<float>::zeros({3});
    std::vector<float> rm(3, 0.f), rv(3, 1.f);
    auto y = batch_norm(x, gamma, beta, rm, rv, true);
    for (int c = 0; c < 3; ++c) {
      double mean = 0, var = 0;
      for (int n = 0; n < 2; ++n)
        for (int j = 0; j < 16; ++j) mean += y.data()[(n * 3 + c) * 16 + j];
      mean /= 32;
      for (int n = 0; n < 2; ++n)
        for (int j = 0; j < 16; ++j) {
          const double d = y.data()[(n * 3 + c) * 16 + j] - mean;
          var += d * d;
        }
      var /= 32;
      REQUIRE(std::abs(mean) < 1e-4);
      REQUIRE(std::abs(var - 1.0) < 1e-4);
    }
  }
  SECTION("zero-size slab rejected") {
    auto x = Tensor<float>::zeros({0, 3, 2, 2});
    auto gamma = Tensor<float>::full({3}, 1.f);
    auto beta = Tensor<float>::zeros({3});
    std::vector<float> rm(3, 0.f), rv(3, 1.f);
    REQUIRE_THROWS_AS(batch_norm(x, gamma, beta, rm, rv, true), std::invalid_argument);
  }
  SECTION("gradient through batch_norm matches finite differences") {
    auto x = random_tensor<float>({2, 2, 3, 3}, rng);
    x.set_requires_grad(true);
    auto gamma = Tensor<float>::full({2}, 1.f);
    auto beta = Tensor<float>::zeros({2});
    const double err = oracles::finite_difference_error(x, [&] {
      std::vector<float> rm(2, 0.f), rv(2, 1.f);
      // weight the sum so the gradient is not annihilated by normalization
      auto y = batch_norm(x, gamma, beta, rm, rv, true);
      std::vector<float> mask(y.numel());
      for (size_t i = 0; i < mask.size(); ++i) mask[i] = 0.1f * static_cast<float>(i % 7) - 0.2f;
      auto m = Tensor<float>::from(y.shape(), mask);
      return sum_all(mul(y, m));
    });
    REQUIRE(err < 1e-3);
  }
}

TEST_CASE("max_pool2d", "[tensor][pool]") {
  Rng rng(5);
  SECTION("declared 64->2 pooling shape") {
    auto x = random_tensor<float>({128, 64, 64}, rng);
    auto y = max_pool2d(x, 32, 32);
    REQUIRE(y.shape() == Shape{128, 2, 2});
  }
  SECTION("constant input stays constant") {
    auto x = Tensor<float>::full({2, 8, 8}, 3.5f);
    auto y = max_pool2d(x, 2, 2);
    REQUIRE(y.shape() == Shape{2, 4, 4});
    for (int i = 0; i < y.numel(); ++i) REQUIRE(y.data()[i] == 3.5f);
  }
  SECTION("matches the naive oracle on random 8x8") {
    auto x = random_tensor<float>({1, 8, 8}, rng);
    auto y = max_pool2d(x, 2, 2);
    auto ref = oracles::max_pool_direct(x.vec(), 1, 8, 8, 2, 2);
    for (size_t i = 0; i < ref.size(); ++i) REQUIRE(y.data()[i] == ref[i]);
  }
  SECTION("non-divisible input rejected") {
    auto x = random_tensor<float>({1, 7, 8}, rng);
    REQUIRE_THROWS_AS(max_pool2d(x, 2, 2), std::invalid_argument);
  }
  SECTION("tie routes gradient to the first element in row-major order") {
    auto x = Tensor<float>::full({1, 2, 2}, 1.f);
    x.set_requires_grad(true);
    auto loss = sum_all(max_pool2d(x, 2, 2));
    loss.backward();
    REQUIRE(x.grad()[0] == 1.f);
    REQUIRE(x.grad()[1] == 0.f);
    REQUIRE(x.grad()[2] == 0.f);
    REQUIRE(x.grad()[3] == 0.f);
  }
}

TEST_CASE("linear", "[tensor][linear]") {
  Rng rng(13);
  SECTION("identity weights pass input through") {
    auto x = random_tensor<float>({2, 4}, rng);
    std::vector<float> wid(16, 0.f);
    for (int i = 0; i < 4; ++i) wid[i * 4 + i] = 1.f;
    auto w = Tensor<float>::from({4, 4}, wid);
    auto b = Tensor<float>::zeros({4});
    auto y = linear(x, w, b);
    for (int i = 0; i < x.numel(); ++i) REQUIRE(y.data()[i] == Catch::Approx(x.data()[i]));
  }
  SECTION("512 -> 2 head shape") {
    auto x = random_tensor<float>({1, 512}, rng);
    auto w = random_tensor<float>({2, 512}, rng, 0.05);
    auto b = random_tensor<float>({2}, rng);
    REQUIRE(linear(x, w, b).shape() == Shape{1, 2});
  }
  SECTION("matches the dot-product oracle") {
    auto x = random_tensor<float>({3, 7}, rng);
    auto w = random_tensor<float>({5, 7}, rng);
    auto b = random_tensor<float>({5}, rng);
    auto y = linear(x, w, b);
    auto ref = oracles::linear_direct(x.vec(), 3, 7, w.vec(), 5, b.vec());
    for (size_t i = 0; i < ref.size(); ++i) REQUIRE(std::abs(y.data()[i] - ref[i]) < 1e-6f);
  }
  SECTION("dimension mismatch rejected") {
    auto x = random_tensor<float>({3, 7}, rng);
    auto w = random_tensor<float>({5, 6}, rng);
    auto b = Tensor<float>::zeros({5});
    REQUIRE_THROWS_AS(linear(x, w, b), std::invalid_argument);
  }
}

TEST_CASE("backward mechanics", "[tensor][autodiff]") {
  Rng rng(17);
  SECTION("sum of relu over positive inputs gives unit gradients") {
    auto x = random_tensor<float>({2, 3}, rng);
    for (int i = 0; i < x.numel(); ++i) x.data()[i] = std::abs(x.data()[i]) + 0.1f;
    x.set_requires_grad(true);
    auto loss = sum_all(relu(x));
    loss.backward();
    for (auto g : x.grad()) REQUIRE(g == 1.f);
  }
  SECTION("backward on non-scalar rejected") {
    auto x = random_tensor<float>({2, 3}, rng);
    x.set_requires_grad(true);
    auto y = relu(x);
    REQUIRE_THROWS_AS(y.backward(), std::invalid_argument);
  }
  SECTION("repeated backward accumulates") {
    auto x = Tensor<float>::from({2}, {1.f, 2.f});
    x.set_requires_grad(true);
    auto loss = sum_all(x);
    loss.backward();
    loss.backward();
    REQUIRE(x.grad()[0] == 2.f);
  }
  SECTION("weighted_bce gradient matches finite differences") {
    auto logits = random_tensor<float>({6, 2}, rng);
    logits.set_requires_grad(true);
    std::vector<float> targets = {1.f, 0.f, 1.f, 1.f, 0.f, 0.f};
    const double err = oracles::finite_difference_error(
        logits, [&] { return weighted_bce(softmax_pos2(logits), targets, 3.0f); }, 1e-3);
    REQUIRE(err < 1e-3);
  }
  SECTION("conv->relu->pool->linear chain matches finite differences") {
    auto x = random_tensor<float>({1, 2, 6, 6}, rng);
    auto w = random_tensor<float>({3, 2, 3, 3}, rng, 0.5);
    auto b = random_tensor<float>({3}, rng, 0.5);
    auto fw = random_tensor<float>({2, 27}, rng, 0.5);
    auto fb = random_tensor<float>({2}, rng, 0.5);
    w.set_requires_grad(true);
    auto forward = [&] {
      auto h = max_pool2d(relu(conv2d(x, w, b, 1, 1)), 2, 2);
      auto flat = reshape(h, {1, 27});
      return sum_all(linear(flat, fw, fb));
    };
    REQUIRE(oracles::finite_difference_error(w, forward, 1e-2) < 1e-2);
  }
}

// Per-primitive gradient checks against central differences. The loss is a
// masked sum so gradients cannot cancel; conv/linear are exactly linear per
// input so a coarse step only has to beat f32 rounding noise.
TEST_CASE("per-layer finite-difference sweep", "[tensor][autodiff][fd]") {
  Rng rng(23);
  auto mask_for = [&](const Shape& s) {
    std::vector<float> m(static_cast<size_t>(numel_of(s)));
    for (auto& v : m) v = static_cast<float>(rng.uniform(0.5, 1.5));
    return Tensor<float>::from(s, std::move(m));
  };

  SECTION("conv2d") {
    for (int it = 0; it < 20; ++it) {
      const int cin = rng.range(1, 2), cout = rng.range(1, 3);
      const int h = rng.range(3, 5), w = rng.range(3, 5);
      auto x = random_tensor<float>({1, cin, h, w}, rng);
      auto cw = random_tensor<float>({cout, cin, 3, 3}, rng, 0.5);
      auto cb = random_tensor<float>({cout}, rng, 0.5);
      x.set_requires_grad(true);
      cw.set_requires_grad(true);
      cb.set_requires_grad(true);
      Tensor<float> m;
      auto fwd = [&] {
        auto y = conv2d(x, cw, cb, 1, 1);
        if (!m) m = mask_for(y.shape());
        return sum_all(mul(y, m));
      };
      REQUIRE(oracles::finite_difference_error(x, fwd, 1e-2) < 1e-3);
      REQUIRE(oracles::finite_difference_error(cw, fwd, 1e-2) < 1e-3);
      REQUIRE(oracles::finite_difference_error(cb, fwd, 1e-2) < 1e-3);
    }
  }
  SECTION("linear") {
    for (int it = 0; it < 20; ++it) {
      const int n = rng.range(1, 3), din = rng.range(2, 6), dout = rng.range(1, 4);
      auto x = random_tensor<float>({n, din}, rng);
      auto w = random_tensor<float>({dout, din}, rng, 0.5);
      auto b = random_tensor<float>({dout}, rng, 0.5);
      x.set_requires_grad(true);
      w.set_requires_grad(true);
      b.set_requires_grad(true);
      Tensor<float> m;
      auto fwd = [&] {
        auto y = linear(x, w, b);
        if (!m) m = mask_for(y.shape());
        return sum_all(mul(y, m));
      };
      REQUIRE(oracles::finite_difference_error(x, fwd, 1e-2) < 1e-3);
      REQUIRE(oracles::finite_difference_error(w, fwd, 1e-2) < 1e-3);
      REQUIRE(oracles::finite_difference_error(b, fwd, 1e-2) < 1e-3);
    }
  }
  SECTION("relu") {
    for (int it = 0; it < 20; ++it) {
      auto x = random_tensor<float>({2, 6}, rng);
      // keep inputs away from the kink relative to the step
      for (int i = 0; i < x.numel(); ++i)
        if (std::abs(x.data()[i]) < 0.05f) x.data()[i] = x.data()[i] < 0 ? -0.05f : 0.05f;
      x.set_requires_grad(true);
      Tensor<float> m;
      auto fwd = [&] {
        auto y = relu(x);
        if (!m) m = mask_for(y.shape());
        return sum_all(mul(y, m));
      };
      REQUIRE(oracles::finite_difference_error(x, fwd, 1e-2) < 1e-3);
    }
  }
  SECTION("batch_norm") {
    for (int it = 0; it < 20; ++it) {
      const int c = rng.range(1, 3);
      auto x = random_tensor<float>({2, c, 3, 3}, rng);
      auto gamma = random_tensor<float>({c}, rng, 0.5);
      auto beta = random_tensor<float>({c}, rng, 0.5);
      x.set_requires_grad(true);
      gamma.set_requires_grad(true);
      beta.set_requires_grad(true);
      Tensor<float> m;
      auto fwd = [&] {
        std::vector<float> rm(static_cast<size_t>(c), 0.f), rv(static_cast<size_t>(c), 1.f);
        auto y = batch_norm(x, gamma, beta, rm, rv, true);
        if (!m) m = mask_for(y.shape());
        return sum_all(mul(y, m));
      };
      REQUIRE(oracles::finite_difference_error(x, fwd, 5e-3) < 1e-3);
      REQUIRE(oracles::finite_difference_error(gamma, fwd, 5e-3) < 1e-3);
      REQUIRE(oracles::finite_difference_error(beta, fwd, 5e-3) < 1e-3);
    }
  }
  SECTION("max_pool2d") {
    for (int it = 0; it < 20; ++it) {
      // redraw until every window has a clear argmax margin vs the FD step
      Tensor<float> x;
      bool ok = false;
      while (!ok) {
        x = random_tensor<float>({1, 4, 4}, rng);
        ok = true;
        for (int oh = 0; oh < 2 && ok; ++oh)
          for (int ow = 0; ow < 2 && ok; ++ow) {
            float top = -10.f, second = -10.f;
            for (int r = 0; r < 2; ++r)
              for (int cc = 0; cc < 2; ++cc) {
                const float v = x.data()[(oh * 2 + r) * 4 + ow * 2 + cc];
                if (v > top) {
                  second = top;
                  top = v;
                } else if (v > second) {
                  second = v;
                }
              }
            if (top - second < 0.1f) ok = false;
          }
      }
      x.set_requires_grad(true);
      Tensor<float> m;
      auto fwd = [&] {
        auto y = max_pool2d(x, 2, 2);
        if (!m) m = mask_for(y.shape());
        return sum_all(mul(y, m));
      };
      REQUIRE(oracles::finite_difference_error(x, fwd, 1e-2) < 1e-3);
    }
  }
}

TEST_CASE("sgd update and accumulation", "[tensor][sgd]") {
  SECTION("single step") {
    ParamRegistry<float> reg;
    auto p = Tensor<float>::zeros({1});
    p.set_requires_grad(true);
    reg.add("p", p);
    p.grad()[0] = 1.f;
    Sgd<float> opt(0.1f, 1);
    opt.step(reg);
    REQUIRE(p.data()[0] == Catch::Approx(-0.1f));
    REQUIRE(p.grad()[0] == 0.f);
  }
  SECTION("zero gradients leave parameters unchanged") {
    ParamRegistry<float> reg;
    auto p = Tensor<float>::from({2}, {1.f, -2.f});
    p.set_requires_grad(true);
    p.grad();  // allocate, stays zero
    reg.add("p", p);
    Sgd<float> opt(0.1f, 1);
    opt.step(reg);
    REQUIRE(p.data()[0] == 1.f);
    REQUIRE(p.data()[1] == -2.f);
  }
  SECTION("missing gradient rejected") {
    ParamRegistry<float> reg;
    auto p = Tensor<float>::zeros({2});
    p.set_requires_grad(true);
    reg.add("p", p);
    Sgd<float> opt(0.1f, 1);
    REQUIRE_THROWS_AS(opt.step(reg), std::runtime_error);
  }
  SECTION("8 accumulated batches equal one step with the mean gradient") {
    auto run = [](int accum, float grad_per_batch, int batches) {
      ParamRegistry<float> reg;
      auto p = Tensor<float>::zeros({1});
      p.set_requires_grad(true);
      reg.add("p", p);
      for (int i = 0; i < batches; ++i) p.grad()[0] += grad_per_batch;
      Sgd<float> opt(0.05f, accum);
      opt.step(reg);
      return p.data()[0];
    };
    // eight unit-gradient batches vs a single mean-gradient step
    REQUIRE(run(8, 1.f, 8) == run(1, 1.f, 1));
  }
}

TEST_CASE("determinism under fixed seeds", "[tensor][determinism]") {
  auto make = [] {
    Rng rng(99);
    auto x = random_tensor<float>({2, 3, 16, 16}, rng);
    auto w = random_tensor<float>({4, 3, 3, 3}, rng);
    auto b = random_tensor<float>({4}, rng);
    return conv2d(x, w, b, 1, 1);
  };
  auto a = make();
  auto b = make();
  REQUIRE(std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0);
}

TEST_CASE("layer spec shape algebra basics", "[tensor][shape]") {
  using LS = LayerSpec;
  Shape s = compose_shapes({LS::conv(4, 16, 7, 1), LS::residual(16, 16, 1),
                            LS::residual(16, 32, 2)},
                           {4, 256, 256});
  REQUIRE(s == Shape{32, 128, 128});
  REQUIRE(LS::pool(32, 32).output_shape({128, 64, 64}) == Shape{128, 2, 2});
  REQUIRE(LS::fc(512, 2).output_shape({128, 2, 2}) == Shape{2});
  REQUIRE_THROWS_AS(LS::conv(3, 8, 3, 1).output_shape({4, 16, 16}), std::invalid_argument);
}
