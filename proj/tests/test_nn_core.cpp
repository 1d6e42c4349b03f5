#include <catch2/catch_amalgamated.hpp>

#include "diva/nn.hpp"
#include "test_util.hpp"

using namespace diva;
using Catch::Approx;

namespace {

// Hand-checkable two-layer net with exactly representable weights:
//   x=[1, .5, -.5] -> dense -> relu -> dense -> logits [1.25, -0.125]
Model oracle_net() {
  Model m = make_model({3});
  add_dense(m, 2);
  add_relu(m);
  add_dense(m, 2);
  finalize_classifier(m, 2);
  m.param("w0").data = {0.5f, -1.0f, 1.0f, 0.25f, -0.25f, 0.5f};
  m.param("b0").data = {0.125f, -0.25f};
  m.param("w2").data = {1.0f, -0.5f, 0.5f, 1.0f};
  m.param("b2").data = {0.0f, 0.5f};
  return m;
}

Tensor oracle_input() { return Tensor({1, 3}, {1.0f, 0.5f, -0.5f}); }

}  // namespace

TEST_CASE("forward matches the frozen scalar oracle exactly") {
  Model m = oracle_net();
  Tensor logits = forward(m, oracle_input());
  REQUIRE(logits.shape == std::vector<int>{1, 2});
  REQUIRE(logits.data[0] == 1.25f);
  REQUIRE(logits.data[1] == -0.125f);
}

TEST_CASE("softmax and cross entropy match the float64 oracle") {
  Model m = oracle_net();
  Tensor logits = forward(m, oracle_input());
  Tensor p = softmax_probs(logits);
  REQUIRE(p.data[0] == Approx(0.7981867777396212).margin(1e-6));
  REQUIRE(p.data[1] == Approx(0.20181322226037882).margin(1e-6));
  REQUIRE(p.data[0] + p.data[1] == Approx(1.0).margin(1e-6));
  REQUIRE(cross_entropy(logits, {1}) == Approx(1.600412651601648).margin(1e-5));
}

TEST_CASE("cross entropy input gradient matches the float64 oracle") {
  Model m = oracle_net();
  Batch b{oracle_input(), {1}};
  Grads g = grad(m, b);
  REQUIRE(g.loss == Approx(1.600412651601648).margin(1e-5));
  REQUIRE(g.input.data[0] == Approx(0.5986400833047159).margin(1e-5));
  REQUIRE(g.input.data[1] == Approx(1.1972801666094317).margin(1e-5));
  REQUIRE(g.input.data[2] == Approx(-0.2993200416523579).margin(1e-5));
}

TEST_CASE("true class probability loss matches the float64 oracle") {
  Model m = oracle_net();
  Batch b{oracle_input(), {1}};
  Grads g = grad(m, b, TrueClassProbLoss{});
  REQUIRE(g.loss == Approx(0.20181322226037882).margin(1e-6));
  REQUIRE(g.input.data[0] == Approx(-0.12081348418594631).margin(1e-6));
  REQUIRE(g.input.data[1] == Approx(-0.24162696837189263).margin(1e-6));
  REQUIRE(g.input.data[2] == Approx(0.06040674209297316).margin(1e-6));
}

TEST_CASE("true class logit loss is the raw logit") {
  Model m = oracle_net();
  Tensor logits = forward(m, oracle_input());
  Tensor dlogits;
  float v = TrueClassLogitLoss{}.eval(logits, {1}, &dlogits);
  REQUIRE(v == -0.125f);
  REQUIRE(dlogits.data == std::vector<float>{0.0f, 1.0f});
}

TEST_CASE("conv2d matches the frozen cross-correlation oracle") {
  Model m = make_model({4, 4, 1});
  add_conv2d(m, 1);
  add_flatten(m);
  m.num_classes = 16;
  m.param("w0").data = {0.5f, -0.25f, 0.125f, 1.0f, 0.0f, -1.0f, 0.25f, -0.5f, 0.75f};
  m.param("b0").data = {0.0625f};
  Tensor x({1, 4, 4, 1}, {0.0f, 0.25f, 0.5f, 0.75f, 1.0f, 0.125f, 0.25f, 0.375f, 0.5f, 0.625f,
                          0.75f, 0.875f, 0.25f, 0.5f, 0.75f, 1.0f});
  Tensor out = forward(m, x);
  // computed with an independent float64 implementation
  std::vector<float> expect = {-0.59375f, -0.0625f, -0.25f, 0.4375f, 0.1875f, 1.1875f, 0.34375f,
                               0.125f, -0.546875f, 0.6875f, 0.359375f, 0.53125f, -0.484375f,
                               -0.25f, -0.203125f, 0.96875f};
  REQUIRE(out.data.size() == expect.size());
  for (size_t i = 0; i < expect.size(); ++i)
    REQUIRE(out.data[i] == Approx(expect[i]).margin(1e-7));
}

TEST_CASE("maxpool picks window maxima; ties keep scan order") {
  Tensor x({1, 4, 4, 1}, {1.0f, 1.0f, 0.2f, 0.1f,   //
                          0.5f, 0.3f, 0.9f, 0.95f,  //
                          0.0f, 0.1f, 0.2f, 0.3f,   //
                          0.4f, 0.45f, 0.35f, 0.25f});
  std::vector<int> argmax;
  Tensor y = maxpool_forward(x, &argmax);
  REQUIRE(y.shape == std::vector<int>{1, 2, 2, 1});
  REQUIRE(y.data == std::vector<float>{1.0f, 0.95f, 0.45f, 0.35f});
  REQUIRE(argmax[0] == 0);  // tie between (0,0) and (0,1): first in scan order

  Tensor dy({1, 2, 2, 1}, {1.0f, 2.0f, 3.0f, 4.0f});
  Tensor dx = maxpool_backward(argmax, x.shape, dy);
  REQUIRE(dx.data[0] == 1.0f);
  REQUIRE(dx.data[1] == 0.0f);
  REQUIRE(dx.data[7] == 2.0f);   // 0.95 at flat index 7
  REQUIRE(dx.data[13] == 3.0f);  // 0.45 at flat index 13
  REQUIRE(dx.data[14] == 4.0f);  // 0.35 at flat index 14
}

TEST_CASE("odd spatial extents are rejected by the pool builder") {
  Model m = make_model({1, 4, 1});
  REQUIRE_THROWS_AS(add_maxpool2x2(m), ShapeError);
}

TEST_CASE("topk orders by probability with index tiebreak") {
  Tensor row({4}, {1.0f, 1.0f, 0.0f, 1.0f});
  REQUIRE(topk_from_logits(row, 3) == std::vector<int>{0, 1, 3});
  REQUIRE(topk_from_logits(row, 4) == std::vector<int>{0, 1, 3, 2});

  Model m = oracle_net();
  REQUIRE(predict1(m, Tensor({3}, {1.0f, 0.5f, -0.5f})) == 0);
  REQUIRE(predict_topk(m, Tensor({3}, {1.0f, 0.5f, -0.5f}), 2) == std::vector<int>{0, 1});
  REQUIRE_THROWS_AS(predict_topk(m, Tensor({3}), 0), ConfigError);
  REQUIRE_THROWS_AS(predict_topk(m, Tensor({3}), 3), ConfigError);
}

TEST_CASE("shape mistakes are rejected") {
  Model m = oracle_net();
  REQUIRE_THROWS_AS(forward(m, Tensor({1, 4})), ShapeError);
  REQUIRE_THROWS_AS(predict1(m, Tensor({4})), ShapeError);
  Model flat = make_model({2, 2, 1});
  REQUIRE_THROWS_AS(add_dense(flat, 3), ShapeError);

  Tensor logits = forward(m, oracle_input());
  REQUIRE_THROWS_AS(cross_entropy(logits, {2}), DataError);
  REQUIRE_THROWS_AS(cross_entropy(logits, {0, 1}), DataError);
}

TEST_CASE("penultimate activations are the last dense layer's input") {
  Model m = oracle_net();
  Tensor act = penultimate_activations(m, Tensor({3}, {1.0f, 0.5f, -0.5f}));
  REQUIRE(act.shape == std::vector<int>{2});
  REQUIRE(act.data == std::vector<float>{1.25f, 0.0f});
}

TEST_CASE("cross entropy gradients match finite differences") {
  CrossEntropyLoss ce;
  int instances = 0;
  for (uint64_t seed = 1; seed <= 30 && instances < 10; ++seed) {
    bool used = false;
    for (int which = 0; which < 2; ++which) {
      Model m = which == 0 ? testutil::dense_net(seed) : testutil::conv_net(seed);
      Tensor x;
      if (!testutil::try_kink_free_input(m, seed * 7 + static_cast<uint64_t>(which), 2, &x))
        continue;
      used = true;
      std::vector<int> labels = {static_cast<int>(seed % 3), static_cast<int>((seed + 1) % 3)};
      Batch b{x, labels};
      Grads g = grad(m, b, ce);

      auto loss_at = [&]() { return ce.eval(forward(m, b.inputs), b.labels, nullptr); };
      for (size_t i = 0; i < b.inputs.numel(); ++i) {
        float fd = testutil::central_diff(loss_at, b.inputs, i);
        INFO("seed " << seed << " net " << which << " input coord " << i);
        REQUIRE(testutil::grad_close(fd, g.input.data[i]));
      }
      for (auto& [name, gt] : g.params) {
        Tensor& p = m.param(name);
        for (size_t i = 0; i < p.numel(); ++i) {
          float fd = testutil::central_diff(loss_at, p, i);
          INFO("seed " << seed << " net " << which << " param " << name << " coord " << i);
          REQUIRE(testutil::grad_close(fd, gt.data[i]));
        }
      }
    }
    if (used) ++instances;
  }
  REQUIRE(instances >= 10);
}

TEST_CASE("probability loss gradient matches finite differences") {
  TrueClassProbLoss pl;
  int instances = 0;
  for (uint64_t seed = 20; seed < 50 && instances < 10; ++seed) {
    Model m = testutil::conv_net(seed);
    Tensor x;
    if (!testutil::try_kink_free_input(m, seed, 1, &x)) continue;
    ++instances;
    Batch b{x, {static_cast<int>(seed % 3)}};
    Grads g = grad(m, b, pl);
    auto loss_at = [&]() { return pl.eval(forward(m, b.inputs), b.labels, nullptr); };
    for (size_t i = 0; i < b.inputs.numel(); ++i) {
      float fd = testutil::central_diff(loss_at, b.inputs, i);
      INFO("seed " << seed << " coord " << i);
      REQUIRE(testutil::grad_close(fd, g.input.data[i]));
    }
  }
  REQUIRE(instances >= 10);
}

TEST_CASE("sgd_train reduces the loss and respects trivial arguments") {
  Model m = testutil::dense_net(3);
  Rng rng = make_rng(90);
  std::vector<Batch> data;
  for (int bi = 0; bi < 4; ++bi) {
    Tensor x = uniform_tensor({8, 4}, 0.0f, 1.0f, rng);
    std::vector<int> ys;
    // learnable rule: label depends on which input coordinate is largest
    for (int i = 0; i < 8; ++i) {
      const float* r = x.ptr() + i * 4;
      int arg = 0;
      for (int j = 1; j < 3; ++j)
        if (r[j] > r[arg]) arg = j;
      ys.push_back(arg);
    }
    data.push_back(make_batch(std::move(x), std::move(ys)));
  }

  Model before = m;
  Model same = sgd_train(m, data, 0.1f, 0);
  REQUIRE(params_checksum(same) == params_checksum(before));

  std::vector<float> losses;
  Model trained = sgd_train(m, data, 0.1f, 25, &losses);
  REQUIRE(losses.size() == 25);
  REQUIRE(losses.back() < losses.front());
  REQUIRE(accuracy(trained, data) > accuracy(before, data));

  REQUIRE_THROWS_AS(sgd_train(m, data, 0.0f, 1), ConfigError);
  REQUIRE_THROWS_AS(sgd_train(m, data, 0.1f, -1), ConfigError);
}

TEST_CASE("batch construction validates inputs") {
  REQUIRE_THROWS_AS(make_batch(Tensor({0, 3}), {}), DataError);
  REQUIRE_THROWS_AS(make_batch(Tensor({2, 3}), {1}), DataError);
  REQUIRE_THROWS_AS(make_batch(Tensor({1, 3}), {-1}), DataError);
  Batch ok = make_batch(Tensor({2, 3}), {0, 1});
  REQUIRE(ok.size() == 2);
}

TEST_CASE("arch equality tracks structure not parameters") {
  Model a = testutil::dense_net(1), b = testutil::dense_net(2);
  REQUIRE(arch_equal(a, b));
  REQUIRE(params_checksum(a) != params_checksum(b));
  Model c = testutil::conv_net(1);
  REQUIRE_FALSE(arch_equal(a, c));
}
