#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "diva/distill.hpp"
#include "test_util.hpp"

using namespace diva;
using Catch::Approx;

namespace {

std::vector<Batch> toy_batches(uint64_t seed, int nb, int bs) {
  Rng rng = make_rng(seed);
  std::vector<Batch> out;
  for (int b = 0; b < nb; ++b) {
    Batch bt;
    bt.inputs = Tensor({bs, 4});
    for (float& v : bt.inputs.data) v = rng.uniform(0.05f, 0.95f);
    bt.labels.resize(static_cast<size_t>(bs));
    for (int i = 0; i < bs; ++i) bt.labels[static_cast<size_t>(i)] = (b * bs + i) % 3;
    out.push_back(std::move(bt));
  }
  return out;
}

AdaptedModel trained_victim(uint64_t seed) {
  std::vector<Batch> data = toy_batches(seed ^ 0x99u, 3, 8);
  Model m = sgd_train(testutil::dense_net(seed), data, 0.05f, 6);
  return qat_train(m, data, 0.05f, 1);
}

}  // namespace

TEST_CASE("temperature softmax matches the frozen float64 oracle") {
  Tensor logits({1, 3}, {2.0f, 0.0f, -1.0f});
  Tensor p = softmax_with_temperature(logits, 4.0f);
  REQUIRE(p.data[0] == Approx(0.48102426325336967).margin(1e-6));
  REQUIRE(p.data[1] == Approx(0.29175596372884977).margin(1e-6));
  REQUIRE(p.data[2] == Approx(0.2272197730177806).margin(1e-6));

  // temperature one is the plain softmax
  REQUIRE(softmax_with_temperature(logits, 1.0f).data == softmax_probs(logits).data);
}

TEST_CASE("kl divergence matches the frozen oracle and its identities") {
  Tensor p({1, 3}, {0.7f, 0.2f, 0.1f});
  Tensor q({1, 3}, {0.5f, 0.25f, 0.25f});
  REQUIRE(kl_divergence(p, q) == Approx(0.09927278218459154).margin(1e-6));

  // KL of a distribution against itself is exactly zero
  REQUIRE(kl_divergence(p, p) == 0.0f);

  // rows average: duplicating the row keeps the value
  Tensor p2({2, 3}, {0.7f, 0.2f, 0.1f, 0.7f, 0.2f, 0.1f});
  Tensor q2({2, 3}, {0.5f, 0.25f, 0.25f, 0.5f, 0.25f, 0.25f});
  REQUIRE(kl_divergence(p2, q2) == Approx(0.09927278218459154).margin(1e-6));

  // zero p entries contribute nothing instead of NaN
  Tensor pz({1, 2}, {1.0f, 0.0f});
  Tensor qz({1, 2}, {0.5f, 0.5f});
  REQUIRE(kl_divergence(pz, qz) == Approx(std::log(2.0)).margin(1e-6));

  REQUIRE_THROWS_AS(kl_divergence(p, pz), ShapeError);
}

TEST_CASE("distillation loss and gradient match the frozen oracle") {
  DistillConfig cfg;  // T=4, lambda=0.5
  Tensor s({1, 3}, {1.0f, -0.5f, 0.25f});
  // teacher probabilities: softmax of logits {0.5, 0.5, -1}
  Tensor t({1, 3}, {0.4498162176582741f, 0.4498162176582741f, 0.10036756468345168f});

  Tensor dlogits;
  float loss = detail::distill_loss_and_dlogits(s, t, cfg, &dlogits);
  REQUIRE(loss == Approx(0.47083225311923033).margin(1e-5));
  REQUIRE(dlogits.data[0] == Approx(-0.15453359226096275).margin(1e-5));
  REQUIRE(dlogits.data[1] == Approx(-0.13217782708676606).margin(1e-5));
  REQUIRE(dlogits.data[2] == Approx(0.2867114193477284).margin(1e-5));

  // the analytic gradient agrees with finite differences on the student logits
  auto f = [&] { return detail::distill_loss_and_dlogits(s, t, cfg, nullptr); };
  for (size_t i = 0; i < s.numel(); ++i) {
    float fd = testutil::central_diff(f, s, i);
    INFO("logit " << i);
    REQUIRE(testutil::grad_close(fd, dlogits.data[i]));
  }
}

TEST_CASE("hard labels take the teacher argmax with first-index ties") {
  DistillConfig cfg;
  cfg.mix_lambda = 1.0f;  // pure hard-label CE
  Tensor s({1, 3}, {0.0f, 0.0f, 0.0f});
  Tensor p1 = softmax_probs(s);

  // tied maximum keeps the first index
  Tensor tie({1, 3}, {0.45f, 0.45f, 0.10f});
  Tensor d;
  detail::distill_loss_and_dlogits(s, tie, cfg, &d);
  REQUIRE(d.data[0] == p1.data[0] - 1.0f);
  REQUIRE(d.data[1] == p1.data[1]);
  REQUIRE(d.data[2] == p1.data[2]);

  Tensor second({1, 3}, {0.10f, 0.45f, 0.45f});
  detail::distill_loss_and_dlogits(s, second, cfg, &d);
  REQUIRE(d.data[0] == p1.data[0]);
  REQUIRE(d.data[1] == p1.data[1] - 1.0f);
  REQUIRE(d.data[2] == p1.data[2]);

  REQUIRE_THROWS_AS(
      detail::distill_loss_and_dlogits(s, Tensor({1, 2}, {0.5f, 0.5f}), cfg, nullptr),
      ShapeError);
}

TEST_CASE("the lambda endpoints isolate the two loss terms") {
  Tensor s({2, 3}, {1.0f, -0.5f, 0.25f, -0.2f, 0.8f, 0.1f});
  Tensor t({2, 3}, {0.6f, 0.3f, 0.1f, 0.2f, 0.7f, 0.1f});

  DistillConfig hard;
  hard.mix_lambda = 1.0f;
  float ce = detail::distill_loss_and_dlogits(s, t, hard, nullptr);
  REQUIRE(ce == Approx(cross_entropy(s, {0, 1})).margin(1e-6));

  DistillConfig soft;
  soft.mix_lambda = 0.0f;
  float kl_term = detail::distill_loss_and_dlogits(s, t, soft, nullptr);
  Tensor t_logits = t;
  for (float& v : t_logits.data) v = std::log(v + 1e-12f);
  Tensor pt = softmax_with_temperature(t_logits, soft.temperature);
  Tensor ps = softmax_with_temperature(s, soft.temperature);
  float expect = soft.temperature * soft.temperature * kl_divergence(pt, ps);
  REQUIRE(kl_term == Approx(expect).margin(1e-6));
}

TEST_CASE("distill config validation") {
  DistillConfig ok;
  REQUIRE_NOTHROW(validate_distill_config(ok));
  REQUIRE(ok.temperature == 4.0f);
  REQUIRE(ok.mix_lambda == 0.5f);

  auto bad = [](auto&& mutate) {
    DistillConfig c;
    mutate(c);
    return c;
  };
  REQUIRE_THROWS_AS(validate_distill_config(bad([](DistillConfig& c) { c.temperature = 0.0f; })),
                    ConfigError);
  REQUIRE_THROWS_AS(validate_distill_config(bad([](DistillConfig& c) { c.mix_lambda = -0.1f; })),
                    ConfigError);
  REQUIRE_THROWS_AS(validate_distill_config(bad([](DistillConfig& c) { c.mix_lambda = 1.1f; })),
                    ConfigError);
  REQUIRE_THROWS_AS(validate_distill_config(bad([](DistillConfig& c) { c.epochs = -1; })),
                    ConfigError);

  // the transfer set must not be the victim's own training set
  REQUIRE_THROWS_AS(validate_distill_config(bad([](DistillConfig& c) {
                      c.transfer_id = "synth-7";
                      c.victim_train_id = "synth-7";
                    })),
                    ConfigError);
  REQUIRE_NOTHROW(validate_distill_config(bad([](DistillConfig& c) {
    c.transfer_id = "synth-9";
    c.victim_train_id = "synth-7";
  })));
}

TEST_CASE("distillation drives the student toward the teacher") {
  std::vector<Batch> victim_data = toy_batches(71, 3, 8);
  Model teacher_model = sgd_train(testutil::dense_net(71), victim_data, 0.05f, 8);
  TeacherFn teacher = teacher_from(teacher_model);

  std::vector<Batch> transfer = toy_batches(72, 3, 8);
  Model student = testutil::dense_net(5);

  DistillConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 0.1f;
  auto batch_loss = [&](const Model& st) {
    return detail::distill_loss_and_dlogits(forward(st, transfer[0].inputs),
                                            teacher(transfer[0].inputs), cfg, nullptr);
  };
  float before = batch_loss(student);
  Model after = distill(teacher, student, transfer, cfg);
  REQUIRE(batch_loss(after) < before);

  // zero epochs return the student untouched
  DistillConfig zero = cfg;
  zero.epochs = 0;
  Model same = distill(teacher, student, transfer, zero);
  REQUIRE(params_checksum(same) == params_checksum(student));

  REQUIRE_THROWS_AS(distill(teacher, student, {}, cfg), DataError);
}

TEST_CASE("the dequantized clone carries only the public artifact") {
  AdaptedModel victim = trained_victim(81);
  Model clone = dequantized_clone(victim);
  REQUIRE(arch_equal(clone, victim.base));
  for (const auto& [name, t] : clone.params)
    REQUIRE(t.data == victim.wq.at(name).deq.data);

  // pruned-only victims expose their masked weights directly
  std::vector<Batch> data = toy_batches(82, 2, 8);
  Model m = sgd_train(testutil::dense_net(82), data, 0.05f, 4);
  AdaptedModel pruned = prune_magnitude(m, 0.4f, data, 1);
  Model pclone = dequantized_clone(pruned);
  for (const auto& [name, t] : pclone.params) REQUIRE(t.data == pruned.base.param(name).data);

  AdaptedModel nocodes = trained_victim(83);
  nocodes.wq.clear();
  REQUIRE_THROWS_AS(dequantized_clone(nocodes), ConfigError);
}

TEST_CASE("semi-blackbox with zero epochs pairs the clone with the victim") {
  AdaptedModel victim = trained_victim(91);
  std::vector<Batch> transfer = toy_batches(92, 3, 8);

  DistillConfig cfg;
  cfg.epochs = 0;
  ModelPair pair = build_semi_blackbox(victim, transfer, cfg);
  Model clone = dequantized_clone(victim);
  REQUIRE(params_checksum(pair.original) == params_checksum(clone));
  REQUIRE(params_checksum(pair.adapted.base) == params_checksum(victim.base));
  for (const auto& [name, w] : victim.wq) REQUIRE(pair.adapted.wq.at(name).codes == w.codes);

  // with transfer training the surrogate moves away from the clone
  DistillConfig go = cfg;
  go.epochs = 4;
  ModelPair refined = build_semi_blackbox(victim, transfer, go);
  REQUIRE(params_checksum(refined.original) != params_checksum(clone));
  REQUIRE(arch_equal(refined.original, victim.base));
}

TEST_CASE("blackbox construction touches the victim only through queries") {
  AdaptedModel victim = trained_victim(101);
  std::vector<Batch> transfer = toy_batches(102, 3, 8);

  int queries = 0;
  TeacherFn counted = [&](const Tensor& inputs) {
    ++queries;
    return softmax_probs(adapted_logits(victim, inputs));
  };

  DistillConfig cfg;
  cfg.epochs = 3;
  cfg.qat_epochs = 1;
  Rng rng = make_rng(55);
  ModelPair pair = build_blackbox(counted, testutil::dense_net(1), transfer, cfg, rng);

  // one query per batch per distillation epoch; QAT adds none
  REQUIRE(queries == 3 * 3);
  REQUIRE(arch_equal(pair.original, victim.base));
  REQUIRE(pair.adapted.is_quantized());
  REQUIRE(params_checksum(pair.original) != params_checksum(victim.base));
  REQUIRE(params_checksum(pair.adapted.base) != params_checksum(victim.base));

  REQUIRE_THROWS_AS(build_blackbox(counted, testutil::dense_net(1), {}, cfg, rng), DataError);
}

TEST_CASE("the stream protocol round-trips probabilities exactly") {
  AdaptedModel victim = trained_victim(111);
  Tensor inputs({2, 4}, {0.1f, 0.2f, 0.3f, 0.4f, 0.9f, 0.8f, 0.7f, 0.6f});
  Tensor expect = softmax_probs(adapted_logits(victim, inputs));

  // phase one: the client-side writer produces the request lines
  std::stringstream c2s, s2c, sink;
  {
    char buf[32];
    for (int i = 0; i < 2; ++i) {
      c2s << "q";
      for (int j = 0; j < 4; ++j) {
        std::snprintf(buf, sizeof buf, " %.9g",
                      static_cast<double>(inputs.data[static_cast<size_t>(i) * 4 + j]));
        c2s << buf;
      }
      c2s << "\n";
    }
    c2s << "quit\n";
    c2s << "q 0.5 0.5 0.5 0.5\n";  // after quit: must be ignored
  }
  serve_teacher(victim, c2s, s2c);

  // phase two: the client parses the buffered responses
  TeacherFn remote = stdio_teacher_client(s2c, sink, {4}, 3);
  Tensor got = remote(inputs);
  REQUIRE(got.shape == expect.shape);
  // %.9g preserves every float bit across the text round-trip
  REQUIRE(got.data == expect.data);

  // nothing beyond the two responses was produced
  std::string leftover;
  REQUIRE_FALSE(std::getline(s2c, leftover));
}

TEST_CASE("the stream protocol reports malformed requests without dying") {
  AdaptedModel victim = trained_victim(121);
  std::stringstream c2s, s2c;
  c2s << "x 1 2 3 4\n";           // unknown tag
  c2s << "q 0.1 0.2\n";           // wrong arity
  c2s << "q 0.1 0.2 0.3 0.4\n";   // valid
  c2s << "quit\n";
  serve_teacher(victim, c2s, s2c);

  std::string l1, l2, l3, extra;
  REQUIRE(std::getline(s2c, l1));
  REQUIRE(l1.rfind("err ", 0) == 0);
  REQUIRE(std::getline(s2c, l2));
  REQUIRE(l2 == "err expected 4 values, got 2");
  REQUIRE(std::getline(s2c, l3));
  REQUIRE(l3.rfind("p ", 0) == 0);
  REQUIRE_FALSE(std::getline(s2c, extra));

  // the client surfaces an err response as an exception
  std::stringstream errs("err boom\n"), sink;
  TeacherFn bad = stdio_teacher_client(errs, sink, {4}, 3);
  Tensor x({1, 4}, {0.1f, 0.2f, 0.3f, 0.4f});
  REQUIRE_THROWS_AS(bad(x), DataError);

  // a closed stream mid-session is an error, not a hang
  std::stringstream closed, sink2;
  TeacherFn dead = stdio_teacher_client(closed, sink2, {4}, 3);
  REQUIRE_THROWS_AS(dead(x), DataError);
}

TEST_CASE("in-process teacher wrappers return the model's softmax") {
  AdaptedModel victim = trained_victim(131);
  Tensor x({1, 4}, {0.3f, 0.5f, 0.7f, 0.2f});
  REQUIRE(teacher_from(victim)(x).data == softmax_probs(adapted_logits(victim, x)).data);
  Model m = sgd_train(testutil::dense_net(131), toy_batches(132, 2, 8), 0.05f, 3);
  REQUIRE(teacher_from(m)(x).data == softmax_probs(forward(m, x)).data);
}
