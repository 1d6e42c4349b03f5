#include <catch2/catch_amalgamated.hpp>

#include "diva/defend.hpp"
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

ModelPair quant_pair(uint64_t seed, const std::vector<Batch>& data) {
  Model m = sgd_train(testutil::dense_net(seed), data, 0.05f, 5);
  AdaptedModel am = qat_train(m, data, 0.05f, 1);
  return make_model_pair(std::move(m), std::move(am));
}

bool same_params(const Model& a, const Model& b) {
  if (a.params.size() != b.params.size()) return false;
  for (const auto& [name, t] : a.params) {
    auto it = b.params.find(name);
    if (it == b.params.end() || it->second.data != t.data) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("defense config defaults and validation") {
  DefenseConfig cfg;
  REQUIRE(cfg.variant == DefenseVariant::minimax_diva_qat);
  REQUIRE(cfg.epochs == 5);
  REQUIRE(cfg.n_distill == 30);
  REQUIRE(cfg.qat_epochs == 2);
  REQUIRE(cfg.early_stop_rel == 0.001f);
  REQUIRE(cfg.early_stop_window == 2);
  REQUIRE_NOTHROW(validate_defense_config(cfg));

  auto bad = [](auto&& mutate) {
    DefenseConfig c;
    mutate(c);
    return c;
  };
  REQUIRE_THROWS_AS(validate_defense_config(bad([](DefenseConfig& c) { c.epochs = -1; })),
                    ConfigError);
  REQUIRE_THROWS_AS(validate_defense_config(bad([](DefenseConfig& c) { c.outer_lr = 0.0f; })),
                    ConfigError);
  REQUIRE_THROWS_AS(
      validate_defense_config(bad([](DefenseConfig& c) { c.inner.epsilon = 2.0f; })),
      ConfigError);

  // the distillation sample budget is only constrained for that variant
  REQUIRE_THROWS_AS(validate_defense_config(bad([](DefenseConfig& c) {
                      c.variant = DefenseVariant::minimax_diva_qat_distill;
                      c.n_distill = 19;
                    })),
                    ConfigError);
  REQUIRE_THROWS_AS(validate_defense_config(bad([](DefenseConfig& c) {
                      c.variant = DefenseVariant::minimax_diva_qat_distill;
                      c.n_distill = 51;
                    })),
                    ConfigError);
  REQUIRE_NOTHROW(validate_defense_config(bad([](DefenseConfig& c) {
    c.variant = DefenseVariant::minimax_diva_qat_distill;
    c.n_distill = 20;
  })));
  REQUIRE_NOTHROW(validate_defense_config(bad([](DefenseConfig& c) {
    c.variant = DefenseVariant::minimax_diva_qat_distill;
    c.n_distill = 50;
  })));
  REQUIRE_NOTHROW(validate_defense_config(bad([](DefenseConfig& c) { c.n_distill = 19; })));

  REQUIRE(defense_variant_from("minimax_pgd") == DefenseVariant::minimax_pgd);
  REQUIRE(defense_variant_from("minimax_diva_qat") == DefenseVariant::minimax_diva_qat);
  REQUIRE(defense_variant_from("minimax_diva_qat_distill") ==
          DefenseVariant::minimax_diva_qat_distill);
  REQUIRE_THROWS_AS(defense_variant_from("trades"), ConfigError);
  for (DefenseVariant v : {DefenseVariant::minimax_pgd, DefenseVariant::minimax_diva_qat,
                           DefenseVariant::minimax_diva_qat_distill})
    REQUIRE(defense_variant_from(defense_variant_name(v)) == v);
}

TEST_CASE("each entry point rejects a mismatched config variant") {
  std::vector<Batch> data = toy_batches(5, 2, 4);
  ModelPair pair = quant_pair(5, data);
  Rng rng = make_rng(1);

  DefenseConfig diva_cfg;  // defaults to minimax_diva_qat
  REQUIRE_THROWS_AS(minimax_pgd_train(pair.original, data, diva_cfg), ConfigError);

  DefenseConfig pgd_cfg;
  pgd_cfg.variant = DefenseVariant::minimax_pgd;
  REQUIRE_THROWS_AS(minimax_diva_qat(pair, data, pgd_cfg), ConfigError);
  REQUIRE_THROWS_AS(minimax_diva_qat_distill(pair, data, pgd_cfg, rng), ConfigError);
}

TEST_CASE("a zero-step inner attack makes robust training plain sgd") {
  std::vector<Batch> data = toy_batches(9, 3, 8);
  Model seed = testutil::dense_net(9);

  DefenseConfig cfg;
  cfg.variant = DefenseVariant::minimax_pgd;
  cfg.inner.steps = 0;  // adversarial twin equals the clean batch
  cfg.epochs = 2;       // too short for the early-stop window to trigger
  cfg.qat_epochs = 1;

  ModelPair pair = minimax_pgd_train(seed, data, cfg);
  Model plain = sgd_train(seed, data, cfg.outer_lr, cfg.epochs);
  REQUIRE(same_params(pair.original, plain));

  // the adapted twin is the qat of the robust model
  AdaptedModel expect = qat_train(plain, data, cfg.outer_lr, cfg.qat_epochs, cfg.bits);
  REQUIRE(same_params(pair.adapted.base, expect.base));
  for (const auto& [name, w] : expect.wq) REQUIRE(pair.adapted.wq.at(name).codes == w.codes);
  REQUIRE(pair.adapted.is_quantized());
}

TEST_CASE("robust training hardens the model against its inner attack") {
  std::vector<Batch> data = toy_batches(13, 3, 8);
  Model undefended = sgd_train(testutil::dense_net(13), data, 0.05f, 6);

  DefenseConfig cfg;
  cfg.variant = DefenseVariant::minimax_pgd;
  cfg.inner.epsilon = 0.1f;
  cfg.inner.alpha = 0.025f;
  cfg.inner.steps = 5;
  cfg.epochs = 6;
  cfg.qat_epochs = 0;
  ModelPair defended = minimax_pgd_train(undefended, data, cfg);

  auto attack_rate = [&](const Model& m) {
    AttackConfig a = cfg.inner;
    int hits = 0, total = 0;
    for (const Batch& b : data)
      for (int i = 0; i < b.size(); ++i) {
        Tensor x({4}, std::vector<float>(b.inputs.data.begin() + i * 4,
                                         b.inputs.data.begin() + i * 4 + 4));
        hits += pgd_attack(m, x, b.labels[static_cast<size_t>(i)], a).attack_success;
        ++total;
      }
    return static_cast<float>(hits) / static_cast<float>(total);
  };
  REQUIRE(attack_rate(defended.original) <= attack_rate(undefended));
}

TEST_CASE("early stopping ends robust training after the stall window") {
  std::vector<Batch> data = toy_batches(17, 2, 6);
  Model seed = testutil::dense_net(17);

  // an unreachable improvement bar stalls immediately: epoch 0 seeds the
  // baseline, epochs 1 and 2 stall, training stops after three epochs
  DefenseConfig stop;
  stop.variant = DefenseVariant::minimax_pgd;
  stop.inner.steps = 0;
  stop.epochs = 10;
  stop.qat_epochs = 0;
  stop.early_stop_rel = 1e9f;
  stop.early_stop_window = 2;
  ModelPair stopped = minimax_pgd_train(seed, data, stop);

  DefenseConfig full = stop;
  full.epochs = 3;
  full.early_stop_window = 100;  // never triggers
  ModelPair ran3 = minimax_pgd_train(seed, data, full);
  REQUIRE(same_params(stopped.original, ran3.original));

  // and three epochs differ from ten, so the stop really happened
  DefenseConfig long_run = full;
  long_run.epochs = 10;
  ModelPair ran10 = minimax_pgd_train(seed, data, long_run);
  REQUIRE_FALSE(same_params(stopped.original, ran10.original));
}

TEST_CASE("differential defense with zero epochs returns the pair unchanged") {
  std::vector<Batch> data = toy_batches(21, 2, 6);
  ModelPair pair = quant_pair(21, data);

  DefenseConfig cfg;
  cfg.epochs = 0;
  ModelPair out = minimax_diva_qat(pair, data, cfg);
  REQUIRE(same_params(out.original, pair.original));
  REQUIRE(same_params(out.adapted.base, pair.adapted.base));
  for (const auto& [name, w] : pair.adapted.wq) REQUIRE(out.adapted.wq.at(name).codes == w.codes);
}

TEST_CASE("differential defense retrains the adapted model and freezes the original") {
  std::vector<Batch> data = toy_batches(25, 3, 8);
  ModelPair pair = quant_pair(25, data);

  DefenseConfig cfg;
  cfg.epochs = 2;
  cfg.inner.steps = 3;
  ModelPair out = minimax_diva_qat(pair, data, cfg);

  // theta_f: bit-for-bit untouched
  REQUIRE(same_params(out.original, pair.original));
  // theta_q: moved
  REQUIRE_FALSE(same_params(out.adapted.base, pair.adapted.base));
  REQUIRE(arch_equal(out.adapted.base, pair.adapted.base));
  REQUIRE(out.adapted.is_quantized());

  // the returned codes are the freeze of the final latent weights
  for (const auto& [name, t] : out.adapted.base.params) {
    const WeightQuant& w = out.adapted.wq.at(name);
    REQUIRE(w.qp == choose_qparams(t, out.adapted.bits));
    REQUIRE(w.codes == quantize(t, w.qp));
  }

  // activation calibration is inherited, not recomputed
  REQUIRE(out.adapted.act_qp.size() == pair.adapted.act_qp.size());
  for (size_t i = 0; i < out.adapted.act_qp.size(); ++i)
    REQUIRE(out.adapted.act_qp[i] == pair.adapted.act_qp[i]);
}

TEST_CASE("the distillation variant also leaves the original untouched") {
  std::vector<Batch> data = toy_batches(31, 2, 6);
  ModelPair pair = quant_pair(31, data);

  DefenseConfig cfg;
  cfg.variant = DefenseVariant::minimax_diva_qat_distill;
  cfg.epochs = 1;
  cfg.inner.steps = 2;
  cfg.n_distill = 20;
  Rng rng = make_rng(77);
  ModelPair out = minimax_diva_qat_distill(pair, data, cfg, rng);

  REQUIRE(same_params(out.original, pair.original));
  REQUIRE_FALSE(same_params(out.adapted.base, pair.adapted.base));
  REQUIRE(out.adapted.is_quantized());

  // reproducible under the same seed
  Rng rng2 = make_rng(77);
  ModelPair again = minimax_diva_qat_distill(pair, data, cfg, rng2);
  REQUIRE(same_params(out.adapted.base, again.adapted.base));
}

TEST_CASE("differential defenses require a quantized adapted model") {
  std::vector<Batch> data = toy_batches(35, 2, 6);
  Model m = sgd_train(testutil::dense_net(35), data, 0.05f, 3);
  AdaptedModel pruned = prune_magnitude(m, 0.3f, data, 0);
  ModelPair pair = make_model_pair(std::move(m), std::move(pruned));

  DefenseConfig cfg;
  cfg.epochs = 1;
  REQUIRE_THROWS_AS(minimax_diva_qat(pair, data, cfg), ConfigError);
}
