#pragma once

#include "diva/differential.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Minimax defenses.
//
// 1. minimax_pgd_train: robust training of the full-precision model (inner
//    PGD maximization per minibatch, outer SGD on the adversarial loss),
//    followed by QAT to derive the adapted twin.
// 2. minimax_diva_qat: freeze the original, retrain only the adapted model to
//    minimize the differential loss on adversarial samples generated against
//    the current pair.
// 3. minimax_diva_qat_distill: method 2 plus a distillation step on a small
//    batch of generated adversarial samples, aligning the adapted model to
//    the original's soft outputs at temperature 1.
// ---------------------------------------------------------------------------

enum class DefenseVariant { minimax_pgd, minimax_diva_qat, minimax_diva_qat_distill };

inline const char* defense_variant_name(DefenseVariant v) {
  switch (v) {
    case DefenseVariant::minimax_pgd: return "minimax_pgd";
    case DefenseVariant::minimax_diva_qat: return "minimax_diva_qat";
    case DefenseVariant::minimax_diva_qat_distill: return "minimax_diva_qat_distill";
  }
  return "?";
}

inline DefenseVariant defense_variant_from(const std::string& s) {
  if (s == "minimax_pgd") return DefenseVariant::minimax_pgd;
  if (s == "minimax_diva_qat") return DefenseVariant::minimax_diva_qat;
  if (s == "minimax_diva_qat_distill") return DefenseVariant::minimax_diva_qat_distill;
  throw ConfigError("unknown defense variant: " + s);
}

struct DefenseConfig {
  DefenseVariant variant = DefenseVariant::minimax_diva_qat;
  AttackConfig inner;       // inner maximization (defaults: eps=8/255, 20 steps, no random start)
  float outer_lr = 0.05f;
  int epochs = 5;
  int n_distill = 30;       // adversarial samples per distillation step, in [20,50]
  int qat_epochs = 2;       // minimax_pgd: QAT budget after robust training
  int bits = 8;
  // Early stop for minimax_pgd: relative train-loss improvement below this
  // for `early_stop_window` consecutive epochs ends training.
  float early_stop_rel = 0.001f;
  int early_stop_window = 2;
};

inline void validate_defense_config(const DefenseConfig& cfg) {
  validate_attack_config(cfg.inner);
  if (cfg.epochs < 0) throw ConfigError("defense epochs must be >= 0");
  if (!(cfg.outer_lr > 0.0f)) throw ConfigError("defense outer_lr must be > 0");
  if (cfg.variant == DefenseVariant::minimax_diva_qat_distill &&
      (cfg.n_distill < 20 || cfg.n_distill > 50))
    throw ConfigError("n_distill must be in [20,50], got " + std::to_string(cfg.n_distill));
}

// ---------------------------------------------------------------------------
// Method 1: PGD robust training, then QAT
// ---------------------------------------------------------------------------

inline ModelPair minimax_pgd_train(Model model, const std::vector<Batch>& data,
                                   const DefenseConfig& cfg) {
  if (cfg.variant != DefenseVariant::minimax_pgd)
    throw ConfigError("minimax_pgd_train: config variant mismatch");
  validate_defense_config(cfg);
  int sample_elems = static_cast<int>(numel_of(model.input_shape));
  float prev_loss = 0.0f;
  bool have_prev = false;
  int stall = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    float total = 0.0f;
    long long count = 0;
    for (size_t bi = 0; bi < data.size(); ++bi) {
      const Batch& b = data[bi];
      // Inner maximization: adversarial twin of the minibatch against the
      // current parameters.
      Batch adv;
      adv.labels = b.labels;
      adv.inputs = Tensor(b.inputs.shape);
      for (int i = 0; i < b.size(); ++i) {
        Tensor x(model.input_shape,
                 std::vector<float>(
                     b.inputs.data.begin() + static_cast<long>(i) * sample_elems,
                     b.inputs.data.begin() + static_cast<long>(i + 1) * sample_elems));
        AttackResult r = pgd_attack(model, x, b.labels[static_cast<size_t>(i)], cfg.inner);
        std::copy(r.x_adv.data.begin(), r.x_adv.data.end(),
                  adv.inputs.data.begin() + static_cast<long>(i) * sample_elems);
      }
      Grads g = grad(model, adv);
      if (!std::isfinite(g.loss))
        throw NumericalError("minimax_pgd_train: non-finite loss at epoch " + std::to_string(e));
      for (auto& [name, gt] : g.params) axpy(-cfg.outer_lr, gt, model.param(name));
      total += g.loss * static_cast<float>(adv.size());
      count += adv.size();
    }
    float epoch_loss = count ? total / static_cast<float>(count) : 0.0f;
    if (have_prev) {
      bool improved = (prev_loss - epoch_loss) >= cfg.early_stop_rel * std::fabs(prev_loss);
      stall = improved ? 0 : stall + 1;
      if (stall >= cfg.early_stop_window) break;
    }
    prev_loss = epoch_loss;
    have_prev = true;
  }
  AdaptedModel adapted = qat_train(model, data, cfg.outer_lr, cfg.qat_epochs, cfg.bits);
  return make_model_pair(std::move(model), std::move(adapted));
}

// ---------------------------------------------------------------------------
// Methods 2 and 3: retrain the adapted model only
// ---------------------------------------------------------------------------

namespace detail {

// One SGD step on the adapted (latent) parameters under QAT/STE, from a
// d(loss)/d(logits) producer evaluated on the given inputs.
template <class DlogitsFn>
void adapted_sgd_step(AdaptedModel& am, const Tensor& inputs, float lr, DlogitsFn&& make_dlogits) {
  AdaptedTape tape;
  Tensor logits = adapted_forward_impl(am, inputs, &tape, true);
  Tensor dlogits = make_dlogits(logits);
  std::map<std::string, Tensor> grads;
  adapted_backward(am, tape, dlogits, &grads);
  for (auto& [name, g] : grads) axpy(-lr, g, am.base.param(name));
  enforce_masks(am.base, am.masks);
}

inline ModelPair minimax_diva_impl(const ModelPair& pair, const std::vector<Batch>& data,
                                   const DefenseConfig& cfg, bool with_distill, Rng& rng) {
  validate_defense_config(cfg);
  if (!pair.adapted.is_quantized())
    throw ConfigError("minimax_diva_qat: adapted model must be quantized");
  if (cfg.epochs == 0) return pair;

  const Model& original = pair.original;  // theta_f: read-only by construction
  AdaptedModel adapted = pair.adapted;
  int sample_elems = static_cast<int>(numel_of(original.input_shape));
  float c = cfg.inner.c;

  DivaObjective obj;
  obj.c = c;

  for (int e = 0; e < cfg.epochs; ++e) {
    for (size_t bi = 0; bi < data.size(); ++bi) {
      const Batch& b = data[bi];
      // The attack reads the deployed (frozen-code) view; keep it in sync
      // with the latent parameters.
      freeze_quant(adapted);

      Batch adv;
      adv.labels = b.labels;
      adv.inputs = Tensor(b.inputs.shape);
      for (int i = 0; i < b.size(); ++i) {
        Tensor x(original.input_shape,
                 std::vector<float>(
                     b.inputs.data.begin() + static_cast<long>(i) * sample_elems,
                     b.inputs.data.begin() + static_cast<long>(i + 1) * sample_elems));
        AttackResult r = diva_attack_impl(original, adapted, original.input_shape, x,
                                          b.labels[static_cast<size_t>(i)], obj, cfg.inner,
                                          nullptr);
        std::copy(r.x_adv.data.begin(), r.x_adv.data.end(),
                  adv.inputs.data.begin() + static_cast<long>(i) * sample_elems);
      }

      // Outer minimization of the differential loss over theta_q. The
      // original-model term is constant in theta_q, so the step minimizes
      // -c * P_adapted(x_adv)[y], raising adapted confidence on the
      // adversarial points.
      adapted_sgd_step(adapted, adv.inputs, cfg.outer_lr, [&](const Tensor& logits) {
        int n = logits.shape[0], k = logits.shape[1];
        Tensor p = softmax_probs(logits);
        Tensor dl({n, k});
        float inv = 1.0f / static_cast<float>(n);
        for (int i = 0; i < n; ++i) {
          int y = adv.labels[static_cast<size_t>(i)];
          float py = p.data[static_cast<size_t>(i) * k + y];
          for (int j = 0; j < k; ++j)
            dl.data[static_cast<size_t>(i) * k + j] =
                -c * py * ((j == y ? 1.0f : 0.0f) - p.data[static_cast<size_t>(i) * k + j]) * inv;
        }
        return dl;
      });

      if (with_distill) {
        // Draw n_distill samples, regenerate adversarial points against the
        // refreshed pair, and align the adapted model to the original's
        // soft outputs (temperature 1) on them.
        freeze_quant(adapted);
        int nd = cfg.n_distill;
        Tensor dx(batch_shape(original.input_shape, nd));
        long long pool = 0;
        for (const Batch& db : data) pool += db.size();
        for (int i = 0; i < nd; ++i) {
          long long pick = static_cast<long long>(rng.below(static_cast<uint64_t>(pool)));
          const Batch* src = nullptr;
          for (const Batch& db : data) {
            if (pick < db.size()) {
              src = &db;
              break;
            }
            pick -= db.size();
          }
          Tensor x(original.input_shape,
                   std::vector<float>(
                       src->inputs.data.begin() + static_cast<long>(pick) * sample_elems,
                       src->inputs.data.begin() + static_cast<long>(pick + 1) * sample_elems));
          AttackResult r = diva_attack_impl(original, adapted, original.input_shape, x,
                                            src->labels[static_cast<size_t>(pick)], obj,
                                            cfg.inner, nullptr);
          std::copy(r.x_adv.data.begin(), r.x_adv.data.end(),
                    dx.data.begin() + static_cast<long>(i) * sample_elems);
        }
        Tensor t_probs = softmax_probs(forward(original, dx));
        adapted_sgd_step(adapted, dx, cfg.outer_lr, [&](const Tensor& logits) {
          // CE against soft targets: d/dz = softmax(z) - t_probs, mean-scaled.
          int n = logits.shape[0], k = logits.shape[1];
          Tensor p = softmax_probs(logits);
          Tensor dl({n, k});
          float inv = 1.0f / static_cast<float>(n);
          for (size_t j = 0; j < p.numel(); ++j)
            dl.data[j] = (p.data[j] - t_probs.data[j]) * inv;
          return dl;
        });
      }
    }
  }
  freeze_quant(adapted);
  return ModelPair{original, std::move(adapted)};
}

}  // namespace detail

inline ModelPair minimax_diva_qat(const ModelPair& pair, const std::vector<Batch>& data,
                                  const DefenseConfig& cfg) {
  if (cfg.variant != DefenseVariant::minimax_diva_qat)
    throw ConfigError("minimax_diva_qat: config variant mismatch");
  Rng rng = make_rng(0);  // unused without the distill step
  return detail::minimax_diva_impl(pair, data, cfg, false, rng);
}

inline ModelPair minimax_diva_qat_distill(const ModelPair& pair, const std::vector<Batch>& data,
                                          const DefenseConfig& cfg, Rng& rng) {
  if (cfg.variant != DefenseVariant::minimax_diva_qat_distill)
    throw ConfigError("minimax_diva_qat_distill: config variant mismatch");
  return detail::minimax_diva_impl(pair, data, cfg, true, rng);
}

}  // namespace diva
