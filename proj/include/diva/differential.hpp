#pragma once

#include "diva/attack.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Differential attack: maximize
//
//   L(x) = P_orig(x)[y] - c * P_adapted(x)[y]
//
// over the epsilon-ball, so the adapted model loses confidence in the true
// label while the original keeps it. P are post-softmax probabilities (a
// logit-score mode is available for experimentation). The joint gradient is
// one reverse pass per model, summed with weights (1, -c); the adapted path
// uses straight-through gradients.
// ---------------------------------------------------------------------------

struct DivaObjective {
  float c = 1.0f;
  int target = -1;             // optional target class for the targeted variant
  float target_weight = 0.0f;  // weight of the distance-to-onehot term
  bool use_logits = false;     // score with raw logits instead of probabilities
};

namespace detail {

// Per-model true-class score and d(score)/dx with weight applied. Adds the
// targeted pull term on the adapted model when requested.
struct DivaParts {
  float orig_score = 0.0f;
  float adapted_score = 0.0f;
  float target_term = 0.0f;  // ||P_adapted - onehot(target)||^2
};

template <class M>
float score_and_grad(const M& model, const Tensor& x1, int y, bool use_logits, Tensor* dx) {
  std::vector<int> yv{y};
  if (use_logits) return loss_and_input_grad(model, x1, yv, TrueClassLogitLoss{}, dx);
  return loss_and_input_grad(model, x1, yv, TrueClassProbLoss{}, dx);
}

// Adapted-model pass computing -c * P[y] - w * ||P - onehot(target)||^2 and
// its input gradient in a single reverse sweep.
inline float adapted_objective_and_grad(const AdaptedModel& am, const Tensor& x1, int y,
                                        const DivaObjective& obj, Tensor* dx,
                                        DivaParts* parts) {
  AdaptedTape tape;
  Tensor logits = adapted_logits(am, x1, dx ? &tape : nullptr);
  int k = am.base.num_classes;
  float value = 0.0f;
  Tensor dlogits({1, k});

  if (obj.use_logits) {
    float zy = logits.data[static_cast<size_t>(y)];
    value += -obj.c * zy;
    if (parts) parts->adapted_score = zy;
    dlogits.data[static_cast<size_t>(y)] += -obj.c;
  } else {
    Tensor p = softmax_probs(logits);
    float py = p.data[static_cast<size_t>(y)];
    value += -obj.c * py;
    if (parts) parts->adapted_score = py;
    // d p[y]/d z[j] = p[y] * ([j==y] - p[j])
    for (int j = 0; j < k; ++j)
      dlogits.data[static_cast<size_t>(j)] +=
          -obj.c * py * ((j == y ? 1.0f : 0.0f) - p.data[static_cast<size_t>(j)]);
    if (obj.target >= 0 && obj.target_weight > 0.0f) {
      // v = p - onehot(target); term = -w * ||v||^2
      // d ||v||^2 / d z[j] = 2 p[j] (v[j] - v.p)
      float vdotp = 0.0f, norm2 = 0.0f;
      for (int j = 0; j < k; ++j) {
        float v = p.data[static_cast<size_t>(j)] - (j == obj.target ? 1.0f : 0.0f);
        vdotp += v * p.data[static_cast<size_t>(j)];
        norm2 += v * v;
      }
      value += -obj.target_weight * norm2;
      if (parts) parts->target_term = norm2;
      for (int j = 0; j < k; ++j) {
        float v = p.data[static_cast<size_t>(j)] - (j == obj.target ? 1.0f : 0.0f);
        dlogits.data[static_cast<size_t>(j)] +=
            -obj.target_weight * 2.0f * p.data[static_cast<size_t>(j)] * (v - vdotp);
      }
    }
  }
  if (dx) *dx = adapted_backward(am, tape, dlogits, nullptr);
  return value;
}

// Full differential objective; OrigT is Model for the standard pair and may
// be AdaptedModel in defense inner loops. c=0 never touches the adapted path.
template <class OrigT>
float diva_value_and_grad(const OrigT& orig, const AdaptedModel& adapted, const Tensor& x1,
                          int y, const DivaObjective& obj, Tensor* dx, DivaParts* parts) {
  Tensor g_orig;
  float so = score_and_grad(orig, x1, y, obj.use_logits, dx ? &g_orig : nullptr);
  if (parts) parts->orig_score = so;
  float value = so;
  if (obj.c > 0.0f || (obj.target >= 0 && obj.target_weight > 0.0f)) {
    Tensor g_ad;
    value += adapted_objective_and_grad(adapted, x1, y, obj, dx ? &g_ad : nullptr, parts);
    if (dx) {
      *dx = std::move(g_orig);
      for (size_t i = 0; i < dx->numel(); ++i) dx->data[i] += g_ad.data[i];
    }
  } else if (dx) {
    *dx = std::move(g_orig);
  }
  return value;
}

}  // namespace detail

inline float diva_loss(const ModelPair& pair, const Tensor& x, int y, float c,
                       bool use_logits = false) {
  if (y < 0 || y >= pair.original.num_classes) throw DataError("diva_loss: label out of range");
  DivaObjective obj;
  obj.c = c;
  obj.use_logits = use_logits;
  Tensor x1 = as_single_batch(x, pair.original.input_shape);
  return detail::diva_value_and_grad(pair.original, pair.adapted, x1, y, obj, nullptr, nullptr);
}

inline float diva_loss_and_grad(const ModelPair& pair, const Tensor& x, int y,
                                const DivaObjective& obj, Tensor* dx) {
  Tensor x1 = as_single_batch(x, pair.original.input_shape);
  Tensor dx1;
  float v = detail::diva_value_and_grad(pair.original, pair.adapted, x1, y, obj,
                                        dx ? &dx1 : nullptr, nullptr);
  if (dx) *dx = Tensor(per_sample_shape(dx1), std::move(dx1.data));
  return v;
}

// ---------------------------------------------------------------------------
// Attack loops
// ---------------------------------------------------------------------------

namespace detail {

template <class OrigT>
AttackResult diva_attack_impl(const OrigT& orig, const AdaptedModel& adapted,
                              const std::vector<int>& input_shape, const Tensor& x, int y,
                              const DivaObjective& obj, AttackConfig cfg, Rng* rng) {
  cfg.variant = AttackVariant::pgd;  // reuse the PGD core; loss is the differential one
  AttackResult r;
  // Precondition: both models classify the natural sample correctly. A
  // violation is reported as a rejected sample, never silently skipped.
  Tensor x_sample = Tensor(input_shape, as_single_batch(x, input_shape).data);
  if (predict1(orig, x_sample) != y || predict1(adapted, x_sample) != y) {
    r.x_adv = x_sample;
    r.rejected = true;
    r.orig_pred = predict1(orig, x_sample);
    r.adapted_pred = predict1(adapted, x_sample);
    return r;
  }
  auto lg = [&](const Tensor& xt, Tensor* g) {
    return diva_value_and_grad(orig, adapted, xt, y, obj, g, nullptr);
  };
  auto hit = [&](const Tensor& xt) {
    Tensor xs = strip_batch(xt);
    int ap = predict1(adapted, xs);
    if (obj.target >= 0) return ap == obj.target && predict1(orig, xs) == y;
    return ap != y && predict1(orig, xs) == y;
  };
  AttackState st = pgd_core(lg, x, input_shape, cfg, rng, hit);
  r.x_adv = strip_batch(st.xt);
  r.loss_trace = std::move(st.loss_trace);
  r.orig_pred = predict1(orig, r.x_adv);
  r.adapted_pred = predict1(adapted, r.x_adv);
  r.attack_success = r.adapted_pred != y;
  if (obj.target >= 0)
    r.evasive_success = r.adapted_pred == obj.target && r.orig_pred == y;
  else
    r.evasive_success = r.attack_success && r.orig_pred == y;
  r.attacked_pred = r.adapted_pred;
  return r;
}

}  // namespace detail

inline AttackResult diva_attack(const ModelPair& pair, const Tensor& x, int y,
                                const AttackConfig& cfg, Rng* rng = nullptr) {
  DivaObjective obj;
  obj.c = cfg.c;
  return detail::diva_attack_impl(pair.original, pair.adapted, pair.original.input_shape, x, y,
                                  obj, cfg, rng);
}

inline AttackResult diva_targeted(const ModelPair& pair, const Tensor& x, int y,
                                  const DivaObjective& objective, const AttackConfig& cfg,
                                  Rng* rng = nullptr) {
  if (objective.target < 0) throw ConfigError("diva_targeted: no target class set");
  if (objective.target == y) throw ConfigError("diva_targeted: target equals true label");
  if (objective.target >= pair.original.num_classes)
    throw ConfigError("diva_targeted: target out of range");
  if (objective.use_logits)
    throw ConfigError("diva_targeted: the onehot distance term needs probability mode");
  return detail::diva_attack_impl(pair.original, pair.adapted, pair.original.input_shape, x, y,
                                  objective, cfg, rng);
}

// ---------------------------------------------------------------------------
// Balance-parameter sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  float c = 0.0f;
  float evasive_rate = 0.0f;
  float attack_rate = 0.0f;
  int n = 0;
};

// One full evaluation per c over pre-filtered samples; everything but c held
// fixed.
inline std::vector<SweepRow> sweep_c(const ModelPair& pair, const Tensor& inputs,
                                     const std::vector<int>& labels, const AttackConfig& cfg,
                                     const std::vector<float>& c_values) {
  if (c_values.empty()) throw ConfigError("sweep_c: empty c list");
  for (float c : c_values)
    if (c < 0.0f) throw ConfigError("sweep_c: c must be >= 0");
  int n = inputs.shape.empty() ? 0 : inputs.shape[0];
  if (n == 0) throw DataError("sweep_c: empty dataset after filtering");
  std::vector<SweepRow> table;
  int sample_elems = static_cast<int>(numel_of(pair.original.input_shape));
  for (float c : c_values) {
    AttackConfig c_cfg = cfg;
    c_cfg.c = c;
    SweepRow row;
    row.c = c;
    row.n = n;
    int evasive = 0, attacked = 0;
    for (int i = 0; i < n; ++i) {
      Tensor x(pair.original.input_shape,
               std::vector<float>(inputs.data.begin() + static_cast<long>(i) * sample_elems,
                                  inputs.data.begin() + static_cast<long>(i + 1) * sample_elems));
      AttackResult r = diva_attack(pair, x, labels[static_cast<size_t>(i)], c_cfg);
      evasive += r.evasive_success;
      attacked += r.attack_success;
    }
    row.evasive_rate = static_cast<float>(evasive) / static_cast<float>(n);
    row.attack_rate = static_cast<float>(attacked) / static_cast<float>(n);
    table.push_back(row);
  }
  return table;
}

}  // namespace diva
