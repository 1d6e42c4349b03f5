#pragma once

#include <cmath>
#include <functional>

#include "diva/adapt.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Bounded L-inf attacks: FGSM, R+FGSM, PGD, momentum PGD.
//
// All variants share one projection core and operate on a single sample in
// the [0,1] pixel box. Attacks are pure given (model, x, y, cfg, rng), so the
// harness may fan samples out across threads against one immutable model.
// ---------------------------------------------------------------------------

enum class AttackVariant { fgsm, rfgsm, pgd, momentum_pgd, diva };

inline const char* attack_variant_name(AttackVariant v) {
  switch (v) {
    case AttackVariant::fgsm: return "fgsm";
    case AttackVariant::rfgsm: return "rfgsm";
    case AttackVariant::pgd: return "pgd";
    case AttackVariant::momentum_pgd: return "momentum_pgd";
    case AttackVariant::diva: return "diva";
  }
  return "?";
}

inline AttackVariant attack_variant_from(const std::string& s) {
  if (s == "fgsm") return AttackVariant::fgsm;
  if (s == "rfgsm") return AttackVariant::rfgsm;
  if (s == "pgd") return AttackVariant::pgd;
  if (s == "momentum_pgd") return AttackVariant::momentum_pgd;
  if (s == "diva") return AttackVariant::diva;
  throw ConfigError("unknown attack variant: " + s);
}

struct AttackConfig {
  float epsilon = 8.0f / 255.0f;  // L-inf budget, pixel units on [0,1]
  float alpha = 1.0f / 255.0f;    // step size
  int steps = 20;
  float momentum_mu = 0.5f;
  bool random_start = false;
  float sigma = 4.0f / 255.0f;    // rfgsm start radius
  float c = 1.0f;                 // differential-loss balance
  AttackVariant variant = AttackVariant::pgd;
  bool stop_on_success = false;   // off: loss trace has exactly `steps` entries
};

inline void validate_attack_config(const AttackConfig& cfg) {
  if (!(cfg.epsilon > 0.0f && cfg.epsilon <= 1.0f))
    throw ConfigError("attack epsilon must be in (0,1]");
  if (!(cfg.alpha > 0.0f && cfg.alpha <= cfg.epsilon))
    throw ConfigError("attack alpha must be in (0, epsilon]");
  if (cfg.steps < 0) throw ConfigError("attack steps must be >= 0");
  if (cfg.momentum_mu < 0.0f) throw ConfigError("attack momentum must be >= 0");
  if (cfg.c < 0.0f) throw ConfigError("attack c must be >= 0");
  if (cfg.variant == AttackVariant::rfgsm && !(cfg.sigma < cfg.epsilon))
    throw ConfigError("rfgsm sigma must be < epsilon");
}

struct AttackState {
  Tensor x0;        // natural sample, batch-of-1
  Tensor xt;        // current iterate
  Tensor velocity;  // momentum accumulator
  int step = 0;
  std::vector<float> loss_trace;
};

struct AttackResult {
  Tensor x_adv;             // per-sample shape
  int attacked_pred = -1;   // attacked model's top-1 on x_adv (single-model attacks)
  int orig_pred = -1;       // filled by differential attacks / the eval harness
  int adapted_pred = -1;
  bool attack_success = false;
  bool evasive_success = false;
  bool rejected = false;    // differential precondition violated; x_adv = x
  std::vector<float> loss_trace;
};

inline float sign_of(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

// Elementwise clamp to [max(0, x0-eps), min(1, x0+eps)].
inline Tensor clip_project(const Tensor& xt, const Tensor& x0, float epsilon) {
  if (!same_shape(xt, x0)) throw ShapeError("clip_project: shape mismatch");
  Tensor out(xt.shape);
  for (size_t i = 0; i < xt.numel(); ++i) {
    float lo = std::max(0.0f, x0.data[i] - epsilon);
    float hi = std::min(1.0f, x0.data[i] + epsilon);
    out.data[i] = std::min(hi, std::max(lo, xt.data[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-model loss/gradient plumbing. `x1` is a batch of one sample; returns
// the loss and writes d(loss)/dx when `dx` is non-null.
// ---------------------------------------------------------------------------

inline float loss_and_input_grad(const Model& m, const Tensor& x1, const std::vector<int>& y,
                                 const LogitLoss& loss, Tensor* dx) {
  ForwardTape tape;
  Tensor logits = forward(m, x1, dx ? &tape : nullptr);
  Tensor dlogits;
  float v = loss.eval(logits, y, dx ? &dlogits : nullptr);
  if (dx) *dx = backward(m, tape, dlogits, nullptr);
  return v;
}

inline float loss_and_input_grad(const AdaptedModel& am, const Tensor& x1,
                                 const std::vector<int>& y, const LogitLoss& loss, Tensor* dx) {
  AdaptedTape tape;
  Tensor logits = adapted_logits(am, x1, dx ? &tape : nullptr);
  Tensor dlogits;
  float v = loss.eval(logits, y, dx ? &dlogits : nullptr);
  if (dx) *dx = adapted_backward(am, tape, dlogits, nullptr);
  return v;
}

namespace detail {

// PGD core shared by every variant (and by the differential attack): ascend
// `lg` under the epsilon-ball and pixel-box projection.
//   lg(xt, &grad) -> loss at xt (grad may be null for trace-only evaluation)
template <class LossGrad, class SuccessCheck>
AttackState pgd_core(LossGrad&& lg, const Tensor& x_in, const std::vector<int>& input_shape,
                     const AttackConfig& cfg, Rng* rng, SuccessCheck&& succeeded) {
  validate_attack_config(cfg);
  AttackState st;
  st.x0 = as_single_batch(x_in, input_shape);
  st.xt = st.x0;
  if (cfg.random_start) {
    if (!rng) throw ConfigError("random_start needs an RNG");
    Tensor noise = uniform_tensor(st.x0.shape, -cfg.epsilon, cfg.epsilon, *rng);
    Tensor moved = st.x0;
    for (size_t i = 0; i < moved.numel(); ++i) moved.data[i] += noise.data[i];
    st.xt = clip_project(moved, st.x0, cfg.epsilon);
  }
  bool use_momentum = cfg.variant == AttackVariant::momentum_pgd;
  if (use_momentum) st.velocity = zeros_like(st.x0);

  for (st.step = 0; st.step < cfg.steps; ++st.step) {
    Tensor g;
    float loss = lg(st.xt, &g);
    st.loss_trace.push_back(loss);
    ensure_finite(g, "attack gradient");
    Tensor moved = st.xt;
    if (use_momentum) {
      float l1 = l1_norm(g);
      float inv = l1 > 0.0f ? 1.0f / l1 : 0.0f;
      for (size_t i = 0; i < g.numel(); ++i)
        st.velocity.data[i] = cfg.momentum_mu * st.velocity.data[i] + g.data[i] * inv;
      for (size_t i = 0; i < moved.numel(); ++i)
        moved.data[i] += cfg.alpha * sign_of(st.velocity.data[i]);
    } else {
      for (size_t i = 0; i < moved.numel(); ++i)
        moved.data[i] += cfg.alpha * sign_of(g.data[i]);
    }
    st.xt = clip_project(moved, st.x0, cfg.epsilon);
    if (cfg.stop_on_success && succeeded(st.xt)) {
      ++st.step;
      break;
    }
  }
  return st;
}

inline Tensor strip_batch(const Tensor& x1) {
  return Tensor(per_sample_shape(x1), x1.data);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single-model attacks (maximize cross-entropy of the true label)
// ---------------------------------------------------------------------------

inline const std::vector<int>& model_input_shape(const Model& m) { return m.input_shape; }
inline const std::vector<int>& model_input_shape(const AdaptedModel& am) {
  return am.base.input_shape;
}

template <class M>
AttackResult pgd_attack(const M& model, const Tensor& x, int y, const AttackConfig& cfg,
                        Rng* rng = nullptr) {
  CrossEntropyLoss ce;
  std::vector<int> yv{y};
  auto lg = [&](const Tensor& xt, Tensor* g) { return loss_and_input_grad(model, xt, yv, ce, g); };
  auto hit = [&](const Tensor& xt) { return predict1(model, detail::strip_batch(xt)) != y; };
  AttackState st = detail::pgd_core(lg, x, model_input_shape(model), cfg, rng, hit);
  AttackResult r;
  r.x_adv = detail::strip_batch(st.xt);
  r.loss_trace = std::move(st.loss_trace);
  r.attacked_pred = predict1(model, r.x_adv);
  r.attack_success = r.attacked_pred != y;
  return r;
}

template <class M>
Tensor fgsm(const M& model, const Tensor& x, int y, float epsilon) {
  AttackConfig cfg;
  cfg.variant = AttackVariant::fgsm;
  cfg.epsilon = epsilon;
  cfg.alpha = epsilon;
  cfg.steps = 1;
  cfg.stop_on_success = false;
  CrossEntropyLoss ce;
  std::vector<int> yv{y};
  auto lg = [&](const Tensor& xt, Tensor* g) { return loss_and_input_grad(model, xt, yv, ce, g); };
  AttackState st = detail::pgd_core(lg, x, model_input_shape(model), cfg, nullptr,
                                    [](const Tensor&) { return false; });
  return detail::strip_batch(st.xt);
}

// FGSM from a uniformly drawn start inside [-sigma, sigma], projected back to
// the epsilon-ball of the original x.
template <class M>
Tensor rfgsm(const M& model, const Tensor& x, int y, float epsilon, float sigma, Rng& rng) {
  if (!(sigma >= 0.0f && sigma < epsilon)) throw ConfigError("rfgsm: need 0 <= sigma < epsilon");
  Tensor x1 = as_single_batch(x, model_input_shape(model));
  Tensor start = x1;
  if (sigma > 0.0f) {
    Tensor noise = uniform_tensor(x1.shape, -sigma, sigma, rng);
    for (size_t i = 0; i < start.numel(); ++i) start.data[i] += noise.data[i];
  }
  start = clip_project(start, x1, epsilon);
  CrossEntropyLoss ce;
  std::vector<int> yv{y};
  Tensor g;
  loss_and_input_grad(model, start, yv, ce, &g);
  ensure_finite(g, "rfgsm gradient");
  Tensor moved = start;
  for (size_t i = 0; i < moved.numel(); ++i) moved.data[i] += epsilon * sign_of(g.data[i]);
  return detail::strip_batch(clip_project(moved, x1, epsilon));
}

template <class M>
AttackResult momentum_pgd_attack(const M& model, const Tensor& x, int y, AttackConfig cfg,
                                 Rng* rng = nullptr) {
  cfg.variant = AttackVariant::momentum_pgd;
  CrossEntropyLoss ce;
  std::vector<int> yv{y};
  auto lg = [&](const Tensor& xt, Tensor* g) { return loss_and_input_grad(model, xt, yv, ce, g); };
  auto hit = [&](const Tensor& xt) { return predict1(model, detail::strip_batch(xt)) != y; };
  AttackState st = detail::pgd_core(lg, x, model_input_shape(model), cfg, rng, hit);
  AttackResult r;
  r.x_adv = detail::strip_batch(st.xt);
  r.loss_trace = std::move(st.loss_trace);
  r.attacked_pred = predict1(model, r.x_adv);
  r.attack_success = r.attacked_pred != y;
  return r;
}

}  // namespace diva
