#pragma once

#include <cmath>
#include <cstdint>

#include "diva/nn.hpp"
#include "diva/quant.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Adapted models: int8 fake-quantization (with QAT) and magnitude pruning.
//
// A quantized AdaptedModel keeps the latent float parameters in `base` plus
// frozen integer codes per parameter tensor and calibrated activation ranges
// per layer. Its forward pass runs every parameter tensor and every layer
// output through quantize->dequantize; its backward pass is straight-through:
// identity inside the calibrated range, zero outside.
// ---------------------------------------------------------------------------

enum class AdaptMode { quantized, pruned, pruned_quantized };

inline const char* adapt_mode_name(AdaptMode m) {
  switch (m) {
    case AdaptMode::quantized: return "quantized";
    case AdaptMode::pruned: return "pruned";
    case AdaptMode::pruned_quantized: return "pruned+quantized";
  }
  return "?";
}

inline AdaptMode adapt_mode_from(const std::string& s) {
  if (s == "quantized") return AdaptMode::quantized;
  if (s == "pruned") return AdaptMode::pruned;
  if (s == "pruned+quantized") return AdaptMode::pruned_quantized;
  throw ConfigError("unknown adaptation mode: " + s);
}

struct WeightQuant {
  QuantParams qp;
  std::vector<uint8_t> codes;
  Tensor deq;  // cache: dequantize(codes, qp), the tensor the forward pass uses
};

struct AdaptedModel {
  Model base;  // latent float parameters
  AdaptMode mode = AdaptMode::quantized;
  int bits = 8;
  std::map<std::string, WeightQuant> wq;  // per parameter tensor (quantized modes)
  std::vector<QuantParams> act_qp;        // per layer output (quantized modes)
  std::map<std::string, Tensor> masks;    // 0/1 per pruned weight tensor (pruned modes)

  bool is_quantized() const { return mode != AdaptMode::pruned; }
  bool is_pruned() const { return mode != AdaptMode::quantized; }
};

inline std::pair<std::vector<uint8_t>, QuantParams> quantize_tensor(const Tensor& t, int bits) {
  QuantParams qp = choose_qparams(t, bits);
  return {quantize(t, qp), qp};
}

// Re-derives codes and activation params from the latent weights; call after
// any update to base params.
inline void freeze_quant(AdaptedModel& am) {
  am.wq.clear();
  for (const auto& [name, t] : am.base.params) {
    WeightQuant w;
    w.qp = choose_qparams(t, am.bits);
    w.codes = quantize(t, w.qp);
    w.deq = dequantize(w.codes, t.shape, w.qp);
    am.wq[name] = std::move(w);
  }
}

// ---------------------------------------------------------------------------
// Adapted forward/backward
// ---------------------------------------------------------------------------

struct AdaptedTape {
  ForwardTape tape;                         // activations as the quantized pass saw them
  std::vector<Tensor> act_mask;             // STE mask per layer output; empty = pass-through
  std::map<std::string, Tensor> fq_params;  // parameter tensors used by this pass
  std::map<std::string, Tensor> w_mask;     // STE masks for parameters (QAT mode)
};

namespace detail {

// training_weights: fake-quantize the current latent weights with fresh range
// parameters (QAT step). Otherwise use the frozen integer codes.
inline Tensor adapted_forward_impl(const AdaptedModel& am, const Tensor& inputs,
                                   AdaptedTape* tape, bool training_weights) {
  const Model& m = am.base;
  check_batch_shape(m, inputs);
  if (am.is_quantized() && am.act_qp.size() != m.layers.size())
    throw ConfigError("adapted model is missing activation calibration");
  int n = inputs.shape[0];
  if (tape) {
    tape->tape.acts.clear();
    tape->tape.pool_argmax.assign(m.layers.size(), {});
    tape->act_mask.assign(m.layers.size(), Tensor{});
  }

  // Resolve the parameter tensors this pass will use.
  std::map<std::string, Tensor> local;
  auto use_param = [&](const std::string& name) -> const Tensor& {
    if (!am.is_quantized()) return m.param(name);  // pruned: masks already baked in
    auto it = local.find(name);
    if (it != local.end()) return it->second;
    if (training_weights) {
      QuantParams qp = choose_qparams(m.param(name), am.bits);
      Tensor mask;
      Tensor fq = fake_quant(m.param(name), qp, tape ? &mask : nullptr);
      if (tape) tape->w_mask[name] = std::move(mask);
      return local.emplace(name, std::move(fq)).first->second;
    }
    auto wit = am.wq.find(name);
    if (wit == am.wq.end()) throw ConfigError("adapted model has no codes for " + name);
    return wit->second.deq;
  };

  Tensor cur = inputs;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& l = m.layers[i];
    if (per_sample_shape(cur) != l.in_shape)
      throw ShapeError("layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) +
                       "): expected input " + Tensor(l.in_shape).shape_str() + ", got " +
                       Tensor(per_sample_shape(cur)).shape_str());
    if (tape) tape->tape.acts.push_back(cur);
    switch (l.kind) {
      case LayerKind::dense:
        cur = dense_forward(cur, use_param(l.w_name), use_param(l.b_name));
        break;
      case LayerKind::conv2d:
        cur = conv2d_forward(cur, use_param(l.w_name), use_param(l.b_name));
        break;
      case LayerKind::relu:
        cur = relu_forward(cur);
        break;
      case LayerKind::maxpool2x2:
        cur = maxpool_forward(cur, tape ? &tape->tape.pool_argmax[i] : nullptr);
        break;
      case LayerKind::flatten:
        cur = Tensor(batch_shape(l.out_shape, n), std::move(cur.data));
        break;
    }
    if (am.is_quantized()) {
      Tensor* mask = tape ? &tape->act_mask[i] : nullptr;
      cur = fake_quant(cur, am.act_qp[i], mask);
    }
  }
  if (tape) {
    tape->tape.acts.push_back(cur);
    if (am.is_quantized()) tape->fq_params = std::move(local);
  }
  return cur;
}

}  // namespace detail

// Frozen-codes forward (the deployed model's arithmetic).
inline Tensor fake_quant_forward(const AdaptedModel& am, const Tensor& inputs,
                                 AdaptedTape* tape = nullptr) {
  if (!am.is_quantized()) throw ConfigError("fake_quant_forward: model mode is pruned-only");
  return detail::adapted_forward_impl(am, inputs, tape, false);
}

inline Tensor fake_quant_forward(const AdaptedModel& am, const Batch& b,
                                 AdaptedTape* tape = nullptr) {
  return fake_quant_forward(am, b.inputs, tape);
}

// Mode-dispatching logits.
inline Tensor adapted_logits(const AdaptedModel& am, const Tensor& inputs,
                             AdaptedTape* tape = nullptr) {
  if (am.is_quantized()) return detail::adapted_forward_impl(am, inputs, tape, false);
  if (tape) {
    Tensor out = forward(am.base, inputs, &tape->tape);
    tape->act_mask.assign(am.base.layers.size(), Tensor{});
    return out;
  }
  return forward(am.base, inputs);
}

// Reverse pass matching adapted_forward_impl. Straight-through rule: each
// quantize->dequantize node multiplies the upstream gradient by its 0/1
// in-range mask. Parameter gradients land on the latent tensors.
inline Tensor adapted_backward(const AdaptedModel& am, const AdaptedTape& tape,
                               const Tensor& dlogits, std::map<std::string, Tensor>* param_grads) {
  const Model& m = am.base;
  auto used_param = [&](const std::string& name) -> const Tensor& {
    if (!am.is_quantized()) return m.param(name);
    auto it = tape.fq_params.find(name);
    if (it != tape.fq_params.end()) return it->second;
    auto wit = am.wq.find(name);
    if (wit == am.wq.end()) throw ConfigError("adapted model has no codes for " + name);
    return wit->second.deq;
  };

  Tensor d = dlogits;
  for (size_t ii = m.layers.size(); ii-- > 0;) {
    const Layer& l = m.layers[ii];
    const Tensor& x = tape.tape.acts[ii];
    if (am.is_quantized()) {
      const Tensor& mask = tape.act_mask[ii];
      if (mask.numel()) {
        for (size_t j = 0; j < d.numel(); ++j) d.data[j] *= mask.data[j];
      }
    }
    switch (l.kind) {
      case LayerKind::dense:
      case LayerKind::conv2d: {
        Tensor* dw = param_grads ? &(*param_grads)[l.w_name] : nullptr;
        Tensor* db = param_grads ? &(*param_grads)[l.b_name] : nullptr;
        if (dw && dw->numel() == 0) *dw = zeros_like(m.param(l.w_name));
        if (db && db->numel() == 0) *db = zeros_like(m.param(l.b_name));
        d = l.kind == LayerKind::dense
                ? dense_backward(x, used_param(l.w_name), d, dw, db)
                : conv2d_backward(x, used_param(l.w_name), d, dw, db);
        break;
      }
      case LayerKind::relu:
        d = relu_backward(x, d);
        break;
      case LayerKind::maxpool2x2:
        d = maxpool_backward(tape.tape.pool_argmax[ii], x.shape, d);
        break;
      case LayerKind::flatten:
        d = Tensor(x.shape, std::move(d.data));
        break;
    }
  }
  if (param_grads && am.is_quantized()) {
    for (auto& [name, g] : *param_grads) {
      auto mit = tape.w_mask.find(name);
      if (mit == tape.w_mask.end()) continue;
      for (size_t j = 0; j < g.numel(); ++j) g.data[j] *= mit->second.data[j];
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Prediction helpers shared by both model flavors
// ---------------------------------------------------------------------------

inline Tensor logits_row(const Tensor& logits, int i, int k) {
  return Tensor({k}, std::vector<float>(logits.data.begin() + static_cast<long>(i) * k,
                                        logits.data.begin() + static_cast<long>(i + 1) * k));
}

inline std::vector<int> predict_topk(const AdaptedModel& am, const Tensor& input, int k) {
  if (k < 1 || k > am.base.num_classes)
    throw ConfigError("top-k k=" + std::to_string(k) + " out of range [1," +
                      std::to_string(am.base.num_classes) + "]");
  Tensor logits = adapted_logits(am, as_single_batch(input, am.base.input_shape));
  return topk_from_logits(Tensor({am.base.num_classes}, logits.data), k);
}

inline int predict1(const AdaptedModel& am, const Tensor& input) {
  return predict_topk(am, input, 1)[0];
}

inline std::vector<int> predict_batch(const Model& m, const Tensor& inputs) {
  Tensor logits = forward(m, inputs);
  int n = inputs.shape[0], k = m.num_classes;
  std::vector<int> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = topk_from_logits(logits_row(logits, i, k), 1)[0];
  return out;
}

inline std::vector<int> predict_batch(const AdaptedModel& am, const Tensor& inputs) {
  Tensor logits = adapted_logits(am, inputs);
  int n = inputs.shape[0], k = am.base.num_classes;
  std::vector<int> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = topk_from_logits(logits_row(logits, i, k), 1)[0];
  return out;
}

// ---------------------------------------------------------------------------
// ModelPair
// ---------------------------------------------------------------------------

struct ModelPair {
  Model original;
  AdaptedModel adapted;
};

inline ModelPair make_model_pair(Model original, AdaptedModel adapted) {
  if (!arch_equal(original, adapted.base))
    throw ConfigError("model pair architecture mismatch");
  return ModelPair{std::move(original), std::move(adapted)};
}

// ---------------------------------------------------------------------------
// Quantization-aware training
// ---------------------------------------------------------------------------

// Calibration: one pass over the data in full precision, recording per-layer
// output ranges with an exponential moving average (decay 0.99). Ranges are
// frozen before training starts.
inline std::vector<QuantParams> calibrate_activations(const Model& m,
                                                      const std::vector<Batch>& data,
                                                      int bits) {
  if (data.empty()) throw DataError("calibration needs at least one batch");
  std::vector<EmaRange> ranges(m.layers.size());
  for (const Batch& b : data) {
    ForwardTape tape;
    forward(m, b.inputs, &tape);
    for (size_t i = 0; i < m.layers.size(); ++i) ranges[i].observe(tape.acts[i + 1]);
  }
  std::vector<QuantParams> qps;
  qps.reserve(ranges.size());
  for (const EmaRange& r : ranges) qps.push_back(r.qparams(bits));
  return qps;
}

namespace detail {

inline void enforce_masks(Model& m, const std::map<std::string, Tensor>& masks) {
  for (const auto& [name, mask] : masks) {
    Tensor& t = m.param(name);
    for (size_t i = 0; i < t.numel(); ++i) t.data[i] *= mask.data[i];
  }
}

inline AdaptedModel qat_train_impl(Model seed, const std::vector<Batch>& data, float lr,
                                   int epochs, int bits, std::map<std::string, Tensor> masks,
                                   AdaptMode mode) {
  AdaptedModel am;
  am.mode = mode;
  am.bits = bits;
  am.masks = std::move(masks);
  am.base = std::move(seed);
  detail::enforce_masks(am.base, am.masks);
  am.act_qp = calibrate_activations(am.base, data, bits);

  CrossEntropyLoss ce;
  for (int e = 0; e < epochs; ++e) {
    for (size_t bi = 0; bi < data.size(); ++bi) {
      AdaptedTape tape;
      Tensor logits = detail::adapted_forward_impl(am, data[bi].inputs, &tape, true);
      Tensor dlogits;
      float loss = ce.eval(logits, data[bi].labels, &dlogits);
      if (!std::isfinite(loss))
        throw NumericalError("qat_train: non-finite loss at epoch " + std::to_string(e) +
                             ", batch " + std::to_string(bi));
      std::map<std::string, Tensor> grads;
      adapted_backward(am, tape, dlogits, &grads);
      for (auto& [name, g] : grads) axpy(-lr, g, am.base.param(name));
      detail::enforce_masks(am.base, am.masks);
    }
  }
  freeze_quant(am);
  return am;
}

}  // namespace detail

inline AdaptedModel qat_train(const Model& seed, const std::vector<Batch>& data, float lr,
                              int epochs, int bits = 8) {
  return detail::qat_train_impl(seed, data, lr, epochs, bits, {}, AdaptMode::quantized);
}

// ---------------------------------------------------------------------------
// Magnitude pruning
// ---------------------------------------------------------------------------

// Per weight tensor: mask out the `sparsity` fraction with smallest |v|.
// Ties resolve by index so the mask is deterministic.
inline Tensor magnitude_mask(const Tensor& t, float sparsity) {
  size_t n = t.numel();
  size_t k = static_cast<size_t>(std::lround(static_cast<double>(sparsity) * static_cast<double>(n)));
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    float ma = std::fabs(t.data[a]), mb = std::fabs(t.data[b]);
    if (ma != mb) return ma < mb;
    return a < b;
  });
  Tensor mask(t.shape, 1.0f);
  for (size_t i = 0; i < k && i < n; ++i) mask.data[order[i]] = 0.0f;
  return mask;
}

inline AdaptedModel prune_magnitude(const Model& model, float sparsity,
                                    const std::vector<Batch>& data, int finetune_epochs,
                                    float lr = 0.05f) {
  if (!(sparsity >= 0.0f && sparsity < 1.0f))
    throw ConfigError("prune_magnitude: sparsity must be in [0,1)");
  AdaptedModel am;
  am.mode = AdaptMode::pruned;
  am.base = model;
  for (const Layer& l : model.layers) {
    if (!l.has_params()) continue;
    am.masks[l.w_name] = magnitude_mask(model.param(l.w_name), sparsity);
  }
  detail::enforce_masks(am.base, am.masks);

  for (int e = 0; e < finetune_epochs; ++e) {
    for (size_t bi = 0; bi < data.size(); ++bi) {
      Grads g = grad(am.base, data[bi]);
      if (!std::isfinite(g.loss))
        throw NumericalError("prune_magnitude: non-finite loss at epoch " + std::to_string(e) +
                             ", batch " + std::to_string(bi));
      for (auto& [name, gt] : g.params) axpy(-lr, gt, am.base.param(name));
      detail::enforce_masks(am.base, am.masks);
    }
  }
  return am;
}

// Prune first, then QAT that preserves the sparsity pattern.
inline AdaptedModel prune_then_qat(const Model& model, float sparsity,
                                   const std::vector<Batch>& data, int finetune_epochs,
                                   int qat_epochs, float lr = 0.05f, int bits = 8) {
  AdaptedModel pruned = prune_magnitude(model, sparsity, data, finetune_epochs, lr);
  return detail::qat_train_impl(std::move(pruned.base), data, lr, qat_epochs, bits,
                                std::move(pruned.masks), AdaptMode::pruned_quantized);
}

inline float achieved_sparsity(const AdaptedModel& am, const std::string& name) {
  const Tensor& t = am.base.param(name);
  size_t zeros = 0;
  for (float v : t.data) zeros += v == 0.0f;
  return t.numel() ? static_cast<float>(zeros) / static_cast<float>(t.numel()) : 0.0f;
}

// ---------------------------------------------------------------------------
// Instability: fraction of samples where exactly one of the two models
// predicts the true label.
// ---------------------------------------------------------------------------

inline float instability(const ModelPair& pair, const std::vector<Batch>& data) {
  long long flip = 0, total = 0;
  for (const Batch& b : data) {
    std::vector<int> po = predict_batch(pair.original, b.inputs);
    std::vector<int> pa = predict_batch(pair.adapted, b.inputs);
    for (int i = 0; i < b.size(); ++i) {
      int y = b.labels[static_cast<size_t>(i)];
      bool oc = po[static_cast<size_t>(i)] == y;
      bool ac = pa[static_cast<size_t>(i)] == y;
      if (oc != ac) ++flip;
      ++total;
    }
  }
  if (!total) throw DataError("instability: empty dataset");
  return static_cast<float>(flip) / static_cast<float>(total);
}

inline float accuracy(const AdaptedModel& am, const std::vector<Batch>& data) {
  long long hit = 0, total = 0;
  for (const Batch& b : data) {
    std::vector<int> p = predict_batch(am, b.inputs);
    for (int i = 0; i < b.size(); ++i) {
      hit += p[static_cast<size_t>(i)] == b.labels[static_cast<size_t>(i)];
      ++total;
    }
  }
  return total ? static_cast<float>(hit) / static_cast<float>(total) : 0.0f;
}

}  // namespace diva
