#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "diva/tensor.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Layers and models
//
// Feed-forward stacks over float32 NHWC tensors. The layer zoo is the minimal
// set for a LeNet-class classifier: dense, conv2d (3x3, stride 1, zero pad),
// relu, maxpool2x2, flatten.
// ---------------------------------------------------------------------------

enum class LayerKind { dense, conv2d, relu, maxpool2x2, flatten };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2x2: return "maxpool2x2";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

struct Layer {
  LayerKind kind;
  std::vector<int> in_shape;   // per-sample shape entering this layer
  std::vector<int> out_shape;  // per-sample shape leaving this layer
  std::string w_name, b_name;  // set for dense / conv2d

  bool has_params() const { return !w_name.empty(); }

  bool same_arch(const Layer& o) const {
    return kind == o.kind && in_shape == o.in_shape && out_shape == o.out_shape;
  }
};

struct Model {
  std::vector<int> input_shape;  // per-sample, e.g. {28,28,1} or {d}
  int num_classes = 0;
  std::vector<Layer> layers;
  std::map<std::string, Tensor> params;  // ordered: deterministic iteration

  const std::vector<int>& out_shape() const {
    return layers.empty() ? input_shape : layers.back().out_shape;
  }
  const Tensor& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("unknown parameter: " + name);
    return it->second;
  }
  Tensor& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("unknown parameter: " + name);
    return it->second;
  }
};

inline Model make_model(std::vector<int> input_shape) {
  Model m;
  m.input_shape = std::move(input_shape);
  return m;
}

inline void add_dense(Model& m, int out_features) {
  Layer l;
  l.kind = LayerKind::dense;
  l.in_shape = m.out_shape();
  if (l.in_shape.size() != 1)
    throw ShapeError("dense layer needs a flat input, got " + Tensor(l.in_shape).shape_str() +
                     " (insert flatten first)");
  l.out_shape = {out_features};
  size_t i = m.layers.size();
  l.w_name = "w" + std::to_string(i);
  l.b_name = "b" + std::to_string(i);
  m.params[l.w_name] = Tensor({l.in_shape[0], out_features});
  m.params[l.b_name] = Tensor({out_features});
  m.layers.push_back(std::move(l));
}

inline void add_conv2d(Model& m, int out_channels) {
  Layer l;
  l.kind = LayerKind::conv2d;
  l.in_shape = m.out_shape();
  if (l.in_shape.size() != 3)
    throw ShapeError("conv2d layer needs [H,W,C] input, got " + Tensor(l.in_shape).shape_str());
  l.out_shape = {l.in_shape[0], l.in_shape[1], out_channels};
  size_t i = m.layers.size();
  l.w_name = "w" + std::to_string(i);
  l.b_name = "b" + std::to_string(i);
  m.params[l.w_name] = Tensor({3, 3, l.in_shape[2], out_channels});
  m.params[l.b_name] = Tensor({out_channels});
  m.layers.push_back(std::move(l));
}

inline void add_relu(Model& m) {
  Layer l;
  l.kind = LayerKind::relu;
  l.in_shape = m.out_shape();
  l.out_shape = l.in_shape;
  m.layers.push_back(std::move(l));
}

inline void add_maxpool2x2(Model& m) {
  Layer l;
  l.kind = LayerKind::maxpool2x2;
  l.in_shape = m.out_shape();
  if (l.in_shape.size() != 3)
    throw ShapeError("maxpool2x2 needs [H,W,C] input, got " + Tensor(l.in_shape).shape_str());
  l.out_shape = {l.in_shape[0] / 2, l.in_shape[1] / 2, l.in_shape[2]};
  if (l.out_shape[0] < 1 || l.out_shape[1] < 1)
    throw ShapeError("maxpool2x2 input too small: " + Tensor(l.in_shape).shape_str());
  m.layers.push_back(std::move(l));
}

inline void add_flatten(Model& m) {
  Layer l;
  l.kind = LayerKind::flatten;
  l.in_shape = m.out_shape();
  int n = 1;
  for (int e : l.in_shape) n *= e;
  l.out_shape = {n};
  m.layers.push_back(std::move(l));
}

inline void finalize_classifier(Model& m, int num_classes) {
  if (m.out_shape() != std::vector<int>{num_classes})
    throw ShapeError("final layer emits " + Tensor(m.out_shape()).shape_str() + ", expected [" +
                     std::to_string(num_classes) + "]");
  m.num_classes = num_classes;
}

inline void init_he_uniform(Model& m, Rng& rng) {
  for (const Layer& l : m.layers) {
    if (!l.has_params()) continue;
    Tensor& w = m.param(l.w_name);
    int fan_in = l.kind == LayerKind::dense ? l.in_shape[0] : 3 * 3 * l.in_shape[2];
    float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
    for (float& v : w.data) v = rng.uniform(-limit, limit);
    for (float& v : m.param(l.b_name).data) v = 0.0f;
  }
}

inline bool arch_equal(const Model& a, const Model& b) {
  if (a.input_shape != b.input_shape || a.num_classes != b.num_classes) return false;
  if (a.layers.size() != b.layers.size()) return false;
  for (size_t i = 0; i < a.layers.size(); ++i)
    if (!a.layers[i].same_arch(b.layers[i])) return false;
  return true;
}

inline uint64_t params_checksum(const Model& m) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : m.params) {
    h = fnv1a(name, h);
    h = tensor_hash(t, h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct Batch {
  Tensor inputs;             // [n, ...input_shape], values in [0,1]
  std::vector<int> labels;   // n class indices

  int size() const { return inputs.shape.empty() ? 0 : inputs.shape[0]; }
};

inline Batch make_batch(Tensor inputs, std::vector<int> labels) {
  if (inputs.shape.empty() || inputs.shape[0] < 1) throw DataError("batch needs n >= 1 samples");
  if (static_cast<size_t>(inputs.shape[0]) != labels.size())
    throw DataError("batch has " + std::to_string(inputs.shape[0]) + " inputs but " +
                    std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0) throw DataError("negative label");
  return Batch{std::move(inputs), std::move(labels)};
}

inline std::vector<int> batch_shape(const std::vector<int>& per_sample, int n) {
  std::vector<int> s;
  s.reserve(per_sample.size() + 1);
  s.push_back(n);
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

inline std::vector<int> per_sample_shape(const Tensor& batched) {
  if (batched.shape.empty()) throw ShapeError("empty batch tensor");
  return {batched.shape.begin() + 1, batched.shape.end()};
}

// ---------------------------------------------------------------------------
// Layer primitives (shared by the plain and the fake-quantized passes)
// ---------------------------------------------------------------------------

inline Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  int n = x.shape[0], in = x.shape[1], out = w.shape[1];
  Tensor y({n, out});
  for (int i = 0; i < n; ++i) {
    const float* xr = x.ptr() + static_cast<size_t>(i) * in;
    float* yr = y.ptr() + static_cast<size_t>(i) * out;
    for (int o = 0; o < out; ++o) yr[o] = b.data[static_cast<size_t>(o)];
    for (int k = 0; k < in; ++k) {
      float xv = xr[k];
      if (xv == 0.0f) continue;
      const float* wr = w.ptr() + static_cast<size_t>(k) * out;
      for (int o = 0; o < out; ++o) yr[o] += xv * wr[o];
    }
  }
  return y;
}

// Accumulates dw/db; returns dx.
inline Tensor dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                             Tensor* dw, Tensor* db) {
  int n = x.shape[0], in = x.shape[1], out = w.shape[1];
  Tensor dx({n, in});
  for (int i = 0; i < n; ++i) {
    const float* xr = x.ptr() + static_cast<size_t>(i) * in;
    const float* dyr = dy.ptr() + static_cast<size_t>(i) * out;
    float* dxr = dx.ptr() + static_cast<size_t>(i) * in;
    for (int k = 0; k < in; ++k) {
      const float* wr = w.ptr() + static_cast<size_t>(k) * out;
      float acc = 0.0f;
      for (int o = 0; o < out; ++o) acc += wr[o] * dyr[o];
      dxr[k] = acc;
      if (dw) {
        float xv = xr[k];
        float* dwr = dw->ptr() + static_cast<size_t>(k) * out;
        for (int o = 0; o < out; ++o) dwr[o] += xv * dyr[o];
      }
    }
    if (db)
      for (int o = 0; o < out; ++o) db->data[static_cast<size_t>(o)] += dyr[o];
  }
  return dx;
}

// 3x3, stride 1, zero padding; x [n,h,w,c], w [3,3,c,f] -> y [n,h,w,f]
inline Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  int n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3];
  int f = w.shape[3];
  Tensor y({n, h, wd, f});
  for (int i = 0; i < n; ++i) {
    for (int oy = 0; oy < h; ++oy) {
      for (int ox = 0; ox < wd; ++ox) {
        float* yr = y.ptr() + (((static_cast<size_t>(i) * h + oy) * wd + ox) * f);
        for (int o = 0; o < f; ++o) yr[o] = b.data[static_cast<size_t>(o)];
        for (int ky = 0; ky < 3; ++ky) {
          int iy = oy + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            int ix = ox + kx - 1;
            if (ix < 0 || ix >= wd) continue;
            const float* xr = x.ptr() + (((static_cast<size_t>(i) * h + iy) * wd + ix) * c);
            const float* wr = w.ptr() + ((static_cast<size_t>(ky) * 3 + kx) * c) * f;
            for (int ci = 0; ci < c; ++ci) {
              float xv = xr[ci];
              if (xv == 0.0f) continue;
              const float* wc = wr + static_cast<size_t>(ci) * f;
              for (int o = 0; o < f; ++o) yr[o] += xv * wc[o];
            }
          }
        }
      }
    }
  }
  return y;
}

inline Tensor conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                              Tensor* dw, Tensor* db) {
  int n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3];
  int f = w.shape[3];
  Tensor dx({n, h, wd, c});
  for (int i = 0; i < n; ++i) {
    for (int oy = 0; oy < h; ++oy) {
      for (int ox = 0; ox < wd; ++ox) {
        const float* dyr = dy.ptr() + (((static_cast<size_t>(i) * h + oy) * wd + ox) * f);
        if (db)
          for (int o = 0; o < f; ++o) db->data[static_cast<size_t>(o)] += dyr[o];
        for (int ky = 0; ky < 3; ++ky) {
          int iy = oy + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            int ix = ox + kx - 1;
            if (ix < 0 || ix >= wd) continue;
            const float* xr = x.ptr() + (((static_cast<size_t>(i) * h + iy) * wd + ix) * c);
            float* dxr = dx.ptr() + (((static_cast<size_t>(i) * h + iy) * wd + ix) * c);
            const float* wr = w.ptr() + ((static_cast<size_t>(ky) * 3 + kx) * c) * f;
            float* dwr = dw ? dw->ptr() + ((static_cast<size_t>(ky) * 3 + kx) * c) * f : nullptr;
            for (int ci = 0; ci < c; ++ci) {
              const float* wc = wr + static_cast<size_t>(ci) * f;
              float acc = 0.0f;
              for (int o = 0; o < f; ++o) acc += wc[o] * dyr[o];
              dxr[ci] += acc;
              if (dwr) {
                float xv = xr[ci];
                float* dwc = dwr + static_cast<size_t>(ci) * f;
                for (int o = 0; o < f; ++o) dwc[o] += xv * dyr[o];
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (float& v : y.data) v = v > 0.0f ? v : 0.0f;
  return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx = dy;
  for (size_t i = 0; i < x.numel(); ++i)
    if (x.data[i] <= 0.0f) dx.data[i] = 0.0f;
  return dx;
}

// 2x2 window, stride 2; odd trailing row/col is dropped. Ties keep the first
// element in row-major scan order.
inline Tensor maxpool_forward(const Tensor& x, std::vector<int>* argmax) {
  int n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3];
  int oh = h / 2, ow = w / 2;
  Tensor y({n, oh, ow, c});
  if (argmax) argmax->assign(y.numel(), 0);
  size_t oi = 0;
  for (int i = 0; i < n; ++i) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        for (int ci = 0; ci < c; ++ci, ++oi) {
          float best = -std::numeric_limits<float>::infinity();
          size_t best_idx = 0;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              size_t idx = (((static_cast<size_t>(i) * h + (2 * oy + dy)) * w + (2 * ox + dx)) * c) + ci;
              if (x.data[idx] > best) {
                best = x.data[idx];
                best_idx = idx;
              }
            }
          }
          y.data[oi] = best;
          if (argmax) (*argmax)[oi] = static_cast<int>(best_idx);
        }
      }
    }
  }
  return y;
}

inline Tensor maxpool_backward(const std::vector<int>& argmax, const std::vector<int>& in_shape,
                               const Tensor& dy) {
  Tensor dx(in_shape);
  for (size_t i = 0; i < dy.numel(); ++i) dx.data[static_cast<size_t>(argmax[i])] += dy.data[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Forward / backward over the whole stack
// ---------------------------------------------------------------------------

struct ForwardTape {
  // acts[i] = input to layer i; acts[num_layers] = logits
  std::vector<Tensor> acts;
  // per-layer maxpool argmax (empty for other layer kinds)
  std::vector<std::vector<int>> pool_argmax;
};

inline void check_batch_shape(const Model& m, const Tensor& inputs) {
  if (per_sample_shape(inputs) != m.input_shape)
    throw ShapeError("model input: expected per-sample shape " +
                     Tensor(m.input_shape).shape_str() + ", got " +
                     Tensor(per_sample_shape(inputs)).shape_str());
}

inline Tensor forward(const Model& m, const Tensor& inputs, ForwardTape* tape = nullptr) {
  check_batch_shape(m, inputs);
  int n = inputs.shape[0];
  if (tape) {
    tape->acts.clear();
    tape->pool_argmax.assign(m.layers.size(), {});
  }
  Tensor cur = inputs;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& l = m.layers[i];
    if (per_sample_shape(cur) != l.in_shape)
      throw ShapeError("layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) +
                       "): expected input " + Tensor(l.in_shape).shape_str() + ", got " +
                       Tensor(per_sample_shape(cur)).shape_str());
    if (tape) tape->acts.push_back(cur);
    switch (l.kind) {
      case LayerKind::dense:
        cur = dense_forward(cur, m.param(l.w_name), m.param(l.b_name));
        break;
      case LayerKind::conv2d:
        cur = conv2d_forward(cur, m.param(l.w_name), m.param(l.b_name));
        break;
      case LayerKind::relu:
        cur = relu_forward(cur);
        break;
      case LayerKind::maxpool2x2:
        cur = maxpool_forward(cur, tape ? &tape->pool_argmax[i] : nullptr);
        break;
      case LayerKind::flatten:
        cur = Tensor(batch_shape(l.out_shape, n), std::move(cur.data));
        break;
    }
  }
  if (tape) tape->acts.push_back(cur);
  return cur;
}

inline Tensor forward(const Model& m, const Batch& b, ForwardTape* tape = nullptr) {
  return forward(m, b.inputs, tape);
}

struct Grads {
  std::map<std::string, Tensor> params;
  Tensor input;
  float loss = 0.0f;
};

// Reverse pass from d(loss)/d(logits). Accumulates parameter gradients unless
// `param_grads` is null (attack mode: input gradient only).
inline Tensor backward(const Model& m, const ForwardTape& tape, const Tensor& dlogits,
                       std::map<std::string, Tensor>* param_grads) {
  Tensor d = dlogits;
  for (size_t ii = m.layers.size(); ii-- > 0;) {
    const Layer& l = m.layers[ii];
    const Tensor& x = tape.acts[ii];
    switch (l.kind) {
      case LayerKind::dense: {
        Tensor* dw = param_grads ? &(*param_grads)[l.w_name] : nullptr;
        Tensor* db = param_grads ? &(*param_grads)[l.b_name] : nullptr;
        if (dw && dw->numel() == 0) *dw = zeros_like(m.param(l.w_name));
        if (db && db->numel() == 0) *db = zeros_like(m.param(l.b_name));
        d = dense_backward(x, m.param(l.w_name), d, dw, db);
        break;
      }
      case LayerKind::conv2d: {
        Tensor* dw = param_grads ? &(*param_grads)[l.w_name] : nullptr;
        Tensor* db = param_grads ? &(*param_grads)[l.b_name] : nullptr;
        if (dw && dw->numel() == 0) *dw = zeros_like(m.param(l.w_name));
        if (db && db->numel() == 0) *db = zeros_like(m.param(l.b_name));
        d = conv2d_backward(x, m.param(l.w_name), d, dw, db);
        break;
      }
      case LayerKind::relu:
        d = relu_backward(x, d);
        break;
      case LayerKind::maxpool2x2:
        d = maxpool_backward(tape.pool_argmax[ii], x.shape, d);
        break;
      case LayerKind::flatten:
        d = Tensor(x.shape, std::move(d.data));
        break;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Losses on logits. Values and gradients are means over the batch.
// ---------------------------------------------------------------------------

inline Tensor softmax_probs(const Tensor& logits) {
  ensure_finite(logits, "softmax_probs");
  int n = logits.shape[0], k = logits.shape[1];
  Tensor p({n, k});
  for (int i = 0; i < n; ++i) {
    const float* z = logits.ptr() + static_cast<size_t>(i) * k;
    float* pr = p.ptr() + static_cast<size_t>(i) * k;
    float m = z[0];
    for (int j = 1; j < k; ++j) m = std::max(m, z[j]);
    float sum = 0.0f;
    for (int j = 0; j < k; ++j) {
      pr[j] = std::exp(z[j] - m);
      sum += pr[j];
    }
    for (int j = 0; j < k; ++j) pr[j] /= sum;
  }
  return p;
}

inline void check_labels(const Tensor& logits, const std::vector<int>& labels) {
  int n = logits.shape[0], k = logits.shape[1];
  if (static_cast<size_t>(n) != labels.size()) throw DataError("label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= k) throw DataError("label " + std::to_string(y) + " out of range [0," +
                                         std::to_string(k) + ")");
}

struct LogitLoss {
  virtual ~LogitLoss() = default;
  // Returns the loss; fills dlogits (same shape as logits) when non-null.
  virtual float eval(const Tensor& logits, const std::vector<int>& labels,
                     Tensor* dlogits) const = 0;
};

// mean over batch of -log softmax(logits)[y]
struct CrossEntropyLoss final : LogitLoss {
  float eval(const Tensor& logits, const std::vector<int>& labels, Tensor* dlogits) const override {
    check_labels(logits, labels);
    int n = logits.shape[0], k = logits.shape[1];
    Tensor p = softmax_probs(logits);
    float loss = 0.0f;
    for (int i = 0; i < n; ++i) {
      const float* z = logits.ptr() + static_cast<size_t>(i) * k;
      float m = z[0];
      for (int j = 1; j < k; ++j) m = std::max(m, z[j]);
      float lse = 0.0f;
      for (int j = 0; j < k; ++j) lse += std::exp(z[j] - m);
      loss += (m + std::log(lse)) - z[labels[static_cast<size_t>(i)]];
    }
    loss /= static_cast<float>(n);
    if (dlogits) {
      *dlogits = p;
      float inv = 1.0f / static_cast<float>(n);
      for (int i = 0; i < n; ++i) {
        float* dr = dlogits->ptr() + static_cast<size_t>(i) * k;
        dr[labels[static_cast<size_t>(i)]] -= 1.0f;
        for (int j = 0; j < k; ++j) dr[j] *= inv;
      }
    }
    return loss;
  }
};

// mean over batch of softmax(logits)[y]
struct TrueClassProbLoss final : LogitLoss {
  float eval(const Tensor& logits, const std::vector<int>& labels, Tensor* dlogits) const override {
    check_labels(logits, labels);
    int n = logits.shape[0], k = logits.shape[1];
    Tensor p = softmax_probs(logits);
    float loss = 0.0f;
    if (dlogits) *dlogits = Tensor({n, k});
    for (int i = 0; i < n; ++i) {
      const float* pr = p.ptr() + static_cast<size_t>(i) * k;
      int y = labels[static_cast<size_t>(i)];
      float py = pr[y];
      loss += py;
      if (dlogits) {
        // d p[y] / d z[j] = p[y] * ([j==y] - p[j])
        float* dr = dlogits->ptr() + static_cast<size_t>(i) * k;
        float inv = 1.0f / static_cast<float>(n);
        for (int j = 0; j < k; ++j) dr[j] = py * ((j == y ? 1.0f : 0.0f) - pr[j]) * inv;
      }
    }
    return loss / static_cast<float>(n);
  }
};

// mean over batch of logits[y] (pre-softmax score)
struct TrueClassLogitLoss final : LogitLoss {
  float eval(const Tensor& logits, const std::vector<int>& labels, Tensor* dlogits) const override {
    check_labels(logits, labels);
    int n = logits.shape[0], k = logits.shape[1];
    float loss = 0.0f;
    if (dlogits) *dlogits = Tensor({n, k});
    for (int i = 0; i < n; ++i) {
      int y = labels[static_cast<size_t>(i)];
      loss += logits.data[static_cast<size_t>(i) * k + y];
      if (dlogits) dlogits->data[static_cast<size_t>(i) * k + y] = 1.0f / static_cast<float>(n);
    }
    return loss / static_cast<float>(n);
  }
};

inline float cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  return CrossEntropyLoss{}.eval(logits, labels, nullptr);
}

inline Grads grad(const Model& m, const Batch& b, const LogitLoss& loss_fn) {
  ForwardTape tape;
  Tensor logits = forward(m, b.inputs, &tape);
  Tensor dlogits;
  Grads g;
  g.loss = loss_fn.eval(logits, b.labels, &dlogits);
  g.input = backward(m, tape, dlogits, &g.params);
  return g;
}

inline Grads grad(const Model& m, const Batch& b) { return grad(m, b, CrossEntropyLoss{}); }

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

inline Tensor as_single_batch(const Tensor& x, const std::vector<int>& input_shape) {
  if (x.shape == input_shape) return Tensor(batch_shape(input_shape, 1), x.data);
  if (!x.shape.empty() && x.shape[0] == 1 && per_sample_shape(x) == input_shape) return x;
  throw ShapeError("expected a single sample of shape " + Tensor(input_shape).shape_str() +
                   ", got " + Tensor(x.shape).shape_str());
}

// Classes ordered by descending probability; ties break toward the smaller
// class index.
inline std::vector<int> topk_from_logits(const Tensor& logits_row, int k) {
  int classes = static_cast<int>(logits_row.numel());
  std::vector<int> order(static_cast<size_t>(classes));
  for (int i = 0; i < classes; ++i) order[static_cast<size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    float za = logits_row.data[static_cast<size_t>(a)], zb = logits_row.data[static_cast<size_t>(b)];
    if (za != zb) return za > zb;
    return a < b;
  });
  order.resize(static_cast<size_t>(k));
  return order;
}

inline std::vector<int> predict_topk(const Model& m, const Tensor& input, int k) {
  if (k < 1 || k > m.num_classes)
    throw ConfigError("top-k k=" + std::to_string(k) + " out of range [1," +
                      std::to_string(m.num_classes) + "]");
  Tensor logits = forward(m, as_single_batch(input, m.input_shape));
  return topk_from_logits(Tensor({m.num_classes}, logits.data), k);
}

inline int predict1(const Model& m, const Tensor& input) { return predict_topk(m, input, 1)[0]; }

// Input to the final dense layer, captured from the forward tape.
inline Tensor penultimate_activations(const Model& m, const Tensor& input) {
  if (m.layers.size() < 2) throw ShapeError("penultimate_activations: single-layer model");
  size_t last_dense = m.layers.size();
  for (size_t i = m.layers.size(); i-- > 0;)
    if (m.layers[i].kind == LayerKind::dense) {
      last_dense = i;
      break;
    }
  if (last_dense == m.layers.size() || last_dense == 0)
    throw ShapeError("penultimate_activations: model has no final dense layer");
  ForwardTape tape;
  forward(m, as_single_batch(input, m.input_shape), &tape);
  Tensor act = tape.acts[last_dense];
  return Tensor(per_sample_shape(act), std::move(act.data));
}

// ---------------------------------------------------------------------------
// SGD training
// ---------------------------------------------------------------------------

inline Model sgd_train(Model model, const std::vector<Batch>& data, float lr, int epochs,
                       std::vector<float>* epoch_losses = nullptr) {
  if (lr <= 0.0f) throw ConfigError("sgd_train: lr must be > 0");
  if (epochs < 0) throw ConfigError("sgd_train: epochs must be >= 0");
  for (int e = 0; e < epochs; ++e) {
    float total = 0.0f;
    long long count = 0;
    for (size_t bi = 0; bi < data.size(); ++bi) {
      Grads g = grad(model, data[bi]);
      if (!std::isfinite(g.loss))
        throw NumericalError("sgd_train: non-finite loss at epoch " + std::to_string(e) +
                             ", batch " + std::to_string(bi));
      for (auto& [name, gt] : g.params) axpy(-lr, gt, model.param(name));
      total += g.loss * static_cast<float>(data[bi].size());
      count += data[bi].size();
    }
    if (epoch_losses) epoch_losses->push_back(count ? total / static_cast<float>(count) : 0.0f);
  }
  return model;
}

inline float accuracy(const Model& m, const std::vector<Batch>& data) {
  long long hit = 0, total = 0;
  for (const Batch& b : data) {
    Tensor logits = forward(m, b.inputs);
    int k = m.num_classes;
    for (int i = 0; i < b.size(); ++i) {
      Tensor row({k}, std::vector<float>(logits.data.begin() + static_cast<long>(i) * k,
                                         logits.data.begin() + static_cast<long>(i + 1) * k));
      if (topk_from_logits(row, 1)[0] == b.labels[static_cast<size_t>(i)]) ++hit;
      ++total;
    }
  }
  return total ? static_cast<float>(hit) / static_cast<float>(total) : 0.0f;
}

}  // namespace diva
