#pragma once

#include <cmath>
#include <cstdint>

#include "diva/tensor.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Per-tensor asymmetric affine quantization.
//
//   code = clamp(round(v / scale) + zero_point, 0, 2^bits - 1)
//   v'   = (code - zero_point) * scale
//
// round() is half-away-from-zero (std::round). A constant tensor gets
// scale 1 so the roundtrip stays exact.
// ---------------------------------------------------------------------------

struct QuantParams {
  float scale = 1.0f;
  int zero_point = 0;
  int bits = 8;

  int qmax() const { return (1 << bits) - 1; }

  bool operator==(const QuantParams& o) const {
    return scale == o.scale && zero_point == o.zero_point && bits == o.bits;
  }
};

inline QuantParams choose_qparams(float mn, float mx, int bits = 8) {
  if (bits < 2 || bits > 8) throw ConfigError("quant bits must be in [2,8]");
  if (!(mn <= mx)) throw NumericalError("choose_qparams: invalid range");
  // Zero must be representable so padding and pruned weights survive.
  mn = std::min(mn, 0.0f);
  mx = std::max(mx, 0.0f);
  QuantParams qp;
  qp.bits = bits;
  float qmaxf = static_cast<float>((1 << bits) - 1);
  qp.scale = (mx > mn) ? (mx - mn) / qmaxf : 1.0f;
  float zp = std::round(-mn / qp.scale);
  qp.zero_point = static_cast<int>(std::min(qmaxf, std::max(0.0f, zp)));
  return qp;
}

inline QuantParams choose_qparams(const Tensor& t, int bits = 8) {
  ensure_finite(t, "choose_qparams");
  float mn = t.data.empty() ? 0.0f : t.data[0];
  float mx = mn;
  for (float v : t.data) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  return choose_qparams(mn, mx, bits);
}

inline uint8_t quantize_one(float v, const QuantParams& qp) {
  float q = std::round(v / qp.scale) + static_cast<float>(qp.zero_point);
  q = std::min(static_cast<float>(qp.qmax()), std::max(0.0f, q));
  return static_cast<uint8_t>(q);
}

inline float dequantize_one(uint8_t code, const QuantParams& qp) {
  return (static_cast<int>(code) - qp.zero_point) * qp.scale;
}

inline std::vector<uint8_t> quantize(const Tensor& t, const QuantParams& qp) {
  std::vector<uint8_t> codes(t.numel());
  for (size_t i = 0; i < t.numel(); ++i) codes[i] = quantize_one(t.data[i], qp);
  return codes;
}

inline Tensor dequantize(const std::vector<uint8_t>& codes, const std::vector<int>& shape,
                         const QuantParams& qp) {
  Tensor t(shape);
  if (codes.size() != t.numel()) throw ShapeError("dequantize: code count does not match shape");
  for (size_t i = 0; i < codes.size(); ++i) t.data[i] = dequantize_one(codes[i], qp);
  return t;
}

// Quantize-dequantize in one step. When `ste_mask` is non-null it receives a
// 0/1 mask per element: 1 where the pre-clamp code landed inside [0, qmax]
// (straight-through gradient passes), 0 where it clipped.
inline Tensor fake_quant(const Tensor& t, const QuantParams& qp, Tensor* ste_mask = nullptr) {
  Tensor out(t.shape);
  if (ste_mask) *ste_mask = Tensor(t.shape);
  for (size_t i = 0; i < t.numel(); ++i) {
    float q = std::round(t.data[i] / qp.scale) + static_cast<float>(qp.zero_point);
    bool inside = q >= 0.0f && q <= static_cast<float>(qp.qmax());
    float qc = std::min(static_cast<float>(qp.qmax()), std::max(0.0f, q));
    out.data[i] = (qc - static_cast<float>(qp.zero_point)) * qp.scale;
    if (ste_mask) ste_mask->data[i] = inside ? 1.0f : 0.0f;
  }
  return out;
}

// Running min/max tracker for activation calibration (exponential moving
// average, as used during quantization-aware training).
struct EmaRange {
  float mn = 0.0f;
  float mx = 0.0f;
  bool seen = false;
  float decay = 0.99f;

  void observe(const Tensor& t) {
    if (t.data.empty()) return;
    float bmn = t.data[0], bmx = t.data[0];
    for (float v : t.data) {
      bmn = std::min(bmn, v);
      bmx = std::max(bmx, v);
    }
    if (!seen) {
      mn = bmn;
      mx = bmx;
      seen = true;
    } else {
      mn = decay * mn + (1.0f - decay) * bmn;
      mx = decay * mx + (1.0f - decay) * bmx;
    }
  }

  QuantParams qparams(int bits = 8) const { return choose_qparams(mn, mx, bits); }
};

}  // namespace diva
