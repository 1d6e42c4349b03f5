#pragma once

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "diva/adapt.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// DIVA1 checkpoint format.
//
//   DIVA1\n
//   format 1\n
//   input_shape <d0> <d1> ...\n
//   num_classes <K>\n
//   layer <kind> [<out extent>]\n          (one per layer, in order)
//   adaptation <mode> bits <b>\n           (adapted models only)
//   provenance <text>\n                    (optional, single line)
//   act_qp <layer> scale <s> zero_point <z> bits <b>\n   (quantized modes)
//   tensor <name> <rank> <dims...> offset <o>\n          (f32 latent blob)
//   qtensor <name> <rank> <dims...> scale <s> zero_point <z> bits <b> offset <o>\n
//   mask <name> <rank> <dims...> offset <o>\n            (bit-packed, LSB first)
//   end <blob bytes>\n
//   <raw little-endian blobs, in header order>
//
// Scales are printed with %.9g so every f32 round-trips exactly; an imported
// model's quantized forward pass is bit-identical to the exporter's.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

namespace detail {

inline std::string fmt_f32(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

struct HeaderWriter {
  std::ostringstream text;
  std::string blobs;

  size_t add_blob(const void* data, size_t bytes) {
    size_t off = blobs.size();
    blobs.append(static_cast<const char*>(data), bytes);
    return off;
  }
};

inline void write_arch(HeaderWriter& h, const Model& m) {
  h.text << "input_shape";
  for (int e : m.input_shape) h.text << ' ' << e;
  h.text << "\nnum_classes " << m.num_classes << '\n';
  for (const Layer& l : m.layers) {
    h.text << "layer " << layer_kind_name(l.kind);
    if (l.kind == LayerKind::dense) h.text << ' ' << l.out_shape[0];
    if (l.kind == LayerKind::conv2d) h.text << ' ' << l.out_shape[2];
    h.text << '\n';
  }
}

inline void write_tensors(HeaderWriter& h, const Model& m) {
  for (const auto& [name, t] : m.params) {
    size_t off = h.add_blob(t.data.data(), t.numel() * sizeof(float));
    h.text << "tensor " << name << ' ' << t.shape.size();
    for (int e : t.shape) h.text << ' ' << e;
    h.text << " offset " << off << '\n';
  }
}

inline std::vector<uint8_t> pack_bits(const Tensor& mask) {
  std::vector<uint8_t> bytes((mask.numel() + 7) / 8, 0);
  for (size_t i = 0; i < mask.numel(); ++i)
    if (mask.data[i] != 0.0f) bytes[i >> 3] |= static_cast<uint8_t>(1u << (i & 7));
  return bytes;
}

inline void finish(const std::string& path, HeaderWriter& h) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "DIVA1\nformat 1\n" << h.text.str() << "end " << h.blobs.size() << '\n';
  out.write(h.blobs.data(), static_cast<std::streamsize>(h.blobs.size()));
  if (!out) throw DataError("write failed: " + path);
}

// Parsed header line-by-line view plus the blob region.
struct Parsed {
  std::vector<std::string> lines;
  std::string blobs;
};

inline Parsed parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::string magic;
  if (!std::getline(in, magic) || magic != "DIVA1")
    throw DataError("not a DIVA1 checkpoint: " + path);
  std::string fmt;
  if (!std::getline(in, fmt) || fmt != "format 1")
    throw DataError("unsupported checkpoint format in " + path);
  Parsed p;
  std::string line;
  size_t blob_bytes = std::string::npos;
  while (std::getline(in, line)) {
    if (line.rfind("end ", 0) == 0) {
      blob_bytes = static_cast<size_t>(std::stoull(line.substr(4)));
      break;
    }
    p.lines.push_back(line);
  }
  if (blob_bytes == std::string::npos) throw DataError("truncated checkpoint header: " + path);
  p.blobs.resize(blob_bytes);
  if (blob_bytes &&
      !in.read(p.blobs.data(), static_cast<std::streamsize>(blob_bytes)))
    throw DataError("truncated checkpoint payload: " + path);
  return p;
}

struct TensorRec {
  std::string name;
  std::vector<int> shape;
  size_t offset = 0;
  QuantParams qp;  // qtensor only
};

inline const char* kind_prefix(const std::string& line, const char* key) {
  size_t n = std::strlen(key);
  if (line.size() > n && line.compare(0, n, key) == 0 && line[n] == ' ')
    return line.c_str() + n + 1;
  return nullptr;
}

inline void read_blob(const std::string& blobs, size_t offset, void* dst, size_t bytes,
                      const std::string& what) {
  if (offset + bytes > blobs.size())
    throw DataError("checkpoint blob out of range for " + what);
  std::memcpy(dst, blobs.data() + offset, bytes);
}

struct ParsedModel {
  Model model;
  bool adapted = false;
  AdaptMode mode = AdaptMode::quantized;
  int bits = 8;
  std::string provenance;
  std::vector<QuantParams> act_qp;
  std::vector<TensorRec> tensors, qtensors, maskrecs;
};

inline ParsedModel decode(const Parsed& p, const std::string& path) {
  ParsedModel r;
  std::vector<int> input_shape;
  int num_classes = -1;
  std::vector<std::pair<std::string, int>> layer_specs;

  for (const std::string& line : p.lines) {
    if (const char* s = kind_prefix(line, "input_shape")) {
      std::istringstream ls(s);
      int e;
      while (ls >> e) input_shape.push_back(e);
    } else if (const char* s2 = kind_prefix(line, "num_classes")) {
      num_classes = std::atoi(s2);
    } else if (const char* s3 = kind_prefix(line, "layer")) {
      std::istringstream ls(s3);
      std::string kind;
      int arg = 0;
      ls >> kind >> arg;
      layer_specs.emplace_back(kind, arg);
    } else if (const char* s4 = kind_prefix(line, "adaptation")) {
      std::istringstream ls(s4);
      std::string mode, kw;
      ls >> mode >> kw >> r.bits;
      r.adapted = true;
      r.mode = adapt_mode_from(mode);
    } else if (const char* s5 = kind_prefix(line, "provenance")) {
      r.provenance = s5;
    } else if (const char* s6 = kind_prefix(line, "act_qp")) {
      std::istringstream ls(s6);
      int layer_i;
      std::string kw;
      QuantParams qp;
      ls >> layer_i >> kw >> qp.scale >> kw >> qp.zero_point >> kw >> qp.bits;
      if (static_cast<size_t>(layer_i) != r.act_qp.size())
        throw DataError("act_qp lines out of order in " + path);
      r.act_qp.push_back(qp);
    } else if (kind_prefix(line, "tensor") || kind_prefix(line, "qtensor") ||
               kind_prefix(line, "mask")) {
      bool is_q = line[0] == 'q';
      bool is_mask = line[0] == 'm';
      std::istringstream ls(line);
      std::string tag;
      TensorRec rec;
      int rank;
      ls >> tag >> rec.name >> rank;
      for (int i = 0; i < rank; ++i) {
        int e;
        ls >> e;
        rec.shape.push_back(e);
      }
      std::string kw;
      if (is_q) ls >> kw >> rec.qp.scale >> kw >> rec.qp.zero_point >> kw >> rec.qp.bits;
      ls >> kw >> rec.offset;
      if (!ls || kw != "offset") throw DataError("bad tensor record in " + path + ": " + line);
      (is_mask ? r.maskrecs : is_q ? r.qtensors : r.tensors).push_back(std::move(rec));
    } else if (!line.empty()) {
      throw DataError("unknown checkpoint header line in " + path + ": " + line);
    }
  }

  if (input_shape.empty() || num_classes < 2)
    throw DataError("checkpoint missing architecture in " + path);
  Model m = make_model(input_shape);
  for (auto& [kind, arg] : layer_specs) {
    if (kind == "dense") add_dense(m, arg);
    else if (kind == "conv2d") add_conv2d(m, arg);
    else if (kind == "relu") add_relu(m);
    else if (kind == "maxpool2x2") add_maxpool2x2(m);
    else if (kind == "flatten") add_flatten(m);
    else throw DataError("unknown layer kind in " + path + ": " + kind);
  }
  finalize_classifier(m, num_classes);

  for (const TensorRec& rec : r.tensors) {
    Tensor& t = m.param(rec.name);
    if (t.shape != rec.shape) throw DataError("tensor shape mismatch for " + rec.name);
    read_blob(p.blobs, rec.offset, t.data.data(), t.numel() * sizeof(float), rec.name);
    ensure_finite(t, "checkpoint tensor " + rec.name);
  }
  r.model = std::move(m);
  return r;
}

}  // namespace detail

inline void save_model(const std::string& path, const Model& m) {
  detail::HeaderWriter h;
  detail::write_arch(h, m);
  detail::write_tensors(h, m);
  detail::finish(path, h);
}

inline Model load_model(const std::string& path) {
  detail::ParsedModel r = detail::decode(detail::parse_file(path), path);
  if (r.adapted) throw DataError("checkpoint holds an adapted model, use import_adapted: " + path);
  return std::move(r.model);
}

inline void export_adapted(const std::string& path, const AdaptedModel& am,
                           const std::string& provenance = "") {
  detail::HeaderWriter h;
  detail::write_arch(h, am.base);
  h.text << "adaptation " << adapt_mode_name(am.mode) << " bits " << am.bits << '\n';
  if (!provenance.empty()) {
    if (provenance.find('\n') != std::string::npos)
      throw ConfigError("provenance must be a single line");
    h.text << "provenance " << provenance << '\n';
  }
  if (am.is_quantized()) {
    for (size_t i = 0; i < am.act_qp.size(); ++i)
      h.text << "act_qp " << i << " scale " << detail::fmt_f32(am.act_qp[i].scale)
             << " zero_point " << am.act_qp[i].zero_point << " bits " << am.act_qp[i].bits
             << '\n';
  }
  detail::write_tensors(h, am.base);
  if (am.is_quantized()) {
    for (const auto& [name, w] : am.wq) {
      size_t off = h.add_blob(w.codes.data(), w.codes.size());
      const Tensor& t = am.base.param(name);
      h.text << "qtensor " << name << ' ' << t.shape.size();
      for (int e : t.shape) h.text << ' ' << e;
      h.text << " scale " << detail::fmt_f32(w.qp.scale) << " zero_point " << w.qp.zero_point
             << " bits " << w.qp.bits << " offset " << off << '\n';
    }
  }
  for (const auto& [name, mask] : am.masks) {
    std::vector<uint8_t> packed = detail::pack_bits(mask);
    size_t off = h.add_blob(packed.data(), packed.size());
    h.text << "mask " << name << ' ' << mask.shape.size();
    for (int e : mask.shape) h.text << ' ' << e;
    h.text << " offset " << off << '\n';
  }
  detail::finish(path, h);
}

inline AdaptedModel import_adapted(const std::string& path) {
  detail::Parsed p = detail::parse_file(path);
  detail::ParsedModel r = detail::decode(p, path);
  if (!r.adapted) throw DataError("checkpoint holds a plain model, use load_model: " + path);
  AdaptedModel am;
  am.base = std::move(r.model);
  am.mode = r.mode;
  am.bits = r.bits;
  if (am.is_quantized()) {
    if (r.act_qp.size() != am.base.layers.size())
      throw DataError("checkpoint is missing activation calibration: " + path);
    am.act_qp = std::move(r.act_qp);
    for (const detail::TensorRec& rec : r.qtensors) {
      const Tensor& t = am.base.param(rec.name);
      if (t.shape != rec.shape) throw DataError("qtensor shape mismatch for " + rec.name);
      WeightQuant w;
      w.qp = rec.qp;
      w.codes.resize(t.numel());
      detail::read_blob(p.blobs, rec.offset, w.codes.data(), w.codes.size(), rec.name);
      int qmax = w.qp.qmax();
      for (uint8_t code : w.codes)
        if (static_cast<int>(code) > qmax)
          throw DataError("quantized code out of range for " + rec.name);
      w.deq = dequantize(w.codes, t.shape, w.qp);
      am.wq[rec.name] = std::move(w);
    }
    for (const auto& [name, t] : am.base.params)
      if (am.wq.find(name) == am.wq.end())
        throw DataError("checkpoint is missing codes for " + name);
  }
  for (const detail::TensorRec& rec : r.maskrecs) {
    const Tensor& t = am.base.param(rec.name);
    if (t.shape != rec.shape) throw DataError("mask shape mismatch for " + rec.name);
    std::vector<uint8_t> packed((t.numel() + 7) / 8);
    detail::read_blob(p.blobs, rec.offset, packed.data(), packed.size(), rec.name);
    Tensor mask(t.shape);
    for (size_t i = 0; i < t.numel(); ++i)
      mask.data[i] = (packed[i >> 3] >> (i & 7)) & 1u ? 1.0f : 0.0f;
    am.masks[rec.name] = std::move(mask);
  }
  return am;
}

}  // namespace diva
