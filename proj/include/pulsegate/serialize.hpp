// Copyright 2026 The PulseGate Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Model files:
//
//   "PGM1"
//   u32 node_count
//   node_count x { u32 payload_len, payload }
//       payload: u8 kind, str name, u16 n_in, u32 in[n_in], u32 units,
//                u32 kernel, u8 padding, u32 window, f64 rate,
//                u16 n_win, u32 win[n_win], u16 rank, u32 out_shape[rank],
//                u16 n_params, n_params x { u8 rank, u32 dims[rank] }
//   u32 output_count, u32 outputs[output_count]
//   f32 parameters, declaration order
//   f32 running stats, per batchnorm node: mean[C] then var[C]
//   u32 meta_len, meta bytes (free-form JSON, may be empty)
//
// Everything little-endian; str is u16 length + bytes.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pulsegate/graph.hpp"

namespace pulsegate {

static_assert(std::endian::native == std::endian::little, "model I/O assumes a little-endian host");

inline constexpr char kModelMagic[4] = {'P', 'G', 'M', '1'};

namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(V));
  }
  void put_str(const std::string& s) {
    if (s.size() > 0xffff) throw Error("string too long for model record");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void put_bytes(const std::vector<char>& b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  std::vector<char>& bytes() noexcept { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(const char* p, std::size_t n) : p_(p), n_(n) {}
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, p_ + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string get_str() {
    const auto len = get<std::uint16_t>();
    need(len);
    std::string s(p_ + pos_, len);
    pos_ += len;
    return s;
  }
  const char* take(std::size_t n) {
    need(n);
    const char* r = p_ + pos_;
    pos_ += n;
    return r;
  }
  std::size_t remaining() const noexcept { return n_ - pos_; }

 private:
  void need(std::size_t k) const {
    if (pos_ + k > n_) throw Error("model file truncated");
  }
  const char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<char> encode_model(const ModelGraph<T>& g, const std::string& meta = {}) {
  detail::ByteWriter w;
  w.bytes().insert(w.bytes().end(), kModelMagic, kModelMagic + 4);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.nodes().size()));
  for (const auto& s : g.nodes()) {
    detail::ByteWriter r;
    r.put<std::uint8_t>(static_cast<std::uint8_t>(s.kind));
    r.put_str(s.name);
    r.put<std::uint16_t>(static_cast<std::uint16_t>(s.inputs.size()));
    for (auto i : s.inputs) r.put<std::uint32_t>(static_cast<std::uint32_t>(i));
    r.put<std::uint32_t>(static_cast<std::uint32_t>(s.units));
    r.put<std::uint32_t>(static_cast<std::uint32_t>(s.kernel));
    r.put<std::uint8_t>(static_cast<std::uint8_t>(s.padding));
    r.put<std::uint32_t>(static_cast<std::uint32_t>(s.window));
    r.put<double>(s.rate);
    r.put<std::uint16_t>(static_cast<std::uint16_t>(s.windows.size()));
    for (auto v : s.windows) r.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    r.put<std::uint16_t>(static_cast<std::uint16_t>(s.out_shape.size()));
    for (auto v : s.out_shape) r.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    r.put<std::uint16_t>(static_cast<std::uint16_t>(s.params.size()));
    for (auto pi : s.params) {
      const auto& shape = g.params()[pi].value.shape();
      r.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
      for (auto d : shape) r.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.bytes().size()));
    w.put_bytes(r.bytes());
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.outputs().size()));
  for (auto o : g.outputs()) w.put<std::uint32_t>(static_cast<std::uint32_t>(o));
  for (const auto& p : g.params())
    for (T v : p.value.vec()) w.put<float>(static_cast<float>(v));
  for (const auto& st : g.stats()) {
    for (T v : st.mean.vec()) w.put<float>(static_cast<float>(v));
    for (T v : st.var.vec()) w.put<float>(static_cast<float>(v));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.bytes().insert(w.bytes().end(), meta.begin(), meta.end());
  return std::move(w.bytes());
}

template <typename T>
ModelGraph<T> decode_model(const std::vector<char>& bytes, std::string* meta = nullptr) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0)
    throw Error("not a model file (bad magic)");
  detail::ByteReader r(bytes.data() + 4, bytes.size() - 4);
  ModelGraph<T> g;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.get<std::uint32_t>();
    detail::ByteReader rec(r.take(len), len);
    LayerSpec s;
    const auto kind = rec.get<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(LayerKind::upsample1d))
      throw Error("unknown layer kind id " + std::to_string(kind));
    s.kind = static_cast<LayerKind>(kind);
    s.name = rec.get_str();
    const auto nin = rec.get<std::uint16_t>();
    for (std::uint16_t i = 0; i < nin; ++i) {
      const auto in = rec.get<std::uint32_t>();
      if (in >= k) throw Error("model record '" + s.name + "' references a later node");
      s.inputs.push_back(in);
    }
    s.units = rec.get<std::uint32_t>();
    s.kernel = rec.get<std::uint32_t>();
    s.padding = static_cast<Padding>(rec.get<std::uint8_t>());
    s.window = rec.get<std::uint32_t>();
    s.rate = rec.get<double>();
    const auto nw = rec.get<std::uint16_t>();
    for (std::uint16_t i = 0; i < nw; ++i) s.windows.push_back(rec.get<std::uint32_t>());
    const auto rank = rec.get<std::uint16_t>();
    for (std::uint16_t i = 0; i < rank; ++i) s.out_shape.push_back(rec.get<std::uint32_t>());
    std::vector<Shape> pshapes(rec.get<std::uint16_t>());
    for (auto& ps : pshapes) {
      const auto pr = rec.get<std::uint8_t>();
      for (std::uint8_t i = 0; i < pr; ++i) ps.push_back(rec.get<std::uint32_t>());
    }
    const std::size_t before = g.params().size();
    Shape declared = s.out_shape;
    g.append_spec(s);
    const auto& built = g.nodes().back();
    if (built.out_shape != declared)
      throw Error("model record '" + s.name + "' shape " + shape_str(declared) +
                  " disagrees with rebuilt " + shape_str(built.out_shape));
    if (g.params().size() - before != pshapes.size())
      throw Error("model record '" + s.name + "' parameter count mismatch");
    for (std::size_t i = 0; i < pshapes.size(); ++i)
      if (g.params()[before + i].value.shape() != pshapes[i])
        throw Error("model record '" + s.name + "' parameter shape mismatch");
  }
  std::vector<NodeId> outs(r.get<std::uint32_t>());
  for (auto& o : outs) o = r.get<std::uint32_t>();
  g.set_outputs(std::move(outs));
  for (auto& p : g.params())
    for (auto& v : p.value.vec()) v = static_cast<T>(r.get<float>());
  for (auto& st : g.stats()) {
    for (auto& v : st.mean.vec()) v = static_cast<T>(r.get<float>());
    for (auto& v : st.var.vec()) v = static_cast<T>(r.get<float>());
  }
  const auto mlen = r.get<std::uint32_t>();
  const char* mp = r.take(mlen);
  if (meta) meta->assign(mp, mlen);
  if (r.remaining() != 0) throw Error("trailing bytes after model payload");
  return g;
}

inline std::vector<char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename T>
void save_model(const std::string& path, const ModelGraph<T>& g, const std::string& meta = {}) {
  write_file_bytes(path, encode_model(g, meta));
}

template <typename T>
ModelGraph<T> load_model(const std::string& path, std::string* meta = nullptr) {
  return decode_model<T>(read_file_bytes(path), meta);
}

}  // namespace pulsegate
