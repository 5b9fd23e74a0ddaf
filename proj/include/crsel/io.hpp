#pragma once

// Binary formats. All integers and floats are little-endian.
//
//   CRT1  tensor     "CRT1" | u32 n c h w | n*c*h*w f32, row-major NCHW
//   CRP1  selector   "CRP1" | u32 version | u32 block count
//                    | blocks: 16-byte NUL-padded ASCII name + CRT1 tensor
//                    | u32 m | f32 r | f32 tau | u8 hard | u64 seed
//   SCA1  ScA head   "SCA1" | CRT1 gate weight (1,c,1,1) | CRT1 gate bias (1,1,1,1)
//
// Conv blocks are stored as "<name>.weight" (c_out, c_in, 1, 1) and
// "<name>.bias" (c_out, 1, 1, 1); plain matrices as (1, 1, rows, cols).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "crsel/crselector.hpp"
#include "crsel/sca_head.hpp"
#include "crsel/tensor.hpp"

namespace crsel {

/// Malformed or truncated binary payload.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Bytes = std::vector<std::uint8_t>;

namespace io_detail {

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}
inline void put_u64(Bytes& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}
inline void put_f32(Bytes& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_magic(Bytes& out, std::string_view magic) { out.insert(out.end(), magic.begin(), magic.end()); }

class Reader {
 public:
  Reader(const Bytes& data, std::string what) : data_(data), what_(std::move(what)) {}

  void need(std::size_t count) const {
    if (data_.size() - pos_ < count) {
      throw FormatError(what_ + ": truncated payload at byte " + std::to_string(pos_) + " (need " +
                        std::to_string(count) + " more, have " + std::to_string(data_.size() - pos_) + ")");
    }
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= std::uint32_t{data_[pos_++]} << (8 * k);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= std::uint64_t{data_[pos_++]} << (8 * k);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string fixed_string(std::size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), len);
    pos_ += len;
    return s.substr(0, s.find('\0'));
  }
  void magic(std::string_view expected) {
    need(expected.size());
    if (std::memcmp(data_.data() + pos_, expected.data(), expected.size()) != 0) {
      throw FormatError(what_ + ": bad magic, expected \"" + std::string(expected) + "\"");
    }
    pos_ += expected.size();
  }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t pos() const { return pos_; }
  const std::string& what() const { return what_; }

 private:
  const Bytes& data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline void put_crt(Bytes& out, const Tensor& t) {
  put_magic(out, "CRT1");
  for (std::size_t d : {t.n(), t.c(), t.h(), t.w()}) {
    if (d > UINT32_MAX) throw FormatError("CRT1: dimension exceeds 32 bits");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.data()) put_f32(out, v);
}

inline Tensor get_crt(Reader& in) {
  in.magic("CRT1");
  Shape s;
  s.n = in.u32();
  s.c = in.u32();
  s.h = in.u32();
  s.w = in.u32();
  if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
    throw FormatError(in.what() + ": zero dimension in shape " + s.str());
  }
  const std::size_t count = s.numel();
  if (count / s.n / s.c / s.h != s.w || count > SIZE_MAX / 4) {
    throw FormatError(in.what() + ": shape overflows");
  }
  in.need(count * 4);
  std::vector<float> values(count);
  for (auto& v : values) v = in.f32();
  return Tensor(s, std::move(values));
}

}  // namespace io_detail

inline Bytes encode_crt(const Tensor& t) {
  Bytes out;
  io_detail::put_crt(out, t);
  return out;
}

inline Tensor decode_crt(const Bytes& data) {
  io_detail::Reader in(data, "CRT1");
  Tensor t = io_detail::get_crt(in);
  if (!in.at_end()) throw FormatError("CRT1: trailing bytes after payload");
  return t;
}

/// A selector parameter set together with the seed recorded alongside it.
struct CRSelectorBundle {
  CRSelectorParams<float> params;
  std::uint64_t seed = 42;

  bool operator==(const CRSelectorBundle&) const = default;
};

namespace io_detail {

inline constexpr std::uint32_t kCrpVersion = 1;

inline Tensor conv_weight_tensor(const Conv1x1Params<float>& c) {
  return Tensor(Shape{c.c_out(), c.c_in(), 1, 1}, c.weight.data);
}
inline Tensor conv_bias_tensor(const Conv1x1Params<float>& c) {
  return Tensor(Shape{c.c_out(), 1, 1, 1}, c.bias);
}
inline Tensor matrix_tensor(const Matrix<float>& m) { return Tensor(Shape{1, 1, m.rows, m.cols}, m.data); }

inline void put_block(Bytes& out, std::string_view name, const Tensor& t) {
  if (name.size() > 16) throw FormatError("CRP1: block name longer than 16 bytes: " + std::string(name));
  std::string padded(name);
  padded.resize(16, '\0');
  put_magic(out, padded);
  put_crt(out, t);
}

}  // namespace io_detail

inline const std::vector<std::string>& crp_block_names() {
  static const std::vector<std::string> names = {
      "gti1.weight", "gti1.bias", "gti2.weight", "gti2.bias", "vconv.weight", "vconv.bias",
      "offc.weight", "offc.bias", "fred.weight", "wmsk",      "wq",           "wk",
      "outc.weight", "outc.bias"};
  return names;
}

inline Bytes encode_crp(const CRSelectorBundle& bundle) {
  using namespace io_detail;
  const auto& p = bundle.params;
  p.validate();
  Bytes out;
  put_magic(out, "CRP1");
  put_u32(out, kCrpVersion);
  put_u32(out, static_cast<std::uint32_t>(crp_block_names().size()));
  put_block(out, "gti1.weight", conv_weight_tensor(p.gti_conv1));
  put_block(out, "gti1.bias", conv_bias_tensor(p.gti_conv1));
  put_block(out, "gti2.weight", conv_weight_tensor(p.gti_conv2));
  put_block(out, "gti2.bias", conv_bias_tensor(p.gti_conv2));
  put_block(out, "vconv.weight", conv_weight_tensor(p.v_conv));
  put_block(out, "vconv.bias", conv_bias_tensor(p.v_conv));
  put_block(out, "offc.weight", conv_weight_tensor(p.offset_conv));
  put_block(out, "offc.bias", conv_bias_tensor(p.offset_conv));
  put_block(out, "fred.weight", matrix_tensor(p.reduce));
  put_block(out, "wmsk", matrix_tensor(p.w_mask));
  put_block(out, "wq", matrix_tensor(p.w_q));
  put_block(out, "wk", matrix_tensor(p.w_k));
  put_block(out, "outc.weight", conv_weight_tensor(p.out_conv));
  put_block(out, "outc.bias", conv_bias_tensor(p.out_conv));
  if (p.m > UINT32_MAX) throw FormatError("CRP1: window size exceeds 32 bits");
  put_u32(out, static_cast<std::uint32_t>(p.m));
  put_f32(out, p.r);
  put_f32(out, p.tau);
  out.push_back(p.hard_mask ? 1 : 0);
  put_u64(out, bundle.seed);
  return out;
}

inline CRSelectorBundle decode_crp(const Bytes& data) {
  using namespace io_detail;
  Reader in(data, "CRP1");
  in.magic("CRP1");
  const std::uint32_t version = in.u32();
  if (version != kCrpVersion) throw FormatError("CRP1: unsupported version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  std::map<std::string, Tensor> blocks;
  for (std::uint32_t b = 0; b < count; ++b) {
    std::string name = in.fixed_string(16);
    Tensor t = get_crt(in);
    if (!blocks.emplace(name, std::move(t)).second) throw FormatError("CRP1: duplicate block " + name);
  }
  for (const auto& name : crp_block_names()) {
    if (!blocks.count(name)) throw FormatError("CRP1: missing block " + name);
  }
  if (blocks.size() != crp_block_names().size()) throw FormatError("CRP1: unknown extra blocks");

  auto conv = [&](const std::string& stem) {
    const Tensor& w = blocks.at(stem + ".weight");
    const Tensor& b = blocks.at(stem + ".bias");
    if (w.h() != 1 || w.w() != 1 || b.c() != 1 || b.h() != 1 || b.w() != 1 || b.n() != w.n()) {
      throw FormatError("CRP1: block " + stem + " has shapes " + w.shape().str() + " / " + b.shape().str());
    }
    return Conv1x1Params<float>(Matrix<float>(w.n(), w.c(), w.values()), b.values());
  };
  auto matrix = [&](const std::string& name) {
    const Tensor& t = blocks.at(name);
    if (t.n() != 1 || t.c() != 1) throw FormatError("CRP1: block " + name + " must be (1,1,rows,cols)");
    return Matrix<float>(t.h(), t.w(), t.values());
  };

  CRSelectorBundle bundle;
  auto& p = bundle.params;
  try {
    p.gti_conv1 = conv("gti1");
    p.gti_conv2 = conv("gti2");
    p.v_conv = conv("vconv");
    p.offset_conv = conv("offc");
    p.reduce = matrix("fred.weight");
    p.w_mask = matrix("wmsk");
    p.w_q = matrix("wq");
    p.w_k = matrix("wk");
    p.out_conv = conv("outc");
  } catch (const DimensionError& e) {
    throw FormatError(std::string("CRP1: ") + e.what());
  }
  p.m = in.u32();
  p.r = in.f32();
  p.tau = in.f32();
  const std::uint8_t hard = in.u8();
  if (hard > 1) throw FormatError("CRP1: hard flag must be 0 or 1");
  p.hard_mask = hard == 1;
  bundle.seed = in.u64();
  if (!in.at_end()) throw FormatError("CRP1: trailing bytes after payload");
  try {
    p.validate();
  } catch (const DimensionError& e) {
    throw FormatError(std::string("CRP1: ") + e.what());
  }
  return bundle;
}

inline Bytes encode_sca(const ScAParams<float>& p) {
  p.validate();
  Bytes out;
  io_detail::put_magic(out, "SCA1");
  io_detail::put_crt(out, Tensor(Shape{1, p.gate_conv.c_in(), 1, 1}, p.gate_conv.weight.data));
  io_detail::put_crt(out, Tensor(Shape{1, 1, 1, 1}, p.gate_conv.bias));
  return out;
}

inline ScAParams<float> decode_sca(const Bytes& data) {
  io_detail::Reader in(data, "SCA1");
  in.magic("SCA1");
  const Tensor w = io_detail::get_crt(in);
  const Tensor b = io_detail::get_crt(in);
  if (!in.at_end()) throw FormatError("SCA1: trailing bytes after payload");
  if (w.n() != 1 || w.h() != 1 || w.w() != 1) throw FormatError("SCA1: gate weight must be (1,c,1,1)");
  if (b.size() != 1) throw FormatError("SCA1: gate bias must be (1,1,1,1)");
  return {Conv1x1Params<float>(Matrix<float>(1, w.c(), w.values()), b.values())};
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

/// Writes to a sibling temporary and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, const Bytes& data) {
  write_file_atomic(path, data.data(), data.size());
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, text.data(), text.size());
}

template <typename Decoder>
auto load_with_context(const std::filesystem::path& path, Decoder decode) {
  try {
    return decode(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline Tensor load_crt(const std::filesystem::path& path) { return load_with_context(path, decode_crt); }
inline CRSelectorBundle load_crp(const std::filesystem::path& path) { return load_with_context(path, decode_crp); }
inline ScAParams<float> load_sca(const std::filesystem::path& path) { return load_with_context(path, decode_sca); }

inline void save_crt(const std::filesystem::path& path, const Tensor& t) { write_file_atomic(path, encode_crt(t)); }
inline void save_crp(const std::filesystem::path& path, const CRSelectorBundle& b) {
  write_file_atomic(path, encode_crp(b));
}
inline void save_sca(const std::filesystem::path& path, const ScAParams<float>& p) {
  write_file_atomic(path, encode_sca(p));
}

}  // namespace crsel
