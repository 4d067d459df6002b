#pragma once

// Named parameter collections and the OWTW checkpoint container.
//
// OWTW layout (little-endian):
//   "OWTW" | version u32 | entry count u32 |
//   per entry: name length u16 | UTF-8 name | rank u8 | extents u32 x rank |
//              float32 values x product(extents)

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "owt/binary_io.hpp"
#include "owt/errors.hpp"
#include "owt/tensor.hpp"

namespace owt {

template <typename T>
struct NamedParameter {
  std::string name;
  BasicTensor<T> tensor;
  bool decay = true;
};

// Ordered, name-unique view over model parameters. Entries alias the model's
// tensors, so updates through the set are visible to the model.
template <typename T>
class BasicParameterSet {
 public:
  void add(std::string name, BasicTensor<T> tensor, bool decay) {
    if (!index_.emplace(name, entries_.size()).second) {
      throw ContractError("duplicate parameter name '" + name + "'");
    }
    entries_.push_back({std::move(name), std::move(tensor), decay});
  }

  const std::vector<NamedParameter<T>>& entries() const { return entries_; }
  std::vector<NamedParameter<T>>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const BasicTensor<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].tensor;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<NamedParameter<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParameterSet = BasicParameterSet<float>;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::string encode_checkpoint(const BasicParameterSet<T>& params) {
  io::ByteWriter w;
  w.bytes("OWTW");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    if (e.name.size() > 0xFFFF) throw ContractError("parameter name too long: " + e.name);
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name);
    w.u8(static_cast<std::uint8_t>(e.tensor.rank()));
    for (std::size_t extent : e.tensor.shape()) w.u32(static_cast<std::uint32_t>(extent));
    for (T v : e.tensor.data()) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

inline std::vector<CheckpointEntry> decode_checkpoint(std::string bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.bytes(4, "magic") != "OWTW") throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = r.offset();
  if (r.u32("version") != kCheckpointVersion) throw FormatError("unsupported checkpoint version", version_at);
  const std::uint32_t count = r.u32("entry count");
  std::vector<CheckpointEntry> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const std::uint16_t len = r.u16("name length");
    e.name = r.bytes(len, "name");
    const std::uint8_t rank = r.u8("rank");
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.u32("extent"));
    const std::size_t n = shape_numel(e.shape);
    r.need(n * 4, "values");
    e.values.resize(n);
    for (auto& v : e.values) v = r.f32("value");
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint entries", r.offset());
  return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const BasicParameterSet<T>& params) {
  io::write_file(path, encode_checkpoint(params));
}

// Copies values into an existing parameter set; names and shapes must match exactly.
template <typename T>
void load_checkpoint_into(const std::vector<CheckpointEntry>& entries, BasicParameterSet<T>& params) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& p : params.entries()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DimensionError("checkpoint lacks parameter '" + p.name + "'");
    if (it->second->shape != p.tensor.shape()) {
      throw DimensionError("checkpoint parameter '" + p.name + "' has shape " +
                           shape_string(it->second->shape) + ", model expects " +
                           shape_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
  }
  if (by_name.size() != params.size()) {
    throw DimensionError("checkpoint has " + std::to_string(by_name.size()) + " parameters, model has " +
                         std::to_string(params.size()));
  }
}

template <typename T>
void load_checkpoint(const std::string& path, BasicParameterSet<T>& params) {
  load_checkpoint_into(decode_checkpoint(io::read_file(path)), params);
}

// Copies parameter values between sets of possibly different scalar types.
template <typename To, typename From>
void copy_parameters(const BasicParameterSet<From>& src, BasicParameterSet<To>& dst) {
  if (src.size() != dst.size()) throw DimensionError("parameter set sizes differ");
  for (std::size_t k = 0; k < src.size(); ++k) {
    const auto& s = src.entries()[k];
    auto& d = dst.entries()[k];
    if (s.name != d.name || s.tensor.shape() != d.tensor.shape()) {
      throw DimensionError("parameter mismatch at '" + s.name + "' vs '" + d.name + "'");
    }
    auto out = d.tensor.mutable_data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(s.tensor.data()[i]);
  }
}

}  // namespace owt
