#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/numerics/layers.hpp"
#include "tddm/numerics/tensor.hpp"

namespace tddm::numerics {

// Checkpoint layout:
//
//   TDDM-CHECKPOINT 1
//   meta <key> <value>                       (zero or more)
//   param <name> <rank> <d0> .. <dn> <byte offset>
//   end <payload bytes>
//   <payload: little-endian float64 arrays, concatenated in manifest order>

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw ContractError("checkpoint has no tensor named " + name);
  }
};

namespace detail {
inline void put_le(std::ostream& os, double value) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(value);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffU);
  os.write(bytes, 8);
}

inline double get_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path);
  os << "TDDM-CHECKPOINT 1\n";
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint meta entries must be single-line with space-free keys");
    }
    os << "meta " << k << ' ' << v << '\n';
  }
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.find_first_of(" \n") != std::string::npos) {
      throw ContractError("checkpoint tensor names must not contain whitespace: " + name);
    }
    os << "param " << name << ' ' << t.rank();
    for (std::size_t d : t.shape()) os << ' ' << d;
    os << ' ' << offset << '\n';
    offset += t.size() * 8;
  }
  os << "end " << offset << '\n';
  for (const auto& [_, t] : ckpt.tensors) {
    for (double v : t.values()) detail::put_le(os, v);
  }
  if (!os) throw Error("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "TDDM-CHECKPOINT 1") {
    throw ParseError("not a checkpoint file: " + path, 0);
  }
  Checkpoint ckpt;
  std::vector<std::pair<Shape, std::size_t>> layout;
  std::size_t payload = 0;
  long lineno = 1;
  bool ended = false;
  while (!ended && std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls >> std::ws, value);
      ckpt.meta[key] = value;
    } else if (kind == "param") {
      std::string name;
      std::size_t rank = 0;
      ls >> name >> rank;
      Shape shape(rank);
      for (auto& d : shape) ls >> d;
      std::size_t off = 0;
      ls >> off;
      if (!ls) throw ParseError("malformed manifest line " + std::to_string(lineno), lineno);
      ckpt.tensors.emplace_back(name, Tensor(shape));
      layout.emplace_back(shape, off);
    } else if (kind == "end") {
      ls >> payload;
      ended = true;
    } else {
      throw ParseError("unexpected manifest entry at line " + std::to_string(lineno), lineno);
    }
  }
  if (!ended) throw ParseError("checkpoint manifest not terminated", lineno);
  std::vector<unsigned char> bytes(payload);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(payload));
  if (static_cast<std::size_t>(is.gcount()) != payload) {
    throw ParseError("checkpoint payload truncated", lineno);
  }
  for (std::size_t k = 0; k < ckpt.tensors.size(); ++k) {
    Tensor& t = ckpt.tensors[k].second;
    const std::size_t off = layout[k].second;
    if (off + t.size() * 8 > payload) throw ParseError("tensor extends past payload", static_cast<long>(k));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = detail::get_le(bytes.data() + off + 8 * i);
  }
  return ckpt;
}

inline Checkpoint snapshot(const ParameterStore& store) {
  Checkpoint ckpt;
  for (const auto& [name, v] : store.entries()) ckpt.tensors.emplace_back(name, v.value());
  return ckpt;
}

/// Copies checkpoint tensors into a store with the same names and shapes.
inline void restore(ParameterStore& store, const Checkpoint& ckpt) {
  for (auto& [name, v] : store.entries()) {
    const Tensor& t = ckpt.tensor(name);
    if (t.shape() != v.value().shape()) {
      throw DimensionError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) +
                           ", model expects " + shape_str(v.value().shape()));
    }
    v.mutable_value() = t;
  }
}

}  // namespace tddm::numerics
