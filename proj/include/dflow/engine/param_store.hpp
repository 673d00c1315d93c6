#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "dflow/engine/errors.hpp"

namespace dflow {

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;

  bool operator==(const ParamSlice&) const = default;
};

/// Flat parameter vector partitioned into named, disjoint, contiguous slices.
///
/// Slices are appended in order so they always tile the whole vector.
class ParamStore {
 public:
  ParamStore() = default;

  /// Appends a zero-initialized slice and returns its offset.
  std::size_t add_slice(std::string name, std::size_t length) {
    if (find(name) != nullptr) throw Error("duplicate parameter slice '" + name + "'");
    const std::size_t offset = values_.size();
    layout_.push_back({std::move(name), offset, length});
    values_.resize(offset + length, 0.0);
    return offset;
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::vector<ParamSlice>& layout() const noexcept { return layout_; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const double* data() const noexcept { return values_.data(); }
  double* data() noexcept { return values_.data(); }

  const ParamSlice* find(std::string_view name) const {
    for (const auto& s : layout_)
      if (s.name == name) return &s;
    return nullptr;
  }

  const ParamSlice& slice(std::string_view name) const {
    const auto* s = find(name);
    if (s == nullptr) throw Error("unknown parameter slice '" + std::string(name) + "'");
    return *s;
  }

  std::span<double> values(std::string_view name) {
    const auto& s = slice(name);
    return std::span<double>(values_).subspan(s.offset, s.length);
  }
  std::span<const double> values(std::string_view name) const {
    const auto& s = slice(name);
    return std::span<const double>(values_).subspan(s.offset, s.length);
  }

  /// Checks the tiling invariant: unique names, disjoint slices covering the vector.
  void validate() const {
    std::size_t expected = 0;
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      const auto& s = layout_[i];
      if (s.offset != expected) throw Error("parameter slice '" + s.name + "' is not contiguous");
      expected += s.length;
      for (std::size_t j = 0; j < i; ++j)
        if (layout_[j].name == s.name) throw Error("duplicate parameter slice '" + s.name + "'");
    }
    if (expected != values_.size()) throw Error("parameter slices do not cover the parameter vector");
  }

  /// Rebuilds a store from a serialized layout and values (used by checkpoints).
  static ParamStore from_parts(std::vector<ParamSlice> layout, std::vector<double> values) {
    ParamStore p;
    p.layout_ = std::move(layout);
    p.values_.assign(values.begin(), values.end());
    p.validate();
    return p;
  }

  bool same_layout(const ParamStore& other) const { return layout_ == other.layout_; }

 private:
  // Fixed alignment keeps Eigen's vectorized kernels on the same code path from run to run.
  std::vector<double, Eigen::aligned_allocator<double>> values_;
  std::vector<ParamSlice> layout_;
};

}  // namespace dflow
