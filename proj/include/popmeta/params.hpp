#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "popmeta/tape.hpp"
#include "popmeta/tensor.hpp"

namespace popmeta {

/// Flat gradient aligned with a ParameterStore's flat view.
using FlatVector = std::vector<double>;

/// Ordered collection of uniquely named parameter tensors. Copying a store
/// produces an independent deep copy.
class ParameterStore {
public:
  struct Segment {
    std::string name;
    Tensor value;
  };

  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  Tensor& at(const std::string& name) { return segments_[index_of(name)].value; }
  const Tensor& at(const std::string& name) const { return segments_[index_of(name)].value; }

  const std::vector<Segment>& segments() const { return segments_; }
  std::vector<Segment>& segments() { return segments_; }
  std::size_t segment_count() const { return segments_.size(); }

  std::size_t flat_size() const;
  FlatVector flat() const;
  void set_flat(std::span<const double> values);

  /// Places every segment on the tape as a leaf, in segment order.
  std::vector<ad::Var> bind(ad::Tape& tape, bool requires_grad = true) const;

  /// Concatenates per-segment gradient Vars into a flat vector.
  static FlatVector flatten(std::span<const ad::Var> grads);

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t hash() const;

  bool operator==(const ParameterStore& o) const;

private:
  std::vector<Segment> segments_;
};

}  // namespace popmeta
