#include "popmeta/params.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "popmeta/hash.hpp"

namespace popmeta {

void ParameterStore::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter segment '" + name + "'");
  segments_.push_back({std::move(name), std::move(value)});
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(segments_.begin(), segments_.end(),
                     [&](const Segment& s) { return s.name == name; });
}

std::size_t ParameterStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (segments_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter segment '" + name + "'");
}

std::size_t ParameterStore::flat_size() const {
  std::size_t n = 0;
  for (const auto& s : segments_) n += s.value.size();
  return n;
}

FlatVector ParameterStore::flat() const {
  FlatVector out;
  out.reserve(flat_size());
  for (const auto& s : segments_) out.insert(out.end(), s.value.data().begin(), s.value.data().end());
  return out;
}

void ParameterStore::set_flat(std::span<const double> values) {
  if (values.size() != flat_size()) {
    throw std::invalid_argument("set_flat: expected " + std::to_string(flat_size()) +
                                " values, got " + std::to_string(values.size()));
  }
  std::size_t off = 0;
  for (auto& s : segments_) {
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(off),
              values.begin() + static_cast<std::ptrdiff_t>(off + s.value.size()),
              s.value.data().begin());
    off += s.value.size();
  }
}

std::vector<ad::Var> ParameterStore::bind(ad::Tape& tape, bool requires_grad) const {
  std::vector<ad::Var> vars;
  vars.reserve(segments_.size());
  for (const auto& s : segments_) vars.push_back(tape.leaf(s.value, requires_grad));
  return vars;
}

FlatVector ParameterStore::flatten(std::span<const ad::Var> grads) {
  FlatVector out;
  for (const auto& g : grads) {
    const auto& d = g.value().data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

std::uint64_t ParameterStore::hash() const {
  Fnv1a h;
  for (const auto& s : segments_) {
    h.update(s.name);
    h.update_pod(static_cast<std::uint64_t>(s.value.rows()));
    h.update_pod(static_cast<std::uint64_t>(s.value.cols()));
    for (double v : s.value.data()) h.update_pod(v);
  }
  return h.digest();
}

bool ParameterStore::operator==(const ParameterStore& o) const {
  if (segments_.size() != o.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (segments_[i].name != o.segments_[i].name || !(segments_[i].value == o.segments_[i].value)) {
      return false;
    }
  }
  return true;
}

}  // namespace popmeta
