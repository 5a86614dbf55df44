#pragma once

#include <cstddef>
#include <initializer_list>
#include <map>
#include <string>
#include <utility>

namespace ise3 {

/// Multiplicity structure of an equivariant feature: feature type l -> channel
/// count. A fiber is stored flattened per node, types in ascending order, each
/// type as `channels x (2l+1)` with the m index fastest.
class Fiber {
 public:
  Fiber() = default;
  Fiber(std::initializer_list<std::pair<const int, int>> types);
  explicit Fiber(std::map<int, int> types);

  /// Every type 0..max_type with the same channel count.
  static Fiber uniform(int max_type, int channels);

  int multiplicity(int l) const;
  bool has(int l) const { return types_.count(l) != 0; }
  bool empty() const { return types_.empty(); }
  const std::map<int, int>& types() const { return types_; }
  int max_type() const;

  /// Total flattened length sum_l mult(l) * (2l+1).
  std::size_t dim() const { return dim_; }
  /// Offset of the type-l block inside the flattened feature. Requires has(l).
  std::size_t offset(int l) const;

  /// Dictionary notation, e.g. "{0:4,1:4,2:4}".
  std::string to_string() const;

  bool operator==(const Fiber& other) const { return types_ == other.types_; }

 private:
  void validate_and_index();

  std::map<int, int> types_;
  std::map<int, std::size_t> offsets_;
  std::size_t dim_ = 0;
};

}  // namespace ise3
