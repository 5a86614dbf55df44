#include "ise3/fiber.hpp"

#include <sstream>

#include "ise3/errors.hpp"

namespace ise3 {

Fiber::Fiber(std::initializer_list<std::pair<const int, int>> types) : types_(types) {
  validate_and_index();
}

Fiber::Fiber(std::map<int, int> types) : types_(std::move(types)) { validate_and_index(); }

Fiber Fiber::uniform(int max_type, int channels) {
  std::map<int, int> t;
  for (int l = 0; l <= max_type; ++l) t[l] = channels;
  return Fiber(std::move(t));
}

void Fiber::validate_and_index() {
  std::size_t off = 0;
  for (const auto& [l, mult] : types_) {
    if (l < 0) throw ArgumentError("fiber: negative feature type " + std::to_string(l));
    if (mult < 1)
      throw ArgumentError("fiber: type " + std::to_string(l) + " has channel count " +
                          std::to_string(mult));
    offsets_[l] = off;
    off += static_cast<std::size_t>(mult) * (2 * l + 1);
  }
  dim_ = off;
}

int Fiber::multiplicity(int l) const {
  auto it = types_.find(l);
  return it == types_.end() ? 0 : it->second;
}

int Fiber::max_type() const { return types_.empty() ? -1 : types_.rbegin()->first; }

std::size_t Fiber::offset(int l) const {
  auto it = offsets_.find(l);
  if (it == offsets_.end()) throw ArgumentError("fiber: no type " + std::to_string(l) + " in " + to_string());
  return it->second;
}

std::string Fiber::to_string() const {
  std::ostringstream os;
  os << '{';
  bool first = true;
  for (const auto& [l, mult] : types_) {
    if (!first) os << ',';
    os << l << ':' << mult;
    first = false;
  }
  os << '}';
  return os.str();
}

}  // namespace ise3
