#include "compil/registry.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace compil {

LabelRegistry LabelRegistry::from_pairs(
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("registry: no compositions");
  std::set<std::string> states, objects;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& [s, o] : pairs) {
    if (s.empty() || o.empty())
      throw std::invalid_argument("registry: empty primitive name");
    if (!seen.insert({s, o}).second)
      throw std::invalid_argument("registry: duplicate composition '" +
                                  make_composition_name(s, o) + "'");
    states.insert(s);
    objects.insert(o);
  }

  LabelRegistry reg;
  reg.states_.assign(states.begin(), states.end());
  reg.objects_.assign(objects.begin(), objects.end());
  for (const auto& [s, o] : pairs) {
    Composition c;
    c.state = reg.find_state(s);
    c.object = reg.find_object(o);
    reg.comps_.push_back(c);
    reg.comp_names_.push_back(make_composition_name(s, o));
  }
  return reg;
}

int LabelRegistry::find_state(const std::string& name) const {
  auto it = std::lower_bound(states_.begin(), states_.end(), name);
  if (it == states_.end() || *it != name) return -1;
  return static_cast<int>(it - states_.begin());
}

int LabelRegistry::find_object(const std::string& name) const {
  auto it = std::lower_bound(objects_.begin(), objects_.end(), name);
  if (it == objects_.end() || *it != name) return -1;
  return static_cast<int>(it - objects_.begin());
}

int LabelRegistry::find_composition(const std::string& state, const std::string& object) const {
  const std::string name = make_composition_name(state, object);
  for (std::size_t i = 0; i < comp_names_.size(); ++i)
    if (comp_names_[i] == name) return static_cast<int>(i);
  return -1;
}

std::uint64_t LabelRegistry::digest() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  };
  for (const auto& s : states_) mix(s);
  for (const auto& o : objects_) mix(o);
  for (const auto& c : comp_names_) mix(c);
  return h;
}

}  // namespace compil
