#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace compil {

// Global label vocabularies: states S, objects O, and the composition table
// c = (s, o) with composition -> primitive index maps. Composition indices
// are stable for the lifetime of an experiment and are what every model
// head, sample record, and task refers to.
class LabelRegistry {
 public:
  struct Composition {
    int state = -1;
    int object = -1;
  };

  LabelRegistry() = default;

  // Builds vocabularies from (state name, object name) pairs, keeping the
  // composition order as given. State/object vocabularies are sorted by name.
  static LabelRegistry from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs);

  int n_states() const { return static_cast<int>(states_.size()); }
  int n_objects() const { return static_cast<int>(objects_.size()); }
  int n_compositions() const { return static_cast<int>(comps_.size()); }

  const std::string& state_name(int i) const { return states_.at(static_cast<std::size_t>(i)); }
  const std::string& object_name(int i) const { return objects_.at(static_cast<std::size_t>(i)); }
  const std::string& composition_name(int i) const {
    return comp_names_.at(static_cast<std::size_t>(i));
  }
  Composition composition(int i) const { return comps_.at(static_cast<std::size_t>(i)); }

  int find_state(const std::string& name) const;
  int find_object(const std::string& name) const;
  int find_composition(const std::string& state, const std::string& object) const;

  static std::string make_composition_name(const std::string& state, const std::string& object) {
    return state + " " + object;
  }

  // FNV-1a over all names; checkpoint headers use it to reject mismatches.
  std::uint64_t digest() const;

 private:
  std::vector<std::string> states_;
  std::vector<std::string> objects_;
  std::vector<Composition> comps_;
  std::vector<std::string> comp_names_;
};

}  // namespace compil
