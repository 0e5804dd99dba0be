#pragma once

#include <vector>

#include <torch/torch.h>

#include "dumo/archive.hpp"

namespace dumo {

/// Timestep-group x layer grid of non-negative factors scaling adapter outputs.
///
/// Timestep group g covers the half-open range [boundaries[g], boundaries[g+1]),
/// so group 0 holds t = 0. Column l - 1 belongs to skip layer l.
struct ModulationFactors {
  int steps = 0;
  std::vector<int> boundaries;
  torch::Tensor grid;  // [groups, layers], float64

  int groups() const { return static_cast<int>(boundaries.size()) - 1; }
  int layers() const { return static_cast<int>(grid.size(1)); }
  int group_of(int t) const;
};

/// Floor partition: group g starts at floor(g * steps / groups). Widths differ by
/// at most one and the wider groups come last.
std::vector<int> equal_partition(int steps, int groups);

/// All-ones grid over `groups` timestep groups and `layers` skip layers.
ModulationFactors init_modulation(int steps, int layers, int groups = 20);

/// Factor for timestep t and 1-based layer l.
double lookup_factor(const ModulationFactors& m, int t, int l);

/// Row of the grid for timestep t, [layers], keeping autograd history.
torch::Tensor lookup_row(const ModulationFactors& m, int t);

Json to_json(const ModulationFactors& m);
ModulationFactors modulation_from_json(const Json& j);

}  // namespace dumo
