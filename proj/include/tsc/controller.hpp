#pragma once

#include "tsc/simulator.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tsc {

/// Emits one phase id per agent per decision step.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual std::string name() const = 0;
  /// Called after the simulator was reset for a new episode.
  virtual void begin_episode(const Simulator& sim, std::uint64_t episode_seed) = 0;
  virtual std::vector<int> act(const Simulator& sim) = 0;
};

}  // namespace tsc
