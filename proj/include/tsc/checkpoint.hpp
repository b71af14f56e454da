#pragma once

// Model checkpoints.
//
// Layout: one line of JSON (terminated by '\n') describing the model
// configuration and the parameter tensors in declaration order, followed
// by every tensor's entries in row-major order as little-endian IEEE-754
// binary64 values.

#include "tsc/nn.hpp"

#include <iosfwd>
#include <string>

namespace tsc {

void write_checkpoint(std::ostream& out, const AgentNet& net);
AgentNet read_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path, const AgentNet& net);
AgentNet load_checkpoint(const std::string& path);

}  // namespace tsc
