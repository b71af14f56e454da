#include "tsc/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tsc {

namespace {

constexpr const char* kFormat = "tsc-agent-checkpoint";

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

double get_f64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
    throw std::runtime_error("checkpoint truncated");
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_checkpoint(std::ostream& out, const AgentNet& net) {
  const ModelConfig& c = net.config();
  nlohmann::json header;
  header["format"] = kFormat;
  header["version"] = 1;
  header["config"] = {{"wave_dim", c.wave_dim},       {"action_dim", c.action_dim},
                      {"encoder_units", c.encoder_units}, {"hidden", c.hidden},
                      {"K", c.K},                     {"k_tap", c.k_tap},
                      {"num_actions", c.num_actions},
                      {"literal_candidate_gate", c.literal_candidate_gate},
                      {"critic_sees_actions", c.critic_sees_actions},
                      {"own_phase", c.own_phase}};
  nlohmann::json params = nlohmann::json::array();
  const ParamStore& store = net.store();
  for (std::size_t i = 0; i < store.size(); ++i) {
    params.push_back({{"name", store[i].name},
                      {"rows", store[i].value.rows()},
                      {"cols", store[i].value.cols()}});
  }
  header["params"] = params;
  out << header.dump() << '\n';
  for (double v : store.flatten()) put_f64(out, v);
  if (!out) throw std::runtime_error("failed writing checkpoint");
}

AgentNet read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint missing header");
  const nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("format", "") != kFormat) throw std::runtime_error("not an agent checkpoint");
  const auto& jc = header.at("config");
  ModelConfig c;
  c.wave_dim = jc.at("wave_dim");
  c.action_dim = jc.at("action_dim");
  c.encoder_units = jc.at("encoder_units");
  c.hidden = jc.at("hidden");
  c.K = jc.at("K");
  c.k_tap = jc.at("k_tap");
  c.num_actions = jc.at("num_actions");
  c.literal_candidate_gate = jc.at("literal_candidate_gate");
  c.critic_sees_actions = jc.at("critic_sees_actions");
  c.own_phase = jc.at("own_phase");
  AgentNet net(c);
  const auto& params = header.at("params");
  if (params.size() != net.store().size()) {
    throw std::runtime_error("checkpoint parameter list does not match the model layout");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Param& p = net.store()[i];
    if (params[i].at("name") != p.name || params[i].at("rows") != p.value.rows() ||
        params[i].at("cols") != p.value.cols()) {
      throw std::runtime_error("checkpoint tensor " + p.name + " has an unexpected shape");
    }
  }
  std::vector<double> flat(static_cast<std::size_t>(net.store().num_scalars()));
  for (double& v : flat) v = get_f64(in);
  net.store().unflatten(flat);
  return net;
}

void save_checkpoint(const std::string& path, const AgentNet& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(out, net);
}

AgentNet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace tsc
