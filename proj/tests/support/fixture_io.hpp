#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "asmi/config.hpp"

namespace asmi_test {

inline std::string fixture_path(const std::string& name) {
  return std::string(ASMI_FIXTURE_DIR) + "/" + name;
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw asmi::ConfigError("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline asmi::RunConfig fixture_config() { return asmi::RunConfig::load(fixture_path("fixture.conf")); }

inline asmi::Trace fixture_trace(const std::string& stem) {
  return asmi::parse_trace(slurp(fixture_path(stem + ".trace")));
}

inline std::string ledger_csv(const asmi::MetricsReport& r) {
  std::ostringstream os;
  r.ledger.write_csv(os);
  return os.str();
}

/// (trace stem, generator name) for every stored attack fixture.
inline const std::vector<std::pair<std::string, std::string>>& fixture_attacks() {
  static const std::vector<std::pair<std::string, std::string>> v{
      {"cross_vm_dma", "cross-vm-dma"},
      {"malicious_hypervisor", "malicious-hypervisor"},
      {"hyperwall_starvation", "hyperwall-starvation"}};
  return v;
}

}  // namespace asmi_test
