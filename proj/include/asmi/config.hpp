#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "asmi/engine.hpp"
#include "asmi/errors.hpp"
#include "asmi/workload.hpp"

namespace asmi {

/// Flat `key = value` run configuration. `#` starts a comment; blank lines
/// are skipped; unknown keys are an error.
///
///   page_size pages_per_segment total_segments cpus
///   mode modes trace out sample_interval verbosity
///   tlb tlb_capacity dma iommu_levels check_invariants
///   cost.<name>
///   seed vm_count events target_pages churn locality locality_window
///   dma_rate switch_rate attack_rate
///
/// `target_pages` is one number for every VM or a comma list, one per VM.
struct RunConfig {
  std::uint64_t page_size = Geometry::kDefaultPageSize;
  std::uint64_t pages_per_segment = Geometry::kDefaultPagesPerSegment;
  std::uint64_t total_segments = Geometry::kDefaultTotalSegments;
  std::size_t cpus = 1;
  std::vector<Mode> modes{Mode::Asmi};
  bool modes_explicit = false;
  CostModel cost;
  WorkloadSpec workload;
  std::optional<std::filesystem::path> trace;
  std::filesystem::path out = "out";
  std::uint64_t sample_interval = 100;
  TlbPolicy tlb = TlbPolicy::None;
  std::size_t tlb_capacity = 64;
  DmaPolicy dma = DmaPolicy::Enabled;
  unsigned iommu_levels = 4;
  bool check_invariants = true;
  int verbosity = 0;

  Geometry geometry() const { return Geometry(page_size, pages_per_segment, total_segments); }

  RunOptions options(Mode m) const {
    RunOptions o;
    o.mode = m;
    o.geometry = geometry();
    o.cost = cost;
    o.cpus = cpus;
    o.tlb = tlb;
    o.tlb_capacity = tlb_capacity;
    o.dma = dma;
    o.iommu_levels = iommu_levels;
    o.sample_interval = sample_interval;
    o.check_invariants = check_invariants;
    return o;
  }

  static std::uint64_t to_u64(std::string_view key, std::string_view v) {
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, out);
    if (v.empty() || ec != std::errc{} || p != end)
      throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" +
                        std::string(v) + "'");
    return out;
  }

  static double to_double(std::string_view key, std::string_view v) {
    double out = 0;
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, out);
    if (v.empty() || ec != std::errc{} || p != end)
      throw ConfigError(std::string(key) + ": expected a number, got '" + std::string(v) + "'");
    return out;
  }

  static bool to_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(v) + "'");
  }

  void set_target_pages(std::string_view v) {
    std::vector<std::uint64_t> targets;
    std::size_t start = 0;
    while (true) {
      const auto comma = v.find(',', start);
      targets.push_back(to_u64("target_pages", v.substr(start, comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    const auto base = workload.profiles.front();
    workload.profiles.assign(targets.size(), base);
    for (std::size_t i = 0; i < targets.size(); ++i) workload.profiles[i].target_pages = targets[i];
  }

  template <class F>
  void each_profile(F&& f) {
    for (auto& p : workload.profiles) f(p);
  }

  void set(std::string_view key, std::string_view v) {
    if (key == "page_size") page_size = to_u64(key, v);
    else if (key == "pages_per_segment") pages_per_segment = to_u64(key, v);
    else if (key == "total_segments") total_segments = to_u64(key, v);
    else if (key == "cpus") cpus = workload.cpus = to_u64(key, v);
    else if (key == "mode") modes = {parse_mode(v)}, modes_explicit = true;
    else if (key == "modes") modes = parse_mode_list(v), modes_explicit = true;
    else if (key == "trace") trace = std::filesystem::path(std::string(v));
    else if (key == "out") out = std::string(v);
    else if (key == "sample_interval") sample_interval = to_u64(key, v);
    else if (key == "verbosity") verbosity = static_cast<int>(to_u64(key, v));
    else if (key == "tlb") tlb = parse_tlb_policy(v);
    else if (key == "tlb_capacity") tlb_capacity = to_u64(key, v);
    else if (key == "dma") dma = parse_dma_policy(v);
    else if (key == "iommu_levels") iommu_levels = static_cast<unsigned>(to_u64(key, v));
    else if (key == "check_invariants") check_invariants = to_bool(key, v);
    else if (key.starts_with("cost.")) cost.set(key.substr(5), to_u64(key, v));
    else if (key == "seed") workload.seed = to_u64(key, v);
    else if (key == "vm_count") workload.vm_count = static_cast<std::uint32_t>(to_u64(key, v));
    else if (key == "events") workload.events = to_u64(key, v);
    else if (key == "target_pages") set_target_pages(v);
    else if (key == "churn") { const auto x = to_double(key, v); each_profile([&](auto& p) { p.churn = x; }); }
    else if (key == "locality") { const auto x = to_double(key, v); each_profile([&](auto& p) { p.locality = x; }); }
    else if (key == "locality_window") {
      const auto x = static_cast<std::uint32_t>(to_u64(key, v));
      each_profile([&](auto& p) { p.window = x; });
    }
    else if (key == "dma_rate") workload.dma_rate = to_double(key, v);
    else if (key == "switch_rate") workload.switch_rate = to_double(key, v);
    else if (key == "attack_rate") workload.attack_rate = to_double(key, v);
    else throw ConfigError("unknown config key '" + std::string(key) + "'");
  }

  /// Cross-field checks and file existence.
  void finalize() const {
    (void)geometry();
    if (cpus == 0) throw ConfigError("cpus must be positive");
    if (sample_interval == 0) throw ConfigError("sample_interval must be positive");
    if (tlb_capacity == 0) throw ConfigError("tlb_capacity must be positive");
    if (iommu_levels == 0 || iommu_levels > 7) throw ConfigError("iommu_levels must be in 1..7");
    if (modes.empty()) throw ConfigError("no modes selected");
    if (trace && !std::filesystem::exists(*trace))
      throw ConfigError("trace file '" + trace->string() + "' does not exist");
  }

  static RunConfig parse(std::istream& in, std::string_view source = "<config>") {
    RunConfig c;
    std::string line;
    std::uint64_t lineno = 0;
    auto trim = [](std::string_view s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string_view::npos) return std::string_view{};
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    while (std::getline(in, line)) {
      ++lineno;
      std::string_view s = line;
      if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
      s = trim(s);
      if (s.empty()) continue;
      const auto eq = s.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError(std::string(source) + ":" + std::to_string(lineno) +
                          ": expected 'key = value'");
      try {
        c.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
      } catch (const SimError& e) {
        throw ConfigError(std::string(source) + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return c;
  }

  static RunConfig parse(std::string_view text) {
    std::istringstream in{std::string(text)};
    return parse(in);
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    auto c = parse(in, path.string());
    if (c.trace && c.trace->is_relative()) c.trace = path.parent_path() / *c.trace;
    return c;
  }
};

}  // namespace asmi
