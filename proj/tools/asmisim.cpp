// asmisim: replay or generate memory-virtualization traces.
//
//   asmisim run      [--config F] [--mode M] [--trace T] [--out DIR]
//   asmisim compare  [--config F] [--modes A,B] [--trace T]... [--out DIR]
//   asmisim gen      [--config F] [--seed N] [--out FILE]
//   asmisim attack   NAME [--config F] [--out FILE]
//   asmisim validate --trace T [--config F]
//
// Exit status: 0 ok, 1 trace/validation error, 2 usage or configuration error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "asmi/asmi.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kTraceFailure = 1;
constexpr int kUsage = 2;

struct Flags {
  std::string config;
  std::string mode;
  std::string modes;
  std::vector<std::string> traces;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> costs;
  std::optional<std::uint64_t> sample_interval;
  std::string attack;
};

asmi::RunConfig load_config(const Flags& f) {
  auto c = f.config.empty() ? asmi::RunConfig{} : asmi::RunConfig::load(f.config);
  if (!f.mode.empty()) c.modes = {asmi::parse_mode(f.mode)};
  if (!f.modes.empty()) c.modes = asmi::parse_mode_list(f.modes);
  if (!f.traces.empty()) c.trace = f.traces.front();
  if (!f.out.empty()) c.out = f.out;
  if (f.seed) c.workload.seed = *f.seed;
  if (f.sample_interval) c.sample_interval = *f.sample_interval;
  for (const auto& kv : f.costs) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw asmi::ConfigError("--cost expects KEY=VAL, got '" + kv + "'");
    c.set("cost." + kv.substr(0, eq), kv.substr(eq + 1));
  }
  c.finalize();
  return c;
}

asmi::Trace load_trace(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw asmi::ConfigError("cannot open trace '" + p.string() + "'");
  return asmi::read_trace(in);
}

asmi::NamedTrace trace_for(const asmi::RunConfig& c) {
  if (c.trace) return {c.trace->stem().string(), load_trace(*c.trace)};
  return {"seed" + std::to_string(c.workload.seed), asmi::generate(c.workload, c.geometry())};
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw asmi::ConfigError("cannot write '" + p.string() + "'");
  return os;
}

void write_run_outputs(const fs::path& dir, const std::string& name, const asmi::MetricsReport& r) {
  fs::create_directories(dir);
  {
    auto os = open_out(dir / "summary.csv");
    os << asmi::kSummaryCsvHeader << '\n';
    asmi::write_summary_row(os, name, r);
  }
  {
    auto os = open_out(dir / "ledger.csv");
    r.ledger.write_csv(os);
  }
  {
    auto os = open_out(dir / "utilization.csv");
    asmi::write_utilization_csv(os, r);
  }
  {
    auto os = open_out(dir / "cycles.csv");
    asmi::write_cycles_csv(os, r);
  }
  {
    auto os = open_out(dir / "report.txt");
    asmi::write_report_text(os, r);
  }
}

void emit_trace(const asmi::Trace& t, const std::string& out) {
  if (out.empty() || out == "-") {
    asmi::write_trace(std::cout, t);
    return;
  }
  auto os = open_out(out);
  asmi::write_trace(os, t);
}

int cmd_run(const Flags& f) {
  const auto c = load_config(f);
  if (c.modes.size() != 1) throw asmi::ConfigError("run takes exactly one mode; use compare");
  const auto nt = trace_for(c);
  const auto report = asmi::run(nt.trace, c.options(c.modes.front()));
  write_run_outputs(c.out, nt.name, report);
  asmi::write_report_text(std::cout, report);
  return kOk;
}

int cmd_compare(const Flags& f) {
  auto c = load_config(f);
  if (!c.modes_explicit && f.modes.empty() && f.mode.empty())
    c.modes.assign(asmi::kAllModes.begin(), asmi::kAllModes.end());
  std::vector<asmi::NamedTrace> traces;
  if (f.traces.size() > 1) {
    for (const auto& p : f.traces) traces.push_back({fs::path(p).stem().string(), load_trace(p)});
  } else {
    traces.push_back(trace_for(c));
  }
  const auto cmp = asmi::compare(traces, c.modes, c.options(c.modes.front()));
  fs::create_directories(c.out);
  {
    auto os = open_out(c.out / "summary.csv");
    cmp.write_csv(os);
  }
  for (const auto& row : cmp.rows) {
    const auto stem = traces.size() > 1 ? row.trace + "_" + row.report.mode : row.report.mode;
    auto os = open_out(c.out / ("ledger_" + stem + ".csv"));
    row.report.ledger.write_csv(os);
    auto us = open_out(c.out / ("utilization_" + stem + ".csv"));
    asmi::write_utilization_csv(us, row.report);
  }
  cmp.write_table(std::cout);
  return kOk;
}

int cmd_gen(const Flags& f) {
  Flags g = f;
  g.out.clear();
  const auto c = load_config(g);
  emit_trace(asmi::generate(c.workload, c.geometry()), f.out);
  return kOk;
}

int cmd_attack(const Flags& f) {
  Flags g = f;
  g.out.clear();
  const auto c = load_config(g);
  emit_trace(asmi::attack_by_name(f.attack, c.geometry()), f.out);
  return kOk;
}

int cmd_validate(const Flags& f) {
  if (f.traces.empty()) throw asmi::ConfigError("validate needs --trace");
  Flags g = f;
  g.traces.clear();
  const auto c = load_config(g);
  for (const auto& p : f.traces) {
    const auto t = load_trace(p);
    asmi::validate_trace(t, {c.cpus, c.geometry()});
    std::cout << p << ": ok, " << t.size() << " events\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segmented-ownership memory virtualization simulator"};
  app.require_subcommand(1, 1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "workload seed");
    sub->add_option("--cost", f.costs, "cost override KEY=VAL (repeatable)");
    sub->add_option("--sample-interval", f.sample_interval, "utilization sample interval (events)");
  };

  auto* run = app.add_subcommand("run", "replay one trace under one mode");
  common(run);
  run->add_option("--mode", f.mode, "asmi|nested|shadow|iommu|hyperwall");
  run->add_option("--trace", f.traces, "trace file (default: generate from config)")->expected(1);
  run->add_option("--out", f.out, "output directory");

  auto* compare = app.add_subcommand("compare", "replay traces under several modes");
  common(compare);
  compare->add_option("--mode", f.mode, "single mode");
  compare->add_option("--modes", f.modes, "comma-separated modes (default: all)");
  compare->add_option("--trace", f.traces, "trace file (repeatable)");
  compare->add_option("--out", f.out, "output directory");

  auto* gen = app.add_subcommand("gen", "generate a workload trace");
  common(gen);
  gen->add_option("--out", f.out, "trace file (default: stdout)");

  auto* attack = app.add_subcommand("attack", "emit a named attack trace");
  common(attack);
  attack->add_option("name", f.attack, "cross-vm-dma|malicious-hypervisor|hyperwall-starvation")
      ->required();
  attack->add_option("--out", f.out, "trace file (default: stdout)");

  auto* validate = app.add_subcommand("validate", "check a trace file");
  common(validate);
  validate->add_option("--trace,trace", f.traces, "trace file(s)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e, std::cerr, std::cerr);
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (*run) return cmd_run(f);
    if (*compare) return cmd_compare(f);
    if (*gen) return cmd_gen(f);
    if (*attack) return cmd_attack(f);
    if (*validate) return cmd_validate(f);
  } catch (const asmi::TraceError& e) {
    std::cerr << "asmisim: " << e.what() << '\n';
    return kTraceFailure;
  } catch (const asmi::ConfigError& e) {
    std::cerr << "asmisim: " << e.what() << '\n';
    return kUsage;
  } catch (const asmi::SpecError& e) {
    std::cerr << "asmisim: " << e.what() << '\n';
    return kUsage;
  } catch (const asmi::GeometryError& e) {
    std::cerr << "asmisim: " << e.what() << '\n';
    return kUsage;
  } catch (const asmi::SimError& e) {
    std::cerr << "asmisim: " << e.what() << '\n';
    return kTraceFailure;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "asmisim: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
