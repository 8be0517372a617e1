#pragma once

#include <array>
#include <cstdint>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "asmi/cost_model.hpp"
#include "asmi/ledger.hpp"
#include "asmi/trace.hpp"

namespace asmi {

struct Counters {
  std::uint64_t walks = 0;
  std::uint64_t mpt_checks = 0;
  std::uint64_t table_lookups = 0;
  std::uint64_t tlb_hits = 0;
  std::uint64_t tlb_misses = 0;
  std::uint64_t tlb_flushes = 0;
  std::uint64_t page_faults = 0;
  std::uint64_t accesses = 0;
  std::uint64_t dma_requests = 0;
  std::uint64_t allocations = 0;
  std::uint64_t frees = 0;
  std::uint64_t stale_frees = 0;  // free of a page already swapped out
  std::uint64_t pages_swapped = 0;
  std::uint64_t context_switches = 0;
  std::uint64_t shadow_updates = 0;
  std::uint64_t programmed_io_words = 0;
  std::uint64_t ignored_events = 0;  // events with no effect in the selected mode

  bool operator==(const Counters&) const = default;
};

struct UtilizationSample {
  std::uint64_t seq = 0;
  VmId owner = kHypervisor;
  std::uint64_t segments = 0;
  std::uint64_t pages = 0;

  bool operator==(const UtilizationSample&) const = default;
};

/// Everything one run produces. A pure function of trace, mode, options and
/// cost model.
struct MetricsReport {
  std::string mode;
  std::uint64_t events = 0;
  std::uint64_t total_pages = 0;
  Cycles total_cycles = 0;
  std::array<Cycles, kEventKindCount> cycles_by_kind{};
  Counters counters;
  FaultLedger ledger;
  std::vector<UtilizationSample> samples;
  /// Allocated data pages summed over owners at each sample point.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> sample_totals;
  /// Owned segments per live guest at the end of the trace.
  std::map<VmId, std::uint64_t> steady_state_segments;

  void charge(EventKind k, Cycles c) {
    total_cycles = saturating_add(total_cycles, c);
    auto& slot = cycles_by_kind[static_cast<std::size_t>(k)];
    slot = saturating_add(slot, c);
  }

  double mean_utilization() const {
    if (sample_totals.empty() || total_pages == 0) return 0.0;
    double sum = 0;
    for (const auto& [seq, pages] : sample_totals)
      sum += static_cast<double>(pages) / static_cast<double>(total_pages);
    return sum / static_cast<double>(sample_totals.size());
  }

  std::size_t isolation_faults() const { return ledger.count(FaultKind::Isolation); }
  std::size_t dma_faults() const { return ledger.count(FaultKind::Dma); }
  std::size_t violations() const { return ledger.count(FaultKind::Violation); }
  std::size_t memory_full() const { return ledger.count(FaultKind::MemoryFull); }
  std::size_t reclaims() const { return ledger.count(FaultKind::Reclaim); }
};

inline std::string format_fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

/// Column order is fixed; downstream scripts index by position.
inline constexpr std::string_view kSummaryCsvHeader =
    "trace,mode,events,total_cycles,walks,mpt_checks,table_lookups,tlb_hits,tlb_misses,"
    "tlb_flushes,page_faults,accesses,dma_requests,allocations,frees,isolation_faults,dma_faults,"
    "violations,memory_full,reclaims,pages_swapped,mean_utilization";

inline void write_summary_row(std::ostream& os, const std::string& trace_name,
                              const MetricsReport& r) {
  const auto& c = r.counters;
  os << trace_name << ',' << r.mode << ',' << r.events << ',' << r.total_cycles << ',' << c.walks
     << ',' << c.mpt_checks << ',' << c.table_lookups << ',' << c.tlb_hits << ',' << c.tlb_misses
     << ',' << c.tlb_flushes << ',' << c.page_faults << ',' << c.accesses << ','
     << c.dma_requests << ',' << c.allocations << ',' << c.frees << ',' << r.isolation_faults()
     << ',' << r.dma_faults() << ',' << r.violations() << ',' << r.memory_full() << ','
     << r.reclaims() << ',' << c.pages_swapped << ',' << format_fixed(r.mean_utilization())
     << '\n';
}

inline void write_cycles_csv(std::ostream& os, const MetricsReport& r) {
  os << "kind,cycles\n";
  for (std::size_t i = 0; i < kEventKindCount; ++i)
    os << to_string(static_cast<EventKind>(i)) << ',' << r.cycles_by_kind[i] << '\n';
}

/// Long format: one row per (sample point, owner).
inline void write_utilization_csv(std::ostream& os, const MetricsReport& r) {
  os << "seq,owner,segments,pages\n";
  for (const auto& s : r.samples)
    os << s.seq << ',' << raw(s.owner) << ',' << s.segments << ',' << s.pages << '\n';
}

inline void write_report_text(std::ostream& os, const MetricsReport& r) {
  const auto& c = r.counters;
  auto line = [&](std::string_view k, auto v) {
    os << std::left << std::setw(22) << k << v << '\n';
  };
  line("mode", r.mode);
  line("events", r.events);
  line("total_cycles", r.total_cycles);
  line("walks", c.walks);
  line("mpt_checks", c.mpt_checks);
  line("table_lookups", c.table_lookups);
  line("tlb_hits", c.tlb_hits);
  line("tlb_misses", c.tlb_misses);
  line("tlb_flushes", c.tlb_flushes);
  line("page_faults", c.page_faults);
  line("accesses", c.accesses);
  line("dma_requests", c.dma_requests);
  line("allocations", c.allocations);
  line("frees", c.frees);
  line("stale_frees", c.stale_frees);
  line("pages_swapped", c.pages_swapped);
  line("context_switches", c.context_switches);
  line("shadow_updates", c.shadow_updates);
  line("programmed_io_words", c.programmed_io_words);
  line("ignored_events", c.ignored_events);
  line("isolation_faults", r.isolation_faults());
  line("dma_faults", r.dma_faults());
  line("violations", r.violations());
  line("memory_full", r.memory_full());
  line("reclaims", r.reclaims());
  line("mean_utilization", format_fixed(r.mean_utilization()));
  for (const auto& [vm, segs] : r.steady_state_segments)
    line("final_segments.vm" + to_string(vm), segs);
}

}  // namespace asmi
