#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "asmi/geometry.hpp"

namespace asmi {

enum class FaultKind : std::uint8_t {
  Isolation,   // access blocked by an ownership or protection check
  Dma,         // DMA request refused by remapping or ownership
  Violation,   // cross-owner access that was allowed to complete
  MemoryFull,  // allocation request that could not be served
  Reclaim,     // over-quota owner told to give segments back
};

inline std::string_view to_string(FaultKind k) {
  switch (k) {
    case FaultKind::Isolation: return "isolation";
    case FaultKind::Dma: return "dma";
    case FaultKind::Violation: return "violation";
    case FaultKind::MemoryFull: return "memory-full";
    case FaultKind::Reclaim: return "reclaim";
  }
  return "?";
}

/// One ledger line. `actor` is the identity that issued the request (VMIDR
/// value, requester, or the VM a device belongs to); `owner` is who held the
/// target. `detail` is kind-specific: the frame for access records, the
/// excess segment count for reclaim records.
struct FaultRecord {
  std::uint64_t seq = 0;
  FaultKind kind = FaultKind::Isolation;
  CpuIndex cpu = 0;
  std::optional<VmId> actor;
  std::optional<std::uint64_t> segment;
  std::optional<VmId> owner;
  std::uint64_t detail = 0;

  bool operator==(const FaultRecord&) const = default;
};

class FaultLedger {
 public:
  void record(FaultRecord r) { records_.push_back(r); }

  const std::vector<FaultRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  void clear() noexcept { records_.clear(); }

  std::size_t count(FaultKind k) const {
    std::size_t n = 0;
    for (const auto& r : records_) n += r.kind == k ? 1 : 0;
    return n;
  }

  static constexpr std::string_view kCsvHeader = "seq,kind,cpu,actor,segment,owner,detail";

  static void write_csv_row(std::ostream& os, const FaultRecord& r) {
    auto opt_id = [&](const std::optional<VmId>& v) {
      if (v) os << raw(*v); else os << '-';
    };
    os << r.seq << ',' << to_string(r.kind) << ',' << r.cpu << ',';
    opt_id(r.actor);
    os << ',';
    if (r.segment) os << *r.segment; else os << '-';
    os << ',';
    opt_id(r.owner);
    os << ',' << r.detail << '\n';
  }

  void write_csv(std::ostream& os) const {
    os << kCsvHeader << '\n';
    for (const auto& r : records_) write_csv_row(os, r);
  }

 private:
  std::vector<FaultRecord> records_;
};

}  // namespace asmi
