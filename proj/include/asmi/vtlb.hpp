#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include "asmi/cost_model.hpp"
#include "asmi/errors.hpp"
#include "asmi/geometry.hpp"

namespace asmi {

enum class TlbPolicy : std::uint8_t {
  None,           // no TLB: every access walks
  FlushOnSwitch,  // emptied on every context switch
  AsidTagged,     // entries tagged with a real ASID, never flushed on switch
};

inline std::string_view to_string(TlbPolicy p) {
  switch (p) {
    case TlbPolicy::None: return "none";
    case TlbPolicy::FlushOnSwitch: return "flush";
    case TlbPolicy::AsidTagged: return "asid";
  }
  return "?";
}

inline TlbPolicy parse_tlb_policy(std::string_view s) {
  if (s == "none") return TlbPolicy::None;
  if (s == "flush") return TlbPolicy::FlushOnSwitch;
  if (s == "asid") return TlbPolicy::AsidTagged;
  throw ConfigError("unknown TLB policy '" + std::string(s) + "' (none|flush|asid)");
}

using RealAsid = std::uint32_t;

/// (VM, guest-visible ASID) -> globally unique real ASID. Injective by
/// construction: real ids are handed out from a counter and never reused.
class AsidMapTable {
 public:
  RealAsid assign(VmId vm, std::uint32_t virtual_asid) {
    auto [it, inserted] = map_.try_emplace({vm, virtual_asid}, next_);
    if (inserted) ++next_;
    return it->second;
  }

  RealAsid lookup(VmId vm, std::uint32_t virtual_asid) const {
    auto it = map_.find({vm, virtual_asid});
    if (it == map_.end())
      throw MappingError("no real ASID for VM " + to_string(vm) + " virtual ASID " +
                         std::to_string(virtual_asid));
    return it->second;
  }

  std::vector<RealAsid> asids_of(VmId vm) const {
    std::vector<RealAsid> out;
    for (auto it = map_.lower_bound({vm, 0}); it != map_.end() && it->first.first == vm; ++it)
      out.push_back(it->second);
    return out;
  }

  void forget(VmId vm) {
    for (auto it = map_.lower_bound({vm, 0}); it != map_.end() && it->first.first == vm;)
      it = map_.erase(it);
  }

  std::size_t size() const noexcept { return map_.size(); }

 private:
  std::map<std::pair<VmId, std::uint32_t>, RealAsid> map_;
  RealAsid next_ = 1;
};

struct VirtualTlbEntry {
  std::uint32_t virtual_asid = 0;
  RealAsid real_asid = 0;
  std::uint64_t vpage = 0;
  FrameNumber frame = 0;
};

/// Small fully associative TLB with FIFO replacement. Lookups only match
/// entries carrying the caller's real ASID, under either policy.
class VirtualTlb {
 public:
  explicit VirtualTlb(TlbPolicy policy = TlbPolicy::AsidTagged, std::size_t capacity = 64)
      : policy_(policy), capacity_(capacity) {}

  TlbPolicy policy() const noexcept { return policy_; }
  bool enabled() const noexcept { return policy_ != TlbPolicy::None && capacity_ > 0; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::optional<FrameNumber> lookup(RealAsid asid, std::uint64_t vpage) const {
    if (!enabled()) return std::nullopt;
    for (const auto& e : entries_)
      if (e.real_asid == asid && e.vpage == vpage) return e.frame;
    return std::nullopt;
  }

  void insert(const VirtualTlbEntry& e) {
    if (!enabled()) return;
    invalidate(e.real_asid, e.vpage);
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back(e);
  }

  /// Context switch. Returns the flush cost charged (zero when tagged).
  Cycles on_switch(const CostModel& cost) {
    if (policy_ != TlbPolicy::FlushOnSwitch) return 0;
    entries_.clear();
    return cost.tlb_flush;
  }

  void flush() { entries_.clear(); }

  void invalidate(RealAsid asid, std::uint64_t vpage) {
    std::erase_if(entries_, [&](const auto& e) { return e.real_asid == asid && e.vpage == vpage; });
  }

  void invalidate_asid(RealAsid asid) {
    std::erase_if(entries_, [&](const auto& e) { return e.real_asid == asid; });
  }

  void invalidate_frame(FrameNumber frame) {
    std::erase_if(entries_, [&](const auto& e) { return e.frame == frame; });
  }

  template <class Pred>
  void invalidate_if(Pred&& pred) {
    std::erase_if(entries_, std::forward<Pred>(pred));
  }

 private:
  TlbPolicy policy_;
  std::size_t capacity_;
  std::deque<VirtualTlbEntry> entries_;
};

}  // namespace asmi
