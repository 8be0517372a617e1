#pragma once

#include <cstdint>
#include <optional>
#include <unordered_map>

#include "asmi/geometry.hpp"

namespace asmi {

/// Work done by one translation, used for both cycle charging and the
/// step-count comparisons between modes.
struct StepCount {
  std::uint32_t walks = 0;    // page-table walks (guest, real map, shadow)
  std::uint32_t checks = 0;   // ownership / protection checks
  std::uint32_t lookups = 0;  // remapping table lookups (RET, CET, levels)

  bool operator==(const StepCount&) const = default;
};

enum class Outcome : std::uint8_t { Ok, PageFault, IsolationFault, DmaFault };

struct Translation {
  Outcome outcome = Outcome::PageFault;
  FrameNumber frame = 0;    // valid when outcome == Ok, or the rejected frame for faults
  std::uint64_t offset = 0;
  StepCount steps;

  bool ok() const noexcept { return outcome == Outcome::Ok; }
  PhysicalAddress address(const Geometry& g) const { return address_of_frame(frame, g, offset); }
};

/// Partial page-number map owned by one VM. The tag only keeps the guest,
/// real-map, and shadow tables from being mixed up at compile time.
template <class Tag>
class PageMap {
 public:
  PageMap() = default;
  explicit PageMap(VmId owner) : owner_(owner) {}

  VmId owner() const noexcept { return owner_; }

  std::optional<std::uint64_t> lookup(std::uint64_t key) const {
    if (auto it = entries_.find(key); it != entries_.end()) return it->second;
    return std::nullopt;
  }

  void map(std::uint64_t key, std::uint64_t value) { entries_[key] = value; }
  bool unmap(std::uint64_t key) { return entries_.erase(key) > 0; }
  void clear() { entries_.clear(); }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  VmId owner_ = kHypervisor;
  std::unordered_map<std::uint64_t, std::uint64_t> entries_;
};

/// vpage -> page. Under nested paging the value is pseudo-physical; under
/// segmented ownership the guest maps straight to physical frames.
using GuestPageTable = PageMap<struct GuestTableTag>;
/// ppage -> frame, maintained by the hypervisor, one per guest.
using RealMapTable = PageMap<struct RealMapTag>;
/// vpage -> frame, the composition real_map(guest(vpage)).
using ShadowPageTable = PageMap<struct ShadowTableTag>;

/// Two-dimensional walk: guest table, then the real map. A miss in the guest
/// table stops after one walk.
inline Translation nested_translate(const VirtualAddress& va, const GuestPageTable& guest,
                                    const RealMapTable& real_map) {
  Translation t;
  t.offset = va.offset;
  t.steps.walks = 1;
  const auto ppage = guest.lookup(va.vpage);
  if (!ppage) return t;
  t.steps.walks = 2;
  const auto frame = real_map.lookup(*ppage);
  if (!frame) return t;
  t.outcome = Outcome::Ok;
  t.frame = *frame;
  return t;
}

inline Translation shadow_translate(const VirtualAddress& va, const ShadowPageTable& shadow) {
  Translation t;
  t.offset = va.offset;
  t.steps.walks = 1;
  if (const auto frame = shadow.lookup(va.vpage)) {
    t.outcome = Outcome::Ok;
    t.frame = *frame;
  }
  return t;
}

/// Re-derives the shadow entry for one vpage. Returns the number of entries
/// recomputed.
inline std::size_t shadow_update(ShadowPageTable& shadow, const GuestPageTable& guest,
                                 const RealMapTable& real_map, std::uint64_t vpage) {
  const auto ppage = guest.lookup(vpage);
  const auto frame = ppage ? real_map.lookup(*ppage) : std::nullopt;
  if (frame)
    shadow.map(vpage, *frame);
  else
    shadow.unmap(vpage);
  return 1;
}

/// Re-derives every shadow entry whose guest mapping goes through `ppage`,
/// used after a real-map write.
inline std::size_t shadow_update_ppage(ShadowPageTable& shadow, const GuestPageTable& guest,
                                       const RealMapTable& real_map, std::uint64_t ppage) {
  std::size_t n = 0;
  for (const auto& [vpage, target] : guest)
    if (target == ppage) n += shadow_update(shadow, guest, real_map, vpage);
  return n;
}

inline std::size_t shadow_rebuild(ShadowPageTable& shadow, const GuestPageTable& guest,
                                  const RealMapTable& real_map) {
  shadow.clear();
  std::size_t n = 0;
  for (const auto& [vpage, ppage] : guest) {
    (void)ppage;
    n += shadow_update(shadow, guest, real_map, vpage);
  }
  return n;
}

}  // namespace asmi
