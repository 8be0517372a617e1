#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "asmi/errors.hpp"
#include "asmi/geometry.hpp"
#include "asmi/ledger.hpp"
#include "asmi/page_tables.hpp"

namespace asmi {

struct MptEntry {
  std::uint64_t seg_id = 0;
  VmId vmid = kHypervisor;

  bool operator==(const MptEntry&) const = default;
};

/// TSEG / TOT / MSEG. Before the hypervisor loads, tot and mseg are zero.
struct SegMaxRegister {
  std::uint64_t tseg = 0;
  std::uint64_t tot = 0;
  std::uint64_t mseg = 0;

  bool operator==(const SegMaxRegister&) const = default;

  static constexpr std::uint64_t quota(std::uint64_t tseg, std::uint64_t tot) noexcept {
    return tot == 0 ? 0 : std::max<std::uint64_t>(1, tseg / tot);
  }
};

/// Sent to the owner that sits furthest over quota when memory runs out.
/// The victim swaps `pages_swapped` pages and loses `segments`.
struct ReclaimNotice {
  VmId victim = kHypervisor;
  VmId requester = kHypervisor;
  std::uint64_t excess = 0;
  std::vector<std::uint64_t> segments;
  std::uint64_t pages_swapped = 0;

  bool operator==(const ReclaimNotice&) const = default;
};

struct AllocationResult {
  std::optional<PhysicalAddress> page;   // empty: memory full exception
  std::optional<ReclaimNotice> reclaim;
  bool claimed_segment = false;

  bool memory_full() const noexcept { return !page.has_value(); }
};

enum class AccessResult : std::uint8_t { Allowed, IsolationFault };

enum class FreeResult : std::uint8_t { Freed, SegmentReleased, IsolationFault };

/// Segment-ownership controller. Owns the memory protection table (segment ->
/// owner), the SegMax quota registers, one VMIDR per processor, and the
/// per-owner save slots used by VM exit/entry.
///
/// Each owner's first segment hosts its save slot on page 0; that page is
/// never handed out and keeps the segment pinned in the table. All other
/// pages are swappable, so a reclaim can always take any non-slot segment.
class ProMem {
 public:
  using ReclaimListener = std::function<void(const ReclaimNotice&)>;

  ProMem(const Geometry& geom, std::size_t cpus)
      : geom_(geom),
        mpt_(geom.total_segments()),
        page_used_(geom.total_pages(), 0),
        seg_used_(geom.total_segments(), 0),
        vmidr_(cpus) {
    if (cpus == 0) throw RangeError("at least one processor is required");
    segmax_.tseg = geom.total_segments();
  }

  static ProMem boot(const Geometry& geom, std::size_t cpus = 1) { return ProMem(geom, cpus); }

  /// Tags subsequent ledger records with the event being processed.
  void stamp(std::uint64_t seq, CpuIndex cpu) noexcept {
    seq_ = seq;
    cpu_ = cpu;
  }

  void set_reclaim_listener(ReclaimListener l) { on_reclaim_ = std::move(l); }

  VmId load_hypervisor() {
    if (hypervisor_loaded_) throw LifecycleError("hypervisor already loaded");
    hypervisor_loaded_ = true;
    segmax_.tot = 1;
    segmax_.mseg = SegMaxRegister::quota(segmax_.tseg, segmax_.tot);
    const auto seg = *lowest_free_segment();
    claim(seg, kHypervisor);
    owners_[kHypervisor] = Owner{seg, kHypervisor, {seg}};
    mark_used(seg, 0);
    std::fill(vmidr_.begin(), vmidr_.end(), kHypervisor);
    return kHypervisor;
  }

  VmId create_vm() {
    require_hypervisor();
    if (segmax_.tot >= segmax_.tseg)
      throw CapacityError("cannot create VM: " + std::to_string(segmax_.tot) +
                          " owners already share " + std::to_string(segmax_.tseg) + " segments");
    const VmId id{next_vmid_++};
    segmax_.tot += 1;
    segmax_.mseg = SegMaxRegister::quota(segmax_.tseg, segmax_.tot);

    auto seg = lowest_free_segment();
    if (!seg) {
      // tot * mseg <= tseg, so with every segment owned somebody is over quota.
      const auto victim = most_over_quota(id);
      if (victim) reclaim_from(*victim, id);
      seg = lowest_free_segment();
    }
    if (!seg) {
      segmax_.tot -= 1;
      segmax_.mseg = SegMaxRegister::quota(segmax_.tseg, segmax_.tot);
      --next_vmid_;
      throw CapacityError("no segment available for the new VM's save slot");
    }
    claim(*seg, id);
    owners_[id] = Owner{*seg, id, {*seg}};
    mark_used(*seg, 0);
    return id;
  }

  void destroy_vm(VmId vm) {
    if (vm == kHypervisor) throw LifecycleError("the hypervisor cannot be destroyed");
    auto it = owners_.find(vm);
    if (it == owners_.end()) throw LifecycleError("VM " + to_string(vm) + " is not live");
    for (const auto& cur : vmidr_)
      if (cur == vm) throw LifecycleError("VM " + to_string(vm) + " is running");
    for (const auto seg : it->second.segments) release_segment(seg);
    owners_.erase(it);
    segmax_.tot -= 1;
    segmax_.mseg = SegMaxRegister::quota(segmax_.tseg, segmax_.tot);
  }

  /// Saves the running VM's identity into its save slot and reloads the
  /// hypervisor identity from the hypervisor's slot, as one step.
  void vm_exit(CpuIndex cpu) {
    auto& reg = vmidr_at(cpu);
    if (!reg || *reg == kHypervisor)
      throw ProtocolError("VM exit on cpu " + std::to_string(cpu) + " while no VM is running");
    owners_.at(*reg).saved = *reg;
    reg = owners_.at(kHypervisor).saved;
  }

  void vm_entry(CpuIndex cpu, VmId vm) {
    auto& reg = vmidr_at(cpu);
    if (!reg || *reg != kHypervisor)
      throw ProtocolError("VM entry on cpu " + std::to_string(cpu) + " while a VM is running");
    if (vm == kHypervisor) throw ProtocolError("VM entry must name a guest");
    auto it = owners_.find(vm);
    if (it == owners_.end()) throw LifecycleError("VM entry to dead VM " + to_string(vm));
    owners_.at(kHypervisor).saved = *reg;
    reg = it->second.saved;
  }

  /// Free page in an owned segment, else a free segment, else reclaim from
  /// the most over-quota owner, else memory full.
  AllocationResult allocate_page(VmId vm) {
    auto& owner = owner_at(vm);
    AllocationResult result;
    for (const auto seg : owner.segments) {
      if (seg_used_[seg] == geom_.pages_per_segment()) continue;
      result.page = take_lowest_page(seg);
      return result;
    }
    auto seg = lowest_free_segment();
    if (!seg) {
      if (const auto victim = most_over_quota(vm)) {
        result.reclaim = reclaim_from(*victim, vm);
        seg = lowest_free_segment();
      }
    }
    if (!seg) {
      ledger_.record({seq_, FaultKind::MemoryFull, cpu_, vm, std::nullopt, std::nullopt, 0});
      return result;
    }
    claim(*seg, vm);
    owner.segments.insert(*seg);
    result.claimed_segment = true;
    result.page = take_lowest_page(*seg);
    return result;
  }

  FreeResult free_page(VmId vm, const PhysicalAddress& addr) {
    auto& owner = owner_at(vm);
    if (!addr.valid(geom_)) throw GeometryError("free of address outside physical memory");
    const auto holder = mpt_[addr.segment_index];
    if (holder != vm) {
      ledger_.record({seq_, FaultKind::Isolation, cpu_, vm, addr.segment_index, holder,
                      frame_of(addr, geom_)});
      return FreeResult::IsolationFault;
    }
    if (addr.segment_index == owner.slot_segment && addr.page_index == 0)
      throw InvalidFreeError("page hosts the VMIDR save slot of " + to_string(vm));
    const auto frame = frame_of(addr, geom_);
    if (!page_used_[frame])
      throw DoubleFreeError("frame " + std::to_string(frame) + " is already free");
    page_used_[frame] = 0;
    if (--seg_used_[addr.segment_index] == 0) {
      owner.segments.erase(addr.segment_index);
      mpt_[addr.segment_index].reset();
      return FreeResult::SegmentReleased;
    }
    return FreeResult::Freed;
  }

  /// Allowed iff the table maps the segment to the identity in VMIDR(cpu).
  /// There is no exemption for the hypervisor.
  AccessResult check_access(CpuIndex cpu, const PhysicalAddress& addr) {
    const auto reg = vmidr_at(cpu);
    if (!addr.valid(geom_)) throw GeometryError("access outside physical memory");
    const auto holder = mpt_[addr.segment_index];
    if (reg && holder == reg) return AccessResult::Allowed;
    ledger_.record({seq_, FaultKind::Isolation, cpu, reg, addr.segment_index, holder,
                    frame_of(addr, geom_)});
    return AccessResult::IsolationFault;
  }

  /// DMA carries no VMIDR; the device's assigned VM stands in for it. An
  /// unassigned device owns nothing.
  AccessResult check_dma(std::optional<VmId> device_vm, FrameNumber frame) {
    const auto seg = frame < geom_.total_pages()
                         ? std::optional<std::uint64_t>(frame / geom_.pages_per_segment())
                         : std::nullopt;
    const auto holder = seg ? mpt_[*seg] : std::nullopt;
    if (device_vm && holder == device_vm) return AccessResult::Allowed;
    ledger_.record({seq_, FaultKind::Dma, cpu_, device_vm, seg, holder, frame});
    return AccessResult::IsolationFault;
  }

  /// One walk of the guest's own table (frames are physical), then one
  /// ownership check of the resulting frame.
  Translation translate(CpuIndex cpu, const VirtualAddress& va, const GuestPageTable& guest_pt) {
    const auto reg = vmidr_at(cpu);
    if (reg != guest_pt.owner())
      throw ProtocolError("translation with a page table not owned by VMIDR(cpu)");
    Translation t;
    t.offset = va.offset;
    t.steps.walks = 1;
    const auto frame = guest_pt.lookup(va.vpage);
    if (!frame) return t;
    t.frame = *frame;
    t.steps.checks = 1;
    if (*frame >= geom_.total_pages()) {
      ledger_.record({seq_, FaultKind::Isolation, cpu, reg, std::nullopt, std::nullopt, *frame});
      t.outcome = Outcome::IsolationFault;
      return t;
    }
    t.outcome = check_access(cpu, address_of_frame(*frame, geom_, va.offset)) ==
                        AccessResult::Allowed
                    ? Outcome::Ok
                    : Outcome::IsolationFault;
    return t;
  }

  // Observers.

  const Geometry& geometry() const noexcept { return geom_; }
  const SegMaxRegister& segmax() const noexcept { return segmax_; }
  const FaultLedger& ledger() const noexcept { return ledger_; }
  FaultLedger& ledger() noexcept { return ledger_; }
  std::size_t cpus() const noexcept { return vmidr_.size(); }
  bool hypervisor_loaded() const noexcept { return hypervisor_loaded_; }
  std::uint32_t next_vmid() const noexcept { return next_vmid_; }

  std::optional<VmId> vmidr(CpuIndex cpu) const {
    if (cpu >= vmidr_.size()) throw RangeError("cpu " + std::to_string(cpu) + " out of range");
    return vmidr_[cpu];
  }

  bool is_live(VmId vm) const { return owners_.contains(vm); }

  std::vector<VmId> live_owners() const {
    std::vector<VmId> out;
    for (const auto& [id, o] : owners_) out.push_back(id);
    return out;
  }

  std::optional<VmId> owner_of(std::uint64_t seg) const { return mpt_.at(seg); }

  std::vector<MptEntry> mpt() const {
    std::vector<MptEntry> out;
    for (std::uint64_t s = 0; s < mpt_.size(); ++s)
      if (mpt_[s]) out.push_back({s, *mpt_[s]});
    return out;
  }

  std::uint64_t owned_segments(VmId vm) const {
    auto it = owners_.find(vm);
    return it == owners_.end() ? 0 : it->second.segments.size();
  }

  std::vector<std::uint64_t> segments_of(VmId vm) const {
    auto it = owners_.find(vm);
    if (it == owners_.end()) return {};
    return {it->second.segments.begin(), it->second.segments.end()};
  }

  /// Allocated pages excluding the save-slot page.
  std::uint64_t allocated_pages(VmId vm) const {
    auto it = owners_.find(vm);
    if (it == owners_.end()) return 0;
    std::uint64_t n = 0;
    for (const auto seg : it->second.segments) n += seg_used_[seg];
    return n - 1;
  }

  std::uint64_t free_segments() const {
    return static_cast<std::uint64_t>(std::count(mpt_.begin(), mpt_.end(), std::nullopt));
  }

  std::optional<std::uint64_t> slot_segment(VmId vm) const {
    auto it = owners_.find(vm);
    if (it == owners_.end()) return std::nullopt;
    return it->second.slot_segment;
  }

  std::optional<VmId> saved_vmid(VmId vm) const {
    auto it = owners_.find(vm);
    if (it == owners_.end()) return std::nullopt;
    return it->second.saved;
  }

  bool page_allocated(const PhysicalAddress& a) const {
    return page_used_.at(frame_of(a, geom_)) != 0;
  }

  /// Throws InvariantError if any structural invariant is broken.
  void check_invariants() const {
    auto fail = [](const std::string& m) { throw InvariantError(m); };
    std::uint64_t owned = 0;
    for (const auto& [id, o] : owners_) {
      owned += o.segments.size();
      if (!o.segments.contains(o.slot_segment)) fail("slot segment not owned by " + to_string(id));
      if (!page_used_[o.slot_segment * geom_.pages_per_segment()])
        fail("slot page not reserved for " + to_string(id));
      for (const auto seg : o.segments)
        if (mpt_[seg] != id) fail("owner set and table disagree on segment " + std::to_string(seg));
    }
    for (std::uint64_t s = 0; s < mpt_.size(); ++s) {
      std::uint64_t used = 0;
      for (std::uint64_t p = 0; p < geom_.pages_per_segment(); ++p)
        used += page_used_[s * geom_.pages_per_segment() + p];
      if (used != seg_used_[s]) fail("page count mismatch in segment " + std::to_string(s));
      if (mpt_[s].has_value() != (used > 0))
        fail("segment " + std::to_string(s) + " table presence disagrees with page use");
      if (mpt_[s] && !owners_.contains(*mpt_[s])) fail("segment owned by a dead VM");
    }
    if (owned + free_segments() != segmax_.tseg) fail("segment conservation broken");
    if (hypervisor_loaded_) {
      if (segmax_.tot != owners_.size()) fail("TOT does not match live owners");
      if (segmax_.mseg != SegMaxRegister::quota(segmax_.tseg, segmax_.tot)) fail("MSEG stale");
    } else if (segmax_.tot != 0 || segmax_.mseg != 0) {
      fail("quota registers set before boot completed");
    }
    for (const auto& r : vmidr_)
      if (r && !owners_.contains(*r)) fail("VMIDR names a dead VM");
  }

  /// Canonical text form of the full state, for equality checks in tests.
  std::string snapshot() const {
    std::ostringstream os;
    os << "t" << segmax_.tot << "m" << segmax_.mseg << "n" << next_vmid_ << "|";
    for (const auto& m : mpt_) os << (m ? static_cast<long>(raw(*m)) : -1L) << ',';
    os << '|';
    for (const auto u : page_used_) os << int(u);
    os << '|';
    for (const auto& r : vmidr_) os << (r ? static_cast<long>(raw(*r)) : -1L) << ',';
    os << '|';
    for (const auto& [id, o] : owners_) os << raw(id) << ':' << o.slot_segment << ':' << raw(o.saved) << ';';
    return os.str();
  }

 private:
  struct Owner {
    std::uint64_t slot_segment = 0;
    VmId saved = kHypervisor;
    std::set<std::uint64_t> segments;
  };

  void require_hypervisor() const {
    if (!hypervisor_loaded_) throw LifecycleError("hypervisor not loaded");
  }

  Owner& owner_at(VmId vm) {
    require_hypervisor();
    auto it = owners_.find(vm);
    if (it == owners_.end()) throw LifecycleError("owner " + to_string(vm) + " is not live");
    return it->second;
  }

  std::optional<VmId>& vmidr_at(CpuIndex cpu) {
    if (cpu >= vmidr_.size()) throw RangeError("cpu " + std::to_string(cpu) + " out of range");
    return vmidr_[cpu];
  }

  std::optional<std::uint64_t> lowest_free_segment() const {
    for (std::uint64_t s = 0; s < mpt_.size(); ++s)
      if (!mpt_[s]) return s;
    return std::nullopt;
  }

  void claim(std::uint64_t seg, VmId vm) { mpt_[seg] = vm; }

  void mark_used(std::uint64_t seg, std::uint64_t page) {
    page_used_[seg * geom_.pages_per_segment() + page] = 1;
    ++seg_used_[seg];
  }

  PhysicalAddress take_lowest_page(std::uint64_t seg) {
    for (std::uint64_t p = 0; p < geom_.pages_per_segment(); ++p) {
      if (!page_used_[seg * geom_.pages_per_segment() + p]) {
        mark_used(seg, p);
        return {seg, p, 0};
      }
    }
    throw InvariantError("segment " + std::to_string(seg) + " has no free page");
  }

  void release_segment(std::uint64_t seg) {
    for (std::uint64_t p = 0; p < geom_.pages_per_segment(); ++p)
      page_used_[seg * geom_.pages_per_segment() + p] = 0;
    seg_used_[seg] = 0;
    mpt_[seg].reset();
  }

  /// Owner other than `requester` holding the most segments above MSEG;
  /// ties go to the lowest id.
  std::optional<VmId> most_over_quota(VmId requester) const {
    std::optional<VmId> best;
    std::uint64_t best_excess = 0;
    for (const auto& [id, o] : owners_) {
      if (id == requester || o.segments.size() <= segmax_.mseg) continue;
      const auto excess = o.segments.size() - segmax_.mseg;
      if (excess > best_excess) {
        best = id;
        best_excess = excess;
      }
    }
    return best;
  }

  /// Takes the victim's highest-indexed non-slot segments down to MSEG.
  ReclaimNotice reclaim_from(VmId victim, VmId requester) {
    auto& o = owners_.at(victim);
    ReclaimNotice n;
    n.victim = victim;
    n.requester = requester;
    n.excess = o.segments.size() - segmax_.mseg;
    for (auto it = o.segments.rbegin(); it != o.segments.rend() && n.segments.size() < n.excess;
         ++it) {
      if (*it == o.slot_segment) continue;
      n.segments.push_back(*it);
    }
    for (const auto seg : n.segments) {
      n.pages_swapped += seg_used_[seg];
      release_segment(seg);
      o.segments.erase(seg);
    }
    ledger_.record({seq_, FaultKind::Reclaim, cpu_, requester, std::nullopt, victim, n.excess});
    if (on_reclaim_) on_reclaim_(n);
    return n;
  }

  Geometry geom_;
  std::vector<std::optional<VmId>> mpt_;
  std::vector<std::uint8_t> page_used_;
  std::vector<std::uint64_t> seg_used_;
  std::vector<std::optional<VmId>> vmidr_;
  std::map<VmId, Owner> owners_;
  SegMaxRegister segmax_;
  std::uint32_t next_vmid_ = 1;
  bool hypervisor_loaded_ = false;
  FaultLedger ledger_;
  std::uint64_t seq_ = 0;
  CpuIndex cpu_ = 0;
  ReclaimListener on_reclaim_;
};

}  // namespace asmi
