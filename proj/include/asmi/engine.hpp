#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "asmi/cost_model.hpp"
#include "asmi/errors.hpp"
#include "asmi/geometry.hpp"
#include "asmi/hyperwall.hpp"
#include "asmi/iommu.hpp"
#include "asmi/metrics.hpp"
#include "asmi/page_tables.hpp"
#include "asmi/promem.hpp"
#include "asmi/trace.hpp"
#include "asmi/vtlb.hpp"

namespace asmi {

/// Translation / protection model a trace is replayed under.
///
///   asmi       segment ownership checked by Pro-mem, one-level translation
///   nested     guest table + real map, raw (unremapped) device DMA
///   shadow     nested, but accesses walk a hypervisor-kept shadow table
///   iommu      nested CPU path, DMA through RET/CET remapping
///   hyperwall  iommu plus per-page protection modes
enum class Mode : std::uint8_t { Asmi, Nested, Shadow, Iommu, HyperWall };

inline constexpr std::array<Mode, 5> kAllModes = {Mode::Asmi, Mode::Nested, Mode::Shadow,
                                                  Mode::Iommu, Mode::HyperWall};

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::Asmi: return "asmi";
    case Mode::Nested: return "nested";
    case Mode::Shadow: return "shadow";
    case Mode::Iommu: return "iommu";
    case Mode::HyperWall: return "hyperwall";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  for (const auto m : kAllModes)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "' (asmi|nested|shadow|iommu|hyperwall)");
}

inline std::vector<Mode> parse_mode_list(std::string_view s) {
  std::vector<Mode> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto item = s.substr(start, comma == std::string_view::npos ? s.size() - start : comma - start);
    if (item.empty()) throw ConfigError("empty entry in mode list");
    out.push_back(parse_mode(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

/// What happened on one CPU access or DMA, reported to the run observer.
struct AccessObservation {
  std::uint64_t seq = 0;
  CpuIndex cpu = 0;
  std::optional<VmId> actor;   // running identity, or the device's VM for DMA
  bool dma = false;
  bool write = false;
  std::uint64_t page = 0;      // vpage for CPU accesses, dva for DMA
  bool tlb_hit = false;
  StepCount steps;
  Cycles cycles = 0;
  Outcome outcome = Outcome::PageFault;
  std::optional<FrameNumber> frame;
  std::optional<VmId> frame_owner;  // owner of `frame` at the time of the access
};

using AccessObserver = std::function<void(const AccessObservation&)>;

struct RunOptions {
  Mode mode = Mode::Asmi;
  Geometry geometry;
  CostModel cost;
  std::size_t cpus = 1;
  TlbPolicy tlb = TlbPolicy::None;
  std::size_t tlb_capacity = 64;
  DmaPolicy dma = DmaPolicy::Enabled;
  unsigned iommu_levels = 4;
  std::uint64_t sample_interval = 100;
  bool check_invariants = true;
  AccessObserver observer;
};

namespace detail {

inline std::uint32_t device_key(const DmaRequest& r) { return r.bus << 8 | r.context_index(); }

/// Shared per-event plumbing: processor contexts, TLBs, ASIDs, device
/// assignment, and cost bookkeeping. Subclasses supply the memory model.
class Machine {
 public:
  Machine(const RunOptions& opts, MetricsReport& report)
      : opts_(opts), geom_(opts.geometry), cost_(opts.cost), report_(report) {
    cpus_.reserve(opts.cpus);
    for (std::size_t i = 0; i < opts.cpus; ++i)
      cpus_.push_back(CpuState{kHypervisor, 0, VirtualTlb(opts.tlb, opts.tlb_capacity)});
  }
  virtual ~Machine() = default;

  void apply(const TraceEvent& e) {
    extra_ = 0;
    Cycles c = 0;
    switch (e.kind) {
      case EventKind::Boot: c = on_boot(e); break;
      case EventKind::CreateVm: c = on_create(e); break;
      case EventKind::DestroyVm: c = on_destroy(e); break;
      case EventKind::Enter:
        set_current(e, e.vm);
        c = context_switch(e.cpu);
        break;
      case EventKind::Exit:
        set_current(e, kHypervisor);
        c = context_switch(e.cpu);
        break;
      case EventKind::ProcessSwitch:
        cpus_[e.cpu].vasid = e.asid;
        c = context_switch(e.cpu);
        break;
      case EventKind::AllocPage:
        ++report_.counters.allocations;
        c = on_alloc(e);
        break;
      case EventKind::FreePage:
        ++report_.counters.frees;
        c = on_free(e);
        break;
      case EventKind::Read:
      case EventKind::Write:
        ++report_.counters.accesses;
        c = on_access(e);
        break;
      case EventKind::GuestPtWrite: c = on_ptwrite(e); break;
      case EventKind::RealMapWrite: c = on_rmwrite(e); break;
      case EventKind::DmaIssue:
        ++report_.counters.dma_requests;
        c = on_dma(e);
        break;
      case EventKind::DomainAssign:
        devices_[device_key(e.dma)] = e.vm;
        c = on_assign(e);
        break;
      case EventKind::HyperWallSet: c = on_hwset(e); break;
    }
    report_.charge(e.kind, saturating_add(c, extra_));
  }

  virtual void sample(std::uint64_t seq) = 0;
  virtual void finish() = 0;
  virtual void check() const = 0;

 protected:
  struct CpuState {
    VmId current;
    std::uint32_t vasid;
    VirtualTlb tlb;
  };

  virtual Cycles on_boot(const TraceEvent&) = 0;
  virtual Cycles on_create(const TraceEvent&) = 0;
  virtual Cycles on_destroy(const TraceEvent&) = 0;
  virtual void set_current(const TraceEvent& e, VmId vm) = 0;
  virtual Cycles on_alloc(const TraceEvent&) = 0;
  virtual Cycles on_free(const TraceEvent&) = 0;
  virtual Cycles on_access(const TraceEvent&) = 0;
  virtual Cycles on_ptwrite(const TraceEvent&) = 0;
  virtual Cycles on_rmwrite(const TraceEvent&) = 0;
  virtual Cycles on_dma(const TraceEvent&) = 0;
  virtual Cycles on_assign(const TraceEvent&) { return 0; }
  virtual Cycles on_hwset(const TraceEvent&) {
    ++report_.counters.ignored_events;
    return 0;
  }

  Cycles context_switch(CpuIndex cpu) {
    ++report_.counters.context_switches;
    Cycles c = cost_.context_switch;
    const Cycles flush = cpus_[cpu].tlb.on_switch(cost_);
    if (flush > 0) {
      ++report_.counters.tlb_flushes;
      c = saturating_add(c, flush);
    }
    return c;
  }

  RealAsid real_asid(CpuIndex cpu) {
    return asids_.assign(cpus_[cpu].current, cpus_[cpu].vasid);
  }

  std::optional<FrameNumber> tlb_lookup(CpuIndex cpu, std::uint64_t vpage) {
    auto& tlb = cpus_[cpu].tlb;
    if (!tlb.enabled()) return std::nullopt;
    const auto hit = tlb.lookup(real_asid(cpu), vpage);
    ++(hit ? report_.counters.tlb_hits : report_.counters.tlb_misses);
    return hit;
  }

  void tlb_fill(CpuIndex cpu, std::uint64_t vpage, FrameNumber frame) {
    auto& tlb = cpus_[cpu].tlb;
    if (tlb.enabled()) tlb.insert({cpus_[cpu].vasid, real_asid(cpu), vpage, frame});
  }

  void tlb_invalidate_vpage(VmId vm, std::uint64_t vpage) {
    for (const auto asid : asids_.asids_of(vm))
      for (auto& c : cpus_) c.tlb.invalidate(asid, vpage);
  }

  void tlb_invalidate_frame(FrameNumber f) {
    for (auto& c : cpus_) c.tlb.invalidate_frame(f);
  }

  void tlb_invalidate_vm(VmId vm) {
    for (const auto asid : asids_.asids_of(vm))
      for (auto& c : cpus_) c.tlb.invalidate_asid(asid);
  }

  Cycles step_cycles(const StepCount& s) const {
    Cycles c = saturating_mul(s.walks, cost_.pt_walk_level);
    c = saturating_add(c, saturating_mul(s.lookups, cost_.pt_walk_level));
    return saturating_add(c, saturating_mul(s.checks, cost_.mpt_check));
  }

  void count_steps(const StepCount& s) {
    report_.counters.walks += s.walks;
    report_.counters.mpt_checks += s.checks;
    report_.counters.table_lookups += s.lookups;
  }

  void observe(const AccessObservation& o) {
    if (opts_.observer) opts_.observer(o);
  }

  std::optional<VmId> device_owner(const DmaRequest& r) const {
    auto it = devices_.find(device_key(r));
    if (it == devices_.end()) return std::nullopt;
    return it->second;
  }

  void forget_devices_of(VmId vm) {
    std::erase_if(devices_, [&](const auto& kv) { return kv.second == vm; });
  }

  void record(const TraceEvent& e, FaultKind k, std::optional<VmId> actor,
              std::optional<FrameNumber> frame, std::optional<VmId> owner, std::uint64_t detail) {
    std::optional<std::uint64_t> seg;
    if (frame && *frame < geom_.total_pages()) seg = *frame / geom_.pages_per_segment();
    report_.ledger.record({e.seq, k, e.cpu, actor, seg, owner, detail});
  }

  const RunOptions& opts_;
  Geometry geom_;
  CostModel cost_;
  MetricsReport& report_;
  std::vector<CpuState> cpus_;
  AsidMapTable asids_;
  std::map<std::uint32_t, VmId> devices_;
  Cycles extra_ = 0;  // charged to the current event from callbacks
};

/// Segment ownership under Pro-mem.
class AsmiMachine final : public Machine {
 public:
  AsmiMachine(const RunOptions& opts, MetricsReport& report)
      : Machine(opts, report), pm_(ProMem::boot(opts.geometry, opts.cpus)) {
    pm_.set_reclaim_listener([this](const ReclaimNotice& n) { on_reclaim(n); });
  }

  void stamp(const TraceEvent& e) { pm_.stamp(e.seq, e.cpu); }

  const ProMem& promem() const { return pm_; }

  void sample(std::uint64_t seq) override {
    std::uint64_t total = 0;
    for (const auto id : pm_.live_owners()) {
      const auto pages = pm_.allocated_pages(id);
      report_.samples.push_back({seq, id, pm_.owned_segments(id), pages});
      total += pages;
    }
    report_.sample_totals.emplace_back(seq, total);
  }

  void finish() override {
    for (const auto id : pm_.live_owners())
      if (id != kHypervisor) report_.steady_state_segments[id] = pm_.owned_segments(id);
  }

  void check() const override {
    pm_.check_invariants();
    if (pm_.hypervisor_loaded()) {
      std::uint64_t owned = 0;
      for (const auto id : pm_.live_owners()) owned += pm_.owned_segments(id);
      if (owned + pm_.free_segments() != geom_.total_segments())
        throw InvariantError("segment conservation broken");
    }
    for (const auto& [frame, who] : reverse_)
      if (pm_.owner_of(frame / geom_.pages_per_segment()) != who.first)
        throw InvariantError("allocator mapping survives loss of its segment");
  }

 protected:
  Cycles on_boot(const TraceEvent&) override {
    pm_.load_hypervisor();
    pts_.emplace(kHypervisor, GuestPageTable(kHypervisor));
    return cost_.mpt_check;
  }

  Cycles on_create(const TraceEvent& e) override {
    const auto id = pm_.create_vm();
    if (id != e.vm)
      throw ValidationError("create expected VM " + to_string(e.vm) + ", got " + to_string(id),
                            e.seq);
    pts_.emplace(id, GuestPageTable(id));
    return cost_.mpt_check;
  }

  Cycles on_destroy(const TraceEvent& e) override {
    const auto segs = pm_.segments_of(e.vm);
    pm_.destroy_vm(e.vm);
    std::erase_if(reverse_, [&](const auto& kv) { return kv.second.first == e.vm; });
    pts_.erase(e.vm);
    tlb_invalidate_vm(e.vm);
    asids_.forget(e.vm);
    forget_devices_of(e.vm);
    return saturating_mul(segs.size(), cost_.mpt_check);
  }

  void set_current(const TraceEvent& e, VmId vm) override {
    if (vm == kHypervisor)
      pm_.vm_exit(e.cpu);
    else
      pm_.vm_entry(e.cpu, vm);
    cpus_[e.cpu].current = *pm_.vmidr(e.cpu);
  }

  Cycles on_alloc(const TraceEvent& e) override {
    const auto r = pm_.allocate_page(e.vm);
    Cycles c = cost_.mpt_check;
    report_.counters.mpt_checks += 1;
    if (r.claimed_segment) {
      c = saturating_add(c, cost_.mpt_check);
      report_.counters.mpt_checks += 1;
    }
    if (!r.page) return c;
    const auto frame = frame_of(*r.page, geom_);
    auto& pt = pts_.at(e.vm);
    if (auto old = pt.lookup(e.vpage)) reverse_.erase(*old);
    pt.map(e.vpage, frame);
    reverse_[frame] = {e.vm, e.vpage};
    tlb_invalidate_vpage(e.vm, e.vpage);
    return c;
  }

  Cycles on_free(const TraceEvent& e) override {
    auto& pt = pts_.at(e.vm);
    const auto frame = pt.lookup(e.vpage);
    if (!frame) {
      ++report_.counters.stale_frees;
      return 0;
    }
    report_.counters.mpt_checks += 1;
    const auto res = pm_.free_page(e.vm, address_of_frame(*frame, geom_));
    if (res != FreeResult::IsolationFault) {
      pt.unmap(e.vpage);
      reverse_.erase(*frame);
      tlb_invalidate_vpage(e.vm, e.vpage);
    }
    return cost_.mpt_check;
  }

  Cycles on_access(const TraceEvent& e) override {
    const auto va = split_virtual(e.vaddr, geom_);
    const auto actor = cpus_[e.cpu].current;
    AccessObservation o;
    o.seq = e.seq;
    o.cpu = e.cpu;
    o.actor = actor;
    o.write = e.kind == EventKind::Write;
    o.page = va.vpage;
    Translation t;
    if (const auto hit = tlb_lookup(e.cpu, va.vpage)) {
      o.tlb_hit = true;
      t.frame = *hit;
      t.offset = va.offset;
      t.steps.checks = 1;
      t.outcome = pm_.check_access(e.cpu, address_of_frame(*hit, geom_, va.offset)) ==
                          AccessResult::Allowed
                      ? Outcome::Ok
                      : Outcome::IsolationFault;
    } else {
      t = pm_.translate(e.cpu, va, pts_.at(actor));
      if (t.ok()) tlb_fill(e.cpu, va.vpage, t.frame);
    }
    if (t.outcome == Outcome::PageFault) ++report_.counters.page_faults;
    count_steps(t.steps);
    o.steps = t.steps;
    o.outcome = t.outcome;
    if (t.outcome != Outcome::PageFault) {
      o.frame = t.frame;
      if (t.frame < geom_.total_pages()) o.frame_owner = pm_.owner_of(t.frame / geom_.pages_per_segment());
    }
    o.cycles = saturating_add(o.tlb_hit ? cost_.tlb_hit : 0, step_cycles(t.steps));
    observe(o);
    return o.cycles;
  }

  Cycles on_ptwrite(const TraceEvent& e) override {
    pts_.at(e.vm).map(e.vpage, e.target);
    tlb_invalidate_vpage(e.vm, e.vpage);
    return 0;
  }

  Cycles on_rmwrite(const TraceEvent& e) override {
    throw ModeError("seq " + std::to_string(e.seq) +
                        ": real-map writes do not exist under segment ownership",
                    e.seq);
  }

  Cycles on_dma(const TraceEvent& e) override {
    const auto dev_vm = device_owner(e.dma);
    AccessObservation o;
    o.seq = e.seq;
    o.cpu = e.cpu;
    o.actor = dev_vm;
    o.dma = true;
    o.write = e.dma.is_write;
    o.page = e.dma.dva;
    o.frame = e.dma.dva;
    if (e.dma.dva < geom_.total_pages())
      o.frame_owner = pm_.owner_of(e.dma.dva / geom_.pages_per_segment());
    o.steps.checks = 1;
    count_steps(o.steps);
    o.outcome = pm_.check_dma(dev_vm, e.dma.dva) == AccessResult::Allowed ? Outcome::Ok
                                                                          : Outcome::DmaFault;
    o.cycles = saturating_add(cost_.dma_setup, step_cycles(o.steps));
    observe(o);
    return o.cycles;
  }

 private:
  void on_reclaim(const ReclaimNotice& n) {
    report_.counters.pages_swapped += n.pages_swapped;
    report_.counters.mpt_checks += n.segments.size();
    extra_ = saturating_add(extra_, saturating_mul(n.pages_swapped, cost_.swap_page));
    extra_ = saturating_add(extra_, saturating_mul(n.segments.size(), cost_.mpt_check));
    for (const auto seg : n.segments) {
      for (std::uint64_t p = 0; p < geom_.pages_per_segment(); ++p) {
        const FrameNumber f = seg * geom_.pages_per_segment() + p;
        tlb_invalidate_frame(f);
        auto it = reverse_.find(f);
        if (it == reverse_.end()) continue;
        auto& pt = pts_.at(it->second.first);
        if (pt.lookup(it->second.second) == f) pt.unmap(it->second.second);
        reverse_.erase(it);
      }
    }
  }

  ProMem pm_;
  std::map<VmId, GuestPageTable> pts_;
  std::unordered_map<FrameNumber, std::pair<VmId, std::uint64_t>> reverse_;
};

/// Hypervisor-managed memory: nested / shadow paging, raw or remapped DMA,
/// optional HyperWall protection bits. Frames come from one global pool;
/// when it is empty the hypervisor swaps a page out of the largest other
/// guest, as long as it can read that page.
class BaselineMachine final : public Machine {
 public:
  BaselineMachine(const RunOptions& opts, MetricsReport& report)
      : Machine(opts, report), frames_(opts.geometry.total_pages()), hyp_pt_(kHypervisor) {
    for (FrameNumber f = 0; f < geom_.total_pages(); ++f) free_frames_.insert(free_frames_.end(), f);
    if (opts.mode == Mode::Iommu || opts.mode == Mode::HyperWall) tables_.emplace(opts.iommu_levels);
    if (opts.mode == Mode::HyperWall) bits_.emplace(geom_.total_pages());
    owners_[kHypervisor];
  }

  void sample(std::uint64_t seq) override {
    std::uint64_t total = 0;
    for (const auto& [id, o] : owners_) {
      report_.samples.push_back({seq, id, o.per_segment.size(), o.frames.size()});
      total += o.frames.size();
    }
    report_.sample_totals.emplace_back(seq, total);
  }

  void finish() override {
    for (const auto& [id, o] : owners_)
      if (id != kHypervisor) report_.steady_state_segments[id] = o.per_segment.size();
  }

  void check() const override {
    std::uint64_t owned = 0;
    for (const auto& [id, o] : owners_) {
      owned += o.frames.size();
      for (const auto f : o.frames)
        if (frames_[f].owner != id) throw InvariantError("frame ownership index out of sync");
    }
    if (owned + free_frames_.size() != geom_.total_pages())
      throw InvariantError("frame conservation broken");
    if (opts_.mode == Mode::Shadow) {
      for (const auto& [id, g] : guests_)
        for (const auto& [vpage, ppage] : g.pt) {
          const auto want = nested_translate({vpage, 0}, g.pt, g.rm);
          const auto have = shadow_translate({vpage, 0}, g.shadow);
          if (want.outcome != have.outcome || (want.ok() && want.frame != have.frame))
            throw InvariantError("shadow table diverged from nested mapping");
        }
    }
  }

 protected:
  Cycles on_boot(const TraceEvent&) override { return 0; }

  Cycles on_create(const TraceEvent& e) override {
    const VmId id{next_id_++};
    if (id != e.vm)
      throw ValidationError("create expected VM " + to_string(e.vm) + ", got " + to_string(id),
                            e.seq);
    guests_.emplace(id, Guest(id));
    owners_[id];
    if (tables_) tables_->ensure_domain(raw(id), id);
    return 0;
  }

  Cycles on_destroy(const TraceEvent& e) override {
    auto& o = owners_.at(e.vm);
    const std::vector<FrameNumber> frames(o.frames.begin(), o.frames.end());
    for (const auto f : frames) release_frame(f);
    owners_.erase(e.vm);
    guests_.erase(e.vm);
    if (tables_) tables_->remove_domain(raw(e.vm));
    tlb_invalidate_vm(e.vm);
    asids_.forget(e.vm);
    forget_devices_of(e.vm);
    return 0;
  }

  void set_current(const TraceEvent& e, VmId vm) override {
    auto& cur = cpus_[e.cpu].current;
    if (vm == kHypervisor && cur == kHypervisor)
      throw ProtocolError("VM exit while no VM is running");
    if (vm != kHypervisor && cur != kHypervisor)
      throw ProtocolError("VM entry while a VM is running");
    if (vm != kHypervisor && !guests_.contains(vm))
      throw LifecycleError("VM entry to dead VM " + to_string(vm));
    cur = vm;
  }

  Cycles on_alloc(const TraceEvent& e) override {
    if (!owners_.contains(e.vm)) throw LifecycleError("owner " + to_string(e.vm) + " is not live");
    if (free_frames_.empty() && !hypervisor_reclaim(e)) {
      record(e, FaultKind::MemoryFull, e.vm, std::nullopt, std::nullopt, 0);
      return 0;
    }
    const FrameNumber f = *free_frames_.begin();
    Cycles c = cost_.pt_walk_level;
    if (e.vm == kHypervisor) {
      hyp_pt_.map(e.vpage, f);
      take_frame(f, kHypervisor, e.vpage);
    } else {
      auto& g = guests_.at(e.vm);
      std::uint64_t ppage;
      if (!g.free_ppages.empty()) {
        ppage = *g.free_ppages.begin();
        g.free_ppages.erase(g.free_ppages.begin());
      } else {
        ppage = g.next_ppage++;
      }
      g.pt.map(e.vpage, ppage);
      g.rm.map(ppage, f);
      take_frame(f, e.vm, ppage);
      if (tables_) {
        auto* dom = tables_->domain(raw(e.vm));
        dom->table.map(ppage, f);
        dom->members.insert(f);
      }
      if (bits_) bits_->set(f, HyperWallMode::HypervisorAndDmaAllowed);
      c = saturating_add(c, shadow_sync_ppage(g, ppage));
    }
    tlb_invalidate_vpage(e.vm, e.vpage);
    return c;
  }

  Cycles on_free(const TraceEvent& e) override {
    if (e.vm == kHypervisor) {
      const auto f = hyp_pt_.lookup(e.vpage);
      hyp_pt_.unmap(e.vpage);
      tlb_invalidate_vpage(e.vm, e.vpage);
      if (f && *f < frames_.size() && frames_[*f].owner == kHypervisor &&
          frames_[*f].key == e.vpage)
        release_frame(*f);
      else
        ++report_.counters.stale_frees;
      return cost_.pt_walk_level;
    }
    auto& g = guests_.at(e.vm);
    const auto ppage = g.pt.lookup(e.vpage);
    if (!ppage) {
      ++report_.counters.stale_frees;
      return 0;
    }
    g.pt.unmap(e.vpage);
    const auto f = g.rm.lookup(*ppage);
    if (f && *f < frames_.size() && frames_[*f].owner == e.vm && frames_[*f].key == *ppage) {
      release_frame(*f);
    } else {
      ++report_.counters.stale_frees;
      g.rm.unmap(*ppage);
      if (tables_) tables_->domain(raw(e.vm))->table.unmap(*ppage);
    }
    g.free_ppages.insert(*ppage);
    tlb_invalidate_vpage(e.vm, e.vpage);
    Cycles c = saturating_add(cost_.pt_walk_level, shadow_sync(g, e.vpage));
    return saturating_add(c, shadow_sync_ppage(g, *ppage));
  }

  Cycles on_access(const TraceEvent& e) override {
    const auto va = split_virtual(e.vaddr, geom_);
    const auto actor = cpus_[e.cpu].current;
    AccessObservation o;
    o.seq = e.seq;
    o.cpu = e.cpu;
    o.actor = actor;
    o.write = e.kind == EventKind::Write;
    o.page = va.vpage;
    Translation t;
    if (const auto hit = tlb_lookup(e.cpu, va.vpage)) {
      o.tlb_hit = true;
      t.outcome = Outcome::Ok;
      t.frame = *hit;
      t.offset = va.offset;
    } else {
      t = translate(actor, va);
      if (t.ok() && t.frame >= geom_.total_pages()) t.outcome = Outcome::PageFault;
      if (t.ok()) tlb_fill(e.cpu, va.vpage, t.frame);
    }
    if (t.ok()) {
      o.frame = t.frame;
      o.frame_owner = frames_[t.frame].owner;
      if (bits_) {
        t.steps.checks += 1;
        const auto who = actor == kHypervisor       ? Requester::Hypervisor
                         : o.frame_owner == actor   ? Requester::OwnerVm
                                                    : Requester::OtherVm;
        if (!hyperwall_check(bits_->get(t.frame), who)) {
          t.outcome = Outcome::IsolationFault;
          record(e, FaultKind::Isolation, actor, t.frame, o.frame_owner, t.frame);
        }
      }
      if (t.ok() && o.frame_owner && o.frame_owner != actor)
        record(e, FaultKind::Violation, actor, t.frame, o.frame_owner, t.frame);
    } else {
      ++report_.counters.page_faults;
    }
    count_steps(t.steps);
    o.steps = t.steps;
    o.outcome = t.outcome;
    o.cycles = saturating_add(o.tlb_hit ? cost_.tlb_hit : 0, step_cycles(t.steps));
    observe(o);
    return o.cycles;
  }

  Cycles on_ptwrite(const TraceEvent& e) override {
    tlb_invalidate_vpage(e.vm, e.vpage);
    if (e.vm == kHypervisor) {
      hyp_pt_.map(e.vpage, e.target);
      return 0;
    }
    auto& g = guests_.at(e.vm);
    g.pt.map(e.vpage, e.target);
    if (opts_.mode != Mode::Shadow) return 0;
    return saturating_add(cost_.context_switch, shadow_sync(g, e.vpage));
  }

  Cycles on_rmwrite(const TraceEvent& e) override {
    auto& g = guests_.at(e.vm);
    g.rm.map(e.vpage, e.target);
    if (tables_) tables_->domain(raw(e.vm))->table.map(e.vpage, e.target);
    tlb_invalidate_vm(e.vm);
    Cycles c = cost_.pt_walk_level;
    if (opts_.mode == Mode::Shadow) {
      const auto n = shadow_update_ppage(g.shadow, g.pt, g.rm, e.vpage);
      report_.counters.shadow_updates += n;
      c = saturating_add(c, saturating_mul(n, cost_.pt_walk_level));
    }
    return c;
  }

  Cycles on_dma(const TraceEvent& e) override {
    const auto dev_vm = device_owner(e.dma);
    AccessObservation o;
    o.seq = e.seq;
    o.cpu = e.cpu;
    o.actor = dev_vm;
    o.dma = true;
    o.write = e.dma.is_write;
    o.page = e.dma.dva;
    if (!tables_) {
      if (opts_.dma == DmaPolicy::Disabled) {
        const auto words = geom_.page_size_bytes() / 8;
        report_.counters.programmed_io_words += words;
        o.outcome = Outcome::Ok;
        o.cycles = saturating_mul(words, cost_.programmed_io_word);
        observe(o);
        return o.cycles;
      }
      o.cycles = cost_.dma_setup;
      if (e.dma.dva >= geom_.total_pages()) {
        o.outcome = Outcome::DmaFault;
        record(e, FaultKind::Dma, dev_vm, std::nullopt, std::nullopt, e.dma.dva);
        observe(o);
        return o.cycles;
      }
      o.frame = e.dma.dva;
      o.frame_owner = frames_[e.dma.dva].owner;
      const auto r = raw_dma_access(e.dma, o.frame_owner, dev_vm, opts_.dma);
      o.outcome = Outcome::Ok;
      if (r.violation) record(e, FaultKind::Violation, dev_vm, o.frame, o.frame_owner, e.dma.dva);
      observe(o);
      return o.cycles;
    }
    auto t = iommu_dma_translate(e.dma, *tables_);
    if (t.domain_id) {
      if (const auto* dom = tables_->domain(*t.domain_id)) o.actor = dom->vm;
    }
    if (t.frame < geom_.total_pages() && t.reason != DmaFaultReason::NoRootEntry &&
        t.reason != DmaFaultReason::NoContextEntry && t.reason != DmaFaultReason::NotPresent) {
      o.frame = t.frame;
      o.frame_owner = frames_[t.frame].owner;
    }
    if (t.ok() && bits_) {
      t.steps.checks += 1;
      if (!hyperwall_check(bits_->get(t.frame), Requester::Dma)) {
        t.outcome = Outcome::DmaFault;
        t.reason = DmaFaultReason::DomainMismatch;
      }
    }
    count_steps(t.steps);
    o.steps = t.steps;
    o.outcome = t.outcome;
    if (!t.ok()) record(e, FaultKind::Dma, o.actor, o.frame, o.frame_owner, e.dma.dva);
    o.cycles = saturating_add(cost_.dma_setup, step_cycles(t.steps));
    observe(o);
    return o.cycles;
  }

  Cycles on_assign(const TraceEvent& e) override {
    if (!tables_) return 0;
    tables_->attach(e.dma.bus, e.dma.device, e.dma.function, raw(e.vm));
    return cost_.pt_walk_level;
  }

  Cycles on_hwset(const TraceEvent& e) override {
    if (!bits_) return Machine::on_hwset(e);
    auto& g = guests_.at(e.vm);
    const auto t = nested_translate({e.vpage, 0}, g.pt, g.rm);
    if (!t.ok() || t.frame >= frames_.size() || frames_[t.frame].owner != e.vm) {
      ++report_.counters.ignored_events;
      return 0;
    }
    auto& o = owners_.at(e.vm);
    const bool was_locked = !hyperwall_swappable(bits_->get(t.frame));
    bits_->set(t.frame, e.hw_mode);
    const bool locked = !hyperwall_swappable(e.hw_mode);
    if (was_locked != locked) locked ? ++o.locked : --o.locked;
    return cost_.mpt_check;
  }

 private:
  struct FrameInfo {
    std::optional<VmId> owner;
    std::uint64_t key = 0;  // ppage for guests, vpage for the hypervisor
  };

  struct OwnerFrames {
    std::set<FrameNumber> frames;
    std::map<std::uint64_t, std::uint64_t> per_segment;
    std::uint64_t locked = 0;  // frames the hypervisor may not swap
  };

  struct Guest {
    explicit Guest(VmId id) : pt(id), rm(id), shadow(id) {}
    GuestPageTable pt;
    RealMapTable rm;
    ShadowPageTable shadow;
    std::set<std::uint64_t> free_ppages;
    std::uint64_t next_ppage = 0;
  };

  Translation translate(VmId actor, const VirtualAddress& va) {
    if (actor == kHypervisor) {
      Translation t;
      t.offset = va.offset;
      t.steps.walks = 1;
      if (const auto f = hyp_pt_.lookup(va.vpage)) {
        t.outcome = Outcome::Ok;
        t.frame = *f;
      }
      return t;
    }
    const auto& g = guests_.at(actor);
    if (opts_.mode == Mode::Shadow) return shadow_translate(va, g.shadow);
    return nested_translate(va, g.pt, g.rm);
  }

  Cycles shadow_sync(Guest& g, std::uint64_t vpage) {
    if (opts_.mode != Mode::Shadow) return 0;
    const auto n = shadow_update(g.shadow, g.pt, g.rm, vpage);
    report_.counters.shadow_updates += n;
    return saturating_mul(n, cost_.pt_walk_level);
  }

  /// Also covers guest entries aimed at `ppage` by hand-written PT updates.
  Cycles shadow_sync_ppage(Guest& g, std::uint64_t ppage) {
    if (opts_.mode != Mode::Shadow) return 0;
    const auto n = shadow_update_ppage(g.shadow, g.pt, g.rm, ppage);
    report_.counters.shadow_updates += n;
    return saturating_mul(n, cost_.pt_walk_level);
  }

  void take_frame(FrameNumber f, VmId owner, std::uint64_t key) {
    free_frames_.erase(f);
    frames_[f] = {owner, key};
    auto& o = owners_.at(owner);
    o.frames.insert(f);
    ++o.per_segment[f / geom_.pages_per_segment()];
  }

  /// Drops every mapping to `f` held by its owner and returns it to the pool.
  void release_frame(FrameNumber f) {
    const auto info = frames_[f];
    if (!info.owner) return;
    auto& o = owners_.at(*info.owner);
    o.frames.erase(f);
    const auto seg = f / geom_.pages_per_segment();
    if (--o.per_segment[seg] == 0) o.per_segment.erase(seg);
    if (bits_) {
      if (!hyperwall_swappable(bits_->get(f)) && *info.owner != kHypervisor) --o.locked;
      bits_->set(f, HyperWallMode::HypervisorOnly);
    }
    if (*info.owner == kHypervisor) {
      if (hyp_pt_.lookup(info.key) == f) hyp_pt_.unmap(info.key);
    } else {
      auto& g = guests_.at(*info.owner);
      if (g.rm.lookup(info.key) == f) {
        g.rm.unmap(info.key);
        if (opts_.mode == Mode::Shadow) {
          const auto n = shadow_update_ppage(g.shadow, g.pt, g.rm, info.key);
          report_.counters.shadow_updates += n;
          extra_ = saturating_add(extra_, saturating_mul(n, cost_.pt_walk_level));
        }
      }
      if (tables_) {
        auto* dom = tables_->domain(raw(*info.owner));
        if (dom->table.walk(info.key).frame == f) dom->table.unmap(info.key);
        dom->members.erase(f);
      }
    }
    frames_[f] = {};
    free_frames_.insert(f);
    tlb_invalidate_frame(f);
  }

  /// Swaps out one page of the guest (other than the requester) with the
  /// most swappable frames. Returns false if nothing can be swapped.
  bool hypervisor_reclaim(const TraceEvent& e) {
    std::optional<VmId> victim;
    std::uint64_t best = 0;
    for (const auto& [id, o] : owners_) {
      if (id == kHypervisor || id == e.vm) continue;
      const auto swappable = o.frames.size() - o.locked;
      if (swappable > best) {
        best = swappable;
        victim = id;
      }
    }
    if (!victim) return false;
    auto& o = owners_.at(*victim);
    std::optional<FrameNumber> pick;
    for (auto it = o.frames.rbegin(); it != o.frames.rend(); ++it) {
      if (!bits_ || hyperwall_swappable(bits_->get(*it))) {
        pick = *it;
        break;
      }
    }
    if (!pick) return false;
    record(e, FaultKind::Reclaim, e.vm, *pick, victim, 1);
    report_.counters.pages_swapped += 1;
    extra_ = saturating_add(extra_, cost_.swap_page);
    release_frame(*pick);
    return true;
  }

  std::vector<FrameInfo> frames_;
  std::set<FrameNumber> free_frames_;
  std::map<VmId, OwnerFrames> owners_;
  std::map<VmId, Guest> guests_;
  GuestPageTable hyp_pt_;
  std::optional<RemappingTables> tables_;
  std::optional<ProtectionBits> bits_;
  std::uint32_t next_id_ = 1;
};

}  // namespace detail

/// Replays `trace` under one mode. Validates the whole trace first; errors
/// raised while applying an event are reported with that event's seq.
inline MetricsReport run(const Trace& trace, const RunOptions& opts) {
  if (opts.cpus == 0) throw ConfigError("at least one cpu is required");
  if (opts.sample_interval == 0) throw ConfigError("sample interval must be positive");
  validate_trace(trace, {opts.cpus, opts.geometry});

  MetricsReport report;
  report.mode = std::string(to_string(opts.mode));
  report.total_pages = opts.geometry.total_pages();

  std::unique_ptr<detail::Machine> machine;
  detail::AsmiMachine* asmi = nullptr;
  if (opts.mode == Mode::Asmi) {
    auto m = std::make_unique<detail::AsmiMachine>(opts, report);
    asmi = m.get();
    machine = std::move(m);
  } else {
    machine = std::make_unique<detail::BaselineMachine>(opts, report);
  }

  std::uint64_t index = 0;
  for (const auto& e : trace) {
    if (asmi) asmi->stamp(e);
    try {
      machine->apply(e);
      if (opts.check_invariants) machine->check();
    } catch (const TraceError&) {
      throw;
    } catch (const InvariantError& err) {
      throw InvariantError("seq " + std::to_string(e.seq) + ": " + err.what());
    } catch (const SimError& err) {
      throw ValidationError("seq " + std::to_string(e.seq) + " (" +
                                std::string(to_string(e.kind)) + "): " + err.what(),
                            e.seq);
    }
    ++index;
    report.events = index;
    if (index % opts.sample_interval == 0) machine->sample(e.seq);
  }
  if (asmi) report.ledger = asmi->promem().ledger();
  machine->finish();
  return report;
}

struct NamedTrace {
  std::string name;
  Trace trace;
};

struct ComparisonRow {
  std::string trace;
  Mode mode = Mode::Asmi;
  MetricsReport report;
};

struct ComparisonReport {
  std::vector<ComparisonRow> rows;

  void write_csv(std::ostream& os) const {
    os << kSummaryCsvHeader << '\n';
    for (const auto& r : rows) write_summary_row(os, r.trace, r.report);
  }

  void write_table(std::ostream& os) const {
    os << std::left << std::setw(18) << "trace" << std::setw(11) << "mode" << std::right
       << std::setw(14) << "cycles" << std::setw(11) << "isolation" << std::setw(8) << "dma"
       << std::setw(11) << "violation" << std::setw(9) << "memfull" << std::setw(9) << "reclaim"
       << std::setw(11) << "util" << '\n';
    for (const auto& r : rows) {
      const auto& m = r.report;
      os << std::left << std::setw(18) << r.trace << std::setw(11) << m.mode << std::right
         << std::setw(14) << m.total_cycles << std::setw(11) << m.isolation_faults()
         << std::setw(8) << m.dma_faults() << std::setw(11) << m.violations() << std::setw(9)
         << m.memory_full() << std::setw(9) << m.reclaims() << std::setw(11)
         << format_fixed(m.mean_utilization(), 4) << '\n';
    }
  }
};

/// Runs every (trace, mode) pair; rows come out trace-major in input order
/// no matter how the runs were scheduled. The observer is not used here.
inline ComparisonReport compare(const std::vector<NamedTrace>& traces, const std::vector<Mode>& modes,
                                const RunOptions& base) {
  std::vector<std::future<MetricsReport>> jobs;
  std::vector<RunOptions> option_sets;
  option_sets.reserve(traces.size() * modes.size());
  for (std::size_t t = 0; t < traces.size(); ++t)
    for (const auto m : modes) {
      RunOptions o = base;
      o.mode = m;
      o.observer = nullptr;
      option_sets.push_back(std::move(o));
    }
  std::size_t k = 0;
  for (const auto& nt : traces)
    for (std::size_t i = 0; i < modes.size(); ++i, ++k)
      jobs.push_back(std::async(std::launch::async,
                                [&trace = nt.trace, &o = option_sets[k]] { return run(trace, o); }));
  ComparisonReport out;
  k = 0;
  for (const auto& nt : traces)
    for (const auto m : modes) out.rows.push_back({nt.name, m, jobs[k++].get()});
  return out;
}

}  // namespace asmi
