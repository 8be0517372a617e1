#pragma once

#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "asmi/errors.hpp"
#include "asmi/geometry.hpp"
#include "asmi/hyperwall.hpp"
#include "asmi/iommu.hpp"

namespace asmi {

enum class EventKind : std::uint8_t {
  Boot,
  CreateVm,
  DestroyVm,
  Enter,
  Exit,
  AllocPage,
  FreePage,
  Read,
  Write,
  GuestPtWrite,
  RealMapWrite,
  DmaIssue,
  DomainAssign,
  HyperWallSet,
  ProcessSwitch,
};

inline constexpr std::size_t kEventKindCount = 15;

inline std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::Boot: return "boot";
    case EventKind::CreateVm: return "create";
    case EventKind::DestroyVm: return "destroy";
    case EventKind::Enter: return "enter";
    case EventKind::Exit: return "exit";
    case EventKind::AllocPage: return "alloc";
    case EventKind::FreePage: return "free";
    case EventKind::Read: return "read";
    case EventKind::Write: return "write";
    case EventKind::GuestPtWrite: return "ptwrite";
    case EventKind::RealMapWrite: return "rmwrite";
    case EventKind::DmaIssue: return "dma";
    case EventKind::DomainAssign: return "assign";
    case EventKind::HyperWallSet: return "hwset";
    case EventKind::ProcessSwitch: return "pswitch";
  }
  return "?";
}

inline std::optional<EventKind> parse_event_kind(std::string_view s) {
  for (std::size_t i = 0; i < kEventKindCount; ++i) {
    const auto k = static_cast<EventKind>(i);
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

/// One line of a trace. Which fields are meaningful depends on `kind`:
///
///   boot                                 (no fields)
///   create   VM                          id the new VM must receive
///   destroy  VM
///   enter    VM
///   exit                                 (no fields)
///   alloc    VM VPAGE                    allocate a page, map it at VPAGE
///   free     VM VPAGE                    free the page mapped at VPAGE
///   read     VADDR                       flat virtual byte address
///   write    VADDR
///   ptwrite  VM VPAGE TARGET             guest page-table write
///   rmwrite  VM PPAGE FRAME              real-map write by the hypervisor
///   dma      BUS DEV FN DVA r|w          one-page DMA, DVA is a page number
///   assign   BUS DEV FN VM               bind a device to a VM's domain
///   hwset    VM VPAGE MODE               HyperWall mode for VM's page
///   pswitch  ASID                        guest process switch
struct TraceEvent {
  std::uint64_t seq = 0;
  EventKind kind = EventKind::Boot;
  CpuIndex cpu = 0;
  VmId vm = kHypervisor;
  std::uint64_t vpage = 0;   // alloc/free/ptwrite/hwset; PPAGE for rmwrite
  std::uint64_t target = 0;  // ptwrite TARGET, rmwrite FRAME
  std::uint64_t vaddr = 0;
  DmaRequest dma;
  HyperWallMode hw_mode = HyperWallMode::HypervisorOnly;
  std::uint32_t asid = 0;

  bool operator==(const TraceEvent& o) const {
    return seq == o.seq && kind == o.kind && cpu == o.cpu && vm == o.vm && vpage == o.vpage &&
           target == o.target && vaddr == o.vaddr && dma.bus == o.dma.bus &&
           dma.device == o.dma.device && dma.function == o.dma.function && dma.dva == o.dma.dva &&
           dma.is_write == o.dma.is_write && hw_mode == o.hw_mode && asid == o.asid;
  }

  static TraceEvent make(std::uint64_t seq, EventKind k, CpuIndex cpu) {
    TraceEvent e;
    e.seq = seq;
    e.kind = k;
    e.cpu = cpu;
    return e;
  }
  static TraceEvent boot(std::uint64_t s, CpuIndex c = 0) { return make(s, EventKind::Boot, c); }
  static TraceEvent create(std::uint64_t s, CpuIndex c, VmId vm) {
    auto e = make(s, EventKind::CreateVm, c);
    e.vm = vm;
    return e;
  }
  static TraceEvent destroy(std::uint64_t s, CpuIndex c, VmId vm) {
    auto e = make(s, EventKind::DestroyVm, c);
    e.vm = vm;
    return e;
  }
  static TraceEvent enter(std::uint64_t s, CpuIndex c, VmId vm) {
    auto e = make(s, EventKind::Enter, c);
    e.vm = vm;
    return e;
  }
  static TraceEvent exit(std::uint64_t s, CpuIndex c) { return make(s, EventKind::Exit, c); }
  static TraceEvent alloc(std::uint64_t s, CpuIndex c, VmId vm, std::uint64_t vpage) {
    auto e = make(s, EventKind::AllocPage, c);
    e.vm = vm;
    e.vpage = vpage;
    return e;
  }
  static TraceEvent free(std::uint64_t s, CpuIndex c, VmId vm, std::uint64_t vpage) {
    auto e = alloc(s, c, vm, vpage);
    e.kind = EventKind::FreePage;
    return e;
  }
  static TraceEvent read(std::uint64_t s, CpuIndex c, std::uint64_t vaddr) {
    auto e = make(s, EventKind::Read, c);
    e.vaddr = vaddr;
    return e;
  }
  static TraceEvent write(std::uint64_t s, CpuIndex c, std::uint64_t vaddr) {
    auto e = read(s, c, vaddr);
    e.kind = EventKind::Write;
    return e;
  }
  static TraceEvent ptwrite(std::uint64_t s, CpuIndex c, VmId vm, std::uint64_t vpage,
                            std::uint64_t target) {
    auto e = alloc(s, c, vm, vpage);
    e.kind = EventKind::GuestPtWrite;
    e.target = target;
    return e;
  }
  static TraceEvent rmwrite(std::uint64_t s, CpuIndex c, VmId vm, std::uint64_t ppage,
                            FrameNumber frame) {
    auto e = ptwrite(s, c, vm, ppage, frame);
    e.kind = EventKind::RealMapWrite;
    return e;
  }
  static TraceEvent dma_issue(std::uint64_t s, CpuIndex c, DmaRequest req) {
    auto e = make(s, EventKind::DmaIssue, c);
    e.dma = req;
    return e;
  }
  static TraceEvent assign(std::uint64_t s, CpuIndex c, std::uint32_t bus, std::uint32_t dev,
                           std::uint32_t fn, VmId vm) {
    auto e = make(s, EventKind::DomainAssign, c);
    e.dma = {bus, dev, fn, 0, false};
    e.vm = vm;
    return e;
  }
  static TraceEvent hwset(std::uint64_t s, CpuIndex c, VmId vm, std::uint64_t vpage,
                          HyperWallMode m) {
    auto e = alloc(s, c, vm, vpage);
    e.kind = EventKind::HyperWallSet;
    e.hw_mode = m;
    return e;
  }
  static TraceEvent pswitch(std::uint64_t s, CpuIndex c, std::uint32_t asid) {
    auto e = make(s, EventKind::ProcessSwitch, c);
    e.asid = asid;
    return e;
  }
};

using Trace = std::vector<TraceEvent>;

inline std::string format_event(const TraceEvent& e) {
  std::ostringstream os;
  os << e.seq << ' ' << to_string(e.kind) << ' ' << e.cpu;
  switch (e.kind) {
    case EventKind::Boot:
    case EventKind::Exit:
      break;
    case EventKind::CreateVm:
    case EventKind::DestroyVm:
    case EventKind::Enter:
      os << ' ' << raw(e.vm);
      break;
    case EventKind::AllocPage:
    case EventKind::FreePage:
      os << ' ' << raw(e.vm) << ' ' << e.vpage;
      break;
    case EventKind::Read:
    case EventKind::Write:
      os << ' ' << e.vaddr;
      break;
    case EventKind::GuestPtWrite:
    case EventKind::RealMapWrite:
      os << ' ' << raw(e.vm) << ' ' << e.vpage << ' ' << e.target;
      break;
    case EventKind::DmaIssue:
      os << ' ' << e.dma.bus << ' ' << e.dma.device << ' ' << e.dma.function << ' ' << e.dma.dva
         << ' ' << (e.dma.is_write ? 'w' : 'r');
      break;
    case EventKind::DomainAssign:
      os << ' ' << e.dma.bus << ' ' << e.dma.device << ' ' << e.dma.function << ' ' << raw(e.vm);
      break;
    case EventKind::HyperWallSet:
      os << ' ' << raw(e.vm) << ' ' << e.vpage << ' ' << to_string(e.hw_mode);
      break;
    case EventKind::ProcessSwitch:
      os << ' ' << e.asid;
      break;
  }
  return os.str();
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::uint64_t parse_u64(std::string_view s, std::uint64_t line, std::string_view what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ParseError("line " + std::to_string(line) + ": bad " + std::string(what) + " '" +
                         std::string(s) + "'",
                     line);
  return v;
}

inline std::uint32_t parse_u32(std::string_view s, std::uint64_t line, std::string_view what) {
  const auto v = parse_u64(s, line, what);
  if (v > UINT32_MAX)
    throw ParseError("line " + std::to_string(line) + ": " + std::string(what) + " too large", line);
  return static_cast<std::uint32_t>(v);
}

inline std::size_t field_count(EventKind k) {
  switch (k) {
    case EventKind::Boot:
    case EventKind::Exit: return 0;
    case EventKind::CreateVm:
    case EventKind::DestroyVm:
    case EventKind::Enter:
    case EventKind::Read:
    case EventKind::Write:
    case EventKind::ProcessSwitch: return 1;
    case EventKind::AllocPage:
    case EventKind::FreePage: return 2;
    case EventKind::GuestPtWrite:
    case EventKind::RealMapWrite:
    case EventKind::HyperWallSet: return 3;
    case EventKind::DomainAssign: return 4;
    case EventKind::DmaIssue: return 5;
  }
  return 0;
}

}  // namespace detail

/// Parses one line. Blank lines and `#` comments yield nothing.
inline std::optional<TraceEvent> parse_event(std::string_view line, std::uint64_t lineno) {
  if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
  const auto f = detail::split_fields(line);
  if (f.empty()) return std::nullopt;
  if (f.size() < 3)
    throw ParseError("line " + std::to_string(lineno) + ": expected 'seq kind cpu ...'", lineno);
  TraceEvent e;
  e.seq = detail::parse_u64(f[0], lineno, "seq");
  const auto kind = parse_event_kind(f[1]);
  if (!kind)
    throw ParseError("line " + std::to_string(lineno) + ": unknown event kind '" +
                         std::string(f[1]) + "'",
                     lineno);
  e.kind = *kind;
  e.cpu = detail::parse_u32(f[2], lineno, "cpu");
  const auto want = detail::field_count(e.kind);
  if (f.size() - 3 != want)
    throw ParseError("line " + std::to_string(lineno) + ": '" + std::string(f[1]) + "' takes " +
                         std::to_string(want) + " fields, got " + std::to_string(f.size() - 3),
                     lineno);
  auto u64 = [&](std::size_t i, std::string_view what) { return detail::parse_u64(f[i], lineno, what); };
  auto u32 = [&](std::size_t i, std::string_view what) { return detail::parse_u32(f[i], lineno, what); };
  auto bdf = [&] {
    e.dma.bus = u32(3, "bus");
    e.dma.device = u32(4, "device");
    e.dma.function = u32(5, "function");
    try {
      e.dma.validate();
    } catch (const RangeError& err) {
      throw ParseError("line " + std::to_string(lineno) + ": " + err.what(), lineno);
    }
  };
  switch (e.kind) {
    case EventKind::Boot:
    case EventKind::Exit:
      break;
    case EventKind::CreateVm:
    case EventKind::DestroyVm:
    case EventKind::Enter:
      e.vm = VmId{u32(3, "vm")};
      break;
    case EventKind::AllocPage:
    case EventKind::FreePage:
      e.vm = VmId{u32(3, "vm")};
      e.vpage = u64(4, "vpage");
      break;
    case EventKind::Read:
    case EventKind::Write:
      e.vaddr = u64(3, "vaddr");
      break;
    case EventKind::GuestPtWrite:
    case EventKind::RealMapWrite:
      e.vm = VmId{u32(3, "vm")};
      e.vpage = u64(4, "page");
      e.target = u64(5, "target");
      break;
    case EventKind::DmaIssue:
      bdf();
      e.dma.dva = u64(6, "dva");
      if (f[7] != "r" && f[7] != "w")
        throw ParseError("line " + std::to_string(lineno) + ": DMA direction must be r or w", lineno);
      e.dma.is_write = f[7] == "w";
      break;
    case EventKind::DomainAssign:
      bdf();
      e.vm = VmId{u32(6, "vm")};
      break;
    case EventKind::HyperWallSet:
      e.vm = VmId{u32(3, "vm")};
      e.vpage = u64(4, "vpage");
      try {
        e.hw_mode = parse_hyperwall_mode(f[5]);
      } catch (const ConfigError& err) {
        throw ParseError("line " + std::to_string(lineno) + ": " + err.what(), lineno);
      }
      break;
    case EventKind::ProcessSwitch:
      e.asid = u32(3, "asid");
      break;
  }
  return e;
}

inline Trace read_trace(std::istream& in) {
  Trace t;
  std::string line;
  std::uint64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto e = parse_event(line, lineno)) t.push_back(*e);
  }
  return t;
}

inline Trace parse_trace(std::string_view text) {
  std::istringstream in{std::string(text)};
  return read_trace(in);
}

inline void write_trace(std::ostream& os, const Trace& t) {
  for (const auto& e : t) os << format_event(e) << '\n';
}

inline std::string format_trace(const Trace& t) {
  std::ostringstream os;
  write_trace(os, t);
  return os.str();
}

struct TraceLimits {
  std::size_t cpus = 1;
  std::optional<Geometry> geometry;  // enables the VM-capacity check
};

/// Mode-independent checks: ordering, processor range, and the VM lifecycle
/// (ids, entry/exit pairing, allocation bookkeeping). Throws ValidationError
/// naming the offending seq.
inline void validate_trace(const Trace& trace, const TraceLimits& limits) {
  std::optional<std::uint64_t> last_seq;
  bool booted = false;
  std::uint32_t next_id = 1;
  std::set<VmId> live;
  std::vector<VmId> current(limits.cpus, kHypervisor);
  std::map<VmId, std::set<std::uint64_t>> allocated;

  for (const auto& e : trace) {
    auto fail = [&](const std::string& why) {
      throw ValidationError("seq " + std::to_string(e.seq) + " (" + std::string(to_string(e.kind)) +
                                "): " + why,
                            e.seq);
    };
    if (last_seq && e.seq <= *last_seq) fail("sequence number not strictly increasing");
    last_seq = e.seq;
    if (e.cpu >= limits.cpus) fail("cpu " + std::to_string(e.cpu) + " out of range");
    if (!booted && e.kind != EventKind::Boot) fail("first event must be boot");
    auto need_live = [&](bool allow_hypervisor) {
      if (e.vm == kHypervisor) {
        if (!allow_hypervisor) fail("hypervisor not allowed here");
        return;
      }
      if (!live.contains(e.vm)) fail("VM " + to_string(e.vm) + " is not live");
    };
    switch (e.kind) {
      case EventKind::Boot:
        if (booted) fail("boot repeated");
        booted = true;
        live.insert(kHypervisor);
        break;
      case EventKind::CreateVm:
        if (raw(e.vm) != next_id) fail("expected new VM id " + std::to_string(next_id));
        if (limits.geometry && live.size() >= limits.geometry->total_segments())
          fail("more owners than segments");
        ++next_id;
        live.insert(e.vm);
        break;
      case EventKind::DestroyVm:
        need_live(false);
        for (const auto c : current)
          if (c == e.vm) fail("VM is running");
        live.erase(e.vm);
        allocated.erase(e.vm);
        break;
      case EventKind::Enter:
        need_live(false);
        if (current[e.cpu] != kHypervisor) fail("a VM is already running on this cpu");
        current[e.cpu] = e.vm;
        break;
      case EventKind::Exit:
        if (current[e.cpu] == kHypervisor) fail("no VM running on this cpu");
        current[e.cpu] = kHypervisor;
        break;
      case EventKind::AllocPage:
        need_live(true);
        if (!allocated[e.vm].insert(e.vpage).second) fail("vpage already allocated");
        break;
      case EventKind::FreePage:
        need_live(true);
        if (allocated[e.vm].erase(e.vpage) == 0) fail("vpage not allocated");
        break;
      case EventKind::GuestPtWrite:
        need_live(true);
        if (allocated[e.vm].contains(e.vpage)) fail("page-table write over an allocated vpage");
        break;
      case EventKind::RealMapWrite:
      case EventKind::DomainAssign:
      case EventKind::HyperWallSet:
        need_live(false);
        break;
      case EventKind::Read:
      case EventKind::Write:
      case EventKind::DmaIssue:
      case EventKind::ProcessSwitch:
        break;
    }
  }
}

}  // namespace asmi
