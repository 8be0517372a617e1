#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include "asmi/errors.hpp"
#include "asmi/geometry.hpp"
#include "asmi/page_tables.hpp"

namespace asmi {

/// A DMA transfer of one page. `dva` is a page number: physical under raw
/// DMA and segmented ownership, pseudo-physical under remapping.
struct DmaRequest {
  std::uint32_t bus = 0;
  std::uint32_t device = 0;
  std::uint32_t function = 0;
  std::uint64_t dva = 0;
  bool is_write = false;

  static constexpr std::uint32_t kBuses = 256;
  static constexpr std::uint32_t kDevices = 32;
  static constexpr std::uint32_t kFunctions = 8;

  void validate() const {
    if (bus >= kBuses || device >= kDevices || function >= kFunctions)
      throw RangeError("DMA source " + std::to_string(bus) + ":" + std::to_string(device) + "." +
                       std::to_string(function) + " out of range");
  }

  std::uint32_t context_index() const noexcept { return device * kFunctions + function; }
};

enum class DmaFaultReason : std::uint8_t {
  None,
  NoRootEntry,     // RET[bus] absent
  NoContextEntry,  // CET[device, function] absent
  NotPresent,      // hierarchical walk missed
  DomainMismatch,  // translated page lies outside the device's domain
};

inline std::string_view to_string(DmaFaultReason r) {
  switch (r) {
    case DmaFaultReason::None: return "none";
    case DmaFaultReason::NoRootEntry: return "no-root-entry";
    case DmaFaultReason::NoContextEntry: return "no-context-entry";
    case DmaFaultReason::NotPresent: return "not-present";
    case DmaFaultReason::DomainMismatch: return "domain-mismatch";
  }
  return "?";
}

/// Multi-level radix table mapping DMA page numbers to frames, 9 index bits
/// per level. Walks stop at the first absent level.
class HierarchicalTable {
 public:
  static constexpr unsigned kBitsPerLevel = 9;

  explicit HierarchicalTable(unsigned levels = 4) : levels_(levels) {
    if (levels == 0 || levels * kBitsPerLevel > 63)
      throw ConfigError("hierarchical table depth must be 1..7 levels");
  }

  unsigned levels() const noexcept { return levels_; }

  bool in_range(std::uint64_t page) const noexcept {
    return (page >> (levels_ * kBitsPerLevel)) == 0;
  }

  void map(std::uint64_t page, FrameNumber frame) {
    if (!in_range(page)) throw RangeError("DMA page " + std::to_string(page) + " beyond table reach");
    Node* node = &root_;
    for (unsigned l = 0; l + 1 < levels_; ++l) {
      auto& child = node->children[index(page, l)];
      if (!child) child = std::make_unique<Node>();
      node = child.get();
    }
    if (node->leaves.insert_or_assign(index(page, levels_ - 1), frame).second) ++size_;
  }

  void unmap(std::uint64_t page) {
    if (!in_range(page)) return;
    Node* node = &root_;
    for (unsigned l = 0; l + 1 < levels_; ++l) {
      auto it = node->children.find(index(page, l));
      if (it == node->children.end()) return;
      node = it->second.get();
    }
    size_ -= node->leaves.erase(index(page, levels_ - 1));
  }

  struct Walk {
    std::optional<FrameNumber> frame;
    std::uint32_t levels_walked = 0;
  };

  Walk walk(std::uint64_t page) const {
    Walk w;
    if (!in_range(page)) {
      w.levels_walked = 1;
      return w;
    }
    const Node* node = &root_;
    for (unsigned l = 0; l + 1 < levels_; ++l) {
      ++w.levels_walked;
      auto it = node->children.find(index(page, l));
      if (it == node->children.end()) return w;
      node = it->second.get();
    }
    ++w.levels_walked;
    if (auto it = node->leaves.find(index(page, levels_ - 1)); it != node->leaves.end())
      w.frame = it->second;
    return w;
  }

  std::size_t size() const noexcept { return size_; }

 private:
  struct Node {
    std::map<std::uint32_t, std::unique_ptr<Node>> children;
    std::map<std::uint32_t, FrameNumber> leaves;
  };

  std::uint32_t index(std::uint64_t page, unsigned level) const noexcept {
    const unsigned shift = (levels_ - 1 - level) * kBitsPerLevel;
    return static_cast<std::uint32_t>((page >> shift) & ((1u << kBitsPerLevel) - 1));
  }

  unsigned levels_;
  Node root_;
  std::size_t size_ = 0;
};

/// A partition of physical memory bound to one VM and the devices assigned
/// to it. Devices may only reach the domain's member frames.
struct ProtectionDomain {
  std::uint32_t domain_id = 0;
  VmId vm = kHypervisor;
  std::set<FrameNumber> members;
  std::set<std::uint32_t> devices;  // bus << 8 | context index
  HierarchicalTable table;

  ProtectionDomain(std::uint32_t id, VmId owner, unsigned levels)
      : domain_id(id), vm(owner), table(levels) {}
};

struct ContextEntry {
  std::uint32_t domain_id = 0;
};

/// Root entry table indexed by bus, one context entry table per present
/// root entry indexed by device and function together.
class RemappingTables {
 public:
  using ContextTable = std::array<std::optional<ContextEntry>, DmaRequest::kDevices * DmaRequest::kFunctions>;

  explicit RemappingTables(unsigned levels = 4) : levels_(levels) {
    HierarchicalTable probe(levels);  // validates depth
    (void)probe;
  }

  unsigned levels() const noexcept { return levels_; }

  ProtectionDomain& ensure_domain(std::uint32_t id, VmId vm) {
    auto it = domains_.find(id);
    if (it == domains_.end()) it = domains_.emplace(id, ProtectionDomain(id, vm, levels_)).first;
    return it->second;
  }

  ProtectionDomain* domain(std::uint32_t id) {
    auto it = domains_.find(id);
    return it == domains_.end() ? nullptr : &it->second;
  }
  const ProtectionDomain* domain(std::uint32_t id) const {
    auto it = domains_.find(id);
    return it == domains_.end() ? nullptr : &it->second;
  }

  void remove_domain(std::uint32_t id) {
    auto it = domains_.find(id);
    if (it == domains_.end()) return;
    for (const auto key : it->second.devices) {
      const auto bus = key >> 8;
      if (root_[bus]) contexts_[*root_[bus]][key & 0xff].reset();
    }
    domains_.erase(it);
  }

  /// Binds a device to a domain, creating the RET entry on first use. A
  /// device already bound elsewhere is moved.
  void attach(std::uint32_t bus, std::uint32_t device, std::uint32_t function,
              std::uint32_t domain_id) {
    DmaRequest probe{bus, device, function, 0, false};
    probe.validate();
    auto* dom = domain(domain_id);
    if (!dom) throw MappingError("attach to unknown domain " + std::to_string(domain_id));
    if (!root_[bus]) {
      root_[bus] = static_cast<std::uint32_t>(contexts_.size());
      contexts_.emplace_back();
    }
    auto& slot = contexts_[*root_[bus]][probe.context_index()];
    const std::uint32_t key = bus << 8 | probe.context_index();
    if (slot)
      if (auto* old = domain(slot->domain_id)) old->devices.erase(key);
    slot = ContextEntry{domain_id};
    dom->devices.insert(key);
  }

  bool has_root(std::uint32_t bus) const { return bus < root_.size() && root_[bus].has_value(); }

  std::optional<ContextEntry> context(const DmaRequest& req) const {
    if (!has_root(req.bus)) return std::nullopt;
    return contexts_[*root_[req.bus]][req.context_index()];
  }

  std::size_t domain_count() const noexcept { return domains_.size(); }

 private:
  unsigned levels_;
  std::array<std::optional<std::uint32_t>, DmaRequest::kBuses> root_{};
  std::vector<ContextTable> contexts_;
  std::map<std::uint32_t, ProtectionDomain> domains_;
};

struct DmaTranslation {
  Outcome outcome = Outcome::DmaFault;
  DmaFaultReason reason = DmaFaultReason::None;
  FrameNumber frame = 0;
  std::optional<std::uint32_t> domain_id;
  StepCount steps;

  bool ok() const noexcept { return outcome == Outcome::Ok; }
};

/// RET[bus] -> CET[device, function] -> hierarchical walk -> domain check.
/// Every table touched is one lookup.
inline DmaTranslation iommu_dma_translate(const DmaRequest& req, const RemappingTables& tables) {
  req.validate();
  DmaTranslation t;
  t.steps.lookups = 1;
  if (!tables.has_root(req.bus)) {
    t.reason = DmaFaultReason::NoRootEntry;
    return t;
  }
  t.steps.lookups = 2;
  const auto ctx = tables.context(req);
  const auto* dom = ctx ? tables.domain(ctx->domain_id) : nullptr;
  if (!dom) {
    t.reason = DmaFaultReason::NoContextEntry;
    return t;
  }
  t.domain_id = dom->domain_id;
  const auto walk = dom->table.walk(req.dva);
  t.steps.lookups += walk.levels_walked;
  if (!walk.frame) {
    t.reason = DmaFaultReason::NotPresent;
    return t;
  }
  t.frame = *walk.frame;
  t.steps.checks = 1;
  if (!dom->members.contains(*walk.frame)) {
    t.reason = DmaFaultReason::DomainMismatch;
    return t;
  }
  t.outcome = Outcome::Ok;
  return t;
}

enum class DmaPolicy : std::uint8_t { Enabled, Disabled };

inline std::string_view to_string(DmaPolicy p) {
  return p == DmaPolicy::Enabled ? "enabled" : "disabled";
}

inline DmaPolicy parse_dma_policy(std::string_view s) {
  if (s == "enabled") return DmaPolicy::Enabled;
  if (s == "disabled") return DmaPolicy::Disabled;
  throw ConfigError("unknown DMA policy '" + std::string(s) + "' (enabled|disabled)");
}

struct RawDmaResult {
  bool performed = false;  // false when DMA is disabled and programmed I/O is used
  bool violation = false;  // completed against a page owned by another VM
};

/// DMA with no remapping hardware: the device writes wherever it is told.
/// Always completes; touching another owner's page is recorded, not stopped.
inline RawDmaResult raw_dma_access(const DmaRequest& req, std::optional<VmId> target_owner,
                                   std::optional<VmId> device_vm, DmaPolicy policy) {
  req.validate();
  RawDmaResult r;
  if (policy == DmaPolicy::Disabled) return r;
  r.performed = true;
  r.violation = target_owner.has_value() && target_owner != device_vm;
  return r;
}

}  // namespace asmi
