#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "asmi/errors.hpp"
#include "asmi/geometry.hpp"
#include "asmi/trace.hpp"

namespace asmi {

constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// xorshift64* (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D), seeded
/// through one round of splitmix64. A zero state is replaced by the
/// splitmix increment. Traces are reproducible from these constants alone.
class Xorshift64Star {
 public:
  explicit Xorshift64Star(std::uint64_t seed) : state_(splitmix64(seed)) {
    if (state_ == 0) state_ = 0x9E3779B97F4A7C15ULL;
  }

  std::uint64_t next() noexcept {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  /// Uniform in [0, n) by 128-bit multiply-high. n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  /// Uniform in [0, 1) from the top 53 bits.
  double unit() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  bool chance(double p) noexcept { return unit() < p; }

 private:
  std::uint64_t state_;
};

struct VmProfile {
  std::uint64_t target_pages = 64;  // working set the guest tries to hold
  double churn = 0.05;              // P(free) per step once at target
  double locality = 0.8;            // P(revisit one of the last `window` pages)
  std::uint32_t window = 8;
};

struct WorkloadSpec {
  std::uint64_t seed = 1;
  std::uint32_t vm_count = 3;
  std::uint64_t events = 10000;  // events after the boot/create/assign prologue
  std::size_t cpus = 1;
  /// One entry applies to every VM; otherwise one entry per VM.
  std::vector<VmProfile> profiles{VmProfile{}};
  double dma_rate = 0.01;
  double switch_rate = 0.05;
  /// P(guest points a spare vpage at a random frame and reads it).
  double attack_rate = 0.0;

  const VmProfile& profile(std::uint32_t vm_index) const {
    return profiles.size() == 1 ? profiles.front() : profiles.at(vm_index);
  }

  void validate(const Geometry& g) const {
    auto prob = [](double p, std::string_view what) {
      if (!(p >= 0.0 && p <= 1.0))
        throw SpecError(std::string(what) + " must be a probability in [0,1]");
    };
    prob(dma_rate, "dma_rate");
    prob(switch_rate, "switch_rate");
    prob(attack_rate, "attack_rate");
    if (cpus == 0) throw SpecError("cpus must be positive");
    if (vm_count > 0 && events == 0) throw SpecError("events must be positive");
    if (profiles.empty()) throw SpecError("at least one VM profile is required");
    if (profiles.size() != 1 && profiles.size() != vm_count)
      throw SpecError("need one profile or one per VM");
    if (static_cast<std::uint64_t>(vm_count) + 1 > g.total_segments())
      throw SpecError("more VMs than the geometry can host");
    for (const auto& p : profiles) {
      prob(p.churn, "churn");
      prob(p.locality, "locality");
      if (p.window == 0) throw SpecError("locality window must be positive");
      if (p.target_pages > g.total_pages())
        throw SpecError("target_pages " + std::to_string(p.target_pages) +
                        " exceeds physical memory of " + std::to_string(g.total_pages()) +
                        " pages");
    }
  }
};

/// Device slot owned by the n-th guest (1-based).
inline DmaRequest device_of(std::uint32_t vm) {
  const std::uint32_t i = vm - 1;
  return {i / 256, i % 32, (i / 32) % 8, 0, false};
}

/// Adversarial page-table entries live far above any allocated vpage.
inline constexpr std::uint64_t kSpareVpageBase = std::uint64_t{1} << 30;

inline Trace generate(const WorkloadSpec& spec, const Geometry& geom) {
  spec.validate(geom);
  Trace t;
  std::uint64_t seq = 0;
  t.push_back(TraceEvent::boot(seq++));
  if (spec.vm_count == 0) return t;
  for (std::uint32_t v = 1; v <= spec.vm_count; ++v) t.push_back(TraceEvent::create(seq++, 0, VmId{v}));
  for (std::uint32_t v = 1; v <= spec.vm_count; ++v) {
    const auto d = device_of(v);
    t.push_back(TraceEvent::assign(seq++, 0, d.bus, d.device, d.function, VmId{v}));
  }

  struct GuestState {
    std::vector<std::uint64_t> live;
    std::unordered_map<std::uint64_t, std::size_t> index;
    std::deque<std::uint64_t> recent;
    std::uint64_t next_vpage = 0;
    std::uint64_t next_spare = kSpareVpageBase;
  };
  std::vector<GuestState> guests(spec.vm_count + 1);
  std::vector<std::uint32_t> current(spec.cpus, 0);
  Xorshift64Star rng(spec.seed);
  const auto page = geom.page_size_bytes();
  const std::uint64_t end = seq + spec.events;

  auto drop = [](GuestState& g, std::uint64_t vpage) {
    const auto at = g.index.at(vpage);
    g.index[g.live.back()] = at;
    std::swap(g.live[at], g.live.back());
    g.live.pop_back();
    g.index.erase(vpage);
    std::erase(g.recent, vpage);
  };

  while (seq < end) {
    const auto cpu = static_cast<CpuIndex>(rng.below(spec.cpus));
    auto& cur = current[cpu];
    if (cur == 0) {
      cur = 1 + static_cast<std::uint32_t>(rng.below(spec.vm_count));
      t.push_back(TraceEvent::enter(seq++, cpu, VmId{cur}));
      continue;
    }
    const double r = rng.unit();
    if (r < spec.switch_rate / 2) {
      t.push_back(TraceEvent::exit(seq++, cpu));
      cur = 0;
      continue;
    }
    if (r < spec.switch_rate) {
      t.push_back(TraceEvent::pswitch(seq++, cpu, static_cast<std::uint32_t>(rng.below(4))));
      continue;
    }
    const VmId vm{cur};
    auto& g = guests[cur];
    const auto& prof = spec.profile(cur - 1);
    if (rng.chance(spec.dma_rate)) {
      auto req = device_of(cur);
      req.dva = rng.below(geom.total_pages());
      req.is_write = rng.chance(0.5);
      t.push_back(TraceEvent::dma_issue(seq++, cpu, req));
      continue;
    }
    if (rng.chance(spec.attack_rate) && end - seq >= 2) {
      const auto spare = g.next_spare++;
      t.push_back(TraceEvent::ptwrite(seq++, cpu, vm, spare, rng.below(geom.total_pages())));
      t.push_back(TraceEvent::read(seq++, cpu, spare * page + rng.below(page)));
      continue;
    }
    if (g.live.size() < prof.target_pages) {
      const auto vpage = g.next_vpage++;
      g.index[vpage] = g.live.size();
      g.live.push_back(vpage);
      t.push_back(TraceEvent::alloc(seq++, cpu, vm, vpage));
      continue;
    }
    if (!g.live.empty() && rng.chance(prof.churn)) {
      const auto vpage = g.live[rng.below(g.live.size())];
      drop(g, vpage);
      t.push_back(TraceEvent::free(seq++, cpu, vm, vpage));
      continue;
    }
    if (g.live.empty()) {
      t.push_back(TraceEvent::exit(seq++, cpu));
      cur = 0;
      continue;
    }
    const auto vpage = (!g.recent.empty() && rng.chance(prof.locality))
                           ? g.recent[rng.below(g.recent.size())]
                           : g.live[rng.below(g.live.size())];
    const auto vaddr = vpage * page + rng.below(page);
    t.push_back(rng.chance(0.3) ? TraceEvent::write(seq++, cpu, vaddr)
                                : TraceEvent::read(seq++, cpu, vaddr));
    std::erase(g.recent, vpage);
    g.recent.push_back(vpage);
    if (g.recent.size() > prof.window) g.recent.pop_front();
  }
  return t;
}

/// VM 1's device writes a page that belongs to VM 2. The target frame is
/// VM 2's under both the segment allocator and the hypervisor's frame pool:
/// frame 2P+1 (P = pages per segment) is the first data page of VM 2's slot
/// segment, and VM 2 allocates 2P+1 pages after VM 1 takes one.
inline Trace attack_cross_vm_dma(const Geometry& g) {
  if (g.pages_per_segment() < 2 || g.total_segments() < 6)
    throw SpecError("cross-VM DMA fixture needs >= 2 pages per segment and >= 6 segments");
  const auto p = g.pages_per_segment();
  Trace t;
  std::uint64_t s = 0;
  t.push_back(TraceEvent::boot(s++));
  t.push_back(TraceEvent::create(s++, 0, VmId{1}));
  t.push_back(TraceEvent::create(s++, 0, VmId{2}));
  t.push_back(TraceEvent::alloc(s++, 0, VmId{1}, 0));
  for (std::uint64_t v = 0; v < 2 * p + 1; ++v) t.push_back(TraceEvent::alloc(s++, 0, VmId{2}, v));
  t.push_back(TraceEvent::assign(s++, 0, 0, 1, 0, VmId{1}));
  t.push_back(TraceEvent::assign(s++, 0, 0, 2, 0, VmId{2}));
  t.push_back(TraceEvent::enter(s++, 0, VmId{1}));
  t.push_back(TraceEvent::dma_issue(s++, 0, {0, 1, 0, 2 * p + 1, true}));
  return t;
}

/// The hypervisor maps one of its own vpages onto VM 1's first data page
/// (frame P+1) and reads it.
inline Trace attack_malicious_hypervisor(const Geometry& g) {
  if (g.pages_per_segment() < 2 || g.total_segments() < 4)
    throw SpecError("malicious-hypervisor fixture needs >= 2 pages per segment and >= 4 segments");
  const auto p = g.pages_per_segment();
  Trace t;
  std::uint64_t s = 0;
  t.push_back(TraceEvent::boot(s++));
  t.push_back(TraceEvent::create(s++, 0, VmId{1}));
  for (std::uint64_t v = 0; v < p + 2; ++v) t.push_back(TraceEvent::alloc(s++, 0, VmId{1}, v));
  t.push_back(TraceEvent::ptwrite(s++, 0, kHypervisor, 0, p + 1));
  t.push_back(TraceEvent::read(s++, 0, 0));
  return t;
}

/// VM 1 grabs every page in memory and marks each one inaccessible to the
/// hypervisor and DMA; VM 2 then asks for one segment's worth of pages.
inline Trace attack_hyperwall_starvation(const Geometry& g) {
  if (g.total_segments() < 4)
    throw SpecError("starvation fixture needs >= 4 segments");
  const auto n = g.total_pages();
  Trace t;
  std::uint64_t s = 0;
  t.push_back(TraceEvent::boot(s++));
  t.push_back(TraceEvent::create(s++, 0, VmId{1}));
  t.push_back(TraceEvent::create(s++, 0, VmId{2}));
  for (std::uint64_t v = 0; v < n; ++v) t.push_back(TraceEvent::alloc(s++, 0, VmId{1}, v));
  for (std::uint64_t v = 0; v < n; ++v)
    t.push_back(TraceEvent::hwset(s++, 0, VmId{1}, v, HyperWallMode::NeitherHypervisorNorDma));
  for (std::uint64_t v = 0; v < g.pages_per_segment(); ++v)
    t.push_back(TraceEvent::alloc(s++, 0, VmId{2}, v));
  return t;
}

inline constexpr std::array<std::string_view, 3> kAttackNames = {
    "cross-vm-dma", "malicious-hypervisor", "hyperwall-starvation"};

inline Trace attack_by_name(std::string_view name, const Geometry& g) {
  if (name == "cross-vm-dma") return attack_cross_vm_dma(g);
  if (name == "malicious-hypervisor") return attack_malicious_hypervisor(g);
  if (name == "hyperwall-starvation") return attack_hyperwall_starvation(g);
  throw SpecError("unknown attack '" + std::string(name) +
                  "' (cross-vm-dma|malicious-hypervisor|hyperwall-starvation)");
}

}  // namespace asmi
