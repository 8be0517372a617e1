#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "asmi/workload.hpp"

using namespace asmi;

namespace {

// Straight transcription of the generator's PRNG, kept apart from the
// library so a change to either shows up here.
struct RefXorshift {
  std::uint64_t s;
  explicit RefXorshift(std::uint64_t seed) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    s = z ^ (z >> 31);
    if (s == 0) s = 0x9E3779B97F4A7C15ULL;
  }
  std::uint64_t next() {
    s ^= s >> 12;
    s ^= s << 25;
    s ^= s >> 27;
    return s * 0x2545F4914F6CDD1DULL;
  }
};

WorkloadSpec small_spec(std::uint64_t seed = 1) {
  WorkloadSpec s;
  s.seed = seed;
  s.events = 2000;
  s.cpus = 2;
  s.profiles = {VmProfile{24, 0.05, 0.8, 8}};
  s.attack_rate = 0.02;
  return s;
}

}  // namespace

TEST(Prng, MatchesTranscription) {
  for (const std::uint64_t seed : {0ull, 1ull, 42ull, 0xFFFFFFFFFFFFFFFFull}) {
    Xorshift64Star a(seed);
    RefXorshift b(seed);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next(), b.next());
  }
}

TEST(Prng, KnownFirstOutputs) {
  // splitmix64(0) is the published first output of SplitMix64 seeded with 0.
  EXPECT_EQ(splitmix64(0), 0xE220A8397B1DCDAFULL);
  Xorshift64Star a(7);
  RefXorshift b(7);
  EXPECT_EQ(a.next(), b.next());
}

TEST(Prng, BelowAndUnitRanges) {
  Xorshift64Star r(3);
  std::map<std::uint64_t, int> hist;
  for (int i = 0; i < 60000; ++i) {
    const auto x = r.below(6);
    ASSERT_LT(x, 6u);
    ++hist[x];
    const auto u = r.unit();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
  for (const auto& [k, n] : hist) EXPECT_NEAR(n, 10000, 500) << k;
  EXPECT_EQ(r.below(1), 0u);
}

TEST(Workload, SameSeedSameTrace) {
  const Geometry g(4096, 8, 16);
  EXPECT_EQ(generate(small_spec(5), g), generate(small_spec(5), g));
  EXPECT_NE(generate(small_spec(5), g), generate(small_spec(6), g));
}

TEST(Workload, PrologueAndEventCount) {
  const Geometry g(4096, 8, 16);
  const auto s = small_spec();
  const auto t = generate(s, g);
  ASSERT_EQ(t.size(), 1 + 2 * s.vm_count + s.events);
  EXPECT_EQ(t[0].kind, EventKind::Boot);
  for (std::uint32_t v = 1; v <= s.vm_count; ++v) {
    EXPECT_EQ(t[v], TraceEvent::create(v, 0, VmId{v}));
    const auto& a = t[s.vm_count + v];
    EXPECT_EQ(a.kind, EventKind::DomainAssign);
    EXPECT_EQ(a.vm, VmId{v});
  }
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i].seq, i);
}

TEST(Workload, NoVmsGivesBootOnly) {
  auto s = small_spec();
  s.vm_count = 0;
  s.events = 0;
  const auto t = generate(s, Geometry(4096, 8, 16));
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].kind, EventKind::Boot);
}

TEST(Workload, GeneratedTracesValidate) {
  for (const auto& g : {Geometry(4096, 8, 16), Geometry(256, 2, 8), Geometry(4096, 4, 6)}) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      auto s = small_spec(seed);
      s.dma_rate = 0.05;
      s.switch_rate = 0.2;
      s.profiles[0].target_pages = g.total_pages() / 2;
      EXPECT_NO_THROW(validate_trace(generate(s, g), {s.cpus, g})) << seed;
    }
  }
}

TEST(Workload, EveryGuestActivityKindAppears) {
  const auto t = generate(small_spec(), Geometry(4096, 8, 16));
  std::map<EventKind, int> n;
  for (const auto& e : t) ++n[e.kind];
  for (const auto k : {EventKind::Enter, EventKind::Exit, EventKind::AllocPage, EventKind::FreePage,
                       EventKind::Read, EventKind::Write, EventKind::GuestPtWrite,
                       EventKind::DmaIssue, EventKind::ProcessSwitch})
    EXPECT_GT(n[k], 0) << to_string(k);
  EXPECT_EQ(n[EventKind::RealMapWrite], 0);
}

TEST(Workload, SaturatingDemandExceedsQuota) {
  const Geometry g(4096, 8, 64);
  WorkloadSpec s;
  s.events = 20000;
  s.profiles = {VmProfile{200, 0.02, 0.8, 8}};
  const auto t = generate(s, g);
  std::map<VmId, std::uint64_t> allocs;
  for (const auto& e : t)
    if (e.kind == EventKind::AllocPage) ++allocs[e.vm];
  const std::uint64_t mseg = 64 / (s.vm_count + 1);
  for (std::uint32_t v = 1; v <= s.vm_count; ++v)
    EXPECT_GT(allocs[VmId{v}], mseg * g.pages_per_segment()) << v;
}

TEST(Workload, PerVmTargets) {
  WorkloadSpec s;
  s.vm_count = 2;
  s.events = 6000;
  s.profiles = {VmProfile{2, 0, 0.8, 8}, VmProfile{50, 0, 0.8, 8}};
  const auto t = generate(s, Geometry(4096, 8, 16));
  std::map<VmId, std::uint64_t> allocs;
  for (const auto& e : t)
    if (e.kind == EventKind::AllocPage) ++allocs[e.vm];
  EXPECT_EQ(allocs[VmId{1}], 2u);
  EXPECT_EQ(allocs[VmId{2}], 50u);
}

TEST(Workload, SpecErrors) {
  const Geometry g(4096, 8, 16);
  auto bad = [&](auto mutate) {
    auto s = small_spec();
    mutate(s);
    EXPECT_THROW(generate(s, g), SpecError);
  };
  bad([](WorkloadSpec& s) { s.dma_rate = 1.5; });
  bad([](WorkloadSpec& s) { s.switch_rate = -0.1; });
  bad([](WorkloadSpec& s) { s.attack_rate = std::nan(""); });
  bad([](WorkloadSpec& s) { s.cpus = 0; });
  bad([](WorkloadSpec& s) { s.events = 0; });
  bad([](WorkloadSpec& s) { s.vm_count = 16; });
  bad([](WorkloadSpec& s) { s.profiles = {VmProfile{}, VmProfile{}}; });
  bad([](WorkloadSpec& s) { s.profiles = {}; });
  bad([](WorkloadSpec& s) { s.profiles[0].target_pages = 129; });
  bad([](WorkloadSpec& s) { s.profiles[0].churn = 2; });
  bad([](WorkloadSpec& s) { s.profiles[0].window = 0; });
  auto ok = small_spec();
  ok.vm_count = 15;
  ok.profiles[0].target_pages = 128;
  EXPECT_NO_THROW(generate(ok, g));
}

TEST(Attacks, GeometryTooSmall) {
  EXPECT_THROW(attack_cross_vm_dma(Geometry(4096, 1, 8)), SpecError);
  EXPECT_THROW(attack_cross_vm_dma(Geometry(4096, 4, 5)), SpecError);
  EXPECT_THROW(attack_malicious_hypervisor(Geometry(4096, 1, 8)), SpecError);
  EXPECT_THROW(attack_malicious_hypervisor(Geometry(4096, 4, 3)), SpecError);
  EXPECT_THROW(attack_hyperwall_starvation(Geometry(4096, 4, 3)), SpecError);
  EXPECT_THROW(attack_by_name("rowhammer", Geometry(4096, 4, 8)), SpecError);
}

TEST(Attacks, ByNameAndValid) {
  const Geometry g(4096, 4, 8);
  for (const auto name : kAttackNames) {
    const auto t = attack_by_name(name, g);
    EXPECT_NO_THROW(validate_trace(t, {1, g})) << name;
  }
  EXPECT_EQ(attack_by_name("cross-vm-dma", g), attack_cross_vm_dma(g));
}

TEST(Attacks, DeviceSlots) {
  EXPECT_EQ(device_of(1).bus, 0u);
  EXPECT_EQ(device_of(1).device, 0u);
  EXPECT_EQ(device_of(33).device, 0u);
  EXPECT_EQ(device_of(33).function, 1u);
  EXPECT_EQ(device_of(257).bus, 1u);
}
