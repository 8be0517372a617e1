#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "asmi/promem.hpp"

using namespace asmi;

namespace {

// Quota by counting: the largest m with m * tot <= tseg, at least 1.
std::uint64_t quota_by_counting(std::uint64_t tseg, std::uint64_t tot) {
  if (tot == 0) return 0;
  std::uint64_t m = 0;
  while ((m + 1) * tot <= tseg) ++m;
  return m == 0 ? 1 : m;
}

ProMem booted(std::uint64_t tseg, std::uint64_t pps = 4, std::size_t cpus = 1) {
  auto pm = ProMem::boot(Geometry(4096, pps, tseg), cpus);
  pm.load_hypervisor();
  return pm;
}

}  // namespace

TEST(ProMemLifecycle, BootIsEmpty) {
  for (const std::uint64_t tseg : {8u, 2u}) {
    const auto pm = ProMem::boot(Geometry(4096, 4, tseg));
    EXPECT_TRUE(pm.mpt().empty());
    EXPECT_EQ(pm.segmax().tot, 0u);
    EXPECT_EQ(pm.segmax().mseg, 0u);
    EXPECT_EQ(pm.segmax().tseg, tseg);
    EXPECT_FALSE(pm.vmidr(0).has_value());
  }
}

TEST(ProMemLifecycle, LoadHypervisor) {
  auto pm = ProMem::boot(Geometry(4096, 4, 64));
  EXPECT_EQ(pm.load_hypervisor(), kHypervisor);
  EXPECT_EQ(pm.segmax().tot, 1u);
  EXPECT_EQ(pm.segmax().mseg, quota_by_counting(64, 1));
  ASSERT_EQ(pm.mpt().size(), 1u);
  EXPECT_EQ(pm.mpt()[0].vmid, kHypervisor);
  EXPECT_EQ(pm.vmidr(0), kHypervisor);
  EXPECT_THROW(pm.load_hypervisor(), LifecycleError);

  auto small = ProMem::boot(Geometry(4096, 4, 2));
  small.load_hypervisor();
  EXPECT_EQ(small.segmax().mseg, 2u);
}

TEST(ProMemLifecycle, CreateRecomputesQuota) {
  auto pm = booted(64);
  for (int i = 0; i < 3; ++i) pm.create_vm();
  EXPECT_EQ(pm.segmax().tot, 4u);
  EXPECT_EQ(pm.segmax().mseg, quota_by_counting(64, 4));
  EXPECT_EQ(pm.segmax().mseg, 16u);

  auto tiny = booted(4);
  for (int i = 0; i < 3; ++i) tiny.create_vm();
  EXPECT_EQ(tiny.segmax().mseg, 1u);
  EXPECT_THROW(tiny.create_vm(), CapacityError);
  EXPECT_EQ(tiny.segmax().tot, 4u);
}

TEST(ProMemLifecycle, CreateBeforeHypervisorFails) {
  auto pm = ProMem::boot(Geometry(4096, 4, 8));
  EXPECT_THROW(pm.create_vm(), LifecycleError);
}

TEST(ProMemLifecycle, IdsAreNeverReused) {
  auto pm = booted(8);
  const auto a = pm.create_vm();
  pm.destroy_vm(a);
  const auto b = pm.create_vm();
  EXPECT_EQ(raw(a), 1u);
  EXPECT_EQ(raw(b), 2u);
}

TEST(ProMemLifecycle, DestroyRecomputesAndFrees) {
  auto pm = booted(64);
  const auto v1 = pm.create_vm();
  pm.create_vm();
  pm.create_vm();
  pm.destroy_vm(v1);
  EXPECT_EQ(pm.segmax().tot, 3u);
  EXPECT_EQ(pm.segmax().mseg, quota_by_counting(64, 3));
  EXPECT_EQ(pm.segmax().mseg, 21u);
}

TEST(ProMemLifecycle, DestroyReturnsAllSegments) {
  auto pm = booted(16, 2);
  const auto v = pm.create_vm();
  // slot segment has one data page; 8 more pages need 4 more segments.
  for (int i = 0; i < 9; ++i) ASSERT_FALSE(pm.allocate_page(v).memory_full());
  ASSERT_EQ(pm.owned_segments(v), 5u);
  const auto before = pm.free_segments();
  pm.destroy_vm(v);
  EXPECT_EQ(pm.free_segments(), before + 5);
}

TEST(ProMemLifecycle, DestroyRejectsHypervisorRunningAndDead) {
  auto pm = booted(8);
  const auto v = pm.create_vm();
  pm.vm_entry(0, v);
  EXPECT_THROW(pm.destroy_vm(v), LifecycleError);
  EXPECT_THROW(pm.destroy_vm(kHypervisor), LifecycleError);
  pm.vm_exit(0);
  pm.destroy_vm(v);
  EXPECT_THROW(pm.destroy_vm(v), LifecycleError);
}

TEST(ProMemProtocol, ExitSavesAndEntryRestores) {
  auto pm = booted(8);
  pm.create_vm();
  pm.create_vm();
  const auto v3 = pm.create_vm();
  pm.vm_entry(0, v3);
  EXPECT_EQ(pm.vmidr(0), v3);
  pm.vm_exit(0);
  EXPECT_EQ(pm.vmidr(0), kHypervisor);
  EXPECT_EQ(pm.saved_vmid(v3), v3);
  pm.vm_entry(0, v3);
  EXPECT_EQ(pm.vmidr(0), v3);
}

TEST(ProMemProtocol, ProtocolErrors) {
  auto pm = booted(8);
  const auto v = pm.create_vm();
  EXPECT_THROW(pm.vm_exit(0), ProtocolError);
  pm.vm_entry(0, v);
  EXPECT_THROW(pm.vm_entry(0, v), ProtocolError);
  pm.vm_exit(0);
  pm.destroy_vm(v);
  EXPECT_THROW(pm.vm_entry(0, v), LifecycleError);
}

TEST(ProMemProtocol, EntryToSecondVmOnEachCpu) {
  auto pm = booted(8, 4, 2);
  const auto a = pm.create_vm();
  const auto b = pm.create_vm();
  pm.vm_entry(0, a);
  pm.vm_entry(1, b);
  EXPECT_EQ(pm.vmidr(0), a);
  EXPECT_EQ(pm.vmidr(1), b);
  pm.vm_exit(1);
  EXPECT_EQ(pm.vmidr(1), kHypervisor);
  EXPECT_EQ(pm.vmidr(0), a);
}

TEST(ProMemAllocation, OwnedSegmentFirst) {
  auto pm = booted(8);
  const auto v = pm.create_vm();
  const auto slot = *pm.slot_segment(v);
  const auto r = pm.allocate_page(v);
  ASSERT_TRUE(r.page);
  EXPECT_FALSE(r.claimed_segment);
  EXPECT_EQ(r.page->segment_index, slot);
  EXPECT_EQ(r.page->page_index, 1u);  // page 0 holds the save slot
  EXPECT_EQ(pm.allocate_page(v).page->page_index, 2u);
}

TEST(ProMemAllocation, LowestFreeSegmentClaimed) {
  // One page per segment: the slot fills the first segment, so every
  // allocation claims the lowest free segment and hands out its page 0.
  auto pm = booted(16, 1);
  const auto v = pm.create_vm();
  EXPECT_EQ(*pm.slot_segment(v), 1u);
  const auto r = pm.allocate_page(v);
  ASSERT_TRUE(r.page);
  EXPECT_TRUE(r.claimed_segment);
  EXPECT_EQ(r.page->segment_index, 2u);
  EXPECT_EQ(r.page->page_index, 0u);
  EXPECT_EQ(pm.owner_of(2), v);
}

TEST(ProMemAllocation, ReclaimFromOverQuotaOwner) {
  // tseg=4: hypervisor + A gives mseg=2; A fills three segments.
  auto pm = booted(4, 2);
  const auto a = pm.create_vm();
  for (int i = 0; i < 5; ++i) ASSERT_FALSE(pm.allocate_page(a).memory_full());
  ASSERT_EQ(pm.owned_segments(a), 3u);
  ASSERT_EQ(pm.free_segments(), 0u);
  // B's creation drops mseg to 1 and must take a segment from A.
  const auto b = pm.create_vm();
  EXPECT_EQ(pm.segmax().mseg, 1u);
  ASSERT_EQ(pm.ledger().count(FaultKind::Reclaim), 1u);
  const auto& rec = pm.ledger().records().back();
  EXPECT_EQ(rec.owner, a);
  EXPECT_EQ(rec.actor, b);
  EXPECT_EQ(rec.detail, 2u);  // excess = 3 - 1
  EXPECT_EQ(pm.owned_segments(a), 1u);
  EXPECT_EQ(pm.owned_segments(b), 1u);
  // B's next page fits in its slot segment; the one after claims A's
  // released segment.
  EXPECT_FALSE(pm.allocate_page(b).claimed_segment);
  const auto r = pm.allocate_page(b);
  ASSERT_TRUE(r.page);
  EXPECT_TRUE(r.claimed_segment);
  EXPECT_EQ(pm.owned_segments(b), 2u);
}

TEST(ProMemAllocation, ReclaimNoticeContents) {
  auto pm = booted(4, 2);
  const auto a = pm.create_vm();
  const auto b = pm.create_vm();  // mseg = 1
  // A: slot segment + the one free segment.
  for (int i = 0; i < 3; ++i) ASSERT_FALSE(pm.allocate_page(a).memory_full());
  ASSERT_EQ(pm.owned_segments(a), 2u);
  ASSERT_FALSE(pm.allocate_page(b).memory_full());  // B's slot segment page 1
  std::optional<ReclaimNotice> seen;
  pm.set_reclaim_listener([&](const ReclaimNotice& n) { seen = n; });
  const auto r = pm.allocate_page(b);
  ASSERT_TRUE(r.reclaim);
  EXPECT_EQ(*seen, *r.reclaim);
  EXPECT_EQ(r.reclaim->victim, a);
  EXPECT_EQ(r.reclaim->requester, b);
  EXPECT_EQ(r.reclaim->excess, 1u);
  EXPECT_EQ(r.reclaim->segments, std::vector<std::uint64_t>{3});
  EXPECT_EQ(r.reclaim->pages_swapped, 2u);
  EXPECT_EQ(r.page->segment_index, 3u);
}

TEST(ProMemAllocation, MemoryFullWhenEveryoneAtQuota) {
  auto pm = booted(4, 2);
  const auto a = pm.create_vm();
  const auto b = pm.create_vm();
  const auto c = pm.create_vm();  // tot=4, mseg=1, every segment is a slot
  (void)b;
  (void)c;
  ASSERT_FALSE(pm.allocate_page(a).memory_full());  // fills A's slot segment
  pm.stamp(42, 0);
  const auto r = pm.allocate_page(a);
  EXPECT_TRUE(r.memory_full());
  ASSERT_EQ(pm.ledger().count(FaultKind::MemoryFull), 1u);
  EXPECT_EQ(pm.ledger().records().back().seq, 42u);
  EXPECT_EQ(pm.ledger().records().back().actor, a);
}

TEST(ProMemAllocation, DeadOwnerRejected) {
  auto pm = booted(8);
  EXPECT_THROW(pm.allocate_page(VmId{9}), LifecycleError);
}

TEST(ProMemFree, LastPageReleasesSegment) {
  auto pm = booted(8, 2);
  const auto v = pm.create_vm();
  pm.allocate_page(v);                       // slot segment, page 1
  const auto r = pm.allocate_page(v);        // new segment, page 0
  ASSERT_TRUE(r.claimed_segment);
  const auto seg = r.page->segment_index;
  EXPECT_EQ(pm.free_page(v, *r.page), FreeResult::SegmentReleased);
  EXPECT_FALSE(pm.owner_of(seg).has_value());
  // The slot segment stays even when its last data page goes.
  EXPECT_EQ(pm.free_page(v, {*pm.slot_segment(v), 1, 0}), FreeResult::Freed);
  EXPECT_EQ(pm.owner_of(*pm.slot_segment(v)), v);
}

TEST(ProMemFree, ForeignDoubleAndSlot) {
  auto pm = booted(8);
  const auto a = pm.create_vm();
  const auto b = pm.create_vm();
  const auto pa = *pm.allocate_page(a).page;
  EXPECT_EQ(pm.free_page(b, pa), FreeResult::IsolationFault);
  EXPECT_EQ(pm.ledger().count(FaultKind::Isolation), 1u);
  EXPECT_TRUE(pm.page_allocated(pa));
  EXPECT_EQ(pm.free_page(a, pa), FreeResult::Freed);
  EXPECT_THROW(pm.free_page(a, pa), DoubleFreeError);
  EXPECT_THROW(pm.free_page(a, {*pm.slot_segment(a), 0, 0}), InvalidFreeError);
}

TEST(ProMemAccess, OwnerOnly) {
  auto pm = booted(16, 4, 1);
  for (int i = 0; i < 7; ++i) pm.create_vm();
  const VmId v3{3};
  const VmId v7{7};
  pm.vm_entry(0, v3);
  EXPECT_EQ(pm.check_access(0, {*pm.slot_segment(v3), 1, 0}), AccessResult::Allowed);
  EXPECT_EQ(pm.check_access(0, {*pm.slot_segment(v7), 1, 0}), AccessResult::IsolationFault);
  pm.vm_exit(0);
  // No hypervisor exemption.
  EXPECT_EQ(pm.check_access(0, {*pm.slot_segment(v3), 1, 0}), AccessResult::IsolationFault);
  const auto& rec = pm.ledger().records().back();
  EXPECT_EQ(rec.actor, kHypervisor);
  EXPECT_EQ(rec.owner, v3);
  EXPECT_EQ(rec.segment, pm.slot_segment(v3));
}

TEST(ProMemTranslate, SingleWalkSingleCheck) {
  auto pm = booted(8);
  const auto a = pm.create_vm();
  const auto b = pm.create_vm();
  const auto pa = *pm.allocate_page(a).page;
  const auto pb = *pm.allocate_page(b).page;
  GuestPageTable pt(a);
  pt.map(0, frame_of(pa, pm.geometry()));
  pt.map(1, frame_of(pb, pm.geometry()));  // adversarial entry
  pm.vm_entry(0, a);

  auto t = pm.translate(0, {0, 12}, pt);
  EXPECT_EQ(t.outcome, Outcome::Ok);
  EXPECT_EQ(t.address(pm.geometry()), (PhysicalAddress{pa.segment_index, pa.page_index, 12}));
  EXPECT_EQ(t.steps, (StepCount{1, 1, 0}));

  t = pm.translate(0, {5, 0}, pt);
  EXPECT_EQ(t.outcome, Outcome::PageFault);
  EXPECT_EQ(t.steps.walks, 1u);

  t = pm.translate(0, {1, 0}, pt);
  EXPECT_EQ(t.outcome, Outcome::IsolationFault);
  EXPECT_EQ(pm.ledger().records().back().owner, b);

  GuestPageTable other(b);
  EXPECT_THROW(pm.translate(0, {0, 0}, other), ProtocolError);
}

// Random lifecycle and allocation traffic; checks every property the
// allocator promises after each step.
TEST(ProMemProperties, RandomOperationSequences) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    const std::uint64_t tseg = 4 + rng() % 13;
    const std::uint64_t pps = 1 + rng() % 4;
    const std::size_t cpus = 1 + rng() % 3;
    auto pm = booted(tseg, pps, cpus);
    std::map<VmId, std::vector<PhysicalAddress>> held;
    std::vector<VmId> running(cpus, kHypervisor);
    held[kHypervisor];
    // Reclaims happen inside allocate_page and create_vm alike.
    pm.set_reclaim_listener([&](const ReclaimNotice& n) {
      for (auto& [id, pages] : held)
        std::erase_if(pages, [&](const PhysicalAddress& a) {
          return std::find(n.segments.begin(), n.segments.end(), a.segment_index) !=
                 n.segments.end();
        });
    });
    for (int step = 0; step < 3000; ++step) {
      const auto live = pm.live_owners();
      const auto pick = live[rng() % live.size()];
      switch (rng() % 8) {
        case 0:
          if (pm.segmax().tot < tseg) held[pm.create_vm()];
          break;
        case 1:
          if (pick != kHypervisor && std::find(running.begin(), running.end(), pick) == running.end()) {
            pm.destroy_vm(pick);
            held.erase(pick);
          }
          break;
        case 2: {
          const auto c = rng() % cpus;
          if (running[c] == kHypervisor && pick != kHypervisor) {
            pm.vm_entry(c, pick);
            running[c] = pick;
          } else if (running[c] != kHypervisor) {
            const auto was = running[c];
            pm.vm_exit(c);
            running[c] = kHypervisor;
            pm.vm_entry(c, was);  // round trip restores the identity
            ASSERT_EQ(pm.vmidr(c), was);
            pm.vm_exit(c);
          }
          break;
        }
        case 3:
        case 4:
        case 5: {
          const auto r = pm.allocate_page(pick);
          if (r.page) {
            // No silent grant.
            ASSERT_EQ(pm.owner_of(r.page->segment_index), pick);
            held[pick].push_back(*r.page);
          } else {
            // Quota floor: a refused owner already holds its share.
            ASSERT_GE(pm.owned_segments(pick), std::min<std::uint64_t>(pm.segmax().mseg, tseg));
          }
          break;
        }
        case 6: {
          auto& pages = held[pick];
          if (!pages.empty()) {
            const auto i = rng() % pages.size();
            ASSERT_NE(pm.free_page(pick, pages[i]), FreeResult::IsolationFault);
            pages.erase(pages.begin() + static_cast<long>(i));
          }
          break;
        }
        case 7: {
          const auto c = static_cast<CpuIndex>(rng() % cpus);
          const auto frame = rng() % (tseg * pps);
          const auto addr = address_of_frame(frame, pm.geometry());
          const bool allowed = pm.check_access(c, addr) == AccessResult::Allowed;
          ASSERT_EQ(allowed, pm.owner_of(addr.segment_index) == pm.vmidr(c));
          break;
        }
      }
      pm.check_invariants();
      ASSERT_EQ(pm.segmax().mseg, quota_by_counting(tseg, pm.segmax().tot));
      std::uint64_t owned = 0;
      std::set<std::uint64_t> segs;
      for (const auto id : pm.live_owners()) {
        owned += pm.owned_segments(id);
        for (const auto s : pm.segments_of(id)) ASSERT_TRUE(segs.insert(s).second);
      }
      ASSERT_EQ(owned + pm.free_segments(), tseg);
    }
  }
}
