#include <gtest/gtest.h>

#include <random>

#include "asmi/page_tables.hpp"

using namespace asmi;

TEST(NestedTranslate, BothLevelsMapped) {
  GuestPageTable pt(VmId{1});
  RealMapTable rm(VmId{1});
  pt.map(3, 7);
  rm.map(7, 42);
  const auto t = nested_translate({3, 9}, pt, rm);
  EXPECT_EQ(t.outcome, Outcome::Ok);
  EXPECT_EQ(t.frame, 42u);
  EXPECT_EQ(t.offset, 9u);
  EXPECT_EQ(t.steps.walks, 2u);
}

TEST(NestedTranslate, GuestMissStopsAfterOneWalk) {
  GuestPageTable pt(VmId{1});
  RealMapTable rm(VmId{1});
  const auto t = nested_translate({3, 0}, pt, rm);
  EXPECT_EQ(t.outcome, Outcome::PageFault);
  EXPECT_EQ(t.steps.walks, 1u);
}

TEST(NestedTranslate, RealMapMissAfterTwoWalks) {
  GuestPageTable pt(VmId{1});
  RealMapTable rm(VmId{1});
  pt.map(3, 7);
  const auto t = nested_translate({3, 0}, pt, rm);
  EXPECT_EQ(t.outcome, Outcome::PageFault);
  EXPECT_EQ(t.steps.walks, 2u);
}

TEST(ShadowTranslate, OneWalkAndPageFault) {
  ShadowPageTable sh(VmId{1});
  sh.map(1, 5);
  auto t = shadow_translate({1, 0}, sh);
  EXPECT_EQ(t.outcome, Outcome::Ok);
  EXPECT_EQ(t.frame, 5u);
  EXPECT_EQ(t.steps.walks, 1u);
  t = shadow_translate({2, 0}, sh);
  EXPECT_EQ(t.outcome, Outcome::PageFault);
}

namespace {

void expect_coherent(const GuestPageTable& pt, const RealMapTable& rm, const ShadowPageTable& sh,
                     std::uint64_t vpages) {
  for (std::uint64_t v = 0; v < vpages; ++v) {
    const auto n = nested_translate({v, 0}, pt, rm);
    const auto s = shadow_translate({v, 0}, sh);
    ASSERT_EQ(n.outcome, s.outcome) << "vpage " << v;
    if (n.ok()) {
      ASSERT_EQ(n.frame, s.frame) << "vpage " << v;
    }
  }
}

}  // namespace

// Every guest table over 3 vpages x {unmapped, 3 ppages} and every real map
// over 3 ppages x {unmapped, 2 frames}.
TEST(ShadowCoherence, ExhaustiveTinyTables) {
  int combos = 0;
  for (int g = 0; g < 64; ++g) {
    for (int r = 0; r < 27; ++r) {
      GuestPageTable pt(VmId{1});
      RealMapTable rm(VmId{1});
      for (int v = 0; v < 3; ++v) {
        const int target = (g >> (2 * v)) & 3;
        if (target) pt.map(v, target - 1);
      }
      int rr = r;
      for (int p = 0; p < 3; ++p, rr /= 3)
        if (rr % 3) rm.map(p, rr % 3 - 1);
      ShadowPageTable sh(VmId{1});
      EXPECT_EQ(shadow_rebuild(sh, pt, rm), pt.size());
      expect_coherent(pt, rm, sh, 4);
      ++combos;
    }
  }
  EXPECT_EQ(combos, 64 * 27);
}

TEST(ShadowCoherence, IncrementalUpdatesTrackNested) {
  std::mt19937_64 rng(5);
  GuestPageTable pt(VmId{1});
  RealMapTable rm(VmId{1});
  ShadowPageTable sh(VmId{1});
  for (int step = 0; step < 5000; ++step) {
    const auto a = rng() % 16;
    const auto b = rng() % 16;
    switch (rng() % 4) {
      case 0:
        pt.map(a, b);
        shadow_update(sh, pt, rm, a);
        break;
      case 1:
        pt.unmap(a);
        shadow_update(sh, pt, rm, a);
        break;
      case 2:
        rm.map(a, 100 + b);
        shadow_update_ppage(sh, pt, rm, a);
        break;
      case 3:
        rm.unmap(a);
        shadow_update_ppage(sh, pt, rm, a);
        break;
    }
    expect_coherent(pt, rm, sh, 16);
    if (HasFatalFailure()) return;
  }
}

TEST(ShadowCoherence, UpdateReflectsNewMapping) {
  GuestPageTable pt(VmId{1});
  RealMapTable rm(VmId{1});
  ShadowPageTable sh(VmId{1});
  rm.map(0, 10);
  rm.map(1, 11);
  pt.map(4, 0);
  shadow_update(sh, pt, rm, 4);
  EXPECT_EQ(shadow_translate({4, 0}, sh).frame, 10u);
  pt.map(4, 1);
  EXPECT_EQ(shadow_update(sh, pt, rm, 4), 1u);
  EXPECT_EQ(shadow_translate({4, 0}, sh).frame, 11u);
}
