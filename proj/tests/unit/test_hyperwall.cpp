#include <gtest/gtest.h>

#include "asmi/hyperwall.hpp"

using namespace asmi;

// The four-mode listing, written out row by row:
//   not assigned to any VM              -> hypervisor only
//   assigned, hypervisor + DMA allowed  -> owner, hypervisor, DMA
//   assigned, hypervisor access denied  -> owner, DMA
//   assigned, neither hypervisor nor DMA-> owner only
// Another VM is never allowed.
TEST(HyperWall, DecisionTableIsTotal) {
  struct Row {
    HyperWallMode mode;
    bool hyp, dma, owner, other;
  };
  const Row rows[] = {
      {HyperWallMode::HypervisorOnly, true, false, false, false},
      {HyperWallMode::HypervisorAndDmaAllowed, true, true, true, false},
      {HyperWallMode::HypervisorDenied, false, true, true, false},
      {HyperWallMode::NeitherHypervisorNorDma, false, false, true, false},
  };
  for (const auto& r : rows) {
    EXPECT_EQ(hyperwall_check(r.mode, Requester::Hypervisor), r.hyp) << to_string(r.mode);
    EXPECT_EQ(hyperwall_check(r.mode, Requester::Dma), r.dma) << to_string(r.mode);
    EXPECT_EQ(hyperwall_check(r.mode, Requester::OwnerVm), r.owner) << to_string(r.mode);
    EXPECT_EQ(hyperwall_check(r.mode, Requester::OtherVm), r.other) << to_string(r.mode);
  }
}

TEST(HyperWall, NamedExamples) {
  EXPECT_FALSE(hyperwall_check(HyperWallMode::NeitherHypervisorNorDma, Requester::Hypervisor));
  EXPECT_TRUE(hyperwall_check(HyperWallMode::HypervisorOnly, Requester::Hypervisor));
  EXPECT_FALSE(hyperwall_check(HyperWallMode::HypervisorDenied, Requester::OtherVm));
}

TEST(HyperWall, SwappableFollowsHypervisorAccess) {
  EXPECT_TRUE(hyperwall_swappable(HyperWallMode::HypervisorAndDmaAllowed));
  EXPECT_FALSE(hyperwall_swappable(HyperWallMode::HypervisorDenied));
  EXPECT_FALSE(hyperwall_swappable(HyperWallMode::NeitherHypervisorNorDma));
}

TEST(HyperWall, ModeNames) {
  for (const auto m : {HyperWallMode::HypervisorOnly, HyperWallMode::HypervisorAndDmaAllowed,
                       HyperWallMode::HypervisorDenied, HyperWallMode::NeitherHypervisorNorDma})
    EXPECT_EQ(parse_hyperwall_mode(to_string(m)), m);
  EXPECT_THROW(parse_hyperwall_mode("owner-only"), ConfigError);
}

TEST(ProtectionBits, TwoBitsPerFrame) {
  ProtectionBits bits(9);
  for (FrameNumber f = 0; f < 9; ++f) EXPECT_EQ(bits.get(f), HyperWallMode::HypervisorOnly);
  bits.set(4, HyperWallMode::NeitherHypervisorNorDma);
  bits.set(5, HyperWallMode::HypervisorDenied);
  bits.set(8, HyperWallMode::HypervisorAndDmaAllowed);
  EXPECT_EQ(bits.get(3), HyperWallMode::HypervisorOnly);
  EXPECT_EQ(bits.get(4), HyperWallMode::NeitherHypervisorNorDma);
  EXPECT_EQ(bits.get(5), HyperWallMode::HypervisorDenied);
  EXPECT_EQ(bits.get(8), HyperWallMode::HypervisorAndDmaAllowed);
  EXPECT_THROW(bits.get(9), RangeError);
}
