#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "asmi/errors.hpp"
#include "asmi/geometry.hpp"

namespace asmi {

/// Per-page protection modes. Only four modes exist, so two bits encode
/// them; the mode set is what matters, not the bit layout.
enum class HyperWallMode : std::uint8_t {
  HypervisorOnly = 0,           // not assigned to any VM
  HypervisorAndDmaAllowed = 1,  // assigned; hypervisor and DMA may touch it
  HypervisorDenied = 2,         // assigned; hypervisor locked out
  NeitherHypervisorNorDma = 3,  // assigned; only the owner may touch it
};

enum class Requester : std::uint8_t { Hypervisor, Dma, OwnerVm, OtherVm };

inline std::string_view to_string(HyperWallMode m) {
  switch (m) {
    case HyperWallMode::HypervisorOnly: return "hypervisor-only";
    case HyperWallMode::HypervisorAndDmaAllowed: return "hypervisor-and-dma";
    case HyperWallMode::HypervisorDenied: return "hypervisor-denied";
    case HyperWallMode::NeitherHypervisorNorDma: return "neither";
  }
  return "?";
}

inline HyperWallMode parse_hyperwall_mode(std::string_view s) {
  if (s == "hypervisor-only") return HyperWallMode::HypervisorOnly;
  if (s == "hypervisor-and-dma") return HyperWallMode::HypervisorAndDmaAllowed;
  if (s == "hypervisor-denied") return HyperWallMode::HypervisorDenied;
  if (s == "neither") return HyperWallMode::NeitherHypervisorNorDma;
  throw ConfigError("unknown HyperWall mode '" + std::string(s) + "'");
}

constexpr bool hyperwall_check(HyperWallMode mode, Requester who) noexcept {
  switch (who) {
    case Requester::OtherVm:
      return false;
    case Requester::Hypervisor:
      return mode == HyperWallMode::HypervisorOnly ||
             mode == HyperWallMode::HypervisorAndDmaAllowed;
    case Requester::Dma:
      return mode == HyperWallMode::HypervisorAndDmaAllowed ||
             mode == HyperWallMode::HypervisorDenied;
    case Requester::OwnerVm:
      return mode != HyperWallMode::HypervisorOnly;
  }
  return false;
}

/// Whether the hypervisor may swap the page out. Pages it cannot read are
/// pinned from its point of view.
constexpr bool hyperwall_swappable(HyperWallMode mode) noexcept {
  return hyperwall_check(mode, Requester::Hypervisor);
}

/// Protection bits for every frame, packed two bits per frame.
class ProtectionBits {
 public:
  explicit ProtectionBits(std::uint64_t frames) : frames_(frames), bits_((frames + 3) / 4, 0) {}

  HyperWallMode get(FrameNumber f) const {
    check(f);
    return static_cast<HyperWallMode>((bits_[f / 4] >> ((f % 4) * 2)) & 0x3);
  }

  void set(FrameNumber f, HyperWallMode m) {
    check(f);
    const unsigned shift = (f % 4) * 2;
    bits_[f / 4] = static_cast<std::uint8_t>((bits_[f / 4] & ~(0x3u << shift)) |
                                             (static_cast<unsigned>(m) << shift));
  }

  std::uint64_t frames() const noexcept { return frames_; }

 private:
  void check(FrameNumber f) const {
    if (f >= frames_) throw RangeError("frame " + std::to_string(f) + " out of range");
  }

  std::uint64_t frames_;
  std::vector<std::uint8_t> bits_;
};

}  // namespace asmi
