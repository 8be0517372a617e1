#pragma once

#include <bit>
#include <compare>
#include <cstdint>
#include <limits>
#include <string>

#include "asmi/errors.hpp"

namespace asmi {

/// Owner identity. Zero is the hypervisor; guests count up from one and an
/// id is never handed out twice in one run.
enum class VmId : std::uint32_t {};

inline constexpr VmId kHypervisor{0};

constexpr std::uint32_t raw(VmId id) noexcept { return static_cast<std::uint32_t>(id); }

inline std::string to_string(VmId id) { return std::to_string(raw(id)); }

using CpuIndex = std::uint32_t;

/// Flat physical page number: segment_index * pages_per_segment + page_index.
using FrameNumber = std::uint64_t;

/// Shape of simulated physical memory. Memory is split into total_segments
/// equal segments of pages_per_segment pages each.
class Geometry {
 public:
  static constexpr std::uint64_t kDefaultPageSize = 4096;
  static constexpr std::uint64_t kDefaultPagesPerSegment = 512;
  static constexpr std::uint64_t kDefaultTotalSegments = 64;

  Geometry() : Geometry(kDefaultPageSize, kDefaultPagesPerSegment, kDefaultTotalSegments) {}

  Geometry(std::uint64_t page_size_bytes, std::uint64_t pages_per_segment,
           std::uint64_t total_segments)
      : page_size_(page_size_bytes), pages_per_segment_(pages_per_segment),
        total_segments_(total_segments) {
    if (page_size_bytes < 256 || !std::has_single_bit(page_size_bytes))
      throw GeometryError("page size must be a power of two >= 256, got " +
                          std::to_string(page_size_bytes));
    if (pages_per_segment == 0)
      throw GeometryError("pages_per_segment must be positive");
    if (total_segments < 2)
      throw GeometryError("total_segments must be >= 2 (hypervisor plus one VM)");
    constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
    if (pages_per_segment > kMax / total_segments ||
        pages_per_segment * total_segments > kMax / page_size_bytes)
      throw GeometryError("physical memory size overflows 64 bits");
  }

  std::uint64_t page_size_bytes() const noexcept { return page_size_; }
  std::uint64_t pages_per_segment() const noexcept { return pages_per_segment_; }
  std::uint64_t total_segments() const noexcept { return total_segments_; }
  std::uint64_t total_pages() const noexcept { return pages_per_segment_ * total_segments_; }
  std::uint64_t total_bytes() const noexcept { return total_pages() * page_size_; }
  std::uint64_t segment_bytes() const noexcept { return pages_per_segment_ * page_size_; }

  unsigned offset_bits() const noexcept { return std::countr_zero(page_size_); }
  unsigned page_bits() const noexcept { return bits_to_index(pages_per_segment_); }
  unsigned segment_bits() const noexcept { return bits_to_index(total_segments_); }

  bool operator==(const Geometry&) const = default;

 private:
  static unsigned bits_to_index(std::uint64_t count) noexcept {
    return count <= 1 ? 0u : static_cast<unsigned>(std::bit_width(count - 1));
  }

  std::uint64_t page_size_;
  std::uint64_t pages_per_segment_;
  std::uint64_t total_segments_;
};

struct PhysicalAddress {
  std::uint64_t segment_index = 0;
  std::uint64_t page_index = 0;
  std::uint64_t offset = 0;

  auto operator<=>(const PhysicalAddress&) const = default;

  bool valid(const Geometry& g) const noexcept {
    return segment_index < g.total_segments() && page_index < g.pages_per_segment() &&
           offset < g.page_size_bytes();
  }
};

struct VirtualAddress {
  std::uint64_t vpage = 0;
  std::uint64_t offset = 0;

  auto operator<=>(const VirtualAddress&) const = default;
};

struct PseudoPhysicalAddress {
  std::uint64_t ppage = 0;
  std::uint64_t offset = 0;

  auto operator<=>(const PseudoPhysicalAddress&) const = default;
};

inline std::uint64_t encode_flat(const PhysicalAddress& a, const Geometry& g) {
  if (!a.valid(g))
    throw GeometryError("physical address out of bounds: seg " + std::to_string(a.segment_index) +
                        " page " + std::to_string(a.page_index) + " off " +
                        std::to_string(a.offset));
  return (a.segment_index * g.pages_per_segment() + a.page_index) * g.page_size_bytes() + a.offset;
}

inline PhysicalAddress decode_flat(std::uint64_t flat, const Geometry& g) {
  if (flat >= g.total_bytes())
    throw GeometryError("flat address " + std::to_string(flat) + " beyond physical memory");
  const std::uint64_t frame = flat / g.page_size_bytes();
  return {frame / g.pages_per_segment(), frame % g.pages_per_segment(),
          flat % g.page_size_bytes()};
}

inline FrameNumber frame_of(const PhysicalAddress& a, const Geometry& g) noexcept {
  return a.segment_index * g.pages_per_segment() + a.page_index;
}

inline PhysicalAddress address_of_frame(FrameNumber frame, const Geometry& g,
                                        std::uint64_t offset = 0) {
  if (frame >= g.total_pages())
    throw GeometryError("frame " + std::to_string(frame) + " beyond physical memory");
  return {frame / g.pages_per_segment(), frame % g.pages_per_segment(), offset};
}

inline VirtualAddress split_virtual(std::uint64_t vaddr, const Geometry& g) noexcept {
  return {vaddr / g.page_size_bytes(), vaddr % g.page_size_bytes()};
}

}  // namespace asmi
