#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>

#include "asmi/errors.hpp"

namespace asmi {

using Cycles = std::uint64_t;

constexpr Cycles saturating_add(Cycles a, Cycles b) noexcept {
  return a > std::numeric_limits<Cycles>::max() - b ? std::numeric_limits<Cycles>::max() : a + b;
}

constexpr Cycles saturating_mul(Cycles a, Cycles b) noexcept {
  if (a == 0 || b == 0) return 0;
  return a > std::numeric_limits<Cycles>::max() / b ? std::numeric_limits<Cycles>::max() : a * b;
}

/// Abstract cycle charges. Totals are additive and saturate instead of
/// wrapping; nothing here models pipeline timing.
struct CostModel {
  Cycles tlb_hit = 1;
  Cycles pt_walk_level = 25;
  Cycles mpt_check = 5;
  Cycles tlb_flush = 200;
  Cycles swap_page = 5000;
  Cycles context_switch = 300;
  Cycles programmed_io_word = 50;
  Cycles dma_setup = 100;

  bool operator==(const CostModel&) const = default;

  static constexpr std::array<std::string_view, 8> kKeys = {
      "tlb_hit",        "pt_walk_level",      "mpt_check",  "tlb_flush",
      "swap_page",      "context_switch",     "programmed_io_word", "dma_setup"};

  Cycles& field(std::string_view key) {
    if (key == "tlb_hit") return tlb_hit;
    if (key == "pt_walk_level") return pt_walk_level;
    if (key == "mpt_check") return mpt_check;
    if (key == "tlb_flush") return tlb_flush;
    if (key == "swap_page") return swap_page;
    if (key == "context_switch") return context_switch;
    if (key == "programmed_io_word") return programmed_io_word;
    if (key == "dma_setup") return dma_setup;
    throw ConfigError("unknown cost key '" + std::string(key) + "'");
  }

  Cycles get(std::string_view key) const { return const_cast<CostModel*>(this)->field(key); }
  void set(std::string_view key, Cycles value) { field(key) = value; }
};

}  // namespace asmi
