#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace jointstereo {

// Derives an independent 64-bit seed for a named sub-stream ("data", "noise",
// "init", ...) of a run seed, optionally indexed (phase, epoch, step, ...).
// Stable across platforms and library versions.
uint64_t derive_seed(uint64_t run_seed, std::string_view stream,
                     std::initializer_list<uint64_t> indices = {});

}  // namespace jointstereo
