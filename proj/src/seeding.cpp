#include "jointstereo/seeding.hpp"

namespace jointstereo {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

uint64_t derive_seed(uint64_t run_seed, std::string_view stream,
                     std::initializer_list<uint64_t> indices) {
  // FNV-1a over the stream name, then mixed with the seed and each index.
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  uint64_t state = splitmix64(run_seed ^ splitmix64(h));
  for (uint64_t index : indices) state = splitmix64(state ^ splitmix64(index + 1));
  return state;
}

}  // namespace jointstereo
