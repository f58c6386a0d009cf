#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace treecls {

// Deterministic RNG. All sampling goes through the helpers below instead of
// std::uniform_int_distribution / std::shuffle, whose outputs are
// implementation-defined; mt19937_64 itself is pinned by the standard.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next() { return engine_(); }

  // Uniform in [0, n). Modulo bias is irrelevant at the n we use (< 2^32).
  uint64_t below(uint64_t n) { return engine_() % n; }

  // Uniform double in [0, 1) with 53 bits.
  double real() { return (engine_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; two draws per sample keeps the stream
  // position independent of any caching.
  double normal() {
    double u1 = 0.0;
    while (u1 == 0.0) u1 = real();
    double u2 = real();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[below(v.size())];
  }

 private:
  std::mt19937_64 engine_;
};

// Seed mixing for per-item derived seeds (dataset seed x question id).
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// FNV-1a, used for pipeline content hashes.
uint64_t fnv1a64(const std::string& bytes);
std::string hash_hex(const std::string& bytes);

std::vector<std::string> split_whitespace(const std::string& text);
std::string join_tokens(const std::vector<std::string>& tokens);

std::string read_text_file(const std::string& path);       // throws IoError
void write_text_file(const std::string& path, const std::string& content);
bool file_exists(const std::string& path);
std::vector<std::string> read_lines(const std::string& path);

}  // namespace treecls
