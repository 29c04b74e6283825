#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cmco::nn {

// Reproducible random stream keyed by (seed, stream_id).
//
// The engine is std::mt19937_64 seeded through std::seed_seq, both of which
// the standard pins down exactly. Variates are produced here rather than with
// <random> distributions, whose algorithms differ between standard libraries,
// so sequences are identical on every conforming toolchain.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  // Stream id built from several integer keys (epoch, batch, row, ...).
  static std::uint64_t compose(std::initializer_list<std::uint64_t> keys);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  // Standard normal via Box-Muller.
  double normal();

  // Child stream whose seed material is drawn from this stream, so repeated
  // calls give fresh children while the whole tree stays reproducible.
  RngStream split();

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace cmco::nn
