// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moemarket/moe_model.hpp"
#include "moemarket/rng.hpp"

namespace moemarket {

struct Domain {
  std::string name;
  std::string corpus;
  std::string source;  // file path or generator description
};

// Shared byte-level vocabulary over every domain of a run, sorted by code point.
class Vocab {
 public:
  Vocab() = default;
  static Vocab build(std::span<const Domain> domains);

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbols() const { return symbols_; }
  std::vector<std::size_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::size_t> ids) const;

 private:
  std::string symbols_;
  std::array<int, 256> index_{};
};

struct DomainShift {
  long step = 0;
  std::string domain;
};

class ShiftSchedule {
 public:
  ShiftSchedule() = default;
  ShiftSchedule(std::string initial, std::vector<DomainShift> shifts);

  const std::string& initial() const { return initial_; }
  const std::vector<DomainShift>& shifts() const { return shifts_; }

  // Piecewise constant; a shift applies at its own step.
  const std::string& active(long step) const;
  // Throws unless steps strictly increase and every name is in `names`.
  void validate(std::span<const std::string> names) const;

 private:
  std::string initial_;
  std::vector<DomainShift> shifts_;
};

const std::string& active_domain(long step, const ShiftSchedule& schedule);

// Encoded domain split into a training stream and a held-out tail.
struct EncodedDomain {
  std::string name;
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};

// Holds out the last `heldout_fraction` of the corpus.
EncodedDomain encode_domain(const Domain& d, const Vocab& vocab, std::size_t context_len,
                            double heldout_fraction = 0.1);

// batch_size random windows of context_len (+1 for the shifted targets).
Batch sample_batch(std::span<const std::size_t> tokens, Rng& rng, std::size_t context_len,
                   std::size_t batch_size);

enum class SyntheticKind { ProseLike, CodeLike };
std::string to_string(SyntheticKind k);
SyntheticKind parse_synthetic_kind(const std::string& s);

inline constexpr std::size_t kMinSyntheticLength = 10000;

Domain generate_synthetic_domain(SyntheticKind kind, std::uint64_t seed, std::size_t length,
                                 std::string name = {});

// Total-variation distance between the byte unigram distributions of a and b.
double unigram_tv_distance(std::string_view a, std::string_view b);

Domain load_domain_file(const std::string& name, const std::string& path);

}  // namespace moemarket
