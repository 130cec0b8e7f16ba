// SPDX-License-Identifier: Apache-2.0
#include "moemarket/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "moemarket/errors.hpp"

namespace moemarket {

Vocab Vocab::build(std::span<const Domain> domains) {
  if (domains.empty()) throw ConfigError("vocabulary needs at least one domain");
  std::array<bool, 256> seen{};
  for (const Domain& d : domains) {
    if (d.corpus.empty()) throw ConfigError("domain '" + d.name + "' has an empty corpus");
    for (unsigned char c : d.corpus) seen[c] = true;
  }
  Vocab v;
  v.index_.fill(-1);
  for (int c = 0; c < 256; ++c) {
    if (!seen[static_cast<std::size_t>(c)]) continue;
    v.index_[static_cast<std::size_t>(c)] = static_cast<int>(v.symbols_.size());
    v.symbols_.push_back(static_cast<char>(c));
  }
  return v;
}

std::vector<std::size_t> Vocab::encode(std::string_view text) const {
  std::vector<std::size_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) {
    const int id = index_[c];
    if (id < 0) throw ConfigError("character code " + std::to_string(c) + " is not in the vocabulary");
    out.push_back(static_cast<std::size_t>(id));
  }
  return out;
}

std::string Vocab::decode(std::span<const std::size_t> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    if (id >= symbols_.size()) throw ConfigError("token " + std::to_string(id) + " outside vocabulary");
    out.push_back(symbols_[id]);
  }
  return out;
}

// ---------------------------------------------------------------------------

ShiftSchedule::ShiftSchedule(std::string initial, std::vector<DomainShift> shifts)
    : initial_(std::move(initial)), shifts_(std::move(shifts)) {}

const std::string& ShiftSchedule::active(long step) const {
  const std::string* cur = &initial_;
  for (const DomainShift& s : shifts_) {
    if (step < s.step) break;
    cur = &s.domain;
  }
  return *cur;
}

void ShiftSchedule::validate(std::span<const std::string> names) const {
  auto known = [&](const std::string& n) { return std::find(names.begin(), names.end(), n) != names.end(); };
  if (!known(initial_)) throw ConfigError("initial domain '" + initial_ + "' is not loaded");
  long prev = 0;
  for (std::size_t i = 0; i < shifts_.size(); ++i) {
    if (shifts_[i].step <= prev) throw ConfigError("shift steps must be positive and strictly increasing");
    if (!known(shifts_[i].domain)) throw ConfigError("shift target '" + shifts_[i].domain + "' is not loaded");
    prev = shifts_[i].step;
  }
}

const std::string& active_domain(long step, const ShiftSchedule& schedule) { return schedule.active(step); }

// ---------------------------------------------------------------------------

EncodedDomain encode_domain(const Domain& d, const Vocab& vocab, std::size_t context_len,
                            double heldout_fraction) {
  if (d.corpus.size() < 10 * context_len) {
    throw ConfigError("domain '" + d.name + "' corpus has " + std::to_string(d.corpus.size()) +
                      " characters; need at least 10x context (" + std::to_string(10 * context_len) + ")");
  }
  std::vector<std::size_t> all = vocab.encode(d.corpus);
  auto held = static_cast<std::size_t>(std::floor(static_cast<double>(all.size()) * heldout_fraction));
  held = std::max(held, context_len + 1);
  EncodedDomain out;
  out.name = d.name;
  out.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(held));
  out.heldout.assign(all.end() - static_cast<std::ptrdiff_t>(held), all.end());
  if (out.train.size() < context_len + 1) throw ConfigError("domain '" + d.name + "' too short to train on");
  return out;
}

Batch sample_batch(std::span<const std::size_t> tokens, Rng& rng, std::size_t context_len,
                   std::size_t batch_size) {
  if (tokens.size() < context_len + 1) {
    throw ConfigError("corpus of " + std::to_string(tokens.size()) + " tokens is too short for context " +
                      std::to_string(context_len));
  }
  Batch b;
  b.batch_size = batch_size;
  b.seq_len = context_len;
  b.inputs.reserve(batch_size * context_len);
  b.targets.reserve(batch_size * context_len);
  const std::size_t starts = tokens.size() - context_len;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t off = rng.below(starts);
    b.inputs.insert(b.inputs.end(), tokens.begin() + static_cast<std::ptrdiff_t>(off),
                    tokens.begin() + static_cast<std::ptrdiff_t>(off + context_len));
    b.targets.insert(b.targets.end(), tokens.begin() + static_cast<std::ptrdiff_t>(off + 1),
                     tokens.begin() + static_cast<std::ptrdiff_t>(off + context_len + 1));
  }
  return b;
}

// ---------------------------------------------------------------------------

std::string to_string(SyntheticKind k) { return k == SyntheticKind::ProseLike ? "prose_like" : "code_like"; }

SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "prose_like") return SyntheticKind::ProseLike;
  if (s == "code_like") return SyntheticKind::CodeLike;
  throw ConfigError("unknown synthetic kind '" + s + "' (expected prose_like or code_like)");
}

namespace {

// Draws an index with probability proportional to 1 / (rank + 1)^s.
class ZipfSampler {
 public:
  ZipfSampler(std::size_t n, double s) : cdf_(n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += 1.0 / std::pow(static_cast<double>(i + 1), s);
      cdf_[i] = acc;
    }
    for (double& c : cdf_) c /= acc;
  }
  std::size_t operator()(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

std::vector<std::string> make_lexicon(Rng& rng, std::size_t count, std::size_t min_syl, std::size_t max_syl,
                                      std::string_view onsets, std::string_view vowels, std::string_view codas) {
  std::set<std::string> seen;
  std::vector<std::string> words;
  while (words.size() < count) {
    const std::size_t syl = min_syl + rng.below(max_syl - min_syl + 1);
    std::string w;
    for (std::size_t s = 0; s < syl; ++s) {
      w += onsets[rng.below(onsets.size())];
      w += vowels[rng.below(vowels.size())];
      if (rng.uniform() < 0.3) w += codas[rng.below(codas.size())];
    }
    if (seen.insert(w).second) words.push_back(w);
  }
  return words;
}

std::string prose_like(std::uint64_t seed, std::size_t length) {
  Rng rng = Rng::stream(seed, 0x9e05e);
  const auto lexicon = make_lexicon(rng, 600, 1, 3, "bcdfghjklmnprstvwy", "aeiouaeio", "nrstlm");
  const ZipfSampler pick(lexicon.size(), 1.1);
  std::string out;
  out.reserve(length + 64);
  while (out.size() < length) {
    const std::size_t words = 4 + rng.below(11);
    for (std::size_t i = 0; i < words; ++i) {
      if (i) out += ' ';
      out += lexicon[pick(rng)];
    }
    out += ". ";
  }
  out.resize(length);
  return out;
}

class CodeWriter {
 public:
  CodeWriter(Rng& rng, std::string& out) : rng_(rng), out_(out) {
    idents_ = make_lexicon(rng_, 80, 1, 2, "bcdfgklmnprstxz", "aeiou", "_");
    for (auto& id : idents_) {
      if (rng_.uniform() < 0.35) id += "_" + std::to_string(rng_.below(10));
      if (rng_.uniform() < 0.2) id[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(id[0])));
    }
  }

  void function() {
    out_ += "fn " + ident() + "(" + ident() + ", " + ident() + ") {\n";
    block(1);
    out_ += "}\n\n";
  }

 private:
  std::string ident() { return idents_[pick_(rng_)]; }
  std::string number() { return std::to_string(rng_.below(100)); }
  std::string operand() { return rng_.uniform() < 0.6 ? ident() : number(); }
  std::string expr() {
    static constexpr const char* kOps[] = {" + ", " - ", " * ", " / ", " % "};
    std::string e = operand();
    const std::size_t terms = rng_.below(3);
    for (std::size_t i = 0; i < terms; ++i) e += kOps[rng_.below(5)] + operand();
    if (rng_.uniform() < 0.3) e = ident() + "(" + e + ")";
    return e;
  }
  std::string cond() {
    static constexpr const char* kCmp[] = {" < ", " > ", " == ", " != ", " <= "};
    return operand() + kCmp[rng_.below(5)] + operand();
  }
  void indent(std::size_t depth) { out_.append(4 * depth, ' '); }

  void block(std::size_t depth) {
    const std::size_t stmts = 2 + rng_.below(4);
    for (std::size_t i = 0; i < stmts; ++i) {
      const double u = rng_.uniform();
      indent(depth);
      if (depth < 3 && u < 0.2) {
        out_ += "if (" + cond() + ") {\n";
        block(depth + 1);
        indent(depth);
        out_ += "}\n";
      } else if (depth < 3 && u < 0.3) {
        const std::string i_name = ident();
        out_ += "for (" + i_name + " = 0; " + i_name + " < " + operand() + "; " + i_name + "++) {\n";
        block(depth + 1);
        indent(depth);
        out_ += "}\n";
      } else if (u < 0.65) {
        out_ += "let " + ident() + " = " + expr() + ";\n";
      } else if (u < 0.85) {
        out_ += ident() + "[" + operand() + "] = " + expr() + ";\n";
      } else {
        out_ += "return " + expr() + ";\n";
      }
    }
  }

  Rng& rng_;
  std::string& out_;
  std::vector<std::string> idents_;
  ZipfSampler pick_{80, 1.0};
};

std::string code_like(std::uint64_t seed, std::size_t length) {
  Rng rng = Rng::stream(seed, 0xc0de);
  std::string out;
  out.reserve(length + 1024);
  CodeWriter w(rng, out);
  while (out.size() < length) w.function();
  out.resize(length);
  return out;
}

}  // namespace

Domain generate_synthetic_domain(SyntheticKind kind, std::uint64_t seed, std::size_t length, std::string name) {
  if (length < kMinSyntheticLength) {
    throw ConfigError("synthetic corpus length must be at least " + std::to_string(kMinSyntheticLength));
  }
  Domain d;
  d.name = name.empty() ? to_string(kind) : std::move(name);
  d.corpus = kind == SyntheticKind::ProseLike ? prose_like(seed, length) : code_like(seed, length);
  d.source = "synthetic:" + to_string(kind) + ":seed=" + std::to_string(seed) + ":length=" + std::to_string(length);
  return d;
}

double unigram_tv_distance(std::string_view a, std::string_view b) {
  std::array<double, 256> pa{}, pb{};
  for (unsigned char c : a) pa[c] += 1.0;
  for (unsigned char c : b) pb[c] += 1.0;
  double tv = 0.0;
  for (std::size_t i = 0; i < 256; ++i) {
    const double x = a.empty() ? 0.0 : pa[i] / static_cast<double>(a.size());
    const double y = b.empty() ? 0.0 : pb[i] / static_cast<double>(b.size());
    tv += std::abs(x - y);
  }
  return 0.5 * tv;
}

Domain load_domain_file(const std::string& name, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open corpus file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  Domain d{name, ss.str(), path};
  if (d.corpus.empty()) throw ConfigError("corpus file '" + path + "' is empty");
  return d;
}

}  // namespace moemarket
