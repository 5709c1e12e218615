#include "seqrl/common.hpp"

#include <sstream>

#include "seqrl/random.hpp"

namespace seqrl {

std::string_view to_string(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::Parse: return "parse";
    case ErrorCategory::Schema: return "schema";
    case ErrorCategory::EmptyDataset: return "empty_dataset";
    case ErrorCategory::Config: return "config";
    case ErrorCategory::Shape: return "shape";
    case ErrorCategory::Numeric: return "numeric";
    case ErrorCategory::Io: return "io";
    case ErrorCategory::Sampling: return "sampling";
  }
  return "unknown";
}

void fail(ErrorCategory category, const std::string& message) {
  throw Error(category, message);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
  // FNV-1a over the name, then mixed with the master seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(master) ^ h);
}

std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

std::string serialize_rng(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng deserialize_rng(const std::string& text) {
  Rng rng;
  std::istringstream in(text);
  in >> rng;
  if (!in) fail(ErrorCategory::Parse, "corrupt random stream state");
  return rng;
}

}  // namespace seqrl
