#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace ditopt {

/// Counts multiply-accumulates issued by forward matmul/conv ops on the
/// current thread while in scope. Scopes nest; every enclosing counter sees
/// every MAC. One MAC is one FLOP in all reports.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t total() const noexcept { return total_; }
  const std::map<std::string, std::uint64_t>& by_category() const noexcept { return by_category_; }
  std::uint64_t category(const std::string& name) const;

  /// Called by ops. No-op when no counter is active.
  static void add(std::uint64_t macs);

 private:
  MacCounter* parent_;
  std::uint64_t total_ = 0;
  std::map<std::string, std::uint64_t> by_category_;
};

/// Tags MACs issued while in scope with a component name
/// ("embeddings", "attention", "mlp", "adaln", "final").
class MacCategory {
 public:
  explicit MacCategory(const char* name);
  ~MacCategory();
  MacCategory(const MacCategory&) = delete;
  MacCategory& operator=(const MacCategory&) = delete;

 private:
  const char* previous_;
};

}  // namespace ditopt
