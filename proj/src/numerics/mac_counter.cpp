#include "ditopt/numerics/mac_counter.hpp"

namespace ditopt {

namespace {
thread_local MacCounter* active_counter = nullptr;
thread_local const char* active_category = "other";
}  // namespace

MacCounter::MacCounter() : parent_(active_counter) { active_counter = this; }

MacCounter::~MacCounter() { active_counter = parent_; }

std::uint64_t MacCounter::category(const std::string& name) const {
  auto it = by_category_.find(name);
  return it == by_category_.end() ? 0 : it->second;
}

void MacCounter::add(std::uint64_t macs) {
  for (MacCounter* c = active_counter; c != nullptr; c = c->parent_) {
    c->total_ += macs;
    c->by_category_[active_category] += macs;
  }
}

MacCategory::MacCategory(const char* name) : previous_(active_category) { active_category = name; }

MacCategory::~MacCategory() { active_category = previous_; }

}  // namespace ditopt
