#pragma once

#include <cstddef>
#include <map>
#include <mutex>
#include <string>

namespace hafusion {

// Process-wide registry for recoverable numeric conditions (e.g. an all-zero
// slice fed to l1_normalize). Tests read counts; the CLI prints a summary.
class Warnings {
 public:
  static Warnings& instance() {
    static Warnings w;
    return w;
  }

  void record(const std::string& category) {
    std::lock_guard<std::mutex> lock(mu_);
    ++counts_[category];
  }

  std::size_t count(const std::string& category) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = counts_.find(category);
    return it == counts_.end() ? 0 : it->second;
  }

  std::map<std::string, std::size_t> snapshot() const {
    std::lock_guard<std::mutex> lock(mu_);
    return counts_;
  }

  void reset() {
    std::lock_guard<std::mutex> lock(mu_);
    counts_.clear();
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::size_t> counts_;
};

inline void warn(const std::string& category) { Warnings::instance().record(category); }

}  // namespace hafusion
